//! Multi-modal volumes: synthetic phantoms, preprocessing and the MMV1 file format.
//!
//! MMV1 layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "MMVOL\0\0\x01"
//! D H W        3 x u32
//! modalities   u32
//! has_label    u32      0 or 1
//! rasters      modalities x D*H*W f32, row-major
//! label        3 x D*H*W u8 in {0, 1}, channel-major (ET, WT, TC)
//! ```

use std::fs;
use std::path::Path;

use crate::backbone::{CLASSES, MODALITIES, MODALITY_NAMES};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

pub const MMV_MAGIC: [u8; 8] = *b"MMVOL\0\0\x01";
const HEADER_LEN: usize = 8 + 5 * 4;

/// Label channel indices.
pub const ET: usize = 0;
pub const WT: usize = 1;
pub const TC: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalVolume {
    pub case_id: String,
    pub extents: [usize; 3],
    /// One `[D, H, W]` raster per modality (T2, T1, T1-CE, FLAIR).
    pub modalities: Vec<Tensor>,
    /// Binary `[D, H, W, 3]`, channels (ET, WT, TC).
    pub label: Option<Tensor>,
}

impl MultiModalVolume {
    pub fn voxels(&self) -> usize {
        self.extents.iter().product()
    }

    /// Modalities as `[D, H, W, 1]` network inputs.
    pub fn inputs(&self) -> Result<Vec<Tensor>> {
        let [d, h, w] = self.extents;
        self.modalities.iter().map(|m| m.reshape([d, h, w, 1])).collect()
    }

    /// Label channel `c` as a boolean raster.
    pub fn label_mask(&self, c: usize) -> Option<Vec<bool>> {
        self.label
            .as_ref()
            .map(|l| l.data()[c..].iter().step_by(CLASSES).map(|&v| v > 0.5).collect())
    }

    fn check(&self) -> Result<()> {
        let n = self.voxels();
        if self.extents.contains(&0) {
            return Err(Error::invalid("volume", "zero extent"));
        }
        if let Some(m) = self.modalities.iter().find(|m| m.numel() != n) {
            return Err(Error::shape(
                "volume",
                format!("modality {:?} vs extents {:?}", m.shape(), self.extents),
            ));
        }
        if let Some(l) = &self.label {
            if l.numel() != n * CLASSES {
                return Err(Error::shape(
                    "volume",
                    format!("label {:?} vs extents {:?}", l.shape(), self.extents),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadiusRange {
    pub min: f64,
    pub max: f64,
}

impl RadiusRange {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }
}

/// Contrast levels of one modality: background tissue, then the parts of
/// WT outside TC, TC outside ET, and ET.
pub type Contrast = [f64; 4];

/// Parameters of the nested-ellipsoid phantom. Radii are fractions of the
/// volume size.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub seed: u64,
    pub size: usize,
    /// Inclusive tumor count range.
    pub tumors: (usize, usize),
    pub wt_radius: RadiusRange,
    pub tc_radius: RadiusRange,
    pub et_radius: RadiusRange,
    pub contrast: [Contrast; MODALITIES],
    pub noise: f64,
}

/// Head semi-axis as a fraction of the volume size.
const HEAD_RADIUS: f64 = 0.45;

impl PhantomSpec {
    pub fn new(seed: u64, size: usize) -> Self {
        Self {
            seed,
            size,
            tumors: (1, 1),
            wt_radius: RadiusRange::new(0.22, 0.30),
            tc_radius: RadiusRange::new(0.13, 0.19),
            et_radius: RadiusRange::new(0.06, 0.10),
            contrast: [
                [1.0, 2.0, 1.6, 1.6],
                [1.0, 0.9, 0.45, 0.6],
                [1.0, 1.0, 0.7, 2.2],
                [1.0, 2.2, 1.5, 1.5],
            ],
            noise: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 2 {
            return Err(Error::Config(format!("phantom size {} too small", self.size)));
        }
        if self.tumors.0 > self.tumors.1 {
            return Err(Error::Config(format!("tumor count range {:?}", self.tumors)));
        }
        for (name, r) in [("wt", self.wt_radius), ("tc", self.tc_radius), ("et", self.et_radius)] {
            if !(r.min > 0.0 && r.min <= r.max && r.max.is_finite()) {
                return Err(Error::Config(format!("{name} radius range {r:?}")));
            }
        }
        if !(self.wt_radius.min > self.tc_radius.max && self.tc_radius.min > self.et_radius.max) {
            return Err(Error::Config(
                "radius ranges must be strictly nested: wt > tc > et".into(),
            ));
        }
        if self.wt_radius.max >= HEAD_RADIUS {
            return Err(Error::Config(format!(
                "wt radius {} does not fit inside the head",
                self.wt_radius.max
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise {}", self.noise)));
        }
        Ok(())
    }
}

struct Tumor {
    center: [f64; 3],
    radii: [[f64; 3]; 3],
}

fn inside(p: [f64; 3], c: [f64; 3], r: [f64; 3]) -> bool {
    (0..3).map(|i| ((p[i] - c[i]) / r[i]).powi(2)).sum::<f64>() <= 1.0
}

/// Generates a labeled phantom, deterministic in `spec`.
pub fn gen_phantom(spec: &PhantomSpec) -> Result<MultiModalVolume> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let s = spec.size as f64;
    let mid = (s - 1.0) / 2.0;
    let count = rng.int_range(spec.tumors.0 as u64, spec.tumors.1 as u64) as usize;
    let slack = (HEAD_RADIUS - spec.wt_radius.max) * s * 0.8;
    let tumors: Vec<Tumor> = (0..count)
        .map(|_| {
            let center = [0; 3].map(|_: i32| mid + rng.uniform_range(-slack, slack));
            let mut draw = |r: RadiusRange| [0; 3].map(|_: i32| rng.uniform_range(r.min, r.max) * s);
            let radii = [draw(spec.wt_radius), draw(spec.tc_radius), draw(spec.et_radius)];
            Tumor { center, radii }
        })
        .collect();

    let n = spec.size.pow(3);
    // 0 outside head, 1 tissue, 2 WT, 3 TC, 4 ET.
    let mut region = vec![0u8; n];
    let mut label = vec![0.0; n * CLASSES];
    for (idx, r) in region.iter_mut().enumerate() {
        let p = [
            (idx / (spec.size * spec.size)) as f64,
            ((idx / spec.size) % spec.size) as f64,
            (idx % spec.size) as f64,
        ];
        if !inside(p, [mid; 3], [HEAD_RADIUS * s; 3]) {
            continue;
        }
        *r = 1;
        for t in &tumors {
            for (level, class) in [(2u8, WT), (3, TC), (4, ET)] {
                if inside(p, t.center, t.radii[(level - 2) as usize]) {
                    *r = (*r).max(level);
                    label[idx * CLASSES + class] = 1.0;
                }
            }
        }
    }

    let modalities = spec
        .contrast
        .iter()
        .map(|levels| {
            let data = region
                .iter()
                .map(|&r| {
                    if r == 0 {
                        0.0
                    } else {
                        levels[r as usize - 1] + spec.noise * rng.normal()
                    }
                })
                .collect();
            Tensor::new([spec.size; 3], data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MultiModalVolume {
        case_id: format!("phantom-{:06}", spec.seed),
        extents: [spec.size; 3],
        modalities,
        label: Some(Tensor::new([spec.size, spec.size, spec.size, CLASSES], label)?),
    })
}

/// Standardizes each modality over its nonzero voxels; zeros stay zero.
pub fn normalize(vol: &MultiModalVolume) -> Result<MultiModalVolume> {
    let mut out = vol.clone();
    for (i, m) in out.modalities.iter_mut().enumerate() {
        let name = MODALITY_NAMES.get(i).copied().unwrap_or("?");
        let nz: Vec<f64> = m.data().iter().copied().filter(|&v| v != 0.0).collect();
        if nz.is_empty() {
            return Err(Error::invalid(
                "normalize",
                format!("modality {i} ({name}) has no nonzero voxels"),
            ));
        }
        let n = nz.len() as f64;
        let mean = nz.iter().sum::<f64>() / n;
        let std = (nz.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        if !(std > 0.0) {
            return Err(Error::invalid(
                "normalize",
                format!("modality {i} ({name}) has constant nonzero voxels"),
            ));
        }
        for v in m.data_mut() {
            if *v != 0.0 {
                *v = (*v - mean) / std;
            }
        }
    }
    Ok(out)
}

/// Reverses the volume (all modalities and labels) along one spatial axis.
pub fn mirror(vol: &MultiModalVolume, axis: usize) -> MultiModalVolume {
    let [d, h, w] = vol.extents;
    let src = |idx: usize| {
        let (z, y, x) = (idx / (h * w), (idx / w) % h, idx % w);
        let (z, y, x) = match axis {
            0 => (d - 1 - z, y, x),
            1 => (z, h - 1 - y, x),
            _ => (z, y, w - 1 - x),
        };
        (z * h + y) * w + x
    };
    let flip = |t: &Tensor, channels: usize| {
        let data = t.data();
        let mut out = Vec::with_capacity(data.len());
        for idx in 0..vol.voxels() {
            let s = src(idx) * channels;
            out.extend_from_slice(&data[s..s + channels]);
        }
        Tensor::new(t.shape().to_vec(), out).unwrap()
    };
    MultiModalVolume {
        case_id: vol.case_id.clone(),
        extents: vol.extents,
        modalities: vol.modalities.iter().map(|m| flip(m, 1)).collect(),
        label: vol.label.as_ref().map(|l| flip(l, CLASSES)),
    }
}

/// One draw of augmentation parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Augmentation {
    pub mirror: [bool; 3],
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Augmentation {
    pub fn identity(modalities: usize) -> Self {
        Self {
            mirror: [false; 3],
            shift: vec![0.0; modalities],
            scale: vec![1.0; modalities],
        }
    }

    pub fn sample(modalities: usize, rng: &mut Rng) -> Self {
        let mirror = [0; 3].map(|_: i32| rng.bernoulli(0.5));
        let mut shift = Vec::with_capacity(modalities);
        let mut scale = Vec::with_capacity(modalities);
        for _ in 0..modalities {
            shift.push(rng.uniform_range(-0.1, 0.1));
            scale.push(rng.uniform_range(0.9, 1.1));
        }
        Self {
            mirror,
            shift,
            scale,
        }
    }

    /// Mirrors, then maps nonzero intensities `v -> v * scale + shift`.
    pub fn apply(&self, vol: &MultiModalVolume) -> MultiModalVolume {
        let mut out = vol.clone();
        for (axis, &m) in self.mirror.iter().enumerate() {
            if m {
                out = mirror(&out, axis);
            }
        }
        for (i, t) in out.modalities.iter_mut().enumerate() {
            let (a, b) = (self.scale[i], self.shift[i]);
            if a == 1.0 && b == 0.0 {
                continue;
            }
            for v in t.data_mut() {
                if *v != 0.0 {
                    *v = *v * a + b;
                }
            }
        }
        out
    }
}

/// Random mirroring, intensity shift and scale.
pub fn augment(vol: &MultiModalVolume, rng: &mut Rng) -> MultiModalVolume {
    Augmentation::sample(vol.modalities.len(), rng).apply(vol)
}

/// Serializes to MMV1 bytes. Intensities are stored as f32.
pub fn encode_volume(vol: &MultiModalVolume) -> Result<Vec<u8>> {
    vol.check()?;
    let n = vol.voxels();
    let mut out = Vec::with_capacity(HEADER_LEN + vol.modalities.len() * n * 4 + n * CLASSES);
    out.extend_from_slice(&MMV_MAGIC);
    for v in vol.extents {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&(vol.modalities.len() as u32).to_le_bytes());
    out.extend_from_slice(&(vol.label.is_some() as u32).to_le_bytes());
    for m in &vol.modalities {
        for &v in m.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    if let Some(l) = &vol.label {
        for c in 0..CLASSES {
            out.extend(l.data()[c..].iter().step_by(CLASSES).map(|&v| (v > 0.5) as u8));
        }
    }
    Ok(out)
}

/// Parses MMV1 bytes. `path` is used only in error messages.
pub fn decode_volume(bytes: &[u8], path: &Path, case_id: &str) -> Result<MultiModalVolume> {
    let fail = |d: String| Error::format(path, d);
    if bytes.len() < HEADER_LEN {
        return Err(fail(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if bytes[..8] != MMV_MAGIC {
        return Err(fail("bad magic".into()));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let extents = [field(0), field(1), field(2)];
    let (mods, has_label) = (field(3), field(4));
    if extents.contains(&0) {
        return Err(fail(format!("zero extent in {extents:?}")));
    }
    if has_label > 1 {
        return Err(fail(format!("has_label field is {has_label}")));
    }
    let n = extents
        .iter()
        .try_fold(1usize, |a, &e| a.checked_mul(e))
        .ok_or_else(|| fail(format!("extents {extents:?} overflow")))?;
    let expected = n
        .checked_mul(4)
        .and_then(|r| r.checked_mul(mods))
        .and_then(|r| r.checked_add(has_label * n * CLASSES))
        .and_then(|r| r.checked_add(HEADER_LEN))
        .ok_or_else(|| fail("payload size overflows".into()))?;
    if bytes.len() != expected {
        return Err(fail(format!(
            "expected {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let mut pos = HEADER_LEN;
    let mut modalities = Vec::with_capacity(mods);
    for _ in 0..mods {
        let data = bytes[pos..pos + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        modalities.push(Tensor::new(extents, data)?);
        pos += 4 * n;
    }
    let label = if has_label == 1 {
        let mut data = vec![0.0; n * CLASSES];
        for c in 0..CLASSES {
            for (i, &b) in bytes[pos..pos + n].iter().enumerate() {
                if b > 1 {
                    return Err(fail(format!("label byte {b} at channel {c} voxel {i}")));
                }
                data[i * CLASSES + c] = b as f64;
            }
            pos += n;
        }
        Some(Tensor::new([extents[0], extents[1], extents[2], CLASSES], data)?)
    } else {
        None
    };
    Ok(MultiModalVolume {
        case_id: case_id.to_string(),
        extents,
        modalities,
        label,
    })
}

/// Writes atomically through a sibling temporary file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_volume(path: impl AsRef<Path>, vol: &MultiModalVolume) -> Result<()> {
    write_atomic(path.as_ref(), &encode_volume(vol)?)
}

/// Reads an MMV1 file; the case id is the file stem.
pub fn read_volume(path: impl AsRef<Path>) -> Result<MultiModalVolume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_volume(&bytes, path, &id)
}

/// Reads every `*.mmv` file in `dir`, ordered by file name.
pub fn read_volumes(dir: impl AsRef<Path>) -> Result<Vec<MultiModalVolume>> {
    let dir = dir.as_ref();
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|x| x == "mmv"))
        .collect();
    paths.sort();
    paths.iter().map(read_volume).collect()
}

/// One generated case as listed in `manifest.tsv`.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub case_id: String,
    pub seed: u64,
    pub file: String,
}

/// Seed of the `index`-th case of a dataset.
pub fn case_seed(base: u64, index: usize) -> u64 {
    base.wrapping_mul(1000).wrapping_add(index as u64)
}

/// Writes `count` phantoms and `manifest.tsv` into `dir`.
pub fn generate_dataset(dir: impl AsRef<Path>, count: usize, size: usize, seed: u64, noise: f64) -> Result<Vec<ManifestEntry>> {
    let dir = dir.as_ref();
    let specs: Vec<PhantomSpec> = (0..count)
        .map(|i| PhantomSpec {
            noise,
            ..PhantomSpec::new(case_seed(seed, i), size)
        })
        .collect();
    for spec in &specs {
        spec.validate()?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::from("case_id\tseed\tfile\n");
    let mut entries = Vec::with_capacity(count);
    for spec in &specs {
        let vol = gen_phantom(spec)?;
        let file = format!("{}.mmv", vol.case_id);
        write_volume(dir.join(&file), &vol)?;
        manifest.push_str(&format!("{}\t{}\t{}\n", vol.case_id, spec.seed, file));
        entries.push(ManifestEntry {
            case_id: vol.case_id,
            seed: spec.seed,
            file,
        });
    }
    write_atomic(&dir.join("manifest.tsv"), manifest.as_bytes())?;
    Ok(entries)
}
