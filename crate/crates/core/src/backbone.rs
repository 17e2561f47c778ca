//! Shared-weight U-Net encoder and skip-connected decoder.
//!
//! Volumes and feature maps are channel-last: `[D, H, W, C]`. Encoder layer
//! `j` (1-based) sees extent `V / 2^j` and emits `C_j / 4` channels per
//! modality; the four modality streams run through the same weights.
//! A full-resolution stem block feeds the last decoder stage so the output
//! is not limited to the resolution of layer 1.

use crate::error::{Error, Result};
use crate::nn::{Bound, ConvBlock, Linear, ParamStore};
use crate::tensor::{Rng, Var};

pub const MODALITIES: usize = 4;
pub const CLASSES: usize = 3;

/// Modality order used everywhere: T2, T1, T1-CE, FLAIR.
pub const MODALITY_NAMES: [&str; MODALITIES] = ["T2", "T1", "T1CE", "FLAIR"];
/// Output channel order.
pub const CLASS_NAMES: [&str; CLASSES] = ["ET", "WT", "TC"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub volume_size: usize,
    pub depth: usize,
    pub channels: Vec<usize>,
}

impl BackboneConfig {
    /// Desk-scale default: `V = 32`, four layers.
    pub fn desk() -> Self {
        Self {
            volume_size: 32,
            depth: 4,
            channels: vec![16, 32, 64, 128],
        }
    }

    /// Six-layer configuration with the published channel widths.
    pub fn paper_scale() -> Self {
        Self {
            volume_size: 128,
            depth: 6,
            channels: vec![96, 128, 192, 256, 384, 512],
        }
    }

    /// Tiny configuration used by gradient checks.
    pub fn tiny() -> Self {
        Self {
            volume_size: 8,
            depth: 2,
            channels: vec![8, 16],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let e = self.depth;
        if e == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if self.channels.len() != e {
            return Err(Error::Config(format!(
                "channels has {} entries, depth is {e}",
                self.channels.len()
            )));
        }
        if self.volume_size == 0 || self.volume_size % (1 << e) != 0 {
            return Err(Error::Config(format!(
                "volume size {} not divisible by 2^{e}",
                self.volume_size
            )));
        }
        if let Some(c) = self.channels.iter().find(|&&c| c == 0 || c % 4 != 0) {
            return Err(Error::Config(format!("channel width {c} not divisible by 4")));
        }
        if self.channels.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config(format!(
                "channels {:?} must be non-decreasing",
                self.channels
            )));
        }
        Ok(())
    }

    /// `C_j` for 1-based layer `j`.
    pub fn width(&self, layer: usize) -> usize {
        self.channels[layer - 1]
    }

    /// Per-modality width `C_j / 4`.
    pub fn modality_width(&self, layer: usize) -> usize {
        self.width(layer) / MODALITIES
    }

    /// Spatial extent `V / 2^j`.
    pub fn extent(&self, layer: usize) -> usize {
        self.volume_size >> layer
    }

    /// Token count `N_j = (V / 2^j)^3`.
    pub fn tokens(&self, layer: usize) -> usize {
        self.extent(layer).pow(3)
    }

    /// Shape of `F^i_j` as `[d, h, w, C_j / 4]`.
    pub fn feature_shape(&self, layer: usize) -> [usize; 4] {
        let e = self.extent(layer);
        [e, e, e, self.modality_width(layer)]
    }

    fn stem_width(&self) -> usize {
        self.modality_width(1)
    }

    fn stage_out(&self, layer: usize) -> usize {
        if layer == 1 {
            self.width(1) / 2
        } else {
            self.width(layer - 1)
        }
    }
}

/// Per-modality encoder outputs.
pub struct FeatureSet<'t> {
    /// `stem[i]`: full-resolution `[V, V, V, C_1 / 4]`.
    pub stem: Vec<Var<'t>>,
    /// `features[i][j - 1]`: `F^i_j`, shape `[V/2^j; 3] x C_j / 4`.
    pub features: Vec<Vec<Var<'t>>>,
}

impl<'t> FeatureSet<'t> {
    pub fn get(&self, modality: usize, layer: usize) -> Var<'t> {
        self.features[modality][layer - 1]
    }

    /// The four modality maps of one layer.
    pub fn layer(&self, layer: usize) -> [Var<'t>; MODALITIES] {
        std::array::from_fn(|i| self.features[i][layer - 1])
    }
}

/// Fused skip features handed to the decoder.
pub struct FusedSkip<'t> {
    /// Channel concatenation of the four stems, `[V, V, V, C_1]`.
    pub full_res: Var<'t>,
    /// `levels[j - 1]`: `F'_j`, `[V/2^j; 3] x C_j`. `None` marks a missing level.
    pub levels: Vec<Option<Var<'t>>>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    stem: ConvBlock,
    layers: Vec<[ConvBlock; 2]>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, cfg: &BackboneConfig, rng: &mut Rng) -> Self {
        let stem = ConvBlock::new(store, "encoder.stem", 1, cfg.stem_width(), 3, 1, rng);
        let mut cin = cfg.stem_width();
        let mut layers = Vec::with_capacity(cfg.depth);
        for j in 1..=cfg.depth {
            let c = cfg.modality_width(j);
            let down = ConvBlock::new(store, &format!("encoder.layer{j}.down"), cin, c, 3, 2, rng);
            let conv = ConvBlock::new(store, &format!("encoder.layer{j}.conv"), c, c, 3, 1, rng);
            layers.push([down, conv]);
            cin = c;
        }
        Self { stem, layers }
    }

    /// Runs one modality `[V, V, V, 1]` through the shared weights.
    pub fn forward_modality<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<(Var<'t>, Vec<Var<'t>>)> {
        let stem = self.stem.forward(p, x)?;
        let mut h = stem;
        let mut feats = Vec::with_capacity(self.layers.len());
        for [down, conv] in &self.layers {
            h = conv.forward(p, down.forward(p, h)?)?;
            feats.push(h);
        }
        Ok((stem, feats))
    }

    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        cfg: &BackboneConfig,
        modalities: &[Var<'t>],
    ) -> Result<FeatureSet<'t>> {
        if modalities.len() != MODALITIES {
            return Err(Error::shape(
                "encode",
                format!("expected {MODALITIES} modalities, got {}", modalities.len()),
            ));
        }
        let v = cfg.volume_size;
        let mut stem = Vec::with_capacity(MODALITIES);
        let mut features = Vec::with_capacity(MODALITIES);
        for m in modalities {
            if m.shape() != [v, v, v, 1] {
                return Err(Error::shape(
                    "encode",
                    format!("modality shape {:?}, config expects [{v}, {v}, {v}, 1]", m.shape()),
                ));
            }
            let (s, f) = self.forward_modality(p, *m)?;
            stem.push(s);
            features.push(f);
        }
        Ok(FeatureSet { stem, features })
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    /// `stages[j - 1]` upsamples from layer `j` to layer `j - 1`.
    stages: Vec<ConvBlock>,
    head_block: ConvBlock,
    head: Linear,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, cfg: &BackboneConfig, rng: &mut Rng) -> Self {
        let e = cfg.depth;
        let mut stages = Vec::with_capacity(e);
        for j in 1..=e {
            let cin = if j == e { cfg.width(e) } else { 2 * cfg.width(j) };
            stages.push(ConvBlock::new(
                store,
                &format!("decoder.stage{j}"),
                cin,
                cfg.stage_out(j),
                3,
                1,
                rng,
            ));
        }
        let head_in = cfg.stage_out(1) + cfg.width(1);
        let head_mid = cfg.width(1) / 2;
        let head_block = ConvBlock::new(store, "decoder.head.block", head_in, head_mid, 1, 1, rng);
        let head = Linear::new(store, "decoder.head.out", head_mid, CLASSES, true, rng);
        Self {
            stages,
            head_block,
            head,
        }
    }

    /// Pre-sigmoid logits `[V, V, V, 3]`.
    pub fn logits<'t>(&self, p: &Bound<'t>, cfg: &BackboneConfig, fused: &FusedSkip<'t>) -> Result<Var<'t>> {
        let e = cfg.depth;
        if fused.levels.len() != e {
            return Err(Error::shape(
                "decode",
                format!("expected {e} skip levels, got {}", fused.levels.len()),
            ));
        }
        let level = |j: usize| -> Result<Var<'t>> {
            let v = fused.levels[j - 1].ok_or_else(|| {
                Error::invalid("decode", format!("missing skip level {j}"))
            })?;
            let x = cfg.extent(j);
            let want = [x, x, x, cfg.width(j)];
            if v.shape() != want {
                return Err(Error::shape(
                    "decode",
                    format!("skip level {j} has shape {:?}, expected {want:?}", v.shape()),
                ));
            }
            Ok(v)
        };
        let v = cfg.volume_size;
        if fused.full_res.shape() != [v, v, v, cfg.width(1)] {
            return Err(Error::shape(
                "decode",
                format!("full-resolution skip has shape {:?}", fused.full_res.shape()),
            ));
        }
        let tape = fused.full_res.tape();
        let mut x = level(e)?;
        for j in (1..=e).rev() {
            let up = self.stages[j - 1].forward(p, x)?.upsample2x()?;
            let skip = if j == 1 { fused.full_res } else { level(j - 1)? };
            x = tape.concat(&[up, skip], 3)?;
        }
        let h = self.head_block.forward(p, x)?;
        self.head.forward(p, h)
    }

    /// Probabilities in (0, 1), channels ordered (ET, WT, TC).
    pub fn forward<'t>(&self, p: &Bound<'t>, cfg: &BackboneConfig, fused: &FusedSkip<'t>) -> Result<Var<'t>> {
        Ok(self.logits(p, cfg, fused)?.sigmoid())
    }
}

/// Channel-concatenates the four modality maps of one layer.
pub fn concat_modalities<'t>(maps: &[Var<'t>]) -> Result<Var<'t>> {
    let axis = maps[0].shape().len() - 1;
    maps[0].tape().concat(maps, axis)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_invariants() {
        assert!(BackboneConfig::desk().validate().is_ok());
        assert!(BackboneConfig::paper_scale().validate().is_ok());
        assert!(BackboneConfig::tiny().validate().is_ok());
        let mut c = BackboneConfig::desk();
        c.volume_size = 24;
        assert!(c.validate().is_err());
        let mut c = BackboneConfig::desk();
        c.channels[1] = 30;
        assert!(c.validate().is_err());
        let mut c = BackboneConfig::desk();
        c.channels = vec![16, 64, 32, 128];
        assert!(c.validate().is_err());
        let mut c = BackboneConfig::desk();
        c.channels.pop();
        assert!(c.validate().is_err());
    }

    #[test]
    fn shape_formula() {
        let c = BackboneConfig::desk();
        assert_eq!(c.feature_shape(2), [8, 8, 8, 8]);
        assert_eq!(c.feature_shape(4), [2, 2, 2, 32]);
        assert_eq!(c.tokens(1), 4096);
    }
}
