//! Generates a labeled phantom, normalizes it and writes it as an MMV1 file.

use masm::backbone::{CLASS_NAMES, MODALITY_NAMES};
use masm::data::{gen_phantom, normalize, read_volume, write_volume, PhantomSpec};

fn main() -> anyhow::Result<()> {
    let vol = gen_phantom(&PhantomSpec::new(7, 32))?;
    for (c, name) in CLASS_NAMES.iter().enumerate() {
        let n = vol.label_mask(c).unwrap().iter().filter(|&&m| m).count();
        println!("{name}: {n} voxels");
    }
    let norm = normalize(&vol)?;
    for (m, name) in norm.modalities.iter().zip(MODALITY_NAMES) {
        let nz: Vec<f64> = m.data().iter().copied().filter(|&v| v != 0.0).collect();
        let mean = nz.iter().sum::<f64>() / nz.len() as f64;
        println!("{name}: {} nonzero voxels, mean after normalize {mean:.2e}", nz.len());
    }
    let dir = std::env::temp_dir();
    let path = dir.join(format!("{}.mmv", vol.case_id));
    write_volume(&path, &vol)?;
    let back = read_volume(&path)?;
    println!("wrote {} ({} bytes), labels round-trip: {}", path.display(), std::fs::metadata(&path)?.len(), back.label == vol.label);
    Ok(())
}
