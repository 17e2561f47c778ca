//! Predicts a mask for a phantom with an untrained model and writes PGM previews.

use masm::backbone::BackboneConfig;
use masm::data::{gen_phantom, normalize, PhantomSpec};
use masm::inference::{predict_mask, write_previews};
use masm::{Model, ModelConfig, Toggles};

fn main() -> anyhow::Result<()> {
    let model = Model::new(ModelConfig::new(BackboneConfig::desk(), Toggles::FULL), 0)?;
    let vol = normalize(&gen_phantom(&PhantomSpec::new(3, 32))?)?;
    let mask = predict_mask(&model, &vol)?;
    let again = predict_mask(&model, &vol)?;
    let label = mask.label.as_ref().unwrap();
    let positive = label.data().iter().filter(|&&v| v == 1.0).count();
    println!("mask {:?}, {positive} positive entries, repeatable: {}", label.shape(), mask == again);
    let dir = std::env::temp_dir().join("masm-previews");
    std::fs::create_dir_all(&dir)?;
    for p in write_previews(&dir, &vol.case_id, label)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}
