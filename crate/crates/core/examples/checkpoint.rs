//! Saves model parameters, reloads them into a fresh model and detects corruption.

use masm::backbone::BackboneConfig;
use masm::checkpoint::{decode_checkpoint, encode_checkpoint, load_into, save_checkpoint};
use masm::{Model, ModelConfig, Toggles};

fn main() -> anyhow::Result<()> {
    let cfg = ModelConfig::new(BackboneConfig::desk(), Toggles::FULL);
    let trained = Model::new(cfg.clone(), 1)?;
    let path = std::env::temp_dir().join("masm-example.ckpt");
    save_checkpoint(&path, &trained.params)?;
    let mut fresh = Model::new(cfg, 2)?;
    load_into(&path, &mut fresh.params)?;
    let worst = trained
        .params
        .iter()
        .zip(fresh.params.iter())
        .map(|((_, _, a), (_, _, b))| a.max_abs_diff(b))
        .fold(0.0, f64::max);
    println!("{} parameters, {} bytes, max abs difference after reload {worst:.2e}",
        trained.parameter_count(), std::fs::metadata(&path)?.len());

    let mut bytes = encode_checkpoint(&trained.params);
    bytes[100] ^= 1;
    match decode_checkpoint(&bytes, &path) {
        Err(e) => println!("corrupted copy rejected: {e}"),
        Ok(_) => anyhow::bail!("corruption went unnoticed"),
    }
    Ok(())
}
