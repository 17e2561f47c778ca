//! Token keep/drop decisions of a modality-aware layer in training and inference mode.

use masm::aware::{MaskMode, ModalityAware};
use masm::backbone::{BackboneConfig, MODALITIES, MODALITY_NAMES};
use masm::nn::ParamStore;
use masm::{Rng, Tape, Tensor};

fn main() -> anyhow::Result<()> {
    let cfg = BackboneConfig::desk();
    let layer_index = 2;
    let mut rng = Rng::new(3);
    let mut store = ParamStore::new();
    let layer = ModalityAware::new(&mut store, &cfg, layer_index, &mut rng);
    let shape = cfg.feature_shape(layer_index);
    let maps: Vec<Tensor> = (0..MODALITIES)
        .map(|_| Tensor::from_fn(shape.to_vec(), |_| rng.normal()))
        .collect();
    for mode in [MaskMode::Train, MaskMode::Inference] {
        let tape = Tape::new();
        let p = store.bind(&tape);
        let inputs = std::array::from_fn(|i| tape.constant(maps[i].clone()));
        let out = layer.forward(&p, &inputs, 1.0, mode, &mut rng)?;
        println!("{mode:?}: fused {:?}", out.fused.shape());
        for (m, name) in out.masks.iter().zip(MODALITY_NAMES) {
            println!("  {name:>5} keeps {}/{} tokens", m.kept(), m.len());
        }
    }
    Ok(())
}
