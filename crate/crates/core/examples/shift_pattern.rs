//! Prints the mosaic shift pattern and checks that unshift restores every token.

use masm::backbone::MODALITY_NAMES;
use masm::shift::{shift, unshift, ShiftPattern};
use masm::{Tape, Tensor};

fn main() -> anyhow::Result<()> {
    let n = 6;
    let pattern = ShiftPattern::build(n);
    for (i, name) in MODALITY_NAMES.iter().enumerate() {
        let sources: Vec<&str> = (0..n).map(|k| MODALITY_NAMES[pattern.source(i, k)]).collect();
        println!("{name:>5} <- {sources:?}");
    }
    let tape = Tape::new();
    let feats = std::array::from_fn(|i| {
        tape.constant(Tensor::from_fn([n, 1], |k| (10 * i + k) as f64))
    });
    let shifted = shift(&feats, &pattern)?;
    for (s, name) in shifted.iter().zip(MODALITY_NAMES) {
        println!("{name:>5} after shift: {:?}", s.value().data());
    }
    let back = unshift(&shifted, &pattern)?;
    let exact = back.iter().zip(&feats).all(|(b, f)| b.value() == f.value());
    println!("unshift(shift(x)) == x: {exact}");
    Ok(())
}
