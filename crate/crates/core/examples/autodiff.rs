//! Reverse-mode gradients through a small expression, checked against the closed form.

use masm::{Tape, Tensor};

fn main() -> anyhow::Result<()> {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::new([2, 3], vec![0.5, -1.0, 2.0, 1.5, 0.0, -0.5])?);
    let w = tape.leaf(Tensor::new([3, 1], vec![1.0, 2.0, -1.0])?);
    // loss = sum(sigmoid(x w))
    let loss = x.matmul(w)?.sigmoid().sum_all()?;
    let grads = tape.backward(loss)?;
    println!("loss = {:.6}", loss.value().item());
    println!("dloss/dw = {:?}", grads.get_or_zeros(w).data());

    let z = masm::tensor::kernels::matmul(&x.value(), &w.value());
    let s: Vec<f64> = z.data().iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
    let closed: Vec<f64> = (0..3)
        .map(|j| (0..2).map(|i| s[i] * (1.0 - s[i]) * x.value().data()[i * 3 + j]).sum())
        .collect();
    println!("closed form = {closed:?}");
    Ok(())
}
