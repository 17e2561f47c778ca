use super::rng::Rng;
use super::tape::Var;
use super::value::Tensor;
use crate::error::{Error, Result};

/// Gumbel-Softmax over the last axis of `logits: [N, K]`.
///
/// Draws `g = -ln(-ln(u))` per entry from `rng` (row-major order), returns
/// `softmax((logits + g) / tau)`. With `hard`, the forward value is the
/// one-hot argmax of that sample and the adjoint flows through the soft
/// sample (straight-through).
pub fn gumbel_softmax<'t>(logits: Var<'t>, tau: f64, hard: bool, rng: &mut Rng) -> Result<Var<'t>> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid("gumbel_softmax", format!("tau must be > 0, got {tau}")));
    }
    let value = logits.value();
    if value.rank() != 2 {
        return Err(Error::shape("gumbel_softmax", format!("expected [N, K], got {:?}", value.shape())));
    }
    if !value.all_finite() {
        return Err(Error::Numeric("gumbel_softmax: non-finite logits".into()));
    }
    let noise = Tensor::from_fn(value.shape().to_vec(), |_| rng.gumbel());
    let tape = logits.tape();
    let soft = logits
        .add(tape.constant(noise))?
        .mul_scalar(1.0 / tau)
        .softmax();
    if !hard {
        return Ok(soft);
    }
    let onehot = one_hot_argmax(&soft.value());
    soft.straight_through(onehot)
}

/// One-hot of the row-wise argmax (first index wins ties).
pub fn one_hot_argmax(x: &Tensor) -> Tensor {
    let k = *x.shape().last().unwrap();
    let mut out = vec![0.0; x.numel()];
    for (o, row) in out.chunks_mut(k).zip(x.data().chunks(k)) {
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        o[best] = 1.0;
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn rejects_bad_tau_and_logits() {
        let tape = Tape::new();
        let mut rng = Rng::new(0);
        let l = tape.leaf(Tensor::zeros([3, 2]));
        assert!(gumbel_softmax(l, 0.0, true, &mut rng).is_err());
        assert!(gumbel_softmax(l, -1.0, false, &mut rng).is_err());
        let bad = tape.leaf(Tensor::new([1, 2], vec![f64::NAN, 0.0]).unwrap());
        assert!(gumbel_softmax(bad, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn dominant_logit_always_wins() {
        let tape = Tape::new();
        let mut rng = Rng::new(11);
        let l = tape.leaf(Tensor::new([1000, 2], [30.0, -30.0].repeat(1000)).unwrap());
        for tau in [0.1, 1.0, 5.0] {
            let y = gumbel_softmax(l, tau, true, &mut rng).unwrap().value();
            assert!(y.data().chunks(2).all(|r| r == [1.0, 0.0]));
        }
    }

    #[test]
    fn soft_rows_sum_to_one_and_hard_is_one_hot() {
        let tape = Tape::new();
        let mut rng = Rng::new(5);
        let l = tape.leaf(Tensor::from_fn([64, 2], |_| rng.normal() * 3.0));
        let s = gumbel_softmax(l, 0.7, false, &mut rng).unwrap().value();
        assert!(s.data().chunks(2).all(|r| (r[0] + r[1] - 1.0).abs() < 1e-12));
        let h = gumbel_softmax(l, 0.7, true, &mut rng).unwrap().value();
        assert!(h.data().chunks(2).all(|r| r == [1.0, 0.0] || r == [0.0, 1.0]));
    }

    #[test]
    fn hard_sample_gradient_is_soft_gradient() {
        let logits = Tensor::new([3, 2], vec![0.3, -0.2, 1.0, 0.5, -0.7, 0.1]).unwrap();
        let w = Tensor::new([3, 2], vec![1.0, -2.0, 0.5, 3.0, -1.0, 0.25]).unwrap();
        let grad = |hard: bool| {
            let tape = Tape::new();
            let l = tape.leaf(logits.clone());
            let y = gumbel_softmax(l, 0.5, hard, &mut Rng::new(9)).unwrap();
            let loss = y.mul(tape.constant(w.clone())).unwrap().sum_all().unwrap();
            tape.backward(loss).unwrap().get(l).unwrap().clone()
        };
        assert_eq!(grad(true), grad(false));
    }
}
