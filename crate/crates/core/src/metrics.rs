//! Soft Dice loss, Dice score and 95th-percentile Hausdorff distance.

use std::fmt::Write as _;

use crate::backbone::{CLASSES, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

/// Smoothing added to numerator and denominator of every Dice term.
pub const DICE_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub total: f64,
    /// Per-class Dice terms.
    pub per_class: Vec<f64>,
}

/// Differentiable soft Dice loss over the last axis (classes).
///
/// `1 - mean_j (2 Σ G P + eps) / (Σ G² + Σ P² + eps)`.
pub fn soft_dice_loss<'t>(probs: Var<'t>, target: &Tensor) -> Result<(Var<'t>, LossReport)> {
    let shape = probs.shape();
    if shape != target.shape() || shape.is_empty() {
        return Err(Error::shape(
            "soft_dice_loss",
            format!("prediction {shape:?} vs target {:?}", target.shape()),
        ));
    }
    let classes = *shape.last().unwrap();
    let rows = target.numel() / classes;
    let p = probs.reshape(&[rows, classes])?;
    let g = probs.tape().constant(target.reshape(&[rows, classes])?);
    let inter = p.mul(g)?.sum_axis(0)?;
    let p_sq = p.mul(p)?.sum_axis(0)?;
    let g_sq = probs.tape().constant(crate::tensor::kernels::sum_axis(
        &target.reshape(&[rows, classes])?.map(|v| v * v),
        0,
    ));
    let num = inter.mul_scalar(2.0).add_scalar(DICE_EPS);
    let den = g_sq.add(p_sq)?.add_scalar(DICE_EPS);
    let terms = num.div(den)?;
    let loss = terms
        .sum_all()?
        .mul_scalar(-1.0 / classes as f64)
        .add_scalar(1.0);
    let report = LossReport {
        total: loss.value().item(),
        per_class: terms.value().data().to_vec(),
    };
    Ok((loss, report))
}

/// `2|A ∩ B| / (|A| + |B|)`, 1 when both are empty.
pub fn dice_score(pred: &[bool], truth: &[bool]) -> f64 {
    assert_eq!(pred.len(), truth.len(), "dice_score: mask lengths differ");
    let (mut inter, mut total) = (0usize, 0usize);
    for (&a, &b) in pred.iter().zip(truth) {
        inter += (a && b) as usize;
        total += a as usize + b as usize;
    }
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

pub type Voxel = [i64; 3];

/// Coordinates of set voxels in a `[D, H, W]` row-major mask.
pub fn voxel_set(mask: &[bool], extents: [usize; 3]) -> Vec<Voxel> {
    assert_eq!(mask.len(), extents.iter().product::<usize>());
    let [_, h, w] = extents;
    mask.iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| [(i / (h * w)) as i64, ((i / w) % h) as i64, (i % w) as i64])
        .collect()
}

/// HD95 value and whether it is the one-empty-set sentinel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hd95 {
    pub value: f64,
    pub sentinel: bool,
}

/// Nearest-rank 95th percentile: the `ceil(0.95 n)`-th smallest value.
pub fn nearest_rank_p95<T: Copy + Ord>(values: &mut [T]) -> T {
    values.sort_unstable();
    let n = values.len();
    let rank = (95 * n).div_ceil(100).max(1);
    values[rank - 1]
}

fn sq(a: &Voxel, b: &Voxel) -> i64 {
    (0..3).map(|i| (a[i] - b[i]).pow(2)).sum()
}

/// Squared distance from each point of `from` to its nearest point of `to`.
/// `to` is swept in x-sorted order, stopping once the x gap alone exceeds
/// the best distance found.
fn nearest_sq(from: &[Voxel], to: &[Voxel]) -> Vec<i64> {
    let mut sorted = to.to_vec();
    sorted.sort_unstable();
    from.iter()
        .map(|a| {
            let start = sorted.partition_point(|b| b[0] < a[0]);
            let mut best = i64::MAX;
            for b in &sorted[start..] {
                if (b[0] - a[0]).pow(2) >= best {
                    break;
                }
                best = best.min(sq(a, b));
            }
            for b in sorted[..start].iter().rev() {
                if (b[0] - a[0]).pow(2) >= best {
                    break;
                }
                best = best.min(sq(a, b));
            }
            best
        })
        .collect()
}

/// Symmetric 95th-percentile Hausdorff distance in voxel units.
///
/// Both empty gives 0. Exactly one empty gives the diagonal of `extents`,
/// flagged as a sentinel.
pub fn hd95(a: &[Voxel], b: &[Voxel], extents: [usize; 3]) -> Hd95 {
    match (a.is_empty(), b.is_empty()) {
        (true, true) => Hd95 {
            value: 0.0,
            sentinel: false,
        },
        (true, false) | (false, true) => Hd95 {
            value: (extents.iter().map(|&e| (e * e) as f64).sum::<f64>()).sqrt(),
            sentinel: true,
        },
        (false, false) => {
            let ab = nearest_rank_p95(&mut nearest_sq(a, b));
            let ba = nearest_rank_p95(&mut nearest_sq(b, a));
            Hd95 {
                value: (ab.max(ba) as f64).sqrt(),
                sentinel: false,
            }
        }
    }
}

/// Per-class binarization of a `[D, H, W, C]` volume at 0.5.
pub fn threshold(probs: &Tensor, class: usize) -> Vec<bool> {
    let c = *probs.shape().last().unwrap();
    probs.data()[class..].iter().step_by(c).map(|&p| p > 0.5).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseReport {
    pub case_id: String,
    pub dice: [f64; CLASSES],
    pub hd95: [f64; CLASSES],
    pub sentinel: [bool; CLASSES],
}

/// Scores thresholded predictions against a binary label, both `[D, H, W, 3]`.
pub fn evaluate_case(case_id: &str, probs: &Tensor, label: &Tensor) -> Result<CaseReport> {
    let s = probs.shape();
    if s != label.shape() || s.len() != 4 || s[3] != CLASSES {
        return Err(Error::shape(
            "evaluate",
            format!("prediction {s:?} vs label {:?}", label.shape()),
        ));
    }
    let extents = [s[0], s[1], s[2]];
    let mut report = CaseReport {
        case_id: case_id.to_string(),
        dice: [0.0; CLASSES],
        hd95: [0.0; CLASSES],
        sentinel: [false; CLASSES],
    };
    for c in 0..CLASSES {
        let pred = threshold(probs, c);
        let truth = threshold(label, c);
        report.dice[c] = dice_score(&pred, &truth);
        let h = hd95(&voxel_set(&pred, extents), &voxel_set(&truth, extents), extents);
        report.hd95[c] = h.value;
        report.sentinel[c] = h.sentinel;
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub cases: Vec<CaseReport>,
    pub mean_dice: [f64; CLASSES],
    pub mean_hd95: [f64; CLASSES],
}

impl EvalReport {
    /// Sorts cases by id and computes per-class means.
    pub fn new(mut cases: Vec<CaseReport>) -> Self {
        cases.sort_by(|a, b| a.case_id.cmp(&b.case_id));
        let n = cases.len().max(1) as f64;
        let mut mean_dice = [0.0; CLASSES];
        let mut mean_hd95 = [0.0; CLASSES];
        for c in &cases {
            for k in 0..CLASSES {
                mean_dice[k] += c.dice[k] / n;
                mean_hd95[k] += c.hd95[k] / n;
            }
        }
        Self {
            cases,
            mean_dice,
            mean_hd95,
        }
    }

    pub fn sentinel_count(&self) -> usize {
        self.cases
            .iter()
            .map(|c| c.sentinel.iter().filter(|&&s| s).count())
            .sum()
    }

    /// `key=value` lines, one per case and class, then the means.
    pub fn to_key_value(&self) -> String {
        let mut out = String::new();
        for c in &self.cases {
            for (k, name) in CLASS_NAMES.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "case={} class={name} dice={:.6} hd95={:.6} sentinel={}",
                    c.case_id, c.dice[k], c.hd95[k], c.sentinel[k]
                );
            }
        }
        for (k, name) in CLASS_NAMES.iter().enumerate() {
            let _ = writeln!(
                out,
                "mean class={name} dice={:.6} hd95={:.6}",
                self.mean_dice[k], self.mean_hd95[k]
            );
        }
        let _ = writeln!(out, "cases={} sentinels={}", self.cases.len(), self.sentinel_count());
        out
    }

    /// Tab-separated table with a header row and one row per case.
    pub fn to_table(&self) -> String {
        let mut out = String::from("case");
        for name in CLASS_NAMES {
            let _ = write!(out, "\tdice_{name}");
        }
        for name in CLASS_NAMES {
            let _ = write!(out, "\thd95_{name}");
        }
        out.push('\n');
        for c in &self.cases {
            out.push_str(&c.case_id);
            for v in c.dice.iter().chain(&c.hd95) {
                let _ = write!(out, "\t{v:.6}");
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn trivial_cases() {
        assert_eq!(dice_score(&[true, false], &[true, false]), 1.0);
        assert_eq!(dice_score(&[false; 3], &[false; 3]), 1.0);
        assert_eq!(dice_score(&[true, true, false], &[true, false, true]), 0.5);
        let a = [[0, 0, 0]];
        assert_eq!(hd95(&a, &a, [4; 3]).value, 0.0);
        assert_eq!(hd95(&a, &[[3, 0, 0]], [4; 3]).value, 3.0);
        let s = hd95(&a, &[], [2, 2, 2]);
        assert!(s.sentinel && (s.value - 12f64.sqrt()).abs() < 1e-15);
        assert!(!hd95(&[], &[], [2; 3]).sentinel);
    }

    #[test]
    fn uniform_half_on_single_voxel() {
        let tape = Tape::new();
        let p = tape.leaf(Tensor::full([2, 2, 2, 1], 0.5));
        let mut g = Tensor::zeros([2, 2, 2, 1]);
        g.data_mut()[0] = 1.0;
        let (_, r) = soft_dice_loss(p, &g).unwrap();
        let term = (1.0 + DICE_EPS) / (3.0 + DICE_EPS);
        assert!((r.per_class[0] - term).abs() < 1e-15);
        assert!((r.total - (1.0 - term)).abs() < 1e-15);
        assert!((r.total - 2.0 / 3.0).abs() < 1e-5);
    }

    #[test]
    fn shape_mismatch() {
        let tape = Tape::new();
        let p = tape.leaf(Tensor::full([2, 2, 2, 3], 0.5));
        assert!(soft_dice_loss(p, &Tensor::zeros([2, 2, 2, 2])).is_err());
    }

    #[test]
    fn percentile_rank() {
        let mut v: Vec<i64> = (1..=20).collect();
        assert_eq!(nearest_rank_p95(&mut v), 19);
        assert_eq!(nearest_rank_p95(&mut [5]), 5);
        let mut v: Vec<i64> = (1..=100).collect();
        assert_eq!(nearest_rank_p95(&mut v), 95);
    }
}
