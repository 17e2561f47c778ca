//! Deterministic inference: evaluation reports, mask prediction and slice previews.

use std::path::Path;

use rayon::prelude::*;

use crate::aware::MaskMode;
use crate::backbone::{CLASSES, CLASS_NAMES};
use crate::data::{write_atomic, MultiModalVolume};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_case, EvalReport};
use crate::model::Model;
use crate::tensor::{Rng, Tape, Tensor};

/// Sigmoid probabilities `[D, H, W, 3]` with argmax decision masks.
pub fn predict_probs(model: &Model, vol: &MultiModalVolume) -> Result<Tensor> {
    let tape = Tape::new();
    let p = model.params.bind(&tape);
    let inputs: Vec<_> = vol.inputs()?.into_iter().map(|t| tape.constant(t)).collect();
    let out = model.forward(&p, &inputs, MaskMode::Inference, &mut Rng::new(0))?;
    Ok(out.probs.value())
}

/// Thresholds probabilities at 0.5 into a label-only volume.
pub fn predict_mask(model: &Model, vol: &MultiModalVolume) -> Result<MultiModalVolume> {
    let probs = predict_probs(model, vol)?;
    Ok(MultiModalVolume {
        case_id: vol.case_id.clone(),
        extents: vol.extents,
        modalities: Vec::new(),
        label: Some(probs.map(|p| if p > 0.5 { 1.0 } else { 0.0 })),
    })
}

/// Scores every labeled case in parallel; rows are ordered by case id.
pub fn evaluate(model: &Model, cases: &[MultiModalVolume]) -> Result<EvalReport> {
    let rows = cases
        .par_iter()
        .map(|vol| {
            let label = vol
                .label
                .as_ref()
                .ok_or_else(|| Error::invalid("eval", format!("case {} has no label", vol.case_id)))?;
            evaluate_case(&vol.case_id, &predict_probs(model, vol)?, label)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::new(rows))
}

/// Scores stored masks against labeled cases, matched by case id.
pub fn evaluate_masks(predictions: &[MultiModalVolume], cases: &[MultiModalVolume]) -> Result<EvalReport> {
    let rows = cases
        .par_iter()
        .map(|vol| {
            let label = vol
                .label
                .as_ref()
                .ok_or_else(|| Error::invalid("eval", format!("case {} has no label", vol.case_id)))?;
            let pred = predictions
                .iter()
                .find(|p| p.case_id == vol.case_id)
                .and_then(|p| p.label.as_ref())
                .ok_or_else(|| Error::invalid("eval", format!("no prediction for case {}", vol.case_id)))?;
            evaluate_case(&vol.case_id, pred, label)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::new(rows))
}

/// Binary PGM (P5) bytes for an 8-bit grayscale image.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Mid-slice of channel `c` of a `[D, H, W, C]` tensor, perpendicular to `axis`,
/// scaled so 1.0 maps to 255.
pub fn mid_slice(t: &Tensor, axis: usize, c: usize) -> (usize, usize, Vec<u8>) {
    let s = t.shape();
    let (d, h, w, ch) = (s[0], s[1], s[2], s[3]);
    let at = |z: usize, y: usize, x: usize| {
        let v = t.data()[((z * h + y) * w + x) * ch + c];
        (v.clamp(0.0, 1.0) * 255.0).round() as u8
    };
    match axis {
        0 => (w, h, (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).map(|(y, x)| at(d / 2, y, x)).collect()),
        1 => (w, d, (0..d).flat_map(|z| (0..w).map(move |x| (z, x))).map(|(z, x)| at(z, h / 2, x)).collect()),
        _ => (h, d, (0..d).flat_map(|z| (0..h).map(move |y| (z, y))).map(|(z, y)| at(z, y, w / 2)).collect()),
    }
}

/// Writes `<stem>_<class>_axis<k>.pgm` for every class and axis.
pub fn write_previews(dir: &Path, stem: &str, label: &Tensor) -> Result<Vec<std::path::PathBuf>> {
    let mut written = Vec::new();
    for (c, name) in CLASS_NAMES.iter().enumerate().take(CLASSES) {
        for axis in 0..3 {
            let (w, h, px) = mid_slice(label, axis, c);
            let path = dir.join(format!("{stem}_{name}_axis{axis}.pgm"));
            write_atomic(&path, &encode_pgm(w, h, &px))?;
            written.push(path);
        }
    }
    Ok(written)
}
