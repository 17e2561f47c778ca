//! End-to-end finite-difference gradient checks of the full model.
//!
//! Decision masks use the relaxed (soft) Gumbel sample with fixed noise, so
//! the loss is a smooth function of every parameter and central differences
//! are a valid oracle. Hard samples would make the loss piecewise constant
//! in the mask-predictor weights.
//!
//! Freshly initialized models sit exactly on ReLU kinks (zero biases meet
//! all-zero tokens), so parameters are jittered before checking. A probe
//! whose step flips any ReLU input sign straddles a kink, where central
//! differences are not an oracle for the derivative; such coordinates are
//! counted and replaced by fresh draws.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::aware::MaskMode;
use crate::backbone::BackboneConfig;
use crate::data::{gen_phantom, normalize, MultiModalVolume, PhantomSpec};
use crate::error::Result;
use crate::metrics::soft_dice_loss;
use crate::model::{param_group, Model, ModelConfig, Toggles};
use crate::tensor::{Primitive, Rng, Tape};

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Coordinates sampled per parameter tensor.
    pub samples: usize,
    pub step: f64,
    pub threshold: f64,
    /// Scales the backward rule of one primitive, as a negative control.
    pub fault: Option<Primitive>,
    /// Standard deviation of the noise added to every parameter.
    pub jitter: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            samples: 3,
            step: 1e-4,
            threshold: 1e-3,
            fault: None,
            jitter: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupResult {
    pub group: String,
    pub worst: f64,
    pub worst_param: String,
    pub checked: usize,
    /// Probes skipped because the step crossed a ReLU kink.
    pub kinks: usize,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub toggles: Toggles,
    pub threshold: f64,
    pub groups: Vec<GroupResult>,
}

impl GradcheckReport {
    /// Every group passed and checked at least one coordinate.
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.checked > 0 && g.worst < self.threshold)
    }

    pub fn failing(&self) -> Vec<&str> {
        self.groups
            .iter()
            .filter(|g| g.checked == 0 || g.worst >= self.threshold)
            .map(|g| g.group.as_str())
            .collect()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for g in &self.groups {
            let _ = writeln!(
                s,
                "config={} group={} worst_rel_err={:.3e} checked={} kinks_skipped={} worst_param={} {}",
                self.toggles.label(),
                g.group,
                g.worst,
                g.checked,
                g.kinks,
                g.worst_param,
                if g.checked > 0 && g.worst < self.threshold { "ok" } else { "FAIL" }
            );
        }
        s
    }
}

/// `|a - b| / max(|a|, |b|, 1e-6)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Candidate coordinates drawn per requested sample, to replace kinked ones.
const MAX_TRIES: usize = 8;

fn loss_value(model: &Model, vol: &MultiModalVolume, mask_seed: u64) -> Result<(f64, Vec<bool>)> {
    let tape = Tape::new();
    let p = model.params.bind(&tape);
    let inputs: Vec<_> = vol.inputs()?.into_iter().map(|t| tape.constant(t)).collect();
    let out = model.forward(&p, &inputs, MaskMode::Relaxed, &mut Rng::new(mask_seed))?;
    let loss = soft_dice_loss(out.probs, vol.label.as_ref().unwrap())?.1.total;
    Ok((loss, tape.relu_pattern()))
}

/// Checks one module configuration on the tiny backbone.
pub fn gradcheck(toggles: Toggles, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let cfg = BackboneConfig::tiny();
    let mut model = Model::new(ModelConfig::new(cfg.clone(), toggles), opts.seed)?;
    let vol = normalize(&gen_phantom(&PhantomSpec::new(opts.seed, cfg.volume_size))?)?;
    let mask_seed = opts.seed ^ 0x6d61_736b;
    let mut noise = Rng::new(opts.seed).fork(0x717);
    let ids: Vec<_> = model.params.ids().collect();
    for &id in &ids {
        for v in model.params.get_mut(id).data_mut() {
            *v += opts.jitter * noise.normal();
        }
    }

    let tape = Tape::new();
    if let Some(prim) = opts.fault {
        tape.inject_fault(prim, 1.5);
    }
    let p = model.params.bind(&tape);
    let inputs: Vec<_> = vol.inputs()?.into_iter().map(|t| tape.constant(t)).collect();
    let out = model.forward(&p, &inputs, MaskMode::Relaxed, &mut Rng::new(mask_seed))?;
    let (loss, _) = soft_dice_loss(out.probs, vol.label.as_ref().unwrap())?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<_> = p.vars().iter().map(|&v| grads.get_or_zeros(v)).collect();

    let base_pattern = tape.relu_pattern();
    let mut pick = Rng::new(opts.seed).fork(0x9c);
    let mut groups: BTreeMap<&'static str, GroupResult> = BTreeMap::new();
    for (k, id) in ids.into_iter().enumerate() {
        let name = model.params.name(id).to_string();
        let numel = model.params.get(id).numel();
        let candidates: Vec<usize> = if numel <= opts.samples {
            (0..numel).collect()
        } else {
            (0..opts.samples * MAX_TRIES)
                .map(|_| pick.int_range(0, numel as u64 - 1) as usize)
                .collect()
        };
        let g = groups.entry(param_group(&name)).or_insert_with(|| GroupResult {
            group: param_group(&name).to_string(),
            worst: 0.0,
            worst_param: String::new(),
            checked: 0,
            kinks: 0,
        });
        let mut done = 0;
        for i in candidates {
            if done == opts.samples {
                break;
            }
            let orig = model.params.get(id).data()[i];
            model.params.get_mut(id).data_mut()[i] = orig + opts.step;
            let (up, up_pattern) = loss_value(&model, &vol, mask_seed)?;
            model.params.get_mut(id).data_mut()[i] = orig - opts.step;
            let (down, down_pattern) = loss_value(&model, &vol, mask_seed)?;
            model.params.get_mut(id).data_mut()[i] = orig;
            if up_pattern != base_pattern || down_pattern != base_pattern {
                g.kinks += 1;
                continue;
            }
            done += 1;
            let numeric = (up - down) / (2.0 * opts.step);
            let err = relative_error(analytic[k].data()[i], numeric);
            g.checked += 1;
            if err > g.worst || g.worst_param.is_empty() {
                g.worst = g.worst.max(err);
                g.worst_param = format!("{name}[{i}]");
            }
        }
    }
    Ok(GradcheckReport {
        toggles,
        threshold: opts.threshold,
        groups: groups.into_values().collect(),
    })
}
