//! Adam, warmup-cosine schedule, and the training loop.

use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::aware::MaskMode;
use crate::backbone::{CLASSES, CLASS_NAMES};
use crate::checkpoint::save_checkpoint;
use crate::config::RunConfig;
use crate::data::{normalize, write_atomic, Augmentation, MultiModalVolume};
use crate::error::{Error, Result};
use crate::inference::evaluate;
use crate::metrics::{soft_dice_loss, EvalReport, LossReport};
use crate::model::Model;
use crate::nn::ParamStore;
use crate::tensor::{Rng, Tape, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Loss below which a run counts as converged.
pub const LOSS_TARGET: f64 = 0.05;

const AUGMENT_STREAM: u64 = 0xa119;
const MASK_STREAM: u64 = 0x3a5c;

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u32,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u32 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t as i32);
        let c2 = 1.0 - BETA2.powi(self.t as i32);
        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let g = grads[k].data();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Linear warmup over `warmup` steps, then cosine decay to zero at `total`.
/// `step` is 0-based.
pub fn learning_rate(base: f64, step: usize, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        base * (step + 1) as f64 / warmup as f64
    } else {
        let span = (total - warmup).max(1) as f64;
        let progress = (step - warmup) as f64 / span;
        base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based.
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub dice_terms: [f64; CLASSES],
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
    /// Seconds per step; kept apart from the deterministic log files.
    pub wall: Vec<f64>,
    /// Loss on the unaugmented cases with inference masks after training.
    pub final_loss: Option<LossReport>,
    pub final_eval: Option<EvalReport>,
}

impl TrainLog {
    /// First step whose training loss is below `target`.
    pub fn steps_to(&self, target: f64) -> Option<usize> {
        self.records.iter().find(|r| r.loss < target).map(|r| r.step)
    }

    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            let _ = write!(s, "step={} lr={} loss={}", r.step, r.lr, r.loss);
            for (k, name) in CLASS_NAMES.iter().enumerate() {
                let _ = write!(s, " dice_{name}={}", r.dice_terms[k]);
            }
            s.push('\n');
        }
        if let Some(f) = &self.final_loss {
            let _ = write!(s, "final loss={}", f.total);
            for (k, name) in CLASS_NAMES.iter().enumerate() {
                let _ = write!(s, " dice_{name}={}", f.per_class[k]);
            }
            s.push('\n');
        }
        if let Some(n) = self.steps_to(LOSS_TARGET) {
            let _ = writeln!(s, "steps_to_target={n}");
        }
        if let Some(e) = &self.final_eval {
            s.push_str(&e.to_key_value());
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::from("step\tlr\tloss");
        for name in CLASS_NAMES {
            let _ = write!(s, "\tdice_{name}");
        }
        s.push('\n');
        for r in &self.records {
            let _ = write!(s, "{}\t{}\t{}", r.step, r.lr, r.loss);
            for v in r.dice_terms {
                let _ = write!(s, "\t{v}");
            }
            s.push('\n');
        }
        s
    }
}

/// Exclusive claim on a run directory, released on drop.
pub struct RunLock {
    path: PathBuf,
    _file: File,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join("train.lock");
        let file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self { path, _file: file })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: TrainLog,
}

struct CaseStep {
    grads: Vec<Tensor>,
    report: LossReport,
}

fn case_step(model: &Model, vol: &MultiModalVolume, rng: &mut Rng) -> Result<CaseStep> {
    let label = vol
        .label
        .as_ref()
        .ok_or_else(|| Error::invalid("train", format!("case {} has no label", vol.case_id)))?;
    let tape = Tape::new();
    let p = model.params.bind(&tape);
    let inputs: Vec<_> = vol.inputs()?.into_iter().map(|t| tape.constant(t)).collect();
    let out = model.forward(&p, &inputs, MaskMode::Train, rng).map_err(|e| match e {
        Error::Numeric(m) => Error::Numeric(format!(
            "{m} on case {}; first non-finite parameter: {}",
            vol.case_id,
            first_non_finite(&model.params).unwrap_or("none")
        )),
        e => e,
    })?;
    let (loss, report) = soft_dice_loss(out.probs, label)?;
    if !report.total.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss on case {}; first non-finite parameter: {}",
            vol.case_id,
            first_non_finite(&model.params).unwrap_or("none")
        )));
    }
    let g = tape.backward(loss)?;
    let grads = p.vars().iter().map(|&v| g.get_or_zeros(v)).collect();
    Ok(CaseStep { grads, report })
}

fn first_non_finite(params: &ParamStore) -> Option<&str> {
    params.iter().find(|(_, _, t)| !t.all_finite()).map(|(_, n, _)| n)
}

/// Mean inference-mode loss over `cases`.
pub fn inference_loss(model: &Model, cases: &[MultiModalVolume]) -> Result<LossReport> {
    let reports = cases
        .par_iter()
        .map(|vol| {
            let label = vol
                .label
                .as_ref()
                .ok_or_else(|| Error::invalid("loss", format!("case {} has no label", vol.case_id)))?;
            let tape = Tape::new();
            let p = model.params.bind(&tape);
            let inputs: Vec<_> = vol.inputs()?.into_iter().map(|t| tape.constant(t)).collect();
            let out = model.forward(&p, &inputs, MaskMode::Inference, &mut Rng::new(0))?;
            Ok(soft_dice_loss(out.probs, label)?.1)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_report(&reports))
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len() as f64;
    let mut per_class = vec![0.0; CLASSES];
    let mut total = 0.0;
    for r in reports {
        total += r.total / n;
        for (a, b) in per_class.iter_mut().zip(&r.per_class) {
            *a += b / n;
        }
    }
    LossReport { total, per_class }
}

/// Normalizes every case; run once before training or evaluation.
pub fn prepare(cases: &[MultiModalVolume]) -> Result<Vec<MultiModalVolume>> {
    cases.iter().map(normalize).collect()
}

/// Trains a fresh model on already-normalized `cases`.
///
/// With `out` set, writes `config.txt`, `train_log.txt`, `train_log.tsv`,
/// `timing.tsv`, periodic `checkpoint_stepNNNNN.ckpt` and `model.ckpt`.
pub fn train(cfg: &RunConfig, cases: &[MultiModalVolume], out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cases.is_empty() {
        return Err(Error::Config("no training cases".into()));
    }
    let _lock = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let lock = RunLock::acquire(dir)?;
            write_atomic(&dir.join("config.txt"), cfg.to_text().as_bytes())?;
            Some(lock)
        }
        None => None,
    };
    let mut model = Model::new(cfg.model_config(), cfg.seed)?;
    let mut adam = Adam::new(&model.params);
    let root = Rng::new(cfg.seed);
    let (aug_root, mask_root) = (root.fork(AUGMENT_STREAM), root.fork(MASK_STREAM));
    let mut log = TrainLog::default();
    let bs = cfg.batch_size;
    for step in 0..cfg.total_steps {
        let started = Instant::now();
        let lr = learning_rate(cfg.learning_rate, step, cfg.warmup_steps, cfg.total_steps);
        let results = (0..bs)
            .into_par_iter()
            .map(|b| {
                let slot = (step * bs + b) as u64;
                let case = &cases[(step * bs + b) % cases.len()];
                let vol = if cfg.augment {
                    let mut r = aug_root.fork(slot);
                    Augmentation::sample(case.modalities.len(), &mut r).apply(case)
                } else {
                    case.clone()
                };
                case_step(&model, &vol, &mut mask_root.fork(slot))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut grads: Vec<Tensor> = results[0].grads.iter().map(|g| g.scale(1.0 / bs as f64)).collect();
        for r in &results[1..] {
            for (acc, g) in grads.iter_mut().zip(&r.grads) {
                acc.add_assign(&g.scale(1.0 / bs as f64));
            }
        }
        if let Some(k) = grads.iter().position(|g| !g.all_finite()) {
            let id = model.params.ids().nth(k).unwrap();
            return Err(Error::Numeric(format!(
                "non-finite gradient at step {}; first affected parameter: {}",
                step + 1,
                model.params.name(id)
            )));
        }
        adam.step(&mut model.params, &grads, lr);
        if let Some(name) = first_non_finite(&model.params) {
            return Err(Error::Numeric(format!(
                "parameter {name} became non-finite at step {}",
                step + 1
            )));
        }
        let reports: Vec<LossReport> = results.into_iter().map(|r| r.report).collect();
        let mean = mean_report(&reports);
        let record = StepRecord {
            step: step + 1,
            lr,
            loss: mean.total,
            dice_terms: [mean.per_class[0], mean.per_class[1], mean.per_class[2]],
        };
        log::info!("step={} loss={:.5}", record.step, record.loss);
        log.records.push(record);
        log.wall.push(started.elapsed().as_secs_f64());
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                save_checkpoint(dir.join(format!("checkpoint_step{:05}.ckpt", step + 1)), &model.params)?;
            }
        }
    }
    log.final_loss = Some(inference_loss(&model, cases)?);
    log.final_eval = Some(evaluate(&model, cases)?);
    if let Some(dir) = out {
        save_checkpoint(dir.join("model.ckpt"), &model.params)?;
        write_atomic(&dir.join("train_log.txt"), log.to_key_value().as_bytes())?;
        write_atomic(&dir.join("train_log.tsv"), log.to_table().as_bytes())?;
        let mut timing = String::from("step\tseconds\n");
        for (r, w) in log.records.iter().zip(&log.wall) {
            let _ = writeln!(timing, "{}\t{w:.4}", r.step);
        }
        write_atomic(&dir.join("timing.tsv"), timing.as_bytes())?;
    }
    Ok(TrainOutcome { model, log })
}
