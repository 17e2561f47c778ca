//! The assembled network: shared encoder, per-layer fusion, decoder.

use crate::aware::{DecisionMask, MaskMode, ModalityAware};
use crate::backbone::{concat_modalities, BackboneConfig, Decoder, Encoder, FusedSkip, MODALITIES};
use crate::error::{Error, Result};
use crate::nn::{Bound, ParamStore};
use crate::shift::{ModalityShift, PatternKind};
use crate::tensor::{Rng, Var};

const INIT_STREAM: u64 = 0x1417;

/// Which fusion modules are enabled, one row of the 2x2 ablation matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Toggles {
    pub aware: bool,
    pub shift: bool,
}

impl Toggles {
    pub const BASELINE: Self = Self {
        aware: false,
        shift: false,
    };
    pub const FULL: Self = Self {
        aware: true,
        shift: true,
    };
    pub const ALL: [Self; 4] = [
        Self::BASELINE,
        Self {
            aware: true,
            shift: false,
        },
        Self {
            aware: false,
            shift: true,
        },
        Self::FULL,
    ];

    pub fn label(self) -> &'static str {
        match (self.aware, self.shift) {
            (false, false) => "baseline",
            (true, false) => "aware",
            (false, true) => "shift",
            (true, true) => "aware+shift",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub heads: usize,
    pub tau: f64,
    /// 1-based encoder layers fused by the modality-aware module.
    pub aware_layers: Vec<usize>,
    /// 1-based encoder layers fused by the modality-shift module.
    pub shift_layers: Vec<usize>,
    pub pattern: PatternKind,
}

impl ModelConfig {
    /// Default placement: aware on layers `1..E-1`, shift on layer `E`.
    pub fn new(backbone: BackboneConfig, toggles: Toggles) -> Self {
        let e = backbone.depth;
        Self {
            aware_layers: if toggles.aware { (1..e).collect() } else { Vec::new() },
            shift_layers: if toggles.shift { vec![e] } else { Vec::new() },
            backbone,
            heads: 4,
            tau: 1.0,
            pattern: PatternKind::Mosaic,
        }
    }

    pub fn toggles(&self) -> Toggles {
        Toggles {
            aware: !self.aware_layers.is_empty(),
            shift: !self.shift_layers.is_empty(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let e = self.backbone.depth;
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        for (what, layers) in [("aware", &self.aware_layers), ("shift", &self.shift_layers)] {
            if let Some(l) = layers.iter().find(|&&l| l == 0 || l > e) {
                return Err(Error::Config(format!("{what} layer {l} outside 1..={e}")));
            }
            let mut sorted = layers.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != layers.len() {
                return Err(Error::Config(format!("{what} layers {layers:?} repeat")));
            }
        }
        if let Some(l) = self.aware_layers.iter().find(|l| self.shift_layers.contains(l)) {
            return Err(Error::Config(format!("layer {l} assigned to both fusion modules")));
        }
        for &l in &self.aware_layers {
            if self.backbone.modality_width(l) % 2 != 0 {
                return Err(Error::Config(format!(
                    "aware layer {l}: per-modality width must be even"
                )));
            }
        }
        for &l in &self.shift_layers {
            let d = self.backbone.modality_width(l);
            if self.heads == 0 || d % self.heads != 0 {
                return Err(Error::Config(format!(
                    "shift layer {l}: width {d} not divisible by {} heads",
                    self.heads
                )));
            }
        }
        Ok(())
    }
}

/// Result of a forward pass.
pub struct ModelOutput<'t> {
    pub logits: Var<'t>,
    /// Sigmoid probabilities `[V, V, V, 3]`, channels (ET, WT, TC).
    pub probs: Var<'t>,
    /// Decision masks per aware layer.
    pub masks: Vec<(usize, [DecisionMask; MODALITIES])>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
    aware: Vec<ModalityAware>,
    shift: Vec<ModalityShift>,
}

impl Model {
    /// Builds a freshly initialized model. Initialization draws from a
    /// stream forked off `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed).fork(INIT_STREAM);
        let mut params = ParamStore::new();
        let cfg = &config.backbone;
        let encoder = Encoder::new(&mut params, cfg, &mut rng);
        let decoder = Decoder::new(&mut params, cfg, &mut rng);
        let aware = config
            .aware_layers
            .iter()
            .map(|&l| ModalityAware::new(&mut params, cfg, l, &mut rng))
            .collect();
        let shift = config
            .shift_layers
            .iter()
            .map(|&l| ModalityShift::new(&mut params, cfg, l, config.heads, config.pattern, &mut rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            params,
            encoder,
            decoder,
            aware,
            shift,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// `modalities`: four `[V, V, V, 1]` inputs in (T2, T1, T1-CE, FLAIR) order.
    /// `rng` is consumed only by sampling mask modes.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        modalities: &[Var<'t>],
        mode: MaskMode,
        rng: &mut Rng,
    ) -> Result<ModelOutput<'t>> {
        let cfg = &self.config.backbone;
        let feats = self.encoder.forward(p, cfg, modalities)?;
        let mut levels = Vec::with_capacity(cfg.depth);
        let mut masks = Vec::new();
        for j in 1..=cfg.depth {
            let maps = feats.layer(j);
            let fused = if let Some(a) = self.aware.iter().find(|a| a.layer == j) {
                let out = a.forward(p, &maps, self.config.tau, mode, rng)?;
                masks.push((j, out.masks));
                out.fused
            } else if let Some(s) = self.shift.iter().find(|s| s.layer == j) {
                s.forward(p, &maps)?
            } else {
                concat_modalities(&maps)?
            };
            levels.push(Some(fused));
        }
        let skip = FusedSkip {
            full_res: concat_modalities(&feats.stem)?,
            levels,
        };
        let logits = self.decoder.logits(p, cfg, &skip)?;
        Ok(ModelOutput {
            probs: logits.sigmoid(),
            logits,
            masks,
        })
    }
}

/// Trainable scalar count for a backbone with the given modules enabled.
pub fn parameter_count(backbone: &BackboneConfig, toggles: Toggles) -> Result<usize> {
    Ok(Model::new(ModelConfig::new(backbone.clone(), toggles), 0)?.parameter_count())
}

/// Coarse group of a parameter, used for reporting gradient checks.
pub fn param_group(name: &str) -> &'static str {
    let mut parts = name.split('.');
    match (parts.next(), parts.next(), parts.next()) {
        (Some("encoder"), ..) => "encoder",
        (Some("decoder"), ..) => "decoder",
        (Some("aware"), _, Some("mask")) => "aware.mask",
        (Some("aware"), ..) => "aware.attention",
        (Some("shift"), _, Some("spatial")) => "shift.spatial",
        (Some("shift"), ..) => "shift.modality",
        _ => "other",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_placement() {
        let c = ModelConfig::new(BackboneConfig::desk(), Toggles::FULL);
        assert_eq!(c.aware_layers, vec![1, 2, 3]);
        assert_eq!(c.shift_layers, vec![4]);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn overlapping_layers_rejected() {
        let mut c = ModelConfig::new(BackboneConfig::desk(), Toggles::FULL);
        c.aware_layers.push(4);
        assert!(c.validate().is_err());
        let mut c = ModelConfig::new(BackboneConfig::desk(), Toggles::FULL);
        c.shift_layers = vec![5];
        assert!(c.validate().is_err());
    }

    #[test]
    fn groups() {
        assert_eq!(param_group("aware.layer1.mask.local_out.weight"), "aware.mask");
        assert_eq!(param_group("aware.layer1.pair_t2_flair.query.weight"), "aware.attention");
        assert_eq!(param_group("shift.layer4.spatial.norm.gamma"), "shift.spatial");
        assert_eq!(param_group("decoder.head.out.bias"), "decoder");
    }
}
