//! Low-level fusion between clinically paired modalities.
//!
//! Per layer `L`, each modality's tokens `[N_L, d]` get a keep/prune
//! decision from a small mask predictor, pruned tokens are zeroed, the pair
//! attends over its two tokens at every position, and a pruned token is
//! replaced by its partner's token at the same position when the partner
//! kept it. Pairs are fixed: (T2, FLAIR) and (T1, T1-CE).
//!
//! Mask polarity: column 0 of the decision distribution is the keep
//! probability, so `D_k = 1` keeps token `k` and `F ⊙ D` prunes.

use crate::backbone::{BackboneConfig, MODALITIES, MODALITY_NAMES};
use crate::error::{Error, Result};
use crate::nn::{Bound, Linear, ParamStore};
use crate::tensor::{gumbel_softmax, one_hot_argmax, Rng, Tensor, Var};

/// Fixed modality pairs (0-based): (T2, FLAIR) then (T1, T1-CE).
pub const PAIRS: [(usize, usize); 2] = [(0, 3), (1, 2)];

/// Partner of a modality under [`PAIRS`].
pub fn partner(modality: usize) -> usize {
    match modality {
        0 => 3,
        3 => 0,
        1 => 2,
        2 => 1,
        _ => panic!("modality index {modality} out of range"),
    }
}

/// How decision masks are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    /// Hard Gumbel-Softmax samples with straight-through gradients.
    Train,
    /// Soft Gumbel-Softmax samples. Smooth in every parameter, so finite
    /// differences agree with the tape; used by gradient checks.
    Relaxed,
    /// Row-wise argmax of the decision distribution. Consumes no RNG.
    Inference,
}

/// Binary keep (`true`) / prune (`false`) decision per token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecisionMask {
    pub keep: Vec<bool>,
}

impl DecisionMask {
    pub fn all(n: usize, keep: bool) -> Self {
        Self {
            keep: vec![keep; n],
        }
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    /// `[N, 1]` column of 0/1.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            [self.keep.len(), 1],
            self.keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap()
    }

    fn from_column(t: &Tensor) -> Self {
        Self {
            keep: t.data().iter().map(|&v| v >= 0.5).collect(),
        }
    }
}

/// Token mask predictor: local MLP, global average, decision MLP.
#[derive(Clone, Debug)]
pub struct MaskPredictor {
    local_hidden: Linear,
    local_out: Linear,
    decide_hidden: Linear,
    decide_out: Linear,
    /// `C'`: half the token width.
    pub reduced: usize,
}

/// Intermediates of [`MaskPredictor::forward`].
pub struct MaskPrediction<'t> {
    pub local: Var<'t>,
    pub global: Var<'t>,
    /// Decision distribution `[N, 2]`; column 0 is keep.
    pub pi: Var<'t>,
    /// Mask as used downstream, `[N, 1]`.
    pub mask: Var<'t>,
    pub decision: DecisionMask,
}

impl MaskPredictor {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, rng: &mut Rng) -> Self {
        let reduced = width / 2;
        Self {
            local_hidden: Linear::new(store, &format!("{name}.local_hidden"), width, width, true, rng),
            local_out: Linear::new(store, &format!("{name}.local_out"), width, reduced, true, rng),
            decide_hidden: Linear::new(
                store,
                &format!("{name}.decide_hidden"),
                2 * reduced,
                reduced,
                true,
                rng,
            ),
            decide_out: Linear::new(store, &format!("{name}.decide_out"), reduced, 2, true, rng),
            reduced,
        }
    }

    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        feat: Var<'t>,
        tau: f64,
        mode: MaskMode,
        rng: &mut Rng,
    ) -> Result<MaskPrediction<'t>> {
        let shape = feat.shape();
        if shape.len() != 2 || shape[0] == 0 {
            return Err(Error::shape("predict_mask", format!("tokens {shape:?}")));
        }
        let n = shape[0];
        let local = self.local_hidden.forward(p, feat)?.relu();
        let local = self.local_out.forward(p, local)?;
        let global = local.avg_pool(0)?;
        let y = feat
            .tape()
            .concat(&[local, global.expand(&[n, self.reduced])?], 1)?;
        let logits = self
            .decide_out
            .forward(p, self.decide_hidden.forward(p, y)?.relu())?;
        let pi = logits.softmax();
        let (mask, decision) = match mode {
            MaskMode::Inference => {
                let hard = one_hot_argmax(&pi.value());
                let col = crate::tensor::kernels::slice(&hard, 1, 0, 1);
                let decision = DecisionMask::from_column(&col);
                (feat.tape().constant(col), decision)
            }
            MaskMode::Train | MaskMode::Relaxed => {
                let sample = gumbel_softmax(logits, tau, mode == MaskMode::Train, rng)?;
                let col = sample.slice(1, 0, 1)?;
                let decision = DecisionMask::from_column(&col.value());
                (col, decision)
            }
        };
        Ok(MaskPrediction {
            local,
            global,
            pi,
            mask,
            decision,
        })
    }
}

/// Zeroes the rows of `feat: [N, d]` where `mask: [N, 1]` is 0.
pub fn prune<'t>(feat: Var<'t>, mask: Var<'t>) -> Result<Var<'t>> {
    let (fs, ms) = (feat.shape(), mask.shape());
    if fs.len() != 2 || ms != [fs[0], 1] {
        return Err(Error::shape("prune", format!("tokens {fs:?}, mask {ms:?}")));
    }
    feat.mul(mask)
}

/// Single-head self-attention over each position's two-token sequence,
/// followed by a position-wise FFN with hidden width `4d`.
#[derive(Clone, Debug)]
pub struct PairAttention {
    query: Linear,
    key: Linear,
    value: Linear,
    ffn_in: Linear,
    ffn_out: Linear,
    pub width: usize,
}

impl PairAttention {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, rng: &mut Rng) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.query"), width, width, false, rng),
            key: Linear::new(store, &format!("{name}.key"), width, width, false, rng),
            value: Linear::new(store, &format!("{name}.value"), width, width, false, rng),
            ffn_in: Linear::new(store, &format!("{name}.ffn_in"), width, 4 * width, true, rng),
            ffn_out: Linear::new(store, &format!("{name}.ffn_out"), 4 * width, width, true, rng),
            width,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, a: Var<'t>, b: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa != sb || sa.len() != 2 || sa[1] != self.width {
            return Err(Error::shape(
                "pair_attention",
                format!("{sa:?} vs {sb:?}, width {}", self.width),
            ));
        }
        let (n, d) = (sa[0], sa[1]);
        let tape = a.tape();
        let z = tape.concat(&[a.reshape(&[n, 1, d])?, b.reshape(&[n, 1, d])?], 1)?;
        let q = self.query.forward(p, z)?;
        let k = self.key.forward(p, z)?;
        let v = self.value.forward(p, z)?;
        let scores = q
            .matmul(k.transpose(&[0, 2, 1])?)?
            .mul_scalar(1.0 / (d as f64).sqrt());
        let attended = scores.softmax().matmul(v)?;
        let h = self
            .ffn_out
            .forward(p, self.ffn_in.forward(p, attended)?.relu())?;
        let ha = h.slice(1, 0, 1)?.reshape(&[n, d])?;
        let hb = h.slice(1, 1, 1)?.reshape(&[n, d])?;
        Ok((ha, hb))
    }
}

fn one_minus(m: Var<'_>) -> Var<'_> {
    m.mul_scalar(-1.0).add_scalar(1.0)
}

/// Replaces pruned tokens with the partner's token at the same position.
///
/// `out_a = m_a h_a + (1 - m_a) m_b h_b + (1 - m_a)(1 - m_b) h_a`, which for
/// 0/1 masks selects exactly one term, and symmetrically for `b`.
pub fn substitute_masked<'t>(
    ha: Var<'t>,
    hb: Var<'t>,
    ma: Var<'t>,
    mb: Var<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let s = ha.shape();
    if hb.shape() != s || s.len() != 2 || ma.shape() != [s[0], 1] || mb.shape() != [s[0], 1] {
        return Err(Error::shape(
            "substitute_masked",
            format!(
                "tokens {:?}/{:?}, masks {:?}/{:?}",
                s,
                hb.shape(),
                ma.shape(),
                mb.shape()
            ),
        ));
    }
    let (na, nb) = (one_minus(ma), one_minus(mb));
    let pick = |own: Var<'t>, other: Var<'t>, m_own: Var<'t>, n_own: Var<'t>, m_other: Var<'t>, n_other: Var<'t>| -> Result<Var<'t>> {
        let keep = own.mul(m_own)?;
        let borrow = other.mul(n_own.mul(m_other)?)?;
        let retain = own.mul(n_own.mul(n_other)?)?;
        keep.add(borrow)?.add(retain)
    };
    let fa = pick(ha, hb, ma, na, mb, nb)?;
    let fb = pick(hb, ha, mb, nb, ma, na)?;
    Ok((fa, fb))
}

/// Modality-aware fusion for one encoder layer.
#[derive(Clone, Debug)]
pub struct ModalityAware {
    pub layer: usize,
    pub predictor: MaskPredictor,
    pub pairs: [PairAttention; 2],
}

pub struct AwareOutput<'t> {
    /// `F'_L`, `[d, h, w, C_L]`.
    pub fused: Var<'t>,
    pub masks: [DecisionMask; MODALITIES],
    pub mask_vars: [Var<'t>; MODALITIES],
}

impl ModalityAware {
    pub fn new(store: &mut ParamStore, cfg: &BackboneConfig, layer: usize, rng: &mut Rng) -> Self {
        let d = cfg.modality_width(layer);
        let base = format!("aware.layer{layer}");
        let predictor = MaskPredictor::new(store, &format!("{base}.mask"), d, rng);
        let pairs = PAIRS.map(|(a, b)| {
            let name = format!(
                "{base}.pair_{}_{}",
                MODALITY_NAMES[a].to_lowercase(),
                MODALITY_NAMES[b].to_lowercase()
            );
            PairAttention::new(store, &name, d, rng)
        });
        Self {
            layer,
            predictor,
            pairs,
        }
    }

    /// `maps`: the four `[d, h, w, C_L/4]` feature maps of layer `L`.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        maps: &[Var<'t>; MODALITIES],
        tau: f64,
        mode: MaskMode,
        rng: &mut Rng,
    ) -> Result<AwareOutput<'t>> {
        let spatial = maps[0].shape();
        if spatial.len() != 4 || maps.iter().any(|m| m.shape() != spatial) {
            return Err(Error::shape(
                "modality_aware",
                format!("feature maps {:?}", maps.map(|m| m.shape())),
            ));
        }
        let d = spatial[3];
        let n = spatial[..3].iter().product::<usize>();
        let tokens: Vec<Var<'t>> = maps
            .iter()
            .map(|m| m.reshape(&[n, d]))
            .collect::<Result<_>>()?;
        let mut out: [Option<Var<'t>>; MODALITIES] = [None; MODALITIES];
        let mut masks: [Option<DecisionMask>; MODALITIES] = Default::default();
        let mut mask_vars: [Option<Var<'t>>; MODALITIES] = [None; MODALITIES];
        for ((a, b), attn) in PAIRS.iter().copied().zip(&self.pairs) {
            let pa = self.predictor.forward(p, tokens[a], tau, mode, rng)?;
            let pb = self.predictor.forward(p, tokens[b], tau, mode, rng)?;
            let ta = prune(tokens[a], pa.mask)?;
            let tb = prune(tokens[b], pb.mask)?;
            let (ha, hb) = attn.forward(p, ta, tb)?;
            let (fa, fb) = substitute_masked(ha, hb, pa.mask, pb.mask)?;
            out[a] = Some(fa.reshape(&spatial)?);
            out[b] = Some(fb.reshape(&spatial)?);
            mask_vars[a] = Some(pa.mask);
            mask_vars[b] = Some(pb.mask);
            masks[a] = Some(pa.decision);
            masks[b] = Some(pb.decision);
        }
        let streams = out.map(Option::unwrap);
        let fused = maps[0].tape().concat(&streams, 3)?;
        Ok(AwareOutput {
            fused,
            masks: masks.map(Option::unwrap),
            mask_vars: mask_vars.map(Option::unwrap),
        })
    }
}
