//! Bottleneck fusion by mosaic token shifting across modalities.
//!
//! Tokens of the four modalities are permuted per position by a fixed
//! pattern, attended spatially within each (shifted) modality, moved back,
//! then attended across the modality axis at every position.

use crate::aware::partner;
use crate::backbone::{BackboneConfig, MODALITIES};
use crate::error::{Error, Result};
use crate::nn::{Affine, Bound, Linear, ParamStore};
use crate::tensor::{Rng, Var};

/// The three per-position permutations cycled by the mosaic pattern.
/// `SIGMAS[s][i]` is the source modality of output modality `i`.
pub const SIGMAS: [[usize; MODALITIES]; 3] = [[0, 1, 2, 3], [1, 0, 3, 2], [2, 3, 0, 1]];

/// Which pattern the shift module uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatternKind {
    Mosaic,
    Identity,
}

/// Source modality per output modality and position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShiftPattern {
    /// `columns[k][i]`: source modality of output modality `i` at position `k`.
    columns: Vec<[usize; MODALITIES]>,
}

impl ShiftPattern {
    /// Cyclic mosaic: position `k` uses `SIGMAS[k % 3]`.
    pub fn build(tokens: usize) -> Self {
        Self {
            columns: (0..tokens).map(|k| SIGMAS[k % 3]).collect(),
        }
    }

    pub fn identity(tokens: usize) -> Self {
        Self {
            columns: vec![SIGMAS[0]; tokens],
        }
    }

    pub fn of_kind(kind: PatternKind, tokens: usize) -> Self {
        match kind {
            PatternKind::Mosaic => Self::build(tokens),
            PatternKind::Identity => Self::identity(tokens),
        }
    }

    /// Builds from explicit columns, checking the permutation and
    /// partner-exclusion invariants.
    pub fn from_columns(columns: Vec<[usize; MODALITIES]>) -> Result<Self> {
        let p = Self { columns };
        p.validate()?;
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    /// Source modality for output modality `i` at position `k`.
    pub fn source(&self, modality: usize, position: usize) -> usize {
        self.columns[position][modality]
    }

    pub fn columns(&self) -> &[[usize; MODALITIES]] {
        &self.columns
    }

    pub fn validate(&self) -> Result<()> {
        for (k, col) in self.columns.iter().enumerate() {
            let mut seen = [false; MODALITIES];
            for (i, &src) in col.iter().enumerate() {
                if src >= MODALITIES || seen[src] {
                    return Err(Error::invalid(
                        "shift_pattern",
                        format!("position {k}: {col:?} is not a permutation"),
                    ));
                }
                seen[src] = true;
                if src == partner(i) {
                    return Err(Error::invalid(
                        "shift_pattern",
                        format!("position {k}: modality {i} draws from its partner"),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Row index into the modality-major stack `[4N, d]` for each output row.
    pub fn gather_index(&self) -> Vec<usize> {
        let n = self.columns.len();
        let mut idx = Vec::with_capacity(MODALITIES * n);
        for i in 0..MODALITIES {
            for (k, col) in self.columns.iter().enumerate() {
                idx.push(col[i] * n + k);
            }
        }
        idx
    }
}

fn check_stack(op: &'static str, x: &Var<'_>, pattern: &ShiftPattern) -> Result<()> {
    let s = x.shape();
    if s.len() != 2 || s[0] != MODALITIES * pattern.len() {
        return Err(Error::shape(
            op,
            format!(
                "stacked tokens {s:?}, pattern covers {} positions",
                pattern.len()
            ),
        ));
    }
    Ok(())
}

/// `out[i][k] = in[A[i][k]][k]` on the modality-major stack `[4N, d]`.
pub fn shift_stacked<'t>(x: Var<'t>, pattern: &ShiftPattern) -> Result<Var<'t>> {
    check_stack("shift", &x, pattern)?;
    x.gather(0, &pattern.gather_index())
}

/// Inverse of [`shift_stacked`]: `out[A[i][k]][k] = in[i][k]`.
pub fn unshift_stacked<'t>(x: Var<'t>, pattern: &ShiftPattern) -> Result<Var<'t>> {
    check_stack("unshift", &x, pattern)?;
    let rows = x.shape()[0];
    x.scatter(0, &pattern.gather_index(), rows)
}

fn stack<'t>(feats: &[Var<'t>; MODALITIES]) -> Result<Var<'t>> {
    let s = feats[0].shape();
    if s.len() != 2 || feats.iter().any(|f| f.shape() != s) {
        return Err(Error::shape(
            "shift",
            format!("modality tokens {:?}", feats.map(|f| f.shape())),
        ));
    }
    feats[0].tape().concat(feats, 0)
}

fn unstack<'t>(x: Var<'t>) -> Result<[Var<'t>; MODALITIES]> {
    let n = x.shape()[0] / MODALITIES;
    let parts: Vec<Var<'t>> = (0..MODALITIES)
        .map(|i| x.slice(0, i * n, n))
        .collect::<Result<_>>()?;
    Ok([parts[0], parts[1], parts[2], parts[3]])
}

/// Shifts four `[N, d]` token sets.
pub fn shift<'t>(feats: &[Var<'t>; MODALITIES], pattern: &ShiftPattern) -> Result<[Var<'t>; MODALITIES]> {
    unstack(shift_stacked(stack(feats)?, pattern)?)
}

/// Moves shifted tokens back to their original modalities.
pub fn unshift<'t>(feats: &[Var<'t>; MODALITIES], pattern: &ShiftPattern) -> Result<[Var<'t>; MODALITIES]> {
    unstack(unshift_stacked(stack(feats)?, pattern)?)
}

/// Pre-norm residual multi-head attention: `x + MHA(LN(x))`.
#[derive(Clone, Debug)]
pub struct MhaBlock {
    pub norm: Affine,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub width: usize,
    pub heads: usize,
}

impl MhaBlock {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!(
                "width {width} not divisible by {heads} heads"
            )));
        }
        let lin = |store: &mut ParamStore, part: &str, rng: &mut Rng| {
            Linear::new(store, &format!("{name}.{part}"), width, width, false, rng)
        };
        Ok(Self {
            norm: Affine::new(store, &format!("{name}.norm"), width),
            query: lin(store, "query", rng),
            key: lin(store, "key", rng),
            value: lin(store, "value", rng),
            output: lin(store, "output", rng),
            width,
            heads,
        })
    }

    /// `x: [B, S, d]`; attention runs over `S` independently per batch row.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        if s.len() != 3 || s[1] == 0 || s[2] != self.width {
            return Err(Error::shape(
                "mha_block",
                format!("input {s:?}, width {}", self.width),
            ));
        }
        let (b, seq, d, n) = (s[0], s[1], s[2], self.heads);
        let dn = d / n;
        let ln = self.norm.forward(p, x.layer_norm())?;
        let split = |y: Var<'t>| -> Result<Var<'t>> {
            y.reshape(&[b, seq, n, dn])?
                .transpose(&[0, 2, 1, 3])?
                .reshape(&[b * n, seq, dn])
        };
        let q = split(self.query.forward(p, ln)?)?;
        let k = split(self.key.forward(p, ln)?)?;
        let v = split(self.value.forward(p, ln)?)?;
        let scores = q
            .matmul(k.transpose(&[0, 2, 1])?)?
            .mul_scalar(1.0 / (dn as f64).sqrt());
        let heads = scores.softmax().matmul(v)?;
        let merged = heads
            .reshape(&[b, n, seq, dn])?
            .transpose(&[0, 2, 1, 3])?
            .reshape(&[b, seq, d])?;
        x.add(self.output.forward(p, merged)?)
    }
}

/// Shift, spatial attention, shift back, modality attention.
#[derive(Clone, Debug)]
pub struct ModalityShift {
    pub layer: usize,
    pub spatial: MhaBlock,
    pub modality: MhaBlock,
    pub pattern: ShiftPattern,
}

impl ModalityShift {
    pub fn new(
        store: &mut ParamStore,
        cfg: &BackboneConfig,
        layer: usize,
        heads: usize,
        kind: PatternKind,
        rng: &mut Rng,
    ) -> Result<Self> {
        let d = cfg.modality_width(layer);
        let base = format!("shift.layer{layer}");
        Ok(Self {
            layer,
            spatial: MhaBlock::new(store, &format!("{base}.spatial"), d, heads, rng)?,
            modality: MhaBlock::new(store, &format!("{base}.modality"), d, heads, rng)?,
            pattern: ShiftPattern::of_kind(kind, cfg.tokens(layer)),
        })
    }

    /// `maps`: four `[d, h, w, C/4]` maps; returns `[d, h, w, C]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, maps: &[Var<'t>; MODALITIES]) -> Result<Var<'t>> {
        let spatial = maps[0].shape();
        if spatial.len() != 4 || maps.iter().any(|m| m.shape() != spatial) {
            return Err(Error::shape(
                "modality_shift",
                format!("feature maps {:?}", maps.map(|m| m.shape())),
            ));
        }
        let d = spatial[3];
        let n: usize = spatial[..3].iter().product();
        if n != self.pattern.len() {
            return Err(Error::shape(
                "modality_shift",
                format!("{n} tokens, pattern covers {}", self.pattern.len()),
            ));
        }
        let tape = maps[0].tape();
        let tokens: Vec<Var<'t>> = maps.iter().map(|m| m.reshape(&[n, d])).collect::<Result<_>>()?;
        let stacked = tape.concat(&tokens, 0)?;
        let shifted = shift_stacked(stacked, &self.pattern)?.reshape(&[MODALITIES, n, d])?;
        let attended = self.spatial.forward(p, shifted)?.reshape(&[MODALITIES * n, d])?;
        let restored = unshift_stacked(attended, &self.pattern)?.reshape(&[MODALITIES, n, d])?;
        let per_position = restored.transpose(&[1, 0, 2])?;
        let mixed = self.modality.forward(p, per_position)?.transpose(&[1, 0, 2])?;
        let streams: Vec<Var<'t>> = (0..MODALITIES)
            .map(|i| mixed.slice(0, i, 1)?.reshape(&spatial))
            .collect::<Result<_>>()?;
        tape.concat(&streams, 3)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmas_respect_invariants() {
        assert!(ShiftPattern::build(3).validate().is_ok());
        assert!(ShiftPattern::from_columns(vec![[3, 1, 2, 0]]).is_err());
        assert!(ShiftPattern::from_columns(vec![[1, 1, 2, 3]]).is_err());
    }

    #[test]
    fn single_position_is_identity() {
        assert_eq!(ShiftPattern::build(1), ShiftPattern::identity(1));
    }

    #[test]
    fn heads_must_divide_width() {
        let mut s = ParamStore::new();
        assert!(MhaBlock::new(&mut s, "m", 6, 4, &mut Rng::new(0)).is_err());
    }
}
