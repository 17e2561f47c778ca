//! Named parameter storage and the small layers the model is assembled from.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tape, Tensor, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of named trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Replaces the value of `name`, checking the shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .lookup(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        let expected = self.values[id.0].shape();
        if expected != value.shape() {
            return Err(Error::ParameterShape {
                name: name.to_string(),
                expected: expected.to_vec(),
                found: value.shape().to_vec(),
            });
        }
        self.values[id.0] = value;
        Ok(())
    }

    /// Puts every parameter on `tape` as a trainable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.values.iter().map(|v| tape.leaf(v.clone())).collect(),
        }
    }
}

/// Parameters of one forward pass, as tape leaves.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

/// He-normal initialization for a layer with `fan_in` inputs.
pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| rng.normal() * std)
}

/// Xavier-style normal initialization.
pub fn xavier_normal(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| rng.normal() * std)
}

/// Affine map over the last axis: `x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            xavier_normal(&[input, output], input, output, rng),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([output])));
        Self { weight, bias }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul(p.var(self.weight))?;
        match self.bias {
            Some(b) => y.add(p.var(b)),
            None => Ok(y),
        }
    }
}

/// Learnable per-channel scale and offset applied after a normalization.
#[derive(Clone, Debug)]
pub struct Affine {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Affine {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones([channels])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([channels])),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.mul(p.var(self.gamma))?.add(p.var(self.beta))
    }
}

/// conv3d (no bias) -> instance norm -> affine -> ReLU, channel-last.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub weight: ParamId,
    pub norm: Affine,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = kernel * kernel * kernel * cin;
        let weight = store.add(
            format!("{name}.conv.weight"),
            he_normal(&[kernel, kernel, kernel, cin, cout], fan_in, rng),
        );
        Self {
            weight,
            norm: Affine::new(store, &format!("{name}.norm"), cout),
            kernel,
            stride,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.conv3d(p.var(self.weight), self.stride, self.kernel / 2)?;
        let y = y.instance_norm()?;
        Ok(self.norm.forward(p, y)?.relu())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_counts_and_rejects_bad_shapes() {
        let mut rng = Rng::new(1);
        let mut s = ParamStore::new();
        let lin = Linear::new(&mut s, "fc", 3, 2, true, &mut rng);
        assert_eq!(s.scalar_count(), 8);
        assert_eq!(s.name(lin.weight), "fc.weight");
        assert!(s.set("fc.bias", Tensor::zeros([3])).is_err());
        assert!(matches!(
            s.set("nope", Tensor::zeros([2])),
            Err(Error::UnknownParameter(_))
        ));
    }

    #[test]
    fn conv_block_zero_input_gives_zero() {
        let mut rng = Rng::new(2);
        let mut s = ParamStore::new();
        let blk = ConvBlock::new(&mut s, "b", 1, 3, 3, 2, &mut rng);
        let tape = Tape::new();
        let p = s.bind(&tape);
        let x = tape.constant(Tensor::zeros([4, 4, 4, 1]));
        let y = blk.forward(&p, x).unwrap().value();
        assert_eq!(y.shape(), &[2, 2, 2, 3]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }
}
