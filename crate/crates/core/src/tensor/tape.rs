//! Reverse-mode tape.
//!
//! Every differentiable value lives on a [`Tape`] as a node holding its
//! forward value, the ids of its inputs and a closure mapping the output
//! adjoint to input adjoints. [`Tape::backward`] walks the nodes once in
//! reverse creation order, which is a valid topological order because a
//! node can only reference nodes created before it.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::str::FromStr;

use super::kernels::{self, ConvGeom};
use super::value::{broadcast_index, broadcast_shapes, reduce_to_shape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Primitive {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    AddScalar,
    MulScalar,
    Relu,
    Sigmoid,
    Softmax,
    LayerNorm,
    InstanceNorm,
    Conv3d,
    Transpose,
    Reshape,
    Concat,
    Slice,
    AvgPool,
    Sum,
    Expand,
    Upsample2x,
    Gather,
    Scatter,
    StraightThrough,
}

impl Primitive {
    pub const ALL: [Primitive; 25] = [
        Primitive::Leaf,
        Primitive::MatMul,
        Primitive::Add,
        Primitive::Sub,
        Primitive::Mul,
        Primitive::Div,
        Primitive::AddScalar,
        Primitive::MulScalar,
        Primitive::Relu,
        Primitive::Sigmoid,
        Primitive::Softmax,
        Primitive::LayerNorm,
        Primitive::InstanceNorm,
        Primitive::Conv3d,
        Primitive::Transpose,
        Primitive::Reshape,
        Primitive::Concat,
        Primitive::Slice,
        Primitive::AvgPool,
        Primitive::Sum,
        Primitive::Expand,
        Primitive::Upsample2x,
        Primitive::Gather,
        Primitive::Scatter,
        Primitive::StraightThrough,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Leaf => "leaf",
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::AddScalar => "add_scalar",
            Primitive::MulScalar => "mul_scalar",
            Primitive::Relu => "relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Softmax => "softmax",
            Primitive::LayerNorm => "layernorm",
            Primitive::InstanceNorm => "instance_norm",
            Primitive::Conv3d => "conv3d",
            Primitive::Transpose => "transpose",
            Primitive::Reshape => "reshape",
            Primitive::Concat => "concat",
            Primitive::Slice => "slice",
            Primitive::AvgPool => "avg_pool",
            Primitive::Sum => "sum",
            Primitive::Expand => "expand",
            Primitive::Upsample2x => "upsample2x",
            Primitive::Gather => "gather",
            Primitive::Scatter => "scatter",
            Primitive::StraightThrough => "straight_through",
        }
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Primitive {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Primitive::ALL
            .iter()
            .copied()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::UnknownPrimitive(s.to_string()))
    }
}

/// Attribute values for [`Tape::apply`].
#[derive(Clone, Debug, PartialEq)]
pub enum Attr {
    Int(usize),
    Float(f64),
    Ints(Vec<usize>),
    Tensor(Tensor),
}

#[derive(Clone, Debug, Default)]
pub struct Attrs(Vec<(&'static str, Attr)>);

impl Attrs {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, key: &'static str, value: Attr) -> Self {
        self.0.push((key, value));
        self
    }

    fn get(&self, op: Primitive, key: &'static str) -> Result<&Attr> {
        self.0
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v)
            .ok_or(Error::MissingAttr {
                op: op.name(),
                attr: key,
            })
    }

    fn int(&self, op: Primitive, key: &'static str) -> Result<usize> {
        match self.get(op, key)? {
            Attr::Int(v) => Ok(*v),
            other => Err(Error::invalid(op.name(), format!("{key} = {other:?}"))),
        }
    }

    fn float(&self, op: Primitive, key: &'static str) -> Result<f64> {
        match self.get(op, key)? {
            Attr::Float(v) => Ok(*v),
            Attr::Int(v) => Ok(*v as f64),
            other => Err(Error::invalid(op.name(), format!("{key} = {other:?}"))),
        }
    }

    fn ints(&self, op: Primitive, key: &'static str) -> Result<&[usize]> {
        match self.get(op, key)? {
            Attr::Ints(v) => Ok(v),
            other => Err(Error::invalid(op.name(), format!("{key} = {other:?}"))),
        }
    }

    fn tensor(&self, op: Primitive, key: &'static str) -> Result<&Tensor> {
        match self.get(op, key)? {
            Attr::Tensor(v) => Ok(v),
            other => Err(Error::invalid(op.name(), format!("{key} = {other:?}"))),
        }
    }
}

type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    prim: Primitive,
    value: Tensor,
    inputs: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    fault: Cell<Option<(Primitive, f64)>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    visited: Vec<usize>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of its shape when no path reached it.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.shape()))
    }

    /// Node ids in the order the backward pass processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sign pattern (`input > 0`) of every ReLU input on the tape, in
    /// creation order. Two evaluations with equal patterns lie on the same
    /// linear piece of every ReLU.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let nodes = self.nodes.borrow();
        nodes
            .iter()
            .filter(|n| n.prim == Primitive::Relu)
            .flat_map(|n| nodes[n.inputs[0]].value.data().iter().map(|&v| v > 0.0).collect::<Vec<_>>())
            .collect()
    }

    /// Scales every input adjoint produced by `prim` by `factor` during
    /// backward. Test fixture for checking that gradient checks catch a
    /// broken rule.
    pub fn inject_fault(&self, prim: Primitive, factor: f64) {
        self.fault.set(Some((prim, factor)));
    }

    /// Trainable leaf.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_node(Primitive::Leaf, value, Vec::new(), true, None)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_node(Primitive::Leaf, value, Vec::new(), false, None)
    }

    fn push_node(
        &self,
        prim: Primitive,
        value: Tensor,
        inputs: Vec<usize>,
        requires_grad: bool,
        backward: Option<BackwardFn>,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            prim,
            value,
            inputs,
            requires_grad,
            backward,
        });
        Var { tape: self, id }
    }

    fn push<F>(&self, prim: Primitive, value: Tensor, inputs: &[Var<'_>], backward: F) -> Var<'_>
    where
        F: Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    {
        let requires_grad = inputs.iter().any(|v| v.requires_grad());
        let ids = inputs.iter().map(|v| v.id).collect();
        let bw: Option<BackwardFn> = if requires_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        self.push_node(prim, value, ids, requires_grad, bw)
    }

    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(output.tape, self) {
            return Err(Error::Backward("output belongs to another tape".into()));
        }
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        if !out.value.is_scalar() {
            return Err(Error::Backward(format!(
                "output must be scalar, got shape {:?}",
                out.value.shape()
            )));
        }
        if !out.requires_grad {
            return Err(Error::Backward(
                "output does not depend on any trainable leaf".into(),
            ));
        }
        let fault = self.fault.get();
        let mut grads: Vec<Option<Tensor>> = vec![None; output.id + 1];
        grads[output.id] = Some(Tensor::ones(out.value.shape()));
        let mut visited = Vec::new();
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            let Some(bw) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            visited.push(id);
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|&i| nodes[i].requires_grad)
                .collect();
            let input_grads = bw(&g, &needs);
            grads[id] = Some(g);
            for ((&inp, need), ig) in node.inputs.iter().zip(&needs).zip(input_grads) {
                let (true, Some(mut ig)) = (*need, ig) else {
                    continue;
                };
                if ig.shape() != nodes[inp].value.shape() {
                    return Err(Error::Backward(format!(
                        "{} produced gradient {:?} for input of shape {:?}",
                        node.prim,
                        ig.shape(),
                        nodes[inp].value.shape()
                    )));
                }
                if let Some((p, factor)) = fault {
                    if p == node.prim {
                        ig = ig.scale(factor);
                    }
                }
                match &mut grads[inp] {
                    Some(acc) => acc.add_assign(&ig),
                    slot => *slot = Some(ig),
                }
            }
        }
        Ok(Gradients { grads, visited })
    }

    pub fn concat<'t>(&'t self, xs: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = xs
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let shape0 = first.shape();
        if axis >= shape0.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {shape0:?}")));
        }
        let values: Vec<Tensor> = xs.iter().map(|v| v.value()).collect();
        for v in &values {
            let s = v.shape();
            let ok = s.len() == shape0.len()
                && s.iter()
                    .zip(&shape0)
                    .enumerate()
                    .all(|(a, (x, y))| a == axis || x == y);
            if !ok {
                return Err(Error::shape("concat", format!("{shape0:?} vs {s:?}")));
            }
        }
        let refs: Vec<&Tensor> = values.iter().collect();
        let out = kernels::concat(&refs, axis);
        let extents: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        Ok(self.push(Primitive::Concat, out, xs, move |g, needs| {
            let mut start = 0;
            extents
                .iter()
                .zip(needs)
                .map(|(&len, &need)| {
                    let r = need.then(|| kernels::slice(g, axis, start, len));
                    start += len;
                    r
                })
                .collect()
        }))
    }

    /// Generic dispatch by primitive id. Typed methods on [`Var`] are the
    /// main interface; this exists for table-driven callers and tests.
    pub fn apply<'t>(
        &'t self,
        prim: Primitive,
        inputs: &[Var<'t>],
        attrs: &Attrs,
    ) -> Result<Var<'t>> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::invalid(
                    prim.name(),
                    format!("expected {n} inputs, got {}", inputs.len()),
                ))
            }
        };
        match prim {
            Primitive::Leaf => Err(Error::invalid("leaf", "leaves are created with Tape::leaf")),
            Primitive::Concat => self.concat(inputs, attrs.int(prim, "axis")?),
            Primitive::MatMul | Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div => {
                arity(2)?;
                let (a, b) = (inputs[0], inputs[1]);
                match prim {
                    Primitive::MatMul => a.matmul(b),
                    Primitive::Add => a.add(b),
                    Primitive::Sub => a.sub(b),
                    Primitive::Mul => a.mul(b),
                    _ => a.div(b),
                }
            }
            _ => {
                arity(1)?;
                let x = inputs[0];
                match prim {
                    Primitive::AddScalar => Ok(x.add_scalar(attrs.float(prim, "value")?)),
                    Primitive::MulScalar => Ok(x.mul_scalar(attrs.float(prim, "value")?)),
                    Primitive::Relu => Ok(x.relu()),
                    Primitive::Sigmoid => Ok(x.sigmoid()),
                    Primitive::Softmax => Ok(x.softmax()),
                    Primitive::LayerNorm => Ok(x.layer_norm()),
                    Primitive::InstanceNorm => x.instance_norm(),
                    Primitive::Conv3d => {
                        let w = self.constant(attrs.tensor(prim, "weight")?.clone());
                        x.conv3d(w, attrs.int(prim, "stride")?, attrs.int(prim, "padding")?)
                    }
                    Primitive::Transpose => x.transpose(attrs.ints(prim, "perm")?),
                    Primitive::Reshape => x.reshape(attrs.ints(prim, "shape")?),
                    Primitive::Slice => x.slice(
                        attrs.int(prim, "axis")?,
                        attrs.int(prim, "start")?,
                        attrs.int(prim, "len")?,
                    ),
                    Primitive::AvgPool => x.avg_pool(attrs.int(prim, "axis")?),
                    Primitive::Sum => x.sum_axis(attrs.int(prim, "axis")?),
                    Primitive::Expand => x.expand(attrs.ints(prim, "shape")?),
                    Primitive::Upsample2x => x.upsample2x(),
                    Primitive::Gather => {
                        x.gather(attrs.int(prim, "axis")?, attrs.ints(prim, "index")?)
                    }
                    Primitive::Scatter => x.scatter(
                        attrs.int(prim, "axis")?,
                        attrs.ints(prim, "index")?,
                        attrs.int(prim, "extent")?,
                    ),
                    Primitive::StraightThrough => {
                        x.straight_through(attrs.tensor(prim, "hard")?.clone())
                    }
                    _ => unreachable!(),
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn primitive(&self) -> Primitive {
        self.tape.nodes.borrow()[self.id].prim
    }

    fn binary(
        self,
        other: Var<'t>,
        prim: Primitive,
        f: fn(f64, f64) -> f64,
    ) -> Result<(Tensor, Tensor, Tensor, Vec<usize>)> {
        let a = self.value();
        let b = other.value();
        let shape = broadcast_shapes(a.shape(), b.shape()).ok_or_else(|| {
            Error::shape(prim.name(), format!("{:?} vs {:?}", a.shape(), b.shape()))
        })?;
        let out = if a.shape() == b.shape() {
            a.zip_map(&b, f)
        } else {
            let ia = broadcast_index(a.shape(), &shape);
            let ib = broadcast_index(b.shape(), &shape);
            let (ad, bd) = (a.data(), b.data());
            let data = ia.iter().zip(&ib).map(|(&i, &j)| f(ad[i], bd[j])).collect();
            Tensor::new(shape.clone(), data)?
        };
        Ok((a, b, out, shape))
    }

    /// `a ⊕ b` with broadcasting. Broadcasting the operands to the output
    /// shape on demand in backward keeps the saved state small.
    fn expand_to(t: &Tensor, shape: &[usize]) -> Tensor {
        if t.shape() == shape {
            return t.clone();
        }
        let idx = broadcast_index(t.shape(), shape);
        let d = t.data();
        Tensor::new(shape.to_vec(), idx.iter().map(|&i| d[i]).collect()).unwrap()
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b, out, _) = self.binary(other, Primitive::Add, |x, y| x + y)?;
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        Ok(self.tape.push(Primitive::Add, out, &[self, other], move |g, n| {
            vec![
                n[0].then(|| reduce_to_shape(g, &sa)),
                n[1].then(|| reduce_to_shape(g, &sb)),
            ]
        }))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b, out, _) = self.binary(other, Primitive::Sub, |x, y| x - y)?;
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        Ok(self.tape.push(Primitive::Sub, out, &[self, other], move |g, n| {
            vec![
                n[0].then(|| reduce_to_shape(g, &sa)),
                n[1].then(|| reduce_to_shape(&g.scale(-1.0), &sb)),
            ]
        }))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b, out, shape) = self.binary(other, Primitive::Mul, |x, y| x * y)?;
        Ok(self.tape.push(Primitive::Mul, out, &[self, other], move |g, n| {
            vec![
                n[0].then(|| {
                    let bb = Self::expand_to(&b, &shape);
                    reduce_to_shape(&g.zip_map(&bb, |x, y| x * y), a.shape())
                }),
                n[1].then(|| {
                    let aa = Self::expand_to(&a, &shape);
                    reduce_to_shape(&g.zip_map(&aa, |x, y| x * y), b.shape())
                }),
            ]
        }))
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b, out, shape) = self.binary(other, Primitive::Div, |x, y| x / y)?;
        Ok(self.tape.push(Primitive::Div, out, &[self, other], move |g, n| {
            let bb = Self::expand_to(&b, &shape);
            vec![
                n[0].then(|| reduce_to_shape(&g.zip_map(&bb, |x, y| x / y), a.shape())),
                n[1].then(|| {
                    let aa = Self::expand_to(&a, &shape);
                    let t = g.zip_map(&aa, |x, y| x * y).zip_map(&bb, |x, y| -x / (y * y));
                    reduce_to_shape(&t, b.shape())
                }),
            ]
        }))
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        let out = self.value().map(|x| x + s);
        self.tape
            .push(Primitive::AddScalar, out, &[self], |g, _| vec![Some(g.clone())])
    }

    pub fn mul_scalar(self, s: f64) -> Var<'t> {
        let out = self.value().scale(s);
        self.tape
            .push(Primitive::MulScalar, out, &[self], move |g, _| vec![Some(g.scale(s))])
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let (sa, sb) = (a.shape(), b.shape());
        if sb.len() == 2 && *sa.last().unwrap() == sb[0] {
            let out = kernels::matmul(&a, &b);
            return Ok(self.tape.push(Primitive::MatMul, out, &[self, other], move |g, n| {
                let (ga, gb) = kernels::matmul_backward(&a, &b, g);
                vec![n[0].then_some(ga), n[1].then_some(gb)]
            }));
        }
        if sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[1] {
            let out = kernels::bmm(&a, &b);
            return Ok(self.tape.push(Primitive::MatMul, out, &[self, other], move |g, n| {
                let (ga, gb) = kernels::bmm_backward(&a, &b, g);
                vec![n[0].then_some(ga), n[1].then_some(gb)]
            }));
        }
        Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")))
    }

    pub fn relu(self) -> Var<'t> {
        let x = self.value();
        let out = x.map(|v| v.max(0.0));
        self.tape.push(Primitive::Relu, out, &[self], move |g, _| {
            vec![Some(g.zip_map(&x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }))]
        })
    }

    pub fn sigmoid(self) -> Var<'t> {
        let y = self.value().map(|v| 1.0 / (1.0 + (-v).exp()));
        let saved = y.clone();
        self.tape.push(Primitive::Sigmoid, y, &[self], move |g, _| {
            vec![Some(g.zip_map(&saved, |gv, s| gv * s * (1.0 - s)))]
        })
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'t> {
        let y = kernels::softmax_last(&self.value());
        let saved = y.clone();
        self.tape.push(Primitive::Softmax, y, &[self], move |g, _| {
            vec![Some(kernels::softmax_last_backward(&saved, g))]
        })
    }

    /// Zero-mean unit-variance normalization over the last axis, no affine.
    pub fn layer_norm(self) -> Var<'t> {
        let (y, inv) = kernels::layernorm_last(&self.value());
        let saved = y.clone();
        self.tape.push(Primitive::LayerNorm, y, &[self], move |g, _| {
            vec![Some(kernels::layernorm_last_backward(&saved, &inv, g))]
        })
    }

    /// Per-channel normalization over the spatial axes of `[D,H,W,C]`.
    pub fn instance_norm(self) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() < 2 {
            return Err(Error::shape("instance_norm", format!("{:?}", x.shape())));
        }
        let (y, inv) = kernels::instance_norm(&x);
        let saved = y.clone();
        Ok(self.tape.push(Primitive::InstanceNorm, y, &[self], move |g, _| {
            vec![Some(kernels::instance_norm_backward(&saved, &inv, g))]
        }))
    }

    /// `self: [D,H,W,Cin]`, `weight: [k,k,k,Cin,Cout]`.
    pub fn conv3d(self, weight: Var<'t>, stride: usize, padding: usize) -> Result<Var<'t>> {
        let x = self.value();
        let w = weight.value();
        let (sx, sw) = (x.shape(), w.shape());
        if sx.len() != 4 || sw.len() != 5 || sw[0] != sw[1] || sw[1] != sw[2] || sw[3] != sx[3] {
            return Err(Error::shape("conv3d", format!("input {sx:?}, weight {sw:?}")));
        }
        let geom = ConvGeom::new([sx[0], sx[1], sx[2]], sx[3], sw[4], sw[0], stride, padding)
            .ok_or_else(|| {
                Error::shape(
                    "conv3d",
                    format!("input {sx:?} too small for kernel {} stride {stride}", sw[0]),
                )
            })?;
        let out = kernels::conv3d(&x, &w, &geom);
        Ok(self.tape.push(Primitive::Conv3d, out, &[self, weight], move |g, n| {
            vec![
                n[0].then(|| kernels::conv3d_backward_input(&w, g, &geom)),
                n[1].then(|| kernels::conv3d_backward_weight(&x, g, &geom)),
            ]
        }))
    }

    pub fn transpose(self, perm: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..x.rank()).collect::<Vec<_>>() {
            return Err(Error::shape(
                "transpose",
                format!("perm {perm:?} for {:?}", x.shape()),
            ));
        }
        let out = kernels::transpose(&x, perm);
        let inv = kernels::inverse_perm(perm);
        Ok(self.tape.push(Primitive::Transpose, out, &[self], move |g, _| {
            vec![Some(kernels::transpose(g, &inv))]
        }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let out = x.reshape(shape.to_vec())?;
        let orig = x.shape().to_vec();
        Ok(self.tape.push(Primitive::Reshape, out, &[self], move |g, _| {
            vec![Some(g.reshape(orig.clone()).unwrap())]
        }))
    }

    fn check_axis(&self, op: &'static str, axis: usize) -> Result<Vec<usize>> {
        let s = self.shape();
        if axis >= s.len() {
            return Err(Error::shape(op, format!("axis {axis} for {s:?}")));
        }
        Ok(s)
    }

    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let s = self.check_axis("slice", axis)?;
        if len == 0 || start + len > s[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) on axis {axis} of {s:?}", start + len),
            ));
        }
        let out = kernels::slice(&self.value(), axis, start, len);
        Ok(self.tape.push(Primitive::Slice, out, &[self], move |g, _| {
            vec![Some(kernels::slice_backward(g, &s, axis, start))]
        }))
    }

    /// Global average pooling over `axis` (kept with extent 1).
    pub fn avg_pool(self, axis: usize) -> Result<Var<'t>> {
        let s = self.check_axis("avg_pool", axis)?;
        let out = kernels::mean_axis(&self.value(), axis);
        Ok(self.tape.push(Primitive::AvgPool, out, &[self], move |g, _| {
            let e = s[axis] as f64;
            vec![Some(kernels::repeat_axis(g.data(), &s, axis).scale(1.0 / e))]
        }))
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let s = self.check_axis("sum", axis)?;
        let out = kernels::sum_axis(&self.value(), axis);
        Ok(self.tape.push(Primitive::Sum, out, &[self], move |g, _| {
            vec![Some(kernels::repeat_axis(g.data(), &s, axis))]
        }))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum_all(self) -> Result<Var<'t>> {
        let n = self.value().numel();
        self.reshape(&[n])?.sum_axis(0)
    }

    pub fn expand(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        match broadcast_shapes(x.shape(), shape) {
            Some(s) if s == shape => {}
            _ => {
                return Err(Error::shape(
                    "expand",
                    format!("{:?} -> {shape:?}", x.shape()),
                ))
            }
        }
        let out = Self::expand_to(&x, shape);
        let orig = x.shape().to_vec();
        Ok(self.tape.push(Primitive::Expand, out, &[self], move |g, _| {
            vec![Some(reduce_to_shape(g, &orig))]
        }))
    }

    pub fn upsample2x(self) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() != 4 {
            return Err(Error::shape("upsample2x", format!("{:?}", x.shape())));
        }
        let out = kernels::upsample2x(&x);
        Ok(self.tape.push(Primitive::Upsample2x, out, &[self], |g, _| {
            vec![Some(kernels::upsample2x_backward(g))]
        }))
    }

    pub fn gather(self, axis: usize, index: &[usize]) -> Result<Var<'t>> {
        let s = self.check_axis("gather", axis)?;
        if index.is_empty() || index.iter().any(|&i| i >= s[axis]) {
            return Err(Error::shape(
                "gather",
                format!("index out of range for extent {}", s[axis]),
            ));
        }
        let out = kernels::gather(&self.value(), axis, index);
        let index = index.to_vec();
        let extent = s[axis];
        Ok(self.tape.push(Primitive::Gather, out, &[self], move |g, _| {
            vec![Some(kernels::scatter_add(g, axis, &index, extent))]
        }))
    }

    /// Adds slice `j` of `self` into slot `index[j]` of a zero tensor with
    /// `extent` slots along `axis`.
    pub fn scatter(self, axis: usize, index: &[usize], extent: usize) -> Result<Var<'t>> {
        let s = self.check_axis("scatter", axis)?;
        if index.len() != s[axis] || index.iter().any(|&i| i >= extent) {
            return Err(Error::shape(
                "scatter",
                format!("{} indices into extent {extent} for {s:?}", index.len()),
            ));
        }
        let out = kernels::scatter_add(&self.value(), axis, index, extent);
        let index = index.to_vec();
        Ok(self.tape.push(Primitive::Scatter, out, &[self], move |g, _| {
            vec![Some(kernels::gather(g, axis, &index))]
        }))
    }

    /// Forward value `hard`, adjoint passed to `self` unchanged.
    pub fn straight_through(self, hard: Tensor) -> Result<Var<'t>> {
        if hard.shape() != self.shape().as_slice() {
            return Err(Error::shape(
                "straight_through",
                format!("{:?} vs {:?}", hard.shape(), self.shape()),
            ));
        }
        Ok(self
            .tape
            .push(Primitive::StraightThrough, hard, &[self], |g, _| vec![Some(g.clone())]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = x.mul(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn sigmoid_at_zero() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros([5]));
        let y = x.sigmoid().sum_all().unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn shared_input_accumulates() {
        // f = x*x + 3x + x, df/dx = 2x + 4
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.5));
        let y = x
            .mul(x)
            .unwrap()
            .add(x.mul_scalar(3.0))
            .unwrap()
            .add(x)
            .unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 9.0);
    }

    #[test]
    fn backward_rejects_non_scalar_and_constants() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros([3]));
        assert!(matches!(tape.backward(x.relu()), Err(Error::Backward(_))));
        let c = tape.constant(Tensor::scalar(1.0));
        assert!(matches!(tape.backward(c.relu()), Err(Error::Backward(_))));
    }

    #[test]
    fn visits_each_node_once_in_reverse() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn([4], |i| i as f64 - 1.5));
        let a = x.relu();
        let b = x.sigmoid();
        let c = a.mul(b).unwrap();
        let s = c.sum_all().unwrap();
        let g = tape.backward(s).unwrap();
        let order = g.visit_order().to_vec();
        let mut sorted = order.clone();
        sorted.sort_unstable_by(|a, b| b.cmp(a));
        sorted.dedup();
        assert_eq!(order, sorted);
        assert!(order.contains(&a.id()) && order.contains(&b.id()));
    }

    #[test]
    fn unknown_primitive_name() {
        assert!(matches!(
            "fft".parse::<Primitive>(),
            Err(Error::UnknownPrimitive(_))
        ));
        for p in Primitive::ALL {
            assert_eq!(p.name().parse::<Primitive>().unwrap(), p);
        }
    }

    #[test]
    fn shape_errors_name_the_op() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros([2, 3]));
        let b = tape.leaf(Tensor::zeros([4, 2]));
        let e = a.matmul(b).unwrap_err();
        assert!(e.to_string().contains("matmul") && e.to_string().contains("[2, 3]"));
        let e = a.add(b).unwrap_err();
        assert!(e.to_string().starts_with("add"));
    }

    #[test]
    fn apply_dispatch_checks_attrs() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros([2, 3]));
        let err = tape.apply(Primitive::Slice, &[x], &Attrs::new()).unwrap_err();
        assert!(matches!(err, Error::MissingAttr { op: "slice", .. }));
        let y = tape
            .apply(
                Primitive::Slice,
                &[x],
                &Attrs::new()
                    .with("axis", Attr::Int(1))
                    .with("start", Attr::Int(1))
                    .with("len", Attr::Int(2)),
            )
            .unwrap();
        assert_eq!(y.shape(), vec![2, 2]);
    }
}
