//! Dense tensors, the reverse-mode tape and the numeric primitives the
//! model is built from.

mod gumbel;
pub mod kernels;
mod rng;
mod tape;
mod value;

pub use gumbel::{gumbel_softmax, one_hot_argmax};
pub use rng::Rng;
pub use tape::{Attr, Attrs, Gradients, Primitive, Tape, Var};
pub use value::{broadcast_shapes, strides, Tensor};
