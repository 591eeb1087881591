//! Small deterministic tensor library with reverse-mode autodiff.
//!
//! Everything runs on one thread in a fixed order, so repeated runs produce
//! bit-identical results. That property is what lets an encoder and a decoder
//! built on this crate agree on every probability they compute.

pub mod conv;
pub mod float;
pub mod graph;
pub mod ops;
pub mod tensor;

pub use conv::ConvGeom;
pub use float::{std_normal_cdf, std_normal_pdf, Float};
pub use graph::{Grads, Graph, Var};
pub use ops::{bmm, LIKELIHOOD_FLOOR};
pub use tensor::Tensor;
