//! Minimal reverse-mode differentiation: tensors, a recording tape, the five
//! layer kinds the models need, ADAM, and finite-difference checks.

mod graph;
mod kernels;
mod layers;
mod params;
mod tensor;

pub mod gradcheck;

pub use gradcheck::{gradcheck, gradcheck_objective, GradcheckReport};
pub use graph::{Eager, Graph, Tape, TapeGradients, Var};
pub use kernels::{sigmoid, softplus};
pub use layers::{backward, forward, LayerKind, LayerSpec, Network, Recording};
pub use params::{adam_step, he_uniform, AdamConfig, Gradients, ParamEntry, ParamSet};
pub use tensor::Tensor;
