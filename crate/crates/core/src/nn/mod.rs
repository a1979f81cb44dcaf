//! Reverse-mode differentiation and the window classifiers built on it.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::grad_check;
pub use graph::{Gradients, Graph, Var};
pub use loss::{bce_with_logits, focal_loss, LossKind};
pub use model::{Arch, Model, ModelSpec, Probe};
pub use optim::{Adam, AdamConfig};
pub use params::{Parameter, ParameterSet};
pub use tensor::Tensor;
