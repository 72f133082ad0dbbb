//! Dense `f64` tensors, a recording graph with reverse-mode gradients,
//! GRU cells, SGD, gradient checking, and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod opcheck;
pub mod gru;
pub mod optim;
pub mod param;
pub mod tensor;

pub use gradcheck::{compare_gradients, grad_check, GradCheckReport};
pub use graph::{sigmoid, Graph, Var};
pub use opcheck::op_grad_checks;
pub use gru::{bigru, gru_cell, BiGruOutput, BiGruParams, GruParams};
pub use optim::{sgd_step, OptState};
pub use param::{Gradients, ParamId, ParamSet, Parameter};
pub use tensor::Tensor;
