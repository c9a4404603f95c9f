//! Dense-tensor autodiff substrate: tensors, a reverse-mode tape, named
//! parameters, an Adam optimizer and a finite-difference checker.

mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_params};
pub use graph::{gelu, softmax_in_place, CeRow, Graph, Segment, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
