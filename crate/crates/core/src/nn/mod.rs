//! Minimal differentiable substrate: tensors, a recorded tape, the op set
//! the architecture needs, SGD with momentum, and a finite-difference
//! gradient checker.

pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod kernels;
pub mod layers;
pub mod optim;
pub mod param;
pub mod tensor;

pub use graph::{FlopEntry, Gradients, Graph, Var};
pub use init::Init;
pub use kernels::ConvGeometry;
pub use optim::Sgd;
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::{DType, Scalar, Tensor};
