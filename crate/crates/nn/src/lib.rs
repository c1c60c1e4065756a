//! Dense-tensor numerical kernel: layers, losses, parameter initialization,
//! ADAM, and a reverse-mode tape whose gradients are verified against finite
//! differences.
//!
//! Everything is generic over `f32`/`f64`. Training uses single precision;
//! the gradient-check suite instantiates the identical code in double
//! precision.

pub mod adam;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod ops;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamConfig};
pub use error::{NnError, Result};
pub use init::{init_parameters, init_with_scheme, InitScheme};
pub use ops::{
    batchnorm_forward, conv2d_forward, conv2d_transpose_forward, cross_entropy_loss, fc_forward,
    lstm_cell_step, mse_loss, softmax, Activation,
};
pub use params::{ParamEntry, ParamStore};
pub use tape::{Graph, NodeId};
pub use tensor::{matmul_nn, matmul_nt, matmul_tn, Element, Tensor};
