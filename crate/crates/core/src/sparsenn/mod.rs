//! Sparse-tensor neural network substrate: kernel maps, masked sparse
//! convolution, graph execution with reverse-mode gradients, losses and the
//! optimizer. Everything runs in `f64`.

mod conv;
mod dense;
pub mod gradcheck;
mod graph;
mod kernel;
mod loss;
mod optim;

pub use conv::{Conv, Param};
pub use dense::{dense_to_sparse, sparse_to_dense};
pub use gradcheck::{grad_check, grad_check_softmax_ce};
pub use graph::{Activations, GraphBuilder, Network, Node, NodeId};
pub use kernel::{allowed_offsets, kernel_offsets, mask_offsets, KernelMap, Mask};
pub use loss::{accuracy, argmax, elu, softmax, softmax_ce, softmax_ce_rows, softmax_rows};
pub use optim::{adam_step, lr_schedule, AdamState, StepLr, BASE_LR};
