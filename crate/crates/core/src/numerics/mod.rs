//! Dense matrices, tape-based reverse-mode differentiation, AdamW and
//! binary checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod param;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, grad_check_report, relative_error, GradCheckMode, GradComparison};
pub use graph::{top_k_indices, Graph, NodeId};
pub use optim::{AdamW, AdamWConfig};
pub use param::{Gradients, Param, ParamId, ParamStore};
pub use tensor::{softmax_rows, Tensor2};
