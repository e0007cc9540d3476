//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! The engine is a define-by-run tape: every forward operation appends a node
//! holding its eagerly computed values, and `Tape::grad` replays the recording
//! in reverse. Adjoints are emitted as ordinary tape nodes, so a gradient is
//! itself differentiable, which lets the critic's input-gradient norm
//! be penalized and then differentiated again with respect to the critic
//! parameters.

mod adam;
mod tape;
mod tensor;

pub use adam::{adam_update, AdamConfig, AdamState, ParamGroup};
pub use tape::{GradMap, NodeId, Tape};
pub use tensor::Tensor;
