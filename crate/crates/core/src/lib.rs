//! Model merging by weighted parameter averaging.
//!
//! A resilient model is built from a fine-tuned target model, its base model
//! and peer fine-tuned models by averaging parameters. Merging weights for
//! the peers come from a temperature softmax over their losses on a handful
//! of target-domain examples.
//!
//! - [`checkpoint`]: container I/O with lazy per-tensor access.
//! - [`merge`]: the three merge forms, streamed tensor by tensor.
//! - [`solver`]: loss reports, few-shot sets and softmax weights.
//! - [`eval`]: toy decoder/encoder forward passes producing few-shot losses.
//! - [`lab`]: a small forgetting-and-recovery experiment on synthetic tasks.

pub mod checkpoint;
pub mod eval;
pub mod lab;
pub mod merge;
pub mod solver;

pub use checkpoint::{read_checkpoint, validate_compatibility, write_checkpoint, Dtype, TensorMap};

/// Version string recorded in provenance sidecars and reports.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Version of the JSON schemas this crate reads and writes.
pub const FORMAT_VERSION: u32 = 1;
