//! Mixture-of-LoRA-experts layers with explicit backpropagation,
//! Riemannian gradient preconditioning and gate-based gradient rescaling.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense `f64` matrices, softmax/top-k, seeded random stream
//! - [`layer`]: the MoE-LoRA layer, routing and both forward modes
//! - [`grad`]: hand-written backward passes and losses
//! - [`precond`]: Riemannian preconditioners and gate rescaling
//! - [`optim`]: SGD / AdamW with expert and router parameter groups
//! - [`oracle`]: projection identities and finite-difference checks
//! - [`bench`]: synthetic tasks, the training loop and run comparison
//! - [`checkpoint`]: binary layer snapshots
//! - [`config`] and [`cli`]: the `moelora` command line
//!
//! Runnable walkthroughs live in `examples/`; see the README.

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod grad;
pub mod layer;
pub mod optim;
pub mod oracle;
pub mod precond;
pub mod tensor;

pub use error::{Error, Result};
pub use layer::{ForwardMode, LayerShape, LoraExpert, MoeLoraLayer, Routing};
pub use tensor::{Matrix, RngStream};
