//! Adversarial domain adaptation with graph convolution for cross-network
//! node classification.
//!
//! A shared graph-convolutional representation learner embeds the nodes of a
//! labeled source network and an unlabeled (or sparsely labeled) target
//! network. A label classifier is trained on source labels while a
//! Wasserstein critic with gradient penalty measures the distance between
//! the two embedding distributions, and the representation learner is
//! trained to shrink it.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod objective;
pub mod sparse;
pub mod trainer;

pub mod cli;

pub use error::{Error, Result};

/// Training allocates and frees many large dense buffers every step; the
/// system allocator returns them to the OS and pays page faults on reuse.
#[cfg(feature = "mimalloc")]
#[global_allocator]
static ALLOCATOR: mimalloc::MiMalloc = mimalloc::MiMalloc;
