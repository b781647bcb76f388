//! Skeleton action generation with attention-sparsified graph convolutions.
//!
//! The crate trains a conditional GAN whose generator runs a recurrent
//! backbone over time, accumulates per-frame coordinate residuals, and
//! refines them with a stack of graph convolutions over a block-sparse
//! sequence adjacency. The adjacency couples every joint to its skeleton
//! neighbors within a frame and, across frames, to the same joint in a
//! small attention-selected set of past frames.
//!
//! Modules follow the pipeline:
//!
//! * [`numcore`] — dense f64 tensors, a reverse-mode gradient tape, Adam,
//!   and a deterministic RNG. Everything differentiable is built on this.
//! * [`skeleton`] — topologies, action sequences, file formats, the
//!   synthetic dataset generator, and SVG rendering.
//! * [`attention`] — causal masked self-attention over frames plus the
//!   per-row top-K score pruning that sparsifies the sequence graph.
//! * [`sagc`] — block-sparse sequence adjacency assembly and the
//!   degree-normalized five-layer graph convolution stack.
//! * [`generator`] — the conditional sequence generator.
//! * [`gan`] — dual discriminators, losses, and the training loop.
//! * [`eval`] — MMD two-sample estimators, a recognition classifier, and
//!   label-mixing sweeps.
//! * [`cli`] — command implementations behind the `sagcn` binary.

pub mod attention;
pub mod cli;
pub mod eval;
pub mod gan;
pub mod generator;
pub mod numcore;
pub mod sagc;
pub mod skeleton;

/// Crate-wide error type. The CLI maps `Config`-like errors to exit code 1
/// and runtime/numeric errors to exit code 2.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("training diverged: non-finite gradient for parameter `{param}` at step {step}")]
    Divergence { param: String, step: u64 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
