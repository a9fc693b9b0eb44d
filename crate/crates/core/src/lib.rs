//! Adapter-incremental continual learning for audio spectrogram
//! transformers.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors, a reverse-mode tape, Adam, gradient checks
//!   and the `FTT1` tensor file format.
//! - [`frontend`]: 16-bit PCM WAV decoding and the 128-bin log-mel front end.
//! - [`tokenizer`]: strided patch embedding, class token and bilinear
//!   position-table resampling.
//! - [`encoder`]: pre-norm transformer blocks with global (GSA) or
//!   frequency-time factorized (FTA) attention masks.
//! - [`adapter`]: convolutional bottleneck adapters, the per-task units.
//! - [`accounting`]: exact attention pair counts and closed-form parameter
//!   and storage reports.
//! - [`ticl`]: task-incremental training across the three training modes,
//!   accuracy matrices, checkpoints and synthetic tasks.
//! - [`cli`]: the `ftacl` command-line surface.
//!
//! Runnable walkthroughs of each capability live in `examples/`.

pub mod accounting;
pub mod adapter;
pub mod cli;
pub mod encoder;
pub mod error;
pub mod frontend;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod ticl;
pub mod tokenizer;

pub use error::{Error, Result};
