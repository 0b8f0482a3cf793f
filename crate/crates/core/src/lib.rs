//! D2Former: a fully complex dual-path dual-decoder conformer for monaural
//! speech enhancement, built on a minimal reverse-mode autodiff tape so
//! every complex operation is differentiable and verifiable against
//! independent oracles.
//!
//! Module map:
//! - [`ctensor`]: complex tensors, the tape, finite-difference checking
//! - [`signal`]: STFT/iSTFT, WAV I/O, mixture synthesis
//! - [`layers`]: complex conv / norm / activations / CFSMN
//! - [`attention`]: magnitude-softmax complex self-attention
//! - [`conformer`]: complex conformer blocks, dual-path arrangement
//! - [`model`]: the full network, fusion, checkpoints
//! - [`training`]: losses, AdamW, LR schedule, datasets, SI-SNR
//! - [`verify`]: the gradient-verification suite behind `gradcheck`

pub mod attention;
pub mod config;
pub mod conformer;
pub mod ctensor;
pub mod error;
pub mod layers;
pub mod model;
pub mod signal;
pub mod training;
pub mod verify;

pub use ctensor::{ComplexTensor, Real, Tape};
pub use error::{Error, Result};
