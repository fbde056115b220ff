//! Anomalous-diffusion trajectory simulation and a convolutional transformer
//! for exponent regression and diffusion-model classification.
//!
//! The crate is organised bottom-up:
//!
//! * [`trajgen`] simulates the five diffusion models (ATTM, CTRW, FBM, LW,
//!   SBM), adds localisation noise and reads/writes dataset files.
//! * [`tensor`] is a small tape-based reverse-mode autodiff engine with the
//!   operations the network needs.
//! * [`model`] defines the ConvTransformer, its parameters and checkpoints.
//! * [`train`] holds the optimiser, early stopping, k-fold validation and the
//!   length-bin curriculum.
//! * [`eval`] computes MAE / micro-F1 / confusion matrices, sliced reports and
//!   SVG plots.
//! * [`cli`] wires everything into the `convtrans` executable.

pub mod cli;
pub mod error;
pub mod eval;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod trajgen;

pub use error::{Error, Result};
