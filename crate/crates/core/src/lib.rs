//! Geometry-free reconstruction of epicardial potentials from body-surface
//! recordings.
//!
//! The crate is organised bottom-up:
//!
//! - [`numeric`]: `f64` tensors, a reverse-mode tape, Adam, checkpoints.
//! - [`forward_sim`]: synthetic transfer operators, paced beats and
//!   SNR-controlled torso observations, plus the dataset file format.
//! - [`inverse`]: Jacobi SVD, Tikhonov and truncated-SVD reference solvers.
//! - [`diffusion`]: noise schedules, forward corruption, the conditional
//!   reverse chain and its training objective.
//! - [`models`]: the transformer noise predictor and three regression
//!   baselines (1-D CNN, LSTM, transformer).
//! - [`harness`]: training loops, metrics, evaluation and the comparison
//!   table driven by the `ecgi` command line tool.

pub mod diffusion;
pub mod error;
pub mod forward_sim;
pub mod harness;
pub mod inverse;
mod io;
pub mod models;
pub mod numeric;
pub mod rng;

pub use error::{Error, Result};
pub use numeric::{AdamState, ParamStore, Tape, Tensor, Var};
