//! Recognition-parametrized Gaussian state-space models.
//!
//! A latent linear-Gaussian chain with stationary marginals N(0, I) is
//! combined with per-time-step Gaussian recognition factors emitted by a
//! network from each observation. There is no decoder: the model is trained
//! by generalized EM on a contrastive auxiliary free energy in which each
//! sequence's recognition factors compete against the batch mixture.
//!
//! Module map:
//! - [`gaussian`] — exponential-family Gaussian arithmetic (log-normalizers,
//!   products, KLs, expected log-densities).
//! - [`autodiff`] — a minimal reverse-mode tape over dense matrices, enough
//!   to differentiate the training objective.
//! - [`prior`] — the stable latent chain: stationarity, Lyapunov solve,
//!   canonicalization, singular-value clipping, sampling.
//! - [`smoother`] — exact Kalman/RTS smoothing against recognition
//!   potentials; chain KL to the prior.
//! - [`recognition`] — linear/MLP recognition networks with configurable
//!   covariance parametrizations.
//! - [`trainer`] — the auxiliary free energy, its contrastive normalizer
//!   terms, and the EM training loop (Adam M-step + stability projection).
//! - [`data`] — synthetic dataset generators (linear chain, pendulum video).
//! - [`eval`] — posterior-mean regression probes and rollout prediction.
//! - [`tensorfile`] — little-endian binary container for dense arrays.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod gaussian;
pub mod prior;
pub mod recognition;
pub mod smoother;
pub mod tensorfile;
pub mod trainer;

pub use error::{Error, Result};
