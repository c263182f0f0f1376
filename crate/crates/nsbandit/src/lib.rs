//! Benchmark harness for non-stationary linear bandits.
//!
//! The crate provides:
//!
//! * [`envs`] — synthetic linear-bandit environments with controlled
//!   non-stationarity (piecewise reward elevation, cosine modulation,
//!   piecewise-constant weight drift) and closed-form drift measures.
//! * [`base_algs`] — stationary base learners (LinUCB, linear Thompson
//!   sampling) behind a common policy interface that also emits a
//!   per-round scalar performance estimate.
//! * [`scheduler`] — the multi-scale block scheduler: random aligned-window
//!   masks, lowest-order selection, and the combined windowed-selection
//!   transform, plus the degenerate sliding-window configuration.
//! * [`master`] — the restart meta-algorithm: doubling blocks, running
//!   minima of the performance estimates, two stationarity tests, and a
//!   full-restart mechanism with replayable randomness.
//! * [`nctf`] — a numerical realization of the scheduler as a stack of
//!   ReLU-attention and MLP layers acting on augmented tokens, together
//!   with a rollout loop that reproduces the direct implementation.
//! * [`bench`] — dynamic-regret evaluation, trajectory distribution-ratio
//!   estimation, calibration reports, slope fits, aggregation, and CSV
//!   output.
//! * [`cli`] — configuration parsing and the `run` / `sweep` / `verify`
//!   subcommands used by the `nsbandit` binary.
//!
//! All randomness is derived from a single master seed through
//! [`rng::SeedDerivation`]; every draw is keyed by its role and round
//! index, so runs are reproducible bit-for-bit and replayable from any
//! round boundary.

pub mod base_algs;
pub mod bench;
pub mod cli;
pub mod envs;
pub mod error;
pub mod master;
pub mod nctf;
pub mod rng;
pub mod scheduler;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
