//! Distributed Gibbs sampling with local Langevin steps.
//!
//! The posterior `π(θ) ∝ Π_i exp(−U_i(A_i θ))` is split across `b` workers.
//! Each worker keeps an auxiliary block `z_i` tied to `A_i θ` by a Gaussian
//! coupling of tolerance `ρ_i`, updates it with a few unadjusted Langevin steps,
//! and the master redraws `θ` exactly from its Gaussian conditional.

// Argument checks are written `!(x > 0.0)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod cli;
pub mod diagnostics;
pub mod engine;
pub mod error;
pub mod io;
pub mod kernels;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tuning;

pub use error::{Error, Result};
