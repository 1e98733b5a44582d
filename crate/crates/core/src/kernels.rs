//! The two conditional samplers of the Gibbs scheme: the per-worker Langevin
//! kernel on `z_i | θ` and the master's exact Gaussian draw of `θ | z_{1:b}`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{check_identifiable, PotentialSpec};
use crate::rng::fill_normal;

/// Per-worker tolerances, step sizes and local iteration counts.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    pub rho: Vec<f64>,
    pub gamma: Vec<f64>,
    pub n_local: Vec<usize>,
    /// Set by the tuning module once the validity checks pass.
    pub validated: bool,
}

/// Largest admissible step for a worker: `ρ / (1 + ρ M)`.
pub fn step_limit(spec: &PotentialSpec, rho: f64) -> f64 {
    rho / (1.0 + rho * spec.m_upper)
}

impl HyperParams {
    /// Builds hyperparameters and enforces `0 < γ_i ≤ ρ_i/(1 + ρ_i M_i)` and `N_i ≥ 1`.
    pub fn new(specs: &[PotentialSpec], rho: Vec<f64>, gamma: Vec<f64>, n_local: Vec<usize>) -> Result<Self> {
        let h = Self::new_unchecked(specs.len(), rho, gamma, n_local)?;
        for (i, s) in specs.iter().enumerate() {
            let limit = step_limit(s, h.rho[i]);
            // tolerate the last-ulp rounding of γ computed as c·limit
            if h.gamma[i] > limit * (1.0 + 1e-12) {
                return Err(Error::StepTooLarge {
                    worker: i,
                    gamma: h.gamma[i],
                    limit,
                });
            }
        }
        Ok(h)
    }

    /// Only checks lengths and positivity; used with an explicit validation override.
    pub fn new_unchecked(b: usize, rho: Vec<f64>, gamma: Vec<f64>, n_local: Vec<usize>) -> Result<Self> {
        if rho.len() != b || gamma.len() != b || n_local.len() != b {
            return Err(Error::Dimension(format!(
                "expected {b} entries, got rho={} gamma={} n_local={}",
                rho.len(),
                gamma.len(),
                n_local.len()
            )));
        }
        if rho.iter().chain(&gamma).any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Invalid("rho and gamma must be finite and positive".into()));
        }
        if n_local.contains(&0) {
            return Err(Error::Invalid("local iteration counts must be at least 1".into()));
        }
        Ok(HyperParams {
            rho,
            gamma,
            n_local,
            validated: false,
        })
    }

    pub fn n_workers(&self) -> usize {
        self.rho.len()
    }
}

/// `Q = Σ A_iᵀA_i/ρ_i` with its Cholesky factor.
#[derive(Debug, Clone)]
pub struct PrecisionFactor {
    pub q: DMatrix<f64>,
    /// Lower-triangular `L` with `L Lᵀ = Q`.
    pub chol: DMatrix<f64>,
    pub log_det: f64,
    factor: Cholesky<f64, Dyn>,
}

impl PrecisionFactor {
    /// Solves `Q x = rhs`.
    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.factor.solve(rhs)
    }

    /// `Q⁻¹` as a dense matrix.
    pub fn covariance(&self) -> DMatrix<f64> {
        self.factor.inverse()
    }
}

pub fn build_precision(specs: &[PotentialSpec], rho: &[f64]) -> Result<PrecisionFactor> {
    check_identifiable(specs)?;
    if rho.len() != specs.len() {
        return Err(Error::Dimension(format!("{} tolerances for {} workers", rho.len(), specs.len())));
    }
    let d = specs[0].dim_in();
    let mut q = DMatrix::zeros(d, d);
    for (s, r) in specs.iter().zip(rho) {
        q += (s.matrix_a.transpose() * &s.matrix_a) / *r;
    }
    crate::linalg::symmetrize(&mut q);
    let factor = q.clone().cholesky().ok_or(Error::RankDeficient)?;
    let chol = factor.l();
    let log_det = 2.0 * chol.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(PrecisionFactor { q, chol, log_det, factor })
}

/// One unadjusted Langevin step on `z_i | θ`:
/// `(1 − γ/ρ) z + (γ/ρ) A θ − γ ∇U(z) + √(2γ) ξ`.
pub fn lmc_local_step(
    z: &DVector<f64>,
    theta: &DVector<f64>,
    spec: &PotentialSpec,
    rho_i: f64,
    gamma_i: f64,
    noise: &DVector<f64>,
) -> DVector<f64> {
    let a_theta = &spec.matrix_a * theta;
    let mut out = z.clone();
    let mut grad = DVector::zeros(z.len());
    lmc_step_in_place(&mut out, &a_theta, spec, rho_i, gamma_i, noise, &mut grad);
    out
}

/// In-place form shared by every caller so all paths round identically.
#[inline]
pub(crate) fn lmc_step_in_place(
    z: &mut DVector<f64>,
    a_theta: &DVector<f64>,
    spec: &PotentialSpec,
    rho: f64,
    gamma: f64,
    noise: &DVector<f64>,
    grad: &mut DVector<f64>,
) {
    spec.grad_into(z, grad);
    let ratio = gamma / rho;
    let keep = 1.0 - ratio;
    let scale = (2.0 * gamma).sqrt();
    for j in 0..z.len() {
        z[j] = keep * z[j] + ratio * a_theta[j] - gamma * grad[j] + scale * noise[j];
    }
}

/// Reusable buffers for a worker's local chain.
#[derive(Debug, Clone)]
pub(crate) struct LocalChain {
    pub z: DVector<f64>,
    a_theta: DVector<f64>,
    grad: DVector<f64>,
    noise: DVector<f64>,
}

impl LocalChain {
    pub fn new(z: DVector<f64>) -> Self {
        let n = z.len();
        LocalChain {
            z,
            a_theta: DVector::zeros(n),
            grad: DVector::zeros(n),
            noise: DVector::zeros(n),
        }
    }

    pub fn advance<R: Rng + ?Sized>(&mut self, theta: &DVector<f64>, spec: &PotentialSpec, rho: f64, gamma: f64, steps: usize, rng: &mut R) {
        self.a_theta.gemv(1.0, &spec.matrix_a, theta, 0.0);
        for _ in 0..steps {
            fill_normal(rng, &mut self.noise);
            lmc_step_in_place(&mut self.z, &self.a_theta, spec, rho, gamma, &self.noise, &mut self.grad);
        }
    }
}

/// Runs `n_steps` Langevin steps from `z0` at fixed `θ`, drawing each noise
/// vector from `rng` in order.
pub fn run_local_chain<R: Rng + ?Sized>(
    z0: &DVector<f64>,
    theta: &DVector<f64>,
    spec: &PotentialSpec,
    rho_i: f64,
    gamma_i: f64,
    n_steps: usize,
    rng: &mut R,
) -> DVector<f64> {
    let mut chain = LocalChain::new(z0.clone());
    chain.advance(theta, spec, rho_i, gamma_i, n_steps, rng);
    chain.z
}

/// Right-hand side `Σ A_iᵀ z_i / ρ_i` of the master's linear system.
pub fn master_rhs(z: &[DVector<f64>], specs: &[PotentialSpec], rho: &[f64]) -> DVector<f64> {
    let mut rhs = DVector::zeros(specs[0].dim_in());
    for ((zi, s), r) in z.iter().zip(specs).zip(rho) {
        rhs.gemv_tr(1.0 / r, &s.matrix_a, zi, 1.0);
    }
    rhs
}

/// Conditional mean `μ(z) = Q⁻¹ Σ A_iᵀ z_i / ρ_i`.
pub fn master_mean(z: &[DVector<f64>], factor: &PrecisionFactor, specs: &[PotentialSpec], rho: &[f64]) -> DVector<f64> {
    factor.solve(&master_rhs(z, specs, rho))
}

/// Exact draw from `N(μ(z), Q⁻¹)` as `μ + L⁻ᵀ ξ`.
pub fn master_draw(
    z: &[DVector<f64>],
    factor: &PrecisionFactor,
    specs: &[PotentialSpec],
    rho: &[f64],
    noise: &DVector<f64>,
) -> DVector<f64> {
    let mu = master_mean(z, factor, specs, rho);
    let shift = factor
        .chol
        .tr_solve_lower_triangular(noise)
        .expect("Cholesky factor has a positive diagonal");
    mu + shift
}

/// Current `(θ, z_{1:b})` of the extended chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub theta: DVector<f64>,
    pub z: Vec<DVector<f64>>,
    pub iteration: usize,
}

impl ChainState {
    pub fn check_dims(&self, specs: &[PotentialSpec]) -> Result<()> {
        if self.z.len() != specs.len() {
            return Err(Error::Dimension(format!("state has {} blocks for {} workers", self.z.len(), specs.len())));
        }
        for (i, (zi, s)) in self.z.iter().zip(specs).enumerate() {
            if zi.len() != s.dim_out || self.theta.len() != s.dim_in() {
                return Err(Error::Dimension(format!("worker {i}: z has length {}, theta {}", zi.len(), self.theta.len())));
            }
        }
        Ok(())
    }
}

/// Start the chain at `z_i = A_i θ*` and draw `θ` from its conditional given those blocks.
pub fn initial_state(
    specs: &[PotentialSpec],
    rho: &[f64],
    factor: &PrecisionFactor,
    theta_star: &DVector<f64>,
    noise: &DVector<f64>,
) -> ChainState {
    let z: Vec<_> = specs.iter().map(|s| &s.matrix_a * theta_star).collect();
    let theta = master_draw(&z, factor, specs, rho, noise);
    ChainState { theta, z, iteration: 0 }
}
