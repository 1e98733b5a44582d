//! Hyperparameter guidelines, validity checks and the explicit constants of
//! the convergence and bias analysis.

use crate::engine::{allocate_local_iters, ClusterProfile};
use crate::error::{Error, Result};
use crate::kernels::{build_precision, step_limit, HyperParams};
use crate::linalg::lambda_max;
use crate::model::{check_identifiable, model_constants, weighted_gram, PotentialSpec};
use crate::optim::heterogeneity_sq;

pub const DEFAULT_C_GAMMA: f64 = 0.25;

fn fmax(it: impl Iterator<Item = f64>) -> f64 {
    it.fold(f64::NEG_INFINITY, f64::max)
}

fn fmin(it: impl Iterator<Item = f64>) -> f64 {
    it.fold(f64::INFINITY, f64::min)
}

/// `⌈(1/b) Σ ρ_i / (γ_i (ρ_i M_i + 1))⌉`, guarded against the last-ulp
/// overshoot that would turn an exact integer into the next one.
pub fn guideline_n_avg(specs: &[PotentialSpec], rho: &[f64], gamma: &[f64]) -> usize {
    let b = specs.len() as f64;
    let x: f64 = specs
        .iter()
        .enumerate()
        .map(|(i, s)| rho[i] / (gamma[i] * (rho[i] * s.m_upper + 1.0)))
        .sum::<f64>()
        / b;
    ((x * (1.0 - 1e-12)).ceil() as usize).max(1)
}

/// `ρ_i = 1/(5 M_i)`, `γ_i = c_γ ρ_i/(ρ_i M_i + 1)` and latency-aware `N_i`.
/// The result is marked validated when [`validity_gate`] accepts it.
pub fn guideline_hyperparams(specs: &[PotentialSpec], c_gamma: f64, profile: &ClusterProfile) -> Result<HyperParams> {
    if !(0.1..=0.5).contains(&c_gamma) {
        return Err(Error::Invalid(format!("c_gamma = {c_gamma} is outside [0.1, 0.5]")));
    }
    if profile.tau.len() != specs.len() {
        return Err(Error::Dimension(format!("{} latencies for {} workers", profile.tau.len(), specs.len())));
    }
    let rho: Vec<f64> = specs.iter().map(|s| 1.0 / (5.0 * s.m_upper)).collect();
    let gamma: Vec<f64> = specs
        .iter()
        .zip(&rho)
        .map(|(s, r)| c_gamma * r / (r * s.m_upper + 1.0))
        .collect();
    let n_avg = guideline_n_avg(specs, &rho, &gamma);
    let n_local = allocate_local_iters(profile, n_avg as f64);
    let mut h = HyperParams::new(specs, rho, gamma, n_local)?;
    h.validated = validity_gate(specs, &h).passed;
    Ok(h)
}

/// `κ_γ = max_i { |1 − γ_i m_i| ∨ |1 − γ_i (M_i + 1/ρ_i)| }`.
pub fn kappa_gamma(specs: &[PotentialSpec], hyper: &HyperParams) -> f64 {
    fmax(specs.iter().enumerate().map(|(i, s)| {
        let g = hyper.gamma[i];
        let a = (1.0 - g * s.m_lower).abs();
        let b = (1.0 - g * (s.m_upper + 1.0 / hyper.rho[i])).abs();
        a.max(b)
    }))
}

/// Sufficient contraction condition for general local iteration counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContractionCheck {
    pub c: f64,
    pub a0: f64,
    pub a1: f64,
    /// `r_{γ,ρ,N}`.
    pub r_term: f64,
    /// `min_i N_iγ_i m_i`.
    pub min_ngm: f64,
    /// `min{N_iγ_i}/max{N_iγ_i} ≥ c`.
    pub ratio_ok: bool,
    /// `max{N_iγ_i}` below both step caps.
    pub step_ok: bool,
    /// `1 − min{N_iγ_i m_i} + r < 1 − min{N_iγ_i m_i}/2`.
    pub contraction_ok: bool,
}

/// Ratio `min{N_iγ_i}/max{N_iγ_i}`, the self-consistent choice of `c`.
pub fn step_ratio(hyper: &HyperParams) -> f64 {
    let ng = |i: usize| hyper.n_local[i] as f64 * hyper.gamma[i];
    let n = hyper.n_workers();
    fmin((0..n).map(ng)) / fmax((0..n).map(ng))
}

pub fn check_contraction(specs: &[PotentialSpec], hyper: &HyperParams, c: f64) -> ContractionCheck {
    let b = specs.len();
    let ng: Vec<f64> = (0..b).map(|i| hyper.n_local[i] as f64 * hyper.gamma[i]).collect();
    let mt: Vec<f64> = (0..b).map(|i| specs[i].m_upper + 1.0 / hyper.rho[i]).collect();
    let max_mt = fmax(mt.iter().copied());
    let max_inv_rho = fmax(hyper.rho.iter().map(|r| 1.0 / r));
    let a0 = max_mt * max_inv_rho / 2.0 + 4.0 * max_mt * max_mt;
    let a1 = max_mt * max_mt * max_inv_rho;

    let max_ng_rho = fmax((0..b).map(|i| ng[i] / hyper.rho[i]));
    let max_ngm = fmax((0..b).map(|i| ng[i] * mt[i]));
    let r_term = max_ng_rho * max_ngm * (0.5 + max_ngm) + 4.0 * max_ngm * max_ngm;

    let min_m = fmin(specs.iter().map(|s| s.m_lower));
    let max_ng = fmax(ng.iter().copied());
    let ratio_ok = fmin(ng.iter().copied()) / max_ng >= c;
    let cap1 = c * min_m / (2.0 * a0 + (2.0 * a1 * c * min_m).sqrt());
    let cap2 = 2.0 / fmax(specs.iter().zip(&hyper.rho).map(|(s, r)| s.m_lower + s.m_upper + 1.0 / r));
    let step_ok = max_ng <= cap1.min(cap2);

    let min_ngm = fmin((0..b).map(|i| ng[i] * specs[i].m_lower));
    ContractionCheck {
        c,
        a0,
        a1,
        r_term,
        min_ngm,
        ratio_ok,
        step_ok,
        contraction_ok: 1.0 - min_ngm + r_term < 1.0 - min_ngm / 2.0,
    }
}

/// Outcome of the gate that sets `HyperParams::validated`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidityGate {
    pub step_constraint_ok: bool,
    pub kappa_gamma: f64,
    pub passed: bool,
}

/// Accepts hyperparameters that satisfy every worker's step constraint
/// `γ_i ≤ ρ_i/(1 + ρ_i M_i)` and have `κ_γ < 1`.
///
/// The sufficient condition of [`check_contraction`] is reported separately; it
/// is far more conservative and rejects the guideline settings themselves.
pub fn validity_gate(specs: &[PotentialSpec], hyper: &HyperParams) -> ValidityGate {
    let step_constraint_ok = specs
        .iter()
        .enumerate()
        .all(|(i, s)| hyper.gamma[i] <= step_limit(s, hyper.rho[i]) * (1.0 + 1e-12));
    let k = kappa_gamma(specs, hyper);
    ValidityGate {
        step_constraint_ok,
        kappa_gamma: k,
        passed: step_constraint_ok && k < 1.0,
    }
}

/// `‖K‖²` for the map `z ↦ μ(z) = Q⁻¹ Σ A_iᵀ z_i/ρ_i` taken from the `1/ρ`-scaled blocks,
/// i.e. `λ_max(Q⁻¹ (Σ A_iᵀA_i/ρ_i²) Q⁻¹)`.
pub fn mean_map_norm_sq(specs: &[PotentialSpec], rho: &[f64]) -> Result<f64> {
    let f = build_precision(specs, rho)?;
    let qi = f.covariance();
    let inner = weighted_gram(specs, |i, _| 1.0 / (rho[i] * rho[i]));
    Ok(lambda_max(&(&qi * inner * &qi)))
}

/// Bias bound between the augmented marginal and the posterior.
#[derive(Debug, Clone, PartialEq)]
pub enum BiasBound {
    Applicable {
        bound: f64,
        a1: f64,
        a3: f64,
        flags: BiasFlags,
    },
    NotApplicable {
        reason: String,
        flags: BiasFlags,
    },
}

/// Preconditions evaluated for the bias bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasFlags {
    pub rho_bar: f64,
    pub l_beta: f64,
    pub m_u: f64,
    pub sigma_u_sq: f64,
    /// `12 L_β² ≤ m_U`, the condition the bound actually needs.
    pub lbeta_ok: bool,
    /// `ρ̄ ≤ 1/(12 σ_U²)`, which implies the previous one.
    pub rho_ok: bool,
    /// `ρ̄ ≤ σ_U²/12`, the condition as literally stated for the proposition.
    pub rho_literal_ok: bool,
}

impl BiasBound {
    pub fn value(&self) -> Option<f64> {
        match self {
            BiasBound::Applicable { bound, .. } => Some(*bound),
            BiasBound::NotApplicable { .. } => None,
        }
    }

    pub fn flags(&self) -> &BiasFlags {
        match self {
            BiasBound::Applicable { flags, .. } | BiasBound::NotApplicable { flags, .. } => flags,
        }
    }
}

/// `W₂(π_ρ, π) ≤ √(2/m_U) · max(A_1, √A_3)`.
pub fn axda_bias_bound(specs: &[PotentialSpec], rho: &[f64]) -> Result<BiasBound> {
    let het = heterogeneity_sq(specs)?;
    axda_bias_bound_with(specs, rho, &het)
}

/// Same as [`axda_bias_bound`] with the per-block `‖A_i(θ* − θ_i*)‖²` supplied.
pub fn axda_bias_bound_with(specs: &[PotentialSpec], rho: &[f64], het_sq: &[f64]) -> Result<BiasBound> {
    let mc = model_constants(specs, rho)?;
    let rho_bar = fmax(rho.iter().copied());
    let flags = BiasFlags {
        rho_bar,
        l_beta: mc.l_beta,
        m_u: mc.m_u,
        sigma_u_sq: mc.sigma_u_sq,
        lbeta_ok: 12.0 * mc.l_beta * mc.l_beta <= mc.m_u,
        rho_ok: rho_bar <= 1.0 / (12.0 * mc.sigma_u_sq),
        rho_literal_ok: rho_bar <= mc.sigma_u_sq / 12.0,
    };
    if !flags.lbeta_ok {
        return Ok(BiasBound::NotApplicable {
            reason: format!("12 L_beta^2 = {:e} exceeds m_U = {:e}", 12.0 * mc.l_beta * mc.l_beta, mc.m_u),
            flags,
        });
    }
    let d = specs[0].dim_in() as f64;
    let mu = mc.m_u;
    let l2 = mc.l_beta * mc.l_beta;
    let g: f64 = specs
        .iter()
        .enumerate()
        .map(|(i, s)| rho[i] * s.m_upper * s.m_upper * het_sq[i])
        .sum();
    let log_sum: f64 = specs
        .iter()
        .enumerate()
        .map(|(i, s)| s.dim_out as f64 * (rho[i] * s.m_upper).ln_1p())
        .sum();
    let a1 = (d * l2 / mu + g) * (1.0 + 2.0 * l2 / mu) + 2.0 * l2 * l2 / (mu * mu) + 0.5 * log_sum;

    let cubic = lambda_max(&weighted_gram(specs, |i, s| rho[i] * rho[i] * s.m_upper.powi(3)));
    let cubic_het: f64 = specs
        .iter()
        .enumerate()
        .map(|(i, s)| rho[i] * rho[i] * s.m_upper.powi(3) * het_sq[i])
        .sum();
    let expo = log_sum
        + 2.0 * d * cubic / mu
        + 2.0 * cubic_het
        + 8.0 * l2 * l2 / (mu * mu)
        + 8.0 * (d * l2 / mu + g) * l2 / mu;
    // exp(expo) − 2 exp(log_sum/2) + 1, arranged to avoid cancellation for small ρ
    let a3 = (expo.exp_m1() - 2.0 * (0.5 * log_sum).exp_m1()).max(0.0);
    let bound = (2.0 / mu).sqrt() * a1.max(a3.sqrt());
    Ok(BiasBound::Applicable { bound, a1, a3, flags })
}

/// Budgets needed to reach accuracy ε with homogeneous workers.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingBudget {
    pub eps: f64,
    pub r0: f64,
    pub r1: f64,
    pub r2: f64,
    pub rho_eps: f64,
    pub c_rho: f64,
    pub gamma_eps_h2: f64,
    /// Available when every worker has a Hessian-Lipschitz constant.
    pub gamma_eps_h3: Option<f64>,
    pub gamma_eps: f64,
    pub n_local_eps: usize,
    pub kappa_gamma: f64,
    pub e0: f64,
    pub n_eps: u64,
    pub gradient_evals: f64,
    /// Sufficient contraction condition evaluated at the budgeted parameters.
    pub contraction_ok: bool,
}

struct Homogeneous {
    b: usize,
    d: f64,
    sum_di: f64,
    max_di: f64,
    m: f64,
    big_m: f64,
    l: Option<f64>,
    m_u: f64,
    sigma_sq: f64,
    het_sq: Vec<f64>,
}

fn homogeneous(specs: &[PotentialSpec]) -> Result<Homogeneous> {
    check_identifiable(specs)?;
    let s0 = &specs[0];
    let same = |a: f64, b: f64| (a - b).abs() <= 1e-10 * a.abs().max(b.abs());
    for s in specs {
        if !same(s.m_lower, s0.m_lower) || !same(s.m_upper, s0.m_upper) {
            return Err(Error::Invalid("mixing budget needs identical m_i and M_i across workers".into()));
        }
    }
    let l = match specs.iter().map(|s| s.l_hess).collect::<Option<Vec<_>>>() {
        Some(v) if v.iter().all(|x| same(*x, v[0]) || (*x == 0.0 && v[0] == 0.0)) => Some(v[0]),
        _ => None,
    };
    let mc = model_constants(specs, &vec![0.0; specs.len()])?;
    Ok(Homogeneous {
        b: specs.len(),
        d: s0.dim_in() as f64,
        sum_di: specs.iter().map(|s| s.dim_out as f64).sum(),
        max_di: fmax(specs.iter().map(|s| s.dim_out as f64)),
        m: s0.m_lower,
        big_m: s0.m_upper,
        l,
        m_u: mc.m_u,
        sigma_sq: mc.sigma_u_sq,
        het_sq: heterogeneity_sq(specs)?,
    })
}

/// Stable root `(−B + √(B² + 4AC))/(2A)` of `A x² + B x = C` for `A, B, C ≥ 0`.
fn pos_root(a: f64, b: f64, c: f64) -> f64 {
    if c.is_infinite() {
        return f64::INFINITY;
    }
    2.0 * c / (b + (b * b + 4.0 * a * c).sqrt())
}

/// Squared initial-distance constant `E_0²` for homogeneous `(ρ, γ, N)`.
#[allow(clippy::too_many_arguments)]
fn e0_sq(h: &Homogeneous, k_norm_sq: f64, rho: f64, gamma: f64, n: f64, kappa: f64) -> f64 {
    let u_sq: f64 = h.het_sq.iter().sum();
    let tr_p0 = h.d;
    let k2 = kappa * kappa;
    let inner = 2.0 / (n * (1.0 - k2))
        * ((1.0 + k2) / (1.0 - k2) * gamma * h.big_m * h.big_m * u_sq + (gamma / rho) * tr_p0 + 2.0 * h.sum_di)
        + 2.0 * h.b as f64 * gamma * n * (1.0 + tr_p0 / rho)
        + 4.0 * h.sum_di;
    9.0 * (1.0 + k_norm_sq) * 2.0 * n * gamma * inner
}

fn n_iters(e0: f64, eps: f64, n: f64, gamma: f64, m: f64) -> u64 {
    let log = (e0 / eps).ln();
    if !(log > 0.0) {
        return 1;
    }
    ((2.0 * log / (n * gamma * m)).ceil() as u64).max(1)
}

/// Tolerance, step size, local iterations and global iterations that
/// guarantee accuracy `eps` in W₂, for workers with identical constants.
/// `eps = ∞` is accepted and yields the smallest budget.
pub fn mixing_budget(specs: &[PotentialSpec], eps: f64) -> Result<MixingBudget> {
    if !(eps > 0.0) {
        return Err(Error::Invalid(format!("eps = {eps} must be positive")));
    }
    let h = homogeneous(specs)?;
    let (m, big_m, sig2, mu) = (h.m, h.big_m, h.sigma_sq, h.m_u);
    let s_m2u: f64 = h.het_sq.iter().map(|u| big_m * big_m * u).sum();
    let s_m3u: f64 = h.het_sq.iter().map(|u| big_m.powi(3) * u).sum();
    let sum_dm = h.sum_di * big_m;

    let r0 = 2.0 * sig2 * (h.d * sig2 + s_m2u) + 2.0 * sig2 * sig2;
    let r1 = h.d * sig2 + s_m2u + sum_dm / 2.0;
    let r2 = 2.0 * h.d * big_m * sig2 + 2.0 * s_m3u + 8.0 * sig2 * sig2 + 8.0 * sig2 * (2.0 * h.d * sig2 + 2.0 * s_m2u);
    let target = eps * mu.sqrt() / (3.0 * 2f64.sqrt());
    let rho_eps = pos_root(r0, r1, target)
        .min(target / (r2 + (r2 / (12.0 * sig2) + sum_dm).powi(2)).sqrt())
        .min(1.0 / (12.0 * sig2))
        .min(pos_root(r2, sum_dm, 1.5));

    let rho_v = vec![rho_eps; h.b];
    let k_norm_sq = mean_map_norm_sq(specs, &rho_v)?;
    let mt = big_m + 1.0 / rho_eps;
    let mtl = m + 1.0 / rho_eps;
    let c_rho = 4.0 * mt * mt * (1.0 + k_norm_sq) / (5.0 * m);
    let c0 = (mt * mt / 2.0) * (mt / mtl + 1.0 / 6.0) * h.sum_di;
    let c1 = h.sum_di;
    let c2 = eps * eps / (9.0 * c_rho);
    let cap = m / (40.0 * mt * mt);
    let gamma_h2 = pos_root(c0, c1, c2).min(cap);
    let bf = h.b as f64;
    let gamma_h3 = h.l.map(|l| {
        let t1 = eps / (6.0 * bf * (5.0 * h.max_di * c_rho * mt * mt * (4.0 + h.max_di * l * l * m / (20.0 * mt.powi(4)))).sqrt());
        let t3 = eps / (6.0 * bf * (5.0 * c_rho * h.max_di * m.powi(3) / (mt * mt)));
        t1.min(cap).min(t3)
    });
    let gamma_eps = gamma_h3.map_or(gamma_h2, |g| g.max(gamma_h2));
    let n_local_eps = ((m / (20.0 * gamma_eps * mt * mt)).floor() as usize).max(1);
    let nf = n_local_eps as f64;

    let kappa = (1.0 - gamma_eps * m).abs().max((1.0 - gamma_eps * mt).abs());
    let e0 = e0_sq(&h, k_norm_sq, rho_eps, gamma_eps, nf, kappa).sqrt();
    let n_eps = n_iters(e0, eps, nf, gamma_eps, m);

    let hyper = HyperParams::new_unchecked(h.b, rho_v, vec![gamma_eps; h.b], vec![n_local_eps; h.b])?;
    let contraction_ok = check_contraction(specs, &hyper, 1.0).contraction_ok;
    Ok(MixingBudget {
        eps,
        r0,
        r1,
        r2,
        rho_eps,
        c_rho,
        gamma_eps_h2: gamma_h2,
        gamma_eps_h3: gamma_h3,
        gamma_eps,
        n_local_eps,
        kappa_gamma: kappa,
        e0,
        n_eps,
        gradient_evals: n_eps as f64 * nf * bf,
        contraction_ok,
    })
}

/// Global iterations needed from the standard start for homogeneous `hyper`,
/// `⌈2 log(E_0/ε)/(Nγm)⌉` (at least 1), together with `E_0`.
pub fn iterations_for(specs: &[PotentialSpec], hyper: &HyperParams, eps: f64) -> Result<(u64, f64)> {
    if !(eps > 0.0) {
        return Err(Error::Invalid(format!("eps = {eps} must be positive")));
    }
    let h = homogeneous(specs)?;
    let uniform = |v: &[f64]| v.iter().all(|x| *x == v[0]);
    let nl: Vec<f64> = hyper.n_local.iter().map(|n| *n as f64).collect();
    if !uniform(&hyper.rho) || !uniform(&hyper.gamma) || !uniform(&nl) {
        return Err(Error::Invalid("iteration budget needs identical hyperparameters across workers".into()));
    }
    let (rho, gamma, n) = (hyper.rho[0], hyper.gamma[0], nl[0]);
    let k_norm_sq = mean_map_norm_sq(specs, &hyper.rho)?;
    let kappa = kappa_gamma(specs, hyper);
    let e0 = e0_sq(&h, k_norm_sq, rho, gamma, n, kappa).sqrt();
    Ok((n_iters(e0, eps, n, gamma, h.m), e0))
}

/// Everything the `bounds` report shows for one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub kappa_gamma: f64,
    pub contraction: ContractionCheck,
    pub bias: BiasBound,
    pub budget: Option<MixingBudget>,
}

pub fn bound_report(specs: &[PotentialSpec], hyper: &HyperParams, eps: Option<f64>) -> Result<BoundReport> {
    Ok(BoundReport {
        kappa_gamma: kappa_gamma(specs, hyper),
        contraction: check_contraction(specs, hyper, step_ratio(hyper)),
        bias: axda_bias_bound(specs, &hyper.rho)?,
        budget: eps.map(|e| mixing_budget(specs, e)).transpose()?,
    })
}
