//! Reference samplers (MALA, distributed SGLD) and closed-form Gaussian oracles.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::engine::{diverged, make_pool, ClusterProfile, Parallelism, Recorder, RunConfig, RunReport};
use crate::error::{Error, Result};
use crate::kernels::{build_precision, HyperParams};
use crate::linalg::{is_spd, lambda_max, sqrtm_psd, symmetrize};
use crate::model::{FullPotential, Potential, PotentialSpec};
use crate::optim::theta_star;
use crate::rng::{fill_normal, stream, worker_stream, Stream, MASTER_STREAM};

/// Multivariate normal law.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLaw {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianLaw {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::Dimension(format!(
                "mean of length {} with a {}x{} covariance",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        if !is_spd(&cov) {
            return Err(Error::NotSpd("covariance".into()));
        }
        Ok(GaussianLaw { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let mut inv = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotSpd(what.into()))?
        .inverse();
    symmetrize(&mut inv);
    Ok(inv)
}

/// Conjugate posterior of `θ ~ prior`, `y_k | θ ~ N(θ, cov_like)` for the rows of `observations`.
pub fn exact_gaussian_posterior(prior: &GaussianLaw, cov_like: &DMatrix<f64>, observations: &DMatrix<f64>) -> Result<GaussianLaw> {
    let d = prior.dim();
    if observations.nrows() > 0 && observations.ncols() != d {
        return Err(Error::Dimension(format!("observations have {} columns, prior has {d}", observations.ncols())));
    }
    let n = observations.nrows();
    if n == 0 {
        return Ok(prior.clone());
    }
    let p0 = inverse(&prior.cov, "prior covariance")?;
    let p1 = inverse(cov_like, "likelihood covariance")?;
    let sum_y = observations.row_sum().transpose();
    let prec = &p0 + &p1 * n as f64;
    let cov = inverse(&prec, "posterior precision")?;
    let mean = &cov * (&p0 * &prior.mean + &p1 * sum_y);
    Ok(GaussianLaw { mean, cov })
}

/// θ-marginal of the augmented target for one worker with `A = I`: the
/// covariance is inflated by `ρ I` and the mean is unchanged.
pub fn exact_axda_marginal_gaussian(posterior: &GaussianLaw, rho: f64) -> Result<GaussianLaw> {
    if !(rho >= 0.0) {
        return Err(Error::Invalid(format!("rho = {rho} must be nonnegative")));
    }
    let d = posterior.dim();
    Ok(GaussianLaw {
        mean: posterior.mean.clone(),
        cov: &posterior.cov + DMatrix::identity(d, d) * rho,
    })
}

fn quadratic_parts(spec: &PotentialSpec) -> Result<(&DMatrix<f64>, &DVector<f64>)> {
    match spec.potential.as_ref() {
        Potential::Quadratic(q) => Ok((&q.hess, &q.lin)),
        Potential::Logistic(_) => Err(Error::Invalid("closed-form laws need quadratic potentials".into())),
    }
}

/// [`exact_axda_marginal_gaussian`] applied to a one-worker quadratic model;
/// any other configuration is rejected.
pub fn exact_axda_marginal_of(specs: &[PotentialSpec], rho: f64) -> Result<GaussianLaw> {
    if specs.len() != 1 || !specs[0].is_identity_a() {
        return Err(Error::Invalid("the inflation rule only holds for one worker with A = I".into()));
    }
    let post = axda_marginal_law(specs, &[0.0])?;
    exact_axda_marginal_gaussian(&post, rho)
}

/// θ-marginal of the augmented target for quadratic potentials and any `A_i`, `ρ_i ≥ 0`.
///
/// Integrating `z_i` out leaves `N(A_i θ; z_i*, H_i⁻¹ + ρ_i I)` per worker, where
/// `z_i*` minimizes `U_i`. With `ρ = 0` this is the exact posterior.
pub fn axda_marginal_law(specs: &[PotentialSpec], rho: &[f64]) -> Result<GaussianLaw> {
    if specs.is_empty() || rho.len() != specs.len() {
        return Err(Error::Dimension(format!("{} workers, {} tolerances", specs.len(), rho.len())));
    }
    let d = specs[0].dim_in();
    let mut prec = DMatrix::zeros(d, d);
    let mut rhs = DVector::zeros(d);
    for (i, s) in specs.iter().enumerate() {
        let (h, lin) = quadratic_parts(s)?;
        let hi = inverse(h, &format!("hessian of worker {i}"))?;
        let z_star = &hi * lin;
        let w = inverse(&(hi + DMatrix::identity(s.dim_out, s.dim_out) * rho[i]), "augmented block")?;
        let at_w = s.matrix_a.transpose() * w;
        prec += &at_w * &s.matrix_a;
        rhs += at_w * z_star;
    }
    let cov = inverse(&prec, "marginal precision").map_err(|_| Error::RankDeficient)?;
    Ok(GaussianLaw { mean: &cov * rhs, cov })
}

/// Wasserstein-2 distance between Gaussians (Bures formula).
pub fn gaussian_w2(a: &GaussianLaw, b: &GaussianLaw) -> f64 {
    let sb = sqrtm_psd(&b.cov);
    let cross = sqrtm_psd(&(&sb * &a.cov * &sb));
    let tr = a.cov.trace() + b.cov.trace() - 2.0 * cross.trace();
    ((&a.mean - &b.mean).norm_squared() + tr.max(0.0)).sqrt()
}

/// Stationary covariance of `x' = F x + e`, `Cov(e) = S`, by doubling:
/// `Σ = Σ_k F^k S (F^k)ᵀ`.
pub fn discrete_lyapunov(f: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut sigma = s.clone();
    let mut fk = f.clone();
    for _ in 0..64 {
        let add = &fk * &sigma * fk.transpose();
        sigma += &add;
        fk = &fk * &fk;
        if fk.norm() < 1e-17 {
            symmetrize(&mut sigma);
            return Ok(sigma);
        }
        if !fk.norm().is_finite() {
            break;
        }
    }
    Err(Error::NoConvergence("transition is not a contraction".into()))
}

/// Law of `n` local steps with θ held fixed, for a quadratic worker:
/// `(B, C, c, S)` of an affine Gaussian transition, see [`local_block_law`].
pub type BlockLaw = (DMatrix<f64>, DMatrix<f64>, DVector<f64>, DMatrix<f64>);

/// `z_n = B z_0 + C θ + c + e` with `Cov(e) = S`. Returns `(B, C, c, S)`.
pub fn local_block_law(spec: &PotentialSpec, rho: f64, gamma: f64, n: usize) -> Result<BlockLaw> {
    let (h, lin) = quadratic_parts(spec)?;
    let k = spec.dim_out;
    let one = DMatrix::<f64>::identity(k, k) * (1.0 - gamma / rho) - h * gamma;
    let drive_theta = &spec.matrix_a * (gamma / rho);
    let drive_const = lin * gamma;
    let mut power = DMatrix::identity(k, k);
    let mut sum_pow = DMatrix::zeros(k, k);
    let mut noise = DMatrix::zeros(k, k);
    for _ in 0..n {
        sum_pow += &power;
        noise += &power * power.transpose() * (2.0 * gamma);
        power = &one * power;
    }
    Ok((power, &sum_pow * drive_theta, sum_pow * drive_const, noise))
}

/// Exact stationary law of the DG-LMC chain on quadratic potentials, obtained
/// from the linear recursion on `(θ, z)`. Returns the θ-marginal and the joint law.
pub fn dglmc_stationary_gaussian(specs: &[PotentialSpec], hyper: &HyperParams) -> Result<(GaussianLaw, GaussianLaw)> {
    let d = specs[0].dim_in();
    let widths: Vec<usize> = specs.iter().map(|s| s.dim_out).collect();
    let dz: usize = widths.iter().sum();
    let factor = build_precision(specs, &hyper.rho)?;
    let qinv = factor.covariance();

    let mut bz = DMatrix::zeros(dz, dz);
    let mut ct = DMatrix::zeros(dz, d);
    let mut cz = DVector::zeros(dz);
    let mut sz = DMatrix::zeros(dz, dz);
    let mut w = DMatrix::zeros(d, dz);
    let mut off = 0;
    for (i, s) in specs.iter().enumerate() {
        let k = widths[i];
        let (b, c, c0, noise) = local_block_law(s, hyper.rho[i], hyper.gamma[i], hyper.n_local[i])?;
        bz.view_mut((off, off), (k, k)).copy_from(&b);
        ct.view_mut((off, 0), (k, d)).copy_from(&c);
        cz.rows_mut(off, k).copy_from(&c0);
        sz.view_mut((off, off), (k, k)).copy_from(&noise);
        w.view_mut((0, off), (d, k))
            .copy_from(&(&qinv * s.matrix_a.transpose() / hyper.rho[i]));
        off += k;
    }

    let n = d + dz;
    let mut f = DMatrix::zeros(n, n);
    f.view_mut((0, 0), (d, d)).copy_from(&(&w * &ct));
    f.view_mut((0, d), (d, dz)).copy_from(&(&w * &bz));
    f.view_mut((d, 0), (dz, d)).copy_from(&ct);
    f.view_mut((d, d), (dz, dz)).copy_from(&bz);
    let mut g = DVector::zeros(n);
    g.rows_mut(0, d).copy_from(&(&w * &cz));
    g.rows_mut(d, dz).copy_from(&cz);
    let mut s = DMatrix::zeros(n, n);
    let ws = &w * &sz;
    s.view_mut((0, 0), (d, d)).copy_from(&(&ws * w.transpose() + &qinv));
    s.view_mut((0, d), (d, dz)).copy_from(&ws);
    s.view_mut((d, 0), (dz, d)).copy_from(&ws.transpose());
    s.view_mut((d, d), (dz, dz)).copy_from(&sz);

    let mean = (DMatrix::identity(n, n) - &f)
        .lu()
        .solve(&g)
        .ok_or_else(|| Error::NoConvergence("singular stationary mean system".into()))?;
    let cov = discrete_lyapunov(&f, &s)?;
    let theta = GaussianLaw {
        mean: mean.rows(0, d).into_owned(),
        cov: cov.view((0, 0), (d, d)).into_owned(),
    };
    Ok((theta, GaussianLaw { mean, cov }))
}

/// Log Metropolis-Hastings ratio of a MALA move `x → y` with step `h`,
/// given potentials `u` and gradients `g` at both points.
pub fn mala_log_ratio(
    x: &DVector<f64>,
    ux: f64,
    gx: &DVector<f64>,
    y: &DVector<f64>,
    uy: f64,
    gy: &DVector<f64>,
    h: f64,
) -> f64 {
    let fwd = (y - x + gx * h).norm_squared();
    let bwd = (x - y + gy * h).norm_squared();
    ux - uy + (fwd - bwd) / (4.0 * h)
}

/// Metropolis-adjusted Langevin on the full potential, started at its minimizer.
/// The modelled wall time charges one pass over every shard per iteration.
pub fn run_mala(specs: &[PotentialSpec], step: f64, config: &RunConfig, profile: &ClusterProfile) -> Result<RunReport> {
    config.validate()?;
    if !(step > 0.0) {
        return Err(Error::Invalid(format!("MALA step {step} must be positive")));
    }
    let full = FullPotential::new(specs);
    let mut x = theta_star(specs)?;
    let d = x.len();
    let mut ux = full.value(&x);
    let mut gx = full.grad(&x);
    let mut rng = stream(config.seed, MASTER_STREAM);
    let mut xi = DVector::zeros(d);
    let scale = (2.0 * step).sqrt();
    let mut rec = Recorder::new(d, config.kept(), None);
    let mut accepted = 0usize;
    for t in 0..config.total_iters {
        fill_normal(&mut rng, &mut xi);
        let y = &x - &gx * step + &xi * scale;
        let uy = full.value(&y);
        let u: f64 = rng.random();
        if uy.is_finite() {
            let gy = full.grad(&y);
            if u.ln() < mala_log_ratio(&x, ux, &gx, &y, uy, &gy, step) {
                x = y;
                ux = uy;
                gx = gy;
                accepted += 1;
            }
        }
        if config.keeps(t) {
            rec.push(t, &x, None);
        }
    }
    let wall = config.total_iters as f64 * profile.tau.iter().sum::<f64>();
    let rate = accepted as f64 / config.total_iters as f64;
    Ok(rec.finish(wall, config.total_iters, Some(rate)))
}

/// Finds a MALA step whose pilot acceptance rate is close to `target`:
/// doubling/halving to bracket it, then bisection on the log scale.
/// Returns the step and its pilot acceptance rate.
pub fn tune_mala_step(specs: &[PotentialSpec], target: f64, pilot_iters: usize, seed: u64) -> Result<(f64, f64)> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::Invalid(format!("target acceptance {target} must lie in (0, 1)")));
    }
    let full = FullPotential::new(specs);
    let ts = theta_star(specs)?;
    let profile = ClusterProfile::homogeneous(specs.len());
    let config = RunConfig::new(pilot_iters.max(2), 0, seed);
    let rate = |h: f64| -> Result<f64> { Ok(run_mala(specs, h, &config, &profile)?.acceptance_rate.unwrap_or(0.0)) };

    let mut h = 1.0 / lambda_max(&full.hessian(&ts));
    let mut r = rate(h)?;
    let (mut lo, mut hi) = (h, h);
    let (mut r_lo, mut r_hi) = (r, r);
    let mut guard = 0;
    while r >= target && guard < 60 {
        lo = h;
        r_lo = r;
        h *= 2.0;
        r = rate(h)?;
        hi = h;
        r_hi = r;
        guard += 1;
    }
    while r < target && guard < 120 {
        hi = h;
        r_hi = r;
        h /= 2.0;
        r = rate(h)?;
        lo = h;
        r_lo = r;
        guard += 1;
    }
    for _ in 0..8 {
        let mid = (lo * hi).sqrt();
        let rm = rate(mid)?;
        if rm >= target {
            lo = mid;
            r_lo = rm;
        } else {
            hi = mid;
            r_hi = rm;
        }
    }
    if (r_lo - target).abs() <= (r_hi - target).abs() {
        Ok((lo, r_lo))
    } else {
        Ok((hi, r_hi))
    }
}

/// How the distributed SGLD workers share the parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DsgldScheme {
    /// A single chain visits the workers in turn, each running its local
    /// trajectory with gradients rescaled to the full data set.
    #[default]
    Trajectory,
    /// Every worker runs its own chain from the consensus value on the
    /// `b`-scaled local potential; the master averages them each round.
    Averaging,
}

impl std::str::FromStr for DsgldScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "averaging" => Ok(DsgldScheme::Averaging),
            "trajectory" => Ok(DsgldScheme::Trajectory),
            other => Err(Error::Config(format!("unknown D-SGLD scheme `{other}`"))),
        }
    }
}

impl std::fmt::Display for DsgldScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DsgldScheme::Averaging => "averaging",
            DsgldScheme::Trajectory => "trajectory",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DsgldOptions {
    pub step: f64,
    /// Minibatch size as a fraction of each shard.
    pub batch_frac: f64,
    pub n_local: usize,
    pub scheme: DsgldScheme,
}

struct SgldWorker {
    theta: DVector<f64>,
    grad: DVector<f64>,
    noise: DVector<f64>,
    /// Permutation of the shard's rows; its first `k` entries form the minibatch.
    perm: Vec<usize>,
    rng: Stream,
}

fn batch_size(n: usize, frac: f64) -> usize {
    if n == 0 {
        0
    } else {
        ((frac * n as f64).round() as usize).clamp(1, n)
    }
}

/// Moves a uniform sample of `k` distinct indices to the front of `perm`
/// (partial Fisher-Yates).
fn draw_batch<R: Rng + ?Sized>(perm: &mut [usize], k: usize, rng: &mut R) {
    let n = perm.len();
    for j in 0..k.min(n) {
        let r = rng.random_range(j..n);
        perm.swap(j, r);
    }
}

fn check_dsgld(specs: &[PotentialSpec], opts: &DsgldOptions) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::Invalid("no workers".into()));
    }
    if !(opts.step > 0.0) {
        return Err(Error::Invalid(format!("step {} must be positive", opts.step)));
    }
    if !(opts.batch_frac > 0.0 && opts.batch_frac <= 1.0) {
        return Err(Error::Invalid(format!("batch fraction {} must lie in (0, 1]", opts.batch_frac)));
    }
    if opts.n_local == 0 {
        return Err(Error::Invalid("at least one local step per round is needed".into()));
    }
    for (i, s) in specs.iter().enumerate() {
        if !s.potential.is_decomposable() {
            return Err(Error::Invalid(format!("worker {i} potential does not decompose over observations")));
        }
        if !s.is_identity_a() {
            return Err(Error::Invalid(format!("worker {i} does not act on the global parameter (A != I)")));
        }
    }
    Ok(())
}

/// Distributed stochastic-gradient Langevin dynamics, started at the posterior mode.
pub fn run_dsgld(specs: &[PotentialSpec], opts: &DsgldOptions, config: &RunConfig, profile: &ClusterProfile) -> Result<RunReport> {
    run_dsgld_with(specs, opts, config, profile, Parallelism::from_env())
}

pub fn run_dsgld_with(
    specs: &[PotentialSpec],
    opts: &DsgldOptions,
    config: &RunConfig,
    profile: &ClusterProfile,
    par: Parallelism,
) -> Result<RunReport> {
    config.validate()?;
    check_dsgld(specs, opts)?;
    let start = theta_star(specs)?;
    run_dsgld_from(specs, opts, config, profile, start, par)
}

/// Same as [`run_dsgld_with`] from an explicit starting point.
pub fn run_dsgld_from(
    specs: &[PotentialSpec],
    opts: &DsgldOptions,
    config: &RunConfig,
    profile: &ClusterProfile,
    start: DVector<f64>,
    par: Parallelism,
) -> Result<RunReport> {
    config.validate()?;
    check_dsgld(specs, opts)?;
    let b = specs.len();
    let d = start.len();
    let n_obs: Vec<usize> = specs.iter().map(|s| s.potential.n_obs()).collect();
    let n_total: usize = n_obs.iter().sum();
    let k: Vec<usize> = n_obs.iter().map(|n| batch_size(*n, opts.batch_frac)).collect();
    let mut workers: Vec<SgldWorker> = (0..b)
        .map(|i| SgldWorker {
            theta: start.clone(),
            grad: DVector::zeros(d),
            noise: DVector::zeros(d),
            perm: (0..n_obs[i]).collect(),
            rng: worker_stream(config.seed, i),
        })
        .collect();
    let mut theta = start;
    let mut rec = Recorder::new(d, config.kept(), None);
    let pool = make_pool(par)?;
    let h = opts.step;
    let bf = b as f64;
    let mut wall = 0.0;

    for t in 0..config.total_iters {
        match opts.scheme {
            DsgldScheme::Averaging => {
                let th = &theta;
                let step = |(i, w): (usize, &mut SgldWorker)| {
                    let spec = &specs[i];
                    let scale = (2.0 * h * bf).sqrt();
                    w.theta.copy_from(th);
                    for _ in 0..opts.n_local {
                        if k[i] < n_obs[i] {
                            draw_batch(&mut w.perm, k[i], &mut w.rng);
                            spec.potential.minibatch_grad_into(&w.theta, &w.perm[..k[i]], &mut w.grad);
                        } else {
                            spec.grad_into(&w.theta, &mut w.grad);
                        }
                        fill_normal(&mut w.rng, &mut w.noise);
                        w.theta.axpy(-h * bf, &w.grad, 1.0);
                        w.theta.axpy(scale, &w.noise, 1.0);
                    }
                };
                match &pool {
                    None => workers.iter_mut().enumerate().for_each(step),
                    Some(p) => p.install(|| workers.par_iter_mut().enumerate().for_each(step)),
                }
                theta.fill(0.0);
                for w in &workers {
                    theta += &w.theta;
                }
                theta /= bf;
                let slowest = (0..b)
                    .map(|i| opts.n_local as f64 * profile.tau[i] * k[i] as f64 / n_obs[i].max(1) as f64)
                    .fold(0.0, f64::max);
                wall += 2.0 * profile.comm_cost + slowest;
            }
            DsgldScheme::Trajectory => {
                let i = t % b;
                let w = &mut workers[i];
                let spec = &specs[i];
                let scale = (2.0 * h).sqrt();
                let data_scale = if k[i] == 0 { 0.0 } else { n_total as f64 / k[i] as f64 };
                for _ in 0..opts.n_local {
                    if b == 1 && k[i] == n_obs[i] {
                        spec.grad_into(&theta, &mut w.grad);
                    } else {
                        w.grad.fill(0.0);
                        for s in specs {
                            s.potential.add_prior_grad(&theta, &mut w.grad);
                        }
                        draw_batch(&mut w.perm, k[i], &mut w.rng);
                        spec.potential.add_data_grad(&theta, &w.perm[..k[i]], data_scale, &mut w.grad);
                    }
                    fill_normal(&mut w.rng, &mut w.noise);
                    theta.axpy(-h, &w.grad, 1.0);
                    theta.axpy(scale, &w.noise, 1.0);
                }
                wall += 2.0 * profile.comm_cost
                    + opts.n_local as f64 * profile.tau[i] * k[i] as f64 / n_obs[i].max(1) as f64;
            }
        }
        if diverged(&theta) {
            return Err(Error::Diverged(t));
        }
        if config.keeps(t) {
            rec.push(t, &theta, None);
        }
    }
    Ok(rec.finish(wall, config.total_iters, None))
}

/// Chooses the D-SGLD step so that the trace of the sampled covariance matches
/// `target_trace`, by bisection on `log(step)` inside `bracket`. Each probe is a
/// pilot run with the same seed; divergent probes count as too large.
pub fn calibrate_dsgld_step(
    specs: &[PotentialSpec],
    template: &DsgldOptions,
    pilot: &RunConfig,
    target_trace: f64,
    bracket: (f64, f64),
    probes: usize,
) -> Result<f64> {
    let profile = ClusterProfile::homogeneous(specs.len());
    let (mut lo, mut hi) = bracket;
    if !(lo > 0.0 && hi > lo) {
        return Err(Error::Invalid(format!("bad step bracket ({lo}, {hi})")));
    }
    for _ in 0..probes {
        let mid = (lo * hi).sqrt();
        let opts = DsgldOptions { step: mid, ..*template };
        let too_large = match run_dsgld_with(specs, &opts, pilot, &profile, Parallelism::Serial) {
            Ok(rep) => crate::diagnostics::sample_cov(&rep.theta_samples).trace() > target_trace,
            Err(Error::Diverged(_)) => true,
            Err(e) => return Err(e),
        };
        if too_large {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok((lo * hi).sqrt())
}
