//! Worker potentials, data sharding and the global constants derived from them.
//!
//! The target posterior factorizes as `exp(-Σ_i U_i(A_i θ))`. Each worker owns one
//! potential `U_i` over `z_i = A_i θ` together with its curvature bounds.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{eig_extremes, is_spd, lambda_max, lambda_min, spd_inverse};

/// One block of observations. For the Gaussian toy model `rows` holds the
/// observations themselves and `labels` is empty; for logistic regression
/// `rows` holds covariates and `labels` the 0/1 responses.
#[derive(Debug, Clone)]
pub struct Shard {
    pub rows: DMatrix<f64>,
    pub labels: Vec<f64>,
}

impl Shard {
    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }
}

/// Observations partitioned across workers. Workers beyond the number of data
/// blocks hold empty shards.
#[derive(Debug, Clone)]
pub struct ShardedDataset {
    pub shards: Vec<Shard>,
    pub n_total: usize,
    /// Covariate dimension; 0 for the Gaussian toy model.
    pub feature_dim: usize,
}

/// Contiguous split sizes differing by at most one, larger blocks first.
pub fn split_sizes(n: usize, b: usize) -> Vec<usize> {
    (0..b).map(|i| n / b + usize::from(i < n % b)).collect()
}

fn take_rows(m: &DMatrix<f64>, start: usize, len: usize) -> DMatrix<f64> {
    m.rows(start, len).into_owned()
}

impl ShardedDataset {
    /// Split unlabeled observations (one per row) evenly over `b` workers.
    pub fn from_observations(obs: &DMatrix<f64>, b: usize) -> Result<Self> {
        if b == 0 {
            return Err(Error::Invalid("worker count must be at least 1".into()));
        }
        let mut start = 0;
        let shards = split_sizes(obs.nrows(), b)
            .into_iter()
            .map(|len| {
                let s = Shard {
                    rows: take_rows(obs, start, len),
                    labels: Vec::new(),
                };
                start += len;
                s
            })
            .collect();
        Ok(ShardedDataset {
            shards,
            n_total: obs.nrows(),
            feature_dim: 0,
        })
    }

    /// Split labeled rows evenly over `b` workers.
    pub fn from_labeled(features: &DMatrix<f64>, labels: &[f64], b: usize) -> Result<Self> {
        if b == 0 {
            return Err(Error::Invalid("worker count must be at least 1".into()));
        }
        if features.nrows() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        let mut start = 0;
        let shards = split_sizes(features.nrows(), b)
            .into_iter()
            .map(|len| {
                let s = Shard {
                    rows: take_rows(features, start, len),
                    labels: labels[start..start + len].to_vec(),
                };
                start += len;
                s
            })
            .collect();
        Ok(ShardedDataset {
            shards,
            n_total: features.nrows(),
            feature_dim: features.ncols(),
        })
    }

    /// Assemble from explicit shards, checking that they agree on width.
    pub fn from_shards(shards: Vec<Shard>, feature_dim: usize) -> Result<Self> {
        let width = shards.iter().find(|s| !s.is_empty()).map(|s| s.rows.ncols());
        for (i, s) in shards.iter().enumerate() {
            if let Some(w) = width {
                if !s.is_empty() && s.rows.ncols() != w {
                    return Err(Error::Dimension(format!("shard {i} has {} columns, expected {w}", s.rows.ncols())));
                }
            }
            if feature_dim > 0 && s.labels.len() != s.len() {
                return Err(Error::Dimension(format!("shard {i} has {} rows but {} labels", s.len(), s.labels.len())));
            }
        }
        let n_total = shards.iter().map(Shard::len).sum();
        Ok(ShardedDataset {
            shards,
            n_total,
            feature_dim,
        })
    }

    pub fn n_workers(&self) -> usize {
        self.shards.len()
    }

    /// All rows stacked back together in shard order.
    pub fn stacked_rows(&self) -> DMatrix<f64> {
        let cols = self
            .shards
            .iter()
            .find(|s| !s.is_empty())
            .map(|s| s.rows.ncols())
            .unwrap_or(0);
        let mut out = DMatrix::zeros(self.n_total, cols);
        let mut r = 0;
        for s in &self.shards {
            if !s.is_empty() {
                out.rows_mut(r, s.len()).copy_from(&s.rows);
                r += s.len();
            }
        }
        out
    }

    pub fn stacked_labels(&self) -> Vec<f64> {
        self.shards.iter().flat_map(|s| s.labels.iter().copied()).collect()
    }
}

/// Quadratic potential `½ zᵀHz − linᵀz + offset`, stored together with its
/// per-observation decomposition when it comes from the Gaussian toy model.
#[derive(Debug, Clone)]
pub struct QuadraticPotential {
    pub hess: DMatrix<f64>,
    pub lin: DVector<f64>,
    pub offset: f64,
    /// Per-observation precision and observations, if decomposable.
    pub obs: Option<(DMatrix<f64>, Arc<Shard>)>,
    /// Prior (mean, precision) folded into this worker, if any.
    pub prior: Option<(DVector<f64>, DMatrix<f64>)>,
}

/// Logistic log-likelihood of a shard plus a ridge share of the Gaussian prior.
#[derive(Debug, Clone)]
pub struct LogisticPotential {
    pub shard: Arc<Shard>,
    pub ridge: f64,
}

#[derive(Debug, Clone)]
pub enum Potential {
    Quadratic(QuadraticPotential),
    Logistic(LogisticPotential),
}

// Both helpers go through exp(−|t|) so the sign test compiles to a select
// instead of a branch; the sign of the linear predictor is close to random.
fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

pub fn sigmoid(t: f64) -> f64 {
    let e = (-t.abs()).exp();
    let s = 1.0 / (1.0 + e);
    if t >= 0.0 {
        s
    } else {
        e * s
    }
}

// Column-at-a-time loops over the column-major shard; on these tall, narrow
// matrices they run noticeably faster than nalgebra's generic gemv.
fn linear_predictor(x: &DMatrix<f64>, z: &DVector<f64>) -> Vec<f64> {
    let n = x.nrows();
    let mut eta = vec![0.0; n];
    if n == 0 {
        return eta;
    }
    for (col, zj) in x.as_slice().chunks_exact(n).zip(z.iter()) {
        for (e, c) in eta.iter_mut().zip(col) {
            *e += c * zj;
        }
    }
    eta
}

fn transpose_times(x: &DMatrix<f64>, r: &[f64], out: &mut DVector<f64>) {
    let n = x.nrows();
    if n == 0 {
        out.fill(0.0);
        return;
    }
    for (col, o) in x.as_slice().chunks_exact(n).zip(out.iter_mut()) {
        *o = col.iter().zip(r).map(|(a, b)| a * b).sum();
    }
}

impl Potential {
    pub fn value(&self, z: &DVector<f64>) -> f64 {
        match self {
            Potential::Quadratic(q) => 0.5 * z.dot(&(&q.hess * z)) - q.lin.dot(z) + q.offset,
            Potential::Logistic(l) => {
                let eta = linear_predictor(&l.shard.rows, z);
                let mut v = 0.5 * l.ridge * z.norm_squared();
                for (e, y) in eta.iter().zip(&l.shard.labels) {
                    v += softplus(*e) - y * e;
                }
                v
            }
        }
    }

    pub fn grad_into(&self, z: &DVector<f64>, out: &mut DVector<f64>) {
        match self {
            Potential::Quadratic(q) => {
                out.gemv(1.0, &q.hess, z, 0.0);
                *out -= &q.lin;
            }
            Potential::Logistic(l) => {
                let mut r = linear_predictor(&l.shard.rows, z);
                for (e, y) in r.iter_mut().zip(&l.shard.labels) {
                    *e = sigmoid(*e) - y;
                }
                transpose_times(&l.shard.rows, &r, out);
                out.axpy(l.ridge, z, 1.0);
            }
        }
    }

    pub fn hessian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        match self {
            Potential::Quadratic(q) => q.hess.clone(),
            Potential::Logistic(l) => {
                let x = &l.shard.rows;
                let eta = x * z;
                let w = eta.map(|e| {
                    let s = sigmoid(e);
                    s * (1.0 - s)
                });
                let mut xw = x.clone();
                for (mut row, wi) in xw.row_iter_mut().zip(w.iter()) {
                    row *= *wi;
                }
                let mut h = x.transpose() * xw;
                for i in 0..h.nrows() {
                    h[(i, i)] += l.ridge;
                }
                h
            }
        }
    }

    /// Number of observations the potential decomposes over (0 if it does not).
    pub fn n_obs(&self) -> usize {
        match self {
            Potential::Quadratic(q) => q.obs.as_ref().map_or(0, |(_, s)| s.len()),
            Potential::Logistic(l) => l.shard.len(),
        }
    }

    pub fn is_decomposable(&self) -> bool {
        match self {
            Potential::Quadratic(q) => q.obs.is_some(),
            Potential::Logistic(_) => true,
        }
    }

    /// Unbiased estimate of the gradient from the observations in `batch`:
    /// data part rescaled by `n_obs / |batch|`, plus the exact prior/ridge part.
    pub fn minibatch_grad_into(&self, z: &DVector<f64>, batch: &[usize], out: &mut DVector<f64>) {
        let scale = if batch.is_empty() { 0.0 } else { self.n_obs() as f64 / batch.len() as f64 };
        out.fill(0.0);
        self.add_data_grad(z, batch, scale, out);
        self.add_prior_grad(z, out);
    }

    /// Adds `scale · Σ_{j ∈ batch} ∇ℓ_j(z)`, the likelihood terms of the listed observations.
    pub fn add_data_grad(&self, z: &DVector<f64>, batch: &[usize], scale: f64, out: &mut DVector<f64>) {
        match self {
            Potential::Quadratic(q) => {
                if let Some((prec, shard)) = &q.obs {
                    // Σ_j (z − y_j) = |batch| z − Σ_j y_j
                    let mut acc = z * batch.len() as f64;
                    for &j in batch {
                        for (c, a) in acc.iter_mut().enumerate() {
                            *a -= shard.rows[(j, c)];
                        }
                    }
                    out.gemv(scale, prec, &acc, 1.0);
                }
            }
            Potential::Logistic(l) => {
                for &j in batch {
                    let row = l.shard.rows.row(j);
                    let e = row.dot(&z.transpose());
                    let r = sigmoid(e) - l.shard.labels[j];
                    out.axpy(scale * r, &row.transpose(), 1.0);
                }
            }
        }
    }

    /// Adds the gradient of the non-likelihood part (prior share or ridge).
    pub fn add_prior_grad(&self, z: &DVector<f64>, out: &mut DVector<f64>) {
        match self {
            Potential::Quadratic(q) => {
                if let Some((mean, prec)) = &q.prior {
                    out.gemv(1.0, prec, &(z - mean), 1.0);
                }
            }
            Potential::Logistic(l) => out.axpy(l.ridge, z, 1.0),
        }
    }
}

/// One worker's potential `U_i` over `z_i = A_i θ` and its curvature constants.
#[derive(Debug, Clone)]
pub struct PotentialSpec {
    pub dim_out: usize,
    pub matrix_a: DMatrix<f64>,
    /// Strong-convexity constant m_i.
    pub m_lower: f64,
    /// Gradient-Lipschitz constant M_i.
    pub m_upper: f64,
    /// Hessian-Lipschitz constant L_i, when known.
    pub l_hess: Option<f64>,
    pub potential: Arc<Potential>,
}

impl PotentialSpec {
    /// Quadratic potential `½ zᵀHz − linᵀz` with `A = a`; constants from the spectrum of `H`.
    pub fn quadratic(hess: DMatrix<f64>, lin: DVector<f64>, a: DMatrix<f64>) -> Result<Self> {
        if !is_spd(&hess) {
            return Err(Error::NotSpd("hessian".into()));
        }
        if lin.len() != hess.nrows() || a.nrows() != hess.nrows() {
            return Err(Error::Dimension("quadratic potential blocks disagree".into()));
        }
        let (m, mm) = eig_extremes(&hess);
        Ok(PotentialSpec {
            dim_out: hess.nrows(),
            matrix_a: a,
            m_lower: m,
            m_upper: mm,
            l_hess: Some(0.0),
            potential: Arc::new(Potential::Quadratic(QuadraticPotential {
                hess,
                lin,
                offset: 0.0,
                obs: None,
                prior: None,
            })),
        })
    }

    /// Dimension of θ.
    pub fn dim_in(&self) -> usize {
        self.matrix_a.ncols()
    }

    pub fn value(&self, z: &DVector<f64>) -> f64 {
        self.potential.value(z)
    }

    pub fn grad(&self, z: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(self.dim_out);
        self.potential.grad_into(z, &mut g);
        g
    }

    pub fn grad_into(&self, z: &DVector<f64>, out: &mut DVector<f64>) {
        self.potential.grad_into(z, out)
    }

    pub fn hessian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        self.potential.hessian(z)
    }

    pub fn is_identity_a(&self) -> bool {
        self.matrix_a.is_square() && self.matrix_a == DMatrix::identity(self.dim_out, self.dim_out)
    }
}

/// Conjugate Gaussian model: likelihood `N(y | θ, Σ1)` per observation with the
/// prior `N(μ0, Σ0)` folded into worker 0. Every worker uses `A_i = I`.
pub fn gaussian_model(
    mean_prior: &DVector<f64>,
    cov_prior: &DMatrix<f64>,
    cov_like: &DMatrix<f64>,
    observations: &ShardedDataset,
) -> Result<Vec<PotentialSpec>> {
    let d = mean_prior.len();
    if cov_prior.nrows() != d || cov_like.nrows() != d {
        return Err(Error::Dimension(format!("prior mean has length {d} but covariances are {}x{} and {}x{}", cov_prior.nrows(), cov_prior.ncols(), cov_like.nrows(), cov_like.ncols())));
    }
    if !is_spd(cov_prior) {
        return Err(Error::NotSpd("cov_prior".into()));
    }
    if !is_spd(cov_like) {
        return Err(Error::NotSpd("cov_like".into()));
    }
    if observations.n_workers() == 0 {
        return Err(Error::Invalid("dataset has no shards".into()));
    }
    let prec_prior = spd_inverse(cov_prior).ok_or_else(|| Error::NotSpd("cov_prior".into()))?;
    let prec_like = spd_inverse(cov_like).ok_or_else(|| Error::NotSpd("cov_like".into()))?;

    let mut specs = Vec::with_capacity(observations.n_workers());
    for (i, shard) in observations.shards.iter().enumerate() {
        if !shard.is_empty() && shard.rows.ncols() != d {
            return Err(Error::Dimension(format!("shard {i} observations have {} columns, expected {d}", shard.rows.ncols())));
        }
        if shard.is_empty() && i != 0 {
            return Err(Error::Invalid(format!(
                "shard {i} is empty and only worker 0 carries the prior; its potential would not be strongly convex"
            )));
        }
        let n = shard.len() as f64;
        let mut hess = &prec_like * n;
        let sum_y: DVector<f64> = shard.rows.row_iter().fold(DVector::zeros(d), |acc, r| acc + r.transpose());
        let mut lin = &prec_like * &sum_y;
        let mut offset: f64 = shard
            .rows
            .row_iter()
            .map(|r| {
                let y = r.transpose();
                0.5 * y.dot(&(&prec_like * &y))
            })
            .sum();
        let prior = if i == 0 {
            hess += &prec_prior;
            lin += &prec_prior * mean_prior;
            offset += 0.5 * mean_prior.dot(&(&prec_prior * mean_prior));
            Some((mean_prior.clone(), prec_prior.clone()))
        } else {
            None
        };
        let (m, mm) = eig_extremes(&hess);
        specs.push(PotentialSpec {
            dim_out: d,
            matrix_a: DMatrix::identity(d, d),
            m_lower: m,
            m_upper: mm,
            l_hess: Some(0.0),
            potential: Arc::new(Potential::Quadratic(QuadraticPotential {
                hess,
                lin,
                offset,
                obs: Some((prec_like.clone(), Arc::new(shard.clone()))),
                prior,
            })),
        });
    }
    Ok(specs)
}

/// Largest value of the logistic second derivative's slope, `max |σ''| = 1/(6√3)`.
pub const LOGISTIC_THIRD_DERIV_BOUND: f64 = 0.096_225_044_864_937_63;

/// Bayesian logistic regression split evenly over `b` workers, each worker
/// carrying `prior_prec / b` of the isotropic Gaussian prior.
pub fn logistic_model(features: &DMatrix<f64>, labels: &[f64], prior_prec: f64, b: usize) -> Result<Vec<PotentialSpec>> {
    if features.nrows() == 0 || features.ncols() == 0 {
        return Err(Error::Invalid("empty feature matrix".into()));
    }
    if b == 0 {
        return Err(Error::Invalid("worker count must be at least 1".into()));
    }
    if b > features.nrows() {
        return Err(Error::Invalid(format!("{b} workers for {} observations", features.nrows())));
    }
    if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::Invalid("labels must be 0 or 1".into()));
    }
    if !(prior_prec > 0.0) {
        return Err(Error::Invalid("prior precision must be positive".into()));
    }
    let data = ShardedDataset::from_labeled(features, labels, b)?;
    logistic_specs(&data, prior_prec)
}

/// Logistic potentials for an already sharded dataset.
pub fn logistic_specs(data: &ShardedDataset, prior_prec: f64) -> Result<Vec<PotentialSpec>> {
    let b = data.n_workers();
    let d = data.feature_dim;
    let ridge = prior_prec / b as f64;
    Ok(data
        .shards
        .iter()
        .map(|s| {
            let gram = s.rows.transpose() * &s.rows;
            let cube_sum: f64 = s.rows.row_iter().map(|r| r.norm().powi(3)).sum();
            PotentialSpec {
                dim_out: d,
                matrix_a: DMatrix::identity(d, d),
                m_lower: ridge,
                m_upper: ridge + 0.25 * lambda_max(&gram).max(0.0),
                l_hess: Some(LOGISTIC_THIRD_DERIV_BOUND * cube_sum),
                potential: Arc::new(Potential::Logistic(LogisticPotential {
                    shard: Arc::new(s.clone()),
                    ridge,
                })),
            }
        })
        .collect())
}

/// Scale every column to zero mean and unit sample variance (constant columns are left centered).
pub fn standardize_columns(x: &mut DMatrix<f64>) {
    let n = x.nrows() as f64;
    if n < 2.0 {
        return;
    }
    for mut col in x.column_iter_mut() {
        let mean = col.sum() / n;
        col.add_scalar_mut(-mean);
        let sd = (col.norm_squared() / (n - 1.0)).sqrt();
        if sd > 0.0 {
            col /= sd;
        }
    }
}

/// Constants of the full potential that drive the bias bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConstants {
    /// λ_min(Σ m_i A_iᵀA_i).
    pub m_u: f64,
    /// ‖Σ A_iᵀA_i‖ · max M_i² / m_U.
    pub sigma_u_sq: f64,
    /// λ_max(Σ ρ_i M_i² A_iᵀA_i)^{1/2}.
    pub l_beta: f64,
}

fn check_specs(specs: &[PotentialSpec]) -> Result<usize> {
    let d = specs.first().ok_or_else(|| Error::Invalid("no potentials".into()))?.dim_in();
    for (i, s) in specs.iter().enumerate() {
        if s.dim_in() != d || s.matrix_a.nrows() != s.dim_out {
            return Err(Error::Dimension(format!("worker {i}: A is {}x{}, expected {}x{d}", s.matrix_a.nrows(), s.matrix_a.ncols(), s.dim_out)));
        }
    }
    Ok(d)
}

/// Weighted Gram sum `Σ w_i A_iᵀA_i`.
pub fn weighted_gram(specs: &[PotentialSpec], w: impl Fn(usize, &PotentialSpec) -> f64) -> DMatrix<f64> {
    let d = specs[0].dim_in();
    let mut out = DMatrix::zeros(d, d);
    for (i, s) in specs.iter().enumerate() {
        out += (s.matrix_a.transpose() * &s.matrix_a) * w(i, s);
    }
    out
}

/// Rejects inputs whose `Σ A_iᵀA_i` is singular.
pub fn check_identifiable(specs: &[PotentialSpec]) -> Result<()> {
    check_specs(specs)?;
    let ata = weighted_gram(specs, |_, _| 1.0);
    let (lo, hi) = eig_extremes(&ata);
    if !(lo > 1e-12 * hi.max(1.0)) {
        return Err(Error::RankDeficient);
    }
    Ok(())
}

pub fn model_constants(specs: &[PotentialSpec], rho: &[f64]) -> Result<ModelConstants> {
    check_identifiable(specs)?;
    if rho.len() != specs.len() {
        return Err(Error::Dimension(format!("{} tolerances for {} workers", rho.len(), specs.len())));
    }
    if rho.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
        return Err(Error::Invalid("tolerances must be finite and nonnegative".into()));
    }
    let m_u = lambda_min(&weighted_gram(specs, |_, s| s.m_lower));
    let ata_norm = lambda_max(&weighted_gram(specs, |_, _| 1.0));
    let max_m2 = specs.iter().map(|s| s.m_upper * s.m_upper).fold(0.0, f64::max);
    let l_beta = lambda_max(&weighted_gram(specs, |i, s| rho[i] * s.m_upper * s.m_upper)).max(0.0).sqrt();
    Ok(ModelConstants {
        m_u,
        sigma_u_sq: ata_norm * max_m2 / m_u,
        l_beta,
    })
}

/// The full negative log-posterior `U(θ) = Σ U_i(A_i θ)`.
#[derive(Clone, Copy)]
pub struct FullPotential<'a> {
    pub specs: &'a [PotentialSpec],
}

impl<'a> FullPotential<'a> {
    pub fn new(specs: &'a [PotentialSpec]) -> Self {
        FullPotential { specs }
    }

    pub fn dim(&self) -> usize {
        self.specs[0].dim_in()
    }

    pub fn value(&self, theta: &DVector<f64>) -> f64 {
        self.specs.iter().map(|s| s.value(&(&s.matrix_a * theta))).sum()
    }

    pub fn grad(&self, theta: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(self.dim());
        for s in self.specs {
            let gi = s.grad(&(&s.matrix_a * theta));
            g.gemv_tr(1.0, &s.matrix_a, &gi, 1.0);
        }
        g
    }

    pub fn hessian(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let d = self.dim();
        let mut h = DMatrix::zeros(d, d);
        for s in self.specs {
            let hi = s.hessian(&(&s.matrix_a * theta));
            h += s.matrix_a.transpose() * hi * &s.matrix_a;
        }
        h
    }
}
