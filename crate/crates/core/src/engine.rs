//! The synchronous master/worker loop over a simulated cluster.
//!
//! Every global iteration runs each worker's local Langevin chain (in parallel
//! when allowed), then the master draws θ from its Gaussian conditional. Worker
//! latencies only feed the wall-clock model; they never change sample values.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::diagnostics::ChainSummary;
use crate::error::{Error, Result};
use crate::kernels::{build_precision, initial_state, master_draw, ChainState, HyperParams, LocalChain};
use crate::model::PotentialSpec;
use crate::optim::theta_star;
use crate::rng::{fill_normal, normal_vec, stream, worker_stream, Stream, MASTER_STREAM};

/// Per-worker cost of one local step and the cost of one communication round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterProfile {
    pub tau: Vec<f64>,
    pub comm_cost: f64,
}

impl ClusterProfile {
    pub fn new(tau: Vec<f64>, comm_cost: f64) -> Result<Self> {
        if tau.is_empty() || tau.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(Error::Invalid("worker step costs must be positive".into()));
        }
        if !(comm_cost.is_finite() && comm_cost >= 0.0) {
            return Err(Error::Invalid("communication cost must be nonnegative".into()));
        }
        Ok(ClusterProfile { tau, comm_cost })
    }

    /// Unit step cost on every worker and free communication.
    pub fn homogeneous(b: usize) -> Self {
        ClusterProfile {
            tau: vec![1.0; b],
            comm_cost: 0.0,
        }
    }

    /// Modelled duration of one synchronous round.
    pub fn round_time(&self, n_local: &[usize]) -> f64 {
        let slowest = n_local
            .iter()
            .zip(&self.tau)
            .map(|(n, t)| *n as f64 * t)
            .fold(0.0, f64::max);
        2.0 * self.comm_cost + slowest
    }
}

/// Splits `n_avg · b` local steps across workers in proportion to their speed.
pub fn allocate_local_iters(profile: &ClusterProfile, n_avg: f64) -> Vec<usize> {
    let b = profile.tau.len() as f64;
    let inv_sum: f64 = profile.tau.iter().map(|t| 1.0 / t).sum();
    profile
        .tau
        .iter()
        .map(|t| {
            let q = (1.0 / t) / inv_sum;
            ((q * n_avg * b).round() as usize).max(1)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub total_iters: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub record_z: bool,
    /// Run even if the hyperparameters were never validated.
    pub override_validation: bool,
}

impl RunConfig {
    pub fn new(total_iters: usize, burn_in: usize, seed: u64) -> Self {
        RunConfig {
            total_iters,
            burn_in,
            thin: 1,
            seed,
            record_z: false,
            override_validation: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_iters == 0 {
            return Err(Error::Invalid("total iterations must be positive".into()));
        }
        if self.burn_in >= self.total_iters {
            return Err(Error::Invalid(format!(
                "burn-in {} must be smaller than the total {}",
                self.burn_in, self.total_iters
            )));
        }
        if self.thin == 0 {
            return Err(Error::Invalid("thinning stride must be positive".into()));
        }
        Ok(())
    }

    /// Number of recorded iterations, `⌈(T − T_bi)/thin⌉`.
    pub fn kept(&self) -> usize {
        (self.total_iters - self.burn_in).div_ceil(self.thin)
    }

    pub fn keeps(&self, t: usize) -> bool {
        t >= self.burn_in && (t - self.burn_in).is_multiple_of(self.thin)
    }
}

/// How many threads may run worker chains concurrently.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parallelism {
    Serial,
    Threads(usize),
}

pub const THREADS_ENV: &str = "DGLMC_THREADS";

impl Parallelism {
    /// Reads `DGLMC_THREADS`: 0 means serial, unset means one thread per core.
    pub fn from_env() -> Self {
        match std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
            Some(0) => Parallelism::Serial,
            Some(n) => Parallelism::Threads(n),
            None => Parallelism::Threads(std::thread::available_parallelism().map_or(1, |n| n.get())),
        }
    }
}

/// Output of a sampler run.
#[derive(Debug, Clone)]
pub struct RunReport {
    /// Kept θ samples, one per row.
    pub theta_samples: DMatrix<f64>,
    /// Global iteration index (0-based) of every kept row.
    pub kept_iters: Vec<usize>,
    /// Concatenated z blocks per kept iteration, when requested.
    pub z_samples: Option<DMatrix<f64>>,
    /// Modelled wall-clock time `Σ_t [2 c_com + max_i N_i τ_i]`.
    pub wall_model: f64,
    pub iter_count: usize,
    /// Metropolis acceptance rate, for samplers that have one.
    pub acceptance_rate: Option<f64>,
    pub diagnostics: Option<ChainSummary>,
}

/// Row-wise sample recorder.
pub(crate) struct Recorder {
    d: usize,
    theta: Vec<f64>,
    iters: Vec<usize>,
    z: Option<(usize, Vec<f64>)>,
}

impl Recorder {
    pub fn new(d: usize, capacity: usize, z_width: Option<usize>) -> Self {
        Recorder {
            d,
            theta: Vec::with_capacity(capacity * d),
            iters: Vec::with_capacity(capacity),
            z: z_width.map(|w| (w, Vec::with_capacity(capacity * w))),
        }
    }

    pub fn push(&mut self, t: usize, theta: &DVector<f64>, z: Option<&[DVector<f64>]>) {
        self.theta.extend(theta.iter());
        self.iters.push(t);
        if let (Some((_, buf)), Some(z)) = (self.z.as_mut(), z) {
            for zi in z {
                buf.extend(zi.iter());
            }
        }
    }

    pub fn finish(self, wall_model: f64, iter_count: usize, acceptance_rate: Option<f64>) -> RunReport {
        let rows = self.iters.len();
        RunReport {
            theta_samples: DMatrix::from_row_slice(rows, self.d, &self.theta),
            kept_iters: self.iters,
            z_samples: self.z.map(|(w, buf)| DMatrix::from_row_slice(rows, w, &buf)),
            wall_model,
            iter_count,
            acceptance_rate,
            diagnostics: None,
        }
    }
}

const DIVERGENCE_NORM: f64 = 1e12;

pub(crate) fn diverged(v: &DVector<f64>) -> bool {
    let n = v.norm();
    !n.is_finite() || n > DIVERGENCE_NORM
}

fn check_inputs(specs: &[PotentialSpec], hyper: &HyperParams, config: &RunConfig, profile: &ClusterProfile) -> Result<()> {
    config.validate()?;
    if specs.is_empty() {
        return Err(Error::Invalid("no workers".into()));
    }
    if hyper.n_workers() != specs.len() || profile.tau.len() != specs.len() {
        return Err(Error::Dimension(format!(
            "{} potentials, {} hyperparameter sets, {} latency entries",
            specs.len(),
            hyper.n_workers(),
            profile.tau.len()
        )));
    }
    if !hyper.validated && !config.override_validation {
        return Err(Error::NotValidated);
    }
    Ok(())
}

struct Worker {
    chain: LocalChain,
    rng: Stream,
}

pub(crate) fn make_pool(par: Parallelism) -> Result<Option<rayon::ThreadPool>> {
    match par {
        Parallelism::Serial => Ok(None),
        Parallelism::Threads(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map(Some)
            .map_err(|e| Error::Invalid(format!("thread pool: {e}"))),
    }
}

/// Runs the sampler from the standard start: `z_i = A_i θ*` and θ drawn from its conditional.
pub fn run_dglmc(specs: &[PotentialSpec], hyper: &HyperParams, config: &RunConfig, profile: &ClusterProfile) -> Result<RunReport> {
    run_dglmc_with(specs, hyper, config, profile, Parallelism::from_env())
}

pub fn run_dglmc_with(
    specs: &[PotentialSpec],
    hyper: &HyperParams,
    config: &RunConfig,
    profile: &ClusterProfile,
    par: Parallelism,
) -> Result<RunReport> {
    check_inputs(specs, hyper, config, profile)?;
    let factor = build_precision(specs, &hyper.rho)?;
    let ts = theta_star(specs)?;
    let mut master = stream(config.seed, MASTER_STREAM);
    let noise = normal_vec(&mut master, ts.len());
    let state = initial_state(specs, &hyper.rho, &factor, &ts, &noise);
    run_from(specs, hyper, config, profile, state, master, par)
}

/// Runs the sampler from an explicit starting state.
pub fn run_dglmc_from_state(
    specs: &[PotentialSpec],
    hyper: &HyperParams,
    config: &RunConfig,
    profile: &ClusterProfile,
    state: ChainState,
    par: Parallelism,
) -> Result<RunReport> {
    check_inputs(specs, hyper, config, profile)?;
    state.check_dims(specs)?;
    let master = stream(config.seed, MASTER_STREAM);
    run_from(specs, hyper, config, profile, state, master, par)
}

fn run_from(
    specs: &[PotentialSpec],
    hyper: &HyperParams,
    config: &RunConfig,
    profile: &ClusterProfile,
    state: ChainState,
    mut master: Stream,
    par: Parallelism,
) -> Result<RunReport> {
    let factor = build_precision(specs, &hyper.rho)?;
    let d = state.theta.len();
    let z_width: usize = specs.iter().map(|s| s.dim_out).sum();
    let mut workers: Vec<Worker> = state
        .z
        .into_iter()
        .enumerate()
        .map(|(i, z)| Worker {
            chain: LocalChain::new(z),
            rng: worker_stream(config.seed, i),
        })
        .collect();
    let mut theta = state.theta;
    let mut eta = DVector::zeros(d);
    let mut z_view: Vec<DVector<f64>> = workers.iter().map(|w| w.chain.z.clone()).collect();
    let mut rec = Recorder::new(d, config.kept(), config.record_z.then_some(z_width));
    let pool = make_pool(par)?;

    for t in 0..config.total_iters {
        let th = &theta;
        let step = |(i, w): (usize, &mut Worker)| {
            w.chain
                .advance(th, &specs[i], hyper.rho[i], hyper.gamma[i], hyper.n_local[i], &mut w.rng);
        };
        match &pool {
            None => workers.iter_mut().enumerate().for_each(step),
            Some(p) => p.install(|| workers.par_iter_mut().enumerate().for_each(step)),
        }
        // barrier: the master only sees the blocks once every worker is done
        for (zv, w) in z_view.iter_mut().zip(&workers) {
            zv.copy_from(&w.chain.z);
            if diverged(zv) {
                return Err(Error::Diverged(t));
            }
        }
        fill_normal(&mut master, &mut eta);
        theta = master_draw(&z_view, &factor, specs, &hyper.rho, &eta);
        if diverged(&theta) {
            return Err(Error::Diverged(t));
        }
        if config.keeps(t) {
            rec.push(t, &theta, config.record_z.then_some(z_view.as_slice()));
        }
    }
    let wall = config.total_iters as f64 * profile.round_time(&hyper.n_local);
    Ok(rec.finish(wall, config.total_iters, None))
}

/// `‖z − z'‖` in the norm weighting block i by `1/(N_i γ_i)`.
pub fn weighted_distance(a: &[DVector<f64>], b: &[DVector<f64>], hyper: &HyperParams) -> f64 {
    a.iter()
        .zip(b)
        .enumerate()
        .map(|(i, (x, y))| (x - y).norm_squared() / (hyper.n_local[i] as f64 * hyper.gamma[i]))
        .sum::<f64>()
        .sqrt()
}

/// Runs two copies of the z-chain driven by the same noise and returns the
/// weighted distance between their z blocks: entry 0 is the initial distance,
/// entry n the distance after n global iterations.
///
/// Each iteration draws θ from its conditional given the current blocks (shared
/// master noise), then runs the local chains (shared worker noise), so the θ
/// components of the starting states are not used.
pub fn run_coupled_pair(
    specs: &[PotentialSpec],
    hyper: &HyperParams,
    config: &RunConfig,
    state_a: &ChainState,
    state_b: &ChainState,
) -> Result<Vec<f64>> {
    let profile = ClusterProfile::homogeneous(specs.len());
    check_inputs(specs, hyper, config, &profile)?;
    state_a.check_dims(specs)?;
    state_b.check_dims(specs)?;
    let factor = build_precision(specs, &hyper.rho)?;
    let d = state_a.theta.len();
    let mut za: Vec<LocalChain> = state_a.z.iter().cloned().map(LocalChain::new).collect();
    let mut zb: Vec<LocalChain> = state_b.z.iter().cloned().map(LocalChain::new).collect();
    let mut master = stream(config.seed, MASTER_STREAM);
    let mut rngs: Vec<Stream> = (0..specs.len()).map(|i| worker_stream(config.seed, i)).collect();
    let mut eta = DVector::zeros(d);
    let blocks = |c: &[LocalChain]| c.iter().map(|l| l.z.clone()).collect::<Vec<_>>();

    let mut out = Vec::with_capacity(config.total_iters + 1);
    out.push(weighted_distance(&blocks(&za), &blocks(&zb), hyper));
    for t in 0..config.total_iters {
        fill_normal(&mut master, &mut eta);
        let ta = master_draw(&blocks(&za), &factor, specs, &hyper.rho, &eta);
        let tb = master_draw(&blocks(&zb), &factor, specs, &hyper.rho, &eta);
        for i in 0..specs.len() {
            let saved = rngs[i].clone();
            za[i].advance(&ta, &specs[i], hyper.rho[i], hyper.gamma[i], hyper.n_local[i], &mut rngs[i]);
            let mut replay = saved;
            zb[i].advance(&tb, &specs[i], hyper.rho[i], hyper.gamma[i], hyper.n_local[i], &mut replay);
            if diverged(&za[i].z) || diverged(&zb[i].z) {
                return Err(Error::Diverged(t));
            }
        }
        out.push(weighted_distance(&blocks(&za), &blocks(&zb), hyper));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn allocation_examples() {
        let p = ClusterProfile::new(vec![1.0, 3.0], 0.0).unwrap();
        assert_eq!(allocate_local_iters(&p, 4.0), vec![6, 2]);
        assert_eq!(allocate_local_iters(&ClusterProfile::homogeneous(5), 3.0), vec![3; 5]);
        let skew = ClusterProfile::new(vec![1.0, 1000.0], 0.0).unwrap();
        assert!(allocate_local_iters(&skew, 1.0).iter().all(|&n| n >= 1));
    }

    #[test]
    fn kept_count() {
        let mut c = RunConfig::new(11, 1, 0);
        assert_eq!(c.kept(), 10);
        c.thin = 3;
        assert_eq!(c.kept(), 4);
        assert_eq!((0..11).filter(|&t| c.keeps(t)).count(), 4);
        assert!(RunConfig::new(5, 5, 0).validate().is_err());
    }
}
