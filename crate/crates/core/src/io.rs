//! Experiment configuration, synthetic data and CSV input/output.
//!
//! Configuration files are flat `section.key = value` lines; `#` starts a
//! comment. Lists are comma separated and matrices are given row-major.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::baselines::DsgldScheme;
use crate::error::{Error, Result};
use crate::model::{sigmoid, standardize_columns, Shard, ShardedDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    GaussianToy,
    Logistic,
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian-toy" => Ok(ModelKind::GaussianToy),
            "logistic" => Ok(ModelKind::Logistic),
            _ => Err(Error::Config(format!("unknown model kind `{s}`"))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::GaussianToy => "gaussian-toy",
            ModelKind::Logistic => "logistic",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    Dglmc,
    Dsgld,
    Mala,
}

impl FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dglmc" => Ok(SamplerKind::Dglmc),
            "dsgld" => Ok(SamplerKind::Dsgld),
            "mala" => Ok(SamplerKind::Mala),
            _ => Err(Error::Config(format!("unknown sampler `{s}`"))),
        }
    }
}

impl std::fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SamplerKind::Dglmc => "dglmc",
            SamplerKind::Dsgld => "dsgld",
            SamplerKind::Mala => "mala",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub dim: usize,
    pub n: usize,
    /// Seed of the synthetic data, kept apart from the chain seed.
    pub data_seed: u64,
    /// Row-major prior covariance (Gaussian toy); identity when absent.
    pub prior_cov: Option<Vec<f64>>,
    /// Row-major likelihood covariance (Gaussian toy); identity when absent.
    pub like_cov: Option<Vec<f64>>,
    /// Prior precision of the logistic model.
    pub prior_prec: f64,
    /// Read shards from this directory instead of generating them.
    pub data_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterConfig {
    pub workers: usize,
    pub tau: Option<Vec<f64>>,
    pub comm_cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub c_gamma: f64,
    /// Uniform number of local steps; the latency-aware guideline when absent.
    pub n_local: Option<usize>,
    pub rho: Option<f64>,
    pub gamma: Option<f64>,
    /// D-SGLD step; calibrated against DG-LMC with one local step when absent.
    pub dsgld_step: Option<f64>,
    pub batch_frac: f64,
    pub dsgld_scheme: DsgldScheme,
    /// MALA step; tuned towards `mala_target` acceptance when absent.
    pub mala_step: Option<f64>,
    pub mala_target: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSection {
    pub iters: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundsConfig {
    pub dims: Vec<usize>,
    /// Accuracy levels; `inf` is allowed.
    pub eps: Vec<f64>,
    pub workers: usize,
    pub m_lower: f64,
    pub m_upper: f64,
    /// Distance of each worker's minimizer from the origin.
    pub shift: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareConfig {
    pub samplers: Vec<SamplerKind>,
    pub alpha: f64,
    pub reference_iters: usize,
    pub reference_burn_in: usize,
    pub pilot_iters: usize,
    pub max_lag: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub cluster: ClusterConfig,
    pub sampler: SamplerConfig,
    pub run: RunSection,
    pub output_dir: PathBuf,
    pub bounds: BoundsConfig,
    pub compare: CompareConfig,
}

impl Default for ExperimentConfig {
    /// The two-dimensional Gaussian toy problem on ten workers.
    fn default() -> Self {
        ExperimentConfig {
            model: ModelConfig {
                kind: ModelKind::GaussianToy,
                dim: 2,
                n: 20_000,
                data_seed: 0,
                prior_cov: None,
                like_cov: Some(vec![1.0, 0.5, 0.5, 1.0]),
                prior_prec: 1.0,
                data_dir: None,
            },
            cluster: ClusterConfig {
                workers: 10,
                tau: None,
                comm_cost: 0.0,
            },
            sampler: SamplerConfig {
                kind: SamplerKind::Dglmc,
                c_gamma: 0.25,
                n_local: None,
                rho: None,
                gamma: None,
                dsgld_step: None,
                batch_frac: 0.1,
                dsgld_scheme: DsgldScheme::Trajectory,
                mala_step: None,
                mala_target: 0.57,
            },
            run: RunSection {
                iters: 100_000,
                burn_in: 10_000,
                thin: 1,
                seed: 0,
            },
            output_dir: PathBuf::from("out"),
            bounds: BoundsConfig {
                dims: vec![8, 16, 32, 64],
                eps: vec![0.4, 0.2, 0.1, 0.05],
                workers: 1,
                m_lower: 1.0,
                m_upper: 10.0,
                shift: 0.0,
            },
            compare: CompareConfig {
                samplers: vec![SamplerKind::Dglmc, SamplerKind::Dsgld, SamplerKind::Mala],
                alpha: 0.05,
                reference_iters: 100_000,
                reference_burn_in: 10_000,
                pilot_iters: 20_000,
                max_lag: 50,
            },
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse::<T>()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|x| parse(key, x.trim())).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Starts from [`Default`] and applies every line of `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = ExperimentConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            c.set(key.trim(), value.trim())?;
        }
        c.check()?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Sets one key. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let none_or = |v: &str| v.is_empty() || v == "none";
        match key {
            "model.kind" => self.model.kind = parse(key, v)?,
            "model.dim" => self.model.dim = parse(key, v)?,
            "model.n" => self.model.n = parse(key, v)?,
            "model.data_seed" => self.model.data_seed = parse(key, v)?,
            "model.prior_cov" => self.model.prior_cov = if none_or(v) { None } else { Some(parse_list(key, v)?) },
            "model.like_cov" => self.model.like_cov = if none_or(v) { None } else { Some(parse_list(key, v)?) },
            "model.prior_prec" => self.model.prior_prec = parse(key, v)?,
            "model.data_dir" => self.model.data_dir = if none_or(v) { None } else { Some(PathBuf::from(v)) },
            "cluster.workers" => self.cluster.workers = parse(key, v)?,
            "cluster.tau" => self.cluster.tau = if none_or(v) { None } else { Some(parse_list(key, v)?) },
            "cluster.comm_cost" => self.cluster.comm_cost = parse(key, v)?,
            "sampler.kind" => self.sampler.kind = parse(key, v)?,
            "sampler.c_gamma" => self.sampler.c_gamma = parse(key, v)?,
            "sampler.n_local" => self.sampler.n_local = if none_or(v) { None } else { Some(parse(key, v)?) },
            "sampler.rho" => self.sampler.rho = if none_or(v) { None } else { Some(parse(key, v)?) },
            "sampler.gamma" => self.sampler.gamma = if none_or(v) { None } else { Some(parse(key, v)?) },
            "sampler.dsgld_step" => self.sampler.dsgld_step = if none_or(v) { None } else { Some(parse(key, v)?) },
            "sampler.batch_frac" => self.sampler.batch_frac = parse(key, v)?,
            "sampler.dsgld_scheme" => self.sampler.dsgld_scheme = parse(key, v)?,
            "sampler.mala_step" => self.sampler.mala_step = if none_or(v) { None } else { Some(parse(key, v)?) },
            "sampler.mala_target" => self.sampler.mala_target = parse(key, v)?,
            "run.iters" => self.run.iters = parse(key, v)?,
            "run.burn_in" => self.run.burn_in = parse(key, v)?,
            "run.thin" => self.run.thin = parse(key, v)?,
            "run.seed" => self.run.seed = parse(key, v)?,
            "output.dir" => self.output_dir = PathBuf::from(v),
            "bounds.dims" => self.bounds.dims = parse_list(key, v)?,
            "bounds.eps" => self.bounds.eps = parse_list(key, v)?,
            "bounds.workers" => self.bounds.workers = parse(key, v)?,
            "bounds.m_lower" => self.bounds.m_lower = parse(key, v)?,
            "bounds.m_upper" => self.bounds.m_upper = parse(key, v)?,
            "bounds.shift" => self.bounds.shift = parse(key, v)?,
            "compare.samplers" => self.compare.samplers = parse_list(key, v)?,
            "compare.alpha" => self.compare.alpha = parse(key, v)?,
            "compare.reference_iters" => self.compare.reference_iters = parse(key, v)?,
            "compare.reference_burn_in" => self.compare.reference_burn_in = parse(key, v)?,
            "compare.pilot_iters" => self.compare.pilot_iters = parse(key, v)?,
            "compare.max_lag" => self.compare.max_lag = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Consistency checks that do not need the data.
    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.model.dim == 0 {
            return bad("model.dim must be positive".into());
        }
        if self.cluster.workers == 0 {
            return bad("cluster.workers must be positive".into());
        }
        if self.model.n < self.cluster.workers {
            return bad(format!("model.n = {} is smaller than cluster.workers = {}", self.model.n, self.cluster.workers));
        }
        let d2 = self.model.dim * self.model.dim;
        for (name, m) in [("model.prior_cov", &self.model.prior_cov), ("model.like_cov", &self.model.like_cov)] {
            if let Some(m) = m {
                if m.len() != d2 {
                    return bad(format!("{name} has {} entries, expected {d2}", m.len()));
                }
            }
        }
        if let Some(t) = &self.cluster.tau {
            if t.len() != self.cluster.workers {
                return bad(format!("cluster.tau has {} entries for {} workers", t.len(), self.cluster.workers));
            }
        }
        if !(self.sampler.batch_frac > 0.0 && self.sampler.batch_frac <= 1.0) {
            return bad("sampler.batch_frac must lie in (0, 1]".into());
        }
        if self.run.iters == 0 || self.run.burn_in >= self.run.iters || self.run.thin == 0 {
            return bad("run.iters must be positive and exceed run.burn_in; run.thin must be positive".into());
        }
        if !(self.compare.alpha > 0.0 && self.compare.alpha < 1.0) {
            return bad("compare.alpha must lie in (0, 1)".into());
        }
        if self.bounds.dims.contains(&0) || self.bounds.eps.iter().any(|e| !(*e > 0.0)) {
            return bad("bounds.dims must be positive and bounds.eps > 0".into());
        }
        Ok(())
    }

    /// Serializes every key; [`ExperimentConfig::parse`] reads it back unchanged.
    pub fn to_text(&self) -> String {
        fn opt<T: ToString>(v: &Option<T>) -> String {
            v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
        }
        fn opt_list<T: ToString>(v: &Option<Vec<T>>) -> String {
            v.as_ref().map_or_else(|| "none".to_string(), |l| join(l))
        }
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("model.kind", self.model.kind.to_string());
        kv("model.dim", self.model.dim.to_string());
        kv("model.n", self.model.n.to_string());
        kv("model.data_seed", self.model.data_seed.to_string());
        kv("model.prior_cov", opt_list(&self.model.prior_cov));
        kv("model.like_cov", opt_list(&self.model.like_cov));
        kv("model.prior_prec", self.model.prior_prec.to_string());
        kv("model.data_dir", opt(&self.model.data_dir.as_ref().map(|p| p.display().to_string())));
        kv("cluster.workers", self.cluster.workers.to_string());
        kv("cluster.tau", opt_list(&self.cluster.tau));
        kv("cluster.comm_cost", self.cluster.comm_cost.to_string());
        kv("sampler.kind", self.sampler.kind.to_string());
        kv("sampler.c_gamma", self.sampler.c_gamma.to_string());
        kv("sampler.n_local", opt(&self.sampler.n_local));
        kv("sampler.rho", opt(&self.sampler.rho));
        kv("sampler.gamma", opt(&self.sampler.gamma));
        kv("sampler.dsgld_step", opt(&self.sampler.dsgld_step));
        kv("sampler.batch_frac", self.sampler.batch_frac.to_string());
        kv("sampler.dsgld_scheme", self.sampler.dsgld_scheme.to_string());
        kv("sampler.mala_step", opt(&self.sampler.mala_step));
        kv("sampler.mala_target", self.sampler.mala_target.to_string());
        kv("run.iters", self.run.iters.to_string());
        kv("run.burn_in", self.run.burn_in.to_string());
        kv("run.thin", self.run.thin.to_string());
        kv("run.seed", self.run.seed.to_string());
        kv("output.dir", self.output_dir.display().to_string());
        kv("bounds.dims", join(&self.bounds.dims));
        kv("bounds.eps", join(&self.bounds.eps));
        kv("bounds.workers", self.bounds.workers.to_string());
        kv("bounds.m_lower", self.bounds.m_lower.to_string());
        kv("bounds.m_upper", self.bounds.m_upper.to_string());
        kv("bounds.shift", self.bounds.shift.to_string());
        kv("compare.samplers", join(&self.compare.samplers));
        kv("compare.alpha", self.compare.alpha.to_string());
        kv("compare.reference_iters", self.compare.reference_iters.to_string());
        kv("compare.reference_burn_in", self.compare.reference_burn_in.to_string());
        kv("compare.pilot_iters", self.compare.pilot_iters.to_string());
        kv("compare.max_lag", self.compare.max_lag.to_string());
        s
    }

    pub fn prior_cov(&self) -> DMatrix<f64> {
        square_or_identity(&self.model.prior_cov, self.model.dim)
    }

    pub fn like_cov(&self) -> DMatrix<f64> {
        square_or_identity(&self.model.like_cov, self.model.dim)
    }

    pub fn tau(&self) -> Vec<f64> {
        self.cluster.tau.clone().unwrap_or_else(|| vec![1.0; self.cluster.workers])
    }
}

fn square_or_identity(v: &Option<Vec<f64>>, d: usize) -> DMatrix<f64> {
    match v {
        Some(v) => DMatrix::from_row_slice(d, d, v),
        None => DMatrix::identity(d, d),
    }
}

/// Formats a float with 17 significant digits, enough to round-trip exactly.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Synthetic data together with the parameter that generated it.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub dataset: ShardedDataset,
    pub theta_gen: DVector<f64>,
}

/// Unit-norm direction drawn from the seed.
fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let n = v.norm();
        if n > 1e-8 {
            return v / n;
        }
    }
}

/// Generates `n` observations split over `b` shards, deterministically in `seed`.
///
/// Gaussian toy: `y ~ N(θ_gen, like_cov)`. Logistic: standardized
/// standard-normal features and labels `y ~ Bernoulli(σ(xᵀθ_gen))`. In both
/// cases `θ_gen` is a unit vector drawn from the seed.
pub fn generate_synthetic(kind: ModelKind, dim: usize, n: usize, b: usize, like_cov: &DMatrix<f64>, seed: u64) -> Result<SyntheticData> {
    if b == 0 || n < b {
        return Err(Error::Invalid(format!("need at least one observation per worker (n = {n}, b = {b})")));
    }
    if dim == 0 {
        return Err(Error::Invalid("dimension must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta_gen = unit_vector(&mut rng, dim);
    match kind {
        ModelKind::GaussianToy => {
            let chol = like_cov
                .clone()
                .cholesky()
                .ok_or_else(|| Error::NotSpd("like_cov".into()))?;
            let l = chol.l();
            let mut obs = DMatrix::zeros(n, dim);
            for r in 0..n {
                let xi = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
                obs.set_row(r, &(&theta_gen + &l * xi).transpose());
            }
            Ok(SyntheticData {
                dataset: ShardedDataset::from_observations(&obs, b)?,
                theta_gen,
            })
        }
        ModelKind::Logistic => {
            let mut x = DMatrix::from_fn(n, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            standardize_columns(&mut x);
            let eta = &x * &theta_gen;
            let labels: Vec<f64> = eta
                .iter()
                .map(|e| if rng.random::<f64>() < sigmoid(*e) { 1.0 } else { 0.0 })
                .collect();
            Ok(SyntheticData {
                dataset: ShardedDataset::from_labeled(&x, &labels, b)?,
                theta_gen,
            })
        }
    }
}

fn shard_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("shard_{i}.csv"))
}

/// Writes `shard_<i>.csv` files (header `y1..yd`, or `y,x1..xd` when labeled)
/// and `theta_gen.csv`.
pub fn write_shards(dir: &Path, data: &SyntheticData) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let labeled = data.dataset.feature_dim > 0;
    for (i, shard) in data.dataset.shards.iter().enumerate() {
        let cols = shard.rows.ncols();
        let mut s = String::new();
        if labeled {
            s.push('y');
            for c in 1..=cols {
                let _ = write!(s, ",x{c}");
            }
        } else {
            let names: Vec<String> = (1..=cols).map(|c| format!("y{c}")).collect();
            s.push_str(&names.join(","));
        }
        s.push('\n');
        for r in 0..shard.len() {
            let mut fields = Vec::with_capacity(cols + 1);
            if labeled {
                fields.push(format!("{}", shard.labels[r] as u8));
            }
            fields.extend(shard.rows.row(r).iter().map(|x| fmt_f64(*x)));
            s.push_str(&fields.join(","));
            s.push('\n');
        }
        let p = shard_path(dir, i);
        fs::write(&p, s).map_err(|e| Error::io(&p, e))?;
    }
    write_theta_gen(dir, &data.theta_gen)
}

fn write_theta_gen(dir: &Path, theta: &DVector<f64>) -> Result<()> {
    let mut s = String::from("coordinate,value\n");
    for (k, v) in theta.iter().enumerate() {
        let _ = writeln!(s, "{},{}", k + 1, fmt_f64(*v));
    }
    let p = dir.join("theta_gen.csv");
    fs::write(&p, s).map_err(|e| Error::io(&p, e))
}

fn read_theta_gen(dir: &Path) -> Result<Option<DVector<f64>>> {
    let p = dir.join("theta_gen.csv");
    if !p.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let vals: Result<Vec<f64>> = text
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let v = l.split(',').nth(1).unwrap_or("");
            parse::<f64>("theta_gen.csv", v.trim())
        })
        .collect();
    Ok(Some(DVector::from_vec(vals?)))
}

fn read_shard(path: &Path) -> Result<(Shard, bool)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Config(format!("{}: empty file", path.display())))?;
    let names: Vec<&str> = header.split(',').map(str::trim).collect();
    let labeled = names.first() == Some(&"y");
    let width = if labeled { names.len() - 1 } else { names.len() };
    let mut vals = Vec::new();
    let mut labels = Vec::new();
    let mut rows = 0;
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != names.len() {
            return Err(Error::Config(format!(
                "{} line {}: {} fields, header has {}",
                path.display(),
                ln + 2,
                fields.len(),
                names.len()
            )));
        }
        let key = path.display().to_string();
        let mut it = fields.into_iter();
        if labeled {
            labels.push(parse::<f64>(&key, it.next().unwrap_or(""))?);
        }
        for f in it {
            vals.push(parse::<f64>(&key, f)?);
        }
        rows += 1;
    }
    Ok((
        Shard {
            rows: DMatrix::from_row_slice(rows, width, &vals),
            labels,
        },
        labeled,
    ))
}

/// Reads `shard_0.csv, shard_1.csv, …` until the first missing index, plus
/// `theta_gen.csv` when present.
pub fn read_shards(dir: &Path) -> Result<(ShardedDataset, Option<DVector<f64>>)> {
    let mut shards = Vec::new();
    let mut labeled = None;
    while shard_path(dir, shards.len()).exists() {
        let (s, l) = read_shard(&shard_path(dir, shards.len()))?;
        if labeled.is_some_and(|x| x != l) {
            return Err(Error::Config(format!("{}: shards mix labeled and unlabeled files", dir.display())));
        }
        labeled = Some(l);
        shards.push(s);
    }
    if shards.is_empty() {
        return Err(Error::Config(format!("no shard_0.csv in {}", dir.display())));
    }
    let width = shards[0].rows.ncols();
    let feature_dim = if labeled == Some(true) { width } else { 0 };
    Ok((ShardedDataset::from_shards(shards, feature_dim)?, read_theta_gen(dir)?))
}

/// Writes `iter,theta_1..theta_d` with one kept sample per line.
pub fn write_chain(path: &Path, samples: &DMatrix<f64>, iters: &[usize]) -> Result<()> {
    let d = samples.ncols();
    let mut s = String::with_capacity(samples.nrows() * (d * 25 + 8) + 32);
    s.push_str("iter");
    for k in 1..=d {
        let _ = write!(s, ",theta_{k}");
    }
    s.push('\n');
    for (r, it) in iters.iter().enumerate() {
        let _ = write!(s, "{it}");
        for k in 0..d {
            let _ = write!(s, ",{:.16e}", samples[(r, k)]);
        }
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Reads a file written by [`write_chain`].
pub fn read_chain(path: &Path) -> Result<(DMatrix<f64>, Vec<usize>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let d = lines.next().map_or(0, |h| h.split(',').count().saturating_sub(1));
    let key = path.display().to_string();
    let mut iters = Vec::new();
    let mut vals = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let mut f = line.split(',');
        iters.push(parse::<usize>(&key, f.next().unwrap_or(""))?);
        for x in f {
            vals.push(parse::<f64>(&key, x)?);
        }
    }
    if vals.len() != iters.len() * d {
        return Err(Error::Config(format!("{key}: ragged rows")));
    }
    Ok((DMatrix::from_row_slice(iters.len(), d, &vals), iters))
}

/// A CSV table with a header, written with `\n` line endings.
#[derive(Debug, Clone, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("").split(',').map(String::from).collect();
        let rows = lines
            .filter(|l| !l.is_empty())
            .map(|l| l.split(',').map(String::from).collect())
            .collect();
        Ok(Table { header, rows })
    }

    /// Values of the named column.
    pub fn column(&self, name: &str) -> Option<Vec<&str>> {
        let k = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[k].as_str()).collect())
    }
}
