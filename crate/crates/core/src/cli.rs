//! The `generate`, `run`, `bounds` and `compare` subcommands.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::baselines::{
    calibrate_dsgld_step, dglmc_stationary_gaussian, exact_gaussian_posterior, run_dsgld, run_mala, tune_mala_step,
    axda_marginal_law, DsgldOptions, GaussianLaw,
};
use crate::diagnostics::{
    hpd_error_from_values, hpd_threshold, hpd_trace_from_values, iat, moments_with_se, neg_log_post_values, sample_cov, ChainSummary,
    WindowRule,
};
use crate::engine::{allocate_local_iters, run_dglmc, ClusterProfile, RunConfig, RunReport};
use crate::error::{Error, Result};
use crate::io::{fmt_f64, generate_synthetic, read_shards, write_chain, write_shards, ExperimentConfig, ModelKind, SamplerKind, Table};
use crate::kernels::HyperParams;
use crate::linalg::lambda_max;
use crate::model::{gaussian_model, logistic_specs, FullPotential, Potential, PotentialSpec, ShardedDataset};
use crate::optim::theta_star;
use crate::tuning::{
    axda_bias_bound, check_contraction, guideline_hyperparams, guideline_n_avg, kappa_gamma, mixing_budget, step_ratio,
    validity_gate, BiasBound,
};

/// Model, data and closed-form references built from a configuration.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub specs: Vec<PotentialSpec>,
    pub dataset: ShardedDataset,
    /// Parameter used to generate the data, when known.
    pub theta_gen: Option<DVector<f64>>,
    /// Exact posterior (Gaussian toy only).
    pub exact: Option<GaussianLaw>,
    pub data_source: String,
}

pub fn load_model(cfg: &ExperimentConfig) -> Result<LoadedModel> {
    let (dataset, theta_gen, data_source) = match &cfg.model.data_dir {
        Some(dir) => {
            let (ds, tg) = read_shards(dir)?;
            if ds.n_workers() != cfg.cluster.workers {
                return Err(Error::Config(format!(
                    "{} holds {} shards but cluster.workers = {}",
                    dir.display(),
                    ds.n_workers(),
                    cfg.cluster.workers
                )));
            }
            (ds, tg, dir.display().to_string())
        }
        None => {
            let syn = generate_synthetic(
                cfg.model.kind,
                cfg.model.dim,
                cfg.model.n,
                cfg.cluster.workers,
                &cfg.like_cov(),
                cfg.model.data_seed,
            )?;
            (syn.dataset, Some(syn.theta_gen), format!("synthetic(seed={})", cfg.model.data_seed))
        }
    };
    match cfg.model.kind {
        ModelKind::GaussianToy => {
            if dataset.feature_dim != 0 {
                return Err(Error::Config("Gaussian toy model expects unlabeled shards".into()));
            }
            let d = cfg.model.dim;
            let prior = GaussianLaw::new(DVector::zeros(d), cfg.prior_cov())?;
            let specs = gaussian_model(&prior.mean, &prior.cov, &cfg.like_cov(), &dataset)?;
            let exact = exact_gaussian_posterior(&prior, &cfg.like_cov(), &dataset.stacked_rows())?;
            Ok(LoadedModel {
                specs,
                dataset,
                theta_gen,
                exact: Some(exact),
                data_source,
            })
        }
        ModelKind::Logistic => {
            if dataset.feature_dim == 0 {
                return Err(Error::Config("logistic model expects labeled shards".into()));
            }
            let specs = logistic_specs(&dataset, cfg.model.prior_prec)?;
            Ok(LoadedModel {
                specs,
                dataset,
                theta_gen,
                exact: None,
                data_source,
            })
        }
    }
}

pub fn cluster_profile(cfg: &ExperimentConfig) -> Result<ClusterProfile> {
    ClusterProfile::new(cfg.tau(), cfg.cluster.comm_cost)
}

/// Hyperparameters from the guideline, with any explicit `sampler.rho`,
/// `sampler.gamma` or `sampler.n_local` taking precedence. Step sizes above
/// the admissible limit are an error unless `override_validation` is set.
pub fn build_hyper(cfg: &ExperimentConfig, specs: &[PotentialSpec], profile: &ClusterProfile, override_validation: bool) -> Result<HyperParams> {
    let s = &cfg.sampler;
    if s.rho.is_none() && s.gamma.is_none() && s.n_local.is_none() {
        return guideline_hyperparams(specs, s.c_gamma, profile);
    }
    let rho: Vec<f64> = specs
        .iter()
        .map(|sp| s.rho.unwrap_or(1.0 / (5.0 * sp.m_upper)))
        .collect();
    let gamma: Vec<f64> = specs
        .iter()
        .zip(&rho)
        .map(|(sp, r)| s.gamma.unwrap_or(s.c_gamma * r / (r * sp.m_upper + 1.0)))
        .collect();
    let n_local = match s.n_local {
        Some(n) => vec![n; specs.len()],
        None => allocate_local_iters(profile, guideline_n_avg(specs, &rho, &gamma) as f64),
    };
    let mut h = if override_validation {
        HyperParams::new_unchecked(specs.len(), rho, gamma, n_local)?
    } else {
        HyperParams::new(specs, rho, gamma, n_local)?
    };
    h.validated = validity_gate(specs, &h).passed;
    Ok(h)
}

fn run_config(cfg: &ExperimentConfig, override_validation: bool) -> RunConfig {
    RunConfig {
        thin: cfg.run.thin,
        override_validation,
        ..RunConfig::new(cfg.run.iters, cfg.run.burn_in, cfg.run.seed)
    }
}

/// Writes shard CSVs and `theta_gen.csv` into `out`.
pub fn cmd_generate(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let syn = generate_synthetic(
        cfg.model.kind,
        cfg.model.dim,
        cfg.model.n,
        cfg.cluster.workers,
        &cfg.like_cov(),
        cfg.model.data_seed,
    )?;
    write_shards(out, &syn)
}

/// Trace of the θ-covariance reached by DG-LMC with one local step, the
/// accuracy level the D-SGLD step is matched to. Exact for quadratic models,
/// estimated by a pilot run otherwise.
pub fn dsgld_target_trace(cfg: &ExperimentConfig, specs: &[PotentialSpec], profile: &ClusterProfile) -> Result<f64> {
    let base = build_hyper(cfg, specs, profile, true)?;
    let mut one = base.clone();
    one.n_local = vec![1; specs.len()];
    if specs.iter().all(|s| matches!(s.potential.as_ref(), Potential::Quadratic(_))) {
        let (law, _) = dglmc_stationary_gaussian(specs, &one)?;
        return Ok(law.cov.trace());
    }
    let pilot = RunConfig {
        override_validation: true,
        ..RunConfig::new(cfg.compare.pilot_iters, cfg.compare.pilot_iters / 10, cfg.run.seed)
    };
    let rep = run_dglmc(specs, &one, &pilot, profile)?;
    Ok(sample_cov(&rep.theta_samples).trace())
}

fn dsgld_options(cfg: &ExperimentConfig, specs: &[PotentialSpec], profile: &ClusterProfile, n_local: usize) -> Result<DsgldOptions> {
    let mut opts = DsgldOptions {
        step: cfg.sampler.dsgld_step.unwrap_or(0.0),
        batch_frac: cfg.sampler.batch_frac,
        n_local,
        scheme: cfg.sampler.dsgld_scheme,
    };
    if cfg.sampler.dsgld_step.is_none() {
        let target = dsgld_target_trace(cfg, specs, profile)?;
        let ts = theta_star(specs)?;
        let big_m = lambda_max(&FullPotential::new(specs).hessian(&ts));
        let pilot = RunConfig::new(cfg.compare.pilot_iters, cfg.compare.pilot_iters / 10, cfg.run.seed);
        opts.step = calibrate_dsgld_step(specs, &opts, &pilot, target, (1e-4 / big_m, 1.0 / big_m), 14)?;
        eprintln!("dsgld: calibrated step {:e} against covariance trace {:e}", opts.step, target);
    }
    Ok(opts)
}

fn mala_step(cfg: &ExperimentConfig, specs: &[PotentialSpec]) -> Result<f64> {
    match cfg.sampler.mala_step {
        Some(h) => Ok(h),
        None => {
            let (h, acc) = tune_mala_step(specs, cfg.sampler.mala_target, cfg.compare.pilot_iters.min(5000), cfg.run.seed)?;
            eprintln!("mala: tuned step {h:e} with pilot acceptance {acc:.3}");
            Ok(h)
        }
    }
}

/// One sampler run with what is needed to describe it.
#[derive(Debug, Clone)]
pub struct SamplerRun {
    pub kind: SamplerKind,
    pub report: RunReport,
    pub summary: ChainSummary,
    pub hyper: Option<HyperParams>,
    /// Step of the baseline samplers.
    pub step: Option<f64>,
    pub n_local: usize,
}

pub fn run_sampler(
    cfg: &ExperimentConfig,
    kind: SamplerKind,
    model: &LoadedModel,
    profile: &ClusterProfile,
    override_validation: bool,
) -> Result<SamplerRun> {
    let specs = &model.specs;
    let rc = run_config(cfg, override_validation);
    let hyper = build_hyper(cfg, specs, profile, override_validation)?;
    let mean_n = (hyper.n_local.iter().sum::<usize>() as f64 / hyper.n_local.len() as f64).round() as usize;
    let (report, step, hyper_used) = match kind {
        SamplerKind::Dglmc => (run_dglmc(specs, &hyper, &rc, profile)?, None, Some(hyper)),
        SamplerKind::Dsgld => {
            let opts = dsgld_options(cfg, specs, profile, mean_n.max(1))?;
            (run_dsgld(specs, &opts, &rc, profile)?, Some(opts.step), None)
        }
        SamplerKind::Mala => {
            let h = mala_step(cfg, specs)?;
            (run_mala(specs, h, &rc, profile)?, Some(h), None)
        }
    };
    let summary = moments_with_se(&report.theta_samples);
    let n_local = match kind {
        SamplerKind::Mala => 1,
        _ => mean_n.max(1),
    };
    Ok(SamplerRun {
        kind,
        report,
        summary,
        hyper: hyper_used,
        step,
        n_local,
    })
}

/// Runs the configured sampler and writes `theta_chain.csv`, `report.csv` and `wall.txt`.
pub fn cmd_run(cfg: &ExperimentConfig, out: &Path, override_validation: bool) -> Result<SamplerRun> {
    let started = Instant::now();
    let model = load_model(cfg)?;
    let profile = cluster_profile(cfg)?;
    let run = run_sampler(cfg, cfg.sampler.kind, &model, &profile, override_validation)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_chain(&out.join("theta_chain.csv"), &run.report.theta_samples, &run.report.kept_iters)?;

    let mut t = Table::new(&["key", "value"]);
    let mut kv = |k: String, v: String| t.push(vec![k, v]);
    kv("sampler".into(), run.kind.to_string());
    kv("model".into(), cfg.model.kind.to_string());
    kv("data_source".into(), model.data_source.clone());
    kv("workers".into(), model.specs.len().to_string());
    kv("dim".into(), model.specs[0].dim_in().to_string());
    kv("n_obs".into(), model.dataset.n_total.to_string());
    kv("iters".into(), cfg.run.iters.to_string());
    kv("burn_in".into(), cfg.run.burn_in.to_string());
    kv("thin".into(), cfg.run.thin.to_string());
    kv("seed".into(), cfg.run.seed.to_string());
    kv("kept".into(), run.report.theta_samples.nrows().to_string());
    kv("wall_model".into(), fmt_f64(run.report.wall_model));
    if let Some(a) = run.report.acceptance_rate {
        kv("acceptance_rate".into(), fmt_f64(a));
    }
    if let Some(h) = run.step {
        kv("step".into(), fmt_f64(h));
    }
    if let Some(h) = &run.hyper {
        kv("validated".into(), h.validated.to_string());
        kv("kappa_gamma".into(), fmt_f64(kappa_gamma(&model.specs, h)));
        for i in 0..h.n_workers() {
            kv(format!("rho_{}", i + 1), fmt_f64(h.rho[i]));
            kv(format!("gamma_{}", i + 1), fmt_f64(h.gamma[i]));
            kv(format!("n_local_{}", i + 1), h.n_local[i].to_string());
        }
    }
    let d = run.summary.mean.len();
    for k in 0..d {
        kv(format!("mean_{}", k + 1), fmt_f64(run.summary.mean[k]));
        kv(format!("se_{}", k + 1), fmt_f64(run.summary.se[k]));
        kv(format!("iat_{}", k + 1), fmt_f64(run.summary.iat[k]));
    }
    for j in 0..d {
        for k in j..d {
            kv(format!("cov_{}_{}", j + 1, k + 1), fmt_f64(run.summary.cov[(j, k)]));
        }
    }
    if let Some(ex) = &model.exact {
        for k in 0..d {
            kv(format!("exact_mean_{}", k + 1), fmt_f64(ex.mean[k]));
        }
        for j in 0..d {
            for k in j..d {
                kv(format!("exact_cov_{}_{}", j + 1, k + 1), fmt_f64(ex.cov[(j, k)]));
            }
        }
        if let Some(h) = &run.hyper {
            let aug = axda_marginal_law(&model.specs, &h.rho)?;
            for j in 0..d {
                for k in j..d {
                    kv(format!("augmented_cov_{}_{}", j + 1, k + 1), fmt_f64(aug.cov[(j, k)]));
                }
            }
        }
    }
    if let Some(tg) = &model.theta_gen {
        for k in 0..tg.len() {
            kv(format!("theta_gen_{}", k + 1), fmt_f64(tg[k]));
        }
    }
    t.write(&out.join("report.csv"))?;

    let mut wall = String::new();
    let _ = writeln!(wall, "wall_model = {}", fmt_f64(run.report.wall_model));
    let _ = writeln!(wall, "elapsed_seconds = {:.3}", started.elapsed().as_secs_f64());
    let p = out.join("wall.txt");
    fs::write(&p, wall).map_err(|e| Error::io(&p, e))?;
    Ok(run)
}

/// Homogeneous quadratic family used for the bound tables: `b` workers with
/// `A_i = I`, Hessian spectrum spread evenly over `[m, M]`, and worker `i`'s
/// minimizer at `shift · e_{i mod d}`.
pub fn bounds_model(d: usize, b: usize, m: f64, big_m: f64, shift: f64) -> Result<Vec<PotentialSpec>> {
    if !(m > 0.0 && big_m >= m) {
        return Err(Error::Invalid(format!("need 0 < m <= M, got m = {m}, M = {big_m}")));
    }
    let diag: Vec<f64> = (0..d)
        .map(|k| if d == 1 { m } else { m + (big_m - m) * k as f64 / (d - 1) as f64 })
        .collect();
    let h = DMatrix::from_diagonal(&DVector::from_vec(diag));
    (0..b)
        .map(|i| {
            let mut z = DVector::zeros(d);
            z[i % d] = shift;
            PotentialSpec::quadratic(h.clone(), &h * z, DMatrix::identity(d, d))
        })
        .collect()
}

fn eps_text(e: f64) -> String {
    if e.is_infinite() {
        "inf".into()
    } else {
        fmt_f64(e)
    }
}

/// Writes `bounds.csv`: one row per `(d, ε)` with the contraction quantities
/// and bias bound at the guideline hyperparameters and the ε-budget.
pub fn cmd_bounds(cfg: &ExperimentConfig, out: &Path) -> Result<Table> {
    let bc = &cfg.bounds;
    let mut t = Table::new(&[
        "d",
        "eps",
        "kappa_gamma",
        "r_term",
        "contraction_ok",
        "w2_bias_axda",
        "rho_eps",
        "gamma_eps",
        "n_local_eps",
        "n_eps",
        "gradient_evals",
        "reason",
    ]);
    for &d in &bc.dims {
        let specs = bounds_model(d, bc.workers, bc.m_lower, bc.m_upper, bc.shift)?;
        let profile = ClusterProfile::homogeneous(bc.workers);
        let hyper = guideline_hyperparams(&specs, cfg.sampler.c_gamma, &profile)?;
        let kappa = kappa_gamma(&specs, &hyper);
        let cc = check_contraction(&specs, &hyper, step_ratio(&hyper));
        let bias = axda_bias_bound(&specs, &hyper.rho)?;
        let (bias_text, reason) = match &bias {
            BiasBound::Applicable { bound, .. } => (fmt_f64(*bound), String::new()),
            BiasBound::NotApplicable { reason, .. } => ("NA".to_string(), reason.replace(',', ";")),
        };
        for &eps in &bc.eps {
            let b = mixing_budget(&specs, eps)?;
            t.push(vec![
                d.to_string(),
                eps_text(eps),
                fmt_f64(kappa),
                fmt_f64(cc.r_term),
                cc.contraction_ok.to_string(),
                bias_text.clone(),
                fmt_f64(b.rho_eps),
                fmt_f64(b.gamma_eps),
                b.n_local_eps.to_string(),
                b.n_eps.to_string(),
                fmt_f64(b.gradient_evals),
                reason.clone(),
            ]);
        }
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    t.write(&out.join("bounds.csv"))?;
    Ok(t)
}

/// Per-sampler row of `compare.csv`.
#[derive(Debug, Clone)]
pub struct CompareRow {
    pub sampler: SamplerKind,
    pub iat: DVector<f64>,
    pub hpd_rel_error: f64,
    pub eta_alpha: f64,
    pub wall_model: f64,
    /// Measured seconds spent in the sampler itself.
    pub elapsed_seconds: f64,
    pub step: Option<f64>,
    pub n_local: usize,
}

/// Runs each requested sampler plus a MALA reference for `η_α^true` and writes
/// `compare.csv` and `hpd_trace.csv`.
pub fn cmd_compare(cfg: &ExperimentConfig, out: &Path, override_validation: bool) -> Result<Vec<CompareRow>> {
    let model = load_model(cfg)?;
    let profile = cluster_profile(cfg)?;
    let full = FullPotential::new(&model.specs);
    let nlp = |t: &DVector<f64>| full.value(t);
    let alpha = cfg.compare.alpha;

    let h_ref = mala_step(cfg, &model.specs)?;
    let ref_cfg = RunConfig::new(
        cfg.compare.reference_iters,
        cfg.compare.reference_burn_in,
        cfg.run.seed.wrapping_add(0x9e37_79b9),
    );
    let reference = run_mala(&model.specs, h_ref, &ref_cfg, &profile)?;
    let eta_true = hpd_threshold(&reference.theta_samples, nlp, alpha)?;
    eprintln!(
        "reference: MALA step {h_ref:e}, acceptance {:.3}, eta_true {eta_true}",
        reference.acceptance_rate.unwrap_or(0.0)
    );

    let d = model.specs[0].dim_in();
    let mut header: Vec<String> = vec!["sampler".into()];
    header.extend((1..=d).map(|k| format!("iat_{k}")));
    header.extend(["iat_max", "hpd_rel_error", "eta_alpha", "eta_true", "wall_model", "elapsed_seconds", "step", "n_local"].map(String::from));
    let mut table = Table {
        header,
        rows: Vec::new(),
    };
    let mut trace = Table::new(&["sampler", "kept", "rel_error"]);
    let mut rows = Vec::new();
    for &kind in &cfg.compare.samplers {
        let started = Instant::now();
        let run = run_sampler(cfg, kind, &model, &profile, override_validation)?;
        let elapsed_seconds = started.elapsed().as_secs_f64();
        let samples = &run.report.theta_samples;
        let iat_v = iat(samples, WindowRule::InitialPositive);
        let vals = neg_log_post_values(samples, nlp);
        let hpd = hpd_error_from_values(&vals, alpha, eta_true)?;
        for (n, e) in hpd_trace_from_values(&vals, alpha, eta_true, 20) {
            trace.push(vec![kind.to_string(), n.to_string(), fmt_f64(e)]);
        }
        let mut r = vec![kind.to_string()];
        r.extend(iat_v.iter().map(|x| fmt_f64(*x)));
        r.push(fmt_f64(iat_v.max()));
        r.push(fmt_f64(hpd.rel_error));
        r.push(fmt_f64(hpd.eta_alpha));
        r.push(fmt_f64(eta_true));
        r.push(fmt_f64(run.report.wall_model));
        r.push(fmt_f64(elapsed_seconds));
        r.push(run.step.map_or_else(|| "NA".into(), fmt_f64));
        r.push(run.n_local.to_string());
        table.push(r);
        rows.push(CompareRow {
            sampler: kind,
            iat: iat_v,
            hpd_rel_error: hpd.rel_error,
            eta_alpha: hpd.eta_alpha,
            wall_model: run.report.wall_model,
            elapsed_seconds,
            step: run.step,
            n_local: run.n_local,
        });
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    table.write(&out.join("compare.csv"))?;
    trace.write(&out.join("hpd_trace.csv"))?;
    Ok(rows)
}
