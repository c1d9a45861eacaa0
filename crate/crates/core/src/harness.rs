//! Config-driven Monte-Carlo experiment runner.
//!
//! Each experiment replicates simulate-then-fit over a grid of horizon and
//! panel-size cells and reduces the replications to falsifiable summaries:
//! bias/RMSE tables for consistency, KS statistics and Wald coverage for
//! asymptotic normality, density gaps and set-decay rates for the posterior.
//! Replications run concurrently; per-replication seeds are a pure function
//! of `(master seed, cell index, replication index)`, so reports are
//! reproducible regardless of scheduling.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::bayes::{
    grid_normality_gap, grid_posterior, set_decay_rate, Loglik, PosteriorSample, Prior,
    SupportBox,
};
use crate::error::{Error, Result};
use crate::likelihood::{j_rate_set, suff_stats_discrete};
use crate::mle::{fisher_info, fit_mle_approx, fit_mle_mc, FitOptions, GObjective};
use crate::model::{make_window, ParamVector};
use crate::panel::{panel_suff_stats, pooled_fit_mle, PanelModel};
use crate::presets;
use crate::rng::{derive_seed, stream_rng, DOMAIN_INDIVIDUAL, DOMAIN_REPLICATION};
use crate::simulate::{simulate_pair, PathPair, TimeGrid};

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.959963984540054;

/// Estimator selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorMode {
    Approx,
    Mc,
}

/// Experiment configuration; the JSON config format mirrors these field
/// names verbatim and rejects unknown keys.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: String,
    pub theta0: Vec<f64>,
    #[serde(rename = "T_list")]
    pub t_list: Vec<f64>,
    #[serde(default = "default_n_list")]
    pub n_list: Vec<usize>,
    pub m: usize,
    pub n_replications: usize,
    #[serde(default = "default_n_latent")]
    pub n_latent: usize,
    #[serde(default = "default_estimator")]
    pub estimator: EstimatorMode,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Radii of the decay sets `{|theta - theta0| >= r}` checked by the
    /// posterior experiment.
    #[serde(default = "default_decay_radii")]
    pub decay_radii: Vec<f64>,
}

fn default_n_list() -> Vec<usize> {
    vec![1]
}

fn default_n_latent() -> usize {
    1024
}

fn default_estimator() -> EstimatorMode {
    EstimatorMode::Approx
}

fn default_decay_radii() -> Vec<f64> {
    vec![1.0]
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig = serde_json::from_str(text)
            .map_err(|e| Error::InvalidArgument(format!("config parse error: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        presets::find(&self.preset)?;
        if self.theta0.is_empty() || self.theta0.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("theta0 must be finite".into()));
        }
        if self.t_list.is_empty() || self.t_list.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::InvalidArgument("T_list must be positive".into()));
        }
        if self.n_list.is_empty() || self.n_list.contains(&0) {
            return Err(Error::InvalidArgument("n_list entries must be >= 1".into()));
        }
        if self.m < 2 || self.n_replications < 1 || self.n_latent < 2 {
            return Err(Error::InvalidArgument(
                "m >= 2, n_replications >= 1, n_latent >= 2 required".into(),
            ));
        }
        Ok(())
    }

    pub fn theta0_vector(&self) -> ParamVector {
        ParamVector::new(self.theta0.clone()).expect("validated theta0")
    }
}

/// One replication's record (rows of the per-cell CSV).
#[derive(Debug, Clone, serde::Serialize)]
pub struct RepRecord {
    pub rep: usize,
    pub theta_hat: Vec<f64>,
    pub converged: bool,
    pub clt: Vec<f64>,
    /// Diagonal of `Sigma_T` (inverse observed information), for Wald
    /// intervals.
    #[serde(skip)]
    pub sigma_diag: Vec<f64>,
}

/// Per-cell summary table entry.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CellReport {
    pub t: f64,
    pub n: usize,
    pub n_replications: usize,
    pub n_failures: usize,
    /// More than 5% of replications failed.
    pub degraded: bool,
    pub bias: Vec<f64>,
    pub rmse: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ks_stat: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ks_pvalue: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coverage_95: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sup_density_gap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decay_rates: Option<Vec<DecayEntry>>,
    #[serde(skip)]
    pub reps: Vec<RepRecord>,
}

/// One checked decay set.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct DecayEntry {
    pub radius: f64,
    pub empirical_rate: f64,
    pub target: f64,
}

/// Machine-readable experiment report.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ExperimentReport {
    pub artifact_version: String,
    pub rng_algorithm: String,
    pub experiment: String,
    pub config: ExperimentConfig,
    pub runtime_seconds: f64,
    pub cells: Vec<CellReport>,
}

/// One-sample Kolmogorov-Smirnov test result.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Survival function of the Kolmogorov distribution,
/// `Q(x) = 2 sum_{k>=1} (-1)^{k-1} exp(-2 k^2 x^2)`, truncated at 100 terms.
fn kolmogorov_sf(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * x * x).exp();
        sum += if k % 2 == 1 { term } else { -term };
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// One-sample KS test against a caller-supplied CDF, with the asymptotic
/// p-value `Q(sqrt(n) D)`.
pub fn ks_test(samples: &[f64], cdf: &dyn Fn(f64) -> f64) -> Result<KsResult> {
    if samples.len() < 8 {
        return Err(Error::InsufficientSample(format!(
            "KS test needs >= 8 samples, got {}",
            samples.len()
        )));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len() as f64;
    let mut d: f64 = 0.0;
    for (i, x) in sorted.iter().enumerate() {
        let f = cdf(*x);
        d = d.max(f - i as f64 / n);
        d = d.max((i + 1) as f64 / n - f);
    }
    Ok(KsResult {
        statistic: d,
        p_value: kolmogorov_sf(n.sqrt() * d),
    })
}

/// Simulate one replication's panel of paths.
fn simulate_cell_paths(
    panel: &PanelModel,
    theta0: &ParamVector,
    grid: &TimeGrid,
    rep_seed: u64,
) -> Result<Vec<PathPair>> {
    (0..panel.n)
        .map(|i| {
            let mut model = panel.base.clone();
            model.maps = panel.per_individual_maps[i].clone();
            simulate_pair(
                &model,
                theta0,
                grid,
                derive_seed(rep_seed, DOMAIN_INDIVIDUAL, i as u64),
            )
        })
        .collect()
}

/// Fit one replication and return its record.
fn fit_replication(
    config: &ExperimentConfig,
    panel: &PanelModel,
    grid: &TimeGrid,
    cell_idx: usize,
    rep: usize,
) -> Result<RepRecord> {
    let theta0 = config.theta0_vector();
    let rep_seed = derive_seed(
        config.seed,
        DOMAIN_REPLICATION,
        ((cell_idx as u64) << 32) | rep as u64,
    );
    let paths = simulate_cell_paths(panel, &theta0, grid, rep_seed)?;
    let opts = FitOptions::default();

    let fit = if panel.n == 1 {
        match config.estimator {
            EstimatorMode::Approx => {
                let rb = panel.base.ratio_bounds()?;
                let stats = suff_stats_discrete(&paths[0], &panel.base)?;
                let g = GObjective::from_stats(
                    &panel.per_individual_maps[0],
                    &theta0,
                    rb.k_y,
                    rb.k_x,
                    &stats,
                )?;
                fit_mle_approx(&g, &theta0, grid.window(), &theta0, &opts)?
            }
            EstimatorMode::Mc => {
                let mut model = panel.base.clone();
                model.maps = panel.per_individual_maps[0].clone();
                fit_mle_mc(
                    &paths[0].y,
                    &model,
                    grid,
                    config.n_latent,
                    derive_seed(rep_seed, DOMAIN_REPLICATION, u64::MAX),
                    &theta0,
                    Some(&theta0),
                    &opts,
                )?
            }
        }
    } else {
        let stats = panel_suff_stats(&paths, &panel.base)?;
        pooled_fit_mle(&stats, panel, &theta0, &theta0, &opts)?
    };

    let d = theta0.dim();
    let sigma_diag = fit
        .sigma_inv
        .clone()
        .try_inverse()
        .map(|s| (0..d).map(|k| s[(k, k)]).collect())
        .unwrap_or_else(|| vec![f64::NAN; d]);
    Ok(RepRecord {
        rep,
        theta_hat: fit.theta_hat.to_vec(),
        converged: fit.converged,
        clt: fit.clt_stat.clone().unwrap_or_default(),
        sigma_diag,
    })
}

fn summarize_cell(
    t: f64,
    n: usize,
    theta0: &[f64],
    outcomes: Vec<std::result::Result<RepRecord, String>>,
) -> CellReport {
    let d = theta0.len();
    let n_total = outcomes.len();
    let reps: Vec<RepRecord> = outcomes.into_iter().filter_map(|o| o.ok()).collect();
    let n_failures = n_total - reps.len();
    let mut bias = vec![0.0; d];
    let mut rmse = vec![0.0; d];
    if !reps.is_empty() {
        for r in &reps {
            for k in 0..d {
                let err = r.theta_hat[k] - theta0[k];
                bias[k] += err;
                rmse[k] += err * err;
            }
        }
        for k in 0..d {
            bias[k] /= reps.len() as f64;
            rmse[k] = (rmse[k] / reps.len() as f64).sqrt();
        }
    }
    CellReport {
        t,
        n,
        n_replications: n_total,
        n_failures,
        degraded: (n_failures as f64) > 0.05 * n_total as f64,
        bias,
        rmse,
        ks_stat: None,
        ks_pvalue: None,
        coverage_95: None,
        sup_density_gap: None,
        decay_rates: None,
        reps,
    }
}

fn run_cells(
    config: &ExperimentConfig,
    mut per_cell: impl FnMut(&mut CellReport, usize) -> Result<()>,
) -> Result<Vec<CellReport>> {
    config.validate()?;
    let preset = presets::find(&config.preset)?;
    let theta0 = config.theta0_vector();
    let mut cells = Vec::new();
    let mut cell_idx = 0usize;
    for &t in &config.t_list {
        for &n in &config.n_list {
            let window = make_window(t)?;
            let grid = TimeGrid::new(window, config.m)?;
            let panel = preset.build_panel(n)?;
            let outcomes: Vec<std::result::Result<RepRecord, String>> = (0
                ..config.n_replications)
                .into_par_iter()
                .map(|rep| {
                    fit_replication(config, &panel, &grid, cell_idx, rep)
                        .map_err(|e| e.to_string())
                })
                .collect();
            let mut cell = summarize_cell(t, n, theta0.as_slice(), outcomes);
            per_cell(&mut cell, cell_idx)?;
            cells.push(cell);
            cell_idx += 1;
        }
    }
    Ok(cells)
}

fn finish(
    experiment: &str,
    config: &ExperimentConfig,
    cells: Vec<CellReport>,
    started: Instant,
) -> ExperimentReport {
    ExperimentReport {
        artifact_version: env!("CARGO_PKG_VERSION").to_string(),
        rng_algorithm: crate::RNG_ALGORITHM.to_string(),
        experiment: experiment.to_string(),
        config: config.clone(),
        runtime_seconds: started.elapsed().as_secs_f64(),
        cells,
    }
}

/// Bias/RMSE of the estimator per cell; RMSE should shrink like the square
/// root of the horizon.
pub fn run_consistency(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let started = Instant::now();
    let cells = run_cells(config, |_, _| Ok(()))?;
    Ok(finish("consistency", config, cells, started))
}

fn normality_summaries(cell: &mut CellReport, config: &ExperimentConfig) -> Result<()> {
    let preset = presets::find(&config.preset)?;
    let theta0_vec = config.theta0_vector();
    let theta0 = config.theta0.clone();
    let panel = preset.build_panel(cell.n)?;
    let info = fisher_info(&theta0_vec, &panel.limit_maps, panel.k_y_bar)?;
    let d = theta0.len();
    let info_inv = info.matrix.clone().try_inverse().ok_or_else(|| {
        Error::AssumptionViolation(
            "Fisher information is singular at theta0; normality targets undefined".into(),
        )
    })?;

    // KS per coordinate against N(0, (I^{-1})_{kk}); report the worst case
    let converged: Vec<&RepRecord> = cell.reps.iter().filter(|r| r.converged).collect();
    if converged.len() >= 8 {
        let mut worst = KsResult {
            statistic: 0.0,
            p_value: 1.0,
        };
        for k in 0..d {
            let samples: Vec<f64> = converged.iter().map(|r| r.clt[k]).collect();
            let sd = info_inv[(k, k)].sqrt();
            let normal = Normal::new(0.0, sd).expect("positive sd");
            let ks = ks_test(&samples, &|x| normal.cdf(x))?;
            if ks.statistic > worst.statistic {
                worst = ks;
            }
        }
        cell.ks_stat = Some(worst.statistic);
        cell.ks_pvalue = Some(worst.p_value);

        // 95% Wald coverage: theta_hat_k +/- z sqrt((Sigma_T)_kk) covers
        // theta0_k, per replication, averaged over coordinates
        let mut covered = 0usize;
        let mut total = 0usize;
        for r in &converged {
            for k in 0..d {
                let half_width = Z_95 * r.sigma_diag[k].sqrt();
                if half_width.is_finite()
                    && (r.theta_hat[k] - theta0[k]).abs() <= half_width
                {
                    covered += 1;
                }
                total += 1;
            }
        }
        cell.coverage_95 = Some(covered as f64 / total as f64);
    }
    Ok(())
}

/// KS test of the standardized estimator against its normal limit plus Wald
/// coverage per cell.
pub fn run_normality(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let started = Instant::now();
    let mut cells = run_cells(config, |_, _| Ok(()))?;
    for cell in &mut cells {
        normality_summaries(cell, config)?;
    }
    Ok(finish("normality", config, cells, started))
}

/// Calibration variant: the CLT samples are drawn directly from the target
/// normal law instead of simulate-and-fit, exercising only the test
/// machinery. Under this null the p-values are uniform.
pub fn run_normality_null(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let started = Instant::now();
    config.validate()?;
    let preset = presets::find(&config.preset)?;
    let theta0 = config.theta0_vector();
    let d = theta0.dim();
    let mut cells = Vec::new();
    for (cell_idx, (&t, &n)) in config
        .t_list
        .iter()
        .flat_map(|t| config.n_list.iter().map(move |n| (t, n)))
        .enumerate()
    {
        let panel = preset.build_panel(n)?;
        let info = fisher_info(&theta0, &panel.limit_maps, panel.k_y_bar)?;
        let info_inv = info.matrix.clone().try_inverse().ok_or_else(|| {
            Error::AssumptionViolation("singular information at theta0".into())
        })?;
        let effective_len = n as f64 * make_window(t)?.len();
        let mut rng = stream_rng(config.seed, DOMAIN_REPLICATION, cell_idx as u64);
        let reps: Vec<RepRecord> = (0..config.n_replications)
            .map(|rep| {
                let clt: Vec<f64> = (0..d)
                    .map(|k| info_inv[(k, k)].sqrt() * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let theta_hat: Vec<f64> = clt
                    .iter()
                    .zip(theta0.as_slice())
                    .map(|(z, t0)| t0 + z / effective_len.sqrt())
                    .collect();
                let sigma_diag: Vec<f64> =
                    (0..d).map(|k| info_inv[(k, k)] / effective_len).collect();
                RepRecord {
                    rep,
                    theta_hat,
                    converged: true,
                    clt,
                    sigma_diag,
                }
            })
            .collect();
        let mut cell = summarize_cell(
            t,
            n,
            theta0.as_slice(),
            reps.into_iter().map(Ok).collect(),
        );
        normality_summaries(&mut cell, config)?;
        cells.push(cell);
    }
    Ok(finish("normality-null", config, cells, started))
}

/// Posterior diagnostics per cell: density gap of the standardized grid
/// posterior and decay rates of the configured sets, on one dataset per
/// cell (replication 0's seed).
pub fn run_posterior(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let started = Instant::now();
    config.validate()?;
    let preset = presets::find(&config.preset)?;
    let theta0 = config.theta0_vector();
    if theta0.dim() > 2 {
        return Err(Error::InvalidArgument(
            "posterior experiments use grid quadrature and need d <= 2".into(),
        ));
    }
    let mut cells = Vec::new();
    for (cell_idx, &t) in config.t_list.iter().enumerate() {
        let window = make_window(t)?;
        let grid = TimeGrid::new(window, config.m)?;
        let model = preset.build();
        let rb = *model.ratio_bounds()?;
        let rep_seed = derive_seed(
            config.seed,
            DOMAIN_REPLICATION,
            (cell_idx as u64) << 32,
        );
        let path = simulate_pair(&model, &theta0, &grid, rep_seed)?;
        let stats = suff_stats_discrete(&path, &model)?;
        let g = GObjective::from_stats(&model.maps, &theta0, rb.k_y, rb.k_x, &stats)?;
        let fit = fit_mle_approx(&g, &theta0, &window, &theta0, &FitOptions::default())?;
        let loglik = Loglik::Approx {
            objective: &g,
            window: &window,
        };

        // flat prior on the default compact box around theta0, grid-aligned
        // so the decay-set boundaries are grid nodes
        let half_width = 50.0;
        let support = SupportBox::new(
            theta0.as_slice().iter().map(|v| v - half_width).collect(),
            theta0.as_slice().iter().map(|v| v + half_width).collect(),
        )?;
        let prior = Prior::flat(support);

        let gap = if theta0.dim() == 1 {
            Some(grid_normality_gap(&prior, &loglik, &fit, 801)?)
        } else {
            None
        };

        let post = grid_posterior(&prior, &loglik, 201)?;
        let mut decay = Vec::new();
        for &radius in &config.decay_radii {
            let theta0_inner = theta0.clone();
            let in_set = move |p: &ParamVector| {
                p.as_slice()
                    .iter()
                    .zip(theta0_inner.as_slice())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
                    >= radius
            };
            let set_grid: Vec<ParamVector> = post
                .points
                .iter()
                .filter(|p| in_set(p))
                .cloned()
                .collect();
            let j = if set_grid.is_empty() {
                f64::INFINITY
            } else {
                j_rate_set(&set_grid, &theta0, &post.points, &model.maps, rb.k_y, rb.k_x)?
            };
            let sd = set_decay_rate(&in_set, &PosteriorSample::Grid(&post), &window, j)?;
            decay.push(DecayEntry {
                radius,
                empirical_rate: sd.empirical_rate,
                target: sd.target,
            });
        }

        let sigma_diag = fit
            .sigma_inv
            .clone()
            .try_inverse()
            .map(|s| vec![s[(0, 0)]])
            .unwrap_or_else(|| vec![f64::NAN]);
        let rep = RepRecord {
            rep: 0,
            theta_hat: fit.theta_hat.to_vec(),
            converged: fit.converged,
            clt: fit.clt_stat.clone().unwrap_or_default(),
            sigma_diag,
        };
        let mut cell = summarize_cell(t, 1, theta0.as_slice(), vec![Ok(rep)]);
        cell.sup_density_gap = gap;
        cell.decay_rates = Some(decay);
        cells.push(cell);
    }
    Ok(finish("posterior", config, cells, started))
}

fn format_t(t: f64) -> String {
    if t.fract() == 0.0 {
        format!("{}", t as i64)
    } else {
        format!("{t}")
    }
}

/// Write `report.json` plus per-cell CSVs `cells/T<T>_n<n>.csv` under `dir`.
pub fn write_report(report: &ExperimentReport, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("cells"))?;
    let report_path = dir.join("report.json");
    fs::write(&report_path, serde_json::to_string_pretty(report)?)?;
    let d = report.config.theta0.len();
    for cell in &report.cells {
        let path = dir
            .join("cells")
            .join(format!("T{}_n{}.csv", format_t(cell.t), cell.n));
        let mut out = Vec::new();
        write!(out, "rep")?;
        for k in 1..=d {
            write!(out, ",theta_hat_{k}")?;
        }
        write!(out, ",converged")?;
        for k in 1..=d {
            write!(out, ",clt_{k}")?;
        }
        writeln!(out)?;
        for r in &cell.reps {
            write!(out, "{}", r.rep)?;
            for v in &r.theta_hat {
                write!(out, ",{:.16e}", v)?;
            }
            write!(out, ",{}", u8::from(r.converged))?;
            for v in &r.clt {
                write!(out, ",{:.16e}", v)?;
            }
            writeln!(out)?;
        }
        fs::write(path, out)?;
    }
    Ok(report_path)
}
