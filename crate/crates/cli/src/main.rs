//! Command-line front end for the state space SDE laboratory.
//!
//! Every subcommand reads the shared JSON config format (see the README),
//! writes machine-readable artifacts under `--out`, and prints a short
//! human-readable summary to standard output. Exit codes: 0 success,
//! 2 configuration error, 3 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ssde_core::bayes::{
    grid_normality_gap, mh_sample, posterior_normality_diag, Loglik, Prior, SupportBox,
};
use ssde_core::error::Error as CoreError;
use ssde_core::harness::{
    run_consistency, run_normality, run_posterior, write_report, EstimatorMode,
    ExperimentConfig,
};
use ssde_core::likelihood::suff_stats_discrete;
use ssde_core::mle::{fit_mle_approx, fit_mle_mc, FitOptions, GObjective};
use ssde_core::model::{make_window, ParamVector};
use ssde_core::panel::{panel_suff_stats, pooled_fit_mle};
use ssde_core::presets;
use ssde_core::rng::{derive_seed, DOMAIN_INDIVIDUAL};
use ssde_core::simulate::{simulate_pair, TimeGrid};
use ssde_core::stability::check_h8;

const VERSION_WITH_RNG: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    " (rng: chacha12/splitmix64-substreams-v1)"
);

#[derive(Parser)]
#[command(
    name = "ssde",
    version = VERSION_WITH_RNG,
    about = "Simulation and asymptotic-inference laboratory for state space SDEs"
)]
struct Cli {
    /// JSON experiment config (required by every subcommand except
    /// `presets`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Override the config's estimator/likelihood mode.
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,

    /// Cap the worker pool (default: hardware parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Approx,
    Mc,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one path pair and write it as CSV.
    Simulate,
    /// Compute the sufficient statistics of a simulated pair (JSON).
    Stats,
    /// Maximum-likelihood fit on a simulated dataset (JSON).
    FitMle,
    /// Posterior chain plus normality diagnostics on a simulated dataset.
    FitBayes {
        /// Number of Metropolis draws.
        #[arg(long, default_value_t = 20_000)]
        draws: usize,
    },
    /// Pooled panel fit (n = first entry of n_list).
    PanelFit,
    /// Check the preset's Lyapunov certificate on the default grid.
    StabilityCheck,
    /// Run a Monte-Carlo verification experiment.
    Verify {
        #[command(subcommand)]
        experiment: VerifyCommand,
    },
    /// Preset registry commands.
    Presets {
        #[command(subcommand)]
        action: PresetsCommand,
    },
}

#[derive(Subcommand)]
enum VerifyCommand {
    /// Bias/RMSE against the horizon.
    Consistency,
    /// KS and Wald coverage of the standardized estimator.
    Normality,
    /// Posterior density gap and set-decay rates.
    Posterior,
}

#[derive(Subcommand)]
enum PresetsCommand {
    /// List registered presets.
    List,
}

enum CliError {
    Config(String),
    Numeric(String),
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::InvalidArgument(_) | CoreError::Precondition(_) | CoreError::Io(_) => {
                CliError::Config(e.to_string())
            }
            other => CliError::Numeric(other.to_string()),
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config <file> is required".into()))?;
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut config = ExperimentConfig::from_json(&text).map_err(CliError::from)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }
    if let Some(mode) = cli.mode {
        config.estimator = match mode {
            ModeArg::Approx => EstimatorMode::Approx,
            ModeArg::Mc => EstimatorMode::Mc,
        };
    }
    Ok(config)
}

fn ensure_out(config: &ExperimentConfig) -> Result<PathBuf, CliError> {
    fs::create_dir_all(&config.output_dir)
        .map_err(|e| CliError::Config(format!("cannot create output dir: {e}")))?;
    Ok(config.output_dir.clone())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Config(format!("serialization failed: {e}")))?;
    fs::write(path, text).map_err(|e| CliError::Config(format!("write failed: {e}")))?;
    Ok(())
}

/// Shared first stage of the single-series commands.
struct Dataset {
    config: ExperimentConfig,
    model: ssde_core::model::StateSpaceModel,
    grid: TimeGrid,
    theta0: ParamVector,
    path: ssde_core::simulate::PathPair,
}

fn simulate_dataset(cli: &Cli) -> Result<Dataset, CliError> {
    let config = load_config(cli)?;
    let preset = presets::find(&config.preset)?;
    let theta0 = config.theta0_vector();
    let window = make_window(config.t_list[0])?;
    let grid = TimeGrid::new(window, config.m)?;
    let model = preset.build();
    let path = simulate_pair(&model, &theta0, &grid, config.seed)?;
    Ok(Dataset {
        config,
        model,
        grid,
        theta0,
        path,
    })
}

fn cmd_simulate(cli: &Cli) -> Result<(), CliError> {
    let ds = simulate_dataset(cli)?;
    let out = ensure_out(&ds.config)?;
    let csv_path = out.join("path.csv");
    let mut buf = Vec::new();
    ds.path.write_csv(&mut buf)?;
    fs::write(&csv_path, buf).map_err(|e| CliError::Config(e.to_string()))?;
    println!(
        "simulated preset '{}' over [{:.4}, {:.4}] with m = {} -> {}",
        ds.config.preset,
        ds.grid.window().a(),
        ds.grid.window().b(),
        ds.config.m,
        csv_path.display()
    );
    Ok(())
}

fn cmd_stats(cli: &Cli) -> Result<(), CliError> {
    let ds = simulate_dataset(cli)?;
    let out = ensure_out(&ds.config)?;
    let stats = suff_stats_discrete(&ds.path, &ds.model)?;
    let path = out.join("stats.json");
    write_json(&path, &stats.to_json())?;
    println!(
        "u_yx = {:.6}, v_yx = {:.6}, u_x = {:.6}, v_x = {:.6} -> {}",
        stats.u_y_given_x,
        stats.v_y_given_x,
        stats.u_x,
        stats.v_x,
        path.display()
    );
    Ok(())
}

fn cmd_fit_mle(cli: &Cli) -> Result<(), CliError> {
    let ds = simulate_dataset(cli)?;
    let out = ensure_out(&ds.config)?;
    let rb = *ds.model.ratio_bounds()?;
    let fit = match ds.config.estimator {
        EstimatorMode::Approx => {
            let stats = suff_stats_discrete(&ds.path, &ds.model)?;
            let g = GObjective::from_stats(&ds.model.maps, &ds.theta0, rb.k_y, rb.k_x, &stats)?;
            fit_mle_approx(
                &g,
                &ds.theta0,
                ds.grid.window(),
                &ds.theta0,
                &FitOptions::default(),
            )?
        }
        EstimatorMode::Mc => fit_mle_mc(
            &ds.path.y,
            &ds.model,
            &ds.grid,
            ds.config.n_latent,
            derive_seed(ds.config.seed, DOMAIN_INDIVIDUAL, u64::MAX),
            &ds.theta0,
            Some(&ds.theta0),
            &FitOptions::default(),
        )?,
    };
    let path = out.join("fit.json");
    write_json(&path, &fit.to_json())?;
    println!(
        "theta_hat = {}, converged = {}, iterations = {} -> {}",
        fit.theta_hat,
        fit.converged,
        fit.iterations,
        path.display()
    );
    Ok(())
}

fn cmd_fit_bayes(cli: &Cli, draws: usize) -> Result<(), CliError> {
    let ds = simulate_dataset(cli)?;
    let out = ensure_out(&ds.config)?;
    let rb = *ds.model.ratio_bounds()?;
    let stats = suff_stats_discrete(&ds.path, &ds.model)?;
    let g = GObjective::from_stats(&ds.model.maps, &ds.theta0, rb.k_y, rb.k_x, &stats)?;
    let window = *ds.grid.window();
    let fit = fit_mle_approx(&g, &ds.theta0, &window, &ds.theta0, &FitOptions::default())?;

    let d = ds.theta0.dim();
    let half_width = 50.0;
    let support = SupportBox::new(
        ds.theta0.as_slice().iter().map(|v| v - half_width).collect(),
        ds.theta0.as_slice().iter().map(|v| v + half_width).collect(),
    )?;
    let prior = Prior::flat(support);

    // proposal scale 2.4/sqrt(d) times the Wald standard deviations
    let sigma = fit
        .sigma_inv
        .clone()
        .try_inverse()
        .ok_or_else(|| CliError::Numeric("observed information not invertible".into()))?;
    let proposal: Vec<f64> = (0..d)
        .map(|k| 2.4 / (d as f64).sqrt() * sigma[(k, k)].sqrt())
        .collect();

    let chain = match ds.config.estimator {
        EstimatorMode::Approx => {
            let loglik = Loglik::Approx {
                objective: &g,
                window: &window,
            };
            let target = |t: &ParamVector| {
                ssde_core::bayes::log_posterior_unnorm(t, &prior, &loglik)
            };
            mh_sample(&target, &ds.theta0, draws, &proposal, ds.config.seed)?
        }
        EstimatorMode::Mc => {
            let loglik = Loglik::Mc {
                y: &ds.path.y,
                model: &ds.model,
                grid: &ds.grid,
                n_latent: ds.config.n_latent,
                seed: derive_seed(ds.config.seed, DOMAIN_INDIVIDUAL, u64::MAX),
            };
            let target = |t: &ParamVector| {
                ssde_core::bayes::log_posterior_unnorm(t, &prior, &loglik)
            };
            mh_sample(&target, &ds.theta0, draws, &proposal, ds.config.seed)?
        }
    };

    let chain_path = out.join("chain.csv");
    let mut buf = Vec::new();
    chain.write_csv(&mut buf)?;
    fs::write(&chain_path, buf).map_err(|e| CliError::Config(e.to_string()))?;

    let diag = posterior_normality_diag(&chain, &fit)?;
    let mut diag_json =
        serde_json::to_value(&diag).map_err(|e| CliError::Config(e.to_string()))?;
    if d == 1 {
        let loglik = Loglik::Approx {
            objective: &g,
            window: &window,
        };
        let gap = grid_normality_gap(&prior, &loglik, &fit, 801)?;
        diag_json["grid_density_gap"] = serde_json::json!(gap);
    }
    diag_json["acceptance_rate"] = serde_json::json!(chain.acceptance_rate);
    let diag_path = out.join("diagnostics.json");
    write_json(&diag_path, &diag_json)?;
    println!(
        "chain of {draws} draws (acceptance {:.3}) -> {}; ks_distance = {:.4} -> {}",
        chain.acceptance_rate,
        chain_path.display(),
        diag.ks_distance,
        diag_path.display()
    );
    Ok(())
}

fn cmd_panel_fit(cli: &Cli) -> Result<(), CliError> {
    let config = load_config(cli)?;
    let out = ensure_out(&config)?;
    let preset = presets::find(&config.preset)?;
    let theta0 = config.theta0_vector();
    let n = config.n_list[0];
    let panel = preset.build_panel(n)?;
    let window = make_window(config.t_list[0])?;
    let grid = TimeGrid::new(window, config.m)?;
    let paths: Result<Vec<_>, _> = (0..n)
        .map(|i| {
            let mut model = panel.base.clone();
            model.maps = panel.per_individual_maps[i].clone();
            simulate_pair(
                &model,
                &theta0,
                &grid,
                derive_seed(config.seed, DOMAIN_INDIVIDUAL, i as u64),
            )
        })
        .collect();
    let paths = paths?;
    let stats = panel_suff_stats(&paths, &panel.base)?;
    let fit = pooled_fit_mle(&stats, &panel, &theta0, &theta0, &FitOptions::default())?;

    let report = serde_json::json!({
        "n": n,
        "per_individual_stats": stats.iter().map(|s| s.to_json()).collect::<Vec<_>>(),
        "pooled_fit": fit.to_json(),
    });
    let path = out.join("panel.json");
    write_json(&path, &report)?;
    println!(
        "pooled theta_hat = {} over n = {n} individuals -> {}",
        fit.theta_hat,
        path.display()
    );
    Ok(())
}

fn cmd_stability_check(cli: &Cli) -> Result<(), CliError> {
    let config = load_config(cli)?;
    let out = ensure_out(&config)?;
    let preset = presets::find(&config.preset)?;
    let spec = preset.lyapunov().ok_or_else(|| {
        CliError::Config(format!(
            "preset '{}' has no documented Lyapunov certificate",
            config.preset
        ))
    })?;
    let model = preset.build();
    let theta0 = config.theta0_vector();
    let report = check_h8(&spec, &model, &theta0, (-10.0, 10.0), (0.0, 100.0), 201)?;
    let path = out.join("stability.json");
    write_json(&path, &report)?;
    println!(
        "lower_bound_ok = {}, generator_ok = {}, violations = {} -> {}",
        report.lower_bound_ok,
        report.generator_ok,
        report.violations.len(),
        path.display()
    );
    Ok(())
}

fn cmd_verify(cli: &Cli, experiment: &VerifyCommand) -> Result<(), CliError> {
    let config = load_config(cli)?;
    let out = ensure_out(&config)?;
    let report = match experiment {
        VerifyCommand::Consistency => run_consistency(&config)?,
        VerifyCommand::Normality => run_normality(&config)?,
        VerifyCommand::Posterior => run_posterior(&config)?,
    };
    let path = write_report(&report, &out)?;
    for cell in &report.cells {
        let mut line = format!(
            "T = {:>8.1}, n = {:>3}: bias = {:+.5}, rmse = {:.5}",
            cell.t, cell.n, cell.bias[0], cell.rmse[0]
        );
        if let Some(p) = cell.ks_pvalue {
            line.push_str(&format!(", ks_p = {p:.4}"));
        }
        if let Some(c) = cell.coverage_95 {
            line.push_str(&format!(", coverage = {c:.3}"));
        }
        if let Some(g) = cell.sup_density_gap {
            line.push_str(&format!(", density_gap = {g:.4}"));
        }
        if let Some(decays) = &cell.decay_rates {
            for d in decays {
                line.push_str(&format!(
                    ", decay(r={}) = {:.3} vs {:.3}",
                    d.radius, d.empirical_rate, d.target
                ));
            }
        }
        if cell.degraded {
            line.push_str(&format!(" [degraded: {} failures]", cell.n_failures));
        }
        println!("{line}");
    }
    println!("report -> {}", path.display());
    Ok(())
}

fn cmd_presets_list() {
    for preset in presets::registry() {
        let flag = if preset.demo_only { " [demo-only]" } else { "" };
        println!("{}{}\n    {}", preset.name, flag, preset.description);
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Simulate => cmd_simulate(cli),
        Command::Stats => cmd_stats(cli),
        Command::FitMle => cmd_fit_mle(cli),
        Command::FitBayes { draws } => cmd_fit_bayes(cli, *draws),
        Command::PanelFit => cmd_panel_fit(cli),
        Command::StabilityCheck => cmd_stability_check(cli),
        Command::Verify { experiment } => cmd_verify(cli, experiment),
        Command::Presets {
            action: PresetsCommand::List,
        } => {
            cmd_presets_list();
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Numeric(msg)) => {
            eprintln!("numeric failure: {msg}");
            ExitCode::from(3)
        }
    }
}
