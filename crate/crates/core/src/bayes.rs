//! Posterior computation and asymptotic-normality diagnostics.
//!
//! Posteriors over theta combine a user prior with either the approximated
//! log-likelihood `(b_T - a_T) g(theta)` or the Monte-Carlo marginal
//! log-likelihood. For d <= 2 small-probability quantities (posterior set
//! probabilities, density gaps) are computed by grid quadrature; chains are
//! for higher dimensions and for the chain-based diagnostics.
//!
//! The normality diagnostics work on the standardized coordinate
//! `Psi = Sigma_T^{-1/2} (theta - theta_hat)`, which should approach a
//! standard normal as the horizon grows.

use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::likelihood::{log_sum_exp, marginal_loglik_mc};
use crate::mle::{FitResult, GObjective};
use crate::model::{ObservationWindow, ParamVector, StateSpaceModel};
use crate::rng::{stream_rng, DOMAIN_MCMC};
use crate::simulate::TimeGrid;

/// Fraction of a chain discarded as burn-in by all diagnostics.
pub const BURN_IN_FRACTION: f64 = 0.2;

/// Per-coordinate support box of a prior.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl SupportBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::InvalidArgument("support box shape mismatch".into()));
        }
        if lo.iter().zip(&hi).any(|(l, h)| !(l < h)) {
            return Err(Error::InvalidArgument(
                "support box needs lo < hi per coordinate".into(),
            ));
        }
        Ok(SupportBox { lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta
            .iter()
            .enumerate()
            .all(|(k, v)| *v >= self.lo[k] && *v <= self.hi[k])
    }
}

type LogDensity = std::sync::Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Prior over theta: a log-density on a compact support box.
#[derive(Clone)]
pub struct Prior {
    log_density: LogDensity,
    pub support: SupportBox,
}

impl std::fmt::Debug for Prior {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Prior").field("support", &self.support).finish()
    }
}

impl Prior {
    pub fn new(
        log_density: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        support: SupportBox,
    ) -> Self {
        Prior {
            log_density: std::sync::Arc::new(log_density),
            support,
        }
    }

    /// Flat (improper up to normalization) prior on the box.
    pub fn flat(support: SupportBox) -> Self {
        Self::new(|_| 0.0, support)
    }

    /// Log prior density; -inf outside the support.
    pub fn log_density(&self, theta: &[f64]) -> f64 {
        if self.support.contains(theta) {
            (self.log_density)(theta)
        } else {
            f64::NEG_INFINITY
        }
    }

    /// Spot-check integrability by log-sum-exp quadrature on a grid
    /// (d <= 2 only).
    pub fn spot_check_integrable(&self, points_per_axis: usize) -> Result<f64> {
        let grid = tensor_grid(&self.support, points_per_axis)?;
        let cell = grid.cell_log_volume;
        let logs: Vec<f64> = grid
            .points
            .iter()
            .map(|p| self.log_density(p.as_slice()))
            .collect();
        let total = log_sum_exp(&logs) + cell;
        if !total.is_finite() {
            return Err(Error::NumericDomain {
                context: "prior".into(),
                detail: "grid quadrature of the prior diverged".into(),
            });
        }
        Ok(total)
    }
}

/// Likelihood handle used by the posterior.
pub enum Loglik<'a> {
    /// `(b_T - a_T) g(theta)` from the approximated objective.
    Approx {
        objective: &'a GObjective,
        window: &'a ObservationWindow,
    },
    /// Monte-Carlo marginal log-likelihood with a fixed latent seed (common
    /// random numbers across theta evaluations).
    Mc {
        y: &'a [f64],
        model: &'a StateSpaceModel,
        grid: &'a TimeGrid,
        n_latent: usize,
        seed: u64,
    },
}

impl Loglik<'_> {
    pub fn eval(&self, theta: &ParamVector) -> Result<f64> {
        match self {
            Loglik::Approx { objective, window } => {
                Ok(window.len() * objective.value(theta)?)
            }
            Loglik::Mc {
                y,
                model,
                grid,
                n_latent,
                seed,
            } => Ok(marginal_loglik_mc(theta, y, model, grid, *n_latent, *seed)?.estimate),
        }
    }
}

/// Unnormalized log posterior; -inf outside the prior support.
pub fn log_posterior_unnorm(
    theta: &ParamVector,
    prior: &Prior,
    loglik: &Loglik<'_>,
) -> Result<f64> {
    let lp = prior.log_density(theta.as_slice());
    if lp == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(lp + loglik.eval(theta)?)
}

/// A recorded Metropolis chain.
#[derive(Debug, Clone)]
pub struct Chain {
    pub draws: Vec<Vec<f64>>,
    pub log_posts: Vec<f64>,
    pub accepted: Vec<bool>,
    pub acceptance_rate: f64,
    pub seed: u64,
}

impl Chain {
    pub fn dim(&self) -> usize {
        self.draws.first().map(|d| d.len()).unwrap_or(0)
    }

    /// Draws after burn-in removal.
    pub fn post_burn_in(&self) -> &[Vec<f64>] {
        let start = (self.draws.len() as f64 * BURN_IN_FRACTION).floor() as usize;
        &self.draws[start.min(self.draws.len())..]
    }

    /// CSV export: `draw_index,theta_1..theta_d,log_post,accepted`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let d = self.dim();
        write!(out, "draw_index")?;
        for k in 1..=d {
            write!(out, ",theta_{k}")?;
        }
        writeln!(out, ",log_post,accepted")?;
        for (i, draw) in self.draws.iter().enumerate() {
            write!(out, "{i}")?;
            for v in draw {
                write!(out, ",{:.16e}", v)?;
            }
            writeln!(out, ",{:.16e},{}", self.log_posts[i], u8::from(self.accepted[i]))?;
        }
        Ok(())
    }
}

/// Random-walk Metropolis with independent Gaussian proposals per
/// coordinate. Deterministic given the seed.
pub fn mh_sample(
    target: &dyn Fn(&ParamVector) -> Result<f64>,
    theta_init: &ParamVector,
    n_draws: usize,
    proposal_scale: &[f64],
    seed: u64,
) -> Result<Chain> {
    if n_draws < 1 {
        return Err(Error::InvalidArgument("need n_draws >= 1".into()));
    }
    if proposal_scale.len() != theta_init.dim() {
        return Err(Error::InvalidArgument(
            "proposal scale dimension mismatch".into(),
        ));
    }
    let mut current = theta_init.clone();
    let mut current_lp = target(&current)?;
    if current_lp == f64::NEG_INFINITY || !current_lp.is_finite() {
        return Err(Error::InvalidStart(format!(
            "target is not finite at the initial point {theta_init}"
        )));
    }

    let mut rng = stream_rng(seed, DOMAIN_MCMC, 0);
    let mut draws = Vec::with_capacity(n_draws);
    let mut log_posts = Vec::with_capacity(n_draws);
    let mut accepted = Vec::with_capacity(n_draws);
    let mut n_accept = 0usize;

    for _ in 0..n_draws {
        let proposal: Vec<f64> = current
            .as_slice()
            .iter()
            .zip(proposal_scale)
            .map(|(c, s)| c + s * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let proposal = ParamVector::new(proposal)?;
        let prop_lp = target(&proposal)?;
        let log_u: f64 = rng.gen::<f64>().ln();
        let accept = prop_lp - current_lp > log_u;
        if accept {
            current = proposal;
            current_lp = prop_lp;
            n_accept += 1;
        }
        draws.push(current.to_vec());
        log_posts.push(current_lp);
        accepted.push(accept);
    }

    Ok(Chain {
        draws,
        log_posts,
        accepted,
        acceptance_rate: n_accept as f64 / n_draws as f64,
        seed,
    })
}

/// Matrix square root and inverse square root of an SPD matrix via the
/// symmetric eigendecomposition.
fn spd_sqrt_pair(mat: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let eig = mat.clone().symmetric_eigen();
    if eig.eigenvalues.iter().any(|l| *l <= 0.0) {
        return Err(Error::NumericDomain {
            context: "spd_sqrt".into(),
            detail: "matrix is not positive definite".into(),
        });
    }
    let q = &eig.eigenvectors;
    let sqrt_d = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    let inv_sqrt_d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
    Ok((q * sqrt_d * q.transpose(), q * inv_sqrt_d * q.transpose()))
}

/// Transform draws to `Psi = Sigma_T^{-1/2} (theta - theta_hat)`; the
/// forward map uses the square root of the observed information.
pub fn psi_transform(chain_draws: &[Vec<f64>], fit: &FitResult) -> Result<Vec<Vec<f64>>> {
    let (info_sqrt, _) = spd_sqrt_pair(&fit.sigma_inv)?;
    let d = fit.theta_hat.dim();
    Ok(chain_draws
        .iter()
        .map(|draw| {
            let centered =
                nalgebra::DVector::from_fn(d, |k, _| draw[k] - fit.theta_hat[k]);
            let psi = &info_sqrt * centered;
            psi.iter().copied().collect()
        })
        .collect())
}

/// Inverse of [`psi_transform`].
pub fn psi_inverse(psi_draws: &[Vec<f64>], fit: &FitResult) -> Result<Vec<Vec<f64>>> {
    let (_, info_inv_sqrt) = spd_sqrt_pair(&fit.sigma_inv)?;
    let d = fit.theta_hat.dim();
    Ok(psi_draws
        .iter()
        .map(|psi| {
            let v = nalgebra::DVector::from_fn(d, |k, _| psi[k]);
            let theta = &info_inv_sqrt * v;
            (0..d).map(|k| theta[k] + fit.theta_hat[k]).collect()
        })
        .collect())
}

/// One-sample KS distance against a scalar CDF.
pub fn ks_distance(samples: &mut [f64], cdf: &dyn Fn(f64) -> f64) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = samples.len() as f64;
    let mut d: f64 = 0.0;
    for (i, x) in samples.iter().enumerate() {
        let f = cdf(*x);
        d = d.max(f - i as f64 / n);
        d = d.max((i + 1) as f64 / n - f);
    }
    d
}

/// Chain-based normality diagnostic.
#[derive(Debug, Clone, serde::Serialize)]
pub struct NormalityDiag {
    /// Max over coordinates of the KS distance of Psi draws to N(0,1).
    pub ks_distance: f64,
    /// Histogram-vs-density sup gap (first coordinate, 40 bins on [-4,4]).
    pub sup_density_gap: f64,
}

/// Histogram bins used by the density-gap statistic.
pub const DENSITY_GAP_BINS: usize = 40;
/// Range of the density-gap histogram.
pub const DENSITY_GAP_RANGE: (f64, f64) = (-4.0, 4.0);

/// KS and density-gap diagnostics of a chain against the normal limit.
pub fn posterior_normality_diag(chain: &Chain, fit: &FitResult) -> Result<NormalityDiag> {
    if !fit.converged {
        return Err(Error::Precondition(
            "normality diagnostic needs a converged fit".into(),
        ));
    }
    let kept = chain.post_burn_in();
    if kept.len() < 100 {
        return Err(Error::InsufficientSample(format!(
            "need >= 100 post burn-in draws, have {}",
            kept.len()
        )));
    }
    let psi = psi_transform(kept, fit)?;
    let d = fit.theta_hat.dim();
    let std_normal = Normal::standard();
    let cdf = |x: f64| std_normal.cdf(x);

    let mut ks_max: f64 = 0.0;
    for k in 0..d {
        let mut coord: Vec<f64> = psi.iter().map(|p| p[k]).collect();
        ks_max = ks_max.max(ks_distance(&mut coord, &cdf));
    }

    // fixed-bin histogram density of the first coordinate vs the standard
    // normal density
    let (lo, hi) = DENSITY_GAP_RANGE;
    let width = (hi - lo) / DENSITY_GAP_BINS as f64;
    let mut counts = [0usize; DENSITY_GAP_BINS];
    for p in &psi {
        let v = p[0];
        if v >= lo && v < hi {
            counts[((v - lo) / width) as usize] += 1;
        }
    }
    let n = psi.len() as f64;
    let mut gap: f64 = 0.0;
    for (b, count) in counts.iter().enumerate() {
        let center = lo + (b as f64 + 0.5) * width;
        let hist_density = *count as f64 / (n * width);
        let target = (-0.5 * center * center).exp() / (2.0 * std::f64::consts::PI).sqrt();
        gap = gap.max((hist_density - target).abs());
    }

    Ok(NormalityDiag {
        ks_distance: ks_max,
        sup_density_gap: gap,
    })
}

/// Tensor-product grid over a box (d <= 2).
#[derive(Debug, Clone)]
pub struct TensorGrid {
    pub points: Vec<ParamVector>,
    /// log of the quadrature cell volume.
    pub cell_log_volume: f64,
}

pub fn tensor_grid(support: &SupportBox, points_per_axis: usize) -> Result<TensorGrid> {
    let d = support.dim();
    if d > 2 {
        return Err(Error::InvalidArgument(
            "grid quadrature is limited to d <= 2".into(),
        ));
    }
    if points_per_axis < 2 {
        return Err(Error::InvalidArgument("need >= 2 points per axis".into()));
    }
    let axis = |k: usize| -> Vec<f64> {
        (0..points_per_axis)
            .map(|i| {
                support.lo[k]
                    + (support.hi[k] - support.lo[k]) * i as f64 / (points_per_axis - 1) as f64
            })
            .collect()
    };
    let mut points = Vec::new();
    match d {
        1 => {
            for v in axis(0) {
                points.push(ParamVector::new(vec![v])?);
            }
        }
        _ => {
            for v0 in axis(0) {
                for v1 in axis(1) {
                    points.push(ParamVector::new(vec![v0, v1])?);
                }
            }
        }
    }
    let mut cell_log_volume = 0.0;
    for k in 0..d {
        cell_log_volume +=
            ((support.hi[k] - support.lo[k]) / (points_per_axis - 1) as f64).ln();
    }
    Ok(TensorGrid {
        points,
        cell_log_volume,
    })
}

/// Grid-quadrature posterior: points with unnormalized log-posterior values.
#[derive(Debug, Clone)]
pub struct GridPosterior {
    pub points: Vec<ParamVector>,
    pub log_post: Vec<f64>,
}

pub fn grid_posterior(
    prior: &Prior,
    loglik: &Loglik<'_>,
    points_per_axis: usize,
) -> Result<GridPosterior> {
    let grid = tensor_grid(&prior.support, points_per_axis)?;
    let mut log_post = Vec::with_capacity(grid.points.len());
    for p in &grid.points {
        log_post.push(log_posterior_unnorm(p, prior, loglik)?);
    }
    Ok(GridPosterior {
        points: grid.points,
        log_post,
    })
}

impl GridPosterior {
    /// log of the posterior probability of `A` (Riemann weights cancel on
    /// uniform grids).
    pub fn log_prob(&self, set: &dyn Fn(&ParamVector) -> bool) -> f64 {
        let total = log_sum_exp(&self.log_post);
        let in_set: Vec<f64> = self
            .points
            .iter()
            .zip(&self.log_post)
            .filter(|(p, _)| set(p))
            .map(|(_, lp)| *lp)
            .collect();
        if in_set.is_empty() {
            return f64::NEG_INFINITY;
        }
        log_sum_exp(&in_set) - total
    }
}

/// Posterior sample for the set-decay diagnostic: a quadrature grid or a
/// recorded chain.
pub enum PosteriorSample<'a> {
    Grid(&'a GridPosterior),
    Chain(&'a Chain),
}

/// Empirical vs target exponential decay rate of a posterior set
/// probability.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct SetDecay {
    /// `(1/(b_T - a_T)) log pi(A | data)`.
    pub empirical_rate: f64,
    /// `-J(A)` from the Kullback-Leibler rate machinery.
    pub target: f64,
    /// Set when the numerical posterior mass of A was exactly zero.
    pub underflow: bool,
}

pub fn set_decay_rate(
    set: &dyn Fn(&ParamVector) -> bool,
    sample: &PosteriorSample<'_>,
    window: &ObservationWindow,
    j_of_set: f64,
) -> Result<SetDecay> {
    let log_prob = match sample {
        PosteriorSample::Grid(grid) => grid.log_prob(set),
        PosteriorSample::Chain(chain) => {
            let kept = chain.post_burn_in();
            if kept.is_empty() {
                return Err(Error::InsufficientSample("empty chain".into()));
            }
            let hits = kept
                .iter()
                .filter(|draw| set(&ParamVector::new((*draw).clone()).expect("finite draw")))
                .count();
            if hits == 0 {
                f64::NEG_INFINITY
            } else {
                (hits as f64 / kept.len() as f64).ln()
            }
        }
    };
    Ok(SetDecay {
        empirical_rate: log_prob / window.len(),
        target: -j_of_set,
        underflow: log_prob == f64::NEG_INFINITY,
    })
}

/// Sup gap between the grid posterior mapped to the Psi scale and the
/// standard normal density, over `|Psi| <= 4` (d = 1 only).
///
/// The posterior is evaluated on a fine local grid `theta_hat +/- 6
/// Sigma^{1/2}` intersected with the prior support, normalized by Riemann
/// quadrature there, and transported to Psi by the exact change of
/// variables.
pub fn grid_normality_gap(
    prior: &Prior,
    loglik: &Loglik<'_>,
    fit: &FitResult,
    points_per_axis: usize,
) -> Result<f64> {
    if fit.theta_hat.dim() != 1 {
        return Err(Error::InvalidArgument(
            "the density-gap statistic is defined for d = 1".into(),
        ));
    }
    if !fit.converged {
        return Err(Error::Precondition(
            "normality diagnostic needs a converged fit".into(),
        ));
    }
    let info = fit.sigma_inv[(0, 0)];
    if !(info > 0.0) {
        return Err(Error::NumericDomain {
            context: "grid_normality_gap".into(),
            detail: format!("observed information {info} is not positive"),
        });
    }
    let sigma = 1.0 / info.sqrt();
    let center = fit.theta_hat[0];
    let lo = (center - 6.0 * sigma).max(prior.support.lo[0]);
    let hi = (center + 6.0 * sigma).min(prior.support.hi[0]);
    if !(lo < hi) {
        return Err(Error::NumericDomain {
            context: "grid_normality_gap".into(),
            detail: "local grid collapsed against the prior support".into(),
        });
    }
    let n = points_per_axis.max(16);
    let step = (hi - lo) / (n - 1) as f64;
    let mut thetas = Vec::with_capacity(n);
    let mut logs = Vec::with_capacity(n);
    for i in 0..n {
        let t = ParamVector::scalar(lo + step * i as f64)?;
        logs.push(log_posterior_unnorm(&t, prior, loglik)?);
        thetas.push(t);
    }
    let log_norm = log_sum_exp(&logs) + step.ln();

    let mut gap: f64 = 0.0;
    for (t, lp) in thetas.iter().zip(&logs) {
        let psi = (t[0] - center) / sigma;
        if psi.abs() > 4.0 {
            continue;
        }
        // f_Psi(psi) = f_theta(theta) * sigma
        let dens_psi = (lp - log_norm).exp() * sigma;
        let target = (-0.5 * psi * psi).exp() / (2.0 * std::f64::consts::PI).sqrt();
        gap = gap.max((dens_psi - target).abs());
    }
    Ok(gap)
}
