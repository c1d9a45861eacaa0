//! Girsanov sufficient statistics and likelihoods.
//!
//! All likelihoods depend on the data only through the four statistics
//!
//! ```text
//! v_{Y|X} = int (b_Y^2 / sigma_Y^2) dt      u_{Y|X} = int (b_Y / sigma_Y^2) dY
//! v_X     = int (b_X^2 / sigma_X^2) dt      u_X     = int (b_X / sigma_X^2) dX
//! ```
//!
//! over the observation window. The conditional log-density of the pair with
//! drift multipliers `(phi_Y, phi_X)` relative to the null-drift laws is
//! `phi_Y u_{Y|X} - phi_Y^2 v_{Y|X}/2 + phi_X u_X - phi_X^2 v_X/2`; the
//! marginal likelihood of the observation path integrates its exponential
//! over latent paths drawn from the null-drift (dominating) law. For large
//! horizons the log-likelihood is approximated by a closed form that depends
//! on the data only through `W_Y(b_T) - W_Y(a_T)`.
//!
//! Discretized statistics use left-endpoint (Ito-consistent) sums.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{ObservationWindow, ParamMaps, ParamVector, StateSpaceModel};
use crate::simulate::{simulate_latent_batch, LatentDrift, TimeGrid};

/// The four Girsanov statistics of one path pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuffStats {
    pub u_y_given_x: f64,
    pub v_y_given_x: f64,
    pub u_x: f64,
    pub v_x: f64,
    pub window: ObservationWindow,
    pub m: usize,
}

/// JSON shape for exported statistics.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SuffStatsJson {
    pub u_yx: f64,
    pub v_yx: f64,
    pub u_x: f64,
    pub v_x: f64,
    pub m: usize,
    #[serde(rename = "aT")]
    pub a_t: f64,
    #[serde(rename = "bT")]
    pub b_t: f64,
}

impl SuffStats {
    pub fn to_json(&self) -> SuffStatsJson {
        SuffStatsJson {
            u_yx: self.u_y_given_x,
            v_yx: self.v_y_given_x,
            u_x: self.u_x,
            v_x: self.v_x,
            m: self.m,
            a_t: self.window.a(),
            b_t: self.window.b(),
        }
    }
}

/// Residual (martingale) parts of the u statistics under the true parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualStats {
    pub i_yx: f64,
    pub i_x: f64,
}

/// Log-scale bounds on the modeled likelihood.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LikBounds {
    pub lower: f64,
    pub upper: f64,
    /// Set when a lower ratio-bound constant went negative and was clamped
    /// to zero (stability envelope too loose for the window).
    pub loose_envelope: bool,
}

/// Monte-Carlo marginal log-likelihood estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McLoglik {
    pub estimate: f64,
    pub std_error: f64,
}

/// Left-endpoint discretized statistics of a synchronized `(y, x)` pair.
pub fn suff_stats_discrete_parts(
    y: &[f64],
    x: &[f64],
    grid: &TimeGrid,
    model: &StateSpaceModel,
) -> Result<SuffStats> {
    let m = grid.m();
    if y.len() != m + 1 || x.len() != m + 1 {
        return Err(Error::InvalidArgument(format!(
            "path length {} / {} does not match grid with m = {m}",
            y.len(),
            x.len()
        )));
    }
    let dt = grid.dt();
    let knots = grid.knots();

    let mut u_y = 0.0;
    let mut v_y = 0.0;
    let mut u_x = 0.0;
    let mut v_x = 0.0;
    for k in 0..m {
        let t = knots[k];
        let by = (model.b_y)(y[k], x[k], t);
        let sy = (model.sigma_y)(y[k], x[k], t);
        if sy == 0.0 {
            return Err(Error::DivisionGuard {
                quantity: "sigma_Y".into(),
                index: k,
            });
        }
        let s2y = sy * sy;
        v_y += by * by / s2y * dt;
        u_y += by / s2y * (y[k + 1] - y[k]);

        let bx = (model.b_x)(x[k], t);
        let sx = (model.sigma_x)(x[k], t);
        if sx == 0.0 {
            return Err(Error::DivisionGuard {
                quantity: "sigma_X".into(),
                index: k,
            });
        }
        let s2x = sx * sx;
        v_x += bx * bx / s2x * dt;
        u_x += bx / s2x * (x[k + 1] - x[k]);
    }

    Ok(SuffStats {
        u_y_given_x: u_y,
        v_y_given_x: v_y,
        u_x,
        v_x,
        window: *grid.window(),
        m,
    })
}

/// Statistics of a simulated path pair.
pub fn suff_stats_discrete(
    path: &crate::simulate::PathPair,
    model: &StateSpaceModel,
) -> Result<SuffStats> {
    suff_stats_discrete_parts(&path.y, &path.x, &path.grid, model)
}

/// Remove the drift contribution of the true parameter from the u statistics:
/// `i_yx = u_{Y|X} - psi_Y(theta_0) v_{Y|X}` and `i_x = u_X - psi_X(theta_0) v_X`.
pub fn residual_stats(
    stats: &SuffStats,
    theta0: &ParamVector,
    maps: &ParamMaps,
) -> Result<ResidualStats> {
    let phi_y0 = maps.psi_y(theta0)?;
    let phi_x0 = maps.psi_x(theta0)?;
    Ok(ResidualStats {
        i_yx: stats.u_y_given_x - phi_y0 * stats.v_y_given_x,
        i_x: stats.u_x - phi_x0 * stats.v_x,
    })
}

/// Conditional log-density given the latent path (the log integrand of the
/// marginal likelihood).
pub fn cond_loglik(theta: &ParamVector, stats: &SuffStats, maps: &ParamMaps) -> Result<f64> {
    let phi_y = maps.psi_y(theta)?;
    let phi_x = maps.psi_x(theta)?;
    // grouped as phi (v phi) so the vector-drift generalization reduces to
    // this expression bit for bit at r = 1
    Ok(phi_y * stats.u_y_given_x - 0.5 * (phi_y * (stats.v_y_given_x * phi_y))
        + phi_x * stats.u_x
        - 0.5 * (phi_x * (stats.v_x * phi_x)))
}

/// Log-sum-exp over possibly -inf entries. Returns -inf when all entries
/// are -inf.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Monte-Carlo marginal log-likelihood of an observation path.
///
/// Draws `n_latent` latent paths from the null-drift dominating law, forms
/// the statistics of each hybrid `(y, x_i)` pair, and returns the log of the
/// sample mean of the conditional likelihood weights (log-sum-exp
/// stabilized) together with the delta-method standard error of the
/// log-mean. The reduction runs in path-index order, so the result is
/// bit-stable regardless of how the per-path work is scheduled.
pub fn marginal_loglik_mc(
    theta: &ParamVector,
    y: &[f64],
    model: &StateSpaceModel,
    grid: &TimeGrid,
    n_latent: usize,
    seed: u64,
) -> Result<McLoglik> {
    if n_latent < 2 {
        return Err(Error::InvalidArgument(
            "marginal likelihood needs n_latent >= 2".into(),
        ));
    }
    let batch = simulate_latent_batch(model, theta, grid, n_latent, seed, LatentDrift::Null)?;
    let log_weights: Result<Vec<f64>> = batch
        .paths
        .par_iter()
        .map(|x| {
            let stats = suff_stats_discrete_parts(y, x, grid, model)?;
            cond_loglik(theta, &stats, &model.maps)
        })
        .collect();
    let log_weights = log_weights?;
    mc_log_mean(&log_weights)
}

/// Log-mean and its standard error from log-weights.
pub fn mc_log_mean(log_weights: &[f64]) -> Result<McLoglik> {
    let n = log_weights.len() as f64;
    let max = log_weights
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::DegenerateWeights);
    }
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    for lw in log_weights {
        let w = (lw - max).exp();
        s1 += w;
        s2 += w * w;
    }
    let estimate = max + (s1 / n).ln();
    // delta method: se(log mean) = sd(w) / (sqrt(n) * mean(w)), computed on
    // the rescaled weights so the common factor exp(max) cancels
    let var = ((s2 - s1 * s1 / n) / (n - 1.0)).max(0.0);
    let std_error = (var * n).sqrt() / s1;
    Ok(McLoglik {
        estimate,
        std_error,
    })
}

/// Closed-form large-horizon approximation of the modeled log-likelihood:
///
/// ```text
/// (b-a) K_Y phi_Y phi_Y0 + phi_Y sqrt(K_Y) (W_Y(b) - W_Y(a))
///   - (b-a) K_Y phi_Y^2 / 2 + (b-a) K_X phi_X phi_X0
/// ```
///
/// Evaluating at `theta = theta0` gives the true-model approximation
/// `(b-a)(K_Y phi_Y0^2 / 2 + K_X phi_X0^2) + phi_Y0 sqrt(K_Y) w`.
pub fn approx_loglik(
    theta: &ParamVector,
    theta0: &ParamVector,
    model: &StateSpaceModel,
    window: &ObservationWindow,
    w_y_increment: f64,
) -> Result<f64> {
    let rb = model.ratio_bounds()?;
    let phi_y = model.maps.psi_y(theta)?;
    let phi_x = model.maps.psi_x(theta)?;
    let phi_y0 = model.maps.psi_y(theta0)?;
    let phi_x0 = model.maps.psi_x(theta0)?;
    let len = window.len();
    Ok(len * rb.k_y * phi_y * phi_y0 + phi_y * rb.k_y.sqrt() * w_y_increment
        - 0.5 * len * rb.k_y * phi_y * phi_y
        + len * rb.k_x * phi_x * phi_x0)
}

/// Log-scale envelope bounds on the modeled likelihood at a given stability
/// envelope level `xi` and integrated squared envelope `int lambda^2`.
///
/// The v statistics are bracketed by
/// `K_{.,1} = K (len -/+ alpha_1 xi^2 int-lambda^2)` and
/// `K_{.,2} = K (len + alpha_2 xi^2 int-lambda^2)`; substituting the brackets
/// and the residual terms into the likelihood exponent gives the two bounds.
/// A negative lower bracket is clamped to zero and flagged rather than
/// treated as an error.
#[allow(clippy::too_many_arguments)]
pub fn likelihood_log_bounds(
    theta: &ParamVector,
    theta0: &ParamVector,
    model: &StateSpaceModel,
    window: &ObservationWindow,
    xi: f64,
    lambda_sq_integral: f64,
    residuals: &ResidualStats,
) -> Result<LikBounds> {
    if xi < 0.0 || lambda_sq_integral < 0.0 {
        return Err(Error::InvalidArgument(
            "xi and the lambda^2 integral must be non-negative".into(),
        ));
    }
    let rb = model.ratio_bounds()?;
    let phi_y = model.maps.psi_y(theta)?;
    let phi_x = model.maps.psi_x(theta)?;
    let phi_y0 = model.maps.psi_y(theta0)?;
    let phi_x0 = model.maps.psi_x(theta0)?;
    let len = window.len();
    let spread = xi * xi * lambda_sq_integral;

    let mut loose = false;
    let mut clamp = |v: f64| -> f64 {
        if v < 0.0 {
            loose = true;
            0.0
        } else {
            v
        }
    };
    let k_y1 = clamp(rb.k_y * (len - rb.alpha_y1 * spread));
    let k_y2 = rb.k_y * (len + rb.alpha_y2 * spread);
    let k_x1 = clamp(rb.k_x * (len - rb.alpha_x1 * spread));
    let k_x2 = rb.k_x * (len + rb.alpha_x2 * spread);

    let exponent = |ky_u: f64, ky_v: f64, kx_u: f64, kx_v: f64| -> f64 {
        phi_y * phi_y0 * ky_u + phi_y * residuals.i_yx - 0.5 * phi_y * phi_y * ky_v
            + phi_x * phi_x0 * kx_u
            + phi_x * residuals.i_x
            - 0.5 * phi_x * phi_x * kx_v
    };
    let lo = exponent(k_y1, k_y2, k_x1, k_x2);
    let hi = exponent(k_y2, k_y1, k_x2, k_x1);

    Ok(LikBounds {
        lower: lo.min(hi),
        upper: lo.max(hi),
        loose_envelope: loose,
    })
}

/// Kullback-Leibler divergence rate between the true and modeled path laws:
///
/// ```text
/// h = [ K_Y (psi_Y - psi_Y0)^2 + K_X (psi_X - psi_X0)^2
///       + K_X (psi_X0^2 - psi_X^2) ] / 2
/// ```
///
/// Non-negativity requires `|psi_X(theta)| <= |psi_X(theta0)|`; inputs
/// violating that are rejected.
pub fn kl_rate_h(
    theta: &ParamVector,
    theta0: &ParamVector,
    maps: &ParamMaps,
    k_y: f64,
    k_x: f64,
) -> Result<f64> {
    let psi_y = maps.psi_y(theta)?;
    let psi_x = maps.psi_x(theta)?;
    let psi_y0 = maps.psi_y(theta0)?;
    let psi_x0 = maps.psi_x(theta0)?;
    if psi_x.abs() > psi_x0.abs() {
        return Err(Error::AssumptionViolation(format!(
            "|psi_x(theta)| <= |psi_x(theta0)| required for a non-negative rate: \
             |{psi_x}| > |{psi_x0}|"
        )));
    }
    let dy = psi_y - psi_y0;
    let dx = psi_x - psi_x0;
    Ok(0.5 * (k_y * dy * dy + k_x * dx * dx + k_x * (psi_x0 * psi_x0 - psi_x * psi_x)))
}

/// Rate gap of a parameter against the best rate on a reference grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JRate {
    /// `J(theta) = h(theta) - inf_Theta h`, with the infimum taken over the
    /// supplied grid.
    pub j_theta: f64,
    /// The grid infimum of `h` standing in for `h(Theta)`.
    pub h_theta_space: f64,
}

/// Minimum of `h` over a grid of parameters.
fn grid_min_h(
    theta_grid: &[ParamVector],
    theta0: &ParamVector,
    maps: &ParamMaps,
    k_y: f64,
    k_x: f64,
) -> Result<f64> {
    let mut min = f64::INFINITY;
    for g in theta_grid {
        min = min.min(kl_rate_h(g, theta0, maps, k_y, k_x)?);
    }
    Ok(min)
}

/// Compute `J(theta)` with the essential infimum over the parameter space
/// approximated by a minimum over `theta_grid`.
pub fn j_rate(
    theta: &ParamVector,
    theta0: &ParamVector,
    theta_grid: &[ParamVector],
    maps: &ParamMaps,
    k_y: f64,
    k_x: f64,
) -> Result<JRate> {
    if theta_grid.is_empty() {
        return Err(Error::InvalidArgument("theta grid must be non-empty".into()));
    }
    let h_theta_space = grid_min_h(theta_grid, theta0, maps, k_y, k_x)?;
    let h = kl_rate_h(theta, theta0, maps, k_y, k_x)?;
    Ok(JRate {
        j_theta: h - h_theta_space,
        h_theta_space,
    })
}

/// `J(A)` for a set represented as a sub-grid: the minimum rate gap over
/// the sub-grid relative to the full grid's infimum.
pub fn j_rate_set(
    set_grid: &[ParamVector],
    theta0: &ParamVector,
    theta_grid: &[ParamVector],
    maps: &ParamMaps,
    k_y: f64,
    k_x: f64,
) -> Result<f64> {
    if set_grid.is_empty() || theta_grid.is_empty() {
        return Err(Error::InvalidArgument("grids must be non-empty".into()));
    }
    let h_theta_space = grid_min_h(theta_grid, theta0, maps, k_y, k_x)?;
    let h_set = grid_min_h(set_grid, theta0, maps, k_y, k_x)?;
    Ok(h_set - h_theta_space)
}
