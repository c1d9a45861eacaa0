//! Maximum-likelihood estimation.
//!
//! The default estimator maximizes the closed-form objective
//!
//! ```text
//! g(theta) = -K_Y/2 (psi_Y - psi_Y0)^2 + sqrt(K_Y) (psi_Y - psi_Y0) w_bar
//!            -K_X/2 (psi_X - psi_X0)^2 + K_X/2 (psi_X^2 - psi_X0^2)
//! ```
//!
//! which approximates the per-unit-time log-likelihood ratio for large
//! horizons. `w_bar` is `(W_Y(b_T) - W_Y(a_T)) / (b_T - a_T)`; in data-driven
//! mode it is recovered from the sufficient statistics as
//! `(u_{Y|X} - psi_Y(theta0) v_{Y|X}) / (sqrt(K_Y) (b_T - a_T))`.
//!
//! A second mode maximizes the Monte-Carlo marginal log-likelihood directly
//! (common random numbers across theta evaluations); it exists to validate
//! the approximation, not to replace it.

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::likelihood::{
    cond_loglik, mc_log_mean, suff_stats_discrete_parts, SuffStats,
};
use crate::model::{ObservationWindow, ParamMaps, ParamVector, StateSpaceModel};
use crate::simulate::{simulate_latent_batch, LatentDrift, TimeGrid};

/// Fit options; the defaults implement Newton ascent with Armijo
/// backtracking and box projection.
#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Convergence tolerance on the gradient max-norm.
    pub tol: f64,
    pub max_iter: usize,
    /// Armijo sufficient-increase constant.
    pub armijo_c: f64,
    /// Backtracking shrink factor.
    pub shrink: f64,
    /// Compact parameter box; `None` uses `theta_init +/- box_half_width`.
    pub bounds: Option<ThetaBox>,
    pub box_half_width: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            tol: 1e-8,
            max_iter: 200,
            armijo_c: 1e-4,
            shrink: 0.5,
            bounds: None,
            box_half_width: 50.0,
        }
    }
}

/// Axis-aligned compact parameter box.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl ThetaBox {
    pub fn centered(center: &ParamVector, half_width: f64) -> Self {
        ThetaBox {
            lo: center.as_slice().iter().map(|c| c - half_width).collect(),
            hi: center.as_slice().iter().map(|c| c + half_width).collect(),
        }
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta
            .iter()
            .enumerate()
            .all(|(k, v)| *v >= self.lo[k] && *v <= self.hi[k])
    }

    pub fn project(&self, theta: &mut [f64]) {
        for (k, v) in theta.iter_mut().enumerate() {
            *v = v.clamp(self.lo[k], self.hi[k]);
        }
    }
}

/// Estimation result with the observed information at the optimum.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub theta_hat: ParamVector,
    /// Observed Fisher information `Sigma_T^{-1} = -l''(theta_hat)`
    /// (identity fallback when the Hessian is singular at the optimum).
    pub sigma_inv: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Objective value at the optimum (per-unit-time `g` in approx mode,
    /// absolute log-likelihood in Monte-Carlo mode).
    pub objective_at_opt: f64,
    /// `sqrt(b_T - a_T) (theta_hat - theta0)` when the truth was supplied.
    pub clt_stat: Option<Vec<f64>>,
    /// Whether any iterate fell back to a gradient-ascent step because the
    /// Hessian was not negative definite there.
    pub used_gradient_fallback: bool,
    /// Whether the information fallback to the identity was taken.
    pub information_fallback: bool,
}

/// JSON projection of a fit.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FitResultJson {
    pub theta_hat: Vec<f64>,
    pub sigma_inv: Vec<Vec<f64>>,
    pub converged: bool,
    pub iterations: usize,
    pub objective: f64,
    pub clt_stat: Vec<f64>,
}

impl FitResult {
    pub fn to_json(&self) -> FitResultJson {
        let d = self.sigma_inv.nrows();
        FitResultJson {
            theta_hat: self.theta_hat.to_vec(),
            sigma_inv: (0..d)
                .map(|i| (0..d).map(|j| self.sigma_inv[(i, j)]).collect())
                .collect(),
            converged: self.converged,
            iterations: self.iterations,
            objective: self.objective_at_opt,
            clt_stat: self.clt_stat.clone().unwrap_or_default(),
        }
    }
}

/// The approximated per-unit-time objective at a fixed reference truth.
#[derive(Debug, Clone)]
pub struct GObjective {
    maps: ParamMaps,
    k_y: f64,
    k_x: f64,
    psi_y0: f64,
    psi_x0: f64,
    w_bar: f64,
}

impl GObjective {
    pub fn new(
        maps: &ParamMaps,
        theta0: &ParamVector,
        k_y: f64,
        k_x: f64,
        w_bar: f64,
    ) -> Result<Self> {
        if !(k_y > 0.0 && k_x > 0.0) {
            return Err(Error::InvalidArgument(
                "ratio constants must be positive".into(),
            ));
        }
        Ok(GObjective {
            maps: maps.clone(),
            k_y,
            k_x,
            psi_y0: maps.psi_y(theta0)?,
            psi_x0: maps.psi_x(theta0)?,
            w_bar,
        })
    }

    /// Data-driven construction: recover `w_bar` from the statistics.
    pub fn from_stats(
        maps: &ParamMaps,
        theta0: &ParamVector,
        k_y: f64,
        k_x: f64,
        stats: &SuffStats,
    ) -> Result<Self> {
        let w_bar = w_bar_from_stats(stats, theta0, maps, k_y)?;
        Self::new(maps, theta0, k_y, k_x, w_bar)
    }

    pub fn w_bar(&self) -> f64 {
        self.w_bar
    }

    pub fn dim(&self) -> usize {
        self.maps.dim()
    }

    pub fn value(&self, theta: &ParamVector) -> Result<f64> {
        let psi_y = self.maps.psi_y(theta)?;
        let psi_x = self.maps.psi_x(theta)?;
        let dy = psi_y - self.psi_y0;
        let dx = psi_x - self.psi_x0;
        Ok(-0.5 * self.k_y * dy * dy + self.k_y.sqrt() * dy * self.w_bar
            - 0.5 * self.k_x * dx * dx
            + 0.5 * self.k_x * (psi_x * psi_x - self.psi_x0 * self.psi_x0))
    }

    pub fn gradient(&self, theta: &ParamVector) -> Result<DVector<f64>> {
        let psi_y = self.maps.psi_y(theta)?;
        let psi_x = self.maps.psi_x(theta)?;
        let gy = self.maps.grad_psi_y(theta)?;
        let gx = self.maps.grad_psi_x(theta)?;
        let dy = psi_y - self.psi_y0;
        let dx = psi_x - self.psi_x0;
        let sqrt_ky = self.k_y.sqrt();
        Ok(DVector::from_fn(self.maps.dim(), |k, _| {
            -self.k_y * dy * gy[k] - self.k_x * dx * gx[k]
                + self.k_x * psi_x * gx[k]
                + sqrt_ky * gy[k] * self.w_bar
        }))
    }

    pub fn hessian(&self, theta: &ParamVector) -> Result<DMatrix<f64>> {
        let psi_y = self.maps.psi_y(theta)?;
        let psi_x = self.maps.psi_x(theta)?;
        let gy = self.maps.grad_psi_y(theta)?;
        let gx = self.maps.grad_psi_x(theta)?;
        let hy = self.maps.hess_psi_y(theta)?;
        let hx = self.maps.hess_psi_x(theta)?;
        let dy = psi_y - self.psi_y0;
        let dx = psi_x - self.psi_x0;
        let sqrt_ky = self.k_y.sqrt();
        let d = self.maps.dim();
        Ok(DMatrix::from_fn(d, d, |j, k| {
            -self.k_y * (gy[j] * gy[k] + dy * hy[(j, k)])
                - self.k_x * (gx[j] * gx[k] + dx * hx[(j, k)])
                + self.k_x * (gx[j] * gx[k] + psi_x * hx[(j, k)])
                + sqrt_ky * hy[(j, k)] * self.w_bar
        }))
    }
}

/// Recover `w_bar` from sufficient statistics under a known truth.
pub fn w_bar_from_stats(
    stats: &SuffStats,
    theta0: &ParamVector,
    maps: &ParamMaps,
    k_y: f64,
) -> Result<f64> {
    let phi_y0 = maps.psi_y(theta0)?;
    Ok((stats.u_y_given_x - phi_y0 * stats.v_y_given_x) / (k_y.sqrt() * stats.window.len()))
}

/// Fisher information `I(theta)_{jk} = K_Y d_j psi_Y d_k psi_Y` together
/// with its smallest eigenvalue (rank 1 for d > 1, so callers must check
/// positive definiteness before inverting).
#[derive(Debug, Clone)]
pub struct FisherInfo {
    pub matrix: DMatrix<f64>,
    pub min_eigenvalue: f64,
}

pub fn fisher_info(theta: &ParamVector, maps: &ParamMaps, k_y: f64) -> Result<FisherInfo> {
    let g = maps.grad_psi_y(theta)?;
    let d = maps.dim();
    let matrix = DMatrix::from_fn(d, d, |j, k| k_y * g[j] * g[k]);
    let min_eigenvalue = matrix
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    Ok(FisherInfo {
        matrix,
        min_eigenvalue,
    })
}

/// Shared Newton-with-backtracking driver used by both fit modes.
struct Ascent<'a> {
    value: &'a dyn Fn(&ParamVector) -> Result<f64>,
    gradient: &'a dyn Fn(&ParamVector) -> Result<DVector<f64>>,
    hessian: &'a dyn Fn(&ParamVector) -> Result<DMatrix<f64>>,
}

struct AscentOutcome {
    theta: ParamVector,
    value: f64,
    iterations: usize,
    converged: bool,
    used_gradient_fallback: bool,
}

fn maximize(f: &Ascent, theta_init: &ParamVector, opts: &FitOptions) -> Result<AscentOutcome> {
    let bounds = opts
        .bounds
        .clone()
        .unwrap_or_else(|| ThetaBox::centered(theta_init, opts.box_half_width));
    if !bounds.contains(theta_init.as_slice()) {
        return Err(Error::Precondition(format!(
            "theta_init {theta_init} outside the parameter box"
        )));
    }

    let mut theta = theta_init.clone();
    let mut value = (f.value)(&theta)?;
    let mut used_gradient_fallback = false;

    for iter in 0..=opts.max_iter {
        let grad = (f.gradient)(&theta)?;
        let gnorm = grad.amax();
        if gnorm <= opts.tol {
            return Ok(AscentOutcome {
                theta,
                value,
                iterations: iter,
                converged: true,
                used_gradient_fallback,
            });
        }
        if iter == opts.max_iter {
            break;
        }

        // Newton direction on the concave model; fall back to the gradient
        // when -H is not positive definite.
        let hess = (f.hessian)(&theta)?;
        let direction = match Cholesky::new(-hess) {
            Some(chol) => chol.solve(&grad),
            None => {
                used_gradient_fallback = true;
                grad.clone()
            }
        };

        // Armijo backtracking with projection into the box. `slope` is
        // positive for ascent directions; a projected candidate equal to the
        // current iterate (direction fully outward at the boundary) never
        // satisfies the increase test and ends the fit as non-converged.
        let slope = grad.dot(&direction);
        let mut alpha = 1.0;
        let mut stepped = false;
        for _ in 0..60 {
            let mut cand: Vec<f64> = theta
                .as_slice()
                .iter()
                .zip(direction.iter())
                .map(|(t, d)| t + alpha * d)
                .collect();
            bounds.project(&mut cand);
            let cand = ParamVector::new(cand)?;
            let cand_value = (f.value)(&cand)?;
            if cand_value >= value + opts.armijo_c * alpha * slope
                && cand.as_slice() != theta.as_slice()
            {
                theta = cand;
                value = cand_value;
                stepped = true;
                break;
            }
            alpha *= opts.shrink;
        }
        if !stepped {
            // no admissible step; report the last iterate as non-converged
            return Ok(AscentOutcome {
                theta,
                value,
                iterations: iter,
                converged: false,
                used_gradient_fallback,
            });
        }
    }

    Ok(AscentOutcome {
        theta,
        value,
        iterations: opts.max_iter,
        converged: false,
        used_gradient_fallback,
    })
}

fn observed_information(hess_at_opt: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let candidate = -hess_at_opt;
    // usable information must be invertible; otherwise fall back to identity
    if candidate.clone().try_inverse().is_some() {
        (candidate, false)
    } else {
        (DMatrix::identity(hess_at_opt.nrows(), hess_at_opt.ncols()), true)
    }
}

/// Maximize the approximated objective (mode A). The observed information is
/// `-(b_T - a_T) g''(theta_hat)`; the CLT statistic against `theta0` is
/// filled in since the reference truth is part of the objective.
pub fn fit_mle_approx(
    g: &GObjective,
    theta0: &ParamVector,
    window: &ObservationWindow,
    theta_init: &ParamVector,
    opts: &FitOptions,
) -> Result<FitResult> {
    let ascent = Ascent {
        value: &|t: &ParamVector| g.value(t),
        gradient: &|t: &ParamVector| g.gradient(t),
        hessian: &|t: &ParamVector| g.hessian(t),
    };
    let out = maximize(&ascent, theta_init, opts)?;
    let hess = g.hessian(&out.theta)?;
    let (sigma_inv, information_fallback) = observed_information(&(hess * window.len()));
    let clt = clt_scale(&out.theta, theta0, window.len());
    Ok(FitResult {
        theta_hat: out.theta,
        sigma_inv,
        converged: out.converged,
        iterations: out.iterations,
        objective_at_opt: out.value,
        clt_stat: Some(clt),
        used_gradient_fallback: out.used_gradient_fallback,
        information_fallback,
    })
}

fn clt_scale(theta_hat: &ParamVector, theta0: &ParamVector, effective_len: f64) -> Vec<f64> {
    theta_hat
        .as_slice()
        .iter()
        .zip(theta0.as_slice())
        .map(|(h, t)| effective_len.sqrt() * (h - t))
        .collect()
}

/// Maximize the Monte-Carlo marginal log-likelihood (mode B).
///
/// The latent batch is drawn once and shared by every theta evaluation
/// (common random numbers); per-path statistics are theta-free, so each
/// evaluation is a cheap reduction. Derivatives are central differences of
/// the cached objective, and the observed information is the negated
/// finite-difference Hessian at the optimum.
#[allow(clippy::too_many_arguments)]
pub fn fit_mle_mc(
    y: &[f64],
    model: &StateSpaceModel,
    grid: &TimeGrid,
    n_latent: usize,
    seed: u64,
    theta_init: &ParamVector,
    theta0: Option<&ParamVector>,
    opts: &FitOptions,
) -> Result<FitResult> {
    if n_latent < 2 {
        return Err(Error::InvalidArgument(
            "mode B needs n_latent >= 2".into(),
        ));
    }
    let batch = simulate_latent_batch(
        model,
        theta_init,
        grid,
        n_latent,
        seed,
        LatentDrift::Null,
    )?;
    let path_stats: Result<Vec<SuffStats>> = batch
        .paths
        .par_iter()
        .map(|x| suff_stats_discrete_parts(y, x, grid, model))
        .collect();
    let path_stats = path_stats?;
    let maps = model.maps.clone();

    let loglik = move |theta: &ParamVector| -> Result<f64> {
        let mut logw = Vec::with_capacity(path_stats.len());
        for s in &path_stats {
            logw.push(cond_loglik(theta, s, &maps)?);
        }
        Ok(mc_log_mean(&logw)?.estimate)
    };

    let d = theta_init.dim();
    let fd_grad = |t: &ParamVector| -> Result<DVector<f64>> {
        let mut g = DVector::zeros(d);
        for k in 0..d {
            let h = 1e-5 * t[k].abs().max(1.0);
            let mut up = t.to_vec();
            up[k] += h;
            let mut dn = t.to_vec();
            dn[k] -= h;
            g[k] = (loglik(&ParamVector::new(up)?)? - loglik(&ParamVector::new(dn)?)?)
                / (2.0 * h);
        }
        Ok(g)
    };
    let fd_hess = |t: &ParamVector| -> Result<DMatrix<f64>> {
        let f0 = loglik(t)?;
        let mut hess = DMatrix::zeros(d, d);
        for j in 0..d {
            let hj = 1e-4 * t[j].abs().max(1.0);
            for k in j..d {
                let hk = 1e-4 * t[k].abs().max(1.0);
                let v = if j == k {
                    let mut up = t.to_vec();
                    up[j] += hj;
                    let mut dn = t.to_vec();
                    dn[j] -= hj;
                    (loglik(&ParamVector::new(up)?)? - 2.0 * f0
                        + loglik(&ParamVector::new(dn)?)?)
                        / (hj * hj)
                } else {
                    let mut pp = t.to_vec();
                    pp[j] += hj;
                    pp[k] += hk;
                    let mut pm = t.to_vec();
                    pm[j] += hj;
                    pm[k] -= hk;
                    let mut mp = t.to_vec();
                    mp[j] -= hj;
                    mp[k] += hk;
                    let mut mm = t.to_vec();
                    mm[j] -= hj;
                    mm[k] -= hk;
                    (loglik(&ParamVector::new(pp)?)? - loglik(&ParamVector::new(pm)?)?
                        - loglik(&ParamVector::new(mp)?)?
                        + loglik(&ParamVector::new(mm)?)?)
                        / (4.0 * hj * hk)
                };
                hess[(j, k)] = v;
                hess[(k, j)] = v;
            }
        }
        Ok(hess)
    };

    let ascent = Ascent {
        value: &loglik,
        gradient: &fd_grad,
        hessian: &fd_hess,
    };
    let out = maximize(&ascent, theta_init, opts)?;
    let (sigma_inv, information_fallback) = observed_information(&fd_hess(&out.theta)?);
    let clt = theta0.map(|t0| clt_scale(&out.theta, t0, grid.window().len()));
    Ok(FitResult {
        theta_hat: out.theta,
        sigma_inv,
        converged: out.converged,
        iterations: out.iterations,
        objective_at_opt: out.value,
        clt_stat: clt,
        used_gradient_fallback: out.used_gradient_fallback,
        information_fallback,
    })
}

/// `sqrt(b_T - a_T) (theta_hat - theta0)` of a converged fit.
pub fn clt_standardize(
    fit: &FitResult,
    theta0: &ParamVector,
    window: &ObservationWindow,
) -> Result<Vec<f64>> {
    if !fit.converged {
        return Err(Error::Precondition(
            "CLT standardization requires a converged fit".into(),
        ));
    }
    Ok(clt_scale(&fit.theta_hat, theta0, window.len()))
}
