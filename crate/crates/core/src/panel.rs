//! Panels of state space SDEs sharing one parameter.
//!
//! `n` independent series follow the same coefficient quadruple, with
//! per-individual drift multipliers `psi_{Y_i}(theta)`, `psi_{X_i}(theta)`
//! converging to limit maps as `i` grows. Pooled estimation maximizes the
//! averaged approximated objective
//!
//! ```text
//! bar g(theta) = -K_Y/2 (psi_Y - psi_Y0)^2
//!                + sqrt(K_Y) (psi_Y - psi_Y0) * mean_i w_bar_i
//!                + (latent terms with the limit maps)
//! ```
//!
//! whose information is `K_Y d_j psi_Y d_k psi_Y` with the limit constants,
//! and whose CLT scaling is `sqrt(n (b_T - a_T))`.
//!
//! The multidimensional extension replaces the scalar drifts by vectors; the
//! u statistics become vectors and the v statistics Gram matrices.

use std::fmt;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::likelihood::{kl_rate_h, suff_stats_discrete, SuffStats};
use crate::mle::{
    fit_mle_approx, w_bar_from_stats, FitOptions, FitResult, GObjective,
};
use crate::model::{ObservationWindow, ParamMaps, ParamVector, StateSpaceModel};
use crate::simulate::PathPair;

/// A panel: shared base model, per-individual maps, and the limit maps with
/// their limiting ratio constants.
#[derive(Clone)]
pub struct PanelModel {
    pub n: usize,
    pub base: StateSpaceModel,
    pub per_individual_maps: Vec<ParamMaps>,
    pub limit_maps: ParamMaps,
    pub k_y_bar: f64,
    pub k_x_bar: f64,
}

impl fmt::Debug for PanelModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PanelModel")
            .field("n", &self.n)
            .field("k_y_bar", &self.k_y_bar)
            .field("k_x_bar", &self.k_x_bar)
            .finish()
    }
}

impl PanelModel {
    pub fn new(
        base: StateSpaceModel,
        per_individual_maps: Vec<ParamMaps>,
        limit_maps: ParamMaps,
        k_y_bar: f64,
        k_x_bar: f64,
    ) -> Result<Self> {
        if per_individual_maps.is_empty() {
            return Err(Error::InvalidArgument("panel needs n >= 1".into()));
        }
        if !(k_y_bar > 0.0 && k_x_bar > 0.0) {
            return Err(Error::InvalidArgument(
                "limit constants must be positive".into(),
            ));
        }
        let d = limit_maps.dim();
        if per_individual_maps.iter().any(|m| m.dim() != d) {
            return Err(Error::InvalidArgument(
                "per-individual maps must share the limit maps' dimension".into(),
            ));
        }
        Ok(PanelModel {
            n: per_individual_maps.len(),
            base,
            per_individual_maps,
            limit_maps,
            k_y_bar,
            k_x_bar,
        })
    }

    /// Largest deviation of the per-individual map values from the limit
    /// maps over a test grid: the convergence assumption is not verifiable,
    /// only witnessed.
    pub fn max_map_deviation(&self, test_grid: &[ParamVector]) -> Result<f64> {
        let mut max_dev: f64 = 0.0;
        for theta in test_grid {
            let ly = self.limit_maps.psi_y(theta)?;
            let lx = self.limit_maps.psi_x(theta)?;
            for maps in &self.per_individual_maps {
                max_dev = max_dev.max((maps.psi_y(theta)? - ly).abs());
                max_dev = max_dev.max((maps.psi_x(theta)? - lx).abs());
            }
        }
        Ok(max_dev)
    }
}

/// Per-individual statistics of a panel of paths sharing one grid.
pub fn panel_suff_stats(
    paths: &[PathPair],
    base: &StateSpaceModel,
) -> Result<Vec<SuffStats>> {
    let first = paths.first().ok_or_else(|| {
        Error::InvalidArgument("panel statistics need at least one path".into())
    })?;
    for (i, p) in paths.iter().enumerate() {
        if p.grid.m() != first.grid.m() || p.grid.window() != first.grid.window() {
            return Err(Error::InvalidArgument(format!(
                "path {i} is on a different grid than path 0"
            )));
        }
    }
    paths.iter().map(|p| suff_stats_discrete(p, base)).collect()
}

/// Pooled approximated log-likelihood: the sum over individuals of
/// `(b_T - a_T) g_i(theta)` with per-individual maps and data-driven
/// `w_bar_i` recovered under the supplied truth.
pub fn pooled_loglik_approx(
    theta: &ParamVector,
    stats_list: &[SuffStats],
    panel: &PanelModel,
    theta0: &ParamVector,
) -> Result<f64> {
    if stats_list.len() != panel.n {
        return Err(Error::InvalidArgument(format!(
            "got {} statistics for a panel of n = {}",
            stats_list.len(),
            panel.n
        )));
    }
    let rb = panel.base.ratio_bounds()?;
    let mut total = 0.0;
    for (stats, maps) in stats_list.iter().zip(&panel.per_individual_maps) {
        let g = GObjective::from_stats(maps, theta0, rb.k_y, rb.k_x, stats)?;
        total += stats.window.len() * g.value(theta)?;
    }
    Ok(total)
}

/// Pooled Monte-Carlo log-likelihood: the sum of per-individual marginal
/// estimates, each with its own latent batch.
pub fn pooled_loglik_mc(
    theta: &ParamVector,
    paths: &[PathPair],
    panel: &PanelModel,
    n_latent: usize,
    seed: u64,
) -> Result<f64> {
    if paths.len() != panel.n {
        return Err(Error::InvalidArgument(format!(
            "got {} paths for a panel of n = {}",
            paths.len(),
            panel.n
        )));
    }
    let mut total = 0.0;
    for (i, (path, maps)) in paths.iter().zip(&panel.per_individual_maps).enumerate() {
        let mut model_i = panel.base.clone();
        model_i.maps = maps.clone();
        let mc = crate::likelihood::marginal_loglik_mc(
            theta,
            &path.y,
            &model_i,
            &path.grid,
            n_latent,
            crate::rng::derive_seed(seed, crate::rng::DOMAIN_INDIVIDUAL, i as u64),
        )?;
        total += mc.estimate;
    }
    Ok(total)
}

/// Pooled fit: maximize the averaged objective built from the limit maps
/// and the mean of the per-individual recovered `w_bar_i`. The observed
/// information scales with `n (b_T - a_T)` and the CLT statistic with its
/// square root.
pub fn pooled_fit_mle(
    stats_list: &[SuffStats],
    panel: &PanelModel,
    theta0: &ParamVector,
    theta_init: &ParamVector,
    opts: &FitOptions,
) -> Result<FitResult> {
    if stats_list.len() != panel.n {
        return Err(Error::InvalidArgument(format!(
            "got {} statistics for a panel of n = {}",
            stats_list.len(),
            panel.n
        )));
    }
    let rb = panel.base.ratio_bounds()?;
    let mut w_sum = 0.0;
    for (stats, maps) in stats_list.iter().zip(&panel.per_individual_maps) {
        w_sum += w_bar_from_stats(stats, theta0, maps, rb.k_y)?;
    }
    let w_bar_avg = w_sum / panel.n as f64;

    let g = GObjective::new(&panel.limit_maps, theta0, panel.k_y_bar, panel.k_x_bar, w_bar_avg)?;
    let window = stats_list[0].window;
    let mut fit = fit_mle_approx(&g, theta0, &window, theta_init, opts)?;

    // rescale from the single-series window length to n * length
    let n = panel.n as f64;
    fit.sigma_inv *= n;
    fit.clt_stat = Some(
        fit.theta_hat
            .as_slice()
            .iter()
            .zip(theta0.as_slice())
            .map(|(h, t)| (n * window.len()).sqrt() * (h - t))
            .collect(),
    );
    Ok(fit)
}

/// Kullback-Leibler rate of the limit model (same three-term expression as
/// the single-series rate, with the limit maps and constants).
pub fn bar_h(
    theta: &ParamVector,
    theta0: &ParamVector,
    limit_maps: &ParamMaps,
    k_y_bar: f64,
    k_x_bar: f64,
) -> Result<f64> {
    kl_rate_h(theta, theta0, limit_maps, k_y_bar, k_x_bar)
}

pub type VectorObsDrift = Arc<dyn Fn(f64, f64, f64) -> Vec<f64> + Send + Sync>;
pub type VectorLatentDrift = Arc<dyn Fn(f64, f64) -> Vec<f64> + Send + Sync>;

/// Vector drifts `b_Y : (y,x,t) -> R^{r_Y}`, `b_X : (x,t) -> R^{r_X}` laid
/// over the base model's scalar diffusions.
#[derive(Clone)]
pub struct VectorDrifts {
    pub r_y: usize,
    pub r_x: usize,
    pub b_y: VectorObsDrift,
    pub b_x: VectorLatentDrift,
}

impl VectorDrifts {
    pub fn new(
        r_y: usize,
        r_x: usize,
        b_y: impl Fn(f64, f64, f64) -> Vec<f64> + Send + Sync + 'static,
        b_x: impl Fn(f64, f64) -> Vec<f64> + Send + Sync + 'static,
    ) -> Result<Self> {
        if r_y < 1 || r_x < 1 {
            return Err(Error::InvalidArgument(
                "vector drifts need r_Y, r_X >= 1".into(),
            ));
        }
        Ok(VectorDrifts {
            r_y,
            r_x,
            b_y: Arc::new(b_y),
            b_x: Arc::new(b_x),
        })
    }
}

/// Vector/matrix statistics: u vectors and v Gram matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorSuffStats {
    pub u_y: DVector<f64>,
    pub v_y: DMatrix<f64>,
    pub u_x: DVector<f64>,
    pub v_x: DMatrix<f64>,
    pub window: ObservationWindow,
    pub m: usize,
}

/// Quadratic vertex `v^{-1} u` of one side of the conditional log-density.
#[derive(Debug, Clone)]
pub struct RegularizedVertex {
    pub phi: DVector<f64>,
    /// Set when the Gram matrix was near singular and a ridge was added.
    pub ridged: bool,
    pub min_eigenvalue: f64,
}

/// Eigenvalue floor below which the Gram matrix counts as singular.
pub const GRAM_EIGENVALUE_FLOOR: f64 = 1e-10;
/// Ridge added to near-singular Gram matrices before inversion.
pub const GRAM_RIDGE: f64 = 1e-8;

fn regularized_vertex(u: &DVector<f64>, v: &DMatrix<f64>) -> Result<RegularizedVertex> {
    let min_eigenvalue = v
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let ridged = min_eigenvalue <= GRAM_EIGENVALUE_FLOOR;
    let mut work = v.clone();
    if ridged {
        for j in 0..work.nrows() {
            work[(j, j)] += GRAM_RIDGE;
        }
    }
    let inv = work.try_inverse().ok_or_else(|| Error::NumericDomain {
        context: "regularized_vertex".into(),
        detail: "Gram matrix not invertible even with ridge".into(),
    })?;
    Ok(RegularizedVertex {
        phi: inv * u,
        ridged,
        min_eigenvalue,
    })
}

impl VectorSuffStats {
    /// Smallest eigenvalues of the two Gram matrices (positive definiteness
    /// is an assumption to report on, not enforce).
    pub fn min_eigenvalues(&self) -> (f64, f64) {
        let min_eig = |m: &DMatrix<f64>| {
            m.clone()
                .symmetric_eigen()
                .eigenvalues
                .iter()
                .copied()
                .fold(f64::INFINITY, f64::min)
        };
        (min_eig(&self.v_y), min_eig(&self.v_x))
    }

    /// Closed-form maximizer of the observation side, ridge-regularized
    /// when the Gram matrix is near singular.
    pub fn vertex_y(&self) -> Result<RegularizedVertex> {
        regularized_vertex(&self.u_y, &self.v_y)
    }

    /// Closed-form maximizer of the latent side.
    pub fn vertex_x(&self) -> Result<RegularizedVertex> {
        regularized_vertex(&self.u_x, &self.v_x)
    }
}

/// Left-endpoint discretized statistics with vector drifts. At
/// `r_Y = r_X = 1` this reproduces the scalar statistics bit for bit.
pub fn suff_stats_multidim(
    path: &PathPair,
    base: &StateSpaceModel,
    drifts: &VectorDrifts,
) -> Result<VectorSuffStats> {
    let grid = &path.grid;
    let m = grid.m();
    let dt = grid.dt();
    let knots = grid.knots();
    let (ry, rx) = (drifts.r_y, drifts.r_x);

    let mut u_y = DVector::zeros(ry);
    let mut v_y = DMatrix::zeros(ry, ry);
    let mut u_x = DVector::zeros(rx);
    let mut v_x = DMatrix::zeros(rx, rx);

    for k in 0..m {
        let t = knots[k];
        let by = (drifts.b_y)(path.y[k], path.x[k], t);
        let sy = (base.sigma_y)(path.y[k], path.x[k], t);
        if by.len() != ry {
            return Err(Error::InvalidArgument(format!(
                "b_Y returned {} components, expected {ry}",
                by.len()
            )));
        }
        if sy == 0.0 {
            return Err(Error::DivisionGuard {
                quantity: "sigma_Y".into(),
                index: k,
            });
        }
        let s2y = sy * sy;
        let dy = path.y[k + 1] - path.y[k];
        for j1 in 0..ry {
            for j2 in 0..ry {
                v_y[(j1, j2)] += by[j1] * by[j2] / s2y * dt;
            }
            u_y[j1] += by[j1] / s2y * dy;
        }

        let bx = (drifts.b_x)(path.x[k], t);
        let sx = (base.sigma_x)(path.x[k], t);
        if bx.len() != rx {
            return Err(Error::InvalidArgument(format!(
                "b_X returned {} components, expected {rx}",
                bx.len()
            )));
        }
        if sx == 0.0 {
            return Err(Error::DivisionGuard {
                quantity: "sigma_X".into(),
                index: k,
            });
        }
        let s2x = sx * sx;
        let dx = path.x[k + 1] - path.x[k];
        for j1 in 0..rx {
            for j2 in 0..rx {
                v_x[(j1, j2)] += bx[j1] * bx[j2] / s2x * dt;
            }
            u_x[j1] += bx[j1] / s2x * dx;
        }
    }

    Ok(VectorSuffStats {
        u_y,
        v_y,
        u_x,
        v_x,
        window: *grid.window(),
        m,
    })
}

/// `phi' (V phi)` accumulated row-major; at r = 1 this is exactly
/// `phi (v phi)`, matching the scalar conditional log-density grouping.
fn quad_form(phi: &DVector<f64>, v: &DMatrix<f64>) -> f64 {
    let mut acc = 0.0;
    for j in 0..phi.len() {
        let mut row = 0.0;
        for k in 0..phi.len() {
            row += v[(j, k)] * phi[k];
        }
        acc += phi[j] * row;
    }
    acc
}

/// Conditional log-density with vector multipliers:
/// `phi_Y' u_Y - phi_Y' v_Y phi_Y / 2 + phi_X' u_X - phi_X' v_X phi_X / 2`.
pub fn loglik_multidim(
    phi_y: &DVector<f64>,
    phi_x: &DVector<f64>,
    stats: &VectorSuffStats,
) -> Result<f64> {
    if phi_y.len() != stats.u_y.len() || phi_x.len() != stats.u_x.len() {
        return Err(Error::InvalidArgument(format!(
            "multiplier dimensions ({}, {}) do not match statistics ({}, {})",
            phi_y.len(),
            phi_x.len(),
            stats.u_y.len(),
            stats.u_x.len()
        )));
    }
    Ok(phi_y.dot(&stats.u_y) - 0.5 * quad_form(phi_y, &stats.v_y)
        + phi_x.dot(&stats.u_x)
        - 0.5 * quad_form(phi_x, &stats.v_x))
}

type VectorPsi = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
type VectorJac = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;

/// Vector-valued limit map `bar psi_Y : R^d -> R^{r_Y}` with its Jacobian
/// (closed form or central differences).
#[derive(Clone)]
pub struct VectorMaps {
    dim: usize,
    r: usize,
    psi: VectorPsi,
    jacobian: Option<VectorJac>,
}

impl VectorMaps {
    pub fn new(
        dim: usize,
        r: usize,
        psi: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
        jacobian: Option<VectorJac>,
    ) -> Self {
        VectorMaps {
            dim,
            r,
            psi: Arc::new(psi),
            jacobian,
        }
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn psi(&self, theta: &ParamVector) -> Result<DVector<f64>> {
        let v = (self.psi)(theta.as_slice());
        if v.len() != self.r {
            return Err(Error::InvalidArgument(format!(
                "vector map returned {} components, expected {}",
                v.len(),
                self.r
            )));
        }
        Ok(DVector::from_vec(v))
    }

    /// r x d Jacobian.
    pub fn jacobian(&self, theta: &ParamVector) -> Result<DMatrix<f64>> {
        if let Some(j) = &self.jacobian {
            let m = j(theta.as_slice());
            if m.nrows() != self.r || m.ncols() != self.dim {
                return Err(Error::InvalidArgument(format!(
                    "Jacobian is {}x{}, expected {}x{}",
                    m.nrows(),
                    m.ncols(),
                    self.r,
                    self.dim
                )));
            }
            return Ok(m);
        }
        let mut jac = DMatrix::zeros(self.r, self.dim);
        let theta_s = theta.as_slice();
        for k in 0..self.dim {
            let h = crate::model::FD_STEP_SCALE * theta_s[k].abs().max(1.0);
            let mut up = theta_s.to_vec();
            up[k] += h;
            let mut dn = theta_s.to_vec();
            dn[k] -= h;
            let fu = (self.psi)(&up);
            let fd = (self.psi)(&dn);
            for j in 0..self.r {
                jac[(j, k)] = (fu[j] - fd[j]) / (2.0 * h);
            }
        }
        Ok(jac)
    }
}

/// Pooled information with vector limit maps:
/// `I_{jk} = (d_j bar psi_Y)' K_Y_bar (d_k bar psi_Y)`, i.e. `J' K J` with
/// `J` the Jacobian. `K_Y_bar` must be symmetric positive definite.
pub fn pooled_fisher_multidim(
    theta: &ParamVector,
    limit_maps: &VectorMaps,
    k_y_bar: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if k_y_bar.nrows() != limit_maps.r() || k_y_bar.ncols() != limit_maps.r() {
        return Err(Error::InvalidArgument(
            "K_Y_bar shape does not match the vector map".into(),
        ));
    }
    let asym = (k_y_bar - k_y_bar.transpose()).abs().max();
    if asym > 1e-10 * k_y_bar.abs().max().max(1.0) {
        return Err(Error::AssumptionViolation(
            "K_Y_bar must be symmetric".into(),
        ));
    }
    if Cholesky::new(k_y_bar.clone()).is_none() {
        return Err(Error::AssumptionViolation(
            "K_Y_bar must be positive definite".into(),
        ));
    }
    let jac = limit_maps.jacobian(theta)?;
    Ok(jac.transpose() * k_y_bar * jac)
}
