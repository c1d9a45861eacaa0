//! State space SDE model definition.
//!
//! The observed process `Y` and latent process `X` solve the coupled pair
//!
//! ```text
//! dY(t) = psi_Y(theta) * b_Y(Y,X,t) dt + sigma_Y(Y,X,t) dW_Y(t)
//! dX(t) = psi_X(theta) * b_X(X,t)   dt + sigma_X(X,t)   dW_X(t)
//! ```
//!
//! with independent Wiener processes `W_Y`, `W_X`. The drift multipliers are
//! known real-valued maps of a shared parameter vector `theta`; the diffusion
//! coefficients are parameter-free. Statistics and likelihoods are taken over
//! an observation window `[a_T, b_T]` whose left edge drifts to infinity.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{stream_rng, DOMAIN_BOX_SAMPLER};

/// Central-difference step used by all finite-difference derivatives:
/// `h_k = FD_STEP_SCALE * max(1, |theta_k|)`.
pub const FD_STEP_SCALE: f64 = 1e-5;

/// Relative tolerance on Hessian symmetry.
pub const HESSIAN_SYMMETRY_RTOL: f64 = 1e-10;

/// Parameter vector `theta` in R^d, finite entries, fixed dimension.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument(
                "parameter vector must have dimension >= 1".into(),
            ));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "parameter vector has non-finite entry {bad}"
            )));
        }
        Ok(ParamVector(values))
    }

    /// Scalar parameter, the common case in the presets.
    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(vec![value])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.clone()
    }
}

impl std::ops::Index<usize> for ParamVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl fmt::Display for ParamVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        write!(f, ")")
    }
}

pub type ScalarMap = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type GradMap = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
pub type HessMap = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;

/// How derivatives of the parameter maps are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DerivativeMode {
    ClosedForm,
    FiniteDifference,
}

/// The known maps `psi_Y`, `psi_X` from theta to the drift multipliers,
/// together with their first two derivatives.
#[derive(Clone)]
pub struct ParamMaps {
    dim: usize,
    psi_y: ScalarMap,
    psi_x: ScalarMap,
    grad_psi_y: Option<GradMap>,
    grad_psi_x: Option<GradMap>,
    hess_psi_y: Option<HessMap>,
    hess_psi_x: Option<HessMap>,
    mode: DerivativeMode,
}

impl fmt::Debug for ParamMaps {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ParamMaps")
            .field("dim", &self.dim)
            .field("mode", &self.mode)
            .finish()
    }
}

/// Evaluated maps and derivative tensors at a fixed theta.
#[derive(Debug, Clone)]
pub struct MapEval {
    pub phi_y: f64,
    pub phi_x: f64,
    pub grad_y: DVector<f64>,
    pub grad_x: DVector<f64>,
    pub hess_y: DMatrix<f64>,
    pub hess_x: DMatrix<f64>,
}

fn central_gradient<F: Fn(&[f64]) -> f64>(f: &F, theta: &[f64]) -> Vec<f64> {
    let d = theta.len();
    let mut grad = vec![0.0; d];
    let mut work = theta.to_vec();
    for k in 0..d {
        let h = FD_STEP_SCALE * theta[k].abs().max(1.0);
        work[k] = theta[k] + h;
        let up = f(&work);
        work[k] = theta[k] - h;
        let dn = f(&work);
        work[k] = theta[k];
        grad[k] = (up - dn) / (2.0 * h);
    }
    grad
}

fn central_hessian<F: Fn(&[f64]) -> f64>(f: &F, theta: &[f64]) -> DMatrix<f64> {
    let d = theta.len();
    let mut hess = DMatrix::zeros(d, d);
    let f0 = f(theta);
    let step = |k: usize| FD_STEP_SCALE * theta[k].abs().max(1.0);
    let mut work = theta.to_vec();
    for j in 0..d {
        let hj = step(j);
        for k in j..d {
            let hk = step(k);
            let v = if j == k {
                work[j] = theta[j] + hj;
                let up = f(&work);
                work[j] = theta[j] - hj;
                let dn = f(&work);
                work[j] = theta[j];
                (up - 2.0 * f0 + dn) / (hj * hj)
            } else {
                work[j] = theta[j] + hj;
                work[k] = theta[k] + hk;
                let pp = f(&work);
                work[k] = theta[k] - hk;
                let pm = f(&work);
                work[j] = theta[j] - hj;
                let mm = f(&work);
                work[k] = theta[k] + hk;
                let mp = f(&work);
                work[j] = theta[j];
                work[k] = theta[k];
                (pp - pm - mp + mm) / (4.0 * hj * hk)
            };
            hess[(j, k)] = v;
            hess[(k, j)] = v;
        }
    }
    hess
}

impl ParamMaps {
    /// Maps with user-supplied closed-form derivatives.
    pub fn closed_form(
        dim: usize,
        psi_y: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        grad_psi_y: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
        hess_psi_y: impl Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static,
        psi_x: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        grad_psi_x: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
        hess_psi_x: impl Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        ParamMaps {
            dim,
            psi_y: Arc::new(psi_y),
            psi_x: Arc::new(psi_x),
            grad_psi_y: Some(Arc::new(grad_psi_y)),
            grad_psi_x: Some(Arc::new(grad_psi_x)),
            hess_psi_y: Some(Arc::new(hess_psi_y)),
            hess_psi_x: Some(Arc::new(hess_psi_x)),
            mode: DerivativeMode::ClosedForm,
        }
    }

    /// Maps whose derivatives are produced on demand by central differences.
    pub fn finite_difference(
        dim: usize,
        psi_y: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        psi_x: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        ParamMaps {
            dim,
            psi_y: Arc::new(psi_y),
            psi_x: Arc::new(psi_x),
            grad_psi_y: None,
            grad_psi_x: None,
            hess_psi_y: None,
            hess_psi_x: None,
            mode: DerivativeMode::FiniteDifference,
        }
    }

    /// Scalar model `psi_Y(theta) = theta_1`, `psi_X = 0`: the workhorse of
    /// the observation-driven presets.
    pub fn scalar_identity() -> Self {
        Self::closed_form(
            1,
            |t| t[0],
            |_| vec![1.0],
            |_| DMatrix::zeros(1, 1),
            |_| 0.0,
            |_| vec![0.0],
            |_| DMatrix::zeros(1, 1),
        )
    }

    /// Scalar model `psi_Y(theta) = theta_1`, `psi_X = const`.
    pub fn scalar_identity_with_const_x(phi_x: f64) -> Self {
        Self::closed_form(
            1,
            |t| t[0],
            |_| vec![1.0],
            |_| DMatrix::zeros(1, 1),
            move |_| phi_x,
            |_| vec![0.0],
            |_| DMatrix::zeros(1, 1),
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mode(&self) -> DerivativeMode {
        self.mode
    }

    pub fn check_dim(&self, theta: &ParamVector) -> Result<()> {
        if theta.dim() != self.dim {
            return Err(Error::InvalidArgument(format!(
                "parameter dimension mismatch: maps expect d={}, got d={}",
                self.dim,
                theta.dim()
            )));
        }
        Ok(())
    }

    fn finite(&self, value: f64, map: &str) -> Result<f64> {
        if value.is_finite() {
            Ok(value)
        } else {
            Err(Error::NumericDomain {
                context: map.into(),
                detail: format!("map returned {value}"),
            })
        }
    }

    pub fn psi_y(&self, theta: &ParamVector) -> Result<f64> {
        self.check_dim(theta)?;
        self.finite((self.psi_y)(theta.as_slice()), "psi_y")
    }

    pub fn psi_x(&self, theta: &ParamVector) -> Result<f64> {
        self.check_dim(theta)?;
        self.finite((self.psi_x)(theta.as_slice()), "psi_x")
    }

    pub fn grad_psi_y(&self, theta: &ParamVector) -> Result<DVector<f64>> {
        self.check_dim(theta)?;
        let g = match &self.grad_psi_y {
            Some(g) => g(theta.as_slice()),
            None => central_gradient(&|t: &[f64]| (self.psi_y)(t), theta.as_slice()),
        };
        if g.len() != self.dim {
            return Err(Error::InvalidArgument(format!(
                "grad_psi_y returned length {} for d={}",
                g.len(),
                self.dim
            )));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericDomain {
                context: "grad_psi_y".into(),
                detail: "non-finite gradient entry".into(),
            });
        }
        Ok(DVector::from_vec(g))
    }

    pub fn grad_psi_x(&self, theta: &ParamVector) -> Result<DVector<f64>> {
        self.check_dim(theta)?;
        let g = match &self.grad_psi_x {
            Some(g) => g(theta.as_slice()),
            None => central_gradient(&|t: &[f64]| (self.psi_x)(t), theta.as_slice()),
        };
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericDomain {
                context: "grad_psi_x".into(),
                detail: "non-finite gradient entry".into(),
            });
        }
        Ok(DVector::from_vec(g))
    }

    fn checked_hessian(&self, h: DMatrix<f64>, map: &str) -> Result<DMatrix<f64>> {
        if h.nrows() != self.dim || h.ncols() != self.dim {
            return Err(Error::InvalidArgument(format!(
                "{map} returned {}x{} for d={}",
                h.nrows(),
                h.ncols(),
                self.dim
            )));
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericDomain {
                context: map.into(),
                detail: "non-finite Hessian entry".into(),
            });
        }
        for j in 0..self.dim {
            for k in (j + 1)..self.dim {
                let scale = h[(j, k)].abs().max(h[(k, j)].abs()).max(1.0);
                if (h[(j, k)] - h[(k, j)]).abs() > HESSIAN_SYMMETRY_RTOL * scale {
                    return Err(Error::NumericDomain {
                        context: map.into(),
                        detail: format!(
                            "Hessian asymmetric at ({j},{k}): {} vs {}",
                            h[(j, k)],
                            h[(k, j)]
                        ),
                    });
                }
            }
        }
        Ok(h)
    }

    pub fn hess_psi_y(&self, theta: &ParamVector) -> Result<DMatrix<f64>> {
        self.check_dim(theta)?;
        let h = match &self.hess_psi_y {
            Some(h) => h(theta.as_slice()),
            None => central_hessian(&|t: &[f64]| (self.psi_y)(t), theta.as_slice()),
        };
        self.checked_hessian(h, "hess_psi_y")
    }

    pub fn hess_psi_x(&self, theta: &ParamVector) -> Result<DMatrix<f64>> {
        self.check_dim(theta)?;
        let h = match &self.hess_psi_x {
            Some(h) => h(theta.as_slice()),
            None => central_hessian(&|t: &[f64]| (self.psi_x)(t), theta.as_slice()),
        };
        self.checked_hessian(h, "hess_psi_x")
    }
}

/// Evaluate both maps and their derivative tensors at `theta`.
pub fn eval_maps(maps: &ParamMaps, theta: &ParamVector) -> Result<MapEval> {
    Ok(MapEval {
        phi_y: maps.psi_y(theta)?,
        phi_x: maps.psi_x(theta)?,
        grad_y: maps.grad_psi_y(theta)?,
        grad_x: maps.grad_psi_x(theta)?,
        hess_y: maps.hess_psi_y(theta)?,
        hess_x: maps.hess_psi_x(theta)?,
    })
}

/// Limiting ratio-bound constants of the drift-to-noise ratios:
///
/// ```text
/// K_Y (1 - alpha_Y1 x^2) <= b_Y^2 / sigma_Y^2 <= K_Y (1 + alpha_Y2 x^2)
/// K_X (1 - alpha_X1 x^2) <= b_X^2 / sigma_X^2 <= K_X (1 + alpha_X2 x^2)
/// ```
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RatioBounds {
    pub k_y: f64,
    pub k_x: f64,
    pub alpha_y1: f64,
    pub alpha_y2: f64,
    pub alpha_x1: f64,
    pub alpha_x2: f64,
}

impl RatioBounds {
    pub fn new(k_y: f64, k_x: f64, alphas: [f64; 4]) -> Result<Self> {
        if !(k_y > 0.0 && k_x > 0.0) {
            return Err(Error::InvalidArgument(
                "ratio-bound constants K_Y, K_X must be positive".into(),
            ));
        }
        if alphas.iter().any(|a| *a < 0.0 || !a.is_finite()) {
            return Err(Error::InvalidArgument(
                "ratio-bound alphas must be finite and non-negative".into(),
            ));
        }
        Ok(RatioBounds {
            k_y,
            k_x,
            alpha_y1: alphas[0],
            alpha_y2: alphas[1],
            alpha_x1: alphas[2],
            alpha_x2: alphas[3],
        })
    }

    /// Constant-ratio bounds (all alphas zero).
    pub fn constant(k_y: f64, k_x: f64) -> Result<Self> {
        Self::new(k_y, k_x, [0.0; 4])
    }
}

pub type ObsCoeff = Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>;
pub type LatentCoeff = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// The drift/diffusion quadruple plus parameter maps and initial values.
///
/// Coefficients are plain functions: `b_y`/`sigma_y` of `(y, x, t)` and
/// `b_x`/`sigma_x` of `(x, t)`. Initial values are non-random.
#[derive(Clone)]
pub struct StateSpaceModel {
    pub b_y: ObsCoeff,
    pub sigma_y: ObsCoeff,
    pub b_x: LatentCoeff,
    pub sigma_x: LatentCoeff,
    pub maps: ParamMaps,
    pub ratio_bounds: Option<RatioBounds>,
    pub y0: f64,
    pub x0: f64,
}

impl fmt::Debug for StateSpaceModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StateSpaceModel")
            .field("maps", &self.maps)
            .field("ratio_bounds", &self.ratio_bounds)
            .field("y0", &self.y0)
            .field("x0", &self.x0)
            .finish()
    }
}

impl StateSpaceModel {
    /// Build a model, checking the null-at-origin condition
    /// `b_X(0,t) = sigma_X(0,t) = 0` on a probe grid of t values.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b_y: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static,
        sigma_y: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static,
        b_x: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        sigma_x: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        maps: ParamMaps,
        ratio_bounds: Option<RatioBounds>,
        y0: f64,
        x0: f64,
    ) -> Result<Self> {
        let model = Self::new_unchecked(b_y, sigma_y, b_x, sigma_x, maps, ratio_bounds, y0, x0);
        for i in 0..=16 {
            let t = i as f64 * 8.0;
            if (model.b_x)(0.0, t) != 0.0 || (model.sigma_x)(0.0, t) != 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "latent coefficients must vanish at x = 0: found b_x(0,{t}) = {}, \
                     sigma_x(0,{t}) = {}",
                    (model.b_x)(0.0, t),
                    (model.sigma_x)(0.0, t)
                )));
            }
        }
        Ok(model)
    }

    /// Build without the null-at-origin probe. Needed for auxiliary models
    /// (dominating-measure samplers, additive-noise test rigs) that are not
    /// meant to satisfy the latent stability assumptions.
    #[allow(clippy::too_many_arguments)]
    pub fn new_unchecked(
        b_y: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static,
        sigma_y: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static,
        b_x: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        sigma_x: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        maps: ParamMaps,
        ratio_bounds: Option<RatioBounds>,
        y0: f64,
        x0: f64,
    ) -> Self {
        StateSpaceModel {
            b_y: Arc::new(b_y),
            sigma_y: Arc::new(sigma_y),
            b_x: Arc::new(b_x),
            sigma_x: Arc::new(sigma_x),
            maps,
            ratio_bounds,
            y0,
            x0,
        }
    }

    pub fn ratio_bounds(&self) -> Result<&RatioBounds> {
        self.ratio_bounds.as_ref().ok_or_else(|| {
            Error::Precondition("model has no ratio_bounds metadata".into())
        })
    }
}

/// Observation window `[a_T, b_T]` with `a_T = ln(1 + T)` and
/// `b_T = a_T + T`, so that `a_T -> inf` and `b_T - a_T = T`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ObservationWindow {
    t_horizon: f64,
    a: f64,
    b: f64,
    len: f64,
}

/// Construct the observation window for horizon `T > 0`.
pub fn make_window(t_horizon: f64) -> Result<ObservationWindow> {
    if !(t_horizon > 0.0) || !t_horizon.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "window horizon T must be positive and finite, got {t_horizon}"
        )));
    }
    let a = (1.0 + t_horizon).ln();
    Ok(ObservationWindow {
        t_horizon,
        a,
        b: a + t_horizon,
        len: t_horizon,
    })
}

impl ObservationWindow {
    pub fn t_horizon(&self) -> f64 {
        self.t_horizon
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    /// The window length `b_T - a_T`, exactly `T` by construction.
    pub fn len(&self) -> f64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Axis-aligned sampling box for the numerical assumption checks.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SampleBox {
    pub y: (f64, f64),
    pub x: (f64, f64),
    pub t: (f64, f64),
}

impl SampleBox {
    pub fn new(y: (f64, f64), x: (f64, f64), t: (f64, f64)) -> Result<Self> {
        for (lo, hi) in [y, x, t] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::InvalidArgument(format!(
                    "sample box range [{lo}, {hi}] is invalid"
                )));
            }
        }
        Ok(SampleBox { y, x, t })
    }
}

/// One sample point at which a ratio bound failed.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct RatioViolation {
    pub y: f64,
    pub x: f64,
    pub t: f64,
    pub ratio: f64,
    pub bound: f64,
    pub kind: ViolationKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    ObsLower,
    ObsUpper,
    LatentLower,
    LatentUpper,
    SigmaZero,
}

/// Sampled-witness report for the growth and ratio-bound assumptions.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ValidationReport {
    /// max over samples of max(b_Y^2, sigma_Y^2) / (1 + y^2).
    pub growth_witness_y: f64,
    pub ratio_y_ok: bool,
    pub ratio_x_ok: bool,
    pub violations: Vec<RatioViolation>,
    pub n_samples: usize,
}

/// Sample `(y, x, t)` uniformly in the box and check the growth witness and
/// both drift-to-noise ratio bounds against the model's limiting constants.
pub fn check_growth_bounds(
    model: &StateSpaceModel,
    sample_box: &SampleBox,
    n_samples: usize,
    seed: u64,
) -> Result<ValidationReport> {
    let rb = *model.ratio_bounds()?;
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be >= 1".into()));
    }
    let mut rng = stream_rng(seed, DOMAIN_BOX_SAMPLER, 0);
    let mut draw = |range: (f64, f64)| -> f64 {
        if range.0 == range.1 {
            range.0
        } else {
            rng.gen_range(range.0..=range.1)
        }
    };

    let mut growth_witness_y: f64 = 0.0;
    let mut violations = Vec::new();
    let mut ratio_y_ok = true;
    let mut ratio_x_ok = true;

    for _ in 0..n_samples {
        let y = draw(sample_box.y);
        let x = draw(sample_box.x);
        let t = draw(sample_box.t);

        let by = (model.b_y)(y, x, t);
        let sy = (model.sigma_y)(y, x, t);
        growth_witness_y = growth_witness_y.max(by * by / (1.0 + y * y));
        growth_witness_y = growth_witness_y.max(sy * sy / (1.0 + y * y));

        if sy == 0.0 {
            ratio_y_ok = false;
            violations.push(RatioViolation {
                y,
                x,
                t,
                ratio: f64::NAN,
                bound: f64::NAN,
                kind: ViolationKind::SigmaZero,
            });
        } else {
            let ratio = by * by / (sy * sy);
            let lower = rb.k_y * (1.0 - rb.alpha_y1 * x * x);
            let upper = rb.k_y * (1.0 + rb.alpha_y2 * x * x);
            if ratio < lower {
                ratio_y_ok = false;
                violations.push(RatioViolation {
                    y,
                    x,
                    t,
                    ratio,
                    bound: lower,
                    kind: ViolationKind::ObsLower,
                });
            }
            if ratio > upper {
                ratio_y_ok = false;
                violations.push(RatioViolation {
                    y,
                    x,
                    t,
                    ratio,
                    bound: upper,
                    kind: ViolationKind::ObsUpper,
                });
            }
        }

        let bx = (model.b_x)(x, t);
        let sx = (model.sigma_x)(x, t);
        if sx == 0.0 {
            // x = 0 is the measure-zero point where both latent coefficients
            // vanish; a box with positive width never hits it.
            if x != 0.0 {
                ratio_x_ok = false;
                violations.push(RatioViolation {
                    y,
                    x,
                    t,
                    ratio: f64::NAN,
                    bound: f64::NAN,
                    kind: ViolationKind::SigmaZero,
                });
            }
        } else {
            let ratio = bx * bx / (sx * sx);
            let lower = rb.k_x * (1.0 - rb.alpha_x1 * x * x);
            let upper = rb.k_x * (1.0 + rb.alpha_x2 * x * x);
            if ratio < lower {
                ratio_x_ok = false;
                violations.push(RatioViolation {
                    y,
                    x,
                    t,
                    ratio,
                    bound: lower,
                    kind: ViolationKind::LatentLower,
                });
            }
            if ratio > upper {
                ratio_x_ok = false;
                violations.push(RatioViolation {
                    y,
                    x,
                    t,
                    ratio,
                    bound: upper,
                    kind: ViolationKind::LatentUpper,
                });
            }
        }
    }

    Ok(ValidationReport {
        growth_witness_y,
        ratio_y_ok,
        ratio_x_ok,
        violations,
        n_samples,
    })
}
