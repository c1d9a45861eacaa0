//! Stochastic stability of the latent process.
//!
//! The sufficient condition checked here: a non-negative `V(x,t)`, an
//! exponent `p > 0`, a nondecreasing `gamma(t)` and an integrable `eta(t)`
//! with
//!
//! ```text
//! gamma(t) |x|^p <= V(x,t)    and    LV(x,t) <= eta(t)   for x != 0,
//! ```
//!
//! where `LV = V_t + V_x (phi_X b_X) + sigma_X^2 V_xx / 2` is the generator
//! along the parameterized latent SDE. When it holds, paths satisfy the
//! almost-sure envelope `|x(t)| <= xi lambda(t)` with
//! `lambda = gamma^{-1/p}` and a finite random level `xi`. The checks are
//! numerical witnesses on finite grids: they can falsify, never certify.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::{ParamVector, StateSpaceModel};
use crate::simulate::LatentBatch;

type Surface = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
type Curve = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Horizon of the eta-integrability probe.
pub const ETA_INTEGRAL_T_MAX: f64 = 1e4;

/// A candidate Lyapunov certificate.
#[derive(Clone)]
pub struct LyapunovSpec {
    v: Surface,
    v_t: Surface,
    v_x: Surface,
    v_xx: Surface,
    p: f64,
    gamma: Curve,
    eta: Curve,
}

impl fmt::Debug for LyapunovSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LyapunovSpec").field("p", &self.p).finish()
    }
}

/// Adaptive Simpson quadrature, plain recursive bisection.
#[allow(clippy::too_many_arguments)]
fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, fa: f64, fm: f64, fb: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
        left + right + (left + right - whole) / 15.0
    } else {
        simpson(f, a, m, fa, flm, fm, 0.5 * tol, depth - 1)
            + simpson(f, m, b, fm, frm, fb, 0.5 * tol, depth - 1)
    }
}

fn integrate<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> f64 {
    let m = 0.5 * (a + b);
    simpson(f, a, b, f(a), f(m), f(b), 1e-9 * (b - a).max(1.0), 24)
}

impl LyapunovSpec {
    /// Validate and build a certificate. Checks, on probe grids over
    /// `[0, ETA_INTEGRAL_T_MAX]`: non-negativity of `V` along `x = 1`,
    /// monotonicity of `gamma`, non-negativity of `eta`, and convergence of
    /// the eta integral (tail over the upper half contributes < 1% of the
    /// total).
    pub fn new(
        v: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        v_t: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        v_x: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        v_xx: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        p: f64,
        gamma: impl Fn(f64) -> f64 + Send + Sync + 'static,
        eta: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        if !(p > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "Lyapunov exponent p must be positive, got {p}"
            )));
        }
        let spec = LyapunovSpec {
            v: Arc::new(v),
            v_t: Arc::new(v_t),
            v_x: Arc::new(v_x),
            v_xx: Arc::new(v_xx),
            p,
            gamma: Arc::new(gamma),
            eta: Arc::new(eta),
        };

        let t_max = ETA_INTEGRAL_T_MAX;
        let mut prev_gamma = f64::NEG_INFINITY;
        for i in 0..=256 {
            let t = t_max * i as f64 / 256.0;
            let g = (spec.gamma)(t);
            if !(g > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "gamma must be positive, gamma({t}) = {g}"
                )));
            }
            if g < prev_gamma {
                return Err(Error::InvalidArgument(format!(
                    "gamma must be nondecreasing, decrease at t = {t}"
                )));
            }
            prev_gamma = g;
            if (spec.eta)(t) < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "eta must be non-negative, eta({t}) < 0"
                )));
            }
            if (spec.v)(1.0, t) < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "V must be non-negative, V(1, {t}) < 0"
                )));
            }
        }

        let eta_fn = |t: f64| (spec.eta)(t);
        let total = integrate(&eta_fn, 0.0, t_max);
        if total > 0.0 {
            let tail = integrate(&eta_fn, 0.5 * t_max, t_max);
            if tail >= 0.01 * total {
                return Err(Error::InvalidArgument(format!(
                    "eta integral does not look convergent: tail share {:.3}",
                    tail / total
                )));
            }
        }
        Ok(spec)
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn v(&self, x: f64, t: f64) -> f64 {
        (self.v)(x, t)
    }

    pub fn gamma(&self, t: f64) -> f64 {
        (self.gamma)(t)
    }

    pub fn eta(&self, t: f64) -> f64 {
        (self.eta)(t)
    }

    /// The decay envelope `lambda(t) = gamma(t)^{-1/p}`.
    pub fn lambda(&self, t: f64) -> f64 {
        (self.gamma)(t).powf(-1.0 / self.p)
    }
}

/// Generator of `V` along the latent SDE with parameterized drift:
/// `LV = V_t + V_x (phi_X b_X) + sigma_X^2 V_xx / 2`.
pub fn lv_operator(
    spec: &LyapunovSpec,
    model: &StateSpaceModel,
    theta: &ParamVector,
    x: f64,
    t: f64,
) -> Result<f64> {
    if !x.is_finite() || !t.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "lv_operator needs finite (x, t), got ({x}, {t})"
        )));
    }
    let phi_x = model.maps.psi_x(theta)?;
    let vt = (spec.v_t)(x, t);
    let vx = (spec.v_x)(x, t);
    let vxx = (spec.v_xx)(x, t);
    if !vt.is_finite() || !vx.is_finite() || !vxx.is_finite() {
        return Err(Error::NumericDomain {
            context: "lv_operator".into(),
            detail: format!("non-finite partials of V at ({x}, {t})"),
        });
    }
    let sx = (model.sigma_x)(x, t);
    Ok(vt + vx * phi_x * (model.b_x)(x, t) + 0.5 * sx * sx * vxx)
}

/// One grid node at which a condition failed.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct H8Violation {
    pub x: f64,
    pub t: f64,
    pub kind: H8ViolationKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum H8ViolationKind {
    LowerBound,
    Generator,
}

/// Grid-check report, exportable as JSON.
#[derive(Debug, Clone, serde::Serialize)]
pub struct H8Report {
    pub lower_bound_ok: bool,
    pub generator_ok: bool,
    pub violations: Vec<H8Violation>,
}

/// Grid half-notch excluding x = 0, where the conditions are not required.
pub const H8_NOTCH: f64 = 1e-6;

/// Check `gamma(t)|x|^p <= V(x,t)` and `LV(x,t) <= eta(t)` on an
/// `n_grid x n_grid` lattice over `x_range x t_range`. Nodes inside the
/// `+/- 1e-6` notch around x = 0 are moved to the notch edge.
pub fn check_h8(
    spec: &LyapunovSpec,
    model: &StateSpaceModel,
    theta: &ParamVector,
    x_range: (f64, f64),
    t_range: (f64, f64),
    n_grid: usize,
) -> Result<H8Report> {
    if n_grid < 2 {
        return Err(Error::InvalidArgument("need n_grid >= 2".into()));
    }
    if !(x_range.0 < x_range.1) || !(t_range.0 <= t_range.1) {
        return Err(Error::InvalidArgument("empty grid ranges".into()));
    }
    let nodes = |range: (f64, f64)| -> Vec<f64> {
        (0..n_grid)
            .map(|i| range.0 + (range.1 - range.0) * i as f64 / (n_grid - 1) as f64)
            .collect()
    };
    let xs: Vec<f64> = nodes(x_range)
        .into_iter()
        .map(|x| {
            if x.abs() < H8_NOTCH {
                if x < 0.0 {
                    -H8_NOTCH
                } else {
                    H8_NOTCH
                }
            } else {
                x
            }
        })
        .collect();
    let ts = nodes(t_range);

    let mut violations = Vec::new();
    let mut lower_ok = true;
    let mut generator_ok = true;
    for &t in &ts {
        let g = spec.gamma(t);
        let eta = spec.eta(t);
        for &x in &xs {
            // sub-ulp slack so exact-equality certificates (gamma |x|^p = V)
            // do not trip on powf rounding
            let v = spec.v(x, t);
            if g * x.abs().powf(spec.p()) > v + 1e-12 * v.abs() {
                lower_ok = false;
                violations.push(H8Violation {
                    x,
                    t,
                    kind: H8ViolationKind::LowerBound,
                });
            }
            if lv_operator(spec, model, theta, x, t)? > eta {
                generator_ok = false;
                violations.push(H8Violation {
                    x,
                    t,
                    kind: H8ViolationKind::Generator,
                });
            }
        }
    }
    Ok(H8Report {
        lower_bound_ok: lower_ok,
        generator_ok,
        violations,
    })
}

/// Empirical envelope levels of a latent batch.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EnvelopeReport {
    /// max over paths of the per-path level.
    pub xi_hat: f64,
    pub per_path_xi: Vec<f64>,
}

impl EnvelopeReport {
    /// Order statistic of the per-path levels (q in [0, 1]).
    pub fn quantile(&self, q: f64) -> f64 {
        let mut sorted = self.per_path_xi.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let idx = ((sorted.len() as f64 - 1.0) * q).round() as usize;
        sorted[idx]
    }
}

/// Measure `xi_hat = max_k |x(t_k)| / lambda(t_k)` per path against the
/// envelope `lambda = gamma^{-1/p}` of the certificate.
pub fn empirical_envelope(batch: &LatentBatch, spec: &LyapunovSpec) -> Result<EnvelopeReport> {
    let knots = batch.grid.knots();
    let lambdas: Vec<f64> = knots.iter().map(|&t| spec.lambda(t)).collect();
    if let Some(bad) = lambdas.iter().position(|l| !(*l > 0.0) || !l.is_finite()) {
        return Err(Error::NumericDomain {
            context: "empirical_envelope".into(),
            detail: format!(
                "lambda underflow at knot {bad} (t = {}, lambda = {})",
                knots[bad], lambdas[bad]
            ),
        });
    }
    let per_path_xi: Vec<f64> = batch
        .paths
        .iter()
        .map(|path| {
            path.iter()
                .zip(&lambdas)
                .map(|(x, l)| x.abs() / l)
                .fold(0.0f64, f64::max)
        })
        .collect();
    let xi_hat = per_path_xi.iter().copied().fold(0.0f64, f64::max);
    Ok(EnvelopeReport {
        xi_hat,
        per_path_xi,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_window, ParamMaps};
    use crate::simulate::TimeGrid;
    use approx::assert_relative_eq;

    fn quadratic_v() -> LyapunovSpec {
        LyapunovSpec::new(
            |x, _| x * x,
            |_, _| 0.0,
            |x, _| 2.0 * x,
            |_, _| 2.0,
            2.0,
            |_| 1.0,
            |_| 0.0,
        )
        .unwrap()
    }

    fn latent_model(a: f64, s: f64, phi_x: f64) -> StateSpaceModel {
        StateSpaceModel::new(
            |_, _, _| 1.0,
            |_, _, _| 1.0,
            move |x, _| -a * x,
            move |x, _| s * x,
            ParamMaps::scalar_identity_with_const_x(phi_x),
            None,
            0.0,
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn lv_direct_substitution() {
        // V = x^2, b_X = -x, sigma_X = 0, phi_X = 1 -> LV = -2 x^2
        let spec = quadratic_v();
        let model = StateSpaceModel::new(
            |_, _, _| 1.0,
            |_, _, _| 1.0,
            |x, _| -x,
            |_, _| 0.0,
            ParamMaps::scalar_identity_with_const_x(1.0),
            None,
            0.0,
            1.0,
        )
        .unwrap();
        let theta = ParamVector::scalar(0.0).unwrap();
        for x in [-3.0, 0.5, 2.0] {
            let lv = lv_operator(&spec, &model, &theta, x, 1.0).unwrap();
            assert_relative_eq!(lv, -2.0 * x * x, max_relative = 1e-14);
        }
    }

    #[test]
    fn lv_at_origin_reduces_to_time_partial() {
        let spec = LyapunovSpec::new(
            |x, t| x * x + 0.5 * (1.0 - (-t).exp()),
            |_, t| 0.5 * (-t).exp(),
            |x, _| 2.0 * x,
            |_, _| 2.0,
            2.0,
            |_| 1.0,
            |t| (-t).exp(),
        )
        .unwrap();
        let model = latent_model(1.0, 0.5, 1.0);
        let theta = ParamVector::scalar(0.0).unwrap();
        let lv = lv_operator(&spec, &model, &theta, 0.0, 2.0).unwrap();
        assert_relative_eq!(lv, 0.5 * (-2.0f64).exp(), max_relative = 1e-14);
    }

    #[test]
    fn lv_gbm_sign_depends_on_sigma() {
        // V = x^2, b_X = -x, sigma_X = s x, phi_X = 1 -> LV = (s^2 - 2) x^2
        let spec = quadratic_v();
        let theta = ParamVector::scalar(0.0).unwrap();
        let lv_small = lv_operator(&spec, &latent_model(1.0, 0.5, 1.0), &theta, 2.0, 0.0).unwrap();
        assert_relative_eq!(lv_small, (0.25 - 2.0) * 4.0, max_relative = 1e-14);
        let lv_big = lv_operator(&spec, &latent_model(1.0, 2.0, 1.0), &theta, 2.0, 0.0).unwrap();
        assert_relative_eq!(lv_big, (4.0 - 2.0) * 4.0, max_relative = 1e-14);
    }

    #[test]
    fn lv_is_linear_in_v() {
        let model = latent_model(1.0, 0.5, 1.0);
        let theta = ParamVector::scalar(0.0).unwrap();
        let v1 = quadratic_v();
        let v2 = LyapunovSpec::new(
            |x, t| x.abs().sqrt() * (1.0 + 1.0 / (1.0 + t)),
            |x, t| -x.abs().sqrt() / ((1.0 + t) * (1.0 + t)),
            |x, t| 0.5 * x.signum() / x.abs().sqrt() * (1.0 + 1.0 / (1.0 + t)),
            |x, t| -0.25 / x.abs().powf(1.5) * (1.0 + 1.0 / (1.0 + t)),
            2.0,
            |_| 1.0,
            |_| 0.0,
        )
        .unwrap();
        let sum = LyapunovSpec::new(
            |x, t| x * x + x.abs().sqrt() * (1.0 + 1.0 / (1.0 + t)),
            |x, t| -x.abs().sqrt() / ((1.0 + t) * (1.0 + t)),
            |x, t| 2.0 * x + 0.5 * x.signum() / x.abs().sqrt() * (1.0 + 1.0 / (1.0 + t)),
            |x, t| 2.0 - 0.25 / x.abs().powf(1.5) * (1.0 + 1.0 / (1.0 + t)),
            2.0,
            |_| 1.0,
            |_| 0.0,
        )
        .unwrap();
        for (x, t) in [(0.7, 0.0), (-1.3, 2.0), (2.5, 10.0)] {
            let a = lv_operator(&v1, &model, &theta, x, t).unwrap();
            let b = lv_operator(&v2, &model, &theta, x, t).unwrap();
            let c = lv_operator(&sum, &model, &theta, x, t).unwrap();
            assert_relative_eq!(c, a + b, max_relative = 1e-12);
        }
    }

    #[test]
    fn h8_passes_for_contracting_drift() {
        // V = x^2, p = 2, gamma = 1, eta = 0, b_X = -x, sigma_X = 0
        let spec = quadratic_v();
        let model = StateSpaceModel::new(
            |_, _, _| 1.0,
            |_, _, _| 1.0,
            |x, _| -x,
            |_, _| 0.0,
            ParamMaps::scalar_identity_with_const_x(1.0),
            None,
            0.0,
            1.0,
        )
        .unwrap();
        let theta = ParamVector::scalar(0.0).unwrap();
        let rep = check_h8(&spec, &model, &theta, (-10.0, 10.0), (0.0, 100.0), 201).unwrap();
        assert!(rep.lower_bound_ok && rep.generator_ok);
        assert!(rep.violations.is_empty());
    }

    #[test]
    fn h8_lower_bound_fails_for_growing_gamma_with_static_v() {
        let spec = LyapunovSpec::new(
            |x, _| x * x,
            |_, _| 0.0,
            |x, _| 2.0 * x,
            |_, _| 2.0,
            2.0,
            |t| 1.0 + t,
            |_| 0.0,
        )
        .unwrap();
        let model = StateSpaceModel::new(
            |_, _, _| 1.0,
            |_, _, _| 1.0,
            |x, _| -x,
            |_, _| 0.0,
            ParamMaps::scalar_identity_with_const_x(1.0),
            None,
            0.0,
            1.0,
        )
        .unwrap();
        let theta = ParamVector::scalar(0.0).unwrap();
        let rep = check_h8(&spec, &model, &theta, (-10.0, 10.0), (0.0, 100.0), 101).unwrap();
        assert!(!rep.lower_bound_ok);
        assert!(rep
            .violations
            .iter()
            .any(|v| v.kind == H8ViolationKind::LowerBound && v.x.abs() <= 1.0 + 1e-9));
    }

    #[test]
    fn h8_generator_boundary_for_gbm_time_weighted_v() {
        // V = e^{eps t} x^2, gamma = e^{eps t}: LV = (eps - 2a + s^2) V, so
        // the generator check flips at eps* = 2a - s^2 (= 1.75 for the
        // stable documented configuration).
        let theta = ParamVector::scalar(0.0).unwrap();
        let model = latent_model(1.0, 0.5, 1.0);
        let build = |eps: f64| {
            LyapunovSpec::new(
                move |x, t| (eps * t).exp() * x * x,
                move |x, t| eps * (eps * t).exp() * x * x,
                move |x, t| 2.0 * (eps * t).exp() * x,
                move |_, t| 2.0 * (eps * t).exp(),
                2.0,
                move |t| (eps * t).exp(),
                |_| 0.0,
            )
            .unwrap()
        };
        // t-range kept near the origin so e^{eps t} stays representable
        let pass = check_h8(&build(1.7), &model, &theta, (-10.0, 10.0), (0.0, 50.0), 101).unwrap();
        assert!(pass.generator_ok && pass.lower_bound_ok);
        let fail = check_h8(&build(1.8), &model, &theta, (-10.0, 10.0), (0.0, 50.0), 101).unwrap();
        assert!(!fail.generator_ok);
    }

    #[test]
    fn h8_violation_set_shrinks_under_coarsening() {
        // every coarse node is a refined node here, so a refinement that
        // passes implies the coarse grid passes
        let spec = quadratic_v();
        let model = latent_model(1.0, 0.5, 1.0);
        let theta = ParamVector::scalar(0.0).unwrap();
        let fine = check_h8(&spec, &model, &theta, (-8.0, 8.0), (0.0, 10.0), 41).unwrap();
        let coarse = check_h8(&spec, &model, &theta, (-8.0, 8.0), (0.0, 10.0), 21).unwrap();
        if fine.violations.is_empty() {
            assert!(coarse.violations.is_empty());
        }
        assert!(coarse.violations.len() <= fine.violations.len());
    }

    #[test]
    fn envelope_zero_and_identity_paths() {
        let spec = quadratic_v(); // lambda = 1
        let window = make_window(4.0).unwrap();
        let grid = TimeGrid::new(window, 8).unwrap();
        let zeros = vec![0.0; grid.m() + 1];
        let lambda_path: Vec<f64> = grid.knots().iter().map(|&t| spec.lambda(t)).collect();
        let batch = LatentBatch {
            grid: grid.clone(),
            paths: vec![zeros, lambda_path],
        };
        let rep = empirical_envelope(&batch, &spec).unwrap();
        assert_eq!(rep.per_path_xi[0], 0.0);
        assert_relative_eq!(rep.per_path_xi[1], 1.0, max_relative = 1e-14);
        assert_relative_eq!(rep.xi_hat, 1.0, max_relative = 1e-14);
    }

    #[test]
    fn envelope_depends_only_on_sampled_values() {
        // the same values on a re-indexed grid give the same xi when lambda
        // is evaluated at the same knots
        let spec = quadratic_v();
        let g1 = TimeGrid::new(make_window(4.0).unwrap(), 16).unwrap();
        let g2 = TimeGrid::new(make_window(8.0).unwrap(), 16).unwrap();
        let vals: Vec<f64> = (0..=16).map(|k| (k as f64 * 0.37).sin()).collect();
        let r1 = empirical_envelope(
            &LatentBatch {
                grid: g1,
                paths: vec![vals.clone()],
            },
            &spec,
        )
        .unwrap();
        let r2 = empirical_envelope(
            &LatentBatch {
                grid: g2,
                paths: vec![vals],
            },
            &spec,
        )
        .unwrap();
        // constant lambda: knot positions are irrelevant
        assert_eq!(r1.xi_hat, r2.xi_hat);
    }

    #[test]
    fn envelope_lambda_underflow_is_an_error() {
        let spec = LyapunovSpec::new(
            |x, _| x * x,
            |_, _| 0.0,
            |x, _| 2.0 * x,
            |_, _| 2.0,
            2.0,
            |t| (t.min(700.0)).exp().powi(2), // lambda = e^{-t} underflows
            |_| 0.0,
        )
        .unwrap();
        let grid = TimeGrid::new(make_window(2000.0).unwrap(), 8).unwrap();
        let batch = LatentBatch {
            grid: grid.clone(),
            paths: vec![vec![1.0; grid.m() + 1]],
        };
        assert!(empirical_envelope(&batch, &spec).is_err());
    }

    #[test]
    fn spec_rejects_decreasing_gamma() {
        let res = LyapunovSpec::new(
            |x, _| x * x,
            |_, _| 0.0,
            |x, _| 2.0 * x,
            |_, _| 2.0,
            2.0,
            |t| 1.0 / (1.0 + t),
            |_| 0.0,
        );
        assert!(res.is_err());
    }

    #[test]
    fn spec_rejects_non_integrable_eta() {
        let res = LyapunovSpec::new(
            |x, _| x * x,
            |_, _| 0.0,
            |x, _| 2.0 * x,
            |_, _| 2.0,
            2.0,
            |_| 1.0,
            |_| 1.0, // constant eta: tail is half the total
        );
        assert!(res.is_err());
    }

    #[test]
    fn spec_accepts_integrable_eta() {
        let spec = LyapunovSpec::new(
            |x, _| x * x,
            |_, _| 0.0,
            |x, _| 2.0 * x,
            |_, _| 2.0,
            2.0,
            |_| 1.0,
            |t| (-t).exp(),
        );
        assert!(spec.is_ok());
    }
}
