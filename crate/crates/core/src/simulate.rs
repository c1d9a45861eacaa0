//! Euler-Maruyama simulation of the coupled observation/latent pair.
//!
//! The recursion on a uniform grid `t_k = a_T + k (b_T - a_T)/m` is
//!
//! ```text
//! x_{k+1} = x_k + phi_X b_X(x_k, t_k) dt + sigma_X(x_k, t_k) dW_X,k
//! y_{k+1} = y_k + phi_Y b_Y(y_k, x_k, t_k) dt + sigma_Y(y_k, x_k, t_k) dW_Y,k
//! ```
//!
//! with independent Wiener increment streams for the two equations. The
//! discretization is strong order 1/2; determinism is guaranteed by the
//! stream scheme in [`crate::rng`].

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{ObservationWindow, ParamVector, StateSpaceModel};
use crate::rng::{
    derive_seed, stream_rng, DOMAIN_LATENT_PATH, DOMAIN_WIENER_X, DOMAIN_WIENER_Y,
};

/// States beyond this magnitude abort the recursion.
pub const BLOWUP_GUARD: f64 = 1e12;

/// Uniform time grid of `m` steps over an observation window.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    window: ObservationWindow,
    m: usize,
    knots: Vec<f64>,
}

impl TimeGrid {
    pub fn new(window: ObservationWindow, m: usize) -> Result<Self> {
        if m < 2 {
            return Err(Error::InvalidArgument(format!(
                "time grid needs m >= 2 steps, got {m}"
            )));
        }
        let dt = window.len() / m as f64;
        let knots = (0..=m).map(|k| window.a() + k as f64 * dt).collect();
        Ok(TimeGrid { window, m, knots })
    }

    pub fn window(&self) -> &ObservationWindow {
        &self.window
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn dt(&self) -> f64 {
        self.window.len() / self.m as f64
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Keep every `stride`-th knot; `stride` must divide `m`. Models a
    /// coarser observation of the same underlying data.
    pub fn decimate(&self, stride: usize) -> Result<TimeGrid> {
        if stride == 0 || self.m % stride != 0 || self.m / stride < 2 {
            return Err(Error::InvalidArgument(format!(
                "stride {stride} does not evenly coarsen m = {}",
                self.m
            )));
        }
        Ok(TimeGrid {
            window: self.window,
            m: self.m / stride,
            knots: self.knots.iter().copied().step_by(stride).collect(),
        })
    }
}

/// One simulated trajectory pair on a grid, with the Wiener increments that
/// produced it.
#[derive(Debug, Clone)]
pub struct PathPair {
    pub grid: TimeGrid,
    pub y: Vec<f64>,
    pub x: Vec<f64>,
    pub dw_y: Option<Vec<f64>>,
    pub dw_x: Option<Vec<f64>>,
    pub seed: u64,
}

impl PathPair {
    /// Total observation-side Wiener increment `W_Y(b_T) - W_Y(a_T)`.
    pub fn w_y_increment(&self) -> Option<f64> {
        self.dw_y.as_ref().map(|dw| dw.iter().sum())
    }

    /// Sub-sample every `stride`-th knot (same underlying path, coarser
    /// observation grid).
    pub fn decimate(&self, stride: usize) -> Result<PathPair> {
        let grid = self.grid.decimate(stride)?;
        Ok(PathPair {
            grid,
            y: self.y.iter().copied().step_by(stride).collect(),
            x: self.x.iter().copied().step_by(stride).collect(),
            dw_y: None,
            dw_x: None,
            seed: self.seed,
        })
    }

    /// Write the path as CSV (`t,y,x`, 17 significant digits).
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "t,y,x")?;
        for (k, t) in self.grid.knots().iter().enumerate() {
            writeln!(out, "{:.16e},{:.16e},{:.16e}", t, self.y[k], self.x[k])?;
        }
        Ok(())
    }
}

/// A batch of latent-only trajectories sharing one grid.
#[derive(Debug, Clone)]
pub struct LatentBatch {
    pub grid: TimeGrid,
    pub paths: Vec<Vec<f64>>,
}

/// Drift handling for latent batch generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentDrift {
    /// `dX = sigma_X dW`: the dominating-measure sampler. The drift is never
    /// evaluated.
    Null,
    /// Full parameterized drift `phi_X b_X`.
    Full,
}

/// `m` iid N(0, dt) increments from the stream keyed by `seed`.
pub fn wiener_increments(m: usize, dt: f64, seed: u64) -> Result<Vec<f64>> {
    if m < 1 {
        return Err(Error::InvalidArgument("need m >= 1 increments".into()));
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "step size must be positive, got {dt}"
        )));
    }
    let mut rng = stream_rng(seed, 0, 0);
    let scale = dt.sqrt();
    Ok((0..m)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect())
}

fn check_increment_scale(dw: &[f64], dt: f64) -> Result<()> {
    // Sanity envelope on the stored increments; for m >= 1000 a true
    // N(0, dt) sample lies inside it with overwhelming probability.
    if dw.len() < 1000 {
        return Ok(());
    }
    let n = dw.len() as f64;
    let mean = dw.iter().sum::<f64>() / n;
    let var = dw.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let ratio = var / dt;
    if !(0.5..=2.0).contains(&ratio) {
        return Err(Error::NumericDomain {
            context: "wiener_increments".into(),
            detail: format!("increment variance ratio {ratio} outside [0.5, 2.0]"),
        });
    }
    Ok(())
}

/// Options for [`simulate_pair_opts`].
#[derive(Debug, Clone, Copy, Default)]
pub struct SimOptions {
    /// Run the recursion from near t = 0 and discard knots below `a_T`
    /// instead of attaching the initial values at `a_T` directly.
    pub burn_in: bool,
}

/// Simulate the coupled pair under parameter `theta` (initial values attached
/// at the window start).
pub fn simulate_pair(
    model: &StateSpaceModel,
    theta: &ParamVector,
    grid: &TimeGrid,
    seed: u64,
) -> Result<PathPair> {
    simulate_pair_opts(model, theta, grid, seed, SimOptions::default())
}

pub fn simulate_pair_opts(
    model: &StateSpaceModel,
    theta: &ParamVector,
    grid: &TimeGrid,
    seed: u64,
    opts: SimOptions,
) -> Result<PathPair> {
    let phi_y = model.maps.psi_y(theta)?;
    let phi_x = model.maps.psi_x(theta)?;
    let m = grid.m();
    let dt = grid.dt();

    // Burn-in prepends floor(a_T / dt) steps so the recursion starts within
    // one step of t = 0; those knots are discarded below.
    let n_burn = if opts.burn_in {
        (grid.window().a() / dt).floor() as usize
    } else {
        0
    };
    let total = n_burn + m;

    let dw_y = wiener_increments(total, dt, derive_seed(seed, DOMAIN_WIENER_Y, 0))?;
    let dw_x = wiener_increments(total, dt, derive_seed(seed, DOMAIN_WIENER_X, 0))?;

    let t_start = grid.window().a() - n_burn as f64 * dt;
    let mut y = model.y0;
    let mut x = model.x0;
    let mut ys = Vec::with_capacity(m + 1);
    let mut xs = Vec::with_capacity(m + 1);
    if n_burn == 0 {
        ys.push(y);
        xs.push(x);
    }

    for k in 0..total {
        let t = t_start + k as f64 * dt;
        let y_next = y + phi_y * (model.b_y)(y, x, t) * dt + (model.sigma_y)(y, x, t) * dw_y[k];
        let x_next = x + phi_x * (model.b_x)(x, t) * dt + (model.sigma_x)(x, t) * dw_x[k];
        if !y_next.is_finite() || !x_next.is_finite() || y_next.abs() > BLOWUP_GUARD
            || x_next.abs() > BLOWUP_GUARD
        {
            return Err(Error::SimulationBlowup {
                step: k,
                value: y_next.abs().max(x_next.abs()),
            });
        }
        y = y_next;
        x = x_next;
        if k + 1 >= n_burn {
            ys.push(y);
            xs.push(x);
        }
    }

    let kept_dw_y: Vec<f64> = dw_y[n_burn..].to_vec();
    let kept_dw_x: Vec<f64> = dw_x[n_burn..].to_vec();
    check_increment_scale(&kept_dw_y, dt)?;
    check_increment_scale(&kept_dw_x, dt)?;

    Ok(PathPair {
        grid: grid.clone(),
        y: ys,
        x: xs,
        dw_y: Some(kept_dw_y),
        dw_x: Some(kept_dw_x),
        seed,
    })
}

/// Simulate one latent path with a caller-supplied increment stream seed.
fn simulate_latent_one(
    model: &StateSpaceModel,
    phi_x: f64,
    grid: &TimeGrid,
    drift: LatentDrift,
    stream_seed: u64,
) -> Result<Vec<f64>> {
    let m = grid.m();
    let dt = grid.dt();
    let dw = wiener_increments(m, dt, stream_seed)?;
    let mut x = model.x0;
    let mut xs = Vec::with_capacity(m + 1);
    xs.push(x);
    for k in 0..m {
        let t = grid.knots()[k];
        let drift_term = match drift {
            LatentDrift::Null => 0.0,
            LatentDrift::Full => phi_x * (model.b_x)(x, t) * dt,
        };
        let x_next = x + drift_term + (model.sigma_x)(x, t) * dw[k];
        if !x_next.is_finite() || x_next.abs() > BLOWUP_GUARD {
            return Err(Error::SimulationBlowup {
                step: k,
                value: x_next.abs(),
            });
        }
        x = x_next;
        xs.push(x);
    }
    Ok(xs)
}

/// Simulate `n_paths` independent latent trajectories. Per-path streams are
/// a pure function of `(seed, path index)`, so the content of path `i` does
/// not depend on the batch size, and paths may be generated concurrently.
pub fn simulate_latent_batch(
    model: &StateSpaceModel,
    theta: &ParamVector,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    drift: LatentDrift,
) -> Result<LatentBatch> {
    if n_paths < 1 {
        return Err(Error::InvalidArgument("need n_paths >= 1".into()));
    }
    let phi_x = match drift {
        LatentDrift::Null => 0.0,
        LatentDrift::Full => model.maps.psi_x(theta)?,
    };
    let paths: Result<Vec<Vec<f64>>> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            simulate_latent_one(
                model,
                phi_x,
                grid,
                drift,
                derive_seed(seed, DOMAIN_LATENT_PATH, i as u64),
            )
        })
        .collect();
    Ok(LatentBatch {
        grid: grid.clone(),
        paths: paths?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_window, ParamMaps, RatioBounds};
    use approx::assert_relative_eq;

    fn grid(t: f64, m: usize) -> TimeGrid {
        TimeGrid::new(make_window(t).unwrap(), m).unwrap()
    }

    fn gbm_model(a: f64, s: f64) -> StateSpaceModel {
        StateSpaceModel::new(
            |_, _, _| 1.0,
            |_, _, _| 1.0,
            move |x, _| -a * x,
            move |x, _| s * x,
            ParamMaps::scalar_identity_with_const_x(1.0),
            Some(RatioBounds::constant(1.0, a * a / (s * s)).unwrap()),
            0.0,
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn increments_deterministic() {
        let a = wiener_increments(4, 1.0, 7).unwrap();
        let b = wiener_increments(4, 1.0, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn increments_reject_empty() {
        assert!(wiener_increments(0, 1.0, 1).is_err());
    }

    #[test]
    fn increment_mean_within_clt_band() {
        let m = 100_000;
        let dt = 0.01;
        let dw = wiener_increments(m, dt, 42).unwrap();
        let mean = dw.iter().sum::<f64>() / m as f64;
        let band = 4.0 * (dt / m as f64).sqrt();
        assert!(mean.abs() < band, "mean {mean} outside {band}");
    }

    #[test]
    fn zero_drift_observation_is_a_random_walk() {
        let model = StateSpaceModel::new(
            |_, _, _| 1.0,
            |_, _, _| 1.0,
            |x, _| -x,
            |x, _| 0.5 * x,
            ParamMaps::scalar_identity(),
            None,
            0.0,
            1.0,
        )
        .unwrap();
        let g = grid(4.0, 64);
        let theta = ParamVector::scalar(0.0).unwrap();
        let path = simulate_pair(&model, &theta, &g, 5).unwrap();
        let dw = path.dw_y.as_ref().unwrap();
        for k in 0..g.m() {
            // exact recursion identity: the drift contributes nothing
            assert_eq!(path.y[k + 1], path.y[k] + dw[k]);
        }
    }

    #[test]
    fn degenerate_diffusion_reduces_to_ode() {
        let model = StateSpaceModel::new(
            |_, _, _| 1.0,
            |_, _, _| 0.0,
            |_, _| 0.0,
            |_, _| 0.0,
            ParamMaps::scalar_identity(),
            None,
            1.0,
            0.0,
        )
        .unwrap();
        let g = grid(3.0, 1024);
        let theta = ParamVector::scalar(2.0).unwrap();
        let path = simulate_pair(&model, &theta, &g, 1).unwrap();
        let expected = 1.0 + 2.0 * g.window().len();
        assert_relative_eq!(path.y[g.m()], expected, max_relative = 1e-10);
    }

    #[test]
    fn gbm_mean_matches_closed_form() {
        // E X(b_T) = x0 exp(-(b_T - a_T)) for drift -x under phi_X = 1.
        let model = gbm_model(1.0, 0.1);
        let g = grid(4.0, 4096);
        let theta = ParamVector::scalar(0.0).unwrap();
        let n = 1000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for seed in 0..n {
            let p = simulate_pair(&model, &theta, &g, seed as u64).unwrap();
            let v = p.x[g.m()];
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / n as f64;
        let sd = ((sumsq / n as f64 - mean * mean) / n as f64).sqrt();
        let target = (-g.window().len()).exp();
        assert!(
            (mean - target).abs() < 3.0 * sd + 1e-4,
            "mean {mean} vs {target} (se {sd})"
        );
    }

    #[test]
    fn simulation_is_bit_deterministic() {
        let model = gbm_model(1.0, 0.5);
        let g = grid(8.0, 512);
        let theta = ParamVector::scalar(0.3).unwrap();
        let a = simulate_pair(&model, &theta, &g, 99).unwrap();
        let b = simulate_pair(&model, &theta, &g, 99).unwrap();
        assert_eq!(a.y, b.y);
        assert_eq!(a.x, b.x);
    }

    #[test]
    fn y_and_x_streams_are_uncorrelated() {
        let m = 100_000;
        let dt = 1.0;
        let dy = wiener_increments(m, dt, derive_seed(4, DOMAIN_WIENER_Y, 0)).unwrap();
        let dx = wiener_increments(m, dt, derive_seed(4, DOMAIN_WIENER_X, 0)).unwrap();
        let corr = dy
            .iter()
            .zip(&dx)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / m as f64;
        assert!(corr.abs() < 0.02, "corr = {corr}");
    }

    #[test]
    fn null_drift_never_evaluates_the_drift() {
        let model = StateSpaceModel::new_unchecked(
            |_, _, _| 1.0,
            |_, _, _| 1.0,
            |_, _| panic!("drift must not be evaluated in null mode"),
            |x, _| 0.5 * x,
            ParamMaps::scalar_identity(),
            None,
            0.0,
            1.0,
        );
        let g = grid(2.0, 32);
        let theta = ParamVector::scalar(1.0).unwrap();
        let batch =
            simulate_latent_batch(&model, &theta, &g, 3, 2, LatentDrift::Null).unwrap();
        assert_eq!(batch.paths.len(), 3);
    }

    #[test]
    fn batch_paths_do_not_depend_on_batch_size() {
        let model = gbm_model(1.0, 0.5);
        let g = grid(2.0, 64);
        let theta = ParamVector::scalar(1.0).unwrap();
        let small = simulate_latent_batch(&model, &theta, &g, 3, 1, LatentDrift::Null).unwrap();
        let large = simulate_latent_batch(&model, &theta, &g, 8, 1, LatentDrift::Null).unwrap();
        for i in 0..3 {
            assert_eq!(small.paths[i], large.paths[i]);
        }
    }

    #[test]
    fn brownian_variance_at_horizon() {
        // Null-drift with sigma_X = 1 from x0 = 0 is Brownian motion: the
        // variance at b_T is the window length.
        let model = StateSpaceModel::new_unchecked(
            |_, _, _| 1.0,
            |_, _, _| 1.0,
            |x, _| -x,
            |_, _| 1.0,
            ParamMaps::scalar_identity(),
            None,
            0.0,
            0.0,
        );
        let g = grid(4.0, 256);
        let theta = ParamVector::scalar(0.0).unwrap();
        let batch =
            simulate_latent_batch(&model, &theta, &g, 10_000, 11, LatentDrift::Null).unwrap();
        let vals: Vec<f64> = batch.paths.iter().map(|p| p[g.m()]).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / (vals.len() - 1) as f64;
        assert!(
            (var - g.window().len()).abs() / g.window().len() < 0.05,
            "var {var} vs {}",
            g.window().len()
        );
    }

    #[test]
    fn strong_order_half_for_gbm() {
        // Euler-Maruyama error against the exact GBM path driven by the same
        // increments decays like sqrt(dt): quadrupling m halves the error.
        let a = 1.0;
        let s = 0.5;
        let model = gbm_model(a, s);
        let theta = ParamVector::scalar(0.0).unwrap(); // phi_X = 1 via maps
        let m_fine = 4096;
        let g_fine = grid(4.0, m_fine);
        let mut ratios = Vec::new();
        for seed in 0..100u64 {
            let fine = simulate_pair(&model, &theta, &g_fine, seed).unwrap();
            let dwx = fine.dw_x.as_ref().unwrap();
            let err = |stride: usize| -> f64 {
                let m = m_fine / stride;
                let dt = g_fine.dt() * stride as f64;
                // one coarse Euler run driven by aggregated increments
                let mut x = model.x0;
                let mut w = 0.0;
                let mut max_err: f64 = 0.0;
                for k in 0..m {
                    let dw: f64 = dwx[k * stride..(k + 1) * stride].iter().sum();
                    x = x + (-a * x) * dt + s * x * dw;
                    w += dw;
                    let t_rel = (k + 1) as f64 * dt;
                    let exact = (-(a + 0.5 * s * s) * t_rel + s * w).exp();
                    max_err = max_err.max((x - exact).abs());
                }
                max_err
            };
            ratios.push(err(16) / err(4));
        }
        let mean_ratio = ratios.iter().sum::<f64>() / ratios.len() as f64;
        assert!(
            (1.6..=2.6).contains(&mean_ratio),
            "strong-order ratio {mean_ratio}"
        );
    }

    #[test]
    fn blowup_is_reported_with_step_index() {
        let model = StateSpaceModel::new_unchecked(
            |y, _, _| y * y + 1.0,
            |_, _, _| 0.0,
            |_, _| 0.0,
            |_, _| 0.0,
            ParamMaps::scalar_identity(),
            None,
            1.0,
            0.0,
        );
        let g = grid(50.0, 64);
        let theta = ParamVector::scalar(10.0).unwrap();
        match simulate_pair(&model, &theta, &g, 0) {
            Err(Error::SimulationBlowup { .. }) => {}
            other => panic!("expected blow-up, got {other:?}"),
        }
    }

    #[test]
    fn csv_roundtrip_shape() {
        let model = gbm_model(1.0, 0.5);
        let g = grid(1.0, 4);
        let theta = ParamVector::scalar(0.1).unwrap();
        let path = simulate_pair(&model, &theta, &g, 3).unwrap();
        let mut buf = Vec::new();
        path.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,y,x");
        assert_eq!(lines.len(), g.m() + 2);
    }

    #[test]
    fn burn_in_changes_the_window_values_only() {
        let model = gbm_model(1.0, 0.5);
        let g = grid(4.0, 128);
        let theta = ParamVector::scalar(0.2).unwrap();
        let plain = simulate_pair(&model, &theta, &g, 21).unwrap();
        let burned =
            simulate_pair_opts(&model, &theta, &g, 21, SimOptions { burn_in: true }).unwrap();
        assert_eq!(burned.y.len(), g.m() + 1);
        assert_eq!(burned.x.len(), g.m() + 1);
        // with burn-in the state at a_T is no longer the initial value
        assert_ne!(plain.x[0], burned.x[0]);
    }
}
