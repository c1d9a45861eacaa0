//! Named model presets.
//!
//! Serialized configs can only name presets, since coefficient functions are
//! not serializable; programmatic models go through
//! [`crate::model::StateSpaceModel`] directly. Each preset documents a
//! sampling box on which its ratio bounds hold, and carries a Lyapunov
//! certificate for the latent side where one is known.
//!
//! Built-ins:
//!
//! - `unit-ratio` — `b_Y = sigma_Y = 1`, `psi_Y(theta) = theta`,
//!   `psi_X = 0`; the drift-to-noise ratio is identically `K_Y = 1`. The
//!   latent is a driftless geometric diffusion that only exists to exercise
//!   the machinery; it never enters the observation equation. Closed-form
//!   everything, the calibration workhorse.
//! - `latent-modulated` — `b_Y = 1 + x e^{-t}`, `sigma_Y = 1`: the latent
//!   path modulates the observation drift with a geometrically vanishing
//!   weight, so the unit ratio constants hold in the large-horizon limit.
//!   The documented box keeps `x` in the band where the latent path
//!   actually lives.
//! - `gbm-latent` — latent `b_X = -a x`, `sigma_X = s x` with
//!   `K_X = a^2/s^2`, `psi_X = 1`; stable for `s^2 < 2a`, with envelope
//!   `lambda(t) = e^{-0.4 t}` documented for `(a, s) = (1, 0.5)`.
//! - `panel-linear` — unit-ratio base with per-individual affine maps
//!   `psi_{Y_i}(theta) = theta + 1/(i+2)` converging to the identity limit
//!   map.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::{ParamMaps, ParamVector, RatioBounds, SampleBox, StateSpaceModel};
use crate::panel::PanelModel;
use crate::stability::LyapunovSpec;

/// Default geometric-diffusion latent parameters shared by the presets.
pub const GBM_DRIFT: f64 = 1.0;
pub const GBM_SIGMA: f64 = 0.5;

/// A registered model family.
pub struct Preset {
    pub name: &'static str,
    pub description: &'static str,
    /// Box on which `check_growth_bounds` is documented to pass.
    pub sample_box: SampleBox,
    /// Known-violation demos keep their registration but are flagged.
    pub demo_only: bool,
    pub dim: usize,
    pub default_theta0: f64,
    builder: fn() -> StateSpaceModel,
    lyapunov: Option<fn() -> LyapunovSpec>,
}

impl Preset {
    pub fn build(&self) -> StateSpaceModel {
        (self.builder)()
    }

    /// The documented Lyapunov certificate of the latent side, if any.
    pub fn lyapunov(&self) -> Option<LyapunovSpec> {
        self.lyapunov.map(|f| f())
    }

    /// Panel version with `n` individuals. `panel-linear` uses its
    /// converging affine maps; every other preset panels with identical
    /// per-individual maps.
    pub fn build_panel(&self, n: usize) -> Result<PanelModel> {
        let base = self.build();
        let rb = *base.ratio_bounds()?;
        let per: Vec<ParamMaps> = if self.name == "panel-linear" {
            (0..n).map(individual_affine_maps).collect()
        } else {
            vec![base.maps.clone(); n]
        };
        let limit = base.maps.clone();
        PanelModel::new(base, per, limit, rb.k_y, rb.k_x)
    }

    pub fn default_theta0(&self) -> ParamVector {
        ParamVector::scalar(self.default_theta0).expect("finite preset default")
    }
}

fn individual_affine_maps(i: usize) -> ParamMaps {
    let shift = 1.0 / (i as f64 + 2.0);
    ParamMaps::closed_form(
        1,
        move |t| t[0] + shift,
        |_| vec![1.0],
        |_| DMatrix::zeros(1, 1),
        |_| 0.0,
        |_| vec![0.0],
        |_| DMatrix::zeros(1, 1),
    )
}

fn stable_gbm_latent() -> (
    impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
) {
    (
        move |x: f64, _t: f64| -GBM_DRIFT * x,
        move |x: f64, _t: f64| GBM_SIGMA * x,
    )
}

fn build_unit_ratio() -> StateSpaceModel {
    let (b_x, sigma_x) = stable_gbm_latent();
    StateSpaceModel::new(
        |_, _, _| 1.0,
        |_, _, _| 1.0,
        b_x,
        sigma_x,
        ParamMaps::scalar_identity(),
        Some(
            RatioBounds::constant(1.0, GBM_DRIFT * GBM_DRIFT / (GBM_SIGMA * GBM_SIGMA))
                .expect("positive constants"),
        ),
        0.0,
        1.0,
    )
    .expect("unit-ratio preset is well-formed")
}

fn build_latent_modulated() -> StateSpaceModel {
    let (b_x, sigma_x) = stable_gbm_latent();
    StateSpaceModel::new(
        |_, x, t| 1.0 + x * (-t).exp(),
        |_, _, _| 1.0,
        b_x,
        sigma_x,
        ParamMaps::scalar_identity(),
        Some(
            RatioBounds::new(
                1.0,
                GBM_DRIFT * GBM_DRIFT / (GBM_SIGMA * GBM_SIGMA),
                // alpha_Y2 = 5 covers (1 + x e^{-t})^2 <= 1 + 5 x^2 on the
                // documented positive-x band
                [0.0, 5.0, 0.0, 0.0],
            )
            .expect("positive constants"),
        ),
        0.0,
        1.0,
    )
    .expect("latent-modulated preset is well-formed")
}

fn build_gbm_latent() -> StateSpaceModel {
    let (b_x, sigma_x) = stable_gbm_latent();
    StateSpaceModel::new(
        |_, _, _| 1.0,
        |_, _, _| 1.0,
        b_x,
        sigma_x,
        ParamMaps::scalar_identity_with_const_x(1.0),
        Some(
            RatioBounds::constant(1.0, GBM_DRIFT * GBM_DRIFT / (GBM_SIGMA * GBM_SIGMA))
                .expect("positive constants"),
        ),
        0.0,
        1.0,
    )
    .expect("gbm-latent preset is well-formed")
}

/// Time-weighted quadratic certificate for the stable geometric latent with
/// unit drift multiplier: `V = e^{0.8 t} x^2`, `gamma = e^{0.8 t}`, `p = 2`,
/// `eta = 0`, hence `lambda(t) = e^{-0.4 t}` and `LV = (0.8 - 2a + s^2) V`,
/// negative for the documented `(a, s) = (1, 0.5)`.
pub fn gbm_lyapunov() -> LyapunovSpec {
    const EPS: f64 = 0.8;
    // beyond this t the exponential weight overflows f64; the certificate
    // grid checks stay well below it
    LyapunovSpec::new(
        |x, t| (EPS * t.min(800.0)).exp() * x * x,
        |x, t| EPS * (EPS * t.min(800.0)).exp() * x * x,
        |x, t| 2.0 * (EPS * t.min(800.0)).exp() * x,
        |_, t| 2.0 * (EPS * t.min(800.0)).exp(),
        2.0,
        |t| (EPS * t.min(800.0)).exp(),
        |_| 0.0,
    )
    .expect("certificate is well-formed")
}

/// Certificate for the driftless geometric latent (`psi_X = 0`, so only the
/// diffusion acts): `V = e^{eps t} |x|^{1/2}` with `p = 1/2` gives
/// `LV = (eps - s^2/8) V`, negative for `eps = 0.03 < 0.5^2/8`, and envelope
/// `lambda(t) = e^{-0.06 t}`.
pub fn driftless_gbm_lyapunov() -> LyapunovSpec {
    const EPS: f64 = 0.03;
    LyapunovSpec::new(
        |x, t| (EPS * t.min(800.0)).exp() * x.abs().sqrt(),
        |x, t| EPS * (EPS * t.min(800.0)).exp() * x.abs().sqrt(),
        |x, t| 0.5 * (EPS * t.min(800.0)).exp() * x.signum() / x.abs().sqrt(),
        |x, t| -0.25 * (EPS * t.min(800.0)).exp() / x.abs().powf(1.5),
        0.5,
        |t| (EPS * t.min(800.0)).exp(),
        |_| 0.0,
    )
    .expect("certificate is well-formed")
}

/// The built-in registry, ordered by name.
pub fn registry() -> Vec<Preset> {
    vec![
        Preset {
            name: "gbm-latent",
            description: "unit observation ratio over a stable geometric latent \
                          (b_X = -x, sigma_X = 0.5 x, psi_X = 1)",
            sample_box: SampleBox::new((-10.0, 10.0), (0.05, 3.0), (0.0, 50.0))
                .expect("valid box"),
            demo_only: false,
            dim: 1,
            default_theta0: 0.5,
            builder: build_gbm_latent,
            lyapunov: Some(gbm_lyapunov),
        },
        Preset {
            name: "latent-modulated",
            description: "observation drift 1 + x e^{-t} modulated by the latent path",
            sample_box: SampleBox::new((-10.0, 10.0), (0.5, 2.0), (0.0, 5.0))
                .expect("valid box"),
            demo_only: false,
            dim: 1,
            default_theta0: 0.5,
            builder: build_latent_modulated,
            lyapunov: Some(driftless_gbm_lyapunov),
        },
        Preset {
            name: "panel-linear",
            description: "unit-ratio base with per-individual affine maps \
                          theta + 1/(i+2) converging to the identity",
            sample_box: SampleBox::new((-10.0, 10.0), (0.05, 3.0), (0.0, 50.0))
                .expect("valid box"),
            demo_only: false,
            dim: 1,
            default_theta0: 0.5,
            builder: build_unit_ratio,
            lyapunov: Some(driftless_gbm_lyapunov),
        },
        Preset {
            name: "unit-ratio",
            description: "b_Y = sigma_Y = 1, psi_Y(theta) = theta: closed-form MLE \
                          and exactly Gaussian posterior",
            sample_box: SampleBox::new((-10.0, 10.0), (0.05, 3.0), (0.0, 50.0))
                .expect("valid box"),
            demo_only: false,
            dim: 1,
            default_theta0: 0.5,
            builder: build_unit_ratio,
            lyapunov: Some(driftless_gbm_lyapunov),
        },
    ]
}

/// Look a preset up by name.
pub fn find(name: &str) -> Result<Preset> {
    registry()
        .into_iter()
        .find(|p| p.name == name)
        .ok_or_else(|| {
            let names: Vec<&str> = registry().iter().map(|p| p.name).collect();
            Error::InvalidArgument(format!(
                "unknown preset '{name}'; available: {}",
                names.join(", ")
            ))
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::check_growth_bounds;

    #[test]
    fn registry_has_the_documented_presets() {
        let names: Vec<&str> = registry().iter().map(|p| p.name).collect();
        assert!(names.len() >= 4);
        for expected in ["unit-ratio", "latent-modulated", "gbm-latent", "panel-linear"] {
            assert!(names.contains(&expected), "missing {expected}");
        }
    }

    #[test]
    fn every_preset_passes_its_documented_box() {
        for preset in registry() {
            if preset.demo_only {
                continue;
            }
            let model = preset.build();
            let report = check_growth_bounds(&model, &preset.sample_box, 4096, 2024).unwrap();
            assert!(
                report.ratio_y_ok && report.ratio_x_ok,
                "preset {} violates its documented box: {:?}",
                preset.name,
                report.violations.first()
            );
        }
    }

    #[test]
    fn unknown_preset_lists_alternatives() {
        match find("no-such-model") {
            Err(Error::InvalidArgument(msg)) => {
                assert!(msg.contains("unit-ratio"));
            }
            Err(other) => panic!("expected invalid argument, got {other:?}"),
            Ok(_) => panic!("lookup unexpectedly succeeded"),
        }
    }

    #[test]
    fn panel_linear_maps_converge_to_identity() {
        let preset = find("panel-linear").unwrap();
        let panel = preset.build_panel(50).unwrap();
        let theta = ParamVector::scalar(0.3).unwrap();
        let late = panel.per_individual_maps[49].psi_y(&theta).unwrap();
        let early = panel.per_individual_maps[0].psi_y(&theta).unwrap();
        let limit = panel.limit_maps.psi_y(&theta).unwrap();
        assert!((late - limit).abs() < (early - limit).abs());
    }

    #[test]
    fn gbm_certificate_has_the_documented_envelope() {
        let spec = gbm_lyapunov();
        // lambda(t) = e^{-0.4 t}
        for t in [0.0f64, 1.0, 5.0] {
            let expected = (-0.4 * t).exp();
            assert!((spec.lambda(t) - expected).abs() < 1e-12 * expected.max(1.0));
        }
    }
}
