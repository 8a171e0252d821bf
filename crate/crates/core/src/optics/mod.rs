//! Parametric imaging model: decenter-dependent PSFs, crosshair rendering
//! and a forward/inverse camera signal chain.
//!
//! A capture is `isp(isp⁻¹(crosshair) ⊗ psf(offset))`, evaluated for each of
//! the configured field points.

mod image;
mod isp;
mod psf;
mod render;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use self::image::{gradient_energy, Image};
pub use isp::{isp_forward, isp_inverse, IspConfig};
pub use psf::{make_psf, PsfKernel};
pub use render::{render_canvas, render_ideal_crosshair, simulate_capture, simulate_capture_noiseless, CANVAS_SIDE};

/// Lateral decenter of the movable lens group, in micrometers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MisalignmentOffset {
    pub dx: f64,
    pub dy: f64,
}

impl MisalignmentOffset {
    pub const ZERO: Self = Self { dx: 0.0, dy: 0.0 };

    pub fn new(dx: f64, dy: f64) -> Self {
        Self { dx, dy }
    }

    pub fn norm(&self) -> f64 {
        self.dx.hypot(self.dy)
    }

    pub fn is_finite(&self) -> bool {
        self.dx.is_finite() && self.dy.is_finite()
    }
}

impl std::ops::Add for MisalignmentOffset {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.dx + o.dx, self.dy + o.dy)
    }
}

impl std::ops::Sub for MisalignmentOffset {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.dx - o.dx, self.dy - o.dy)
    }
}

/// Normalized field coordinate in `[-1, 1]²`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldPoint {
    pub fx: f64,
    pub fy: f64,
}

impl FieldPoint {
    pub fn radius(&self) -> f64 {
        self.fx.hypot(self.fy)
    }

    /// Center plus four symmetric off-axis points at `(±0.7, ±0.7)`.
    pub fn default_set() -> Vec<FieldPoint> {
        let a = 0.7;
        vec![
            FieldPoint { fx: 0.0, fy: 0.0 },
            FieldPoint { fx: -a, fy: -a },
            FieldPoint { fx: a, fy: -a },
            FieldPoint { fx: -a, fy: a },
            FieldPoint { fx: a, fy: a },
        ]
    }
}

pub const FIELD_COUNT: usize = 5;

/// One virtual lens: an assembly-tolerance perturbation of the nominal design.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LensInstance {
    pub lens_id: u32,
    /// Decenter bias built into this lens; its sharpest position sits at `-tolerance_shift`.
    pub tolerance_shift: MisalignmentOffset,
    pub gain_parallel: f64,
    pub gain_perp: f64,
    pub coma_gain: f64,
    pub rng_seed: u64,
}

/// Distribution lenses are drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToleranceModel {
    /// Each shift component is drawn from `U(-shift_um, shift_um)`.
    pub shift_um: f64,
    /// Gains are drawn from `U(1 - gain_spread, 1 + gain_spread)`.
    pub gain_spread: f64,
}

impl Default for ToleranceModel {
    fn default() -> Self {
        Self { shift_um: 5.0, gain_spread: 0.2 }
    }
}

impl LensInstance {
    pub fn ideal() -> Self {
        Self::ideal_with_id(0)
    }

    pub fn ideal_with_id(lens_id: u32) -> Self {
        Self {
            lens_id,
            tolerance_shift: MisalignmentOffset::ZERO,
            gain_parallel: 1.0,
            gain_perp: 1.0,
            coma_gain: 1.0,
            rng_seed: 0,
        }
    }

    /// Draws a perturbed lens. The result depends only on `rng_seed`.
    pub fn sample(lens_id: u32, rng_seed: u64, tol: &ToleranceModel) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut shift = || if tol.shift_um > 0.0 { rng.random_range(-tol.shift_um..tol.shift_um) } else { 0.0 };
        let tolerance_shift = MisalignmentOffset::new(shift(), shift());
        let mut gain = || {
            if tol.gain_spread > 0.0 {
                rng.random_range(1.0 - tol.gain_spread..1.0 + tol.gain_spread)
            } else {
                1.0
            }
        };
        Self { lens_id, tolerance_shift, gain_parallel: gain(), gain_perp: gain(), coma_gain: gain(), rng_seed }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainLabel {
    /// Simulation without the forward signal chain.
    SourceClean,
    /// Simulation with the forward signal chain.
    SourceIsp,
    /// The deployment domain the models are evaluated in.
    Target,
}

/// Aberration model shared by all lenses of one design.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PsfFamily {
    /// Core blur at zero decenter, pixels.
    pub base_sigma: f64,
    /// Growth of the blur along the decenter direction, pixels per µm.
    pub astig_coeff: f64,
    /// Displacement of the coma lobe, pixels per µm.
    pub coma_coeff: f64,
    /// Extra isotropic blur, pixels.
    pub smoothing_extra: f64,
    /// Sensor pixel pitch, µm.
    #[serde(default = "default_pixel_pitch")]
    pub pixel_pitch_um: f64,
}

fn default_pixel_pitch() -> f64 {
    2.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub label: DomainLabel,
    pub psf: PsfFamily,
    pub isp: IspConfig,
    pub image_side: usize,
    pub fields: Vec<FieldPoint>,
}

impl DomainConfig {
    pub fn validate(&self) -> crate::Result<()> {
        use crate::Error;
        if self.fields.len() != FIELD_COUNT {
            return Err(Error::invalid_config("fields", format!("expected {FIELD_COUNT} field points")));
        }
        if self.fields.iter().any(|f| f.fx.abs() > 1.0 || f.fy.abs() > 1.0) {
            return Err(Error::invalid_config("fields", "field coordinates must lie in [-1, 1]"));
        }
        if self.image_side < 32 || self.image_side > CANVAS_SIDE {
            return Err(Error::invalid_config("image_side", format!("must be in [32, {CANVAS_SIDE}]")));
        }
        let p = &self.psf;
        if !(p.base_sigma >= 0.0 && p.astig_coeff >= 0.0 && p.coma_coeff >= 0.0 && p.smoothing_extra >= 0.0) {
            return Err(Error::invalid_config("psf", "coefficients must be non-negative"));
        }
        self.isp.validate()
    }

    /// Default domain for a label: the target is smoother, noisier and uses a
    /// stronger tone curve than either simulated domain.
    pub fn standard(label: DomainLabel, image_side: usize) -> Self {
        let target = label == DomainLabel::Target;
        let psf = PsfFamily {
            base_sigma: 0.8,
            astig_coeff: 0.1,
            coma_coeff: 0.08,
            smoothing_extra: if target { 0.8 } else { 0.0 },
            pixel_pitch_um: default_pixel_pitch(),
        };
        let isp = if target {
            IspConfig {
                gamma_range: [2.0, 2.4],
                scale_jitter_range: [0.9, 1.1],
                noise_sigma: 0.03,
                quantize_bits: 8,
                extra_blur_sigma: 0.0,
            }
        } else {
            IspConfig {
                gamma_range: [1.6, 2.0],
                scale_jitter_range: [0.95, 1.05],
                noise_sigma: 0.01,
                quantize_bits: 8,
                extra_blur_sigma: 0.0,
            }
        };
        Self { label, psf, isp, image_side, fields: FieldPoint::default_set() }
    }

    /// Same domain with the forward chain made deterministic and noiseless.
    pub fn noiseless(&self) -> Self {
        Self { isp: self.isp.deterministic(), ..self.clone() }
    }
}

/// The five field images captured at one misalignment state.
#[derive(Clone, Debug, PartialEq)]
pub struct FovImageSet {
    pub images: Vec<Image>,
    pub offset: MisalignmentOffset,
    pub lens_id: u32,
    pub seed: u64,
}

impl FovImageSet {
    pub fn side(&self) -> usize {
        self.images[0].side()
    }
}

#[cfg(test)]
mod tests;
