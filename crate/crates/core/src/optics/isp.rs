use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Image;
use crate::{Error, Result};

/// Camera signal chain applied on top of the linear optical image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IspConfig {
    pub gamma_range: [f64; 2],
    pub scale_jitter_range: [f64; 2],
    pub noise_sigma: f64,
    /// 0 disables quantization; 8 rounds to 256 levels.
    pub quantize_bits: u8,
    /// Gaussian blur in pixels applied after the tone curve; 0 disables it.
    #[serde(default)]
    pub extra_blur_sigma: f64,
}

impl IspConfig {
    pub fn identity() -> Self {
        Self {
            gamma_range: [1.0, 1.0],
            scale_jitter_range: [1.0, 1.0],
            noise_sigma: 0.0,
            quantize_bits: 0,
            extra_blur_sigma: 0.0,
        }
    }

    pub fn nominal_gamma(&self) -> f64 {
        0.5 * (self.gamma_range[0] + self.gamma_range[1])
    }

    /// Fixes gamma and scale at their midpoints and removes noise and quantization.
    pub fn deterministic(&self) -> Self {
        let g = self.nominal_gamma();
        let s = 0.5 * (self.scale_jitter_range[0] + self.scale_jitter_range[1]);
        Self {
            gamma_range: [g, g],
            scale_jitter_range: [s, s],
            noise_sigma: 0.0,
            quantize_bits: 0,
            extra_blur_sigma: self.extra_blur_sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [g0, g1] = self.gamma_range;
        if !(g0 > 0.0 && g0 <= g1 && g1 <= 8.0) {
            return Err(Error::invalid_config("isp.gamma_range", "must satisfy 0 < lo <= hi <= 8"));
        }
        let [s0, s1] = self.scale_jitter_range;
        if !(s0 > 0.0 && s0 <= s1 && s1.is_finite()) {
            return Err(Error::invalid_config("isp.scale_jitter_range", "must satisfy 0 < lo <= hi"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid_config("isp.noise_sigma", "must be finite and >= 0"));
        }
        if !matches!(self.quantize_bits, 0 | 8) {
            return Err(Error::invalid_config("isp.quantize_bits", "must be 0 or 8"));
        }
        if !(self.extra_blur_sigma >= 0.0 && self.extra_blur_sigma.is_finite()) {
            return Err(Error::invalid_config("isp.extra_blur_sigma", "must be finite and >= 0"));
        }
        Ok(())
    }
}

fn draw(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

pub fn isp_forward(linear: &Image, isp: &IspConfig, rng_seed: u64) -> Result<Image> {
    if let Some(v) = linear.pixels().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidInput(format!("linear pixel {v} outside [0, 1]")));
    }
    isp.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let s = draw(&mut rng, isp.scale_jitter_range);
    let gamma = draw(&mut rng, isp.gamma_range);
    let side = linear.side();
    let mut px: Vec<f64> = if s == 1.0 && gamma == 1.0 {
        linear.pixels().iter().map(|&v| v as f64).collect()
    } else {
        let inv = 1.0 / gamma;
        linear.pixels().iter().map(|&v| (s * v as f64).clamp(0.0, 1.0).powf(inv)).collect()
    };
    if isp.extra_blur_sigma > 0.0 {
        px = gaussian_blur(&px, side, isp.extra_blur_sigma);
    }
    if isp.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, isp.noise_sigma).expect("validated sigma");
        for v in &mut px {
            *v += normal.sample(&mut rng);
        }
    }
    let out = px.into_iter().map(|v| {
        let v = v.clamp(0.0, 1.0);
        if isp.quantize_bits == 8 {
            (v * 255.0).round() / 255.0
        } else {
            v
        }
    });
    Ok(Image::from_clamped(side, out.map(|v| v as f32).collect()))
}

/// Undoes the nominal tone curve only; jitter and noise are not inverted.
pub fn isp_inverse(img: &Image, isp: &IspConfig) -> Image {
    let g = isp.nominal_gamma();
    if g == 1.0 {
        return img.clone();
    }
    let px = img.pixels().iter().map(|&v| (v as f64).powf(g) as f32).collect();
    Image::from_clamped(img.side(), px)
}

/// Separable Gaussian blur with zero padding, same-size output.
pub(crate) fn gaussian_blur(px: &[f64], side: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp()).collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    let n = side as isize;
    let pass = |src: &[f64], horizontal: bool| {
        let mut dst = vec![0.0; src.len()];
        for a in 0..n {
            for b in 0..n {
                let mut acc = 0.0;
                for (ki, w) in k.iter().enumerate() {
                    let t = b + ki as isize - r;
                    if (0..n).contains(&t) {
                        let idx = if horizontal { a * n + t } else { t * n + a };
                        acc += w * src[idx as usize];
                    }
                }
                let idx = if horizontal { a * n + b } else { b * n + a };
                dst[idx as usize] = acc;
            }
        }
        dst
    };
    let h = pass(px, true);
    pass(&h, false)
}
