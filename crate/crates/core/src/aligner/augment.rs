use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::optics::{FovImageSet, Image};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationType {
    Jpeg,
    GaussianBlur,
    GaussianNoise,
    RandomMask,
}

/// Random degradation applied to training inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationSpec {
    pub enabled_types: Vec<DegradationType>,
    /// JPEG quality as a fraction; the codec receives `round(q * 100)`.
    pub jpeg_q_range: [f64; 2],
    pub blur_kernel_choices: Vec<usize>,
    pub blur_sigma_range: [f64; 2],
    pub noise_sigma_range: [f64; 2],
    pub mask_ratio_range: [f64; 2],
    pub apply_probability: f64,
    /// Use one draw for both images of a training pair instead of two.
    #[serde(default)]
    pub shared_pair_params: bool,
}

impl Default for DegradationSpec {
    fn default() -> Self {
        Self {
            enabled_types: vec![DegradationType::GaussianBlur],
            jpeg_q_range: [0.4, 0.7],
            blur_kernel_choices: vec![3, 5, 7],
            blur_sigma_range: [0.5, 2.0],
            noise_sigma_range: [0.02, 0.08],
            mask_ratio_range: [0.05, 0.20],
            apply_probability: 0.5,
            shared_pair_params: false,
        }
    }
}

impl DegradationSpec {
    pub fn disabled() -> Self {
        Self { apply_probability: 0.0, ..Self::default() }
    }

    pub fn all_types() -> Self {
        Self {
            enabled_types: vec![
                DegradationType::Jpeg,
                DegradationType::GaussianBlur,
                DegradationType::GaussianNoise,
                DegradationType::RandomMask,
            ],
            ..Self::default()
        }
    }

    pub fn is_active(&self) -> bool {
        self.apply_probability > 0.0 && !self.enabled_types.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let within = |r: [f64; 2], lo: f64, hi: f64| lo <= r[0] && r[0] <= r[1] && r[1] <= hi;
        if !(0.0..=1.0).contains(&self.apply_probability) {
            return Err(Error::invalid_config("degradation.apply_probability", "must be in [0, 1]"));
        }
        if self.apply_probability > 0.0 && self.enabled_types.is_empty() {
            return Err(Error::invalid_config("degradation.enabled_types", "empty while apply_probability > 0"));
        }
        if !within(self.jpeg_q_range, 0.01, 1.0) {
            return Err(Error::invalid_config("degradation.jpeg_q_range", "must lie in [0.01, 1]"));
        }
        if self.blur_kernel_choices.is_empty() || self.blur_kernel_choices.iter().any(|k| k % 2 == 0) {
            return Err(Error::invalid_config("degradation.blur_kernel_choices", "must be non-empty odd sizes"));
        }
        if !within(self.blur_sigma_range, 1e-3, 10.0) {
            return Err(Error::invalid_config("degradation.blur_sigma_range", "must lie in (0, 10]"));
        }
        if !within(self.noise_sigma_range, 0.0, 1.0) {
            return Err(Error::invalid_config("degradation.noise_sigma_range", "must lie in [0, 1]"));
        }
        if !within(self.mask_ratio_range, 0.0, 1.0) {
            return Err(Error::invalid_config("degradation.mask_ratio_range", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// One sampled degradation `(τ, θ)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Degradation {
    Identity,
    Jpeg { quality: u8 },
    GaussianBlur { kernel: usize, sigma: f64 },
    GaussianNoise { sigma: f64, seed: u64 },
    RandomMask { ratio: f64, seed: u64 },
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

impl Degradation {
    pub fn sample(spec: &DegradationSpec, rng_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        if !spec.is_active() || rng.random::<f64>() >= spec.apply_probability {
            return Degradation::Identity;
        }
        match *spec.enabled_types.choose(&mut rng).expect("non-empty") {
            DegradationType::Jpeg => Degradation::Jpeg {
                quality: (uniform(&mut rng, spec.jpeg_q_range) * 100.0).round().clamp(1.0, 100.0) as u8,
            },
            DegradationType::GaussianBlur => Degradation::GaussianBlur {
                kernel: *spec.blur_kernel_choices.choose(&mut rng).expect("non-empty"),
                sigma: uniform(&mut rng, spec.blur_sigma_range),
            },
            DegradationType::GaussianNoise => {
                Degradation::GaussianNoise { sigma: uniform(&mut rng, spec.noise_sigma_range), seed: rng.random() }
            }
            DegradationType::RandomMask => {
                Degradation::RandomMask { ratio: uniform(&mut rng, spec.mask_ratio_range), seed: rng.random() }
            }
        }
    }

    /// Applies the degradation; `salt` varies the noise and mask draws
    /// between images sharing the same parameters.
    pub fn apply(&self, img: &Image, salt: u64) -> Image {
        match *self {
            Degradation::Identity => img.clone(),
            Degradation::Jpeg { quality } => jpeg_round_trip(img, quality),
            Degradation::GaussianBlur { kernel, sigma } => blur_replicate(img, kernel, sigma),
            Degradation::GaussianNoise { sigma, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::mix_seed(&[seed, salt]));
                let normal = Normal::new(0.0, sigma).expect("finite sigma");
                let px = img.pixels().iter().map(|&v| v + normal.sample(&mut rng) as f32).collect();
                Image::from_clamped(img.side(), px)
            }
            Degradation::RandomMask { ratio, seed } => {
                mask_region(img, ratio, &mut ChaCha8Rng::seed_from_u64(crate::seed::mix_seed(&[seed, salt])))
            }
        }
    }
}

/// Degrades a single image.
pub fn augment(img: &Image, spec: &DegradationSpec, rng_seed: u64) -> Image {
    Degradation::sample(spec, rng_seed).apply(img, 0)
}

/// Degrades all field images of a capture with one shared draw of `(τ, θ)`.
pub fn augment_set(set: &FovImageSet, spec: &DegradationSpec, rng_seed: u64) -> FovImageSet {
    let d = Degradation::sample(spec, rng_seed);
    if d == Degradation::Identity {
        return set.clone();
    }
    let images = set.images.iter().enumerate().map(|(i, img)| d.apply(img, i as u64)).collect();
    FovImageSet { images, ..set.clone() }
}

fn jpeg_round_trip(img: &Image, quality: u8) -> Image {
    use image::codecs::jpeg::JpegEncoder;
    let side = img.side() as u32;
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality)
        .encode(&img.quantized_u8(), side, side, image::ExtendedColorType::L8)
        .expect("in-memory encode");
    let decoded = image::load_from_memory_with_format(&buf, image::ImageFormat::Jpeg).expect("own encoding decodes");
    Image::from_u8(img.side(), decoded.to_luma8().as_raw()).expect("decoded size")
}

/// Separable Gaussian blur of odd size `kernel` with edge replication.
fn blur_replicate(img: &Image, kernel: usize, sigma: f64) -> Image {
    let r = (kernel / 2) as isize;
    let mut k: Vec<f32> = (-r..=r).map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp() as f32).collect();
    let total: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    let n = img.side() as isize;
    let clampi = |i: isize| i.clamp(0, n - 1) as usize;
    let src = img.pixels();
    let mut tmp = vec![0.0f32; src.len()];
    for y in 0..n {
        for x in 0..n {
            let mut acc = 0.0;
            for (j, w) in k.iter().enumerate() {
                acc += w * src[y as usize * n as usize + clampi(x + j as isize - r)];
            }
            tmp[(y * n + x) as usize] = acc;
        }
    }
    let mut out = vec![0.0f32; src.len()];
    for y in 0..n {
        for x in 0..n {
            let mut acc = 0.0;
            for (j, w) in k.iter().enumerate() {
                acc += w * tmp[clampi(y + j as isize - r) * n as usize + x as usize];
            }
            out[(y * n + x) as usize] = acc;
        }
    }
    Image::from_clamped(img.side(), out)
}

/// Zeroes exactly `round(ratio * area)` pixels forming a rectangle of
/// `ceil(sqrt(count))` columns whose last row may be partial.
fn mask_region(img: &Image, ratio: f64, rng: &mut ChaCha8Rng) -> Image {
    let side = img.side();
    let count = (ratio * (side * side) as f64).round() as usize;
    let mut px = img.pixels().to_vec();
    if count == 0 {
        return img.clone();
    }
    let w = ((count as f64).sqrt().ceil() as usize).clamp(1, side);
    let h = count.div_ceil(w);
    let top = rng.random_range(0..=side - h);
    let left = rng.random_range(0..=side - w);
    for i in 0..count {
        px[(top + i / w) * side + left + i % w] = 0.0;
    }
    Image::from_clamped(side, px)
}
