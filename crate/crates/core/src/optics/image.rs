use crate::{Error, Result};

/// Square grayscale image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    side: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(side: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != side * side {
            return Err(Error::InvalidInput(format!("{} pixels for side {side}", pixels.len())));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { side, pixels })
    }

    /// Clamps into `[0, 1]`; NaN becomes 0.
    pub fn from_clamped(side: usize, mut pixels: Vec<f32>) -> Self {
        assert_eq!(pixels.len(), side * side);
        for p in &mut pixels {
            *p = if p.is_nan() { 0.0 } else { p.clamp(0.0, 1.0) };
        }
        Self { side, pixels }
    }

    pub fn zeros(side: usize) -> Self {
        Self { side, pixels: vec![0.0; side * side] }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.side + col]
    }

    /// Centered square crop around `(center, center)`; the crop's own center
    /// lands at `side / 2`.
    pub fn crop_centered(&self, center: usize, side: usize) -> Result<Self> {
        let start = center
            .checked_sub(side / 2)
            .filter(|s| s + side <= self.side)
            .ok_or_else(|| Error::InvalidInput(format!("crop of {side} around {center} leaves the image")))?;
        let mut pixels = Vec::with_capacity(side * side);
        for r in start..start + side {
            pixels.extend_from_slice(&self.pixels[r * self.side + start..r * self.side + start + side]);
        }
        Ok(Self { side, pixels })
    }

    pub fn l2_distance(&self, other: &Image) -> f64 {
        self.pixels.iter().zip(&other.pixels).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum::<f64>().sqrt()
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        self.pixels.iter().zip(&other.pixels).map(|(&a, &b)| (a - b).abs() as f64).sum::<f64>()
            / self.pixels.len() as f64
    }

    /// Round-trip through 8-bit storage.
    pub fn quantized_u8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect()
    }

    pub fn from_u8(side: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(side, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    /// Intensity-weighted centroid `(row, col)`.
    pub fn centroid(&self) -> (f64, f64) {
        let mut total = 0.0;
        let (mut r, mut c) = (0.0, 0.0);
        for (i, &v) in self.pixels.iter().enumerate() {
            let v = v as f64;
            total += v;
            r += v * (i / self.side) as f64;
            c += v * (i % self.side) as f64;
        }
        if total == 0.0 {
            let mid = (self.side / 2) as f64;
            return (mid, mid);
        }
        (r / total, c / total)
    }
}

/// Sum of squared forward differences along both axes.
pub fn gradient_energy(img: &Image) -> f64 {
    let s = img.side;
    let p = &img.pixels;
    let mut e = 0.0;
    for r in 0..s {
        for c in 0..s {
            let v = p[r * s + c] as f64;
            if c + 1 < s {
                e += (p[r * s + c + 1] as f64 - v).powi(2);
            }
            if r + 1 < s {
                e += (p[(r + 1) * s + c] as f64 - v).powi(2);
            }
        }
    }
    e
}
