use super::{
    isp_forward, isp_inverse, make_psf, DomainConfig, DomainLabel, FovImageSet, Image, IspConfig, LensInstance,
};
use super::{MisalignmentOffset, PsfKernel};
use crate::seed::mix_seed;
use crate::{Error, Result};

/// Side of the canvas the crosshair is drawn on before cropping.
pub const CANVAS_SIDE: usize = 90;
const CROSS_AT: usize = CANVAS_SIDE / 2;

/// Full canvas: a one-pixel cross of intensity 1 through `(45, 45)`.
pub fn render_canvas() -> Image {
    let mut px = vec![0.0f32; CANVAS_SIDE * CANVAS_SIDE];
    for i in 0..CANVAS_SIDE {
        px[CROSS_AT * CANVAS_SIDE + i] = 1.0;
        px[i * CANVAS_SIDE + CROSS_AT] = 1.0;
    }
    Image::from_clamped(CANVAS_SIDE, px)
}

/// Canvas cropped to `image_side`; the intersection lands at `image_side / 2`.
pub fn render_ideal_crosshair(domain: &DomainConfig) -> Result<Image> {
    if domain.image_side < 32 {
        return Err(Error::InvalidInput(format!("image_side {} below 32", domain.image_side)));
    }
    render_canvas().crop_centered(CROSS_AT, domain.image_side)
}

/// Zero-padded convolution of the canvas with `psf`, evaluated only on the
/// crop window.
fn convolve_cropped(canvas: &Image, psf: &PsfKernel, side: usize) -> Vec<f64> {
    let start = (CROSS_AT - side / 2) as isize;
    let r = psf.radius() as isize;
    let ks = psf.side();
    let kv = psf.values();
    let mut out = vec![0.0f64; side * side];
    let n = CANVAS_SIDE as isize;
    let s = side as isize;
    // Scatter each lit source pixel; the crosshair canvas is sparse.
    for (i, &v) in canvas.pixels().iter().enumerate() {
        if v == 0.0 {
            continue;
        }
        let v = v as f64;
        let (sy, sx) = (i as isize / n - start, i as isize % n - start);
        if sy + r < 0 || sy - r >= s || sx + r < 0 || sx - r >= s {
            continue;
        }
        for ky in 0..ks as isize {
            let oy = sy + ky - r;
            if oy < 0 || oy >= s {
                continue;
            }
            let row = &kv[ky as usize * ks..(ky as usize + 1) * ks];
            let x0 = (-(sx - r)).max(0);
            let x1 = (s - (sx - r)).min(ks as isize);
            let base = oy * s + sx - r;
            for kx in x0..x1 {
                out[(base + kx) as usize] += v * row[kx as usize];
            }
        }
    }
    out
}

pub fn simulate_capture(
    offset: MisalignmentOffset,
    lens: &LensInstance,
    domain: &DomainConfig,
    rng_seed: u64,
) -> Result<FovImageSet> {
    if !offset.is_finite() {
        return Err(Error::InvalidInput(format!("non-finite offset {offset:?}")));
    }
    let side = domain.image_side;
    if !(32..=CANVAS_SIDE).contains(&side) {
        return Err(Error::InvalidInput(format!("image_side {side} outside [32, {CANVAS_SIDE}]")));
    }
    let linear_canvas = isp_inverse(&render_canvas(), &domain.isp);
    let forward = match domain.label {
        DomainLabel::SourceClean => IspConfig::identity(),
        _ => domain.isp,
    };
    let images = domain
        .fields
        .iter()
        .enumerate()
        .map(|(k, &field)| {
            let psf = make_psf(offset, field, lens, domain)?;
            let blurred = convolve_cropped(&linear_canvas, &psf, side);
            let linear = Image::from_clamped(side, blurred.into_iter().map(|v| v as f32).collect());
            isp_forward(&linear, &forward, mix_seed(&[rng_seed, k as u64]))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FovImageSet { images, offset, lens_id: lens.lens_id, seed: rng_seed })
}

/// Capture with the signal chain fixed at its nominal, noise-free setting.
pub fn simulate_capture_noiseless(
    offset: MisalignmentOffset,
    lens: &LensInstance,
    domain: &DomainConfig,
) -> Result<FovImageSet> {
    simulate_capture(offset, lens, &domain.noiseless(), 0)
}
