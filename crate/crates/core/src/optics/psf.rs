use super::{DomainConfig, FieldPoint, LensInstance, MisalignmentOffset};
use crate::{Error, Result};

/// Sampled point spread function; odd side, non-negative, unit sum.
#[derive(Clone, Debug, PartialEq)]
pub struct PsfKernel {
    values: Vec<f64>,
    side: usize,
    pixel_pitch: f64,
}

impl PsfKernel {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn radius(&self) -> usize {
        self.side / 2
    }

    pub fn pixel_pitch(&self) -> f64 {
        self.pixel_pitch
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.side + col]
    }

    /// `(x, y)` centroid relative to the kernel center, in pixels.
    pub fn centroid(&self) -> (f64, f64) {
        let r = self.radius() as f64;
        let (mut cx, mut cy) = (0.0, 0.0);
        for (i, &v) in self.values.iter().enumerate() {
            cx += v * ((i % self.side) as f64 - r);
            cy += v * ((i / self.side) as f64 - r);
        }
        (cx, cy)
    }

    /// L2 distance after embedding both kernels in a common frame.
    pub fn l2_distance(&self, other: &PsfKernel) -> f64 {
        let r = self.radius().max(other.radius()) as isize;
        let lookup = |k: &PsfKernel, y: isize, x: isize| {
            let kr = k.radius() as isize;
            if y.abs() > kr || x.abs() > kr {
                0.0
            } else {
                k.at((y + kr) as usize, (x + kr) as usize)
            }
        };
        let mut acc = 0.0;
        for y in -r..=r {
            for x in -r..=r {
                acc += (lookup(self, y, x) - lookup(other, y, x)).powi(2);
            }
        }
        acc.sqrt()
    }
}

/// Elliptical two-lobe Gaussian PSF for a lens at the given decenter.
///
/// With `u = offset + tolerance_shift`, the core is stretched along `u`
/// (`σ∥ = base·g∥ + astig·|u|`, `σ⊥ = base·g⊥ + 0.4·astig·|u|`), a coma lobe of
/// weight `min(0.5, 0.02·|u|)` sits at `coma·g_c·u·(1 + |field|)`, and the
/// whole mixture is blurred by an isotropic Gaussian of `smoothing_extra`.
pub fn make_psf(
    offset: MisalignmentOffset,
    field: FieldPoint,
    lens: &LensInstance,
    domain: &DomainConfig,
) -> Result<PsfKernel> {
    if !offset.is_finite() {
        return Err(Error::InvalidInput(format!("non-finite offset {offset:?}")));
    }
    let p = &domain.psf;
    let u = offset + lens.tolerance_shift;
    let mag = u.norm();
    let (ex, ey) = if mag > 0.0 { (u.dx / mag, u.dy / mag) } else { (1.0, 0.0) };
    let s_par = p.base_sigma * lens.gain_parallel + p.astig_coeff * mag;
    let s_perp = p.base_sigma * lens.gain_perp + 0.4 * p.astig_coeff * mag;
    let smooth = p.smoothing_extra * p.smoothing_extra;
    // Convolving Gaussians adds covariances.
    let vpar = s_par * s_par + smooth;
    let vperp = s_perp * s_perp + smooth;
    let cxx = (vpar * ex * ex + vperp * ey * ey).max(1e-12);
    let cyy = (vpar * ey * ey + vperp * ex * ex).max(1e-12);
    let cxy = (vpar - vperp) * ex * ey;
    let det = (cxx * cyy - cxy * cxy).max(1e-24);
    let (ixx, iyy, ixy) = (cyy / det, cxx / det, -cxy / det);

    let lobe_scale = p.coma_coeff * lens.coma_gain * (1.0 + field.radius());
    let (lx, ly) = (lobe_scale * u.dx, lobe_scale * u.dy);
    let w = (0.02 * mag).min(0.5);

    let sigma_max = vpar.max(vperp).sqrt();
    let radius = ((4.0 * sigma_max + lx.hypot(ly)).ceil() as usize).max(1);
    let side = 2 * radius + 1;
    let gauss = |x: f64, y: f64| (-0.5 * (ixx * x * x + 2.0 * ixy * x * y + iyy * y * y)).exp();
    let mut values = Vec::with_capacity(side * side);
    for i in 0..side {
        let y = i as f64 - radius as f64;
        for j in 0..side {
            let x = j as f64 - radius as f64;
            let core = gauss(x, y);
            let lobe = if w > 0.0 { gauss(x - lx, y - ly) } else { 0.0 };
            values.push((1.0 - w) * core + w * lobe);
        }
    }
    let total: f64 = values.iter().sum();
    if total > 0.0 && total.is_finite() {
        values.iter_mut().for_each(|v| *v /= total);
    } else {
        values.iter_mut().for_each(|v| *v = 0.0);
        values[radius * side + radius] = 1.0;
    }
    Ok(PsfKernel { values, side, pixel_pitch: p.pixel_pitch_um })
}
