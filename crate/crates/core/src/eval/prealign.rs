use crate::optics::{gradient_energy, simulate_capture_noiseless, DomainConfig, LensInstance, MisalignmentOffset};
use crate::{Error, Result};

/// Mean gradient energy over the field images of a noiseless capture.
pub fn sharpness(offset: MisalignmentOffset, lens: &LensInstance, domain: &DomainConfig) -> Result<f64> {
    let set = simulate_capture_noiseless(offset, lens, domain)?;
    Ok(set.images.iter().map(gradient_energy).sum::<f64>() / set.images.len() as f64)
}

/// Scan a square grid `center ± scan_range` at `scan_step` and return the
/// sharpest position. Ties go to the smaller `|offset|`.
pub fn prealign_around(
    lens: &LensInstance,
    domain: &DomainConfig,
    center: MisalignmentOffset,
    scan_range: f64,
    scan_step: f64,
) -> Result<MisalignmentOffset> {
    if !(scan_range >= 0.0 && scan_step > 0.0) || !center.is_finite() {
        return Err(Error::InvalidInput(format!("scan range {scan_range} / step {scan_step}")));
    }
    let n = (scan_range / scan_step + 1e-9).floor() as i64;
    let mut best = (f64::NEG_INFINITY, f64::INFINITY, center);
    for iy in -n..=n {
        for ix in -n..=n {
            let off = center + MisalignmentOffset::new(ix as f64 * scan_step, iy as f64 * scan_step);
            let s = sharpness(off, lens, domain)?;
            let r = off.norm();
            if s > best.0 || (s == best.0 && r < best.1) {
                best = (s, r, off);
            }
        }
    }
    Ok(best.2)
}

/// Single-grid pre-alignment scan centered on the nominal position.
pub fn prealign(
    lens: &LensInstance,
    domain: &DomainConfig,
    scan_range: f64,
    scan_step: f64,
) -> Result<MisalignmentOffset> {
    prealign_around(lens, domain, MisalignmentOffset::ZERO, scan_range, scan_step)
}

/// Coarse scan over ±6 µm at 1 µm, then a ±1 µm refinement at 0.25 µm.
pub fn prealign_origin(lens: &LensInstance, domain: &DomainConfig) -> Result<MisalignmentOffset> {
    let coarse = prealign(lens, domain, 6.0, 1.0)?;
    prealign_around(lens, domain, coarse, 1.0, 0.25)
}
