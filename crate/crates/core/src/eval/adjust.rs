use serde::{Deserialize, Serialize};

use super::metrics::{predictions, OffsetPredictor};
use crate::dataset::{Dataset, LensRecord};
use crate::optics::{simulate_capture, DomainConfig, FovImageSet, MisalignmentOffset};
use crate::Result;

/// Residual tolerance at the reference ±30 µm range.
pub const REFERENCE_THRESHOLD_UM: f64 = 2.0;
const REFERENCE_RANGE_UM: f64 = 30.0;

/// Success threshold scaled with the scan range (2 µm at ±30 µm).
pub fn scaled_threshold(range_um: f64) -> f64 {
    REFERENCE_THRESHOLD_UM * range_um / REFERENCE_RANGE_UM
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdjustResult {
    pub start: MisalignmentOffset,
    pub predicted: MisalignmentOffset,
    pub residual: MisalignmentOffset,
    pub success: bool,
}

pub fn is_success(residual: MisalignmentOffset, threshold_um: f64) -> bool {
    residual.dx.abs() <= threshold_um && residual.dy.abs() <= threshold_um
}

fn settle(start: MisalignmentOffset, predicted: MisalignmentOffset, threshold_um: f64) -> AdjustResult {
    let residual = start - predicted;
    AdjustResult { start, predicted, residual, success: is_success(residual, threshold_um) }
}

/// Capture at `start`, move by `-prediction`, and capture again.
///
/// `start` is relative to the lens' pre-aligned origin. Returns the outcome
/// and the post-adjustment capture.
pub fn adjust_once(
    model: &dyn OffsetPredictor,
    lens: &LensRecord,
    start: MisalignmentOffset,
    domain: &DomainConfig,
    rng_seed: u64,
    threshold_um: f64,
) -> Result<(AdjustResult, FovImageSet)> {
    let mut before = simulate_capture(lens.origin + start, &lens.lens, domain, rng_seed)?;
    before.offset = start;
    let predicted = model.predict_sets(&[&before])?[0];
    let result = settle(start, predicted, threshold_um);
    let mut after = simulate_capture(lens.origin + result.residual, &lens.lens, domain, rng_seed.wrapping_add(1))?;
    after.offset = result.residual;
    Ok((result, after))
}

/// Single-step adjustment from every sample of a labeled set.
///
/// The stored captures are exactly what [`adjust_once`] would capture from
/// each start with the sample's seed, so they are reused.
pub fn adjust_dataset(model: &dyn OffsetPredictor, test: &Dataset, threshold_um: f64) -> Result<Vec<AdjustResult>> {
    Ok(predictions(model, test)?.into_iter().map(|p| settle(p.label, p.predicted, threshold_um)).collect())
}

pub fn success_rate(results: &[AdjustResult]) -> f64 {
    results.iter().filter(|r| r.success).count() as f64 / results.len().max(1) as f64
}
