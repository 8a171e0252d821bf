//! Pre-alignment, error metrics, heatmaps, single-step adjustment and the
//! pipeline presets compared in the benchmark table.

mod adjust;
mod metrics;
mod prealign;
mod presets;

pub use adjust::*;
pub use metrics::*;
pub use prealign::{prealign, prealign_around, prealign_origin, sharpness};
pub use presets::*;
