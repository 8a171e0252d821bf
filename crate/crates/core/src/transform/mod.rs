//! Source-to-target image restyling: a quantized-bottleneck U-Net generator
//! trained against a target-style patch critic, and dataset translation.

mod loss;
mod model;
mod train;

pub use loss::*;
pub use model::*;
pub use train::*;

#[cfg(test)]
mod tests;
