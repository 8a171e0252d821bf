//! Offset regressor, its training objectives and input degradations.

mod augment;
mod loss;
mod model;
mod train;

pub use augment::*;
pub use loss::*;
pub use model::*;
pub use train::*;

#[cfg(test)]
mod tests;
