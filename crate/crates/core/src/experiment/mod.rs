//! Scenario configuration and the staged, hash-guarded experiment runner.

mod config;
mod stages;

pub use config::*;
pub use stages::*;

#[cfg(test)]
mod tests;
