//! Shared fixtures for the benchmarks.

use aalab_core::dataset::{build_source_dataset, Dataset, GridSpec};
use aalab_core::optics::{DomainConfig, DomainLabel, ToleranceModel};

pub const SIDE: usize = 48;

pub fn desk_grid() -> GridSpec {
    GridSpec::new(15.0, 3.0)
}

/// Ideal lens plus one tolerance lens on the desk grid.
pub fn small_source(label: DomainLabel) -> Dataset {
    build_source_dataset(&DomainConfig::standard(label, SIDE), 1, desk_grid(), &ToleranceModel::default(), 1)
        .expect("valid fixture")
}
