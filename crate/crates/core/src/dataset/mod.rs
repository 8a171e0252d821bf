//! Labeled grid, unlabeled random and evaluation datasets, plus their
//! on-disk layout.

mod build;
mod io;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::optics::{DomainConfig, FovImageSet, LensInstance, MisalignmentOffset, ToleranceModel};
use crate::{Error, Result};

pub use build::{build_eval_datasets, build_source_dataset, build_target_dataset, EvalDatasets};
pub use io::{
    config_hash, load_dataset, manifest_for, read_manifest, read_sealed_audit, save_dataset, sha256_hex,
    verify_dataset, Manifest, SCHEMA_VERSION,
};

/// First lens id of each role; keeps training and evaluation lenses disjoint.
pub const TARGET_LENS_ID: u32 = 100;
pub const TEST_LENS_BASE: u32 = 200;
pub const ORACLE_LENS_BASE: u32 = 300;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Source,
    PseudoTarget,
    TargetUnlabeled,
    Oracle,
    Test,
}

impl Role {
    pub fn is_labeled(self) -> bool {
        self != Role::TargetUnlabeled
    }
}

/// Symmetric square grid `{-range, -range + step, ..., range}²`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub range_um: f64,
    pub step_um: f64,
}

impl GridSpec {
    pub fn new(range_um: f64, step_um: f64) -> Self {
        Self { range_um, step_um }
    }

    pub fn steps_per_side(&self) -> Result<usize> {
        if !(self.range_um > 0.0 && self.step_um > 0.0) {
            return Err(Error::invalid_config("sampling", "range_um and step_um must be positive"));
        }
        let q = self.range_um / self.step_um;
        if (q - q.round()).abs() > 1e-9 {
            return Err(Error::invalid_config(
                "sampling",
                format!("range {} is not a multiple of step {}", self.range_um, self.step_um),
            ));
        }
        Ok(2 * q.round() as usize + 1)
    }

    pub fn count(&self) -> Result<usize> {
        Ok(self.steps_per_side()?.pow(2))
    }

    pub fn positions(&self) -> Result<Vec<MisalignmentOffset>> {
        grid_positions(self.range_um, self.step_um)
    }

    /// Same range at `factor` times the step.
    pub fn coarsened(&self, factor: f64) -> Self {
        Self { range_um: self.range_um, step_um: self.step_um * factor }
    }
}

/// Row-major grid (`dy` outer, `dx` inner).
pub fn grid_positions(range_um: f64, step_um: f64) -> Result<Vec<MisalignmentOffset>> {
    let n = GridSpec::new(range_um, step_um).steps_per_side()?;
    let half = (n / 2) as i64;
    let mut out = Vec::with_capacity(n * n);
    for iy in -half..=half {
        for ix in -half..=half {
            out.push(MisalignmentOffset::new(ix as f64 * step_um, iy as f64 * step_um));
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Sampling {
    Grid { range_um: f64, step_um: f64 },
    Random { range_um: f64, n_random: usize },
}

impl Sampling {
    pub fn range_um(&self) -> f64 {
        match *self {
            Sampling::Grid { range_um, .. } | Sampling::Random { range_um, .. } => range_um,
        }
    }

    pub fn grid(&self) -> Option<GridSpec> {
        match *self {
            Sampling::Grid { range_um, step_um } => Some(GridSpec { range_um, step_um }),
            Sampling::Random { .. } => None,
        }
    }
}

impl From<GridSpec> for Sampling {
    fn from(g: GridSpec) -> Self {
        Sampling::Grid { range_um: g.range_um, step_um: g.step_um }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub sample_id: u32,
    pub label: Option<MisalignmentOffset>,
    pub images: Arc<FovImageSet>,
    pub rng_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LensRecord {
    pub lens: LensInstance,
    /// Pre-aligned reference position; labels are relative to it.
    pub origin: MisalignmentOffset,
    pub samples: Vec<Sample>,
}

/// Everything needed to regenerate a dataset, hashed into its manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub role: Role,
    pub domain: DomainConfig,
    pub sampling: Sampling,
    pub tolerance: ToleranceModel,
    /// Lens ids in storage order.
    pub lens_ids: Vec<u32>,
    /// Content hash of whatever produced this dataset from another one
    /// (the generator checkpoint for translated data).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub derived_from: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub dataset_seed: u64,
    pub lenses: Vec<LensRecord>,
    /// True positions of unlabeled captures; written to the audit sidecar only.
    pub(crate) sealed: Option<Vec<MisalignmentOffset>>,
}

impl Dataset {
    pub fn role(&self) -> Role {
        self.config.role
    }

    pub fn domain(&self) -> &DomainConfig {
        &self.config.domain
    }

    pub fn sampling(&self) -> &Sampling {
        &self.config.sampling
    }

    pub fn lens_ids(&self) -> Vec<u32> {
        self.lenses.iter().map(|l| l.lens.lens_id).collect()
    }

    pub fn n_samples(&self) -> usize {
        self.lenses.iter().map(|l| l.samples.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.n_samples() == 0
    }

    pub fn samples(&self) -> impl Iterator<Item = (&LensRecord, &Sample)> {
        self.lenses.iter().flat_map(|l| l.samples.iter().map(move |s| (l, s)))
    }

    pub fn image_side(&self) -> usize {
        self.config.domain.image_side
    }

    pub fn config_hash(&self) -> String {
        config_hash(&self.config)
    }

    /// Datasets restricted to the given lens ids, in the given order.
    pub fn subset(&self, lens_ids: &[u32]) -> Result<Dataset> {
        let lenses = lens_ids
            .iter()
            .map(|id| {
                self.lenses
                    .iter()
                    .find(|l| l.lens.lens_id == *id)
                    .cloned()
                    .ok_or_else(|| Error::InvalidInput(format!("lens {id} not in dataset")))
            })
            .collect::<Result<Vec<_>>>()?;
        let config = DatasetConfig { lens_ids: lens_ids.to_vec(), ..self.config.clone() };
        Ok(Dataset { config, dataset_seed: self.dataset_seed, lenses, sealed: None })
    }

    /// Checks the structural invariants shared by every role.
    pub fn validate(&self) -> Result<()> {
        if self.lens_ids() != self.config.lens_ids {
            return Err(Error::InvalidInput("lens records do not match configured lens ids".into()));
        }
        let labeled = self.role().is_labeled();
        for lens in &self.lenses {
            for (i, s) in lens.samples.iter().enumerate() {
                if s.sample_id as usize != i {
                    return Err(Error::InvalidInput(format!("lens {}: sample ids not contiguous", lens.lens.lens_id)));
                }
                if s.label.is_some() != labeled {
                    return Err(Error::InvalidInput(format!(
                        "lens {} sample {i}: label presence does not match role",
                        lens.lens.lens_id
                    )));
                }
                if s.images.images.len() != self.config.domain.fields.len() {
                    return Err(Error::InvalidInput("wrong number of field images".into()));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
