use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::aligner::{AlignerArch, AlignerTrainConfig, DegradationSpec};
use crate::dataset::GridSpec;
use crate::optics::{DomainConfig, DomainLabel, ToleranceModel};
use crate::seed::mix_seed;
use crate::transform::{GeneratorConfig, TransformTrainConfig};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    SecurityLike,
    SmartphoneLike,
    Desk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSizes {
    /// Tolerance lenses added to the ideal lens in the source set.
    pub m_tolerance_lenses: usize,
    pub n_test: usize,
    pub n_oracle: usize,
    pub n_random: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformSection {
    pub generator: GeneratorConfig,
    pub training: TransformTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignerSection {
    pub arch: AlignerArch,
    pub training: AlignerTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub source_domain: DomainConfig,
    pub target_domain: DomainConfig,
    pub sizes: DatasetSizes,
    pub sampling: GridSpec,
    pub tolerance: ToleranceModel,
    pub transform: TransformSection,
    pub aligner: AlignerSection,
    pub degradation: DegradationSpec,
    pub global_seed: u64,
    pub output_dir: PathBuf,
}

/// Sub-seeds derived from the global seed.
pub mod seeds {
    pub const SOURCE: u64 = 1;
    pub const TARGET: u64 = 2;
    pub const EVAL: u64 = 3;
    pub const TRANSFORM: u64 = 4;
    pub const ALIGNER: u64 = 5;
}

impl ExperimentConfig {
    /// Complete configuration for a scenario.
    pub fn preset(scenario: Scenario, global_seed: u64) -> Self {
        let (range, step, side) = match scenario {
            Scenario::SecurityLike => (30.0, 2.0, 70),
            Scenario::SmartphoneLike => (15.0, 1.0, 50),
            Scenario::Desk => (15.0, 3.0, 48),
        };
        let sizes = match scenario {
            Scenario::Desk => DatasetSizes { m_tolerance_lenses: 3, n_test: 4, n_oracle: 2, n_random: 30 },
            _ => DatasetSizes { m_tolerance_lenses: 10, n_test: 17, n_oracle: 3, n_random: 100 },
        };
        let mut transform =
            TransformTrainConfig { rng_seed: mix_seed(&[global_seed, seeds::TRANSFORM]), ..Default::default() };
        let mut aligner =
            AlignerTrainConfig { rng_seed: mix_seed(&[global_seed, seeds::ALIGNER]), ..Default::default() };
        let mut generator = GeneratorConfig::new(side);
        if scenario == Scenario::Desk {
            generator.base_channels = 8;
            transform.iterations = 1500;
            transform.learning_rate = 2e-4;
            transform.disc_learning_rate = Some(1e-3);
            aligner.iterations = 1000;
            aligner.batch_size = 24;
        }
        Self {
            scenario,
            source_domain: DomainConfig::standard(DomainLabel::SourceIsp, side),
            target_domain: DomainConfig::standard(DomainLabel::Target, side),
            sizes,
            sampling: GridSpec::new(range, step),
            tolerance: ToleranceModel::default(),
            transform: TransformSection { generator, training: transform },
            aligner: AlignerSection { arch: AlignerArch::new(side, range), training: aligner },
            degradation: DegradationSpec::default(),
            global_seed,
            output_dir: PathBuf::from("runs").join(scenario_name(scenario)),
        }
    }

    pub fn seed(&self, stream: u64) -> u64 {
        mix_seed(&[self.global_seed, stream])
    }

    pub fn validate(&self) -> Result<()> {
        self.source_domain.validate()?;
        self.target_domain.validate()?;
        let side = self.target_domain.image_side;
        if self.source_domain.image_side != side {
            return Err(Error::invalid_config("source_domain.image_side", "must equal target_domain.image_side"));
        }
        if self.transform.generator.image_side != side {
            return Err(Error::invalid_config("transform.generator.image_side", "must equal the domain image side"));
        }
        if self.aligner.arch.image_side != side {
            return Err(Error::invalid_config("aligner.arch.image_side", "must equal the domain image side"));
        }
        let n_grid = self.sampling.count()?;
        let s = &self.sizes;
        if s.n_test == 0 {
            return Err(Error::invalid_config("sizes.n_test", "must be at least 1"));
        }
        if s.n_random == 0 || s.n_random * 4 > n_grid {
            return Err(Error::invalid_config("sizes.n_random", format!("must be in [1, {}]", n_grid / 4)));
        }
        if s.n_oracle == 0 {
            return Err(Error::invalid_config("sizes.n_oracle", "the on-device presets need at least 1 oracle lens"));
        }
        if !(self.tolerance.shift_um >= 0.0 && (0.0..1.0).contains(&self.tolerance.gain_spread)) {
            return Err(Error::invalid_config("tolerance", "shift must be >= 0 and gain_spread in [0, 1)"));
        }
        self.transform.generator.validate()?;
        self.transform.training.validate()?;
        self.aligner.arch.validate()?;
        self.aligner.training.validate()?;
        self.degradation.validate()?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Writes `config.resolved.json` into the output directory.
    pub fn write_resolved(&self) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.output_dir).map_err(|e| Error::io(&self.output_dir, e))?;
        let path = self.output_dir.join("config.resolved.json");
        std::fs::write(&path, self.to_json()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

pub fn scenario_name(s: Scenario) -> &'static str {
    match s {
        Scenario::SecurityLike => "security_like",
        Scenario::SmartphoneLike => "smartphone_like",
        Scenario::Desk => "desk",
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn type_error(key: &str, e: impl std::fmt::Display) -> Error {
    Error::ConfigType { key: key.into(), msg: e.to_string() }
}

/// Fills a partial JSON object from its scenario preset and checks it.
///
/// `seed` overrides `global_seed`. Sub-seeds not given explicitly follow the
/// effective global seed.
pub fn resolve_config(user: Value, seed: Option<u64>) -> Result<ExperimentConfig> {
    let Value::Object(user) = user else {
        return Err(type_error("<root>", "expected a JSON object"));
    };
    let scenario: Scenario = match user.get("scenario") {
        None => return Err(Error::invalid_config("scenario", "required")),
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| type_error("scenario", e))?,
    };
    let global_seed = match (seed, user.get("global_seed")) {
        (Some(s), _) => s,
        (None, None) => 0,
        (None, Some(v)) => v.as_u64().ok_or_else(|| type_error("global_seed", "expected a non-negative integer"))?,
    };
    let mut merged = serde_json::to_value(ExperimentConfig::preset(scenario, global_seed)).expect("config serializes");
    let mut user: Map<String, Value> = user;
    if seed.is_some() {
        user.remove("global_seed");
    }
    merge(&mut merged, Value::Object(user));
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(merged).map_err(|e| {
        let path = e.path().to_string();
        let msg = e.inner().to_string();
        // The path already ends with the offending field name.
        if msg.starts_with("unknown field") {
            Error::UnknownKey(path)
        } else {
            type_error(&path, msg)
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(text: &str, seed: Option<u64>) -> Result<ExperimentConfig> {
    let value: Value = serde_json::from_str(text).map_err(|e| type_error("<root>", e))?;
    resolve_config(value, seed)
}

/// Reads and resolves a config file. Does not touch the output directory.
pub fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, seed)
}
