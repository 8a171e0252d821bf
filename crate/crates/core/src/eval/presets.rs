use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::metrics::{evaluate, EvalReport};
use crate::aligner::{
    train_aligner, AlignerArch, AlignerModel, AlignerTrainConfig, DegradationSpec, MetricsRow, TrainData,
};
use crate::dataset::{Dataset, EvalDatasets};
use crate::{Error, Result};

/// Lens id of the ideal lens in every source set.
const IDEAL_LENS_ID: u32 = 0;

/// The six compared training recipes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PipelinePreset {
    /// Supervised on `n` densely sampled oracle lenses in the target domain.
    OnDevice(usize),
    /// Supervised on `n` oracle lenses sampled at five times the step.
    OnDeviceSparse(usize),
    /// Source domain, ideal lens only.
    SimulationNoTol,
    /// Source domain, ideal plus tolerance lenses.
    Simulation,
    /// Domain-adaptive training on the ideal lens and its translation.
    DA3NoTol,
    DA3,
}

impl PipelinePreset {
    /// The comparison table, with `n_oracle` dense on-device lenses.
    pub fn table(n_oracle: usize) -> Vec<PipelinePreset> {
        use PipelinePreset::*;
        vec![OnDevice(n_oracle), OnDeviceSparse(1), SimulationNoTol, Simulation, DA3NoTol, DA3]
    }

    pub fn is_domain_adaptive(self) -> bool {
        matches!(self, PipelinePreset::DA3 | PipelinePreset::DA3NoTol)
    }
}

impl fmt::Display for PipelinePreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PipelinePreset::OnDevice(n) => write!(f, "OnDevice({n})"),
            PipelinePreset::OnDeviceSparse(n) => write!(f, "OnDeviceSparse({n})"),
            PipelinePreset::SimulationNoTol => f.write_str("SimulationNoTol"),
            PipelinePreset::Simulation => f.write_str("Simulation"),
            PipelinePreset::DA3NoTol => f.write_str("DA3NoTol"),
            PipelinePreset::DA3 => f.write_str("DA3"),
        }
    }
}

impl FromStr for PipelinePreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid_config("preset", format!("unknown preset `{s}`"));
        let count = |inner: &str| inner.strip_suffix(')').and_then(|n| n.parse::<usize>().ok()).filter(|&n| n > 0);
        if let Some(rest) = s.strip_prefix("OnDeviceSparse(") {
            return count(rest).map(PipelinePreset::OnDeviceSparse).ok_or_else(bad);
        }
        if let Some(rest) = s.strip_prefix("OnDevice(") {
            return count(rest).map(PipelinePreset::OnDevice).ok_or_else(bad);
        }
        match s {
            "SimulationNoTol" => Ok(PipelinePreset::SimulationNoTol),
            "Simulation" => Ok(PipelinePreset::Simulation),
            "DA3NoTol" => Ok(PipelinePreset::DA3NoTol),
            "DA3" => Ok(PipelinePreset::DA3),
            _ => Err(bad()),
        }
    }
}

/// Datasets shared by all presets.
pub struct PipelineData<'a> {
    pub source: &'a Dataset,
    /// Source translated by the trained generator; needed by the DA presets.
    pub translated: Option<&'a Dataset>,
    pub eval: &'a EvalDatasets,
}

#[derive(Clone, Debug)]
pub struct PipelineSettings {
    pub arch: AlignerArch,
    pub aligner: AlignerTrainConfig,
    /// Applied by the DA presets only.
    pub degradation: DegradationSpec,
}

pub struct PipelineRun {
    pub preset: PipelinePreset,
    pub model: AlignerModel,
    pub curve: Vec<MetricsRow>,
    pub report: EvalReport,
}

fn missing(what: &str) -> Error {
    Error::invalid_config("datasets", format!("preset needs the {what} dataset"))
}

fn oracle_subset(ds: &Dataset, n: usize) -> Result<Dataset> {
    let ids = ds.lens_ids();
    if n > ids.len() {
        return Err(Error::invalid_config(
            "n_oracle",
            format!("preset wants {n} oracle lenses, {} available", ids.len()),
        ));
    }
    ds.subset(&ids[..n])
}

/// Training inputs of a preset: supervised datasets or a source/translation pair,
/// with the loss weights and augmentation it trains under.
pub fn training_inputs(
    preset: PipelinePreset,
    data: &PipelineData<'_>,
    settings: &PipelineSettings,
) -> Result<(Vec<Dataset>, AlignerTrainConfig, DegradationSpec)> {
    let supervised = AlignerTrainConfig { lambda_adv: 0.0, lambda_pix: 0.0, ..settings.aligner.clone() };
    let plain = DegradationSpec::disabled();
    let translated = || data.translated.ok_or_else(|| missing("translated source"));
    Ok(match preset {
        PipelinePreset::OnDevice(n) => (vec![oracle_subset(&data.eval.oracle, n)?], supervised, plain),
        PipelinePreset::OnDeviceSparse(n) => {
            let sparse = data.eval.oracle_sparse.as_ref().ok_or_else(|| missing("sparse oracle"))?;
            (vec![oracle_subset(sparse, n)?], supervised, plain)
        }
        PipelinePreset::SimulationNoTol => (vec![data.source.subset(&[IDEAL_LENS_ID])?], supervised, plain),
        PipelinePreset::Simulation => (vec![data.source.clone()], supervised, plain),
        PipelinePreset::DA3NoTol => (
            vec![data.source.subset(&[IDEAL_LENS_ID])?, translated()?.subset(&[IDEAL_LENS_ID])?],
            settings.aligner.clone(),
            settings.degradation.clone(),
        ),
        PipelinePreset::DA3 => {
            (vec![data.source.clone(), translated()?.clone()], settings.aligner.clone(), settings.degradation.clone())
        }
    })
}

/// Trains the preset's aligner and evaluates it on the shared test set.
pub fn run_pipeline(
    preset: PipelinePreset,
    data: &PipelineData<'_>,
    settings: &PipelineSettings,
) -> Result<PipelineRun> {
    let (sets, cfg, deg) = training_inputs(preset, data, settings)?;
    let train = if preset.is_domain_adaptive() {
        TrainData::Paired { src: &sets[0], s2t: &sets[1] }
    } else {
        TrainData::Single(sets.iter().collect())
    };
    let out = train_aligner(train, settings.arch.clone(), &cfg, &deg)?;
    let report = evaluate(&out.model, &data.eval.test)?;
    Ok(PipelineRun { preset, model: out.model, curve: out.curve, report })
}
