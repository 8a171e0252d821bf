use std::cell::RefCell;
use std::collections::HashMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use log::info;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::{seeds, ExperimentConfig};
use crate::aligner::{train_aligner, AlignerModel, TrainData};
use crate::checkpoint::file_sha256;
use crate::dataset::{
    build_eval_datasets, build_source_dataset, build_target_dataset, load_dataset, save_dataset, sha256_hex,
    verify_dataset, Dataset, EvalDatasets,
};
use crate::eval::{
    adjust_dataset, error_heatmap, evaluate, metrics_csv, per_lens_csv, scaled_threshold, success_rate,
    training_inputs, EvalReport, PipelineData, PipelinePreset, PipelineSettings,
};
use crate::transform::{train_transform, translate_dataset, TransformModel};
use crate::{Error, Result};

const RECORD: &str = "stage.json";

/// What a stage did.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    /// Outputs already matched the configuration; nothing was recomputed.
    UpToDate,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StageRecord {
    stage: String,
    key: String,
    /// Output files relative to the stage directory, with their SHA-256.
    outputs: Vec<(String, String)>,
}

/// Single-pipeline adjustment summary, written next to each report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdjustSummary {
    pub threshold_um: f64,
    pub success_rate: f64,
    pub n_starts: usize,
    /// Mean heatmap cell over the inner and outer thirds of the range.
    pub radial_inner: f64,
    pub radial_outer: f64,
}

const DATASETS: [&str; 5] = ["source", "target", "test", "oracle", "oracle_sparse"];

fn hash_json(v: &serde_json::Value) -> String {
    sha256_hex(v.to_string().as_bytes())
}

/// Directory-safe form of a preset name, e.g. `OnDevice(2)` -> `ondevice_2`.
pub fn preset_slug(p: PipelinePreset) -> String {
    let s: String =
        p.to_string().to_lowercase().chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect();
    s.trim_matches('_').to_string()
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r).expect("row serializes"));
        s.push('\n');
    }
    write_bytes(path, s.as_bytes())
}

/// One experiment rooted at the configured output directory.
///
/// Every stage is guarded by a key hashed from the configuration slice it
/// depends on and the keys of its prerequisites, so rerunning with an
/// identical configuration verifies outputs and returns without work.
pub struct Experiment {
    pub cfg: ExperimentConfig,
    cache: RefCell<HashMap<PathBuf, Rc<Dataset>>>,
}

impl Experiment {
    /// Writes `config.resolved.json` and opens the stage log.
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        cfg.write_resolved()?;
        Ok(Self { cfg, cache: RefCell::new(HashMap::new()) })
    }

    pub fn root(&self) -> &Path {
        &self.cfg.output_dir
    }

    pub fn data_dir(&self, name: &str) -> PathBuf {
        self.root().join("data").join(name)
    }

    pub fn transform_dir(&self) -> PathBuf {
        self.root().join("transform")
    }

    pub fn generator_path(&self) -> PathBuf {
        self.transform_dir().join("generator.ckpt")
    }

    pub fn aligner_dir(&self, p: PipelinePreset) -> PathBuf {
        self.root().join("aligner").join(preset_slug(p))
    }

    pub fn aligner_path(&self, p: PipelinePreset) -> PathBuf {
        self.aligner_dir(p).join("model.ckpt")
    }

    pub fn eval_dir(&self, p: PipelinePreset) -> PathBuf {
        self.root().join("eval").join(preset_slug(p))
    }

    pub fn presets(&self) -> Vec<PipelinePreset> {
        PipelinePreset::table(self.cfg.sizes.n_oracle)
    }

    fn log(&self, stage: &str, status: &str, started: Instant) -> Result<()> {
        let path = self.root().join("stage.log");
        let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let line = format!("{ts} {stage} {status} {:.1}s\n", started.elapsed().as_secs_f64());
        info!("{}", line.trim_end());
        let mut f =
            std::fs::OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(line.as_bytes()).map_err(|e| Error::io(&path, e))
    }

    // Stage keys chain through their prerequisites.

    pub fn data_key(&self) -> String {
        let c = &self.cfg;
        hash_json(&json!({
            "stage": "gen-data",
            "source_domain": c.source_domain, "target_domain": c.target_domain, "sizes": c.sizes,
            "sampling": c.sampling, "tolerance": c.tolerance,
            "seeds": [c.seed(seeds::SOURCE), c.seed(seeds::TARGET), c.seed(seeds::EVAL)],
        }))
    }

    pub fn transform_key(&self) -> String {
        hash_json(&json!({ "stage": "train-transform", "data": self.data_key(), "transform": self.cfg.transform }))
    }

    pub fn translate_key(&self) -> String {
        hash_json(&json!({ "stage": "translate", "transform": self.transform_key() }))
    }

    pub fn train_key(&self, p: PipelinePreset) -> String {
        let translated = p.is_domain_adaptive().then(|| self.translate_key());
        hash_json(&json!({
            "stage": "train", "preset": p.to_string(), "data": self.data_key(), "translated": translated,
            "aligner": self.cfg.aligner, "degradation": self.cfg.degradation,
        }))
    }

    pub fn eval_key(&self, p: PipelinePreset) -> String {
        hash_json(&json!({ "stage": "eval", "train": self.train_key(p) }))
    }

    fn read_record(dir: &Path) -> Option<StageRecord> {
        let bytes = std::fs::read(dir.join(RECORD)).ok()?;
        serde_json::from_slice(&bytes).ok()
    }

    /// True when `dir` holds a record with `key` whose outputs still hash the same.
    fn up_to_date(dir: &Path, key: &str) -> bool {
        match Self::read_record(dir) {
            Some(r) if r.key == key => {
                r.outputs.iter().all(|(rel, sum)| file_sha256(&dir.join(rel)).map(|s| &s == sum).unwrap_or(false))
            }
            _ => false,
        }
    }

    fn write_record(dir: &Path, stage: &str, key: &str, outputs: &[&str]) -> Result<()> {
        let outputs = outputs
            .iter()
            .map(|rel| Ok((rel.to_string(), file_sha256(&dir.join(rel))?)))
            .collect::<Result<Vec<_>>>()?;
        let rec = StageRecord { stage: stage.into(), key: key.into(), outputs };
        write_bytes(&dir.join(RECORD), &serde_json::to_vec_pretty(&rec).expect("record serializes"))
    }

    /// Fails with a dependency error unless `dir` holds outputs for `key`.
    fn require(dir: &Path, key: &str, main_output: &Path) -> Result<()> {
        match Self::read_record(dir) {
            None => Err(Error::Dependency(main_output.to_path_buf())),
            Some(r) if r.key != key => Err(Error::InvalidInput(format!(
                "{} was produced by a different configuration; rerun stage `{}`",
                main_output.display(),
                r.stage
            ))),
            Some(_) if !main_output.exists() => Err(Error::Dependency(main_output.to_path_buf())),
            Some(_) => Ok(()),
        }
    }

    fn dataset(&self, name: &str) -> Result<Rc<Dataset>> {
        let dir = self.data_dir(name);
        if let Some(ds) = self.cache.borrow().get(&dir) {
            return Ok(ds.clone());
        }
        let ds = Rc::new(load_dataset(&dir)?);
        self.cache.borrow_mut().insert(dir, ds.clone());
        Ok(ds)
    }

    fn store_dataset(&self, name: &str, ds: Dataset) -> Result<()> {
        let dir = self.data_dir(name);
        save_dataset(&ds, &dir)?;
        self.cache.borrow_mut().insert(dir, Rc::new(ds));
        Ok(())
    }

    fn require_data(&self) -> Result<()> {
        let dir = self.root().join("data");
        Self::require(&dir, &self.data_key(), &self.data_dir("source").join("manifest.json"))
    }

    fn eval_sets(&self) -> Result<EvalDatasets> {
        Ok(EvalDatasets {
            test: (*self.dataset("test")?).clone(),
            oracle: (*self.dataset("oracle")?).clone(),
            oracle_sparse: Some((*self.dataset("oracle_sparse")?).clone()),
        })
    }

    pub fn gen_data(&self) -> Result<StageStatus> {
        let started = Instant::now();
        let dir = self.root().join("data");
        let key = self.data_key();
        let manifests: Vec<String> = DATASETS.iter().map(|n| format!("{n}/manifest.json")).collect();
        if Self::up_to_date(&dir, &key) && DATASETS.iter().all(|n| verify_dataset(&self.data_dir(n)).is_ok()) {
            self.log("gen-data", "up-to-date", started)?;
            return Ok(StageStatus::UpToDate);
        }
        let c = &self.cfg;
        let src = build_source_dataset(
            &c.source_domain,
            c.sizes.m_tolerance_lenses,
            c.sampling,
            &c.tolerance,
            c.seed(seeds::SOURCE),
        )?;
        self.store_dataset("source", src)?;
        let trg =
            build_target_dataset(&c.target_domain, c.sizes.n_random, c.sampling, &c.tolerance, c.seed(seeds::TARGET))?;
        self.store_dataset("target", trg)?;
        let ev = build_eval_datasets(
            &c.target_domain,
            c.sizes.n_test,
            c.sizes.n_oracle,
            c.sampling,
            true,
            &c.tolerance,
            c.seed(seeds::EVAL),
        )?;
        self.store_dataset("test", ev.test)?;
        self.store_dataset("oracle", ev.oracle)?;
        self.store_dataset("oracle_sparse", ev.oracle_sparse.expect("requested"))?;
        let rels: Vec<&str> = manifests.iter().map(String::as_str).collect();
        Self::write_record(&dir, "gen-data", &key, &rels)?;
        self.log("gen-data", "ran", started)?;
        Ok(StageStatus::Ran)
    }

    pub fn train_transform(&self) -> Result<StageStatus> {
        let started = Instant::now();
        self.require_data()?;
        let dir = self.transform_dir();
        let key = self.transform_key();
        if Self::up_to_date(&dir, &key) {
            self.log("train-transform", "up-to-date", started)?;
            return Ok(StageStatus::UpToDate);
        }
        let (src, trg) = (self.dataset("source")?, self.dataset("target")?);
        let t = &self.cfg.transform;
        let out = train_transform(&src, &trg, t.generator.clone(), &t.training)?;
        out.model.save(&self.generator_path())?;
        write_jsonl(&dir.join("metrics.jsonl"), &out.curve)?;
        Self::write_record(&dir, "train-transform", &key, &["generator.ckpt"])?;
        self.log("train-transform", "ran", started)?;
        Ok(StageStatus::Ran)
    }

    pub fn translate(&self) -> Result<StageStatus> {
        let started = Instant::now();
        self.require_data()?;
        Self::require(&self.transform_dir(), &self.transform_key(), &self.generator_path())?;
        let dir = self.data_dir("translated");
        let key = self.translate_key();
        if Self::up_to_date(&dir, &key) && verify_dataset(&dir).is_ok() {
            self.log("translate", "up-to-date", started)?;
            return Ok(StageStatus::UpToDate);
        }
        let g = TransformModel::load(&self.generator_path())?;
        let s2t = translate_dataset(&g, &*self.dataset("source")?)?;
        self.store_dataset("translated", s2t)?;
        Self::write_record(&dir, "translate", &key, &["manifest.json"])?;
        self.log("translate", "ran", started)?;
        Ok(StageStatus::Ran)
    }

    fn settings(&self) -> PipelineSettings {
        PipelineSettings {
            arch: self.cfg.aligner.arch.clone(),
            aligner: self.cfg.aligner.training.clone(),
            degradation: self.cfg.degradation.clone(),
        }
    }

    pub fn train(&self, p: PipelinePreset) -> Result<StageStatus> {
        let started = Instant::now();
        let stage = format!("train {p}");
        self.require_data()?;
        if p.is_domain_adaptive() {
            let dir = self.data_dir("translated");
            Self::require(&dir, &self.translate_key(), &dir.join("manifest.json"))?;
        }
        let dir = self.aligner_dir(p);
        let key = self.train_key(p);
        if Self::up_to_date(&dir, &key) {
            self.log(&stage, "up-to-date", started)?;
            return Ok(StageStatus::UpToDate);
        }
        let source = self.dataset("source")?;
        let translated = if p.is_domain_adaptive() { Some(self.dataset("translated")?) } else { None };
        let eval = self.eval_sets()?;
        let data = PipelineData { source: &source, translated: translated.as_deref(), eval: &eval };
        let settings = self.settings();
        let (sets, cfg, deg) = training_inputs(p, &data, &settings)?;
        let train = if p.is_domain_adaptive() {
            TrainData::Paired { src: &sets[0], s2t: &sets[1] }
        } else {
            TrainData::Single(sets.iter().collect())
        };
        let out = train_aligner(train, settings.arch, &cfg, &deg)?;
        out.model.save(&self.aligner_path(p))?;
        write_jsonl(&dir.join("metrics.jsonl"), &out.curve)?;
        Self::write_record(&dir, "train", &key, &["model.ckpt"])?;
        self.log(&stage, "ran", started)?;
        Ok(StageStatus::Ran)
    }

    pub fn eval(&self, p: PipelinePreset) -> Result<StageStatus> {
        let started = Instant::now();
        let stage = format!("eval {p}");
        self.require_data()?;
        Self::require(&self.aligner_dir(p), &self.train_key(p), &self.aligner_path(p))?;
        let dir = self.eval_dir(p);
        let key = self.eval_key(p);
        if Self::up_to_date(&dir, &key) {
            self.log(&stage, "up-to-date", started)?;
            return Ok(StageStatus::UpToDate);
        }
        let model = AlignerModel::load(&self.aligner_path(p))?;
        let test = self.dataset("test")?;
        let report = evaluate(&model, &test)?;
        let heatmap = error_heatmap(&report)?;
        let threshold = scaled_threshold(self.cfg.sampling.range_um);
        let adjust = adjust_dataset(&model, &test, threshold)?;
        let (radial_inner, radial_outer) = heatmap.radial_thirds();
        let summary = AdjustSummary {
            threshold_um: threshold,
            success_rate: success_rate(&adjust),
            n_starts: adjust.len(),
            radial_inner,
            radial_outer,
        };
        write_bytes(&dir.join("report.json"), &serde_json::to_vec_pretty(&report).expect("report serializes"))?;
        write_bytes(&dir.join("per_lens.csv"), per_lens_csv(&report).as_bytes())?;
        write_bytes(&dir.join("adjust.json"), &serde_json::to_vec_pretty(&summary).expect("summary serializes"))?;
        heatmap.write(&dir)?;
        Self::write_record(&dir, "eval", &key, &["report.json", "adjust.json"])?;
        self.log(&stage, "ran", started)?;
        Ok(StageStatus::Ran)
    }

    pub fn read_report(&self, p: PipelinePreset) -> Result<(EvalReport, AdjustSummary)> {
        let dir = self.eval_dir(p);
        Self::require(&dir, &self.eval_key(p), &dir.join("report.json"))?;
        let read = |name: &str| {
            let path = dir.join(name);
            std::fs::read(&path).map_err(|e| Error::io(&path, e)).map(|b| (path, b))
        };
        let (path, bytes) = read("report.json")?;
        let report = serde_json::from_slice(&bytes).map_err(|e| Error::Schema { path, msg: e.to_string() })?;
        let (path, bytes) = read("adjust.json")?;
        let summary = serde_json::from_slice(&bytes).map_err(|e| Error::Schema { path, msg: e.to_string() })?;
        Ok((report, summary))
    }

    /// Collects every preset's report into `metrics.csv` and `summary.json`.
    pub fn report(&self) -> Result<PathBuf> {
        let started = Instant::now();
        let mut rows = Vec::new();
        let mut summary = serde_json::Map::new();
        for p in self.presets() {
            let (report, adjust) = self.read_report(p)?;
            summary
                .insert(p.to_string(), json!({ "mae_avg": report.mae_avg, "sd_avg": report.sd_avg, "adjust": adjust }));
            rows.push((p.to_string(), report));
        }
        let path = self.root().join("metrics.csv");
        write_bytes(&path, metrics_csv(&rows).as_bytes())?;
        let summary_path = self.root().join("summary.json");
        write_bytes(&summary_path, &serde_json::to_vec_pretty(&summary).expect("summary serializes"))?;
        self.log("report", "ran", started)?;
        Ok(path)
    }

    /// Every stage in order, then the report.
    pub fn run_all(&self) -> Result<PathBuf> {
        self.gen_data()?;
        self.train_transform()?;
        self.translate()?;
        for p in self.presets() {
            self.train(p)?;
            self.eval(p)?;
        }
        self.report()
    }
}
