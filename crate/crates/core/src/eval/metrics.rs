use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aligner::AlignerModel;
use crate::dataset::{Dataset, GridSpec};
use crate::optics::{FovImageSet, MisalignmentOffset};
use crate::{Error, Result};

/// Anything that maps capture sets to offset estimates.
pub trait OffsetPredictor {
    fn predict_sets(&self, sets: &[&FovImageSet]) -> Result<Vec<MisalignmentOffset>>;
}

impl OffsetPredictor for AlignerModel {
    fn predict_sets(&self, sets: &[&FovImageSet]) -> Result<Vec<MisalignmentOffset>> {
        self.infer_batch(sets)
    }
}

/// Adapts a per-set closure, e.g. a stub predictor in tests.
pub struct FnPredictor<F>(pub F);

impl<F: Fn(&FovImageSet) -> MisalignmentOffset> OffsetPredictor for FnPredictor<F> {
    fn predict_sets(&self, sets: &[&FovImageSet]) -> Result<Vec<MisalignmentOffset>> {
        Ok(sets.iter().map(|s| (self.0)(s)).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionError {
    pub dx: f64,
    pub dy: f64,
    /// Mean of the per-sample axis-averaged absolute error.
    pub mae: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LensError {
    pub lens_id: u32,
    pub mae_x: f64,
    pub mae_y: f64,
    pub mae_avg: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mae_x: f64,
    pub mae_y: f64,
    pub mae_avg: f64,
    pub sd_x: f64,
    pub sd_y: f64,
    pub sd_avg: f64,
    /// Row-major by `(dy, dx)`.
    pub per_position_errors: Vec<PositionError>,
    pub per_lens_mae: Vec<LensError>,
    pub n_samples: usize,
    /// What the SD columns are computed over.
    pub sd_of: String,
    /// Sampling grid of the evaluated set, when it was a grid.
    pub grid: Option<GridSpec>,
}

/// One evaluated sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub lens_id: u32,
    pub label: MisalignmentOffset,
    pub predicted: MisalignmentOffset,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population standard deviation.
fn sd(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

// Grid positions are multiples of the step; a micrometer/1e6 key is exact
// enough to group them.
fn position_key(o: MisalignmentOffset) -> (i64, i64) {
    ((o.dy * 1e6).round() as i64, (o.dx * 1e6).round() as i64)
}

/// Builds the report from raw predictions.
pub fn report_from_predictions(preds: &[Prediction], grid: Option<GridSpec>) -> Result<EvalReport> {
    if preds.is_empty() {
        return Err(Error::InvalidInput("cannot evaluate an empty dataset".into()));
    }
    let ex: Vec<f64> = preds.iter().map(|p| (p.predicted.dx - p.label.dx).abs()).collect();
    let ey: Vec<f64> = preds.iter().map(|p| (p.predicted.dy - p.label.dy).abs()).collect();
    let (mae_x, mae_y) = (mean(&ex), mean(&ey));
    let (sd_x, sd_y) = (sd(&ex), sd(&ey));

    let mut by_pos: BTreeMap<(i64, i64), (MisalignmentOffset, Vec<f64>)> = BTreeMap::new();
    let mut by_lens: BTreeMap<u32, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (i, p) in preds.iter().enumerate() {
        by_pos.entry(position_key(p.label)).or_insert_with(|| (p.label, Vec::new())).1.push((ex[i] + ey[i]) / 2.0);
        let lens = by_lens.entry(p.lens_id).or_default();
        lens.0.push(ex[i]);
        lens.1.push(ey[i]);
    }
    let per_position_errors = by_pos
        .into_values()
        .map(|(o, errs)| PositionError { dx: o.dx, dy: o.dy, mae: mean(&errs), n: errs.len() })
        .collect();
    let per_lens_mae = by_lens
        .into_iter()
        .map(|(lens_id, (x, y))| {
            let (mx, my) = (mean(&x), mean(&y));
            LensError { lens_id, mae_x: mx, mae_y: my, mae_avg: (mx + my) / 2.0, n: x.len() }
        })
        .collect();
    Ok(EvalReport {
        mae_x,
        mae_y,
        mae_avg: (mae_x + mae_y) / 2.0,
        sd_x,
        sd_y,
        sd_avg: (sd_x + sd_y) / 2.0,
        per_position_errors,
        per_lens_mae,
        n_samples: preds.len(),
        sd_of: "absolute_error".into(),
        grid,
    })
}

/// Runs the predictor over a labeled dataset.
pub fn predictions(model: &dyn OffsetPredictor, test: &Dataset) -> Result<Vec<Prediction>> {
    if !test.role().is_labeled() {
        return Err(Error::InvalidInput("evaluation needs a labeled dataset".into()));
    }
    let samples: Vec<_> = test.samples().collect();
    let sets: Vec<&FovImageSet> = samples.iter().map(|(_, s)| &*s.images).collect();
    let preds = model.predict_sets(&sets)?;
    Ok(samples
        .iter()
        .zip(preds)
        .map(|((lens, s), predicted)| Prediction {
            lens_id: lens.lens.lens_id,
            label: s.label.expect("labeled role"),
            predicted,
        })
        .collect())
}

pub fn evaluate(model: &dyn OffsetPredictor, test: &Dataset) -> Result<EvalReport> {
    report_from_predictions(&predictions(model, test)?, test.sampling().grid())
}

/// Per-offset MAE on the evaluation grid, row-major with `dy` outer.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub grid: GridSpec,
    pub side: usize,
    pub values: Vec<f64>,
}

pub fn error_heatmap(report: &EvalReport) -> Result<Heatmap> {
    let grid = report.grid.ok_or_else(|| Error::InvalidInput("heatmap needs a grid-sampled report".into()))?;
    let positions = grid.positions()?;
    let side = grid.steps_per_side()?;
    let cells: BTreeMap<_, _> =
        report.per_position_errors.iter().map(|p| (position_key(MisalignmentOffset::new(p.dx, p.dy)), p.mae)).collect();
    if cells.len() != positions.len() {
        return Err(Error::InvalidInput(format!(
            "report covers {} positions, grid has {}",
            cells.len(),
            positions.len()
        )));
    }
    let values = positions
        .iter()
        .map(|&o| {
            cells
                .get(&position_key(o))
                .copied()
                .ok_or_else(|| Error::InvalidInput(format!("no error recorded at {o:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Heatmap { grid, side, values })
}

impl Heatmap {
    pub fn offset(&self, row: usize, col: usize) -> MisalignmentOffset {
        let half = (self.side / 2) as f64;
        MisalignmentOffset::new((col as f64 - half) * self.grid.step_um, (row as f64 - half) * self.grid.step_um)
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.side + col]
    }

    /// Mean cell value with `|offset| ≤ range/3` and with `|offset| ≥ 2·range/3`.
    pub fn radial_thirds(&self) -> (f64, f64) {
        let r = self.grid.range_um;
        let (mut inner, mut outer) = (Vec::new(), Vec::new());
        for row in 0..self.side {
            for col in 0..self.side {
                let d = self.offset(row, col).norm();
                if d <= r / 3.0 + 1e-9 {
                    inner.push(self.at(row, col));
                } else if d >= 2.0 * r / 3.0 - 1e-9 {
                    outer.push(self.at(row, col));
                }
            }
        }
        (mean(&inner), mean(&outer))
    }

    /// Header row of `dx` values, then one row per `dy`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("dy\\dx");
        for col in 0..self.side {
            write!(s, ",{}", self.offset(0, col).dx).unwrap();
        }
        s.push('\n');
        for row in 0..self.side {
            write!(s, "{}", self.offset(row, 0).dy).unwrap();
            for col in 0..self.side {
                write!(s, ",{:.6}", self.at(row, col)).unwrap();
            }
            s.push('\n');
        }
        s
    }

    /// Grayscale rendering, white at the largest error, `cell` pixels per cell.
    pub fn to_png(&self, cell: usize) -> Result<Vec<u8>> {
        let max = self.values.iter().cloned().fold(0.0, f64::max);
        let w = self.side * cell;
        let mut px = vec![0u8; w * w];
        for (i, p) in px.iter_mut().enumerate() {
            let (row, col) = (i / w / cell, i % w / cell);
            *p = if max > 0.0 { (self.at(row, col) / max * 255.0).round() as u8 } else { 0 };
        }
        let img = image::GrayImage::from_raw(w as u32, w as u32, px).expect("buffer matches dimensions");
        let mut out = std::io::Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png).map_err(|e| Error::Codec(e.to_string()))?;
        Ok(out.into_inner())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_file(&dir.join("heatmap.csv"), self.to_csv().as_bytes())?;
        write_file(&dir.join("heatmap.png"), &self.to_png(16)?)
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn per_lens_csv(report: &EvalReport) -> String {
    let mut s = String::from("lens_id,mae_x,mae_y,mae_avg,n\n");
    for l in &report.per_lens_mae {
        writeln!(s, "{},{:.6},{:.6},{:.6},{}", l.lens_id, l.mae_x, l.mae_y, l.mae_avg, l.n).unwrap();
    }
    s
}

/// One row per named report.
pub fn metrics_csv(rows: &[(String, EvalReport)]) -> String {
    let mut s = String::from("name,mae_x,sd_x,mae_y,sd_y,mae_avg,sd_avg\n");
    for (name, r) in rows {
        writeln!(
            s,
            "{name},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.mae_x, r.sd_x, r.mae_y, r.sd_y, r.mae_avg, r.sd_avg
        )
        .unwrap();
    }
    s
}
