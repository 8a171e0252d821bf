use std::io::Write;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::augment::{augment_set, DegradationSpec};
use super::loss::{domain_disc_loss, feature_adv_loss, pixel_consistency_loss, regression_loss};
use super::model::{fov_batch, AlignerArch, AlignerModel, AlignerNet};
use crate::dataset::{Dataset, Sample};
use crate::nn::{Adam, Gradients, Graph, ParamStore, Real, Tensor};
use crate::optics::FovImageSet;
use crate::seed::mix_seed;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignerTrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr_extractor_predictor: f64,
    pub lr_domain_classifier: f64,
    pub lambda_adv: f64,
    pub lambda_pix: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_epochs: usize,
    /// Iterations per epoch for the decay schedule; 0 derives it from the
    /// training set size.
    #[serde(default)]
    pub epoch_iterations: usize,
    pub rng_seed: u64,
}

impl Default for AlignerTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 45_000,
            batch_size: 64,
            lr_extractor_predictor: 1e-3,
            lr_domain_classifier: 1e-4,
            lambda_adv: 1.0,
            lambda_pix: 0.05,
            lr_decay_factor: 0.1,
            lr_decay_epochs: 20,
            epoch_iterations: 0,
            rng_seed: 0,
        }
    }
}

impl AlignerTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid_config("aligner.batch_size", "must be positive"));
        }
        if !(self.lr_extractor_predictor > 0.0 && self.lr_domain_classifier > 0.0) {
            return Err(Error::invalid_config("aligner.learning_rate", "learning rates must be positive"));
        }
        if !(self.lambda_adv >= 0.0 && self.lambda_pix >= 0.0) {
            return Err(Error::invalid_config("aligner.lambda", "loss weights must be non-negative"));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) || self.lr_decay_epochs == 0 {
            return Err(Error::invalid_config("aligner.lr_decay", "factor in (0, 1], period positive"));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub l_reg: f64,
    pub l_pix: f64,
    #[serde(rename = "l_adv_E")]
    pub l_adv_e: f64,
    #[serde(rename = "l_adv_D")]
    pub l_adv_d: f64,
    pub lr: f64,
}

pub fn write_metrics_jsonl(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in rows {
        let line = serde_json::to_string(r).expect("row serializes");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Training data: supervised union of labeled datasets, or label-aligned
/// source / pseudo-target pairs.
pub enum TrainData<'a> {
    Single(Vec<&'a Dataset>),
    Paired { src: &'a Dataset, s2t: &'a Dataset },
}

/// Loss weights of the full objective.
#[derive(Clone, Copy, Debug)]
pub struct Lambdas {
    pub pix: f64,
    pub adv: f64,
}

/// Components of the extractor/predictor objective.
#[derive(Debug)]
pub struct Objective<T> {
    pub l_reg: f64,
    pub l_pix: f64,
    pub l_adv_e: f64,
    pub total: f64,
    pub grads: Gradients<T>,
}

fn slice_rows<T: Real>(t: &Tensor<T>, start: usize, len: usize) -> Vec<T> {
    t.slice_outer(start, len).into_data()
}

/// `L_reg + λ_pix·L_pix + λ_adv·L_adv^E` and its gradient.
///
/// `x` holds `B` source inputs followed, when `paired`, by their `B`
/// pseudo-target counterparts. `labels` is `(B, 2)` in normalized units.
/// Dropout masks are drawn from `dropout_seed`, so repeated calls agree.
///
/// `before_adv` runs on the detached features after the extractor and
/// predictor have read their weights and before the domain classifier reads
/// its own, so it may update the classifier in place.
#[allow(clippy::too_many_arguments)]
pub fn da3_objective<T: Real>(
    net: &AlignerNet,
    store: &mut ParamStore<T>,
    x: Tensor<T>,
    labels: &[T],
    paired: bool,
    lambdas: Lambdas,
    dropout_seed: u64,
    before_adv: Option<&mut dyn FnMut(&mut ParamStore<T>, &Tensor<T>)>,
) -> Objective<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let b = labels.len() / 2;
    let mut g = Graph::new();
    let xv = g.input(x);
    let f = net.features(&mut g, store, xv);
    let pred = net.predict(&mut g, store, f, Some(&mut rng));
    let pv = g.value(pred);
    let mut seeds = Vec::new();
    let (l_reg, mut l_pix, mut l_adv_e);
    if paired {
        let (ps, pt) = (slice_rows(pv, 0, b), slice_rows(pv, b, b));
        let reg = regression_loss(&ps, Some(&pt), labels);
        l_reg = reg.value;
        seeds.push((pred, Tensor::new(&[2 * b, 2], [reg.grad_a, reg.grad_b].concat())));
    } else {
        let reg = regression_loss(pv.data(), None, labels);
        l_reg = reg.value;
        seeds.push((pred, Tensor::new(&[b, 2], reg.grad_a)));
    }
    l_pix = 0.0;
    l_adv_e = 0.0;
    if paired {
        let fv = g.value(f);
        let fdim = fv.dim(1);
        let pix = pixel_consistency_loss(&slice_rows(fv, 0, b), &slice_rows(fv, b, b));
        l_pix = pix.value;
        if lambdas.pix > 0.0 {
            let w = T::lit(lambdas.pix);
            let grad = pix.grad_a.into_iter().chain(pix.grad_b).map(|v| v * w).collect();
            seeds.push((f, Tensor::new(&[2 * b, fdim], grad)));
        }
        if let Some(hook) = before_adv {
            hook(store, g.value(f));
        }
        if lambdas.adv > 0.0 {
            let logits = net.classify(&mut g, store, f, Some(&mut rng));
            let lv = g.value(logits);
            let adv = feature_adv_loss(&slice_rows(lv, 0, b), &slice_rows(lv, b, b));
            l_adv_e = adv.value;
            let w = T::lit(lambdas.adv);
            let grad = adv.grad_a.into_iter().chain(adv.grad_b).map(|v| v * w).collect();
            seeds.push((logits, Tensor::new(&[2 * b, 1], grad)));
        }
    }
    let grads = g.backward(&seeds);
    let total = l_reg + lambdas.pix * l_pix + lambdas.adv * l_adv_e;
    Objective { l_reg, l_pix, l_adv_e, total, grads }
}

/// Domain classifier loss on detached features (`B` source rows then `B`
/// pseudo-target rows) and its gradient.
pub fn domain_step<T: Real>(
    net: &AlignerNet,
    store: &ParamStore<T>,
    features: Tensor<T>,
    dropout_seed: u64,
) -> (f64, Gradients<T>) {
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let b = features.dim(0) / 2;
    let mut g = Graph::new();
    let fv = g.input(features);
    let logits = net.classify(&mut g, store, fv, Some(&mut rng));
    let lv = g.value(logits);
    let loss = domain_disc_loss(&slice_rows(lv, 0, b), &slice_rows(lv, b, b));
    let grads = g.backward(&[(logits, Tensor::new(&[2 * b, 1], [loss.grad_a, loss.grad_b].concat()))]);
    (loss.value, grads)
}

type Pair<'a> = (&'a Sample, Option<&'a Sample>);

fn collect_pairs<'a>(data: &TrainData<'a>) -> Result<Vec<Pair<'a>>> {
    match data {
        TrainData::Single(sets) => {
            let mut out = Vec::new();
            for ds in sets {
                if !ds.role().is_labeled() {
                    return Err(Error::InvalidInput("supervised training needs labeled data".into()));
                }
                out.extend(ds.samples().map(|(_, s)| (s, None)));
            }
            Ok(out)
        }
        TrainData::Paired { src, s2t } => {
            if src.lens_ids() != s2t.lens_ids() {
                return Err(Error::InvalidInput("source and pseudo-target lens structure differ".into()));
            }
            let mut out = Vec::new();
            for (a, b) in src.lenses.iter().zip(&s2t.lenses) {
                if a.samples.len() != b.samples.len() {
                    return Err(Error::InvalidInput(format!("lens {} sample counts differ", a.lens.lens_id)));
                }
                for (sa, sb) in a.samples.iter().zip(&b.samples) {
                    if sa.sample_id != sb.sample_id || sa.label != sb.label || sa.label.is_none() {
                        return Err(Error::InvalidInput(format!(
                            "lens {} sample {}: pair does not share id and label",
                            a.lens.lens_id, sa.sample_id
                        )));
                    }
                    out.push((sa, Some(sb)));
                }
            }
            Ok(out)
        }
    }
}

/// Result of a training run.
pub struct TrainOutcome {
    pub model: AlignerModel,
    pub curve: Vec<MetricsRow>,
}

/// Trains `E`, `P` (and `D` when `λ_adv > 0`) from scratch.
///
/// Each iteration first updates the domain classifier on detached features,
/// then the extractor and predictor on the full objective with the updated,
/// frozen classifier. Both steps share one extractor forward pass.
pub fn train_aligner(
    data: TrainData<'_>,
    arch: AlignerArch,
    cfg: &AlignerTrainConfig,
    deg: &DegradationSpec,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    deg.validate()?;
    let pairs = collect_pairs(&data)?;
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no training samples".into()));
    }
    let paired = matches!(data, TrainData::Paired { .. });
    let lambdas =
        if paired { Lambdas { pix: cfg.lambda_pix, adv: cfg.lambda_adv } } else { Lambdas { pix: 0.0, adv: 0.0 } };
    let mut model = AlignerModel::new(arch, mix_seed(&[cfg.rng_seed, 0]))?;
    let side = model.arch.image_side;
    let scale = model.arch.label_scale;
    let mut opt_ep = Adam::new(
        [model.store.trainable_with_prefix("E."), model.store.trainable_with_prefix("P.")].concat(),
        cfg.lr_extractor_predictor,
    );
    let mut opt_d = Adam::new(model.store.trainable_with_prefix("D."), cfg.lr_domain_classifier);
    let epoch_iters =
        if cfg.epoch_iterations > 0 { cfg.epoch_iterations } else { pairs.len().div_ceil(cfg.batch_size) };
    let decay_every = epoch_iters * cfg.lr_decay_epochs;

    let mut order: Vec<usize> = Vec::new();
    let mut data_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.rng_seed, 1]));
    let mut curve = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if order.is_empty() {
                order = (0..pairs.len()).collect();
                order.shuffle(&mut data_rng);
            }
            batch.push(order.pop().expect("refilled"));
        }
        let aug_seed = |pos: usize, branch: u64| {
            let branch = if deg.shared_pair_params { 0 } else { branch };
            mix_seed(&[cfg.rng_seed, 3, it as u64, pos as u64, branch])
        };
        let src_sets: Vec<FovImageSet> =
            batch.par_iter().enumerate().map(|(k, &i)| augment_set(&pairs[i].0.images, deg, aug_seed(k, 0))).collect();
        let mut all = src_sets;
        if paired {
            let s2t: Vec<FovImageSet> = batch
                .par_iter()
                .enumerate()
                .map(|(k, &i)| augment_set(&pairs[i].1.expect("paired").images, deg, aug_seed(k, 1)))
                .collect();
            all.extend(s2t);
        }
        let refs: Vec<&FovImageSet> = all.iter().collect();
        let x = fov_batch::<f32>(&refs, side)?;
        let labels: Vec<f32> = batch
            .iter()
            .flat_map(|&i| {
                let l = pairs[i].0.label.expect("labeled");
                [(l.dx / scale) as f32, (l.dy / scale) as f32]
            })
            .collect();

        let mut l_adv_d = 0.0;
        let mut d_failed = false;
        let d_seed = mix_seed(&[cfg.rng_seed, 4, it as u64]);
        let net = &model.net;
        let mut d_update = |store: &mut ParamStore<f32>, f: &Tensor<f32>| {
            let (ld, gd) = domain_step(net, store, f.clone(), d_seed);
            l_adv_d = ld;
            if !ld.is_finite() || !gd.all_finite() {
                d_failed = true;
                return;
            }
            opt_d.step(store, &gd);
        };
        let hook: Option<&mut dyn FnMut(&mut ParamStore<f32>, &Tensor<f32>)> =
            if lambdas.adv > 0.0 { Some(&mut d_update) } else { None };
        let obj_seed = mix_seed(&[cfg.rng_seed, 2, it as u64]);
        let obj = da3_objective(net, &mut model.store, x, &labels, paired, lambdas, obj_seed, hook);
        if d_failed {
            return Err(Error::Diverged(format!("iteration {it}: domain classifier loss {l_adv_d}")));
        }
        if !obj.total.is_finite() || !obj.grads.all_finite() {
            return Err(Error::Diverged(format!(
                "iteration {it}: l_reg={} l_pix={} l_adv_E={}",
                obj.l_reg, obj.l_pix, obj.l_adv_e
            )));
        }
        opt_ep.step(&mut model.store, &obj.grads);
        curve.push(MetricsRow {
            iteration: it,
            l_reg: obj.l_reg,
            l_pix: obj.l_pix,
            l_adv_e: obj.l_adv_e,
            l_adv_d,
            lr: opt_ep.lr,
        });
        if it % 100 == 0 {
            debug!(
                "iter {it}: l_reg {:.5} l_pix {:.5} l_adv_E {:.4} l_adv_D {:.4}",
                obj.l_reg, obj.l_pix, obj.l_adv_e, l_adv_d
            );
        }
        if decay_every > 0 && (it + 1) % decay_every == 0 {
            opt_ep.lr *= cfg.lr_decay_factor;
            opt_d.lr *= cfg.lr_decay_factor;
        }
    }
    model.iteration = cfg.iterations as u64;
    if let (Some(first), Some(last)) = (curve.first(), curve.last()) {
        info!("aligner trained: l_reg {:.5} -> {:.5} over {} iterations", first.l_reg, last.l_reg, cfg.iterations);
    }
    Ok(TrainOutcome { model, curve })
}

/// Domain-adaptive training on source / pseudo-target pairs.
pub fn train_da3(
    src: &Dataset,
    s2t: &Dataset,
    arch: AlignerArch,
    cfg: &AlignerTrainConfig,
    deg: &DegradationSpec,
) -> Result<TrainOutcome> {
    train_aligner(TrainData::Paired { src, s2t }, arch, cfg, deg)
}
