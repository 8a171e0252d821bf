use std::sync::Arc;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{disc_style_loss, gen_style_loss, least_squares, recon_loss};
use super::model::{image_batch, GeneratorConfig, GeneratorKind, TransformModel};
use crate::dataset::{Dataset, LensRecord, Role, Sample};
use crate::nn::{Adam, Gradients, Graph, Tensor, Var};
use crate::optics::{FovImageSet, Image};
use crate::seed::mix_seed;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformTrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Critic learning rate; defaults to `learning_rate`.
    #[serde(default)]
    pub disc_learning_rate: Option<f64>,
    pub recon_weight: f64,
    pub adv_weight: f64,
    pub commitment_weight: f64,
    /// Cycle-consistency weight of the CycleGAN variant.
    #[serde(default = "default_cycle_weight")]
    pub cycle_weight: f64,
    pub rng_seed: u64,
}

fn default_cycle_weight() -> f64 {
    10.0
}

impl Default for TransformTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 20_000,
            batch_size: 16,
            learning_rate: 1e-4,
            disc_learning_rate: None,
            recon_weight: 1.0,
            adv_weight: 1.0,
            commitment_weight: 0.25,
            cycle_weight: default_cycle_weight(),
            rng_seed: 0,
        }
    }
}

impl TransformTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid_config("transform.batch_size", "must be positive"));
        }
        let positive = [
            ("transform.learning_rate", self.learning_rate),
            ("transform.recon_weight", self.recon_weight),
            ("transform.adv_weight", self.adv_weight),
            ("transform.commitment_weight", self.commitment_weight),
            ("transform.cycle_weight", self.cycle_weight),
            ("transform.disc_learning_rate", self.disc_lr()),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid_config(key, "must be positive"));
            }
        }
        Ok(())
    }

    pub fn disc_lr(&self) -> f64 {
        self.disc_learning_rate.unwrap_or(self.learning_rate)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformMetricsRow {
    pub iteration: usize,
    pub recon: f64,
    pub gen_style: f64,
    pub disc_style: f64,
    pub vq: f64,
}

pub struct TransformOutcome {
    pub model: TransformModel,
    pub curve: Vec<TransformMetricsRow>,
}

fn image_pool(ds: &Dataset) -> Vec<&Image> {
    ds.samples().flat_map(|(_, s)| s.images.images.iter()).collect()
}

fn draw<'a>(pool: &[&'a Image], n: usize, rng: &mut ChaCha8Rng) -> Vec<&'a Image> {
    (0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect()
}

fn stack(parts: &[&Tensor<f32>]) -> Tensor<f32> {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|t| t.dim(0)).sum();
    Tensor::new(&shape, parts.iter().flat_map(|t| t.data().iter().copied()).collect())
}

fn column(values: Vec<f32>) -> Tensor<f32> {
    let n = values.len();
    Tensor::new(&[n, 1], values)
}

fn scaled(v: Vec<f32>, w: f64) -> Vec<f32> {
    v.into_iter().map(|x| x * w as f32).collect()
}

struct Step {
    row: TransformMetricsRow,
    g_grads: Gradients<f32>,
    g_total: f64,
}

/// Trains the source-to-target generator on unpaired images: every batch
/// draws source and target images independently. One discriminator update
/// precedes each generator update.
pub fn train_transform(
    src: &Dataset,
    trg: &Dataset,
    config: GeneratorConfig,
    cfg: &TransformTrainConfig,
) -> Result<TransformOutcome> {
    cfg.validate()?;
    if !src.role().is_labeled() {
        return Err(Error::InvalidInput("transform source must be a labeled dataset".into()));
    }
    if trg.role() != Role::TargetUnlabeled {
        return Err(Error::InvalidInput(format!("transform target must be target_unlabeled, got {:?}", trg.role())));
    }
    for ds in [src, trg] {
        if ds.image_side() != config.image_side {
            return Err(Error::InvalidInput(format!(
                "image side {} does not match generator side {}",
                ds.image_side(),
                config.image_side
            )));
        }
    }
    let mut model = TransformModel::new(config, mix_seed(&[cfg.rng_seed, 0]))?;
    let (src_pool, trg_pool) = (image_pool(src), image_pool(trg));
    if src_pool.is_empty() || trg_pool.is_empty() {
        return Err(Error::InvalidInput("transform training needs images in both domains".into()));
    }
    let gen_group = [model.store.trainable_with_prefix("G."), model.store.trainable_with_prefix("C.")].concat();
    let disc_group = [model.store.trainable_with_prefix("DS."), model.store.trainable_with_prefix("DT.")].concat();
    let mut opt_g = Adam::new(gen_group, cfg.learning_rate).with_betas(0.5, 0.999);
    let mut opt_d = Adam::new(disc_group, cfg.disc_lr()).with_betas(0.5, 0.999);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.rng_seed, 1]));
    let side = model.config.image_side;
    let b = cfg.batch_size;
    let mut curve = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let xs: Tensor<f32> = image_batch(&draw(&src_pool, b, &mut rng), side)?;
        let xt: Tensor<f32> = image_batch(&draw(&trg_pool, b, &mut rng), side)?;
        model.nets.power_iterate(&mut model.store);
        let step = match model.config.kind {
            GeneratorKind::VqUnet => vq_step(&mut model, &mut opt_d, &xs, &xt, cfg, it)?,
            GeneratorKind::CycleGan => cycle_step(&mut model, &mut opt_d, &xs, &xt, cfg, it)?,
        };
        if !step.g_total.is_finite() || !step.g_grads.all_finite() {
            return Err(Error::Diverged(format!(
                "transform iteration {it}: recon={} gen_style={} vq={}",
                step.row.recon, step.row.gen_style, step.row.vq
            )));
        }
        opt_g.step(&mut model.store, &step.g_grads);
        if it % 100 == 0 {
            let r = &step.row;
            debug!(
                "transform iter {it}: recon {:.4} gen {:.4} disc {:.4} vq {:.4}",
                r.recon, r.gen_style, r.disc_style, r.vq
            );
        }
        curve.push(step.row);
    }
    model.iteration = cfg.iterations as u64;
    if let (Some(first), Some(last)) = (curve.first(), curve.last()) {
        info!("generator trained: recon {:.4} -> {:.4} over {} iterations", first.recon, last.recon, cfg.iterations);
    }
    Ok(TransformOutcome { model, curve })
}

/// Discriminator update on `fake` (scored toward 0) and `real` (toward 1)
/// using the critic selected by `which`; returns the loss value.
fn critic_update(
    model: &mut TransformModel,
    opt_d: &mut Adam<f32>,
    which: usize,
    fakes: &[&Tensor<f32>],
    real: &Tensor<f32>,
    it: usize,
) -> Result<f64> {
    let mut parts: Vec<&Tensor<f32>> = fakes.to_vec();
    parts.push(real);
    let input = stack(&parts);
    let mut g = Graph::new();
    let x = g.input(input);
    let disc = if which == 0 { &model.nets.disc } else { &model.nets.inverse.as_ref().expect("cycle model").1 };
    let s = disc.forward(&mut g, &model.store, x);
    let sv = g.value(s).data();
    let nf: usize = fakes.iter().map(|t| t.dim(0)).sum();
    let (value, grad) = if fakes.len() == 2 {
        let n0 = fakes[0].dim(0);
        let l = disc_style_loss(&sv[..n0], &sv[n0..nf], &sv[nf..]);
        (l.value, [l.grad_g_src, l.grad_g_trg, l.grad_real].concat())
    } else {
        let (vf, gf) = least_squares(&sv[..nf], 0.0);
        let (vr, gr) = least_squares(&sv[nf..], 1.0);
        (vf + vr, [gf, gr].concat())
    };
    let grads = g.backward(&[(s, column(grad))]);
    if !value.is_finite() || !grads.all_finite() {
        return Err(Error::Diverged(format!("transform iteration {it}: discriminator loss {value}")));
    }
    opt_d.step(&mut model.store, &grads);
    Ok(value)
}

fn vq_step(
    model: &mut TransformModel,
    opt_d: &mut Adam<f32>,
    xs: &Tensor<f32>,
    xt: &Tensor<f32>,
    cfg: &TransformTrainConfig,
    it: usize,
) -> Result<Step> {
    let b = xs.dim(0);
    let mut g = Graph::new();
    let x = g.input(stack(&[xs, xt]));
    let y = model.nets.translate(&mut g, &model.store, &model.config, x, cfg.commitment_weight);
    let yv = g.value(y.image).clone();
    let (fake_src, fake_trg) = (yv.slice_outer(0, b), yv.slice_outer(b, b));
    let disc_style = critic_update(model, opt_d, 0, &[&fake_src, &fake_trg], xt, it)?;

    // Generator objective against the freshly updated critic.
    let s = model.nets.disc.forward(&mut g, &model.store, y.image);
    let sv = g.value(s).data();
    let gs = gen_style_loss(&sv[..b], &sv[b..]);
    let rl = recon_loss(fake_src.data(), xs.data(), fake_trg.data(), xt.data());
    let vq = y.vq.as_ref().map(|v| v.loss).unwrap_or(0.0);
    let seeds = vec![
        (y.image, Tensor::new(yv.shape(), scaled([rl.grad_a, rl.grad_b].concat(), cfg.recon_weight))),
        (s, column(scaled([gs.grad_a, gs.grad_b].concat(), cfg.adv_weight))),
    ];
    let g_grads = g.backward(&seeds);
    let g_total = cfg.recon_weight * rl.value + cfg.adv_weight * gs.value + vq;
    Ok(Step {
        row: TransformMetricsRow { iteration: it, recon: rl.value, gen_style: gs.value, disc_style, vq },
        g_grads,
        g_total,
    })
}

fn cycle_step(
    model: &mut TransformModel,
    opt_d: &mut Adam<f32>,
    xs: &Tensor<f32>,
    xt: &Tensor<f32>,
    cfg: &TransformTrainConfig,
    it: usize,
) -> Result<Step> {
    let b = xs.dim(0);
    let mut g = Graph::new();
    let src = g.input(xs.clone());
    let fake_t = model.nets.translate(&mut g, &model.store, &model.config, src, 0.0).image;
    let trg = g.input(xt.clone());
    let both = g.concat_outer(&[fake_t, trg]);
    let back = model.nets.translate_back(&mut g, &model.store, &model.config, both);
    let rec_s = g.slice_outer(back, 0, b);
    let fake_s = g.slice_outer(back, b, b);
    let rec_t = model.nets.translate(&mut g, &model.store, &model.config, fake_s, 0.0).image;

    let (ft, fs) = (g.value(fake_t).clone(), g.value(fake_s).clone());
    let d_t = critic_update(model, opt_d, 0, &[&ft], xt, it)?;
    let d_s = critic_update(model, opt_d, 1, &[&fs], xs, it)?;

    let st = model.nets.disc.forward(&mut g, &model.store, fake_t);
    let ss = model.nets.inverse.as_ref().expect("cycle model").1.forward(&mut g, &model.store, fake_s);
    let gs = gen_style_loss(g.value(st).data(), g.value(ss).data());
    let cyc = recon_loss(g.value(rec_s).data(), xs.data(), g.value(rec_t).data(), xt.data());
    let shape = xs.shape().to_vec();
    let seeds: Vec<(Var, Tensor<f32>)> = vec![
        (st, column(scaled(gs.grad_a, cfg.adv_weight))),
        (ss, column(scaled(gs.grad_b, cfg.adv_weight))),
        (rec_s, Tensor::new(&shape, scaled(cyc.grad_a, cfg.cycle_weight))),
        (rec_t, Tensor::new(&shape, scaled(cyc.grad_b, cfg.cycle_weight))),
    ];
    let g_grads = g.backward(&seeds);
    let g_total = cfg.cycle_weight * cyc.value + cfg.adv_weight * gs.value;
    Ok(Step {
        row: TransformMetricsRow {
            iteration: it,
            recon: cyc.value,
            gen_style: gs.value,
            disc_style: d_t + d_s,
            vq: 0.0,
        },
        g_grads,
        g_total,
    })
}

/// Replaces every image of `src` by its translation, keeping lens structure,
/// sample ids, seeds and labels. The result is a pseudo-target dataset
/// tagged with the generator fingerprint.
pub fn translate_dataset(model: &TransformModel, src: &Dataset) -> Result<Dataset> {
    if src.image_side() != model.config.image_side {
        return Err(Error::InvalidInput(format!(
            "dataset side {} does not match generator side {}",
            src.image_side(),
            model.config.image_side
        )));
    }
    let refs: Vec<&Image> = image_pool(src);
    let mut translated = model.reconstruct_batch(&refs)?.into_iter();
    let lenses = src
        .lenses
        .iter()
        .map(|rec| LensRecord {
            lens: rec.lens.clone(),
            origin: rec.origin,
            samples: rec
                .samples
                .iter()
                .map(|s| {
                    let images = translated.by_ref().take(s.images.images.len()).collect();
                    let set =
                        FovImageSet { images, offset: s.images.offset, lens_id: s.images.lens_id, seed: s.images.seed };
                    Sample { images: Arc::new(set), ..s.clone() }
                })
                .collect(),
        })
        .collect();
    let mut config = src.config.clone();
    config.role = Role::PseudoTarget;
    config.derived_from = Some(model.fingerprint());
    Ok(Dataset { config, dataset_seed: src.dataset_seed, lenses, sealed: None })
}
