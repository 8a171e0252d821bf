use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dataset::{build_source_dataset, build_target_dataset, GridSpec, Role};
use crate::nn::{nearest_code, Graph, Tensor};
use crate::optics::{DomainConfig, DomainLabel, Image, ToleranceModel};

#[test]
fn recon_loss_examples() {
    let l = recon_loss(&[0.7f64], &[0.5], &[0.2], &[0.2]);
    assert!((l.value - 0.2).abs() < 1e-12);
    let x: Vec<f64> = (0..16).map(|i| i as f64 / 40.0).collect();
    let shifted: Vec<f64> = x.iter().map(|v| v + 0.1).collect();
    assert!((recon_loss(&shifted, &x, &shifted, &x).value - 0.2).abs() < 1e-12);
    assert_eq!(recon_loss(&x, &x, &x, &x).value, 0.0);
}

#[test]
fn style_loss_examples() {
    assert_eq!(gen_style_loss(&[1.0f64, 1.0], &[1.0]).value, 0.0);
    assert!((gen_style_loss(&[0.5f64], &[0.5]).value - 0.5).abs() < 1e-12);
    assert!((gen_style_loss(&[0.0f64], &[0.0]).value - 2.0).abs() < 1e-12);

    assert_eq!(disc_style_loss(&[0.0f64], &[0.0], &[1.0]).value, 0.0);
    assert!((disc_style_loss(&[0.5f64], &[0.5], &[0.5]).value - 0.75).abs() < 1e-12);
    assert!((disc_style_loss(&[1.0f64], &[1.0], &[0.0]).value - 3.0).abs() < 1e-12);
}

proptest! {
    #[test]
    fn style_losses_are_non_negative(
        a in prop::collection::vec(-5.0f64..5.0, 1..6),
        b in prop::collection::vec(-5.0f64..5.0, 1..6),
        c in prop::collection::vec(-5.0f64..5.0, 1..6),
    ) {
        prop_assert!(gen_style_loss(&a, &b).value >= 0.0);
        prop_assert!(disc_style_loss(&a, &b, &c).value >= 0.0);
    }
}

fn toy_config(side: usize) -> GeneratorConfig {
    GeneratorConfig { base_channels: 4, codebook_size: 16, code_dim: 8, ..GeneratorConfig::new(side) }
}

fn noise_image(side: usize, rng: &mut ChaCha8Rng) -> Image {
    Image::new(side, (0..side * side).map(|_| rng.random::<f32>()).collect()).unwrap()
}

#[test]
fn untrained_generator_shape_and_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for side in [16, 18, 48, 50] {
        let model = TransformModel::new(toy_config(side), 3).unwrap();
        let img = noise_image(side, &mut rng);
        let out = model.reconstruct(&img).unwrap();
        assert_eq!(out.side(), side);
        assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(out, img);
        assert_eq!(model.codes(&img).unwrap().len(), side.div_ceil(4).pow(2));
    }
    let model = TransformModel::new(toy_config(16), 3).unwrap();
    assert!(matches!(model.reconstruct(&noise_image(20, &mut rng)), Err(crate::Error::InvalidInput(_))));
}

#[test]
fn bottleneck_snaps_to_nearest_code() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (k, d) = (16, 8);
    let z = Tensor::new(&[2, d, 3, 3], (0..2 * d * 9).map(|_| rng.random_range(-2.0..2.0)).collect());
    let cb = Tensor::new(&[k, d], (0..k * d).map(|_| rng.random_range(-2.0..2.0)).collect());
    let mut g = Graph::<f64>::new();
    let (zv, cv) = (g.input(z.clone()), g.input(cb.clone()));
    let out = g.vector_quantize(zv, cv, 0.25, 1.0);
    for n in 0..2 {
        for p in 0..9 {
            let v: Vec<f64> = (0..d).map(|c| z.data()[n * d * 9 + c * 9 + p]).collect();
            let brute = (0..k)
                .min_by(|&a, &b| {
                    let dist = |j: usize| (0..d).map(|c| (v[c] - cb.data()[j * d + c]).powi(2)).sum::<f64>();
                    dist(a).total_cmp(&dist(b))
                })
                .unwrap();
            assert_eq!(out.indices[n * 9 + p], brute);
            assert_eq!(nearest_code(&v, cb.data(), k, d), brute);
        }
    }
}

fn toy_datasets(side: usize) -> (crate::Dataset, crate::Dataset) {
    let tol = ToleranceModel::default();
    let grid = GridSpec::new(4.0, 1.0);
    let src = build_source_dataset(&DomainConfig::standard(DomainLabel::SourceIsp, side), 0, grid, &tol, 3).unwrap();
    let trg = build_target_dataset(&DomainConfig::standard(DomainLabel::Target, side), 20, grid, &tol, 3).unwrap();
    (src, trg)
}

#[test]
fn zero_iterations_returns_initial_model() {
    let (src, trg) = toy_datasets(32);
    let cfg = TransformTrainConfig { iterations: 0, rng_seed: 4, ..Default::default() };
    let out = train_transform(&src, &trg, toy_config(32), &cfg).unwrap();
    let fresh = TransformModel::new(toy_config(32), crate::seed::mix_seed(&[4, 0])).unwrap();
    assert_eq!(out.model.store.flat_f32(), fresh.store.flat_f32());
    assert!(out.curve.is_empty());
}

#[test]
fn training_rejects_bad_roles() {
    let (src, trg) = toy_datasets(32);
    let cfg = TransformTrainConfig { iterations: 1, ..Default::default() };
    assert!(train_transform(&trg, &trg, toy_config(32), &cfg).is_err());
    assert!(train_transform(&src, &src, toy_config(32), &cfg).is_err());
    assert!(train_transform(&src, &trg, toy_config(40), &cfg).is_err());
    let bad_lr = TransformTrainConfig { disc_learning_rate: Some(0.0), ..cfg };
    assert!(train_transform(&src, &trg, toy_config(32), &bad_lr).is_err());
}

#[test]
fn critic_rate_defaults_to_generator_rate() {
    let cfg = TransformTrainConfig { learning_rate: 3e-4, ..Default::default() };
    assert_eq!(cfg.disc_lr(), 3e-4);
    assert_eq!(TransformTrainConfig { disc_learning_rate: Some(1e-3), ..cfg }.disc_lr(), 1e-3);
}

#[test]
fn seeded_toy_run_reconstructs_held_out_images() {
    let (src, trg) = toy_datasets(32);
    let cfg =
        TransformTrainConfig { iterations: 500, batch_size: 8, learning_rate: 1e-3, rng_seed: 7, ..Default::default() };
    let out = train_transform(&src, &trg, toy_config(32), &cfg).unwrap();
    let window = |rows: &[TransformMetricsRow]| rows.iter().map(|r| r.recon).sum::<f64>() / rows.len() as f64;
    assert!(window(&out.curve[480..]) < 0.1, "training recon {}", window(&out.curve[480..]));

    let domain = DomainConfig::standard(DomainLabel::SourceIsp, 32);
    let held = build_source_dataset(&domain, 1, GridSpec::new(4.0, 1.0), &ToleranceModel::default(), 41).unwrap();
    let imgs: Vec<&Image> = held.samples().flat_map(|(_, s)| s.images.images.iter()).collect();
    let rec = out.model.reconstruct_batch(&imgs).unwrap();
    let l1 = rec.iter().zip(&imgs).map(|(a, b)| a.mean_abs_diff(b)).sum::<f64>() / imgs.len() as f64;
    assert!(l1 < 0.05, "held-out L1 {l1}");
}

#[test]
fn cycle_variant_trains() {
    let (src, trg) = toy_datasets(32);
    let config = GeneratorConfig { kind: GeneratorKind::CycleGan, ..toy_config(32) };
    let cfg = TransformTrainConfig { iterations: 30, batch_size: 4, learning_rate: 1e-3, ..Default::default() };
    let out = train_transform(&src, &trg, config, &cfg).unwrap();
    assert_eq!(out.curve.len(), 30);
    assert!(!out.model.store.trainable_with_prefix("C.").is_empty());
    let img = &src.lenses[0].samples[0].images.images[0];
    assert!(out.model.codes(img).unwrap().is_empty());
    assert_eq!(out.model.reconstruct(img).unwrap().side(), 32);
}

#[test]
fn translate_preserves_structure_and_is_pure() {
    let (src, _) = toy_datasets(32);
    let model = TransformModel::new(toy_config(32), 5).unwrap();
    let a = translate_dataset(&model, &src).unwrap();
    let b = translate_dataset(&model, &src).unwrap();
    assert_eq!(a.role(), Role::PseudoTarget);
    assert_eq!(a.lens_ids(), src.lens_ids());
    assert_eq!(a.n_samples(), src.n_samples());
    assert_eq!(a.config.derived_from.as_deref(), Some(model.fingerprint().as_str()));
    let labels = |ds: &crate::Dataset| ds.samples().map(|(_, s)| (s.sample_id, s.label)).collect::<Vec<_>>();
    assert_eq!(labels(&a), labels(&src));
    for ((_, x), (_, y)) in a.samples().zip(b.samples()) {
        assert_eq!(x.images, y.images);
    }
    let (_, s0) = a.samples().next().unwrap();
    let (_, r0) = src.samples().next().unwrap();
    assert_ne!(s0.images.images, r0.images.images);

    let ident = translate_dataset(&TransformModel::identity(toy_config(32), 5).unwrap(), &src).unwrap();
    for ((_, x), (_, y)) in ident.samples().zip(src.samples()) {
        assert_eq!(x.images, y.images);
    }
}

#[test]
fn generator_checkpoint_round_trip() {
    let model = TransformModel::new(toy_config(16), 6).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.ckpt");
    model.save(&path).unwrap();
    let back = TransformModel::load(&path).unwrap();
    assert_eq!(back.fingerprint(), model.fingerprint());
    let img = noise_image(16, &mut ChaCha8Rng::seed_from_u64(0));
    assert_eq!(back.reconstruct(&img).unwrap(), model.reconstruct(&img).unwrap());
    // Wrong kind is a schema error.
    assert!(matches!(crate::aligner::AlignerModel::load(&path), Err(crate::Error::Schema { .. })));
}
