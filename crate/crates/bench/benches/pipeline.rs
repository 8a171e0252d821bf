use aalab_bench::{desk_grid, small_source, SIDE};
use aalab_core::aligner::{train_aligner, AlignerArch, AlignerModel, AlignerTrainConfig, DegradationSpec, TrainData};
use aalab_core::eval::{report_from_predictions, Prediction};
use aalab_core::optics::{
    make_psf, simulate_capture, DomainConfig, DomainLabel, FieldPoint, FovImageSet, LensInstance, MisalignmentOffset,
};
use aalab_core::transform::{GeneratorConfig, TransformModel};
use aalab_core::Role;
use criterion::{black_box, criterion_group, criterion_main, Criterion};

fn optics(c: &mut Criterion) {
    let domain = DomainConfig::standard(DomainLabel::Target, SIDE);
    let lens = LensInstance::ideal();
    let field = FieldPoint::default_set()[1];
    let at = MisalignmentOffset::new(6.0, -3.0);
    c.bench_function("make_psf", |b| b.iter(|| make_psf(black_box(at), field, &lens, &domain).unwrap()));
    c.bench_function("simulate_capture_48", |b| b.iter(|| simulate_capture(black_box(at), &lens, &domain, 3).unwrap()));
}

fn networks(c: &mut Criterion) {
    let src = small_source(DomainLabel::SourceIsp);
    let sets: Vec<&FovImageSet> = src.samples().map(|(_, s)| &*s.images).take(64).collect();
    let aligner = AlignerModel::new(AlignerArch::new(SIDE, 15.0), 0).unwrap();
    c.bench_function("aligner_infer_64", |b| b.iter(|| aligner.infer_batch(black_box(&sets)).unwrap()));

    let g = TransformModel::new(GeneratorConfig::new(SIDE), 0).unwrap();
    let images: Vec<_> = sets.iter().take(16).map(|s| &s.images[0]).collect();
    c.bench_function("generator_reconstruct_16", |b| b.iter(|| g.reconstruct_batch(black_box(&images)).unwrap()));

    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    let cfg = AlignerTrainConfig { iterations: 2, batch_size: 24, ..Default::default() };
    let arch = AlignerArch::new(SIDE, 15.0);
    group.bench_function("supervised_2_iters", |b| {
        b.iter(|| {
            train_aligner(TrainData::Single(vec![&src]), arch.clone(), &cfg, &DegradationSpec::disabled()).unwrap()
        })
    });
    let mut s2t = small_source(DomainLabel::Target);
    s2t.config.role = Role::PseudoTarget;
    group.bench_function("da3_2_iters", |b| {
        b.iter(|| {
            train_aligner(TrainData::Paired { src: &src, s2t: &s2t }, arch.clone(), &cfg, &DegradationSpec::default())
                .unwrap()
        })
    });
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let preds: Vec<Prediction> = desk_grid()
        .positions()
        .unwrap()
        .into_iter()
        .cycle()
        .take(484)
        .enumerate()
        .map(|(i, label)| Prediction { lens_id: (i / 121) as u32, label, predicted: MisalignmentOffset::ZERO })
        .collect();
    c.bench_function("report_484", |b| {
        b.iter(|| report_from_predictions(black_box(&preds), Some(desk_grid())).unwrap())
    });
}

criterion_group!(benches, optics, networks, metrics);
criterion_main!(benches);
