use proptest::prelude::*;

use super::*;

fn center() -> FieldPoint {
    FieldPoint { fx: 0.0, fy: 0.0 }
}

fn clean_domain(side: usize) -> DomainConfig {
    DomainConfig { isp: IspConfig::identity(), ..DomainConfig::standard(DomainLabel::SourceIsp, side) }
}

#[test]
fn zero_offset_psf_is_point_symmetric_and_centered() {
    let d = DomainConfig::standard(DomainLabel::SourceIsp, 48);
    let k = make_psf(MisalignmentOffset::ZERO, center(), &LensInstance::ideal(), &d).unwrap();
    let n = k.side();
    assert_eq!(n % 2, 1);
    for i in 0..n {
        for j in 0..n {
            assert!((k.at(i, j) - k.at(n - 1 - i, n - 1 - j)).abs() < 1e-15);
        }
    }
    let (cx, cy) = k.centroid();
    assert!(cx.abs() < 1e-12 && cy.abs() < 1e-12);
}

#[test]
fn centroid_moves_further_with_larger_decenter() {
    // Closed form: lobe weight w = 0.02|u| at mean position coma·u·(1+|f|), so the
    // centroid x equals w·coma·u (ignoring truncation at 4σ).
    let d = DomainConfig::standard(DomainLabel::SourceIsp, 48);
    let lens = LensInstance::ideal();
    let cx = |dx: f64| make_psf(MisalignmentOffset::new(dx, 0.0), center(), &lens, &d).unwrap().centroid().0;
    let oracle = |u: f64| (0.02 * u).min(0.5) * d.psf.coma_coeff * u;
    let (c10, c20) = (cx(10.0), cx(20.0));
    assert!(c20 > c10 && c10 > 0.0, "{c10} {c20}");
    assert!((c10 - oracle(10.0)).abs() < 1e-3, "{c10} vs {}", oracle(10.0));
    assert!((c20 - oracle(20.0)).abs() < 1e-3, "{c20} vs {}", oracle(20.0));
}

#[test]
fn non_finite_offset_rejected() {
    let d = DomainConfig::standard(DomainLabel::Target, 48);
    assert!(make_psf(MisalignmentOffset::new(f64::NAN, 0.0), center(), &LensInstance::ideal(), &d).is_err());
    assert!(simulate_capture(MisalignmentOffset::new(0.0, f64::INFINITY), &LensInstance::ideal(), &d, 1).is_err());
}

#[test]
fn crosshair_canvas_and_crop() {
    let canvas = render_canvas();
    let lit = canvas.pixels().iter().filter(|&&v| v == 1.0).count();
    assert_eq!(lit, 2 * 90 - 1);
    assert!(canvas.pixels().iter().all(|&v| v == 0.0 || v == 1.0));
    let img = render_ideal_crosshair(&DomainConfig::standard(DomainLabel::Target, 70)).unwrap();
    assert_eq!(img.side(), 70);
    for i in 0..70 {
        assert_eq!(img.get(35, i), 1.0);
        assert_eq!(img.get(i, 35), 1.0);
    }
    assert_eq!(img.pixels().iter().filter(|&&v| v == 1.0).count(), 139);
    let again = render_ideal_crosshair(&DomainConfig::standard(DomainLabel::Target, 70)).unwrap();
    assert_eq!(img, again);
    assert!(render_ideal_crosshair(&DomainConfig::standard(DomainLabel::Target, 31)).is_err());
}

#[test]
fn isp_forward_identity_and_gamma() {
    let img = render_ideal_crosshair(&clean_domain(48)).unwrap();
    let blurred =
        simulate_capture_noiseless(MisalignmentOffset::new(3.0, -2.0), &LensInstance::ideal(), &clean_domain(48))
            .unwrap()
            .images
            .remove(0);
    for x in [&img, &blurred] {
        assert_eq!(&isp_forward(x, &IspConfig::identity(), 5).unwrap(), x);
    }
    let fixed = IspConfig { gamma_range: [2.2, 2.2], ..IspConfig::identity() };
    let flat = Image::new(48, vec![0.25; 48 * 48]).unwrap();
    let out = isp_forward(&flat, &fixed, 0).unwrap();
    let expect = 0.25f64.powf(1.0 / 2.2);
    assert!((expect - 0.5326).abs() < 1e-4);
    assert!(out.pixels().iter().all(|&v| (v as f64 - expect).abs() < 1e-4));

    let back = isp_inverse(&Image::new(48, vec![0.5326; 48 * 48]).unwrap(), &fixed);
    assert!(back.pixels().iter().all(|&v| (v as f64 - 0.25).abs() < 1e-3));
    assert_eq!(isp_inverse(&blurred, &IspConfig::identity()), blurred);

    let bad = Image::from_clamped(2, vec![0.0; 4]);
    let mut px = bad.into_pixels();
    px[0] = 1.5;
    assert!(Image::new(2, px.clone()).is_err());
}

#[test]
fn isp_forward_seeded_determinism() {
    let d = DomainConfig::standard(DomainLabel::Target, 48);
    let img = Image::new(48, (0..48 * 48).map(|i| (i % 97) as f32 / 96.0).collect()).unwrap();
    let a = isp_forward(&img, &d.isp, 11).unwrap();
    let b = isp_forward(&img, &d.isp, 11).unwrap();
    let c = isp_forward(&img, &d.isp, 12).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn delta_psf_capture_reproduces_crosshair() {
    let mut d = clean_domain(70);
    d.psf = PsfFamily { base_sigma: 0.0, astig_coeff: 0.0, coma_coeff: 0.0, smoothing_extra: 0.0, pixel_pitch_um: 2.0 };
    let k = make_psf(MisalignmentOffset::ZERO, center(), &LensInstance::ideal(), &d).unwrap();
    assert_eq!(k.values()[k.side() * k.radius() + k.radius()], 1.0);
    let set = simulate_capture(MisalignmentOffset::ZERO, &LensInstance::ideal(), &d, 3).unwrap();
    let ideal = render_ideal_crosshair(&d).unwrap();
    assert_eq!(set.images.len(), 5);
    for img in &set.images {
        assert_eq!(img, &ideal);
    }
}

#[test]
fn captures_are_deterministic_and_identifiable() {
    let d = DomainConfig::standard(DomainLabel::Target, 48);
    let lens = LensInstance::sample(4, 77, &ToleranceModel::default());
    let a = simulate_capture(MisalignmentOffset::new(4.0, -7.0), &lens, &d, 9).unwrap();
    let b = simulate_capture(MisalignmentOffset::new(4.0, -7.0), &lens, &d, 9).unwrap();
    assert_eq!(a, b);
    assert_eq!((a.lens_id, a.seed), (4, 9));

    let ideal = LensInstance::ideal();
    let x0 = simulate_capture_noiseless(MisalignmentOffset::ZERO, &ideal, &d).unwrap();
    let x30 = simulate_capture_noiseless(MisalignmentOffset::new(30.0, 0.0), &ideal, &d).unwrap();
    for (p, q) in x0.images.iter().zip(&x30.images) {
        assert!(p.l2_distance(q) > 1e-2);
    }
}

#[test]
fn source_clean_skips_forward_chain() {
    let mut d = DomainConfig::standard(DomainLabel::SourceClean, 48);
    d.isp.noise_sigma = 0.2;
    let a = simulate_capture(MisalignmentOffset::new(5.0, 5.0), &LensInstance::ideal(), &d, 1).unwrap();
    let b = simulate_capture(MisalignmentOffset::new(5.0, 5.0), &LensInstance::ideal(), &d, 2).unwrap();
    assert_eq!(a.images, b.images);
}

#[test]
fn gradient_energy_decreases_along_axes() {
    let d = DomainConfig::standard(DomainLabel::Target, 48);
    let ideal = LensInstance::ideal();
    for axis in 0..2 {
        let mut prev = f64::INFINITY;
        for step in 0..=15 {
            let v = step as f64 * 2.0;
            let off = if axis == 0 { MisalignmentOffset::new(v, 0.0) } else { MisalignmentOffset::new(0.0, v) };
            let e = gradient_energy(&simulate_capture_noiseless(off, &ideal, &d).unwrap().images[0]);
            assert!(e <= prev, "axis {axis} at {v}: {e} > {prev}");
            prev = e;
        }
    }
}

#[test]
fn lens_sampling_respects_bounds() {
    let tol = ToleranceModel::default();
    for seed in 0..200 {
        let l = LensInstance::sample(1, seed, &tol);
        assert!(l.tolerance_shift.dx.abs() <= 5.0 && l.tolerance_shift.dy.abs() <= 5.0);
        for g in [l.gain_parallel, l.gain_perp, l.coma_gain] {
            assert!((0.8..=1.2).contains(&g));
        }
        assert_eq!(l, LensInstance::sample(1, seed, &tol));
    }
    let i = LensInstance::ideal();
    assert_eq!(i.tolerance_shift, MisalignmentOffset::ZERO);
}

#[test]
fn domain_validation() {
    let good = DomainConfig::standard(DomainLabel::Target, 50);
    good.validate().unwrap();
    let mut bad = good.clone();
    bad.fields.pop();
    assert!(bad.validate().is_err());
    let mut bad = good.clone();
    bad.isp.quantize_bits = 4;
    assert!(bad.validate().is_err());
    let mut bad = good;
    bad.isp.gamma_range = [0.0, 1.0];
    assert!(bad.validate().is_err());
}

fn any_lens() -> impl Strategy<Value = LensInstance> {
    (1u32..50, any::<u64>()).prop_map(|(id, s)| LensInstance::sample(id, s, &ToleranceModel::default()))
}

fn any_field() -> impl Strategy<Value = FieldPoint> {
    (-1.0..=1.0f64, -1.0..=1.0f64).prop_map(|(fx, fy)| FieldPoint { fx, fy })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn psf_is_normalized(dx in -60.0..60.0f64, dy in -60.0..60.0f64, field in any_field(), lens in any_lens(), target in any::<bool>()) {
        let label = if target { DomainLabel::Target } else { DomainLabel::SourceIsp };
        let k = make_psf(MisalignmentOffset::new(dx, dy), field, &lens, &DomainConfig::standard(label, 48)).unwrap();
        let sum: f64 = k.values().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-6);
        prop_assert!(k.values().iter().all(|&v| v >= 0.0));
        prop_assert_eq!(k.side() % 2, 1);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn isp_round_trip_within_one_level(vals in proptest::collection::vec(0.0..=1.0f32, 32 * 32), target in any::<bool>()) {
        let label = if target { DomainLabel::Target } else { DomainLabel::SourceIsp };
        let det = DomainConfig::standard(label, 48).isp.deterministic();
        let det = IspConfig { scale_jitter_range: [1.0, 1.0], ..det };
        let x = Image::new(32, vals).unwrap();
        let y = isp_inverse(&isp_forward(&x, &det, 0).unwrap(), &det);
        for (a, b) in y.pixels().iter().zip(x.pixels()) {
            prop_assert!((a - b).abs() <= 1.0 / 255.0);
        }
        let unit = IspConfig { quantize_bits: 8, ..IspConfig::identity() };
        let y = isp_inverse(&isp_forward(&x, &unit, 0).unwrap(), &unit);
        for (a, b) in y.pixels().iter().zip(x.pixels()) {
            prop_assert!((a - b).abs() <= 1.0 / 255.0);
        }
    }

    #[test]
    fn capture_images_in_unit_range(dx in -30.0..30.0f64, dy in -30.0..30.0f64, seed in any::<u64>(), lens in any_lens()) {
        let set = simulate_capture(MisalignmentOffset::new(dx, dy), &lens, &DomainConfig::standard(DomainLabel::Target, 48), seed).unwrap();
        prop_assert_eq!(set.images.len(), 5);
        for img in &set.images {
            prop_assert!(img.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
