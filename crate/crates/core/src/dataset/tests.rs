use std::fs;

use proptest::prelude::*;

use super::*;
use crate::optics::{DomainLabel, ToleranceModel};

fn small_domain(label: DomainLabel) -> DomainConfig {
    DomainConfig::standard(label, 32)
}

fn tiny_grid() -> GridSpec {
    GridSpec::new(4.0, 2.0)
}

#[test]
fn grid_counts_by_enumeration() {
    assert_eq!(grid_positions(30.0, 2.0).unwrap().len(), 31 * 31);
    assert_eq!(grid_positions(15.0, 1.0).unwrap().len(), 961);
    assert_eq!(grid_positions(30.0, 10.0).unwrap().len(), 49);
    assert_eq!(GridSpec::new(30.0, 2.0).coarsened(5.0).count().unwrap(), 49);
    let g = grid_positions(2.0, 2.0).unwrap();
    assert_eq!(g.len(), 9);
    assert!(g.contains(&MisalignmentOffset::ZERO));
    // Row-major with dy outer.
    assert_eq!(g[0], MisalignmentOffset::new(-2.0, -2.0));
    assert_eq!(g[1], MisalignmentOffset::new(0.0, -2.0));
    assert_eq!(g[3], MisalignmentOffset::new(-2.0, 0.0));
    assert!(matches!(grid_positions(30.0, 4.0), Err(Error::InvalidConfig { .. })));
    assert!(grid_positions(0.0, 1.0).is_err());
}

proptest! {
    #[test]
    fn grid_count_formula(k in 1usize..40, step in prop::sample::select(vec![0.5, 1.0, 2.0, 3.0, 2.5])) {
        let range = k as f64 * step;
        let pts = grid_positions(range, step).unwrap();
        prop_assert_eq!(pts.len(), (2 * k + 1).pow(2));
        prop_assert!(pts.iter().all(|p| p.dx.abs() <= range + 1e-9 && p.dy.abs() <= range + 1e-9));
    }
}

#[test]
fn source_dataset_structure() {
    let d = small_domain(DomainLabel::SourceClean);
    let tol = ToleranceModel::default();
    let ds = build_source_dataset(&d, 2, tiny_grid(), &tol, 5).unwrap();
    assert_eq!(ds.lens_ids(), vec![0, 1, 2]);
    assert_eq!(ds.n_samples(), 3 * 25);
    assert_eq!(ds.lenses[0].lens, LensInstance::ideal());
    assert_eq!(ds.lenses[0].origin, MisalignmentOffset::ZERO);
    for (lens, s) in ds.samples() {
        let l = s.label.unwrap();
        assert!(l.dx.abs() <= 4.0 && l.dy.abs() <= 4.0);
        assert_eq!(s.rng_seed, crate::seed::sample_seed(5, lens.lens.lens_id, s.sample_id));
    }
    // Pre-alignment recovers the built-in decenter bias to within the fine step.
    for rec in &ds.lenses[1..] {
        let err = rec.origin + rec.lens.tolerance_shift;
        assert!(err.dx.abs() <= 0.25 && err.dy.abs() <= 0.25, "{:?} vs {:?}", rec.origin, rec.lens.tolerance_shift);
    }
    let m0 = build_source_dataset(&d, 0, tiny_grid(), &tol, 5).unwrap();
    assert_eq!(m0.lens_ids(), vec![0]);
    assert_eq!(m0.lenses[0], ds.lenses[0]);
}

#[test]
fn regeneration_is_byte_identical() {
    let d = small_domain(DomainLabel::Target);
    let tol = ToleranceModel::default();
    let a = build_source_dataset(&d, 1, tiny_grid(), &tol, 9).unwrap();
    let b = build_source_dataset(&d, 1, tiny_grid(), &tol, 9).unwrap();
    assert_eq!(a, b);
    let (ta, tb) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    save_dataset(&a, &ta.path().join("ds")).unwrap();
    save_dataset(&b, &tb.path().join("ds")).unwrap();
    for f in ["manifest.json", "checksums.sha256", "config.json"] {
        assert_eq!(fs::read(ta.path().join("ds").join(f)).unwrap(), fs::read(tb.path().join("ds").join(f)).unwrap());
    }
    let c = build_source_dataset(&d, 1, tiny_grid(), &tol, 10).unwrap();
    assert_ne!(manifest_for(&a), manifest_for(&c));
}

#[test]
fn target_dataset_hides_labels() {
    let d = small_domain(DomainLabel::Target);
    let tol = ToleranceModel::default();
    let grid = GridSpec::new(30.0, 2.0);
    let ds = build_target_dataset(&d, 20, grid, &tol, 3).unwrap();
    assert_eq!(ds.lens_ids(), vec![TARGET_LENS_ID]);
    assert_eq!(ds.n_samples(), 20);
    assert!(ds.samples().all(|(_, s)| s.label.is_none() && s.images.offset == MisalignmentOffset::ZERO));
    assert!(build_target_dataset(&d, 1, grid, &tol, 3).is_ok());
    assert!(
        matches!(build_target_dataset(&d, 500, grid, &tol, 3), Err(Error::InvalidConfig { key, .. }) if key == "n_random")
    );
    assert!(build_target_dataset(&d, 0, grid, &tol, 3).is_err());

    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("trg");
    save_dataset(&ds, &root).unwrap();
    let samples = fs::read_to_string(root.join(format!("lens_{TARGET_LENS_ID}/samples.jsonl"))).unwrap();
    for line in samples.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v.get("dx_um").is_none() && v.get("dy_um").is_none());
    }
    assert!(!fs::read_to_string(root.join("manifest.json")).unwrap().contains("dx_um"));
    let audit = read_sealed_audit(&root).unwrap();
    assert_eq!(audit.len(), 20);
    assert!(audit.iter().all(|(_, _, p)| p.dx.abs() <= 30.0 && p.dy.abs() <= 30.0));
    let loaded = load_dataset(&root).unwrap();
    assert_eq!(loaded.n_samples(), 20);
}

#[test]
fn eval_datasets_are_disjoint() {
    let d = small_domain(DomainLabel::Target);
    let tol = ToleranceModel::default();
    let ev = build_eval_datasets(&d, 3, 2, GridSpec::new(10.0, 2.0), true, &tol, 4).unwrap();
    let test_ids = ev.test.lens_ids();
    let oracle_ids = ev.oracle.lens_ids();
    assert_eq!(test_ids.len() + oracle_ids.len(), 5);
    assert!(test_ids.iter().all(|id| !oracle_ids.contains(id)));
    assert_eq!(ev.test.role(), Role::Test);
    assert_eq!(ev.oracle.role(), Role::Oracle);
    let sparse = ev.oracle_sparse.unwrap();
    assert_eq!(sparse.lenses[0].samples.len(), 9);
    assert_eq!(sparse.lenses[0].origin, ev.oracle.lenses[0].origin);

    let none = build_eval_datasets(&d, 1, 0, GridSpec::new(4.0, 2.0), false, &tol, 4).unwrap();
    assert!(none.oracle.lenses.is_empty());
    assert_eq!(none.test.n_samples(), 25);
}

#[test]
fn save_load_round_trip() {
    let d = small_domain(DomainLabel::SourceClean);
    let ds = build_source_dataset(&d, 1, GridSpec::new(2.0, 2.0), &ToleranceModel::default(), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("src");
    let manifest = save_dataset(&ds, &root).unwrap();
    assert_eq!(manifest.schema_version, 1);
    let manifest_json: serde_json::Value =
        serde_json::from_slice(&fs::read(root.join("manifest.json")).unwrap()).unwrap();
    let keys: Vec<_> = manifest_json.as_object().unwrap().keys().cloned().collect();
    assert_eq!(keys.len(), 5);
    for k in ["schema_version", "role", "dataset_seed", "config_hash", "lens_ids"] {
        assert!(keys.iter().any(|x| x == k));
    }
    assert!(root.join("lens_1/images/0_fov4.png").exists());
    let back = load_dataset(&root).unwrap();
    assert_eq!(back.config, ds.config);
    assert_eq!(back.dataset_seed, ds.dataset_seed);
    assert_eq!(back.config_hash(), manifest.config_hash);
    for (a, b) in back.lenses.iter().zip(&ds.lenses) {
        assert_eq!(a.lens, b.lens);
        assert_eq!(a.origin, b.origin);
        for (sa, sb) in a.samples.iter().zip(&b.samples) {
            assert_eq!((sa.sample_id, sa.label, sa.rng_seed), (sb.sample_id, sb.label, sb.rng_seed));
            for (ia, ib) in sa.images.images.iter().zip(&sb.images.images) {
                let max = ia.pixels().iter().zip(ib.pixels()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
                assert!(max <= 1.0 / 255.0 + 1e-6);
            }
        }
    }
    // Saving again over an existing dataset replaces it cleanly.
    save_dataset(&back, &root).unwrap();
    load_dataset(&root).unwrap();
}

#[test]
fn load_errors_are_distinct() {
    let d = small_domain(DomainLabel::Target);
    let ds = build_source_dataset(&d, 0, GridSpec::new(2.0, 2.0), &ToleranceModel::default(), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let fresh = |name: &str| {
        let root = dir.path().join(name);
        save_dataset(&ds, &root).unwrap();
        root
    };

    let r = fresh("corrupt");
    fs::write(r.join("manifest.json"), b"{ not json").unwrap();
    assert!(matches!(load_dataset(&r), Err(Error::Schema { .. })));

    let r = fresh("version");
    let text =
        fs::read_to_string(r.join("manifest.json")).unwrap().replace("\"schema_version\": 1", "\"schema_version\": 2");
    fs::write(r.join("manifest.json"), text).unwrap();
    assert!(matches!(load_dataset(&r), Err(Error::SchemaVersion { found: 2, .. })));

    let r = fresh("missing");
    fs::remove_file(r.join("lens_0/images/3_fov2.png")).unwrap();
    assert!(matches!(load_dataset(&r), Err(Error::MissingFile(_))));

    let r = fresh("tampered");
    let p = r.join("lens_0/samples.jsonl");
    let mut bytes = fs::read(&p).unwrap();
    bytes.push(b' ');
    fs::write(&p, bytes).unwrap();
    assert!(matches!(load_dataset(&r), Err(Error::Checksum(_))));

    assert!(matches!(load_dataset(&dir.path().join("nowhere")), Err(Error::MissingFile(_))));
}
