use serde_json::json;

use super::*;
use crate::Error;

#[test]
fn scenario_presets() {
    let c = parse_config(r#"{"scenario":"security_like"}"#, None).unwrap();
    assert_eq!((c.sampling.range_um, c.sampling.step_um, c.target_domain.image_side), (30.0, 2.0, 70));
    assert_eq!(c.sizes.m_tolerance_lenses, 10);
    let c = parse_config(r#"{"scenario":"smartphone_like"}"#, None).unwrap();
    assert_eq!((c.sampling.range_um, c.sampling.step_um, c.target_domain.image_side), (15.0, 1.0, 50));
    let c = parse_config(r#"{"scenario":"desk"}"#, None).unwrap();
    assert_eq!((c.sampling.range_um, c.sampling.step_um, c.target_domain.image_side), (15.0, 3.0, 48));
    assert_eq!((c.sizes.m_tolerance_lenses, c.sizes.n_test, c.sizes.n_oracle), (3, 4, 2));
    assert_eq!(c.aligner.arch.label_scale, 15.0);
}

#[test]
fn unknown_keys_are_named() {
    let err = parse_config(r#"{"scenario":"desk","stepsize":2}"#, None).unwrap_err();
    assert!(matches!(&err, Error::UnknownKey(k) if k == "stepsize"), "{err}");
    let err = parse_config(r#"{"scenario":"desk","sampling":{"stepsize":2}}"#, None).unwrap_err();
    assert!(matches!(&err, Error::UnknownKey(k) if k == "sampling.stepsize"), "{err}");
    assert!(err.to_string().contains("stepsize"));
}

#[test]
fn type_and_constraint_errors_are_distinct() {
    let err = parse_config(r#"{"scenario":"desk","sampling":{"step_um":"three"}}"#, None).unwrap_err();
    assert!(matches!(&err, Error::ConfigType { key, .. } if key == "sampling.step_um"), "{err}");
    let err = parse_config(r#"{"scenario":"desk","sampling":{"step_um":4}}"#, None).unwrap_err();
    assert!(matches!(&err, Error::InvalidConfig { key, .. } if key == "sampling"), "{err}");
    let err = parse_config(r#"{"scenario":"desk","sizes":{"n_random":31}}"#, None).unwrap_err();
    assert!(matches!(&err, Error::InvalidConfig { key, .. } if key == "sizes.n_random"), "{err}");
    assert!(matches!(parse_config(r#"{"scenario":"lab"}"#, None), Err(Error::ConfigType { .. })));
    assert!(matches!(parse_config(r#"{}"#, None), Err(Error::InvalidConfig { .. })));
    assert!(matches!(parse_config("[1]", None), Err(Error::ConfigType { .. })));
}

#[test]
fn overrides_and_seed() {
    let c = parse_config(r#"{"scenario":"desk","global_seed":7,"sizes":{"n_test":2}}"#, None).unwrap();
    assert_eq!((c.global_seed, c.sizes.n_test, c.sizes.n_oracle), (7, 2, 2));
    assert_eq!(c.aligner.training.rng_seed, ExperimentConfig::preset(Scenario::Desk, 7).aligner.training.rng_seed);
    let o = parse_config(r#"{"scenario":"desk","global_seed":7}"#, Some(9)).unwrap();
    assert_eq!(o.global_seed, 9);
    assert_ne!(o.aligner.training.rng_seed, c.aligner.training.rng_seed);
}

#[test]
fn resolve_round_trip() {
    for text in [r#"{"scenario":"desk","sizes":{"n_test":3}}"#, r#"{"scenario":"security_like","global_seed":3}"#] {
        let once = parse_config(text, None).unwrap();
        let twice = parse_config(&once.to_json(), None).unwrap();
        assert_eq!(once, twice);
    }
}

#[test]
fn resolved_config_is_written() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let c = resolve_config(json!({"scenario":"desk","output_dir": out}), None).unwrap();
    let path = c.write_resolved().unwrap();
    assert_eq!(path, out.join("config.resolved.json"));
    let back = load_config(&path, None).unwrap();
    assert_eq!(back, c);
}

#[test]
fn preset_slugs() {
    use crate::eval::PipelinePreset;
    assert_eq!(preset_slug(PipelinePreset::OnDevice(2)), "ondevice_2");
    assert_eq!(preset_slug(PipelinePreset::DA3NoTol), "da3notol");
}
