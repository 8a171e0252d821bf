use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{Dataset, DatasetConfig, GridSpec, LensRecord, Role, Sample, Sampling};
use super::{ORACLE_LENS_BASE, TARGET_LENS_ID, TEST_LENS_BASE};
use crate::eval::prealign_origin;
use crate::optics::{simulate_capture, DomainConfig, LensInstance, MisalignmentOffset, ToleranceModel};
use crate::seed::{lens_seed, mix_seed, sample_seed};
use crate::{Error, Result};

fn make_lens(lens_id: u32, dataset_seed: u64, tol: &ToleranceModel) -> LensInstance {
    LensInstance::sample(lens_id, lens_seed(dataset_seed, lens_id), tol)
}

fn capture_lens(
    lens: LensInstance,
    origin: MisalignmentOffset,
    positions: &[MisalignmentOffset],
    labeled: bool,
    domain: &DomainConfig,
    dataset_seed: u64,
) -> Result<LensRecord> {
    let samples = positions
        .par_iter()
        .enumerate()
        .map(|(i, &pos)| {
            let sample_id = i as u32;
            let rng_seed = sample_seed(dataset_seed, lens.lens_id, sample_id);
            let mut set = simulate_capture(origin + pos, &lens, domain, rng_seed)?;
            set.offset = if labeled { pos } else { MisalignmentOffset::ZERO };
            Ok(Sample { sample_id, label: labeled.then_some(pos), images: Arc::new(set), rng_seed })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LensRecord { lens, origin, samples })
}

/// Pre-aligned labeled grid captures for each lens.
fn grid_dataset(
    role: Role,
    lenses: Vec<LensInstance>,
    domain: &DomainConfig,
    grid: GridSpec,
    tol: &ToleranceModel,
    dataset_seed: u64,
) -> Result<Dataset> {
    domain.validate()?;
    let positions = grid.positions()?;
    let origins = lenses
        .par_iter()
        .map(|l| if *l == LensInstance::ideal() { Ok(MisalignmentOffset::ZERO) } else { prealign_origin(l, domain) })
        .collect::<Result<Vec<_>>>()?;
    let lens_ids = lenses.iter().map(|l| l.lens_id).collect();
    let records = lenses
        .into_iter()
        .zip(origins)
        .map(|(lens, origin)| capture_lens(lens, origin, &positions, true, domain, dataset_seed))
        .collect::<Result<Vec<_>>>()?;
    let config = DatasetConfig {
        role,
        domain: domain.clone(),
        sampling: grid.into(),
        tolerance: *tol,
        lens_ids,
        derived_from: None,
    };
    Ok(Dataset { config, dataset_seed, lenses: records, sealed: None })
}

/// Ideal lens 0 plus `m_tolerance_lenses` perturbed lenses, each captured at
/// every grid position.
pub fn build_source_dataset(
    domain: &DomainConfig,
    m_tolerance_lenses: usize,
    grid: GridSpec,
    tol: &ToleranceModel,
    dataset_seed: u64,
) -> Result<Dataset> {
    if m_tolerance_lenses as u32 >= TARGET_LENS_ID {
        return Err(Error::invalid_config("m_tolerance_lenses", format!("must be below {TARGET_LENS_ID}")));
    }
    let lenses = std::iter::once(LensInstance::ideal())
        .chain((1..=m_tolerance_lenses as u32).map(|id| make_lens(id, dataset_seed, tol)))
        .collect();
    grid_dataset(Role::Source, lenses, domain, grid, tol, dataset_seed)
}

/// One perturbed lens captured at `n_random` uniform positions. Labels are
/// kept only in the sealed audit sidecar.
pub fn build_target_dataset(
    domain: &DomainConfig,
    n_random: usize,
    grid: GridSpec,
    tol: &ToleranceModel,
    dataset_seed: u64,
) -> Result<Dataset> {
    domain.validate()?;
    let n_grid = grid.count()?;
    if n_random == 0 || n_random * 4 > n_grid {
        return Err(Error::invalid_config(
            "n_random",
            format!("must be in [1, {}] for a grid of {n_grid} positions", n_grid / 4),
        ));
    }
    let lens = make_lens(TARGET_LENS_ID, dataset_seed, tol);
    let r = grid.range_um;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[dataset_seed, TARGET_LENS_ID as u64, u64::MAX - 1]));
    let positions: Vec<_> =
        (0..n_random).map(|_| MisalignmentOffset::new(rng.random_range(-r..=r), rng.random_range(-r..=r))).collect();
    let record = capture_lens(lens, MisalignmentOffset::ZERO, &positions, false, domain, dataset_seed)?;
    let config = DatasetConfig {
        role: Role::TargetUnlabeled,
        domain: domain.clone(),
        sampling: Sampling::Random { range_um: r, n_random },
        tolerance: *tol,
        lens_ids: vec![TARGET_LENS_ID],
        derived_from: None,
    };
    Ok(Dataset { config, dataset_seed, lenses: vec![record], sealed: Some(positions) })
}

#[derive(Clone, Debug)]
pub struct EvalDatasets {
    pub test: Dataset,
    pub oracle: Dataset,
    /// Oracle lenses at five times the grid step, when requested.
    pub oracle_sparse: Option<Dataset>,
}

/// Disjoint test and oracle lens sets in the given domain, labeled on the grid.
pub fn build_eval_datasets(
    domain: &DomainConfig,
    n_test: usize,
    n_oracle: usize,
    grid: GridSpec,
    with_sparse: bool,
    tol: &ToleranceModel,
    dataset_seed: u64,
) -> Result<EvalDatasets> {
    if n_test == 0 {
        return Err(Error::invalid_config("n_test", "must be at least 1"));
    }
    if n_test > (ORACLE_LENS_BASE - TEST_LENS_BASE) as usize || n_oracle > 100 {
        return Err(Error::invalid_config("n_test", "too many evaluation lenses"));
    }
    let test_lenses = (0..n_test as u32).map(|i| make_lens(TEST_LENS_BASE + i, dataset_seed, tol)).collect();
    let oracle_lenses: Vec<_> =
        (0..n_oracle as u32).map(|i| make_lens(ORACLE_LENS_BASE + i, dataset_seed, tol)).collect();
    let test = grid_dataset(Role::Test, test_lenses, domain, grid, tol, dataset_seed)?;
    let oracle = grid_dataset(Role::Oracle, oracle_lenses.clone(), domain, grid, tol, dataset_seed)?;
    let oracle_sparse = if with_sparse {
        let sparse = grid.coarsened(5.0);
        // Reuse the dense pre-alignment: the origin belongs to the lens, not the sampling.
        let records = oracle
            .lenses
            .iter()
            .map(|l| capture_lens(l.lens.clone(), l.origin, &sparse.positions()?, true, domain, dataset_seed))
            .collect::<Result<Vec<_>>>()?;
        let config = DatasetConfig { sampling: sparse.into(), ..oracle.config.clone() };
        Some(Dataset { config, dataset_seed, lenses: records, sealed: None })
    } else {
        None
    };
    Ok(EvalDatasets { test, oracle, oracle_sparse })
}
