use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, restore, save_checkpoint};
use crate::nn::{Conv2d, ConvSpec, Graph, Linear, ParamStore, Real, ResBlock, Tensor, Var};
use crate::optics::{FovImageSet, MisalignmentOffset, FIELD_COUNT};
use crate::{Error, Result};

pub const ALIGNER_KIND: &str = "aligner";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignerArch {
    pub image_side: usize,
    /// Width of the first stage; later stages double it.
    pub base_channels: usize,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
    /// Micrometers corresponding to a normalized output of 1.
    pub label_scale: f64,
}

impl AlignerArch {
    pub fn new(image_side: usize, label_scale: f64) -> Self {
        Self { image_side, base_channels: 16, feature_dim: 512, hidden_dim: 128, dropout: 0.5, label_scale }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_side < 16 || self.base_channels == 0 || self.feature_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::invalid_config("aligner.arch", "sizes must be positive and image_side >= 16"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid_config("aligner.arch.dropout", "must be in [0, 1)"));
        }
        if !(self.label_scale > 0.0 && self.label_scale.is_finite()) {
            return Err(Error::invalid_config("aligner.label_scale", "must be positive"));
        }
        Ok(())
    }

    fn final_side(&self) -> usize {
        (0..4).fold(self.image_side, |s, _| (s - 1) / 2 + 1)
    }
}

/// Extractor `E` (stem + four strided residual stages + linear projection),
/// predictor `P` and domain classifier `D`. Parameter names are prefixed
/// `E.`, `P.` and `D.` so optimizers can select them.
#[derive(Clone, Debug)]
pub struct AlignerNet {
    stem: Conv2d,
    stages: Vec<ResBlock>,
    project: Linear,
    p_hidden: Linear,
    p_out: Linear,
    d_hidden: Linear,
    d_out: Linear,
    flat_dim: usize,
    dropout: f64,
}

impl AlignerNet {
    pub fn new<T: Real>(store: &mut ParamStore<T>, arch: &AlignerArch, rng: &mut ChaCha8Rng) -> Self {
        let c = arch.base_channels;
        let stem = Conv2d::new(store, "E.stem", ConvSpec::new(FIELD_COUNT, c, 3), rng);
        let widths = [c, c, 2 * c, 4 * c, 8 * c];
        let stages =
            (0..4).map(|i| ResBlock::new(store, &format!("E.stage{i}"), widths[i], widths[i + 1], 2, rng)).collect();
        let flat_dim = 8 * c * arch.final_side().pow(2);
        let project = Linear::new(store, "E.project", flat_dim, arch.feature_dim, rng);
        let p_hidden = Linear::new(store, "P.hidden", arch.feature_dim, arch.hidden_dim, rng);
        let p_out = Linear::new(store, "P.out", arch.hidden_dim, 2, rng);
        let d_hidden = Linear::new(store, "D.hidden", arch.feature_dim, arch.hidden_dim, rng);
        let d_out = Linear::new(store, "D.out", arch.hidden_dim, 1, rng);
        Self { stem, stages, project, p_hidden, p_out, d_hidden, d_out, flat_dim, dropout: arch.dropout }
    }

    /// `(N, 5, S, S) -> (N, feature_dim)`.
    pub fn features<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let n = g.shape(x)[0];
        let h = self.stem.forward(g, store, x);
        let mut h = g.relu(h);
        for stage in &self.stages {
            h = stage.forward(g, store, h);
        }
        let flat = g.reshape(h, &[n, self.flat_dim]);
        self.project.forward(g, store, flat)
    }

    fn head<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        layers: (&Linear, &Linear),
        f: Var,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Var {
        let h = layers.0.forward(g, store, f);
        let mut h = g.relu(h);
        if let Some(rng) = rng {
            h = g.dropout(h, self.dropout, rng);
        }
        layers.1.forward(g, store, h)
    }

    /// Normalized offsets `(N, 2)`; dropout is active only when `rng` is given.
    pub fn predict<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        f: Var,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Var {
        self.head(g, store, (&self.p_hidden, &self.p_out), f, rng)
    }

    /// Domain logits `(N, 1)`; positive means "source".
    pub fn classify<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        f: Var,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Var {
        self.head(g, store, (&self.d_hidden, &self.d_out), f, rng)
    }
}

/// Stacks field images channel-wise: `(N, 5, S, S)`.
pub fn fov_batch<T: Real>(sets: &[&FovImageSet], side: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(sets.len() * FIELD_COUNT * side * side);
    for set in sets {
        if set.images.len() != FIELD_COUNT {
            return Err(Error::InvalidInput(format!("expected {FIELD_COUNT} field images, got {}", set.images.len())));
        }
        for img in &set.images {
            if img.side() != side {
                return Err(Error::InvalidInput(format!("image side {} but model expects {side}", img.side())));
            }
            data.extend(img.pixels().iter().map(|&v| T::lit(v as f64)));
        }
    }
    Ok(Tensor::new(&[sets.len(), FIELD_COUNT, side, side], data))
}

/// Trained (or freshly initialized) aligner in `f32`.
#[derive(Clone, Debug)]
pub struct AlignerModel {
    pub arch: AlignerArch,
    pub net: AlignerNet,
    pub store: ParamStore<f32>,
    pub iteration: u64,
}

const INFER_CHUNK: usize = 64;

impl AlignerModel {
    pub fn new(arch: AlignerArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut store = ParamStore::new();
        let net = AlignerNet::new(&mut store, &arch, &mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self { arch, net, store, iteration: 0 })
    }

    pub fn extract_features(&self, set: &FovImageSet) -> Result<Vec<f32>> {
        let mut g = Graph::new();
        let x = g.input(fov_batch(&[set], self.arch.image_side)?);
        let f = self.net.features(&mut g, &self.store, x);
        Ok(g.value(f).data().to_vec())
    }

    /// Evaluation-mode predictor applied to one feature vector, in micrometers.
    pub fn predict_offset(&self, f: &[f32]) -> Result<MisalignmentOffset> {
        if f.len() != self.arch.feature_dim {
            return Err(Error::InvalidInput(format!("feature length {} != {}", f.len(), self.arch.feature_dim)));
        }
        let mut g = Graph::new();
        let fv = g.input(Tensor::new(&[1, f.len()], f.to_vec()));
        let p = self.net.predict(&mut g, &self.store, fv, None);
        let v = g.value(p).data();
        Ok(denormalize(v[0], v[1], self.arch.label_scale))
    }

    pub fn infer(&self, set: &FovImageSet) -> Result<MisalignmentOffset> {
        let f = self.extract_features(set)?;
        self.predict_offset(&f)
    }

    /// Batched evaluation-mode inference.
    pub fn infer_batch(&self, sets: &[&FovImageSet]) -> Result<Vec<MisalignmentOffset>> {
        let mut out = Vec::with_capacity(sets.len());
        for chunk in sets.chunks(INFER_CHUNK) {
            let mut g = Graph::new();
            let x = g.input(fov_batch(chunk, self.arch.image_side)?);
            let f = self.net.features(&mut g, &self.store, x);
            let p = self.net.predict(&mut g, &self.store, f, None);
            out.extend(g.value(p).data().chunks(2).map(|v| denormalize(v[0], v[1], self.arch.label_scale)));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        save_checkpoint(path, ALIGNER_KIND, &self.arch, self.iteration, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (arch, iteration, records, flat): (AlignerArch, _, _, _) = load_checkpoint(path, ALIGNER_KIND)?;
        let mut model = Self::new(arch, 0)?;
        restore(path, &mut model.store, &records, &flat)?;
        model.iteration = iteration;
        Ok(model)
    }
}

pub fn denormalize(x: f32, y: f32, scale: f64) -> MisalignmentOffset {
    MisalignmentOffset::new(x as f64 * scale, y as f64 * scale)
}
