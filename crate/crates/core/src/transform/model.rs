use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{encode_checkpoint, load_checkpoint, restore, save_checkpoint};
use crate::dataset::sha256_hex;
use crate::nn::{Conv2d, ConvSpec, Graph, ParamId, ParamStore, Real, ResBlock, Tensor, Var, VqOutput};
use crate::optics::{FovImageSet, Image};
use crate::{Error, Result};

pub const GENERATOR_KIND: &str = "generator";
const SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    /// U-Net with a quantized bottleneck, trained with reconstruction plus a
    /// target-style adversarial term.
    #[default]
    VqUnet,
    /// Two unquantized U-Nets trained with cycle consistency.
    CycleGan,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    #[serde(default)]
    pub kind: GeneratorKind,
    pub image_side: usize,
    pub base_channels: usize,
    pub codebook_size: usize,
    pub code_dim: usize,
}

impl GeneratorConfig {
    pub fn new(image_side: usize) -> Self {
        Self { kind: GeneratorKind::VqUnet, image_side, base_channels: 16, codebook_size: 256, code_dim: 64 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_side < 8 {
            return Err(Error::invalid_config("transform.generator.image_side", "must be at least 8"));
        }
        if self.base_channels == 0 || self.code_dim == 0 {
            return Err(Error::invalid_config("transform.generator", "channel counts must be positive"));
        }
        if self.codebook_size < 2 {
            return Err(Error::invalid_config("transform.generator.codebook_size", "must be at least 2"));
        }
        Ok(())
    }

    /// Working resolution: the side rounded up to a multiple of 4.
    fn padded_side(&self) -> usize {
        self.image_side.div_ceil(4) * 4
    }
}

/// Encoder / decoder with skip connections around a two-level downsampling
/// path. With `codebook` set, bottleneck vectors snap to their nearest code.
#[derive(Clone, Debug)]
pub struct UNet {
    input: Conv2d,
    down1: ResBlock,
    down2: ResBlock,
    pre_quant: Conv2d,
    codebook: Option<ParamId>,
    post_quant: Conv2d,
    up2: ResBlock,
    up1: ResBlock,
    output: Conv2d,
}

pub struct UNetOutput {
    pub image: Var,
    pub vq: Option<VqOutput>,
}

impl UNet {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &GeneratorConfig,
        quantized: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let c = cfg.base_channels;
        let d = cfg.code_dim;
        let input = Conv2d::new(store, &format!("{name}.input"), ConvSpec::new(1, c, 3), rng);
        let down1 = ResBlock::new(store, &format!("{name}.down1"), c, 2 * c, 2, rng).leaky(SLOPE);
        let down2 = ResBlock::new(store, &format!("{name}.down2"), 2 * c, 4 * c, 2, rng).leaky(SLOPE);
        let pre_quant = Conv2d::new(store, &format!("{name}.pre_quant"), ConvSpec::new(4 * c, d, 1), rng);
        let codebook = quantized.then(|| {
            // Small codes near the origin: the nearest one then depends on the
            // direction of the bottleneck vector rather than on its length.
            let k = cfg.codebook_size as f64;
            let v = (0..cfg.codebook_size * d).map(|_| T::lit(rng.random_range(-1.0 / k..1.0 / k))).collect();
            store.add(format!("{name}.codebook"), Tensor::new(&[cfg.codebook_size, d], v))
        });
        let post_quant = Conv2d::new(store, &format!("{name}.post_quant"), ConvSpec::new(d, 4 * c, 3), rng);
        let up2 = ResBlock::new(store, &format!("{name}.up2"), 6 * c, 2 * c, 1, rng).leaky(SLOPE);
        let up1 = ResBlock::new(store, &format!("{name}.up1"), 3 * c, c, 1, rng).leaky(SLOPE);
        let output = Conv2d::new(store, &format!("{name}.output"), ConvSpec::new(c, 1, 3), rng);
        Self { input, down1, down2, pre_quant, codebook, post_quant, up2, up1, output }
    }

    /// `(N, 1, S, S) -> (N, 1, S, S)` in `[0, 1]`.
    fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        side: usize,
        padded: usize,
        commitment: f64,
    ) -> UNetOutput {
        let xp = if padded == side { x } else { g.pad2d(x, 0, 0, padded - side, padded - side) };
        let h0 = self.input.forward(g, store, xp);
        let h0 = g.leaky_relu(h0, T::lit(SLOPE));
        let h1 = self.down1.forward(g, store, h0);
        let h2 = self.down2.forward(g, store, h1);
        let z = self.pre_quant.forward(g, store, h2);
        let (zq, vq) = match self.codebook {
            Some(cb) => {
                let cbv = g.param(store, cb);
                let out = g.vector_quantize(z, cbv, commitment, 1.0);
                (out.quantized, Some(out))
            }
            None => (z, None),
        };
        let u = self.post_quant.forward(g, store, zq);
        let u = g.leaky_relu(u, T::lit(SLOPE));
        let u = g.upsample2x(u);
        let u = g.concat_channels(&[u, h1]);
        let u = self.up2.forward(g, store, u);
        let u = g.upsample2x(u);
        let u = g.concat_channels(&[u, h0]);
        let u = self.up1.forward(g, store, u);
        // The network predicts a correction to its input.
        let delta = self.output.forward(g, store, u);
        let y = g.add(xp, delta);
        let y = if padded == side { y } else { g.crop2d(y, 0, 0, side, side) };
        UNetOutput { image: g.clamp01(y), vq }
    }
}

/// Patch discriminator with spectrally normalized convolutions; patch scores
/// are averaged to one value per image.
#[derive(Clone, Debug)]
pub struct PatchDiscriminator {
    convs: Vec<Conv2d>,
    head: Conv2d,
}

impl PatchDiscriminator {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, c: usize, rng: &mut ChaCha8Rng) -> Self {
        let widths = [1, c, 2 * c, 4 * c];
        let convs = (0..3)
            .map(|i| {
                let spec = ConvSpec::new(widths[i], widths[i + 1], 3).stride(2).spectral();
                Conv2d::new(store, &format!("{name}.conv{i}"), spec, rng)
            })
            .collect();
        let head = Conv2d::new(store, &format!("{name}.head"), ConvSpec::new(4 * c, 1, 3).spectral(), rng);
        Self { convs, head }
    }

    /// `(N, 1, S, S) -> (N, 1)` realness scores.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(g, store, h);
            h = g.leaky_relu(h, T::lit(SLOPE));
        }
        let s = self.head.forward(g, store, h);
        g.global_avg_pool(s)
    }

    pub fn power_iterate<T: Real>(&self, store: &mut ParamStore<T>) {
        for conv in self.convs.iter().chain([&self.head]) {
            conv.power_iterate(store);
        }
    }
}

/// Networks of a transform model. Names are prefixed `G.` (source to
/// target), `C.` (target to source, CycleGAN only), `DS.` (target-style
/// critic) and `DT.` (source-style critic, CycleGAN only).
#[derive(Clone, Debug)]
pub struct TransformNets {
    pub generator: UNet,
    pub disc: PatchDiscriminator,
    pub inverse: Option<(UNet, PatchDiscriminator)>,
}

impl TransformNets {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Self {
        let cycle = cfg.kind == GeneratorKind::CycleGan;
        let generator = UNet::new(store, "G", cfg, !cycle, rng);
        let disc = PatchDiscriminator::new(store, "DS", cfg.base_channels, rng);
        let inverse = cycle.then(|| {
            (UNet::new(store, "C", cfg, false, rng), PatchDiscriminator::new(store, "DT", cfg.base_channels, rng))
        });
        Self { generator, disc, inverse }
    }

    pub fn translate<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        cfg: &GeneratorConfig,
        x: Var,
        commitment: f64,
    ) -> UNetOutput {
        self.generator.forward(g, store, x, cfg.image_side, cfg.padded_side(), commitment)
    }

    pub fn translate_back<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        cfg: &GeneratorConfig,
        x: Var,
    ) -> Var {
        let (inv, _) = self.inverse.as_ref().expect("cycle model");
        inv.forward(g, store, x, cfg.image_side, cfg.padded_side(), 0.0).image
    }

    pub fn power_iterate<T: Real>(&self, store: &mut ParamStore<T>) {
        self.disc.power_iterate(store);
        if let Some((_, d)) = &self.inverse {
            d.power_iterate(store);
        }
    }
}

pub(crate) fn image_batch<T: Real>(images: &[&Image], side: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(images.len() * side * side);
    for img in images {
        if img.side() != side {
            return Err(Error::InvalidInput(format!("image side {} but generator expects {side}", img.side())));
        }
        data.extend(img.pixels().iter().map(|&v| T::lit(v as f64)));
    }
    Ok(Tensor::new(&[images.len(), 1, side, side], data))
}

fn to_images(t: &Tensor<f32>, side: usize) -> Vec<Image> {
    t.data().chunks(side * side).map(|c| Image::from_clamped(side, c.to_vec())).collect()
}

/// Trained (or freshly initialized) domain transform.
#[derive(Clone, Debug)]
pub struct TransformModel {
    pub config: GeneratorConfig,
    pub nets: TransformNets,
    pub store: ParamStore<f32>,
    pub iteration: u64,
}

const CHUNK: usize = 32;

impl TransformModel {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let nets = TransformNets::new(&mut store, &config, &mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self { config, nets, store, iteration: 0 })
    }

    /// A generator whose output layer is zeroed, so it maps every image to
    /// itself exactly.
    pub fn identity(config: GeneratorConfig, seed: u64) -> Result<Self> {
        let mut model = Self::new(config, seed)?;
        for id in model.store.ids().collect::<Vec<_>>() {
            if model.store.name(id).starts_with("G.output.") {
                model.store.get_mut(id).data_mut().fill(0.0);
            }
        }
        Ok(model)
    }

    /// Source-to-target map applied to each image.
    pub fn reconstruct_batch(&self, images: &[&Image]) -> Result<Vec<Image>> {
        let side = self.config.image_side;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(CHUNK) {
            let mut g = Graph::new();
            let x = g.input(image_batch(chunk, side)?);
            let y = self.nets.translate(&mut g, &self.store, &self.config, x, 0.0);
            out.extend(to_images(g.value(y.image), side));
        }
        Ok(out)
    }

    pub fn reconstruct(&self, img: &Image) -> Result<Image> {
        Ok(self.reconstruct_batch(&[img])?.remove(0))
    }

    pub fn translate_set(&self, set: &FovImageSet) -> Result<FovImageSet> {
        let refs: Vec<&Image> = set.images.iter().collect();
        Ok(FovImageSet { images: self.reconstruct_batch(&refs)?, ..set.clone() })
    }

    /// Codebook indices chosen for each bottleneck position (empty for the
    /// unquantized variant).
    pub fn codes(&self, img: &Image) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let x = g.input(image_batch(&[img], self.config.image_side)?);
        let y = self.nets.translate(&mut g, &self.store, &self.config, x, 0.0);
        Ok(y.vq.map(|v| v.indices).unwrap_or_default())
    }

    /// Target-style critic scores, one per image.
    pub fn style_scores(&self, images: &[&Image]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(CHUNK) {
            let mut g = Graph::new();
            let x = g.input(image_batch(chunk, self.config.image_side)?);
            let s = self.nets.disc.forward(&mut g, &self.store, x);
            out.extend(g.value(s).data().iter().map(|&v| v as f64));
        }
        Ok(out)
    }

    /// SHA-256 of the serialized checkpoint; identifies derived datasets.
    pub fn fingerprint(&self) -> String {
        sha256_hex(&encode_checkpoint(GENERATOR_KIND, &self.config, self.iteration, &self.store))
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        save_checkpoint(path, GENERATOR_KIND, &self.config, self.iteration, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (config, iteration, records, flat): (GeneratorConfig, _, _, _) = load_checkpoint(path, GENERATOR_KIND)?;
        let mut model = Self::new(config, 0)?;
        restore(path, &mut model.store, &records, &flat)?;
        model.iteration = iteration;
        Ok(model)
    }
}
