use rand::Rng;

use super::graph::{normalize, ConvGeom, Graph, Var};
use super::params::{fan_in_uniform, he_normal, ParamId, ParamStore};
use super::real::{matmul, Real};
use super::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
    /// Left singular vector estimate when spectral normalization is on.
    pub spectral_u: Option<ParamId>,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
    pub spectral: bool,
    /// Scale applied to the He-normal initialization; 0 zero-initializes.
    pub init_gain: f64,
}

impl ConvSpec {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Self { in_ch, out_ch, kernel, stride: 1, pad: kernel / 2, bias: true, spectral: false, init_gain: 1.0 }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn spectral(mut self) -> Self {
        self.spectral = true;
        self
    }

    pub fn init_gain(mut self, gain: f64) -> Self {
        self.init_gain = gain;
        self
    }
}

impl Conv2d {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, spec: ConvSpec, rng: &mut impl Rng) -> Self {
        let shape = [spec.out_ch, spec.in_ch, spec.kernel, spec.kernel];
        let fan_in = spec.in_ch * spec.kernel * spec.kernel;
        let w =
            if spec.init_gain == 0.0 { Tensor::zeros(&shape) } else { he_normal(&shape, fan_in, spec.init_gain, rng) };
        let weight = store.add(format!("{name}.weight"), w);
        let bias = spec.bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[spec.out_ch])));
        let spectral_u = spec.spectral.then(|| {
            let mut u: Vec<T> = (0..spec.out_ch).map(|_| T::lit(rng.random_range(-1.0..1.0))).collect();
            normalize(&mut u);
            store.add_buffer(format!("{name}.sn_u"), Tensor::new(&[spec.out_ch], u))
        });
        Self { weight, bias, geom: ConvGeom { stride: spec.stride, pad: spec.pad }, spectral_u }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let mut w = g.param(store, self.weight);
        if let Some(u) = self.spectral_u {
            w = g.spectral_norm(w, store.get(u).data());
        }
        let b = self.bias.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.geom)
    }

    /// One power-iteration step refining the spectral-norm vector.
    pub fn power_iterate<T: Real>(&self, store: &mut ParamStore<T>) {
        let Some(uid) = self.spectral_u else { return };
        let w = store.get(self.weight);
        let rows = w.dim(0);
        let cols = w.len() / rows;
        let u = store.get(uid).data().to_vec();
        let mut v = vec![T::zero(); cols];
        matmul(w.data(), true, &u, false, &mut v, cols, rows, 1, false);
        normalize(&mut v);
        let mut nu = vec![T::zero(); rows];
        matmul(w.data(), false, &v, false, &mut nu, rows, cols, 1, false);
        normalize(&mut nu);
        store.get_mut(uid).data_mut().copy_from_slice(&nu);
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, din: usize, dout: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), fan_in_uniform(&[dout, din], din, rng));
        let bias = store.add(format!("{name}.bias"), fan_in_uniform(&[dout], din, rng));
        Self { weight, bias }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, Some(b))
    }
}

/// Basic residual block: `relu(x' + conv(relu(conv(x))))`, where `x'` is `x`
/// or a strided 1×1 projection when the shape changes.
#[derive(Clone, Debug)]
pub struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
    slope: Option<f64>,
}

impl ResBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let conv1 = Conv2d::new(store, &format!("{name}.conv1"), ConvSpec::new(in_ch, out_ch, 3).stride(stride), rng);
        // Down-weighted second conv keeps the residual sum's variance near the input's.
        let conv2 = Conv2d::new(store, &format!("{name}.conv2"), ConvSpec::new(out_ch, out_ch, 3).init_gain(0.5), rng);
        let shortcut = (in_ch != out_ch || stride != 1).then(|| {
            Conv2d::new(store, &format!("{name}.proj"), ConvSpec::new(in_ch, out_ch, 1).stride(stride).no_bias(), rng)
        });
        Self { conv1, conv2, shortcut, slope: None }
    }

    /// Uses leaky ReLU activations with the given negative slope.
    pub fn leaky(mut self, slope: f64) -> Self {
        self.slope = Some(slope);
        self
    }

    fn act<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Var {
        match self.slope {
            Some(s) => g.leaky_relu(x, T::lit(s)),
            None => g.relu(x),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let h = self.conv1.forward(g, store, x);
        let h = self.act(g, h);
        let h = self.conv2.forward(g, store, h);
        let skip = match &self.shortcut {
            Some(p) => p.forward(g, store, x),
            None => x,
        };
        let sum = g.add(h, skip);
        self.act(g, sum)
    }
}
