//! Minimal CPU autograd engine: dense tensors, a per-step tape, the handful
//! of layers the generator, discriminators and aligner need, and Adam.

mod graph;
mod layers;
mod optim;
mod params;
mod real;
mod tensor;

pub use graph::{nearest_code, ConvGeom, Gradients, Graph, Var, VqOutput};
pub use layers::{Conv2d, ConvSpec, Linear, ResBlock};
pub use optim::Adam;
pub use params::{fan_in_uniform, he_normal, ParamId, ParamRecord, ParamStore};
pub use real::{matmul, Real};
pub use tensor::Tensor;
