use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::real::Real;
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry<T> {
    name: String,
    value: Tensor<T>,
    trainable: bool,
}

/// Named weights and buffers of one model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
}

/// Flat `f32` snapshot of a parameter, used by checkpoints.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.push(name.into(), value, true)
    }

    /// Non-trainable state such as spectral-norm singular vectors.
    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.push(name.into(), value, false)
    }

    fn push(&mut self, name: String, value: Tensor<T>, trainable: bool) -> ParamId {
        assert!(self.entries.iter().all(|e| e.name != name), "duplicate parameter {name}");
        self.entries.push(Entry { name, value, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Trainable parameters whose name starts with `prefix`.
    pub fn trainable_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.ids().filter(|&id| self.entries[id.0].trainable && self.entries[id.0].name.starts_with(prefix)).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.is_finite())
    }

    pub fn records(&self) -> Vec<ParamRecord> {
        self.entries
            .iter()
            .map(|e| ParamRecord { name: e.name.clone(), shape: e.value.shape().to_vec(), trainable: e.trainable })
            .collect()
    }

    pub fn flat_f32(&self) -> Vec<f32> {
        self.entries.iter().flat_map(|e| e.value.to_f32()).collect()
    }

    /// Overwrites all values from a flat buffer laid out like [`Self::flat_f32`].
    pub fn load_flat(&mut self, records: &[ParamRecord], flat: &[f32]) -> Result<(), String> {
        if records.len() != self.entries.len() {
            return Err(format!("expected {} tensors, found {}", self.entries.len(), records.len()));
        }
        let mut offset = 0;
        for (entry, rec) in self.entries.iter_mut().zip(records) {
            if entry.name != rec.name || entry.value.shape() != rec.shape.as_slice() {
                return Err(format!(
                    "tensor {} {:?} does not match {} {:?}",
                    rec.name,
                    rec.shape,
                    entry.name,
                    entry.value.shape()
                ));
            }
            let n = entry.value.len();
            let chunk = flat.get(offset..offset + n).ok_or("weight blob truncated")?;
            entry.value = Tensor::from_f32(&rec.shape, chunk);
            offset += n;
        }
        if offset != flat.len() {
            return Err(format!("{} trailing weights", flat.len() - offset));
        }
        Ok(())
    }

    /// Converts every tensor to another element type.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: Tensor::new(e.value.shape(), e.value.data().iter().map(|v| U::lit(v.as_f64())).collect()),
                    trainable: e.trainable,
                })
                .collect(),
        }
    }
}

/// He-normal initialization for a weight with the given fan-in.
pub fn he_normal<T: Real>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut impl Rng) -> Tensor<T> {
    let std = gain * (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| T::lit(normal.sample(rng))).collect())
}

/// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, the usual linear-layer default.
pub fn fan_in_uniform<T: Real>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect())
}
