//! Named parameter tensors with gradient buffers, and TSR1 checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{tsr, Gradients, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone)]
struct Param<T: Scalar> {
    name: String,
    value: Tensor<T>,
    grad: Tensor<T>,
    trainable: bool,
}

/// Ordered collection of learnable tensors.
///
/// Gradients accumulate with `+=` until [`ParamStore::zero_grad`].
#[derive(Clone)]
pub struct ParamStore<T: Scalar = f32> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self { params: Vec::new() }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    params: Vec<CheckpointEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name,
            value,
            grad,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    /// Uniform in `±1/√fan_in`.
    pub fn add_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| T::of(rng.gen_range(-bound..bound)));
        self.add(name, t)
    }

    pub fn add_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut impl Rng) -> ParamId {
        let normal = Normal::new(0.0, std).expect("valid std");
        let t = Tensor::from_fn(shape, |_| T::of(normal.sample(rng)));
        self.add(name, t)
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].grad
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    /// Freezes every parameter, then unfreezes those whose name starts with
    /// one of `prefixes`.
    pub fn train_only(&mut self, prefixes: &[&str]) {
        for p in &mut self.params {
            p.trainable = prefixes.iter().any(|pre| p.name.starts_with(pre));
        }
    }

    pub fn set_all_trainable(&mut self) {
        self.params.iter_mut().for_each(|p| p.trainable = true);
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad.fill(T::zero()));
    }

    pub fn accumulate(&mut self, grads: &Gradients<T>) -> Result<()> {
        for (id, g) in grads.params() {
            self.params[id.0].grad.add_assign(g)?;
        }
        Ok(())
    }

    pub fn accumulate_tensor(&mut self, id: ParamId, g: &Tensor<T>) -> Result<()> {
        self.params[id.0].grad.add_assign(g)
    }

    /// L2 norm of all trainable gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .flat_map(|p| p.grad.data())
            .map(|g| g.as_f64() * g.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, s: T) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
    }

    /// Same parameters in another precision; gradients are reset.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: Tensor::zeros(p.value.shape()),
                    trainable: p.trainable,
                })
                .collect(),
        }
    }

    /// FNV-1a over names, shapes and value bits; identical stores hash equal.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for p in &self.params {
            feed(p.name.as_bytes());
            for &d in p.value.shape() {
                feed(&d.to_le_bytes());
            }
            let mut buf = Vec::with_capacity(p.value.len() * T::BYTES);
            p.value.data().iter().for_each(|v| v.write_le(&mut buf));
            feed(&buf);
        }
        h
    }

    /// Writes one TSR1 file per parameter plus `params.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.params.len());
        for (i, p) in self.params.iter().enumerate() {
            let file = format!("{i:03}_{}.tsr", p.name.replace(['/', '.'], "_"));
            tsr::write(dir.join(&file), &p.value)?;
            entries.push(CheckpointEntry {
                name: p.name.clone(),
                file,
                shape: p.value.shape().to_vec(),
            });
        }
        let manifest = CheckpointManifest {
            format: "TSR1".into(),
            params: entries,
        };
        std::fs::write(dir.join("params.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    /// Loads values saved by [`ParamStore::save`] into this store. Every
    /// parameter must be present with a matching shape.
    pub fn load_into(&mut self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let manifest: CheckpointManifest = serde_json::from_slice(&std::fs::read(dir.join("params.json"))?)
            .map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
        let by_name: BTreeMap<&str, &CheckpointEntry> = manifest.params.iter().map(|e| (e.name.as_str(), e)).collect();
        for p in &mut self.params {
            let entry = by_name
                .get(p.name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks parameter {}", p.name)))?;
            let t: Tensor<T> = tsr::read(dir.join(&entry.file))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?} in checkpoint, model expects {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t;
        }
        if manifest.params.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                manifest.params.len(),
                self.params.len()
            )));
        }
        Ok(())
    }
}
