//! The hierarchical fusion module: feature-level masked cross-attention,
//! BEV-level warp alignment, the satellite encoder and the segmentation head.

pub mod bev;
mod config;
pub mod feature;
mod model;

pub use config::{FusionConfig, FusionMode, MaskMode, PatchConfig};
pub use model::{argmax_classes, FusionModel, ModelOutputs, SceneInput};

use rand::Rng;

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Graph, Scalar, Var};

/// Parameter ids of a dense layer `x·w + b`.
#[derive(Debug, Clone, Copy)]
pub struct LinearIds {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearIds {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            w: store.add_uniform(&format!("{name}.w"), &[d_in, d_out], d_in, rng),
            b: store.add_uniform(&format!("{name}.b"), &[d_out], d_in, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.linear(x, w, b)
    }
}

/// Parameter ids of a same-padded stride-1 convolution.
#[derive(Debug, Clone, Copy)]
pub struct ConvIds {
    pub w: ParamId,
    pub b: ParamId,
    pub k: usize,
}

impl ConvIds {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = c_in * k * k;
        Self {
            w: store.add_uniform(&format!("{name}.w"), &[c_out, c_in, k, k], fan_in, rng),
            b: store.add_uniform(&format!("{name}.b"), &[c_out], fan_in, rng),
            k,
        }
    }

    pub fn zeros<T: Scalar>(store: &mut ParamStore<T>, name: &str, c_in: usize, c_out: usize, k: usize) -> Self {
        Self {
            w: store.add_zeros(&format!("{name}.w"), &[c_out, c_in, k, k]),
            b: store.add_zeros(&format!("{name}.b"), &[c_out]),
            k,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv2d(x, w, Some(b), 1, self.k / 2)
    }
}
