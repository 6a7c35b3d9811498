//! BEV-level fusion: a small convolutional offset predictor, the bilinear
//! warp of the satellite features, residual add, channel concatenation with
//! the refined BEV features and the segmentation head.

use rand::Rng;

use super::{ConvIds, FusionConfig};
use crate::error::{dim_err, Result};
use crate::params::ParamStore;
use crate::tensor::{ops, Graph, Scalar, Tensor, Var};

/// Per-cell displacement `[H×W×2]` in grid cells: `(Δrow, Δcol)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetField<T: Scalar = f32> {
    pub delta: Tensor<T>,
}

impl<T: Scalar> OffsetField<T> {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            delta: Tensor::zeros(&[h, w, 2]),
        }
    }

    pub fn constant(h: usize, w: usize, d_row: T, d_col: T) -> Self {
        Self {
            delta: Tensor::from_fn(&[h, w, 2], |i| if i % 2 == 0 { d_row } else { d_col }),
        }
    }

    pub fn at(&self, row: usize, col: usize) -> (T, T) {
        (self.delta.at(&[row, col, 0]), self.delta.at(&[row, col, 1]))
    }
}

#[derive(Debug, Clone)]
pub struct OffsetParams {
    /// 3×3 convolutions, each followed by ReLU.
    pub convs: Vec<ConvIds>,
    /// Zero-initialised so a fresh model warps by the identity.
    pub out: ConvIds,
    /// Soft bound `L` in cells: `Δ = L·tanh(raw/L)`.
    pub limit: Option<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadParams {
    pub conv1: ConvIds,
    pub conv2: ConvIds,
    pub out: ConvIds,
}

#[derive(Debug, Clone)]
pub struct BevFusionParams {
    pub offset: OffsetParams,
    pub head: HeadParams,
}

impl OffsetParams {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, channels: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self::with_depth(store, channels, hidden, 2, rng)
    }

    /// `layers` 3×3 convolutions before the output layer.
    pub fn with_depth<T: Scalar>(
        store: &mut ParamStore<T>,
        channels: usize,
        hidden: usize,
        layers: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let convs = (0..layers)
            .map(|i| {
                let c_in = if i == 0 { 2 * channels } else { hidden };
                ConvIds::init(store, &format!("bev.offset{}", i + 1), c_in, hidden, 3, rng)
            })
            .collect();
        Self {
            convs,
            out: ConvIds::zeros(store, "bev.offset_out", hidden, 2, 1),
            limit: None,
        }
    }

    pub fn with_limit(self, limit: Option<f64>) -> Self {
        Self { limit, ..self }
    }
}

impl HeadParams {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        c_in: usize,
        hidden: usize,
        classes: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            conv1: ConvIds::init(store, "head.conv1", c_in, hidden, 3, rng),
            conv2: ConvIds::init(store, "head.conv2", hidden, hidden, 3, rng),
            out: ConvIds::init(store, "head.out", hidden, classes, 1, rng),
        }
    }
}

impl BevFusionParams {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, cfg: &FusionConfig, rng: &mut impl Rng) -> Self {
        Self {
            offset: OffsetParams::with_depth(store, cfg.channels, cfg.offset_hidden, cfg.offset_layers, rng)
                .with_limit(cfg.offset_limit),
            head: HeadParams::init(store, cfg.head_in(), cfg.head_hidden, cfg.classes, rng),
        }
    }
}

/// Channel-concat `[2C×H×W]` → (3×3 → ReLU)ⁿ → 1×1 → `Δ[H×W×2]`, squashed
/// into `(−L, L)` when a limit is set.
pub fn predict_offsets<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    p: &OffsetParams,
    f_ref_chw: Var,
    f_sat_chw: Var,
) -> Result<Var> {
    if g.shape(f_ref_chw) != g.shape(f_sat_chw) {
        return Err(dim_err!(
            "offset predictor inputs differ: {:?} vs {:?}",
            g.shape(f_ref_chw),
            g.shape(f_sat_chw)
        ));
    }
    let mut x = g.concat_first(f_ref_chw, f_sat_chw)?;
    for conv in &p.convs {
        x = conv.forward(g, store, x)?;
        x = g.relu(x);
    }
    let d = p.out.forward(g, store, x)?;
    let d = match p.limit {
        Some(l) => {
            let t = g.scale(d, T::of(1.0 / l));
            let t = g.tanh(t);
            g.scale(t, T::of(l))
        }
        None => d,
    };
    g.chw_to_hwc(d)
}

/// Task head: `[C_in×H×W]` → `K` logit maps `[K×H×W]`.
pub fn task_head<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, p: &HeadParams, f_fus_chw: Var) -> Result<Var> {
    let x = p.conv1.forward(g, store, f_fus_chw)?;
    let x = g.silu(x);
    let x = p.conv2.forward(g, store, x)?;
    let x = g.silu(x);
    p.out.forward(g, store, x)
}

pub struct BevFusionOutput {
    /// `[F̃_sat ‖ F_ref]` as `[2C×H×W]`.
    pub fused_chw: Var,
    /// `F̃_sat` in `[H×W×C]`.
    pub aligned: Var,
    /// Present when alignment is enabled.
    pub delta: Option<Var>,
}

/// Aligns `f_sat` to `f_ref` and concatenates the two along channels.
///
/// Both streams are passed in `[H×W×C]` and `[C×H×W]` layouts.
#[allow(clippy::too_many_arguments)]
pub fn bev_level_fuse<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    p: &OffsetParams,
    f_ref_chw: Var,
    f_sat: Var,
    f_sat_chw: Var,
    align: bool,
    sat_residual: bool,
) -> Result<BevFusionOutput> {
    let (aligned, aligned_chw, delta) = if align {
        let delta = predict_offsets(g, store, p, f_ref_chw, f_sat_chw)?;
        let warped = g.warp(f_sat, delta)?;
        let aligned = if sat_residual { g.add(warped, f_sat)? } else { warped };
        let aligned_chw = g.hwc_to_chw(aligned)?;
        (aligned, aligned_chw, Some(delta))
    } else {
        (f_sat, f_sat_chw, None)
    };
    let fused_chw = g.concat_first(aligned_chw, f_ref_chw)?;
    Ok(BevFusionOutput {
        fused_chw,
        aligned,
        delta,
    })
}

/// Tensor-level warp by an offset field.
pub fn warp<T: Scalar>(f_sat: &Tensor<T>, field: &OffsetField<T>) -> Result<Tensor<T>> {
    ops::warp(f_sat, &field.delta)
}

/// Tensor-level BEV fusion at inference: returns `[H×W×2C]`.
pub fn bev_level_fuse_tensors<T: Scalar>(
    store: &ParamStore<T>,
    p: &OffsetParams,
    f_ref: &Tensor<T>,
    f_sat: &Tensor<T>,
    sat_residual: bool,
) -> Result<(Tensor<T>, OffsetField<T>)> {
    let mut g = Graph::inference();
    let fr = g.constant(f_ref.clone());
    let fs = g.constant(f_sat.clone());
    let fr_chw = g.hwc_to_chw(fr)?;
    let fs_chw = g.hwc_to_chw(fs)?;
    let out = bev_level_fuse(&mut g, store, p, fr_chw, fs, fs_chw, true, sat_residual)?;
    let fused = g.chw_to_hwc(out.fused_chw)?;
    let delta = g.value(out.delta.expect("alignment enabled")).clone();
    Ok((g.take(fused), OffsetField { delta }))
}
