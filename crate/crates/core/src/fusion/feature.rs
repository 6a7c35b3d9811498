//! Feature-level fusion: patch + position embedding, the BEV–satellite
//! attention mask, and cascaded masked cross-attention blocks whose output is
//! un-patched into refined BEV features.

use rand::Rng;

use super::{ConvIds, FusionConfig, FusionMode, LinearIds, MaskMode, PatchConfig};
use crate::error::{dim_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{ops, Graph, Scalar, Tensor, Var};

/// Soft-mode floor for `ln p̄`.
pub const SOFT_MASK_FLOOR: f64 = -30.0;

/// Per-block projections and feed-forward weights.
#[derive(Debug, Clone, Copy)]
pub struct BlockParams {
    pub q: LinearIds,
    pub k: LinearIds,
    pub v: LinearIds,
    pub ffn_in: LinearIds,
    pub ffn_out: LinearIds,
}

impl BlockParams {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, name: &str, c_h: usize, rng: &mut impl Rng) -> Self {
        Self {
            q: LinearIds::init(store, &format!("{name}.q"), c_h, c_h, rng),
            k: LinearIds::init(store, &format!("{name}.k"), c_h, c_h, rng),
            v: LinearIds::init(store, &format!("{name}.v"), c_h, c_h, rng),
            ffn_in: LinearIds::init(store, &format!("{name}.ffn_in"), c_h, 2 * c_h, rng),
            ffn_out: LinearIds::init(store, &format!("{name}.ffn_out"), 2 * c_h, c_h, rng),
        }
    }
}

/// All feature-level fusion parameters.
#[derive(Debug, Clone)]
pub struct FeatureFusionParams {
    pub pe_bev: ParamId,
    pub pe_sat: ParamId,
    pub embed_bev: LinearIds,
    pub embed_sat: LinearIds,
    pub blocks: Vec<BlockParams>,
    pub unpatch: LinearIds,
    /// 1×1 convolution producing the satellite relevance logits.
    pub seg: ConvIds,
}

impl FeatureFusionParams {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, cfg: &FusionConfig, rng: &mut impl Rng) -> Self {
        let pc = cfg.patch_config();
        let (hg, wg) = pc.grid;
        let c = cfg.channels;
        let d = pc.patch_len();
        let pe_bev = store.add_normal("feature.pe_bev", &[hg, wg, c], 0.02, rng);
        let pe_sat = store.add_normal("feature.pe_sat", &[hg, wg, c], 0.02, rng);
        let embed_bev = LinearIds::init(store, "feature.embed_bev", d, cfg.c_h, rng);
        let embed_sat = LinearIds::init(store, "feature.embed_sat", d, cfg.c_h, rng);
        let blocks = (0..cfg.blocks)
            .map(|i| BlockParams::init(store, &format!("feature.block{i}"), cfg.c_h, rng))
            .collect();
        let unpatch = LinearIds::init(store, "feature.unpatch", cfg.c_h, d, rng);
        let seg_w = store.add_uniform("feature.seg.w", &[1, c, 1, 1], c, rng);
        let seg_b = store.add_zeros("feature.seg.b", &[1]);
        Self {
            pe_bev,
            pe_sat,
            embed_bev,
            embed_sat,
            blocks,
            unpatch,
            seg: ConvIds {
                w: seg_w,
                b: seg_b,
                k: 1,
            },
        }
    }
}

/// Additive pre-softmax mask `[N×M]` with entries in `{0, −∞}` (hard) or
/// finite log-relevance plus `{0, −∞}` (soft).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask<T: Scalar = f32> {
    pub values: Tensor<T>,
}

impl<T: Scalar> AttentionMask<T> {
    pub fn is_hard(&self) -> bool {
        self.values
            .data()
            .iter()
            .all(|&v| v == T::zero() || v == T::neg_infinity())
    }

    /// Number of keys a query row may attend to.
    pub fn unmasked_in_row(&self, row: usize) -> usize {
        let m = self.values.shape()[1];
        self.values.data()[row * m..(row + 1) * m]
            .iter()
            .filter(|v| v.is_finite())
            .count()
    }

    /// Keys blocked for every query.
    pub fn fully_masked_columns(&self) -> Vec<usize> {
        let (n, m) = (self.values.shape()[0], self.values.shape()[1]);
        (0..m)
            .filter(|&j| (0..n).all(|i| self.values.data()[i * m + j] == T::neg_infinity()))
            .collect()
    }
}

/// Distance gate: `0` where patch centres are within `d_meters`, `−∞`
/// elsewhere. BEV and satellite tokens share the same patch grid.
pub fn distance_mask<T: Scalar>(cfg: &PatchConfig, d_meters: f64) -> Tensor<T> {
    let n = cfg.tokens();
    let centers: Vec<(f64, f64)> = (0..n).map(|t| cfg.token_center_m(t)).collect();
    Tensor::from_fn(&[n, n], |idx| {
        let (a, b) = (centers[idx / n], centers[idx % n]);
        let dist = ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
        if dist <= d_meters {
            T::zero()
        } else {
            T::neg_infinity()
        }
    })
}

/// Maps pooled per-patch relevance to mask entries.
pub fn relevance_to_mask<T: Scalar>(pooled: &Tensor<T>, mode: MaskMode, threshold: f64) -> Tensor<T> {
    match mode {
        MaskMode::Hard => pooled.map(|p| {
            if p.as_f64() >= threshold {
                T::zero()
            } else {
                T::neg_infinity()
            }
        }),
        MaskMode::Soft => ops::log_clamped(pooled, T::of(SOFT_MASK_FLOOR)),
    }
}

/// `𝓜 = 𝓜_segᵀ + 𝓜_dis`: the segmentation vector gates key columns.
pub fn compose_mask<T: Scalar>(m_seg: &Tensor<T>, m_dis: &Tensor<T>) -> Result<AttentionMask<T>> {
    m_dis.expect_rank(2, "distance mask")?;
    let (n, m) = (m_dis.shape()[0], m_dis.shape()[1]);
    if m_seg.len() != m {
        return Err(dim_err!("segmentation mask has {} entries for {m} keys", m_seg.len()));
    }
    let values = ops::broadcast_rows(m_seg, n).zip_map(m_dis, |a, b| a + b)?;
    Ok(AttentionMask { values })
}

/// Patch embedding: add `pe` to every pixel of its patch, flatten patches
/// row-major over the patch grid, and project to `C_h`.
pub fn patch_embed<T: Scalar>(g: &mut Graph<T>, f: Var, pe: Var, w: Var, b: Var, cfg: &PatchConfig) -> Result<Var> {
    let (h, wd) = cfg.feature_dims();
    let shape = g.shape(f);
    if shape.len() != 3 || shape[0] % cfg.patch.0 != 0 || shape[1] % cfg.patch.1 != 0 {
        return Err(dim_err!(
            "features {:?} are not divisible into {:?} patches",
            shape,
            cfg.patch
        ));
    }
    if shape != [h, wd, cfg.channels] {
        return Err(dim_err!(
            "features {:?} do not match the {h}x{wd}x{} patch layout",
            shape,
            cfg.channels
        ));
    }
    let with_pe = g.add_patch_broadcast(f, pe, cfg.patch.0, cfg.patch.1)?;
    let patches = g.patchify(with_pe, cfg.patch.0, cfg.patch.1)?;
    g.linear(patches, w, b)
}

/// Satellite relevance: per-pixel logits and probabilities `[H×W]`, and the
/// per-token mask vector `[M]`.
pub struct SegmentationMask {
    pub logits: Var,
    pub prob: Var,
    pub mask_vec: Var,
}

/// 1×1 convolution + sigmoid on `f_sat[H×W×C]`, patch-mean pooled and
/// converted to mask entries.
pub fn segmentation_mask<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    seg: &ConvIds,
    f_sat: Var,
    cfg: &PatchConfig,
    mode: MaskMode,
    threshold: f64,
) -> Result<SegmentationMask> {
    let chw = g.hwc_to_chw(f_sat)?;
    segmentation_mask_chw(g, store, seg, chw, cfg, mode, threshold)
}

pub(crate) fn segmentation_mask_chw<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    seg: &ConvIds,
    f_sat_chw: Var,
    cfg: &PatchConfig,
    mode: MaskMode,
    threshold: f64,
) -> Result<SegmentationMask> {
    let (h, w) = (g.shape(f_sat_chw)[1], g.shape(f_sat_chw)[2]);
    let logits = seg.forward(g, store, f_sat_chw)?;
    let logits = g.reshape(logits, &[h, w])?;
    let prob = g.sigmoid(logits);
    let pooled = g.patch_mean(prob, cfg.patch.0, cfg.patch.1)?;
    let mask_vec = match mode {
        MaskMode::Hard => {
            let v = relevance_to_mask(g.value(pooled), mode, threshold);
            g.constant(v)
        }
        MaskMode::Soft => g.log_clamped(pooled, T::of(SOFT_MASK_FLOOR)),
    };
    Ok(SegmentationMask { logits, prob, mask_vec })
}

/// Attention settings shared by all blocks.
#[derive(Debug, Clone, Copy)]
pub struct AttentionSettings {
    pub heads: usize,
    pub scale_scores: bool,
}

pub struct BlockOutput {
    /// `Q_out = FFN(X) + X`.
    pub out: Var,
    /// `X = softmax(𝓜 + QKᵀ)V + Q`.
    pub x: Var,
    /// Attention weights per head, each `[N×M]`.
    pub weights: Vec<Var>,
}

/// One masked cross-attention block over query tokens `[N×C_h]` and
/// satellite tokens `[M×C_h]`.
#[allow(clippy::too_many_arguments)]
pub fn masked_cross_attention_block<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    block: &BlockParams,
    tokens: Var,
    sat: Var,
    mask: Var,
    settings: AttentionSettings,
    index: usize,
) -> Result<BlockOutput> {
    let q = block.q.forward(g, store, tokens)?;
    let k = block.k.forward(g, store, sat)?;
    let v = block.v.forward(g, store, sat)?;
    let (n, c_h) = (g.shape(q)[0], g.shape(q)[1]);
    let m = g.shape(k)[0];
    if g.shape(mask) != [n, m] {
        return Err(dim_err!(
            "mask {:?} does not match {n} queries x {m} keys",
            g.shape(mask)
        ));
    }
    let heads = settings.heads;
    if heads == 0 || c_h % heads != 0 {
        return Err(dim_err!("{c_h} channels cannot be split into {heads} heads"));
    }
    let dh = c_h / heads;
    let scale = if settings.scale_scores {
        T::of(1.0 / (dh as f64).sqrt())
    } else {
        T::one()
    };
    let mut weights = Vec::with_capacity(heads);
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh)?,
                g.slice_cols(k, h * dh, dh)?,
                g.slice_cols(v, h * dh, dh)?,
            )
        };
        let scores = g.matmul_nt(qh, kh)?;
        let scores = if scale != T::one() {
            g.scale(scores, scale)
        } else {
            scores
        };
        let masked = g.add(scores, mask)?;
        let attn = g.softmax_lastdim(masked);
        weights.push(attn);
        head_outs.push(g.matmul(attn, vh)?);
    }
    let attended = if heads == 1 {
        head_outs[0]
    } else {
        g.concat_cols(&head_outs)?
    };
    let x = g.add(attended, q)?;
    check_finite(g, x, index, "attention output")?;
    let hidden = block.ffn_in.forward(g, store, x)?;
    let hidden = g.silu(hidden);
    let ffn = block.ffn_out.forward(g, store, hidden)?;
    let out = g.add(ffn, x)?;
    check_finite(g, out, index, "feed-forward output")?;
    Ok(BlockOutput { out, x, weights })
}

fn check_finite<T: Scalar>(g: &Graph<T>, v: Var, index: usize, what: &str) -> Result<()> {
    if g.value(v).all_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite {what} in attention block {index}")))
    }
}

pub struct FeatureFusionOutput {
    /// Refined BEV features `[H×W×C]`.
    pub f_ref: Var,
    /// Present in masked-attention mode.
    pub seg: Option<SegmentationMask>,
    pub mask: Var,
    pub blocks: Vec<BlockOutput>,
}

/// Patch-embeds both streams, builds one mask, runs the cascaded blocks with
/// keys/values fixed from the satellite tokens, and un-patches the result.
///
/// `f_sat_chw` is the same satellite feature map in `[C×H×W]` layout, passed
/// to avoid re-transposing for the segmentation convolution.
pub fn feature_level_fuse<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &FeatureFusionParams,
    f_bev: Var,
    f_sat: Var,
    f_sat_chw: Var,
    cfg: &FusionConfig,
) -> Result<FeatureFusionOutput> {
    let pc = cfg.patch_config();
    if g.shape(f_bev) != g.shape(f_sat) {
        return Err(dim_err!(
            "BEV features {:?} and satellite features {:?} differ",
            g.shape(f_bev),
            g.shape(f_sat)
        ));
    }
    let pe_bev = g.param(store, params.pe_bev);
    let pe_sat = g.param(store, params.pe_sat);
    let (wb, bb) = (g.param(store, params.embed_bev.w), g.param(store, params.embed_bev.b));
    let (ws, bs) = (g.param(store, params.embed_sat.w), g.param(store, params.embed_sat.b));
    let q_tokens = patch_embed(g, f_bev, pe_bev, wb, bb, &pc)?;
    let s_tokens = patch_embed(g, f_sat, pe_sat, ws, bs, &pc)?;

    let n = pc.tokens();
    let (mask, seg) = match cfg.fusion {
        FusionMode::MaskedAttention => {
            let seg = segmentation_mask_chw(g, store, &params.seg, f_sat_chw, &pc, cfg.mask_mode, cfg.seg_threshold)?;
            let m_dis = g.constant(distance_mask::<T>(&pc, cfg.d_meters));
            let rows = g.broadcast_rows(seg.mask_vec, n);
            (g.add(rows, m_dis)?, Some(seg))
        }
        _ => (g.constant(Tensor::zeros(&[n, n])), None),
    };

    let settings = AttentionSettings {
        heads: cfg.heads,
        scale_scores: cfg.scale_scores,
    };
    let mut tokens = q_tokens;
    let mut blocks = Vec::with_capacity(params.blocks.len());
    for (i, bp) in params.blocks.iter().enumerate() {
        let out = masked_cross_attention_block(g, store, bp, tokens, s_tokens, mask, settings, i)?;
        tokens = out.out;
        blocks.push(out);
    }
    let expanded = params.unpatch.forward(g, store, tokens)?;
    let (h, w) = pc.feature_dims();
    let f_ref = g.unpatchify(expanded, h, w, pc.channels, pc.patch.0, pc.patch.1)?;
    Ok(FeatureFusionOutput {
        f_ref,
        seg,
        mask,
        blocks,
    })
}
