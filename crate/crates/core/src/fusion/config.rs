use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the satellite-relevance map becomes the additive mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Patch mean ≥ τ → 0, else −∞.
    #[default]
    Hard,
    /// `max(ln p̄, −30)`.
    Soft,
}

/// Feature-level fusion variant (ablation axis).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Onboard features only; no satellite branch.
    None,
    /// Satellite features concatenated before the head, no attention.
    Concat,
    /// Unmasked cross-attention.
    Attention,
    /// Cross-attention under the distance + segmentation mask.
    #[default]
    MaskedAttention,
}

impl FusionMode {
    pub fn uses_satellite(self) -> bool {
        self != FusionMode::None
    }

    pub fn uses_attention(self) -> bool {
        matches!(self, FusionMode::Attention | FusionMode::MaskedAttention)
    }
}

macro_rules! keyword_enum {
    ($ty:ty, $($name:literal => $variant:expr),+ $(,)?) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(Error::Config(format!(
                        "unknown {} value {other:?} (expected one of: {})",
                        stringify!($ty),
                        [$($name),+].join(", ")
                    ))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let name = match *self {
                    $(v if v == $variant => $name,)+
                    _ => unreachable!(),
                };
                f.write_str(name)
            }
        }
    };
}

keyword_enum!(MaskMode, "hard" => MaskMode::Hard, "soft" => MaskMode::Soft);
keyword_enum!(
    FusionMode,
    "none" => FusionMode::None,
    "concat" => FusionMode::Concat,
    "attention" => FusionMode::Attention,
    "masked_attention" => FusionMode::MaskedAttention,
);

/// Architecture and ablation switches for the whole fusion stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// BEV grid rows (lateral axis).
    pub height: usize,
    /// BEV grid columns (longitudinal axis).
    pub width: usize,
    /// Feature channels `C` of both BEV and satellite features.
    pub channels: usize,
    /// Meters spanned by the grid: (lateral, longitudinal).
    pub extent_m: (f64, f64),
    pub patch: usize,
    /// Token width `C_h`.
    pub c_h: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Distance-mask radius in meters.
    pub d_meters: f64,
    pub mask_mode: MaskMode,
    /// Relevance threshold τ for the hard mask.
    pub seg_threshold: f64,
    /// Divide attention scores by √(head width).
    pub scale_scores: bool,
    /// Add the unaligned satellite features back after warping.
    pub sat_residual: bool,
    pub offset_hidden: usize,
    /// 3×3 layers in the offset predictor.
    pub offset_layers: usize,
    /// Bound on predicted offsets in cells; `None` leaves them unbounded.
    pub offset_limit: Option<f64>,
    pub head_hidden: usize,
    pub enc_hidden: usize,
    pub classes: usize,
    pub fusion: FusionMode,
    pub bev_align: bool,
}

impl FusionConfig {
    /// Full-size shapes: 100×200×64 features, 5×5 patches, `C_h = 256`.
    pub fn full_scale() -> Self {
        Self {
            height: 100,
            width: 200,
            channels: 64,
            extent_m: (30.0, 60.0),
            patch: 5,
            c_h: 256,
            heads: 1,
            blocks: 3,
            d_meters: 5.0,
            mask_mode: MaskMode::Hard,
            seg_threshold: 0.5,
            scale_scores: true,
            sat_residual: true,
            offset_hidden: 64,
            offset_layers: 2,
            offset_limit: None,
            head_hidden: 64,
            enc_hidden: 32,
            classes: 4,
            fusion: FusionMode::MaskedAttention,
            bev_align: true,
        }
    }

    /// Desk-scale shapes used by the synthetic benchmark: a 20×40 grid at
    /// 1.5 m cells, 2×2 patches (3 m pitch) and `C_h = 32`.
    pub fn desk_scale() -> Self {
        Self {
            height: 20,
            width: 40,
            channels: 8,
            patch: 2,
            c_h: 32,
            offset_hidden: 16,
            head_hidden: 16,
            enc_hidden: 8,
            ..Self::full_scale()
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn tokens(&self) -> usize {
        let (hg, wg) = self.grid();
        hg * wg
    }

    pub fn patch_config(&self) -> PatchConfig {
        PatchConfig {
            patch: (self.patch, self.patch),
            grid: self.grid(),
            model_dim: self.c_h,
            channels: self.channels,
            extent_m: self.extent_m,
        }
    }

    /// Input channels of the task head.
    pub fn head_in(&self) -> usize {
        if self.fusion.uses_satellite() {
            2 * self.channels
        } else {
            self.channels
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.height == 0 || self.width == 0 || self.channels == 0 || self.classes < 2 {
            return bad(format!(
                "grid {}x{}x{} with {} classes is empty",
                self.height, self.width, self.channels, self.classes
            ));
        }
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return bad(format!(
                "patch {} does not divide the {}x{} grid",
                self.patch, self.height, self.width
            ));
        }
        if self.heads == 0 || self.c_h % self.heads != 0 {
            return bad(format!("c_h = {} is not divisible by {} heads", self.c_h, self.heads));
        }
        if self.blocks == 0 {
            return bad("at least one attention block is required".into());
        }
        if !(self.d_meters >= 0.0) {
            return bad(format!("d_meters must be ≥ 0, got {}", self.d_meters));
        }
        if !(self.extent_m.0 > 0.0 && self.extent_m.1 > 0.0) {
            return bad(format!("extent {:?} must be positive", self.extent_m));
        }
        if self.offset_layers == 0 {
            return bad("the offset predictor needs at least one 3x3 layer".into());
        }
        if self.offset_limit.is_some_and(|l| !(l > 0.0)) {
            return bad(format!("offset_limit must be positive, got {:?}", self.offset_limit));
        }
        if self.offset_hidden == 0 || self.head_hidden == 0 || self.enc_hidden == 0 {
            return bad("hidden widths must be positive".into());
        }
        Ok(())
    }
}

/// Patch layout of the feature-level fusion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchConfig {
    /// Patch size in cells (rows, cols).
    pub patch: (usize, usize),
    /// Patch grid (rows, cols); `N = M = rows · cols`.
    pub grid: (usize, usize),
    /// `C_h`.
    pub model_dim: usize,
    /// `C`.
    pub channels: usize,
    /// Meters covered by the full grid: (lateral, longitudinal).
    pub extent_m: (f64, f64),
}

impl PatchConfig {
    pub fn tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn feature_dims(&self) -> (usize, usize) {
        (self.grid.0 * self.patch.0, self.grid.1 * self.patch.1)
    }

    /// Flattened patch length `C · ph · pw`.
    pub fn patch_len(&self) -> usize {
        self.channels * self.patch.0 * self.patch.1
    }

    /// Meters between neighbouring patch centres: (rows, cols).
    pub fn pitch_m(&self) -> (f64, f64) {
        (
            self.extent_m.0 / self.grid.0 as f64,
            self.extent_m.1 / self.grid.1 as f64,
        )
    }

    /// Patch centre of token `t` in meters from the grid corner.
    pub fn token_center_m(&self, t: usize) -> (f64, f64) {
        let (py, px) = self.pitch_m();
        let (gy, gx) = (t / self.grid.1, t % self.grid.1);
        ((gy as f64 + 0.5) * py, (gx as f64 + 0.5) * px)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_token_counts() {
        let cfg = FusionConfig::full_scale();
        cfg.validate().unwrap();
        assert_eq!(cfg.grid(), (20, 40));
        assert_eq!(cfg.tokens(), 800);
        let pc = cfg.patch_config();
        assert_eq!(pc.pitch_m(), (1.5, 1.5));
        assert_eq!(pc.patch_len(), 64 * 25);
    }

    #[test]
    fn token_count_follows_any_divisible_grid() {
        for (h, w, p) in [(10, 20, 5), (12, 18, 3), (8, 8, 1), (20, 40, 2)] {
            let cfg = FusionConfig {
                height: h,
                width: w,
                patch: p,
                ..FusionConfig::desk_scale()
            };
            cfg.validate().unwrap();
            assert_eq!(cfg.tokens(), (h / p) * (w / p));
        }
    }

    #[test]
    fn keyword_parsing() {
        assert_eq!("soft".parse::<MaskMode>().unwrap(), MaskMode::Soft);
        assert_eq!(
            "masked_attention".parse::<FusionMode>().unwrap(),
            FusionMode::MaskedAttention
        );
        assert_eq!(FusionMode::Concat.to_string(), "concat");
        assert!("sideways".parse::<FusionMode>().is_err());
    }

    #[test]
    fn rejects_indivisible_patch() {
        let cfg = FusionConfig {
            patch: 3,
            ..FusionConfig::desk_scale()
        };
        assert!(cfg.validate().is_err());
    }
}
