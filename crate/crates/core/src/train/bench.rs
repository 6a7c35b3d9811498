use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{evaluate, train, EvalReport, LrSchedule, TrainConfig};
use crate::error::Result;
use crate::fusion::{FusionConfig, FusionMode, FusionModel};
use crate::synth::{BevRange, SceneSample};

/// One row of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub name: &'static str,
    pub fusion: FusionMode,
    pub bev_align: bool,
}

pub const ABLATION: [Variant; 4] = [
    Variant {
        name: "none",
        fusion: FusionMode::None,
        bev_align: false,
    },
    Variant {
        name: "concat",
        fusion: FusionMode::Concat,
        bev_align: true,
    },
    Variant {
        name: "masked_attention",
        fusion: FusionMode::MaskedAttention,
        bev_align: true,
    },
    Variant {
        name: "masked_attention/no_align",
        fusion: FusionMode::MaskedAttention,
        bev_align: false,
    },
];

/// Optimiser settings for the 500/100 benchmark split.
pub fn benchmark_train_config() -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        steps: 3000,
        class_weights: vec![0.5, 2.0, 3.0, 1.5],
        schedule: LrSchedule::Cosine,
        log_every: 500,
        val_every: 0,
        ..TrainConfig::default()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantResult {
    pub name: String,
    pub report: EvalReport,
    pub train_seconds: f64,
    pub final_loss: f64,
}

impl VariantResult {
    pub fn miou(&self) -> f64 {
        self.report.overall.miou
    }

    /// `mIoU(120×60) / mIoU(60×30)`.
    pub fn range_ratio(&self) -> Option<f64> {
        Some(self.report.range_miou(BevRange::R120x60)? / self.report.range_miou(BevRange::R60x30)?)
    }
}

/// Trains a fresh model for `variant` on `train` and evaluates it on `val`.
pub fn run_variant(
    base: &FusionConfig,
    variant: &Variant,
    cfg: &TrainConfig,
    train_set: &[SceneSample],
    val: &[SceneSample],
) -> Result<VariantResult> {
    let mut mcfg = base.clone();
    mcfg.fusion = variant.fusion;
    mcfg.bev_align = variant.bev_align;
    let mut model = FusionModel::<f32>::new(mcfg, cfg.seed)?;
    let start = Instant::now();
    let outcome = train(&mut model, cfg, train_set, val, |_| {})?;
    let train_seconds = start.elapsed().as_secs_f64();
    Ok(VariantResult {
        name: variant.name.to_string(),
        report: evaluate(&model, val)?,
        train_seconds,
        final_loss: outcome.final_loss,
    })
}
