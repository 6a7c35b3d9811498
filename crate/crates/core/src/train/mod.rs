//! Optimisation loop for the fusion stack on synthetic scenes, plus
//! evaluation grouped by BEV range and scenario tag.

mod bench;
mod offset;
mod optim;

pub use bench::{benchmark_train_config, run_variant, Variant, VariantResult, ABLATION};
pub use offset::{recover_offset, OffsetRecoveryConfig, OffsetRecoveryReport};
pub use optim::Adam;

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{self, KeyValue};
use crate::error::{Error, Result};
use crate::fusion::{argmax_classes, FusionModel};
use crate::metrics::{Class, IoUAccumulator, IoUReport};
use crate::params::ParamId;
use crate::synth::{BevRange, SceneSample};
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

impl FromStr for LrSchedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            _ => Err(Error::Config(format!("unknown lr schedule {s:?} (constant | cosine)"))),
        }
    }
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
        })
    }
}

/// Optimiser settings and loss weights. Architecture and ablation switches
/// live in [`FusionConfig`](crate::fusion::FusionConfig).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    /// Weight of the segmentation cross-entropy.
    pub ce_weight: f64,
    /// Weight of the satellite relevance BCE (masked attention only).
    pub aux_weight: f64,
    /// Weight of the L1 offset supervision against the known registration
    /// error; 0 disables it.
    pub align_weight: f64,
    /// Per-class cross-entropy weights, background first.
    pub class_weights: Vec<f64>,
    pub schedule: LrSchedule,
    pub warmup: usize,
    /// Gradient L2-norm ceiling.
    pub grad_clip: Option<f64>,
    pub log_every: usize,
    /// Validation interval in steps; 0 disables periodic validation.
    pub val_every: usize,
    /// Validate on at most this many samples.
    pub val_limit: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            steps: 10_000,
            batch: 4,
            seed: 0,
            ce_weight: 1.0,
            aux_weight: 0.5,
            align_weight: 0.0,
            class_weights: vec![1.0; Class::COUNT],
            schedule: LrSchedule::Constant,
            warmup: 0,
            grad_clip: Some(5.0),
            log_every: 50,
            val_every: 50,
            val_limit: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be finite and non-negative, got {}",
                self.lr
            )));
        }
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::Config("steps and batch must be positive".into()));
        }
        if self.class_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config(format!("bad class weights {:?}", self.class_weights)));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip must be positive, got {c}")));
            }
        }
        Ok(())
    }

    /// Learning rate at `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = if self.warmup > 0 && step < self.warmup {
            (step + 1) as f64 / self.warmup as f64
        } else {
            1.0
        };
        let decay = match self.schedule {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => 0.5 * (1.0 + (PI * step as f64 / self.steps as f64).cos()),
        };
        self.lr * warm * decay
    }
}

impl KeyValue for TrainConfig {
    fn set_key(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "lr" => self.lr = config::value(key, v)?,
            "steps" => self.steps = config::value(key, v)?,
            "batch" => self.batch = config::value(key, v)?,
            "seed" => self.seed = config::value(key, v)?,
            "ce_weight" => self.ce_weight = config::value(key, v)?,
            "aux_weight" => self.aux_weight = config::value(key, v)?,
            "align_weight" => self.align_weight = config::value(key, v)?,
            "class_weights" => {
                let w = v
                    .split(',')
                    .map(|x| config::value(key, x.trim()))
                    .collect::<Result<Vec<f64>>>()?;
                if w.len() != Class::COUNT {
                    return Err(Error::Config(format!(
                        "class_weights needs {} values, got {}",
                        Class::COUNT,
                        w.len()
                    )));
                }
                self.class_weights = w;
            }
            "schedule" => self.schedule = v.parse()?,
            "warmup" => self.warmup = config::value(key, v)?,
            "grad_clip" => {
                self.grad_clip = match v {
                    "off" | "none" => None,
                    _ => Some(config::value(key, v)?),
                }
            }
            "log_every" => self.log_every = config::value(key, v)?,
            "val_every" => self.val_every = config::value(key, v)?,
            "val_limit" => {
                self.val_limit = match v {
                    "all" | "none" => None,
                    _ => Some(config::value(key, v)?),
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Loss terms of one sample or the mean over a batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub ce: f64,
    pub aux: f64,
    pub align: f64,
}

impl LossParts {
    fn add(&mut self, o: &LossParts) {
        self.total += o.total;
        self.ce += o.ce;
        self.aux += o.aux;
        self.align += o.align;
    }

    fn scale(&mut self, s: f64) {
        self.total *= s;
        self.ce *= s;
        self.aux *= s;
        self.align *= s;
    }
}

/// One line of the JSON-lines metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: LossParts,
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_miou: Option<f64>,
}

impl LogRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("log record serialises")
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub steps: usize,
    pub log: Vec<LogRecord>,
    /// Mean batch loss over the last logging window.
    pub final_loss: f64,
}

/// Forward and backward pass of one sample; returns its loss terms and the
/// parameter gradients ordered by id.
pub fn sample_gradients(
    model: &FusionModel<f32>,
    sample: &SceneSample,
    cfg: &TrainConfig,
) -> Result<(LossParts, Vec<(ParamId, Tensor<f32>)>)> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, &sample.input())?;
    let weights: Vec<f32> = cfg.class_weights.iter().map(|&w| w as f32).collect();
    let ce = g.cross_entropy(out.logits, &sample.gt, &weights)?;
    let mut terms = vec![(ce, cfg.ce_weight as f32)];
    let mut parts = LossParts {
        ce: g.value(ce).data()[0] as f64,
        ..LossParts::default()
    };
    if let (Some(seg), true) = (out.seg_logits(), cfg.aux_weight > 0.0) {
        let target: Vec<f32> = sample.relevance().iter().map(|&r| r as u8 as f32).collect();
        let aux = g.bce_with_logits(seg, &target)?;
        parts.aux = g.value(aux).data()[0] as f64;
        terms.push((aux, cfg.aux_weight as f32));
    }
    if let (Some(delta), true) = (out.delta(), cfg.align_weight > 0.0) {
        let (h, w) = (sample.height(), sample.width());
        let [dr, dc] = sample.meta.ideal_delta_cells;
        let target = Tensor::from_fn(&[h, w, 2], |i| if i % 2 == 0 { dr as f32 } else { dc as f32 });
        let target = g.constant(target);
        let diff = g.sub(delta, target)?;
        let abs = g.abs(diff);
        let sum = g.sum(abs);
        let n = (h * w * 2) as f32;
        parts.align = g.value(sum).data()[0] as f64 / n as f64;
        terms.push((sum, cfg.align_weight as f32 / n));
    }
    let loss = g.add_scalars(&terms)?;
    parts.total = g.value(loss).data()[0] as f64;
    let grads = g.backward(loss)?;
    let mut out: Vec<(ParamId, Tensor<f32>)> = grads.params().map(|(id, t)| (id, t.clone())).collect();
    out.sort_by_key(|(id, _)| *id);
    Ok((parts, out))
}

/// Trains `model` in place. Batches are drawn from per-epoch shuffles of
/// `train`; per-sample gradients run in parallel and are summed in batch
/// order, so results do not depend on the thread count.
pub fn train(
    model: &mut FusionModel<f32>,
    cfg: &TrainConfig,
    train: &[SceneSample],
    val: &[SceneSample],
    mut on_log: impl FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut adam = Adam::new(&model.store);
    let mut log = Vec::new();
    let mut window = LossParts::default();
    let mut window_n = 0usize;
    let mut final_loss = f64::NAN;
    let val = &val[..cfg.val_limit.map_or(val.len(), |n| n.min(val.len()))];

    for step in 0..cfg.steps {
        let batch: Vec<usize> = (0..cfg.batch)
            .map(|_| {
                if cursor == order.len() {
                    order = (0..train.len()).collect();
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                cursor += 1;
                order[cursor - 1]
            })
            .collect();
        let shared: &FusionModel<f32> = model;
        let results: Vec<_> = batch
            .par_iter()
            .map(|&i| sample_gradients(shared, &train[i], cfg))
            .collect::<Result<_>>()?;

        model.store.zero_grad();
        let mut parts = LossParts::default();
        for (p, grads) in &results {
            parts.add(p);
            for (id, t) in grads {
                model.store.accumulate_tensor(*id, t)?;
            }
        }
        let inv = 1.0 / cfg.batch as f64;
        parts.scale(inv);
        if !parts.total.is_finite() {
            return Err(Error::Diverged {
                step,
                reason: format!("loss is {}", parts.total),
            });
        }
        model.store.scale_grads(inv as f32);
        let mut grad_norm = model.store.grad_norm();
        if !grad_norm.is_finite() {
            return Err(Error::Diverged {
                step,
                reason: format!("gradient norm is {grad_norm}"),
            });
        }
        if let Some(clip) = cfg.grad_clip {
            if grad_norm > clip {
                model.store.scale_grads((clip / grad_norm) as f32);
                grad_norm = clip;
            }
        }
        let lr = cfg.lr_at(step);
        adam.step(&mut model.store, lr);
        if !model.store.all_finite() {
            return Err(Error::Diverged {
                step,
                reason: "non-finite parameter after update".into(),
            });
        }

        window.add(&parts);
        window_n += 1;
        let last = step + 1 == cfg.steps;
        let log_now = cfg.log_every > 0 && (step + 1) % cfg.log_every == 0;
        let val_now = !val.is_empty() && cfg.val_every > 0 && ((step + 1) % cfg.val_every == 0 || last);
        if log_now || val_now || last {
            let mut mean = window;
            mean.scale(1.0 / window_n as f64);
            final_loss = mean.total;
            let val_miou = if val_now {
                Some(evaluate(model, val)?.overall.miou)
            } else {
                None
            };
            let rec = LogRecord {
                step: step + 1,
                lr,
                loss: mean,
                grad_norm,
                val_miou,
            };
            on_log(&rec);
            log.push(rec);
            window = LossParts::default();
            window_n = 0;
        }
    }
    Ok(TrainOutcome {
        steps: cfg.steps,
        log,
        final_loss,
    })
}

/// IoU summaries of one model over a split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub overall: IoUReport,
    pub by_range: BTreeMap<String, IoUReport>,
    pub by_tag: BTreeMap<String, IoUReport>,
}

impl EvalReport {
    pub fn range_miou(&self, range: BevRange) -> Option<f64> {
        self.by_range.get(range.label()).map(|r| r.miou)
    }
}

/// Class rasters predicted for every sample, in input order.
pub fn predict_all(model: &FusionModel<f32>, samples: &[SceneSample]) -> Result<Vec<Vec<u8>>> {
    samples
        .par_iter()
        .map(|s| Ok(argmax_classes(&model.predict(&s.input())?)))
        .collect()
}

/// Deterministic evaluation of `model` on `samples`.
pub fn evaluate(model: &FusionModel<f32>, samples: &[SceneSample]) -> Result<EvalReport> {
    let preds = predict_all(model, samples)?;
    let mut overall = IoUAccumulator::new(Class::COUNT);
    let mut by_range: BTreeMap<String, IoUAccumulator> = BTreeMap::new();
    let mut by_tag: BTreeMap<String, IoUAccumulator> = BTreeMap::new();
    for (s, p) in samples.iter().zip(&preds) {
        let mut acc = IoUAccumulator::new(Class::COUNT);
        acc.add(p, &s.gt)?;
        overall.merge(&acc);
        by_range
            .entry(s.meta.range.label().to_string())
            .or_insert_with(|| IoUAccumulator::new(Class::COUNT))
            .merge(&acc);
        for tag in &s.meta.tags {
            by_tag
                .entry(tag.label().to_string())
                .or_insert_with(|| IoUAccumulator::new(Class::COUNT))
                .merge(&acc);
        }
    }
    Ok(EvalReport {
        samples: samples.len(),
        overall: overall.report(),
        by_range: by_range.into_iter().map(|(k, a)| (k, a.report())).collect(),
        by_tag: by_tag.into_iter().map(|(k, a)| (k, a.report())).collect(),
    })
}

/// [`evaluate`] restricted to samples drawn at `range`.
pub fn evaluate_range(model: &FusionModel<f32>, samples: &[SceneSample], range: BevRange) -> Result<EvalReport> {
    let subset: Vec<SceneSample> = samples.iter().filter(|s| s.meta.range == range).cloned().collect();
    if subset.is_empty() {
        return Err(Error::Config(format!("no samples at range {range}")));
    }
    evaluate(model, &subset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionConfig;
    use crate::synth::{generate_scenes, SceneSpec};

    fn tiny() -> (FusionModel<f32>, Vec<SceneSample>) {
        let mut cfg = FusionConfig::desk_scale();
        cfg.blocks = 1;
        let model = FusionModel::new(cfg, 1).unwrap();
        let samples = generate_scenes(&SceneSpec::default(), 0..4).unwrap();
        (model, samples)
    }

    #[test]
    fn zero_lr_step_keeps_parameters() {
        let (mut model, samples) = tiny();
        let before = model.store.fingerprint();
        let cfg = TrainConfig {
            lr: 0.0,
            steps: 1,
            ..TrainConfig::default()
        };
        train(&mut model, &cfg, &samples, &[], |_| {}).unwrap();
        assert_eq!(model.store.fingerprint(), before);
    }

    #[test]
    fn training_is_deterministic_and_lowers_loss() {
        let (model, samples) = tiny();
        let cfg = TrainConfig {
            lr: 3e-3,
            steps: 12,
            batch: 2,
            log_every: 4,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = model.clone();
            let out = train(&mut m, &cfg, &samples, &samples[..2], |_| {}).unwrap();
            (m.store.fingerprint(), out)
        };
        let (a, out_a) = run();
        let (b, _) = run();
        assert_eq!(a, b);
        assert_eq!(out_a.log.len(), 3);
        assert!(out_a.log[2].loss.total < out_a.log[0].loss.total, "{:?}", out_a.log);
        assert!(out_a.log.last().unwrap().val_miou.is_some());
    }

    #[test]
    fn nan_input_reports_divergence_step() {
        let (mut model, mut samples) = tiny();
        samples[0].f_bev.data_mut()[0] = f32::NAN;
        let cfg = TrainConfig {
            steps: 3,
            batch: 4,
            ..TrainConfig::default()
        };
        match train(&mut model, &cfg, &samples, &[], |_| {}) {
            Err(Error::Diverged { step: 0, .. }) | Err(Error::Numeric(_)) => {}
            other => panic!("expected divergence, got {:?}", other.map(|o| o.steps)),
        }
    }

    #[test]
    fn evaluation_groups_by_range_and_tag() {
        let (model, samples) = tiny();
        let r = evaluate(&model, &samples).unwrap();
        assert_eq!(r, evaluate(&model, &samples).unwrap());
        assert_eq!(r.samples, 4);
        assert!(!r.by_range.is_empty() && !r.by_tag.is_empty());
    }

    #[test]
    fn config_keys() {
        let mut c = TrainConfig::default();
        assert!(c.set_key("class_weights", "1, 2, 3, 4").unwrap());
        assert!(c.set_key("grad_clip", "off").unwrap());
        assert!(!c.set_key("nope", "1").unwrap());
        assert!(c.set_key("class_weights", "1,2").is_err());
        assert_eq!(c.class_weights, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(c.grad_clip, None);
    }
}
