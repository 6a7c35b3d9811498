use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::Adam;
use crate::error::{Error, Result};
use crate::fusion::bev::predict_offsets;
use crate::fusion::{FusionConfig, FusionModel};
use crate::tensor::{Graph, Tensor};

/// A rigid-shift alignment task: satellite features are the BEV features
/// displaced by `shift` cells and only the offset predictor is trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffsetRecoveryConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub hidden: usize,
    /// True displacement `(rows, cols)` in cells.
    pub shift: (i32, i32),
    pub steps: usize,
    pub lr: f64,
    /// Shortest wavelength of the synthetic feature field, in cells.
    pub min_wavelength: f64,
    pub seed: u64,
}

impl Default for OffsetRecoveryConfig {
    fn default() -> Self {
        Self {
            height: 20,
            width: 40,
            channels: 8,
            hidden: 16,
            shift: (2, -3),
            steps: 2000,
            lr: 1e-2,
            min_wavelength: 14.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffsetRecoveryReport {
    pub steps: usize,
    /// Interior cells scored (at least `max|shift| + 1` from every edge).
    pub interior_cells: usize,
    /// Mean interior `‖Δ − shift‖` in cells, before and after training.
    pub initial_error: f64,
    pub final_error: f64,
    /// Steps until the error first dropped below 0.25 cells.
    pub steps_to_quarter_cell: Option<usize>,
    pub final_loss: f64,
}

struct Wave {
    amp: f64,
    kr: f64,
    kc: f64,
    phase: f64,
}

fn field(waves: &[Vec<Wave>], h: usize, w: usize, dr: f64, dc: f64) -> Tensor<f64> {
    let c = waves.len();
    Tensor::from_fn(&[h, w, c], |i| {
        let (r, col, ch) = ((i / c) / w, (i / c) % w, i % c);
        let (y, x) = (r as f64 - dr, col as f64 - dc);
        waves[ch]
            .iter()
            .map(|wv| wv.amp * (wv.kr * y + wv.kc * x + wv.phase).sin())
            .sum()
    })
}

/// Trains the offset predictor of a fresh desk-scale model on one rigidly
/// shifted feature pair with an interior reconstruction loss, and reports
/// how closely the predicted field matches the shift.
pub fn recover_offset(cfg: &OffsetRecoveryConfig) -> Result<OffsetRecoveryReport> {
    let (h, w) = (cfg.height, cfg.width);
    let m = cfg.shift.0.unsigned_abs().max(cfg.shift.1.unsigned_abs()) as usize + 1;
    if 2 * m >= h || 2 * m >= w {
        return Err(Error::Config(format!(
            "shift {:?} leaves no interior in {h}x{w}",
            cfg.shift
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let waves: Vec<Vec<Wave>> = (0..cfg.channels)
        .map(|_| {
            (0..3)
                .map(|_| {
                    let len = rng.gen_range(cfg.min_wavelength..2.5 * cfg.min_wavelength);
                    let angle = rng.gen_range(0.0..PI);
                    let k = 2.0 * PI / len;
                    Wave {
                        amp: rng.gen_range(0.5..1.0),
                        kr: k * angle.sin(),
                        kc: k * angle.cos(),
                        phase: rng.gen_range(0.0..2.0 * PI),
                    }
                })
                .collect()
        })
        .collect();
    let (sr, sc) = (cfg.shift.0 as f64, cfg.shift.1 as f64);
    let f_ref = field(&waves, h, w, 0.0, 0.0);
    // satellite cell q shows the scene at q − shift, so warping by Δ = shift
    // restores f_ref
    let f_sat = field(&waves, h, w, sr, sc);

    let mut mcfg = FusionConfig::desk_scale();
    mcfg.height = h;
    mcfg.width = w;
    mcfg.channels = cfg.channels;
    mcfg.offset_hidden = cfg.hidden;
    let mut model = FusionModel::<f64>::new(mcfg, cfg.seed)?;
    model.store.train_only(&["bev.offset"]);
    let offset = model.bev_params().offset.clone();

    let interior: Vec<usize> = (0..h * w)
        .filter(|&i| (m..h - m).contains(&(i / w)) && (m..w - m).contains(&(i % w)))
        .collect();
    let c = cfg.channels;
    let mut weights = Tensor::<f64>::zeros(&[h, w, c]);
    for &i in &interior {
        weights.data_mut()[i * c..(i + 1) * c].fill(1.0 / (interior.len() * c) as f64);
    }
    let error = |delta: &Tensor<f64>| {
        interior
            .iter()
            .map(|&i| {
                let d = &delta.data()[2 * i..2 * i + 2];
                ((d[0] - sr).powi(2) + (d[1] - sc).powi(2)).sqrt()
            })
            .sum::<f64>()
            / interior.len() as f64
    };

    let mut adam = Adam::new(&model.store);
    let mut initial_error = f64::NAN;
    let mut final_error = f64::NAN;
    let mut final_loss = f64::NAN;
    let mut steps_to_quarter_cell = None;
    for step in 0..=cfg.steps {
        let mut g = Graph::new();
        let r = g.constant(f_ref.clone());
        let s = g.constant(f_sat.clone());
        let r_chw = g.hwc_to_chw(r)?;
        let s_chw = g.hwc_to_chw(s)?;
        let delta = predict_offsets(&mut g, &model.store, &offset, r_chw, s_chw)?;
        let warped = g.warp(s, delta)?;
        let diff = g.sub(warped, r)?;
        let sq = g.mul(diff, diff)?;
        let loss = g.weighted_sum(sq, weights.clone())?;
        let err = error(g.value(delta));
        final_loss = g.value(loss).data()[0];
        final_error = err;
        if step == 0 {
            initial_error = err;
        }
        if err < 0.25 && steps_to_quarter_cell.is_none() {
            steps_to_quarter_cell = Some(step);
        }
        if !final_loss.is_finite() {
            return Err(Error::Diverged {
                step,
                reason: "offset reconstruction loss is not finite".into(),
            });
        }
        if step == cfg.steps {
            break;
        }
        let grads = g.backward(loss)?;
        model.store.zero_grad();
        model.store.accumulate(&grads)?;
        adam.step(&mut model.store, cfg.lr);
    }
    Ok(OffsetRecoveryReport {
        steps: cfg.steps,
        interior_cells: interior.len(),
        initial_error,
        final_error,
        steps_to_quarter_cell,
        final_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_cell_shift_is_learned_quickly() {
        let cfg = OffsetRecoveryConfig {
            height: 12,
            width: 16,
            channels: 4,
            hidden: 8,
            shift: (1, 0),
            steps: 300,
            ..OffsetRecoveryConfig::default()
        };
        let r = recover_offset(&cfg).unwrap();
        assert!((r.initial_error - 1.0).abs() < 1e-12);
        assert!(r.final_error < 0.25, "{r:?}");
    }
}
