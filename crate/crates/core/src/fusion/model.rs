use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::bev::{self, BevFusionOutput, BevFusionParams};
use super::feature::{self, FeatureFusionOutput, FeatureFusionParams};
use super::{ConvIds, FusionConfig};
use crate::error::{dim_err, Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// One scene as seen by the model.
#[derive(Debug, Clone)]
pub struct SceneInput<T: Scalar = f32> {
    /// Onboard BEV features `[H×W×C]`.
    pub f_bev: Tensor<T>,
    /// Satellite tile resized to the BEV grid, `[3×H×W]`.
    pub sat: Tensor<T>,
}

/// Graph handles produced by [`FusionModel::forward`].
pub struct ModelOutputs {
    /// `[K×H×W]`.
    pub logits: Var,
    /// Satellite features `[H×W×C]`.
    pub f_sat: Option<Var>,
    /// Refined BEV features `[H×W×C]`.
    pub f_ref: Var,
    pub feature: Option<FeatureFusionOutput>,
    pub bev: Option<BevFusionOutput>,
}

impl ModelOutputs {
    /// Satellite relevance logits `[H×W]` (masked attention only).
    pub fn seg_logits(&self) -> Option<Var> {
        self.feature.as_ref().and_then(|f| f.seg.as_ref()).map(|s| s.logits)
    }

    pub fn delta(&self) -> Option<Var> {
        self.bev.as_ref().and_then(|b| b.delta)
    }
}

#[derive(Debug, Clone, Copy)]
struct EncoderParams {
    conv1: ConvIds,
    conv2: ConvIds,
}

/// The full fusion stack: satellite encoder, feature-level fusion, BEV-level
/// fusion and segmentation head, with parameters owned by one store.
#[derive(Clone)]
pub struct FusionModel<T: Scalar = f32> {
    pub cfg: FusionConfig,
    pub store: ParamStore<T>,
    encoder: Option<EncoderParams>,
    feature: Option<FeatureFusionParams>,
    bev: BevFusionParams,
}

impl<T: Scalar> FusionModel<T> {
    pub fn new(cfg: FusionConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = cfg.fusion.uses_satellite().then(|| EncoderParams {
            conv1: ConvIds::init(&mut store, "encoder.conv1", 3, cfg.enc_hidden, 3, &mut rng),
            conv2: ConvIds::init(&mut store, "encoder.conv2", cfg.enc_hidden, cfg.channels, 3, &mut rng),
        });
        let feature = cfg
            .fusion
            .uses_attention()
            .then(|| FeatureFusionParams::init(&mut store, &cfg, &mut rng));
        let bev = BevFusionParams::init(&mut store, &cfg, &mut rng);
        Ok(Self {
            cfg,
            store,
            encoder,
            feature,
            bev,
        })
    }

    pub fn feature_params(&self) -> Option<&FeatureFusionParams> {
        self.feature.as_ref()
    }

    pub fn bev_params(&self) -> &BevFusionParams {
        &self.bev
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Scalar>(&self) -> FusionModel<U> {
        FusionModel {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            encoder: self.encoder,
            feature: self.feature.clone(),
            bev: self.bev.clone(),
        }
    }

    fn check_input(&self, input: &SceneInput<T>) -> Result<()> {
        let c = &self.cfg;
        if input.f_bev.shape() != [c.height, c.width, c.channels] {
            return Err(dim_err!(
                "BEV features {:?}, model expects [{}, {}, {}]",
                input.f_bev.shape(),
                c.height,
                c.width,
                c.channels
            ));
        }
        if c.fusion.uses_satellite() && input.sat.shape() != [3, c.height, c.width] {
            return Err(dim_err!(
                "satellite tile {:?}, model expects [3, {}, {}]",
                input.sat.shape(),
                c.height,
                c.width
            ));
        }
        Ok(())
    }

    /// Records the forward pass of one scene on `g`.
    pub fn forward(&self, g: &mut Graph<T>, input: &SceneInput<T>) -> Result<ModelOutputs> {
        self.check_input(input)?;
        let f_bev = g.constant(input.f_bev.clone());
        let f_bev_chw = g.hwc_to_chw(f_bev)?;
        let Some(enc) = &self.encoder else {
            let logits = bev::task_head(g, &self.store, &self.bev.head, f_bev_chw)?;
            return Ok(ModelOutputs {
                logits,
                f_sat: None,
                f_ref: f_bev,
                feature: None,
                bev: None,
            });
        };
        let sat = g.constant(input.sat.clone());
        let x = enc.conv1.forward(g, &self.store, sat)?;
        let x = g.silu(x);
        let f_sat_chw = enc.conv2.forward(g, &self.store, x)?;
        let f_sat = g.chw_to_hwc(f_sat_chw)?;

        let (f_ref, f_ref_chw, feature) = match &self.feature {
            Some(fp) => {
                let out = feature::feature_level_fuse(g, &self.store, fp, f_bev, f_sat, f_sat_chw, &self.cfg)?;
                let chw = g.hwc_to_chw(out.f_ref)?;
                (out.f_ref, chw, Some(out))
            }
            None => (f_bev, f_bev_chw, None),
        };
        let fused = bev::bev_level_fuse(
            g,
            &self.store,
            &self.bev.offset,
            f_ref_chw,
            f_sat,
            f_sat_chw,
            self.cfg.bev_align,
            self.cfg.sat_residual,
        )?;
        let logits = bev::task_head(g, &self.store, &self.bev.head, fused.fused_chw)?;
        Ok(ModelOutputs {
            logits,
            f_sat: Some(f_sat),
            f_ref,
            feature,
            bev: Some(fused),
        })
    }

    /// Class logits `[K×H×W]` without recording gradients.
    pub fn predict(&self, input: &SceneInput<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let out = self.forward(&mut g, input)?;
        Ok(g.take(out.logits))
    }

    /// Per-cell arg-max class.
    pub fn classify(&self, input: &SceneInput<T>) -> Result<Vec<u8>> {
        Ok(argmax_classes(&self.predict(input)?))
    }

    /// Writes parameters and `config.json` to `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        self.store.save(dir)?;
        std::fs::write(dir.join("config.json"), serde_json::to_vec_pretty(&self.cfg)?)?;
        Ok(())
    }

    /// Rebuilds the architecture from `config.json` and loads its parameters.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let cfg: FusionConfig = serde_json::from_slice(&std::fs::read(dir.join("config.json"))?)
            .map_err(|e| Error::Checkpoint(format!("bad model config: {e}")))?;
        let mut model = Self::new(cfg, 0)?;
        model.store.load_into(dir)?;
        Ok(model)
    }

    /// Loads parameters into a model built for `cfg`; fails if the stored
    /// architecture disagrees.
    pub fn load_with(dir: impl AsRef<Path>, cfg: FusionConfig) -> Result<Self> {
        let mut model = Self::new(cfg, 0)?;
        model.store.load_into(dir)?;
        Ok(model)
    }
}

/// Arg-max over the class axis of `[K×H×W]` logits.
pub fn argmax_classes<T: Scalar>(logits: &Tensor<T>) -> Vec<u8> {
    let (k, plane) = (logits.shape()[0], logits.len() / logits.shape()[0]);
    let d = logits.data();
    (0..plane)
        .map(|i| {
            let mut best = 0;
            for c in 1..k {
                if d[c * plane + i] > d[best * plane + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionMode;

    fn tiny(fusion: FusionMode) -> FusionConfig {
        FusionConfig {
            height: 4,
            width: 8,
            channels: 3,
            extent_m: (6.0, 12.0),
            c_h: 8,
            offset_hidden: 4,
            head_hidden: 4,
            enc_hidden: 4,
            fusion,
            ..FusionConfig::desk_scale()
        }
    }

    fn input(cfg: &FusionConfig) -> SceneInput<f32> {
        SceneInput {
            f_bev: Tensor::from_fn(&[cfg.height, cfg.width, cfg.channels], |i| ((i * 7) % 5) as f32 * 0.1),
            sat: Tensor::from_fn(&[3, cfg.height, cfg.width], |i| ((i * 3) % 11) as f32 / 10.0),
        }
    }

    #[test]
    fn every_mode_produces_class_logits() {
        for mode in [
            FusionMode::None,
            FusionMode::Concat,
            FusionMode::Attention,
            FusionMode::MaskedAttention,
        ] {
            let cfg = tiny(mode);
            let m = FusionModel::<f32>::new(cfg.clone(), 1).unwrap();
            let logits = m.predict(&input(&cfg)).unwrap();
            assert_eq!(logits.shape(), &[4, 4, 8]);
            assert!(logits.all_finite());
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let cfg = tiny(FusionMode::MaskedAttention);
        let m = FusionModel::<f32>::new(cfg.clone(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let back = FusionModel::<f32>::load(dir.path()).unwrap();
        assert_eq!(back.store.fingerprint(), m.store.fingerprint());
        let wrong = tiny(FusionMode::None);
        assert!(matches!(
            FusionModel::<f32>::load_with(dir.path(), wrong),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let cfg = tiny(FusionMode::Concat);
        let m = FusionModel::<f32>::new(cfg.clone(), 1).unwrap();
        let mut bad = input(&cfg);
        bad.f_bev = Tensor::zeros(&[4, 8, 2]);
        assert!(m.predict(&bad).is_err());
    }
}
