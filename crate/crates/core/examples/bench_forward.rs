//! Times one full-size fusion forward pass (100×200×64 features, 800 tokens).

use std::time::Instant;

use satfuse::fusion::{FusionConfig, FusionModel, SceneInput};
use satfuse::tensor::Tensor;

fn main() -> satfuse::Result<()> {
    let cfg = FusionConfig::full_scale();
    let model = FusionModel::<f32>::new(cfg.clone(), 0)?;
    let input = SceneInput {
        f_bev: Tensor::from_fn(&[cfg.height, cfg.width, cfg.channels], |i| {
            ((i % 97) as f32 / 97.0) - 0.5
        }),
        sat: Tensor::from_fn(&[3, cfg.height, cfg.width], |i| (i % 13) as f32 / 13.0),
    };
    let start = Instant::now();
    let logits = model.predict(&input)?;
    let secs = start.elapsed().as_secs_f64();
    println!(
        "tokens {} | c_h {} | params {} | logits {:?} | forward {:.3} s",
        cfg.tokens(),
        cfg.c_h,
        model.store.num_elements(),
        logits.shape(),
        secs
    );
    Ok(())
}
