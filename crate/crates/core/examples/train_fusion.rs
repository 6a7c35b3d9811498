//! Trains the masked-attention fusion model on a small synthetic split,
//! logging JSON lines, then evaluates per BEV range and saves a checkpoint.
//!
//! `cargo run --release --example train_fusion -- [steps]`

use satfuse::fusion::{FusionConfig, FusionModel};
use satfuse::synth::{generate_scenes, BevRange, SceneSpec};
use satfuse::train::{benchmark_train_config, evaluate, train};

fn main() -> satfuse::Result<()> {
    let steps = std::env::args()
        .nth(1)
        .map_or(Ok(300), |s| s.parse())
        .expect("steps must be an integer");
    let spec = SceneSpec::default();
    let train_set = generate_scenes(&spec, 0..120)?;
    let val = generate_scenes(&spec, 500..530)?;

    let mut model = FusionModel::<f32>::new(FusionConfig::desk_scale(), 0)?;
    let cfg = satfuse::train::TrainConfig {
        steps,
        log_every: (steps / 6).max(1),
        val_every: (steps / 3).max(1),
        ..benchmark_train_config()
    };
    let before = evaluate(&model, &val)?;
    train(&mut model, &cfg, &train_set, &val, |r| println!("{}", r.to_json_line()))?;
    let after = evaluate(&model, &val)?;
    println!("val mIoU {:.3} -> {:.3}", before.overall.miou, after.overall.miou);
    for range in BevRange::ALL {
        println!(
            "  {:>7}: {:.3}",
            range.label(),
            after.range_miou(range).unwrap_or(f64::NAN)
        );
    }

    let dir = tempfile::tempdir()?;
    model.save(dir.path())?;
    let back = FusionModel::<f32>::load(dir.path())?;
    println!(
        "checkpoint reloads with identical parameters: {}",
        back.store.fingerprint() == model.store.fingerprint()
    );
    Ok(())
}
