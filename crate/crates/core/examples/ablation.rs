//! Fusion ablation on the synthetic benchmark: no satellite, concatenation,
//! masked attention, and masked attention without BEV alignment.
//!
//! `cargo run --release --example ablation -- [steps] [n_train]`; the
//! benchmark setting is 3000 steps on 500 scenes.

use satfuse::fusion::FusionConfig;
use satfuse::synth::{generate_scenes, BevRange, SceneSpec};
use satfuse::train::{benchmark_train_config, run_variant, ABLATION};

fn main() -> satfuse::Result<()> {
    let mut args = std::env::args()
        .skip(1)
        .map(|a| a.parse::<usize>().expect("integer argument"));
    let steps = args.next().unwrap_or(400);
    let n_train = args.next().unwrap_or(200);
    let spec = SceneSpec::default();
    let train_set = generate_scenes(&spec, 0..n_train)?;
    let val = generate_scenes(&spec, 500..600)?;
    let cfg = satfuse::train::TrainConfig {
        steps,
        ..benchmark_train_config()
    };
    println!("{steps} steps on {n_train} scenes, 100 validation scenes");
    println!(
        "{:26} {:>6} {:>7} {:>7} {:>7} {:>6}",
        "variant", "mIoU", "60x30", "60x60", "120x60", "ratio"
    );
    for v in &ABLATION {
        let r = run_variant(&FusionConfig::desk_scale(), v, &cfg, &train_set, &val)?;
        let at = |b: BevRange| r.report.range_miou(b).unwrap_or(f64::NAN);
        println!(
            "{:26} {:6.3} {:7.3} {:7.3} {:7.3} {:6.3}   ({:.0} s)",
            r.name,
            r.miou(),
            at(BevRange::R60x30),
            at(BevRange::R60x60),
            at(BevRange::R120x60),
            r.range_ratio().unwrap_or(f64::NAN),
            r.train_seconds
        );
    }
    Ok(())
}
