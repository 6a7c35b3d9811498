use std::path::Path;
use std::process::Command;

use satfuse::fusion::{FusionConfig, FusionModel};
use satfuse::geo::io::{write_district, DistrictRaster, DistrictSidecar};
use satfuse::synth::{generate_scenes, SceneSpec};
use satfuse::tensor::Tensor;
use satfuse::train::{evaluate, train, LrSchedule, TrainConfig};

fn satfuse(args: &[&str], cwd: &Path) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_satfuse"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap();
    let text = String::from_utf8_lossy(&out.stdout).into_owned() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap_or(-1), text)
}

#[test]
fn synth_train_eval_render_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("s.cfg"), "# tiny split\nseed = 3\nbev_range = mixed\n").unwrap();

    let (code, out) = satfuse(&["gen-synth", "--spec", "s.cfg", "--n", "5", "--out", "data"], d);
    assert_eq!(code, 0, "{out}");
    assert!(d.join("data/manifest.json").is_file());

    let (code, out) = satfuse(
        &[
            "train",
            "--data",
            "data",
            "--out",
            "run",
            "--set",
            "steps=8",
            "--set",
            "log_every=4",
        ],
        d,
    );
    assert_eq!(code, 0, "{out}");
    for f in ["config.json", "params.json", "log.jsonl", "run.json"] {
        assert!(d.join("run").join(f).is_file(), "missing {f}");
    }
    assert_eq!(
        std::fs::read_to_string(d.join("run/log.jsonl"))
            .unwrap()
            .lines()
            .count(),
        2
    );

    let (code, out) = satfuse(
        &[
            "eval-ckpt",
            "--ckpt",
            "run",
            "--data",
            "data",
            "--report",
            "a.json",
            "--pred-out",
            "pred",
        ],
        d,
    );
    assert_eq!(code, 0, "{out}");
    let (code, _) = satfuse(
        &["eval-ckpt", "--ckpt", "run", "--data", "data", "--report", "b.json"],
        d,
    );
    assert_eq!(code, 0);
    assert_eq!(
        std::fs::read(d.join("a.json")).unwrap(),
        std::fs::read(d.join("b.json")).unwrap()
    );
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("a.json")).unwrap()).unwrap();
    assert_eq!(report["samples"], 5);

    let (code, out) = satfuse(&["eval", "--pred", "pred", "--gt", "data", "--report", "eval.json"], d);
    assert_eq!(code, 0, "{out}");
    let scored: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("eval.json")).unwrap()).unwrap();
    assert!(scored["chamfer_ap"]["map"].as_f64().unwrap() >= 0.0);

    let (code, out) = satfuse(
        &["render", "--ckpt", "run", "--data", "data", "--out", "img", "--n", "2"],
        d,
    );
    assert_eq!(code, 0, "{out}");
    assert_eq!(std::fs::read_dir(d.join("img")).unwrap().count(), 2);
}

#[test]
fn landmarks_to_tiles() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let sidecar = DistrictSidecar {
        meters_per_pixel: 0.5,
        origin: [100.0, 200.0],
        rotation: 0.2,
    };
    let t = sidecar.transform().unwrap();
    let lines: String = [
        [110.0, 230.0],
        [160.0, 205.0],
        [130.0, 260.0],
        [175.0, 250.0],
        [120.0, 215.0],
    ]
    .iter()
    .map(|&w| {
        let p = t.apply(w);
        format!("{} {} {} {}\n", w[0], w[1], p[0], p[1])
    })
    .collect();
    std::fs::write(d.join("lm.txt"), lines).unwrap();
    let (code, out) = satfuse(&["solve-align", "--landmarks", "lm.txt", "--out", "fit.json"], d);
    assert_eq!(code, 0, "{out}");
    assert!(d.join("fit.json").is_file());

    let pixels = Tensor::from_fn(&[3, 240, 240], |i| (i % 251) as f32 / 251.0);
    write_district(d.join("district.png"), &DistrictRaster { pixels, sidecar }).unwrap();
    std::fs::write(d.join("poses.txt"), "a 140 240 0.0\nb 150 250 1.2\n").unwrap();
    let (code, out) = satfuse(
        &[
            "gen-tiles",
            "--raster",
            "district.png",
            "--poses",
            "poses.txt",
            "--out",
            "tiles",
            "--res",
            "20x40",
        ],
        d,
    );
    assert_eq!(code, 0, "{out}");
    assert!(d.join("tiles/manifest.json").is_file());
    assert!(d.join("tiles/a.png").is_file() && d.join("tiles/b.json").is_file());
}

#[test]
fn bench_forward_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (code, out) = satfuse(
        &[
            "bench-forward",
            "--shape",
            "20x40x8",
            "--set",
            "c_h=32",
            "--set",
            "patch=2",
        ],
        dir.path(),
    );
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("tokens 200"), "{out}");
    assert_eq!(satfuse(&["--help"], dir.path()).0, 0);
    assert_eq!(satfuse(&["gen-synth", "--n", "0", "--out", "x"], dir.path()).0, 1);
    assert_eq!(satfuse(&["train", "--data", "missing", "--out", "r"], dir.path()).0, 2);
}

#[test]
fn one_sample_is_memorised() {
    let sample = generate_scenes(&SceneSpec::default(), 0..1).unwrap();
    let mut model = FusionModel::<f32>::new(FusionConfig::desk_scale(), 0).unwrap();
    let cfg = TrainConfig {
        lr: 3e-3,
        steps: 3000,
        batch: 1,
        schedule: LrSchedule::Constant,
        log_every: 0,
        val_every: 0,
        ..TrainConfig::default()
    };
    let untrained = evaluate(&model, &sample).unwrap().overall.miou;
    train(&mut model, &cfg, &sample, &[], |_| {}).unwrap();
    let trained = evaluate(&model, &sample).unwrap().overall.miou;
    assert!(trained > 0.95, "train mIoU {trained:.4}");
    assert!(trained >= untrained);
}

#[test]
fn task_head_overfits_one_target() {
    use rand::{Rng, SeedableRng};
    use satfuse::fusion::bev::{task_head, HeadParams};
    use satfuse::params::ParamStore;
    use satfuse::tensor::Graph;
    use satfuse::train::Adam;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
    let (c, h, w) = (6, 8, 12);
    let x = Tensor::<f64>::from_fn(&[c, h, w], |_| rng.gen_range(-1.0..1.0));
    let target: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..4)).collect();
    let mut store = ParamStore::<f64>::new();
    let head = HeadParams::init(&mut store, c, 16, 4, &mut rng);
    let mut adam = Adam::new(&store);
    let mut loss = f64::INFINITY;
    let mut steps = 0;
    while steps < 2000 && loss >= 0.01 {
        let mut g = Graph::new();
        let xi = g.constant(x.clone());
        let logits = task_head(&mut g, &store, &head, xi).unwrap();
        let l = g.cross_entropy(logits, &target, &[1.0; 4]).unwrap();
        loss = g.value(l).data()[0];
        let grads = g.backward(l).unwrap();
        store.zero_grad();
        store.accumulate(&grads).unwrap();
        adam.step(&mut store, 1e-2);
        steps += 1;
    }
    assert!(loss < 0.01, "loss {loss} after {steps} steps");
}
