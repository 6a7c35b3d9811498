//! Acceptance suite: one PASS/FAIL line per criterion. Runs as a plain
//! binary (`harness = false`) so the long training criteria share one split.

mod common;

use std::f64::consts::PI;
use std::time::Instant;

use rand::Rng;
use satfuse::fusion::feature::{distance_mask, feature_level_fuse, AttentionMask};
use satfuse::fusion::{FusionConfig, FusionModel, SceneInput};
use satfuse::geo::{solve_landmark_transform, GeoTransform, Point2};
use satfuse::metrics::{chamfer_ap, chamfer_distance, iou, Class, Instance};
use satfuse::synth::{generate_scenes, SceneSpec};
use satfuse::tensor::{ops, Graph, Tensor};
use satfuse::train::{
    benchmark_train_config, recover_offset, run_variant, OffsetRecoveryConfig, VariantResult, ABLATION,
};

use common::{grad_case, max_grad_error, rand_tensor, rng, warp_double_sum, GRAD_OPS};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn warp_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (h, w, c) = (r.gen_range(1..=8), r.gen_range(1..=8), r.gen_range(1..=3));
        let f = rand_tensor(&mut r, &[h, w, c], 1.0);
        let delta = rand_tensor(&mut r, &[h, w, 2], 2.0);
        let fast = ops::warp(&f, &delta).unwrap();
        let slow = warp_double_sum(&f, &delta);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-10 && secs < 10.0,
        format!("1000 instances, max abs err {worst:.2e}, {secs:.2} s"),
    )
}

fn identity_warp() -> Outcome {
    let mut r = rng(2);
    let mut exact64 = true;
    let mut worst_ulp = 0u32;
    for _ in 0..200 {
        let (h, w, c) = (r.gen_range(1..=12), r.gen_range(1..=12), r.gen_range(1..=4));
        let f = rand_tensor(&mut r, &[h, w, c], 10.0);
        let out = ops::warp(&f, &Tensor::zeros(&[h, w, 2])).unwrap();
        exact64 &= out.data().iter().zip(f.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        let f32t: Tensor<f32> = f.cast();
        let out32 = ops::warp(&f32t, &Tensor::zeros(&[h, w, 2])).unwrap();
        for (a, b) in out32.data().iter().zip(f32t.data()) {
            worst_ulp = worst_ulp.max((a.to_bits() as i64 - b.to_bits() as i64).unsigned_abs() as u32);
        }
    }
    outcome(
        exact64 && worst_ulp <= 1,
        format!("f64 bitwise {exact64}, f32 max {worst_ulp} ulp"),
    )
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut parts = Vec::new();
    let mut pass = true;
    for op in GRAD_OPS {
        let worst = (0..100)
            .map(|t| max_grad_error(&grad_case(op, t)).unwrap())
            .fold(0.0f64, f64::max);
        pass &= worst < 1e-4;
        parts.push(format!("{op} {worst:.1e}"));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        pass && secs < 120.0,
        format!("100 trials each: {}; {secs:.1} s", parts.join(", ")),
    )
}

fn mask_semantics() -> Outcome {
    let cfg = FusionConfig::desk_scale();
    let model = FusionModel::<f64>::new(cfg.clone(), 3).unwrap();
    let fp = model.feature_params().unwrap();
    let (h, w, c, p) = (cfg.height, cfg.width, cfg.channels, cfg.patch);
    let mut r = rng(4);
    let f_bev = rand_tensor(&mut r, &[h, w, c], 1.0);
    let f_sat = rand_tensor(&mut r, &[h, w, c], 1.0);

    let run = |f_sat: &Tensor<f64>| {
        let mut g = Graph::inference();
        let b = g.constant(f_bev.clone());
        let s = g.constant(f_sat.clone());
        let s_chw = g.hwc_to_chw(s).unwrap();
        let out = feature_level_fuse(&mut g, &model.store, fp, b, s, s_chw, &cfg).unwrap();
        let weights: Vec<Tensor<f64>> = out
            .blocks
            .iter()
            .flat_map(|blk| blk.weights.iter().map(|v| g.value(*v).clone()))
            .collect();
        (g.value(out.f_ref).clone(), g.value(out.mask).clone(), weights)
    };
    let (f_ref, mask, weights) = run(&f_sat);
    let blocked = AttentionMask { values: mask.clone() }.fully_masked_columns();
    let n = mask.shape()[0];

    // move the features of blocked tokens along directions the relevance
    // convolution cannot see, so the mask itself is unchanged
    let wv = model.store.value(fp.seg.w).data().to_vec();
    let wn: f64 = wv.iter().map(|x| x * x).sum();
    let mut perturbed = f_sat.clone();
    let wg = cfg.grid().1;
    for &t in &blocked {
        let (tr, tc) = (t / wg, t % wg);
        for dy in 0..p {
            for dx in 0..p {
                let cell = (tr * p + dy) * w + tc * p + dx;
                let mut d: Vec<f64> = (0..c).map(|_| r.gen_range(-3.0..3.0)).collect();
                let along: f64 = d.iter().zip(&wv).map(|(a, b)| a * b).sum::<f64>() / wn;
                for (di, wi) in d.iter_mut().zip(&wv) {
                    *di -= along * wi;
                }
                for k in 0..c {
                    perturbed.data_mut()[cell * c + k] += d[k];
                }
            }
        }
    }
    let (f_ref2, mask2, _) = run(&perturbed);
    let mask_same = mask
        .data()
        .iter()
        .zip(mask2.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    let f_ref_same = f_ref
        .data()
        .iter()
        .zip(f_ref2.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());

    let mut worst_sum = 0.0f64;
    let mut nonneg = true;
    let mut masked_zero = true;
    for a in &weights {
        for i in 0..n {
            let row = &a.data()[i * n..(i + 1) * n];
            let mrow = &mask.data()[i * n..(i + 1) * n];
            if mrow.iter().all(|v| v.is_infinite()) {
                continue;
            }
            nonneg &= row.iter().all(|&x| x >= 0.0);
            masked_zero &= row.iter().zip(mrow).all(|(&x, m)| m.is_finite() || x == 0.0);
            worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    let pass = !blocked.is_empty()
        && blocked.len() < n
        && mask_same
        && f_ref_same
        && nonneg
        && masked_zero
        && worst_sum <= 1e-6;
    outcome(
        pass,
        format!(
            "{} of {n} tokens blocked, mask unchanged {mask_same}, f_ref bitwise unchanged {f_ref_same}; \
             rows: weights >= 0 {nonneg}, masked weights 0 {masked_zero}, max |sum - 1| {worst_sum:.1e}",
            blocked.len()
        ),
    )
}

fn distance_counts() -> Outcome {
    let cfg = FusionConfig::full_scale();
    let pc = cfg.patch_config();
    let (hg, wg) = pc.grid;
    let pitch = pc.pitch_m();
    let mask = AttentionMask {
        values: distance_mask::<f64>(&pc, 5.0),
    };
    // centres are 1.5 m apart, so dist <= 5 m  <=>  9·(dr² + dc²) <= 100
    let mut mismatches = 0;
    let mut counts = std::collections::BTreeSet::new();
    for t in 0..hg * wg {
        let (r0, c0) = ((t / wg) as i64, (t % wg) as i64);
        let mut brute = 0;
        for r1 in 0..hg as i64 {
            for c1 in 0..wg as i64 {
                if 9 * ((r1 - r0).pow(2) + (c1 - c0).pow(2)) <= 100 {
                    brute += 1;
                }
            }
        }
        counts.insert(brute);
        if mask.unmasked_in_row(t) != brute {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0 && pitch == (1.5, 1.5) && (hg, wg) == (20, 40),
        format!(
            "{hg}x{wg} grid, pitch {pitch:?} m, {mismatches} mismatching rows, counts {:?}",
            counts
        ),
    )
}

fn full_scale_shapes() -> Outcome {
    let cfg = FusionConfig::full_scale();
    let model = FusionModel::<f32>::new(cfg.clone(), 0).unwrap();
    let mut r = rng(6);
    let input = SceneInput {
        f_bev: rand_tensor(&mut r, &[100, 200, 64], 1.0).cast(),
        sat: Tensor::from_fn(&[3, 100, 200], |_| r.gen_range(0.0..1.0)),
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    pool.install(|| {
        let forward = || {
            let start = Instant::now();
            let mut g = Graph::inference();
            let out = model.forward(&mut g, &input).unwrap();
            let secs = start.elapsed().as_secs_f64();
            let feat = out.feature.as_ref().unwrap();
            let blk = &feat.blocks[0];
            let attn = g.shape(blk.weights[0]).to_vec();
            let tokens = g.shape(blk.out).to_vec();
            let logits = g.shape(out.logits).to_vec();
            (secs, attn, tokens, logits)
        };
        let (secs, attn, tokens, logits) = forward();
        let pass = attn == [800, 800] && tokens == [800, 256] && logits == [4, 100, 200] && secs < 5.0;
        outcome(
            pass,
            format!("attention {attn:?}, tokens {tokens:?}, logits {logits:?}; forward {secs:.2} s, 1 thread"),
        )
    })
}

fn procrustes() -> Outcome {
    let mut r = rng(7);
    let mpp = 0.3;
    let truth = GeoTransform::similarity(mpp, 0.7, [512.25, -133.5]).unwrap();
    let world: Vec<Point2> = (0..5)
        .map(|_| [r.gen_range(-150.0..150.0), r.gen_range(-150.0..150.0)])
        .collect();
    let pixel: Vec<Point2> = world.iter().map(|&p| truth.apply(p)).collect();
    let fit = solve_landmark_transform(&world, &pixel).unwrap().transform;
    let param_err = [
        (fit.meters_per_pixel() - mpp).abs(),
        (fit.rotation() - 0.7).abs(),
        (fit.translation()[0] - 512.25).abs(),
        (fit.translation()[1] + 133.5).abs(),
    ]
    .into_iter()
    .fold(0.0f64, f64::max);

    // 2 m per-axis noise, expressed in pixels
    let normal = rand_distr::Normal::new(0.0, 2.0 / mpp).unwrap();
    let mut sum_sq = 0.0;
    for trial in 0..1000 {
        let mut r = rng(10_000 + trial);
        let rot = r.gen_range(-PI..PI);
        let t = GeoTransform::similarity(mpp, rot, [r.gen_range(0.0..2000.0), r.gen_range(0.0..2000.0)]).unwrap();
        let world: Vec<Point2> = (0..5)
            .map(|_| [r.gen_range(-200.0..200.0), r.gen_range(-200.0..200.0)])
            .collect();
        let pixel: Vec<Point2> = world
            .iter()
            .map(|&p| {
                let q = t.apply(p);
                [q[0] + r.sample(normal), q[1] + r.sample(normal)]
            })
            .collect();
        let fit = solve_landmark_transform(&world, &pixel).unwrap();
        sum_sq += fit.rms_residual_m.powi(2);
    }
    let rms = (sum_sq / 1000.0).sqrt();
    outcome(
        param_err < 1e-9 && rms <= 2.5,
        format!("noise-free max parameter error {param_err:.1e}; noisy RMS residual {rms:.3} m over 1000 trials"),
    )
}

fn offset_recovery() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for shift in [(2, -3), (-3, 1), (0, 3), (1, 1)] {
        let rep = recover_offset(&OffsetRecoveryConfig {
            shift,
            ..OffsetRecoveryConfig::default()
        })
        .unwrap();
        pass &= rep.final_error < 0.25;
        parts.push(format!(
            "{shift:?}: {:.3} cells (< 0.25 at step {})",
            rep.final_error,
            rep.steps_to_quarter_cell.map_or("-".into(), |s| s.to_string())
        ));
    }
    outcome(pass, format!("2000 steps; {}", parts.join(", ")))
}

fn ablation() -> (Outcome, Outcome) {
    let start = Instant::now();
    let spec = SceneSpec::default();
    let train = generate_scenes(&spec, 0..500).unwrap();
    let val = generate_scenes(&spec, 500..600).unwrap();
    let tc = benchmark_train_config();
    let base = FusionConfig::desk_scale();
    let results: Vec<VariantResult> = ABLATION
        .iter()
        .map(|v| {
            let res = run_variant(&base, v, &tc, &train, &val).unwrap();
            println!(
                "      {:26} mIoU {:.4}  ratio {:.3}  ({:.0} s)",
                res.name,
                res.miou(),
                res.range_ratio().unwrap_or(f64::NAN),
                res.train_seconds
            );
            res
        })
        .collect();
    let get = |name: &str| results.iter().find(|r| r.name == name).unwrap();
    let (none, concat, ma, noalign) = (
        get("none"),
        get("concat"),
        get("masked_attention"),
        get("masked_attention/no_align"),
    );
    let checks = [
        ("none < concat", none.miou() < concat.miou()),
        ("concat <= masked_attention", concat.miou() <= ma.miou()),
        ("align on >= off", ma.miou() >= noalign.miou()),
        ("masked_attention - none >= 5 pts", ma.miou() - none.miou() >= 0.05),
    ];
    let secs = start.elapsed().as_secs_f64();
    let ordering = outcome(
        checks.iter().all(|c| c.1) && secs < 7200.0,
        format!(
            "sat_offset_sigma {} m; {}; {:.0} s",
            spec.sat_offset_sigma,
            checks
                .iter()
                .map(|(n, ok)| format!("{n}: {}", if *ok { "ok" } else { "NO" }))
                .collect::<Vec<_>>()
                .join(", "),
            secs
        ),
    );
    let (r_none, r_fused) = (none.range_ratio().unwrap(), ma.range_ratio().unwrap());
    let ratio = outcome(
        r_fused > r_none,
        format!("mIoU(120x60)/mIoU(60x30): fused {r_fused:.3} vs none {r_none:.3}"),
    );
    (ordering, ratio)
}

fn line(points: &[(f64, f64)]) -> Vec<Point2> {
    points.iter().map(|&(x, y)| [x, y]).collect()
}

fn metric_fixtures() -> Outcome {
    let mut checks: Vec<(&str, f64, f64)> = Vec::new();
    let a = [1u8, 1, 0, 0, 2, 2];
    checks.push(("iou perfect", iou(&a, &a, 1).unwrap(), 1.0));
    checks.push(("iou disjoint", iou(&[1, 1, 0, 0], &[0, 0, 1, 1], 1).unwrap(), 0.0));
    checks.push(("iou one third", iou(&[1, 1, 0], &[0, 1, 1], 1).unwrap(), 1.0 / 3.0));

    let gt = vec![
        Instance::new(Class::Divider, line(&[(0.0, 0.0), (10.0, 0.0)]), 1.0),
        Instance::new(Class::Divider, line(&[(0.0, 5.0), (10.0, 5.0)]), 1.0),
        Instance::new(Class::Divider, line(&[(0.0, 10.0), (10.0, 10.0)]), 1.0),
    ];
    let th = [0.5, 1.0, 1.5];
    checks.push(("ap perfect", chamfer_ap(&gt, &gt, &th).unwrap().map, 1.0));
    let far: Vec<Instance> = gt
        .iter()
        .map(|g| {
            Instance::new(
                Class::Divider,
                g.points.iter().map(|p| [p[0] + 100.0, p[1]]).collect(),
                0.9,
            )
        })
        .collect();
    checks.push(("ap disjoint", chamfer_ap(&far, &gt, &th).unwrap().map, 0.0));
    checks.push(("ap one third", chamfer_ap(&gt[..1], &gt, &th).unwrap().map, 1.0 / 3.0));

    // parallel segments 0.7 m apart
    let shifted = line(&[(0.0, 0.7), (10.0, 0.7)]);
    let cd = chamfer_distance(&shifted, &gt[0].points).unwrap();
    let brute = {
        // densely sampled symmetric mean of nearest-point distances
        let sample = |l: &[Point2]| -> Vec<Point2> {
            (0..=2000)
                .map(|i| {
                    let t = i as f64 / 2000.0;
                    [l[0][0] + t * (l[1][0] - l[0][0]), l[0][1] + t * (l[1][1] - l[0][1])]
                })
                .collect()
        };
        let (pa, pb) = (sample(&shifted), sample(&gt[0].points));
        let directed = |x: &[Point2], y: &[Point2]| {
            x.iter()
                .map(|p| {
                    y.iter()
                        .map(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
                        .fold(f64::INFINITY, f64::min)
                })
                .sum::<f64>()
                / x.len() as f64
        };
        0.5 * (directed(&pa, &pb) + directed(&pb, &pa))
    };
    checks.push(("chamfer 0.7 m", cd, 0.7));
    checks.push(("chamfer vs brute force", cd, brute));
    let one = vec![Instance::new(Class::Divider, shifted, 1.0)];
    let per = chamfer_ap(&one, &gt[..1], &th).unwrap();
    let aps = per.per_class["Divider"].clone();
    checks.push(("ap@0.5 of 0.7 m pair", aps[0], 0.0));
    checks.push(("ap@1.0 of 0.7 m pair", aps[1], 1.0));
    checks.push(("ap@1.5 of 0.7 m pair", aps[2], 1.0));

    let bad: Vec<String> = checks
        .iter()
        .filter(|(_, got, want)| (got - want).abs() > 1e-9)
        .map(|(n, got, want)| format!("{n}: {got} != {want}"))
        .collect();
    outcome(
        bad.is_empty(),
        if bad.is_empty() {
            format!("{} fixtures exact to 1e-9", checks.len())
        } else {
            bad.join("; ")
        },
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |id: usize, name: &'static str, o: Outcome| {
        println!("{} {id:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, name, o));
    };
    report(1, "warp equals the literal double sum", warp_oracle());
    report(2, "identity warp", identity_warp());
    report(3, "gradient suite", gradient_suite());
    report(4, "mask semantics", mask_semantics());
    report(5, "distance-mask counts", distance_counts());
    report(6, "full-size shapes and forward time", full_scale_shapes());
    report(7, "landmark similarity fit", procrustes());
    report(8, "offset recovery", offset_recovery());
    let (ordering, ratio) = ablation();
    report(9, "ablation ordering", ordering);
    report(10, "range degradation", ratio);
    report(11, "metric fixtures", metric_fixtures());

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "\nacceptance: {}/{} passed",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}
