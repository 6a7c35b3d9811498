#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use satfuse::fusion::bev::{predict_offsets, task_head, HeadParams, OffsetParams};
use satfuse::fusion::feature::{masked_cross_attention_block, patch_embed, AttentionSettings, BlockParams};
use satfuse::fusion::PatchConfig;
use satfuse::params::{ParamId, ParamStore};
use satfuse::tensor::gradcheck::{finite_diff_grad, relative_error};
use satfuse::tensor::{ops, Graph, Tensor, Var};
use satfuse::Result;

pub const FD_EPS: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

type Build = Box<dyn Fn(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>>;

/// A differentiable function of some input tensors and parameters, reduced
/// to a scalar by a fixed random projection of its output.
pub struct GradCase {
    pub inputs: Vec<Tensor<f64>>,
    pub store: ParamStore<f64>,
    pub build: Build,
    pub proj_seed: u64,
}

fn objective(case: &GradCase, inputs: &[Tensor<f64>], store: &ParamStore<f64>) -> Result<(Graph<f64>, Vec<Var>, Var)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = (case.build)(&mut g, store, &vars)?;
    let mut r = rng(case.proj_seed);
    let w = rand_tensor(&mut r, g.shape(out), 1.0);
    let loss = g.weighted_sum(out, w)?;
    Ok((g, vars, loss))
}

/// Largest relative error between analytic and central-difference gradients
/// over every input and every parameter of `case`.
pub fn max_grad_error(case: &GradCase) -> Result<f64> {
    let (g, vars, loss) = objective(case, &case.inputs, &case.store)?;
    let grads = g.backward(loss)?;
    let mut worst = 0.0f64;
    for (i, x) in case.inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        let numeric = finite_diff_grad(
            |t| {
                let mut inputs = case.inputs.clone();
                inputs[i] = t.clone();
                let (g, _, l) = objective(case, &inputs, &case.store)?;
                Ok(g.value(l).data()[0])
            },
            x,
            FD_EPS,
        )?;
        worst = worst.max(relative_error(&analytic, &numeric, 1e-7));
    }
    let ids: Vec<ParamId> = case.store.ids().collect();
    for id in ids {
        let analytic = grads
            .param(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(case.store.value(id).shape()));
        let numeric = finite_diff_grad(
            |t| {
                let mut store = case.store.clone();
                *store.value_mut(id) = t.clone();
                let (g, _, l) = objective(case, &case.inputs, &store)?;
                Ok(g.value(l).data()[0])
            },
            case.store.value(id),
            FD_EPS,
        )?;
        worst = worst.max(relative_error(&analytic, &numeric, 1e-7));
    }
    Ok(worst)
}

pub const GRAD_OPS: [&str; 8] = [
    "matmul",
    "softmax",
    "conv2d",
    "patch_embed",
    "masked_cross_attention_block",
    "warp",
    "predict_offsets",
    "task_head",
];

/// Offsets whose fractional part stays at least 1e-2 away from 0, so no
/// finite-difference probe crosses a kink of the bilinear kernel.
pub fn smooth_offsets(rng: &mut impl Rng, h: usize, w: usize, max: f64) -> Tensor<f64> {
    Tensor::from_fn(&[h, w, 2], |_| loop {
        let d: f64 = rng.gen_range(-max..max);
        let frac = d - d.floor();
        if frac > 1e-2 && frac < 1.0 - 1e-2 {
            break d;
        }
    })
}

fn randomize(store: &mut ParamStore<f64>, rng: &mut impl Rng, scale: f64) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = rand_tensor(rng, &shape, scale);
    }
}

fn relu_clear(pre: &Tensor<f64>) -> bool {
    pre.data().iter().all(|v| v.abs() > 1e-3)
}

/// Random small instance number `trial` of gradient-suite operation `op`.
pub fn grad_case(op: &str, trial: u64) -> GradCase {
    let mut r = rng(0x6752_4144 ^ (trial * 7919) ^ (op.len() as u64) << 40);
    let proj_seed = trial + 1000;
    match op {
        "matmul" => {
            let (n, k, m) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5));
            GradCase {
                inputs: vec![rand_tensor(&mut r, &[n, k], 1.0), rand_tensor(&mut r, &[k, m], 1.0)],
                store: ParamStore::new(),
                build: Box::new(|g, _, v| g.matmul(v[0], v[1])),
                proj_seed,
            }
        }
        "softmax" => {
            let (n, d) = (r.gen_range(1..5), r.gen_range(2..7));
            GradCase {
                inputs: vec![rand_tensor(&mut r, &[n, d], 3.0)],
                store: ParamStore::new(),
                build: Box::new(|g, _, v| Ok(g.softmax_lastdim(v[0]))),
                proj_seed,
            }
        }
        "conv2d" => {
            let (ci, co) = (r.gen_range(1..4), r.gen_range(1..4));
            let k = [1, 3][r.gen_range(0..2)];
            let stride = r.gen_range(1..3);
            let pad = r.gen_range(0..=k / 2);
            let (h, w) = (r.gen_range(k..k + 4), r.gen_range(k..k + 4));
            GradCase {
                inputs: vec![
                    rand_tensor(&mut r, &[ci, h, w], 1.0),
                    rand_tensor(&mut r, &[co, ci, k, k], 1.0),
                    rand_tensor(&mut r, &[co], 1.0),
                ],
                store: ParamStore::new(),
                build: Box::new(move |g, _, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad)),
                proj_seed,
            }
        }
        "patch_embed" => {
            let patch = (r.gen_range(1..3), r.gen_range(1..3));
            let grid = (r.gen_range(1..3), r.gen_range(1..4));
            let c = r.gen_range(1..3);
            let c_h = r.gen_range(1..5);
            let cfg = PatchConfig {
                patch,
                grid,
                model_dim: c_h,
                channels: c,
                extent_m: (10.0, 20.0),
            };
            let (h, w) = cfg.feature_dims();
            GradCase {
                inputs: vec![
                    rand_tensor(&mut r, &[h, w, c], 1.0),
                    rand_tensor(&mut r, &[grid.0, grid.1, c], 0.5),
                    rand_tensor(&mut r, &[cfg.patch_len(), c_h], 1.0),
                    rand_tensor(&mut r, &[c_h], 1.0),
                ],
                store: ParamStore::new(),
                build: Box::new(move |g, _, v| patch_embed(g, v[0], v[1], v[2], v[3], &cfg)),
                proj_seed,
            }
        }
        "masked_cross_attention_block" => {
            let heads = r.gen_range(1..3);
            let c_h = heads * r.gen_range(1..4);
            let (n, m) = (r.gen_range(1..5), r.gen_range(1..5));
            let mut store = ParamStore::new();
            let block = BlockParams::init(&mut store, "blk", c_h, &mut r);
            let mask = Tensor::from_fn(&[n, m], |i| {
                // the first key of every row stays visible
                if i % m != 0 && r.gen_bool(0.3) {
                    f64::NEG_INFINITY
                } else {
                    0.0
                }
            });
            let settings = AttentionSettings {
                heads,
                scale_scores: r.gen_bool(0.5),
            };
            GradCase {
                inputs: vec![rand_tensor(&mut r, &[n, c_h], 1.0), rand_tensor(&mut r, &[m, c_h], 1.0)],
                store,
                build: Box::new(move |g, s, v| {
                    let mk = g.constant(mask.clone());
                    Ok(masked_cross_attention_block(g, s, &block, v[0], v[1], mk, settings, 0)?.out)
                }),
                proj_seed,
            }
        }
        "warp" => {
            let (h, w, c) = (r.gen_range(1..6), r.gen_range(1..6), r.gen_range(1..3));
            GradCase {
                inputs: vec![rand_tensor(&mut r, &[h, w, c], 1.0), smooth_offsets(&mut r, h, w, 2.0)],
                store: ParamStore::new(),
                build: Box::new(|g, _, v| g.warp(v[0], v[1])),
                proj_seed,
            }
        }
        "predict_offsets" => loop {
            let (h, w, c, hidden) = (4, 6, 3, r.gen_range(2..5));
            let mut store = ParamStore::new();
            let limit = r.gen_bool(0.5).then_some(1.5);
            let p = OffsetParams::init(&mut store, c, hidden, &mut r).with_limit(limit);
            randomize(&mut store, &mut r, 0.5);
            let inputs = vec![
                rand_tensor(&mut r, &[c, h, w], 1.0),
                rand_tensor(&mut r, &[c, h, w], 1.0),
            ];
            let cat = Tensor::new(&[2 * c, h, w], [inputs[0].data(), inputs[1].data()].concat()).unwrap();
            let pre1 = ops::conv2d(&cat, store.value(p.convs[0].w), Some(store.value(p.convs[0].b)), 1, 1).unwrap();
            let act1 = pre1.map(|v| v.max(0.0));
            let pre2 = ops::conv2d(&act1, store.value(p.convs[1].w), Some(store.value(p.convs[1].b)), 1, 1).unwrap();
            if !(relu_clear(&pre1) && relu_clear(&pre2)) {
                continue;
            }
            break GradCase {
                inputs,
                store,
                build: Box::new(move |g, s, v| predict_offsets(g, s, &p, v[0], v[1])),
                proj_seed,
            };
        },
        "task_head" => {
            let (h, w, c_in, hidden, k) = (4, 6, r.gen_range(1..4), r.gen_range(2..5), 4);
            let mut store = ParamStore::new();
            let p = HeadParams::init(&mut store, c_in, hidden, k, &mut r);
            GradCase {
                inputs: vec![rand_tensor(&mut r, &[c_in, h, w], 1.0)],
                store,
                build: Box::new(move |g, s, v| task_head(g, s, &p, v[0])),
                proj_seed,
            }
        }
        _ => panic!("unknown op {op}"),
    }
}

/// Literal double sum of the bilinear warp kernel over every source cell.
pub fn warp_double_sum(f: &Tensor<f64>, delta: &Tensor<f64>) -> Tensor<f64> {
    let (h, w, c) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let mut out = Tensor::zeros(&[h, w, c]);
    for y in 0..h {
        for x in 0..w {
            let dy = delta.at(&[y, x, 0]);
            let dx = delta.at(&[y, x, 1]);
            for yy in 0..h {
                for xx in 0..w {
                    let ky = (1.0 - (y as f64 + dy - yy as f64).abs()).max(0.0);
                    let kx = (1.0 - (x as f64 + dx - xx as f64).abs()).max(0.0);
                    for ch in 0..c {
                        let v = out.at(&[y, x, ch]) + f.at(&[yy, xx, ch]) * ky * kx;
                        out.set(&[y, x, ch], v);
                    }
                }
            }
        }
    }
    out
}
