use std::collections::HashMap;

use super::ops;
use super::{Scalar, Tensor};
use crate::error::{dim_err, Error, Result};
use crate::params::{ParamId, ParamStore};

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[&Tensor<T>], &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>>>;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
    param: Option<ParamId>,
}

/// Reverse-mode tape.
///
/// Values are immutable once recorded. In inference mode no backward closures
/// are kept and [`Graph::backward`] is unavailable.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    track: bool,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Graph::backward`], keyed by node and by parameter.
pub struct Gradients<T: Scalar> {
    by_node: Vec<Option<Tensor<T>>>,
    by_param: HashMap<ParamId, usize>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_node.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.by_param.get(&id).and_then(|&n| self.by_node[n].as_ref())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.by_param
            .iter()
            .filter_map(|(&id, &n)| self.by_node[n].as_ref().map(|g| (id, g)))
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// A graph that records backward closures.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            track: true,
            params: HashMap::new(),
        }
    }

    /// A graph that only evaluates forward values.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            track: false,
            params: HashMap::new(),
        }
    }

    pub fn is_tracking(&self) -> bool {
        self.track
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn take(mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(T::zero()))
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            requires_grad: requires_grad && self.track,
            backward: None,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false, None)
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true, None)
    }

    /// The leaf holding parameter `id`; repeated calls return the same leaf
    /// so its gradient collects every use.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let trainable = store.is_trainable(id);
        let v = self.leaf(store.value(id).clone(), trainable, Some(id));
        self.params.insert(id, v);
        v
    }

    /// Records `value` computed from `parents`. `backward` maps the upstream
    /// gradient to one optional gradient per parent.
    pub fn record(
        &mut self,
        value: Tensor<T>,
        parents: &[Var],
        backward: impl Fn(&Tensor<T>, &[&Tensor<T>], &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> + 'static,
    ) -> Var {
        let requires_grad = self.track && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            requires_grad,
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn<T>),
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Backpropagates from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if !self.track {
            return Err(Error::Numeric("backward on an inference graph".into()));
        }
        let out = &self.nodes[output.0].value;
        if out.len() != 1 {
            return Err(dim_err!("backward needs a scalar output, got {:?}", out.shape()));
        }
        self.backward_with(output, Tensor::ones(out.shape()))
    }

    /// Backpropagates an explicit upstream gradient for `output`.
    pub fn backward_with(&self, output: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        self.nodes[output.0].value.expect_same_shape(&seed)?;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let inputs: Vec<&Tensor<T>> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let parent_grads = backward(&g, &inputs, &node.value)?;
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let (Some(pg), true) = (pg, self.nodes[p].requires_grad) else {
                    continue;
                };
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg)?,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        let by_param = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|id| (id, i)))
            .collect();
        Ok(Gradients {
            by_node: grads,
            by_param,
        })
    }

    // -----------------------------------------------------------------------
    // recorded operations

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.record(value, &[a, b], |g, x, _| {
            let (ga, gb) = ops::matmul_backward(x[0], x[1], g);
            Ok(vec![Some(ga), Some(gb)])
        }))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.record(value, &[a, b], |g, x, _| {
            let (ga, gb) = ops::matmul_nt_backward(x[0], x[1], g);
            Ok(vec![Some(ga), Some(gb)])
        }))
    }

    /// `x·w + b` for `x[n×d_in]`, `w[d_in×d_out]`, `b[d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row_bias(xw, b)
    }

    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let value = ops::add_row_bias(self.value(x), self.value(bias))?;
        Ok(self.record(value, &[x, bias], |g, _, _| {
            Ok(vec![Some(g.clone()), Some(ops::sum_rows(g))])
        }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.record(value, &[a, b], |g, _, _| Ok(vec![Some(g.clone()), Some(g.clone())])))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.record(value, &[a, b], |g, _, _| Ok(vec![Some(g.clone()), Some(g.map(|v| -v))])))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.record(value, &[a, b], |g, x, _| {
            Ok(vec![
                Some(g.zip_map(x[1], |gv, bv| gv * bv)?),
                Some(g.zip_map(x[0], |gv, av| gv * av)?),
            ])
        }))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v * s);
        self.record(value, &[x], move |g, _, _| Ok(vec![Some(g.map(|v| v * s))]))
    }

    /// `|x|`, with subgradient 0 at 0.
    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.abs());
        self.record(value, &[x], |g, x, _| {
            Ok(vec![Some(g.zip_map(x[0], |gv, xv| {
                if xv > T::zero() {
                    gv
                } else if xv < T::zero() {
                    -gv
                } else {
                    T::zero()
                }
            })?)])
        })
    }

    /// `max(x, 0)`, with subgradient 0 at 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        self.record(value, &[x], |g, x, _| {
            Ok(vec![Some(g.zip_map(x[0], |gv, xv| {
                if xv > T::zero() {
                    gv
                } else {
                    T::zero()
                }
            })?)])
        })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.tanh());
        self.record(value, &[x], |g, _, y| {
            Ok(vec![Some(g.zip_map(y, |gv, yv| gv * (T::one() - yv * yv))?)])
        })
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = ops::silu(self.value(x));
        self.record(value, &[x], |g, x, _| Ok(vec![Some(ops::silu_backward(x[0], g))]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = ops::sigmoid(self.value(x));
        self.record(value, &[x], |g, _, y| Ok(vec![Some(ops::sigmoid_backward(y, g))]))
    }

    pub fn log_clamped(&mut self, x: Var, floor: T) -> Var {
        let value = ops::log_clamped(self.value(x), floor);
        self.record(value, &[x], move |g, x, _| {
            Ok(vec![Some(ops::log_clamped_backward(x[0], g, floor))])
        })
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Var {
        let value = ops::softmax_lastdim(self.value(x));
        self.record(value, &[x], |g, _, y| {
            Ok(vec![Some(ops::softmax_lastdim_backward(y, g))])
        })
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let value = ops::conv2d(
            self.value(x),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let mut parents = vec![x, kernel];
        parents.extend(bias);
        let with_bias = bias.is_some();
        Ok(self.record(value, &parents, move |g, x, _| {
            let (gx, gw, gb) = ops::conv2d_backward(x[0], x[1], g, stride, pad, with_bias)?;
            let mut out = vec![Some(gx), Some(gw)];
            if with_bias {
                out.push(gb);
            }
            Ok(out)
        }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let orig = self.shape(x).to_vec();
        Ok(self.record(value, &[x], move |g, _, _| Ok(vec![Some(g.clone().reshape(&orig)?)])))
    }

    pub fn hwc_to_chw(&mut self, x: Var) -> Result<Var> {
        let value = ops::hwc_to_chw(self.value(x))?;
        Ok(self.record(value, &[x], |g, _, _| Ok(vec![Some(ops::chw_to_hwc(g)?)])))
    }

    pub fn chw_to_hwc(&mut self, x: Var) -> Result<Var> {
        let value = ops::chw_to_hwc(self.value(x))?;
        Ok(self.record(value, &[x], |g, _, _| Ok(vec![Some(ops::hwc_to_chw(g)?)])))
    }

    /// Concatenation along axis 0.
    pub fn concat_first(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::concat_first(self.value(a), self.value(b))?;
        let first = self.shape(a)[0];
        Ok(self.record(value, &[a, b], move |g, _, _| {
            let (ga, gb) = ops::split_first(g, first);
            Ok(vec![Some(ga), Some(gb)])
        }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = ops::slice_cols(self.value(x), start, len)?;
        let width = self.shape(x)[1];
        Ok(self.record(value, &[x], move |g, _, _| {
            let n = g.shape()[0];
            let mut out = Tensor::zeros(&[n, width]);
            for i in 0..n {
                out.data_mut()[i * width + start..i * width + start + len]
                    .copy_from_slice(&g.data()[i * len..(i + 1) * len]);
            }
            Ok(vec![Some(out)])
        }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = ops::concat_cols(&tensors)?;
        let widths: Vec<usize> = tensors.iter().map(|t| t.shape()[1]).collect();
        Ok(self.record(value, parts, move |g, _, _| {
            let mut start = 0;
            let mut out = Vec::with_capacity(widths.len());
            for &w in &widths {
                out.push(Some(ops::slice_cols(g, start, w)?));
                start += w;
            }
            Ok(out)
        }))
    }

    pub fn patchify(&mut self, x: Var, ph: usize, pw: usize) -> Result<Var> {
        let value = ops::patchify(self.value(x), ph, pw)?;
        let (h, w, c) = (self.shape(x)[0], self.shape(x)[1], self.shape(x)[2]);
        Ok(self.record(value, &[x], move |g, _, _| {
            Ok(vec![Some(ops::unpatchify(g, h, w, c, ph, pw)?)])
        }))
    }

    pub fn unpatchify(&mut self, tokens: Var, h: usize, w: usize, c: usize, ph: usize, pw: usize) -> Result<Var> {
        let value = ops::unpatchify(self.value(tokens), h, w, c, ph, pw)?;
        Ok(self.record(value, &[tokens], move |g, _, _| {
            Ok(vec![Some(ops::patchify(g, ph, pw)?)])
        }))
    }

    /// Adds `pe[Hg×Wg×C]` to every pixel of the matching patch of `x[H×W×C]`.
    pub fn add_patch_broadcast(&mut self, x: Var, pe: Var, ph: usize, pw: usize) -> Result<Var> {
        let value = ops::add_patch_broadcast(self.value(x), self.value(pe), ph, pw)?;
        Ok(self.record(value, &[x, pe], move |g, _, _| {
            Ok(vec![Some(g.clone()), Some(ops::patch_sum(g, ph, pw))])
        }))
    }

    pub fn patch_mean(&mut self, s: Var, ph: usize, pw: usize) -> Result<Var> {
        let value = ops::patch_mean(self.value(s), ph, pw)?;
        let (h, w) = (self.shape(s)[0], self.shape(s)[1]);
        Ok(self.record(value, &[s], move |g, _, _| {
            Ok(vec![Some(ops::patch_mean_backward(g, h, w, ph, pw))])
        }))
    }

    /// Repeats vector `v[M]` into `n` rows.
    pub fn broadcast_rows(&mut self, v: Var, n: usize) -> Var {
        let value = ops::broadcast_rows(self.value(v), n);
        self.record(value, &[v], |g, _, _| Ok(vec![Some(ops::sum_rows(g))]))
    }

    pub fn warp(&mut self, f: Var, delta: Var) -> Result<Var> {
        let value = ops::warp(self.value(f), self.value(delta))?;
        Ok(self.record(value, &[f, delta], |g, x, _| {
            let (gf, gd) = ops::warp_backward(x[0], x[1], g)?;
            Ok(vec![Some(gf), Some(gd)])
        }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let shape = self.shape(x).to_vec();
        self.record(value, &[x], move |g, _, _| {
            Ok(vec![Some(Tensor::full(&shape, g.data()[0]))])
        })
    }

    /// `Σ x ⊙ w` for a constant weight tensor; a random projection to a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).zip_map(&weights, |a, b| a * b)?.sum());
        Ok(self.record(value, &[x], move |g, _, _| {
            Ok(vec![Some(weights.map(|w| w * g.data()[0]))])
        }))
    }

    pub fn add_scalars(&mut self, parts: &[(Var, T)]) -> Result<Var> {
        let mut total = T::zero();
        for &(v, w) in parts {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(dim_err!("add_scalars expects scalars, got {:?}", t.shape()));
            }
            total += w * t.data()[0];
        }
        let weights: Vec<T> = parts.iter().map(|p| p.1).collect();
        let vars: Vec<Var> = parts.iter().map(|p| p.0).collect();
        Ok(self.record(Tensor::scalar(total), &vars, move |g, x, _| {
            Ok(weights
                .iter()
                .zip(x)
                .map(|(&w, xi)| Some(Tensor::full(xi.shape(), w * g.data()[0])))
                .collect())
        }))
    }

    /// Weighted softmax cross-entropy over `logits[K×H×W]`; returns a scalar.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u8], class_weights: &[T]) -> Result<Var> {
        let (loss, grad) = ops::softmax_cross_entropy(self.value(logits), targets, class_weights)?;
        Ok(self.record(Tensor::scalar(loss), &[logits], move |g, _, _| {
            Ok(vec![Some(grad.map(|v| v * g.data()[0]))])
        }))
    }

    /// Mean binary cross-entropy with logits; returns a scalar.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let (loss, grad) = ops::bce_with_logits(self.value(logits), targets)?;
        Ok(self.record(Tensor::scalar(loss), &[logits], move |g, _, _| {
            Ok(vec![Some(grad.map(|v| v * g.data()[0]))])
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradients_accumulate_over_shared_inputs() {
        // y = sum(x ⊙ x) → dy/dx = 2x, accumulated from both parents
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let y = g.sum(sq);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::ones(&[3]));
        let x = g.input(Tensor::ones(&[3]));
        let s = g.add(c, x).unwrap();
        let y = g.sum(s);
        let grads = g.backward(y).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 3]);
    }

    #[test]
    fn inference_graph_refuses_backward() {
        let mut g = Graph::<f32>::inference();
        let x = g.input(Tensor::ones(&[1]));
        assert!(g.backward(x).is_err());
    }
}
