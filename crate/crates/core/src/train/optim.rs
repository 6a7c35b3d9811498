use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Adam with bias correction. Frozen parameters are skipped and keep their
/// moment buffers at zero.
#[derive(Debug, Clone)]
pub struct Adam<T: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || {
            store
                .ids()
                .map(|id| Tensor::zeros(store.value(id).shape()))
                .collect::<Vec<_>>()
        };
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update from the gradients accumulated in `store`.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !store.is_trainable(id) {
                continue;
            }
            let grad = store.grad(id).clone();
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let value = store.value_mut(id);
            for (((p, &g), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let g = g.as_f64();
                let mi = b1 * m.as_f64() + (1.0 - b1) * g;
                let vi = b2 * v.as_f64() + (1.0 - b2) * g * g;
                *m = T::of(mi);
                *v = T::of(vi);
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                if update != 0.0 {
                    *p = T::of(p.as_f64() - update);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("x", Tensor::new(&[2], vec![1.0, -1.0]).unwrap());
        s.accumulate_tensor(id, &Tensor::new(&[2], vec![3.0, -0.5]).unwrap())
            .unwrap();
        let mut adam = Adam::new(&s);
        adam.step(&mut s, 0.1);
        let x = s.value(id).data();
        assert!((x[0] - 0.9).abs() < 1e-6 && (x[1] + 0.9).abs() < 1e-6, "{x:?}");
    }

    #[test]
    fn frozen_and_zero_lr_leave_values_untouched() {
        let mut s = ParamStore::<f32>::new();
        let a = s.add("a.w", Tensor::new(&[1], vec![0.3]).unwrap());
        let b = s.add("b.w", Tensor::new(&[1], vec![0.7]).unwrap());
        s.accumulate_tensor(a, &Tensor::ones(&[1])).unwrap();
        s.accumulate_tensor(b, &Tensor::ones(&[1])).unwrap();
        let before = s.fingerprint();
        Adam::new(&s).step(&mut s, 0.0);
        assert_eq!(s.fingerprint(), before);
        s.train_only(&["a."]);
        Adam::new(&s).step(&mut s, 0.1);
        assert_eq!(s.value(b).data(), &[0.7]);
        assert_ne!(s.value(a).data(), &[0.3]);
    }
}
