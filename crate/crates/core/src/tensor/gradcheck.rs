//! Central finite differences, used as an independent oracle for the
//! analytic backward kernels.

use super::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-4;

/// `(f(x + eps·eᵢ) − f(x − eps·eᵢ)) / (2·eps)` for every element `i` of `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor<f64>, eps: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Numeric(format!(
            "finite difference step must be positive, got {eps}"
        )));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&mut f, &probe, i)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&mut f, &probe, i)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

fn eval<F>(f: &mut F, x: &Tensor<f64>, i: usize) -> Result<f64>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    let v = f(x)?;
    if !v.is_finite() {
        return Err(Error::Numeric(format!("objective is {v} when perturbing element {i}")));
    }
    Ok(v)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute difference norm when both are
/// below `floor`.
pub fn relative_error(a: &Tensor<f64>, b: &Tensor<f64>, floor: f64) -> f64 {
    let norm = |t: &[f64]| t.iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = norm(a.data()).max(norm(b.data()));
    if scale < floor {
        diff
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.3 - 1.0);
        let g = finite_diff_grad(|t| Ok(t.sum()), &x, DEFAULT_EPS).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn sum_of_squares() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x, DEFAULT_EPS).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-6);
        assert!((g.data()[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_non_finite_objective() {
        let x = Tensor::ones(&[1]);
        assert!(finite_diff_grad(|_| Ok(f64::NAN), &x, DEFAULT_EPS).is_err());
        assert!(finite_diff_grad(|t| Ok(t.sum()), &x, 0.0).is_err());
    }

    #[test]
    fn softmax_cross_oracle() {
        // weighted sum of softmax outputs; plain sum has a zero gradient
        let x = Tensor::from_fn(&[3, 4], |i| ((i * 7) % 5) as f64 * 0.4 - 0.8);
        let w = Tensor::from_fn(&[3, 4], |i| (i as f64 * 1.3).sin());
        let numeric = finite_diff_grad(
            |t| Ok(ops::softmax_lastdim(t).zip_map(&w, |a, b| a * b)?.sum()),
            &x,
            DEFAULT_EPS,
        )
        .unwrap();
        let y = ops::softmax_lastdim(&x);
        let analytic = ops::softmax_lastdim_backward(&y, &w);
        assert!(relative_error(&analytic, &numeric, 1e-12) < 1e-5);

        // f = sum ∘ softmax is constant, so both routes give ≈ 0
        let numeric = finite_diff_grad(|t| Ok(ops::softmax_lastdim(t).sum()), &x, DEFAULT_EPS).unwrap();
        let analytic = ops::softmax_lastdim_backward(&y, &Tensor::ones(&[3, 4]));
        assert!(numeric.max_abs() < 1e-9 && analytic.max_abs() < 1e-12);
    }
}
