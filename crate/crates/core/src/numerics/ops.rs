//! Value-level forward functions. The autodiff graph reuses these for its
//! forward pass, and tests use them as the plain-math reference.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::tensor::Tensor;

/// Row-wise softmax of `lambda · s` over the last axis, stabilised by
/// subtracting each row's maximum.
pub fn softmax_rows<T: Scalar>(s: &Tensor<T>, lambda: T) -> Result<Tensor<T>> {
    if !(lambda > T::zero()) || !lambda.is_finite() {
        return Err(Error::invalid("softmax_rows", format!("lambda must be positive, got {lambda}")));
    }
    s.ensure_finite("softmax_rows")?;
    let cols = *s.shape().last().expect("tensor has at least one axis");
    let mut out = s.data().to_vec();
    for row in out.chunks_mut(cols) {
        softmax_in_place(row, lambda);
    }
    Tensor::new(s.shape().to_vec(), out)
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T], lambda: T) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (lambda * (*v - max)).exp();
        total += *v;
    }
    let inv = T::one() / total;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Layer normalisation of one vector.
pub fn layer_norm<T: Scalar>(x: &[T], gamma: &[T], beta: &[T], eps: T) -> Result<Vec<T>> {
    if x.is_empty() || gamma.len() != x.len() || beta.len() != x.len() {
        return Err(Error::shape(
            "layer_norm",
            format!("x has {}, gamma {}, beta {}", x.len(), gamma.len(), beta.len()),
        ));
    }
    if eps < T::zero() {
        return Err(Error::invalid("layer_norm", "eps must be non-negative"));
    }
    let (xhat, _) = normalize(x, eps);
    Ok(xhat.iter().zip(gamma).zip(beta).map(|((&h, &g), &b)| g * h + b).collect())
}

/// Returns `(x − mean) · rstd` and `rstd = 1/sqrt(var + eps)`. A zero-variance
/// input with `eps = 0` yields a zero vector.
pub(crate) fn normalize<T: Scalar>(x: &[T], eps: T) -> (Vec<T>, T) {
    let n = T::of(x.len() as f64);
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let denom = (var + eps).sqrt();
    let rstd = if denom > T::zero() { T::one() / denom } else { T::zero() };
    (x.iter().map(|&v| (v - mean) * rstd).collect(), rstd)
}

/// Standard normal CDF.
pub fn phi<T: Scalar>(x: T) -> T {
    T::of(0.5) * (T::one() + (x / T::of(std::f64::consts::SQRT_2)).erf())
}

/// Exact GELU, `x · Φ(x)`.
pub fn gelu<T: Scalar>(x: T) -> T {
    x * phi(x)
}

/// d/dx of `x · Φ(x)`.
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let pdf = (-(x * x) * T::of(0.5)).exp() / T::of((2.0 * std::f64::consts::PI).sqrt());
    phi(x) + x * pdf
}

pub fn gelu_tensor<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.ensure_finite("gelu")?;
    Ok(x.map(gelu))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_zero_row_is_uniform() {
        let s = Tensor::from_rows(&[vec![0.0f64, 0.0, 0.0]]).unwrap();
        let a = softmax_rows(&s, 1.0).unwrap();
        for &v in a.data() {
            assert!(close(v, 1.0 / 3.0, 1e-15));
        }
    }

    #[test]
    fn softmax_ln2_gives_one_third_two_thirds() {
        let s = Tensor::from_rows(&[vec![0.0f64, 2f64.ln()]]).unwrap();
        let a = softmax_rows(&s, 1.0).unwrap();
        assert!(close(a.data()[0], 1.0 / 3.0, 1e-15));
        assert!(close(a.data()[1], 2.0 / 3.0, 1e-15));
    }

    #[test]
    fn softmax_tiny_lambda_is_nearly_uniform() {
        let s = Tensor::from_rows(&[vec![5.0f64, -3.0]]).unwrap();
        let a = softmax_rows(&s, 1e-12).unwrap();
        assert!(close(a.data()[0], 0.5, 1e-9));
        assert!(close(a.data()[1], 0.5, 1e-9));
    }

    #[test]
    fn softmax_rejects_bad_input() {
        let s = Tensor::from_rows(&[vec![f64::NAN, 0.0]]).unwrap();
        assert!(matches!(softmax_rows(&s, 1.0), Err(Error::InvalidInput { .. })));
        let s = Tensor::from_rows(&[vec![0.0f64, 0.0]]).unwrap();
        assert!(softmax_rows(&s, 0.0).is_err());
        assert!(softmax_rows(&s, -1.0).is_err());
    }

    #[test]
    fn softmax_extreme_logits_stay_finite() {
        let s = Tensor::from_rows(&[vec![1e300f64, -1e300, 0.0]]).unwrap();
        let a = softmax_rows(&s, 1.0).unwrap();
        assert!(a.is_finite());
        assert_eq!(a.data()[0], 1.0);
    }

    #[test]
    fn layer_norm_examples() {
        let out = layer_norm(&[4.0f64; 5], &[1.0; 5], &[0.0; 5], 1e-5).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));

        let out = layer_norm(&[1.0f64, -1.0], &[1.0, 1.0], &[0.0, 0.0], 0.0).unwrap();
        assert_eq!(out, vec![1.0, -1.0]);

        let out = layer_norm(&[3.0f64, 5.0], &[2.0, 2.0], &[1.0, 1.0], 0.0).unwrap();
        assert_eq!(out, vec![-1.0, 3.0]);
    }

    #[test]
    fn layer_norm_zero_mean_output() {
        let x = [0.3f64, -2.0, 7.5, 1.25, 0.0, -0.7];
        let out = layer_norm(&x, &[1.0; 6], &[0.0; 6], 1e-6).unwrap();
        let mean: f64 = out.iter().sum::<f64>() / 6.0;
        assert!(mean.abs() < 1e-10);
    }

    #[test]
    fn layer_norm_shape_mismatch() {
        assert!(layer_norm(&[1.0f64, 2.0], &[1.0], &[0.0, 0.0], 1e-5).is_err());
        assert!(layer_norm::<f64>(&[], &[], &[], 1e-5).is_err());
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!(close(gelu(10.0f64), 10.0, 1e-6));
        assert!(close(gelu(1.0f64), 0.841345, 1e-5));
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.7, 2.2] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!(close(gelu_grad(x), fd, 1e-8), "x={x}");
        }
    }
}
