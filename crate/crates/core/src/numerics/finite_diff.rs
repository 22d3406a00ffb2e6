//! Central-difference gradient oracle, independent of the graph code.

use crate::scalar::Scalar;

/// Default step for 64-bit checks.
pub const DEFAULT_EPS: f64 = 1e-5;

/// `(f(θ + ε·e_i) − f(θ − ε·e_i)) / 2ε` for every coordinate `i`.
pub fn finite_diff<T: Scalar>(mut f: impl FnMut(&[T]) -> T, theta: &[T], eps: T) -> Vec<T> {
    let mut probe = theta.to_vec();
    (0..theta.len())
        .map(|i| partial(&mut f, &mut probe, i, eps))
        .collect()
}

/// Central difference along a single coordinate; `probe` is restored.
pub fn partial<T: Scalar>(f: &mut impl FnMut(&[T]) -> T, probe: &mut [T], i: usize, eps: T) -> T {
    let orig = probe[i];
    probe[i] = orig + eps;
    let up = f(probe);
    probe[i] = orig - eps;
    let down = f(probe);
    probe[i] = orig;
    (up - down) / (eps + eps)
}

/// Relative error `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_has_zero_gradient() {
        let g = finite_diff(|_: &[f64]| 4.2, &[1.0, -2.0, 3.0], 1e-5);
        assert_eq!(g, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn linear_sum_gives_ones() {
        let g = finite_diff(|t: &[f64]| t.iter().sum(), &[0.3, -1.7, 9.0, 2.5], 1e-5);
        for v in g {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn product_rule() {
        let g = finite_diff(|t: &[f64]| t[0] * t[1], &[3.0, 5.0], 1e-5);
        assert!((g[0] - 5.0).abs() < 1e-7);
        assert!((g[1] - 3.0).abs() < 1e-7);
    }
}
