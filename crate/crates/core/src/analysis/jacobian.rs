use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

use super::entropy::check_distribution;

fn check_lambda<T: Scalar>(lambda: T, op: &'static str) -> Result<()> {
    if lambda > T::zero() && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(op, format!("lambda must be positive, got {lambda}")))
    }
}

/// `J_jk = λ (1[j=k] a_j − a_j a_k)`, the derivative of `softmax(λ s)` with
/// respect to `s` evaluated where the output is `a`.
pub fn softmax_jacobian<T: Scalar>(a: &[T], lambda: T) -> Result<Tensor<T>> {
    check_distribution(a, "softmax_jacobian")?;
    check_lambda(lambda, "softmax_jacobian")?;
    let n = a.len();
    Ok(Tensor::from_fn(&[n, n], |idx| {
        let (j, k) = (idx / n, idx % n);
        let diag = if j == k { a[j] } else { T::zero() };
        lambda * (diag - a[j] * a[k])
    }))
}

/// Nuclear norm of the softmax Jacobian via its trace, `Σ_j λ (a_j − a_j²)`.
pub fn nuclear_norm_analytic<T: Scalar>(a: &[T], lambda: T) -> Result<T> {
    check_distribution(a, "nuclear_norm_analytic")?;
    check_lambda(lambda, "nuclear_norm_analytic")?;
    Ok(trace_value(a, lambda))
}

fn trace_value<T: Scalar>(a: &[T], lambda: T) -> T {
    lambda * a.iter().map(|&p| p - p * p).sum::<T>()
}

/// `λ (1 − 1/N)`, the value at the uniform distribution.
pub fn uniform_nuclear_norm(n: usize, lambda: f64) -> f64 {
    lambda * (1.0 - 1.0 / n as f64)
}

#[derive(Clone, Debug, Serialize)]
pub struct MaximalityReport {
    pub n: usize,
    pub lambda: f64,
    pub evaluated: usize,
    /// `λ (1 − 1/N)`.
    pub bound: f64,
    /// Trace formula evaluated at the uniform distribution.
    pub uniform_value: f64,
    pub max_found: f64,
    pub argmax: Vec<f64>,
    /// `bound − max_found`; negative means a violation.
    pub margin: f64,
    /// Points whose value exceeded `bound + 1e-12`.
    pub violations: usize,
}

/// Random points on the simplex (Dirichlet with a concentration that varies
/// per draw, so both spread-out and peaked distributions are covered), plus
/// every vertex and every edge midpoint, searched for a nuclear norm above
/// the uniform value.
pub fn verify_uniform_maximality(n: usize, lambda: f64, trials: usize, seed: u64) -> Result<MaximalityReport> {
    if n < 2 {
        return Err(Error::invalid("verify_uniform_maximality", "need N ≥ 2"));
    }
    check_lambda(lambda, "verify_uniform_maximality")?;
    let bound = uniform_nuclear_norm(n, lambda);
    let uniform = vec![1.0 / n as f64; n];
    let uniform_value = trace_value(&uniform, lambda);

    let mut best = (f64::NEG_INFINITY, Vec::new());
    let mut violations = 0;
    let mut evaluated = 0;
    let mut consider = |a: &[f64]| {
        let v = trace_value(a, lambda);
        evaluated += 1;
        if v > bound + 1e-12 {
            violations += 1;
        }
        if v > best.0 {
            best = (v, a.to_vec());
        }
    };

    let mut point = vec![0.0; n];
    for i in 0..n {
        point.fill(0.0);
        point[i] = 1.0;
        consider(&point);
        for j in i + 1..n {
            point.fill(0.0);
            point[i] = 0.5;
            point[j] = 0.5;
            consider(&point);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..trials {
        let alpha = 10f64.powf(rng.random_range(-2.0..2.0));
        let gamma = Gamma::new(alpha, 1.0).expect("positive shape");
        let mut total = 0.0;
        for p in point.iter_mut() {
            *p = gamma.sample(&mut rng);
            total += *p;
        }
        if !(total > 0.0) {
            continue;
        }
        point.iter_mut().for_each(|p| *p /= total);
        consider(&point);
    }

    let (max_found, argmax) = best;
    Ok(MaximalityReport {
        n,
        lambda,
        evaluated,
        bound,
        uniform_value,
        max_found,
        argmax,
        margin: bound - max_found,
        violations,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NuclearNormStats {
    pub layer: usize,
    pub mean: f64,
    pub max: f64,
    /// `λ (1 − 1/N)`.
    pub bound: f64,
}

/// Nuclear norm of the softmax Jacobian at every observed attention row,
/// summarised per layer.
pub fn nuclear_norm_by_layer<T: Scalar>(
    records: &[crate::model::AttentionRecord<T>],
    lambda: f64,
) -> Result<Vec<NuclearNormStats>> {
    let mut acc: std::collections::BTreeMap<usize, (f64, f64, usize, usize)> = Default::default();
    for r in records {
        let (n, _) = r.matrix.dims2()?;
        let e = acc.entry(r.layer).or_insert((0.0, f64::NEG_INFINITY, 0, n));
        for i in 0..n {
            let v = nuclear_norm_analytic(r.matrix.row(i), T::of(lambda))?.as_f64();
            e.0 += v;
            e.1 = e.1.max(v);
            e.2 += 1;
        }
    }
    Ok(acc
        .into_iter()
        .map(|(layer, (sum, max, count, n))| NuclearNormStats {
            layer,
            mean: sum / count as f64,
            max,
            bound: uniform_nuclear_norm(n, lambda),
        })
        .collect())
}
