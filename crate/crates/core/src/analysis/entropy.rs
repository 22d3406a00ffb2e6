use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::AttentionRecord;
use crate::scalar::Scalar;

/// Accepted deviation of a probability row's sum from 1.
pub fn distribution_tolerance<T: Scalar>(n: usize) -> f64 {
    (8.0 * n as f64 * T::epsilon().as_f64()).max(1e-6)
}

pub(crate) fn check_distribution<T: Scalar>(a: &[T], op: &'static str) -> Result<()> {
    if a.is_empty() {
        return Err(Error::invalid(op, "empty distribution"));
    }
    if a.iter().any(|&v| !(v >= T::zero()) || !v.is_finite()) {
        return Err(Error::invalid(op, "entries must be finite and non-negative"));
    }
    let total: f64 = a.iter().map(|v| v.as_f64()).sum();
    if (total - 1.0).abs() > distribution_tolerance::<T>(a.len()) {
        return Err(Error::invalid(op, format!("entries sum to {total}")));
    }
    Ok(())
}

/// Shannon entropy in nats, with `0 · ln 0 = 0`.
pub fn attention_entropy<T: Scalar>(a: &[T]) -> Result<T> {
    check_distribution(a, "attention_entropy")?;
    let h = a
        .iter()
        .filter(|&&p| p > T::zero())
        .map(|&p| -p * p.ln())
        .sum::<T>();
    // Clamp rounding noise so the result stays inside [0, ln N].
    Ok(h.max(T::zero()).min(max_entropy::<T>(a.len())))
}

/// `ln N`, the entropy of the uniform distribution on `N` outcomes.
pub fn max_entropy<T: Scalar>(n: usize) -> T {
    T::of(n as f64).ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Excludes {
    /// Skip the class token's attention row.
    pub class_token: bool,
    /// Drop this many trailing layers.
    pub last_layers: usize,
}

impl Default for Excludes {
    fn default() -> Self {
        Excludes { class_token: false, last_layers: 1 }
    }
}

impl Excludes {
    pub const NONE: Excludes = Excludes { class_token: false, last_layers: 0 };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyProfile {
    /// Mean row entropy (nats) per kept layer.
    pub per_layer: Vec<f64>,
    pub model_tag: String,
    pub excludes: Excludes,
    /// Row length `N` of the recorded maps.
    pub tokens: usize,
}

impl EntropyProfile {
    pub fn bound(&self) -> f64 {
        (self.tokens as f64).ln()
    }
}

/// Per-layer mean of row entropies over all heads, samples and kept rows.
pub fn entropy_profile<T: Scalar>(
    records: &[AttentionRecord<T>],
    excludes: Excludes,
    model_tag: &str,
) -> Result<EntropyProfile> {
    let first = records
        .first()
        .ok_or_else(|| Error::invalid("entropy_profile", "no attention records"))?;
    let tokens = first.matrix.shape()[1];
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in records {
        let (n, m) = r.matrix.dims2()?;
        if m != tokens {
            return Err(Error::shape("entropy_profile", "records of different lengths"));
        }
        let entry = sums.entry(r.layer).or_default();
        for i in usize::from(excludes.class_token)..n {
            entry.0 += attention_entropy(r.matrix.row(i))?.as_f64();
            entry.1 += 1;
        }
    }
    let layers = sums.keys().next_back().map_or(0, |&l| l + 1);
    let kept = layers.saturating_sub(excludes.last_layers);
    let per_layer = (0..kept)
        .map(|l| {
            sums.get(&l)
                .filter(|(_, c)| *c > 0)
                .map(|(s, c)| s / *c as f64)
                .ok_or_else(|| Error::invalid("entropy_profile", format!("no rows recorded for layer {l}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EntropyProfile { per_layer, model_tag: model_tag.to_string(), excludes, tokens })
}
