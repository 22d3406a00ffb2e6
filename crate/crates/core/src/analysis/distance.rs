use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::AttentionRecord;
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Normalised `(row, col)` grid coordinates of the spatial tokens, in
/// `[0, 1]`, row-major. The class token has no position.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenPositions {
    points: Vec<[f64; 2]>,
}

impl TokenPositions {
    pub fn grid(side: usize) -> Self {
        let denom = side.saturating_sub(1).max(1) as f64;
        let points = (0..side * side)
            .map(|i| [(i / side) as f64 / denom, (i % side) as f64 / denom])
            .collect();
        TokenPositions { points }
    }

    pub fn from_points(points: Vec<[f64; 2]>) -> Self {
        TokenPositions { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn scaled(&self, factor: f64) -> Self {
        TokenPositions { points: self.points.iter().map(|p| [p[0] * factor, p[1] * factor]).collect() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DistanceMode {
    /// Raw attention weights.
    #[default]
    Raw,
    /// Weights renormalised over the other spatial tokens of each row.
    Renormalized,
}

/// Mean over ordered spatial pairs `i ≠ j` of `a_ij · ‖p_i − p_j‖₁`. Row and
/// column 0 (the class token) are skipped.
pub fn relative_distance<T: Scalar>(a: &Tensor<T>, positions: &TokenPositions, mode: DistanceMode) -> Result<f64> {
    let (n, m) = a.dims2()?;
    let p = positions.len();
    if n != m || n != p + 1 {
        return Err(Error::shape(
            "relative_distance",
            format!("attention [{n},{m}] needs {} positions, got {p}", n.saturating_sub(1)),
        ));
    }
    if p < 2 {
        return Ok(0.0);
    }
    let pts = positions.points();
    let mut total = 0.0;
    for i in 0..p {
        let row = &a.row(i + 1)[1..];
        let norm = match mode {
            DistanceMode::Raw => 1.0,
            DistanceMode::Renormalized => {
                let s: f64 = row.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, v)| v.as_f64()).sum();
                if s > 0.0 { s } else { 1.0 }
            }
        };
        for (j, &w) in row.iter().enumerate() {
            if j != i {
                let d = (pts[i][0] - pts[j][0]).abs() + (pts[i][1] - pts[j][1]).abs();
                total += w.as_f64() / norm * d;
            }
        }
    }
    Ok(total / (p * (p - 1)) as f64)
}

/// Per-layer mean of [`relative_distance`] over heads and samples.
pub fn relative_distance_by_layer<T: Scalar>(
    records: &[AttentionRecord<T>],
    positions: &TokenPositions,
    mode: DistanceMode,
) -> Result<Vec<f64>> {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in records {
        let e = acc.entry(r.layer).or_default();
        e.0 += relative_distance(&r.matrix, positions, mode)?;
        e.1 += 1;
    }
    Ok(acc.values().map(|(s, c)| s / *c as f64).collect())
}
