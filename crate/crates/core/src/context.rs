//! Context broadcasting: token-sequence operators that blend every token with
//! a sequence-level context vector, i.e. inject uniform attention by hand.
//!
//! The plain functions here act on a single sequence `[N, d]` and are the
//! reference semantics. [`apply`] builds the same operators on a [`Graph`]
//! for batched, differentiable use inside the model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, Tensor};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    None,
    Cb,
    CbS,
    CbGate,
    CbHybrid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Mean,
    Max,
    ClassToken,
}

macro_rules! str_enum {
    ($ty:ty, $what:literal, { $($s:literal => $v:expr),+ $(,)? }) => {
        impl ::std::str::FromStr for $ty {
            type Err = $crate::Error;
            fn from_str(s: &str) -> ::std::result::Result<Self, $crate::Error> {
                match s {
                    $($s => Ok($v),)+
                    other => Err($crate::Error::Config(format!(
                        concat!("unknown ", $what, " `{}` (expected one of: {})"),
                        other,
                        [$($s),+].join(", ")
                    ))),
                }
            }
        }

        impl ::std::fmt::Display for $ty {
            fn fmt(&self, f: &mut ::std::fmt::Formatter<'_>) -> ::std::fmt::Result {
                let s = match self {
                    $(v if *v == $v => $s,)+
                    _ => unreachable!(),
                };
                f.write_str(s)
            }
        }
    };
}
pub(crate) use str_enum;

str_enum!(Variant, "cb variant", {
    "none" => Variant::None,
    "cb" => Variant::Cb,
    "cb_s" => Variant::CbS,
    "cb_gate" => Variant::CbGate,
    "cb_hybrid" => Variant::CbHybrid,
});

str_enum!(Aggregation, "aggregation", {
    "mean" => Aggregation::Mean,
    "max" => Aggregation::Max,
    "class_token" => Aggregation::ClassToken,
});

/// Learnable per-dimension weights `Λ` of the scaled variant.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalingWeights<T>(Vec<T>);

impl<T: Scalar> ScalingWeights<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("ScalingWeights", "empty"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("ScalingWeights", "non-finite entry"));
        }
        Ok(ScalingWeights(values))
    }

    pub fn constant(dim: usize, value: T) -> Result<Self> {
        Self::new(vec![value; dim])
    }

    pub fn values(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn seq_dims<T: Scalar>(x: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    let (n, d) = x.dims2()?;
    if n == 0 || d == 0 {
        return Err(Error::invalid(op, "empty sequence"));
    }
    Ok((n, d))
}

/// Column mean over the token axis.
pub fn token_mean<T: Scalar>(x: &Tensor<T>) -> Result<Vec<T>> {
    let (n, d) = seq_dims(x, "token_mean")?;
    let mut mean = vec![T::zero(); d];
    for row in x.data().chunks(d) {
        mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v);
    }
    let inv = T::one() / T::of(n as f64);
    mean.iter_mut().for_each(|m| *m *= inv);
    Ok(mean)
}

/// Context vector of a sequence under the chosen aggregation.
pub fn aggregate_context<T: Scalar>(x: &Tensor<T>, method: Aggregation) -> Result<Vec<T>> {
    let (_, d) = seq_dims(x, "aggregate_context")?;
    match method {
        Aggregation::Mean => token_mean(x),
        Aggregation::Max => {
            let mut best = x.row(0).to_vec();
            for row in x.data().chunks(d).skip(1) {
                best.iter_mut().zip(row).for_each(|(b, &v)| *b = b.max(v));
            }
            Ok(best)
        }
        Aggregation::ClassToken => Ok(x.row(0).to_vec()),
    }
}

/// `(x_i + c) / 2` for every row.
pub fn blend<T: Scalar>(x: &Tensor<T>, context: &[T]) -> Result<Tensor<T>> {
    let (_, d) = seq_dims(x, "blend")?;
    if context.len() != d {
        return Err(Error::shape("blend", format!("context of {} for width {d}", context.len())));
    }
    let half = T::of(0.5);
    let data = x
        .data()
        .chunks(d)
        .flat_map(|row| row.iter().zip(context).map(|(&v, &c)| half * v + half * c).collect::<Vec<_>>())
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Averages every token with the sequence mean.
pub fn cb<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    blend(x, &token_mean(x)?)
}

/// Adds the sequence mean, scaled per dimension by `Λ`, to every token.
pub fn cb_s<T: Scalar>(x: &Tensor<T>, scale: &ScalingWeights<T>) -> Result<Tensor<T>> {
    let (_, d) = seq_dims(x, "cb_s")?;
    if scale.len() != d {
        return Err(Error::shape("cb_s", format!("{} scaling weights for width {d}", scale.len())));
    }
    let mean = token_mean(x)?;
    let data = x
        .data()
        .chunks(d)
        .flat_map(|row| {
            row.iter()
                .zip(&mean)
                .zip(scale.values())
                .map(|((&v, &m), &l)| v + l * m)
                .collect::<Vec<_>>()
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Gates every token (row 0 included) by `x_0 + 1`.
pub fn cb_gate<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, d) = seq_dims(x, "cb_gate")?;
    let gate: Vec<T> = x.row(0).iter().map(|&v| v + T::one()).collect();
    let data = x
        .data()
        .chunks(d)
        .flat_map(|row| row.iter().zip(&gate).map(|(&v, &g)| v * g).collect::<Vec<_>>())
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// `x_i ⊙ x_0 + cb(X)_i`.
pub fn cb_hybrid<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, d) = seq_dims(x, "cb_hybrid")?;
    let class = x.row(0).to_vec();
    let base = cb(x)?;
    let data = x
        .data()
        .chunks(d)
        .zip(base.data().chunks(d))
        .flat_map(|(row, b)| {
            row.iter().zip(&class).zip(b).map(|((&v, &c), &bv)| v * c + bv).collect::<Vec<_>>()
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Settings of a context operator applied on a graph.
#[derive(Clone, Copy, Debug)]
pub struct ContextOp {
    pub variant: Variant,
    pub aggregation: Aggregation,
    /// Leave the class token (row 0) out of the mean.
    pub exclude_class_from_mean: bool,
    /// `Λ` leaf, required for [`Variant::CbS`].
    pub scale: Option<NodeId>,
}

impl ContextOp {
    pub fn plain(variant: Variant) -> Self {
        ContextOp { variant, aggregation: Aggregation::Mean, exclude_class_from_mean: false, scale: None }
    }
}

fn graph_context<T: Scalar>(g: &mut Graph<T>, x: NodeId, tokens: usize, op: &ContextOp) -> Result<NodeId> {
    let ctx = match op.aggregation {
        Aggregation::Mean => g.token_mean(x, tokens, usize::from(op.exclude_class_from_mean))?,
        Aggregation::Max => g.token_max(x, tokens)?,
        Aggregation::ClassToken => g.select_token(x, tokens, 0)?,
    };
    g.broadcast_tokens(ctx, tokens)
}

fn graph_blend<T: Scalar>(g: &mut Graph<T>, x: NodeId, tokens: usize, op: &ContextOp) -> Result<NodeId> {
    let ctx = graph_context(g, x, tokens, op)?;
    let half_x = g.scale(x, T::of(0.5))?;
    let half_c = g.scale(ctx, T::of(0.5))?;
    g.add(half_x, half_c)
}

/// Applies the operator to a stacked batch `x [B·N, d]` of sequences of
/// `tokens` rows each. [`Variant::None`] returns `x` unchanged.
pub fn apply<T: Scalar>(g: &mut Graph<T>, x: NodeId, tokens: usize, op: &ContextOp) -> Result<NodeId> {
    match op.variant {
        Variant::None => Ok(x),
        Variant::Cb => graph_blend(g, x, tokens, op),
        Variant::CbS => {
            let scale = op
                .scale
                .ok_or_else(|| Error::invalid("cb_s", "scaling weights missing"))?;
            let ctx = graph_context(g, x, tokens, op)?;
            let scaled = g.mul_row(ctx, scale)?;
            g.add(x, scaled)
        }
        Variant::CbGate => {
            let class = g.select_token(x, tokens, 0)?;
            let gate = g.add_scalar(class, T::one())?;
            let gate = g.broadcast_tokens(gate, tokens)?;
            g.mul(x, gate)
        }
        Variant::CbHybrid => {
            let class = g.select_token(x, tokens, 0)?;
            let class = g.broadcast_tokens(class, tokens)?;
            let gated = g.mul(x, class)?;
            let base = graph_blend(g, x, tokens, op)?;
            g.add(gated, base)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn cb_examples() {
        let x = t(&[&[1.0, 0.0], &[3.0, 2.0]]);
        assert_eq!(cb(&x).unwrap().data(), &[1.5, 0.5, 2.5, 1.5]);

        let c = t(&[&[0.25, -4.0], &[0.25, -4.0], &[0.25, -4.0]]);
        assert_eq!(cb(&c).unwrap(), c);

        let one = t(&[&[7.0, -1.5, 2.0]]);
        assert_eq!(cb(&one).unwrap(), one);
    }

    #[test]
    fn empty_sequences_are_unrepresentable() {
        assert!(Tensor::<f64>::new(vec![0, 2], vec![]).is_err());
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[4, 2]));
        assert!(apply(&mut g, x, 3, &ContextOp::plain(Variant::Cb)).is_err());
    }

    #[test]
    fn cb_s_examples() {
        let x = t(&[&[1.0, 0.0], &[3.0, 2.0]]);
        let zero = ScalingWeights::constant(2, 0.0).unwrap();
        assert_eq!(cb_s(&x, &zero).unwrap(), x);
        let ones = ScalingWeights::constant(2, 1.0).unwrap();
        assert_eq!(cb_s(&x, &ones).unwrap().data(), &[3.0, 1.0, 5.0, 3.0]);
        let first = ScalingWeights::new(vec![1.0, 0.0]).unwrap();
        assert_eq!(cb_s(&x, &first).unwrap().data(), &[3.0, 0.0, 5.0, 2.0]);
        let wrong = ScalingWeights::constant(3, 1.0).unwrap();
        assert!(matches!(cb_s(&x, &wrong), Err(Error::Shape { .. })));
    }

    #[test]
    fn cb_gate_examples() {
        let x = t(&[&[0.0, 0.0], &[3.0, 4.0]]);
        assert_eq!(cb_gate(&x).unwrap(), x);
        let x = t(&[&[1.0, 1.0], &[3.0, 4.0]]);
        assert_eq!(cb_gate(&x).unwrap().data(), &[2.0, 2.0, 6.0, 8.0]);
        let x = t(&[&[1.0, -1.0], &[3.0, 4.0]]);
        assert_eq!(cb_gate(&x).unwrap().row(1), &[6.0, 0.0]);
    }

    #[test]
    fn cb_hybrid_examples() {
        let x = t(&[&[0.0, 0.0], &[3.0, 4.0], &[1.0, -2.0]]);
        assert_eq!(cb_hybrid(&x).unwrap(), cb(&x).unwrap());

        let x = t(&[&[1.0, 1.0], &[3.0, 4.0]]);
        let base = cb(&x).unwrap();
        let h = cb_hybrid(&x).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(h.at(i, j), x.at(i, j) + base.at(i, j));
            }
        }

        // mean [1, 0.5]; cb row1 = [1, 0.25]; x_1 ⊙ x_0 = [1, 0]
        let x = t(&[&[1.0, 1.0], &[1.0, 0.0]]);
        assert_eq!(cb(&x).unwrap().data(), &[1.0, 0.75, 1.0, 0.25]);
        assert_eq!(cb_hybrid(&x).unwrap().row(1), &[2.0, 0.25]);
    }

    #[test]
    fn aggregation_examples() {
        let x = t(&[&[1.0, 0.0], &[3.0, 2.0]]);
        assert_eq!(aggregate_context(&x, Aggregation::Mean).unwrap(), vec![2.0, 1.0]);
        assert_eq!(aggregate_context(&x, Aggregation::Max).unwrap(), vec![3.0, 2.0]);
        let class = aggregate_context(&x, Aggregation::ClassToken).unwrap();
        assert_eq!(class, vec![1.0, 0.0]);
        let blended = blend(&x, &class).unwrap();
        assert_eq!(blended.row(0), x.row(0));
    }

    #[test]
    fn enums_round_trip_through_strings() {
        for v in [Variant::None, Variant::Cb, Variant::CbS, Variant::CbGate, Variant::CbHybrid] {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        for a in [Aggregation::Mean, Aggregation::Max, Aggregation::ClassToken] {
            assert_eq!(a.to_string().parse::<Aggregation>().unwrap(), a);
        }
        assert!("median".parse::<Aggregation>().is_err());
    }
}
