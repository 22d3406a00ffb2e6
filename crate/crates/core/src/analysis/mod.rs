//! Attention-density diagnostics: row entropy, the softmax Jacobian and its
//! nuclear norm, spatial interaction distance, and scaling-weight statistics.

mod distance;
mod entropy;
mod jacobian;
mod scaling;

use std::io::Write;

pub use distance::{relative_distance, relative_distance_by_layer, DistanceMode, TokenPositions};
pub use entropy::{attention_entropy, distribution_tolerance, entropy_profile, max_entropy, EntropyProfile, Excludes};
pub use jacobian::{
    nuclear_norm_analytic, nuclear_norm_by_layer, softmax_jacobian, uniform_nuclear_norm,
    verify_uniform_maximality, MaximalityReport, NuclearNormStats,
};
pub use scaling::{quantile_linear, scaling_stats, scaling_stats_by_layer, ScalingStats};

use crate::context::Variant;
use crate::error::Result;
use crate::model::Vit;
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// One row of the per-layer diagnostics table.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerDiagnostics {
    pub layer: usize,
    pub mean_entropy: f64,
    pub max_entropy_bound: f64,
    pub relative_distance: f64,
    /// `None` when the model has no scaling weights in this layer.
    pub scaling: Option<ScalingStats>,
}

pub const LAYER_CSV_HEADER: &str = "layer,mean_entropy,max_entropy_bound,relative_distance,lambda_ratio,lambda_mean";

pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.10}")
}

/// Writes the per-layer table. Missing scaling statistics are written as
/// `n/a`, an undefined ratio as `undefined`.
pub fn write_layer_csv<W: Write>(mut w: W, rows: &[LayerDiagnostics]) -> std::io::Result<()> {
    writeln!(w, "{LAYER_CSV_HEADER}")?;
    for r in rows {
        let (ratio, mean) = match &r.scaling {
            Some(s) => (s.ratio.map_or_else(|| "undefined".to_string(), fmt_f64), fmt_f64(s.mean)),
            None => ("n/a".to_string(), "n/a".to_string()),
        };
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.layer,
            fmt_f64(r.mean_entropy),
            fmt_f64(r.max_entropy_bound),
            fmt_f64(r.relative_distance),
            ratio,
            mean
        )?;
    }
    Ok(())
}

/// Scaling weights of every layer that has them, keyed by layer, from the
/// MLP site (or the attention site when that is the only one).
pub fn scaling_vectors<T: Scalar>(vit: &Vit<T>) -> Vec<(usize, Vec<f64>)> {
    (0..vit.config().depth)
        .filter_map(|l| {
            [format!("blocks.{l}.cb_mlp.scale"), format!("blocks.{l}.cb_msa.scale")]
                .iter()
                .find_map(|n| vit.params().get(n).ok())
                .map(|t| (l, t.data().iter().map(|v| v.as_f64()).collect()))
        })
        .collect()
}

/// Everything the analysis pipeline reports for one model on one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Diagnosis {
    pub layers: Vec<LayerDiagnostics>,
    pub nuclear: Vec<NuclearNormStats>,
    /// Whether the model carries learned scaling weights at all.
    pub has_scaling: bool,
}

/// Runs `images` through `vit` and summarises every recorded attention map.
pub fn diagnose<T: Scalar>(vit: &Vit<T>, images: &Tensor<T>, excludes: Excludes, mode: DistanceMode) -> Result<Diagnosis> {
    let cfg = vit.config();
    let (_, records) = vit.predict(images)?;
    let profile = entropy_profile(&records, excludes, "")?;
    let positions = TokenPositions::grid(cfg.grid());
    let distance = relative_distance_by_layer(&records, &positions, mode)?;
    let scaling: std::collections::BTreeMap<usize, ScalingStats> = scaling_vectors(vit)
        .into_iter()
        .map(|(l, v)| scaling_stats(&v).map(|s| (l, s)))
        .collect::<Result<_>>()?;
    let layers = profile
        .per_layer
        .iter()
        .enumerate()
        .map(|(layer, &mean_entropy)| LayerDiagnostics {
            layer,
            mean_entropy,
            max_entropy_bound: profile.bound(),
            relative_distance: distance[layer],
            scaling: scaling.get(&layer).copied(),
        })
        .collect();
    let mut nuclear = nuclear_norm_by_layer(&records, cfg.attn_lambda())?;
    nuclear.truncate(profile.per_layer.len());
    Ok(Diagnosis { layers, nuclear, has_scaling: cfg.cb.variant == Variant::CbS })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let rows = vec![
            LayerDiagnostics {
                layer: 0,
                mean_entropy: 1.0,
                max_entropy_bound: 2.0,
                relative_distance: 0.5,
                scaling: None,
            },
            LayerDiagnostics {
                layer: 1,
                mean_entropy: 1.0,
                max_entropy_bound: 2.0,
                relative_distance: 0.5,
                scaling: Some(ScalingStats { ratio: None, mean: 0.0 }),
            },
        ];
        let mut buf = Vec::new();
        write_layer_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], LAYER_CSV_HEADER);
        assert!(lines[1].ends_with(",n/a,n/a"));
        assert!(lines[2].contains(",undefined,"));
        assert!(lines.iter().all(|l| l.split(',').count() == 6));
    }
}
