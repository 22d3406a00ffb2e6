//! One training run per value of a single configuration axis.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use cbvit::config::RunConfig;
use cbvit::context::Variant;
use cbvit::model::checkpoint;
use cbvit::training::{MetricsRecord, SyntheticDataset};

use crate::run::{load_data, out_dir, resolve_config, RunManifest};
use crate::train::{metrics_bytes, train_and_save, CHECKPOINT, METRICS};
use crate::Common;

pub const AXES: &[&str] = &["site", "block", "layers", "aggregation", "heads", "extra_block"];
pub const SWEEP_CSV: &str = "sweep.csv";
pub const HEADER: &str = "axis,value,final_loss,top1,entropy_lower,entropy_upper,mid_end_max_diff";

fn default_values(axis: &str) -> &'static [&'static str] {
    match axis {
        "site" => &["front", "mid", "end"],
        "block" => &["mlp", "msa", "both"],
        "layers" => &["all", "lower", "upper"],
        "aggregation" => &["mean", "max", "class_token"],
        "heads" => &["1", "2", "4", "8"],
        "extra_block" => &["none", "msa", "mlp"],
        _ => &[],
    }
}

/// Configuration of one axis point. Placement axes switch plain context
/// broadcasting on when the base configuration has none.
fn point(base: &RunConfig, axis: &str, value: &str) -> Result<RunConfig> {
    let mut cfg = base.clone();
    let placement = matches!(axis, "site" | "block" | "layers" | "aggregation");
    if placement && cfg.model.cb.variant == Variant::None {
        cfg.model.cb.variant = Variant::Cb;
    }
    let (key, v) = match (axis, value) {
        ("site", "front" | "mid" | "end") => ("cb.site", format!("mlp_{value}")),
        ("site", _) => ("cb.site", value.to_string()),
        ("block", "mlp") => ("cb.site", "mlp_end".into()),
        ("block", "both") => ("cb.site", "both_mlp_msa".into()),
        ("block", _) => ("cb.site", value.to_string()),
        ("layers", _) => ("cb.layers", value.to_string()),
        ("aggregation", _) => ("cb.aggregation", value.to_string()),
        ("heads", _) => ("heads", value.to_string()),
        ("extra_block", _) => ("extra_block", value.to_string()),
        _ => bail!("unknown sweep axis `{axis}` (expected one of: {})", AXES.join(", ")),
    };
    cfg.set(key, &v)?;
    cfg.validate().with_context(|| format!("sweep point {axis}={value}"))?;
    Ok(cfg)
}

struct Row {
    value: String,
    final_loss: f64,
    top1: f64,
    entropy_lower: f64,
    entropy_upper: f64,
    mid_end: Option<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean entropy over the lower and upper halves of the layers; an odd middle
/// layer goes to the upper half.
pub fn halves(entropy: &[f64]) -> (f64, f64) {
    let (lo, hi) = entropy.split_at(entropy.len() / 2);
    (if lo.is_empty() { f64::NAN } else { mean(lo) }, mean(hi))
}

fn run_point(
    cfg: &RunConfig,
    value: &str,
    data: &SyntheticDataset,
    eval: Option<&SyntheticDataset>,
    dir: &Path,
) -> Result<(Row, Vec<MetricsRecord>)> {
    let metrics = train_and_save(cfg, data, eval, dir)?;
    let last = metrics.last().expect("at least one epoch");
    let (entropy_lower, entropy_upper) = halves(&last.entropy);

    let vit = checkpoint::load::<f64>(&dir.join(CHECKPOINT))?;
    let sample = eval.unwrap_or(data);
    let idx: Vec<usize> = (0..cfg.analysis.samples.min(sample.len())).collect();
    let (images, _) = sample.batch::<f64>(&idx)?;
    let mid_end = vit.mid_end_discrepancy(&images).ok();

    let row = Row {
        value: value.to_string(),
        final_loss: last.train_loss,
        top1: last.top1,
        entropy_lower,
        entropy_upper,
        mid_end,
    };
    Ok((row, metrics))
}

pub fn run(common: &Common, overrides: &[(String, String)], axis: Option<String>) -> Result<()> {
    let base = resolve_config(common, overrides, RunConfig::default())?;
    let Some(axis) = axis.or_else(|| base.sweep.axis.clone()) else {
        bail!("sweep needs --axis (one of: {})", AXES.join(", "));
    };
    if !AXES.contains(&axis.as_str()) {
        bail!("unknown sweep axis `{axis}` (expected one of: {})", AXES.join(", "));
    }
    let values: Vec<String> = if base.sweep.values.is_empty() {
        default_values(&axis).iter().map(|s| s.to_string()).collect()
    } else {
        base.sweep.values.clone()
    };
    // Every point is validated before the first one trains.
    let points = values.iter().map(|v| point(&base, &axis, v)).collect::<Result<Vec<_>>>()?;

    let out = out_dir(common, "sweep")?;
    let (data, eval) = load_data(&base)?;
    let mut manifest = RunManifest::new("sweep", &base, common, &out);
    let dirs: Vec<String> = values.iter().map(|v| format!("runs/{axis}={v}")).collect();

    let jobs: Vec<usize> = (0..points.len()).collect();
    let workers = common.threads.clamp(1, jobs.len().max(1));
    let mut results: Vec<Option<Result<(Row, Vec<MetricsRecord>)>>> = (0..jobs.len()).map(|_| None).collect();
    if workers == 1 {
        for &i in &jobs {
            results[i] = Some(run_point(&points[i], &values[i], &data, eval.as_ref(), &out.join(&dirs[i])));
        }
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let (points, values, dirs, data, eval, out) = (&points, &values, &dirs, &data, eval.as_ref(), &out);
                    s.spawn(move || {
                        (w..points.len())
                            .step_by(workers)
                            .map(|i| (i, run_point(&points[i], &values[i], data, eval, &out.join(&dirs[i]))))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("sweep worker panicked") {
                    results[i] = Some(r);
                }
            }
        });
    }

    let mut csv = format!("{HEADER}\n");
    for (i, r) in results.into_iter().enumerate() {
        let (row, metrics) = r.expect("every job ran").with_context(|| format!("sweep point {axis}={}", values[i]))?;
        manifest.write(&out, &format!("{}/{METRICS}", dirs[i]), &metrics_bytes(&metrics))?;
        manifest.record(&out, &format!("{}/{CHECKPOINT}", dirs[i]))?;
        manifest.record(&out, &format!("{}/checkpoint.bin", dirs[i]))?;
        let _ = writeln!(
            csv,
            "{axis},{},{:.10},{:.10},{:.10},{:.10},{}",
            row.value,
            row.final_loss,
            row.top1,
            row.entropy_lower,
            row.entropy_upper,
            row.mid_end.map_or_else(|| "n/a".to_string(), |d| format!("{d:.3e}"))
        );
    }
    manifest.write(&out, SWEEP_CSV, csv.as_bytes())?;
    manifest.finish(&base, &out)?;
    print!("{csv}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_axis_has_defaults_that_resolve() {
        let mut base = RunConfig::default();
        base.model = cbvit::model::ModelConfig::tiny();
        base.model.dim = 16;
        for axis in AXES {
            let values = default_values(axis);
            assert!(values.len() >= 3, "{axis}");
            for v in values {
                point(&base, axis, v).unwrap_or_else(|e| panic!("{axis}={v}: {e:#}"));
            }
        }
    }

    #[test]
    fn indivisible_heads_fail_validation() {
        let base = RunConfig::default();
        assert!(point(&base, "heads", "3").is_err());
        assert!(point(&base, "wobble", "1").is_err());
    }

    #[test]
    fn half_means() {
        assert_eq!(halves(&[1.0, 2.0, 3.0, 5.0]), (1.5, 4.0));
        assert_eq!(halves(&[1.0, 2.0, 3.0]), (1.0, 2.5));
    }
}
