use std::path::Path;

use anyhow::Result;
use cbvit::config::RunConfig;
use cbvit::model::{checkpoint, Vit};
use cbvit::training::{train, write_metrics_csv, MetricsRecord, Precision, SyntheticDataset};
use cbvit::Scalar;

use crate::run::{load_data, out_dir, resolve_config, RunManifest};
use crate::Common;

pub const METRICS: &str = "metrics.csv";
pub const CHECKPOINT: &str = "checkpoint.json";

/// Trains at the configured precision and saves the checkpoint to `out`.
pub fn train_and_save(
    cfg: &RunConfig,
    data: &SyntheticDataset,
    eval: Option<&SyntheticDataset>,
    out: &Path,
) -> Result<Vec<MetricsRecord>> {
    fn go<T: Scalar>(cfg: &RunConfig, data: &SyntheticDataset, eval: Option<&SyntheticDataset>, out: &Path) -> Result<Vec<MetricsRecord>> {
        let outcome = train::<T>(&cfg.model, &cfg.train, data, eval)?;
        std::fs::create_dir_all(out)?;
        checkpoint::save(&outcome.model, &out.join(CHECKPOINT))?;
        Ok(outcome.metrics)
    }
    match cfg.train.precision {
        Precision::F32 => go::<f32>(cfg, data, eval, out),
        Precision::F64 => go::<f64>(cfg, data, eval, out),
    }
}

pub fn metrics_bytes(records: &[MetricsRecord]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, records).expect("writing to memory");
    buf
}

pub fn run(common: &Common, overrides: &[(String, String)]) -> Result<()> {
    let cfg = resolve_config(common, overrides, RunConfig::default())?;
    let out = out_dir(common, "train")?;
    let (data, eval) = load_data(&cfg)?;
    let mut manifest = RunManifest::new("train", &cfg, common, &out);
    manifest.parameters = Some(Vit::<f32>::new(cfg.model.clone(), 0)?.parameter_count());

    let metrics = train_and_save(&cfg, &data, eval.as_ref(), &out)?;
    manifest.write(&out, METRICS, &metrics_bytes(&metrics))?;
    manifest.record(&out, CHECKPOINT)?;
    manifest.record(&out, "checkpoint.bin")?;
    manifest.finish(&cfg, &out)?;

    for m in &metrics {
        println!(
            "epoch {:>3}  lr {:.3e}  loss {:.4}  top1 {:.4}  top5 {:.4}",
            m.epoch, m.lr, m.train_loss, m.top1, m.top5
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}
