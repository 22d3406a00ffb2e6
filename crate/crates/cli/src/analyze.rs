//! Attention diagnostics of one or more checkpoints on a shared sample batch.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cbvit::analysis::{diagnose, Diagnosis, LAYER_CSV_HEADER};
use cbvit::config::{self, RunConfig};
use cbvit::model::{checkpoint, Vit};
use cbvit::training::SyntheticDataset;

use crate::run::{out_dir, resolve_config, RunManifest};
use crate::Common;

pub const LAYERS_CSV: &str = "layers.csv";
pub const JACOBIAN_CSV: &str = "jacobian.csv";
pub const SCALING_CSV: &str = "scaling.csv";

fn is_model_key(key: &str) -> bool {
    let at = config::KEYS.iter().position(|k| *k == "cb.scale_init").expect("listed key");
    config::KEYS[..=at].contains(&key)
}

fn f(v: f64) -> String {
    format!("{v:.10}")
}

fn load(path: &Path, cfg: &RunConfig, explicit_model: bool) -> Result<Vit<f64>> {
    let vit = if explicit_model {
        checkpoint::load_with_config::<f64>(path, cfg.model.clone())
    } else {
        checkpoint::load::<f64>(path)
    };
    vit.with_context(|| format!("loading checkpoint {}", path.display()))
}

pub fn run(
    common: &Common,
    overrides: &[(String, String)],
    checkpoints: &[PathBuf],
    labels: &[String],
    dataset: Option<PathBuf>,
) -> Result<()> {
    let cfg = resolve_config(common, overrides, RunConfig::default())?;
    if !labels.is_empty() && labels.len() != checkpoints.len() {
        bail!("{} labels for {} checkpoints", labels.len(), checkpoints.len());
    }
    // A config file or model override means "use this architecture", so the
    // checkpoint must match it; otherwise the checkpoint's own config is used.
    let explicit_model = common.config.is_some() || overrides.iter().any(|(k, _)| is_model_key(k));
    let models = checkpoints
        .iter()
        .map(|p| load(p, &cfg, explicit_model))
        .collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = if labels.is_empty() {
        checkpoints
            .iter()
            .map(|p| {
                let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
                match p.parent().and_then(|d| d.file_name()).and_then(|s| s.to_str()) {
                    Some(dir) if stem == "checkpoint" => dir.to_string(),
                    _ => stem.to_string(),
                }
            })
            .collect()
    } else {
        labels.to_vec()
    };

    let first = models[0].config();
    let data = match dataset.or_else(|| cfg.data.path.clone()) {
        Some(p) => SyntheticDataset::load(&p)?,
        None => {
            let mut g = cfg.generator();
            g.image_size = first.image_size;
            g.channels = first.channels;
            g.num_classes = first.num_classes;
            g.count = g.count.min(cfg.analysis.samples.max(g.num_classes));
            SyntheticDataset::generate(&g)?
        }
    };
    let idx: Vec<usize> = (0..cfg.analysis.samples.min(data.len())).collect();
    let (images, _) = data.batch::<f64>(&idx)?;

    let results: Vec<Diagnosis> = models
        .iter()
        .zip(&names)
        .map(|(m, name)| {
            diagnose(m, &images, cfg.analysis.excludes(), cfg.analysis.distance_mode())
                .with_context(|| format!("analysing {name}"))
        })
        .collect::<Result<_>>()?;

    let layers = results.iter().map(|d| d.layers.len()).max().unwrap_or(0);
    let mut layer_csv = format!("model,{LAYER_CSV_HEADER}\n");
    let mut jac_csv = String::from("model,layer,mean_nuclear_norm,max_nuclear_norm,uniform_bound\n");
    for l in 0..layers {
        for (name, d) in names.iter().zip(&results) {
            if let Some(r) = d.layers.get(l) {
                let (ratio, mean) = match &r.scaling {
                    Some(s) => (s.ratio.map_or_else(|| "undefined".into(), f), f(s.mean)),
                    None => ("n/a".into(), "n/a".into()),
                };
                let _ = writeln!(
                    layer_csv,
                    "{name},{},{},{},{},{ratio},{mean}",
                    r.layer,
                    f(r.mean_entropy),
                    f(r.max_entropy_bound),
                    f(r.relative_distance)
                );
            }
            if let Some(j) = d.nuclear.get(l) {
                let _ = writeln!(jac_csv, "{name},{},{},{},{}", j.layer, f(j.mean), f(j.max), f(j.bound));
            }
        }
    }

    let out = out_dir(common, "analyze")?;
    let mut manifest = RunManifest::new("analyze", &cfg, common, &out);
    manifest.write(&out, LAYERS_CSV, layer_csv.as_bytes())?;
    manifest.write(&out, JACOBIAN_CSV, jac_csv.as_bytes())?;
    if cfg.analysis.scaling {
        let mut csv = String::from("model,layer,lambda_ratio,lambda_mean,status\n");
        for (name, d) in names.iter().zip(&results) {
            if !d.has_scaling {
                let _ = writeln!(csv, "{name},all,n/a,n/a,not applicable");
                continue;
            }
            for r in &d.layers {
                if let Some(s) = &r.scaling {
                    let ratio = s.ratio.map_or_else(|| "undefined".into(), f);
                    let _ = writeln!(csv, "{name},{},{ratio},{},ok", r.layer, f(s.mean));
                }
            }
        }
        manifest.write(&out, SCALING_CSV, csv.as_bytes())?;
    }
    manifest.finish(&cfg, &out)?;
    print!("{layer_csv}");
    Ok(())
}
