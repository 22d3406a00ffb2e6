use anyhow::Result;
use cbvit::config::RunConfig;
use cbvit::training::SyntheticDataset;

use crate::run::{out_dir, resolve_config, RunManifest};
use crate::Common;

pub const DATASET: &str = "dataset.cbds";

pub fn run(common: &Common, overrides: &[(String, String)]) -> Result<()> {
    let cfg = resolve_config(common, overrides, RunConfig::default())?;
    let out = out_dir(common, "make-dataset")?;
    let data = SyntheticDataset::generate(&cfg.generator())?;
    let mut manifest = RunManifest::new("make-dataset", &cfg, common, &out);
    manifest.write(&out, DATASET, &data.to_bytes())?;
    manifest.finish(&cfg, &out)?;
    println!("{} images, class counts {:?}, wrote {}", data.len(), data.class_counts(), out.join(DATASET).display());
    Ok(())
}
