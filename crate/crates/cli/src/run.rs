//! Pieces shared by every command: config resolution, output layout and the
//! run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cbvit::config::RunConfig;
use cbvit::training::SyntheticDataset;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::Common;

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG_SNAPSHOT: &str = "config.txt";

/// Layers `--config` and overrides on top of `base`. The config file is only
/// read, never written.
pub fn resolve_config(common: &Common, overrides: &[(String, String)], base: RunConfig) -> Result<RunConfig> {
    let mut cfg = base;
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config file {}", path.display()))?;
        cfg.apply_text(&text).with_context(|| format!("in config file {}", path.display()))?;
    }
    cfg.apply_overrides(overrides.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn out_dir(common: &Common, command: &str) -> Result<PathBuf> {
    let dir = match &common.out {
        Some(d) => d.clone(),
        None => std::env::var_os("CBVIT_OUT")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"))
            .join(command),
    };
    fs::create_dir_all(&dir).with_context(|| format!("cannot create output directory {}", dir.display()))?;
    Ok(dir)
}

/// Training data and the optional held-out split.
pub fn load_data(cfg: &RunConfig) -> Result<(SyntheticDataset, Option<SyntheticDataset>)> {
    let train = match &cfg.data.path {
        Some(p) => SyntheticDataset::load(p)?,
        None => SyntheticDataset::generate(&cfg.generator())?,
    };
    let eval = if cfg.data.eval_count > 0 {
        let mut p = cfg.generator();
        p.seed = p.seed.wrapping_add(1);
        p.count = cfg.data.eval_count;
        Some(SyntheticDataset::generate(&p)?)
    } else {
        None
    };
    Ok((train, eval))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Everything needed to repeat a run: the resolved configuration and the
/// checksum of every artifact it wrote.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    pub out_dir: String,
    pub threads: usize,
    /// Parameter count of the trained model, for comparing variants.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub parameters: Option<usize>,
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, cfg: &RunConfig, common: &Common, out: &Path) -> Self {
        RunManifest {
            command: command.to_string(),
            config: cfg.to_kv().into_iter().collect(),
            seed: cfg.train.seed,
            out_dir: out.display().to_string(),
            threads: common.threads,
            parameters: None,
            artifacts: BTreeMap::new(),
        }
    }

    /// Writes `bytes` to `out/name` and records its checksum.
    pub fn write(&mut self, out: &Path, name: &str, bytes: &[u8]) -> Result<()> {
        let path = out.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes).with_context(|| format!("cannot write {}", path.display()))?;
        self.record(out, name)
    }

    /// Records the checksum of a file something else already wrote.
    pub fn record(&mut self, out: &Path, name: &str) -> Result<()> {
        let path = out.join(name);
        let bytes = fs::read(&path).with_context(|| format!("cannot read {}", path.display()))?;
        self.artifacts.insert(name.to_string(), sha256_hex(&bytes));
        Ok(())
    }

    pub fn finish(mut self, cfg: &RunConfig, out: &Path) -> Result<()> {
        self.write(out, CONFIG_SNAPSHOT, cfg.to_text().as_bytes())?;
        let json = serde_json::to_string_pretty(&self)? + "\n";
        let path = out.join(MANIFEST);
        fs::write(&path, json).with_context(|| format!("cannot write {}", path.display()))?;
        Ok(())
    }
}
