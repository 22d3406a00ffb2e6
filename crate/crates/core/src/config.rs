//! Flat `key = value` run configuration.
//!
//! Model and training keys are bare (`depth`, `epochs`), everything else is
//! dotted by section (`cb.site`, `data.count`). Command-line overrides use the
//! same keys, so `--cb.site mlp_mid` and a `cb.site = mlp_mid` line are
//! interchangeable. Unknown keys are errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::analysis::{DistanceMode, Excludes};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::{GeneratorParams, TrainConfig};

/// Where training data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// A CBDS file; when unset the synthetic generator below is used.
    pub path: Option<PathBuf>,
    pub seed: u64,
    pub count: usize,
    pub noise_std: f64,
    /// Size of a held-out split generated with `seed + 1`; 0 evaluates on
    /// the training set.
    pub eval_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { path: None, seed: 0, count: 2000, noise_std: 24.0, eval_count: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub samples: usize,
    pub exclude_class_token: bool,
    pub exclude_last_layers: usize,
    pub scaling: bool,
    pub renormalize_distance: bool,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig { samples: 32, exclude_class_token: false, exclude_last_layers: 1, scaling: false, renormalize_distance: false }
    }
}

impl AnalysisConfig {
    pub fn excludes(&self) -> Excludes {
        Excludes { class_token: self.exclude_class_token, last_layers: self.exclude_last_layers }
    }

    pub fn distance_mode(&self) -> DistanceMode {
        if self.renormalize_distance {
            DistanceMode::Renormalized
        } else {
            DistanceMode::Raw
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub axis: Option<String>,
    /// Explicit axis values; empty means the axis' default enumeration.
    pub values: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub analysis: AnalysisConfig,
    pub sweep: SweepConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { axis: None, values: Vec::new() }
    }
}

/// Every accepted key, in snapshot order.
pub const KEYS: &[&str] = &[
    "image_size",
    "patch_size",
    "channels",
    "depth",
    "dim",
    "heads",
    "mlp_ratio",
    "num_classes",
    "attn_scale",
    "dropout",
    "drop_path",
    "ln_eps",
    "init",
    "init_std",
    "extra_block",
    "cb.variant",
    "cb.site",
    "cb.layers",
    "cb.aggregation",
    "cb.msa_uniform_head",
    "cb.exclude_class_from_mean",
    "cb.scale_init",
    "epochs",
    "batch_size",
    "lr",
    "min_lr",
    "beta1",
    "beta2",
    "weight_decay",
    "warmup_epochs",
    "seed",
    "label_smoothing",
    "precision",
    "probe_size",
    "stop_at_top1",
    "data.path",
    "data.seed",
    "data.count",
    "data.noise_std",
    "data.eval_count",
    "analysis.samples",
    "analysis.exclude_class_token",
    "analysis.exclude_last_layers",
    "analysis.scaling",
    "analysis.renormalize_distance",
    "sweep.axis",
    "sweep.values",
];

pub fn is_key(key: &str) -> bool {
    KEYS.contains(&key)
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid value `{value}` for `{key}` (expected true or false)"))),
    }
}

fn parse_opt_f64(key: &str, value: &str, none: &str) -> Result<Option<f64>> {
    if value == none {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn opt_f64(v: Option<f64>, none: &str) -> String {
    v.map_or_else(|| none.to_string(), |x| x.to_string())
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "image_size" => m.image_size = parse(key, value)?,
            "patch_size" => m.patch_size = parse(key, value)?,
            "channels" => m.channels = parse(key, value)?,
            "depth" => m.depth = parse(key, value)?,
            "dim" => m.dim = parse(key, value)?,
            "heads" => m.heads = parse(key, value)?,
            "mlp_ratio" => m.mlp_ratio = parse(key, value)?,
            "num_classes" => m.num_classes = parse(key, value)?,
            "attn_scale" => m.attn_scale = parse_opt_f64(key, value, "default")?,
            "dropout" => m.dropout = parse(key, value)?,
            "drop_path" => m.drop_path = parse(key, value)?,
            "ln_eps" => m.ln_eps = parse(key, value)?,
            "init" => m.init = value.parse()?,
            "init_std" => m.init_std = parse(key, value)?,
            "extra_block" => m.extra_block = value.parse()?,
            "cb.variant" => m.cb.variant = value.parse()?,
            "cb.site" => m.cb.site = value.parse()?,
            "cb.layers" => m.cb.layers = value.parse()?,
            "cb.aggregation" => m.cb.aggregation = value.parse()?,
            "cb.msa_uniform_head" => m.cb.msa_uniform_head = value.parse()?,
            "cb.exclude_class_from_mean" => m.cb.exclude_class_from_mean = parse_bool(key, value)?,
            "cb.scale_init" => m.cb.scale_init = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "lr" => t.lr = parse_opt_f64(key, value, "rule")?,
            "min_lr" => t.min_lr = parse(key, value)?,
            "beta1" => t.betas.0 = parse(key, value)?,
            "beta2" => t.betas.1 = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "warmup_epochs" => t.warmup_epochs = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "label_smoothing" => t.label_smoothing = parse(key, value)?,
            "precision" => t.precision = value.parse()?,
            "probe_size" => t.probe_size = parse(key, value)?,
            "stop_at_top1" => t.stop_at_top1 = parse_opt_f64(key, value, "none")?,
            "data.path" => self.data.path = (!value.is_empty()).then(|| PathBuf::from(value)),
            "data.seed" => self.data.seed = parse(key, value)?,
            "data.count" => self.data.count = parse(key, value)?,
            "data.noise_std" => self.data.noise_std = parse(key, value)?,
            "data.eval_count" => self.data.eval_count = parse(key, value)?,
            "analysis.samples" => self.analysis.samples = parse(key, value)?,
            "analysis.exclude_class_token" => self.analysis.exclude_class_token = parse_bool(key, value)?,
            "analysis.exclude_last_layers" => self.analysis.exclude_last_layers = parse(key, value)?,
            "analysis.scaling" => self.analysis.scaling = parse_bool(key, value)?,
            "analysis.renormalize_distance" => self.analysis.renormalize_distance = parse_bool(key, value)?,
            "sweep.axis" => self.sweep.axis = (!value.is_empty()).then(|| value.to_string()),
            "sweep.values" => {
                self.sweep.values = value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
            }
            _ => return Err(Error::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Current value of one key, formatted so that `set` reads it back.
    pub fn get(&self, key: &str) -> Result<String> {
        let m = &self.model;
        let t = &self.train;
        Ok(match key {
            "image_size" => m.image_size.to_string(),
            "patch_size" => m.patch_size.to_string(),
            "channels" => m.channels.to_string(),
            "depth" => m.depth.to_string(),
            "dim" => m.dim.to_string(),
            "heads" => m.heads.to_string(),
            "mlp_ratio" => m.mlp_ratio.to_string(),
            "num_classes" => m.num_classes.to_string(),
            "attn_scale" => opt_f64(m.attn_scale, "default"),
            "dropout" => m.dropout.to_string(),
            "drop_path" => m.drop_path.to_string(),
            "ln_eps" => m.ln_eps.to_string(),
            "init" => m.init.to_string(),
            "init_std" => m.init_std.to_string(),
            "extra_block" => m.extra_block.to_string(),
            "cb.variant" => m.cb.variant.to_string(),
            "cb.site" => m.cb.site.to_string(),
            "cb.layers" => m.cb.layers.to_string(),
            "cb.aggregation" => m.cb.aggregation.to_string(),
            "cb.msa_uniform_head" => m.cb.msa_uniform_head.to_string(),
            "cb.exclude_class_from_mean" => m.cb.exclude_class_from_mean.to_string(),
            "cb.scale_init" => m.cb.scale_init.to_string(),
            "epochs" => t.epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "lr" => opt_f64(t.lr, "rule"),
            "min_lr" => t.min_lr.to_string(),
            "beta1" => t.betas.0.to_string(),
            "beta2" => t.betas.1.to_string(),
            "weight_decay" => t.weight_decay.to_string(),
            "warmup_epochs" => t.warmup_epochs.to_string(),
            "seed" => t.seed.to_string(),
            "label_smoothing" => t.label_smoothing.to_string(),
            "precision" => t.precision.to_string(),
            "probe_size" => t.probe_size.to_string(),
            "stop_at_top1" => opt_f64(t.stop_at_top1, "none"),
            "data.path" => self.data.path.as_ref().map_or(String::new(), |p| p.display().to_string()),
            "data.seed" => self.data.seed.to_string(),
            "data.count" => self.data.count.to_string(),
            "data.noise_std" => self.data.noise_std.to_string(),
            "data.eval_count" => self.data.eval_count.to_string(),
            "analysis.samples" => self.analysis.samples.to_string(),
            "analysis.exclude_class_token" => self.analysis.exclude_class_token.to_string(),
            "analysis.exclude_last_layers" => self.analysis.exclude_last_layers.to_string(),
            "analysis.scaling" => self.analysis.scaling.to_string(),
            "analysis.renormalize_distance" => self.analysis.renormalize_distance.to_string(),
            "sweep.axis" => self.sweep.axis.clone().unwrap_or_default(),
            "sweep.values" => self.sweep.values.join(","),
            _ => return Err(Error::UnknownKey(key.to_string())),
        })
    }

    /// Applies `key = value` lines. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`, got `{line}`", no + 1)));
            };
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn apply_overrides<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        pairs.into_iter().try_for_each(|(k, v)| self.set(k, v))
    }

    /// All keys with their current values.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        KEYS.iter().map(|&k| (k.to_string(), self.get(k).expect("listed key"))).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.to_kv() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.path.is_none() && self.data.count == 0 {
            return Err(Error::Config("data.count must be at least 1".into()));
        }
        if self.analysis.samples == 0 {
            return Err(Error::Config("analysis.samples must be at least 1".into()));
        }
        Ok(())
    }

    pub fn generator(&self) -> GeneratorParams {
        GeneratorParams {
            seed: self.data.seed,
            count: self.data.count,
            image_size: self.model.image_size,
            channels: self.model.channels,
            num_classes: self.model.num_classes,
            noise_std: self.data.noise_std,
        }
    }
}
