use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::context::{str_enum, Aggregation, Variant};
use crate::error::{Error, Result};

/// Where a context operator sits inside a transformer layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    /// Before the first MLP projection.
    MlpFront,
    /// Between the activation and the second MLP projection.
    MlpMid,
    /// After the second MLP projection.
    #[default]
    MlpEnd,
    /// After the attention output projection.
    Msa,
    /// Both `MlpEnd` and `Msa`.
    BothMlpMsa,
}

str_enum!(Site, "cb site", {
    "mlp_front" => Site::MlpFront,
    "mlp_mid" => Site::MlpMid,
    "mlp_end" => Site::MlpEnd,
    "msa" => Site::Msa,
    "both_mlp_msa" => Site::BothMlpMsa,
});

impl Site {
    pub fn in_mlp(self) -> bool {
        !matches!(self, Site::Msa)
    }

    pub fn in_msa(self) -> bool {
        matches!(self, Site::Msa | Site::BothMlpMsa)
    }
}

/// Fixed 1/N attention head inside MSA.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UniformHead {
    #[default]
    None,
    /// Head 0 becomes the uniform head; its query/key weights are dropped.
    Replace,
    /// One uniform head runs next to all learned heads.
    Append,
}

str_enum!(UniformHead, "uniform head mode", {
    "none" => UniformHead::None,
    "replace" => UniformHead::Replace,
    "append" => UniformHead::Append,
});

/// Extra block appended after the last layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExtraBlock {
    #[default]
    None,
    Msa,
    Mlp,
}

str_enum!(ExtraBlock, "extra block", {
    "none" => ExtraBlock::None,
    "msa" => ExtraBlock::Msa,
    "mlp" => ExtraBlock::Mlp,
});

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    #[default]
    TruncNormal,
    /// Every projection, token and embedding is zero; norms start at identity.
    Zeros,
}

str_enum!(Init, "init", {
    "trunc_normal" => Init::TruncNormal,
    "zeros" => Init::Zeros,
});

/// Layers on which the context operator is active.
#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum LayerMask {
    #[default]
    All,
    /// Layers `depth/2 .. depth`.
    Upper,
    /// Layers `0 .. depth/2`.
    Lower,
    Explicit(BTreeSet<usize>),
}

impl LayerMask {
    pub fn contains(&self, layer: usize, depth: usize) -> bool {
        match self {
            LayerMask::All => layer < depth,
            LayerMask::Upper => layer >= depth / 2 && layer < depth,
            LayerMask::Lower => layer < depth / 2,
            LayerMask::Explicit(set) => set.contains(&layer),
        }
    }

    pub fn resolve(&self, depth: usize) -> BTreeSet<usize> {
        (0..depth).filter(|&l| self.contains(l, depth)).collect()
    }

    fn validate(&self, depth: usize) -> Result<()> {
        if let LayerMask::Explicit(set) = self {
            if let Some(&bad) = set.iter().find(|&&l| l >= depth) {
                return Err(Error::Config(format!("cb.layers contains {bad}, depth is {depth}")));
            }
        }
        Ok(())
    }
}

impl fmt::Display for LayerMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerMask::All => f.write_str("all"),
            LayerMask::Upper => f.write_str("upper"),
            LayerMask::Lower => f.write_str("lower"),
            LayerMask::Explicit(set) if set.is_empty() => f.write_str("none"),
            LayerMask::Explicit(set) => {
                let parts: Vec<String> = set.iter().map(usize::to_string).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

impl FromStr for LayerMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "all" => Ok(LayerMask::All),
            "upper" => Ok(LayerMask::Upper),
            "lower" => Ok(LayerMask::Lower),
            "none" | "" => Ok(LayerMask::Explicit(BTreeSet::new())),
            list => list
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Config(format!("bad layer index `{p}` in cb.layers")))
                })
                .collect::<Result<BTreeSet<_>>>()
                .map(LayerMask::Explicit),
        }
    }
}

impl From<LayerMask> for String {
    fn from(m: LayerMask) -> String {
        m.to_string()
    }
}

impl TryFrom<String> for LayerMask {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Which context operator sits where.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CbPlacement {
    pub variant: Variant,
    pub site: Site,
    pub layers: LayerMask,
    pub aggregation: Aggregation,
    pub msa_uniform_head: UniformHead,
    /// Leave the class token out of the token mean.
    pub exclude_class_from_mean: bool,
    /// Initial value of every scaling weight for the scaled variant.
    pub scale_init: f64,
}

impl Default for CbPlacement {
    fn default() -> Self {
        CbPlacement {
            variant: Variant::None,
            site: Site::MlpEnd,
            layers: LayerMask::All,
            aggregation: Aggregation::Mean,
            msa_uniform_head: UniformHead::None,
            exclude_class_from_mean: false,
            scale_init: 1.0,
        }
    }
}

/// Full architectural description of a ViT.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub cb: CbPlacement,
    pub extra_block: ExtraBlock,
    /// Softmax scale; `None` means `1/sqrt(head_dim)`.
    pub attn_scale: Option<f64>,
    pub dropout: f64,
    pub drop_path: f64,
    pub ln_eps: f64,
    pub init: Init,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            depth: 4,
            dim: 64,
            heads: 4,
            mlp_ratio: 4,
            num_classes: 3,
            cb: CbPlacement::default(),
            extra_block: ExtraBlock::None,
            attn_scale: None,
            dropout: 0.0,
            drop_path: 0.0,
            ln_eps: 1e-6,
            init: Init::TruncNormal,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    /// Depth 2, width 8, two heads, 8×8 images with 4×4 patches.
    pub fn tiny() -> Self {
        ModelConfig {
            image_size: 8,
            patch_size: 4,
            depth: 2,
            dim: 8,
            heads: 2,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("depth", self.depth),
            ("dim", self.dim),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!("dim {} is not divisible by heads {}", self.dim, self.heads)));
        }
        if self.cb.msa_uniform_head == UniformHead::Replace && self.heads < 2 {
            return Err(Error::Config("uniform head replacement needs at least two heads".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.drop_path != 0.0 {
            return Err(Error::Config("drop_path is accepted for completeness but only 0 is supported".into()));
        }
        if let Some(s) = self.attn_scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("attn_scale must be positive, got {s}")));
            }
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config("ln_eps must be positive".into()));
        }
        if !self.cb.scale_init.is_finite() {
            return Err(Error::Config("cb.scale_init must be finite".into()));
        }
        self.cb.layers.validate(self.depth)
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Sequence length including the class token.
    pub fn tokens(&self) -> usize {
        self.patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    pub fn attn_lambda(&self) -> f64 {
        self.attn_scale.unwrap_or(1.0 / (self.head_dim() as f64).sqrt())
    }

    /// Whether the context operator is active in transformer layer `layer`.
    pub fn cb_active(&self, layer: usize) -> bool {
        self.cb.variant != Variant::None && self.cb.layers.contains(layer, self.depth)
    }

    /// Heads with learned query/key projections.
    pub fn learned_heads(&self) -> usize {
        match self.cb.msa_uniform_head {
            UniformHead::Replace => self.heads - 1,
            _ => self.heads,
        }
    }

    pub fn uniform_heads(&self) -> usize {
        usize::from(self.cb.msa_uniform_head != UniformHead::None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_counts() {
        let c = ModelConfig { image_size: 224, patch_size: 16, dim: 384, heads: 6, ..ModelConfig::default() };
        assert_eq!(c.tokens(), 197);
        let c = ModelConfig { image_size: 32, patch_size: 16, ..ModelConfig::default() };
        assert_eq!(c.tokens(), 5);
    }

    #[test]
    fn validation_errors() {
        let bad = ModelConfig { image_size: 30, ..ModelConfig::default() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { heads: 5, ..ModelConfig::default() };
        assert!(bad.validate().is_err());
        let mut bad = ModelConfig::default();
        bad.cb.layers = "0,7".parse().unwrap();
        assert!(bad.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig::tiny().validate().is_ok());
    }

    #[test]
    fn layer_masks() {
        assert_eq!(LayerMask::Upper.resolve(4), BTreeSet::from([2, 3]));
        assert_eq!(LayerMask::Lower.resolve(4), BTreeSet::from([0, 1]));
        assert_eq!(LayerMask::All.resolve(3), BTreeSet::from([0, 1, 2]));
        let m: LayerMask = "1, 3".parse().unwrap();
        assert_eq!(m.to_string(), "1,3");
        let none: LayerMask = "none".parse().unwrap();
        assert!(none.resolve(4).is_empty());
        assert!("x".parse::<LayerMask>().is_err());
    }

    #[test]
    fn config_serializes() {
        let mut c = ModelConfig::default();
        c.cb.layers = "2,3".parse().unwrap();
        c.cb.variant = Variant::CbS;
        let json = serde_json::to_string(&c).unwrap();
        let back: ModelConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, c);
    }
}
