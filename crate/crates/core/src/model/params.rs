use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

use super::config::{ExtraBlock, Init, ModelConfig};
use crate::context::Variant;

/// Named model tensors in a stable order. Trainable parameters carry
/// `requires_grad = true`; fixed buffers (input normalisation) do not.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Params<T> {
    entries: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> Params<T> {
    pub fn new() -> Self {
        Params { entries: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.entries.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.get_index_of(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn at(&self, i: usize) -> (&str, &Tensor<T>) {
        let (k, v) = self.entries.get_index(i).expect("index in range");
        (k.as_str(), v)
    }

    pub fn at_mut(&mut self, i: usize) -> (&str, &mut Tensor<T>) {
        let (k, v) = self.entries.get_index_mut(i).expect("index in range");
        (k.as_str(), v)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.values().filter(|t| t.requires_grad()).map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params { entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }
}

/// Kind of tensor, used to pick its initial values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Role {
    Weight,
    Bias,
    NormScale,
    NormShift,
    Embedding,
    CbScale,
    InputMean,
    InputStd,
}

/// Shape layout of every tensor a configuration needs, in parameter order.
pub(crate) fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Role)> {
    let d = cfg.dim;
    let mut out: Vec<(String, Vec<usize>, Role)> = vec![
        ("input.mean".into(), vec![cfg.channels], Role::InputMean),
        ("input.std".into(), vec![cfg.channels], Role::InputStd),
        ("patch_embed.weight".into(), vec![cfg.patch_dim(), d], Role::Weight),
        ("patch_embed.bias".into(), vec![d], Role::Bias),
        ("cls_token".into(), vec![d], Role::Embedding),
        ("pos_embed".into(), vec![cfg.tokens(), d], Role::Embedding),
    ];
    let scaled = cfg.cb.variant == Variant::CbS;
    for layer in 0..cfg.depth {
        let p = format!("blocks.{layer}");
        push_norm(&mut out, &format!("{p}.norm1"), d);
        push_attention(&mut out, &format!("{p}.attn"), cfg);
        if scaled && cfg.cb_active(layer) && cfg.cb.site.in_msa() {
            out.push((format!("{p}.cb_msa.scale"), vec![d], Role::CbScale));
        }
        push_norm(&mut out, &format!("{p}.norm2"), d);
        push_mlp(&mut out, &format!("{p}.mlp"), cfg);
        if scaled && cfg.cb_active(layer) && cfg.cb.site.in_mlp() {
            let width = if cfg.cb.site == super::Site::MlpMid { cfg.hidden_dim() } else { d };
            out.push((format!("{p}.cb_mlp.scale"), vec![width], Role::CbScale));
        }
    }
    match cfg.extra_block {
        ExtraBlock::None => {}
        ExtraBlock::Msa => {
            push_norm(&mut out, "extra.norm", d);
            push_attention(&mut out, "extra.attn", cfg);
        }
        ExtraBlock::Mlp => {
            push_norm(&mut out, "extra.norm", d);
            push_mlp(&mut out, "extra.mlp", cfg);
        }
    }
    push_norm(&mut out, "norm", d);
    out.push(("head.weight".into(), vec![d, cfg.num_classes], Role::Weight));
    out.push(("head.bias".into(), vec![cfg.num_classes], Role::Bias));
    out
}

fn push_norm(out: &mut Vec<(String, Vec<usize>, Role)>, p: &str, d: usize) {
    out.push((format!("{p}.weight"), vec![d], Role::NormScale));
    out.push((format!("{p}.bias"), vec![d], Role::NormShift));
}

fn push_attention(out: &mut Vec<(String, Vec<usize>, Role)>, p: &str, cfg: &ModelConfig) {
    let dh = cfg.head_dim();
    let qkv = 2 * cfg.learned_heads() * dh + (cfg.learned_heads() + cfg.uniform_heads()) * dh;
    let merged = (cfg.learned_heads() + cfg.uniform_heads()) * dh;
    out.push((format!("{p}.qkv.weight"), vec![cfg.dim, qkv], Role::Weight));
    out.push((format!("{p}.qkv.bias"), vec![qkv], Role::Bias));
    out.push((format!("{p}.proj.weight"), vec![merged, cfg.dim], Role::Weight));
    out.push((format!("{p}.proj.bias"), vec![cfg.dim], Role::Bias));
}

fn push_mlp(out: &mut Vec<(String, Vec<usize>, Role)>, p: &str, cfg: &ModelConfig) {
    let h = cfg.hidden_dim();
    out.push((format!("{p}.fc1.weight"), vec![cfg.dim, h], Role::Weight));
    out.push((format!("{p}.fc1.bias"), vec![h], Role::Bias));
    out.push((format!("{p}.fc2.weight"), vec![h, cfg.dim], Role::Weight));
    out.push((format!("{p}.fc2.bias"), vec![cfg.dim], Role::Bias));
}

/// Normal sample truncated (by rejection) to two standard deviations.
pub(crate) fn trunc_normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    let normal = Normal::new(0.0, std).expect("positive std");
    loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            return v;
        }
    }
}

pub(crate) fn initialize<T: Scalar, R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Params<T> {
    let mut params = Params::new();
    for (name, shape, role) in layout(cfg) {
        let numel: usize = shape.iter().product();
        let values: Vec<T> = match role {
            Role::Weight | Role::Embedding => match cfg.init {
                Init::TruncNormal => (0..numel).map(|_| T::of(trunc_normal(rng, cfg.init_std))).collect(),
                Init::Zeros => vec![T::zero(); numel],
            },
            Role::Bias | Role::NormShift | Role::InputMean => vec![T::zero(); numel],
            Role::NormScale | Role::InputStd => vec![T::one(); numel],
            Role::CbScale => vec![T::of(cfg.cb.scale_init); numel],
        };
        let trainable = !matches!(role, Role::InputMean | Role::InputStd);
        let t = Tensor::new(shape, values).expect("layout shapes are consistent").with_requires_grad(trainable);
        params.insert(name, t);
    }
    params
}

/// Whether weight decay applies to the named tensor: projection matrices and
/// the positional embedding, not biases, norms, tokens or scaling weights.
pub fn decays(name: &str, tensor: &Tensor<impl Scalar>) -> bool {
    tensor.requires_grad() && tensor.shape().len() >= 2
        && !name.ends_with(".bias")
}
