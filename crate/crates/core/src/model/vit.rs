use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::context::{self, ContextOp, Variant};
use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, Tensor};
use crate::scalar::Scalar;

use super::config::{CbPlacement, ExtraBlock, ModelConfig, Site};
use super::params::{initialize, layout, Params};

/// One head's attention matrix for one sample of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord<T> {
    pub sample: usize,
    pub layer: usize,
    pub head: usize,
    /// Row-stochastic `[N, N]` matrix.
    pub matrix: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
struct AttentionNode {
    layer: usize,
    first_head: usize,
    heads: usize,
    node: NodeId,
}

/// Node handles produced by [`Vit::forward`].
#[derive(Clone, Debug)]
pub struct Forward {
    pub logits: NodeId,
    /// Pixel input `[B·H·W, C]`.
    pub input: NodeId,
    /// Token sequence after patch embedding, `[B·N, d]`.
    pub embedded: NodeId,
    /// One leaf per model tensor, in [`Params`] order.
    pub params: Vec<NodeId>,
    attention: Vec<AttentionNode>,
}

impl Forward {
    /// Learned-head attention maps, ordered by sample, layer, head. The extra
    /// MSA block, when present, is reported as layer `depth`. Uniform heads
    /// are not recorded.
    pub fn attention_records<T: Scalar>(&self, g: &Graph<T>) -> Vec<AttentionRecord<T>> {
        let mut out = Vec::new();
        let Some(first) = self.attention.first() else { return out };
        let groups = g.shape(first.node)[0] / first.heads;
        for sample in 0..groups {
            for att in &self.attention {
                let shape = g.shape(att.node);
                let n = shape[1];
                let data = g.value(att.node).data();
                for h in 0..att.heads {
                    let off = (sample * att.heads + h) * n * n;
                    let matrix = Tensor::new(vec![n, n], data[off..off + n * n].to_vec()).expect("n×n slice");
                    out.push(AttentionRecord { sample, layer: att.layer, head: att.first_head + h, matrix });
                }
            }
        }
        out
    }
}

/// A Vision Transformer with configurable context operators.
#[derive(Clone, Debug, PartialEq)]
pub struct Vit<T> {
    config: ModelConfig,
    params: Params<T>,
}

struct Bound<'a, T> {
    cfg: &'a ModelConfig,
    params: &'a Params<T>,
    ids: &'a [NodeId],
    tokens: usize,
}

impl<T: Scalar> Bound<'_, T> {
    fn id(&self, name: &str) -> Result<NodeId> {
        self.params
            .index_of(name)
            .map(|i| self.ids[i])
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    fn linear(&self, g: &mut Graph<T>, x: NodeId, prefix: &str) -> Result<NodeId> {
        let w = self.id(&format!("{prefix}.weight"))?;
        let b = self.id(&format!("{prefix}.bias"))?;
        g.linear(x, w, b)
    }

    fn norm(&self, g: &mut Graph<T>, x: NodeId, prefix: &str) -> Result<NodeId> {
        let w = self.id(&format!("{prefix}.weight"))?;
        let b = self.id(&format!("{prefix}.bias"))?;
        g.layer_norm(x, w, b, T::of(self.cfg.ln_eps))
    }

    fn context_op(&self, scale: Option<&str>) -> Result<ContextOp> {
        let scale = match (self.cfg.cb.variant, scale) {
            (Variant::CbS, Some(name)) => Some(self.id(name)?),
            _ => None,
        };
        Ok(ContextOp {
            variant: self.cfg.cb.variant,
            aggregation: self.cfg.cb.aggregation,
            exclude_class_from_mean: self.cfg.cb.exclude_class_from_mean,
            scale,
        })
    }
}

fn dropout<T: Scalar>(g: &mut Graph<T>, x: NodeId, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Result<NodeId> {
    let Some(rng) = rng else { return Ok(x) };
    if rate == 0.0 {
        return Ok(x);
    }
    let keep = T::of(1.0 / (1.0 - rate));
    let mask = Tensor::from_fn(g.shape(x), |_| if rng.random::<f64>() < rate { T::zero() } else { keep });
    let m = g.constant(mask);
    g.mul(x, m)
}

/// Gather indices turning `[B·H·W, C]` pixels into `[B·P, p·p·C]` patch rows,
/// patches in row-major grid order.
fn patch_index(cfg: &ModelConfig, batch: usize) -> Vec<usize> {
    let (s, p, c, grid) = (cfg.image_size, cfg.patch_size, cfg.channels, cfg.grid());
    let mut idx = Vec::with_capacity(batch * s * s * c);
    for b in 0..batch {
        for gr in 0..grid {
            for gc in 0..grid {
                for dy in 0..p {
                    for dx in 0..p {
                        let pixel = (b * s + gr * p + dy) * s + gc * p + dx;
                        idx.extend((0..c).map(|ch| pixel * c + ch));
                    }
                }
            }
        }
    }
    idx
}

impl<T: Scalar> Vit<T> {
    /// Fresh model with weights drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = initialize(&config, &mut rng);
        Ok(Vit { config, params })
    }

    /// Wraps existing tensors, checking them against the configuration's
    /// layout. Every mismatch is listed in the error.
    pub fn from_params(config: ModelConfig, params: Params<T>) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        let mut problems = Vec::new();
        for (name, shape, _) in &expected {
            match params.get(name) {
                Ok(t) if t.shape() != shape.as_slice() => {
                    problems.push(format!("{name}: expected {shape:?}, found {:?}", t.shape()))
                }
                Ok(_) => {}
                Err(_) => problems.push(format!("{name}: missing")),
            }
        }
        for (name, _) in params.iter() {
            if !expected.iter().any(|(n, _, _)| n == name) {
                problems.push(format!("{name}: unexpected"));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Checkpoint(format!("tensors do not match config: {}", problems.join("; "))));
        }
        let mut ordered = Params::new();
        for (name, _, _) in expected {
            ordered.insert(name.clone(), params.get(&name)?.clone());
        }
        Ok(Vit { config, params: ordered })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<T> {
        &mut self.params
    }

    pub fn into_params(self) -> Params<T> {
        self.params
    }

    /// Same weights under a different context placement. Fails if the new
    /// placement needs a different set of tensors.
    pub fn with_placement(&self, cb: CbPlacement) -> Result<Self> {
        let config = ModelConfig { cb, ..self.config.clone() };
        Vit::from_params(config, self.params.clone())
    }

    /// Sets the per-channel input standardisation `(x − mean) / std`.
    pub fn set_input_normalization(&mut self, mean: &[T], std: &[T]) -> Result<()> {
        let c = self.config.channels;
        if mean.len() != c || std.len() != c || std.iter().any(|&s| !(s > T::zero())) {
            return Err(Error::invalid("set_input_normalization", "need one positive std per channel"));
        }
        for (name, values) in [("input.mean", mean), ("input.std", std)] {
            let t = self.params.get_mut(name).expect("layout has input buffers");
            t.data_mut().copy_from_slice(values);
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.params.trainable_count()
    }

    fn check_images(&self, images: &Tensor<T>) -> Result<usize> {
        let c = &self.config;
        match images.shape() {
            [b, h, w, ch] if *h == c.image_size && *w == c.image_size && *ch == c.channels => Ok(*b),
            s => Err(Error::shape(
                "vit_forward",
                format!("images {s:?}, expected [B, {}, {}, {}]", c.image_size, c.image_size, c.channels),
            )),
        }
    }

    /// Records the full forward pass on `g`. `images` is `[B, H, W, C]` with
    /// pixels in `[0, 1]`. Dropout runs only when an RNG is supplied.
    pub fn forward(&self, g: &mut Graph<T>, images: &Tensor<T>, mut rng: Option<&mut ChaCha8Rng>) -> Result<Forward> {
        let batch = self.check_images(images)?;
        if batch == 0 {
            return Err(Error::invalid("vit_forward", "empty batch"));
        }
        let cfg = &self.config;
        let ids: Vec<NodeId> = self.params.iter().map(|(_, t)| g.leaf(t.clone())).collect();
        let input = g.leaf(images.reshape(&[batch * cfg.image_size * cfg.image_size, cfg.channels])?.with_requires_grad(images.requires_grad()));
        let bound = Bound { cfg, params: &self.params, ids: &ids, tokens: cfg.tokens() };

        let embedded = self.patch_embed(g, &bound, input, batch)?;
        let mut x = embedded;
        let mut attention = Vec::new();
        for layer in 0..cfg.depth {
            let p = format!("blocks.{layer}");
            let h = bound.norm(g, x, &format!("{p}.norm1"))?;
            let (mut a, att) = self.msa_forward(g, &bound, h, &format!("{p}.attn"), layer)?;
            attention.push(att);
            if cfg.cb_active(layer) && cfg.cb.site.in_msa() {
                let op = bound.context_op(Some(&format!("{p}.cb_msa.scale")))?;
                a = context::apply(g, a, bound.tokens, &op)?;
            }
            a = dropout(g, a, cfg.dropout, rng.as_deref_mut())?;
            x = g.add(x, a)?;
            let h = bound.norm(g, x, &format!("{p}.norm2"))?;
            let m = self.mlp_forward(g, &bound, h, &format!("{p}.mlp"), Some(layer), rng.as_deref_mut())?;
            x = g.add(x, m)?;
        }
        match cfg.extra_block {
            ExtraBlock::None => {}
            ExtraBlock::Msa => {
                let h = bound.norm(g, x, "extra.norm")?;
                let (a, att) = self.msa_forward(g, &bound, h, "extra.attn", cfg.depth)?;
                attention.push(att);
                x = g.add(x, a)?;
            }
            ExtraBlock::Mlp => {
                let h = bound.norm(g, x, "extra.norm")?;
                let m = self.mlp_forward(g, &bound, h, "extra.mlp", None, rng.as_deref_mut())?;
                x = g.add(x, m)?;
            }
        }
        let class = g.select_token(x, bound.tokens, 0)?;
        let class = bound.norm(g, class, "norm")?;
        let logits = bound.linear(g, class, "head")?;
        Ok(Forward { logits, input, embedded, params: ids, attention })
    }

    /// Standardises pixels, cuts patches, projects them, prepends the class
    /// token and adds positional embeddings: `[B·N, d]`.
    fn patch_embed(&self, g: &mut Graph<T>, b: &Bound<'_, T>, input: NodeId, batch: usize) -> Result<NodeId> {
        let cfg = b.cfg;
        let mean = b.params.get("input.mean")?;
        let std = b.params.get("input.std")?;
        let shift = g.constant(mean.map(|m| -m));
        let inv = g.constant(std.map(|s| T::one() / s));
        let x = g.add_row(input, shift)?;
        let x = g.mul_row(x, inv)?;
        let patches = g.gather(x, patch_index(cfg, batch), vec![batch * cfg.patches(), cfg.patch_dim()])?;
        let tokens = b.linear(g, patches, "patch_embed")?;
        let tokens = g.prepend_token(tokens, b.id("cls_token")?, cfg.patches())?;
        g.add_tiled(tokens, b.id("pos_embed")?)
    }

    /// Multi-head self-attention on already-normalised tokens `h [B·N, d]`.
    fn msa_forward(&self, g: &mut Graph<T>, b: &Bound<'_, T>, h: NodeId, prefix: &str, layer: usize) -> Result<(NodeId, AttentionNode)> {
        let cfg = b.cfg;
        let (n, dh) = (b.tokens, cfg.head_dim());
        let (learned, uniform) = (cfg.learned_heads(), cfg.uniform_heads());
        let qk_width = learned * dh;
        let qkv = b.linear(g, h, &format!("{prefix}.qkv"))?;

        let q = g.columns(qkv, 0, qk_width)?;
        let k = g.columns(qkv, qk_width, qk_width)?;
        let v = g.columns(qkv, 2 * qk_width + uniform * dh, learned * dh)?;
        let q = g.split_heads(q, n, learned)?;
        let k = g.split_heads(k, n, learned)?;
        let v = g.split_heads(v, n, learned)?;
        let scores = g.batch_matmul(q, k, true)?;
        let attn = g.softmax(scores, T::of(cfg.attn_lambda()))?;
        let out = g.batch_matmul(attn, v, false)?;
        let mut merged = g.merge_heads(out, learned)?;

        if uniform > 0 {
            let uv = g.columns(qkv, 2 * qk_width, dh)?;
            let mean = g.token_mean(uv, n, 0)?;
            let u = g.broadcast_tokens(mean, n)?;
            merged = g.concat_cols(&[u, merged])?;
        }
        let y = b.linear(g, merged, &format!("{prefix}.proj"))?;
        let record = AttentionNode { layer, first_head: uniform, heads: learned, node: attn };
        Ok((y, record))
    }

    /// FC → GELU → FC with the context operator at the configured MLP site.
    /// `layer = None` marks a block outside the layer stack (never carries CB).
    fn mlp_forward(
        &self,
        g: &mut Graph<T>,
        b: &Bound<'_, T>,
        h: NodeId,
        prefix: &str,
        layer: Option<usize>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        let cfg = b.cfg;
        let active = layer.is_some_and(|l| cfg.cb_active(l) && cfg.cb.site.in_mlp());
        let op = match layer {
            Some(l) if active => Some(b.context_op(Some(&format!("blocks.{l}.cb_mlp.scale")))?),
            _ => None,
        };
        let site = if cfg.cb.site == Site::BothMlpMsa { Site::MlpEnd } else { cfg.cb.site };
        let at = |s: Site| op.as_ref().filter(|_| site == s);

        let mut x = h;
        if let Some(op) = at(Site::MlpFront) {
            x = context::apply(g, x, b.tokens, op)?;
        }
        x = b.linear(g, x, &format!("{prefix}.fc1"))?;
        x = g.gelu(x)?;
        x = dropout(g, x, cfg.dropout, rng.as_deref_mut())?;
        if let Some(op) = at(Site::MlpMid) {
            x = context::apply(g, x, b.tokens, op)?;
        }
        x = b.linear(g, x, &format!("{prefix}.fc2"))?;
        x = dropout(g, x, cfg.dropout, rng.as_deref_mut())?;
        if let Some(op) = at(Site::MlpEnd) {
            x = context::apply(g, x, b.tokens, op)?;
        }
        Ok(x)
    }

    /// Logits `[B, classes]` and every learned-head attention map.
    pub fn predict(&self, images: &Tensor<T>) -> Result<(Tensor<T>, Vec<AttentionRecord<T>>)> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, images, None)?;
        Ok((g.value(f.logits).clone(), f.attention_records(&g)))
    }

    pub fn logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, images, None)?;
        Ok(g.value(f.logits).clone())
    }

    /// Mean cross-entropy without recording gradients.
    pub fn loss(&self, images: &Tensor<T>, labels: &[usize], smoothing: T) -> Result<T> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, images, None)?;
        let l = g.cross_entropy(f.logits, labels, smoothing)?;
        Ok(g.value(l).data()[0])
    }

    /// Largest logit difference between evaluating these weights with the
    /// context operator in the middle of the MLP and after it.
    pub fn mid_end_discrepancy(&self, images: &Tensor<T>) -> Result<T> {
        let at = |site| self.with_placement(CbPlacement { site, ..self.config.cb.clone() })?.logits(images);
        at(Site::MlpMid)?.max_abs_diff(&at(Site::MlpEnd)?)
    }
}
