use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{entropy_profile, fmt_f64, relative_distance_by_layer, DistanceMode, Excludes, TokenPositions};
use crate::error::{Error, Result};
use crate::model::{decays, ModelConfig, Vit};
use crate::numerics::{Graph, Tensor};
use crate::scalar::Scalar;

use super::data::SyntheticDataset;
use super::optim::{adamw_step, cosine_lr, AdamHyper, AdamState, ADAM_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

crate::context::str_enum!(Precision, "precision", {
    "f32" => Precision::F32,
    "f64" => Precision::F64,
});

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate; `None` applies `1e-3 · batch_size / 1024`.
    pub lr: Option<f64>,
    pub min_lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub seed: u64,
    pub label_smoothing: f64,
    pub precision: Precision,
    /// Images of the evaluation set used for per-epoch attention diagnostics.
    pub probe_size: usize,
    /// End training after the first epoch whose top-1 accuracy reaches this.
    pub stop_at_top1: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 64,
            lr: None,
            min_lr: 1e-5,
            betas: (0.9, 0.999),
            weight_decay: 0.05,
            warmup_epochs: 1,
            seed: 0,
            label_smoothing: 0.0,
            precision: Precision::F32,
            probe_size: 32,
            stop_at_top1: None,
        }
    }
}

impl TrainConfig {
    pub fn base_lr(&self) -> f64 {
        self.lr.unwrap_or(1e-3 * self.batch_size as f64 / 1024.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        let (b1, b2) = self.betas;
        if !(b1 > 0.0 && b1 < 1.0 && b2 > 0.0 && b2 < 1.0) {
            return Err(Error::Config(format!("betas {:?} must lie in (0, 1)", self.betas)));
        }
        if !(self.base_lr() >= 0.0) || !(self.min_lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr, min_lr and weight_decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label_smoothing must lie in [0, 1)".into()));
        }
        if self.probe_size == 0 {
            return Err(Error::Config("probe_size must be at least 1".into()));
        }
        if self.stop_at_top1.is_some_and(|t| !(0.0..=1.0).contains(&t)) {
            return Err(Error::Config("stop_at_top1 must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One epoch of training metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub top1: f64,
    pub top5: f64,
    /// Mean attention entropy per layer on the probe batch.
    pub entropy: Vec<f64>,
    /// Mean relative interaction distance per layer on the probe batch.
    pub distance: Vec<f64>,
}

pub fn metrics_header(layers: usize) -> String {
    let mut cols = vec!["epoch".to_string(), "lr".into(), "train_loss".into(), "top1".into(), "top5".into()];
    cols.extend((0..layers).map(|l| format!("entropy_l{l}")));
    cols.extend((0..layers).map(|l| format!("distance_l{l}")));
    cols.join(",")
}

pub fn write_metrics_csv<W: Write>(mut w: W, records: &[MetricsRecord]) -> std::io::Result<()> {
    let layers = records.first().map_or(0, |r| r.entropy.len());
    writeln!(w, "{}", metrics_header(layers))?;
    for r in records {
        let mut cols = vec![r.epoch.to_string(), fmt_f64(r.lr), fmt_f64(r.train_loss), fmt_f64(r.top1), fmt_f64(r.top5)];
        cols.extend(r.entropy.iter().map(|&v| fmt_f64(v)));
        cols.extend(r.distance.iter().map(|&v| fmt_f64(v)));
        writeln!(w, "{}", cols.join(","))?;
    }
    Ok(())
}

/// Anything that maps a `[B, H, W, C]` batch to `[B, classes]` logits.
pub trait Classifier<T> {
    fn classify(&self, images: &Tensor<T>) -> Result<Tensor<T>>;
    fn num_classes(&self) -> usize;
}

impl<T: Scalar> Classifier<T> for Vit<T> {
    fn classify(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.logits(images)
    }

    fn num_classes(&self) -> usize {
        self.config().num_classes
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Accuracy {
    pub top1: f64,
    pub topk: f64,
    pub k: usize,
}

/// Rank of `label` among `logits`, counting strictly larger logits and equal
/// logits at lower class indices.
fn label_rank<T: Scalar>(logits: &[T], label: usize) -> usize {
    let target = logits[label];
    logits
        .iter()
        .enumerate()
        .filter(|&(c, &v)| v > target || (v == target && c < label))
        .count()
}

/// Top-1 and top-k hit counts of a logit block.
pub fn count_hits<T: Scalar>(logits: &Tensor<T>, labels: &[usize], k: usize) -> Result<(usize, usize)> {
    let (b, c) = logits.dims2()?;
    if labels.len() != b || labels.iter().any(|&l| l >= c) {
        return Err(Error::shape("evaluate", format!("{} labels for logits [{b},{c}]", labels.len())));
    }
    let mut top1 = 0;
    let mut topk = 0;
    for (i, &l) in labels.iter().enumerate() {
        let rank = label_rank(logits.row(i), l);
        top1 += usize::from(rank == 0);
        topk += usize::from(rank < k);
    }
    Ok((top1, topk))
}

/// Fraction of argmax-correct predictions (ties go to the lowest class
/// index) and top-`k` accuracy.
pub fn evaluate<T: Scalar, M: Classifier<T>>(model: &M, data: &SyntheticDataset, k: usize, batch_size: usize) -> Result<Accuracy> {
    if data.is_empty() {
        return Err(Error::Dataset("cannot evaluate on an empty dataset".into()));
    }
    if model.num_classes() != data.num_classes() {
        return Err(Error::Config(format!(
            "model has {} classes, dataset {}",
            model.num_classes(),
            data.num_classes()
        )));
    }
    let k = k.clamp(1, data.num_classes());
    let (mut top1, mut topk) = (0, 0);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (images, labels) = data.batch::<T>(chunk)?;
        let logits = model.classify(&images)?;
        let (a, b) = count_hits(&logits, &labels, k)?;
        top1 += a;
        topk += b;
    }
    let n = data.len() as f64;
    Ok(Accuracy { top1: top1 as f64 / n, topk: topk as f64 / n, k })
}

#[derive(Debug)]
pub struct TrainOutcome<T> {
    pub metrics: Vec<MetricsRecord>,
    pub model: Vit<T>,
}

/// Entropy and distance per transformer layer on one batch.
pub fn probe_diagnostics<T: Scalar>(vit: &Vit<T>, data: &SyntheticDataset, size: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let idx: Vec<usize> = (0..size.min(data.len())).collect();
    let (images, _) = data.batch::<T>(&idx)?;
    let (_, records) = vit.predict(&images)?;
    let depth = vit.config().depth;
    let layer_records: Vec<_> = records.into_iter().filter(|r| r.layer < depth).collect();
    let profile = entropy_profile(&layer_records, Excludes::NONE, "")?;
    let positions = TokenPositions::grid(vit.config().grid());
    let distance = relative_distance_by_layer(&layer_records, &positions, DistanceMode::Raw)?;
    Ok((profile.per_layer, distance))
}

/// Trains a fresh model (weights seeded by `train_cfg.seed`) with AdamW and
/// a warmup-cosine schedule. Evaluation and diagnostics use `eval` when
/// given, the training set otherwise. Single-threaded and deterministic.
pub fn train<T: Scalar>(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &SyntheticDataset,
    eval: Option<&SyntheticDataset>,
) -> Result<TrainOutcome<T>> {
    let mut vit = Vit::<T>::new(model_cfg.clone(), train_cfg.seed)?;
    let metrics = train_model(&mut vit, train_cfg, data, eval)?;
    Ok(TrainOutcome { metrics, model: vit })
}

/// Continues training `vit` in place.
pub fn train_model<T: Scalar>(
    vit: &mut Vit<T>,
    cfg: &TrainConfig,
    data: &SyntheticDataset,
    eval: Option<&SyntheticDataset>,
) -> Result<Vec<MetricsRecord>> {
    cfg.validate()?;
    let mc = vit.config().clone();
    let (h, w, c) = data.dims();
    if h != mc.image_size || w != mc.image_size || c != mc.channels || data.num_classes() != mc.num_classes {
        return Err(Error::Config(format!(
            "dataset {h}×{w}×{c} with {} classes does not fit the model ({}×{}×{}, {} classes)",
            data.num_classes(),
            mc.image_size,
            mc.image_size,
            mc.channels,
            mc.num_classes
        )));
    }
    if data.is_empty() {
        return Err(Error::Dataset("empty training set".into()));
    }
    let eval = eval.unwrap_or(data);

    let (mean, std) = data.channel_stats();
    let to_t = |v: &[f64]| v.iter().map(|&x| T::of(x)).collect::<Vec<T>>();
    vit.set_input_normalization(&to_t(&mean), &to_t(&std))?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0000_da7a);
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let warmup_steps = (cfg.warmup_epochs * steps_per_epoch).min(total_steps.saturating_sub(1));
    let base_lr = cfg.base_lr();

    let mut states: Vec<Option<AdamState<T>>> = vit
        .params()
        .iter()
        .map(|(_, t)| t.requires_grad().then(|| AdamState::new(t.numel())))
        .collect();
    let decay: Vec<bool> = vit.params().iter().map(|(n, t)| decays(n, t)).collect();

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0usize;
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = base_lr;
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            lr = cosine_lr(step, total_steps, warmup_steps, base_lr, cfg.min_lr.min(base_lr));
            let (images, labels) = data.batch::<T>(batch)?;
            let mut g = Graph::new();
            let dropout_rng = (mc.dropout > 0.0).then_some(&mut rng);
            let f = vit.forward(&mut g, &images, dropout_rng)?;
            let loss = g.cross_entropy(f.logits, &labels, T::of(cfg.label_smoothing))?;
            let value = g.value(loss).data()[0].as_f64();
            if !value.is_finite() {
                return Err(Error::Diverged(format!("loss {value} at epoch {epoch}, step {step}")));
            }
            loss_sum += value * batch.len() as f64;
            g.backward(loss)?;
            for (i, state) in states.iter_mut().enumerate() {
                let Some(state) = state else { continue };
                let grad = g.grad(f.params[i]).expect("trainable leaf has a gradient").to_vec();
                let hyper = AdamHyper {
                    lr,
                    betas: cfg.betas,
                    weight_decay: if decay[i] { cfg.weight_decay } else { 0.0 },
                    eps: ADAM_EPS,
                };
                let (name, tensor) = vit.params_mut().at_mut(i);
                adamw_step(tensor.data_mut(), &grad, state, step as u64, hyper)?;
                if !tensor.is_finite() {
                    return Err(Error::Diverged(format!("non-finite weights in {name} at step {step}")));
                }
            }
        }
        let acc = evaluate(&*vit, eval, 5, 256)?;
        let (entropy, distance) = probe_diagnostics(vit, eval, cfg.probe_size)?;
        records.push(MetricsRecord {
            epoch,
            lr,
            train_loss: loss_sum / data.len() as f64,
            top1: acc.top1,
            top5: acc.topk,
            entropy,
            distance,
        });
        if cfg.stop_at_top1.is_some_and(|t| acc.top1 >= t) {
            break;
        }
    }
    Ok(records)
}
