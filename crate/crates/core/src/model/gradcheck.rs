//! Whole-model comparison of reverse-mode gradients against central
//! differences of the scalar loss.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::finite_diff::{partial, relative_error};
use crate::numerics::{Graph, Tensor};

use super::Vit;

/// Denominator floor of the relative error, so that coordinates whose true
/// gradient is numerically zero are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub tensor: String,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn failures(&self, tol: f64) -> Vec<&GradCheckEntry> {
        self.entries.iter().filter(|e| !(e.rel_error < tol)).collect()
    }

    /// Worst relative error per tensor, in check order.
    pub fn per_tensor(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for e in &self.entries {
            match out.iter_mut().find(|(n, _)| *n == e.tensor) {
                Some((_, w)) => *w = w.max(e.rel_error),
                None => out.push((e.tensor.clone(), e.rel_error)),
            }
        }
        out
    }
}

/// Checks up to `samples` coordinates of every trainable tensor, and of the
/// input images, picked with `seed`.
pub fn check_model_gradients(
    vit: &Vit<f64>,
    images: &Tensor<f64>,
    labels: &[usize],
    samples: usize,
    eps: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut g = Graph::new();
    let input = images.clone().with_requires_grad(true);
    let f = vit.forward(&mut g, &input, None)?;
    let loss = g.cross_entropy(f.logits, labels, 0.0)?;
    g.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    let mut probe = vit.clone();

    for i in 0..vit.params().len() {
        let (name, t) = vit.params().at(i);
        if !t.requires_grad() {
            continue;
        }
        let name = name.to_string();
        let analytic = g.grad(f.params[i]).expect("trainable leaf has a gradient").to_vec();
        let coords = sample(&mut rng, t.numel(), samples.min(t.numel())).into_vec();
        let mut data = t.data().to_vec();
        let mut eval = |theta: &[f64]| {
            probe.params_mut().at_mut(i).1.data_mut().copy_from_slice(theta);
            probe.loss(images, labels, 0.0).expect("forward succeeds on perturbed weights")
        };
        for c in coords {
            let numeric = partial(&mut eval, &mut data, c, eps);
            let a = analytic[c];
            report.entries.push(GradCheckEntry {
                tensor: name.clone(),
                coord: c,
                analytic: a,
                numeric,
                rel_error: relative_error(a, numeric, REL_FLOOR),
            });
        }
        probe.params_mut().at_mut(i).1.data_mut().copy_from_slice(t.data());
    }

    let analytic = g.grad(f.input).expect("input requires grad").to_vec();
    let coords = sample(&mut rng, images.numel(), samples.min(images.numel())).into_vec();
    let mut pixels = images.data().to_vec();
    let shape = images.shape().to_vec();
    let mut eval = |theta: &[f64]| {
        let x = Tensor::new(shape.clone(), theta.to_vec()).expect("same shape");
        vit.loss(&x, labels, 0.0).expect("forward succeeds on perturbed input")
    };
    for c in coords {
        let numeric = partial(&mut eval, &mut pixels, c, eps);
        report.entries.push(GradCheckEntry {
            tensor: "input".into(),
            coord: c,
            analytic: analytic[c],
            numeric,
            rel_error: relative_error(analytic[c], numeric, REL_FLOOR),
        });
    }
    Ok(report)
}
