#![allow(dead_code)]

use cbvit::numerics::finite_diff::{partial, relative_error};
use cbvit::numerics::{Graph, NodeId, Tensor};
use cbvit::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(shape: &[usize], rng: &mut ChaCha8Rng, std: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| std * rng.sample::<f64, _>(StandardNormal))
}

/// Random point of the probability simplex with a few exact zeros mixed in.
pub fn distribution(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut a: Vec<f64> = (0..n).map(|_| rng.random::<f64>().powi(3)).collect();
    if n > 2 && rng.random_bool(0.3) {
        a[rng.random_range(0..n)] = 0.0;
    }
    let s: f64 = a.iter().sum();
    a.iter_mut().for_each(|v| *v /= s);
    a
}

/// Worst relative error between reverse-mode and central-difference
/// gradients of `Σ w ⊙ build(leaves)` for fixed random weights `w`, over at
/// most `coords` coordinates per leaf.
pub fn worst_grad_error(
    leaves: &[Tensor<f64>],
    build: impl Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
    coords: usize,
    seed: u64,
) -> f64 {
    let mut r = rng(seed);
    let eval = |values: &[Tensor<f64>], weights: &Tensor<f64>, grads: bool| {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|t| g.leaf(t.clone().with_requires_grad(grads))).collect();
        let out = build(&mut g, &ids).unwrap();
        let wn = g.constant(weights.clone());
        let prod = g.mul(out, wn).unwrap();
        let loss = g.sum(prod).unwrap();
        (g, ids, loss)
    };
    let shape = {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &ids).unwrap();
        g.shape(out).to_vec()
    };
    let weights = normal(&shape, &mut r, 1.0);

    let (mut g, ids, loss) = eval(leaves, &weights, true);
    g.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = g.grad(ids[li]).unwrap().to_vec();
        let mut probe = leaf.data().to_vec();
        let mut f = |theta: &[f64]| {
            let mut vals = leaves.to_vec();
            vals[li] = Tensor::new(leaf.shape().to_vec(), theta.to_vec()).unwrap();
            let (g, _, loss) = eval(&vals, &weights, false);
            g.value(loss).data()[0]
        };
        let n = leaf.numel();
        let picks: Vec<usize> = if n <= coords { (0..n).collect() } else { (0..coords).map(|_| r.random_range(0..n)).collect() };
        for c in picks {
            let numeric = partial(&mut f, &mut probe, c, 1e-5);
            worst = worst.max(relative_error(analytic[c], numeric, 1e-6));
        }
    }
    worst
}
