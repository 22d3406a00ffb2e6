//! The acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line each, and exits non-zero if a gated criterion fails. The trend check
//! is reported but never gates.

use std::fmt::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use cbvit::analysis::{
    attention_entropy, entropy_profile, nuclear_norm_analytic, softmax_jacobian, verify_uniform_maximality, Excludes,
};
use cbvit::context::{cb, token_mean, Variant};
use cbvit::model::gradcheck::check_model_gradients;
use cbvit::model::{checkpoint, ModelConfig, Site, Vit};
use cbvit::numerics::Tensor;
use cbvit::training::{
    center_occlusion, fgsm_attack, fgsm_attack_u8, make_synthetic_dataset, train, MetricsRecord, SyntheticDataset,
    TrainConfig,
};
use cbvit::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

// Pinned tolerances and budgets.
const JACOBIAN_TOL: f64 = 1e-8;
const JACOBIAN_BUDGET: Duration = Duration::from_secs(10);
const MAXIMALITY_TOL: f64 = 1e-12;
const MAXIMALITY_SAMPLES: usize = 100_000;
const LN_197: f64 = 5.2832;
const LN_197_TOL: f64 = 1e-4;
const ALGEBRA_TOL: f64 = 1e-12;
const ALGEBRA_CASES: usize = 1000;
const MID_END_TOL_F64: f64 = 1e-10;
const MID_END_TOL_F32: f64 = 1e-5;
const MID_END_INPUTS: usize = 32;
const GRAD_TOL: f64 = 1e-4;
const GRAD_COORDS: usize = 50;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const DESK_TARGET: f64 = 0.90;
const DESK_EPOCHS: usize = 20;
/// Epochs the desk runs needed when this bound was frozen: 5 for both models.
const DESK_EPOCH_BOUND: usize = 8;
const DESK_BUDGET: Duration = Duration::from_secs(600);
const TREND_SEEDS: [u64; 3] = [0, 1, 2];
const FGSM_STEPS: [u8; 2] = [1, 4];

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn simplex(n: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    let mut a: Vec<f64> = (0..n).map(|_| r.random::<f64>().powi(3) + 1e-300).collect();
    let s: f64 = a.iter().sum();
    a.iter_mut().for_each(|v| *v /= s);
    a
}

fn jacobian_oracle() -> Check {
    let start = Instant::now();
    let mut r = rng(1);
    let mut worst = 0.0f64;
    for n in [2, 4, 8, 16] {
        for _ in 0..100 {
            let a = simplex(n, &mut r);
            let lambda = r.random_range(0.1..3.0);
            let j = softmax_jacobian(&a, lambda).map_err(|e| e.to_string())?;
            let svd: f64 = nalgebra::DMatrix::from_row_slice(n, n, j.data()).singular_values().sum();
            let analytic = nuclear_norm_analytic(&a, lambda).map_err(|e| e.to_string())?;
            worst = worst.max((svd - analytic).abs());
        }
    }
    let took = start.elapsed();
    ensure(worst < JACOBIAN_TOL, || format!("worst |Σσ − trace| = {worst:.3e}"))?;
    ensure(took < JACOBIAN_BUDGET, || format!("took {took:?}"))?;
    Ok(format!("worst |Σσ − trace| = {worst:.2e} over 400 distributions in {took:.2?}"))
}

fn uniform_maximality() -> Check {
    let mut violations = 0;
    let mut tightest = f64::INFINITY;
    let mut uniform_gap = 0.0f64;
    for n in 2..=32 {
        for lambda in [0.5, 1.0, 2.0] {
            let rep = verify_uniform_maximality(n, lambda, MAXIMALITY_SAMPLES, 0xacce_0000 + n as u64)
                .map_err(|e| e.to_string())?;
            violations += rep.violations;
            tightest = tightest.min(rep.margin);
            let at_uniform = nuclear_norm_analytic(&vec![1.0 / n as f64; n], lambda).map_err(|e| e.to_string())?;
            uniform_gap = uniform_gap.max((at_uniform - rep.bound).abs()).max((rep.uniform_value - rep.bound).abs());
        }
    }
    ensure(violations == 0, || format!("{violations} samples exceeded the bound"))?;
    ensure(tightest >= -MAXIMALITY_TOL, || format!("margin {tightest:.3e}"))?;
    ensure(uniform_gap <= MAXIMALITY_TOL, || format!("uniform misses the bound by {uniform_gap:.3e}"))?;
    Ok(format!("93 (N, λ) pairs × {MAXIMALITY_SAMPLES} samples, 0 violations, smallest margin {tightest:.2e}, uniform gap {uniform_gap:.1e}"))
}

/// Checks every recorded attention row of `vit` on `images`.
fn check_entropy_bounds<T: Scalar>(vit: &Vit<T>, images: &Tensor<T>) -> Result<usize, String> {
    let (_, records) = vit.predict(images).map_err(|e| e.to_string())?;
    let mut rows = 0;
    for rec in &records {
        let n = rec.matrix.shape()[1];
        let bound = (n as f64).ln();
        for i in 0..rec.matrix.shape()[0] {
            let h = attention_entropy(rec.matrix.row(i)).map_err(|e| e.to_string())?.as_f64();
            ensure((0.0..=bound).contains(&h), || format!("layer {} row {i}: entropy {h} outside [0, {bound}]", rec.layer))?;
            rows += 1;
        }
    }
    for excludes in [Excludes::NONE, Excludes { class_token: true, last_layers: 1 }] {
        let p = entropy_profile(&records, excludes, "").map_err(|e| e.to_string())?;
        ensure(p.per_layer.iter().all(|&h| (0.0..=p.bound()).contains(&h)), || format!("profile {:?}", p.per_layer))?;
    }
    Ok(rows)
}

fn entropy_bound(desk: &DeskRuns, data: &SyntheticDataset) -> Check {
    let h = attention_entropy(&vec![1.0 / 197.0; 197]).map_err(|e| e.to_string())?;
    ensure((h - LN_197).abs() <= LN_197_TOL, || format!("ln 197 computed as {h}"))?;
    let idx: Vec<usize> = (0..64).collect();
    let (images, _) = data.batch::<f32>(&idx).map_err(|e| e.to_string())?;
    let mut rows = 0;
    for vit in [&desk.baseline.model, &desk.cb.model, &desk.rerun.model] {
        rows += check_entropy_bounds(vit, &images)?;
    }
    let mut r = rng(3);
    for variant in [Variant::None, Variant::Cb, Variant::CbS, Variant::CbGate, Variant::CbHybrid] {
        let mut cfg = ModelConfig { init_std: 1.0, ..ModelConfig::default() };
        cfg.cb.variant = variant;
        let vit = Vit::<f64>::new(cfg.clone(), r.random()).map_err(|e| e.to_string())?;
        let x = Tensor::from_fn(&[4, 32, 32, 3], |_| r.random::<f64>());
        rows += check_entropy_bounds(&vit, &x)?;
    }
    Ok(format!("ln 197 = {h:.6}; {rows} recorded rows from trained and random models all in [0, ln N]"))
}

fn cb_algebra() -> Check {
    let mut r = rng(4);
    let (mut worst_mean, mut worst_half) = (0.0f64, 0.0f64);
    for _ in 0..ALGEBRA_CASES {
        let (n, d) = (r.random_range(1..50), r.random_range(1..33));
        let scale = r.random_range(0.1..3.0);
        let x = Tensor::from_fn(&[n, d], |_| scale * r.sample::<f64, _>(StandardNormal));
        let y = cb(&x).map_err(|e| e.to_string())?;
        let (mx, my) = (token_mean(&x).map_err(|e| e.to_string())?, token_mean(&y).map_err(|e| e.to_string())?);
        for (a, b) in mx.iter().zip(&my) {
            worst_mean = worst_mean.max((a - b).abs() / a.abs().max(1.0));
        }
        for i in 0..n {
            let dist = |row: &[f64]| row.iter().zip(&mx).map(|(v, m)| (v - m).powi(2)).sum::<f64>().sqrt();
            worst_half = worst_half.max((dist(y.row(i)) - 0.5 * dist(x.row(i))).abs());
        }
    }
    ensure(worst_mean <= ALGEBRA_TOL, || format!("mean moved by {worst_mean:.3e}"))?;
    ensure(worst_half <= ALGEBRA_TOL, || format!("half contraction off by {worst_half:.3e}"))?;
    Ok(format!("{ALGEBRA_CASES} random X: mean drift {worst_mean:.1e}, contraction error {worst_half:.1e}"))
}

fn mid_end_identity() -> Check {
    let mut cfg = ModelConfig { init_std: 0.2, dropout: 0.0, ..ModelConfig::default() };
    cfg.cb.variant = Variant::Cb;
    cfg.cb.site = Site::MlpMid;
    let mut r = rng(5);
    let pixels: Vec<f64> = (0..MID_END_INPUTS * 32 * 32 * 3).map(|_| r.random()).collect();
    let x64 = Tensor::new(vec![MID_END_INPUTS, 32, 32, 3], pixels.clone()).map_err(|e| e.to_string())?;
    let x32 = Tensor::new(vec![MID_END_INPUTS, 32, 32, 3], pixels.iter().map(|&v| v as f32).collect())
        .map_err(|e| e.to_string())?;
    let v64 = Vit::<f64>::new(cfg.clone(), 6).map_err(|e| e.to_string())?;
    let v32 = Vit::<f32>::from_params(cfg, v64.params().cast()).map_err(|e| e.to_string())?;
    let d64 = v64.mid_end_discrepancy(&x64).map_err(|e| e.to_string())?;
    let d32 = v32.mid_end_discrepancy(&x32).map_err(|e| e.to_string())? as f64;
    ensure(d64 < MID_END_TOL_F64, || format!("64-bit discrepancy {d64:.3e}"))?;
    ensure(d32 < MID_END_TOL_F32, || format!("32-bit discrepancy {d32:.3e}"))?;
    Ok(format!("max |Δlogit| over {MID_END_INPUTS} inputs: {d64:.2e} (64-bit), {d32:.2e} (32-bit)"))
}

fn gradient_check() -> Check {
    let start = Instant::now();
    let mut r = rng(7);
    let images = Tensor::from_fn(&[4, 8, 8, 3], |_| r.random::<f64>());
    let labels = [0, 1, 2, 1];
    let mut summary = Vec::new();
    let mut coords = 0;
    for variant in [Variant::None, Variant::Cb, Variant::CbS, Variant::CbHybrid] {
        let mut cfg = ModelConfig { init_std: 0.3, ..ModelConfig::tiny() };
        cfg.cb.variant = variant;
        let vit = Vit::<f64>::new(cfg, 8).map_err(|e| e.to_string())?;
        let rep = check_model_gradients(&vit, &images, &labels, GRAD_COORDS, 1e-5, 9).map_err(|e| e.to_string())?;
        let worst = rep.worst().map_or(0.0, |e| e.rel_error);
        let failures = rep.failures(GRAD_TOL);
        ensure(failures.is_empty(), || {
            let f = failures[0];
            format!("{variant:?}: {} coordinates over tolerance, e.g. {}[{}] {:.3e}", failures.len(), f.tensor, f.coord, f.rel_error)
        })?;
        coords += rep.entries.len();
        summary.push(format!("{variant}: {worst:.1e}"));
    }
    let took = start.elapsed();
    ensure(took < GRAD_BUDGET, || format!("took {took:?}"))?;
    Ok(format!("{coords} coordinates, worst relative error per variant [{}], {took:.2?}", summary.join(", ")))
}

struct Run {
    metrics: Vec<MetricsRecord>,
    model: Vit<f32>,
    took: Duration,
}

struct DeskRuns {
    baseline: Run,
    cb: Run,
    rerun: Run,
}

fn desk_model(variant: Variant) -> ModelConfig {
    let mut cfg = ModelConfig { image_size: 32, patch_size: 8, depth: 4, dim: 64, heads: 4, ..ModelConfig::default() };
    cfg.cb.variant = variant;
    cfg
}

fn desk_train(seed: u64) -> TrainConfig {
    TrainConfig { epochs: DESK_EPOCHS, seed, stop_at_top1: Some(DESK_TARGET), ..TrainConfig::default() }
}

fn run_desk(variant: Variant, seed: u64, data: &SyntheticDataset) -> Result<Run, String> {
    let start = Instant::now();
    let out = train::<f32>(&desk_model(variant), &desk_train(seed), data, None).map_err(|e| e.to_string())?;
    let took = start.elapsed();
    let last = out.metrics.last().expect("at least one epoch");
    eprintln!(
        "  desk {variant} seed {seed}: top-1 {:.4} after {} epochs, loss {:.4}, {took:.1?}",
        last.top1,
        out.metrics.len(),
        last.train_loss
    );
    Ok(Run { metrics: out.metrics, model: out.model, took })
}

fn desk_training(desk: &DeskRuns) -> Check {
    let mut parts = Vec::new();
    for (name, run) in [("baseline", &desk.baseline), ("+CB", &desk.cb)] {
        let last = run.metrics.last().expect("at least one epoch");
        ensure(last.top1 >= DESK_TARGET, || format!("{name} stopped at {:.4} after {} epochs", last.top1, run.metrics.len()))?;
        ensure(run.metrics.len() <= DESK_EPOCH_BOUND, || {
            format!("{name} needed {} epochs, regression bound is {DESK_EPOCH_BOUND}", run.metrics.len())
        })?;
        parts.push(format!("{name} {:.4} at epoch {}", last.top1, run.metrics.len()));
    }
    let took = desk.baseline.took + desk.cb.took;
    ensure(took < DESK_BUDGET, || format!("both runs took {took:?}"))?;
    ensure(desk.rerun.metrics == desk.baseline.metrics, || "re-run metrics differ".into())?;
    let bytes = |v: &Vit<f32>| checkpoint::encode(v, "x.bin").1;
    ensure(bytes(&desk.rerun.model) == bytes(&desk.baseline.model), || "re-run weights differ".into())?;
    Ok(format!("{}; {took:.0?} total; re-run bit-identical", parts.join(", ")))
}

fn upper_entropy(metrics: &[MetricsRecord]) -> f64 {
    let e = &metrics.last().expect("at least one epoch").entropy;
    let upper = &e[e.len() / 2..];
    upper.iter().sum::<f64>() / upper.len() as f64
}

fn trend(desk: &DeskRuns, data: &SyntheticDataset) -> Check {
    let mut csv = String::from("seed,baseline_upper_entropy,cb_upper_entropy,cb_not_higher\n");
    let mut wins = 0;
    for seed in TREND_SEEDS {
        let (base, with_cb) = if seed == 0 {
            (upper_entropy(&desk.baseline.metrics), upper_entropy(&desk.cb.metrics))
        } else {
            (
                upper_entropy(&run_desk(Variant::None, seed, data)?.metrics),
                upper_entropy(&run_desk(Variant::Cb, seed, data)?.metrics),
            )
        };
        wins += usize::from(with_cb <= base);
        let _ = writeln!(csv, "{seed},{base:.10},{with_cb:.10},{}", with_cb <= base);
    }
    let path = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance_trend.csv");
    std::fs::write(&path, &csv).map_err(|e| e.to_string())?;
    let summary = format!("CB upper-half entropy ≤ baseline in {wins}/3 seeds; recorded in {}", path.display());
    eprint!("{}", csv.lines().skip(1).map(|l| format!("  trend {l}\n")).collect::<String>());
    ensure(wins >= 2, || summary.clone())?;
    Ok(summary)
}

fn robustness_ops() -> Check {
    let cfg = ModelConfig { init_std: 0.2, ..ModelConfig::default() };
    let vit = Vit::<f64>::new(cfg, 10).map_err(|e| e.to_string())?;
    let mut r = rng(11);
    let pixels: Vec<u8> = (0..4 * 32 * 32 * 3).map(|_| r.random()).collect();
    let labels = [0, 1, 2, 0];
    let mut unclipped = 0;
    for steps in FGSM_STEPS {
        let eps = steps as f64 / 255.0;
        let adv = fgsm_attack_u8(&vit, &pixels, [4, 32, 32, 3], &labels, steps).map_err(|e| e.to_string())?;
        for (&a, &p) in adv.iter().zip(&pixels) {
            let clipped = (a == 0 || a == 255) && a.abs_diff(p) < steps;
            ensure(clipped || a.abs_diff(p) == steps, || format!("pixel {p} moved to {a} at ε = {steps}/255"))?;
            unclipped += usize::from(!clipped);
        }
        let x = Tensor::new(vec![4, 32, 32, 3], pixels.iter().map(|&p| p as f64 / 255.0).collect()).map_err(|e| e.to_string())?;
        let fx = fgsm_attack(&vit, &x, &labels, eps).map_err(|e| e.to_string())?;
        for (&a, &p) in fx.data().iter().zip(x.data()) {
            let d = (a - p).abs();
            ensure(d <= eps + 1e-15, || format!("|δ| = {d} exceeds ε = {eps}"))?;
            if a > 0.0 && a < 1.0 {
                ensure((d - eps).abs() <= 1e-15, || format!("unclipped |δ| = {d}, ε = {eps}"))?;
            }
        }
    }
    let img: Vec<u8> = (0..32 * 32 * 3).map(|i| (i % 251) as u8 + 1).collect();
    let occluded = center_occlusion(&img, 32, 32, 3, 0.5).map_err(|e| e.to_string())?;
    for (i, (&o, &p)) in occluded.iter().zip(&img).enumerate() {
        let (row, col) = (i / 96, (i / 3) % 32);
        let inside = (8..24).contains(&row) && (8..24).contains(&col);
        ensure(o == if inside { 0 } else { p }, || format!("pixel ({row}, {col}) is {o}"))?;
    }
    Ok(format!("{unclipped} unclipped pixels moved by exactly ε; occlusion zeroed rows/cols 8..24 only"))
}

fn round_trip_and_sweep(desk: &DeskRuns) -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("checkpoint.json");
    checkpoint::save(&desk.cb.model, &path).map_err(|e| e.to_string())?;
    let back = checkpoint::load::<f32>(&path).map_err(|e| e.to_string())?;
    ensure(back == desk.cb.model, || "32-bit checkpoint changed on reload".into())?;
    let wide = Vit::<f64>::new(desk_model(Variant::CbS), 12).map_err(|e| e.to_string())?;
    checkpoint::save(&wide, &path).map_err(|e| e.to_string())?;
    ensure(checkpoint::load::<f64>(&path).map_err(|e| e.to_string())? == wide, || "64-bit checkpoint changed on reload".into())?;

    let out = dir.path().join("sweep");
    let args = [
        "sweep", "--axis", "site", "--out", out.to_str().unwrap(), "--image_size", "8", "--patch_size", "4", "--depth",
        "2", "--dim", "8", "--heads", "2", "--epochs", "1", "--batch_size", "16", "--data.count", "48",
        "--analysis.samples", "4",
    ];
    let status = Command::new(env!("CARGO_BIN_EXE_cbvit")).args(args).output().map_err(|e| e.to_string())?;
    ensure(status.status.success(), || format!("sweep failed: {}", String::from_utf8_lossy(&status.stderr)))?;
    let csv = std::fs::read_to_string(out.join("sweep.csv")).map_err(|e| e.to_string())?;
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let values: Vec<&str> = rows.iter().map(|r| r.get(1).copied().unwrap_or_default()).collect();
    ensure(values == ["front", "mid", "end"], || format!("rows {values:?}"))?;
    for row in &rows {
        ensure(row.len() == header.len(), || format!("row {row:?} against header {header:?}"))?;
        ensure(row[2..].iter().all(|c| c.parse::<f64>().is_ok()), || format!("unpopulated cell in {row:?}"))?;
    }
    Ok(format!("32- and 64-bit checkpoints reload bit-exactly; sweep wrote {} rows × {} columns", rows.len(), header.len()))
}

fn main() -> ExitCode {
    let mut lines = Vec::new();
    let mut report = |id: usize, name: &str, gated: bool, check: &mut dyn FnMut() -> Check| {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let (status, detail) = match &outcome {
            Ok(d) => ("PASS", d.as_str()),
            Err(d) => ("FAIL", d.as_str()),
        };
        let tag = if gated { "" } else { " (reported, not gated)" };
        let line = format!("criterion {id:>2} {name}: {status}{tag} ({detail})");
        eprintln!("{line}");
        lines.push((id, line, outcome.is_err() && gated));
    };

    report(1, "softmax Jacobian oracle", true, &mut jacobian_oracle);
    report(2, "uniform maximality", true, &mut uniform_maximality);
    report(4, "context broadcasting algebra", true, &mut cb_algebra);
    report(5, "mid/end placement identity", true, &mut mid_end_identity);
    report(6, "full-model gradient check", true, &mut gradient_check);
    report(9, "robustness operators", true, &mut robustness_ops);

    let data = make_synthetic_dataset(0, 2000, 32, 3).expect("desk dataset");
    let desk = (|| {
        Ok::<_, String>(DeskRuns {
            baseline: run_desk(Variant::None, 0, &data)?,
            cb: run_desk(Variant::Cb, 0, &data)?,
            rerun: run_desk(Variant::None, 0, &data)?,
        })
    })();
    match &desk {
        Ok(desk) => {
            report(3, "entropy bound", true, &mut || entropy_bound(desk, &data));
            report(7, "desk-scale training", true, &mut || desk_training(desk));
            report(8, "entropy trend", false, &mut || trend(desk, &data));
            report(10, "checkpoint round-trip and sweep", true, &mut || round_trip_and_sweep(desk));
        }
        Err(e) => {
            for (id, name) in [(3, "entropy bound"), (7, "desk-scale training"), (10, "checkpoint round-trip and sweep")] {
                report(id, name, true, &mut || Err(format!("desk training failed: {e}")));
            }
            report(8, "entropy trend", false, &mut || Err(format!("desk training failed: {e}")));
        }
    }

    lines.sort_by_key(|(id, ..)| *id);
    println!();
    for (_, line, _) in &lines {
        println!("{line}");
    }
    let failures: Vec<usize> = lines.iter().filter(|(.., failed)| *failed).map(|(id, ..)| *id).collect();
    if failures.is_empty() {
        println!("acceptance: all gated criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {failures:?}");
        ExitCode::FAILURE
    }
}
