use std::fmt::Write as _;

use anyhow::{bail, Result};
use cbvit::analysis::verify_uniform_maximality;
use cbvit::config::RunConfig;
use cbvit::model::gradcheck::check_model_gradients;
use cbvit::model::{ModelConfig, Vit};
use cbvit::training::SyntheticDataset;

use crate::run::{out_dir, resolve_config, RunManifest};
use crate::Common;

pub const PARAM_CAP: usize = 50_000;
pub const TOLERANCE: f64 = 1e-4;
pub const BATCH: usize = 4;
pub const LAMBDAS: [f64; 3] = [0.5, 1.0, 2.0];
pub const MAX_N: usize = 32;

pub fn run(common: &Common, overrides: &[(String, String)], samples: usize, trials: usize, eps: f64) -> Result<()> {
    let base = RunConfig { model: ModelConfig::tiny(), ..RunConfig::default() };
    let cfg = resolve_config(common, overrides, base)?;
    let vit = Vit::<f64>::new(cfg.model.clone(), cfg.train.seed)?;
    let count = vit.parameter_count();
    if count >= PARAM_CAP {
        bail!("gradcheck refuses a model with {count} parameters (cap {PARAM_CAP}); use a tiny configuration");
    }

    let mut gen = cfg.generator();
    gen.count = BATCH;
    let data = SyntheticDataset::generate(&gen)?;
    let (images, labels) = data.batch::<f64>(&(0..BATCH).collect::<Vec<_>>())?;
    let report = check_model_gradients(&vit, &images, &labels, samples, eps, cfg.train.seed)?;

    let mut grad_csv = String::from("tensor,checked,worst_rel_error\n");
    for (name, worst) in report.per_tensor() {
        let checked = report.entries.iter().filter(|e| e.tensor == name).count();
        let _ = writeln!(grad_csv, "{name},{checked},{worst:.3e}");
    }

    let mut max_csv = String::from("n,lambda,evaluated,bound,uniform_value,max_found,margin,violations\n");
    let mut violations = Vec::new();
    for n in 2..=MAX_N {
        for lambda in LAMBDAS {
            let r = verify_uniform_maximality(n, lambda, trials, cfg.train.seed ^ (n as u64) << 8)?;
            let _ = writeln!(
                max_csv,
                "{n},{lambda},{},{:.17},{:.17},{:.17},{:.3e},{}",
                r.evaluated, r.bound, r.uniform_value, r.max_found, r.margin, r.violations
            );
            if r.violations > 0 || (r.uniform_value - r.bound).abs() > 1e-12 {
                violations.push(format!("N={n} λ={lambda}: {} violations, max {}", r.violations, r.max_found));
            }
        }
    }

    let out = out_dir(common, "gradcheck")?;
    let mut manifest = RunManifest::new("gradcheck", &cfg, common, &out);
    manifest.write(&out, "gradcheck.csv", grad_csv.as_bytes())?;
    manifest.write(&out, "maximality.csv", max_csv.as_bytes())?;
    manifest.finish(&cfg, &out)?;

    let worst = report.worst().expect("at least one coordinate checked");
    println!("parameters: {count}, coordinates checked: {}", report.entries.len());
    println!(
        "worst relative error {:.3e} at {}[{}] (analytic {:.6e}, numeric {:.6e})",
        worst.rel_error, worst.tensor, worst.coord, worst.analytic, worst.numeric
    );
    println!("uniform maximality: N in 2..={MAX_N}, lambda in {LAMBDAS:?}, {trials} trials each, {} violations", violations.len());

    let failures = report.failures(TOLERANCE);
    if !failures.is_empty() || !violations.is_empty() {
        let mut msg = String::from("gradcheck failed:");
        for e in failures.iter().take(20) {
            let _ = write!(msg, "\n  {}[{}]: rel error {:.3e}", e.tensor, e.coord, e.rel_error);
        }
        for v in &violations {
            let _ = write!(msg, "\n  {v}");
        }
        bail!(msg);
    }
    Ok(())
}
