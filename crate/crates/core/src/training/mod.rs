//! Deterministic desk-scale training and evaluation.

mod data;
mod optim;
pub mod robustness;
mod train;

pub use data::{make_synthetic_dataset, template, GeneratorParams, SyntheticDataset, BACKGROUND, GRID};
pub use optim::{adamw_step, cosine_lr, AdamHyper, AdamState, ADAM_EPS};
pub use robustness::{center_occlusion, center_occlusion_tensor, fgsm_attack, fgsm_attack_u8, occlusion_box};
pub use train::{
    count_hits, evaluate, metrics_header, probe_diagnostics, train, train_model, write_metrics_csv, Accuracy,
    Classifier, MetricsRecord, Precision, TrainConfig, TrainOutcome,
};
