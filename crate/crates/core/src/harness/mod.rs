//! Run configuration, synthetic data, metrics, training, evaluation and the
//! k ablation.

mod ablate;
mod config;
mod data;
mod eval;
pub mod metrics;
mod train;

pub use ablate::{ablate_k, render_ablation, AblationRow};
pub use config::{derive_seed, DataConfig, OptimConfig, Pattern, RunConfig, TrainConfig, SEED_ENV};
pub use data::{load_dataset, make_synthetic_pair, save_dataset, synthetic_dataset, Sample, SyntheticPair};
pub use eval::{evaluate, score, MetricsReport, SampleMetrics};
pub use metrics::{psnr, ssim, PSNR_CAP};
pub use train::{train, LogEntry, TrainReport, Trainer};
