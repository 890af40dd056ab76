//! synthdetect: training and evaluating detectors of AI-generated images.
//!
//! The crate builds the full pipeline from first principles: PNG ingestion
//! of the CIFAKE corpus, HOG features with an RBF-kernel SVM trained by
//! SMO, a reverse-mode tensor engine powering a small CNN plus desk-scale
//! residual/VGG/dense architectures, Adam with step-decay scheduling, the
//! standard classification metrics (confusion matrices, reports, ROC/PR
//! curves), and reproducible experiment runs with binary checkpoints.
//!
//! Start with the runnable examples (`cargo run --example ...`) or the
//! `synthdetect` binary (`ingest`, `train`, `evaluate`, `report`,
//! `selftest`).

pub mod augment;
pub mod dataset;
pub mod features;
pub mod error;
pub mod eval;
pub mod models;
pub mod optim;
pub mod oracle;
pub mod rng;
pub mod svm;
pub mod tensor;

pub use error::{Error, Result};

/// Placeholder entry point; the CLI module lands later in the build.
pub fn run_cli() -> i32 {
    0
}
