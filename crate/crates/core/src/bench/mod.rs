//! Benchmark harness: manifests, metrics, cross-dataset evaluation, speed
//! measurement and ablation sweeps.

pub mod ablation;
pub mod eval;
pub mod manifest;
pub mod metrics;
pub mod report;
pub mod speed;

pub use eval::{evaluate, evaluate_samples, ConstantPredictor, GroundTruthCopy, Segmenter};
pub use manifest::{DatasetManifest, Split};
pub use metrics::{accumulate_confusion, fwiou, macc, miou, ConfusionMatrix, MetricsReport};
pub use report::{aggregate_means, vocab_overlap, BenchmarkReport};
pub use speed::{speed_benchmark, Clock, ScriptedClock, SpeedReport, WallClock};
