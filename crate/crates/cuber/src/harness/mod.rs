//! Desk-scale benchmark harness: task generation, metrics, configuration,
//! experiment runs, and persistence.
//!
//! # Examples
//!
//! Metrics read off the accuracy matrix (mirrored in the guide's
//! "Benchmark Harness" chapter):
//!
//! ```
//! use cuber::harness::{compute_metrics, AccuracyMatrix};
//!
//! let mut a = AccuracyMatrix::new();
//! a.push_row(vec![0.9]).unwrap();
//! a.push_row(vec![0.7, 0.8]).unwrap();
//!
//! let m = compute_metrics(&a).unwrap();
//! // ACC: mean of the last row
//! assert!((m.acc - 0.75).abs() < 1e-12);
//! // BWT: how much task 0 lost after task 1 trained
//! assert!((m.bwt.unwrap() - (0.7 - 0.9)).abs() < 1e-12);
//! ```

pub mod config;
pub mod data;
pub mod experiment;
pub mod metrics;

pub use config::ExperimentConfig;
pub use data::{generate_overlap_split_tasks, generate_permuted_tasks, generate_synthetic_base, TaskDataset};
pub use metrics::{compute_bwt_s, compute_fwt, compute_metrics, AccuracyMatrix, Metrics};
