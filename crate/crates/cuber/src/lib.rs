//! Continual learning with task-correlation aware subspace projections.
//!
//! A network learns a sequence of tasks. After each task it stores a small
//! orthonormal basis of the layer inputs and a pruned gradient snapshot.
//! When a new task arrives, each layer classifies every old task into one
//! of three regimes: freeze its subspace, reuse it through a learnable
//! rescaling, or additionally allow regularized updates that can improve
//! the old task. The `theory` module checks the guarantees behind these
//! choices on synthetic instances, and `harness` runs desk-scale
//! benchmarks end to end.
//!
//! # Examples
//!
//! Two related tasks through the full pipeline (mirrored in the guide's
//! introduction):
//!
//! ```
//! use cuber::learner::{learn_task, LearnerConfig, Mode};
//! use cuber::memory::{ExtractionConfig, SubspaceMemory};
//! use cuber::network::{LabeledData, Network};
//! use cuber::linalg::Matrix;
//!
//! // two tiny tasks over the same inputs
//! let rows = vec![
//!     vec![1.0, 0.0, 0.2], vec![0.9, 0.1, 0.0],
//!     vec![0.0, 1.0, 0.1], vec![0.1, 0.9, 0.0],
//! ];
//! let t0 = LabeledData::new(Matrix::from_rows(&rows), vec![0, 0, 1, 1]);
//! let t1 = LabeledData::new(Matrix::from_rows(&rows), vec![0, 0, 1, 1]);
//!
//! let mut net = Network::new_mlp(3, &[8], 2, false, 7);
//! let mut memory = SubspaceMemory::new(ExtractionConfig::default());
//! let mut cfg = LearnerConfig::new(Mode::Cuber, 0.1, 7);
//! cfg.max_epochs = 60;
//!
//! let first = learn_task(&mut net, 0, &t0, None, &mut memory, &cfg).unwrap();
//! let second = learn_task(&mut net, 1, &t1, None, &mut memory, &cfg).unwrap();
//!
//! assert_eq!(first.task, 0);
//! // the second task saw the first task's stored subspaces
//! assert!(second.regimes.is_some());
//! assert!(net.evaluate(&t0, 1).unwrap() > 0.5);
//! ```

pub mod harness;
pub mod learner;
pub mod linalg;
pub mod memory;
pub mod network;
pub mod regimes;
pub mod theory;
