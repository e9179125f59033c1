//! End-to-end experiment runs: one continual-learning pass per (mode,
//! seed) job, with persisted, deterministic outputs.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::learner::{learn_task, Mode, TaskResult};
use crate::memory::{ExtractionConfig, SubspaceMemory};
use crate::network::Network;

use super::config::{ExperimentConfig, HarnessError};
use super::data::{
    dataset_from_flat, generate_overlap_split_tasks, generate_permuted_tasks, generate_synthetic_base,
    import_csv, TaskDataset,
};
use super::metrics::{compute_bwt_s, compute_fwt, compute_metrics, AccuracyMatrix, BwtS, Fwt, Metrics};

const SEED_MIX: u64 = 0x9e3779b97f4a7c15;

#[derive(Debug, Clone, Serialize)]
pub struct RunOutcome {
    pub mode: Mode,
    pub seed: u64,
    pub matrix: AccuracyMatrix,
    /// Multitask mode evaluates one joint model on every task instead of
    /// filling a triangular matrix.
    pub joint_accuracies: Option<Vec<f64>>,
    pub metrics: Metrics,
    pub bwt_s: Option<BwtS>,
    pub fwt: Option<Fwt>,
    #[serde(skip)]
    pub task_results: Vec<TaskResult>,
}

/// Builds the task sequence described by the config.
pub fn build_tasks(config: &ExperimentConfig, seed: u64) -> Result<Vec<TaskDataset>, HarnessError> {
    match config.generator.as_str() {
        "permuted" => {
            let base = generate_synthetic_base(
                config.n_classes,
                config.dim,
                config.per_class,
                config.separation,
                seed,
            )?;
            Ok(generate_permuted_tasks(&base, config.tasks, seed ^ SEED_MIX))
        }
        "overlap" => {
            let base = generate_synthetic_base(
                config.n_classes,
                config.dim,
                config.per_class,
                config.separation,
                seed,
            )?;
            generate_overlap_split_tasks(&base, &config.ranges)
        }
        "csv" => {
            let path = config.csv_path.as_ref().expect("validated");
            let flat = import_csv(Path::new(path))?;
            let base = dataset_from_flat(&flat, seed);
            Ok(generate_permuted_tasks(&base, config.tasks, seed ^ SEED_MIX))
        }
        other => Err(HarnessError::BadConfig(format!("unknown generator '{other}'"))),
    }
}

fn task_seed(seed: u64, task: usize) -> u64 {
    seed ^ (task as u64 + 1).wrapping_mul(SEED_MIX)
}

/// Selected old task per new task: the one holding the most regime-3
/// layers, ties to the smaller id; tasks with none are skipped.
pub fn select_bwt_s_pairs(results: &[TaskResult]) -> BTreeMap<usize, usize> {
    let mut selected = BTreeMap::new();
    for r in results {
        let Some(regimes) = &r.regimes else { continue };
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for layer in &regimes.layers {
            for &j in &layer.reg3 {
                *counts.entry(j).or_default() += 1;
            }
        }
        if let Some((&j, _)) = counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))) {
            selected.insert(r.task, j);
        }
    }
    selected
}

fn train_multitask(
    net: &mut Network,
    tasks: &[TaskDataset],
    config: &ExperimentConfig,
    seed: u64,
) -> Result<(), HarnessError> {
    let lc = config.learner_config(Mode::Multitask, seed);
    for t in tasks {
        net.ensure_head(t.task_id, t.num_classes, seed);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..config.epochs {
        // interleave every task's batches into one joint epoch
        let mut jobs: Vec<(usize, Vec<usize>)> = Vec::new();
        for t in tasks {
            let mut order: Vec<usize> = (0..t.train.len()).collect();
            order.shuffle(&mut rng);
            for chunk in order.chunks(config.batch.max(1)) {
                jobs.push((t.task_id, chunk.to_vec()));
            }
        }
        jobs.shuffle(&mut rng);
        for (task, idx) in jobs {
            let batch = tasks[task].train.subset(&idx);
            let trace = net.forward(&batch.features, task)?;
            let (_, grads) = net.backward(&trace, &batch.labels, lc.loss)?;
            net.apply_step(&grads, task, config.lr)?;
        }
    }
    Ok(())
}

/// One full continual-learning pass for a single mode and seed.
pub fn run_single(config: &ExperimentConfig, mode: Mode, seed: u64) -> Result<RunOutcome, HarnessError> {
    let tasks = build_tasks(config, seed)?;
    let multi_head = config.multi_head();
    let mut net = Network::new_mlp(tasks[0].dim(), &config.hidden, tasks[0].num_classes, multi_head, seed);

    if mode == Mode::Multitask {
        train_multitask(&mut net, &tasks, config, seed)?;
        let accs: Vec<f64> = tasks
            .iter()
            .map(|t| net.evaluate(&t.test, t.task_id))
            .collect::<Result<_, _>>()?;
        let acc = accs.iter().sum::<f64>() / accs.len() as f64;
        return Ok(RunOutcome {
            mode,
            seed,
            matrix: AccuracyMatrix::new(),
            joint_accuracies: Some(accs),
            metrics: Metrics { acc, bwt: None },
            bwt_s: None,
            fwt: None,
            task_results: Vec::new(),
        });
    }

    let mut memory = SubspaceMemory::new(ExtractionConfig {
        n_samples: config.n_samples,
        ..Default::default()
    });
    let mut matrix = AccuracyMatrix::new();
    let mut task_results = Vec::new();
    for t in &tasks {
        let lc = config.learner_config(mode, task_seed(seed, t.task_id));
        let mut result = learn_task(&mut net, t.task_id, &t.train, Some(&t.valid), &mut memory, &lc)?;
        let row: Vec<f64> = tasks[..=t.task_id]
            .iter()
            .map(|past| net.evaluate(&past.test, past.task_id))
            .collect::<Result<_, _>>()?;
        result.accuracies = row.clone();
        matrix.push_row(row)?;
        task_results.push(result);
    }

    let metrics = compute_metrics(&matrix)?;
    let selected = select_bwt_s_pairs(&task_results);
    let bwt_s = if selected.is_empty() {
        None
    } else {
        Some(compute_bwt_s(&matrix, &selected)?)
    };

    let fwt = if config.fwt {
        let mut scratch = Vec::new();
        for t in &tasks {
            let mut fresh = Network::new_mlp(t.dim(), &config.hidden, t.num_classes, multi_head, task_seed(seed, t.task_id) ^ 0x5c4a7c8);
            let mut mem = SubspaceMemory::new(ExtractionConfig::default());
            let lc = config.learner_config(Mode::Plain, task_seed(seed, t.task_id));
            learn_task(&mut fresh, t.task_id, &t.train, Some(&t.valid), &mut mem, &lc)?;
            scratch.push(fresh.evaluate(&t.test, t.task_id)?);
        }
        Some(compute_fwt(&matrix, &scratch)?)
    } else {
        None
    };

    Ok(RunOutcome {
        mode,
        seed,
        matrix,
        joint_accuracies: None,
        metrics,
        bwt_s,
        fwt,
        task_results,
    })
}

/// Persisted metrics file contents; field order is fixed so identical runs
/// produce byte-identical files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PersistedMetrics {
    pub version: u32,
    pub mode: String,
    pub seed: u64,
    pub metrics: Metrics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bwt_s: Option<BwtS>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fwt: Option<Fwt>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint_accuracies: Option<Vec<f64>>,
}

pub fn run_dir_name(mode: Mode, seed: u64) -> String {
    format!("{mode}_seed{seed}")
}

/// Writes one run's outputs: config snapshot, accuracy CSV, metrics JSON,
/// per-task event log, and wall time (kept in its own file so everything
/// else is bit-reproducible).
pub fn persist_outcome(
    outcome: &RunOutcome,
    config: &ExperimentConfig,
    dir: &Path,
    wall_seconds: f64,
) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.toml"), config.to_toml())?;
    std::fs::write(dir.join("accuracy.csv"), outcome.matrix.to_csv())?;
    let pm = PersistedMetrics {
        version: 1,
        mode: outcome.mode.to_string(),
        seed: outcome.seed,
        metrics: outcome.metrics.clone(),
        bwt_s: outcome.bwt_s.clone(),
        fwt: outcome.fwt.clone(),
        joint_accuracies: outcome.joint_accuracies.clone(),
    };
    let json = serde_json::to_string_pretty(&pm).expect("metrics serialize");
    std::fs::write(dir.join("metrics.json"), json + "\n")?;
    let mut events = String::new();
    for r in &outcome.task_results {
        events.push_str(&serde_json::to_string(r).expect("event serializes"));
        events.push('\n');
    }
    std::fs::write(dir.join("events.jsonl"), events)?;
    std::fs::write(dir.join("walltime.txt"), format!("{wall_seconds:.3}\n"))?;
    Ok(())
}

/// Runs every (mode, seed) job, up to `threads` at a time, persisting each
/// into its own subdirectory of `out_root`.
pub fn run_experiment(
    config: &ExperimentConfig,
    out_root: &Path,
    threads: usize,
) -> Result<Vec<RunOutcome>, HarnessError> {
    config.validate()?;
    let jobs: Vec<(Mode, u64)> = config
        .modes
        .iter()
        .map(|m| m.parse::<Mode>().expect("validated"))
        .flat_map(|m| config.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let mut outcomes: Vec<RunOutcome> = Vec::new();
    for chunk in jobs.chunks(threads.max(1)) {
        let mut results: Vec<Result<RunOutcome, HarnessError>> = Vec::new();
        std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&(mode, seed)| {
                    scope.spawn(move || {
                        let start = Instant::now();
                        let outcome = run_single(config, mode, seed)?;
                        let dir = out_root.join(run_dir_name(mode, seed));
                        persist_outcome(&outcome, config, &dir, start.elapsed().as_secs_f64())?;
                        Ok(outcome)
                    })
                })
                .collect();
            for h in handles {
                results.push(h.join().expect("worker panicked"));
            }
        });
        for r in results {
            outcomes.push(r?);
        }
    }
    Ok(outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ExperimentConfig {
        ExperimentConfig::from_str(
            "n_classes = 6\n\
             dim = 12\n\
             per_class = 30\n\
             ranges = [[0, 2], [2, 4]]\n\
             hidden = [16]\n\
             epochs = 3\n",
        )
        .unwrap()
    }

    #[test]
    fn identical_permutation_keeps_bwt_high() {
        // two tasks with the same inputs: learning the second must not
        // forget the first
        let mut cfg = ExperimentConfig::from_str(
            "generator = \"permuted\"\n\
             n_classes = 4\n\
             dim = 10\n\
             per_class = 40\n\
             tasks = 1\n\
             hidden = [16]\n\
             epochs = 4\n",
        )
        .unwrap();
        cfg.tasks = 2;
        let base = generate_synthetic_base(4, 10, 40, 6.0, 3).unwrap();
        let mut tasks = generate_permuted_tasks(&base, 1, 3);
        let mut second = tasks[0].clone();
        second.task_id = 1;
        tasks.push(second);

        let mut net = Network::new_mlp(10, &cfg.hidden, 4, false, 3);
        let mut memory = SubspaceMemory::new(ExtractionConfig { n_samples: 60, ..Default::default() });
        let mut matrix = AccuracyMatrix::new();
        for t in &tasks {
            let lc = cfg.learner_config(Mode::Cuber, task_seed(3, t.task_id));
            learn_task(&mut net, t.task_id, &t.train, Some(&t.valid), &mut memory, &lc).unwrap();
            let row: Vec<f64> = tasks[..=t.task_id]
                .iter()
                .map(|p| net.evaluate(&p.test, p.task_id).unwrap())
                .collect();
            matrix.push_row(row).unwrap();
        }
        let m = compute_metrics(&matrix).unwrap();
        assert!(m.bwt.unwrap() >= -0.01, "bwt {:?}", m.bwt);
    }

    #[test]
    fn multitask_gives_single_joint_row() {
        let cfg = small_config();
        let out = run_single(&cfg, Mode::Multitask, 1).unwrap();
        assert_eq!(out.matrix.num_tasks(), 0);
        assert_eq!(out.joint_accuracies.as_ref().unwrap().len(), 2);
        assert!(out.metrics.bwt.is_none());
    }

    #[test]
    fn persisted_outputs_are_bit_identical_across_runs() {
        let cfg = small_config();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        for d in [&a, &b] {
            let out = run_single(&cfg, Mode::Cuber, 7).unwrap();
            persist_outcome(&out, &cfg, d, 0.0).unwrap();
        }
        for f in ["config.toml", "accuracy.csv", "metrics.json", "events.jsonl"] {
            let x = std::fs::read(a.join(f)).unwrap();
            let y = std::fs::read(b.join(f)).unwrap();
            assert_eq!(x, y, "{f} differs between identical runs");
        }
    }

    #[test]
    fn metrics_recompute_from_persisted_matrix() {
        let cfg = small_config();
        let dir = tempfile::tempdir().unwrap();
        let out = run_single(&cfg, Mode::Cuber, 2).unwrap();
        persist_outcome(&out, &cfg, dir.path(), 1.0).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("accuracy.csv")).unwrap();
        let matrix = AccuracyMatrix::from_csv(&csv).unwrap();
        let recomputed = compute_metrics(&matrix).unwrap();
        assert_eq!(recomputed, out.metrics);
    }

    #[test]
    fn run_experiment_writes_one_dir_per_job() {
        let mut cfg = small_config();
        cfg.modes = vec!["cuber".into(), "plain".into()];
        cfg.seeds = vec![0, 1];
        let dir = tempfile::tempdir().unwrap();
        let outs = run_experiment(&cfg, dir.path(), 2).unwrap();
        assert_eq!(outs.len(), 4);
        for (m, s) in [("cuber", 0), ("cuber", 1), ("plain", 0), ("plain", 1)] {
            let p = dir.path().join(format!("{m}_seed{s}")).join("metrics.json");
            assert!(p.exists(), "{p:?} missing");
        }
    }

    #[test]
    fn csv_generator_runs_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.csv");
        let mut text = String::from("40, 3\n");
        for i in 0..40 {
            let label = i % 2;
            let sign = if label == 0 { -2.0 } else { 2.0 };
            text.push_str(&format!("{}, {}, {}, {label}\n", sign + 0.01 * i as f64, sign, -sign));
        }
        std::fs::write(&path, text).unwrap();
        let cfg = ExperimentConfig::from_str(&format!(
            "generator = \"csv\"\ncsv_path = \"{}\"\ntasks = 2\nhidden = [8]\nepochs = 2\n",
            path.display()
        ))
        .unwrap();
        let out = run_single(&cfg, Mode::Cuber, 0).unwrap();
        assert_eq!(out.matrix.num_tasks(), 2);
    }
}
