//! Task-sequence generation and dataset import.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::network::LabeledData;

use super::config::HarnessError;

/// One task's data: train/valid/test splits plus the mapping from the base
/// dataset's class ids to this task's local label space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskDataset {
    pub task_id: usize,
    pub train: LabeledData,
    pub valid: LabeledData,
    pub test: LabeledData,
    /// original class id -> local label
    pub class_map: BTreeMap<usize, usize>,
    pub num_classes: usize,
}

impl TaskDataset {
    pub fn dim(&self) -> usize {
        self.train.dim()
    }
}

/// Seeded Gaussian blobs with class means at pairwise distance at least
/// `separation`, split 80/10/10 per class.
pub fn generate_synthetic_base(
    n_classes: usize,
    dim: usize,
    per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<TaskDataset, HarnessError> {
    if per_class == 0 {
        return Err(HarnessError::BadConfig("per_class must be positive".into()));
    }
    if n_classes == 0 || dim == 0 {
        return Err(HarnessError::BadConfig("n_classes and dim must be positive".into()));
    }
    if separation <= 0.0 {
        return Err(HarnessError::BadConfig("separation must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    // rescale so every pair of means is at least `separation` apart
    let mut min_dist = f64::INFINITY;
    for i in 0..n_classes {
        for j in (i + 1)..n_classes {
            let d: f64 = means[i]
                .iter()
                .zip(&means[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            min_dist = min_dist.min(d);
        }
    }
    if n_classes > 1 {
        if min_dist < 1e-9 {
            return Err(HarnessError::BadConfig("degenerate class means; change the seed".into()));
        }
        let factor = separation / min_dist * 1.01;
        if factor > 1.0 {
            for m in means.iter_mut() {
                for v in m.iter_mut() {
                    *v *= factor;
                }
            }
        }
    }

    let normal = |rng: &mut ChaCha8Rng| {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    };
    let mut splits: [Vec<(Vec<f64>, usize)>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (class, mean) in means.iter().enumerate() {
        let n_valid = (per_class / 10).max(if per_class >= 3 { 1 } else { 0 });
        let n_test = n_valid;
        let n_train = per_class - n_valid - n_test;
        for i in 0..per_class {
            let row: Vec<f64> = mean.iter().map(|&m| m + normal(&mut rng)).collect();
            let bucket = if i < n_train {
                0
            } else if i < n_train + n_valid {
                1
            } else {
                2
            };
            splits[bucket].push((row, class));
        }
    }
    let mk = |items: &[(Vec<f64>, usize)]| {
        let rows: Vec<Vec<f64>> = items.iter().map(|(r, _)| r.clone()).collect();
        let labels: Vec<usize> = items.iter().map(|(_, l)| *l).collect();
        LabeledData::new(Matrix::from_rows(&rows), labels)
    };
    Ok(TaskDataset {
        task_id: 0,
        train: mk(&splits[0]),
        valid: mk(&splits[1]),
        test: mk(&splits[2]),
        class_map: (0..n_classes).map(|c| (c, c)).collect(),
        num_classes: n_classes,
    })
}

fn permute_data(data: &LabeledData, perm: &[usize]) -> LabeledData {
    let n = data.len();
    let d = data.dim();
    let mut out = Matrix::zeros(n, d);
    for i in 0..n {
        for (j, &p) in perm.iter().enumerate() {
            out.set(i, j, data.features.get(i, p));
        }
    }
    LabeledData::new(out, data.labels.clone())
}

/// Task i applies a fixed seeded permutation to the feature coordinates of
/// every split; the first task keeps the identity permutation and all
/// tasks share one label space.
pub fn generate_permuted_tasks(base: &TaskDataset, t_count: usize, seed: u64) -> Vec<TaskDataset> {
    let d = base.dim();
    (0..t_count)
        .map(|t| {
            let mut perm: Vec<usize> = (0..d).collect();
            if t > 0 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (t as u64).wrapping_mul(0x9e3779b97f4a7c15));
                perm.shuffle(&mut rng);
            }
            TaskDataset {
                task_id: t,
                train: permute_data(&base.train, &perm),
                valid: permute_data(&base.valid, &perm),
                test: permute_data(&base.test, &perm),
                class_map: base.class_map.clone(),
                num_classes: base.num_classes,
            }
        })
        .collect()
}

fn filter_classes(data: &LabeledData, class_map: &BTreeMap<usize, usize>) -> LabeledData {
    let idx: Vec<usize> = data
        .labels
        .iter()
        .enumerate()
        .filter(|(_, l)| class_map.contains_key(l))
        .map(|(i, _)| i)
        .collect();
    let sub = data.subset(&idx);
    let labels = sub.labels.iter().map(|l| class_map[l]).collect();
    LabeledData::new(sub.features, labels)
}

/// Splits the base into one task per class range, relabeling locally.
/// Overlapping ranges share samples across tasks; each task gets its own
/// head downstream.
pub fn generate_overlap_split_tasks(
    base: &TaskDataset,
    ranges: &[(usize, usize)],
) -> Result<Vec<TaskDataset>, HarnessError> {
    let mut tasks = Vec::new();
    for (t, &(lo, hi)) in ranges.iter().enumerate() {
        if lo > hi || hi >= base.num_classes {
            return Err(HarnessError::BadConfig(format!(
                "range {lo}-{hi} invalid for {} classes",
                base.num_classes
            )));
        }
        let class_map: BTreeMap<usize, usize> = (lo..=hi).enumerate().map(|(local, c)| (c, local)).collect();
        tasks.push(TaskDataset {
            task_id: t,
            train: filter_classes(&base.train, &class_map),
            valid: filter_classes(&base.valid, &class_map),
            test: filter_classes(&base.test, &class_map),
            num_classes: class_map.len(),
            class_map,
        });
    }
    Ok(tasks)
}

/// CSV import: first line `n, d`, then n rows of d floats plus an integer
/// label. Returns the samples in file order.
pub fn import_csv(path: &Path) -> Result<LabeledData, HarnessError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| HarnessError::BadData("empty file".into()))?;
    let parts: Vec<&str> = header.split(',').map(str::trim).collect();
    if parts.len() != 2 {
        return Err(HarnessError::BadData("header must be 'n, d'".into()));
    }
    let n: usize = parts[0].parse().map_err(|_| HarnessError::BadData("bad n in header".into()))?;
    let d: usize = parts[1].parse().map_err(|_| HarnessError::BadData("bad d in header".into()))?;
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != d + 1 {
            return Err(HarnessError::BadData(format!("row {i}: expected {} fields, got {}", d + 1, fields.len())));
        }
        let mut row = Vec::with_capacity(d);
        for f in &fields[..d] {
            row.push(f.parse::<f64>().map_err(|_| HarnessError::BadData(format!("row {i}: bad float '{f}'")))?);
        }
        let label: usize = fields[d]
            .parse()
            .map_err(|_| HarnessError::BadData(format!("row {i}: bad label '{}'", fields[d])))?;
        rows.push(row);
        labels.push(label);
    }
    if rows.len() != n {
        return Err(HarnessError::BadData(format!("header says {n} rows, file has {}", rows.len())));
    }
    Ok(LabeledData::new(Matrix::from_rows(&rows), labels))
}

/// Wraps imported flat data into a task with seeded 80/10/10 splits.
pub fn dataset_from_flat(data: &LabeledData, seed: u64) -> TaskDataset {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let n = idx.len();
    let n_valid = n / 10;
    let n_test = n / 10;
    let n_train = n - n_valid - n_test;
    let train = data.subset(&idx[..n_train]);
    let valid = data.subset(&idx[n_train..n_train + n_valid]);
    let test = data.subset(&idx[n_train + n_valid..]);
    let num_classes = data.num_classes();
    TaskDataset {
        task_id: 0,
        train,
        valid,
        test,
        class_map: (0..num_classes).map(|c| (c, c)).collect(),
        num_classes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base(seed: u64) -> TaskDataset {
        generate_synthetic_base(15, 16, 40, 6.0, seed).unwrap()
    }

    #[test]
    fn per_class_zero_rejected() {
        assert!(generate_synthetic_base(3, 4, 0, 6.0, 1).is_err());
    }

    #[test]
    fn same_seed_identical() {
        let a = base(7);
        let b = base(7);
        assert_eq!(a.train.features, b.train.features);
        assert_eq!(a.test.labels, b.test.labels);
    }

    #[test]
    fn splits_are_80_10_10() {
        let d = base(1);
        // per class: 40 samples -> 32/4/4
        assert_eq!(d.train.len(), 15 * 32);
        assert_eq!(d.valid.len(), 15 * 4);
        assert_eq!(d.test.len(), 15 * 4);
    }

    #[test]
    fn separated_blobs_nearest_mean_solves_it() {
        // wide separation vs unit-scale noise: a nearest-class-mean rule
        // classifies the test set almost perfectly
        let d = generate_synthetic_base(5, 8, 100, 10.0, 3).unwrap();
        let mut means = vec![vec![0.0; 8]; 5];
        let mut counts = vec![0usize; 5];
        for i in 0..d.train.len() {
            let c = d.train.labels[i];
            counts[c] += 1;
            for j in 0..8 {
                means[c][j] += d.train.features.get(i, j);
            }
        }
        for (m, &c) in means.iter_mut().zip(&counts) {
            for v in m.iter_mut() {
                *v /= c as f64;
            }
        }
        let mut correct = 0;
        for i in 0..d.test.len() {
            let row: Vec<f64> = (0..8).map(|j| d.test.features.get(i, j)).collect();
            let pred = (0..5)
                .min_by(|&a, &b| {
                    let da: f64 = row.iter().zip(&means[a]).map(|(x, m)| (x - m) * (x - m)).sum();
                    let db: f64 = row.iter().zip(&means[b]).map(|(x, m)| (x - m) * (x - m)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            if pred == d.test.labels[i] {
                correct += 1;
            }
        }
        let acc = correct as f64 / d.test.len() as f64;
        assert!(acc >= 0.99, "nearest-mean accuracy {acc}");
    }

    #[test]
    fn permuted_single_task_unchanged() {
        let b = base(2);
        let tasks = generate_permuted_tasks(&b, 1, 5);
        assert_eq!(tasks.len(), 1);
        assert_eq!(tasks[0].train.features, b.train.features);
    }

    #[test]
    fn permutation_is_bijection_and_invertible() {
        let b = base(3);
        let tasks = generate_permuted_tasks(&b, 3, 11);
        let d = b.dim();
        for t in &tasks[1..] {
            // recover the permutation by matching the first training row
            let mut perm = vec![usize::MAX; d];
            for j in 0..d {
                let v = t.train.features.get(0, j);
                let orig = (0..d)
                    .find(|&p| b.train.features.get(0, p) == v)
                    .expect("permuted value present in base row");
                perm[j] = orig;
            }
            let mut sorted = perm.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..d).collect::<Vec<_>>());
            // applying the recovered inverse restores every row exactly
            for i in 0..t.train.len().min(20) {
                for j in 0..d {
                    assert_eq!(t.train.features.get(i, j), b.train.features.get(i, perm[j]));
                }
            }
        }
    }

    #[test]
    fn overlap_ranges_share_exactly_the_common_classes() {
        let b = base(4);
        let tasks = generate_overlap_split_tasks(&b, &[(0, 9), (5, 14)]).unwrap();
        assert_eq!(tasks[0].num_classes, 10);
        assert_eq!(tasks[1].num_classes, 10);
        // samples of classes 5..=9 appear in both tasks; count them in the
        // base and in each task's train split
        let shared_base = b.train.labels.iter().filter(|&&l| (5..=9).contains(&l)).count();
        let in_t0 = tasks[0]
            .train
            .labels
            .iter()
            .filter(|&&l| {
                let orig = tasks[0].class_map.iter().find(|(_, &v)| v == l).unwrap().0;
                (5..=9).contains(orig)
            })
            .count();
        let in_t1 = tasks[1]
            .train
            .labels
            .iter()
            .filter(|&&l| {
                let orig = tasks[1].class_map.iter().find(|(_, &v)| v == l).unwrap().0;
                (5..=9).contains(orig)
            })
            .count();
        assert_eq!(in_t0, shared_base);
        assert_eq!(in_t1, shared_base);
    }

    #[test]
    fn overlap_identical_ranges_identical_tasks() {
        let b = base(5);
        let tasks = generate_overlap_split_tasks(&b, &[(0, 4), (0, 4)]).unwrap();
        assert_eq!(tasks[0].train.features, tasks[1].train.features);
        assert_eq!(tasks[0].train.labels, tasks[1].train.labels);
    }

    #[test]
    fn overlap_range_out_of_bounds_rejected() {
        let b = base(6);
        assert!(generate_overlap_split_tasks(&b, &[(10, 20)]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        std::fs::write(&path, "3, 2\n0.5, -1.25, 0\n1.0, 2.0, 1\n-0.125, 0.0, 2\n").unwrap();
        let data = import_csv(&path).unwrap();
        assert_eq!(data.len(), 3);
        assert_eq!(data.dim(), 2);
        assert_eq!(data.labels, vec![0, 1, 2]);
        assert_eq!(data.features.get(0, 1), -1.25);
    }

    #[test]
    fn csv_bad_rows_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "2, 2\n1.0, 2.0, 0\n").unwrap();
        assert!(import_csv(&path).is_err());
        std::fs::write(&path, "1, 2\n1.0, x, 0\n").unwrap();
        assert!(import_csv(&path).is_err());
    }
}
