use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Example, TaskSpec};
use crate::error::{Error, Result};
use crate::rng::{child_rng, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteKind {
    /// Every task has the same number of training examples.
    Balanced,
    /// Two tasks hold most of the examples: the largest gets 35–45 % of the
    /// total and the runner-up 15–25 %.
    Imbalanced,
}

/// Gaussian-cluster classification tasks with disjoint label sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    pub kind: SuiteKind,
    pub num_tasks: usize,
    pub classes_per_task: usize,
    /// Training examples per class in the balanced case; the imbalanced
    /// case redistributes the same total across tasks.
    pub examples_per_class: usize,
    pub test_per_class: usize,
    pub input_dim: usize,
    /// Minimum distance between any two class means, in units of the
    /// (unit) cluster standard deviation.
    #[serde(default = "default_separation")]
    pub separation: f64,
    /// Typical distance between the centers of two tasks' class groups.
    /// Zero places every class mean around the origin.
    #[serde(default = "default_task_spread")]
    pub task_spread: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_separation() -> f64 {
    4.0
}

fn default_task_spread() -> f64 {
    12.0
}

impl SuiteConfig {
    pub fn num_classes(&self) -> usize {
        self.num_tasks * self.classes_per_task
    }
}

fn gaussian_vector(rng: &mut impl Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| scale * { let z: f64 = StandardNormal.sample(rng); z })
        .collect::<Vec<f64>>()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Class means grouped by task. Each task gets a center drawn with typical
/// pairwise distance `spread`, and its classes sit around it with typical
/// pairwise distance 1.25× the separation. Draws closer than the separation
/// to any earlier mean are rejected.
fn class_means(
    rng: &mut impl Rng,
    tasks: usize,
    per_task: usize,
    dim: usize,
    separation: f64,
    spread: f64,
) -> Result<Vec<Vec<f64>>> {
    let count = tasks * per_task;
    let norm = (2.0 * dim as f64).sqrt();
    let scale = 1.25 * separation / norm;
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(count);
    let mut center = Vec::new();
    for i in 0..count {
        if i % per_task == 0 {
            center = gaussian_vector(rng, dim, spread / norm);
        }
        let mut tries = 0;
        loop {
            let mut cand = gaussian_vector(rng, dim, scale);
            for (x, c) in cand.iter_mut().zip(&center) {
                *x += c;
            }
            if means.iter().all(|m| distance(m, &cand) >= separation) {
                means.push(cand);
                break;
            }
            tries += 1;
            if tries > 10_000 {
                return Err(Error::input(format!(
                    "cannot place {count} class means {separation}σ apart in {dim} dimensions"
                )));
            }
        }
    }
    Ok(means)
}

fn task_shares(kind: SuiteKind, k: usize, rng: &mut impl Rng) -> Vec<f64> {
    match kind {
        SuiteKind::Balanced => vec![1.0 / k as f64; k],
        SuiteKind::Imbalanced => {
            let mut shares = vec![0.0; k];
            let mut ids: Vec<usize> = (0..k).collect();
            ids.shuffle(rng);
            if k == 2 {
                let big = rng.random_range(0.7..0.85);
                shares[ids[0]] = big;
                shares[ids[1]] = 1.0 - big;
                return shares;
            }
            let first = rng.random_range(0.35..0.45);
            let second = rng.random_range(0.15..0.25);
            shares[ids[0]] = first;
            shares[ids[1]] = second;
            let weights: Vec<f64> = (2..k).map(|_| rng.random_range(0.5..1.5)).collect();
            let total: f64 = weights.iter().sum();
            let rest = 1.0 - first - second;
            for (&id, w) in ids[2..].iter().zip(&weights) {
                shares[id] = rest * w / total;
            }
            shares
        }
    }
}

pub fn make_synthetic_suite(config: &SuiteConfig) -> Result<Vec<TaskSpec>> {
    if config.num_tasks < 2 {
        return Err(Error::input("a suite needs at least 2 tasks"));
    }
    if config.classes_per_task == 0 || config.examples_per_class == 0 || config.input_dim == 0 {
        return Err(Error::input("suite sizes must be positive"));
    }
    if !(config.separation >= 0.0 && config.task_spread >= 0.0) {
        return Err(Error::input("separation and task_spread must be >= 0"));
    }
    let mut rng = child_rng(config.seed, RngStream::Suite);
    let means = class_means(
        &mut rng,
        config.num_tasks,
        config.classes_per_task,
        config.input_dim,
        config.separation,
        config.task_spread,
    )?;
    let shares = task_shares(config.kind, config.num_tasks, &mut rng);
    let total = (config.num_tasks * config.classes_per_task * config.examples_per_class) as f64;

    let mut tasks = Vec::with_capacity(config.num_tasks);
    for (t, share) in shares.iter().enumerate() {
        let per_class = match config.kind {
            SuiteKind::Balanced => config.examples_per_class,
            SuiteKind::Imbalanced => {
                ((share * total / config.classes_per_task as f64).round() as usize).max(1)
            }
        };
        let mut sample = |n: usize| -> Vec<Example> {
            let mut out = Vec::with_capacity(n * config.classes_per_task);
            for c in 0..config.classes_per_task {
                let label = t * config.classes_per_task + c;
                for _ in 0..n {
                    let noise = gaussian_vector(&mut rng, config.input_dim, 1.0);
                    let features = means[label].iter().zip(noise).map(|(m, z)| m + z).collect();
                    out.push(Example::new(features, label));
                }
            }
            out
        };
        let train = sample(per_class);
        let test = sample(config.test_per_class);
        tasks.push(TaskSpec {
            id: t,
            name: format!("task{t}"),
            train,
            test,
        });
    }
    Ok(tasks)
}

/// Recasts multiclass tasks as candidate ranking: every class gets a random
/// prototype vector of width `candidate_dim`, and each example's candidates
/// are its own class prototype plus `num_candidates − 1` other classes', in
/// random order. `label` becomes the index of the true candidate.
pub fn to_candidate_suite(
    tasks: &[TaskSpec],
    num_classes: usize,
    num_candidates: usize,
    candidate_dim: usize,
    seed: u64,
) -> Result<Vec<TaskSpec>> {
    if num_candidates < 1 || num_candidates > num_classes {
        return Err(Error::input(format!(
            "need 1..={num_classes} candidates, got {num_candidates}"
        )));
    }
    let mut rng = child_rng(seed ^ 0x5eed_ca4d, RngStream::Suite);
    let prototypes: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| gaussian_vector(&mut rng, candidate_dim, 1.0))
        .collect();
    let mut convert = |ex: &Example| -> Result<Example> {
        if ex.label >= num_classes {
            return Err(Error::input(format!("label {} out of range", ex.label)));
        }
        let mut others: Vec<usize> = (0..num_classes).filter(|&c| c != ex.label).collect();
        others.shuffle(&mut rng);
        let mut classes = vec![ex.label];
        classes.extend_from_slice(&others[..num_candidates - 1]);
        classes.shuffle(&mut rng);
        let label = classes.iter().position(|&c| c == ex.label).expect("inserted");
        Ok(Example {
            features: ex.features.clone(),
            label,
            candidates: classes.iter().map(|&c| prototypes[c].clone()).collect(),
        })
    };
    tasks
        .iter()
        .map(|t| {
            Ok(TaskSpec {
                id: t.id,
                name: t.name.clone(),
                train: t.train.iter().map(&mut convert).collect::<Result<_>>()?,
                test: t.test.iter().map(&mut convert).collect::<Result<_>>()?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn config(kind: SuiteKind, seed: u64) -> SuiteConfig {
        SuiteConfig {
            kind,
            num_tasks: 5,
            classes_per_task: 2,
            examples_per_class: 1000,
            test_per_class: 250,
            input_dim: 32,
            separation: 4.0,
            task_spread: 12.0,
            seed,
        }
    }

    #[test]
    fn balanced_suite_shape() {
        let tasks = make_synthetic_suite(&config(SuiteKind::Balanced, 1)).unwrap();
        assert_eq!(tasks.len(), 5);
        for (i, t) in tasks.iter().enumerate() {
            assert_eq!(t.train.len(), 2000);
            assert_eq!(t.test.len(), 500);
            assert!(t.train.iter().all(|e| e.label / 2 == i));
        }
        let labels: std::collections::BTreeSet<usize> =
            tasks.iter().flat_map(|t| t.train.iter().map(|e| e.label)).collect();
        assert_eq!(labels.len(), 10);
    }

    #[test]
    fn suites_are_reproducible() {
        let a = make_synthetic_suite(&config(SuiteKind::Imbalanced, 3)).unwrap();
        let b = make_synthetic_suite(&config(SuiteKind::Imbalanced, 3)).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn imbalanced_suites_are_dominated(seed in any::<u64>(), k in 2usize..8) {
            let mut c = config(SuiteKind::Imbalanced, seed);
            c.num_tasks = k;
            c.examples_per_class = 50;
            c.test_per_class = 1;
            c.input_dim = 24;
            let tasks = make_synthetic_suite(&c).unwrap();
            let mut sizes: Vec<usize> = tasks.iter().map(TaskSpec::len).collect();
            let total: usize = sizes.iter().sum();
            sizes.sort_unstable_by(|a, b| b.cmp(a));
            prop_assert!(sizes[0] as f64 / total as f64 >= 0.3);
            prop_assert!((sizes[0] + sizes[1]) as f64 / total as f64 >= 0.5);
        }
    }

    /// Logistic regression on one task's two classes, trained by plain
    /// gradient descent; independent of the crate's models.
    fn probe_accuracy(task: &TaskSpec) -> f64 {
        let dim = task.train[0].features.len();
        let base = task.train.iter().map(|e| e.label).min().unwrap();
        let mut w = vec![0.0; dim];
        let mut b = 0.0;
        for _ in 0..200 {
            let mut gw = vec![0.0; dim];
            let mut gb = 0.0;
            for e in &task.train {
                let z: f64 = b + w.iter().zip(&e.features).map(|(a, x)| a * x).sum::<f64>();
                let p = 1.0 / (1.0 + (-z).exp());
                let y = (e.label - base) as f64;
                for (g, x) in gw.iter_mut().zip(&e.features) {
                    *g += (p - y) * x;
                }
                gb += p - y;
            }
            let n = task.train.len() as f64;
            for (a, g) in w.iter_mut().zip(&gw) {
                *a -= 0.1 * g / n;
            }
            b -= 0.1 * gb / n;
        }
        let correct = task
            .test
            .iter()
            .filter(|e| {
                let z: f64 = b + w.iter().zip(&e.features).map(|(a, x)| a * x).sum::<f64>();
                (z > 0.0) == (e.label > base)
            })
            .count();
        correct as f64 / task.test.len() as f64
    }

    #[test]
    fn each_task_is_linearly_separable_by_a_probe() {
        let tasks = make_synthetic_suite(&config(SuiteKind::Balanced, 7)).unwrap();
        for t in &tasks {
            let acc = probe_accuracy(t);
            assert!(acc >= 0.95, "task {}: {acc}", t.id);
        }
    }

    #[test]
    fn class_means_respect_separation() {
        let mut rng = child_rng(5, RngStream::Suite);
        let means = class_means(&mut rng, 5, 4, 16, 4.0, 12.0).unwrap();
        for i in 0..means.len() {
            for j in 0..i {
                assert!(distance(&means[i], &means[j]) >= 4.0);
            }
        }
    }

    #[test]
    fn candidate_conversion_keeps_true_class_reachable() {
        let mut c = config(SuiteKind::Balanced, 2);
        c.examples_per_class = 20;
        c.test_per_class = 5;
        let tasks = make_synthetic_suite(&c).unwrap();
        let cand = to_candidate_suite(&tasks, 10, 4, 6, 2).unwrap();
        for (orig, conv) in tasks.iter().zip(&cand) {
            for (o, e) in orig.train.iter().zip(&conv.train) {
                assert_eq!(e.candidates.len(), 4);
                assert!(e.label < 4);
                assert_eq!(o.features, e.features);
            }
        }
        // every example of a class points at that class's prototype
        let proto_of = |task: &TaskSpec, i: usize| {
            let e = &task.train[i];
            e.candidates[e.label].clone()
        };
        assert_eq!(proto_of(&cand[0], 0), proto_of(&cand[0], 1));
        assert!(to_candidate_suite(&tasks, 10, 11, 6, 2).is_err());
    }
}
