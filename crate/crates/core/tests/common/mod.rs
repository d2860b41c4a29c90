//! Shared test fixtures: a quadratic objective with a closed-form Hessian
//! and the benchmark protocol used by the acceptance suite.
#![allow(dead_code)]

use lifelong::episodes::ReplaySchedule;
use lifelong::learners::{evaluate_trained, train, Evaluation, LearnerConfig, Method, Trained};
use lifelong::model::ModelConfig;
use lifelong::numerics::{GradMap, Objective, ParameterSet, Partition, PartitionSet, Tensor};
use lifelong::stream::{make_synthetic_suite, SuiteConfig, SuiteKind, TaskSpec};
use lifelong::Result;
use rand::Rng;

/// `L(w) = ½ (w − c)ᵀ A (w − c)` with symmetric positive definite `A`, so
/// `∇L = A (w − c)` and `∇²L = A`.
#[derive(Debug, Clone)]
pub struct Quad {
    pub a: Vec<Vec<f64>>,
    pub c: Vec<f64>,
}

impl Quad {
    pub fn random(rng: &mut impl Rng, dim: usize) -> Self {
        let b: Vec<Vec<f64>> = (0..dim)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let mut a = vec![vec![0.0; dim]; dim];
        for i in 0..dim {
            for j in 0..dim {
                a[i][j] = (0..dim).map(|k| b[k][i] * b[k][j]).sum::<f64>() / dim as f64;
            }
            a[i][i] += 0.5;
        }
        let c = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        Self { a, c }
    }

    pub fn grad(&self, w: &[f64]) -> Vec<f64> {
        let d: Vec<f64> = w.iter().zip(&self.c).map(|(x, c)| x - c).collect();
        matvec(&self.a, &d)
    }

    pub fn loss(&self, w: &[f64]) -> f64 {
        let d: Vec<f64> = w.iter().zip(&self.c).map(|(x, c)| x - c).collect();
        0.5 * d.iter().zip(matvec(&self.a, &d)).map(|(x, y)| x * y).sum::<f64>()
    }
}

pub fn matvec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter()
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// The library-facing objective: a single parameter tensor `w` in the head
/// partition.
pub struct QuadObjective;

impl Objective for QuadObjective {
    type Batch = Quad;

    fn loss_and_grad(&self, params: &ParameterSet, batch: &Quad, filter: &PartitionSet) -> Result<(f64, GradMap)> {
        let w = params.value("w").data();
        let mut grads = GradMap::new();
        if filter.contains(&Partition::Head) {
            grads.insert("w", Tensor::vector(batch.grad(w)));
        }
        Ok((batch.loss(w), grads))
    }
}

pub fn quad_params(w: Vec<f64>) -> ParameterSet {
    let mut p = ParameterSet::new();
    p.insert("w", Tensor::vector(w), Partition::Head);
    p
}

pub fn head_only() -> PartitionSet {
    [Partition::Head].into()
}

// Benchmark protocol: five two-class tasks, one pass, b = 16, m = 5,
// R_I = 1920, r = 1 %, five seeds.

pub const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
pub const INPUT_DIM: usize = 16;
pub const INNER_LR: f64 = 0.005;
pub const META_LR: f64 = 0.002;
pub const BASELINE_LR: f64 = 0.005;

pub fn suite(kind: SuiteKind, seed: u64) -> Vec<TaskSpec> {
    make_synthetic_suite(&SuiteConfig {
        kind,
        num_tasks: 5,
        classes_per_task: 2,
        examples_per_class: 1000,
        test_per_class: 250,
        input_dim: INPUT_DIM,
        separation: 4.0,
        task_spread: 12.0,
        seed,
    })
    .expect("valid suite")
}

pub fn learner(method: Method) -> LearnerConfig {
    let schedule = ReplaySchedule::new(16, 5, 1920, 0.01).expect("valid schedule");
    let mut l = if method.is_meta() {
        LearnerConfig::new(method, INNER_LR, META_LR, schedule)
    } else {
        LearnerConfig::new(method, 0.0, BASELINE_LR, schedule)
    };
    if method == Method::Mtl {
        l.epochs = 2;
    }
    l
}

pub fn model(method: Method) -> ModelConfig {
    let mut m = ModelConfig::new(INPUT_DIM, 10, method.architecture());
    m.encoder_dims = vec![64];
    m
}

pub fn run(tasks: &[TaskSpec], learner: &LearnerConfig, seed: u64) -> (Trained, Evaluation) {
    let model = model(learner.method);
    let mut trained = train(&model, tasks, &[0, 1, 2, 3, 4], learner, seed).expect("training");
    let eval = evaluate_trained(&model, &mut trained, tasks, learner).expect("evaluation");
    (trained, eval)
}

/// 5-seed mean macro accuracy in percentage points.
pub fn mean_points(kind: SuiteKind, learner: &LearnerConfig) -> f64 {
    let total: f64 = SEEDS
        .iter()
        .map(|&s| run(&suite(kind, s), learner, s).1.macro_accuracy)
        .sum();
    100.0 * total / SEEDS.len() as f64
}
