//! Task streams.
//!
//! A run sees each training example exactly once. Tasks arrive one after
//! another in a configurable order; within a task, examples are shuffled
//! and cut into mini-batches that never cross a task boundary. Learners only
//! ever see [`Example`]s: the task a batch came from travels alongside in
//! [`StreamBatch`] for bookkeeping (memory composition, per-task violation
//! counts), never inside the examples.

mod dataset;
mod featurize;
mod suite;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use dataset::{load_suite, load_text_task, parse_text_records, save_suite};
pub use featurize::{featurize, tokenize, FeaturizerConfig};
pub use suite::{make_synthetic_suite, to_candidate_suite, SuiteConfig, SuiteKind};

use crate::error::{Error, Result};
use crate::rng::{child_rng, child_rng_indexed, RngStream};

/// A labelled input. In candidate-scoring mode `label` indexes the true
/// entry of `candidates`; otherwise it is a global class id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub features: Vec<f64>,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<Vec<f64>>,
}

impl Example {
    pub fn new(features: Vec<f64>, label: usize) -> Self {
        Self {
            features,
            label,
            candidates: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: usize,
    pub name: String,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

impl TaskSpec {
    pub fn len(&self) -> usize {
        self.train.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamConfig {
    /// Positions into the task list, in presentation order.
    pub order: Vec<usize>,
    pub batch_size: usize,
    pub seed: u64,
}

impl StreamConfig {
    pub fn in_order(num_tasks: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            order: (0..num_tasks).collect(),
            batch_size,
            seed,
        }
    }
}

/// One mini-batch from the stream together with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamBatch {
    examples: Vec<Example>,
    task: usize,
    ends_task: bool,
}

impl StreamBatch {
    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Id of the task this batch came from. For metrics and memory
    /// composition only; learners must not branch on it.
    pub fn diagnostic_task(&self) -> usize {
        self.task
    }

    /// Whether this is the last batch of its task.
    pub fn ends_task(&self) -> bool {
        self.ends_task
    }
}

/// Lazily yields the batches of a single pass over the tasks.
pub struct TaskStream<'a> {
    tasks: &'a [TaskSpec],
    order: Vec<usize>,
    batch_size: usize,
    seed: u64,
    position: usize,
    current: Vec<usize>,
    cursor: usize,
}

/// Builds the single-pass stream. Each task's shuffle depends only on the
/// seed and the task id, so reordering tasks reorders identical batches.
pub fn build_stream<'a>(tasks: &'a [TaskSpec], config: &StreamConfig) -> Result<TaskStream<'a>> {
    if tasks.is_empty() {
        return Err(Error::input("stream needs at least one task"));
    }
    if config.batch_size == 0 {
        return Err(Error::input("batch size must be >= 1"));
    }
    let mut seen = vec![false; tasks.len()];
    if config.order.len() != tasks.len() {
        return Err(Error::input(format!(
            "order has {} entries for {} tasks",
            config.order.len(),
            tasks.len()
        )));
    }
    for &i in &config.order {
        if i >= tasks.len() || std::mem::replace(&mut seen[i], true) {
            return Err(Error::input(format!(
                "order {:?} is not a permutation",
                config.order
            )));
        }
    }
    if let Some(t) = tasks.iter().find(|t| t.is_empty()) {
        return Err(Error::input(format!("task {} has no examples", t.name)));
    }
    Ok(TaskStream {
        tasks,
        order: config.order.clone(),
        batch_size: config.batch_size,
        seed: config.seed,
        position: 0,
        current: Vec::new(),
        cursor: 0,
    })
}

impl TaskStream<'_> {
    /// Batches left to emit.
    pub fn remaining_batches(&self) -> usize {
        let here = (self.current.len() - self.cursor).div_ceil(self.batch_size);
        let later: usize = self.order[self.position.min(self.order.len())..]
            .iter()
            .map(|&i| self.tasks[i].len().div_ceil(self.batch_size))
            .sum();
        here + later
    }

    fn task_permutation(&self, task: &TaskSpec) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..task.len()).collect();
        let mut rng = child_rng_indexed(self.seed, RngStream::StreamShuffle, task.id as u32);
        idx.shuffle(&mut rng);
        idx
    }
}

impl Iterator for TaskStream<'_> {
    type Item = StreamBatch;

    fn next(&mut self) -> Option<StreamBatch> {
        if self.cursor >= self.current.len() {
            let &pos = self.order.get(self.position)?;
            self.current = self.task_permutation(&self.tasks[pos]);
            self.cursor = 0;
            self.position += 1;
        }
        let task = &self.tasks[self.order[self.position - 1]];
        let end = (self.cursor + self.batch_size).min(self.current.len());
        let examples = self.current[self.cursor..end]
            .iter()
            .map(|&i| task.train[i].clone())
            .collect();
        self.cursor = end;
        Some(StreamBatch {
            examples,
            task: task.id,
            ends_task: end == self.current.len(),
        })
    }
}

/// I.i.d. mini-batches over the pooled training examples of all tasks,
/// reshuffled each epoch; used by multi-task training.
pub fn pooled_epoch(tasks: &[TaskSpec], batch_size: usize, seed: u64, epoch: u32) -> Vec<Vec<Example>> {
    let mut pool: Vec<&Example> = tasks.iter().flat_map(|t| t.train.iter()).collect();
    let mut rng = child_rng(seed ^ u64::from(epoch).rotate_left(32), RngStream::MtlShuffle);
    pool.shuffle(&mut rng);
    pool.chunks(batch_size.max(1))
        .map(|c| c.iter().map(|&e| e.clone()).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn toy_tasks(sizes: &[usize]) -> Vec<TaskSpec> {
        let mut next = 0.0;
        sizes
            .iter()
            .enumerate()
            .map(|(id, &n)| TaskSpec {
                id,
                name: format!("t{id}"),
                train: (0..n)
                    .map(|_| {
                        next += 1.0;
                        Example::new(vec![next], id)
                    })
                    .collect(),
                test: vec![],
            })
            .collect()
    }

    #[test]
    fn five_tasks_of_2000_give_625_batches() {
        let tasks = toy_tasks(&[2000; 5]);
        let stream = build_stream(&tasks, &StreamConfig::in_order(5, 16, 1)).unwrap();
        assert_eq!(stream.remaining_batches(), 625);
        let batches: Vec<_> = stream.collect();
        assert_eq!(batches.len(), 625);
        let mut seen: Vec<f64> = batches
            .iter()
            .flat_map(|b| b.examples().iter().map(|e| e.features[0]))
            .collect();
        seen.sort_by(f64::total_cmp);
        assert_eq!(seen, (1..=10_000).map(f64::from).collect::<Vec<_>>());
    }

    #[test]
    fn short_task_gives_a_partial_batch() {
        let tasks = toy_tasks(&[17]);
        let sizes: Vec<usize> = build_stream(&tasks, &StreamConfig::in_order(1, 16, 0))
            .unwrap()
            .map(|b| b.len())
            .collect();
        assert_eq!(sizes, [16, 1]);
    }

    #[test]
    fn batches_never_span_tasks_and_mark_task_ends() {
        let tasks = toy_tasks(&[20, 5, 33]);
        let batches: Vec<_> = build_stream(&tasks, &StreamConfig::in_order(3, 8, 3))
            .unwrap()
            .collect();
        for b in &batches {
            assert!(b.examples().iter().all(|e| e.label == b.diagnostic_task()));
        }
        let ends: Vec<usize> = batches
            .iter()
            .filter(|b| b.ends_task())
            .map(|b| b.diagnostic_task())
            .collect();
        assert_eq!(ends, [0, 1, 2]);
    }

    #[test]
    fn seed_determinism_and_order_invariance() {
        let tasks = toy_tasks(&[30, 30, 30]);
        let a: Vec<_> = build_stream(&tasks, &StreamConfig::in_order(3, 7, 9)).unwrap().collect();
        let b: Vec<_> = build_stream(&tasks, &StreamConfig::in_order(3, 7, 9)).unwrap().collect();
        assert_eq!(a, b);

        let reordered = StreamConfig {
            order: vec![2, 0, 1],
            batch_size: 7,
            seed: 9,
        };
        let c: Vec<_> = build_stream(&tasks, &reordered).unwrap().collect();
        let group = |bs: &[StreamBatch]| {
            let mut m: BTreeMap<usize, Vec<StreamBatch>> = BTreeMap::new();
            for b in bs {
                m.entry(b.diagnostic_task()).or_default().push(b.clone());
            }
            m
        };
        assert_eq!(group(&a), group(&c));
        assert_eq!(c[0].diagnostic_task(), 2);
    }

    #[test]
    fn invalid_streams_are_rejected() {
        assert!(build_stream(&[], &StreamConfig::in_order(0, 4, 0)).is_err());
        let tasks = toy_tasks(&[3, 3]);
        let dup = StreamConfig {
            order: vec![0, 0],
            batch_size: 2,
            seed: 0,
        };
        assert!(build_stream(&tasks, &dup).is_err());
        let empty = toy_tasks(&[3, 0]);
        assert!(build_stream(&empty, &StreamConfig::in_order(2, 2, 0)).is_err());
    }

    #[test]
    fn pooled_epoch_covers_every_example_once() {
        let tasks = toy_tasks(&[10, 7]);
        let batches = pooled_epoch(&tasks, 4, 5, 0);
        assert_eq!(batches.len(), 5);
        let mut seen: Vec<f64> = batches.iter().flatten().map(|e| e.features[0]).collect();
        seen.sort_by(f64::total_cmp);
        assert_eq!(seen, (1..=17).map(f64::from).collect::<Vec<_>>());
        assert_ne!(pooled_epoch(&tasks, 4, 5, 1), batches);
    }
}
