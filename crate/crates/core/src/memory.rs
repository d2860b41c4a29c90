//! Episodic memory: every offered example is admitted independently with
//! probability `p_write`; replay draws uniformly without replacement.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::{child_rng, RngStream};
use crate::stream::{Example, StreamBatch};

#[derive(Debug, Clone)]
struct Stored {
    example: Example,
    task: usize,
}

#[derive(Debug, Clone)]
pub struct EpisodicMemory {
    items: Vec<Stored>,
    p_write: f64,
    write_rng: ChaCha8Rng,
    sample_rng: ChaCha8Rng,
    offered: usize,
    short_samples: usize,
}

impl EpisodicMemory {
    /// Writes and samples use separate child streams of `seed`.
    pub fn new(p_write: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_write) {
            return Err(Error::input(format!("p_write must be in [0, 1], got {p_write}")));
        }
        Ok(Self {
            items: Vec::new(),
            p_write,
            write_rng: child_rng(seed, RngStream::MemoryWrite),
            sample_rng: child_rng(seed, RngStream::MemorySample),
            offered: 0,
            short_samples: 0,
        })
    }

    pub fn p_write(&self) -> f64 {
        self.p_write
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Total examples ever offered to [`write`](Self::write).
    pub fn offered(&self) -> usize {
        self.offered
    }

    /// Sample calls that asked for more items than were stored.
    pub fn short_samples(&self) -> usize {
        self.short_samples
    }

    /// Offers every example of `batch`; returns how many were admitted.
    pub fn write(&mut self, batch: &StreamBatch) -> usize {
        let mut admitted = 0;
        for ex in batch.examples() {
            self.offered += 1;
            if self.write_rng.random_bool(self.p_write) {
                self.items.push(Stored {
                    example: ex.clone(),
                    task: batch.diagnostic_task(),
                });
                admitted += 1;
            }
        }
        admitted
    }

    /// `n` distinct items drawn uniformly, or everything when fewer than `n`
    /// are stored.
    pub fn sample(&mut self, n: usize) -> Result<Vec<Example>> {
        if self.items.is_empty() {
            return Err(Error::EmptyMemory);
        }
        let take = if n > self.items.len() {
            self.short_samples += 1;
            self.items.len()
        } else {
            n
        };
        Ok(self
            .sample_indices(take)
            .into_iter()
            .map(|i| self.items[i].example.clone())
            .collect())
    }

    fn sample_indices(&mut self, n: usize) -> Vec<usize> {
        index::sample(&mut self.sample_rng, self.items.len(), n).into_vec()
    }

    /// Stored examples per task. Diagnostics only.
    pub fn composition(&self) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for s in &self.items {
            *counts.entry(s.task).or_insert(0) += 1;
        }
        counts
    }

    /// One `{"task":..,"label":..}` JSON line per stored item.
    pub fn dump_lines(&self) -> impl Iterator<Item = String> + '_ {
        self.items
            .iter()
            .map(|s| format!("{{\"task\":{},\"label\":{}}}", s.task, s.example.label))
    }
}
