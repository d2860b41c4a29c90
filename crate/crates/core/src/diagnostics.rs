//! Gradient alignment, constraint violations, accuracy and gate summaries.
//!
//! Gradient maps are flattened in lexicographic parameter-name order, the
//! iteration order of [`GradMap`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::GateRecord;
use crate::numerics::GradMap;

/// Dot product of two flattened gradients. Positive means the update for
/// one also lowers the other loss (transfer); negative means interference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSample {
    /// Optimizer step or episode index the sample was taken at.
    pub step: usize,
    /// Task of the stream data involved.
    pub task: usize,
    pub dot: f64,
    pub norm_a: f64,
    pub norm_b: f64,
    /// Zero when either gradient vanishes.
    pub cosine: f64,
}

impl AlignmentSample {
    pub fn at(self, step: usize, task: usize) -> Self {
        Self { step, task, ..self }
    }
}

pub fn grad_dot(a: &GradMap, b: &GradMap) -> Result<AlignmentSample> {
    if !a.same_keys(b) {
        let ka: Vec<&str> = a.keys().collect();
        let kb: Vec<&str> = b.keys().collect();
        return Err(Error::input(format!("gradient keys differ: {ka:?} vs {kb:?}")));
    }
    for (k, g) in a.iter() {
        let other = b.get(k).expect("same keys");
        if g.shape() != other.shape() {
            return Err(Error::input(format!(
                "gradient {k} has shapes {:?} and {:?}",
                g.shape(),
                other.shape()
            )));
        }
    }
    let dot = a.dot(b);
    let norm_a = a.norm_sq().sqrt();
    let norm_b = b.norm_sq().sqrt();
    let denom = norm_a * norm_b;
    let cosine = if denom > 0.0 { (dot / denom).clamp(-1.0, 1.0) } else { 0.0 };
    Ok(AlignmentSample {
        step: 0,
        task: 0,
        dot,
        norm_a,
        norm_b,
        cosine,
    })
}

/// Negative-dot samples per task. Every task that has a sample gets an
/// entry, so tasks without violations show up as zero.
pub fn count_violations(samples: &[AlignmentSample]) -> BTreeMap<usize, usize> {
    let mut counts = BTreeMap::new();
    for s in samples {
        *counts.entry(s.task).or_insert(0) += usize::from(s.dot < 0.0);
    }
    counts
}

/// Unweighted mean of per-task accuracies.
pub fn macro_accuracy(per_task: &[f64]) -> Result<f64> {
    if per_task.is_empty() {
        return Err(Error::input("macro accuracy of zero tasks"));
    }
    Ok(per_task.iter().sum::<f64>() / per_task.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateStats {
    pub mean: f64,
    /// Fraction of gate values above 0.99.
    pub frac_open: f64,
    /// Fraction of gate values below 0.01.
    pub frac_closed: f64,
}

/// `None` for an empty record.
pub fn gate_stats(record: &GateRecord) -> Option<GateStats> {
    let v = &record.values;
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    Some(GateStats {
        mean: v.iter().sum::<f64>() / n,
        frac_open: v.iter().filter(|&&g| g > 0.99).count() as f64 / n,
        frac_closed: v.iter().filter(|&&g| g < 0.01).count() as f64 / n,
    })
}

/// One evaluation event of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub method: String,
    pub seed: u64,
    pub order: Vec<usize>,
    /// `"final"` or `"task_boundary"`.
    pub event: String,
    /// Task whose last batch preceded a boundary evaluation.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub after_task: Option<usize>,
    /// Indexed by task id.
    pub task_accuracy: Vec<f64>,
    pub macro_accuracy: f64,
    pub no_replay: bool,
    pub no_meta_test_finetune: bool,
    pub replay_rate: f64,
    pub p_write: f64,
    pub memory_size: usize,
    pub replay_updates: usize,
    pub skipped_replays: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub violations: Option<BTreeMap<usize, usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gate: Option<GateStats>,
}
