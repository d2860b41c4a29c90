//! Training procedures.
//!
//! Meta-learners (`OML_ER`, `ANML_ER`, `MAML_ER`) cut the stream into
//! episodes, adapt a copy of the parameters on each support set with plain
//! SGD, and apply the query-set gradient taken at the adapted parameters to
//! the original ones with Adam. Every `R_F`-th query comes from memory.
//!
//! Baselines share the OML network with all parameters trainable:
//! `SEQ` takes one Adam step per stream batch, `REPLAY` adds one step on a
//! memory sample every `⌈R_I/b⌉` steps, `AGEM` uses such samples as a
//! reference gradient to project out interference, and `MTL` trains on the
//! pooled tasks for several epochs.

mod baselines;
mod meta;

use serde::{Deserialize, Serialize};

pub use baselines::{agem_project, Projection};
pub use meta::{inner_adapt, meta_gradient, meta_outer_step, MetaGradient};

use crate::diagnostics::{gate_stats, macro_accuracy, AlignmentSample, GateStats};
use crate::episodes::{EpisodeTrace, ReplaySchedule};
use crate::error::{Error, Result};
use crate::memory::EpisodicMemory;
use crate::model::{evaluate, Architecture, GateRecord, ModelConfig};
use crate::numerics::ParameterSet;
use crate::stream::TaskSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Method {
    Seq,
    Replay,
    Agem,
    Mtl,
    OmlEr,
    AnmlEr,
    MamlEr,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Seq,
        Method::Replay,
        Method::Agem,
        Method::Mtl,
        Method::OmlEr,
        Method::AnmlEr,
        Method::MamlEr,
    ];

    pub fn is_meta(self) -> bool {
        matches!(self, Method::OmlEr | Method::AnmlEr | Method::MamlEr)
    }

    /// Network each method trains. Baselines use the OML network.
    pub fn architecture(self) -> Architecture {
        match self {
            Method::AnmlEr => Architecture::Anml,
            Method::MamlEr => Architecture::Maml,
            _ => Architecture::Oml,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Seq => "SEQ",
            Method::Replay => "REPLAY",
            Method::Agem => "AGEM",
            Method::Mtl => "MTL",
            Method::OmlEr => "OML_ER",
            Method::AnmlEr => "ANML_ER",
            Method::MamlEr => "MAML_ER",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// How meta-test episodes are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaTestMode {
    /// One episode per task, each with that task's test set as query.
    #[default]
    PerTask,
    /// A single episode whose query is every test set together.
    Combined,
}

fn one() -> f64 {
    1.0
}

fn one_epoch() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerConfig {
    pub method: Method,
    /// SGD rate of the inner loop and of meta-test fine-tuning, `α`.
    #[serde(default)]
    pub inner_lr: f64,
    /// Adam rate of the meta update and of every baseline, `β`.
    pub outer_lr: f64,
    pub schedule: ReplaySchedule,
    #[serde(default = "one")]
    pub p_write: f64,
    /// Take every query from the stream.
    #[serde(default)]
    pub no_replay: bool,
    /// Evaluate the trained parameters without meta-test adaptation.
    #[serde(default)]
    pub no_meta_test_finetune: bool,
    #[serde(default)]
    pub meta_test: MetaTestMode,
    /// Passes over the pooled data; only `MTL` may use more than one.
    #[serde(default = "one_epoch")]
    pub epochs: u32,
    /// Record gradient alignment on every n-th replay event; 0 turns it off.
    #[serde(default)]
    pub alignment_every: usize,
    /// Also evaluate every task whenever a task's last batch has been used.
    #[serde(default)]
    pub eval_at_boundaries: bool,
}

impl LearnerConfig {
    pub fn new(method: Method, inner_lr: f64, outer_lr: f64, schedule: ReplaySchedule) -> Self {
        Self {
            method,
            inner_lr,
            outer_lr,
            schedule,
            p_write: 1.0,
            no_replay: false,
            no_meta_test_finetune: false,
            meta_test: MetaTestMode::PerTask,
            epochs: 1,
            alignment_every: 0,
            eval_at_boundaries: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if !(self.outer_lr.is_finite() && self.outer_lr > 0.0) {
            return Err(Error::input(format!("outer_lr must be > 0, got {}", self.outer_lr)));
        }
        if !(self.inner_lr.is_finite() && self.inner_lr >= 0.0) {
            return Err(Error::input(format!("inner_lr must be >= 0, got {}", self.inner_lr)));
        }
        if !(0.0..=1.0).contains(&self.p_write) {
            return Err(Error::input(format!("p_write must be in [0, 1], got {}", self.p_write)));
        }
        match self.method {
            Method::Mtl if self.epochs == 0 => Err(Error::input("MTL needs epochs >= 1")),
            Method::Mtl => Ok(()),
            m if self.epochs != 1 => Err(Error::input(format!(
                "{m} is single-pass; epochs must be 1, got {}",
                self.epochs
            ))),
            _ => Ok(()),
        }
    }
}

/// Accuracy of every task at some point during training.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryEval {
    pub after_task: usize,
    pub task_accuracy: Vec<f64>,
    /// Memory and replay counters at the time of the evaluation.
    pub memory_size: usize,
    pub replay_updates: usize,
    pub skipped_replays: usize,
}

/// What happened during training.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    /// Optimizer updates applied to the trained parameters.
    pub updates: usize,
    /// Updates (or A-GEM references) that used memory samples.
    pub replay_updates: usize,
    /// Scheduled replays that found memory empty.
    pub skipped_replays: usize,
    /// A-GEM references with zero norm, where projection was skipped.
    pub zero_references: usize,
    /// Meta-learners only.
    pub episodes: Vec<EpisodeTrace>,
    pub alignment: Vec<AlignmentSample>,
    pub boundary_evals: Vec<BoundaryEval>,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub params: ParameterSet,
    /// `None` for `MTL`, which keeps no memory.
    pub memory: Option<EpisodicMemory>,
    pub log: TrainLog,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Indexed by task id.
    pub task_accuracy: Vec<f64>,
    pub macro_accuracy: f64,
    pub gate: Option<GateStats>,
}

fn check_inputs(model: &ModelConfig, tasks: &[TaskSpec], learner: &LearnerConfig) -> Result<()> {
    learner.validate()?;
    model.validate()?;
    if model.architecture != learner.method.architecture() {
        return Err(Error::input(format!(
            "{} trains the {:?} network, model is {:?}",
            learner.method,
            learner.method.architecture(),
            model.architecture
        )));
    }
    if let Some((i, t)) = tasks.iter().enumerate().find(|(i, t)| t.id != *i) {
        return Err(Error::input(format!("task at position {i} has id {}", t.id)));
    }
    Ok(())
}

/// Trains `learner.method` on `tasks` presented in `order`.
pub fn train(
    model: &ModelConfig,
    tasks: &[TaskSpec],
    order: &[usize],
    learner: &LearnerConfig,
    seed: u64,
) -> Result<Trained> {
    check_inputs(model, tasks, learner)?;
    match learner.method {
        Method::OmlEr | Method::AnmlEr | Method::MamlEr => {
            meta::run_meta_training(model, tasks, order, learner, seed)
        }
        Method::Seq | Method::Replay | Method::Agem => {
            baselines::train_sequential(model, tasks, order, learner, seed)
        }
        Method::Mtl => baselines::train_mtl(model, tasks, learner, seed),
    }
}

/// Final per-task accuracies. Meta-learners go through meta-testing, which
/// draws support sets from `trained.memory`; baselines are evaluated as is.
pub fn evaluate_trained(
    model: &ModelConfig,
    trained: &mut Trained,
    tasks: &[TaskSpec],
    learner: &LearnerConfig,
) -> Result<Evaluation> {
    if learner.method.is_meta() {
        let memory = trained
            .memory
            .as_mut()
            .ok_or_else(|| Error::input("meta-testing needs the training memory"))?;
        meta::run_meta_testing(model, &trained.params, memory, tasks, learner)
    } else {
        evaluate_tasks(model, &trained.params, tasks)
    }
}

/// Per-task accuracy at fixed parameters.
pub fn evaluate_tasks(model: &ModelConfig, params: &ParameterSet, tasks: &[TaskSpec]) -> Result<Evaluation> {
    let mut gates = GateCollector::default();
    let mut task_accuracy = Vec::with_capacity(tasks.len());
    for task in tasks {
        let (acc, g) = evaluate(params, model, &task.test)?;
        gates.add(g);
        task_accuracy.push(acc);
    }
    finish(task_accuracy, gates)
}

#[derive(Default)]
struct GateCollector(Option<GateRecord>);

impl GateCollector {
    fn add(&mut self, record: Option<GateRecord>) {
        match (&mut self.0, record) {
            (Some(acc), Some(g)) => acc.values.extend(g.values),
            (None, Some(g)) => self.0 = Some(g),
            _ => {}
        }
    }
}

fn finish(task_accuracy: Vec<f64>, gates: GateCollector) -> Result<Evaluation> {
    Ok(Evaluation {
        macro_accuracy: macro_accuracy(&task_accuracy)?,
        task_accuracy,
        gate: gates.0.as_ref().and_then(gate_stats),
    })
}

fn boundary_eval(
    model: &ModelConfig,
    params: &ParameterSet,
    tasks: &[TaskSpec],
    after_task: usize,
    memory: &EpisodicMemory,
    log: &TrainLog,
    skipped_replays: usize,
) -> Result<BoundaryEval> {
    Ok(BoundaryEval {
        after_task,
        task_accuracy: evaluate_tasks(model, params, tasks)?.task_accuracy,
        memory_size: memory.len(),
        replay_updates: log.replay_updates,
        skipped_replays,
    })
}
