//! Config-driven experiment runs and their on-disk artifacts.
//!
//! A run directory holds:
//!
//! * `config.toml`: the config file, byte for byte;
//! * `metrics/<METHOD>_order<k>_seed<s>.jsonl`: one record per evaluation
//!   event (task boundaries if enabled, then the final evaluation);
//! * `summary.json`: mean and sample standard deviation across runs;
//! * `timing.jsonl`: wall-clock per run, kept apart so that everything else
//!   is byte-identical between repeated runs;
//! * `checkpoints/` and `traces/` when requested;
//! * `error.json` if a run failed.
//!
//! Floats in metrics and summaries are written with 12 significant digits.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::diagnostics::{count_violations, MetricsRecord};
use crate::episodes::{QuerySource, ReplaySchedule};
use crate::error::{Error, Result};
use crate::learners::{evaluate_trained, train, LearnerConfig, Method, Trained};
use crate::model::{save_checkpoint, LossMode, ModelConfig};
use crate::stream::{
    load_suite, load_text_task, make_synthetic_suite, to_candidate_suite, FeaturizerConfig,
    SuiteConfig, TaskSpec,
};

/// Network settings. Input width, class count and architecture come from
/// the data and the method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_encoder_dims")]
    pub encoder_dims: Vec<usize>,
    #[serde(default = "default_nm_hidden")]
    pub nm_hidden_dim: usize,
    #[serde(default)]
    pub freeze_lower_encoder: bool,
}

fn default_encoder_dims() -> Vec<usize> {
    vec![64]
}

fn default_nm_hidden() -> usize {
    64
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            encoder_dims: default_encoder_dims(),
            nm_hidden_dim: default_nm_hidden(),
            freeze_lower_encoder: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextTaskConfig {
    pub name: String,
    pub train: PathBuf,
    pub test: PathBuf,
}

/// Where the tasks come from. Relative paths are resolved against the
/// directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataConfig {
    /// Generated per run; the suite seed is `seed` plus the run seed.
    Synthetic(SuiteConfig),
    /// A suite written by `suite-gen` (or [`crate::stream::save_suite`]).
    SuiteFile { path: PathBuf },
    /// `label<TAB>text` files, one train/test pair per task, in task-id
    /// order. Labels are global class ids.
    Text {
        tasks: Vec<TextTaskConfig>,
        num_classes: usize,
        featurizer: FeaturizerConfig,
    },
}

/// Recast the tasks as candidate ranking (see
/// [`crate::stream::to_candidate_suite`]).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateConfig {
    pub num_candidates: usize,
    pub candidate_dim: usize,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Task orders, each a permutation of task ids. Empty means the
    /// natural order only.
    #[serde(default)]
    pub orders: Vec<Vec<usize>>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Save the trained parameters of every run.
    #[serde(default)]
    pub checkpoint: bool,
    #[serde(default)]
    pub model: ModelSection,
    pub data: DataConfig,
    #[serde(default)]
    pub candidates: Option<CandidateConfig>,
    pub learner: LearnerConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.learner
            .validate()
            .map_err(|e| Error::Config(format!("[learner] {e}")))?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if let DataConfig::Synthetic(s) = &self.data {
            self.orders_for(s.num_tasks)?;
        }
        if self.model.encoder_dims.is_empty() || self.model.encoder_dims.contains(&0) {
            return Err(Error::Config("[model] encoder_dims must be non-empty and positive".into()));
        }
        Ok(())
    }

    fn orders_for(&self, num_tasks: usize) -> Result<Vec<Vec<usize>>> {
        if self.orders.is_empty() {
            return Ok(vec![(0..num_tasks).collect()]);
        }
        for (k, order) in self.orders.iter().enumerate() {
            let mut sorted = order.clone();
            sorted.sort_unstable();
            if sorted != (0..num_tasks).collect::<Vec<_>>() {
                return Err(Error::Config(format!(
                    "orders[{k}] = {order:?} is not a permutation of 0..{num_tasks}"
                )));
            }
        }
        Ok(self.orders.clone())
    }
}

/// Tasks for one run seed. Returns the tasks and the number of classes.
pub fn build_tasks(config: &RunConfig, base_dir: &Path, seed: u64) -> Result<(Vec<TaskSpec>, usize)> {
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base_dir.join(p) };
    let (tasks, num_classes) = match &config.data {
        DataConfig::Synthetic(suite) => {
            let suite = SuiteConfig {
                seed: suite.seed.wrapping_add(seed),
                ..suite.clone()
            };
            (make_synthetic_suite(&suite)?, suite.num_classes())
        }
        DataConfig::SuiteFile { path } => {
            let tasks = load_suite(&resolve(path))?;
            let classes = tasks
                .iter()
                .flat_map(|t| t.train.iter().chain(&t.test))
                .map(|e| e.label + 1)
                .max()
                .unwrap_or(0);
            (tasks, classes)
        }
        DataConfig::Text {
            tasks,
            num_classes,
            featurizer,
        } => {
            let loaded = tasks
                .iter()
                .enumerate()
                .map(|(id, t)| {
                    load_text_task(id, &t.name, &resolve(&t.train), &resolve(&t.test), featurizer, *num_classes)
                })
                .collect::<Result<Vec<_>>>()?;
            (loaded, *num_classes)
        }
    };
    match config.candidates {
        None => Ok((tasks, num_classes)),
        Some(c) => Ok((
            to_candidate_suite(&tasks, num_classes, c.num_candidates, c.candidate_dim, seed)?,
            num_classes,
        )),
    }
}

fn model_config(config: &RunConfig, tasks: &[TaskSpec], num_classes: usize) -> Result<ModelConfig> {
    let input_dim = tasks
        .iter()
        .flat_map(|t| t.train.first())
        .map(|e| e.features.len())
        .next()
        .ok_or_else(|| Error::Config("data has no training examples".into()))?;
    let mut model = ModelConfig::new(input_dim, num_classes, config.learner.method.architecture());
    model.encoder_dims = config.model.encoder_dims.clone();
    model.nm_hidden_dim = config.model.nm_hidden_dim;
    model.freeze_lower_encoder = config.model.freeze_lower_encoder;
    if let Some(c) = config.candidates {
        model.loss = LossMode::CandidateBce;
        model.candidate_dim = c.candidate_dim;
    }
    model.validate()?;
    Ok(model)
}

/// JSON with every finite float written as `d.ddddddddddde±x`.
pub fn to_json_line<T: Serialize>(value: &T) -> String {
    struct Precise;
    impl serde_json::ser::Formatter for Precise {
        fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()> {
            write!(writer, "{value:.11e}")
        }
        fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> std::io::Result<()> {
            self.write_f64(writer, f64::from(value))
        }
    }
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, Precise);
    value.serialize(&mut ser).expect("in-memory serialization");
    String::from_utf8(out).expect("JSON is UTF-8")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub stddev: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let stddev = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, stddev }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderSummary {
    pub order: Vec<usize>,
    pub macro_accuracy: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: String,
    pub seeds: Vec<u64>,
    pub runs: usize,
    /// Over every (order, seed) run.
    pub macro_accuracy: MeanStd,
    pub task_accuracy: Vec<MeanStd>,
    pub per_order: Vec<OrderSummary>,
}

/// Result of one (order, seed) run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub order: Vec<usize>,
    pub seed: u64,
    pub records: Vec<MetricsRecord>,
}

impl RunOutcome {
    pub fn final_record(&self) -> &MetricsRecord {
        self.records.last().expect("every run ends with a final record")
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub debug_traces: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub out_dir: PathBuf,
    pub runs: Vec<RunOutcome>,
    pub summary: Summary,
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn jsonl<T: Serialize>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|i| to_json_line(&i) + "\n").collect()
}

/// Checks a finished run against the memory and schedule bookkeeping of
/// the episode traces.
fn check_run(learner: &LearnerConfig, trained: &Trained) -> Result<()> {
    let log = &trained.log;
    if learner.method.is_meta() {
        let memory = trained.memory.as_ref().expect("meta-learners keep memory");
        let offered: usize = log
            .episodes
            .iter()
            .map(|e| {
                e.support_size
                    + match e.query_source {
                        Some(QuerySource::Stream) => e.query_size,
                        _ => 0,
                    }
            })
            .sum();
        if memory.offered() != offered {
            return Err(Error::Invariant(format!(
                "memory was offered {} examples, episode traces account for {offered}",
                memory.offered()
            )));
        }
        if learner.p_write == 1.0 && memory.len() != offered {
            return Err(Error::Invariant(format!(
                "p_write = 1 but memory holds {} of {offered} offered examples",
                memory.len()
            )));
        }
        let replays = log
            .episodes
            .iter()
            .filter(|e| e.query_source == Some(QuerySource::Memory))
            .count();
        let expected = if learner.no_replay {
            0
        } else {
            log.episodes.len() / learner.schedule.replay_frequency() - log.skipped_replays
        };
        if replays != expected {
            return Err(Error::Invariant(format!(
                "{replays} memory-query episodes, schedule implies {expected}"
            )));
        }
    }
    Ok(())
}

fn record(
    learner: &LearnerConfig,
    seed: u64,
    order: &[usize],
    trained: &Trained,
    event: &str,
    after_task: Option<usize>,
    task_accuracy: Vec<f64>,
) -> Result<MetricsRecord> {
    Ok(MetricsRecord {
        method: learner.method.name().to_string(),
        seed,
        order: order.to_vec(),
        event: event.to_string(),
        after_task,
        macro_accuracy: crate::diagnostics::macro_accuracy(&task_accuracy)?,
        task_accuracy,
        no_replay: learner.no_replay,
        no_meta_test_finetune: learner.no_meta_test_finetune,
        replay_rate: learner.schedule.replay_rate,
        p_write: learner.p_write,
        memory_size: trained.memory.as_ref().map_or(0, |m| m.len()),
        replay_updates: trained.log.replay_updates,
        skipped_replays: trained.log.skipped_replays,
        violations: None,
        gate: None,
    })
}

#[derive(Serialize)]
struct Timing<'a> {
    method: &'a str,
    order: &'a [usize],
    seed: u64,
    train_seconds: f64,
    eval_seconds: f64,
}

#[derive(Serialize)]
struct Failure<'a> {
    method: &'a str,
    order: &'a [usize],
    seed: u64,
    error: String,
}

struct Ctx<'a> {
    config: &'a RunConfig,
    base_dir: &'a Path,
    out: &'a Path,
    debug_traces: bool,
}

fn run_one(ctx: &Ctx, order: &[usize], k: usize, seed: u64, timing: &mut String) -> Result<RunOutcome> {
    let config = ctx.config;
    let learner = &config.learner;
    let stem = format!("{}_order{k}_seed{seed}", learner.method.name());
    let (tasks, num_classes) = build_tasks(config, ctx.base_dir, seed)?;
    let order = if config.orders.is_empty() {
        (0..tasks.len()).collect::<Vec<_>>()
    } else {
        order.to_vec()
    };
    if order.len() != tasks.len() {
        return Err(Error::Config(format!(
            "order {order:?} does not cover the {} tasks",
            tasks.len()
        )));
    }
    let model = model_config(config, &tasks, num_classes)?;

    let started = Instant::now();
    let mut trained = train(&model, &tasks, &order, learner, seed)?;
    let train_seconds = started.elapsed().as_secs_f64();
    check_run(learner, &trained)?;

    let mut records = Vec::new();
    for b in &trained.log.boundary_evals {
        let mut r = record(
            learner,
            seed,
            &order,
            &trained,
            "task_boundary",
            Some(b.after_task),
            b.task_accuracy.clone(),
        )?;
        r.memory_size = b.memory_size;
        r.replay_updates = b.replay_updates;
        r.skipped_replays = b.skipped_replays;
        records.push(r);
    }
    let started = Instant::now();
    let eval = evaluate_trained(&model, &mut trained, &tasks, learner)?;
    let eval_seconds = started.elapsed().as_secs_f64();
    if !(0.0..=1.0).contains(&eval.macro_accuracy) {
        return Err(Error::Invariant(format!("macro accuracy {}", eval.macro_accuracy)));
    }
    let mut last = record(learner, seed, &order, &trained, "final", None, eval.task_accuracy)?;
    if !trained.log.alignment.is_empty() || learner.method == Method::Agem {
        let mut counts = count_violations(&trained.log.alignment);
        for t in 0..tasks.len() {
            counts.entry(t).or_insert(0);
        }
        last.violations = Some(counts);
    }
    last.gate = eval.gate;
    records.push(last);

    let metrics = ctx.out.join("metrics").join(format!("{stem}.jsonl"));
    write_file(&metrics, jsonl(&records))?;
    timing.push_str(&to_json_line(&Timing {
        method: learner.method.name(),
        order: &order,
        seed,
        train_seconds,
        eval_seconds,
    }));
    timing.push('\n');

    if config.checkpoint {
        let dir = ctx.out.join("checkpoints");
        create_dir(&dir)?;
        save_checkpoint(&dir.join(format!("{stem}.ckpt")), &trained.params, &model)?;
    }
    if ctx.debug_traces {
        let dir = ctx.out.join("traces");
        create_dir(&dir)?;
        write_file(&dir.join(format!("{stem}_episodes.jsonl")), jsonl(&trained.log.episodes))?;
        write_file(&dir.join(format!("{stem}_alignment.jsonl")), jsonl(&trained.log.alignment))?;
        if let Some(memory) = &trained.memory {
            let dump: String = memory.dump_lines().map(|l| l + "\n").collect();
            write_file(&dir.join(format!("{stem}_memory.jsonl")), dump)?;
        }
    }
    Ok(RunOutcome {
        order,
        seed,
        records,
    })
}

pub fn summarize(method: Method, seeds: &[u64], runs: &[RunOutcome]) -> Result<Summary> {
    if runs.is_empty() {
        return Err(Error::input("no runs to summarize"));
    }
    let finals: Vec<&MetricsRecord> = runs.iter().map(RunOutcome::final_record).collect();
    let macros: Vec<f64> = finals.iter().map(|r| r.macro_accuracy).collect();
    let tasks = finals[0].task_accuracy.len();
    let task_accuracy = (0..tasks)
        .map(|t| MeanStd::of(&finals.iter().map(|r| r.task_accuracy[t]).collect::<Vec<_>>()))
        .collect();
    let mut by_order: BTreeMap<Vec<usize>, Vec<f64>> = BTreeMap::new();
    let mut order_seq = Vec::new();
    for r in runs {
        if !by_order.contains_key(&r.order) {
            order_seq.push(r.order.clone());
        }
        by_order
            .entry(r.order.clone())
            .or_default()
            .push(r.final_record().macro_accuracy);
    }
    Ok(Summary {
        method: method.name().to_string(),
        seeds: seeds.to_vec(),
        runs: runs.len(),
        macro_accuracy: MeanStd::of(&macros),
        task_accuracy,
        per_order: order_seq
            .into_iter()
            .map(|o| OrderSummary {
                macro_accuracy: MeanStd::of(&by_order[&o]),
                order: o,
            })
            .collect(),
    })
}

/// Runs every (order, seed) pair of the config at `config_path`.
///
/// On failure an `error.json` describing the failed run is written next to
/// the metrics before the error is returned.
pub fn run_experiment(config_path: &Path, options: &RunOptions) -> Result<ExperimentResult> {
    let text = fs::read_to_string(config_path).map_err(|e| Error::io(config_path, e))?;
    let mut config = RunConfig::from_toml(&text)?;
    if let Some(seed) = options.seed {
        config.seeds = vec![seed];
    }
    let base_dir = config_path.parent().unwrap_or(Path::new("."));
    let out = options
        .out_dir
        .clone()
        .or_else(|| config.out_dir.as_ref().map(|p| base_dir.join(p)))
        .ok_or_else(|| Error::Config("no output directory: set out_dir or pass --out".into()))?;
    create_dir(&out.join("metrics"))?;
    write_file(&out.join("config.toml"), &text)?;

    let ctx = Ctx {
        config: &config,
        base_dir,
        out: &out,
        debug_traces: options.debug_traces,
    };
    let orders = match &config.data {
        DataConfig::Synthetic(s) => config.orders_for(s.num_tasks)?,
        // task count is known only after loading; checked per run
        _ if config.orders.is_empty() => vec![Vec::new()],
        _ => config.orders.clone(),
    };
    let mut timing = String::new();
    let mut runs = Vec::new();
    for (k, order) in orders.iter().enumerate() {
        for &seed in &config.seeds {
            match run_one(&ctx, order, k, seed, &mut timing) {
                Ok(outcome) => runs.push(outcome),
                Err(e) => {
                    let failure = Failure {
                        method: config.learner.method.name(),
                        order,
                        seed,
                        error: e.to_string(),
                    };
                    // the original error matters more than a failed write here
                    let _ = write_file(&out.join("error.json"), to_json_line(&failure) + "\n");
                    let _ = write_file(&out.join("timing.jsonl"), &timing);
                    return Err(e);
                }
            }
        }
    }
    let summary = summarize(config.learner.method, &config.seeds, &runs)?;
    write_file(&out.join("summary.json"), to_json_line(&summary) + "\n")?;
    write_file(&out.join("timing.jsonl"), &timing)?;
    Ok(ExperimentResult {
        out_dir: out,
        runs,
        summary,
    })
}

/// Replay schedule figures plus warnings about degenerate settings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScheduleReport {
    pub replay_interval: usize,
    pub batch_size: usize,
    pub support_batches: usize,
    pub replay_rate: f64,
    pub replay_frequency: usize,
    pub replay_size: usize,
    pub baseline_frequency: usize,
    pub warnings: Vec<String>,
}

pub fn schedule_info(schedule: &ReplaySchedule) -> Result<ScheduleReport> {
    schedule.validate()?;
    let replay_frequency = schedule.replay_frequency();
    let mut warnings = Vec::new();
    if replay_frequency == 1 {
        warnings.push("R_F = 1: every episode replays from memory".to_string());
    }
    let max_rate = 1.0 / schedule.support_batches as f64;
    if schedule.replay_rate >= max_rate - 1e-12 {
        warnings.push(format!(
            "replay rate {} is at or above 1/m = {max_rate}: replay would occur every episode",
            schedule.replay_rate
        ));
    }
    Ok(ScheduleReport {
        replay_interval: schedule.replay_interval,
        batch_size: schedule.batch_size,
        support_batches: schedule.support_batches,
        replay_rate: schedule.replay_rate,
        replay_frequency,
        replay_size: schedule.replay_size(),
        baseline_frequency: schedule.baseline_frequency(),
        warnings,
    })
}

impl std::fmt::Display for ScheduleReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "R_I = {}, b = {}, m = {}, r = {}",
            self.replay_interval, self.batch_size, self.support_batches, self.replay_rate
        )?;
        writeln!(f, "replay frequency R_F:     every {} episodes", self.replay_frequency)?;
        writeln!(f, "replay batch size:        {} examples", self.replay_size)?;
        writeln!(f, "baseline replay interval: every {} steps", self.baseline_frequency)?;
        for w in &self.warnings {
            writeln!(f, "warning: {w}")?;
        }
        Ok(())
    }
}

/// Generates one synthetic suite per seed into `out_dir` as
/// `suite_seed<s>.json`; returns the written paths.
pub fn suite_gen(config: &SuiteConfig, seeds: &[u64], out_dir: &Path) -> Result<Vec<PathBuf>> {
    create_dir(out_dir)?;
    seeds
        .iter()
        .map(|&seed| {
            let suite = make_synthetic_suite(&SuiteConfig {
                seed,
                ..config.clone()
            })?;
            let path = out_dir.join(format!("suite_seed{seed}.json"));
            crate::stream::save_suite(&path, &suite)?;
            Ok(path)
        })
        .collect()
}
