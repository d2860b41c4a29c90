use crate::diagnostics::grad_dot;
use crate::episodes::{meta_test_episode, EpisodeGenerator, Query, QuerySource};
use crate::error::{Error, Result};
use crate::memory::EpisodicMemory;
use crate::model::{evaluate, init_params, partition_for_inner_loop, partition_for_outer_loop, ModelConfig};
use crate::numerics::{adam_step, sgd_step, GradMap, Objective, ParameterSet, PartitionSet};
use crate::rng::{child_rng, RngStream};
use crate::stream::{build_stream, Example, StreamConfig, TaskSpec};

use super::{boundary_eval, finish, Evaluation, GateCollector, LearnerConfig, MetaTestMode, TrainLog, Trained};

/// One SGD step per support batch, in order, on the `inner` partitions of a
/// copy of `params`. Everything else in the copy stays bit-identical.
pub fn inner_adapt<O: Objective + ?Sized>(
    objective: &O,
    params: &ParameterSet,
    inner: &PartitionSet,
    support: &[&O::Batch],
    alpha: f64,
) -> Result<ParameterSet> {
    if support.is_empty() {
        return Err(Error::input("inner loop needs at least one support batch"));
    }
    let mut adapted = params.clone();
    for batch in support {
        let (_, grads) = objective.loss_and_grad(&adapted, batch, inner)?;
        sgd_step(&mut adapted, &grads, alpha)?;
    }
    Ok(adapted)
}

/// Query gradient at the adapted parameters, to be applied at the
/// original ones.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaGradient {
    pub grads: GradMap,
    pub query_loss: f64,
}

/// First-order meta-gradient: the inner SGD steps are not differentiated
/// through.
pub fn meta_gradient<O: Objective + ?Sized>(
    objective: &O,
    adapted: &ParameterSet,
    outer: &PartitionSet,
    query: &O::Batch,
) -> Result<MetaGradient> {
    let (query_loss, grads) = objective.loss_and_grad(adapted, query, outer)?;
    Ok(MetaGradient { grads, query_loss })
}

/// Computes the meta-gradient at `adapted` and applies it to `params` with
/// Adam. `adapted` must come from [`inner_adapt`] on `params`.
pub fn meta_outer_step<O: Objective + ?Sized>(
    objective: &O,
    params: &mut ParameterSet,
    adapted: &ParameterSet,
    outer: &PartitionSet,
    query: &O::Batch,
    beta: f64,
) -> Result<MetaGradient> {
    let meta = meta_gradient(objective, adapted, outer, query)?;
    adam_step(params, &meta.grads, beta)?;
    Ok(meta)
}

pub(super) fn run_meta_training(
    model: &ModelConfig,
    tasks: &[TaskSpec],
    order: &[usize],
    learner: &LearnerConfig,
    seed: u64,
) -> Result<Trained> {
    let mut params = init_params(model, &mut child_rng(seed, RngStream::Init))?;
    let schedule = learner.schedule;
    let stream = build_stream(
        tasks,
        &StreamConfig {
            order: order.to_vec(),
            batch_size: schedule.batch_size,
            seed,
        },
    )?;
    let mut memory = EpisodicMemory::new(learner.p_write, seed)?;
    let mut episodes = EpisodeGenerator::new(stream, schedule, !learner.no_replay)?;
    let inner = partition_for_inner_loop(model);
    let outer = partition_for_outer_loop(model);
    let mut log = TrainLog::default();

    while let Some(ep) = episodes.next_episode(&mut memory)? {
        if let Query::Stream(q) = &ep.query {
            memory.write(q);
        }
        for s in &ep.support {
            memory.write(s);
        }
        if let Some(query) = ep.query_examples() {
            let support: Vec<&[Example]> = ep.support_examples().collect();
            let from_memory = ep.query_source() == Some(QuerySource::Memory);
            if from_memory {
                log.replay_updates += 1;
                if learner.alignment_every > 0 && log.replay_updates % learner.alignment_every == 0 {
                    let task = ep.support.last().expect("non-empty support").diagnostic_task();
                    let sample = support_query_alignment(model, &params, &outer, &support, query)?;
                    log.alignment.push(sample.at(ep.index, task));
                }
            }
            let adapted = inner_adapt(model, &params, &inner, &support, learner.inner_lr)?;
            meta_outer_step(model, &mut params, &adapted, &outer, query, learner.outer_lr)?;
            log.updates += 1;
        }
        if learner.eval_at_boundaries {
            for b in ep.stream_batches().filter(|b| b.ends_task()) {
                let skipped = episodes.skipped_replays();
                let eval = boundary_eval(model, &params, tasks, b.diagnostic_task(), &memory, &log, skipped)?;
                log.boundary_evals.push(eval);
            }
        }
        log.episodes.push(ep.trace());
    }
    log.skipped_replays = episodes.skipped_replays();
    Ok(Trained {
        params,
        memory: Some(memory),
        log,
    })
}

/// Alignment between the summed support gradients and the memory query
/// gradient, all at `params`.
fn support_query_alignment(
    model: &ModelConfig,
    params: &ParameterSet,
    outer: &PartitionSet,
    support: &[&[Example]],
    query: &[Example],
) -> Result<crate::diagnostics::AlignmentSample> {
    let mut sum = GradMap::new();
    for batch in support {
        let (_, g) = model.loss_and_grad(params, batch, outer)?;
        sum.add_scaled(&g, 1.0);
    }
    let (_, q) = model.loss_and_grad(params, query, outer)?;
    grad_dot(&sum, &q)
}

/// Meta-testing: each episode adapts a fresh copy of `params` on a support
/// set drawn from memory and is scored on its query. `params` is never
/// modified.
pub(super) fn run_meta_testing(
    model: &ModelConfig,
    params: &ParameterSet,
    memory: &mut EpisodicMemory,
    tasks: &[TaskSpec],
    learner: &LearnerConfig,
) -> Result<Evaluation> {
    let fine_tune = !learner.no_meta_test_finetune;
    let m = learner.schedule.support_batches;
    let b = learner.schedule.batch_size;
    let inner = partition_for_inner_loop(model);
    let adapt = |memory: &mut EpisodicMemory, query: &[Example]| -> Result<Option<ParameterSet>> {
        let episode = meta_test_episode(memory, query, m, b, fine_tune)?;
        if episode.support.is_empty() {
            return Ok(None);
        }
        let support: Vec<&[Example]> = episode.support.iter().map(Vec::as_slice).collect();
        inner_adapt(model, params, &inner, &support, learner.inner_lr).map(Some)
    };

    let mut gates = GateCollector::default();
    let mut task_accuracy = Vec::with_capacity(tasks.len());
    match learner.meta_test {
        MetaTestMode::PerTask => {
            for task in tasks {
                let adapted = adapt(memory, &task.test)?;
                let (acc, g) = evaluate(adapted.as_ref().unwrap_or(params), model, &task.test)?;
                gates.add(g);
                task_accuracy.push(acc);
            }
        }
        MetaTestMode::Combined => {
            let combined: Vec<Example> = tasks.iter().flat_map(|t| t.test.iter().cloned()).collect();
            let adapted = adapt(memory, &combined)?;
            let at = adapted.as_ref().unwrap_or(params);
            for task in tasks {
                let (acc, g) = evaluate(at, model, &task.test)?;
                gates.add(g);
                task_accuracy.push(acc);
            }
        }
    }
    finish(task_accuracy, gates)
}
