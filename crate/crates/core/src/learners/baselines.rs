use crate::diagnostics::grad_dot;
use crate::error::Result;
use crate::memory::EpisodicMemory;
use crate::model::{init_params, loss_and_grad, trainable_partitions, ModelConfig};
use crate::numerics::{adam_step, GradMap};
use crate::rng::{child_rng, RngStream};
use crate::stream::{build_stream, pooled_epoch, StreamConfig, TaskSpec};

use super::{boundary_eval, LearnerConfig, Method, TrainLog, Trained};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Projection {
    /// `g · g_ref ≥ 0`; the gradient is returned as is.
    Unchanged,
    /// `g − (g·g_ref / g_ref·g_ref) g_ref`.
    Projected,
    /// The reference vanished, so there is nothing to project onto.
    ZeroReference,
}

/// A-GEM: removes from `g` its component against `g_ref` when the two
/// conflict. Both maps are flattened over all keys.
pub fn agem_project(g: &GradMap, g_ref: &GradMap) -> Result<(GradMap, Projection)> {
    let align = grad_dot(g, g_ref)?;
    if align.dot >= 0.0 {
        return Ok((g.clone(), Projection::Unchanged));
    }
    let ref_sq = align.norm_b * align.norm_b;
    if ref_sq == 0.0 {
        return Ok((g.clone(), Projection::ZeroReference));
    }
    let mut out = g.clone();
    out.add_scaled(g_ref, -align.dot / ref_sq);
    Ok((out, Projection::Projected))
}

/// SEQ, REPLAY and A-GEM: one Adam step per stream batch, every batch
/// offered to memory after its step.
pub(super) fn train_sequential(
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
    let trainable = trainable_partitions(model);
    let every = schedule.baseline_frequency();
    let size = schedule.replay_size();
    let mut log = TrainLog::default();

    for (step, batch) in (1..).zip(stream) {
        let due = step % every == 0;
        let (_, mut g) = loss_and_grad(&params, model, batch.examples(), &trainable)?;
        if learner.method == Method::Agem && due {
            if memory.is_empty() {
                log.skipped_replays += 1;
            } else {
                let reference = memory.sample(size)?;
                let (_, g_ref) = loss_and_grad(&params, model, &reference, &trainable)?;
                log.alignment
                    .push(grad_dot(&g, &g_ref)?.at(step, batch.diagnostic_task()));
                let (projected, outcome) = agem_project(&g, &g_ref)?;
                if outcome == Projection::ZeroReference {
                    log.zero_references += 1;
                }
                g = projected;
                log.replay_updates += 1;
            }
        }
        adam_step(&mut params, &g, learner.outer_lr)?;
        log.updates += 1;
        memory.write(&batch);

        if learner.method == Method::Replay && due {
            if memory.is_empty() {
                log.skipped_replays += 1;
            } else {
                let replay = memory.sample(size)?;
                let (_, g) = loss_and_grad(&params, model, &replay, &trainable)?;
                adam_step(&mut params, &g, learner.outer_lr)?;
                log.updates += 1;
                log.replay_updates += 1;
            }
        }
        if learner.eval_at_boundaries && batch.ends_task() {
            let eval = boundary_eval(
                model,
                &params,
                tasks,
                batch.diagnostic_task(),
                &memory,
                &log,
                log.skipped_replays,
            )?;
            log.boundary_evals.push(eval);
        }
    }
    Ok(Trained {
        params,
        memory: Some(memory),
        log,
    })
}

/// Multi-task training on i.i.d. batches from the pooled tasks.
pub(super) fn train_mtl(
    model: &ModelConfig,
    tasks: &[TaskSpec],
    learner: &LearnerConfig,
    seed: u64,
) -> Result<Trained> {
    let mut params = init_params(model, &mut child_rng(seed, RngStream::Init))?;
    let trainable = trainable_partitions(model);
    let mut log = TrainLog::default();
    for epoch in 0..learner.epochs {
        for batch in pooled_epoch(tasks, learner.schedule.batch_size, seed, epoch) {
            let (_, g) = loss_and_grad(&params, model, &batch, &trainable)?;
            adam_step(&mut params, &g, learner.outer_lr)?;
            log.updates += 1;
        }
    }
    Ok(Trained {
        params,
        memory: None,
        log,
    })
}
