//! Exit criteria of the crate. Each test prints one `criterion N: PASS` or
//! `criterion N: FAIL` line to stderr (uncaptured) before asserting.

mod common;

use std::io::Write;
use std::time::{Duration, Instant};

use common::*;
use lifelong::episodes::{
    baseline_frequency, replay_frequency, replay_size, EpisodeGenerator, QuerySource, ReplaySchedule,
};
use lifelong::experiment::{run_experiment, RunOptions};
use lifelong::learners::{agem_project, inner_adapt, meta_gradient, Method, Projection};
use lifelong::memory::EpisodicMemory;
use lifelong::numerics::{GradMap, Tensor};
use lifelong::stream::{build_stream, Example, StreamConfig, SuiteKind, TaskSpec};
use lifelong::verify::{run_grad_check_suite, GradCheckConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: u32, ok: bool, detail: &str) {
    let status = if ok { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n}: {status} ({detail})");
    assert!(ok, "criterion {n} failed: {detail}");
}

fn toy_tasks(sizes: &[usize]) -> Vec<TaskSpec> {
    sizes
        .iter()
        .enumerate()
        .map(|(id, &n)| TaskSpec {
            id,
            name: format!("t{id}"),
            train: (0..n).map(|i| Example::new(vec![i as f64], id)).collect(),
            test: vec![Example::new(vec![0.0], id)],
        })
        .collect()
}

#[test]
fn criterion_1_schedule_arithmetic() {
    let start = Instant::now();
    let mut ok = replay_frequency(9600, 16, 5).unwrap() == 101
        && baseline_frequency(9600, 16).unwrap() == 600
        && replay_size(0.01, 9600) == 96
        && replay_frequency(1600, 4, 5).unwrap() == 67;

    // 3-task stream driven the way the meta-learners drive it
    let tasks = toy_tasks(&[700, 555, 910]);
    let schedule = ReplaySchedule::new(16, 5, 320, 0.05).unwrap();
    let stream = build_stream(&tasks, &StreamConfig::in_order(3, 16, 9)).unwrap();
    let mut memory = EpisodicMemory::new(1.0, 9).unwrap();
    let mut generator = EpisodeGenerator::new(stream, schedule, true).unwrap();
    let (mut episodes, mut from_memory) = (0, 0);
    while let Some(ep) = generator.next_episode(&mut memory).unwrap() {
        episodes += 1;
        from_memory += usize::from(ep.query_source() == Some(QuerySource::Memory));
        for b in ep.stream_batches() {
            memory.write(b);
        }
    }
    let r_f = schedule.replay_frequency();
    ok &= from_memory == episodes / r_f && generator.skipped_replays() == 0;
    let elapsed = start.elapsed();
    ok &= elapsed < Duration::from_secs(1);
    report(
        1,
        ok,
        &format!(
            "R_F(9600,16,5)=101, 600, 96, R_F(1600,4,5)=67; {from_memory} memory queries over {episodes} episodes with R_F={r_f}; {elapsed:.2?}"
        ),
    );
}

#[test]
fn criterion_2_gradient_correctness() {
    let start = Instant::now();
    let report_ = run_grad_check_suite(&GradCheckConfig::default()).unwrap();
    let elapsed = start.elapsed();
    let names: Vec<&str> = report_.checks.iter().map(|c| c.name.as_str()).collect();
    for layer in ["linear", "relu", "sigmoid", "hadamard", "softmax_cross_entropy", "sigmoid_bce"] {
        assert!(names.contains(&layer), "{layer} not checked");
    }
    let ok = report_.passed()
        && report_.checks.iter().all(|c| c.trials == 100)
        && report_.max_relative_error() < 1e-5
        && elapsed < Duration::from_secs(30);
    report(
        2,
        ok,
        &format!(
            "{} checks x 100 trials, max relative error {:.2e}, {elapsed:.2?}",
            report_.checks.len(),
            report_.max_relative_error()
        ),
    );
}

/// Residual of the first-order meta-gradient against its first-order
/// Taylor expansion `ḡ_q − α H̄_q Σ_j ḡ_j`, all terms taken at `θ`.
fn taylor_residual(theta: &[f64], support: &[Quad], query: &Quad, alpha: f64) -> f64 {
    let params = quad_params(theta.to_vec());
    let refs: Vec<&Quad> = support.iter().collect();
    let adapted = inner_adapt(&QuadObjective, &params, &head_only(), &refs, alpha).unwrap();
    let g = meta_gradient(&QuadObjective, &adapted, &head_only(), query).unwrap();
    let g_fomaml = g.grads.get("w").unwrap().data().to_vec();

    let mut sum = vec![0.0; theta.len()];
    for s in support {
        for (acc, v) in sum.iter_mut().zip(s.grad(theta)) {
            *acc += v;
        }
    }
    let hs = matvec(&query.a, &sum);
    let predicted: Vec<f64> = query
        .grad(theta)
        .iter()
        .zip(&hs)
        .map(|(g, h)| g - alpha * h)
        .collect();
    let diff: Vec<f64> = g_fomaml.iter().zip(&predicted).map(|(a, b)| a - b).collect();
    norm(&diff)
}

#[test]
fn criterion_3_fomaml_taylor_property() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ratios = Vec::new();
    for _ in 0..20 {
        let dim = rng.random_range(2..6);
        let m = rng.random_range(2..6);
        let support: Vec<Quad> = (0..m).map(|_| Quad::random(&mut rng, dim)).collect();
        let query = Quad::random(&mut rng, dim);
        let theta: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let alpha = 0.01;
        let r1 = taylor_residual(&theta, &support, &query, alpha);
        let r2 = taylor_residual(&theta, &support, &query, alpha / 2.0);
        ratios.push(r1 / r2);
    }
    let elapsed = start.elapsed();
    let (lo, hi) = ratios
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &r| (lo.min(r), hi.max(r)));
    let ok = ratios.iter().all(|r| (3.5..=4.5).contains(r)) && elapsed < Duration::from_secs(10);
    report(3, ok, &format!("20 instances, shrink factor in [{lo:.3}, {hi:.3}], {elapsed:.2?}"));
}

fn random_grads(rng: &mut impl Rng) -> (GradMap, GradMap) {
    let mut g = GradMap::new();
    let mut r = GradMap::new();
    for (k, n) in [("a.weight", 6), ("a.bias", 3), ("b", 1)] {
        let scale = 10f64.powi(rng.random_range(-3..3));
        g.insert(k, Tensor::vector((0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect()));
        r.insert(k, Tensor::vector((0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect()));
    }
    (g, r)
}

#[test]
fn criterion_4_agem_algebra() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut fired, mut kept) = (0, 0);
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for _ in 0..1000 {
        let (g, r) = random_grads(&mut rng);
        let (out, p) = agem_project(&g, &r).unwrap();
        match p {
            Projection::Projected => {
                fired += 1;
                let d = out.dot(&r);
                worst = worst.max(d.abs());
                ok &= (-1e-9..=1e-9).contains(&d);
            }
            Projection::Unchanged => {
                kept += 1;
                ok &= g.dot(&r) >= 0.0 && out == g;
            }
            Projection::ZeroReference => ok = false,
        }
        // g = −g_ref projects to the zero vector
        let mut neg = r.clone();
        neg.add_scaled(&r, -2.0);
        let (z, p) = agem_project(&neg, &r).unwrap();
        ok &= p == Projection::Projected && z.flatten().iter().all(|v| v.abs() <= 1e-12 * r.norm_sq().sqrt().max(1.0));
    }
    ok &= fired > 0 && kept > 0;
    report(
        4,
        ok,
        &format!("1000 trials: {fired} projected (max |dot| {worst:.1e}), {kept} unchanged, g = -g_ref gives 0"),
    );
}

#[test]
fn criterion_5_forgetting_ordering() {
    let start = Instant::now();
    let acc = |m: Method| mean_points(SuiteKind::Balanced, &learner(m));
    let seq = acc(Method::Seq);
    let replay = acc(Method::Replay);
    let oml = acc(Method::OmlEr);
    let anml = acc(Method::AnmlEr);
    let maml = acc(Method::MamlEr);
    let mtl = acc(Method::Mtl);
    let elapsed = start.elapsed();
    let ok = seq + 10.0 <= replay
        && replay + 2.0 <= oml
        && (oml - anml).abs() <= 2.0
        && (oml - maml).abs() <= 2.0
        && [seq, replay, oml, anml, maml].iter().all(|&a| a <= mtl + 1.0)
        && elapsed < Duration::from_secs(600);
    report(
        5,
        ok,
        &format!(
            "SEQ {seq:.2}, REPLAY {replay:.2}, OML_ER {oml:.2}, ANML_ER {anml:.2}, MAML_ER {maml:.2}, MTL {mtl:.2}; {elapsed:.1?}"
        ),
    );
}

#[test]
fn criterion_6_ablations() {
    let base = learner(Method::OmlEr);
    let oml = mean_points(SuiteKind::Balanced, &base);
    let no_replay = mean_points(SuiteKind::Balanced, &{
        let mut l = base.clone();
        l.no_replay = true;
        l
    });
    let no_ft = mean_points(SuiteKind::Balanced, &{
        let mut l = base.clone();
        l.no_meta_test_finetune = true;
        l
    });
    let seq = mean_points(SuiteKind::Balanced, &learner(Method::Seq));
    let ok = oml - no_replay >= 10.0 && no_replay > seq && (oml - no_ft).abs() <= 2.0;
    report(
        6,
        ok,
        &format!(
            "OML_ER {oml:.2}, no_replay {no_replay:.2} (drop {:.2}, need >= 10), SEQ {seq:.2}, no_meta_test_finetune {no_ft:.2} (change {:.2})",
            oml - no_replay,
            oml - no_ft
        ),
    );
}

#[test]
fn criterion_7_replay_rate_trend() {
    let at = |kind, rate: f64| {
        let mut l = learner(Method::OmlEr);
        l.schedule.replay_rate = rate;
        mean_points(kind, &l)
    };
    let imb1 = at(SuiteKind::Imbalanced, 0.01);
    let imb4 = at(SuiteKind::Imbalanced, 0.04);
    let bal1 = at(SuiteKind::Balanced, 0.01);
    let bal4 = at(SuiteKind::Balanced, 0.04);
    let ok = imb4 - imb1 >= 2.0 && (bal4 - bal1).abs() <= 2.0;
    report(
        7,
        ok,
        &format!(
            "imbalanced r=4% {imb4:.2} vs r=1% {imb1:.2} (gain {:.2}, need >= 2); balanced {bal4:.2} vs {bal1:.2} (gap {:.2})",
            imb4 - imb1,
            bal4 - bal1
        ),
    );
}

#[test]
fn criterion_8_memory_capacity() {
    let full = learner(Method::OmlEr);
    let mut sparse = full.clone();
    sparse.p_write = 0.05;
    let mut total_full = 0.0;
    let mut total_sparse = 0.0;
    let mut sizes_ok = true;
    let mut sizes = Vec::new();
    for &s in &SEEDS {
        let tasks = suite(SuiteKind::Balanced, s);
        total_full += run(&tasks, &full, s).1.macro_accuracy;
        let (trained, eval) = run(&tasks, &sparse, s);
        total_sparse += eval.macro_accuracy;
        let memory = trained.memory.unwrap();
        let n = memory.offered() as f64;
        let (mean, sd) = (n * 0.05, (n * 0.05 * 0.95).sqrt());
        let size = memory.len() as f64;
        sizes_ok &= (size - mean).abs() <= 3.0 * sd;
        sizes.push(memory.len());
    }
    let k = SEEDS.len() as f64;
    let (a, b) = (100.0 * total_full / k, 100.0 * total_sparse / k);
    let ok = (a - b).abs() <= 2.0 && sizes_ok;
    report(
        8,
        ok,
        &format!("p_write=1 {a:.2}, p_write=0.05 {b:.2}; memory sizes {sizes:?} vs 500 +- 3 sd (65.4)"),
    );
}

const RUN_CONFIG: &str = r#"
seeds = [3, 8]
orders = [[0, 1, 2], [2, 0, 1]]

[model]
encoder_dims = [12]
nm_hidden_dim = 8

[data]
source = "synthetic"
kind = "imbalanced"
num_tasks = 3
classes_per_task = 2
examples_per_class = 60
test_per_class = 20
input_dim = 8

[learner]
method = "METHOD"
inner_lr = 0.01
outer_lr = 0.003
alignment_every = 1
eval_at_boundaries = true
schedule = { batch_size = 8, support_batches = 3, replay_interval = 64, replay_rate = 0.1 }
"#;

fn read_tree(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["metrics", "traces"] {
        let Ok(entries) = std::fs::read_dir(dir.join(sub)) else { continue };
        for e in entries {
            let p = e.unwrap().path();
            out.push((p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()));
        }
    }
    out.push(("summary.json".into(), std::fs::read(dir.join("summary.json")).unwrap()));
    out.sort();
    out
}

#[test]
fn criterion_9_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let mut ok = true;
    let mut files = 0;
    for method in ["OML_ER", "ANML_ER", "AGEM", "REPLAY", "MTL"] {
        let mut text = RUN_CONFIG.replace("METHOD", method);
        if method == "MTL" {
            text = text.replace("alignment_every = 1\n", "epochs = 2\n");
        }
        let cfg = tmp.path().join(format!("{method}.toml"));
        std::fs::write(&cfg, &text).unwrap();
        let mut trees = Vec::new();
        for rep in 0..2 {
            let out = tmp.path().join(format!("{method}_{rep}"));
            let options = RunOptions {
                out_dir: Some(out.clone()),
                seed: None,
                debug_traces: true,
            };
            run_experiment(&cfg, &options).unwrap();
            ok &= std::fs::read(out.join("config.toml")).unwrap() == text.as_bytes();
            trees.push(read_tree(&out));
        }
        files += trees[0].len();
        ok &= trees[0] == trees[1];
    }
    report(9, ok, &format!("5 methods x 2 orders x 2 seeds run twice; {files} files byte-identical"));
}

/// Replays the episode rules on batch sizes alone and returns
/// (episodes, memory queries, examples offered to memory).
fn count_episodes(batch_sizes: &[usize], m: usize, r_f: usize) -> (usize, usize, usize) {
    let (mut pos, mut index, mut replays, mut offered) = (0, 0, 0, 0);
    while pos < batch_sizes.len() {
        index += 1;
        let support_end = (pos + m).min(batch_sizes.len());
        let support: usize = batch_sizes[pos..support_end].iter().sum();
        pos = support_end;
        // memory is non-empty from the second episode on (p_write = 1)
        if index % r_f == 0 && index > 1 {
            replays += 1;
        } else if pos < batch_sizes.len() {
            offered += batch_sizes[pos];
            pos += 1;
        }
        offered += support;
    }
    (index, replays, offered)
}

#[test]
fn criterion_10_memory_protocol() {
    let mut ok = true;
    let mut details = Vec::new();
    for (seed, kind) in [(0, SuiteKind::Balanced), (1, SuiteKind::Imbalanced)] {
        let tasks = suite(kind, seed);
        let l = learner(Method::OmlEr);
        let (trained, _) = run(&tasks, &l, seed);
        let mut sizes = Vec::new();
        for t in &tasks {
            let mut left = t.train.len();
            while left > 0 {
                sizes.push(left.min(16));
                left -= left.min(16);
            }
        }
        let (episodes, replays, offered) = count_episodes(&sizes, 5, l.schedule.replay_frequency());
        let memory = trained.memory.as_ref().unwrap();
        let from_traces: usize = trained
            .log
            .episodes
            .iter()
            .map(|e| e.support_size + if e.query_source == Some(QuerySource::Stream) { e.query_size } else { 0 })
            .sum();
        ok &= memory.len() == offered
            && from_traces == offered
            && trained.log.episodes.len() == episodes
            && trained.log.replay_updates == replays;
        details.push(format!("{kind:?}: |M| = {} vs counted {offered}, {episodes} episodes, {replays} replays", memory.len()));
    }
    report(10, ok, &details.join("; "));
}
