use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lifelong::episodes::ReplaySchedule;
use lifelong::experiment::{run_experiment, schedule_info, suite_gen, to_json_line, RunConfig, RunOptions};
use lifelong::stream::SuiteConfig;
use lifelong::verify::{run_grad_check_suite, GradCheckConfig};
use lifelong::Error;

#[derive(Parser)]
#[command(name = "lifelong", version, about = "Continual learning experiments with sparse replay")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Run only this seed, overriding the config's seed list.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory, overriding the config's out_dir.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Also dump episode, alignment and memory traces.
    #[arg(long, global = true)]
    debug_traces: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every (order, seed) pair of a run config.
    Run,
    /// Print the replay schedule implied by R_I, b, m and r.
    ScheduleInfo(ScheduleArgs),
    /// Check every backward pass against finite differences.
    GradCheck(GradCheckArgs),
    /// Write synthetic suites described by a suite config to disk.
    SuiteGen,
}

#[derive(Args)]
struct ScheduleArgs {
    /// Examples between replays, R_I.
    #[arg(long)]
    replay_interval: Option<usize>,
    /// Mini-batch size, b.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Support batches per episode, m.
    #[arg(long)]
    support_batches: Option<usize>,
    /// Fraction of R_I replayed, r.
    #[arg(long)]
    replay_rate: Option<f64>,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
}

fn require_config(common: &Common) -> Result<&Path, Error> {
    common
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("--config PATH is required".into()))
}

fn read(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn run(common: &Common) -> Result<bool, Error> {
    let result = run_experiment(
        require_config(common)?,
        &RunOptions {
            out_dir: common.out.clone(),
            seed: common.seed,
            debug_traces: common.debug_traces,
        },
    )?;
    let s = &result.summary;
    println!(
        "{}: macro accuracy {:.2} ± {:.2} over {} runs",
        s.method,
        100.0 * s.macro_accuracy.mean,
        100.0 * s.macro_accuracy.stddev,
        s.runs
    );
    println!("artifacts in {}", result.out_dir.display());
    Ok(true)
}

fn schedule(common: &Common, args: &ScheduleArgs) -> Result<bool, Error> {
    let mut sched = match &common.config {
        Some(path) => RunConfig::from_toml(&read(path)?)?.learner.schedule,
        None => ReplaySchedule {
            batch_size: 0,
            support_batches: 0,
            replay_interval: 0,
            replay_rate: f64::NAN,
        },
    };
    if let Some(v) = args.replay_interval {
        sched.replay_interval = v;
    }
    if let Some(v) = args.batch_size {
        sched.batch_size = v;
    }
    if let Some(v) = args.support_batches {
        sched.support_batches = v;
    }
    if let Some(v) = args.replay_rate {
        sched.replay_rate = v;
    }
    if sched.replay_rate.is_nan() {
        return Err(Error::Config(
            "give --config or all of --replay-interval, --batch-size, --support-batches, --replay-rate".into(),
        ));
    }
    print!("{}", schedule_info(&sched)?);
    Ok(true)
}

fn grad_check(common: &Common, args: &GradCheckArgs) -> Result<bool, Error> {
    let report = run_grad_check_suite(&GradCheckConfig {
        trials: args.trials,
        eps: args.eps,
        tolerance: args.tolerance,
        seed: common.seed.unwrap_or(0),
    })?;
    for c in &report.checks {
        let status = if c.passed { "ok" } else { "FAIL" };
        println!("{:<28} {:>4} trials  max rel err {:.3e}  {status}", c.name, c.trials, c.max_relative_error);
    }
    if let Some(dir) = &common.out {
        fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.clone(), source })?;
        let path = dir.join("grad_check.json");
        fs::write(&path, to_json_line(&report) + "\n").map_err(|source| Error::Io { path, source })?;
    }
    Ok(report.passed())
}

fn gen_suites(common: &Common) -> Result<bool, Error> {
    let path = require_config(common)?;
    let config: SuiteConfig = toml::from_str(&read(path)?).map_err(|e| Error::Config(e.to_string()))?;
    let out = common
        .out
        .as_deref()
        .ok_or_else(|| Error::Config("--out DIR is required".into()))?;
    let seeds = [common.seed.unwrap_or(config.seed)];
    for written in suite_gen(&config, &seeds, out)? {
        println!("{}", written.display());
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run => run(&cli.common),
        Command::ScheduleInfo(args) => schedule(&cli.common, args),
        Command::GradCheck(args) => grad_check(&cli.common, args),
        Command::SuiteGen => gen_suites(&cli.common),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
