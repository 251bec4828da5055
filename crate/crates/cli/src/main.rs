use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dgm_core::checkpoint::Checkpoint;
use dgm_core::config::RunConfig;
use dgm_core::memory::Fault;
use dgm_core::report::report;
use dgm_core::selftest::{run_selftest, SelftestOptions};
use dgm_core::trainer::{build_stream, evaluate, joint_train_baseline, run_stream};
use dgm_core::DgmError;

#[derive(Parser)]
#[command(name = "dgm", version, about = "Dynamic generative memory experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a task stream and write a run directory.
    Run(RunArgs),
    /// Evaluate a checkpoint on the test data of the tasks it has learned.
    Eval(EvalArgs),
    /// Summarize a run directory and write plot-ready CSVs.
    Report(ReportArgs),
    /// Run the invariant suites.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set replay.enabled=false`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, DgmError> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        match &self.config {
            Some(path) => RunConfig::load(path, &overrides),
            None => RunConfig::from_toml_str("", &overrides),
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Run directory for artifacts.
    #[arg(long)]
    out: PathBuf,
    /// Train all classes at once instead of incrementally.
    #[arg(long)]
    joint: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file written by `run`.
    checkpoint: PathBuf,
    /// Write per-task accuracies as CSV into this directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory.
    dir: PathBuf,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random trials per network in the gradient check.
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Fault to inject, for checking that the suites catch it.
    #[arg(long, value_parser = ["gate-bypass"])]
    inject: Option<String>,
}

enum Failure {
    Usage(String),
    Run(String),
}

impl From<DgmError> for Failure {
    fn from(e: DgmError) -> Self {
        match e {
            DgmError::Config { .. } => Failure::Usage(e.to_string()),
            e => Failure::Run(e.to_string()),
        }
    }
}

fn cmd_run(args: &RunArgs) -> Result<(), Failure> {
    let cfg = args.config.load()?;
    let loaded = build_stream(&cfg)?;
    log::info!(
        "data: {} ({} tasks, dim {})",
        loaded.source,
        loaded.stream.len(),
        loaded.stream.dim
    );
    let outcome = if args.joint {
        joint_train_baseline(cfg, &loaded, Some(&args.out))?
    } else {
        run_stream(cfg, &loaded, Some(&args.out))?
    };
    for e in &outcome.ledger.evaluations {
        println!("A_{} = {:.4}", e.task, e.accuracy);
    }
    println!("artifacts in {}", args.out.display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<(), Failure> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let cfg = RunConfig::from_toml_str(&ck.config_toml, &[])?;
    let loaded = build_stream(&cfg)?;
    let stream = &loaded.stream;
    let t = ck.task.min(stream.len());
    if t == 0 {
        return Err(Failure::Run("checkpoint has not finished any task".into()));
    }
    let test = stream.test_up_to(t)?;
    let e = evaluate(&ck.model.disc, &test, stream.seen_classes(t).len(), t)?;
    println!(
        "checkpoint after task {}: A_{t} = {:.4} ({}/{})",
        ck.task, e.accuracy, e.correct, e.total
    );
    let mut rows = Vec::new();
    for j in 1..=t {
        let classes = &stream.task(j)?.classes;
        let acc = e.subset_accuracy(classes).unwrap_or(0.0);
        println!("  task {j} classes {classes:?}: {acc:.4}");
        rows.push((j, acc));
    }
    if let Some(dir) = &args.out {
        write_eval_csv(dir, t, e.accuracy, &rows).map_err(|e| Failure::Run(e.to_string()))?;
    }
    Ok(())
}

fn write_eval_csv(dir: &Path, t: usize, all: f64, rows: &[(usize, f64)]) -> Result<(), DgmError> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join(format!("eval_t{t}.csv")))?;
    w.write_record(["scope", "accuracy"])?;
    w.write_record(["all".to_string(), all.to_string()])?;
    for (j, acc) in rows {
        w.write_record([format!("task{j}"), acc.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<(), Failure> {
    let rep = report(&args.dir)?;
    for w in &rep.warnings {
        eprintln!("warning: {w}");
    }
    print!("{}", rep.text);
    Ok(())
}

fn cmd_selftest(args: &SelftestArgs) -> Result<(), Failure> {
    let opts = SelftestOptions {
        seed: args.seed,
        gradient_trials: args.trials,
        fault: args.inject.as_deref().map(|_| Fault::GateBypass),
        ..SelftestOptions::default()
    };
    let results = run_selftest(&opts);
    for r in &results {
        let tag = if r.passed { "PASS" } else { "FAIL" };
        println!("{tag} {:<22} {:>7.2}s  {}", r.name, r.seconds, r.detail);
    }
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name)
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Run(format!(
            "failed properties: {}",
            failed.join(", ")
        )))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Report(a) => cmd_report(a),
        Command::Selftest(a) => cmd_selftest(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
