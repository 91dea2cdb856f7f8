//! Command-line surface. Exit codes: 0 success, 1 runtime failure, 2 usage
//! error.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::load_checkpoint;
use crate::config::{Method, RunConfig};
use crate::data::synth::{gen_synthetic_tasks, SynthConfig};
use crate::data::write_dataset_dir;
use crate::error::{Error, Result};
use crate::experiments::{load_corpora, prepare, prepare_corpora, run_ablation, run_to_dir};
use crate::gradsuite::{run_suite, SUITE_TOLERANCE};
use crate::par::Execution;
use crate::report::render_report;
use crate::rundir::read_run;
use crate::trainer::evaluate_detailed;

#[derive(Debug, Parser)]
#[command(name = "moecl", version, about = "Adversarial mixture-of-LoRA-experts continual learning lab")]
struct Cli {
    /// Run data-parallel work on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a task sequence and write a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one task's test split.
    Eval(EvalArgs),
    /// Metric tables over one or more run directories.
    Report(ReportArgs),
    /// Write a synthetic benchmark as a dataset directory.
    Synth(SynthArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Paired runs with and without the discriminator, plus probes.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct Overrides {
    #[arg(long)]
    method: Option<Method>,
    /// Task order, e.g. `2,0,1`.
    #[arg(long, value_delimiter = ',')]
    order: Option<Vec<usize>>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    task: usize,
    /// Dataset directory; defaults to the data recorded in the checkpoint.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Also write the machine-readable report here.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// TOML file with generator settings; defaults apply otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// Discriminator weight of the adversarial arm.
    #[arg(long, default_value_t = 0.1)]
    gan_weight: f64,
    /// Where to write `ablation.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn load_run_config(path: &Path, exec: Execution) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_toml(&read_text(path)?)?;
    if exec == Execution::Sequential {
        cfg.train.execution = exec;
    }
    Ok(cfg)
}

fn train(args: TrainArgs, exec: Execution) -> Result<()> {
    let mut cfg = load_run_config(&args.config, exec)?;
    let o = args.overrides;
    if let Some(m) = o.method {
        cfg.train.method = m;
    }
    if o.order.is_some() {
        cfg.train.order = o.order;
    }
    if let Some(s) = o.seed {
        cfg.train.seed = s;
        cfg.model.seed = s;
    }
    let (summary, _) = run_to_dir(&cfg, &args.out)?;
    let (text, _) = render_report(std::slice::from_ref(&summary))?;
    print!("{text}");
    Ok(())
}

fn eval(args: EvalArgs, exec: Execution) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let mut data = ckpt.data.clone();
    if let Some(dir) = args.data {
        data.dir = Some(dir);
        data.synth = None;
    }
    let corpora = load_corpora(&data)?;
    let tasks = match &ckpt.vocab {
        Some(vocab) => crate::data::encode_tasks(&corpora, vocab, ckpt.model.max_seq_len),
        None => prepare_corpora(&corpora, &data, &ckpt.model)?.tasks,
    };
    let task = tasks
        .get(args.task)
        .ok_or(Error::Task { task: args.task, n_tasks: tasks.len() })?
        .clone();
    let state = ckpt.into_state()?;
    let outcome = evaluate_detailed(&state.model, &task, exec)?;
    println!("task {} ({}) accuracy {}", task.id, task.name, outcome.accuracy);
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    let runs = args.runs.iter().map(|p| read_run(p)).collect::<Result<Vec<_>>>()?;
    let (text, json) = render_report(&runs)?;
    print!("{text}");
    if let Some(path) = args.json {
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn synth(args: SynthArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => toml::from_str::<SynthConfig>(&read_text(p)?).map_err(|e| Error::Config(e.to_string()))?,
        None => SynthConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    write_dataset_dir(&args.out, &gen_synthetic_tasks(&cfg)?)
}

fn gradcheck(args: GradcheckArgs, exec: Execution) -> Result<bool> {
    let results = run_suite(args.seed, exec)?;
    let mut ok = true;
    for r in &results {
        let pass = r.passes(SUITE_TOLERANCE);
        ok &= pass;
        println!(
            "{} {:<48} max_rel_error={:.3e} coords={} kinks={}",
            if pass { "PASS" } else { "FAIL" },
            r.name,
            r.max_rel_error,
            r.coordinates,
            r.kinks
        );
    }
    Ok(ok)
}

fn ablate(args: AblateArgs, exec: Execution) -> Result<()> {
    let cfg = load_run_config(&args.config, exec)?;
    let prepared = prepare(&cfg)?;
    let report = run_ablation(&prepared.tasks, &prepared.model, &cfg.train, args.gan_weight, &args.seeds, exec)?;
    println!("seed  probe(gan=0)  probe(gan={})  acc(gan=0)  acc(gan={})", args.gan_weight, args.gan_weight);
    for p in &report.pairs {
        println!(
            "{:<5} {:<13.4} {:<14.4} {:<11.4} {:.4}",
            p.seed, p.probe_without, p.probe_with, p.acc_without, p.acc_with
        );
    }
    println!(
        "mean  {:<13.4} {:<14.4} gap {:.4}",
        report.mean_probe_without, report.mean_probe_with, report.gap
    );
    if let Some(dir) = args.out {
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join("ablation.json");
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Parses `argv` (including the program name) and runs the command.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let exec = if cli.sequential { Execution::Sequential } else { Execution::Parallel };
    let result = match cli.command {
        Command::Train(a) => train(a, exec),
        Command::Eval(a) => eval(a, exec),
        Command::Report(a) => report(a),
        Command::Synth(a) => synth(a),
        Command::Gradcheck(a) => gradcheck(a, exec).and_then(|ok| {
            if ok {
                Ok(())
            } else {
                Err(Error::Numeric("gradient suite exceeded tolerance".into()))
            }
        }),
        Command::Ablate(a) => ablate(a, exec),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
