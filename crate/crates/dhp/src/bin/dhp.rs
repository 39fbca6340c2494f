//! Benchmark CLI: `run` trains a method on a benchmark, `eval` re-scores a
//! checkpoint, `report` tabulates saved summaries.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dhp::harness::{
    build_task_stream, evaluate_row, run_experiment, Checkpoint, RunConfig, RunRecord,
};

#[derive(Parser)]
#[command(name = "dhp", about = "Hebbian-plasticity continual-learning benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a method on a benchmark and persist metrics + checkpoints.
    Run(RunArgs),
    /// Re-evaluate a saved checkpoint on its benchmark's tasks.
    Eval(EvalArgs),
    /// Summarize saved runs under an output directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Config file (TOML); flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// permuted | imbalanced | split
    #[arg(long)]
    benchmark: Option<String>,
    /// finetune | dhp | si | dhp+si | online_ewc | dhp+online_ewc | mas | dhp+mas
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    xi: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    eta0: Option<f64>,
    #[arg(long)]
    n_tasks: Option<usize>,
    /// Directory with the MNIST IDX files (env DHP_DATA_DIR also works).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// CI profile: 2 epochs/task, 10k-sample train subsets.
    #[arg(long)]
    fast: bool,
    /// Use a generated dataset instead of MNIST files.
    #[arg(long)]
    synthetic: bool,
    /// Leave task 1 unpermuted in the permuted benchmarks.
    #[arg(long)]
    identity_first: bool,
    /// Differentiate the trace update back into the hidden activations.
    #[arg(long)]
    hebb_grad_full: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// checkpoint.bin written by `run`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// run.json with the config; defaults to the checkpoint's sibling.
    #[arg(long)]
    run: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    out_dir: PathBuf,
}

fn build_config(args: &RunArgs) -> dhp::Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| dhp::Error::io(path.clone(), e))?;
            RunConfig::from_toml_str(&text)?
        }
        None => {
            let benchmark = args
                .benchmark
                .as_deref()
                .ok_or_else(|| dhp::Error::Config("--benchmark is required (or use --config)".into()))?
                .parse()?;
            let method = args
                .method
                .as_deref()
                .ok_or_else(|| dhp::Error::Config("--method is required (or use --config)".into()))?
                .parse()?;
            RunConfig::defaults(benchmark, method)
        }
    };
    if args.config.is_some() {
        if let Some(b) = &args.benchmark {
            cfg.benchmark = b.parse()?;
        }
        if let Some(m) = &args.method {
            cfg.method = m.parse()?;
        }
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.trials {
        cfg.trials = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs_per_task = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = args.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = args.xi {
        cfg.xi = v;
    }
    if let Some(v) = args.gamma {
        cfg.gamma = v;
    }
    if let Some(v) = args.eta0 {
        cfg.eta0 = v;
    }
    if let Some(v) = args.n_tasks {
        cfg.n_tasks = v;
    }
    if args.data_dir.is_some() {
        cfg.data_dir = args.data_dir.clone();
    }
    if args.out_dir.is_some() {
        cfg.out_dir = args.out_dir.clone();
    }
    cfg.fast |= args.fast;
    cfg.synthetic |= args.synthetic;
    cfg.identity_first |= args.identity_first;
    cfg.hebb_grad_full |= args.hebb_grad_full;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_run(args: RunArgs) -> dhp::Result<()> {
    let cfg = build_config(&args)?;
    eprintln!(
        "running {} on {} ({} trial(s), seed {})",
        cfg.method, cfg.benchmark, cfg.trials, cfg.seed
    );
    let (summary, records) = run_experiment(&cfg)?;
    for r in &records {
        println!(
            "trial {}: avg_acc={:.4} bwt={} ({:.1}s)",
            r.trial,
            r.metrics.avg_acc,
            r.metrics
                .bwt
                .map_or("n/a".to_string(), |b| format!("{b:.4}")),
            r.wall_clock_secs
        );
    }
    println!(
        "{} / {}: ACC {:.4} +- {:.4}, BWT {}",
        summary.config.method,
        summary.config.benchmark,
        summary.mean_acc,
        summary.sem_acc,
        match (summary.mean_bwt, summary.sem_bwt) {
            (Some(m), Some(s)) => format!("{m:.4} +- {s:.4}"),
            _ => "n/a".to_string(),
        }
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> dhp::Result<()> {
    let run_path = args.run.clone().unwrap_or_else(|| {
        args.checkpoint
            .parent()
            .map(|p| p.join("run.json"))
            .unwrap_or_else(|| PathBuf::from("run.json"))
    });
    let text = std::fs::read_to_string(&run_path)
        .map_err(|e| dhp::Error::io(run_path.clone(), e))?;
    let record: RunRecord = serde_json::from_str(&text)?;
    let mut cfg = record.config.clone();
    if args.data_dir.is_some() {
        cfg.data_dir = args.data_dir;
    }
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let (model, _) = ckpt.restore()?;
    let (train, test) = dhp::harness::load_benchmark_data(&cfg)?;
    let stream = build_task_stream(&cfg, train, test)?;
    let row = evaluate_row(&model, &stream, stream.tasks.len(), cfg.eval_batch);
    let stored = record.metrics.eval.row(record.metrics.eval.tasks_done());
    println!("task,accuracy,stored");
    for (i, acc) in row.iter().enumerate() {
        println!("{},{:.6},{:.6}", i + 1, acc, stored.get(i).copied().unwrap_or(f64::NAN));
    }
    let avg = row.iter().sum::<f64>() / row.len() as f64;
    println!("avg_acc,{avg:.6},{:.6}", record.metrics.avg_acc);
    Ok(())
}

fn collect_summaries(dir: &PathBuf, out: &mut Vec<PathBuf>) {
    if let Ok(entries) = std::fs::read_dir(dir) {
        for entry in entries.flatten() {
            let path = entry.path();
            if path.is_dir() {
                collect_summaries(&path, out);
            } else if path.file_name().is_some_and(|n| n == "summary.json") {
                out.push(path);
            }
        }
    }
}

fn cmd_report(args: ReportArgs) -> dhp::Result<()> {
    let mut paths = Vec::new();
    collect_summaries(&args.out_dir, &mut paths);
    paths.sort();
    if paths.is_empty() {
        eprintln!("no summary.json found under {}", args.out_dir.display());
        return Ok(());
    }
    println!("benchmark,method,trials,mean_acc,sem_acc,mean_bwt,sem_bwt");
    for path in paths {
        let text = std::fs::read_to_string(&path).map_err(|e| dhp::Error::io(&path, e))?;
        let s: dhp::harness::RunSummary = serde_json::from_str(&text)?;
        println!(
            "{},{},{},{:.4},{:.4},{},{}",
            s.config.benchmark,
            s.config.method,
            s.trial_avg_acc.len(),
            s.mean_acc,
            s.sem_acc,
            s.mean_bwt.map_or("n/a".into(), |v| format!("{v:.4}")),
            s.sem_bwt.map_or("n/a".into(), |v| format!("{v:.4}")),
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Report(args) => cmd_report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
