//! `talk`: benchmarks, gradient checks, oracle comparison and training.
//!
//! Exit codes: 0 success, 1 runtime failure or failed check, 2 usage error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use talk_core::alloc::{self, TrackingAllocator};
use talk_core::baselines::{oracle_sweep, BenchCoreKind};
use talk_core::bench::{run_bench, save_csv, write_csv, BenchRow, BenchSpec, BenchStatus};
use talk_core::gradcheck::{run_gradcheck, Corruption};
use talk_core::training::{train_loop, TrainConfig};
use talk_core::{DType, Result};

#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

#[derive(Parser)]
#[command(name = "talk", version, about = "Time-aware large kernel convolutions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

impl From<Precision> for DType {
    fn from(p: Precision) -> Self {
        match p {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Throughput and peak memory per core and sequence length.
    Bench(BenchArgs),
    /// Finite-difference check of every backward pass.
    Gradcheck(GradcheckArgs),
    /// Train a model from a JSON config.
    Train(TrainArgs),
    /// Compare the kernel with the brute-force oracle on random instances.
    OracleDiff(OracleArgs),
}

#[derive(Args)]
struct BenchArgs {
    /// Core to time: talk, attention, dynconv (k = 31) or dynconv<k>. Repeatable.
    #[arg(long = "core", value_parser = parse_core)]
    cores: Vec<BenchCoreKind>,
    /// Sequence length. Repeatable.
    #[arg(long = "n", required = true)]
    ns: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    batch: usize,
    #[arg(long, default_value_t = 1024)]
    dim: usize,
    #[arg(long, default_value_t = 16)]
    heads: usize,
    #[arg(long, default_value_t = 10)]
    iters: usize,
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "f32")]
    dtype: Precision,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    /// Negative control: corrupt the kernel input gradient.
    #[arg(long, hide = true)]
    corrupt: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON document with training settings.
    #[arg(long)]
    config: PathBuf,
    /// Report CSV; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint path; overrides the config.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    dtype: Option<Precision>,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 500)]
    trials: usize,
    #[arg(long, value_enum, default_value = "f64")]
    dtype: Precision,
}

fn parse_core(s: &str) -> std::result::Result<BenchCoreKind, String> {
    s.parse().map_err(|e: talk_core::TalkError| e.to_string())
}

fn print_bench(rows: &[BenchRow]) {
    eprintln!("{:<12} {:>7} {:>14} {:>14} {:>10}", "core", "n", "iter/s", "peak bytes", "mem/attn");
    for r in rows {
        let speed = match r.status {
            BenchStatus::Ok => format!("{:.2}", r.iters_per_sec),
            BenchStatus::Oom => "OOM".into(),
        };
        let rel = r.mem_vs_attention.map_or("-".into(), |m| format!("{m:.3}"));
        eprintln!("{:<12} {:>7} {:>14} {:>14} {:>10}", r.core, r.n, speed, r.peak_bytes, rel);
    }
}

fn bench(args: BenchArgs) -> Result<bool> {
    let defaults = BenchSpec::default();
    let spec = BenchSpec {
        cores: if args.cores.is_empty() { defaults.cores } else { args.cores },
        ns: args.ns,
        batch: args.batch,
        dim: args.dim,
        heads: args.heads,
        iters: args.iters,
        warmup: args.warmup,
        workers: args.workers,
        seed: args.seed,
    };
    let rows = match args.dtype {
        Precision::F32 => run_bench::<f32>(&spec)?,
        Precision::F64 => run_bench::<f64>(&spec)?,
    };
    if !alloc::is_active() {
        eprintln!("warning: allocation tracking inactive, peak bytes are zero");
    }
    print_bench(&rows);
    match &args.out {
        Some(path) => save_csv(&rows, path)?,
        None => write_csv(&rows, std::io::stdout().lock())?,
    }
    Ok(true)
}

fn gradcheck(args: GradcheckArgs) -> Result<bool> {
    let corruption = if args.corrupt { Corruption::KernelInput } else { Corruption::None };
    let report = run_gradcheck(args.seed, args.trials, corruption)?;
    println!("{:<20} {:>8} {:>14} {:>10}  result", "layer", "trials", "worst rel err", "tolerance");
    for r in &report.rows {
        println!(
            "{:<20} {:>8} {:>14.3e} {:>10.0e}  {}",
            r.layer,
            r.trials,
            r.worst_rel_error,
            r.tolerance,
            if r.passed() { "pass" } else { "FAIL" }
        );
    }
    println!(
        "clamped offset gradients: {} checked, {} non-zero",
        report.clamped_checked, report.clamped_nonzero
    );
    Ok(report.passed())
}

fn train(args: TrainArgs) -> Result<bool> {
    let mut cfg = TrainConfig::load(&args.config)?;
    if let Some(out) = args.out {
        cfg.report_path = Some(out);
    }
    if let Some(ckpt) = args.checkpoint {
        cfg.checkpoint_path = Some(ckpt);
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(dtype) = args.dtype {
        cfg.dtype = dtype.into();
    }
    let report = train_loop(&cfg)?;
    for r in &report.rows {
        println!("step {:>6}  loss {:.5}  lr {:.3e}  acc {:.4}", r.step, r.loss, r.lr, r.accuracy);
    }
    println!(
        "steps {}  eval loss {:.5}  eval acc {:.4}  diverged {}  skipped {}",
        report.steps, report.eval_loss, report.eval_accuracy, report.diverged, report.skipped_updates
    );
    Ok(true)
}

fn oracle_diff(args: OracleArgs) -> Result<bool> {
    let (sweep, tol) = match args.dtype {
        Precision::F32 => (oracle_sweep::<f32>(args.seed, args.trials)?, 1e-4),
        Precision::F64 => (oracle_sweep::<f64>(args.seed, args.trials)?, 1e-6),
    };
    let ok = sweep.worst_rel_error < tol;
    println!(
        "instances {}  clamped {}  integral {}  worst rel err {:.3e}  tolerance {:.0e}  {}",
        sweep.instances,
        sweep.clamped_instances,
        sweep.integral_instances,
        sweep.worst_rel_error,
        tol,
        if ok { "pass" } else { "FAIL" }
    );
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Bench(a) => bench(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Train(a) => train(a),
        Command::OracleDiff(a) => oracle_diff(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
