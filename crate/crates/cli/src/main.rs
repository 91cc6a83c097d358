//! `anchorattn`: verify, gradcheck, bench, demo-train, anchors-fit.
//!
//! Exit codes: 0 success, 1 property or gradient failure, 2 usage error,
//! 3 capacity error, 4 data error.

use std::path::PathBuf;
use std::process::ExitCode;

use anchorattn::bench::Mechanism;
use anchorattn::harness::commands::{self, Console};
use anchorattn::harness::config::{parse_list, parse_mechanisms};
use anchorattn::harness::RunConfig;
use anchorattn::Result;
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "anchorattn",
    version,
    about = "Anchor attention: checks, benchmarks and a training demo"
)]
struct Cli {
    /// RNG seed; every command is deterministic for a fixed seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Flat `key = value` config file; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Randomized invariant suite (exit 1 if any property fails).
    Verify(VerifyArgs),
    /// Finite-difference check of a multi-head anchor attention block.
    Gradcheck(GradcheckArgs),
    /// Timing sweep with CSV/JSONL output and log-log scaling fits.
    Bench(BenchArgs),
    /// Train the 2-block anchor-attention classifier.
    DemoTrain(DemoArgs),
    /// Iterate the closed-form anchor update on a key set.
    AnchorsFit(FitArgs),
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Number of random instances.
    #[arg(long)]
    instances: Option<usize>,
    /// Largest token count drawn.
    #[arg(long)]
    n: Option<usize>,
    /// Largest anchor count drawn.
    #[arg(long)]
    m: Option<usize>,
    /// Largest head dimension drawn.
    #[arg(long)]
    d: Option<usize>,
    /// Test hook: zero one column mass of the first instance.
    #[arg(long)]
    poison_delta: bool,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Tokens (default 8).
    #[arg(long)]
    n: Option<usize>,
    /// Anchors (default 4).
    #[arg(long)]
    m: Option<usize>,
    /// Head dimension (default 4).
    #[arg(long)]
    d: Option<usize>,
    /// Input dimension (default 6).
    #[arg(long)]
    input_dim: Option<usize>,
    /// Heads (default 2).
    #[arg(long)]
    heads: Option<usize>,
    /// Central-difference step; clamped to [1e-7, 1e-3] with a warning.
    #[arg(long)]
    step: Option<f64>,
    /// Relative-error tolerance (default 1e-5).
    #[arg(long)]
    tol: Option<f64>,
    /// Zero every parameter before checking.
    #[arg(long)]
    zero_init: bool,
    /// All heads share the anchors of head 0.
    #[arg(long)]
    share_anchors: bool,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Comma-separated: vanilla, anchor-fast, anchor-explicit.
    #[arg(long, value_parser = mechanisms)]
    // Spelled out so clap takes the whole list as one value.
    mechanisms: Option<::std::vec::Vec<Mechanism>>,
    /// Comma-separated token counts (default 512,1024,2048,4096,8192).
    #[arg(long, value_parser = usizes)]
    ns: Option<::std::vec::Vec<usize>>,
    /// Anchor count (default 30).
    #[arg(long)]
    m: Option<usize>,
    /// Comma-separated anchor counts; overrides --m.
    #[arg(long, value_parser = usizes)]
    ms: Option<::std::vec::Vec<usize>>,
    /// Head dimension (default 64).
    #[arg(long)]
    d: Option<usize>,
    /// Heads per cell (default 1).
    #[arg(long)]
    heads: Option<usize>,
    /// Timed repetitions per cell (>= 3).
    #[arg(long)]
    reps: Option<usize>,
    /// Untimed warmup runs per cell (>= 1).
    #[arg(long)]
    warmup: Option<usize>,
    /// Bytes allowed for one n x n buffer (default 2 GiB).
    #[arg(long)]
    memory_ceiling: Option<u64>,
    /// Run kernels in f32.
    #[arg(long)]
    f32: bool,
    /// Run heads on separate threads (labelled /par in records).
    #[arg(long)]
    parallel: bool,
    /// Print the cell grid and exit without running or writing anything.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args, Debug)]
struct DemoArgs {
    /// Anchor count (default 30).
    #[arg(long)]
    m: Option<usize>,
    /// Heads per block (default 2).
    #[arg(long)]
    heads: Option<usize>,
    /// Model width (default 8).
    #[arg(long)]
    d: Option<usize>,
    /// Tokens per synthetic sample (default 32).
    #[arg(long)]
    n: Option<usize>,
    /// Token dimension of synthetic samples (default 4).
    #[arg(long)]
    input_dim: Option<usize>,
    /// Learning rate (default 0.03).
    #[arg(long)]
    lr: Option<f64>,
    /// Training epochs (default 10).
    #[arg(long)]
    epochs: Option<usize>,
    /// Minibatch size (default 16).
    #[arg(long)]
    batch: Option<usize>,
    /// Synthetic sample count (default 2000).
    #[arg(long)]
    samples: Option<usize>,
    /// Synthetic class count (default 3).
    #[arg(long)]
    classes: Option<usize>,
    /// IDX image file (u8, magic 0x803); needs --idx-labels.
    #[arg(long)]
    idx_images: Option<PathBuf>,
    /// IDX label file (u8, magic 0x801).
    #[arg(long)]
    idx_labels: Option<PathBuf>,
    /// Patch size for IDX images (default 7).
    #[arg(long)]
    patch: Option<usize>,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Anchor count (default 30).
    #[arg(long)]
    m: Option<usize>,
    /// Fixed-point iterations (default 20).
    #[arg(long)]
    iters: Option<usize>,
    /// gaussian, keys or first.
    #[arg(long)]
    init: Option<String>,
    /// CSV key file; otherwise synthetic clustered keys are drawn.
    #[arg(long)]
    keys: Option<PathBuf>,
    /// Synthetic key count (default 300).
    #[arg(long)]
    n: Option<usize>,
    /// Synthetic key dimension (default 2).
    #[arg(long)]
    d: Option<usize>,
    /// Synthetic cluster count (default 3).
    #[arg(long)]
    clusters: Option<usize>,
}

fn mechanisms(s: &str) -> std::result::Result<Vec<Mechanism>, String> {
    parse_mechanisms(s).map_err(|e| e.to_string())
}

fn usizes(s: &str) -> std::result::Result<Vec<usize>, String> {
    parse_list("list", s).map_err(|e| e.to_string())
}

fn flag(b: bool) -> Option<bool> {
    b.then_some(true)
}

impl Command {
    fn overrides(&self) -> RunConfig {
        let d = RunConfig::default();
        match self {
            Command::Verify(a) => RunConfig {
                instances: a.instances,
                n: a.n,
                m: a.m,
                d: a.d,
                poison_delta: flag(a.poison_delta),
                ..d
            },
            Command::Gradcheck(a) => RunConfig {
                n: a.n,
                m: a.m,
                d: a.d,
                input_dim: a.input_dim,
                heads: a.heads,
                step: a.step,
                tol: a.tol,
                zero_init: flag(a.zero_init),
                share_anchors: flag(a.share_anchors),
                ..d
            },
            Command::Bench(a) => RunConfig {
                mechanisms: a.mechanisms.clone(),
                ns: a.ns.clone(),
                m: a.m,
                ms: a.ms.clone(),
                d: a.d,
                heads: a.heads,
                reps: a.reps,
                warmup: a.warmup,
                memory_ceiling: a.memory_ceiling,
                f32: flag(a.f32),
                parallel: flag(a.parallel),
                dry_run: flag(a.dry_run),
                ..d
            },
            Command::DemoTrain(a) => RunConfig {
                m: a.m,
                heads: a.heads,
                d: a.d,
                n: a.n,
                input_dim: a.input_dim,
                lr: a.lr,
                epochs: a.epochs,
                batch: a.batch,
                samples: a.samples,
                classes: a.classes,
                idx_images: a.idx_images.clone(),
                idx_labels: a.idx_labels.clone(),
                patch: a.patch,
                ..d
            },
            Command::AnchorsFit(a) => RunConfig {
                m: a.m,
                iters: a.iters,
                init: a.init.clone(),
                keys: a.keys.clone(),
                n: a.n,
                d: a.d,
                clusters: a.clusters,
                ..d
            },
        }
    }
}

fn run(cli: &Cli) -> Result<i32> {
    let file = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    let cfg = file.overlay(RunConfig {
        seed: cli.seed,
        out: cli.out.clone(),
        ..cli.command.overrides()
    });
    let (mut stdout, mut stderr) = (std::io::stdout().lock(), std::io::stderr().lock());
    let mut io = Console {
        out: &mut stdout,
        err: &mut stderr,
    };
    match &cli.command {
        Command::Verify(_) => commands::verify(&cfg, &mut io),
        Command::Gradcheck(_) => commands::gradcheck(&cfg, &mut io),
        Command::Bench(_) => commands::bench(&cfg, &mut io),
        Command::DemoTrain(_) => commands::demo_train(&cfg, &mut io),
        Command::AnchorsFit(_) => commands::anchors_fit(&cfg, &mut io),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
