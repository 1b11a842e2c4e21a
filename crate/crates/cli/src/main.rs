//! `lag`: align adapter libraries, run the planted-subspace benchmark, sweep
//! the filter width, score results and print cost accounting.
//!
//! Exit status: 0 on success, 1 on invalid input or usage, 2 on I/O failure.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lag_core::linalg::align_library;
use lag_core::metrics::{cost_model, read_scores_file, score_table};
use lag_core::sim::{
    evaluate, generate_benchmark, sweep_k, write_csv, BenchmarkConfig, Coefficients, Coverage, EvalOptions,
    EvalReport, Method, Planting, DEFAULT_HIDDEN, DEFAULT_KNOWLEDGE_RANK, DEFAULT_SPECTR_BUDGET,
    DEFAULT_TASK_RANK,
};
use lag_core::store::{load_library, read_manifest, save_library, write_atomic};
use lag_core::types::DEFAULT_K;
use lag_core::{Error, RoutingConfig};

#[derive(Parser, Debug)]
#[command(name = "lag", version, about = "Two-stage routing over large low-rank adapter libraries")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Align a raw library directory and write the aligned library plus a
    /// skip report for degenerate adapters.
    Align {
        /// Raw library directory
        #[arg(long = "in", value_name = "DIR")]
        input: PathBuf,
        /// Output directory for the aligned library
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Relative singular value cutoff: values at or below tol·σ₁ are dropped
        #[arg(long, default_value_t = 1e-7)]
        tol: f64,
    },
    /// Route a synthetic benchmark with one method and write per-layer
    /// accuracy as CSV.
    Bench {
        #[command(flatten)]
        bench: BenchArgs,
        /// Routing method
        #[arg(long, value_enum, default_value_t = MethodArg::Lag)]
        method: MethodArg,
        /// Arrow filter width for the two-stage method
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
    },
    /// Evaluate the two-stage router at several filter widths and write CSV.
    SweepK {
        #[command(flatten)]
        bench: BenchArgs,
        /// Comma-separated filter widths, each in 1..=n-adapters
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 5, 10, 20, 50])]
        k_values: Vec<usize>,
    },
    /// Compute normalized task scores from a CSV with columns
    /// dataset,task,size,score,reference.
    Score {
        #[arg(long, value_name = "CSV")]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
        /// Write here instead of stdout
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Print extra parameters and per-token FLOPs for arrow, spectral and
    /// two-stage routing over n adapters of rank r at hidden size h.
    Accounting {
        /// Library size
        n: u64,
        /// Hidden size
        h: u64,
        /// Adapter rank
        r: u64,
        /// Filter width; clamped to n
        k: u64,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Base seed; runs use seed, seed+1, ...
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of seeds to run
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    /// Fraction of token energy outside the owner's subspace, in [0, 1)
    #[arg(long, default_value_t = 0.3)]
    epsilon: f64,
    /// Adapters per library per layer
    #[arg(long, default_value_t = 100)]
    n_adapters: usize,
    /// Hidden size (input and output dimension of every layer)
    #[arg(long, default_value_t = DEFAULT_HIDDEN)]
    hidden: usize,
    /// Rank for both libraries [default: task 8, knowledge 6]
    #[arg(long)]
    rank: Option<usize>,
    /// Number of layers; even layers carry task adapters, odd ones knowledge
    #[arg(long, default_value_t = 2)]
    layers: usize,
    /// Tokens per layer
    #[arg(long, default_value_t = 128)]
    tokens: usize,
    #[arg(long, value_enum, default_value_t = PlantingArg::Gaussian)]
    planting: PlantingArg,
    #[arg(long, value_enum, default_value_t = CoverageArg::Alternating)]
    coverage: CoverageArg,
    /// Distribution of in-subspace token coordinates
    #[arg(long, value_enum, default_value_t = CoefficientsArg::Signed)]
    coefficients: CoefficientsArg,
    /// Largest library exhaustive spectral routing may scan
    #[arg(long, default_value_t = DEFAULT_SPECTR_BUDGET)]
    spectr_budget: usize,
    /// Run exhaustive spectral routing past the budget
    #[arg(long)]
    allow_large_spectr: bool,
    /// CSV output file [default: stdout]
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum MethodArg {
    Arrow,
    Spectr,
    Lag,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Table,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum PlantingArg {
    Orthogonal,
    Gaussian,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum CoverageArg {
    Alternating,
    Both,
    Task,
    Knowledge,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum CoefficientsArg {
    Signed,
    Gaussian,
}

impl BenchArgs {
    fn configs(&self) -> Vec<BenchmarkConfig> {
        let base = BenchmarkConfig {
            n_adapters: self.n_adapters,
            hidden: self.hidden,
            task_rank: self.rank.unwrap_or(DEFAULT_TASK_RANK),
            knowledge_rank: self.rank.unwrap_or(DEFAULT_KNOWLEDGE_RANK),
            layers: self.layers,
            coverage: match self.coverage {
                CoverageArg::Alternating => Coverage::Alternating,
                CoverageArg::Both => Coverage::Both,
                CoverageArg::Task => Coverage::TaskOnly,
                CoverageArg::Knowledge => Coverage::KnowledgeOnly,
            },
            epsilon: self.epsilon,
            tokens: self.tokens,
            seed: self.seed,
            planting: match self.planting {
                PlantingArg::Orthogonal => Planting::Orthogonal,
                PlantingArg::Gaussian => Planting::Gaussian,
            },
            coefficients: match self.coefficients {
                CoefficientsArg::Signed => Coefficients::Signed,
                CoefficientsArg::Gaussian => Coefficients::Gaussian,
            },
            ..Default::default()
        };
        (0..self.seeds)
            .map(|i| BenchmarkConfig {
                seed: self.seed + i,
                ..base.clone()
            })
            .collect()
    }

    fn options(&self) -> EvalOptions {
        EvalOptions {
            spectr_budget: self.spectr_budget,
            allow_large_spectr: self.allow_large_spectr,
            ..Default::default()
        }
    }
}

fn emit(out: Option<&Path>, text: &[u8]) -> lag_core::Result<()> {
    match out {
        Some(path) => write_atomic(path, text),
        None => std::io::stdout()
            .write_all(text)
            .map_err(|e| Error::Io {
                path: PathBuf::from("<stdout>"),
                source: e,
            }),
    }
}

fn emit_csv(out: Option<&Path>, reports: &[EvalReport]) -> lag_core::Result<()> {
    let mut buf = Vec::new();
    write_csv(reports, &mut buf).map_err(|e| Error::Internal(e.to_string()))?;
    emit(out, &buf)
}

fn to_json<T: serde::Serialize>(v: &T) -> lag_core::Result<Vec<u8>> {
    let mut text = serde_json::to_string_pretty(v).map_err(|e| Error::Internal(e.to_string()))?;
    text.push('\n');
    Ok(text.into_bytes())
}

fn cmd_align(input: &Path, out: &Path, tol: f64) -> lag_core::Result<()> {
    let manifest = read_manifest(input)?;
    if manifest.is_aligned() {
        return Err(Error::Usage(format!(
            "{} is already aligned; align expects a raw library",
            input.display()
        )));
    }
    let (tag, raw) = load_library(input)?.into_raw()?;
    let cfg = RoutingConfig {
        svd_tolerance: tol,
        ..RoutingConfig::default()
    };
    let lib = align_library(tag, &raw, &cfg)?;
    save_library(&lib, out)?;
    write_atomic(&out.join("skip_report.json"), &to_json(&lib.skipped())?)?;
    log::info!(
        "aligned {} {} adapters into {}, skipped {}",
        lib.len(),
        tag,
        out.display(),
        lib.skipped().len()
    );
    Ok(())
}

fn run(cli: Cli) -> lag_core::Result<()> {
    match cli.command {
        Command::Align { input, out, tol } => cmd_align(&input, &out, tol),
        Command::Bench { bench, method, k } => {
            let method = match method {
                MethodArg::Arrow => Method::Arrow,
                MethodArg::Spectr => Method::Spectr,
                MethodArg::Lag => Method::Lag { k },
            };
            let opts = bench.options();
            let mut reports = Vec::new();
            for cfg in bench.configs() {
                log::info!("seed {}: {} over {} adapters", cfg.seed, method.name(), cfg.n_adapters);
                reports.push(evaluate(&generate_benchmark(&cfg)?, method, &opts)?);
            }
            emit_csv(bench.out.as_deref(), &reports)
        }
        Command::SweepK { bench, k_values } => {
            let opts = bench.options();
            let mut reports = Vec::new();
            for cfg in bench.configs() {
                log::info!("seed {}: sweeping k over {:?}", cfg.seed, k_values);
                reports.extend(sweep_k(&generate_benchmark(&cfg)?, &k_values, &opts)?);
            }
            emit_csv(bench.out.as_deref(), &reports)
        }
        Command::Score { input, format, out } => {
            let table = score_table(&read_scores_file(&input)?)?;
            let text = match format {
                Format::Json => to_json(&table)?,
                Format::Table => {
                    let mut s = format!("{:<12}{:>10}{:>10}\n", "task", "samples", "score");
                    for t in &table.tasks {
                        s.push_str(&format!("{:<12}{:>10}{:>10.2}\n", t.task, t.samples, t.score));
                    }
                    s.push_str(&format!("{:<12}{:>10}{:>10.2}\n", "average", "", table.average));
                    s.push_str(&format!("{:<12}{:>10}{:>10.2}\n", "weighted", "", table.weighted_average));
                    s.into_bytes()
                }
            };
            emit(out.as_deref(), &text)
        }
        Command::Accounting { n, h, r, k, format } => {
            let report = cost_model(n, h, r, k)?;
            let text = match format {
                Format::Json => to_json(&report)?,
                Format::Table => report.to_table().into_bytes(),
            };
            emit(None, &text)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
