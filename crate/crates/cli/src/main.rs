mod bench;
mod config;
mod gradcheck;
mod report;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use streambp::distsim::{simulate_standard_step, simulate_step, ClusterSpec};
use streambp::linear_demo::linear_demo_sweep;
use streambp::tensor::DType;

use crate::config::Config;
use crate::report::Table;

/// A configuration or command-line problem. Exits with status 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// Outcome of a command that ran to completion.
pub enum Verdict {
    Pass,
    /// Checks failed; the strings list the offending cases.
    Fail(Vec<String>),
}

#[derive(Parser)]
#[command(name = "streambp", version, about = "Sequence-chunked backpropagation: checks, benchmarks and demos")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare streamed gradients with the standard engine and finite differences.
    Gradcheck(Common),
    /// Sweep sequence length and partition counts; report memory and FLOPs.
    Bench(Common),
    /// Chunk-count sweep of the two-matmul example.
    Lineardemo(LinearArgs),
    /// Count collective operations of a distributed step.
    Distsim(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// JSON configuration (a cluster spec, or a list of them, for distsim).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output CSV path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = DTypeArg::Real64)]
    dtype: DTypeArg,
    /// Worker threads for sweep points; 0 uses all cores.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct LinearArgs {
    #[command(flatten)]
    common: Common,
    /// Chunk counts, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 20, 50, 100])]
    chunks: Vec<usize>,
    /// Rows of X.
    #[arg(long, default_value_t = 4096)]
    rows: usize,
    /// Width of X, W1 and W2.
    #[arg(long, default_value_t = 32)]
    dim: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum DTypeArg {
    Real32,
    Real64,
}

impl From<DTypeArg> for DType {
    fn from(d: DTypeArg) -> DType {
        match d {
            DTypeArg::Real32 => DType::Real32,
            DTypeArg::Real64 => DType::Real64,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Verdict::Pass) => ExitCode::SUCCESS,
        Ok(Verdict::Fail(cases)) => {
            eprintln!("{} case(s) outside tolerance:", cases.len());
            for c in cases {
                eprintln!("  {c}");
            }
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.downcast_ref::<Usage>().is_some()
                || matches!(
                    e.downcast_ref::<streambp::Error>(),
                    Some(streambp::Error::InvalidConfig { .. } | streambp::Error::Guard(_))
                );
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> Result<Verdict> {
    match cli.command {
        Command::Gradcheck(c) => {
            let cfg = Config::load(c.config.as_deref())?;
            let (table, verdict) = with_pool(c.threads, || gradcheck::run(&cfg, seed(&c, &cfg), c.dtype.into()))??;
            table.write(c.out.as_deref())?;
            Ok(verdict)
        }
        Command::Bench(c) => {
            let cfg = Config::load(c.config.as_deref())?;
            let table = with_pool(c.threads, || bench::run(&cfg, seed(&c, &cfg), c.dtype.into()))??;
            table.write(c.out.as_deref())?;
            Ok(Verdict::Pass)
        }
        Command::Lineardemo(a) => {
            if a.chunks.contains(&0) {
                return Err(Usage("invalid --chunks: entries must be at least 1".into()).into());
            }
            let rows = linear_demo_sweep(a.rows, a.dim, a.dim, a.dim, &a.chunks, a.common.seed.unwrap_or(0))?;
            let mut t = Table::new(&["D", "peak_bytes", "intermediate_bytes", "flops"]);
            for r in rows {
                t.push(vec![r.d.to_string(), r.peak_bytes.to_string(), r.intermediate_bytes.to_string(), r.flops.to_string()]);
            }
            t.write(a.common.out.as_deref())?;
            Ok(Verdict::Pass)
        }
        Command::Distsim(c) => {
            let path = c.config.as_deref().ok_or_else(|| Usage("distsim needs --config <spec.json>".into()))?;
            let text = std::fs::read_to_string(path).map_err(|e| Usage(format!("cannot read {}: {e}", path.display())))?;
            let specs = parse_cluster_specs(&text).map_err(|e| Usage(format!("invalid spec {}: {e}", path.display())))?;
            let mut t = Table::new(&[
                "workers",
                "layers",
                "D",
                "strategy",
                "sharding",
                "accumulation_steps",
                "reduce_at_end",
                "allgather_events",
                "reduce_events",
                "allgather_bytes",
                "reduce_bytes",
                "extra_resident_bytes",
                "standard_reduce_events",
            ]);
            for s in specs {
                s.validate().map_err(config::usage)?;
                let r = simulate_step(&s);
                let std = simulate_standard_step(&s);
                t.push(vec![
                    s.workers.to_string(),
                    s.layers.to_string(),
                    s.chunks.to_string(),
                    enum_name(&s.strategy)?,
                    enum_name(&s.sharding)?,
                    s.accumulation_steps.to_string(),
                    s.reduce_at_end.to_string(),
                    r.allgather_events.to_string(),
                    r.reduce_events.to_string(),
                    r.allgather_bytes.to_string(),
                    r.reduce_bytes.to_string(),
                    r.extra_resident_bytes.to_string(),
                    std.reduce_events.to_string(),
                ]);
            }
            t.write(c.out.as_deref())?;
            Ok(Verdict::Pass)
        }
    }
}

fn seed(c: &Common, cfg: &Config) -> u64 {
    c.seed.or(cfg.seed).unwrap_or(0)
}

/// One cluster spec object, or an array of them.
fn parse_cluster_specs(text: &str) -> serde_json::Result<Vec<ClusterSpec>> {
    let v: serde_json::Value = serde_json::from_str(text)?;
    if v.is_array() {
        serde_json::from_value(v)
    } else {
        Ok(vec![serde_json::from_value(v)?])
    }
}

fn enum_name<T: serde::Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_value(v)?.as_str().unwrap_or_default().to_string())
}

fn with_pool<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .context("building worker pool")?;
    Ok(pool.install(f))
}
