//! `bench`: sweep harness over runtime configurations.
//!
//! Reads a JSON grid config, applies flag overrides, cross-checks every
//! grid point against the serial reference, and emits latency/throughput/
//! counter rows as a table, CSV, or JSON. Exits nonzero if any grid point
//! fails its correctness check.

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Parser, ValueEnum};

use tandem::engine::PoolConfig;
use tandem::sweep::{emit, run_sweep, ClockMode, EmitFormat, SweepConfig};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ClockArg {
    Virtual,
    Real,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
    Table,
}

#[derive(Parser, Debug)]
#[command(
    name = "bench",
    about = "Benchmark sweeps for the tandem inference runtime",
    version
)]
struct Args {
    /// Grid configuration file (JSON)
    #[arg(long)]
    config: PathBuf,

    /// Override the tensor-parallel grid with a single size
    #[arg(long)]
    tp: Option<usize>,

    /// Override the pipeline grid with a single stage count
    #[arg(long)]
    pp: Option<usize>,

    /// Run with padding removal enabled (overrides the grid)
    #[arg(long)]
    drce: bool,

    /// Pool settings file (JSON); enables pooled runs
    #[arg(long)]
    pool: Option<PathBuf>,

    /// Batch sizes, comma separated (e.g. 1,4,16,32)
    #[arg(long, value_delimiter = ',')]
    batch_sizes: Option<Vec<usize>>,

    /// Padded lengths, comma separated (e.g. 64,128)
    #[arg(long, value_delimiter = ',')]
    pad_sizes: Option<Vec<usize>>,

    /// Timebase for the report
    #[arg(long, value_enum)]
    clock: Option<ClockArg>,

    /// Write the report here instead of stdout; .csv and .json pick the
    /// format unless --format is given
    #[arg(long)]
    out: Option<PathBuf>,

    /// Output format (default: table on stdout, by extension for --out)
    #[arg(long, value_enum)]
    format: Option<FormatArg>,

    /// Base seed for batch generation
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> anyhow::Result<()> {
    let args = Args::parse();
    let mut cfg = SweepConfig::load(&args.config)
        .with_context(|| format!("loading {}", args.config.display()))?;

    if let Some(tp) = args.tp {
        cfg.tp = vec![tp];
    }
    if let Some(pp) = args.pp {
        cfg.pp = vec![pp];
    }
    if args.drce {
        cfg.drce = vec![true];
    }
    if let Some(pool_path) = &args.pool {
        let text = std::fs::read_to_string(pool_path)
            .with_context(|| format!("loading {}", pool_path.display()))?;
        let pool: PoolConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing pool settings {}", pool_path.display()))?;
        cfg.pool = Some(pool);
        cfg.pool_modes = vec![true];
    }
    if let Some(batch_sizes) = args.batch_sizes {
        cfg.batch_sizes = batch_sizes;
    }
    if let Some(pad_sizes) = args.pad_sizes {
        cfg.pad_sizes = pad_sizes;
    }
    if let Some(clock) = args.clock {
        cfg.clock = match clock {
            ClockArg::Virtual => ClockMode::Virtual,
            ClockArg::Real => ClockMode::Real,
        };
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }

    let report = match run_sweep(&cfg) {
        Ok(report) => report,
        Err(e) => bail!("sweep aborted: {e}"),
    };

    let format = match (args.format, &args.out) {
        (Some(FormatArg::Csv), _) => EmitFormat::Csv,
        (Some(FormatArg::Json), _) => EmitFormat::Json,
        (Some(FormatArg::Table), _) => EmitFormat::Table,
        (None, Some(path)) => match path.extension().and_then(|e| e.to_str()) {
            Some("json") => EmitFormat::Json,
            _ => EmitFormat::Csv,
        },
        (None, None) => EmitFormat::Table,
    };
    let rendered = emit(&report, format)?;
    match &args.out {
        Some(path) => {
            std::fs::write(path, rendered)
                .with_context(|| format!("writing {}", path.display()))?;
            eprintln!("wrote {} rows to {}", report.rows.len(), path.display());
        }
        None => print!("{rendered}"),
    }
    Ok(())
}
