//! Benchmark sweeps over runtime configurations: batch/padding grids across
//! tensor-parallel, pipeline, padding-removal, and pooling settings, with
//! latency/throughput rows, communication counters, and stall accounting.
//!
//! Every grid point is cross-checked against the serial reference before it
//! is timed; a sweep can never report numbers for a wrong answer. With the
//! virtual clock, counter and timing columns are bit-reproducible from the
//! config and seed.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::comm::DataPlaneMode;
use crate::engine::{initialize, PoolConfig, RuntimeConfig};
use crate::error::{Error, Result};
use crate::mempool::LayerCost;
use crate::model::{max_abs_diff_valid, Batch, ModelConfig, PAD_TOKEN};
use crate::pipeline::VirtualCost;

/// Which timebase the sweep reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    Virtual,
    Real,
}

/// How per-sequence valid lengths are drawn for generated batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LengthMode {
    /// Every sequence uses the full padded length.
    Full,
    /// Every sequence is exactly half the padded length.
    Half,
    /// Uniform random in [1, pad].
    #[default]
    Random,
}

fn default_tp() -> Vec<usize> {
    vec![1]
}
fn default_pp() -> Vec<usize> {
    vec![1]
}
fn default_drce() -> Vec<bool> {
    vec![false]
}
fn default_pool_modes() -> Vec<bool> {
    vec![false]
}
fn default_batch_sizes() -> Vec<usize> {
    vec![1, 4, 16, 32]
}
fn default_pad_sizes() -> Vec<usize> {
    vec![64, 128]
}
fn default_warmup() -> usize {
    3
}
fn default_measured() -> usize {
    10
}
fn default_batches_per_run() -> usize {
    8
}
fn default_clock() -> ClockMode {
    ClockMode::Virtual
}

/// Grid specification: the `--config` file of the bench tool.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepConfig {
    pub model: ModelConfig,
    #[serde(default = "default_tp")]
    pub tp: Vec<usize>,
    #[serde(default = "default_pp")]
    pub pp: Vec<usize>,
    #[serde(default = "default_drce")]
    pub drce: Vec<bool>,
    #[serde(default = "default_pool_modes")]
    pub pool_modes: Vec<bool>,
    #[serde(default)]
    pub pool: Option<PoolConfig>,
    #[serde(default = "default_batch_sizes")]
    pub batch_sizes: Vec<usize>,
    #[serde(default = "default_pad_sizes")]
    pub pad_sizes: Vec<usize>,
    #[serde(default = "default_warmup")]
    pub warmup_runs: usize,
    #[serde(default = "default_measured")]
    pub measured_runs: usize,
    #[serde(default = "default_batches_per_run")]
    pub batches_per_run: usize,
    #[serde(default = "default_clock")]
    pub clock: ClockMode,
    #[serde(default)]
    pub lengths: LengthMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data_plane: DataPlaneMode,
    /// Cost model for the virtual clock; a small per-layer cost with a
    /// hundredth of it per transfer when unset.
    #[serde(default)]
    pub cost: Option<VirtualCost>,
}

impl SweepConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("bad sweep config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    fn virtual_cost(&self) -> VirtualCost {
        self.cost.unwrap_or(VirtualCost {
            layer: LayerCost::Fixed(1e-3),
            stage_transfer: 1e-5,
        })
    }
}

/// One measured grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub tp: usize,
    pub pp: usize,
    pub drce: bool,
    pub pool: bool,
    pub batch_size: usize,
    pub pad_size: usize,
    pub p50_latency_s: f64,
    pub p95_latency_s: f64,
    pub batches_per_s: f64,
    pub tokens_per_s: f64,
    pub all_reduce: u64,
    pub p2p: u64,
    pub linear_macs: u64,
    pub stall_s: f64,
    pub drce_ratio: f64,
    pub seed: u64,
}

pub const CSV_HEADER: &str = "tp,pp,drce,pool,batch_size,pad_size,p50_latency_s,p95_latency_s,\
batches_per_s,tokens_per_s,all_reduce,p2p,linear_macs,stall_s,drce_ratio,seed";

/// A full sweep result. The JSON schema is versioned; CSV column order is
/// fixed to [`CSV_HEADER`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema_version: u32,
    pub clock: ClockMode,
    pub rows: Vec<BenchRow>,
}

pub const SCHEMA_VERSION: u32 = 1;

/// Seeded batches for one grid point.
pub fn generate_batches(
    model: &ModelConfig,
    count: usize,
    b: usize,
    s_pad: usize,
    lengths: LengthMode,
    seed: u64,
) -> Vec<Batch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let mut rows = Vec::with_capacity(b);
            let mut lens = Vec::with_capacity(b);
            for _ in 0..b {
                let len = match lengths {
                    LengthMode::Full => s_pad,
                    LengthMode::Half => (s_pad / 2).max(1),
                    LengthMode::Random => rng.gen_range(1..=s_pad),
                };
                let mut row = vec![PAD_TOKEN; s_pad];
                for slot in row.iter_mut().take(len) {
                    *slot = rng.gen_range(0..model.vocab_size as u32);
                }
                rows.push(row);
                lens.push(len);
            }
            Batch::new(i as u64, rows, lens).expect("generated batch is well-formed")
        })
        .collect()
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let idx = ((sorted.len() as f64 - 1.0) * p).round() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

/// Run the full grid. Any correctness mismatch aborts the sweep naming the
/// grid point.
pub fn run_sweep(cfg: &SweepConfig) -> Result<BenchReport> {
    let mut rows = Vec::new();
    for &tp in &cfg.tp {
        for &pp in &cfg.pp {
            for &drce in &cfg.drce {
                for &pool_on in &cfg.pool_modes {
                    for &batch_size in &cfg.batch_sizes {
                        for &pad_size in &cfg.pad_sizes {
                            rows.push(run_grid_point(
                                cfg, tp, pp, drce, pool_on, batch_size, pad_size,
                            )?);
                        }
                    }
                }
            }
        }
    }
    Ok(BenchReport {
        schema_version: SCHEMA_VERSION,
        clock: cfg.clock,
        rows,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_grid_point(
    cfg: &SweepConfig,
    tp: usize,
    pp: usize,
    drce: bool,
    pool_on: bool,
    batch_size: usize,
    pad_size: usize,
) -> Result<BenchRow> {
    let point = format!(
        "grid point tp={tp} pp={pp} drce={drce} pool={pool_on} batch={batch_size} pad={pad_size}"
    );
    let mut rt_cfg = RuntimeConfig::new(cfg.model.clone(), tp, pp);
    rt_cfg.drce = drce;
    rt_cfg.data_plane = cfg.data_plane;
    if pool_on {
        rt_cfg.pool = Some(cfg.pool.clone().unwrap_or(PoolConfig {
            local_capacity_layers: (cfg.model.num_layers / pp).div_ceil(2).max(1),
            prefetch_depth: 1,
            peer_devices: 1,
            peer_capacity_bytes: None,
            bandwidth: Default::default(),
        }));
    }
    if cfg.clock == ClockMode::Virtual {
        rt_cfg.cost = Some(cfg.virtual_cost());
    }
    let runtime =
        initialize(rt_cfg).map_err(|e| Error::Config(format!("{point}: init failed: {e}")))?;

    let batches = generate_batches(
        &cfg.model,
        cfg.batches_per_run,
        batch_size,
        pad_size,
        cfg.lengths,
        cfg.seed
            ^ (tp as u64)
            ^ ((pp as u64) << 8)
            ^ ((batch_size as u64) << 16)
            ^ ((pad_size as u64) << 24),
    );
    let valid_tokens: usize = batches.iter().map(Batch::valid_tokens).sum();
    let drce_ratio = valid_tokens as f64 / (cfg.batches_per_run * batch_size * pad_size) as f64;

    // correctness gate before any timing
    for batch in &batches {
        let want = runtime.serial_reference(batch)?;
        let got = runtime.submit(batch.clone())?.wait()?;
        let diff = max_abs_diff_valid(&got, &want, batch)?;
        if diff > 1e-9 {
            runtime.shutdown();
            return Err(Error::Validation(format!(
                "{point}: output diverges from the serial reference by {diff:e}"
            )));
        }
    }

    let run_once = |runtime: &crate::engine::Runtime| -> Result<(Vec<f64>, f64)> {
        // latencies per batch plus the run's span in the active timebase
        let start = Instant::now();
        let mut handles = Vec::with_capacity(batches.len());
        let mut submit_at = Vec::with_capacity(batches.len());
        for batch in &batches {
            submit_at.push(start.elapsed().as_secs_f64());
            handles.push(runtime.submit(batch.clone())?);
        }
        let mut latencies = Vec::with_capacity(handles.len());
        match cfg.clock {
            ClockMode::Real => {
                let mut last_done = 0.0f64;
                for (h, sub) in handles.into_iter().zip(submit_at) {
                    h.wait()?;
                    let done = start.elapsed().as_secs_f64();
                    latencies.push(done - sub);
                    last_done = done;
                }
                Ok((latencies, last_done))
            }
            ClockMode::Virtual => {
                // completion spacing in virtual time; the span is the
                // virtual makespan delta of this run
                let mut vts = Vec::with_capacity(handles.len());
                for h in handles {
                    let (_, vt) = h.wait_timed()?;
                    vts.push(vt);
                }
                let first = vts.first().copied().unwrap_or(0.0);
                let last = vts.last().copied().unwrap_or(0.0);
                let mut prev = first;
                for (i, &vt) in vts.iter().enumerate() {
                    if i == 0 {
                        latencies.push(0.0); // fill latency folded into the span
                    } else {
                        latencies.push(vt - prev);
                    }
                    prev = vt;
                }
                // span measured from the previous stream position
                Ok((latencies, last))
            }
        }
    };

    for _ in 0..cfg.warmup_runs {
        run_once(&runtime)?;
    }

    let mut all_latencies = Vec::new();
    let mut spans = Vec::new();
    let mut prev_virtual_end = None::<f64>;
    for _ in 0..cfg.measured_runs {
        let (lats, end) = run_once(&runtime)?;
        let span = match (cfg.clock, prev_virtual_end) {
            (ClockMode::Virtual, Some(prev)) => end - prev,
            (ClockMode::Virtual, None) => {
                // first measured run: span counted from the stream position
                // at the end of warmup
                prev_virtual_end = Some(end);
                spans.push(f64::NAN); // replaced below
                all_latencies.extend(lats.into_iter().skip(1));
                continue;
            }
            (ClockMode::Real, _) => end,
        };
        prev_virtual_end = Some(end);
        spans.push(span);
        all_latencies.extend(lats.into_iter().skip(1));
    }
    // drop the placeholder first virtual span if present
    let spans: Vec<f64> = spans.into_iter().filter(|s| s.is_finite()).collect();

    // shut down first so every worker has quiesced, then read the
    // whole-lifetime instrumentation (precheck + warmup + measured)
    runtime.shutdown();
    let counters = runtime.counter_totals();
    let macs = runtime.telemetry().linear_macs();
    let stall_s = runtime.telemetry().total_stall_time();

    all_latencies.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut sorted_spans = spans.clone();
    sorted_spans.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median_span = percentile(&sorted_spans, 0.5);
    let batches_per_s = if median_span > 0.0 {
        cfg.batches_per_run as f64 / median_span
    } else {
        0.0
    };
    let tokens_per_s = if median_span > 0.0 {
        valid_tokens as f64 / median_span
    } else {
        0.0
    };

    Ok(BenchRow {
        tp,
        pp,
        drce,
        pool: pool_on,
        batch_size,
        pad_size,
        p50_latency_s: percentile(&all_latencies, 0.5),
        p95_latency_s: percentile(&all_latencies, 0.95),
        batches_per_s,
        tokens_per_s,
        all_reduce: counters.all_reduce,
        p2p: counters.p2p_send,
        linear_macs: macs,
        stall_s,
        drce_ratio,
        seed: cfg.seed,
    })
}

/// Output format for [`emit`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmitFormat {
    Csv,
    Json,
    Table,
}

/// Render a report. CSV columns follow [`CSV_HEADER`]; JSON is the versioned
/// schema; the table is for terminals.
pub fn emit(report: &BenchReport, format: EmitFormat) -> Result<String> {
    match format {
        EmitFormat::Csv => {
            let mut out = String::from(CSV_HEADER);
            out.push('\n');
            for r in &report.rows {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                    r.tp,
                    r.pp,
                    r.drce,
                    r.pool,
                    r.batch_size,
                    r.pad_size,
                    r.p50_latency_s,
                    r.p95_latency_s,
                    r.batches_per_s,
                    r.tokens_per_s,
                    r.all_reduce,
                    r.p2p,
                    r.linear_macs,
                    r.stall_s,
                    r.drce_ratio,
                    r.seed
                ));
            }
            Ok(out)
        }
        EmitFormat::Json => {
            serde_json::to_string_pretty(report).map_err(|e| Error::Io(e.to_string()))
        }
        EmitFormat::Table => {
            let mut out = String::new();
            out.push_str(&format!(
                "{:>3} {:>3} {:>5} {:>5} {:>6} {:>5} {:>12} {:>12} {:>11} {:>12} {:>10} {:>8} {:>12} {:>9} {:>6}\n",
                "tp", "pp", "drce", "pool", "batch", "pad", "p50_lat_s", "p95_lat_s",
                "batches/s", "tokens/s", "all_reduce", "p2p", "linear_macs", "stall_s", "ratio"
            ));
            for r in &report.rows {
                out.push_str(&format!(
                    "{:>3} {:>3} {:>5} {:>5} {:>6} {:>5} {:>12.6} {:>12.6} {:>11.2} {:>12.2} {:>10} {:>8} {:>12} {:>9.4} {:>6.3}\n",
                    r.tp, r.pp, r.drce, r.pool, r.batch_size, r.pad_size,
                    r.p50_latency_s, r.p95_latency_s, r.batches_per_s, r.tokens_per_s,
                    r.all_reduce, r.p2p, r.linear_macs, r.stall_s, r.drce_ratio
                ));
            }
            Ok(out)
        }
    }
}

/// Parse a JSON report back (round-trip of [`emit`] with Json).
pub fn read_report_json(text: &str) -> Result<BenchReport> {
    serde_json::from_str(text).map_err(|e| Error::Io(format!("bad report json: {e}")))
}
