//! Throughput measurement.
//!
//! Hits are loaded (or generated) into memory before the clock starts. Each
//! run replays `nrep` copies of the data, copy `k` shifted by `k * period`,
//! through a backend and stops when the last cluster reaches the sink. Every
//! point is measured `runs` times. The chunked backend reports time from its
//! second buffer onward, so its first buffer acts as warm-up.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use pixstorm::datagen::{default_period, generate, DatasetPreset, GeneratorConfig};
use pixstorm::ingest_sort::{load_hits, Geometry};
use pixstorm::{Hit, Nanos};
use serde::Serialize;

use crate::backend::{self, capped, thread_cap, HitSource, Input};
use crate::commands::emit_json;
use crate::{Backend, BenchArgs, CliResult, Failure};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize)]
pub struct BenchConfig {
    pub variant: pixstorm::serial_clusterer::Variant,
    pub dt_max_ns: Nanos,
    pub split_window_size_ns: Nanos,
    pub t_unsortedness_ns: Nanos,
    pub requested_parallelism: u64,
    /// Lanes (pipeline) or workers (chunked); 1 for serial.
    pub parallelism: usize,
    pub nrep: u64,
    pub period_ns: Nanos,
    pub buffer_hits: usize,
    pub buffer_threshold: usize,
    pub t_closing_ns: Nanos,
    pub fast_reject: bool,
    pub ordered_output: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub backend: Backend,
    pub config: BenchConfig,
    /// Mean of `per_run_times`.
    pub wall_time_ns: u64,
    pub hits_processed: u64,
    /// `hits_processed / wall_time_ns * 1e3`.
    pub throughput_mhits: f64,
    pub repetitions: u64,
    pub per_run_times: Vec<u64>,
    pub cluster_count: u64,
    pub warmup_excluded: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Machine {
    pub logical_cpus: usize,
    pub cpu_model: Option<String>,
    pub os: &'static str,
    pub arch: &'static str,
    pub thread_cap: Option<usize>,
}

impl Machine {
    pub fn detect(thread_cap: Option<usize>) -> Self {
        let cpu_model = std::fs::read_to_string("/proc/cpuinfo").ok().and_then(|s| {
            s.lines().find(|l| l.starts_with("model name")).and_then(|l| l.split(':').nth(1)).map(|m| m.trim().to_string())
        });
        Self {
            logical_cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            cpu_model,
            os: std::env::consts::OS,
            arch: std::env::consts::ARCH,
            thread_cap,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DatasetInfo {
    pub source: String,
    pub hits: usize,
    pub max_toa_ns: Nanos,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchSuite {
    pub schema_version: u32,
    pub machine: Machine,
    pub dataset: DatasetInfo,
    pub points: Vec<BenchReport>,
}

#[derive(Serialize)]
struct CsvRow {
    backend: Backend,
    parallelism: usize,
    requested_parallelism: u64,
    nrep: u64,
    repetitions: u64,
    hits_processed: u64,
    wall_time_ns: u64,
    min_run_ns: u64,
    max_run_ns: u64,
    throughput_mhits: f64,
    cluster_count: u64,
}

/// Lazily replays `hits` `nrep` times with a time offset.
fn replay(hits: Arc<Vec<Hit>>, nrep: u64, period: Nanos) -> HitSource {
    Box::new((0..nrep).flat_map(move |k| {
        let hits = hits.clone();
        let shift = k * period;
        (0..hits.len()).map(move |i| Ok(Hit { toa: hits[i].toa + shift, ..hits[i] }))
    }))
}

fn load(a: &BenchArgs) -> CliResult<(String, Geometry, Vec<Hit>)> {
    match (&a.input, &a.preset) {
        (Some(path), _) => {
            let (g, hits) = load_hits(path)?;
            Ok((path.display().to_string(), g, hits))
        }
        (None, Some(name)) => {
            let preset = DatasetPreset::by_name(name)?;
            let cfg = GeneratorConfig { dt_max: a.opts.dtmax, unsortedness: a.opts.unsortedness, ..GeneratorConfig::default() };
            let data = generate(preset, a.hits as usize, a.seed, &cfg)?;
            Ok((format!("preset:{} seed:{}", preset.name, a.seed), Geometry { width: cfg.width, height: cfg.height }, data.hits))
        }
        (None, None) => Err(Failure::Usage("give --in or --preset".into())),
    }
}

pub fn bench(a: &BenchArgs) -> CliResult<()> {
    let cap = thread_cap()?;
    let (source, geometry, hits) = load(a)?;
    if hits.is_empty() {
        return Err(Failure::Usage("benchmark input holds no hits".into()));
    }
    let nrep = a.nrep.unwrap_or(if a.opts.backend == Backend::Chunked { 250 } else { 25 });
    let max_toa = hits.iter().map(|h| h.toa).max().unwrap_or(0);
    let period = a.period.unwrap_or_else(|| default_period(&hits, a.opts.dtmax));
    if period <= max_toa {
        return Err(Failure::Usage(format!("--period {period} must exceed the max toa {max_toa}")));
    }
    if a.opts.raw {
        return Err(Failure::Usage("bench takes calibrated hit files".into()));
    }
    let det = backend::detector(&a.opts, geometry)?;
    let sweep: Vec<u64> = match a.opts.backend {
        Backend::Serial => vec![1],
        Backend::Pipeline => a.lanes.clone(),
        Backend::Chunked => a.workers.clone(),
    };
    let hits = Arc::new(hits);
    let mut points = Vec::new();
    for requested in sweep {
        let parallelism = capped(requested, cap);
        let mut times = Vec::new();
        let mut measured_hits = None;
        let mut cluster_count = None;
        for _ in 0..a.runs {
            let sunk = Arc::new(AtomicU64::new(0));
            let counter = sunk.clone();
            let outcome = backend::run(&a.opts, parallelism, det.clone(), Input::Hits(replay(hits.clone(), nrep, period)), move |_| {
                counter.fetch_add(1, Ordering::Relaxed);
                Ok(())
            })?;
            if outcome.hits != hits.len() as u64 * nrep || sunk.load(Ordering::Relaxed) != outcome.clusters {
                return Err(Failure::Runtime(format!(
                    "run processed {} of {} hits",
                    outcome.hits,
                    hits.len() as u64 * nrep
                )));
            }
            for (slot, v) in [(&mut measured_hits, outcome.measured_hits), (&mut cluster_count, outcome.clusters)] {
                if slot.is_some_and(|s| s != v) {
                    return Err(Failure::Runtime("runs disagree on hit or cluster counts".into()));
                }
                *slot = Some(v);
            }
            times.push(outcome.measured_ns.max(1));
        }
        let wall = (times.iter().map(|&t| t as u128).sum::<u128>() / times.len() as u128) as u64;
        let hits_processed = measured_hits.unwrap_or(0);
        points.push(BenchReport {
            backend: a.opts.backend,
            config: BenchConfig {
                variant: a.opts.variant,
                dt_max_ns: a.opts.dtmax,
                split_window_size_ns: a.opts.window,
                t_unsortedness_ns: a.opts.unsortedness,
                requested_parallelism: requested,
                parallelism,
                nrep,
                period_ns: period,
                buffer_hits: a.opts.buffer_hits,
                buffer_threshold: a.opts.buffer_threshold,
                t_closing_ns: a.opts.t_closing,
                fast_reject: !a.opts.no_fast_reject,
                ordered_output: !a.opts.unordered,
            },
            wall_time_ns: wall,
            hits_processed,
            throughput_mhits: hits_processed as f64 / wall as f64 * 1e3,
            repetitions: a.runs,
            per_run_times: times,
            cluster_count: cluster_count.unwrap_or(0),
            warmup_excluded: a.opts.backend == Backend::Chunked && hits_processed < hits.len() as u64 * nrep,
        });
    }
    let suite = BenchSuite {
        schema_version: SCHEMA_VERSION,
        machine: Machine::detect(cap),
        dataset: DatasetInfo { source, hits: hits.len(), max_toa_ns: max_toa },
        points,
    };
    if let Some(path) = &a.csv {
        write_csv(path, &suite.points)?;
    }
    emit_json(&suite, a.out.as_deref())
}

fn write_csv(path: &std::path::Path, points: &[BenchReport]) -> CliResult<()> {
    let err = |e: csv::Error| Failure::Runtime(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for p in points {
        w.serialize(CsvRow {
            backend: p.backend,
            parallelism: p.config.parallelism,
            requested_parallelism: p.config.requested_parallelism,
            nrep: p.config.nrep,
            repetitions: p.repetitions,
            hits_processed: p.hits_processed,
            wall_time_ns: p.wall_time_ns,
            min_run_ns: p.per_run_times.iter().copied().min().unwrap_or(0),
            max_run_ns: p.per_run_times.iter().copied().max().unwrap_or(0),
            throughput_mhits: p.throughput_mhits,
            cluster_count: p.cluster_count,
        })
        .map_err(err)?;
    }
    w.flush().map_err(|e| Failure::Runtime(e.to_string()))
}
