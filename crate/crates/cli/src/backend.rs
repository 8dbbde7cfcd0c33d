//! Runs any backend over a hit source.

use std::time::{Duration, Instant};

use pixstorm::chunked_clusterer::{run_chunked_pipeline, ChunkedConfig};
use pixstorm::ingest_sort::{time_sort, Geometry};
use pixstorm::pipeline::{build_graph, PipelineConfig, PipelineInput};
use pixstorm::serial_clusterer::MatrixClusterer;
use pixstorm::{Cluster, ClusterDefinition, DetectorConfig, Hit, RawHit};
use serde_json::Value;

use crate::{Backend, CliResult, ClusterOpts, Failure};

pub type HitSource = Box<dyn Iterator<Item = pixstorm::Result<Hit>> + Send>;
pub type RawSource = Box<dyn Iterator<Item = pixstorm::Result<RawHit>> + Send>;

pub enum Input {
    Hits(HitSource),
    Raw(RawSource),
}

pub struct RunOutcome {
    pub hits: u64,
    pub clusters: u64,
    pub elapsed: Duration,
    /// Hits and time that count towards throughput; the chunked backend
    /// leaves out its first buffer.
    pub measured_hits: u64,
    pub measured_ns: u64,
    pub detail: Value,
}

/// Worker cap from `PIXSTORM_THREADS`.
pub fn thread_cap() -> CliResult<Option<usize>> {
    match std::env::var("PIXSTORM_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Failure::Usage(format!("PIXSTORM_THREADS must be a positive integer, got `{v}`"))),
        },
    }
}

pub fn capped(requested: u64, cap: Option<usize>) -> usize {
    let n = usize::try_from(requested).unwrap_or(usize::MAX);
    cap.map_or(n, |c| n.min(c))
}

pub fn definition(opts: &ClusterOpts) -> CliResult<ClusterDefinition> {
    Ok(ClusterDefinition::new(opts.variant, opts.dtmax)?)
}

pub fn detector(opts: &ClusterOpts, geometry: Geometry) -> CliResult<DetectorConfig> {
    match &opts.detector {
        Some(p) => Ok(DetectorConfig::from_toml_file(p)?),
        None => Ok(DetectorConfig::new(geometry.width, geometry.height, 25.0, 1.5625)?),
    }
}

pub fn pipeline_config(opts: &ClusterOpts, lanes: usize) -> CliResult<PipelineConfig> {
    let mut cfg = PipelineConfig::new(definition(opts)?, lanes);
    cfg.split_window_size = opts.window;
    cfg.t_unsortedness = opts.unsortedness;
    cfg.concatenate = !opts.unordered;
    cfg.fast_reject = !opts.no_fast_reject;
    cfg.validate()?;
    Ok(cfg)
}

pub fn chunked_config(opts: &ClusterOpts, workers: usize, det: &DetectorConfig) -> CliResult<ChunkedConfig> {
    let mut cfg = ChunkedConfig::new(definition(opts)?, workers);
    cfg.width = det.width;
    cfg.height = det.height;
    cfg.fill.b = opts.buffer_hits;
    cfg.fill.b_t = opts.buffer_threshold;
    cfg.fill.t_closing = opts.t_closing;
    cfg.fill.t_unsortedness = opts.unsortedness;
    cfg.fill.validate()?;
    Ok(cfg)
}

fn calibrated(src: RawSource, det: DetectorConfig) -> HitSource {
    Box::new(src.map(move |r| r.and_then(|r| det.calibrate(&r))))
}

/// Clusters `input` with the chosen backend, passing clusters to `sink`.
/// `parallelism` is the lane count for the pipeline and the worker count
/// for the chunked backend.
pub fn run<S>(opts: &ClusterOpts, parallelism: usize, det: DetectorConfig, input: Input, sink: S) -> CliResult<RunOutcome>
where
    S: FnMut(Cluster) -> pixstorm::Result<()> + Send + 'static,
{
    match opts.backend {
        Backend::Serial => {
            let src = match input {
                Input::Hits(s) => s,
                Input::Raw(s) => calibrated(s, det.clone()),
            };
            run_serial(opts, &det, src, sink)
        }
        Backend::Chunked => {
            let src = match input {
                Input::Hits(s) => s,
                Input::Raw(s) => calibrated(s, det.clone()),
            };
            run_chunked(opts, parallelism, &det, src, sink)
        }
        Backend::Pipeline => match input {
            Input::Hits(s) => run_pipeline(opts, parallelism, det, s, sink),
            Input::Raw(s) => run_pipeline(opts, parallelism, det, s, sink),
        },
    }
}

fn run_serial<S>(opts: &ClusterOpts, det: &DetectorConfig, src: HitSource, mut sink: S) -> CliResult<RunOutcome>
where
    S: FnMut(Cluster) -> pixstorm::Result<()>,
{
    let def = definition(opts)?;
    let start = Instant::now();
    let mut clusterer = MatrixClusterer::new(def, det.width, det.height);
    let mut out = Vec::new();
    let mut clusters = 0u64;
    let mut drain = |out: &mut Vec<Cluster>| -> pixstorm::Result<()> {
        for c in out.drain(..) {
            clusters += 1;
            sink(c)?;
        }
        Ok(())
    };
    for hit in time_sort(src, opts.unsortedness) {
        clusterer.process_hit(hit?, &mut out)?;
        drain(&mut out)?;
    }
    clusterer.flush(&mut out);
    drain(&mut out)?;
    let elapsed = start.elapsed();
    let hits = clusterer.hits_in();
    Ok(RunOutcome {
        hits,
        clusters,
        elapsed,
        measured_hits: hits,
        measured_ns: elapsed.as_nanos() as u64,
        detail: Value::Null,
    })
}

fn run_chunked<S>(opts: &ClusterOpts, workers: usize, det: &DetectorConfig, src: HitSource, sink: S) -> CliResult<RunOutcome>
where
    S: FnMut(Cluster) -> pixstorm::Result<()>,
{
    let cfg = chunked_config(opts, workers, det)?;
    let start = Instant::now();
    let stats = run_chunked_pipeline(src, &cfg, sink)?;
    let elapsed = start.elapsed();
    let (measured_hits, measured_ns) =
        if stats.steady_hits > 0 { (stats.steady_hits, stats.steady_ns) } else { (stats.hits, elapsed.as_nanos() as u64) };
    Ok(RunOutcome {
        hits: stats.hits,
        clusters: stats.clusters,
        elapsed,
        measured_hits,
        measured_ns,
        detail: serde_json::to_value(&stats).map_err(|e| Failure::Runtime(e.to_string()))?,
    })
}

fn run_pipeline<T, S>(
    opts: &ClusterOpts,
    lanes: usize,
    det: DetectorConfig,
    src: Box<dyn Iterator<Item = pixstorm::Result<T>> + Send>,
    sink: S,
) -> CliResult<RunOutcome>
where
    T: PipelineInput,
    S: FnMut(Cluster) -> pixstorm::Result<()> + Send + 'static,
{
    let cfg = pipeline_config(opts, lanes)?;
    let start = Instant::now();
    let stats = build_graph(cfg, det, src, sink)?.join()?;
    let elapsed = start.elapsed();
    Ok(RunOutcome {
        hits: stats.hits_in,
        clusters: stats.clusters_out,
        elapsed,
        measured_hits: stats.hits_in,
        measured_ns: elapsed.as_nanos() as u64,
        detail: serde_json::to_value(&stats).map_err(|e| Failure::Runtime(e.to_string()))?,
    })
}
