//! Multi-threaded clustering graph.
//!
//! ```text
//! reader ─┬─> lane 0: calibrate+sort ─> cluster ─┬─> merge 0 ─┐
//!         ├─> lane 1: calibrate+sort ─> cluster ─┼─> merge 1 ─┼─> sink
//!         └─> ...                                └─> ...      ┘
//! ```
//!
//! The reader cuts the stream into fixed time windows and hands window `i`
//! to lane `i mod n`. Each lane sorts its hits, clusters every window on
//! its own and routes the clusters: those near the upper border of window
//! `i` go to merge worker `(i+1) mod n`, those near the lower border to
//! worker `i mod n`, together with their neighbors across the border.
//! Other clusters go to the worker owning their half of the window and pass
//! through unmerged.
//!
//! Streams carry progress bounds (no later item has a smaller first toa),
//! so merge workers can interleave their two inputs in order and the sink
//! can optionally restore global order with a k-way merge.
//!
//! For the local variant the merge is exact. For the global and static
//! variants clusters are cut at window borders and rejoined when an
//! adjacent pair exists (global) or the joined extent fits in `dt_max`
//! (static), which can differ from clustering the whole stream at once.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, Receiver, Sender};
use serde::{Deserialize, Serialize};

use crate::cluster::Cluster;
use crate::error::{Error, Result};
use crate::hit_model::{DetectorConfig, Hit, Nanos, RawHit};
use crate::ingest_sort::TimeSorter;
use crate::merger::{route_to_merge_worker, Half, OpenClusterStore};
use crate::serial_clusterer::{ClusterDefinition, MatrixClusterer};
use crate::temporal_splitter::{SplitConfig, TimeWindow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub n_data_lanes: usize,
    pub split_window_size: Nanos,
    pub def: ClusterDefinition,
    pub t_unsortedness: Nanos,
    /// Messages per channel.
    pub channel_capacity: usize,
    /// Hits per reader message.
    pub batch_size: usize,
    /// Restore global first-toa order in the sink.
    pub concatenate: bool,
    /// Run the temporal and bounding-box stages before the full merge check.
    pub fast_reject: bool,
}

impl PipelineConfig {
    pub fn new(def: ClusterDefinition, n_data_lanes: usize) -> Self {
        Self {
            n_data_lanes,
            split_window_size: 10_000,
            def,
            t_unsortedness: 1_000,
            channel_capacity: 16,
            batch_size: 1024,
            concatenate: true,
            fast_reject: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        SplitConfig::new(self.split_window_size, self.def.dt_max, self.n_data_lanes)?;
        if self.channel_capacity == 0 || self.batch_size == 0 {
            return Err(Error::Config("channel capacity and batch size must be positive".into()));
        }
        Ok(())
    }

    fn window(&self, toa: Nanos) -> u64 {
        toa / self.split_window_size
    }
}

/// Records the reader can route and the lanes can calibrate.
pub trait PipelineInput: Copy + Send + 'static {
    fn toa_ns(&self, det: &DetectorConfig) -> Nanos;
    fn calibrate(&self, det: &DetectorConfig) -> Result<Hit>;
}

impl PipelineInput for Hit {
    fn toa_ns(&self, _det: &DetectorConfig) -> Nanos {
        self.toa
    }

    fn calibrate(&self, det: &DetectorConfig) -> Result<Hit> {
        if !det.contains(self.x, self.y) {
            return Err(Error::CoordinateOutOfRange { x: self.x, y: self.y, width: det.width, height: det.height });
        }
        Ok(*self)
    }
}

impl PipelineInput for RawHit {
    fn toa_ns(&self, det: &DetectorConfig) -> Nanos {
        det.toa_ns(self)
    }

    fn calibrate(&self, det: &DetectorConfig) -> Result<Hit> {
        det.calibrate(self)
    }
}

const STAGE_READER: usize = 0;
const STAGE_SORT: usize = 1;
const STAGE_CLUSTER: usize = 2;
const STAGE_MERGE: usize = 3;
const STAGE_SINK: usize = 4;
const STAGE_NAMES: [&str; 5] = ["reader", "sort", "cluster", "merge", "sink"];

#[derive(Default)]
struct Counters {
    hits_in: AtomicU64,
    hits_sorted: AtomicU64,
    clusters_lane: AtomicU64,
    border_clusters: AtomicU64,
    precondition_violations: AtomicU64,
    merges: AtomicU64,
    clusters_out: AtomicU64,
    hits_out: AtomicU64,
    busy_ns: [AtomicU64; 5],
    max_queue: [AtomicUsize; 5],
}

impl Counters {
    fn busy(&self, stage: usize, since: Instant) {
        self.busy_ns[stage].fetch_add(since.elapsed().as_nanos() as u64, Ordering::Relaxed);
    }

    fn queue<T>(&self, stage: usize, rx: &Receiver<T>) {
        self.max_queue[stage].fetch_max(rx.len(), Ordering::Relaxed);
    }
}

/// Live counter values.
#[derive(Debug, Default, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterSnapshot {
    pub hits_in: u64,
    pub hits_sorted: u64,
    pub clusters_out: u64,
    pub hits_out: u64,
    /// Largest observed input queue length (messages) per stage.
    pub max_queue_depth: Vec<(String, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStat {
    pub stage: String,
    pub threads: usize,
    pub busy_ns: u64,
    /// Busy time over wall time, averaged over the stage's threads.
    pub busy_fraction: f64,
    pub max_queue_depth: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineStats {
    pub n_data_lanes: usize,
    pub wall_ns: u64,
    pub hits_in: u64,
    pub hits_out: u64,
    pub clusters_out: u64,
    pub lane_clusters: u64,
    pub border_clusters: u64,
    pub merges: u64,
    /// Clusters near both borders of their window.
    pub precondition_violations: u64,
    pub throughput_mhits: f64,
    pub aborted: bool,
    pub stages: Vec<StageStat>,
}

impl PipelineStats {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stats serialize")
    }
}

enum LaneIn<T> {
    Batch { hits: Vec<T>, watermark: Nanos },
    Watermark(Nanos),
}

struct Sorted {
    hits: Vec<Hit>,
    /// Every later hit has a toa strictly above this.
    safe: Option<Nanos>,
}

enum WorkerItem {
    Clusters(Vec<(Cluster, bool)>),
    /// No later item on this stream has a smaller first toa.
    Progress(Nanos),
}

struct WorkerIn {
    stream: usize,
    item: WorkerItem,
}

struct SinkIn {
    worker: usize,
    clusters: Vec<Cluster>,
    bound: Nanos,
}

/// A running graph.
pub struct PipelineHandle {
    abort: Arc<AtomicBool>,
    counters: Arc<Counters>,
    threads: Vec<(String, usize, JoinHandle<Result<()>>)>,
    start: Instant,
    n_data_lanes: usize,
}

fn stage_result(name: &str, r: std::thread::Result<Result<()>>) -> Result<()> {
    match r {
        Ok(Ok(())) | Ok(Err(Error::Aborted)) => Ok(()),
        Ok(Err(e)) => Err(Error::PipelineFailure { stage: name.to_string(), msg: e.to_string() }),
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            Err(Error::PipelineFailure { stage: name.to_string(), msg: format!("worker panicked: {msg}") })
        }
    }
}

impl PipelineHandle {
    /// Asks every stage to stop. Already emitted clusters are complete.
    pub fn abort(&self) {
        self.abort.store(true, Ordering::SeqCst);
    }

    pub fn counters(&self) -> CounterSnapshot {
        let c = &self.counters;
        CounterSnapshot {
            hits_in: c.hits_in.load(Ordering::Relaxed),
            hits_sorted: c.hits_sorted.load(Ordering::Relaxed),
            clusters_out: c.clusters_out.load(Ordering::Relaxed),
            hits_out: c.hits_out.load(Ordering::Relaxed),
            max_queue_depth: STAGE_NAMES
                .iter()
                .enumerate()
                .map(|(i, n)| (n.to_string(), c.max_queue[i].load(Ordering::Relaxed)))
                .collect(),
        }
    }

    /// Waits for every stage. The first failing stage is reported.
    pub fn join(self) -> Result<PipelineStats> {
        let mut first_err = None;
        for (name, _, t) in self.threads {
            if let Err(e) = stage_result(&name, t.join()) {
                first_err.get_or_insert(e);
            }
        }
        if let Some(e) = first_err {
            return Err(e);
        }
        let wall = self.start.elapsed();
        let c = &self.counters;
        let n = self.n_data_lanes;
        let threads = [1, n, n, n, 1];
        let stages = (0..5)
            .map(|i| {
                let busy = c.busy_ns[i].load(Ordering::Relaxed);
                StageStat {
                    stage: STAGE_NAMES[i].into(),
                    threads: threads[i],
                    busy_ns: busy,
                    busy_fraction: if wall.is_zero() { 0.0 } else { busy as f64 / wall.as_nanos() as f64 / threads[i] as f64 },
                    max_queue_depth: c.max_queue[i].load(Ordering::Relaxed),
                }
            })
            .collect();
        let hits_in = c.hits_in.load(Ordering::Relaxed);
        Ok(PipelineStats {
            n_data_lanes: n,
            wall_ns: wall.as_nanos() as u64,
            hits_in,
            hits_out: c.hits_out.load(Ordering::Relaxed),
            clusters_out: c.clusters_out.load(Ordering::Relaxed),
            lane_clusters: c.clusters_lane.load(Ordering::Relaxed),
            border_clusters: c.border_clusters.load(Ordering::Relaxed),
            merges: c.merges.load(Ordering::Relaxed),
            precondition_violations: c.precondition_violations.load(Ordering::Relaxed),
            throughput_mhits: if hits_in == 0 || wall.is_zero() { 0.0 } else { hits_in as f64 / wall.as_secs_f64() / 1e6 },
            aborted: self.abort.load(Ordering::SeqCst),
            stages,
        })
    }
}

/// Blocks until the graph finishes.
pub fn run_to_completion(handle: PipelineHandle) -> Result<PipelineStats> {
    handle.join()
}

/// Starts the graph. `source` is read on the reader thread, `sink` is
/// called on the sink thread.
pub fn build_graph<T, I, S>(cfg: PipelineConfig, det: DetectorConfig, source: I, sink: S) -> Result<PipelineHandle>
where
    T: PipelineInput,
    I: IntoIterator<Item = Result<T>>,
    I::IntoIter: Send + 'static,
    S: FnMut(Cluster) -> Result<()> + Send + 'static,
{
    cfg.validate()?;
    let n = cfg.n_data_lanes;
    let abort = Arc::new(AtomicBool::new(false));
    let counters = Arc::new(Counters::default());
    let det = Arc::new(det);
    let cap = cfg.channel_capacity;

    let (lane_tx, lane_rx): (Vec<_>, Vec<_>) = (0..n).map(|_| bounded::<LaneIn<T>>(cap)).unzip();
    let (sorted_tx, sorted_rx): (Vec<_>, Vec<_>) = (0..n).map(|_| bounded::<Sorted>(cap)).unzip();
    let (worker_tx, worker_rx): (Vec<_>, Vec<_>) = (0..n).map(|_| bounded::<WorkerIn>(cap)).unzip();
    let (sink_tx, sink_rx) = bounded::<SinkIn>(cap);

    let mut threads = Vec::new();
    let spawn = |name: String, stage: usize, f: Box<dyn FnOnce() -> Result<()> + Send>| {
        let abort = abort.clone();
        let handle = std::thread::Builder::new()
            .name(name.clone())
            .spawn(move || {
                let r = f();
                if r.is_err() {
                    abort.store(true, Ordering::SeqCst);
                }
                r
            })
            .map_err(Error::Io)?;
        Ok::<_, Error>((name, stage, handle))
    };

    {
        let (abort, counters, det) = (abort.clone(), counters.clone(), det.clone());
        let source = source.into_iter();
        threads.push(spawn("reader".into(), STAGE_READER, Box::new(move || reader(cfg, &det, source, lane_tx, &abort, &counters)))?);
    }
    for (k, (rx, tx)) in lane_rx.into_iter().zip(sorted_tx).enumerate() {
        let (abort, counters, det) = (abort.clone(), counters.clone(), det.clone());
        threads.push(spawn(format!("lane{k} sort"), STAGE_SORT, Box::new(move || sorter(cfg, &det, rx, tx, &abort, &counters)))?);
    }
    for (k, rx) in sorted_rx.into_iter().enumerate() {
        let (abort, counters) = (abort.clone(), counters.clone());
        let lower = worker_tx[k].clone();
        let upper = worker_tx[(k + 1) % n].clone();
        let (w, h) = (det.width, det.height);
        threads.push(spawn(
            format!("lane{k} cluster"),
            STAGE_CLUSTER,
            Box::new(move || lane_clusterer(cfg, k, w, h, rx, lower, upper, &abort, &counters)),
        )?);
    }
    drop(worker_tx);
    for (j, rx) in worker_rx.into_iter().enumerate() {
        let (abort, counters) = (abort.clone(), counters.clone());
        let tx = sink_tx.clone();
        let (w, h) = (det.width, det.height);
        threads.push(spawn(format!("merge{j}"), STAGE_MERGE, Box::new(move || merge_worker(cfg, j, w, h, rx, tx, &abort, &counters)))?);
    }
    drop(sink_tx);
    {
        let (abort, counters) = (abort.clone(), counters.clone());
        threads.push(spawn("sink".into(), STAGE_SINK, Box::new(move || sink_stage(cfg, sink_rx, sink, &abort, &counters)))?);
    }
    Ok(PipelineHandle { abort, counters, threads, start: Instant::now(), n_data_lanes: n })
}

fn check_abort(abort: &AtomicBool) -> Result<()> {
    if abort.load(Ordering::Relaxed) {
        Err(Error::Aborted)
    } else {
        Ok(())
    }
}

fn send<M>(tx: &Sender<M>, msg: M) -> Result<()> {
    tx.send(msg).map_err(|_| Error::Aborted)
}

fn reader<T: PipelineInput>(
    cfg: PipelineConfig,
    det: &DetectorConfig,
    source: impl Iterator<Item = Result<T>>,
    lanes: Vec<Sender<LaneIn<T>>>,
    abort: &AtomicBool,
    counters: &Counters,
) -> Result<()> {
    let n = lanes.len();
    let mut pending: Vec<(u64, Vec<T>)> = (0..n).map(|_| (0, Vec::with_capacity(cfg.batch_size))).collect();
    let mut running_max: Option<Nanos> = None;
    let mut announced_window: Option<u64> = None;
    let flush = |lane: usize, pending: &mut Vec<(u64, Vec<T>)>, m: Nanos| -> Result<()> {
        if pending[lane].1.is_empty() {
            return Ok(());
        }
        let hits = std::mem::replace(&mut pending[lane].1, Vec::with_capacity(cfg.batch_size));
        send(&lanes[lane], LaneIn::Batch { hits, watermark: m })
    };
    let mut busy_since = Instant::now();
    let mut count = 0u64;
    for item in source {
        if count % 1024 == 0 {
            check_abort(abort)?;
        }
        count += 1;
        let rec = item?;
        let toa = rec.toa_ns(det);
        let m = running_max.map_or(toa, |m| m.max(toa));
        running_max = Some(m);
        let w = cfg.window(toa);
        let lane = (w % n as u64) as usize;
        if !pending[lane].1.is_empty() && pending[lane].0 != w {
            flush(lane, &mut pending, m)?;
        }
        pending[lane].0 = w;
        pending[lane].1.push(rec);
        if pending[lane].1.len() >= cfg.batch_size {
            flush(lane, &mut pending, m)?;
        }
        let mw = cfg.window(m);
        if announced_window != Some(mw) {
            announced_window = Some(mw);
            for l in 0..n {
                flush(l, &mut pending, m)?;
                send(&lanes[l], LaneIn::Watermark(m))?;
            }
        }
        counters.hits_in.fetch_add(1, Ordering::Relaxed);
        if count % 4096 == 0 {
            counters.busy(STAGE_READER, busy_since);
            busy_since = Instant::now();
        }
    }
    let m = running_max.unwrap_or(0);
    for l in 0..n {
        flush(l, &mut pending, m)?;
    }
    counters.busy(STAGE_READER, busy_since);
    Ok(())
}

fn sorter<T: PipelineInput>(
    cfg: PipelineConfig,
    det: &DetectorConfig,
    rx: Receiver<LaneIn<T>>,
    tx: Sender<Sorted>,
    abort: &AtomicBool,
    counters: &Counters,
) -> Result<()> {
    let mut sorter = TimeSorter::new(cfg.t_unsortedness);
    let mut out = Vec::new();
    let mut last_safe = None;
    for msg in rx.iter() {
        check_abort(abort)?;
        counters.queue(STAGE_SORT, &rx);
        let t = Instant::now();
        let watermark = match msg {
            LaneIn::Batch { hits, watermark } => {
                for raw in hits {
                    sorter.push(raw.calibrate(det)?, &mut out)?;
                }
                watermark
            }
            LaneIn::Watermark(m) => m,
        };
        sorter.advance_to(watermark, &mut out);
        let safe = sorter.safe_horizon();
        counters.hits_sorted.fetch_add(out.len() as u64, Ordering::Relaxed);
        counters.busy(STAGE_SORT, t);
        if !out.is_empty() || safe != last_safe {
            last_safe = safe;
            send(&tx, Sorted { hits: std::mem::take(&mut out), safe })?;
        }
    }
    sorter.finish(&mut out);
    counters.hits_sorted.fetch_add(out.len() as u64, Ordering::Relaxed);
    send(&tx, Sorted { hits: out, safe: Some(Nanos::MAX) })?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn lane_clusterer(
    cfg: PipelineConfig,
    lane: usize,
    width: u16,
    height: u16,
    rx: Receiver<Sorted>,
    lower: Sender<WorkerIn>,
    upper: Sender<WorkerIn>,
    abort: &AtomicBool,
    counters: &Counters,
) -> Result<()> {
    let n = cfg.n_data_lanes as u64;
    let size = cfg.split_window_size;
    let dt = cfg.def.dt_max;
    let mut clusterer = MatrixClusterer::new(cfg.def, width, height);
    let mut current: Option<u64> = None;
    let mut out: Vec<Cluster> = Vec::new();
    let mut last_progress: Nanos = 0;

    let finish = |w: u64, clusterer: &mut MatrixClusterer, out: &mut Vec<Cluster>| -> Result<()> {
        clusterer.flush(out);
        let win = TimeWindow::new(w, size);
        let mut to_lower = Vec::new();
        let mut to_upper = Vec::new();
        counters.clusters_lane.fetch_add(out.len() as u64, Ordering::Relaxed);
        for c in out.drain(..) {
            let near_lower = win.near_lower(c.min_toa(), dt);
            let near_upper = win.near_upper(c.max_toa(), dt);
            if near_lower && near_upper {
                counters.precondition_violations.fetch_add(1, Ordering::Relaxed);
            }
            let (half, border) = if near_upper {
                (Half::Upper, true)
            } else if near_lower {
                (Half::Lower, true)
            } else if c.min_toa() < win.midpoint() {
                (Half::Lower, false)
            } else {
                (Half::Upper, false)
            };
            if border {
                counters.border_clusters.fetch_add(1, Ordering::Relaxed);
            }
            debug_assert_eq!(route_to_merge_worker(w, half, n as usize) as u64, (w + (half == Half::Upper) as u64) % n);
            match half {
                Half::Lower => to_lower.push((c, border)),
                Half::Upper => to_upper.push((c, border)),
            }
        }
        if !to_lower.is_empty() {
            send(&lower, WorkerIn { stream: 0, item: WorkerItem::Clusters(to_lower) })?;
        }
        if !to_upper.is_empty() {
            send(&upper, WorkerIn { stream: 1, item: WorkerItem::Clusters(to_upper) })?;
        }
        Ok(())
    };

    for msg in rx.iter() {
        check_abort(abort)?;
        counters.queue(STAGE_CLUSTER, &rx);
        let t = Instant::now();
        for h in msg.hits {
            let w = h.toa / size;
            if current != Some(w) {
                if let Some(c) = current {
                    finish(c, &mut clusterer, &mut out)?;
                }
                current = Some(w);
            }
            clusterer.process_hit(h, &mut out)?;
        }
        let progress = match (current, msg.safe) {
            (Some(c), Some(s)) if s.saturating_add(1) >= (c + 1) * size => {
                finish(c, &mut clusterer, &mut out)?;
                current = None;
                next_lane_start(s.saturating_add(1), lane as u64, n, size)
            }
            (Some(c), _) => c * size,
            (None, Some(s)) => next_lane_start(s.saturating_add(1), lane as u64, n, size),
            (None, None) => 0,
        };
        counters.busy(STAGE_CLUSTER, t);
        if progress > last_progress {
            last_progress = progress;
            send(&lower, WorkerIn { stream: 0, item: WorkerItem::Progress(progress) })?;
            send(&upper, WorkerIn { stream: 1, item: WorkerItem::Progress(progress) })?;
        }
    }
    if let Some(c) = current {
        finish(c, &mut clusterer, &mut out)?;
    }
    Ok(())
}

/// Smallest time at or after `from` that lies in a window of `lane`.
fn next_lane_start(from: Nanos, lane: u64, n: u64, size: Nanos) -> Nanos {
    if from == Nanos::MAX {
        return from;
    }
    let w = from / size;
    if w % n == lane {
        return from;
    }
    let next = w + (lane + n - w % n) % n;
    next.saturating_mul(size)
}

#[allow(clippy::too_many_arguments)]
fn merge_worker(
    cfg: PipelineConfig,
    worker: usize,
    width: u16,
    height: u16,
    rx: Receiver<WorkerIn>,
    tx: Sender<SinkIn>,
    abort: &AtomicBool,
    counters: &Counters,
) -> Result<()> {
    let mut store = OpenClusterStore::new(cfg.def, width, height).with_fast_reject(cfg.fast_reject);
    let mut queues: [VecDeque<(Cluster, bool)>; 2] = Default::default();
    let mut progress: [Nanos; 2] = [0; 2];
    let mut done = false;
    let mut out = Vec::new();
    let mut last_bound = 0;
    loop {
        let msg = if done { None } else { rx.recv().ok() };
        check_abort(abort)?;
        counters.queue(STAGE_MERGE, &rx);
        let t = Instant::now();
        match msg {
            Some(WorkerIn { stream, item: WorkerItem::Clusters(cs) }) => queues[stream].extend(cs),
            Some(WorkerIn { stream, item: WorkerItem::Progress(p) }) => progress[stream] = progress[stream].max(p),
            None => {
                done = true;
                progress = [Nanos::MAX; 2];
            }
        }
        // Release in first-toa order across the two streams.
        loop {
            let pick = match (queues[0].front(), queues[1].front()) {
                (Some(a), Some(b)) => usize::from(b.0.min_toa() < a.0.min_toa()),
                (Some(_), None) => 0,
                (None, Some(_)) => 1,
                (None, None) => break,
            };
            let other = 1 - pick;
            let head = queues[pick].front().unwrap().0.min_toa();
            if queues[other].is_empty() && progress[other] < head {
                break;
            }
            let (c, border) = queues[pick].pop_front().unwrap();
            if border {
                let before = store.counters().accepted;
                store.process_border_cluster(c)?;
                counters.merges.fetch_add(store.counters().accepted - before, Ordering::Relaxed);
            } else {
                store.insert_passthrough(c)?;
            }
        }
        let horizon = (0..2).map(|s| queues[s].front().map_or(progress[s], |c| c.0.min_toa())).min().unwrap();
        if done {
            store.flush(&mut out);
        } else {
            store.sweep_and_emit(horizon, &mut out);
        }
        let bound = store.pending_min_toa().map_or(horizon, |m| m.min(horizon));
        counters.busy(STAGE_MERGE, t);
        if !out.is_empty() || bound > last_bound || done {
            last_bound = bound;
            send(&tx, SinkIn { worker, clusters: std::mem::take(&mut out), bound: if done { Nanos::MAX } else { bound } })?;
        }
        if done {
            return Ok(());
        }
    }
}

fn sink_stage<S: FnMut(Cluster) -> Result<()>>(
    cfg: PipelineConfig,
    rx: Receiver<SinkIn>,
    mut sink: S,
    abort: &AtomicBool,
    counters: &Counters,
) -> Result<()> {
    let n = cfg.n_data_lanes;
    let mut queues: Vec<VecDeque<Cluster>> = (0..n).map(|_| VecDeque::new()).collect();
    let mut bounds = vec![0; n];
    let mut emit = |c: Cluster| -> Result<()> {
        counters.clusters_out.fetch_add(1, Ordering::Relaxed);
        counters.hits_out.fetch_add(c.len() as u64, Ordering::Relaxed);
        sink(c)
    };
    for msg in rx.iter() {
        check_abort(abort)?;
        counters.queue(STAGE_SINK, &rx);
        let t = Instant::now();
        if !cfg.concatenate {
            for c in msg.clusters {
                emit(c)?;
            }
            counters.busy(STAGE_SINK, t);
            continue;
        }
        queues[msg.worker].extend(msg.clusters);
        bounds[msg.worker] = bounds[msg.worker].max(msg.bound);
        loop {
            let Some((best, min)) =
                queues.iter().enumerate().filter_map(|(i, q)| q.front().map(|c| (i, c.min_toa()))).min_by_key(|&(i, m)| (m, i))
            else {
                break;
            };
            let ready = (0..n).all(|i| i == best || !queues[i].is_empty() || bounds[i] >= min);
            if !ready {
                break;
            }
            emit(queues[best].pop_front().unwrap())?;
        }
        counters.busy(STAGE_SINK, t);
    }
    for q in queues.iter_mut() {
        debug_assert!(q.is_empty() || abort.load(Ordering::Relaxed));
        for c in q.drain(..) {
            emit(c)?;
        }
    }
    Ok(())
}

/// Runs the graph over in-memory hits and collects the clusters.
pub fn cluster_pipeline(hits: Vec<Hit>, cfg: PipelineConfig, det: DetectorConfig) -> Result<(Vec<Cluster>, PipelineStats)> {
    let (tx, rx) = crossbeam_channel::unbounded();
    let handle = build_graph(cfg, det, hits.into_iter().map(Ok), move |c| tx.send(c).map_err(|_| Error::Aborted))?;
    let stats = handle.join()?;
    Ok((rx.try_iter().collect(), stats))
}

/// Time spent per stage, for reports.
pub fn busy_durations(stats: &PipelineStats) -> Vec<(String, Duration)> {
    stats.stages.iter().map(|s| (s.stage.clone(), Duration::from_nanos(s.busy_ns))).collect()
}
