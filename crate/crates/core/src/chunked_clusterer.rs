//! Buffer-at-a-time clustering on a worker pool.
//!
//! Hits are collected into large buffers with a closing margin so that a
//! cluster is rarely cut between buffers. Each dispatched buffer is radix
//! sorted, cut into chunks clustered in parallel with a union-find forest
//! over buffer indices, stitched across chunk borders, grouped by root and
//! emitted. Clusters straddling two buffers are reconciled by an
//! [`OpenClusterStore`].
//!
//! Only the local temporal predicate is supported: every link between two
//! adjacent hits must be within `dt_max`.

use std::ops::Range;
use std::time::{Duration, Instant};

use crossbeam_channel::bounded;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::Cluster;
use crate::error::{Error, Result};
use crate::hit_model::{Hit, Nanos, MATRIX_SIZE};
use crate::merger::OpenClusterStore;
use crate::serial_clusterer::{ClusterDefinition, Variant};

const NONE: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferFillConfig {
    /// Buffer capacity in hits.
    pub b: usize,
    /// Reserve kept free for late hits arriving within `t + t_closing`.
    pub b_t: usize,
    /// Expected maximum cluster duration.
    pub t_closing: Nanos,
    /// Unsortedness bound of the input stream.
    pub t_unsortedness: Nanos,
}

impl Default for BufferFillConfig {
    fn default() -> Self {
        Self { b: 1 << 20, b_t: 1 << 16, t_closing: 500, t_unsortedness: 1_000 }
    }
}

impl BufferFillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.b > self.b_t && self.b_t > 0) {
            return Err(Error::Config(format!("need b > b_t > 0, got b = {}, b_t = {}", self.b, self.b_t)));
        }
        if self.t_closing == 0 {
            return Err(Error::Config("t_closing must be positive".into()));
        }
        Ok(())
    }
}

/// Fills buffers hit by hit and hands out full ones.
///
/// A buffer takes hits freely until `b - b_t` hits, which fixes `toa_max`;
/// after that only hits with `toa <= toa_max + t_closing` join it, the rest
/// go to the next buffer. The buffer is dispatched once a hit arrives more
/// than `t + t_closing` after `toa_max`, since no later hit can still belong
/// to it.
pub struct BufferFiller {
    cfg: BufferFillConfig,
    current: Vec<Hit>,
    next: Vec<Hit>,
    toa_max: Nanos,
    reuse: Vec<Vec<Hit>>,
}

impl BufferFiller {
    pub fn new(cfg: BufferFillConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, current: Vec::new(), next: Vec::new(), toa_max: 0, reuse: Vec::new() })
    }

    pub fn toa_max(&self) -> Nanos {
        self.toa_max
    }

    pub fn current_len(&self) -> usize {
        self.current.len()
    }

    /// Returns a processed buffer for reuse.
    pub fn recycle(&mut self, mut buf: Vec<Hit>) {
        buf.clear();
        self.reuse.push(buf);
    }

    fn fresh(&mut self) -> Vec<Hit> {
        self.reuse.pop().unwrap_or_else(|| Vec::with_capacity(self.cfg.b))
    }

    pub fn store_hit(&mut self, hit: Hit) -> Result<Option<Vec<Hit>>> {
        let c = self.cfg;
        if self.current.len() < c.b - c.b_t {
            self.current.push(hit);
            self.toa_max = self.toa_max.max(hit.toa);
        } else if hit.toa <= self.toa_max + c.t_closing {
            if self.current.len() >= c.b {
                return Err(Error::BufferOverflow {
                    len: self.current.len(),
                    capacity: c.b,
                    toa_max: self.toa_max,
                    toa: hit.toa,
                });
            }
            self.current.push(hit);
        } else {
            if self.next.len() >= c.b {
                return Err(Error::BufferOverflow { len: self.next.len(), capacity: c.b, toa_max: self.toa_max, toa: hit.toa });
            }
            if self.next.capacity() == 0 {
                self.next = self.fresh();
            }
            self.next.push(hit);
        }
        if hit.toa.saturating_sub(self.toa_max) > c.t_unsortedness + c.t_closing {
            let fresh = self.fresh();
            let next = std::mem::replace(&mut self.next, fresh);
            let full = std::mem::replace(&mut self.current, next);
            // the carried-over hits may already reach the fill mark
            if let Some(m) = self.current.iter().map(|h| h.toa).max() {
                self.toa_max = m;
            }
            if !full.is_empty() {
                return Ok(Some(full));
            }
        }
        Ok(None)
    }

    /// Remaining buffers at end of stream, oldest first.
    pub fn finish(&mut self) -> Vec<Vec<Hit>> {
        let mut out = Vec::new();
        for b in [std::mem::take(&mut self.current), std::mem::take(&mut self.next)] {
            if !b.is_empty() {
                out.push(b);
            }
        }
        out
    }
}

/// Stable parallel LSD radix sort by toa, one byte per pass. Passes where
/// every key shares the digit are skipped.
pub fn radix_sort_hits(hits: &mut Vec<Hit>, n_workers: usize) {
    let n = hits.len();
    if n < 2 {
        return;
    }
    let min = hits.iter().map(|h| h.toa).min().unwrap();
    let max = hits.iter().map(|h| h.toa).max().unwrap();
    let range = max - min;
    let passes = ((64 - range.leading_zeros()) as usize).div_ceil(8);
    let parts = n_workers.max(1).min(n.div_ceil(4096)).max(1);
    let part_len = n.div_ceil(parts);
    let mut src = std::mem::take(hits);
    let mut dst = src.clone();
    for pass in 0..passes {
        let shift = pass * 8;
        let digit = |h: &Hit| (((h.toa - min) >> shift) & 0xff) as usize;
        let hist: Vec<[usize; 256]> = src
            .par_chunks(part_len)
            .map(|chunk| {
                let mut h = [0usize; 256];
                for x in chunk {
                    h[digit(x)] += 1;
                }
                h
            })
            .collect();
        let mut totals = [0usize; 256];
        for h in &hist {
            for d in 0..256 {
                totals[d] += h[d];
            }
        }
        if totals.iter().any(|&t| t == n) {
            continue;
        }
        let mut offsets = vec![[0usize; 256]; hist.len()];
        let mut base = 0;
        for d in 0..256 {
            for (p, h) in hist.iter().enumerate() {
                offsets[p][d] = base;
                base += h[d];
            }
        }
        let out = SyncPtr(dst.as_mut_ptr());
        src.par_chunks(part_len).zip(offsets.into_par_iter()).for_each(|(chunk, mut off)| {
            let out = &out;
            for x in chunk {
                let d = digit(x);
                // SAFETY: offsets give each part a disjoint set of slots in 0..n.
                unsafe { out.0.add(off[d]).write(*x) };
                off[d] += 1;
            }
        });
        std::mem::swap(&mut src, &mut dst);
    }
    *hits = src;
}

struct SyncPtr(*mut Hit);
unsafe impl Sync for SyncPtr {}
unsafe impl Send for SyncPtr {}

/// Root of `i` in a forest stored in `parent[base..]`, compressing the path.
#[inline]
fn find(parent: &mut [u32], base: u32, i: u32) -> u32 {
    let mut r = i;
    while parent[(r - base) as usize] != r {
        r = parent[(r - base) as usize];
    }
    let mut c = i;
    while c != r {
        let next = parent[(c - base) as usize];
        parent[(c - base) as usize] = r;
        c = next;
    }
    r
}

/// Joins the trees of `a` and `b`. The root with the smaller toa (then the
/// smaller index) stays root, so no parent is ever later than its child.
#[inline]
fn union(parent: &mut [u32], base: u32, toa: impl Fn(u32) -> Nanos, a: u32, b: u32) -> u32 {
    let ra = find(parent, base, a);
    let rb = find(parent, base, b);
    if ra == rb {
        return ra;
    }
    let (keep, child) = if (toa(ra), ra) <= (toa(rb), rb) { (ra, rb) } else { (rb, ra) };
    parent[(child - base) as usize] = keep;
    keep
}

/// Standalone union-find forest over items with arrival times.
#[derive(Debug, Clone)]
pub struct TimeOrderedForest {
    parent: Vec<u32>,
    toa: Vec<Nanos>,
}

impl TimeOrderedForest {
    pub fn new(toa: Vec<Nanos>) -> Self {
        Self { parent: (0..toa.len() as u32).collect(), toa }
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    pub fn parent(&self, i: usize) -> usize {
        self.parent[i] as usize
    }

    pub fn find(&mut self, i: usize) -> usize {
        find(&mut self.parent, 0, i as u32) as usize
    }

    pub fn union(&mut self, a: usize, b: usize) -> usize {
        let toa = &self.toa;
        union(&mut self.parent, 0, |i| toa[i as usize], a as u32, b as u32) as usize
    }

    pub fn toa(&self, i: usize) -> Nanos {
        self.toa[i]
    }
}

/// Per-worker grid of the last hit index seen at each pixel.
pub struct AuxMatrix {
    width: u16,
    cells: Vec<u32>,
    cleared: u64,
}

impl AuxMatrix {
    pub fn new(width: u16, height: u16) -> Self {
        Self { width, cells: vec![NONE; width as usize * height as usize], cleared: 0 }
    }

    #[inline]
    fn idx(&self, x: u16, y: u16) -> usize {
        y as usize * self.width as usize + x as usize
    }

    #[inline]
    fn get(&self, x: u16, y: u16) -> u32 {
        self.cells[self.idx(x, y)]
    }

    /// Clears the cells written by `hits`.
    pub fn reset(&mut self, hits: &[Hit]) {
        for h in hits {
            let i = self.idx(h.x, h.y);
            if self.cells[i] != NONE {
                self.cells[i] = NONE;
                self.cleared += 1;
            }
        }
    }

    /// Number of cells cleared by [`AuxMatrix::reset`] so far.
    pub fn cleared(&self) -> u64 {
        self.cleared
    }

    pub fn is_clean(&self) -> bool {
        self.cells.iter().all(|&c| c == NONE)
    }
}

#[inline]
fn neighborhood(h: &Hit, width: u16, height: u16) -> impl Iterator<Item = (u16, u16)> {
    let x0 = h.x.saturating_sub(1);
    let x1 = h.x.saturating_add(1).min(width - 1);
    let y0 = h.y.saturating_sub(1);
    let y1 = h.y.saturating_add(1).min(height - 1);
    (y0..=y1).flat_map(move |y| (x0..=x1).map(move |x| (x, y)))
}

/// A time-sorted buffer with its union-find labels.
pub struct LabeledBuffer {
    pub hits: Vec<Hit>,
    pub parent: Vec<u32>,
    pub chunk_bounds: Vec<Range<usize>>,
}

impl LabeledBuffer {
    /// Root of every hit after full compression.
    pub fn roots(&mut self) -> Vec<u32> {
        for i in 0..self.parent.len() {
            let p = self.parent[i] as usize;
            self.parent[i] = self.parent[p];
        }
        self.parent.clone()
    }
}

/// Splits `0..n` into at most `n_workers` contiguous chunks of at least
/// `min_chunk` hits (a shorter buffer is one chunk).
pub fn chunk_bounds(n: usize, n_workers: usize, min_chunk: usize) -> Vec<Range<usize>> {
    let k = n_workers.max(1).min((n / min_chunk.max(1)).max(1));
    let len = n.div_ceil(k).max(1);
    (0..k).map(|c| (c * len).min(n)..((c + 1) * len).min(n)).filter(|r| !r.is_empty()).collect()
}

/// Chunk clusterer owning one auxiliary matrix per chunk slot.
pub struct ChunkClusterer {
    dt_max: Nanos,
    width: u16,
    height: u16,
    n_workers: usize,
    min_chunk: usize,
    matrices: Vec<AuxMatrix>,
}

impl ChunkClusterer {
    pub fn new(def: ClusterDefinition, width: u16, height: u16, n_workers: usize, min_chunk: usize) -> Result<Self> {
        if def.variant != Variant::DynamicLocal {
            return Err(Error::Config("the chunked backend supports only the local variant".into()));
        }
        if n_workers == 0 {
            return Err(Error::Config("n_workers must be at least 1".into()));
        }
        Ok(Self { dt_max: def.dt_max, width, height, n_workers, min_chunk, matrices: Vec::new() })
    }

    pub fn matrices(&self) -> &[AuxMatrix] {
        &self.matrices
    }

    /// Clusters every chunk independently. Must run inside the worker pool
    /// to be parallel.
    pub fn cluster_chunks(&mut self, hits: Vec<Hit>) -> Result<LabeledBuffer> {
        let n = hits.len();
        if n >= NONE as usize {
            return Err(Error::Config(format!("buffer of {n} hits exceeds index range")));
        }
        if let Some(h) = hits.iter().find(|h| h.x >= self.width || h.y >= self.height) {
            return Err(Error::CoordinateOutOfRange { x: h.x, y: h.y, width: self.width, height: self.height });
        }
        let bounds = chunk_bounds(n, self.n_workers, self.min_chunk);
        while self.matrices.len() < bounds.len() {
            self.matrices.push(AuxMatrix::new(self.width, self.height));
        }
        let mut parent: Vec<u32> = (0..n as u32).collect();
        let dt = self.dt_max;
        let (w, h) = (self.width, self.height);
        let mut slices: Vec<&mut [u32]> = Vec::with_capacity(bounds.len());
        let mut rest: &mut [u32] = &mut parent;
        for r in &bounds {
            let (a, b) = rest.split_at_mut(r.len());
            slices.push(a);
            rest = b;
        }
        let hits_ref = &hits;
        slices
            .into_par_iter()
            .zip(self.matrices.par_iter_mut())
            .zip(bounds.par_iter())
            .for_each(|((par, m), r)| {
                let base = r.start as u32;
                for i in r.clone() {
                    let hit = &hits_ref[i];
                    for (x, y) in neighborhood(hit, w, h) {
                        let j = m.get(x, y);
                        if j != NONE && hit.toa - hits_ref[j as usize].toa <= dt {
                            union(par, base, |k| hits_ref[k as usize].toa, i as u32, j);
                        }
                    }
                    let cell = m.idx(hit.x, hit.y);
                    m.cells[cell] = i as u32;
                }
            });
        Ok(LabeledBuffer { hits, parent, chunk_bounds: bounds })
    }

    /// Unions hits at the start of each chunk with the matching end-of-chunk
    /// state of the preceding chunks. Candidate pairs are found in parallel
    /// from the read-only matrices, then applied in order.
    ///
    /// For a border hit the preceding chunks are searched backwards as long
    /// as their last hit is within `dt_max`; the first one holding any hit
    /// at a neighbor pixel has that pixel's latest earlier hit.
    pub fn stitch_chunk_borders(&self, lb: &mut LabeledBuffer) {
        if lb.chunk_bounds.len() < 2 {
            return;
        }
        let hits = &lb.hits;
        let bounds = &lb.chunk_bounds;
        let last_toa: Vec<Nanos> = bounds.iter().map(|r| hits[r.end - 1].toa).collect();
        let dt = self.dt_max;
        let pairs: Vec<Vec<(u32, u32)>> = (1..bounds.len())
            .into_par_iter()
            .map(|c| {
                let mut out = Vec::new();
                for i in bounds[c].clone() {
                    let hit = &hits[i];
                    if hit.toa > last_toa[c - 1] + dt {
                        break;
                    }
                    for (x, y) in neighborhood(hit, self.width, self.height) {
                        for k in (0..c).rev() {
                            if last_toa[k] + dt < hit.toa {
                                break;
                            }
                            let j = self.matrices[k].get(x, y);
                            if j == NONE {
                                continue;
                            }
                            if hit.toa - hits[j as usize].toa <= dt {
                                out.push((i as u32, j));
                            }
                            break;
                        }
                    }
                }
                out
            })
            .collect();
        for (a, b) in pairs.into_iter().flatten() {
            union(&mut lb.parent, 0, |k| hits[k as usize].toa, a, b);
        }
    }

    /// Clears the matrix cells written by the buffer's chunks.
    pub fn reset_aux_matrices(&mut self, lb: &LabeledBuffer) {
        let hits = &lb.hits;
        self.matrices.par_iter_mut().zip(lb.chunk_bounds.par_iter()).for_each(|(m, r)| m.reset(&hits[r.clone()]));
    }

    /// Sort, cluster, stitch, group and reset for one buffer.
    pub fn process_buffer(&mut self, mut hits: Vec<Hit>, timings: &mut StageTimings) -> Result<(Vec<Cluster>, Vec<Hit>)> {
        let t = Instant::now();
        radix_sort_hits(&mut hits, self.n_workers);
        timings.sort += t.elapsed();
        let t = Instant::now();
        let mut lb = self.cluster_chunks(hits)?;
        timings.cluster += t.elapsed();
        let t = Instant::now();
        self.stitch_chunk_borders(&mut lb);
        timings.stitch += t.elapsed();
        let t = Instant::now();
        let clusters = sort_clusters_by_min_toa(&mut lb);
        timings.group += t.elapsed();
        let t = Instant::now();
        self.reset_aux_matrices(&lb);
        timings.reset += t.elapsed();
        Ok((clusters, lb.hits))
    }
}

/// Groups hits by root. Roots are the earliest hit of their cluster, so
/// ordering groups by root index orders them by first toa; within a group
/// hits stay in toa order.
pub fn sort_clusters_by_min_toa(lb: &mut LabeledBuffer) -> Vec<Cluster> {
    let roots = lb.roots();
    let n = roots.len();
    let mut group_of = vec![NONE; n];
    let mut sizes: Vec<usize> = Vec::new();
    for i in 0..n {
        if roots[i] as usize == i {
            group_of[i] = sizes.len() as u32;
            sizes.push(0);
        }
        sizes[group_of[roots[i] as usize] as usize] += 1;
    }
    let mut groups: Vec<Vec<Hit>> = sizes.iter().map(|&s| Vec::with_capacity(s)).collect();
    for i in 0..n {
        groups[group_of[roots[i] as usize] as usize].push(lb.hits[i]);
    }
    groups.into_iter().map(|g| Cluster::from_hits(g).expect("non-empty group")).collect()
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    #[serde(with = "duration_ns")]
    pub fill: Duration,
    #[serde(with = "duration_ns")]
    pub sort: Duration,
    #[serde(with = "duration_ns")]
    pub cluster: Duration,
    #[serde(with = "duration_ns")]
    pub stitch: Duration,
    #[serde(with = "duration_ns")]
    pub group: Duration,
    #[serde(with = "duration_ns")]
    pub reset: Duration,
    #[serde(with = "duration_ns")]
    pub merge: Duration,
}

mod duration_ns {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        (d.as_nanos() as u64).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_nanos)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkedConfig {
    pub def: ClusterDefinition,
    pub width: u16,
    pub height: u16,
    pub fill: BufferFillConfig,
    pub n_workers: usize,
    pub min_chunk: usize,
    /// Bounded queue of filled buffers waiting for the processor.
    pub queue_depth: usize,
}

impl ChunkedConfig {
    pub fn new(def: ClusterDefinition, n_workers: usize) -> Self {
        Self {
            def,
            width: MATRIX_SIZE,
            height: MATRIX_SIZE,
            fill: BufferFillConfig::default(),
            n_workers,
            min_chunk: 10_000,
            queue_depth: 1,
        }
    }
}

#[derive(Debug, Default, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkedStats {
    pub hits: u64,
    pub clusters: u64,
    pub buffers: u64,
    pub n_workers: usize,
    pub wall_ns: u64,
    pub throughput_mhits: f64,
    /// Hits and time from the start of the second buffer onward.
    pub steady_hits: u64,
    pub steady_ns: u64,
    pub steady_throughput_mhits: f64,
    pub timings: StageTimings,
    pub matrix_cells_cleared: u64,
}

/// Runs the full buffer loop: a filler thread feeds buffers through a
/// bounded queue to the processor, which returns them for reuse.
/// `emit` receives clusters in order of first toa.
pub fn run_chunked_pipeline<I, F>(source: I, cfg: &ChunkedConfig, mut emit: F) -> Result<ChunkedStats>
where
    I: IntoIterator<Item = Result<Hit>>,
    I::IntoIter: Send,
    F: FnMut(Cluster) -> Result<()>,
{
    cfg.fill.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.n_workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let mut clusterer = ChunkClusterer::new(cfg.def, cfg.width, cfg.height, cfg.n_workers, cfg.min_chunk)?;
    let mut store = OpenClusterStore::new(cfg.def, cfg.width, cfg.height);
    let (full_tx, full_rx) = bounded::<Vec<Hit>>(cfg.queue_depth.max(1));
    let (back_tx, back_rx) = bounded::<Vec<Hit>>(cfg.queue_depth.max(1) + 2);
    let fill_cfg = cfg.fill;
    let dt = cfg.def.dt_max;
    let start = Instant::now();
    let mut stats = ChunkedStats { n_workers: cfg.n_workers, ..Default::default() };
    let mut steady_start: Option<(Instant, u64)> = None;

    let source = source.into_iter();
    let result = std::thread::scope(|scope| -> Result<()> {
        let filler = scope.spawn(move || -> Result<Duration> {
            let mut filler = BufferFiller::new(fill_cfg)?;
            let mut busy = Duration::ZERO;
            for hit in source {
                let t = Instant::now();
                while let Ok(b) = back_rx.try_recv() {
                    filler.recycle(b);
                }
                let full = filler.store_hit(hit?)?;
                busy += t.elapsed();
                if let Some(full) = full {
                    if full_tx.send(full).is_err() {
                        return Ok(busy);
                    }
                }
            }
            for b in filler.finish() {
                if full_tx.send(b).is_err() {
                    break;
                }
            }
            Ok(busy)
        });

        let mut out = Vec::new();
        let mut process = || -> Result<()> {
            for buf in full_rx.iter() {
                if stats.buffers == 1 {
                    steady_start = Some((Instant::now(), stats.hits));
                }
                stats.buffers += 1;
                stats.hits += buf.len() as u64;
                let first_toa = buf.iter().map(|h| h.toa).min().unwrap_or(0);
                let (clusters, used) = pool.install(|| clusterer.process_buffer(buf, &mut stats.timings))?;
                let _ = back_tx.try_send(used);
                let t = Instant::now();
                let last_toa = clusters.iter().map(Cluster::max_toa).max().unwrap_or(first_toa);
                for c in clusters {
                    // Only clusters near either end of the buffer can continue in a neighbor buffer.
                    if c.min_toa() <= first_toa + dt || c.max_toa() + dt >= last_toa {
                        store.process_border_cluster(c)?;
                    } else {
                        store.insert_passthrough(c)?;
                    }
                }
                store.sweep_and_emit(last_toa + 1, &mut out);
                stats.timings.merge += t.elapsed();
                for c in out.drain(..) {
                    stats.clusters += 1;
                    emit(c)?;
                }
            }
            store.flush(&mut out);
            for c in out.drain(..) {
                stats.clusters += 1;
                emit(c)?;
            }
            Ok(())
        };
        let processed = process();
        drop(full_rx);
        let filled = filler.join().map_err(|_| Error::PipelineFailure { stage: "fill".into(), msg: "worker panicked".into() })?;
        processed?;
        stats.timings.fill = filled?;
        Ok(())
    });
    result?;

    let wall = start.elapsed();
    stats.wall_ns = wall.as_nanos() as u64;
    stats.throughput_mhits = mhits(stats.hits, wall);
    if let Some((t0, h0)) = steady_start {
        let d = t0.elapsed().min(wall);
        stats.steady_hits = stats.hits - h0;
        stats.steady_ns = d.as_nanos() as u64;
        stats.steady_throughput_mhits = mhits(stats.steady_hits, d);
    }
    stats.matrix_cells_cleared = clusterer.matrices().iter().map(AuxMatrix::cleared).sum();
    Ok(stats)
}

fn mhits(hits: u64, d: Duration) -> f64 {
    let s = d.as_secs_f64();
    if hits == 0 || s == 0.0 {
        0.0
    } else {
        hits as f64 / s / 1e6
    }
}

/// Clusters an in-memory hit list with the chunked backend.
pub fn cluster_chunked(hits: &[Hit], cfg: &ChunkedConfig) -> Result<Vec<Cluster>> {
    let mut out = Vec::new();
    run_chunked_pipeline(hits.iter().copied().map(Ok), cfg, |c| {
        out.push(c);
        Ok(())
    })?;
    Ok(out)
}
