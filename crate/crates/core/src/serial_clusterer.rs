//! Single-worker streaming clusterer over a time-sorted hit stream.
//!
//! Each hit looks up the open clusters around its pixel, then either starts
//! a new cluster, joins the single neighbor, or merges all neighbors and
//! joins the result. Clusters that can no longer grow are closed and
//! emitted in order of their first time of arrival.
//!
//! Neighbor lookup is pluggable: [`PixelRefMatrix`] keeps one reference per
//! pixel to the cluster that last wrote it, [`HashMembership`] scans every
//! open cluster's pixel set.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, HashMap};

use serde::{Deserialize, Serialize};

use crate::cluster::Cluster;
use crate::error::{Error, Result};
use crate::hit_model::{Hit, Nanos};

/// Which temporal coincidence rule governs cluster membership.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Every spatially adjacent link is within `dt_max`.
    DynamicLocal,
    /// Every hit but the first has an earlier member within `dt_max`.
    DynamicGlobal,
    /// Every pair of members is within `dt_max`.
    StaticWindow,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local" | "dynamic_local" => Ok(Variant::DynamicLocal),
            "global" | "dynamic_global" => Ok(Variant::DynamicGlobal),
            "static" | "static_window" => Ok(Variant::StaticWindow),
            _ => Err(Error::Config(format!("unknown cluster variant `{s}` (expected local, global or static)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClusterDefinition {
    pub variant: Variant,
    pub dt_max: Nanos,
}

impl ClusterDefinition {
    pub fn new(variant: Variant, dt_max: Nanos) -> Result<Self> {
        if dt_max == 0 {
            return Err(Error::Config("dt_max must be positive".into()));
        }
        Ok(Self { variant, dt_max })
    }

    pub fn local(dt_max: Nanos) -> Self {
        Self::new(Variant::DynamicLocal, dt_max).expect("dt_max > 0")
    }

    pub fn global(dt_max: Nanos) -> Self {
        Self::new(Variant::DynamicGlobal, dt_max).expect("dt_max > 0")
    }

    pub fn static_window(dt_max: Nanos) -> Self {
        Self::new(Variant::StaticWindow, dt_max).expect("dt_max > 0")
    }

    /// Whether a hit at `toa` may join `cluster` through a neighbor pixel
    /// whose last hit arrived at `stamp`.
    #[inline]
    pub fn admits(&self, toa: Nanos, stamp: Nanos, cluster: &Cluster) -> bool {
        let reference = match self.variant {
            Variant::DynamicLocal => stamp,
            Variant::DynamicGlobal => cluster.max_toa(),
            Variant::StaticWindow => cluster.min_toa(),
        };
        toa.abs_diff(reference) <= self.dt_max
    }

    /// Last time at which the cluster can still accept a hit.
    #[inline]
    pub fn deadline(&self, cluster: &Cluster) -> Nanos {
        match self.variant {
            Variant::DynamicLocal | Variant::DynamicGlobal => cluster.max_toa().saturating_add(self.dt_max),
            Variant::StaticWindow => cluster.min_toa().saturating_add(self.dt_max),
        }
    }
}

pub type SlotId = u32;

struct Slot {
    gen: u32,
    version: u32,
    cluster: Option<Cluster>,
}

/// Storage of open clusters addressed by reusable slot ids.
#[derive(Default)]
pub struct OpenClusters {
    slots: Vec<Slot>,
    free: Vec<SlotId>,
}

impl OpenClusters {
    #[inline]
    pub fn get(&self, slot: SlotId) -> Option<&Cluster> {
        self.slots.get(slot as usize).and_then(|s| s.cluster.as_ref())
    }

    #[inline]
    pub fn generation(&self, slot: SlotId) -> u32 {
        self.slots[slot as usize].gen
    }

    /// The cluster in `slot` if it is still the one issued with `gen`.
    #[inline]
    pub fn live(&self, slot: SlotId, gen: u32) -> Option<&Cluster> {
        let s = self.slots.get(slot as usize)?;
        if s.gen == gen {
            s.cluster.as_ref()
        } else {
            None
        }
    }

    fn insert(&mut self, cluster: Cluster) -> SlotId {
        if let Some(id) = self.free.pop() {
            self.slots[id as usize].cluster = Some(cluster);
            id
        } else {
            self.slots.push(Slot { gen: 0, version: 0, cluster: Some(cluster) });
            (self.slots.len() - 1) as SlotId
        }
    }

    fn take(&mut self, slot: SlotId) -> Cluster {
        let s = &mut self.slots[slot as usize];
        s.gen = s.gen.wrapping_add(1);
        s.version = 0;
        self.free.push(slot);
        s.cluster.take().expect("slot is occupied")
    }

    fn get_mut(&mut self, slot: SlotId) -> &mut Cluster {
        self.slots[slot as usize].cluster.as_mut().expect("slot is occupied")
    }
}

/// Neighbor lookup strategy.
pub trait NeighborIndex: Send {
    fn new(width: u16, height: u16) -> Self
    where
        Self: Sized;

    /// Appends to `out` every distinct open cluster the hit may join.
    fn find(
        &mut self,
        hit: &Hit,
        def: &ClusterDefinition,
        clusters: &OpenClusters,
        open: &BTreeSet<(Nanos, SlotId)>,
        out: &mut Vec<SlotId>,
    );

    /// Records that `hit` now belongs to `slot`.
    fn insert(&mut self, hit: &Hit, slot: SlotId, clusters: &OpenClusters);

    /// `from` is about to be folded into `into`; `moved` are its hits.
    fn merged(&mut self, from: SlotId, into: SlotId, moved: &[Hit], clusters: &OpenClusters);

    /// `slot` was closed.
    fn closed(&mut self, slot: SlotId, hits: &[Hit]);
}

#[derive(Clone, Copy)]
struct Cell {
    slot: SlotId,
    gen: u32,
    stamp: Nanos,
}

const NO_SLOT: SlotId = SlotId::MAX;

/// Per-pixel reference to the open cluster that last wrote the pixel,
/// stamped with that hit's toa. Stale entries are overwritten lazily.
pub struct PixelRefMatrix {
    width: u16,
    height: u16,
    cells: Vec<Cell>,
}

impl PixelRefMatrix {
    #[inline]
    fn idx(&self, x: u16, y: u16) -> usize {
        y as usize * self.width as usize + x as usize
    }
}

impl NeighborIndex for PixelRefMatrix {
    fn new(width: u16, height: u16) -> Self {
        Self { width, height, cells: vec![Cell { slot: NO_SLOT, gen: 0, stamp: 0 }; width as usize * height as usize] }
    }

    fn find(
        &mut self,
        hit: &Hit,
        def: &ClusterDefinition,
        clusters: &OpenClusters,
        _open: &BTreeSet<(Nanos, SlotId)>,
        out: &mut Vec<SlotId>,
    ) {
        let x0 = hit.x.saturating_sub(1);
        let x1 = (hit.x + 1).min(self.width - 1);
        let y0 = hit.y.saturating_sub(1);
        let y1 = (hit.y + 1).min(self.height - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let cell = self.cells[self.idx(x, y)];
                if cell.slot == NO_SLOT {
                    continue;
                }
                if let Some(c) = clusters.live(cell.slot, cell.gen) {
                    if def.admits(hit.toa, cell.stamp, c) && !out.contains(&cell.slot) {
                        out.push(cell.slot);
                    }
                }
            }
        }
    }

    fn insert(&mut self, hit: &Hit, slot: SlotId, clusters: &OpenClusters) {
        let i = self.idx(hit.x, hit.y);
        self.cells[i] = Cell { slot, gen: clusters.generation(slot), stamp: hit.toa };
    }

    fn merged(&mut self, from: SlotId, into: SlotId, moved: &[Hit], clusters: &OpenClusters) {
        let from_gen = clusters.generation(from);
        let into_gen = clusters.generation(into);
        for h in moved {
            let i = self.idx(h.x, h.y);
            let cell = &mut self.cells[i];
            if cell.slot == from && cell.gen == from_gen {
                cell.slot = into;
                cell.gen = into_gen;
            }
        }
    }

    fn closed(&mut self, _slot: SlotId, _hits: &[Hit]) {}
}

/// Every open cluster keeps a pixel -> last toa map; lookups scan all open
/// clusters.
pub struct HashMembership {
    members: HashMap<SlotId, HashMap<(u16, u16), Nanos>>,
}

impl NeighborIndex for HashMembership {
    fn new(_width: u16, _height: u16) -> Self {
        Self { members: HashMap::new() }
    }

    fn find(
        &mut self,
        hit: &Hit,
        def: &ClusterDefinition,
        clusters: &OpenClusters,
        open: &BTreeSet<(Nanos, SlotId)>,
        out: &mut Vec<SlotId>,
    ) {
        for &(_, slot) in open {
            let Some(pixels) = self.members.get(&slot) else { continue };
            let cluster = clusters.get(slot).expect("open slot");
            let mut admitted = false;
            'scan: for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    let (x, y) = (hit.x as i32 + dx, hit.y as i32 + dy);
                    if x < 0 || y < 0 {
                        continue;
                    }
                    if let Some(&stamp) = pixels.get(&(x as u16, y as u16)) {
                        if def.admits(hit.toa, stamp, cluster) {
                            admitted = true;
                            break 'scan;
                        }
                    }
                }
            }
            if admitted {
                out.push(slot);
            }
        }
    }

    fn insert(&mut self, hit: &Hit, slot: SlotId, _clusters: &OpenClusters) {
        let e = self.members.entry(slot).or_default().entry((hit.x, hit.y)).or_insert(hit.toa);
        *e = (*e).max(hit.toa);
    }

    fn merged(&mut self, from: SlotId, into: SlotId, _moved: &[Hit], _clusters: &OpenClusters) {
        let Some(src) = self.members.remove(&from) else { return };
        let dst = self.members.entry(into).or_default();
        for (p, t) in src {
            let e = dst.entry(p).or_insert(t);
            *e = (*e).max(t);
        }
    }

    fn closed(&mut self, slot: SlotId, _hits: &[Hit]) {
        self.members.remove(&slot);
    }
}

struct Ready {
    min_toa: Nanos,
    seq: u64,
    cluster: Cluster,
}

impl PartialEq for Ready {
    fn eq(&self, other: &Self) -> bool {
        (self.min_toa, self.seq) == (other.min_toa, other.seq)
    }
}
impl Eq for Ready {}
impl PartialOrd for Ready {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Ready {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.min_toa, self.seq).cmp(&(other.min_toa, other.seq))
    }
}

/// Streaming clusterer state. One per worker.
pub struct SerialClusterer<N: NeighborIndex = PixelRefMatrix> {
    def: ClusterDefinition,
    width: u16,
    height: u16,
    index: N,
    clusters: OpenClusters,
    /// Open clusters keyed by (min toa, slot).
    open: BTreeSet<(Nanos, SlotId)>,
    /// Close deadlines: (deadline, slot, generation, version).
    deadlines: BinaryHeap<Reverse<(Nanos, SlotId, u32, u32)>>,
    ready: BinaryHeap<Reverse<Ready>>,
    seq: u64,
    last_toa: Option<Nanos>,
    scratch: Vec<SlotId>,
    hits_in: u64,
    clusters_out: u64,
}

/// Serial clusterer using per-pixel cluster references.
pub type MatrixClusterer = SerialClusterer<PixelRefMatrix>;
/// Serial clusterer using per-cluster hash sets.
pub type HashClusterer = SerialClusterer<HashMembership>;

impl<N: NeighborIndex> SerialClusterer<N> {
    pub fn new(def: ClusterDefinition, width: u16, height: u16) -> Self {
        Self {
            def,
            width,
            height,
            index: N::new(width, height),
            clusters: OpenClusters::default(),
            open: BTreeSet::new(),
            deadlines: BinaryHeap::new(),
            ready: BinaryHeap::new(),
            seq: 0,
            last_toa: None,
            scratch: Vec::new(),
            hits_in: 0,
            clusters_out: 0,
        }
    }

    pub fn definition(&self) -> &ClusterDefinition {
        &self.def
    }

    pub fn open_count(&self) -> usize {
        self.open.len()
    }

    pub fn hits_in(&self) -> u64 {
        self.hits_in
    }

    pub fn clusters_out(&self) -> u64 {
        self.clusters_out
    }

    /// Feeds one hit; closed clusters are appended to `out` in min-toa order.
    pub fn process_hit(&mut self, hit: Hit, out: &mut Vec<Cluster>) -> Result<()> {
        if let Some(prev) = self.last_toa {
            if hit.toa < prev {
                return Err(Error::OutOfOrderInput { previous: prev, got: hit.toa });
            }
        }
        if hit.x >= self.width || hit.y >= self.height {
            return Err(Error::CoordinateOutOfRange { x: hit.x, y: hit.y, width: self.width, height: self.height });
        }
        self.last_toa = Some(hit.toa);
        self.hits_in += 1;

        let mut neighbors = std::mem::take(&mut self.scratch);
        neighbors.clear();
        self.index.find(&hit, &self.def, &self.clusters, &self.open, &mut neighbors);

        let target = match neighbors.len() {
            0 => {
                let slot = self.clusters.insert(Cluster::new(hit));
                self.open.insert((hit.toa, slot));
                slot
            }
            1 => {
                let slot = neighbors[0];
                self.clusters.get_mut(slot).push(hit);
                slot
            }
            _ => {
                let slot = self.merge(&neighbors);
                self.clusters.get_mut(slot).push(hit);
                slot
            }
        };
        self.scratch = neighbors;
        self.index.insert(&hit, target, &self.clusters);
        self.schedule(target);
        self.close_and_dispatch(hit.toa, out);
        Ok(())
    }

    /// Merges all `slots` into the largest one and returns it.
    fn merge(&mut self, slots: &[SlotId]) -> SlotId {
        let target = *slots
            .iter()
            .max_by_key(|&&s| (self.clusters.get(s).map_or(0, Cluster::len), Reverse(s)))
            .expect("non-empty");
        let old_min = self.clusters.get(target).unwrap().min_toa();
        for &s in slots {
            if s == target {
                continue;
            }
            let min = self.clusters.get(s).unwrap().min_toa();
            self.open.remove(&(min, s));
            self.index.merged(s, target, self.clusters.get(s).unwrap().hits(), &self.clusters);
            let taken = self.clusters.take(s);
            self.clusters.get_mut(target).absorb(taken);
        }
        let new_min = self.clusters.get(target).unwrap().min_toa();
        if new_min != old_min {
            self.open.remove(&(old_min, target));
            self.open.insert((new_min, target));
        }
        target
    }

    fn schedule(&mut self, slot: SlotId) {
        let s = &mut self.clusters.slots[slot as usize];
        s.version = s.version.wrapping_add(1);
        let deadline = self.def.deadline(s.cluster.as_ref().unwrap());
        self.deadlines.push(Reverse((deadline, slot, s.gen, s.version)));
    }

    /// Closes every cluster that cannot accept a hit at `now` or later.
    pub fn close_and_dispatch(&mut self, now: Nanos, out: &mut Vec<Cluster>) {
        while let Some(&Reverse((deadline, slot, gen, version))) = self.deadlines.peek() {
            if deadline >= now {
                break;
            }
            self.deadlines.pop();
            let s = &self.clusters.slots[slot as usize];
            if s.gen != gen || s.version != version || s.cluster.is_none() {
                continue;
            }
            self.close(slot);
        }
        self.emit_ready(out);
    }

    /// Declares that no future hit arrives before `now`.
    pub fn advance(&mut self, now: Nanos, out: &mut Vec<Cluster>) {
        if self.last_toa.map_or(true, |t| t < now) {
            self.last_toa = Some(now);
        }
        self.close_and_dispatch(now, out);
    }

    fn close(&mut self, slot: SlotId) {
        let min = self.clusters.get(slot).unwrap().min_toa();
        self.open.remove(&(min, slot));
        let mut cluster = self.clusters.take(slot);
        self.index.closed(slot, cluster.hits());
        cluster.sort_hits();
        self.ready.push(Reverse(Ready { min_toa: cluster.min_toa(), seq: self.seq, cluster }));
        self.seq += 1;
    }

    fn emit_ready(&mut self, out: &mut Vec<Cluster>) {
        let bound = self.open.first().map(|&(m, _)| m);
        while let Some(Reverse(r)) = self.ready.peek() {
            if bound.is_some_and(|b| r.min_toa > b) {
                break;
            }
            out.push(self.ready.pop().unwrap().0.cluster);
            self.clusters_out += 1;
        }
    }

    /// Closes and emits everything still open. The state can be reused.
    pub fn flush(&mut self, out: &mut Vec<Cluster>) {
        let open: Vec<SlotId> = self.open.iter().map(|&(_, s)| s).collect();
        for slot in open {
            self.close(slot);
        }
        self.deadlines.clear();
        self.emit_ready(out);
        self.last_toa = None;
    }
}

/// Clusters an already time-sorted slice.
pub fn cluster_sorted(hits: &[Hit], def: ClusterDefinition, width: u16, height: u16) -> Result<Vec<Cluster>> {
    let mut state = MatrixClusterer::new(def, width, height);
    let mut out = Vec::new();
    for &h in hits {
        state.process_hit(h, &mut out)?;
    }
    state.flush(&mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run<N: NeighborIndex>(hits: &[Hit], def: ClusterDefinition) -> Vec<Cluster> {
        let mut s = SerialClusterer::<N>::new(def, 256, 256);
        let mut out = Vec::new();
        for &h in hits {
            s.process_hit(h, &mut out).unwrap();
        }
        s.flush(&mut out);
        out
    }

    fn sizes(cs: &[Cluster]) -> Vec<usize> {
        cs.iter().map(Cluster::len).collect()
    }

    #[test]
    fn single_hit_closes_after_horizon() {
        let mut s = MatrixClusterer::new(ClusterDefinition::local(200), 256, 256);
        let mut out = Vec::new();
        s.process_hit(Hit::at(1, 1, 0), &mut out).unwrap();
        assert!(out.is_empty());
        assert_eq!(s.open_count(), 1);
        s.process_hit(Hit::at(100, 100, 201), &mut out).unwrap();
        assert_eq!(sizes(&out), vec![1]);
    }

    #[test]
    fn adjacent_within_dtmax_join() {
        for def in [ClusterDefinition::local(200), ClusterDefinition::global(200), ClusterDefinition::static_window(200)] {
            let out = run::<PixelRefMatrix>(&[Hit::at(10, 10, 0), Hit::at(11, 10, 50)], def);
            assert_eq!(sizes(&out), vec![2]);
            let out = run::<PixelRefMatrix>(&[Hit::at(10, 10, 0), Hit::at(11, 10, 500)], def);
            assert_eq!(sizes(&out), vec![1, 1]);
        }
    }

    #[test]
    fn l_join_merges_two_clusters() {
        let hits = [Hit::at(5, 5, 0), Hit::at(7, 7, 10), Hit::at(6, 6, 20)];
        for out in [run::<PixelRefMatrix>(&hits, ClusterDefinition::local(200)), run::<HashMembership>(&hits, ClusterDefinition::local(200))] {
            assert_eq!(sizes(&out), vec![3]);
            assert_eq!(out[0].min_toa(), 0);
        }
    }

    #[test]
    fn close_boundary() {
        let def = ClusterDefinition::local(200);
        let mut s = MatrixClusterer::new(def, 256, 256);
        let mut out = Vec::new();
        s.process_hit(Hit::at(1, 1, 100), &mut out).unwrap();
        s.close_and_dispatch(300, &mut out);
        assert!(out.is_empty());
        s.close_and_dispatch(301, &mut out);
        assert_eq!(out.len(), 1);
        s.close_and_dispatch(10_000, &mut out);
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn flush_emits_in_min_toa_order() {
        let mut s = MatrixClusterer::new(ClusterDefinition::local(200), 256, 256);
        let mut out = Vec::new();
        s.flush(&mut out);
        assert!(out.is_empty());
        for (i, t) in [5u64, 10, 20].iter().enumerate() {
            s.process_hit(Hit::at(i as u16 * 10, 0, *t), &mut out).unwrap();
        }
        s.flush(&mut out);
        assert_eq!(out.iter().map(Cluster::min_toa).collect::<Vec<_>>(), vec![5, 10, 20]);
    }

    #[test]
    fn emission_held_back_behind_long_cluster() {
        // A long chain starting at t=0 stays open while a short cluster at t=50 closes.
        let mut hits = vec![Hit::at(0, 0, 0), Hit::at(50, 50, 50)];
        for k in 1..6u16 {
            hits.push(Hit::at(k, 0, 150 * k as u64));
        }
        let out = run::<PixelRefMatrix>(&hits, ClusterDefinition::local(200));
        assert_eq!(out.iter().map(Cluster::min_toa).collect::<Vec<_>>(), vec![0, 50]);
        assert_eq!(sizes(&out), vec![6, 1]);
    }

    #[test]
    fn out_of_order_rejected() {
        let mut s = MatrixClusterer::new(ClusterDefinition::local(200), 256, 256);
        let mut out = Vec::new();
        s.process_hit(Hit::at(0, 0, 10), &mut out).unwrap();
        assert!(matches!(s.process_hit(Hit::at(0, 0, 9), &mut out), Err(Error::OutOfOrderInput { previous: 10, got: 9 })));
    }

    #[test]
    fn static_window_splits_chain() {
        let hits: Vec<Hit> = (0..5u16).map(|k| Hit::at(k, 0, 150 * k as u64)).collect();
        assert_eq!(run::<PixelRefMatrix>(&hits, ClusterDefinition::local(200)).len(), 1);
        assert_eq!(run::<PixelRefMatrix>(&hits, ClusterDefinition::global(200)).len(), 1);
        assert!(run::<PixelRefMatrix>(&hits, ClusterDefinition::static_window(200)).len() >= 2);
    }

    #[test]
    fn same_pixel_repeats_join_locally() {
        let hits = [Hit::at(3, 3, 0), Hit::at(3, 3, 150), Hit::at(3, 3, 300), Hit::at(3, 3, 700)];
        assert_eq!(sizes(&run::<PixelRefMatrix>(&hits, ClusterDefinition::local(200))), vec![3, 1]);
    }

    #[test]
    fn matrix_edges() {
        let hits = [Hit::at(0, 0, 0), Hit::at(255, 255, 0), Hit::at(1, 1, 1), Hit::at(254, 254, 1)];
        assert_eq!(sizes(&run::<PixelRefMatrix>(&hits, ClusterDefinition::local(10))), vec![2, 2]);
    }
}
