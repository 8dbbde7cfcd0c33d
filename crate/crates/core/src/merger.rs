//! Reconstruction of clusters split at time-window borders.
//!
//! A pair of clusters is tested with a three-stage cascade: temporal
//! distance, dilated bounding boxes, then a pixel-level check through a
//! scratch grid. Open clusters live in a store ordered by first toa; a merge
//! keeps the earliest participant's position and invalidates the others,
//! which are dropped lazily when they reach the front.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::cluster::Cluster;
use crate::error::{Error, Result};
use crate::hit_model::{Hit, Nanos};
use crate::serial_clusterer::{ClusterDefinition, Variant};

/// Gap between the time extents of two clusters, 0 when they overlap.
#[inline]
pub fn temporal_distance(a: &Cluster, b: &Cluster) -> Nanos {
    a.min_toa().saturating_sub(b.max_toa()).max(b.min_toa().saturating_sub(a.max_toa()))
}

/// Bounding boxes overlap once each is grown by one pixel.
#[inline]
pub fn bbox_intersects_with_margin(a: &Cluster, b: &Cluster) -> bool {
    a.bbox().touches(&b.bbox())
}

/// Conditions on the merged extent that do not depend on individual pairs.
#[inline]
fn extent_admits(a: &Cluster, b: &Cluster, def: &ClusterDefinition) -> bool {
    match def.variant {
        Variant::DynamicLocal => true,
        Variant::DynamicGlobal => temporal_distance(a, b) <= def.dt_max,
        Variant::StaticWindow => a.max_toa().max(b.max_toa()) - a.min_toa().min(b.min_toa()) <= def.dt_max,
    }
}

/// Temporal condition on one adjacent cross pair.
#[inline]
fn pair_admits(h1: &Hit, h2: &Hit, def: &ClusterDefinition) -> bool {
    match def.variant {
        Variant::DynamicLocal => h1.toa.abs_diff(h2.toa) <= def.dt_max,
        Variant::DynamicGlobal | Variant::StaticWindow => true,
    }
}

/// O(n1 * n2) reference: some adjacent cross pair satisfies the pair
/// condition and the merged extent is admissible.
pub fn mergeable_pairwise(a: &Cluster, b: &Cluster, def: &ClusterDefinition) -> bool {
    extent_admits(a, b, def)
        && a.hits().iter().any(|h1| b.hits().iter().any(|h2| h1.touches(h2) && pair_admits(h1, h2, def)))
}

const EMPTY: u32 = u32::MAX;

/// Per-worker pixel grid used by the full merge check. Each cell heads a
/// linked list of hit indices so repeated hits on one pixel are all kept.
pub struct MergeScratch {
    width: u16,
    height: u16,
    heads: Vec<u32>,
    next: Vec<u32>,
    hits: Vec<Hit>,
    touched: Vec<u32>,
}

impl MergeScratch {
    pub fn new(width: u16, height: u16) -> Self {
        Self {
            width,
            height,
            heads: vec![EMPTY; width as usize * height as usize],
            next: Vec::new(),
            hits: Vec::new(),
            touched: Vec::new(),
        }
    }

    #[inline]
    fn idx(&self, x: u16, y: u16) -> usize {
        y as usize * self.width as usize + x as usize
    }

    fn clear(&mut self) {
        for &c in &self.touched {
            self.heads[c as usize] = EMPTY;
        }
        self.touched.clear();
        self.next.clear();
        self.hits.clear();
    }

    /// Whether every cell is empty; cheap enough for tests.
    pub fn is_clean(&self) -> bool {
        self.heads.iter().all(|&h| h == EMPTY)
    }
}

/// Pixel-level merge test. Writes the larger cluster's hits that lie in the
/// dilated intersection of the two boxes into `scratch`, probes the
/// 9-neighborhood of every hit of the smaller cluster, and clears only the
/// written cells. Linear in the two cluster sizes.
pub fn full_merge_check(a: &Cluster, b: &Cluster, def: &ClusterDefinition, scratch: &mut MergeScratch) -> bool {
    if !extent_admits(a, b, def) {
        return false;
    }
    let (large, small) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    let Some(region) = large.bbox().intersection(&small.bbox().dilated()) else { return false };
    for h in large.hits() {
        if !region.contains(h.x, h.y) {
            continue;
        }
        let cell = scratch.idx(h.x, h.y);
        if scratch.heads[cell] == EMPTY {
            scratch.touched.push(cell as u32);
        }
        scratch.next.push(scratch.heads[cell]);
        scratch.hits.push(*h);
        scratch.heads[cell] = (scratch.hits.len() - 1) as u32;
    }
    let mut found = false;
    'probe: for h in small.hits() {
        let x0 = h.x.saturating_sub(1).max(region.x_min);
        let x1 = h.x.saturating_add(1).min(region.x_max).min(scratch.width - 1);
        let y0 = h.y.saturating_sub(1).max(region.y_min);
        let y1 = h.y.saturating_add(1).min(region.y_max).min(scratch.height - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let mut k = scratch.heads[scratch.idx(x, y)];
                while k != EMPTY {
                    if pair_admits(h, &scratch.hits[k as usize], def) {
                        found = true;
                        break 'probe;
                    }
                    k = scratch.next[k as usize];
                }
            }
        }
    }
    scratch.clear();
    found
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeVerdict {
    RejectedTemporal,
    RejectedBBox,
    RejectedFull,
    Accepted,
}

impl MergeVerdict {
    pub fn accepted(self) -> bool {
        self == MergeVerdict::Accepted
    }
}

/// Runs the cascade. With `fast_reject` off only the full check runs.
pub fn merge_cascade(
    a: &Cluster,
    b: &Cluster,
    def: &ClusterDefinition,
    scratch: &mut MergeScratch,
    fast_reject: bool,
) -> MergeVerdict {
    if fast_reject {
        if temporal_distance(a, b) > def.dt_max {
            return MergeVerdict::RejectedTemporal;
        }
        if !bbox_intersects_with_margin(a, b) {
            return MergeVerdict::RejectedBBox;
        }
    }
    if full_merge_check(a, b, def, scratch) {
        MergeVerdict::Accepted
    } else {
        MergeVerdict::RejectedFull
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Half {
    Lower,
    Upper,
}

/// Merge worker owning one half of window `window`. Both halves adjacent to
/// the border between windows `i` and `i+1` land on worker `(i+1) mod n`.
pub fn route_to_merge_worker(window: u64, half: Half, n_data_lanes: usize) -> usize {
    let n = n_data_lanes as u64;
    match half {
        Half::Lower => (window % n) as usize,
        Half::Upper => ((window + 1) % n) as usize,
    }
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CascadeCounters {
    pub rejected_temporal: u64,
    pub rejected_bbox: u64,
    pub rejected_full: u64,
    pub accepted: u64,
}

struct Entry {
    min_toa: Nanos,
    border: bool,
    /// `None` once invalidated by a merge.
    cluster: Option<Cluster>,
}

/// Open clusters of one merge worker, ordered by first toa.
pub struct OpenClusterStore {
    def: ClusterDefinition,
    entries: VecDeque<Entry>,
    latest_time: Option<Nanos>,
    scratch: MergeScratch,
    fast_reject: bool,
    counters: CascadeCounters,
    candidates: Vec<usize>,
}

impl OpenClusterStore {
    pub fn new(def: ClusterDefinition, width: u16, height: u16) -> Self {
        Self {
            def,
            entries: VecDeque::new(),
            latest_time: None,
            scratch: MergeScratch::new(width, height),
            fast_reject: true,
            counters: CascadeCounters::default(),
            candidates: Vec::new(),
        }
    }

    /// Disables the temporal and bounding-box stages.
    pub fn with_fast_reject(mut self, on: bool) -> Self {
        self.fast_reject = on;
        self
    }

    pub fn latest_time(&self) -> Option<Nanos> {
        self.latest_time
    }

    pub fn counters(&self) -> CascadeCounters {
        self.counters
    }

    /// Entries including invalidated ones not yet swept.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// First toa of the earliest cluster still held.
    pub fn pending_min_toa(&self) -> Option<Nanos> {
        self.entries.iter().find(|e| e.cluster.is_some()).map(|e| e.min_toa)
    }

    pub fn valid_len(&self) -> usize {
        self.entries.iter().filter(|e| e.cluster.is_some()).count()
    }

    fn check_order(&mut self, min_toa: Nanos) -> Result<()> {
        if let Some(prev) = self.latest_time {
            if min_toa < prev {
                return Err(Error::OutOfOrderInput { previous: prev, got: min_toa });
            }
        }
        self.latest_time = Some(min_toa);
        Ok(())
    }

    /// Adds a cluster that cannot take part in any merge.
    pub fn insert_passthrough(&mut self, c: Cluster) -> Result<()> {
        self.check_order(c.min_toa())?;
        self.entries.push_back(Entry { min_toa: c.min_toa(), border: false, cluster: Some(c) });
        Ok(())
    }

    /// Merges `c` with every open border cluster the cascade accepts. The
    /// result takes the place of the earliest participant.
    pub fn process_border_cluster(&mut self, c: Cluster) -> Result<()> {
        self.check_order(c.min_toa())?;
        self.candidates.clear();
        for (i, e) in self.entries.iter().enumerate() {
            let Some(open) = e.cluster.as_ref() else { continue };
            if !e.border {
                continue;
            }
            let v = merge_cascade(open, &c, &self.def, &mut self.scratch, self.fast_reject);
            match v {
                MergeVerdict::RejectedTemporal => self.counters.rejected_temporal += 1,
                MergeVerdict::RejectedBBox => self.counters.rejected_bbox += 1,
                MergeVerdict::RejectedFull => self.counters.rejected_full += 1,
                MergeVerdict::Accepted => {
                    self.counters.accepted += 1;
                    self.candidates.push(i);
                }
            }
        }
        let Some((&first, rest)) = self.candidates.split_first() else {
            self.entries.push_back(Entry { min_toa: c.min_toa(), border: true, cluster: Some(c) });
            return Ok(());
        };
        let mut merged = self.entries[first].cluster.take().expect("valid candidate");
        for &i in rest {
            merged.absorb(self.entries[i].cluster.take().expect("valid candidate"));
        }
        merged.absorb(c);
        debug_assert_eq!(merged.min_toa(), self.entries[first].min_toa);
        self.entries[first].cluster = Some(merged);
        Ok(())
    }

    /// Raises the latest time without inserting (no cluster with an earlier
    /// first toa will arrive) and emits every cluster that became final.
    ///
    /// A border cluster is final once the latest time exceeds its last toa
    /// by more than `dt_max`; clusters are emitted from the front only, so
    /// output stays ordered by first toa.
    pub fn sweep_and_emit(&mut self, now: Nanos, out: &mut Vec<Cluster>) {
        let latest = self.latest_time.map_or(now, |t| t.max(now));
        self.latest_time = Some(latest);
        while let Some(front) = self.entries.front() {
            match &front.cluster {
                None => {
                    self.entries.pop_front();
                }
                Some(c) => {
                    let final_ = !front.border || latest.saturating_sub(c.max_toa()) > self.def.dt_max;
                    if !final_ {
                        break;
                    }
                    let mut c = self.entries.pop_front().unwrap().cluster.unwrap();
                    c.sort_hits();
                    out.push(c);
                }
            }
        }
    }

    /// Emits everything still valid, in order.
    pub fn flush(&mut self, out: &mut Vec<Cluster>) {
        for e in self.entries.drain(..) {
            if let Some(mut c) = e.cluster {
                c.sort_hits();
                out.push(c);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::BBox;

    fn span(min: u64, max: u64) -> Cluster {
        let mut c = Cluster::new(Hit::at(0, 0, min));
        c.push(Hit::at(0, 1, max));
        c
    }

    fn line(y: u16, xs: std::ops::Range<u16>, toa: u64) -> Cluster {
        Cluster::from_hits(xs.map(|x| Hit::at(x, y, toa)).collect()).unwrap()
    }

    #[test]
    fn temporal_distance_examples() {
        assert_eq!(temporal_distance(&span(100, 150), &span(120, 200)), 0);
        assert_eq!(temporal_distance(&span(100, 150), &span(160, 200)), 10);
        assert_eq!(temporal_distance(&span(160, 200), &span(100, 150)), 10);
    }

    #[test]
    fn bbox_examples() {
        let b = |x0, y0, x1, y1| Cluster::from_hits(vec![Hit::at(x0, y0, 0), Hit::at(x1, y1, 0)]).unwrap();
        assert!(!bbox_intersects_with_margin(&b(0, 0, 3, 3), &b(5, 5, 8, 8)));
        assert!(bbox_intersects_with_margin(&b(0, 0, 3, 3), &b(4, 0, 6, 3)));
        assert!(bbox_intersects_with_margin(&b(0, 0, 3, 3), &b(0, 0, 3, 3)));
        assert_eq!(b(0, 0, 3, 3).bbox(), BBox::new(0, 0, 3, 3));
    }

    #[test]
    fn full_check_examples() {
        let def = ClusterDefinition::local(200);
        let mut s = MergeScratch::new(256, 256);
        let a = line(5, 0..4, 0);
        let near = line(6, 3..6, 150);
        let late = line(6, 3..6, 250);
        assert!(full_merge_check(&a, &near, &def, &mut s));
        assert!(!full_merge_check(&a, &late, &def, &mut s));
        assert!(s.is_clean());
        assert!(full_merge_check(&a, &late, &ClusterDefinition::global(300), &mut s));
        assert!(!full_merge_check(&a, &late, &ClusterDefinition::static_window(200), &mut s));
    }

    #[test]
    fn routing_examples() {
        assert_eq!(route_to_merge_worker(0, Half::Lower, 4), 0);
        assert_eq!(route_to_merge_worker(0, Half::Upper, 4), 1);
        assert_eq!(route_to_merge_worker(3, Half::Upper, 4), 0);
        assert_eq!(route_to_merge_worker(5, Half::Upper, 1), 0);
    }

    #[test]
    fn store_merges_split_track() {
        let def = ClusterDefinition::local(200);
        let mut st = OpenClusterStore::new(def, 256, 256);
        st.process_border_cluster(line(10, 0..5, 9900)).unwrap();
        st.process_border_cluster(line(10, 5..9, 10_020)).unwrap();
        let mut out = Vec::new();
        st.sweep_and_emit(10_100, &mut out);
        assert!(out.is_empty());
        st.sweep_and_emit(10_221, &mut out);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].len(), 9);
        assert!(st.is_empty());
    }

    #[test]
    fn store_three_way_merge() {
        let def = ClusterDefinition::local(200);
        let mut st = OpenClusterStore::new(def, 256, 256);
        st.process_border_cluster(line(0, 0..3, 100)).unwrap();
        st.process_border_cluster(line(0, 4..7, 110)).unwrap();
        st.process_border_cluster(line(1, 0..7, 120)).unwrap();
        assert_eq!(st.valid_len(), 1);
        assert_eq!(st.len(), 2);
        let mut out = Vec::new();
        st.flush(&mut out);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].len(), 13);
        assert_eq!(out[0].min_toa(), 100);
    }

    #[test]
    fn store_rejects_out_of_order() {
        let mut st = OpenClusterStore::new(ClusterDefinition::local(200), 256, 256);
        st.process_border_cluster(span(100, 120)).unwrap();
        assert!(matches!(st.process_border_cluster(span(50, 60)), Err(Error::OutOfOrderInput { .. })));
    }

    #[test]
    fn sweep_boundary_retains() {
        let mut st = OpenClusterStore::new(ClusterDefinition::local(200), 256, 256);
        st.process_border_cluster(span(0, 100)).unwrap();
        let mut out = Vec::new();
        st.sweep_and_emit(300, &mut out);
        assert!(out.is_empty());
        st.sweep_and_emit(301, &mut out);
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn sweep_drops_invalid() {
        let mut st = OpenClusterStore::new(ClusterDefinition::local(200), 256, 256);
        st.process_border_cluster(line(0, 0..2, 0)).unwrap();
        st.process_border_cluster(line(0, 2..4, 10)).unwrap();
        let mut out = Vec::new();
        st.sweep_and_emit(u64::MAX, &mut out);
        assert_eq!(out.len(), 1);
        assert!(st.is_empty());
    }

    #[test]
    fn passthrough_not_merged() {
        let mut st = OpenClusterStore::new(ClusterDefinition::local(200), 256, 256);
        st.insert_passthrough(line(0, 0..2, 0)).unwrap();
        st.process_border_cluster(line(0, 2..4, 10)).unwrap();
        let mut out = Vec::new();
        st.flush(&mut out);
        assert_eq!(out.len(), 2);
    }

    proptest::proptest! {
        #[test]
        fn full_check_matches_pairwise(
            a in proptest::collection::vec((0u16..8, 0u16..8, 0u64..600), 1..12),
            b in proptest::collection::vec((0u16..8, 0u16..8, 0u64..600), 1..12),
            v in 0usize..3,
        ) {
            let def = [ClusterDefinition::local(150), ClusterDefinition::global(150), ClusterDefinition::static_window(300)][v];
            let ca = Cluster::from_hits(a.iter().map(|&(x, y, t)| Hit::at(x, y, t)).collect()).unwrap();
            let cb = Cluster::from_hits(b.iter().map(|&(x, y, t)| Hit::at(x, y, t)).collect()).unwrap();
            let mut s = MergeScratch::new(16, 16);
            let truth = mergeable_pairwise(&ca, &cb, &def);
            proptest::prop_assert_eq!(full_merge_check(&ca, &cb, &def, &mut s), truth);
            proptest::prop_assert_eq!(merge_cascade(&ca, &cb, &def, &mut s, true).accepted(), truth);
            proptest::prop_assert_eq!(temporal_distance(&ca, &cb), temporal_distance(&cb, &ca));
            proptest::prop_assert!(s.is_clean());
        }
    }
}
