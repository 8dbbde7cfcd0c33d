//! Restoring time order of a t-ordered hit stream.
//!
//! A stream is t-ordered when for every `i < j`, `toa(h_i) < toa(h_j) + t`.
//! Once the running maximum has advanced `t` past the smallest queued hit,
//! no hit still to come can precede it, so it is emitted.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hit_model::{Hit, Nanos};

/// Maximum backward time displacement of a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TOrderedness {
    pub t: Nanos,
}

/// Smallest `t` for which the stream is t-ordered.
///
/// The definition is strict, so a displacement of `d` needs `t = d + 1`. A
/// stream whose toas strictly increase is 0-ordered; a sorted stream with
/// repeated toas needs `t = 1`.
pub fn measure_unsortedness<'a>(hits: impl IntoIterator<Item = &'a Hit>) -> TOrderedness {
    let mut running_max: Option<Nanos> = None;
    // largest toa_i - toa_j over i < j, shifted by one to encode "< t"
    let mut needed: Nanos = 0;
    for h in hits {
        if let Some(m) = running_max {
            if m >= h.toa {
                needed = needed.max(m - h.toa + 1);
            }
            running_max = Some(m.max(h.toa));
        } else {
            running_max = Some(h.toa);
        }
    }
    TOrderedness { t: needed }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Pending {
    toa: Nanos,
    seq: u64,
    hit: HitKey,
}

// Hit wrapped so Pending can derive Ord; ordering is fully decided by (toa, seq).
#[derive(Debug, Clone, Copy)]
struct HitKey(Hit);

impl PartialEq for HitKey {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}
impl Eq for HitKey {}
impl PartialOrd for HitKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HitKey {
    fn cmp(&self, _: &Self) -> std::cmp::Ordering {
        std::cmp::Ordering::Equal
    }
}

/// Push-based priority-queue sorter. Ties are broken by arrival order.
#[derive(Debug)]
pub struct TimeSorter {
    t: Nanos,
    heap: BinaryHeap<Reverse<Pending>>,
    running_max: Option<Nanos>,
    seq: u64,
    max_queue_len: usize,
    max_queue_span: Nanos,
}

impl TimeSorter {
    pub fn new(t: Nanos) -> Self {
        Self { t, heap: BinaryHeap::new(), running_max: None, seq: 0, max_queue_len: 0, max_queue_span: 0 }
    }

    pub fn t(&self) -> Nanos {
        self.t
    }

    /// Queues `hit` and appends every hit that became safe to `out`.
    pub fn push(&mut self, hit: Hit, out: &mut Vec<Hit>) -> Result<()> {
        if let Some(m) = self.running_max {
            if m >= hit.toa && m - hit.toa >= self.t {
                return Err(Error::UnsortednessExceeded { hit, displacement: m - hit.toa, bound: self.t });
            }
        }
        self.heap.push(Reverse(Pending { toa: hit.toa, seq: self.seq, hit: HitKey(hit) }));
        self.seq += 1;
        self.advance_to(hit.toa, out);
        Ok(())
    }

    /// Raises the running maximum without a hit (the caller vouches that the
    /// underlying stream has seen `toa`) and emits what became safe.
    pub fn advance_to(&mut self, toa: Nanos, out: &mut Vec<Hit>) {
        let m = self.running_max.map_or(toa, |m| m.max(toa));
        self.running_max = Some(m);
        self.max_queue_len = self.max_queue_len.max(self.heap.len());
        while let Some(Reverse(p)) = self.heap.peek() {
            if m - p.toa.min(m) >= self.t {
                out.push(self.heap.pop().unwrap().0.hit.0);
            } else {
                break;
            }
        }
        if let Some(Reverse(p)) = self.heap.peek() {
            self.max_queue_span = self.max_queue_span.max(m.saturating_sub(p.toa));
        }
    }

    /// Every hit still to come is guaranteed to have a toa strictly above
    /// this value (`None` while nothing is guaranteed).
    pub fn safe_horizon(&self) -> Option<Nanos> {
        self.running_max.and_then(|m| m.checked_sub(self.t))
    }

    /// Drains the queue at end of stream.
    pub fn finish(&mut self, out: &mut Vec<Hit>) {
        while let Some(Reverse(p)) = self.heap.pop() {
            out.push(p.hit.0);
        }
    }

    pub fn queued(&self) -> usize {
        self.heap.len()
    }

    /// Largest `running_max - min(queue)` observed after emission; always `< t`.
    pub fn max_queue_span(&self) -> Nanos {
        self.max_queue_span
    }

    pub fn max_queue_len(&self) -> usize {
        self.max_queue_len
    }

    /// Toa range currently held: `max(queue) - min(queue)`.
    pub fn queue_span(&self) -> Nanos {
        let min = self.heap.peek().map(|Reverse(p)| p.toa);
        let max = self.heap.iter().map(|Reverse(p)| p.toa).max();
        match (min, max) {
            (Some(a), Some(b)) => b - a,
            _ => 0,
        }
    }
}

/// Iterator adapter producing a fully time-ordered stream.
pub struct TimeSort<I> {
    inner: Option<I>,
    sorter: TimeSorter,
    ready: std::collections::VecDeque<Hit>,
    scratch: Vec<Hit>,
}

impl<I> TimeSort<I> {
    pub fn sorter(&self) -> &TimeSorter {
        &self.sorter
    }
}

/// Sorts a t-ordered stream with bounded buffering.
pub fn time_sort<I>(hits: I, t: Nanos) -> TimeSort<I::IntoIter>
where
    I: IntoIterator<Item = Result<Hit>>,
{
    TimeSort { inner: Some(hits.into_iter()), sorter: TimeSorter::new(t), ready: Default::default(), scratch: Vec::new() }
}

impl<I: Iterator<Item = Result<Hit>>> Iterator for TimeSort<I> {
    type Item = Result<Hit>;

    fn next(&mut self) -> Option<Result<Hit>> {
        loop {
            if let Some(h) = self.ready.pop_front() {
                return Some(Ok(h));
            }
            let inner = self.inner.as_mut()?;
            match inner.next() {
                Some(Ok(hit)) => {
                    if let Err(e) = self.sorter.push(hit, &mut self.scratch) {
                        self.inner = None;
                        return Some(Err(e));
                    }
                }
                Some(Err(e)) => {
                    self.inner = None;
                    return Some(Err(e));
                }
                None => {
                    self.inner = None;
                    self.sorter.finish(&mut self.scratch);
                }
            }
            self.ready.extend(self.scratch.drain(..));
        }
    }
}
