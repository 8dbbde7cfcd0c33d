//! Cluster value type shared by every clustering backend.

use serde::{Deserialize, Serialize};

use crate::hit_model::{Hit, Nanos};

/// Axis-aligned pixel rectangle, inclusive on both ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: u16,
    pub y_min: u16,
    pub x_max: u16,
    pub y_max: u16,
}

impl BBox {
    pub fn new(x_min: u16, y_min: u16, x_max: u16, y_max: u16) -> Self {
        debug_assert!(x_min <= x_max && y_min <= y_max);
        Self { x_min, y_min, x_max, y_max }
    }

    pub fn of(hit: &Hit) -> Self {
        Self { x_min: hit.x, y_min: hit.y, x_max: hit.x, y_max: hit.y }
    }

    pub fn extend(&mut self, hit: &Hit) {
        self.x_min = self.x_min.min(hit.x);
        self.y_min = self.y_min.min(hit.y);
        self.x_max = self.x_max.max(hit.x);
        self.y_max = self.y_max.max(hit.y);
    }

    pub fn union(&self, other: &BBox) -> BBox {
        BBox {
            x_min: self.x_min.min(other.x_min),
            y_min: self.y_min.min(other.y_min),
            x_max: self.x_max.max(other.x_max),
            y_max: self.y_max.max(other.y_max),
        }
    }

    pub fn contains(&self, x: u16, y: u16) -> bool {
        (self.x_min..=self.x_max).contains(&x) && (self.y_min..=self.y_max).contains(&y)
    }

    /// Overlap after dilating both boxes by one pixel, i.e. some pixel of one
    /// box is equal or 8-adjacent to some pixel of the other.
    pub fn touches(&self, other: &BBox) -> bool {
        self.x_min as u32 <= other.x_max as u32 + 1
            && other.x_min as u32 <= self.x_max as u32 + 1
            && self.y_min as u32 <= other.y_max as u32 + 1
            && other.y_min as u32 <= self.y_max as u32 + 1
    }

    /// This box grown by one pixel on every side (saturating at 0 and u16::MAX).
    pub fn dilated(&self) -> BBox {
        BBox {
            x_min: self.x_min.saturating_sub(1),
            y_min: self.y_min.saturating_sub(1),
            x_max: self.x_max.saturating_add(1),
            y_max: self.y_max.saturating_add(1),
        }
    }

    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        let b = BBox {
            x_min: self.x_min.max(other.x_min),
            y_min: self.y_min.max(other.y_min),
            x_max: self.x_max.min(other.x_max),
            y_max: self.y_max.min(other.y_max),
        };
        (b.x_min <= b.x_max && b.y_min <= b.y_max).then_some(b)
    }

    pub fn width(&self) -> u32 {
        (self.x_max - self.x_min) as u32 + 1
    }

    pub fn height(&self) -> u32 {
        (self.y_max - self.y_min) as u32 + 1
    }
}

/// A set of hits with cached time extent and bounding box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    hits: Vec<Hit>,
    min_toa: Nanos,
    max_toa: Nanos,
    bbox: BBox,
    valid: bool,
}

impl Cluster {
    pub fn new(hit: Hit) -> Self {
        Self { hits: vec![hit], min_toa: hit.toa, max_toa: hit.toa, bbox: BBox::of(&hit), valid: true }
    }

    /// Builds a cluster from a non-empty hit list, computing the cached
    /// extent in one pass. Returns `None` for an empty list.
    pub fn from_hits(hits: Vec<Hit>) -> Option<Self> {
        let first = *hits.first()?;
        let mut c = Self { hits: Vec::new(), min_toa: first.toa, max_toa: first.toa, bbox: BBox::of(&first), valid: true };
        for h in &hits {
            c.min_toa = c.min_toa.min(h.toa);
            c.max_toa = c.max_toa.max(h.toa);
            c.bbox.extend(h);
        }
        c.hits = hits;
        Some(c)
    }

    pub fn push(&mut self, hit: Hit) {
        self.min_toa = self.min_toa.min(hit.toa);
        self.max_toa = self.max_toa.max(hit.toa);
        self.bbox.extend(&hit);
        self.hits.push(hit);
    }

    /// Moves all hits of `other` into `self`, updating the cached extent
    /// incrementally.
    pub fn absorb(&mut self, other: Cluster) {
        self.min_toa = self.min_toa.min(other.min_toa);
        self.max_toa = self.max_toa.max(other.max_toa);
        self.bbox = self.bbox.union(&other.bbox);
        if self.hits.len() < other.hits.len() {
            let mut hits = other.hits;
            hits.append(&mut self.hits);
            self.hits = hits;
        } else {
            let mut hits = other.hits;
            self.hits.append(&mut hits);
        }
    }

    /// Stable sort of the hits by time of arrival.
    pub fn sort_hits(&mut self) {
        self.hits.sort_by_key(|h| h.toa);
    }

    pub fn hits(&self) -> &[Hit] {
        &self.hits
    }

    pub fn into_hits(self) -> Vec<Hit> {
        self.hits
    }

    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }

    pub fn min_toa(&self) -> Nanos {
        self.min_toa
    }

    pub fn max_toa(&self) -> Nanos {
        self.max_toa
    }

    pub fn bbox(&self) -> BBox {
        self.bbox
    }

    pub fn is_valid(&self) -> bool {
        self.valid
    }

    pub fn invalidate(&mut self) {
        self.valid = false;
    }

    pub fn span(&self) -> Nanos {
        self.max_toa - self.min_toa
    }
}

/// Sorts clusters by first time of arrival (stable).
pub fn sort_by_min_toa(clusters: &mut [Cluster]) {
    clusters.sort_by_key(|c| c.min_toa());
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extent_tracks_hits() {
        let mut c = Cluster::new(Hit::at(5, 5, 100));
        c.push(Hit::at(3, 7, 50));
        c.push(Hit::at(6, 4, 300));
        assert_eq!(c.min_toa(), 50);
        assert_eq!(c.max_toa(), 300);
        assert_eq!(c.bbox(), BBox::new(3, 4, 6, 7));
        let rebuilt = Cluster::from_hits(c.hits().to_vec()).unwrap();
        assert_eq!(rebuilt, c);
    }

    #[test]
    fn absorb_merges_extent() {
        let mut a = Cluster::new(Hit::at(0, 0, 10));
        let mut b = Cluster::new(Hit::at(9, 9, 5));
        b.push(Hit::at(8, 9, 40));
        a.absorb(b);
        assert_eq!(a.len(), 3);
        assert_eq!((a.min_toa(), a.max_toa()), (5, 40));
        assert_eq!(a.bbox(), BBox::new(0, 0, 9, 9));
    }

    #[test]
    fn touching_boxes() {
        let a = BBox::new(0, 0, 3, 3);
        assert!(!a.touches(&BBox::new(5, 5, 8, 8)));
        assert!(a.touches(&BBox::new(4, 0, 6, 3)));
        assert!(a.touches(&a));
        assert!(a.touches(&BBox::new(4, 4, 4, 4)));
        assert!(!a.touches(&BBox::new(5, 0, 6, 3)));
    }
}
