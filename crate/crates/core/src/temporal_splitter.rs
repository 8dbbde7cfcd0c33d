//! Fixed-duration time windows, round-robin lane assignment and border
//! tagging, plus back-of-envelope split estimates for the three ways of
//! partitioning a hit stream.
//!
//! Windows are anchored at toa 0 and half-open: window `i` covers
//! `[i*W, (i+1)*W)`, so a hit exactly at `(i+1)*W` belongs to window `i+1`.

use serde::{Deserialize, Serialize};

use crate::cluster::Cluster;
use crate::error::{Error, Result};
use crate::hit_model::{Hit, Nanos};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub split_window_size: Nanos,
    pub dt_max: Nanos,
    pub n_data_lanes: usize,
}

impl SplitConfig {
    pub fn new(split_window_size: Nanos, dt_max: Nanos, n_data_lanes: usize) -> Result<Self> {
        let cfg = Self { split_window_size, dt_max, n_data_lanes };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_data_lanes == 0 {
            return Err(Error::Config("n_data_lanes must be at least 1".into()));
        }
        if self.split_window_size < 2 * self.dt_max || self.split_window_size == 0 {
            return Err(Error::Config(format!(
                "split window size {} ns must be at least 2 * dt_max = {} ns",
                self.split_window_size,
                2 * self.dt_max
            )));
        }
        Ok(())
    }

    /// Windows narrower than `4 * dt_max` leave little room for clusters
    /// between the two border regions.
    pub fn is_tight(&self) -> bool {
        self.split_window_size < 4 * self.dt_max
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TimeWindow {
    pub index: u64,
    pub start_toa: Nanos,
    /// Exclusive.
    pub end_toa: Nanos,
}

impl TimeWindow {
    pub fn new(index: u64, size: Nanos) -> Self {
        Self { index, start_toa: index * size, end_toa: (index + 1) * size }
    }

    pub fn containing(toa: Nanos, size: Nanos) -> Self {
        Self::new(toa / size, size)
    }

    pub fn lane(&self, n_data_lanes: usize) -> usize {
        (self.index % n_data_lanes as u64) as usize
    }

    pub fn contains(&self, toa: Nanos) -> bool {
        (self.start_toa..self.end_toa).contains(&toa)
    }

    pub fn midpoint(&self) -> Nanos {
        self.start_toa + (self.end_toa - self.start_toa) / 2
    }

    pub fn near_lower(&self, toa: Nanos, dt_max: Nanos) -> bool {
        toa - self.start_toa <= dt_max
    }

    pub fn near_upper(&self, toa: Nanos, dt_max: Nanos) -> bool {
        self.end_toa - toa <= dt_max
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Border {
    None,
    Lower,
    Upper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BorderTag {
    pub is_border: bool,
    pub which: Border,
}

/// Window of `hit` and whether it lies within `dt_max` of a window edge.
/// With a window of exactly `2 * dt_max` the midpoint is near both edges; it
/// is tagged lower.
pub fn assign_window(hit: &Hit, cfg: &SplitConfig) -> (TimeWindow, BorderTag) {
    let w = TimeWindow::containing(hit.toa, cfg.split_window_size);
    let which = if w.near_lower(hit.toa, cfg.dt_max) {
        Border::Lower
    } else if w.near_upper(hit.toa, cfg.dt_max) {
        Border::Upper
    } else {
        Border::None
    };
    (w, BorderTag { is_border: which != Border::None, which })
}

/// Whether `cluster` has to be examined at a window border: it has a hit
/// within `dt_max` below the end of its first window, or it crosses into a
/// later window. Each border is counted once, from the earlier window.
pub fn is_border_cluster(cluster: &Cluster, cfg: &SplitConfig) -> bool {
    let w = TimeWindow::containing(cluster.min_toa(), cfg.split_window_size);
    !w.contains(cluster.max_toa()) || w.near_upper(cluster.max_toa(), cfg.dt_max)
}

/// Whether `cluster` has hits in more than one window.
pub fn is_split_cluster(cluster: &Cluster, cfg: &SplitConfig) -> bool {
    cluster.min_toa() / cfg.split_window_size != cluster.max_toa() / cfg.split_window_size
}

/// Fraction of `clusters` that are border clusters.
pub fn empirical_border_fraction(clusters: &[Cluster], cfg: &SplitConfig) -> f64 {
    if clusters.is_empty() {
        return 0.0;
    }
    clusters.iter().filter(|c| is_border_cluster(c, cfg)).count() as f64 / clusters.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitEstimate {
    pub border_cluster_fraction: f64,
    pub expected_split_fraction: f64,
}

/// Cluster start times are taken as uniform over the window. A cluster of
/// duration `span` is a border cluster when its last hit falls within
/// `dt_max` of the next border or past it, which happens for start times in
/// an interval of length `dt_max + span`; it is split when it straddles the
/// border, an interval of length `span`.
pub fn estimate_split_fractions(mean_cluster_span: Nanos, split_window_size: Nanos, dt_max: Nanos) -> SplitEstimate {
    let w = split_window_size as f64;
    SplitEstimate {
        border_cluster_fraction: ((dt_max + mean_cluster_span) as f64 / w).min(1.0),
        expected_split_fraction: (mean_cluster_span as f64 / w).min(1.0),
    }
}

/// Fraction of clusters of width `mean_cluster_width` pixels that come
/// within one pixel of one of `n_lines` straight region borders across a
/// sensor `sensor_width` pixels wide.
pub fn spatial_border_fraction(mean_cluster_width: f64, n_lines: u32, sensor_width: u32) -> f64 {
    (n_lines as f64 * (mean_cluster_width + 1.0) / sensor_width as f64).min(1.0)
}

/// Block size (in hits) a hit-count split needs so that its border region,
/// `t` of unsortedness around each block edge, is as small a share of the
/// block as `p_border`.
pub fn hit_count_equivalent_block(max_hit_rate_per_s: f64, t_unsortedness_s: f64, p_border: f64) -> f64 {
    max_hit_rate_per_s * t_unsortedness_s / p_border
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SplitConfig {
        SplitConfig::new(10_000, 200, 4).unwrap()
    }

    #[test]
    fn window_examples() {
        let (w, tag) = assign_window(&Hit::at(0, 0, 0), &cfg());
        assert_eq!((w.index, tag.which), (0, Border::Lower));
        let (w, tag) = assign_window(&Hit::at(0, 0, 5000), &cfg());
        assert_eq!((w.index, tag.is_border), (0, false));
        let (w, tag) = assign_window(&Hit::at(0, 0, 9950), &cfg());
        assert_eq!((w.index, tag.which), (0, Border::Upper));
        let (w, tag) = assign_window(&Hit::at(0, 0, 10_000), &cfg());
        assert_eq!((w.index, tag.which), (1, Border::Lower));
        assert_eq!(w.lane(4), 1);
        assert_eq!(TimeWindow::new(7, 10_000).lane(4), 3);
    }

    #[test]
    fn border_edges() {
        let c = cfg();
        assert!(assign_window(&Hit::at(0, 0, 200), &c).1.is_border);
        assert!(!assign_window(&Hit::at(0, 0, 201), &c).1.is_border);
        assert!(assign_window(&Hit::at(0, 0, 9800), &c).1.is_border);
        assert!(!assign_window(&Hit::at(0, 0, 9799), &c).1.is_border);
    }

    #[test]
    fn config_validation() {
        assert!(SplitConfig::new(399, 200, 1).is_err());
        assert!(SplitConfig::new(400, 200, 1).unwrap().is_tight());
        assert!(SplitConfig::new(10_000, 200, 0).is_err());
    }

    #[test]
    fn estimates() {
        let e = estimate_split_fractions(25, 10_000, 200);
        assert!((e.border_cluster_fraction - 0.02).abs() < 0.005);
        assert!(e.expected_split_fraction < 0.01);
        let p = spatial_border_fraction(4.0, 2, 256);
        assert!((p - 0.04).abs() < 0.002);
        let block = hit_count_equivalent_block(40e6, 600e-6, 0.04);
        assert!((block - 6e5).abs() < 1.0);
        let far = estimate_split_fractions(25, u64::MAX / 2, 200);
        assert!(far.border_cluster_fraction < 1e-12);
    }

    #[test]
    fn border_cluster_classification() {
        let c = cfg();
        let mut a = Cluster::new(Hit::at(0, 0, 9700));
        assert!(!is_border_cluster(&a, &c));
        a.push(Hit::at(0, 1, 9850));
        assert!(is_border_cluster(&a, &c));
        a.push(Hit::at(0, 2, 10_010));
        assert!(is_split_cluster(&a, &c));
    }

    proptest::proptest! {
        #[test]
        fn windows_partition_time(toa in 0u64..10_000_000, size in 1u64..100_000) {
            let w = TimeWindow::containing(toa, size);
            proptest::prop_assert!(w.contains(toa));
            proptest::prop_assert_eq!(w.end_toa - w.start_toa, size);
            proptest::prop_assert!(!TimeWindow::new(w.index + 1, size).contains(toa));
        }

        #[test]
        fn round_robin_balanced(first in 0u64..1000, count in 1u64..200, lanes in 1usize..9) {
            let mut load = vec![0u64; lanes];
            for i in first..first + count {
                load[TimeWindow::new(i, 10).lane(lanes)] += 1;
            }
            proptest::prop_assert!(load.iter().max().unwrap() - load.iter().min().unwrap() <= 1);
        }
    }
}
