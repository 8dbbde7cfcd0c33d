//! Synthetic hit streams with known ground truth.
//!
//! Cluster sizes follow `1 + NegativeBinomial` fitted to a preset's mean and
//! standard deviation. Sizes are read off the inverse CDF at a randomly
//! shifted golden-ratio sequence, so every size has the target marginal
//! distribution while sample moments converge much faster than with
//! independent draws; heavy-tailed presets would otherwise miss their mean
//! by more than 10% at 10^4 clusters.
//!
//! Cluster start times form a Poisson process at the preset's hit rate.
//! Every pixel list is prefix-connected (each pixel touches an earlier one)
//! and a cluster's toas span at most `mean_cluster_span <= dt_max`, so each
//! ground-truth cluster is one cluster under every variant. Clusters closer
//! than `2 * dt_max` in time must have non-touching dilated boxes, so
//! distinct ground-truth clusters never join.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::cluster::BBox;
use crate::error::{Error, Result};
use crate::hit_model::{Energy, Hit, Nanos, MATRIX_SIZE};
use crate::ingest_sort::TOrderedness;
use crate::oracle_metrics::Clustering;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    /// Filled disc, toas random within the span.
    Blob,
    /// Line segment, toas random within the span.
    StraightTrack,
    /// Line segment, toas increasing along the track.
    AngledTrack,
    /// Filled disc, toas increasing from the core outwards.
    HeavyBlob,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetPreset {
    pub name: &'static str,
    pub mean_cluster_size: f64,
    pub std_cluster_size: f64,
    pub shape: Shape,
    pub mean_cluster_span: Nanos,
    /// MHit/s.
    pub hit_rate: f64,
}

/// Cluster-size statistics of the benchmark datasets (Am-241 gamma, 40 GeV/c
/// pions and 385 GeV/c lead ions at several incidence angles).
pub const PRESETS: [DatasetPreset; 10] = [
    DatasetPreset { name: "gamma", mean_cluster_size: 2.46, std_cluster_size: 2.15, shape: Shape::Blob, mean_cluster_span: 25, hit_rate: 5.0 },
    DatasetPreset { name: "pion0", mean_cluster_size: 7.22, std_cluster_size: 27.35, shape: Shape::StraightTrack, mean_cluster_span: 25, hit_rate: 5.0 },
    DatasetPreset { name: "pion45", mean_cluster_size: 23.33, std_cluster_size: 33.47, shape: Shape::AngledTrack, mean_cluster_span: 50, hit_rate: 5.0 },
    DatasetPreset { name: "pion75", mean_cluster_size: 60.27, std_cluster_size: 64.33, shape: Shape::AngledTrack, mean_cluster_span: 100, hit_rate: 5.0 },
    DatasetPreset { name: "pb0", mean_cluster_size: 131.84, std_cluster_size: 500.51, shape: Shape::HeavyBlob, mean_cluster_span: 100, hit_rate: 5.0 },
    DatasetPreset { name: "pb50", mean_cluster_size: 26.51, std_cluster_size: 274.99, shape: Shape::HeavyBlob, mean_cluster_span: 100, hit_rate: 5.0 },
    DatasetPreset { name: "pb90", mean_cluster_size: 20.45, std_cluster_size: 356.57, shape: Shape::HeavyBlob, mean_cluster_span: 100, hit_rate: 5.0 },
    DatasetPreset { name: "pb0-subset", mean_cluster_size: 2231.45, std_cluster_size: 363.69, shape: Shape::HeavyBlob, mean_cluster_span: 150, hit_rate: 5.0 },
    DatasetPreset { name: "pb50-subset", mean_cluster_size: 3622.54, std_cluster_size: 860.56, shape: Shape::HeavyBlob, mean_cluster_span: 150, hit_rate: 5.0 },
    DatasetPreset { name: "pb90-subset", mean_cluster_size: 7258.26, std_cluster_size: 5105.26, shape: Shape::HeavyBlob, mean_cluster_span: 150, hit_rate: 5.0 },
];

impl DatasetPreset {
    pub fn by_name(name: &str) -> Result<&'static DatasetPreset> {
        PRESETS.iter().find(|p| p.name.eq_ignore_ascii_case(name)).ok_or_else(|| {
            let names: Vec<_> = PRESETS.iter().map(|p| p.name).collect();
            Error::Config(format!("unknown preset `{name}` (expected one of {})", names.join(", ")))
        })
    }

    pub fn names() -> impl Iterator<Item = &'static str> {
        PRESETS.iter().map(|p| p.name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub width: u16,
    pub height: u16,
    /// Separation scale for overlap rejection.
    pub dt_max: Nanos,
    /// Maximum backward displacement applied to the stream.
    pub unsortedness: Nanos,
    /// Placement attempts per cluster before giving up.
    pub max_attempts: u32,
    /// Longest track, in pixels along its major axis.
    pub max_track_length: u32,
    /// Overrides the preset's hit rate (MHit/s).
    pub hit_rate: Option<f64>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            width: MATRIX_SIZE,
            height: MATRIX_SIZE,
            dt_max: 200,
            unsortedness: 1_000,
            max_attempts: 1_000,
            max_track_length: 64,
            hit_rate: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    /// Hits in stream (arrival) order.
    pub hits: Vec<Hit>,
    /// Ground-truth cluster id per hit.
    pub labels: Vec<u32>,
    pub n_clusters: u32,
    /// The stream is t-ordered for this bound.
    pub t: TOrderedness,
}

impl Dataset {
    pub fn ground_truth(&self) -> Clustering {
        Clustering::from_labels(&self.labels)
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.n_clusters as usize];
        for &l in &self.labels {
            sizes[l as usize] += 1;
        }
        sizes
    }

    pub fn max_toa(&self) -> Nanos {
        self.hits.iter().map(|h| h.toa).max().unwrap_or(0)
    }
}

/// Inverse CDF of `1 + NegativeBinomial` with the given mean and standard
/// deviation, truncated at `max`.
pub struct SizeDistribution {
    cdf: Vec<f64>,
}

impl SizeDistribution {
    pub fn new(mean: f64, std: f64, max: usize) -> Result<Self> {
        if !(mean >= 1.0) || !(std >= 0.0) || max == 0 {
            return Err(Error::Config(format!("invalid size distribution mean {mean}, std {std}")));
        }
        let m = mean - 1.0;
        let v = std * std;
        let mut pmf = Vec::with_capacity(max);
        if m <= 0.0 {
            pmf.push(1.0);
        } else if v <= m {
            // Not over-dispersed: Poisson(m).
            let mut p = (-m).exp();
            for k in 0..max {
                pmf.push(p);
                p *= m / (k + 1) as f64;
            }
        } else {
            let theta = (v - m) / m;
            let r = m / theta;
            let q = theta / (1.0 + theta);
            let mut p = (-r * (1.0 + theta).ln()).exp();
            for k in 0..max {
                pmf.push(p);
                p *= (k as f64 + r) / (k + 1) as f64 * q;
            }
        }
        let total: f64 = pmf.iter().sum();
        let mut acc = 0.0;
        let cdf = pmf
            .iter()
            .map(|p| {
                acc += p / total;
                acc
            })
            .collect();
        Ok(Self { cdf })
    }

    /// Size at quantile `u` in `[0, 1)`.
    pub fn quantile(&self, u: f64) -> usize {
        1 + self.cdf.partition_point(|&c| c <= u).min(self.cdf.len() - 1)
    }

    pub fn mean(&self) -> f64 {
        let mut prev = 0.0;
        self.cdf
            .iter()
            .enumerate()
            .map(|(k, &c)| {
                let p = c - prev;
                prev = c;
                (k + 1) as f64 * p
            })
            .sum()
    }
}

const GOLDEN: f64 = 0.618_033_988_749_894_8;

/// Stream of cluster sizes for `preset`.
pub struct SizeSampler {
    dist: SizeDistribution,
    u: f64,
}

impl SizeSampler {
    pub fn new(preset: &DatasetPreset, max: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self { dist: SizeDistribution::new(preset.mean_cluster_size, preset.std_cluster_size, max)?, u: rng.gen() })
    }

    pub fn next_size(&mut self) -> usize {
        self.u = (self.u + GOLDEN).fract();
        self.dist.quantile(self.u)
    }
}

/// `n` cluster sizes as `generate` would draw them for `seed`.
pub fn sample_cluster_sizes(preset: &DatasetPreset, n: usize, seed: u64, cfg: &GeneratorConfig) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = SizeSampler::new(preset, max_size(cfg), &mut rng)?;
    Ok((0..n).map(|_| s.next_size()).collect())
}

fn max_size(cfg: &GeneratorConfig) -> usize {
    cfg.width as usize * cfg.height as usize
}

/// Pixels of a disc of `size` pixels around `(cx, cy)`, clipped to the
/// matrix, nearest first.
fn disc(size: usize, cx: i32, cy: i32, w: i32, h: i32) -> Vec<(u16, u16)> {
    let mut r = ((size as f64 / std::f64::consts::PI).sqrt().ceil() as i32) + 2;
    loop {
        let mut px: Vec<(i32, i32, i32)> = Vec::new();
        for y in (cy - r).max(0)..=(cy + r).min(h - 1) {
            for x in (cx - r).max(0)..=(cx + r).min(w - 1) {
                let (dx, dy) = (x - cx, y - cy);
                if dx * dx + dy * dy <= r * r {
                    px.push((dx * dx + dy * dy, y, x));
                }
            }
        }
        if px.len() >= size || r > w + h {
            px.sort_unstable();
            return px.into_iter().take(size).map(|(_, y, x)| (x as u16, y as u16)).collect();
        }
        r *= 2;
    }
}

/// Track of `size` pixels: a line with a random direction, widened
/// perpendicular to its major axis when longer than `max_len`. Offsets are
/// relative and may be negative.
fn track(size: usize, max_len: u32, rng: &mut impl Rng) -> Vec<(i32, i32)> {
    let width = size.div_ceil(max_len as usize).max(1);
    let len = size.div_ceil(width) as i32;
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let (c, s) = (angle.cos(), angle.sin());
    let x_major = c.abs() >= s.abs();
    let slope = if x_major { s / c } else { c / s };
    let mut out = Vec::with_capacity(size);
    'outer: for i in 0..len {
        let minor = (i as f64 * slope).round() as i32;
        for j in 0..width as i32 {
            if out.len() == size {
                break 'outer;
            }
            out.push(if x_major { (i, minor + j) } else { (minor + j, i) });
        }
    }
    out
}

struct Placed {
    max_toa: Nanos,
    bbox: BBox,
}

/// Generates a stream of `n_hits` hits.
pub fn generate(preset: &DatasetPreset, n_hits: usize, seed: u64, cfg: &GeneratorConfig) -> Result<Dataset> {
    if n_hits == 0 {
        return Err(Error::Config("n_hits must be positive".into()));
    }
    generate_until(preset, seed, cfg, |hits, _| hits >= n_hits, Some(n_hits))
}

/// Generates a stream of exactly `n_clusters` complete clusters.
pub fn generate_clusters(preset: &DatasetPreset, n_clusters: usize, seed: u64, cfg: &GeneratorConfig) -> Result<Dataset> {
    if n_clusters == 0 {
        return Err(Error::Config("n_clusters must be positive".into()));
    }
    generate_until(preset, seed, cfg, |_, clusters| clusters >= n_clusters, None)
}

fn generate_until(
    preset: &DatasetPreset,
    seed: u64,
    cfg: &GeneratorConfig,
    done: impl Fn(usize, usize) -> bool,
    hit_cap: Option<usize>,
) -> Result<Dataset> {
    if preset.mean_cluster_span > cfg.dt_max {
        return Err(Error::Config(format!(
            "cluster span {} ns exceeds dt_max {} ns",
            preset.mean_cluster_span, cfg.dt_max
        )));
    }
    let rate = cfg.hit_rate.unwrap_or(preset.hit_rate);
    if !(rate > 0.0) {
        return Err(Error::Config("hit rate must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sizes = SizeSampler::new(preset, max_size(cfg), &mut rng)?;
    // Mean gap between cluster starts in ns: size / (hits per ns).
    let gap = Exp::new(rate / 1000.0 / preset.mean_cluster_size).map_err(|e| Error::Config(e.to_string()))?;
    let energy = Exp::new(1.0 / 20.0).expect("positive rate");
    let (w, h) = (cfg.width as i32, cfg.height as i32);

    let mut hits: Vec<Hit> = Vec::new();
    let mut labels: Vec<u32> = Vec::new();
    let mut recent: VecDeque<Placed> = VecDeque::new();
    let mut t = 0f64;
    let mut n_clusters = 0u32;
    while !done(hits.len(), n_clusters as usize) {
        t += gap.sample(&mut rng);
        let start = t as Nanos;
        let mut size = sizes.next_size();
        if let Some(cap) = hit_cap {
            size = size.min(cap - hits.len());
        }
        while recent.front().is_some_and(|p| start.saturating_sub(p.max_toa) > 2 * cfg.dt_max) {
            recent.pop_front();
        }
        let shape = match preset.shape {
            Shape::StraightTrack | Shape::AngledTrack if size > (cfg.max_track_length as usize) * (cfg.max_track_length as usize) => Shape::Blob,
            s => s,
        };
        let mut pixels = None;
        for _ in 0..cfg.max_attempts {
            let px: Vec<(u16, u16)> = match shape {
                Shape::Blob | Shape::HeavyBlob => disc(size, rng.gen_range(0..w), rng.gen_range(0..h), w, h),
                Shape::StraightTrack | Shape::AngledTrack => {
                    let rel = track(size, cfg.max_track_length, &mut rng);
                    let (x0, x1) = (rel.iter().map(|p| p.0).min().unwrap(), rel.iter().map(|p| p.0).max().unwrap());
                    let (y0, y1) = (rel.iter().map(|p| p.1).min().unwrap(), rel.iter().map(|p| p.1).max().unwrap());
                    if x1 - x0 >= w || y1 - y0 >= h {
                        continue;
                    }
                    let ox = rng.gen_range(-x0..w - x1);
                    let oy = rng.gen_range(-y0..h - y1);
                    rel.into_iter().map(|(x, y)| ((x + ox) as u16, (y + oy) as u16)).collect()
                }
            };
            let mut bbox = BBox::new(px[0].0, px[0].1, px[0].0, px[0].1);
            for &(x, y) in &px {
                bbox.extend(&Hit::at(x, y, 0));
            }
            if recent.iter().all(|p| !p.bbox.touches(&bbox)) {
                pixels = Some((px, bbox));
                break;
            }
        }
        let Some((px, bbox)) = pixels else {
            return Err(Error::GenerationSaturated { size, attempts: cfg.max_attempts as usize });
        };
        let span = preset.mean_cluster_span;
        let n = px.len();
        let mut max_toa = start;
        for (i, (x, y)) in px.into_iter().enumerate() {
            let offset = match shape {
                Shape::Blob | Shape::StraightTrack => {
                    if i == 0 {
                        0
                    } else {
                        rng.gen_range(0..=span)
                    }
                }
                Shape::AngledTrack | Shape::HeavyBlob => {
                    if n == 1 {
                        0
                    } else {
                        span * i as u64 / (n as u64 - 1)
                    }
                }
            };
            let toa = start + offset;
            max_toa = max_toa.max(toa);
            hits.push(Hit::new(x, y, toa, Energy::from_kev(5.0 + energy.sample(&mut rng))));
            labels.push(n_clusters);
        }
        recent.push_back(Placed { max_toa, bbox });
        n_clusters += 1;
    }

    // Readout order: each hit is delayed by up to t, which displaces it
    // backwards relative to later-toa hits by less than t.
    let mut order: Vec<(Nanos, u32)> = hits
        .iter()
        .enumerate()
        .map(|(i, h)| (h.toa + if cfg.unsortedness > 0 { rng.gen_range(0..cfg.unsortedness) } else { 0 }, i as u32))
        .collect();
    order.sort_unstable();
    let hits_out = order.iter().map(|&(_, i)| hits[i as usize]).collect();
    let labels_out = order.iter().map(|&(_, i)| labels[i as usize]).collect();
    Ok(Dataset { hits: hits_out, labels: labels_out, n_clusters, t: TOrderedness { t: cfg.unsortedness.max(1) } })
}

/// Concatenates `n_rep` copies, copy `k` shifted by `k * period`. Labels
/// are shifted so each copy has its own clusters.
pub fn repeat_with_offset(data: &Dataset, n_rep: usize, period: Nanos) -> Result<Dataset> {
    if n_rep == 0 {
        return Err(Error::Config("n_rep must be positive".into()));
    }
    if !data.hits.is_empty() && period <= data.max_toa() {
        return Err(Error::Config(format!("period {period} ns must exceed the max toa {} ns", data.max_toa())));
    }
    let mut hits = Vec::with_capacity(data.hits.len() * n_rep);
    let mut labels = Vec::with_capacity(data.labels.len() * n_rep);
    for k in 0..n_rep {
        let shift = k as u64 * period;
        hits.extend(data.hits.iter().map(|h| Hit { toa: h.toa + shift, ..*h }));
        labels.extend(data.labels.iter().map(|&l| l + k as u32 * data.n_clusters));
    }
    Ok(Dataset { hits, labels, n_clusters: data.n_clusters * n_rep as u32, t: data.t })
}

/// Repetition period that keeps copies more than `2 * dt_max` apart.
pub fn default_period(hits: &[Hit], dt_max: Nanos) -> Nanos {
    hits.iter().map(|h| h.toa).max().unwrap_or(0) + 2 * dt_max
}

/// Repeats bare hits; see [`repeat_with_offset`].
pub fn repeat_hits(hits: &[Hit], n_rep: usize, period: Nanos) -> Vec<Hit> {
    let mut out = Vec::with_capacity(hits.len() * n_rep);
    for k in 0..n_rep {
        let shift = k as u64 * period;
        out.extend(hits.iter().map(|h| Hit { toa: h.toa + shift, ..*h }));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest_sort::measure_unsortedness;
    use crate::oracle_metrics::brute_force_cluster;
    use crate::serial_clusterer::ClusterDefinition;

    fn connected_prefix(px: &[(u16, u16)]) -> bool {
        px.iter().enumerate().skip(1).all(|(i, p)| {
            px[..i].iter().any(|q| p.0.abs_diff(q.0) <= 1 && p.1.abs_diff(q.1) <= 1)
        })
    }

    #[test]
    fn disc_prefix_connected_and_clipped() {
        for &(size, cx, cy) in &[(1usize, 5, 5), (30, 0, 0), (200, 255, 10), (5000, 128, 128)] {
            let d = disc(size, cx, cy, 256, 256);
            assert_eq!(d.len(), size);
            assert!(connected_prefix(&d));
        }
    }

    #[test]
    fn track_prefix_connected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for size in [1usize, 2, 17, 64, 65, 300, 4000] {
            let t = track(size, 64, &mut rng);
            assert_eq!(t.len(), size);
            let shifted: Vec<(u16, u16)> = t.iter().map(|&(x, y)| ((x + 300) as u16, (y + 300) as u16)).collect();
            assert!(connected_prefix(&shifted));
            let mut uniq = shifted.clone();
            uniq.sort();
            uniq.dedup();
            assert_eq!(uniq.len(), size);
        }
    }

    #[test]
    fn size_distribution_moments() {
        for p in &PRESETS {
            let d = SizeDistribution::new(p.mean_cluster_size, p.std_cluster_size, 1 << 16).unwrap();
            assert!((d.mean() - p.mean_cluster_size).abs() / p.mean_cluster_size < 0.01, "{}", p.name);
        }
        assert_eq!(SizeDistribution::new(1.0, 0.0, 10).unwrap().quantile(0.99), 1);
    }

    #[test]
    fn single_hit() {
        let d = generate(&PRESETS[0], 1, 3, &GeneratorConfig::default()).unwrap();
        assert_eq!((d.hits.len(), d.n_clusters), (1, 1));
    }

    #[test]
    fn deterministic() {
        let cfg = GeneratorConfig::default();
        let a = generate(&PRESETS[3], 5_000, 11, &cfg).unwrap();
        let b = generate(&PRESETS[3], 5_000, 11, &cfg).unwrap();
        assert_eq!(a, b);
        let c = generate(&PRESETS[3], 5_000, 12, &cfg).unwrap();
        assert_ne!(a.hits, c.hits);
    }

    #[test]
    fn stream_is_t_ordered_and_matches_oracle() {
        let cfg = GeneratorConfig { unsortedness: 300, ..Default::default() };
        for p in PRESETS.iter().take(4) {
            let d = generate(p, 3_000, 5, &cfg).unwrap();
            assert_eq!(d.hits.len(), 3_000);
            assert!(measure_unsortedness(&d.hits).t <= d.t.t);
            for def in [ClusterDefinition::local(200), ClusterDefinition::global(200), ClusterDefinition::static_window(200)] {
                let oracle = brute_force_cluster(&d.hits, &def).unwrap();
                assert_eq!(oracle, d.ground_truth(), "{} {:?}", p.name, def.variant);
            }
        }
    }

    #[test]
    fn gamma_mean() {
        let d = generate_clusters(&PRESETS[0], 10_000, 1, &GeneratorConfig::default()).unwrap();
        let mean = d.hits.len() as f64 / d.n_clusters as f64;
        assert!((mean - 2.46).abs() / 2.46 < 0.1, "{mean}");
    }

    #[test]
    fn repetition() {
        let d = generate(&PRESETS[0], 500, 2, &GeneratorConfig::default()).unwrap();
        let one = repeat_with_offset(&d, 1, default_period(&d.hits, 200)).unwrap();
        assert_eq!(one, d);
        let rep = repeat_with_offset(&d, 25, default_period(&d.hits, 200)).unwrap();
        assert_eq!(rep.hits.len(), 25 * d.hits.len());
        assert_eq!(rep.n_clusters, 25 * d.n_clusters);
        assert!(measure_unsortedness(&rep.hits).t <= d.t.t);
        let oracle = brute_force_cluster(&rep.hits, &ClusterDefinition::local(200)).unwrap();
        assert_eq!(oracle.len(), 25 * d.n_clusters as usize);
        assert!(repeat_with_offset(&d, 2, 1).is_err());
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = GeneratorConfig::default();
        assert!(generate(&PRESETS[0], 0, 1, &cfg).is_err());
        assert!(DatasetPreset::by_name("muon").is_err());
        assert_eq!(DatasetPreset::by_name("Pb90-subset").unwrap().mean_cluster_size, 7258.26);
        let tiny = GeneratorConfig { width: 2, height: 2, max_attempts: 3, hit_rate: Some(1e6), ..cfg };
        assert!(matches!(generate(&PRESETS[0], 1000, 1, &tiny), Err(Error::GenerationSaturated { .. })));
    }
}
