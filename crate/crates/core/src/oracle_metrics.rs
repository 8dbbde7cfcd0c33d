//! Ground-truth clustering and clustering comparison.
//!
//! The oracle never uses the streaming machinery: the local variant is a
//! breadth-first search over an explicit hit graph, the global and static
//! variants first bound the candidate components with a graph search and
//! then resolve each component greedily in toa order by scanning member
//! lists.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::cluster::Cluster;
use crate::error::{Error, Result};
use crate::hit_model::Hit;
use crate::serial_clusterer::{ClusterDefinition, Variant};

/// Default instance size limit for [`brute_force_cluster`].
pub const ORACLE_LIMIT: usize = 100_000;

/// A partition of hit indices. Ids are dense and numbered by first
/// appearance in hit order, so equal partitions compare equal.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Clustering {
    assignment: Vec<u32>,
    clusters: Vec<Vec<usize>>,
}

impl Clustering {
    /// Canonicalizes arbitrary per-hit labels.
    pub fn from_labels<L: Copy + Eq + std::hash::Hash>(labels: &[L]) -> Self {
        let mut ids: HashMap<L, u32> = HashMap::new();
        let mut assignment = Vec::with_capacity(labels.len());
        let mut clusters: Vec<Vec<usize>> = Vec::new();
        for (i, l) in labels.iter().enumerate() {
            let next = ids.len() as u32;
            let id = *ids.entry(*l).or_insert(next);
            if id as usize == clusters.len() {
                clusters.push(Vec::new());
            }
            clusters[id as usize].push(i);
            assignment.push(id);
        }
        Self { assignment, clusters }
    }

    /// Maps emitted clusters back onto `hits` by hit value. Repeated identical
    /// hits are matched in order. Fails when the clusters do not contain
    /// exactly the multiset of `hits`.
    pub fn from_clusters(hits: &[Hit], clusters: &[Cluster]) -> Result<Self> {
        let mut slots: HashMap<Hit, Vec<usize>> = HashMap::with_capacity(hits.len());
        for (i, h) in hits.iter().enumerate().rev() {
            slots.entry(*h).or_default().push(i);
        }
        let mut labels = vec![u32::MAX; hits.len()];
        let mut assigned = 0usize;
        for (cid, c) in clusters.iter().enumerate() {
            for h in c.hits() {
                let idx = slots
                    .get_mut(h)
                    .and_then(Vec::pop)
                    .ok_or_else(|| Error::IncomparableClusterings(format!("cluster {cid} holds hit {h:?} absent from the hit set")))?;
                labels[idx] = cid as u32;
                assigned += 1;
            }
        }
        if assigned != hits.len() {
            return Err(Error::IncomparableClusterings(format!(
                "clusters cover {assigned} of {} hits",
                hits.len()
            )));
        }
        Ok(Self::from_labels(&labels))
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn hit_count(&self) -> usize {
        self.assignment.len()
    }

    pub fn assignment(&self) -> &[u32] {
        &self.assignment
    }

    pub fn clusters(&self) -> &[Vec<usize>] {
        &self.clusters
    }

    pub fn cluster_of(&self, hit: usize) -> u32 {
        self.assignment[hit]
    }

    /// Materializes clusters of `hits` in canonical id order.
    pub fn to_clusters(&self, hits: &[Hit]) -> Vec<Cluster> {
        self.clusters
            .iter()
            .map(|idx| Cluster::from_hits(idx.iter().map(|&i| hits[i]).collect()).expect("non-empty"))
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.clusters.iter().map(Vec::len).collect()
    }
}

/// Clusters `hits` by definition, without any streaming state.
pub fn brute_force_cluster(hits: &[Hit], def: &ClusterDefinition) -> Result<Clustering> {
    brute_force_cluster_with_limit(hits, def, ORACLE_LIMIT)
}

pub fn brute_force_cluster_with_limit(hits: &[Hit], def: &ClusterDefinition, limit: usize) -> Result<Clustering> {
    if hits.len() > limit {
        return Err(Error::OracleLimitExceeded { len: hits.len(), limit });
    }
    let mut order: Vec<usize> = (0..hits.len()).collect();
    order.sort_by_key(|&i| (hits[i].toa, i));

    let labels = match def.variant {
        Variant::DynamicLocal => components(hits, &order, |a, b| a.toa.abs_diff(b.toa) <= def.dt_max, def.dt_max),
        Variant::StaticWindow => {
            let coarse = components(hits, &order, |a, b| a.toa.abs_diff(b.toa) <= def.dt_max, def.dt_max);
            resolve_greedy(hits, &order, &coarse, def)
        }
        Variant::DynamicGlobal => {
            let segment = time_segments(hits, &order, def.dt_max);
            let coarse = components_unbounded(hits, &order, &segment);
            resolve_greedy(hits, &order, &coarse, def)
        }
    };
    Ok(Clustering::from_labels(&labels))
}

/// Connected components of the graph whose edges join touching hits that
/// satisfy `edge`; candidate pairs are enumerated by a toa sweep bounded by
/// `window`.
fn components(hits: &[Hit], order: &[usize], edge: impl Fn(&Hit, &Hit) -> bool, window: u64) -> Vec<u32> {
    let n = hits.len();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (k, &i) in order.iter().enumerate() {
        for &j in &order[k + 1..] {
            if hits[j].toa - hits[i].toa > window {
                break;
            }
            if hits[i].touches(&hits[j]) && edge(&hits[i], &hits[j]) {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
    }
    bfs_labels(&adj, order)
}

/// Maximal runs of the toa-sorted stream with consecutive gaps <= dt_max.
fn time_segments(hits: &[Hit], order: &[usize], dt_max: u64) -> Vec<u32> {
    let mut seg = vec![0u32; hits.len()];
    let mut current = 0u32;
    for w in order.windows(2) {
        if hits[w[1]].toa - hits[w[0]].toa > dt_max {
            current += 1;
        }
        seg[w[1]] = current;
    }
    seg
}

/// Spatial components inside each time segment, with no temporal bound on
/// individual edges.
fn components_unbounded(hits: &[Hit], order: &[usize], segment: &[u32]) -> Vec<u32> {
    let n = hits.len();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && segment[order[end]] == segment[order[start]] {
            end += 1;
        }
        let seg = &order[start..end];
        for a in 0..seg.len() {
            for b in a + 1..seg.len() {
                if hits[seg[a]].touches(&hits[seg[b]]) {
                    adj[seg[a]].push(seg[b]);
                    adj[seg[b]].push(seg[a]);
                }
            }
        }
        start = end;
    }
    bfs_labels(&adj, order)
}

fn bfs_labels(adj: &[Vec<usize>], order: &[usize]) -> Vec<u32> {
    let mut label = vec![u32::MAX; adj.len()];
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for &s in order {
        if label[s] != u32::MAX {
            continue;
        }
        label[s] = next;
        queue.push_back(s);
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if label[v] == u32::MAX {
                    label[v] = next;
                    queue.push_back(v);
                }
            }
        }
        next += 1;
    }
    label
}

/// Splits every coarse component by replaying its hits in (toa, index)
/// order: a hit joins (and merges) every group it touches whose global or
/// static temporal condition still admits it, otherwise it starts a group.
fn resolve_greedy(hits: &[Hit], order: &[usize], coarse: &[u32], def: &ClusterDefinition) -> Vec<u32> {
    struct Group {
        members: Vec<usize>,
        min: u64,
        max: u64,
        alive: bool,
    }
    let mut by_component: HashMap<u32, Vec<usize>> = HashMap::new();
    for &i in order {
        by_component.entry(coarse[i]).or_default().push(i);
    }
    let mut label = vec![u32::MAX; hits.len()];
    let mut next_label = 0u32;
    let mut comps: Vec<_> = by_component.into_values().collect();
    comps.sort_by_key(|c| c[0]);
    for comp in comps {
        let mut groups: Vec<Group> = Vec::new();
        for &h in &comp {
            let toa = hits[h].toa;
            let mut joined: Vec<usize> = Vec::new();
            for (gi, g) in groups.iter().enumerate() {
                if !g.alive {
                    continue;
                }
                let reference = match def.variant {
                    Variant::StaticWindow => g.min,
                    _ => g.max,
                };
                if toa - reference > def.dt_max {
                    continue;
                }
                if g.members.iter().any(|&m| hits[m].touches(&hits[h])) {
                    joined.push(gi);
                }
            }
            match joined.split_first() {
                None => groups.push(Group { members: vec![h], min: toa, max: toa, alive: true }),
                Some((&first, rest)) => {
                    for &gi in rest {
                        let members = std::mem::take(&mut groups[gi].members);
                        let (min, max) = (groups[gi].min, groups[gi].max);
                        groups[gi].alive = false;
                        let g = &mut groups[first];
                        g.members.extend(members);
                        g.min = g.min.min(min);
                        g.max = g.max.max(max);
                    }
                    let g = &mut groups[first];
                    g.members.push(h);
                    g.max = g.max.max(toa);
                }
            }
        }
        for g in groups.into_iter().filter(|g| g.alive) {
            for m in g.members {
                label[m] = next_label;
            }
            next_label += 1;
        }
    }
    label
}

/// Overlap report between two clusterings of the same hits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    pub iou: f64,
    pub clusters_a: usize,
    pub clusters_b: usize,
    pub matched: usize,
    pub unmatched_a: usize,
    pub unmatched_b: usize,
}

/// Hit-weighted intersection over union.
///
/// Pairs (a-cluster, b-cluster) are matched greedily by decreasing overlap,
/// each cluster used at most once. A matched pair scores `|A ∩ B| / |A ∪ B|`;
/// the score is averaged with weight `|A ∪ B|` over matched pairs and
/// unmatched clusters (which score 0 with weight `|A|`). This reduces to
/// `sum |A ∩ B| / (sum over pairs |A ∪ B| + unmatched sizes)`.
pub fn iou(a: &Clustering, b: &Clustering) -> Result<f64> {
    iou_report(a, b).map(|r| r.iou)
}

pub fn iou_report(a: &Clustering, b: &Clustering) -> Result<IouReport> {
    if a.hit_count() != b.hit_count() {
        return Err(Error::IncomparableClusterings(format!(
            "{} hits vs {} hits",
            a.hit_count(),
            b.hit_count()
        )));
    }
    if a.hit_count() == 0 {
        return Ok(IouReport { iou: 1.0, clusters_a: 0, clusters_b: 0, matched: 0, unmatched_a: 0, unmatched_b: 0 });
    }
    let mut overlap: HashMap<(u32, u32), usize> = HashMap::new();
    for (&ca, &cb) in a.assignment.iter().zip(&b.assignment) {
        *overlap.entry((ca, cb)).or_default() += 1;
    }
    let mut pairs: Vec<((u32, u32), usize)> = overlap.into_iter().collect();
    pairs.sort_by(|x, y| y.1.cmp(&x.1).then(x.0.cmp(&y.0)));
    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let (mut inter, mut union) = (0usize, 0usize);
    let mut matched = 0;
    for ((ca, cb), n) in pairs {
        if used_a[ca as usize] || used_b[cb as usize] {
            continue;
        }
        used_a[ca as usize] = true;
        used_b[cb as usize] = true;
        matched += 1;
        inter += n;
        union += a.clusters[ca as usize].len() + b.clusters[cb as usize].len() - n;
    }
    let unmatched_a = used_a.iter().filter(|u| !**u).count();
    let unmatched_b = used_b.iter().filter(|u| !**u).count();
    union += a.clusters.iter().zip(&used_a).filter(|(_, u)| !**u).map(|(c, _)| c.len()).sum::<usize>();
    union += b.clusters.iter().zip(&used_b).filter(|(_, u)| !**u).map(|(c, _)| c.len()).sum::<usize>();
    Ok(IouReport {
        iou: inter as f64 / union as f64,
        clusters_a: a.len(),
        clusters_b: b.len(),
        matched,
        unmatched_a,
        unmatched_b,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelaxationReport {
    pub dt_max: u64,
    pub relaxed_dt_max: u64,
    pub iou_before: f64,
    pub iou_after: f64,
}

/// Scores `a` against the oracle under `def`, and again with the oracle's
/// `dt_max` raised to `relaxed_dt_max`.
pub fn compare_with_dtmax_relaxation(
    a: &Clustering,
    hits: &[Hit],
    def: &ClusterDefinition,
    relaxed_dt_max: u64,
) -> Result<RelaxationReport> {
    if relaxed_dt_max < def.dt_max {
        return Err(Error::Config(format!("relaxed dt_max {relaxed_dt_max} below dt_max {}", def.dt_max)));
    }
    let before = brute_force_cluster(hits, def)?;
    let after = if relaxed_dt_max == def.dt_max {
        before.clone()
    } else {
        brute_force_cluster(hits, &ClusterDefinition { dt_max: relaxed_dt_max, ..*def })?
    };
    Ok(RelaxationReport {
        dt_max: def.dt_max,
        relaxed_dt_max,
        iou_before: iou(a, &before)?,
        iou_after: iou(a, &after)?,
    })
}
