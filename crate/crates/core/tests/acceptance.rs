//! Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion and exits
//! non-zero when any criterion fails.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use pixstorm::chunked_clusterer::{cluster_chunked, BufferFillConfig, BufferFiller, ChunkedConfig, TimeOrderedForest};
use pixstorm::cluster::Cluster;
use pixstorm::datagen::{generate, generate_clusters, sample_cluster_sizes, DatasetPreset, GeneratorConfig, PRESETS};
use pixstorm::hit_model::Energy;
use pixstorm::ingest_sort::time_sort;
use pixstorm::merger::{full_merge_check, merge_cascade, MergeScratch, MergeVerdict};
use pixstorm::oracle_metrics::{brute_force_cluster, compare_with_dtmax_relaxation, iou, Clustering};
use pixstorm::pipeline::{cluster_pipeline, PipelineConfig};
use pixstorm::serial_clusterer::{cluster_sorted, Variant};
use pixstorm::{ClusterDefinition, DetectorConfig, Hit, Nanos};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn serial_clustering(sorted: &[Hit], def: ClusterDefinition) -> Clustering {
    let cs = cluster_sorted(sorted, def, 256, 256).unwrap();
    Clustering::from_clusters(sorted, &cs).unwrap()
}

fn sort_by_toa(mut hits: Vec<Hit>) -> Vec<Hit> {
    hits.sort_by_key(|h| h.toa);
    hits
}

/// Dense random hits in a small patch, so generated clusters interact.
fn dense_instance(rng: &mut ChaCha8Rng, n: usize) -> Vec<Hit> {
    let side = rng.gen_range(4..24u16);
    let span = n as u64 * rng.gen_range(5..200);
    (0..n).map(|_| Hit::at(rng.gen_range(0..side), rng.gen_range(0..side), rng.gen_range(0..span.max(1)))).collect()
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dts = [25, 100, 200, 500, 1_000];
    let mut total_hits = 0usize;
    for variant in [Variant::DynamicLocal, Variant::DynamicGlobal, Variant::StaticWindow] {
        for i in 0..200 {
            let def = ClusterDefinition::new(variant, *dts.choose(&mut rng).unwrap()).unwrap();
            let n = rng.gen_range(50..=5_000);
            let hits = if i % 3 == 0 {
                dense_instance(&mut rng, n)
            } else {
                let preset = &PRESETS[rng.gen_range(0..PRESETS.len())];
                let mut h = generate(preset, n, rng.gen(), &GeneratorConfig::default()).map_err(|e| e.to_string())?.hits;
                h.truncate(5_000);
                h
            };
            let sorted = sort_by_toa(hits);
            total_hits += sorted.len();
            let oracle = brute_force_cluster(&sorted, &def).map_err(|e| e.to_string())?;
            let serial = serial_clustering(&sorted, def);
            if serial != oracle {
                let score = iou(&serial, &oracle).unwrap_or(f64::NAN);
                return Err(format!("{variant:?} instance {i} ({} hits, dt {}): IoU {score}", sorted.len(), def.dt_max));
            }
        }
    }
    Ok(format!("600 instances, {total_hits} hits, IoU = 1.0 for all"))
}

fn criterion_2() -> Outcome {
    let mut lines = Vec::new();
    for (name, seed) in [("gamma", 21), ("pion0", 22), ("pion45", 23)] {
        let data = generate(DatasetPreset::by_name(name).unwrap(), 100_000, seed, &GeneratorConfig::default()).unwrap();
        let sorted: Vec<Hit> =
            time_sort(data.hits.iter().copied().map(Ok), data.t.t).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
        let def = ClusterDefinition::local(200);
        let want = Clustering::from_clusters(&data.hits, &cluster_sorted(&sorted, def, 256, 256).unwrap()).unwrap();
        for n in [2, 4, 8] {
            let t = Instant::now();
            let (cs, _) = cluster_pipeline(data.hits.clone(), PipelineConfig::new(def, n), DetectorConfig::default())
                .map_err(|e| e.to_string())?;
            let got = Clustering::from_clusters(&data.hits, &cs).map_err(|e| e.to_string())?;
            check(got == want, || format!("{name} pipeline lanes={n}: IoU {}", iou(&got, &want).unwrap()))?;
            check(t.elapsed().as_secs() < 60, || format!("{name} pipeline lanes={n} took {:?}", t.elapsed()))?;

            let t = Instant::now();
            let cs = cluster_chunked(&data.hits, &ChunkedConfig::new(def, n)).map_err(|e| e.to_string())?;
            let got = Clustering::from_clusters(&data.hits, &cs).map_err(|e| e.to_string())?;
            check(got == want, || format!("{name} chunked workers={n}: IoU {}", iou(&got, &want).unwrap()))?;
            check(t.elapsed().as_secs() < 60, || format!("{name} chunked workers={n} took {:?}", t.elapsed()))?;
        }
        lines.push(format!("{name} {} hits/{} clusters", data.hits.len(), want.len()));
    }
    Ok(format!("pipeline and chunked at 2/4/8 identical to serial on {}", lines.join(", ")))
}

/// Motif: a vertical chain advancing 150 ns per hit, then a hit touching only
/// the chain's first pixel 20 ns after the chain's last hit.
fn slow_chain_dataset() -> Vec<Hit> {
    let mut hits = Vec::new();
    for k in 0..50u64 {
        let (x0, y0) = (5 + (k % 10) as u16 * 20, 5 + (k / 10) as u16 * 20);
        let t0 = k * 5_000;
        hits.push(Hit::at(x0, y0, t0));
        hits.push(Hit::at(x0, y0 + 1, t0 + 150));
        hits.push(Hit::at(x0, y0 + 2, t0 + 300));
        hits.push(Hit::at(x0 - 1, y0 - 1, t0 + 320));
    }
    sort_by_toa(hits)
}

fn criterion_3() -> Outcome {
    let hits = slow_chain_dataset();
    let score = |dt| iou(&serial_clustering(&hits, ClusterDefinition::local(dt)), &serial_clustering(&hits, ClusterDefinition::global(dt))).unwrap();
    let (at200, at600) = (score(200), score(600));
    check(at200 < 1.0, || format!("IoU at 200 ns is {at200}"))?;
    check(at600 == 1.0, || format!("IoU at 600 ns is {at600}"))?;
    let global200 = serial_clustering(&hits, ClusterDefinition::global(200));
    let relax = compare_with_dtmax_relaxation(&global200, &hits, &ClusterDefinition::local(200), 600).unwrap();
    check(relax.iou_before < 1.0 && relax.iou_after == 1.0, || format!("relaxation {relax:?}"))?;
    Ok(format!("local vs global IoU {at200:.4} at 200 ns, {at600} at 600 ns; global(200) vs local oracle {:.4} -> {}", relax.iou_before, relax.iou_after))
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut buffers = 0usize;
    let mut clusters_total = 0usize;
    for run in 0..10_000 {
        let t_closing: Nanos = rng.gen_range(20..600);
        let t_unsortedness: Nanos = rng.gen_range(0..=t_closing);
        let max_size = rng.gen_range(1..20usize);
        let fill = rng.gen_range(5..80usize);
        let cfg = BufferFillConfig { b: fill + 4 * max_size + 8, b_t: 4 * max_size + 8, t_closing, t_unsortedness };
        let n_clusters = rng.gen_range(5..60usize);
        let mut hits = Vec::new();
        let mut start: Nanos = rng.gen_range(0..1_000);
        for c in 0..n_clusters {
            let duration = rng.gen_range(0..=t_closing);
            for _ in 0..rng.gen_range(1..=max_size) {
                let toa = start + rng.gen_range(0..=duration);
                let arrival = toa + rng.gen_range(0..t_unsortedness.max(1));
                hits.push((arrival, Hit::new(rng.gen_range(0..256), rng.gen_range(0..256), toa, Energy(c as u32))));
            }
            start += duration + t_closing + 1 + rng.gen_range(0..2 * t_closing);
        }
        hits.sort_by_key(|&(arrival, _)| arrival);
        let mut filler = BufferFiller::new(cfg).map_err(|e| e.to_string())?;
        let mut dispatched = Vec::new();
        for &(_, h) in &hits {
            if let Some(b) = filler.store_hit(h).map_err(|e| format!("run {run}: {e}"))? {
                dispatched.push(b);
            }
        }
        dispatched.extend(filler.finish());
        let mut home: HashMap<u32, usize> = HashMap::new();
        for (i, b) in dispatched.iter().enumerate() {
            for h in b {
                if *home.entry(h.energy.0).or_insert(i) != i {
                    return Err(format!("run {run}: cluster {} split between buffers", h.energy.0));
                }
            }
        }
        check(dispatched.iter().map(Vec::len).sum::<usize>() == hits.len(), || format!("run {run}: hits lost"))?;
        buffers += dispatched.len();
        clusters_total += n_clusters;
    }
    Ok(format!("10000 runs, {clusters_total} clusters over {buffers} buffers, none split"))
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ops = 0u64;
    while ops < 1_000_000 {
        let n = rng.gen_range(2..64usize);
        let toa: Vec<Nanos> = (0..n).map(|_| rng.gen_range(0..50)).collect();
        let mut f = TimeOrderedForest::new(toa);
        for _ in 0..rng.gen_range(n..4 * n) {
            let a = rng.gen_range(0..n);
            if rng.gen_bool(0.5) {
                f.union(a, rng.gen_range(0..n));
            } else {
                f.find(a);
            }
            ops += 1;
            // (toa, index) strictly decreases along every parent edge, which
            // rules out cycles
            for h in 0..n {
                let p = f.parent(h);
                if p != h {
                    check((f.toa(p), p) < (f.toa(h), h), || format!("edge {h} -> {p} violates the time order"))?;
                }
            }
        }
        for h in 0..n {
            let mut cur = h;
            for _ in 0..=n {
                cur = f.parent(cur);
            }
            check(f.parent(cur) == cur, || format!("node {h} does not reach a root"))?;
        }
    }
    Ok(format!("{ops} operations, forest acyclic and time-ordered after each"))
}

/// Independent reference for the merge decision.
fn brute_force_mergeable(a: &Cluster, b: &Cluster, def: &ClusterDefinition) -> bool {
    let adjacent =
        |local: bool| a.hits().iter().any(|p| b.hits().iter().any(|q| p.x.abs_diff(q.x) <= 1 && p.y.abs_diff(q.y) <= 1 && (!local || p.toa.abs_diff(q.toa) <= def.dt_max)));
    let (amin, amax, bmin, bmax) = (a.min_toa(), a.max_toa(), b.min_toa(), b.max_toa());
    match def.variant {
        Variant::DynamicLocal => adjacent(true),
        Variant::DynamicGlobal => {
            let gap = if amax < bmin { bmin - amax } else if bmax < amin { amin - bmax } else { 0 };
            gap <= def.dt_max && adjacent(false)
        }
        Variant::StaticWindow => amax.max(bmax) - amin.min(bmin) <= def.dt_max && adjacent(false),
    }
}

fn random_cluster(rng: &mut ChaCha8Rng, cx: u16, cy: u16, t0: Nanos) -> Cluster {
    let n = rng.gen_range(1..40);
    let r = rng.gen_range(0..6u16);
    let hits: Vec<Hit> = (0..n)
        .map(|_| {
            Hit::at(
                (cx + rng.gen_range(0..=2 * r)).saturating_sub(r).min(255),
                (cy + rng.gen_range(0..=2 * r)).saturating_sub(r).min(255),
                t0 + rng.gen_range(0..400),
            )
        })
        .collect();
    Cluster::from_hits(hits).unwrap()
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut scratch = MergeScratch::new(256, 256);
    let mut accepted = 0;
    for i in 0..10_000 {
        let def = ClusterDefinition::new(
            [Variant::DynamicLocal, Variant::DynamicGlobal, Variant::StaticWindow][i % 3],
            rng.gen_range(50..600),
        )
        .unwrap();
        let (cx, cy) = (rng.gen_range(0..256), rng.gen_range(0..256));
        let (ta, tb) = (rng.gen_range(0..1_000), rng.gen_range(0..1_000));
        let (dx, dy) = (rng.gen_range(0..12), rng.gen_range(0..12));
        let a = random_cluster(&mut rng, cx, cy, ta);
        let b = random_cluster(&mut rng, cx.saturating_add(dx), cy.saturating_add(dy), tb);
        let truth = brute_force_mergeable(&a, &b, &def);
        let verdict = merge_cascade(&a, &b, &def, &mut scratch, true);
        if truth {
            check(verdict == MergeVerdict::Accepted, || format!("pair {i}: {verdict:?} rejects a mergeable pair"))?;
            accepted += 1;
        }
        check(verdict.accepted() == truth, || format!("pair {i}: cascade {verdict:?}, reference {truth}"))?;
        let full = full_merge_check(&a, &b, &def, &mut scratch);
        check(full == truth, || format!("pair {i}: full check {full}, reference {truth}"))?;
        check(scratch.is_clean(), || format!("pair {i}: scratch grid left dirty"))?;
    }
    Ok(format!("10000 pairs ({accepted} mergeable), no false rejections, full check exact"))
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let t: Nanos = 1_000;
    // t-ordered is strict: every hit is displaced by less than t
    let mut keyed: Vec<(Nanos, Hit)> = (0..1_000_000u64)
        .map(|i| {
            let toa = i * 3 + rng.gen_range(0..3);
            (toa + rng.gen_range(0..t), Hit::new((i % 256) as u16, (i / 256 % 256) as u16, toa, Energy(i as u32)))
        })
        .collect();
    keyed.sort_by_key(|&(k, _)| k);
    let input: Vec<Hit> = keyed.into_iter().map(|(_, h)| h).collect();
    let mut sorter = time_sort(input.iter().copied().map(Ok), t);
    let mut out = Vec::with_capacity(input.len());
    for h in sorter.by_ref() {
        out.push(h.map_err(|e| e.to_string())?);
    }
    let span = sorter.sorter().max_queue_span();
    check(out.windows(2).all(|w| w[0].toa <= w[1].toa), || "output not sorted".into())?;
    let mut a: Vec<u32> = input.iter().map(|h| h.energy.0).collect();
    let mut b: Vec<u32> = out.iter().map(|h| h.energy.0).collect();
    a.sort_unstable();
    b.sort_unstable();
    check(a == b, || "output is not a permutation of the input".into())?;
    check(span < t, || format!("queue spanned {span} ns"))?;
    Ok(format!("1000000 hits sorted, max queue span {span} ns < t = {t} ns"))
}

fn machine() -> String {
    let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
    let model = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| s.lines().find(|l| l.starts_with("model name")).and_then(|l| l.split(':').nth(1)).map(|m| m.trim().to_string()))
        .unwrap_or_else(|| "unknown cpu".into());
    format!("{cpus} logical cpus, {model}, {} {}", std::env::consts::OS, std::env::consts::ARCH)
}

fn throughput(hits: &[Hit], f: impl Fn() -> usize) -> f64 {
    let mut best = f64::MAX;
    for _ in 0..3 {
        let t = Instant::now();
        let n = f();
        assert!(n > 0);
        best = best.min(t.elapsed().as_secs_f64());
    }
    hits.len() as f64 / best / 1e6
}

fn criterion_8() -> Option<Outcome> {
    let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
    if cpus < 4 {
        return None;
    }
    let data = generate(DatasetPreset::by_name("gamma").unwrap(), 100_000, 8, &GeneratorConfig::default()).unwrap();
    let period = pixstorm::datagen::default_period(&data.hits, 200);
    let hits = pixstorm::datagen::repeat_hits(&data.hits, 20, period);
    let def = ClusterDefinition::local(200);
    let pipe = |n| throughput(&hits, || cluster_pipeline(hits.clone(), PipelineConfig::new(def, n), DetectorConfig::default()).unwrap().0.len());
    let chunk = |n| throughput(&hits, || cluster_chunked(&hits, &ChunkedConfig::new(def, n)).unwrap().len());
    let (p1, p4, c1, c4) = (pipe(1), pipe(4), chunk(1), chunk(4));
    let detail = format!("pipeline {p1:.1} -> {p4:.1} MHit/s, chunked {c1:.1} -> {c4:.1} MHit/s ({})", machine());
    Some(if p4 >= 1.5 * p1 && c4 >= 1.5 * c1 { Ok(detail) } else { Err(detail) })
}

fn criterion_9() -> Outcome {
    let cfg = GeneratorConfig::default();
    let mut worst = (0.0, "");
    for (i, p) in PRESETS.iter().enumerate() {
        let sizes = sample_cluster_sizes(p, 10_000, 90 + i as u64, &cfg).map_err(|e| e.to_string())?;
        let mean = sizes.iter().sum::<usize>() as f64 / sizes.len() as f64;
        let rel = (mean - p.mean_cluster_size).abs() / p.mean_cluster_size;
        check(rel <= 0.10, || format!("{}: mean {mean:.2} vs {}", p.name, p.mean_cluster_size))?;
        if rel > worst.0 {
            worst = (rel, p.name);
        }
    }
    let gamma = DatasetPreset::by_name("gamma").unwrap();
    let data = generate_clusters(gamma, 10_000, 99, &cfg).map_err(|e| e.to_string())?;
    let mean = data.hits.len() as f64 / data.n_clusters as f64;
    check((mean - 2.46).abs() / 2.46 <= 0.10, || format!("generated gamma mean {mean:.3}"))?;
    Ok(format!("all 10 presets within 10% (worst {} at {:.1}%), generated gamma mean {mean:.3} px", worst.1, worst.0 * 100.0))
}

fn main() {
    let criteria: Vec<(&str, u64, Box<dyn Fn() -> Option<Outcome>>)> = vec![
        ("oracle equivalence", 120, Box::new(|| Some(criterion_1()))),
        ("parallel equals serial", 360, Box::new(|| Some(criterion_2()))),
        ("definition divergence reconciliation", 10, Box::new(|| Some(criterion_3()))),
        ("buffer fill never splits clusters", 60, Box::new(|| Some(criterion_4()))),
        ("union-find invariants", 30, Box::new(|| Some(criterion_5()))),
        ("merge cascade soundness", 30, Box::new(|| Some(criterion_6()))),
        ("time sort", 10, Box::new(|| Some(criterion_7()))),
        ("scaling", 300, Box::new(criterion_8)),
        ("dataset statistics", 30, Box::new(|| Some(criterion_9()))),
    ];
    let mut failed = 0;
    for (i, (name, budget, run)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Some(Err(format!("panicked: {}", msg.unwrap_or_default())))
        });
        let secs = t.elapsed().as_secs_f64();
        let outcome = match outcome {
            Some(Ok(_)) if secs > *budget as f64 => Some(Err(format!("took {secs:.1} s, budget {budget} s"))),
            o => o,
        };
        match outcome {
            Some(Ok(detail)) => println!("criterion {} PASS {name}: {detail} ({secs:.1} s)", i + 1),
            Some(Err(detail)) => {
                failed += 1;
                println!("criterion {} FAIL {name}: {detail} ({secs:.1} s)", i + 1);
            }
            None => println!("criterion {} SKIP {name}: needs at least 4 cores, host has {}", i + 1, machine()),
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
