use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use pixstorm::datagen::{generate as generate_dataset, DatasetPreset, GeneratorConfig};
use pixstorm::ingest_sort::{
    load_hits, measure_unsortedness, read_clusters, read_hits, read_labels, read_raw_hits, write_hits, write_labels,
    ClusterWriter, Format, Geometry,
};
use pixstorm::oracle_metrics::{iou_report, Clustering};
use pixstorm::{Cluster, Hit};
use serde::Serialize;
use serde_json::json;

use crate::backend::{self, capped, thread_cap, Input};
use crate::{Backend, CliResult, ClusterArgs, CompareArgs, Failure, GenerateArgs, InspectArgs};

/// Ground-truth label sidecar of a hit file.
pub fn labels_path(hits: &Path) -> PathBuf {
    hits.with_extension("pxl")
}

pub fn emit_json(value: &impl Serialize, out: Option<&Path>) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    match out {
        Some(p) => std::fs::write(p, text + "\n").map_err(|e| Failure::Runtime(format!("{}: {e}", p.display()))),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

pub fn generate(a: &GenerateArgs) -> CliResult<()> {
    let preset = DatasetPreset::by_name(&a.preset)?;
    let cfg = GeneratorConfig { dt_max: a.dtmax, unsortedness: a.unsortedness, hit_rate: a.rate, ..GeneratorConfig::default() };
    let n = usize::try_from(a.hits).map_err(|_| Failure::Usage("--hits too large".into()))?;
    let data = generate_dataset(preset, n, a.seed, &cfg)?;
    let geometry = Geometry { width: cfg.width, height: cfg.height };
    write_hits(&a.out, Format::from_path(&a.out), geometry, &data.hits)?;
    let labels = labels_path(&a.out);
    write_labels(&labels, &data.labels)?;
    emit_json(
        &json!({
            "preset": preset.name,
            "seed": a.seed,
            "hits": data.hits.len(),
            "clusters": data.n_clusters,
            "t_unsortedness_ns": data.t.t,
            "max_toa_ns": data.max_toa(),
            "hit_file": a.out,
            "label_file": labels,
        }),
        None,
    )
}

fn open_input(path: &Path, raw: bool) -> CliResult<(Geometry, Input)> {
    let format = Format::from_path(path);
    if raw {
        let r = read_raw_hits(path, format)?;
        Ok((r.geometry(), Input::Raw(Box::new(r))))
    } else {
        let r = read_hits(path, format)?;
        Ok((r.geometry(), Input::Hits(Box::new(r))))
    }
}

pub fn cluster(a: &ClusterArgs) -> CliResult<()> {
    let cap = thread_cap()?;
    let requested = match a.opts.backend {
        Backend::Serial => 1,
        Backend::Pipeline => a.lanes,
        Backend::Chunked => a.workers,
    };
    let parallelism = capped(requested, cap);
    // fail on bad settings before touching the output
    match a.opts.backend {
        Backend::Pipeline => drop(backend::pipeline_config(&a.opts, parallelism)?),
        Backend::Chunked => drop(backend::chunked_config(&a.opts, parallelism, &Default::default())?),
        Backend::Serial => drop(backend::definition(&a.opts)?),
    }
    let (geometry, input) = open_input(&a.input, a.opts.raw)?;
    let det = backend::detector(&a.opts, geometry)?;
    let writer = Arc::new(Mutex::new(Some(ClusterWriter::create(&a.out, Format::from_path(&a.out))?)));
    let w = writer.clone();
    let outcome = backend::run(&a.opts, parallelism, det, input, move |c: Cluster| {
        w.lock().expect("writer lock").as_mut().expect("writer open").write(&c)
    })?;
    let writer = writer.lock().expect("writer lock").take().expect("writer open");
    writer.finish()?;
    let wall_ns = outcome.elapsed.as_nanos() as u64;
    emit_json(
        &json!({
            "backend": a.opts.backend,
            "variant": a.opts.variant,
            "dt_max_ns": a.opts.dtmax,
            "split_window_size_ns": a.opts.window,
            "t_unsortedness_ns": a.opts.unsortedness,
            "requested_parallelism": requested,
            "parallelism": parallelism,
            "input": a.input,
            "output": a.out,
            "hits": outcome.hits,
            "clusters": outcome.clusters,
            "wall_time_ns": wall_ns,
            "throughput_mhits": if wall_ns == 0 { 0.0 } else { outcome.hits as f64 / wall_ns as f64 * 1e3 },
            "backend_stats": outcome.detail,
        }),
        a.stats.as_deref(),
    )
}

fn flatten(clusters: &[Cluster]) -> Vec<Hit> {
    clusters.iter().flat_map(|c| c.hits().iter().copied()).collect()
}

pub fn compare(a: &CompareArgs) -> CliResult<()> {
    if a.b.is_none() && a.truth.is_none() {
        return Err(Failure::Usage("give a second cluster file or --truth".into()));
    }
    let clusters_a = read_clusters(&a.a)?;
    let (reference, ca, cb) = match (&a.b, &a.truth) {
        (Some(b), None) => {
            let clusters_b = read_clusters(b)?;
            let hits = flatten(&clusters_a);
            let ca = Clustering::from_clusters(&hits, &clusters_a)?;
            let cb = Clustering::from_clusters(&hits, &clusters_b)
                .map_err(|e| Failure::Comparison(format!("{} and {} hold different hits: {e}", a.a.display(), b.display())))?;
            (b.clone(), ca, cb)
        }
        (None, Some(truth)) => {
            let (_, hits) = load_hits(truth)?;
            let labels = read_labels(&labels_path(truth))?;
            if labels.len() != hits.len() {
                return Err(Failure::Comparison(format!(
                    "{} has {} labels for {} hits",
                    labels_path(truth).display(),
                    labels.len(),
                    hits.len()
                )));
            }
            let ca = Clustering::from_clusters(&hits, &clusters_a)?;
            (labels_path(truth), ca, Clustering::from_labels(&labels))
        }
        _ => unreachable!("checked above"),
    };
    let report = iou_report(&ca, &cb)?;
    emit_json(
        &json!({
            "a": a.a,
            "b": reference,
            "hits": ca.hit_count(),
            "iou": report.iou,
            "clusters_a": report.clusters_a,
            "clusters_b": report.clusters_b,
            "matched": report.matched,
            "unmatched_a": report.unmatched_a,
            "unmatched_b": report.unmatched_b,
        }),
        a.out.as_deref(),
    )?;
    match a.min_iou {
        Some(min) if report.iou < min => Err(Failure::Comparison(format!("IoU {} below {min}", report.iou))),
        _ => Ok(()),
    }
}

pub fn inspect(a: &InspectArgs) -> CliResult<()> {
    let format = Format::from_path(&a.input);
    let (geometry, hits) = if a.raw {
        let r = read_raw_hits(&a.input, format)?;
        let geometry = r.geometry();
        let det = match &a.detector {
            Some(p) => pixstorm::DetectorConfig::from_toml_file(p)?,
            None => pixstorm::DetectorConfig::new(geometry.width, geometry.height, 25.0, 1.5625)?,
        };
        let hits = r.map(|h| h.and_then(|h| det.calibrate(&h))).collect::<pixstorm::Result<Vec<_>>>()?;
        (geometry, hits)
    } else {
        let r = read_hits(&a.input, format)?;
        let geometry = r.geometry();
        (geometry, r.collect::<pixstorm::Result<Vec<_>>>()?)
    };
    let min = hits.iter().map(|h| h.toa).min();
    let max = hits.iter().map(|h| h.toa).max();
    let duration = max.zip(min).map_or(0, |(b, a)| b - a);
    let pixels: HashSet<(u16, u16)> = hits.iter().map(|h| (h.x, h.y)).collect();
    let mean_energy = if hits.is_empty() { 0.0 } else { hits.iter().map(|h| h.energy.kev()).sum::<f64>() / hits.len() as f64 };
    let labels = labels_path(&a.input);
    let truth = if !a.raw && labels.exists() {
        let l = read_labels(&labels)?;
        let c = Clustering::from_labels(&l);
        json!({
            "label_file": labels,
            "clusters": c.len(),
            "mean_cluster_size": if c.is_empty() { 0.0 } else { l.len() as f64 / c.len() as f64 },
        })
    } else {
        serde_json::Value::Null
    };
    emit_json(
        &json!({
            "input": a.input,
            "width": geometry.width,
            "height": geometry.height,
            "hits": hits.len(),
            "min_toa_ns": min,
            "max_toa_ns": max,
            "duration_ns": duration,
            "hit_rate_mhits": if duration == 0 { 0.0 } else { hits.len() as f64 / duration as f64 * 1e3 },
            "t_unsortedness_ns": measure_unsortedness(&hits).t,
            "active_pixels": pixels.len(),
            "mean_energy_kev": mean_energy,
            "ground_truth": truth,
        }),
        None,
    )
}
