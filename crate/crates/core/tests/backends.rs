use pixstorm::chunked_clusterer::{cluster_chunked, ChunkedConfig};
use pixstorm::datagen::{generate, DatasetPreset, GeneratorConfig};
use pixstorm::ingest_sort::time_sort;
use pixstorm::oracle_metrics::{iou, Clustering};
use pixstorm::pipeline::{cluster_pipeline, PipelineConfig};
use pixstorm::serial_clusterer::cluster_sorted;
use pixstorm::{ClusterDefinition, DetectorConfig, Hit};

fn serial(hits: &[Hit], def: ClusterDefinition) -> Clustering {
    let sorted: Vec<Hit> = time_sort(hits.iter().copied().map(Ok), 1_000).collect::<Result<_, _>>().unwrap();
    let cs = cluster_sorted(&sorted, def, 256, 256).unwrap();
    Clustering::from_clusters(hits, &cs).unwrap()
}

#[test]
fn pipeline_matches_serial_local() {
    for (name, seed) in [("gamma", 1), ("pion0", 2), ("pion45", 3), ("pb50", 4)] {
        let data = generate(DatasetPreset::by_name(name).unwrap(), 30_000, seed, &GeneratorConfig::default()).unwrap();
        let def = ClusterDefinition::local(200);
        let want = serial(&data.hits, def);
        for lanes in [1, 2, 4, 8] {
            let mut cfg = PipelineConfig::new(def, lanes);
            cfg.split_window_size = 5_000;
            let (cs, stats) = cluster_pipeline(data.hits.clone(), cfg, DetectorConfig::default()).unwrap();
            assert_eq!(stats.hits_out as usize, data.hits.len());
            assert!(cs.windows(2).all(|w| w[0].min_toa() <= w[1].min_toa()), "{name} {lanes}");
            assert_eq!(Clustering::from_clusters(&data.hits, &cs).unwrap(), want, "{name} lanes={lanes}");
        }
    }
}

#[test]
fn pipeline_unordered_output_has_same_clusters() {
    let data = generate(DatasetPreset::by_name("pion45").unwrap(), 20_000, 9, &GeneratorConfig::default()).unwrap();
    let def = ClusterDefinition::local(200);
    let mut cfg = PipelineConfig::new(def, 3);
    cfg.concatenate = false;
    cfg.fast_reject = false;
    let (cs, _) = cluster_pipeline(data.hits.clone(), cfg, DetectorConfig::default()).unwrap();
    assert_eq!(Clustering::from_clusters(&data.hits, &cs).unwrap(), serial(&data.hits, def));
}

#[test]
fn pipeline_global_and_static_close_to_serial() {
    let data = generate(DatasetPreset::by_name("pion0").unwrap(), 30_000, 5, &GeneratorConfig::default()).unwrap();
    for def in [ClusterDefinition::global(200), ClusterDefinition::static_window(200)] {
        let want = serial(&data.hits, def);
        let (cs, _) = cluster_pipeline(data.hits.clone(), PipelineConfig::new(def, 4), DetectorConfig::default()).unwrap();
        let got = Clustering::from_clusters(&data.hits, &cs).unwrap();
        let score = iou(&got, &want).unwrap();
        assert!(score > 0.99, "{def:?}: {score}");
    }
}

#[test]
fn chunked_matches_serial() {
    for (name, seed) in [("gamma", 11), ("pion75", 12), ("pb0", 13)] {
        let data = generate(DatasetPreset::by_name(name).unwrap(), 50_000, seed, &GeneratorConfig::default()).unwrap();
        let def = ClusterDefinition::local(200);
        let want = serial(&data.hits, def);
        for workers in [1, 2, 4, 8] {
            let mut cfg = ChunkedConfig::new(def, workers);
            cfg.fill.b = 1 << 14;
            cfg.fill.b_t = 1 << 12;
            cfg.min_chunk = 500;
            let cs = cluster_chunked(&data.hits, &cfg).unwrap();
            assert_eq!(cs.iter().map(|c| c.len()).sum::<usize>(), data.hits.len());
            assert_eq!(Clustering::from_clusters(&data.hits, &cs).unwrap(), want, "{name} workers={workers}");
        }
    }
}
