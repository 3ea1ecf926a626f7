use accrisk::config::PipelineConfig;
use accrisk::evalharness::{CvConfig, FeatureSet};
use accrisk::geogrid::RegionGrid;
use accrisk::ingest::{self, D_CNN, D_POI};
use accrisk::labeling::{self, agreement, N_LEVELS};
use accrisk::models::ModelKind;
use accrisk::pipeline::{self, run_stage, Stage};
use accrisk::synthcity::{self, SynthPaths, SynthSpec};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn pipeline_labels(paths: &SynthPaths, grid: &RegionGrid) -> Vec<usize> {
    let (acc, _) = ingest::read_all(ingest::parse_accidents(&paths.accidents).unwrap()).unwrap();
    let sums = labeling::aggregate_severity(acc, grid);
    labeling::kmeans_levels(&sums, 7).unwrap().iter().map(|l| l.level).collect()
}

#[test]
fn generated_files_round_trip_without_malformed_lines() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        rows: 10,
        cols: 12,
        ..SynthSpec::default()
    };
    let city = synthcity::generate(&spec, dir.path()).unwrap();
    let paths = SynthPaths::in_dir(dir.path());
    let grid = &city.grid;

    let (gps, stats) = ingest::read_all(ingest::parse_gps(&paths.gps).unwrap()).unwrap();
    assert_eq!(stats.malformed, 0);
    assert!(!gps.is_empty());
    let (_, stats) = ingest::read_all(ingest::parse_poi(&paths.poi, D_POI).unwrap()).unwrap();
    assert_eq!(stats.malformed, 0);
    let (acc, stats) = ingest::read_all(ingest::parse_accidents(&paths.accidents).unwrap()).unwrap();
    assert_eq!(stats.malformed, 0);
    assert_eq!(acc.len() as f64, city.severity.iter().sum::<f64>());
    let osm = ingest::parse_osm(&paths.osm).unwrap();
    assert!(osm.ways.values().all(|w| w.nodes.iter().all(|n| osm.nodes.contains_key(n))));
    let tiles = ingest::load_tiles(&paths.tiles, grid).unwrap();
    assert_eq!(tiles.len(), grid.n_cells());
    let cnn = ingest::load_cnn_vectors(&paths.cnn, grid, D_CNN).unwrap();
    assert!(cnn.present.iter().all(|&p| p));
    // Every accident lands in the cell it was generated for.
    assert_eq!(labeling::aggregate_severity(acc, grid), city.severity);
}

#[test]
fn planted_labels_survive_the_pipeline_and_shuffling_destroys_them() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        noise: 0.0,
        ..SynthSpec::default()
    };
    let city = synthcity::generate(&spec, dir.path()).unwrap();
    let planted: Vec<usize> = synthcity::planted_labels(&city, 1)
        .unwrap()
        .iter()
        .map(|l| l.level)
        .collect();
    let ours = pipeline_labels(&SynthPaths::in_dir(dir.path()), &city.grid);
    assert!(agreement(&planted, &ours) >= 0.95);
    assert_eq!(agreement(&planted, &ours), agreement(&ours, &planted));

    let mut shuffled = city.severity.clone();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(3));
    let noise: Vec<usize> = labeling::kmeans_levels(&shuffled, 1)
        .unwrap()
        .iter()
        .map(|l| l.level)
        .collect();
    // Independent labelings agree at the rate sum_c p_c q_c.
    let share = |v: &[usize], c: usize| v.iter().filter(|&&l| l == c).count() as f64 / v.len() as f64;
    let chance: f64 = (0..N_LEVELS).map(|c| share(&planted, c) * share(&noise, c)).sum();
    assert!((agreement(&planted, &noise) - chance).abs() < 0.05);
}

/// Single-modality FCN accuracies on a 1000-cell city: spatial, visual, and
/// the agreement expected of visual predictions made independently of truth.
fn single_modality_accuracy(spec: SynthSpec) -> (f64, f64, f64) {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = PipelineConfig::default();
    cfg.synth = SynthSpec {
        rows: 25,
        cols: 40,
        ..spec
    };
    cfg.paths.data_dir = dir.path().join("data");
    cfg.paths.workdir = dir.path().join("work");
    for stage in [Stage::Synth, Stage::Featurize, Stage::Label] {
        run_stage(stage, &cfg).unwrap();
    }
    let ds = pipeline::load_dataset(&cfg).unwrap();
    let cv = CvConfig {
        seed: 5,
        ..CvConfig::default()
    };
    let acc = |set| pipeline::cross_validate(&ds, ModelKind::Fcn, set, &cv).unwrap();
    let visual = acc(FeatureSet::Visual);
    let share = |c: usize, pred: bool| {
        let n: usize = visual.confusion.iter().flatten().sum();
        let k: usize = if pred {
            visual.confusion.iter().map(|r| r[c]).sum()
        } else {
            visual.confusion[c].iter().sum()
        };
        k as f64 / n as f64
    };
    let chance: f64 = (0..N_LEVELS).map(|c| share(c, false) * share(c, true)).sum();
    (acc(FeatureSet::Spatial).mean_accuracy, visual.mean_accuracy, chance)
}

#[test]
fn each_modality_carries_its_own_signal() {
    let (sp, vis, _) = single_modality_accuracy(SynthSpec::default());
    let (sp_no_traffic, _, _) = single_modality_accuracy(SynthSpec {
        coef_traffic: 0.0,
        ..SynthSpec::default()
    });
    let (_, vis_no_clutter, _) = single_modality_accuracy(SynthSpec {
        coef_visual: 0.0,
        ..SynthSpec::default()
    });
    assert!(sp - sp_no_traffic >= 0.05, "spatial {sp} -> {sp_no_traffic}");
    assert!(vis - vis_no_clutter >= 0.05, "visual {vis} -> {vis_no_clutter}");

    let (_, blind, chance) = single_modality_accuracy(SynthSpec {
        coef_visual: 0.0,
        coef_roads: 0.0,
        noise: 0.0,
        ..SynthSpec::default()
    });
    assert!((blind - chance).abs() <= 0.05, "visual-only {blind} vs chance {chance}");
}
