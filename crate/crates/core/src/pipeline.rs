//! The staged pipeline. Each stage reads the artifacts of earlier stages
//! from the workdir and writes its own:
//!
//! | stage     | writes                                              |
//! |-----------|-----------------------------------------------------|
//! | synth     | raw inputs in `data_dir`                            |
//! | featurize | `xu.csv`, `xv.csv`, `dictionary.txt`, `features.json` |
//! | label     | `labels.csv`                                        |
//! | train     | `model.ckpt`, `history.csv`                         |
//! | eval      | `eval.csv`, `eval.txt`, `cv_predictions.csv`        |
//! | predict   | `predictions.csv`                                   |
//! | attribute | `attribution.csv`, `attribution.txt`                |
//! | heatmap   | `heatmap_*.geojson`, `heatmap_*.png`                |

use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde_json::json;

use crate::attribution::{self, AttributionConfig};
use crate::autodiff::Tensor;
use crate::blocks::{read_block_csv, write_block_csv, FeatureBlock};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::evalharness::{self, AccuracyGrid, CvConfig, EvalReport, FeatureSet};
use crate::geogrid::{CellId, RegionGrid};
use crate::heatmap::{self, heat_cells};
use crate::ingest::{self, CnnVectors};
use crate::labeling;
use crate::models::{argmax, Model, ModelKind};
use crate::seed;
use crate::st_features::{self, TrafficOptions};
use crate::synthcity;
use crate::training::{self, TrainConfig};
use crate::visual::{self, FractalSpectrum, D_FRA};

pub const XU: &str = "xu.csv";
pub const XV: &str = "xv.csv";
pub const DICTIONARY: &str = "dictionary.txt";
pub const FEATURES_META: &str = "features.json";
pub const LABELS: &str = "labels.csv";
pub const MODEL: &str = "model.ckpt";
pub const HISTORY: &str = "history.csv";
pub const CV_PREDICTIONS: &str = "cv_predictions.csv";
pub const PREDICTIONS: &str = "predictions.csv";
pub const ATTRIBUTION: &str = "attribution.csv";
pub const ATTRIBUTION_TXT: &str = "attribution.txt";
pub const LOCK: &str = ".lock";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Synth,
    Featurize,
    Label,
    Train,
    Eval,
    Predict,
    Attribute,
    Heatmap,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Synth,
        Stage::Featurize,
        Stage::Label,
        Stage::Train,
        Stage::Eval,
        Stage::Predict,
        Stage::Attribute,
        Stage::Heatmap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Featurize => "featurize",
            Stage::Label => "label",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Predict => "predict",
            Stage::Attribute => "attribute",
            Stage::Heatmap => "heatmap",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Stage::ALL.into_iter().find(|st| st.name() == s)
    }
}

/// Exclusive hold on a workdir, released on drop.
#[derive(Debug)]
pub struct WorkdirLock {
    path: PathBuf,
}

impl WorkdirLock {
    pub fn acquire(workdir: &Path) -> Result<Self> {
        fs::create_dir_all(workdir).map_err(|e| Error::io(workdir, e))?;
        let path = workdir.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(WorkdirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(path)),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for WorkdirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Validates the config, locks the workdir and runs one stage.
pub fn run_stage(stage: Stage, cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    let _lock = WorkdirLock::acquire(&cfg.paths.workdir)?;
    info!("stage {}", stage.name());
    match stage {
        Stage::Synth => synth(cfg),
        Stage::Featurize => featurize(cfg).map(|_| ()),
        Stage::Label => label(cfg).map(|_| ()),
        Stage::Train => train(cfg).map(|_| ()),
        Stage::Eval => eval(cfg).map(|_| ()),
        Stage::Predict => predict(cfg).map(|_| ()),
        Stage::Attribute => attribute(cfg).map(|_| ()),
        Stage::Heatmap => heatmap(cfg),
    }
}

/// Runs every stage in order.
pub fn run_all(cfg: &PipelineConfig) -> Result<()> {
    for stage in Stage::ALL {
        run_stage(stage, cfg)?;
    }
    Ok(())
}

fn artifact(cfg: &PipelineConfig, name: &str) -> PathBuf {
    cfg.paths.workdir.join(name)
}

/// Path of an upstream artifact, or the error naming the stage that makes it.
fn require(cfg: &PipelineConfig, name: &str, stage: Stage) -> Result<PathBuf> {
    let path = artifact(cfg, name);
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact {
            stage: stage.name().into(),
            path,
        })
    }
}

fn require_input(path: PathBuf, key: &str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::Config {
            key: key.into(),
            message: format!("{} does not exist", path.display()),
        })
    }
}

fn stage_seed(cfg: &PipelineConfig, stage: &str) -> u64 {
    seed::derive(cfg.seed, &[seed::tag(stage)])
}

pub fn synth(cfg: &PipelineConfig) -> Result<()> {
    let grid = cfg.region_grid()?;
    let sgrid = cfg.synth.grid()?;
    if (grid.rows, grid.cols) != (sgrid.rows, sgrid.cols) {
        warn!(
            "configured grid is {}x{} but the synthetic city is {}x{}",
            grid.rows, grid.cols, sgrid.rows, sgrid.cols
        );
    }
    let city = synthcity::generate(&cfg.synth, &cfg.paths.data_dir)?;
    info!(
        "synthetic city: {} cells, {} accidents, written to {}",
        city.grid.n_cells(),
        city.severity.iter().sum::<f64>(),
        cfg.paths.data_dir.display()
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSummary {
    pub transitions: usize,
    pub tiles: usize,
    pub missing_tiles: Vec<CellId>,
    pub cnn_present: usize,
}

/// Fractal bag-of-words for every cell; cells without a usable tile get
/// zeros. Returns the block, the dictionary and the cells lacking tiles.
fn visual_block(cfg: &PipelineConfig, grid: &RegionGrid) -> Result<(FeatureBlock, visual::FractalDictionary, Vec<CellId>)> {
    let dir = require_input(cfg.tiles_path(), "paths.tiles")?;
    let paths: Vec<(CellId, PathBuf)> = ingest::tile_paths(&dir, grid)?.into_iter().collect();
    let vseed = stage_seed(cfg, "visual");
    let n = cfg.features.patches_per_tile;
    // One tile in memory per worker.
    let spectra: Vec<(CellId, Option<Vec<FractalSpectrum>>)> = paths
        .par_iter()
        .map(|(cell, path)| {
            let s = ingest::load_tile(path, *cell).and_then(|t| visual::tile_spectra(&t, n, vseed));
            match s {
                Ok(s) => Ok((*cell, Some(s))),
                Err(e @ (Error::Image { .. } | Error::ImageTooSmall { .. })) => {
                    warn!("skipping tile: {e}");
                    Ok((*cell, None))
                }
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let pool: Vec<FractalSpectrum> = spectra.iter().filter_map(|(_, s)| s.as_ref()).flatten().copied().collect();
    if pool.is_empty() {
        return Err(Error::InvalidArgument(format!("no usable tiles in {}", dir.display())));
    }
    let dict = visual::build_dictionary(&pool, D_FRA, seed::derive(vseed, &[seed::tag("dictionary")]))?;
    let mut block = FeatureBlock::zeros(grid.n_cells(), D_FRA);
    let mut have = vec![false; grid.n_cells()];
    for (cell, s) in &spectra {
        if let Some(s) = s {
            let li = grid.linear(*cell);
            block.row_mut(li).copy_from_slice(&visual::bow_from_spectra(s, &dict));
            have[li] = true;
        }
    }
    let missing: Vec<CellId> = (0..grid.n_cells()).filter(|&i| !have[i]).map(|i| grid.cell(i)).collect();
    Ok((block, dict, missing))
}

pub fn featurize(cfg: &PipelineConfig) -> Result<FeatureSummary> {
    let grid = cfg.region_grid()?;
    let f = &cfg.features;

    let gps_path = require_input(cfg.gps_path(), "paths.gps")?;
    let mut gps = ingest::parse_gps(&gps_path)?;
    let mut gps_err = None;
    let tra = st_features::traffic_patterns(
        gps.by_ref().map_while(|r| r.map_err(|e| gps_err = Some(e)).ok()),
        &grid,
        TrafficOptions {
            max_gap_s: f.max_gap_s,
            time_range: None,
        },
    );
    if let Some(e) = gps_err {
        return Err(e);
    }
    let gps_stats = gps.finish()?;

    let poi_path = require_input(cfg.poi_path(), "paths.poi")?;
    let (pois, poi_stats) = ingest::read_all(ingest::parse_poi(&poi_path, f.d_poi)?)?;
    let poi = st_features::poi_bow(pois, &grid, f.d_poi);

    let osm = ingest::parse_osm(&require_input(cfg.osm_path(), "paths.osm")?)?;
    let con = st_features::node_connectivity(&osm, &grid);
    let wid = st_features::road_width(&osm, &grid);
    let xu = st_features::assemble_xu(&tra.block, &poi, &con, &wid.block)?;

    let (fra, dict, missing) = visual_block(cfg, &grid)?;
    let cnn = if f.cnn {
        ingest::load_cnn_vectors(&require_input(cfg.cnn_path(), "paths.cnn")?, &grid, f.d_cnn)?
    } else {
        CnnVectors::zeros(&grid, f.d_cnn)
    };
    let cnn_present = cnn.present.iter().filter(|&&p| p).count();
    let cnn_block = FeatureBlock {
        dim: f.d_cnn,
        values: cnn.values,
    };
    let xv = visual::assemble_xv(&fra, &cnn_block, f.d_cnn)?;

    write_block_csv(&artifact(cfg, XU), &grid, &xu)?;
    write_block_csv(&artifact(cfg, XV), &grid, &xv)?;
    dict.save(&artifact(cfg, DICTIONARY))?;
    let meta = json!({
        "rows": grid.rows,
        "cols": grid.cols,
        "d_u": f.d_u(),
        "d_v": f.d_v(),
        "gps_lines": gps_stats.total,
        "gps_malformed": gps_stats.malformed,
        "poi_lines": poi_stats.total,
        "poi_malformed": poi_stats.malformed,
        "transitions": tra.transitions,
        "osm_nodes": osm.nodes.len(),
        "osm_ways": osm.ways.len(),
        "unknown_highway_tags": wid.unknown_tags,
        "tiles": grid.n_cells() - missing.len(),
        "missing_tiles": missing.iter().map(|c| [c.row, c.col]).collect::<Vec<_>>(),
        "cnn": f.cnn,
        "cnn_present": cnn_present,
    });
    let meta_path = artifact(cfg, FEATURES_META);
    let text = serde_json::to_string_pretty(&meta).expect("json serializes") + "\n";
    fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))?;
    if !missing.is_empty() {
        warn!("{} cells have no usable tile; their fractal features are zero", missing.len());
    }
    info!(
        "features: {} cells, {} transitions, {} tiles, {} CNN vectors",
        grid.n_cells(),
        tra.transitions,
        grid.n_cells() - missing.len(),
        cnn_present
    );
    Ok(FeatureSummary {
        transitions: tra.transitions,
        tiles: grid.n_cells() - missing.len(),
        missing_tiles: missing,
        cnn_present,
    })
}

pub fn label(cfg: &PipelineConfig) -> Result<Vec<labeling::RiskLabel>> {
    let grid = cfg.region_grid()?;
    let path = require_input(cfg.accidents_path(), "paths.accidents")?;
    let (accidents, _) = ingest::read_all(ingest::parse_accidents(&path)?)?;
    let sums = labeling::aggregate_severity(accidents, &grid);
    let labels = labeling::kmeans_levels(&sums, stage_seed(cfg, "labels"))?;
    labeling::write_labels(&artifact(cfg, LABELS), &grid, &labels)?;
    let mut counts = [0usize; labeling::N_LEVELS];
    labels.iter().for_each(|l| counts[l.level] += 1);
    info!("risk levels (low, medium, high): {counts:?}");
    Ok(labels)
}

/// Features and labels of every cell. Rows of `x` are `[X_u, X_v]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub grid: RegionGrid,
    pub x: Tensor,
    pub d_u: usize,
    pub d_v: usize,
    pub labels: Vec<usize>,
    pub severity: Vec<f64>,
}

pub fn load_features(cfg: &PipelineConfig, grid: &RegionGrid) -> Result<(Tensor, usize, usize)> {
    let (d_u, d_v) = (cfg.features.d_u(), cfg.features.d_v());
    let xu = read_block_csv(&require(cfg, XU, Stage::Featurize)?, grid, d_u)?;
    let xv = read_block_csv(&require(cfg, XV, Stage::Featurize)?, grid, d_v)?;
    let x = FeatureBlock::concat(&[("xu", &xu, d_u), ("xv", &xv, d_v)])?;
    Ok((Tensor::new(grid.n_cells(), d_u + d_v, x.values), d_u, d_v))
}

pub fn load_dataset(cfg: &PipelineConfig) -> Result<Dataset> {
    let grid = cfg.region_grid()?;
    let (x, d_u, d_v) = load_features(cfg, &grid)?;
    let labels = labeling::read_labels(&require(cfg, LABELS, Stage::Label)?, &grid)?;
    Ok(Dataset {
        grid,
        x,
        d_u,
        d_v,
        labels: labels.iter().map(|l| l.level).collect(),
        severity: labels.iter().map(|l| l.severity).collect(),
    })
}

/// The k-fold settings `eval` uses; seeds derive from the master and training seeds.
pub fn cv_config(cfg: &PipelineConfig) -> CvConfig {
    CvConfig {
        folds: cfg.eval.folds,
        resample: cfg.eval.resample,
        arch: cfg.model.arch.clone(),
        train: cfg.train.clone(),
        seed: seed::derive(cfg.seed, &[seed::tag("eval"), cfg.train.seed]),
    }
}

/// Trains the configured model on every cell (less the early-stopping
/// holdout) and saves it.
pub fn train(cfg: &PipelineConfig) -> Result<Model> {
    let ds = load_dataset(cfg)?;
    let tseed = seed::derive(cfg.seed, &[seed::tag("train"), cfg.train.seed]);
    let all: Vec<usize> = (0..ds.labels.len()).collect();
    let (inner, val) = training::holdout_split(&all, &ds.labels, cfg.train.val_fraction, tseed);
    let inner = evalharness::rebalance(&inner, &ds.labels, cfg.model.arch.n_classes, cfg.eval.resample, tseed)?;
    let (kind, set) = (cfg.model.kind, cfg.model.features);
    let (a, b) = set.slots(kind, ds.d_u, ds.d_v);
    let mut model = Model::new(kind, cfg.model.arch.clone(), ds.x.cols, a, b, tseed)?;
    let tcfg = TrainConfig {
        seed: tseed,
        ..cfg.train.clone()
    };
    let hist = training::train(&mut model, &ds.x, &ds.labels, &inner, &val, &tcfg)?;
    training::write_history_csv(&artifact(cfg, HISTORY), &hist)?;
    model.save_with(
        &artifact(cfg, MODEL),
        json!({
            "features": set,
            "d_u": ds.d_u,
            "d_v": ds.d_v,
            "best_epoch": hist.best_epoch,
            "best_val_acc": hist.best_val_acc,
        }),
    )?;
    info!(
        "{} on {} features: best validation accuracy {:.3} at epoch {}",
        kind.name(),
        set.name(),
        hist.best_val_acc,
        hist.best_epoch
    );
    Ok(model)
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub grid: AccuracyGrid,
    /// Out-of-fold predictions of the configured model and feature set,
    /// when that pair is part of the grid.
    pub oof: Option<Vec<usize>>,
}

/// The k-fold protocol over every configured model and feature set.
pub fn eval(cfg: &PipelineConfig) -> Result<EvalOutcome> {
    let ds = load_dataset(cfg)?;
    let cv = cv_config(cfg);
    let plan = evalharness::kfold_split(&ds.labels, cv.folds, cv.seed)?;
    let mut grid = AccuracyGrid::new();
    let mut oof = None;
    for &kind in &cfg.eval.models {
        for &set in &cfg.eval.feature_sets {
            let keep = (kind, set) == (cfg.model.kind, cfg.model.features);
            let mut pred = vec![0usize; ds.labels.len()];
            let mut folds = Vec::with_capacity(cv.folds);
            for f in 0..cv.folds {
                let (model, report) = evalharness::run_fold(kind, set, ds.d_u, ds.d_v, &ds.x, &ds.labels, &plan, f, &cv)?;
                if keep {
                    let test = &plan.folds[f];
                    let p = model.predict(&training::gather(&ds.x, test))?;
                    for (&i, &c) in test.iter().zip(&p) {
                        pred[i] = c;
                    }
                }
                folds.push(report);
            }
            let report = EvalReport::from_folds(folds);
            info!("{} / {}: {:.3}", kind.name(), set.name(), report.mean_accuracy);
            grid.insert((kind, set), report);
            if keep {
                oof = Some(pred);
            }
        }
    }
    evalharness::write_grid(&cfg.paths.workdir, &grid)?;
    match &oof {
        Some(pred) => write_predictions(&artifact(cfg, CV_PREDICTIONS), &ds.grid, pred, None)?,
        None => {
            // A stale file would pair with the wrong grid.
            let _ = fs::remove_file(artifact(cfg, CV_PREDICTIONS));
        }
    }
    Ok(EvalOutcome { grid, oof })
}

/// `row,col,pred[,p0,p1,p2]` per cell.
fn write_predictions(path: &Path, grid: &RegionGrid, pred: &[usize], proba: Option<&Tensor>) -> Result<()> {
    let mut s = String::from("row,col,pred");
    if let Some(p) = proba {
        for c in 0..p.cols {
            let _ = write!(s, ",p{c}");
        }
    }
    s.push('\n');
    for (i, &c) in pred.iter().enumerate() {
        let id = grid.cell(i);
        let _ = write!(s, "{},{},{}", id.row, id.col, c);
        if let Some(p) = proba {
            for v in p.row(i) {
                let _ = write!(s, ",{v}");
            }
        }
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Reads the `pred` column of a file written by [`write_predictions`].
pub fn read_predictions(path: &Path, grid: &RegionGrid) -> Result<Vec<usize>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = vec![None; grid.n_cells()];
    for (lineno, line) in BufReader::new(file).lines().enumerate().skip(1) {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let perr = || Error::Parse {
            path: path.to_path_buf(),
            message: format!("line {}: expected row,col,pred", lineno + 1),
        };
        let mut f = line.split(',');
        let mut next = || f.next().and_then(|v| v.parse::<usize>().ok()).ok_or_else(perr);
        let (row, col, pred) = (next()?, next()?, next()?);
        let id = CellId::new(row, col);
        grid.check(id)?;
        out[grid.linear(id)] = Some(pred);
    }
    out.into_iter()
        .enumerate()
        .map(|(i, p)| {
            p.ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                message: format!("no prediction for cell {:?}", grid.cell(i)),
            })
        })
        .collect()
}

fn load_model(cfg: &PipelineConfig, n_inputs: usize) -> Result<Model> {
    let model = Model::load(&require(cfg, MODEL, Stage::Train)?)?;
    if model.n_inputs != n_inputs {
        return Err(Error::DimensionMismatch {
            context: "model inputs vs feature columns".into(),
            expected: model.n_inputs,
            got: n_inputs,
        });
    }
    Ok(model)
}

pub fn predict(cfg: &PipelineConfig) -> Result<Tensor> {
    let grid = cfg.region_grid()?;
    let (x, _, _) = load_features(cfg, &grid)?;
    let model = load_model(cfg, x.cols)?;
    let proba = model.predict_proba(&x)?;
    let pred: Vec<usize> = (0..proba.rows).map(|i| argmax(proba.row(i))).collect();
    write_predictions(&artifact(cfg, PREDICTIONS), &grid, &pred, Some(&proba))?;
    Ok(proba)
}

#[derive(Debug, Clone)]
pub struct AttributionOutcome {
    pub cell: CellId,
    pub result: attribution::AttributionResult,
    pub ranked: Vec<attribution::RankedDim>,
}

/// Integrated gradients for one cell: the configured one, or the cell whose
/// prediction of the top risk level is most confident.
pub fn attribute(cfg: &PipelineConfig) -> Result<AttributionOutcome> {
    let grid = cfg.region_grid()?;
    let (x, _, _) = load_features(cfg, &grid)?;
    let model = load_model(cfg, x.cols)?;
    let cell = match cfg.attribute.cell {
        Some([row, col]) => {
            let id = CellId::new(row, col);
            grid.check(id).map_err(|e| Error::Config {
                key: "attribute.cell".into(),
                message: e.to_string(),
            })?;
            id
        }
        None => {
            let proba = model.predict_proba(&x)?;
            let top = proba.cols - 1;
            let best = (0..proba.rows).fold(0, |b, i| if proba.at(i, top) > proba.at(b, top) { i } else { b });
            grid.cell(best)
        }
    };
    let row = x.row(grid.linear(cell)).to_vec();
    let result = attribution::integrated_gradients(
        &model,
        &row,
        &AttributionConfig {
            steps: cfg.attribute.steps,
            ..AttributionConfig::default()
        },
    )?;
    let names = attribution::feature_names(cfg.features.d_poi, cfg.features.d_cnn);
    let ranked = attribution::rank_dimensions(&result, &names)?;
    attribution::write_report(&artifact(cfg, ATTRIBUTION), &ranked)?;
    let mut txt = format!(
        "cell ({}, {}), class {}\nscore {:.6}, baseline score {:.6}, completeness gap {:.3e}\n\n",
        cell.row, cell.col, result.target, result.score, result.baseline_score, result.gap
    );
    txt.push_str(&attribution::report_table(&ranked, 20));
    let path = artifact(cfg, ATTRIBUTION_TXT);
    fs::write(&path, txt).map_err(|e| Error::io(&path, e))?;
    Ok(AttributionOutcome { cell, result, ranked })
}

/// Ground-truth heatmap, plus the predicted one from out-of-fold
/// predictions (or the `predict` stage when `eval` did not produce any).
pub fn heatmap(cfg: &PipelineConfig) -> Result<()> {
    let grid = cfg.region_grid()?;
    let labels = labeling::read_labels(&require(cfg, LABELS, Stage::Label)?, &grid)?;
    let risk: Vec<usize> = labels.iter().map(|l| l.level).collect();
    let na: Vec<f64> = labels.iter().map(|l| l.severity).collect();
    let mut maps = vec![("truth", heat_cells(&grid, &risk, Some(&na)))];
    let source = [CV_PREDICTIONS, PREDICTIONS]
        .into_iter()
        .map(|n| artifact(cfg, n))
        .find(|p| p.exists());
    match source {
        Some(p) => {
            let pred = read_predictions(&p, &grid)?;
            let agree = labeling::agreement(&pred, &risk);
            info!("predicted heatmap from {}: cellwise agreement {agree:.3}", p.display());
            maps.push(("predicted", heat_cells(&grid, &pred, Some(&na))));
        }
        None => warn!("no predictions found; writing the ground-truth heatmap only"),
    }
    for (name, cells) in &maps {
        heatmap::write_geojson(&artifact(cfg, &format!("heatmap_{name}.geojson")), &grid, cells)?;
        if cfg.heatmap.png {
            heatmap::write_png(&artifact(cfg, &format!("heatmap_{name}.png")), &grid, cells)?;
        }
    }
    Ok(())
}

/// Runs the k-fold protocol for one model and feature set on a dataset.
pub fn cross_validate(ds: &Dataset, kind: ModelKind, set: FeatureSet, cv: &CvConfig) -> Result<EvalReport> {
    evalharness::cross_validate(kind, set, ds.d_u, ds.d_v, &ds.x, &ds.labels, cv)
}
