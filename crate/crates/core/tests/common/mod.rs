#![allow(dead_code)]

use std::path::Path;

use accrisk::config::PipelineConfig;
use accrisk::evalharness::FeatureSet;
use accrisk::models::ModelKind;

/// A 120-cell city with short training, rooted at `dir`.
pub fn small_config(dir: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.synth.rows = 10;
    cfg.synth.cols = 12;
    cfg.paths.data_dir = dir.join("data");
    cfg.paths.workdir = dir.join("work");
    cfg.train.max_epochs = 12;
    cfg.train.patience = 4;
    cfg.eval.folds = 3;
    cfg.eval.models = vec![ModelKind::Fcn, ModelKind::ModelDfnn];
    cfg.eval.feature_sets = vec![FeatureSet::Both];
    cfg.attribute.steps = 20;
    cfg
}
