//! Pipeline configuration, read from one TOML file.
//!
//! Every field has a default, so an empty file runs the standard protocol
//! on a synthetic city in `./data` with artifacts in `./work`. Relative
//! paths are resolved against the config file's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalharness::{FeatureSet, ResampleMode, DEFAULT_FOLDS};
use crate::geogrid::{make_grid, make_grid_with_dims, BoundingBox, RegionGrid};
use crate::ingest::{D_CNN, D_POI};
use crate::models::{ArchConfig, ModelKind};
use crate::st_features::{D_CON, D_TRA, D_WID};
use crate::synthcity::SynthSpec;
use crate::training::TrainConfig;
use crate::visual::D_FRA;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Raw inputs; `synth` writes here.
    pub data_dir: PathBuf,
    pub workdir: PathBuf,
    pub gps: Option<PathBuf>,
    pub poi: Option<PathBuf>,
    pub osm: Option<PathBuf>,
    pub tiles: Option<PathBuf>,
    pub cnn: Option<PathBuf>,
    pub accidents: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data_dir: "data".into(),
            workdir: "work".into(),
            gps: None,
            poi: None,
            osm: None,
            tiles: None,
            cnn: None,
            accidents: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// Defaults to the synthetic city's box.
    pub bbox: Option<BoundingBox>,
    /// Forced dimensions; both or neither.
    pub rows: Option<usize>,
    pub cols: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub d_tra: usize,
    pub d_poi: usize,
    pub d_con: usize,
    pub d_wid: usize,
    pub d_fra: usize,
    pub d_cnn: usize,
    /// Use the external CNN vectors; zeros otherwise.
    pub cnn: bool,
    pub patches_per_tile: usize,
    /// Largest gap between GPS fixes that still counts as a move.
    pub max_gap_s: i64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            d_tra: D_TRA,
            d_poi: D_POI,
            d_con: D_CON,
            d_wid: D_WID,
            d_fra: D_FRA,
            d_cnn: D_CNN,
            cnn: true,
            patches_per_tile: 16,
            max_gap_s: 600,
        }
    }
}

impl FeatureConfig {
    pub fn d_u(&self) -> usize {
        self.d_tra + self.d_poi + self.d_con + self.d_wid
    }

    pub fn d_v(&self) -> usize {
        self.d_fra + self.d_cnn
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub features: FeatureSet,
    pub arch: ArchConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::ModelDfnn,
            features: FeatureSet::Both,
            arch: ArchConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub folds: usize,
    pub resample: ResampleMode,
    pub models: Vec<ModelKind>,
    pub feature_sets: Vec<FeatureSet>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            folds: DEFAULT_FOLDS,
            resample: ResampleMode::Oversample,
            models: ModelKind::ALL.to_vec(),
            feature_sets: vec![FeatureSet::Spatial, FeatureSet::Visual, FeatureSet::Both],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributeConfig {
    pub steps: usize,
    /// `[row, col]`; defaults to the cell with the most confident
    /// prediction of the highest risk level.
    pub cell: Option<[usize; 2]>,
}

impl Default for AttributeConfig {
    fn default() -> Self {
        AttributeConfig { steps: 50, cell: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeatmapConfig {
    /// Also write one-pixel-per-cell PNG rasters.
    pub png: bool,
}

impl Default for HeatmapConfig {
    fn default() -> Self {
        HeatmapConfig { png: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Master seed; every stage derives its own streams from it.
    pub seed: u64,
    pub paths: PathsConfig,
    pub grid: GridConfig,
    pub features: FeatureConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub attribute: AttributeConfig,
    pub heatmap: HeatmapConfig,
    pub synth: SynthSpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 42,
            paths: PathsConfig::default(),
            grid: GridConfig::default(),
            features: FeatureConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            attribute: AttributeConfig::default(),
            heatmap: HeatmapConfig::default(),
            synth: SynthSpec::default(),
        }
    }
}

fn config_err(key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        message: message.into(),
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let message = e.message().to_string();
            // toml reports the offending key inside the message or span.
            let key = e
                .span()
                .map(|s| text[s].trim().to_string())
                .unwrap_or_else(|| "<root>".into());
            config_err(&key, message)
        })
    }

    /// Parses `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| config_err("--config", format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        Ok(cfg)
    }

    pub fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.data_dir);
        fix(&mut self.paths.workdir);
        for p in [
            &mut self.paths.gps,
            &mut self.paths.poi,
            &mut self.paths.osm,
            &mut self.paths.tiles,
            &mut self.paths.cnn,
            &mut self.paths.accidents,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks the settings every stage relies on.
    pub fn validate(&self) -> Result<()> {
        let f = &self.features;
        let fixed = [
            ("features.d_tra", f.d_tra, D_TRA),
            ("features.d_poi", f.d_poi, D_POI),
            ("features.d_con", f.d_con, D_CON),
            ("features.d_wid", f.d_wid, D_WID),
            ("features.d_fra", f.d_fra, D_FRA),
        ];
        for (key, got, want) in fixed {
            if got != want {
                return Err(config_err(key, format!("must be {want} (got {got})")));
            }
        }
        if f.d_cnn == 0 {
            return Err(config_err("features.d_cnn", "must be positive"));
        }
        if f.patches_per_tile == 0 {
            return Err(config_err("features.patches_per_tile", "must be positive"));
        }
        if f.max_gap_s <= 0 {
            return Err(config_err("features.max_gap_s", "must be positive"));
        }
        self.model.arch.validate()?;
        if self.model.arch.n_classes != crate::models::N_CLASSES {
            return Err(config_err("model.arch.n_classes", "risk labels have 3 levels"));
        }
        self.train.validate()?;
        if self.eval.folds < 2 {
            return Err(config_err("eval.folds", "need at least 2 folds"));
        }
        if self.attribute.steps == 0 {
            return Err(config_err("attribute.steps", "must be positive"));
        }
        if self.grid.rows.is_some() != self.grid.cols.is_some() {
            return Err(config_err("grid.rows", "set both rows and cols, or neither"));
        }
        self.synth.validate()
    }

    pub fn region_grid(&self) -> Result<RegionGrid> {
        let bbox = match self.grid.bbox {
            Some(b) => {
                b.validate().map_err(|e| config_err("grid.bbox", e.to_string()))?;
                b
            }
            None => self.synth.bbox()?,
        };
        match (self.grid.rows, self.grid.cols) {
            (Some(r), Some(c)) => make_grid_with_dims(bbox, r, c),
            _ => make_grid(bbox),
        }
        .map_err(|e| config_err("grid", e.to_string()))
    }

    fn input(&self, explicit: &Option<PathBuf>, name: &str) -> PathBuf {
        explicit.clone().unwrap_or_else(|| self.paths.data_dir.join(name))
    }

    pub fn gps_path(&self) -> PathBuf {
        self.input(&self.paths.gps, "gps.csv")
    }
    pub fn poi_path(&self) -> PathBuf {
        self.input(&self.paths.poi, "poi.csv")
    }
    pub fn osm_path(&self) -> PathBuf {
        self.input(&self.paths.osm, "osm.xml")
    }
    pub fn tiles_path(&self) -> PathBuf {
        self.input(&self.paths.tiles, "tiles")
    }
    pub fn cnn_path(&self) -> PathBuf {
        self.input(&self.paths.cnn, "cnn.csv")
    }
    pub fn accidents_path(&self) -> PathBuf {
        self.input(&self.paths.accidents, "accidents.csv")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = PipelineConfig::from_toml("").unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = PipelineConfig::default();
        cfg.model.kind = ModelKind::FeatureDfnn;
        cfg.grid.rows = Some(3);
        cfg.grid.cols = Some(4);
        cfg.grid.bbox = Some(BoundingBox::new(0.0, 1.0, 0.0, 1.0).unwrap());
        let back = PipelineConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn errors_name_the_key() {
        let e = PipelineConfig::from_toml("[train]\nlr = \"fast\"\n").unwrap_err();
        assert!(matches!(e, Error::Config { .. }), "{e}");
        let e = PipelineConfig::from_toml("[train]\nbogus = 1\n").unwrap_err();
        assert!(e.to_string().contains("bogus"), "{e}");
        let cfg = PipelineConfig::from_toml("[features]\nd_fra = 9\n").unwrap();
        match cfg.validate() {
            Err(Error::Config { key, .. }) => assert_eq!(key, "features.d_fra"),
            other => panic!("{other:?}"),
        }
        let cfg = PipelineConfig::from_toml("[train]\npatience = 0\n").unwrap();
        match cfg.validate() {
            Err(Error::Config { key, .. }) => assert_eq!(key, "train.patience"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let mut cfg = PipelineConfig::from_toml("[paths]\ngps = \"x/g.csv\"\n").unwrap();
        cfg.resolve(Path::new("/srv/city"));
        assert_eq!(cfg.gps_path(), PathBuf::from("/srv/city/x/g.csv"));
        assert_eq!(cfg.poi_path(), PathBuf::from("/srv/city/data/poi.csv"));
        assert_eq!(cfg.paths.workdir, PathBuf::from("/srv/city/work"));
    }

    #[test]
    fn default_grid_matches_synthetic_city() {
        let g = PipelineConfig::default().region_grid().unwrap();
        assert_eq!((g.rows, g.cols), (40, 50));
    }
}
