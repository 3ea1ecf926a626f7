//! Stratified k-fold cross-validation, training-side resampling and
//! accuracy reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::models::{argmax, ArchConfig, Model, ModelKind};
use crate::seed;
use crate::training::{self, gather, TrainConfig};

pub const DEFAULT_FOLDS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    /// Sorted indices of each fold.
    pub folds: Vec<Vec<usize>>,
    pub seed: u64,
}

impl FoldPlan {
    /// Every index outside fold `f`, ascending.
    pub fn train_indices(&self, f: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != f)
            .flat_map(|(_, v)| v.iter().copied())
            .collect();
        out.sort_unstable();
        out
    }
}

/// Stratified shuffled split into `k` folds.
///
/// Members of each class are shuffled, classes are laid end to end, and
/// position `i` of that sequence goes to fold `i mod k`. Fold sizes differ
/// by at most one and each class is spread to within one sample per fold.
pub fn kfold_split(labels: &[usize], k: usize, seed: u64) -> Result<FoldPlan> {
    let n = labels.len();
    if k == 0 || n < k {
        return Err(Error::InvalidArgument(format!("{n} samples for {k} folds")));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in labels.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    let mut seq = Vec::with_capacity(n);
    for (&c, members) in &mut by_class {
        if members.len() < k {
            log::warn!("class {c} has {} members for {k} folds; it is not stratified", members.len());
        }
        let mut rng = seed::rng(seed, &[seed::tag("kfold"), c as u64]);
        members.shuffle(&mut rng);
        seq.extend_from_slice(members);
    }
    let mut folds = vec![Vec::new(); k];
    for (pos, &i) in seq.iter().enumerate() {
        folds[pos % k].push(i);
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    Ok(FoldPlan { folds, seed })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ResampleMode {
    #[default]
    Oversample,
    Undersample,
    None,
}

/// Resamples training rows so every class has the same count: minority
/// classes are drawn with replacement up to the majority count
/// (`Oversample`), or majority classes are subsampled down to the minority
/// count (`Undersample`).
pub fn rebalance(
    train_idx: &[usize],
    labels: &[usize],
    n_classes: usize,
    mode: ResampleMode,
    seed: u64,
) -> Result<Vec<usize>> {
    if mode == ResampleMode::None {
        return Ok(train_idx.to_vec());
    }
    let mut by_class = vec![Vec::new(); n_classes];
    for &i in train_idx {
        by_class[labels[i]].push(i);
    }
    if let Some(c) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::EmptyClass(c));
    }
    let max = by_class.iter().map(Vec::len).max().unwrap_or(0);
    let min = by_class.iter().map(Vec::len).min().unwrap_or(0);
    let mut out = Vec::new();
    for (c, members) in by_class.iter().enumerate() {
        let mut rng = seed::rng(seed, &[seed::tag("resample"), c as u64]);
        match mode {
            ResampleMode::Oversample => {
                out.extend_from_slice(members);
                for _ in members.len()..max {
                    out.push(members[rng.gen_range(0..members.len())]);
                }
            }
            ResampleMode::Undersample => {
                out.extend(members.choose_multiple(&mut rng, min).copied());
            }
            ResampleMode::None => unreachable!(),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldReport {
    pub accuracy: f64,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
    pub recall: Vec<f64>,
}

/// Accuracy, confusion matrix and per-class recall of `model` on rows
/// `test_idx`.
pub fn evaluate(model: &Model, x: &Tensor, labels: &[usize], test_idx: &[usize]) -> Result<FoldReport> {
    if test_idx.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let p = model.predict_proba(&gather(x, test_idx))?;
    let pred: Vec<usize> = (0..p.rows).map(|r| argmax(p.row(r))).collect();
    let truth: Vec<usize> = test_idx.iter().map(|&i| labels[i]).collect();
    Ok(report_from_predictions(&pred, &truth, p.cols))
}

pub fn report_from_predictions(pred: &[usize], truth: &[usize], n_classes: usize) -> FoldReport {
    let mut confusion = vec![vec![0; n_classes]; n_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        confusion[t][p] += 1;
    }
    FoldReport {
        accuracy: training::accuracy(pred, truth),
        recall: recall(&confusion),
        confusion,
    }
}

fn recall(confusion: &[Vec<usize>]) -> Vec<f64> {
    confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let total: usize = row.iter().sum();
            if total == 0 {
                0.0
            } else {
                row[c] as f64 / total as f64
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub folds: Vec<FoldReport>,
    pub mean_accuracy: f64,
    /// Summed over folds.
    pub confusion: Vec<Vec<usize>>,
    pub recall: Vec<f64>,
}

impl EvalReport {
    pub fn from_folds(folds: Vec<FoldReport>) -> Self {
        let n = folds.first().map_or(0, |f| f.confusion.len());
        let mut confusion = vec![vec![0; n]; n];
        for f in &folds {
            for (r, row) in f.confusion.iter().enumerate() {
                for (c, v) in row.iter().enumerate() {
                    confusion[r][c] += v;
                }
            }
        }
        let mean_accuracy = folds.iter().map(|f| f.accuracy).sum::<f64>() / folds.len().max(1) as f64;
        EvalReport {
            mean_accuracy,
            recall: recall(&confusion),
            confusion,
            folds,
        }
    }
}

/// Which feature blocks feed a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSet {
    /// Spatio-temporal features only.
    Spatial,
    /// Visual features only.
    Visual,
    /// Both; fusion models take spatio-temporal features in the first slot.
    Both,
    /// Both, with the slots of fusion models exchanged.
    Swapped,
}

impl FeatureSet {
    pub fn name(self) -> &'static str {
        match self {
            FeatureSet::Spatial => "spatial",
            FeatureSet::Visual => "visual",
            FeatureSet::Both => "both",
            FeatureSet::Swapped => "swapped",
        }
    }

    /// Input slots for a row layout `[X_u (d_u), X_v (d_v)]`. Single-block
    /// fusion variants feed the same block to both slots.
    pub fn slots(self, kind: ModelKind, d_u: usize, d_v: usize) -> (Vec<usize>, Option<Vec<usize>>) {
        let u: Vec<usize> = (0..d_u).collect();
        let v: Vec<usize> = (d_u..d_u + d_v).collect();
        let (a, b) = match self {
            FeatureSet::Spatial => (u.clone(), u),
            FeatureSet::Visual => (v.clone(), v),
            FeatureSet::Both => (u, v),
            FeatureSet::Swapped => (v, u),
        };
        if kind.is_fusion() {
            (a, Some(b))
        } else if a == b {
            (a, None)
        } else {
            let mut all: Vec<usize> = a.into_iter().chain(b).collect();
            all.sort_unstable();
            (all, None)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvConfig {
    pub folds: usize,
    pub resample: ResampleMode,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            folds: DEFAULT_FOLDS,
            resample: ResampleMode::Oversample,
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}

/// Fold `f` of the protocol: holds out a stratified validation share of the
/// training rows, resamples the rest, trains and tests on fold `f`.
pub fn run_fold(
    kind: ModelKind,
    set: FeatureSet,
    d_u: usize,
    d_v: usize,
    x: &Tensor,
    labels: &[usize],
    plan: &FoldPlan,
    f: usize,
    cfg: &CvConfig,
) -> Result<(Model, FoldReport)> {
    let fseed = seed::derive(cfg.seed, &[seed::tag("fold"), f as u64]);
    let train_all = plan.train_indices(f);
    let (inner, val) = training::holdout_split(&train_all, labels, cfg.train.val_fraction, fseed);
    let inner = rebalance(&inner, labels, cfg.arch.n_classes, cfg.resample, fseed)?;
    let (a, b) = set.slots(kind, d_u, d_v);
    let mseed = seed::derive(fseed, &[seed::tag(kind.name()), seed::tag(set.name())]);
    let mut model = Model::new(kind, cfg.arch.clone(), x.cols, a, b, mseed)?;
    let tcfg = TrainConfig {
        seed: mseed,
        ..cfg.train.clone()
    };
    training::train(&mut model, x, labels, &inner, &val, &tcfg)?;
    let report = evaluate(&model, x, labels, &plan.folds[f])?;
    Ok((model, report))
}

/// Full k-fold protocol for one model and feature set.
pub fn cross_validate(
    kind: ModelKind,
    set: FeatureSet,
    d_u: usize,
    d_v: usize,
    x: &Tensor,
    labels: &[usize],
    cfg: &CvConfig,
) -> Result<EvalReport> {
    let plan = kfold_split(labels, cfg.folds, cfg.seed)?;
    let folds = (0..cfg.folds)
        .map(|f| run_fold(kind, set, d_u, d_v, x, labels, &plan, f, cfg).map(|r| r.1))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_folds(folds))
}

/// Accuracy grid: one row per model, one column per feature set.
pub type AccuracyGrid = BTreeMap<(ModelKind, FeatureSet), EvalReport>;

/// `model,features,fold,accuracy` rows, with fold `mean` after each group.
pub fn grid_csv(grid: &AccuracyGrid) -> String {
    let mut s = String::from("model,features,fold,accuracy\n");
    for ((kind, set), r) in grid {
        for (i, f) in r.folds.iter().enumerate() {
            let _ = writeln!(s, "{},{},{},{}", kind.name(), set.name(), i, f.accuracy);
        }
        let _ = writeln!(s, "{},{},mean,{}", kind.name(), set.name(), r.mean_accuracy);
    }
    s
}

/// Human-readable percentage table of mean accuracies.
pub fn grid_table(grid: &AccuracyGrid) -> String {
    let mut sets: Vec<FeatureSet> = grid.keys().map(|k| k.1).collect();
    sets.sort_unstable();
    sets.dedup();
    let mut kinds: Vec<ModelKind> = grid.keys().map(|k| k.0).collect();
    kinds.sort_unstable();
    kinds.dedup();
    let mut s = format!("{:<14}", "model");
    for set in &sets {
        let _ = write!(s, "{:>10}", set.name());
    }
    s.push('\n');
    for kind in kinds {
        let _ = write!(s, "{:<14}", kind.name());
        for set in &sets {
            match grid.get(&(kind, *set)) {
                Some(r) => {
                    let _ = write!(s, "{:>10.1}", 100.0 * r.mean_accuracy);
                }
                None => {
                    let _ = write!(s, "{:>10}", "-");
                }
            }
        }
        s.push('\n');
    }
    s
}

pub fn write_grid(dir: &Path, grid: &AccuracyGrid) -> Result<()> {
    let csv = dir.join("eval.csv");
    fs::write(&csv, grid_csv(grid)).map_err(|e| Error::io(&csv, e))?;
    let txt = dir.join("eval.txt");
    fs::write(&txt, grid_table(grid)).map_err(|e| Error::io(&txt, e))
}
