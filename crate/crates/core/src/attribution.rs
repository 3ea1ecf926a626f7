//! Integrated-gradients attribution over input feature dimensions.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::models::{argmax, Model};
use crate::st_features::{D_CON, D_TRA, D_WID, HOURS};
use crate::visual::D_FRA;

/// A differentiable scalar score per row and class.
pub trait Scorer {
    fn n_inputs(&self) -> usize;
    /// Sum over rows of the score of class `targets[r]`. Must reject a
    /// training-mode graph.
    fn score(&self, g: &mut Graph, x: Var, targets: &[usize]) -> Result<Var>;
    fn predict_class(&self, x: &[f64]) -> Result<usize>;
}

impl Scorer for Model {
    fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    fn score(&self, g: &mut Graph, x: Var, targets: &[usize]) -> Result<Var> {
        Model::score(self, g, x, targets)
    }

    fn predict_class(&self, x: &[f64]) -> Result<usize> {
        let p = self.predict_proba(&Tensor::row_vector(x))?;
        Ok(argmax(&p.data))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributionConfig {
    /// Riemann steps.
    pub steps: usize,
    /// Defaults to all zeros.
    pub baseline: Option<Vec<f64>>,
    /// Defaults to the predicted class.
    pub target: Option<usize>,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        AttributionConfig {
            steps: 50,
            baseline: None,
            target: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributionResult {
    pub attributions: Vec<f64>,
    pub target: usize,
    pub score: f64,
    pub baseline_score: f64,
    /// `|sum(attributions) - (score - baseline_score)|`
    pub gap: f64,
}

fn score_rows(model: &impl Scorer, rows: Tensor, target: usize) -> Result<(Graph, Var, Var)> {
    let mut g = Graph::new(false, 0);
    let xi = g.input(rows)?;
    let n = g.value(xi).rows;
    let s = model.score(&mut g, xi, &vec![target; n])?;
    Ok((g, xi, s))
}

/// Right-Riemann integrated gradients of the model score from the baseline
/// to `x`; all interpolation points are evaluated as one batch.
pub fn integrated_gradients(model: &impl Scorer, x: &[f64], cfg: &AttributionConfig) -> Result<AttributionResult> {
    if cfg.steps == 0 {
        return Err(Error::InvalidArgument("integrated gradients need at least one step".into()));
    }
    let d = model.n_inputs();
    if x.len() != d {
        return Err(Error::DimensionMismatch {
            context: "attribution input".into(),
            expected: d,
            got: x.len(),
        });
    }
    let zeros = vec![0.0; d];
    let base = cfg.baseline.as_deref().unwrap_or(&zeros);
    if base.len() != d || base.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("baseline must be finite and input-shaped".into()));
    }
    let target = match cfg.target {
        Some(t) => t,
        None => model.predict_class(x)?,
    };
    let m = cfg.steps;
    let mut path = Vec::with_capacity(m * d);
    for k in 1..=m {
        let a = k as f64 / m as f64;
        path.extend(base.iter().zip(x).map(|(b, v)| b + a * (v - b)));
    }
    let (g, xi, s) = score_rows(model, Tensor::new(m, d, path), target)?;
    let grads = g.backward(s)?;
    let mut attributions = vec![0.0; d];
    if let Some(gx) = grads.get(xi) {
        for r in 0..m {
            for (a, gv) in attributions.iter_mut().zip(gx.row(r)) {
                *a += gv;
            }
        }
    }
    for ((a, v), b) in attributions.iter_mut().zip(x).zip(base) {
        *a *= (v - b) / m as f64;
    }
    let (gb, _, sb) = score_rows(model, Tensor::row_vector(base), target)?;
    let baseline_score = gb.value(sb).item();
    let (gx, _, sx) = score_rows(model, Tensor::row_vector(x), target)?;
    let score = gx.value(sx).item();
    let total: f64 = attributions.iter().sum();
    Ok(AttributionResult {
        gap: (total - (score - baseline_score)).abs(),
        attributions,
        target,
        score,
        baseline_score,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureName {
    pub block: String,
    pub name: String,
}

fn names(block: &str, n: usize, f: impl Fn(usize) -> String) -> Vec<FeatureName> {
    (0..n)
        .map(|i| FeatureName {
            block: block.into(),
            name: f(i),
        })
        .collect()
}

/// Names for the `[X_u, X_v]` row layout.
pub fn feature_names(d_poi: usize, d_cnn: usize) -> Vec<FeatureName> {
    let mut out = names("tra", D_TRA, |i| {
        if i < HOURS {
            format!("in_h{:02}", i + 1)
        } else {
            format!("out_h{:02}", i - HOURS + 1)
        }
    });
    out.extend(names("poi", d_poi, |i| format!("poi_{i:02}")));
    let con = ["high", "med", "low"];
    out.extend(names("con", D_CON, |i| format!("con_{}", con[i])));
    out.extend(names("wid", D_WID, |i| format!("wid_{}", i + 1)));
    out.extend(names("fra", D_FRA, |i| format!("fra_{i}")));
    out.extend(names("cnn", d_cnn, |i| format!("cnn_{i:02}")));
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedDim {
    pub dim_index: usize,
    pub block: String,
    pub name: String,
    pub attribution: f64,
}

/// Dimensions by descending signed attribution; ties by ascending index.
pub fn rank_dimensions(result: &AttributionResult, names: &[FeatureName]) -> Result<Vec<RankedDim>> {
    if names.len() != result.attributions.len() {
        return Err(Error::DimensionMismatch {
            context: "feature names".into(),
            expected: result.attributions.len(),
            got: names.len(),
        });
    }
    let mut out: Vec<RankedDim> = result
        .attributions
        .iter()
        .zip(names)
        .enumerate()
        .map(|(i, (&a, n))| RankedDim {
            dim_index: i,
            block: n.block.clone(),
            name: n.name.clone(),
            attribution: a,
        })
        .collect();
    out.sort_by(|a, b| {
        b.attribution
            .total_cmp(&a.attribution)
            .then(a.dim_index.cmp(&b.dim_index))
    });
    Ok(out)
}

pub fn block_sums(ranked: &[RankedDim]) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    // Sum in dimension order so the result does not depend on ranking.
    let mut by_dim: Vec<&RankedDim> = ranked.iter().collect();
    by_dim.sort_by_key(|r| r.dim_index);
    for r in by_dim {
        *out.entry(r.block.clone()).or_insert(0.0) += r.attribution;
    }
    out
}

pub fn report_csv(ranked: &[RankedDim]) -> String {
    let mut s = String::from("dim_index,block,name,attribution\n");
    for r in ranked {
        let _ = writeln!(s, "{},{},{},{}", r.dim_index, r.block, r.name, r.attribution);
    }
    s
}

pub fn report_table(ranked: &[RankedDim], top: usize) -> String {
    let mut s = format!("{:>5}  {:<6} {:<10} {:>14}\n", "dim", "block", "name", "attribution");
    for r in ranked.iter().take(top) {
        let _ = writeln!(s, "{:>5}  {:<6} {:<10} {:>14.6}", r.dim_index, r.block, r.name, r.attribution);
    }
    s.push_str("\nblock sums\n");
    for (b, v) in block_sums(ranked) {
        let _ = writeln!(s, "  {b:<6} {v:>14.6}");
    }
    s
}

pub fn write_report(path: &Path, ranked: &[RankedDim]) -> Result<()> {
    fs::write(path, report_csv(ranked)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamStore;
    use crate::ingest::{D_CNN, D_POI};
    use crate::models::{ArchConfig, ModelKind};
    use crate::st_features::D_U;
    use crate::visual::D_FRA;

    /// F(x) = w . x for every class.
    struct Linear {
        w: Vec<f64>,
    }

    impl Scorer for Linear {
        fn n_inputs(&self) -> usize {
            self.w.len()
        }
        fn score(&self, g: &mut Graph, x: Var, targets: &[usize]) -> Result<Var> {
            if g.is_training() {
                return Err(Error::TrainingMode);
            }
            let mut p = ParamStore::default();
            p.push("w", Tensor::new(1, self.w.len(), self.w.clone()));
            let w = g.param(&p, 0)?;
            let s = g.matmul_bt(x, w)?;
            g.pick_sum(s, &vec![0; targets.len()])
        }
        fn predict_class(&self, _: &[f64]) -> Result<usize> {
            Ok(0)
        }
    }

    #[test]
    fn linear_closed_form() {
        let lin = Linear {
            w: vec![0.5, -2.0, 3.0],
        };
        let x = [1.0, 2.0, -1.5];
        for steps in [1, 7, 50] {
            let r = integrated_gradients(&lin, &x, &AttributionConfig { steps, ..Default::default() }).unwrap();
            for i in 0..3 {
                assert!((r.attributions[i] - lin.w[i] * x[i]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn input_equal_to_baseline_gives_zero() {
        let m = Model::new(ModelKind::Fcn, ArchConfig::default(), 5, (0..5).collect(), None, 1).unwrap();
        let x = [0.1, 0.2, 0.3, 0.4, 0.5];
        let cfg = AttributionConfig {
            baseline: Some(x.to_vec()),
            ..Default::default()
        };
        let r = integrated_gradients(&m, &x, &cfg).unwrap();
        assert!(r.attributions.iter().all(|&a| a == 0.0));
        assert!(integrated_gradients(&m, &x, &AttributionConfig { steps: 0, ..Default::default() }).is_err());
    }

    #[test]
    fn unused_input_gets_zero() {
        // Column 4 is not read by the model.
        let m = Model::new(ModelKind::Fcn, ArchConfig::default(), 5, (0..4).collect(), None, 1).unwrap();
        let r = integrated_gradients(&m, &[1.0, -1.0, 0.5, 2.0, 9.0], &AttributionConfig::default()).unwrap();
        assert_eq!(r.attributions[4], 0.0);
    }

    #[test]
    fn gap_shrinks_with_steps() {
        let m = Model::new(
            ModelKind::FeatureDfnn,
            ArchConfig::default(),
            6,
            vec![0, 1, 2],
            Some(vec![3, 4, 5]),
            2,
        )
        .unwrap();
        let x = [0.9, -1.2, 0.4, 1.1, 0.3, -0.8];
        let gaps: Vec<f64> = [10, 50, 300]
            .iter()
            .map(|&steps| {
                integrated_gradients(&m, &x, &AttributionConfig { steps, ..Default::default() })
                    .unwrap()
                    .gap
            })
            .collect();
        assert!(gaps[0] >= gaps[1] && gaps[1] >= gaps[2], "{gaps:?}");
    }

    #[test]
    fn ranking_and_blocks() {
        let names = feature_names(D_POI, D_CNN);
        assert_eq!(names.len(), D_U + D_FRA + D_CNN);
        assert_eq!(names[0].name, "in_h01");
        assert_eq!(names[24].name, "out_h01");
        assert_eq!(names[64].name, "con_high");
        let mut attributions = vec![0.0; names.len()];
        attributions[70] = 2.5;
        let r = AttributionResult {
            attributions,
            target: 0,
            score: 0.0,
            baseline_score: 0.0,
            gap: 0.0,
        };
        let ranked = rank_dimensions(&r, &names).unwrap();
        assert_eq!(ranked[0].dim_index, 70);
        assert_eq!(ranked[0].block, "wid");
        // Remaining zeros keep index order.
        assert_eq!(ranked[1].dim_index, 0);
        assert_eq!(ranked[2].dim_index, 1);
        let sums = block_sums(&ranked);
        assert_eq!(sums["wid"], 2.5);
        assert_eq!(sums["tra"], 0.0);
        let csv = report_csv(&ranked);
        assert!(csv.starts_with("dim_index,block,name,attribution\n70,wid,wid_4,2.5\n"));
    }

    #[test]
    fn block_sums_add_up() {
        let names = feature_names(4, 3);
        let n = names.len();
        let r = AttributionResult {
            attributions: (0..n).map(|i| ((i * 37) % 11) as f64 - 5.0).collect(),
            target: 0,
            score: 0.0,
            baseline_score: 0.0,
            gap: 0.0,
        };
        let ranked = rank_dimensions(&r, &names).unwrap();
        let sums = block_sums(&ranked);
        for (block, total) in sums {
            let direct: f64 = names
                .iter()
                .zip(&r.attributions)
                .filter(|(nm, _)| nm.block == block)
                .map(|(_, a)| a)
                .sum();
            assert!((total - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn training_graph_is_rejected() {
        let m = Model::new(ModelKind::Fcn, ArchConfig::default(), 2, vec![0, 1], None, 1).unwrap();
        let mut g = Graph::new(true, 0);
        let x = g.input(Tensor::row_vector(&[1.0, 2.0])).unwrap();
        assert!(matches!(m.score(&mut g, x, &[0]), Err(Error::TrainingMode)));
    }
}
