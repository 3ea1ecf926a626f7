//! Classifiers over the spatio-temporal (`u`) and visual (`v`) features.
//!
//! * [`ModelKind::Fcn`]: three static layers over one concatenated input.
//! * [`ModelKind::FeatureDfnn`]: the middle weight matrix of a classifier
//!   over the first slot is generated by a PPNet fed the second slot.
//! * [`ModelKind::ModelDfnn`] / [`ModelKind::Cnne`]: two classifiers whose
//!   per-class mixing weights come from PPNets (`ModelDfnn`) or plain
//!   two-layer heads (`Cnne`) fed each classifier's input plus its output.
//!
//! A PPNet maps a control vector `x` to the matrix
//! `P * diag(relu(W_z x)) * Q`; it is never materialized during training,
//! the batched form `((relu(X W_z^T) .* (H Q^T)) P^T` is used instead.
//!
//! Every model reads rows of one raw feature matrix and selects its slot
//! columns itself, so attributions are computed in raw feature space.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::seed;

pub const N_CLASSES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Fcn,
    FeatureDfnn,
    ModelDfnn,
    Cnne,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::Fcn,
        ModelKind::FeatureDfnn,
        ModelKind::ModelDfnn,
        ModelKind::Cnne,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Fcn => "fcn",
            ModelKind::FeatureDfnn => "feature-dfnn",
            ModelKind::ModelDfnn => "model-dfnn",
            ModelKind::Cnne => "cnne",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        ModelKind::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Whether the model takes two input slots.
    pub fn is_fusion(self) -> bool {
        self != ModelKind::Fcn
    }

    /// Ensembles train on the sum of three cross-entropies.
    pub fn is_ensemble(self) -> bool {
        matches!(self, ModelKind::ModelDfnn | ModelKind::Cnne)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    /// Hidden width of every classifier layer and the square dynamic block.
    pub hidden: usize,
    /// PPNet inner width for Feature-DFNN.
    pub dz: usize,
    /// PPNet inner widths of the two Model-DFNN weighting heads.
    pub dz_u: usize,
    pub dz_v: usize,
    /// Hidden width of the CNNE weighting heads.
    pub cnne_hidden: usize,
    pub n_classes: usize,
    pub bias: bool,
    /// Renormalize the ensemble output to sum to one.
    pub renormalize: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            hidden: 64,
            dz: 64,
            dz_u: 32,
            dz_v: 64,
            cnne_hidden: 64,
            n_classes: N_CLASSES,
            bias: false,
            renormalize: true,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("hidden", self.hidden),
            ("dz", self.dz),
            ("dz_u", self.dz_u),
            ("dz_v", self.dz_v),
            ("cnne_hidden", self.cnne_hidden),
            ("n_classes", self.n_classes),
        ];
        for (key, v) in dims {
            if v == 0 {
                return Err(Error::Config {
                    key: format!("model.arch.{key}"),
                    message: "must be positive".into(),
                });
            }
        }
        Ok(())
    }
}

/// Plain-tensor PPNet: `W(x) = P * diag(relu(W_z x)) * Q`.
#[derive(Debug, Clone, PartialEq)]
pub struct PpnetParams {
    /// `D_z x D_in`
    pub w_z: Tensor,
    /// `d_out x D_z`
    pub p: Tensor,
    /// `D_z x d_in`
    pub q: Tensor,
}

impl PpnetParams {
    pub fn new(w_z: Tensor, p: Tensor, q: Tensor) -> Result<Self> {
        if p.cols != w_z.rows || q.rows != w_z.rows {
            return Err(Error::Shape {
                node: 0,
                op: "ppnet",
                detail: format!(
                    "W_z {:?}, P {:?}, Q {:?}",
                    w_z.shape(),
                    p.shape(),
                    q.shape()
                ),
            });
        }
        Ok(PpnetParams { w_z, p, q })
    }

    pub fn param_count(&self) -> usize {
        self.w_z.len() + self.p.len() + self.q.len()
    }

    fn gate(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.w_z.cols {
            return Err(Error::DimensionMismatch {
                context: "ppnet control input".into(),
                expected: self.w_z.cols,
                got: x.len(),
            });
        }
        let z = autodiff::matmul_bt(&Tensor::row_vector(x), &self.w_z);
        Ok(z.data.into_iter().map(|v| v.max(0.0)).collect())
    }

    /// The generated `d_out x d_in` matrix: `P` times `Q` with its rows
    /// scaled by the gate.
    pub fn matrix(&self, x: &[f64]) -> Result<Tensor> {
        let z = self.gate(x)?;
        let mut scaled = self.q.clone();
        for (k, zk) in z.iter().enumerate() {
            scaled.data[k * scaled.cols..(k + 1) * scaled.cols]
                .iter_mut()
                .for_each(|v| *v *= zk);
        }
        Ok(autodiff::matmul(&self.p, &scaled))
    }

    /// The generated matrix applied to its own input, `W(x) x`, before any
    /// softmax.
    pub fn vector(&self, x: &[f64]) -> Result<Vec<f64>> {
        if self.q.cols != x.len() {
            return Err(Error::DimensionMismatch {
                context: "ppnet input".into(),
                expected: self.q.cols,
                got: x.len(),
            });
        }
        let z = self.gate(x)?;
        let qx = autodiff::matmul_bt(&Tensor::row_vector(x), &self.q);
        let m: Vec<f64> = z.iter().zip(&qx.data).map(|(a, b)| a * b).collect();
        Ok(autodiff::matmul_bt(&Tensor::row_vector(&m), &self.p).data)
    }
}

/// Learnable scalars of a PPNet with control width `d_ctrl` emitting a
/// `d_out x d_in` matrix through an inner width `dz`.
pub fn ppnet_param_count(d_ctrl: usize, dz: usize, d_out: usize, d_in: usize) -> usize {
    dz * d_ctrl + d_out * dz + dz * d_in
}

/// A dense hypernetwork emitting every entry of a `d_out x d_in` matrix
/// linearly from `d_ctrl` inputs.
pub fn hypernetwork_param_count(d_ctrl: usize, d_out: usize, d_in: usize) -> usize {
    d_ctrl * d_out * d_in
}

/// Learnable scalars of a model of `kind` with slot widths `d_a`, `d_b`
/// (`d_b` is ignored for FCN).
pub fn param_count(kind: ModelKind, arch: &ArchConfig, d_a: usize, d_b: usize) -> usize {
    let (h, c) = (arch.hidden, arch.n_classes);
    let bias = |n: usize| if arch.bias { n } else { 0 };
    match kind {
        ModelKind::Fcn => h * d_a + h * h + c * h + bias(h + h + c),
        ModelKind::FeatureDfnn => {
            h * d_a + ppnet_param_count(d_b, arch.dz, h, h) + c * h + bias(h + c)
        }
        ModelKind::ModelDfnn | ModelKind::Cnne => {
            let heads = h * d_a + c * h + h * d_b + c * h + bias(2 * (h + c));
            let weighting = if kind == ModelKind::ModelDfnn {
                ppnet_param_count(d_a + c, arch.dz_u, c, d_a + c)
                    + ppnet_param_count(d_b + c, arch.dz_v, c, d_b + c)
            } else {
                let hw = arch.cnne_hidden;
                hw * (d_a + c) + c * hw + hw * (d_b + c) + c * hw + bias(2 * (hw + c))
            };
            heads + weighting
        }
    }
}

/// Column selection plus a fixed per-column transform, applied inside the
/// graph so gradients reach the raw features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSlot {
    pub cols: Vec<usize>,
    pub log1p: Vec<bool>,
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

impl InputSlot {
    pub fn identity(cols: Vec<usize>) -> Self {
        let n = cols.len();
        InputSlot {
            cols,
            log1p: vec![false; n],
            scale: vec![1.0; n],
            shift: vec![0.0; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.cols.len()
    }

    /// Fits `log1p` (for columns that are non-negative on `rows`) followed
    /// by standardization to zero mean and unit variance. Constant columns
    /// are only centered.
    pub fn fit(&mut self, x: &Tensor, rows: &[usize]) {
        if rows.is_empty() {
            return;
        }
        let n = rows.len() as f64;
        for (j, &c) in self.cols.iter().enumerate() {
            let col = || rows.iter().map(|&r| x.at(r, c));
            let log = col().all(|v| v >= 0.0);
            let f = |v: f64| if log { v.ln_1p() } else { v };
            let mean = col().map(f).sum::<f64>() / n;
            let var = col().map(|v| (f(v) - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            let scale = if sd > 1e-12 { 1.0 / sd } else { 1.0 };
            self.log1p[j] = log;
            self.scale[j] = scale;
            self.shift[j] = -mean * scale;
        }
    }

    fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.select_cols(x, &self.cols)?;
        g.col_transform(s, &self.log1p, &self.scale, &self.shift)
    }
}

/// Graph nodes produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// Final class probabilities, one row per sample.
    pub probs: Var,
    /// Pre-softmax scores, for single-network models.
    pub logits: Option<Var>,
    /// Per-classifier probabilities of an ensemble.
    pub heads: Option<(Var, Var)>,
    /// Per-class mixing weights of an ensemble.
    pub weights: Option<(Var, Var)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub kind: ModelKind,
    pub arch: ArchConfig,
    /// Width of the raw feature rows the model reads.
    pub n_inputs: usize,
    pub slot_a: InputSlot,
    pub slot_b: Option<InputSlot>,
    pub params: ParamStore,
}

impl Model {
    /// Builds a model with Glorot-initialized weights and identity input
    /// transforms. FCN takes only `a_cols`; the other kinds need `b_cols`
    /// (pass the same columns for a single-modality variant).
    pub fn new(
        kind: ModelKind,
        arch: ArchConfig,
        n_inputs: usize,
        a_cols: Vec<usize>,
        b_cols: Option<Vec<usize>>,
        seed: u64,
    ) -> Result<Self> {
        arch.validate()?;
        if a_cols.is_empty() {
            return Err(Error::InvalidArgument("model needs at least one input column".into()));
        }
        for &c in a_cols.iter().chain(b_cols.iter().flatten()) {
            if c >= n_inputs {
                return Err(Error::DimensionMismatch {
                    context: "model input column".into(),
                    expected: n_inputs,
                    got: c,
                });
            }
        }
        let b_cols = match (kind.is_fusion(), b_cols) {
            (false, None) => None,
            (false, Some(_)) => {
                return Err(Error::InvalidArgument("fcn takes a single input slot".into()))
            }
            (true, Some(b)) if !b.is_empty() => Some(b),
            (true, _) => {
                return Err(Error::InvalidArgument(format!(
                    "{} needs a second input slot",
                    kind.name()
                )))
            }
        };
        let (da, db) = (a_cols.len(), b_cols.as_ref().map_or(0, Vec::len));
        let (h, c) = (arch.hidden, arch.n_classes);
        let mut rng = seed::rng(seed, &[seed::tag("init")]);
        let mut params = ParamStore::default();
        let mut dense = |params: &mut ParamStore, name: &str, out: usize, inp: usize| {
            params.push(format!("{name}.w"), Tensor::glorot(out, inp, &mut rng));
            if arch.bias {
                params.push(format!("{name}.b"), Tensor::zeros(1, out));
            }
        };
        let ppnet = |params: &mut ParamStore,
                     rng: &mut rand_chacha::ChaCha8Rng,
                     name: &str,
                     d_ctrl: usize,
                     dz: usize,
                     d_out: usize,
                     d_in: usize| {
            params.push(format!("{name}.wz"), Tensor::glorot(dz, d_ctrl, rng));
            params.push(format!("{name}.p"), Tensor::glorot(d_out, dz, rng));
            params.push(format!("{name}.q"), Tensor::glorot(dz, d_in, rng));
        };
        match kind {
            ModelKind::Fcn => {
                dense(&mut params, "l1", h, da);
                dense(&mut params, "ls", h, h);
                dense(&mut params, "l2", c, h);
            }
            ModelKind::FeatureDfnn => {
                dense(&mut params, "l1", h, da);
                dense(&mut params, "l2", c, h);
                let mut r = seed::rng(seed, &[seed::tag("init-ppnet")]);
                ppnet(&mut params, &mut r, "pp", db, arch.dz, h, h);
            }
            ModelKind::ModelDfnn | ModelKind::Cnne => {
                dense(&mut params, "u.l1", h, da);
                dense(&mut params, "u.l2", c, h);
                dense(&mut params, "v.l1", h, db);
                dense(&mut params, "v.l2", c, h);
                if kind == ModelKind::Cnne {
                    let hw = arch.cnne_hidden;
                    dense(&mut params, "wu.l1", hw, da + c);
                    dense(&mut params, "wu.l2", c, hw);
                    dense(&mut params, "wv.l1", hw, db + c);
                    dense(&mut params, "wv.l2", c, hw);
                } else {
                    let mut r = seed::rng(seed, &[seed::tag("init-ppnet")]);
                    ppnet(&mut params, &mut r, "ppu", da + c, arch.dz_u, c, da + c);
                    ppnet(&mut params, &mut r, "ppv", db + c, arch.dz_v, c, db + c);
                }
            }
        }
        let model = Model {
            kind,
            slot_a: InputSlot::identity(a_cols),
            slot_b: b_cols.map(InputSlot::identity),
            arch,
            n_inputs,
            params,
        };
        debug_assert_eq!(
            model.params.scalar_count(),
            param_count(kind, &model.arch, da, db)
        );
        Ok(model)
    }

    /// Fits the input transforms on the given training rows.
    pub fn fit_normalization(&mut self, x: &Tensor, rows: &[usize]) {
        self.slot_a.fit(x, rows);
        if let Some(b) = &mut self.slot_b {
            b.fit(x, rows);
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// PPNet parameters stored under `prefix` (`pp`, `ppu` or `ppv`).
    pub fn ppnet(&self, prefix: &str) -> Option<PpnetParams> {
        let get = |s: &str| self.params.get(&format!("{prefix}.{s}")).cloned();
        Some(PpnetParams {
            w_z: get("wz")?,
            p: get("p")?,
            q: get("q")?,
        })
    }

    fn dense(&self, g: &mut Graph, h: Var, name: &str) -> Result<Var> {
        let w = g.param_by_name(&self.params, &format!("{name}.w"))?;
        let out = g.matmul_bt(h, w)?;
        if self.arch.bias {
            let b = g.param_by_name(&self.params, &format!("{name}.b"))?;
            g.add_row(out, b)
        } else {
            Ok(out)
        }
    }

    /// Batched `W(ctrl_r) h_r` for every row `r`.
    fn ppnet_apply(&self, g: &mut Graph, prefix: &str, ctrl: Var, h: Var) -> Result<Var> {
        let wz = g.param_by_name(&self.params, &format!("{prefix}.wz"))?;
        let p = g.param_by_name(&self.params, &format!("{prefix}.p"))?;
        let q = g.param_by_name(&self.params, &format!("{prefix}.q"))?;
        let z = g.matmul_bt(ctrl, wz)?;
        let z = g.relu(z)?;
        let qh = g.matmul_bt(h, q)?;
        let m = g.mul(z, qh)?;
        g.matmul_bt(m, p)
    }

    /// Two-layer classifier head returning (input, logits).
    fn head(&self, g: &mut Graph, x: Var, name: &str, dropout: f64) -> Result<Var> {
        let h = self.dense(g, x, &format!("{name}.l1"))?;
        let h = g.relu(h)?;
        let h = g.dropout(h, dropout)?;
        self.dense(g, h, &format!("{name}.l2"))
    }

    /// Forward pass over raw rows `x`; `dropout` only acts on a training
    /// graph.
    pub fn forward(&self, g: &mut Graph, x: Var, dropout: f64) -> Result<Forward> {
        let (rows, cols) = g.value(x).shape();
        if cols != self.n_inputs {
            return Err(Error::DimensionMismatch {
                context: format!("{} input ({rows} rows)", self.kind.name()),
                expected: self.n_inputs,
                got: cols,
            });
        }
        let a = self.slot_a.apply(g, x)?;
        match self.kind {
            ModelKind::Fcn => {
                let h = self.dense(g, a, "l1")?;
                let h = g.relu(h)?;
                let h = g.dropout(h, dropout)?;
                let h = self.dense(g, h, "ls")?;
                let h = g.relu(h)?;
                let h = g.dropout(h, dropout)?;
                let logits = self.dense(g, h, "l2")?;
                let probs = g.softmax(logits)?;
                Ok(Forward {
                    probs,
                    logits: Some(logits),
                    heads: None,
                    weights: None,
                })
            }
            ModelKind::FeatureDfnn => {
                let b = self.slot_b.as_ref().expect("fusion slot").apply(g, x)?;
                let h = self.dense(g, a, "l1")?;
                let h = g.relu(h)?;
                let h = g.dropout(h, dropout)?;
                let h = self.ppnet_apply(g, "pp", b, h)?;
                let h = g.relu(h)?;
                let h = g.dropout(h, dropout)?;
                let logits = self.dense(g, h, "l2")?;
                let probs = g.softmax(logits)?;
                Ok(Forward {
                    probs,
                    logits: Some(logits),
                    heads: None,
                    weights: None,
                })
            }
            ModelKind::ModelDfnn | ModelKind::Cnne => {
                let b = self.slot_b.as_ref().expect("fusion slot").apply(g, x)?;
                let lu = self.head(g, a, "u", dropout)?;
                let yu = g.softmax(lu)?;
                let lv = self.head(g, b, "v", dropout)?;
                let yv = g.softmax(lv)?;
                let au = g.concat(a, yu)?;
                let av = g.concat(b, yv)?;
                let (su, sv) = if self.kind == ModelKind::Cnne {
                    (self.weighting_head(g, au, "wu")?, self.weighting_head(g, av, "wv")?)
                } else {
                    (
                        self.ppnet_apply(g, "ppu", au, au)?,
                        self.ppnet_apply(g, "ppv", av, av)?,
                    )
                };
                let wu = g.softmax(su)?;
                let wv = g.softmax(sv)?;
                let mu = g.mul(wu, yu)?;
                let mv = g.mul(wv, yv)?;
                let mut yo = g.add(mu, mv)?;
                if self.arch.renormalize {
                    yo = g.row_normalize(yo)?;
                }
                Ok(Forward {
                    probs: yo,
                    logits: None,
                    heads: Some((yu, yv)),
                    weights: Some((wu, wv)),
                })
            }
        }
    }

    fn weighting_head(&self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let h = self.dense(g, x, &format!("{name}.l1"))?;
        let h = g.relu(h)?;
        self.dense(g, h, &format!("{name}.l2"))
    }

    /// Training loss: mean cross-entropy of the output, plus those of both
    /// classifiers for ensembles.
    pub fn loss(&self, g: &mut Graph, f: &Forward, targets: &[usize]) -> Result<Var> {
        let lo = g.cross_entropy(f.probs, targets)?;
        match f.heads {
            Some((yu, yv)) => {
                let lu = g.cross_entropy(yu, targets)?;
                let lv = g.cross_entropy(yv, targets)?;
                let s = g.add(lv, lu)?;
                g.add(s, lo)
            }
            None => Ok(lo),
        }
    }

    /// Sum over rows of the attribution score for class `targets[r]`: the
    /// pre-softmax logit for single networks, the log of the combined
    /// probability for ensembles (which have no single logit layer).
    pub fn score(&self, g: &mut Graph, x: Var, targets: &[usize]) -> Result<Var> {
        if g.is_training() {
            return Err(Error::TrainingMode);
        }
        let f = self.forward(g, x, 0.0)?;
        let s = match f.logits {
            Some(l) => l,
            None => g.log(f.probs)?,
        };
        g.pick_sum(s, targets)
    }

    /// Class probabilities for each row of `x`.
    pub fn predict_proba(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(false, 0);
        let xi = g.input(x.clone())?;
        let f = self.forward(&mut g, xi, 0.0)?;
        Ok(g.value(f.probs).clone())
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let p = self.predict_proba(x)?;
        Ok((0..p.rows).map(|r| argmax(p.row(r))).collect())
    }

    fn manifest(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": self.kind,
            "arch": self.arch,
            "n_inputs": self.n_inputs,
            "slot_a": self.slot_a,
            "slot_b": self.slot_b,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        autodiff::save_checkpoint(path, &self.manifest(), &self.params)
    }

    /// Checkpoint with extra manifest entries (e.g. training hyperparameters).
    pub fn save_with(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let mut m = self.manifest();
        if let (Some(obj), serde_json::Value::Object(more)) = (m.as_object_mut(), extra) {
            obj.extend(more);
        }
        autodiff::save_checkpoint(path, &m, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (m, params) = autodiff::load_checkpoint(path)?;
        let field = |k: &str| {
            m.get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("{}: manifest lacks `{k}`", path.display())))
        };
        let bad = |e: serde_json::Error| Error::Checkpoint(format!("{}: {e}", path.display()));
        let model = Model {
            kind: serde_json::from_value(field("kind")?).map_err(bad)?,
            arch: serde_json::from_value(field("arch")?).map_err(bad)?,
            n_inputs: serde_json::from_value(field("n_inputs")?).map_err(bad)?,
            slot_a: serde_json::from_value(field("slot_a")?).map_err(bad)?,
            slot_b: serde_json::from_value(field("slot_b")?).map_err(bad)?,
            params,
        };
        let db = model.slot_b.as_ref().map_or(0, InputSlot::dim);
        let expect = param_count(model.kind, &model.arch, model.slot_a.dim(), db);
        if model.params.scalar_count() != expect {
            return Err(Error::Checkpoint(format!(
                "{}: {} parameters, architecture needs {expect}",
                path.display(),
                model.params.scalar_count()
            )));
        }
        Ok(model)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference, gradient_mismatch};

    fn small_arch() -> ArchConfig {
        ArchConfig {
            hidden: 4,
            dz: 4,
            dz_u: 4,
            dz_v: 4,
            cnne_hidden: 4,
            ..ArchConfig::default()
        }
    }

    fn build(kind: ModelKind, arch: ArchConfig, seed: u64) -> Model {
        let b = kind.is_fusion().then(|| (7..12).collect());
        let a = if kind.is_fusion() { (0..7).collect() } else { (0..12).collect() };
        Model::new(kind, arch, 12, a, b, seed).unwrap()
    }

    fn random_input(rows: usize, seed: u64) -> Tensor {
        let mut rng = seed::rng(seed, &[99]);
        Tensor::glorot(rows, 12, &mut rng)
    }

    #[test]
    fn ppnet_matrix_examples() {
        let i2 = Tensor::identity(2);
        let pp = PpnetParams::new(i2.clone(), i2.clone(), i2).unwrap();
        assert_eq!(pp.matrix(&[1.0, -1.0]).unwrap().data, vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(pp.matrix(&[0.0, 0.0]).unwrap().data, vec![0.0; 4]);
        assert!(pp.matrix(&[1.0]).is_err());
    }

    #[test]
    fn ppnet_vector_with_dead_gate_is_zero() {
        let mut rng = seed::rng(3, &[]);
        let w_z = Tensor::new(2, 3, vec![-1.0; 6]);
        let pp = PpnetParams::new(w_z, Tensor::glorot(3, 2, &mut rng), Tensor::glorot(2, 3, &mut rng))
            .unwrap();
        assert_eq!(pp.vector(&[1.0, 2.0, 3.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn ppnet_vector_identity_reduction() {
        // P and Q are identity slices, so v = relu(x) .* x truncated.
        let d = 5;
        let c = 3;
        let eye = |r: usize, k: usize| {
            Tensor::new(r, k, (0..r * k).map(|i| f64::from(i / k == i % k)).collect())
        };
        let pp = PpnetParams::new(Tensor::identity(d), eye(c, d), Tensor::identity(d)).unwrap();
        let x = [0.5, -2.0, 3.0, 1.0, -1.0];
        let v = pp.vector(&x).unwrap();
        assert_eq!(v, vec![0.25, 0.0, 9.0]);
    }

    #[test]
    fn param_counts() {
        assert_eq!(ppnet_param_count(53, 64, 64, 64), 64 * 53 + 64 * 64 + 64 * 64);
        assert_eq!(ppnet_param_count(53, 64, 64, 64), 11_584);
        assert_eq!(hypernetwork_param_count(53, 64, 64), 217_088);
        assert_eq!(ppnet_param_count(10, 7, 1, 1), 7 * 10 + 2 * 7);
        for kind in ModelKind::ALL {
            for bias in [false, true] {
                let arch = ArchConfig { bias, ..small_arch() };
                let m = build(kind, arch.clone(), 1);
                let db = if kind.is_fusion() { 5 } else { 0 };
                let da = if kind.is_fusion() { 7 } else { 12 };
                assert_eq!(m.param_count(), param_count(kind, &arch, da, db), "{kind:?}");
            }
        }
        let arch = ArchConfig::default();
        let fd = Model::new(ModelKind::FeatureDfnn, arch, 124, (0..71).collect(), Some((71..124).collect()), 0)
            .unwrap();
        assert_eq!(fd.ppnet("pp").unwrap().param_count(), 11_584);
    }

    #[test]
    fn feature_dfnn_identity_example() {
        let arch = ArchConfig {
            hidden: 2,
            dz: 2,
            n_classes: 2,
            ..ArchConfig::default()
        };
        let mut m = Model::new(ModelKind::FeatureDfnn, arch, 4, vec![0, 1], Some(vec![2, 3]), 0).unwrap();
        for name in ["l1.w", "l2.w", "pp.wz", "pp.p", "pp.q"] {
            *m.params.get_mut(name).unwrap() = Tensor::identity(2);
        }
        // Control input (1, 1) gates both channels open with unit weight.
        let p = m.predict_proba(&Tensor::row_vector(&[1.0, 0.0, 1.0, 1.0])).unwrap();
        let e = std::f64::consts::E;
        assert!((p.data[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((p.data[0] - 0.73106).abs() < 1e-5);
        // Zero control input zeroes the dynamic block.
        let p = m.predict_proba(&Tensor::row_vector(&[1.0, 0.0, 0.0, 0.0])).unwrap();
        assert_eq!(p.data, vec![0.5, 0.5]);
    }

    #[test]
    fn feature_dfnn_zero_visual_input_gives_uniform() {
        let m = build(ModelKind::FeatureDfnn, small_arch(), 4);
        let mut x = random_input(3, 1);
        for r in 0..3 {
            for c in 7..12 {
                x.data[r * 12 + c] = 0.0;
            }
        }
        let p = m.predict_proba(&x).unwrap();
        assert!(p.data.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn fcn_zero_input_gives_uniform() {
        let m = build(ModelKind::Fcn, small_arch(), 4);
        let p = m.predict_proba(&Tensor::zeros(2, 12)).unwrap();
        assert!(p.data.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn fcn_equals_feature_dfnn_with_static_middle_layer() {
        // A PPNet with P = I, Q = W_s and a gate of ones reproduces W_s.
        let arch = ArchConfig {
            hidden: 3,
            dz: 3,
            ..ArchConfig::default()
        };
        let fcn = Model::new(ModelKind::Fcn, arch.clone(), 5, vec![0, 1, 2, 3], None, 7).unwrap();
        let mut fd = Model::new(ModelKind::FeatureDfnn, arch, 5, vec![0, 1, 2, 3], Some(vec![4]), 7).unwrap();
        *fd.params.get_mut("l1.w").unwrap() = fcn.params.get("l1.w").unwrap().clone();
        *fd.params.get_mut("l2.w").unwrap() = fcn.params.get("l2.w").unwrap().clone();
        *fd.params.get_mut("pp.wz").unwrap() = Tensor::new(3, 1, vec![1.0; 3]);
        *fd.params.get_mut("pp.p").unwrap() = Tensor::identity(3);
        *fd.params.get_mut("pp.q").unwrap() = fcn.params.get("ls.w").unwrap().clone();
        let mut x = random_input(4, 2);
        x = Tensor::new(4, 5, x.data[..20].to_vec());
        for r in 0..4 {
            x.data[r * 5 + 4] = 1.0;
        }
        let a = fcn.predict_proba(&x).unwrap();
        let b = fd.predict_proba(&x).unwrap();
        for (p, q) in a.data.iter().zip(&b.data) {
            assert!((p - q).abs() < 1e-14);
        }
    }

    #[test]
    fn ensemble_with_zero_weighting_heads_averages() {
        for kind in [ModelKind::ModelDfnn, ModelKind::Cnne] {
            let mut m = build(kind, small_arch(), 5);
            let zero = if kind == ModelKind::Cnne { ["wu.l2.w", "wv.l2.w"] } else { ["ppu.p", "ppv.p"] };
            for name in zero {
                let t = m.params.get_mut(name).unwrap();
                t.data.iter_mut().for_each(|v| *v = 0.0);
            }
            let x = random_input(3, 9);
            let mut g = Graph::new(false, 0);
            let xi = g.input(x).unwrap();
            let f = m.forward(&mut g, xi, 0.0).unwrap();
            let (yu, yv) = f.heads.unwrap();
            let (pu, pv, po) = (g.value(yu), g.value(yv), g.value(f.probs));
            for i in 0..po.len() {
                assert!((po.data[i] - (pu.data[i] + pv.data[i]) / 2.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn unnormalized_ensemble_matches_formula() {
        // The two weight vectors are separate softmaxes, so an entry can
        // exceed both head probabilities; it is bounded by (w_u + w_v) * max.
        for kind in [ModelKind::ModelDfnn, ModelKind::Cnne] {
            for s in 0..20 {
                let arch = ArchConfig {
                    renormalize: false,
                    ..small_arch()
                };
                let m = build(kind, arch, s);
                let mut g = Graph::new(false, 0);
                let xi = g.input(random_input(4, s)).unwrap();
                let f = m.forward(&mut g, xi, 0.0).unwrap();
                let (yu, yv) = f.heads.unwrap();
                let (wu, wv) = f.weights.unwrap();
                let (pu, pv, po) = (g.value(yu), g.value(yv), g.value(f.probs));
                let (qu, qv) = (g.value(wu), g.value(wv));
                for i in 0..po.len() {
                    let o = po.data[i];
                    let oracle = qu.data[i] * pu.data[i] + qv.data[i] * pv.data[i];
                    assert!((o - oracle).abs() < 1e-15);
                    assert!(o >= 0.0);
                    let bound = (qu.data[i] + qv.data[i]) * pu.data[i].max(pv.data[i]);
                    assert!(o <= bound + 1e-15);
                }
                for r in 0..po.rows {
                    assert!(po.row(r).iter().sum::<f64>() <= 2.0);
                }
            }
        }
    }

    #[test]
    fn outputs_are_probability_vectors() {
        for kind in ModelKind::ALL {
            let m = build(kind, small_arch(), 11);
            let p = m.predict_proba(&random_input(200, 5)).unwrap();
            for r in 0..p.rows {
                let s: f64 = p.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
                assert!(p.row(r).iter().all(|&v| v > 0.0));
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for kind in ModelKind::ALL {
            for s in 0..5 {
                let mut m = build(kind, small_arch(), s);
                let x = random_input(6, s + 100);
                let mut fitted = m.clone();
                fitted.fit_normalization(&x, &[0, 1, 2, 3, 4, 5]);
                m.slot_a = fitted.slot_a;
                m.slot_b = fitted.slot_b;
                let y = [0, 1, 2, 2, 1, 0];
                let loss_of = |params: &ParamStore| {
                    let mm = Model {
                        params: params.clone(),
                        ..m.clone()
                    };
                    let mut g = Graph::new(true, 5);
                    let xi = g.input(x.clone()).unwrap();
                    let f = mm.forward(&mut g, xi, 0.4).unwrap();
                    let l = mm.loss(&mut g, &f, &y).unwrap();
                    (g, l)
                };
                let (g, l) = loss_of(&m.params);
                let analytic = g.param_grads(&g.backward(l).unwrap(), &m.params);
                let numeric = finite_difference(&m.params, 1e-5, |p| {
                    let (g, l) = loss_of(p);
                    g.value(l).item()
                });
                let worst = gradient_mismatch(&analytic, &numeric, 1e-4, 1e-7);
                assert!(worst <= 1.0, "{kind:?} seed {s}: {worst}");
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = build(ModelKind::ModelDfnn, small_arch(), 3);
        let x = random_input(10, 3);
        m.fit_normalization(&x, &(0..10).collect::<Vec<_>>());
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("m.ckpt");
        m.save(&p).unwrap();
        let back = Model::load(&p).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.predict_proba(&x).unwrap(), m.predict_proba(&x).unwrap());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0 / 3.0; 3]), 0);
        assert_eq!(argmax(&[0.1, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[0.1, 0.2, 0.7]), 2);
    }

    #[test]
    fn constructor_rejects_bad_slots() {
        let a = ArchConfig::default();
        assert!(Model::new(ModelKind::Fcn, a.clone(), 4, vec![0], Some(vec![1]), 0).is_err());
        assert!(Model::new(ModelKind::FeatureDfnn, a.clone(), 4, vec![0], None, 0).is_err());
        assert!(Model::new(ModelKind::Fcn, a, 4, vec![4], None, 0).is_err());
    }
}
