//! Gradient-boosted decision trees for click prediction.
//!
//! With `context_k = 0` the model sees each item's own features. With
//! `context_k = k > 0` every row is widened with the features of the `k`
//! items above and below it on the page, which makes the model context
//! aware while the learning algorithm stays the same.

mod encode;
mod search;
mod tree;

pub use encode::{TargetEncoder, SMOOTHING};
pub use search::{grid_search, sweep_k, GbdtGrid, GridRow, SweepKRow};
pub use tree::{Node, Tree, LEAF};

use serde::{Deserialize, Serialize};

use crate::clicker::ClickModel;
use crate::data::{expand_context, expand_page, ContextExpandedMatrix, Dataset, FeatureSchema, FeatureSet, SearchPage};
use crate::error::{Error, Result};
use crate::numcore::sigmoid;
use tree::{grow, Presorted, Targets, TreeParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbdtConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub depth: usize,
    /// Sample weights for unclicked and clicked items.
    pub class_weights: [f64; 2],
    pub l2_leaf_reg: f64,
    /// Minimum curvature mass in each child of a split.
    pub min_child_weight: f64,
    /// Neighbour radius of the row expansion.
    pub context_k: usize,
    /// Keep only the trees up to the best validation loss.
    pub use_best_model: bool,
    pub features: FeatureSet,
}

impl Default for GbdtConfig {
    fn default() -> Self {
        Self::gbdt()
    }
}

impl GbdtConfig {
    /// Plain boosted trees: 200 rounds, rate 0.05, depth 5.
    pub fn gbdt() -> Self {
        Self {
            iterations: 200,
            learning_rate: 0.05,
            depth: 5,
            class_weights: [1.0, 11.0],
            l2_leaf_reg: 3.0,
            min_child_weight: 1.0,
            context_k: 0,
            use_best_model: true,
            features: FeatureSet::clicker_default(),
        }
    }

    /// Context-expanded boosted trees: 1000 rounds, rate 0.01, depth 4.
    pub fn gbdt_c(k: usize) -> Self {
        Self { iterations: 1000, learning_rate: 0.01, depth: 4, context_k: k, ..Self::gbdt() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::Config("tree depth must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.class_weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::Config(format!("class weights must be positive, got {:?}", self.class_weights)));
        }
        if self.l2_leaf_reg < 0.0 || self.min_child_weight < 0.0 {
            return Err(Error::Config("regularisation terms must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-round training trace.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GbdtHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_iteration: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GbdtModel {
    pub format: String,
    pub config: GbdtConfig,
    pub schema: FeatureSchema,
    pub base_score: f64,
    /// One encoder per expanded categorical column.
    pub encoders: Vec<TargetEncoder>,
    pub trees: Vec<Tree>,
}

const FORMAT: &str = "rare-gbdt v1";

fn weighted_logloss(f: &[f64], labels: &[bool], cw: [f64; 2]) -> f64 {
    let (mut s, mut w) = (0.0, 0.0);
    for (&x, &y) in f.iter().zip(labels) {
        let wi = cw[y as usize];
        // log(1 + e^{-x}) and log(1 + e^{x}) written stably
        let l = if y { softplus(-x) } else { softplus(x) };
        s += wi * l;
        w += wi;
    }
    s / w
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl GbdtModel {
    pub fn fit(train: &Dataset, val: Option<&Dataset>, config: &GbdtConfig) -> Result<Self> {
        Self::fit_with_history(train, val, config).map(|(m, _)| m)
    }

    pub fn fit_with_history(train: &Dataset, val: Option<&Dataset>, config: &GbdtConfig) -> Result<(Self, GbdtHistory)> {
        config.validate()?;
        if train.pages.is_empty() {
            return Err(Error::Argument("training set has no pages".into()));
        }
        let features = config.features.resolve(&train.schema)?;
        let x = expand_context(train, &features, config.context_k)?;
        let labels = train.labels();
        let positives = labels.iter().filter(|&&y| y).count();
        if positives == 0 || positives == labels.len() {
            return Err(Error::DegenerateLabels(format!(
                "training labels are all {}",
                if positives == 0 { "unclicked" } else { "clicked" }
            )));
        }
        let prior = positives as f64 / labels.len() as f64;
        let blocks = x.blocks();
        let encoders: Vec<TargetEncoder> = (0..x.cat_width())
            .map(|c| {
                let card = features.cardinalities[c % features.cat.len()];
                TargetEncoder::fit((0..x.n_rows).map(|r| x.cat_row(r)[c]), &labels, prior, card)
            })
            .collect();
        debug_assert_eq!(encoders.len(), blocks * features.cat.len());
        let cw = config.class_weights;
        let pos_w = positives as f64 * cw[1];
        let neg_w = (labels.len() - positives) as f64 * cw[0];
        let base_score = (pos_w / neg_w).ln();
        let mut model = Self {
            format: FORMAT.into(),
            config: config.clone(),
            schema: train.schema.clone(),
            base_score,
            encoders,
            trees: Vec::new(),
        };
        let data = Presorted::new(model.encode_columns(&x), x.n_rows);

        let val_x = match val {
            Some(v) if !v.pages.is_empty() => Some((model.encode_rows(&expand_context(v, &features, config.context_k)?), v.labels())),
            _ => None,
        };
        let mut f = vec![base_score; x.n_rows];
        let mut fv = val_x.as_ref().map(|(rows, _)| vec![base_score; rows.len() / model.width()]);
        let w: Vec<f64> = labels.iter().map(|&y| cw[y as usize]).collect();
        let mut t = vec![0.0; x.n_rows];
        let mut h = vec![0.0; x.n_rows];
        let params = TreeParams { depth: config.depth, l2: config.l2_leaf_reg, min_child_weight: config.min_child_weight };
        let mut history = GbdtHistory::default();
        history.train_loss.push(weighted_logloss(&f, &labels, cw));
        if let (Some((_, vl)), Some(fv)) = (&val_x, &fv) {
            history.val_loss.push(weighted_logloss(fv, vl, cw));
        }
        for _ in 0..config.iterations {
            for r in 0..x.n_rows {
                let p = sigmoid(f[r]);
                t[r] = labels[r] as u8 as f64 - p;
                h[r] = w[r] * p * (1.0 - p);
            }
            let (mut tree, leaf_of) = grow(&data, &Targets { w: &w, t: &t, h: &h }, &params);
            for node in tree.nodes.iter_mut().filter(|n| n.is_leaf()) {
                node.value *= config.learning_rate;
            }
            for r in 0..x.n_rows {
                f[r] += tree.nodes[leaf_of[r] as usize].value;
            }
            history.train_loss.push(weighted_logloss(&f, &labels, cw));
            if let (Some((rows, vl)), Some(fv)) = (&val_x, &mut fv) {
                let width = model.width();
                for (i, row) in rows.chunks(width).enumerate() {
                    fv[i] += tree.predict(|c| row[c]);
                }
                history.val_loss.push(weighted_logloss(fv, vl, cw));
            }
            model.trees.push(tree);
        }
        history.best_iteration = model.trees.len();
        if config.use_best_model && !history.val_loss.is_empty() {
            let mut best = 0;
            for (i, l) in history.val_loss.iter().enumerate() {
                if *l < history.val_loss[best] {
                    best = i;
                }
            }
            model.trees.truncate(best);
            history.best_iteration = best;
        }
        Ok((model, history))
    }

    /// Number of model input columns (encoded categoricals, then continuous).
    pub fn width(&self) -> usize {
        self.encoders.len() + (2 * self.config.context_k + 1) * self.config.features.continuous.len()
    }

    fn encode_columns(&self, x: &ContextExpandedMatrix) -> Vec<Vec<f64>> {
        let mut cols = Vec::with_capacity(x.width());
        for (c, enc) in self.encoders.iter().enumerate() {
            cols.push((0..x.n_rows).map(|r| enc.encode(x.cat_row(r)[c])).collect());
        }
        for c in 0..x.cont_width() {
            cols.push((0..x.n_rows).map(|r| x.cont_row(r)[c]).collect());
        }
        cols
    }

    /// Row-major encoded matrix.
    fn encode_rows(&self, x: &ContextExpandedMatrix) -> Vec<f64> {
        let mut out = Vec::with_capacity(x.n_rows * x.width());
        for r in 0..x.n_rows {
            out.extend(self.encoders.iter().zip(x.cat_row(r)).map(|(e, &c)| e.encode(c)));
            out.extend_from_slice(x.cont_row(r));
        }
        out
    }

    fn check_width(&self, x: &ContextExpandedMatrix) -> Result<()> {
        if x.width() != self.width() || x.cat_width() != self.encoders.len() {
            return Err(Error::Shape(format!(
                "feature rows of width {} given to a model trained on width {}",
                x.width(),
                self.width()
            )));
        }
        Ok(())
    }

    /// Raw scores (log-odds) of every row.
    pub fn predict_margin(&self, x: &ContextExpandedMatrix) -> Result<Vec<f64>> {
        self.check_width(x)?;
        let rows = self.encode_rows(x);
        Ok(rows
            .chunks(self.width())
            .map(|row| self.base_score + self.trees.iter().map(|t| t.predict(|c| row[c])).sum::<f64>())
            .collect())
    }

    pub fn predict_proba(&self, x: &ContextExpandedMatrix) -> Result<Vec<f64>> {
        Ok(self.predict_margin(x)?.into_iter().map(sigmoid).collect())
    }

    /// Click probabilities of every item of a dataset, grouped by page.
    pub fn predict_dataset(&self, ds: &Dataset) -> Result<Vec<Vec<f64>>> {
        let features = self.config.features.resolve(&ds.schema)?;
        let p = self.predict_proba(&expand_context(ds, &features, self.config.context_k)?)?;
        Ok(p.chunks(ds.page_len().max(1)).map(<[f64]>::to_vec).collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        if m.format != FORMAT {
            return Err(Error::Model(format!("unsupported tree model format {:?}", m.format)));
        }
        Ok(m)
    }
}

impl ClickModel for GbdtModel {
    fn kind(&self) -> &'static str {
        if self.config.context_k > 0 {
            "gbdt-c"
        } else {
            "gbdt"
        }
    }

    fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    fn predict_displayed(&self, page: &SearchPage) -> Result<Vec<f64>> {
        let features = self.config.features.resolve(&self.schema)?;
        self.predict_proba(&expand_page(page, &features, self.config.context_k)?)
    }
}
