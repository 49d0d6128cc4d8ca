use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{page_features, trial_deltas, trial_transpositions, transposition_loss, RerankerConfig, RERANK_FEATURES};
use crate::clicker::ClickModel;
use crate::data::{Dataset, FeatureSchema, SearchPage};
use crate::error::{Error, Result};
use crate::metrics::{delta_revenue, mean_difference, mean_ndcg};
use crate::numcore::{xavier_normal, Adam, Graph, ParamId, ParamStore, Tensor, NORM_EPS};
use crate::permutation::Permutation;
use crate::seed;

const FORMAT: &str = "rare-reranker v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RerankerHistoryRow {
    pub step: usize,
    /// Mean per-page loss since the previous row (`NaN` before training).
    pub loss: f64,
    pub val_delta_revenue: f64,
    /// Nats.
    pub val_difference: f64,
    pub val_ndcg: f64,
}

pub fn write_history_csv<W: Write>(rows: &[RerankerHistoryRow], mut w: W) -> Result<()> {
    writeln!(w, "step,loss,val_delta_revenue,val_difference_nats,val_ndcg")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.step, r.loss, r.val_delta_revenue, r.val_difference, r.val_ndcg)?;
    }
    Ok(())
}

/// MLP scorer: `Linear -> BatchNorm -> ReLU` per hidden layer, then a
/// linear output of width one.
#[derive(Clone, Debug)]
pub struct RerankerModel {
    /// Kind of the click model the scorer was trained against.
    pub clicker_kind: String,
    pub config: RerankerConfig,
    pub schema: FeatureSchema,
    pub params: ParamStore,
    pub running_mean: Vec<Vec<f64>>,
    pub running_var: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct Stored {
    format: String,
    clicker_kind: String,
    config: RerankerConfig,
    schema: FeatureSchema,
    running_mean: Vec<Vec<f64>>,
    running_var: Vec<Vec<f64>>,
    params: String,
}

struct Layer {
    w: ParamId,
    b: ParamId,
    gamma: ParamId,
    beta: ParamId,
}

impl RerankerModel {
    pub fn init(config: &RerankerConfig, schema: &FeatureSchema, clicker_kind: &str, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed::derive(seed, "reranker-init"));
        let mut params = ParamStore::new();
        let mut fan_in = RERANK_FEATURES.len();
        for (i, &h) in config.hidden.iter().enumerate() {
            params.add(&format!("hidden{i}.w"), xavier_normal(fan_in, h, &mut rng))?;
            params.add(&format!("hidden{i}.b"), Tensor::zeros(&[h]))?;
            params.add(&format!("bn{i}.g"), Tensor::ones(&[h]))?;
            params.add(&format!("bn{i}.b"), Tensor::zeros(&[h]))?;
            fan_in = h;
        }
        params.add("out.w", xavier_normal(fan_in, 1, &mut rng))?;
        params.add("out.b", Tensor::zeros(&[1]))?;
        Ok(Self {
            clicker_kind: clicker_kind.to_string(),
            config: config.clone(),
            schema: schema.clone(),
            params,
            running_mean: config.hidden.iter().map(|&h| vec![0.0; h]).collect(),
            running_var: config.hidden.iter().map(|&h| vec![1.0; h]).collect(),
        })
    }

    fn layers(&self) -> Result<(Vec<Layer>, ParamId, ParamId)> {
        let id = |n: String| self.params.id(&n).ok_or_else(|| Error::Model(format!("missing parameter {n:?}")));
        let layers = (0..self.config.hidden.len())
            .map(|i| {
                Ok(Layer {
                    w: id(format!("hidden{i}.w"))?,
                    b: id(format!("hidden{i}.b"))?,
                    gamma: id(format!("bn{i}.g"))?,
                    beta: id(format!("bn{i}.b"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok((layers, id("out.w".into())?, id("out.b".into())?))
    }

    /// Evaluation-mode scores of `x` (`[rows, 11]`), computed directly
    /// without building a graph.
    fn score_rows(&self, x: &Tensor) -> Result<Vec<f64>> {
        let (layers, ow, ob) = self.layers()?;
        let mut h = x.clone();
        for (i, l) in layers.iter().enumerate() {
            let mut z = h.matmul(self.params.get(l.w))?;
            let width = z.last_dim();
            let (b, g, beta) = (self.params.get(l.b).data(), self.params.get(l.gamma).data(), self.params.get(l.beta).data());
            let (m, v) = (&self.running_mean[i], &self.running_var[i]);
            for row in z.data_mut().chunks_mut(width) {
                for j in 0..width {
                    let y = (row[j] + b[j] - m[j]) / (v[j] + NORM_EPS).sqrt() * g[j] + beta[j];
                    row[j] = y.max(0.0);
                }
            }
            h = z;
        }
        let out = h.matmul(self.params.get(ow))?;
        let bias = self.params.get(ob).data()[0];
        Ok(out.data().iter().map(|s| s + bias).collect())
    }

    /// One score per item of `page`, in page order.
    pub fn score(&self, page: &SearchPage) -> Result<Vec<f64>> {
        self.score_rows(&page_features(page, &self.schema)?)
    }

    /// Display order of `page`: descending score, ties kept in page order.
    /// Only the scorer runs here.
    pub fn rerank(&self, page: &SearchPage) -> Result<Permutation> {
        Ok(Permutation::from_scores(&self.score(page)?))
    }

    pub fn rerank_many(&self, pages: &[SearchPage]) -> Result<Vec<Permutation>> {
        pages.iter().map(|p| self.rerank(p)).collect()
    }

    /// Trains a scorer against a frozen clicker. Each step scores a group of
    /// pages, prices every trial transposition of the induced orders with
    /// the clicker and takes one Adam step on the transposition loss. With
    /// a validation set the parameters with the best validation revenue
    /// ratio are kept.
    pub fn train(
        clicker: &dyn ClickModel,
        train: &Dataset,
        val: Option<&Dataset>,
        config: &RerankerConfig,
        seed: u64,
    ) -> Result<(Self, Vec<RerankerHistoryRow>)> {
        if train.pages.is_empty() {
            return Err(Error::Argument("training set has no pages".into()));
        }
        let mut model = Self::init(config, &train.schema, clicker.kind(), seed)?;
        let (layers, ow, ob) = model.layers()?;
        let val = val.filter(|v| !v.pages.is_empty());
        let mut adam = Adam::new(config.learning_rate);
        let mut trial_rng = seed::rng(seed::derive(seed, "reranker-trials"));
        let mut history = vec![model.validation_row(clicker, val, 0, f64::NAN)?];
        let mut best: Option<(f64, Self)> = None;
        let keep_best = |row: &RerankerHistoryRow, m: &Self, best: &mut Option<(f64, Self)>| {
            if row.val_delta_revenue.is_finite() && best.as_ref().is_none_or(|(b, _)| row.val_delta_revenue > *b) {
                *best = Some((row.val_delta_revenue, m.clone()));
            }
        };
        keep_best(&history[0], &model, &mut best);
        let mut order: Vec<usize> = (0..train.pages.len()).collect();
        let per_epoch = if config.pages_per_epoch == 0 { order.len() } else { config.pages_per_epoch.min(order.len()) };
        let mut step = 0;
        for epoch in 0..config.epochs {
            order.shuffle(&mut seed::rng(seed::derive_indexed(seed, "reranker-order", epoch as u64)));
            let (mut total, mut count) = (0.0, 0usize);
            for group in order[..per_epoch].chunks(config.pages_per_step) {
                let pages: Vec<&SearchPage> = group.iter().map(|&i| &train.pages[i]).collect();
                let feats = pages.iter().map(|p| page_features(p, &train.schema)).collect::<Result<Vec<_>>>()?;
                let rows: usize = feats.iter().map(|f| f.shape()[0]).sum();
                let x = Tensor::new(&[rows, RERANK_FEATURES.len()], feats.iter().flat_map(|f| f.data().iter().copied()).collect())?;

                let mut g = Graph::training(seed::derive_indexed(seed, "reranker-step", step as u64));
                let bound = model.params.bind(&mut g);
                let mut h = g.constant(x);
                let mut stats = Vec::with_capacity(layers.len());
                for (i, l) in layers.iter().enumerate() {
                    let z = g.matmul(h, bound[l.w])?;
                    let z = g.add_bias(z, bound[l.b])?;
                    let (z, s) = g.batch_norm(z, bound[l.gamma], bound[l.beta], &model.running_mean[i], &model.running_var[i])?;
                    stats.push(s.expect("training graph"));
                    h = g.relu(z);
                }
                let out = g.matmul(h, bound[ow])?;
                let scores = g.add_bias(out, bound[ob])?;

                let s_all = g.value(scores).data().to_vec();
                let mut upstream = vec![0.0; rows];
                let mut loss = 0.0;
                let mut at = 0;
                for page in &pages {
                    let n = page.len();
                    let s = &s_all[at..at + n];
                    let perm = Permutation::from_scores(s);
                    let pairs = trial_transpositions(n, config.budget, &mut trial_rng)?;
                    let trials: Vec<Permutation> = pairs.iter().map(|&(a, b)| perm.transposed(a, b)).collect();
                    let deltas = trial_deltas(clicker, page, &perm, &trials, config.regularization, config.revenue_mode)?;
                    let (l, grad) = transposition_loss(s, &perm, &pairs, &deltas, config.sigma)?;
                    loss += l / pages.len() as f64;
                    for (u, g) in upstream[at..at + n].iter_mut().zip(grad) {
                        *u = g / pages.len() as f64;
                    }
                    at += n;
                }
                if !loss.is_finite() || upstream.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Training { step, message: format!("loss is {loss}") });
                }
                g.backward_with(scores, Tensor::new(&[rows, 1], upstream)?)?;
                let grads = model.params.grads(&g, &bound);
                if grads.iter().flatten().any(|t| !t.all_finite()) {
                    return Err(Error::Training { step, message: "non-finite gradient".into() });
                }
                adam.step(&mut model.params, &grads)?;
                let m = config.bn_momentum;
                for (i, s) in stats.into_iter().enumerate() {
                    for (r, b) in model.running_mean[i].iter_mut().zip(&s.mean) {
                        *r = (1.0 - m) * *r + m * b;
                    }
                    for (r, b) in model.running_var[i].iter_mut().zip(&s.var) {
                        *r = (1.0 - m) * *r + m * b;
                    }
                }
                step += 1;
                total += loss;
                count += 1;
            }
            let row = model.validation_row(clicker, val, step, total / count.max(1) as f64)?;
            keep_best(&row, &model, &mut best);
            history.push(row);
        }
        if let Some((_, m)) = best {
            model = m;
        }
        Ok((model, history))
    }

    fn validation_row(&self, clicker: &dyn ClickModel, val: Option<&Dataset>, step: usize, loss: f64) -> Result<RerankerHistoryRow> {
        let mut row = RerankerHistoryRow { step, loss, val_delta_revenue: f64::NAN, val_difference: f64::NAN, val_ndcg: f64::NAN };
        if let Some(v) = val {
            let perms = self.rerank_many(&v.pages)?;
            row.val_delta_revenue = match delta_revenue(clicker, &v.pages, &perms, self.config.threshold) {
                Ok(d) => d.value,
                Err(Error::UndefinedMetric(_)) => f64::NAN,
                Err(e) => return Err(e),
            };
            row.val_difference = mean_difference(&perms, self.config.decay)?;
            row.val_ndcg = mean_ndcg(&perms, self.config.decay)?;
        }
        Ok(row)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&Stored {
            format: FORMAT.into(),
            clicker_kind: self.clicker_kind.clone(),
            config: self.config.clone(),
            schema: self.schema.clone(),
            running_mean: self.running_mean.clone(),
            running_var: self.running_var.clone(),
            params: self.params.to_text(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Stored = serde_json::from_str(text)?;
        if s.format != FORMAT {
            return Err(Error::Model(format!("unsupported reranker format {:?}", s.format)));
        }
        let model = Self {
            clicker_kind: s.clicker_kind,
            config: s.config,
            schema: s.schema,
            params: ParamStore::from_text(&s.params)?,
            running_mean: s.running_mean,
            running_var: s.running_var,
        };
        model.layers()?;
        Ok(model)
    }
}
