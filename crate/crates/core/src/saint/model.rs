use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{SaintConfig, SaintVariant};
use crate::clicker::ClickModel;
use crate::data::{Dataset, FeatureSchema, ResolvedFeatures, SearchPage};
use crate::error::{Error, Result};
use crate::metrics::{auc, gauc};
use crate::numcore::{
    feature_attention, intersample_attention, normal, sigmoid, xavier_normal, Adam, AttentionVars, Bound, Graph,
    ParamId, ParamStore, Tensor, Var,
};
use crate::seed;

const FORMAT: &str = "rare-saint v1";

/// Model inputs for a run of whole pages, items contiguous per page.
#[derive(Clone, Debug)]
pub struct ItemBatch {
    /// `cats[f][row]`: embedding row of categorical feature `f`.
    pub cats: Vec<Vec<usize>>,
    /// Normalised continuous features, `[rows, n_cont]`.
    pub cont: Tensor,
    /// Length of each page, in batch order.
    pub page_lens: Vec<usize>,
    pub labels: Vec<usize>,
}

impl ItemBatch {
    pub fn rows(&self) -> usize {
        self.labels.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaintHistoryRow {
    pub step: usize,
    /// Mean training loss since the previous row (`NaN` before training).
    pub train_loss: f64,
    pub val_auc: f64,
    pub val_gauc: f64,
}

pub fn write_history_csv<W: Write>(rows: &[SaintHistoryRow], mut w: W) -> Result<()> {
    writeln!(w, "step,train_loss,val_auc,val_gauc")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.step, r.train_loss, r.val_auc, r.val_gauc)?;
    }
    Ok(())
}

struct LayerIds {
    feat: [ParamId; 5],
    ln1: [ParamId; 2],
    inter: Option<([ParamId; 5], [ParamId; 2])>,
    ff: [ParamId; 4],
    ln3: [ParamId; 2],
}

/// Parameter handles, looked up by name so a loaded store binds the same way.
struct Layout {
    cls: ParamId,
    cat: Vec<ParamId>,
    cont: Vec<[ParamId; 2]>,
    layers: Vec<LayerIds>,
    head: [ParamId; 4],
}

#[derive(Clone, Debug)]
pub struct SaintModel {
    pub config: SaintConfig,
    pub schema: FeatureSchema,
    /// Mean and standard deviation of `ln(1 + x)` per continuous feature.
    pub cont_mean: Vec<f64>,
    pub cont_std: Vec<f64>,
    pub params: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct Stored {
    format: String,
    config: SaintConfig,
    schema: FeatureSchema,
    cont_mean: Vec<f64>,
    cont_std: Vec<f64>,
    params: String,
}

fn attn_names(prefix: &str) -> [String; 5] {
    ["wq", "wk", "wv", "wo", "bo"].map(|s| format!("{prefix}.{s}"))
}

fn lookup(store: &ParamStore, name: &str) -> Result<ParamId> {
    store.id(name).ok_or_else(|| Error::Model(format!("missing parameter {name:?}")))
}

fn lookup_all<const K: usize>(store: &ParamStore, names: [String; K]) -> Result<[ParamId; K]> {
    let ids = names.iter().map(|n| lookup(store, n)).collect::<Result<Vec<_>>>()?;
    Ok(ids.try_into().expect("fixed length"))
}

impl SaintModel {
    /// A freshly initialised model. Continuous statistics come from `train`.
    pub fn init(config: &SaintConfig, train: &Dataset, seed: u64) -> Result<Self> {
        config.validate()?;
        let f = config.features.resolve(&train.schema)?;
        let (cont_mean, cont_std) = cont_stats(train, &f);
        let d = config.d_model;
        let mut rng = seed::rng(seed::derive(seed, "saint-init"));
        let mut s = ParamStore::new();
        let emb_std = 1.0 / (d as f64).sqrt();
        s.add("cls", normal(&[1, d], emb_std, &mut rng))?;
        for (name, &card) in config.features.categorical.iter().zip(&f.cardinalities) {
            // the last row is shared by categories never seen in training
            s.add(&format!("cat.{name}"), normal(&[card as usize + 1, d], emb_std, &mut rng))?;
        }
        for name in &config.features.continuous {
            s.add(&format!("cont.{name}.w"), normal(&[1, d], emb_std, &mut rng))?;
            s.add(&format!("cont.{name}.b"), Tensor::zeros(&[d]))?;
        }
        let add_attention = |s: &mut ParamStore, prefix: &str, rng: &mut _| -> Result<()> {
            let names = attn_names(prefix);
            for n in &names[..4] {
                s.add(n, xavier_normal(d, d, rng))?;
            }
            s.add(&names[4], Tensor::zeros(&[d]))?;
            s.add(&format!("{prefix}.ln.g"), Tensor::ones(&[d]))?;
            s.add(&format!("{prefix}.ln.b"), Tensor::zeros(&[d]))?;
            Ok(())
        };
        let ff = d * config.ff_mult;
        for l in 0..config.n_layers {
            add_attention(&mut s, &format!("layer{l}.feat"), &mut rng)?;
            if config.variant == SaintVariant::Q {
                add_attention(&mut s, &format!("layer{l}.inter"), &mut rng)?;
            }
            s.add(&format!("layer{l}.ff1.w"), xavier_normal(d, ff, &mut rng))?;
            s.add(&format!("layer{l}.ff1.b"), Tensor::zeros(&[ff]))?;
            s.add(&format!("layer{l}.ff2.w"), xavier_normal(ff, d, &mut rng))?;
            s.add(&format!("layer{l}.ff2.b"), Tensor::zeros(&[d]))?;
            s.add(&format!("layer{l}.ff.ln.g"), Tensor::ones(&[d]))?;
            s.add(&format!("layer{l}.ff.ln.b"), Tensor::zeros(&[d]))?;
        }
        let hh = config.head_hidden;
        s.add("head1.w", xavier_normal(d, hh, &mut rng))?;
        s.add("head1.b", Tensor::zeros(&[hh]))?;
        s.add("head2.w", xavier_normal(hh, 2, &mut rng))?;
        s.add("head2.b", Tensor::zeros(&[2]))?;
        Ok(Self { config: config.clone(), schema: train.schema.clone(), cont_mean, cont_std, params: s })
    }

    fn layout(&self) -> Result<Layout> {
        let s = &self.params;
        let c = &self.config;
        let cat = c.features.categorical.iter().map(|n| lookup(s, &format!("cat.{n}"))).collect::<Result<_>>()?;
        let cont = c
            .features
            .continuous
            .iter()
            .map(|n| lookup_all(s, [format!("cont.{n}.w"), format!("cont.{n}.b")]))
            .collect::<Result<_>>()?;
        let ln = |p: &str| lookup_all(s, [format!("{p}.ln.g"), format!("{p}.ln.b")]);
        let layers = (0..c.n_layers)
            .map(|l| {
                let feat = format!("layer{l}.feat");
                let inter = format!("layer{l}.inter");
                Ok(LayerIds {
                    feat: lookup_all(s, attn_names(&feat))?,
                    ln1: ln(&feat)?,
                    inter: match c.variant {
                        SaintVariant::Q => Some((lookup_all(s, attn_names(&inter))?, ln(&inter)?)),
                        SaintVariant::S => None,
                    },
                    ff: lookup_all(s, ["ff1.w", "ff1.b", "ff2.w", "ff2.b"].map(|n| format!("layer{l}.{n}")))?,
                    ln3: ln(&format!("layer{l}.ff"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Layout {
            cls: lookup(s, "cls")?,
            cat,
            cont,
            layers,
            head: lookup_all(s, ["head1.w", "head1.b", "head2.w", "head2.b"].map(String::from))?,
        })
    }

    fn resolved(&self) -> Result<ResolvedFeatures> {
        self.config.features.resolve(&self.schema)
    }

    /// Tokenisation inputs for `pages`, in order.
    pub fn batch(&self, pages: &[&SearchPage]) -> Result<ItemBatch> {
        let f = self.resolved()?;
        if self.config.variant == SaintVariant::Q {
            if let Some(p) = pages.iter().find(|p| p.len() != self.config.page_len) {
                return Err(Error::Shape(format!(
                    "page {} has {} items, the intersample chunk needs N={}",
                    p.query_id,
                    p.len(),
                    self.config.page_len
                )));
            }
        }
        let rows: usize = pages.iter().map(|p| p.len()).sum();
        if rows == 0 {
            return Err(Error::Argument("batch has no items".into()));
        }
        let mut cats = vec![Vec::with_capacity(rows); f.cat.len()];
        let mut cont = Vec::with_capacity(rows * f.cont.len());
        let mut labels = Vec::with_capacity(rows);
        for it in pages.iter().flat_map(|p| &p.items) {
            for (j, (&col, &card)) in f.cat.iter().zip(&f.cardinalities).enumerate() {
                cats[j].push(it.categorical[col].min(card) as usize);
            }
            for (j, &col) in f.cont.iter().enumerate() {
                cont.push((transform(it.continuous[col]) - self.cont_mean[j]) / self.cont_std[j]);
            }
            labels.push(it.click as usize);
        }
        Ok(ItemBatch {
            cats,
            cont: Tensor::new(&[rows, f.cont.len()], cont)?,
            page_lens: pages.iter().map(|p| p.len()).collect(),
            labels,
        })
    }

    /// Logits `[rows, 2]` of a batch with parameters bound in `bound`.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, batch: &ItemBatch) -> Result<Var> {
        let lay = self.layout()?;
        let c = &self.config;
        let b = batch.rows();
        let d = c.d_model;
        let mut tokens = Vec::with_capacity(c.n_tokens());
        let cls = g.embedding(bound[lay.cls], &vec![0; b])?;
        tokens.push(cls);
        for (ids, &table) in batch.cats.iter().zip(&lay.cat) {
            tokens.push(g.embedding(bound[table], ids)?);
        }
        let x = g.constant(batch.cont.clone());
        for (j, [w, bias]) in lay.cont.iter().enumerate() {
            let col = g.slice(x, 1, j, 1)?;
            let t = g.matmul(col, bound[*w])?;
            tokens.push(g.add_bias(t, bound[*bias])?);
        }
        let tokens = tokens.into_iter().map(|t| g.reshape(t, &[b, 1, d])).collect::<Result<Vec<_>>>()?;
        let mut h = g.concat(&tokens, 1)?;
        let n = tokens.len();
        let attn = |ids: &[ParamId; 5]| AttentionVars {
            wq: bound[ids[0]],
            wk: bound[ids[1]],
            wv: bound[ids[2]],
            wo: bound[ids[3]],
            bo: bound[ids[4]],
        };
        for layer in &lay.layers {
            let a = feature_attention(g, h, &attn(&layer.feat), c.n_heads, c.attention_dropout)?;
            let r = g.add(h, a)?;
            h = g.layer_norm(r, bound[layer.ln1[0]], bound[layer.ln1[1]])?;
            if let Some((ids, ln)) = &layer.inter {
                let a = intersample_attention(g, h, &attn(ids), c.n_heads, c.page_len, c.attention_dropout)?;
                let r = g.add(h, a)?;
                h = g.layer_norm(r, bound[ln[0]], bound[ln[1]])?;
            }
            let flat = g.reshape(h, &[b * n, d])?;
            let [w1, b1, w2, b2] = layer.ff.map(|id| bound[id]);
            let z = g.matmul(flat, w1)?;
            let z = g.add_bias(z, b1)?;
            let z = g.gelu(z);
            let z = g.dropout(z, c.mlp_dropout)?;
            let z = g.matmul(z, w2)?;
            let z = g.add_bias(z, b2)?;
            let z = g.reshape(z, &[b, n, d])?;
            let r = g.add(h, z)?;
            h = g.layer_norm(r, bound[layer.ln3[0]], bound[layer.ln3[1]])?;
        }
        let cls = g.slice(h, 1, 0, 1)?;
        let cls = g.reshape(cls, &[b, d])?;
        let [w1, b1, w2, b2] = lay.head.map(|id| bound[id]);
        let z = g.matmul(cls, w1)?;
        let z = g.add_bias(z, b1)?;
        let z = g.relu(z);
        let z = g.dropout(z, c.mlp_dropout)?;
        let z = g.matmul(z, w2)?;
        g.add_bias(z, b2)
    }

    /// Training loss of a batch: weighted, optionally label-smoothed
    /// cross-entropy of the two-class logits.
    pub fn loss(&self, g: &mut Graph, bound: &Bound, batch: &ItemBatch) -> Result<Var> {
        let logits = self.forward(g, bound, batch)?;
        let cw = self.config.class_weights;
        g.cross_entropy(logits, &batch.labels, cw.as_ref().map(|w| &w[..]), self.config.loss.smoothing())
    }

    /// Evaluation-mode click probabilities of the given pages, run as one
    /// batch.
    pub fn predict_batch(&self, pages: &[&SearchPage]) -> Result<Vec<Vec<f64>>> {
        let batch = self.batch(pages)?;
        let mut g = Graph::new();
        let bound = self.params.bind_frozen(&mut g);
        let logits = self.forward(&mut g, &bound, &batch)?;
        let p: Vec<f64> = g.value(logits).data().chunks(2).map(|z| sigmoid(z[1] - z[0])).collect();
        let mut out = Vec::with_capacity(pages.len());
        let mut at = 0;
        for len in batch.page_lens {
            out.push(p[at..at + len].to_vec());
            at += len;
        }
        Ok(out)
    }

    /// Click probabilities of many pages, split into batches of
    /// `pages_per_batch` pages that run in parallel when enabled.
    pub fn predict_pages(&self, pages: &[SearchPage]) -> Result<Vec<Vec<f64>>> {
        let chunks: Vec<Vec<&SearchPage>> =
            pages.chunks(self.config.pages_per_batch).map(|c| c.iter().collect()).collect();
        #[cfg(feature = "parallel")]
        let parts: Vec<Result<Vec<Vec<f64>>>> = {
            use rayon::prelude::*;
            chunks.par_iter().map(|c| self.predict_batch(c)).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let parts: Vec<Result<Vec<Vec<f64>>>> = chunks.iter().map(|c| self.predict_batch(c)).collect();
        let mut out = Vec::with_capacity(pages.len());
        for part in parts {
            out.extend(part?);
        }
        Ok(out)
    }

    pub fn predict_dataset(&self, ds: &Dataset) -> Result<Vec<Vec<f64>>> {
        self.predict_pages(&ds.pages)
    }

    /// Minibatch Adam training on whole pages. The parameters with the best
    /// validation GAUC (checked after every epoch) are kept; without a
    /// validation set the final parameters are kept.
    pub fn train(train: &Dataset, val: Option<&Dataset>, config: &SaintConfig, seed: u64) -> Result<(Self, Vec<SaintHistoryRow>)> {
        if train.pages.is_empty() {
            return Err(Error::Argument("training set has no pages".into()));
        }
        let mut model = Self::init(config, train, seed)?;
        // fail early on pages that do not fit the chunk size
        model.batch(&train.pages.iter().take(1).collect::<Vec<_>>())?;
        let val = val.filter(|v| !v.pages.is_empty());
        let mut adam = Adam::new(config.learning_rate);
        let mut history = vec![model.validation_row(val, 0, f64::NAN)?];
        let mut best = (history[0].val_gauc, model.params.clone());
        let mut order: Vec<usize> = (0..train.pages.len()).collect();
        let mut step = 0;
        'epochs: for epoch in 0..config.epochs {
            order.shuffle(&mut seed::rng(seed::derive_indexed(seed, "saint-order", epoch as u64)));
            let (mut total, mut count) = (0.0, 0usize);
            for idx in order.chunks(config.pages_per_batch) {
                let pages: Vec<&SearchPage> = idx.iter().map(|&i| &train.pages[i]).collect();
                let batch = model.batch(&pages)?;
                let mut g = Graph::training(seed::derive_indexed(seed, "saint-dropout", step as u64));
                let bound = model.params.bind(&mut g);
                let loss = model.loss(&mut g, &bound, &batch)?;
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::Training { step, message: format!("loss is {value}") });
                }
                g.backward(loss)?;
                let grads = model.params.grads(&g, &bound);
                if grads.iter().flatten().any(|t| !t.all_finite()) {
                    return Err(Error::Training { step, message: "non-finite gradient".into() });
                }
                adam.step(&mut model.params, &grads)?;
                step += 1;
                total += value;
                count += 1;
                if config.max_steps > 0 && step >= config.max_steps {
                    history.push(model.validation_row(val, step, total / count as f64)?);
                    break 'epochs;
                }
            }
            history.push(model.validation_row(val, step, total / count.max(1) as f64)?);
            let row = history.last().expect("just pushed");
            if row.val_gauc > best.0 || (best.0.is_nan() && !row.val_gauc.is_nan()) {
                best = (row.val_gauc, model.params.clone());
            }
        }
        if let Some(row) = history.last() {
            if row.val_gauc > best.0 || (best.0.is_nan() && !row.val_gauc.is_nan()) {
                best = (row.val_gauc, model.params.clone());
            }
        }
        if val.is_some() && !best.0.is_nan() {
            model.params = best.1;
        }
        Ok((model, history))
    }

    fn validation_row(&self, val: Option<&Dataset>, step: usize, train_loss: f64) -> Result<SaintHistoryRow> {
        let (mut val_auc, mut val_gauc) = (f64::NAN, f64::NAN);
        if let Some(v) = val {
            let p = self.predict_dataset(v)?;
            let labels: Vec<Vec<bool>> = v.pages.iter().map(|p| p.labels()).collect();
            let flat_l: Vec<bool> = labels.iter().flatten().copied().collect();
            let flat_p: Vec<f64> = p.iter().flatten().copied().collect();
            val_auc = auc(&flat_l, &flat_p).unwrap_or(f64::NAN);
            val_gauc = gauc(&labels, &p).map_or(f64::NAN, |g| g.value);
        }
        Ok(SaintHistoryRow { step, train_loss, val_auc, val_gauc })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&Stored {
            format: FORMAT.into(),
            config: self.config.clone(),
            schema: self.schema.clone(),
            cont_mean: self.cont_mean.clone(),
            cont_std: self.cont_std.clone(),
            params: self.params.to_text(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Stored = serde_json::from_str(text)?;
        if s.format != FORMAT {
            return Err(Error::Model(format!("unsupported transformer model format {:?}", s.format)));
        }
        let model = Self {
            config: s.config,
            schema: s.schema,
            cont_mean: s.cont_mean,
            cont_std: s.cont_std,
            params: ParamStore::from_text(&s.params)?,
        };
        model.layout()?;
        Ok(model)
    }
}

fn transform(x: f64) -> f64 {
    x.max(0.0).ln_1p()
}

fn cont_stats(ds: &Dataset, f: &ResolvedFeatures) -> (Vec<f64>, Vec<f64>) {
    let n = ds.n_items().max(1) as f64;
    let mut mean = vec![0.0; f.cont.len()];
    let mut sq = vec![0.0; f.cont.len()];
    for it in ds.pages.iter().flat_map(|p| &p.items) {
        for (j, &col) in f.cont.iter().enumerate() {
            let v = transform(it.continuous[col]);
            mean[j] += v;
            sq[j] += v * v;
        }
    }
    let std = mean
        .iter_mut()
        .zip(&sq)
        .map(|(m, s)| {
            *m /= n;
            let sd = (s / n - *m * *m).max(0.0).sqrt();
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

impl ClickModel for SaintModel {
    fn kind(&self) -> &'static str {
        match self.config.variant {
            SaintVariant::S => "saint-s",
            SaintVariant::Q => "saint-q",
        }
    }

    fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    fn predict_displayed(&self, page: &SearchPage) -> Result<Vec<f64>> {
        Ok(self.predict_batch(&[page])?.remove(0))
    }

    fn predict_displayed_many(&self, pages: &[SearchPage]) -> Result<Vec<Vec<f64>>> {
        self.predict_pages(pages)
    }
}
