//! WebAssembly demo. Each export takes and returns a JSON string so the
//! page needs no generated bindings beyond plain strings; failures come back
//! as `{"error": "..."}`.

use rare_core::clicker::Ctrv;
use rare_core::data::{generate_synthetic, Dataset, SyntheticConfig};
use rare_core::metrics::{delta_revenue, difference, mean_difference, mean_ndcg, ndcg, relevance_profile};
use rare_core::numcore::{chunked_attention_weights, Tensor};
use rare_core::Permutation;
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::wasm_bindgen;

type Result<T> = std::result::Result<T, String>;

fn respond<I: for<'de> Deserialize<'de>, O: Serialize>(input: &str, f: impl FnOnce(I) -> Result<O>) -> String {
    let out = serde_json::from_str::<I>(input).map_err(|e| e.to_string()).and_then(f);
    match out {
        Ok(v) => serde_json::to_string(&v).unwrap_or_else(|e| error_json(&e.to_string())),
        Err(e) => error_json(&e),
    }
}

fn error_json(msg: &str) -> String {
    serde_json::json!({ "error": msg }).to_string()
}

fn err(e: impl ToString) -> String {
    e.to_string()
}

fn default_p() -> f64 {
    0.9
}

#[derive(Deserialize)]
pub struct OrderInput {
    /// `order[slot]` is the original index shown at `slot`.
    pub order: Vec<usize>,
    #[serde(default = "default_p")]
    pub p: f64,
}

#[derive(Serialize)]
pub struct OrderOutput {
    pub difference: f64,
    pub ndcg: f64,
    /// Normalised relevance mass each slot carries before and after.
    pub before: Vec<f64>,
    pub after: Vec<f64>,
}

/// Difference and NDCG of a reordering against the original order.
#[wasm_bindgen]
pub fn explore_order(input: &str) -> String {
    respond(input, |i: OrderInput| {
        let perm = Permutation::new(i.order).map_err(err)?;
        let v = relevance_profile(perm.len(), i.p);
        let total: f64 = v.iter().sum();
        let before: Vec<f64> = v.iter().map(|x| x / total).collect();
        let after = (0..perm.len()).map(|s| before[perm.item_at(s)]).collect();
        Ok(OrderOutput { difference: difference(&perm, i.p).map_err(err)?, ndcg: ndcg(&perm, i.p).map_err(err)?, before, after })
    })
}

#[derive(Deserialize)]
#[serde(default)]
pub struct TradeoffInput {
    pub seed: u64,
    pub pages: usize,
    pub page_len: usize,
    pub r_organic: f64,
    pub alphas: Vec<f64>,
    pub p: f64,
    /// Click threshold of the revenue ratio.
    pub h: f64,
}

impl Default for TradeoffInput {
    fn default() -> Self {
        Self { seed: 100, pages: 200, page_len: 10, r_organic: 15.0, alphas: vec![0.0, 0.25, 0.5, 0.75, 1.0], p: 0.9, h: 0.05 }
    }
}

#[derive(Serialize)]
pub struct TradeoffRow {
    pub alpha: f64,
    pub delta_revenue: f64,
    pub difference: f64,
    pub ndcg: f64,
}

fn pages(seed: u64, n_pages: usize, page_len: usize) -> Result<Dataset> {
    if n_pages > 2000 || page_len > 60 {
        return Err("at most 2000 pages of 60 items".into());
    }
    generate_synthetic(&SyntheticConfig { n_pages, page_len, seed, context_strength: 1.0 }).map_err(err)
}

/// Sorts each page by `ctr * (r_organic + alpha * bid)`, the order that
/// maximises regularised revenue under the decayed-CTR click model, and
/// reports how revenue and relevance move with alpha.
#[wasm_bindgen]
pub fn alpha_tradeoff(input: &str) -> String {
    respond(input, |i: TradeoffInput| {
        let ds = pages(i.seed, i.pages, i.page_len)?;
        let clicker = Ctrv::new(&ds.schema, i.p).map_err(err)?;
        let ctr = ds.schema.require_cont("ctr_pred").map_err(err)?;
        i.alphas
            .iter()
            .map(|&alpha| {
                let perms: Vec<Permutation> = ds
                    .pages
                    .iter()
                    .map(|pg| {
                        let s: Vec<f64> =
                            pg.items.iter().map(|it| it.continuous[ctr] * (i.r_organic + alpha * it.bid)).collect();
                        Permutation::from_scores(&s)
                    })
                    .collect();
                Ok(TradeoffRow {
                    alpha,
                    delta_revenue: delta_revenue(&clicker, &ds.pages, &perms, i.h).map_err(err)?.value,
                    difference: mean_difference(&perms, i.p).map_err(err)?,
                    ndcg: mean_ndcg(&perms, i.p).map_err(err)?,
                })
            })
            .collect::<Result<Vec<_>>>()
    })
}

#[derive(Deserialize)]
#[serde(default)]
pub struct HeatmapInput {
    pub seed: u64,
    pub pages: usize,
    pub page_len: usize,
}

impl Default for HeatmapInput {
    fn default() -> Self {
        Self { seed: 100, pages: 3, page_len: 8 }
    }
}

#[derive(Serialize)]
pub struct HeatmapOutput {
    pub rows: usize,
    pub chunk: usize,
    /// `rows x rows`; zero wherever two rows belong to different pages.
    pub weights: Vec<Vec<f64>>,
}

/// Intersample attention weights of stacked pages, one block per page.
/// Items are represented by their z-scored continuous features.
#[wasm_bindgen]
pub fn attention_heatmap(input: &str) -> String {
    respond(input, |i: HeatmapInput| {
        if i.pages == 0 || i.pages * i.page_len > 400 {
            return Err("between 1 and 400 rows".into());
        }
        let ds = pages(i.seed, i.pages, i.page_len)?;
        let n = ds.schema.continuous.len();
        let rows = i.pages * i.page_len;
        let mut x: Vec<f64> = ds.pages.iter().flat_map(|p| &p.items).flat_map(|it| it.continuous.iter().map(|v| v.max(0.0).ln_1p())).collect();
        for c in 0..n {
            let col: Vec<f64> = (0..rows).map(|r| x[r * n + c]).collect();
            let mean = col.iter().sum::<f64>() / rows as f64;
            let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rows as f64).sqrt().max(1e-9);
            for r in 0..rows {
                x[r * n + c] = (x[r * n + c] - mean) / sd;
            }
        }
        let t = Tensor::new(&[rows, n, 1], x).map_err(err)?;
        let w = chunked_attention_weights(&t, i.page_len).map_err(err)?;
        let mut weights = vec![vec![0.0; rows]; rows];
        let n_sq = i.page_len * i.page_len;
        for (blk, chunk) in w.data().chunks(n_sq).enumerate() {
            for a in 0..i.page_len {
                for b in 0..i.page_len {
                    weights[blk * i.page_len + a][blk * i.page_len + b] = chunk[a * i.page_len + b];
                }
            }
        }
        Ok(HeatmapOutput { rows, chunk: i.page_len, weights })
    })
}
