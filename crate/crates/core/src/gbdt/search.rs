use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{GbdtConfig, GbdtModel};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{auc, gauc};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepKRow {
    pub k: usize,
    pub auc: f64,
    pub gauc: f64,
    /// Milliseconds per page.
    pub inference_ms: f64,
}

fn evaluate(model: &GbdtModel, eval: &Dataset) -> Result<(f64, f64, f64)> {
    let start = Instant::now();
    let pred = model.predict_dataset(eval)?;
    let ms = start.elapsed().as_secs_f64() * 1e3 / eval.pages.len().max(1) as f64;
    let labels: Vec<Vec<bool>> = eval.pages.iter().map(|p| p.labels()).collect();
    let flat_l: Vec<bool> = labels.iter().flatten().copied().collect();
    let flat_p: Vec<f64> = pred.iter().flatten().copied().collect();
    Ok((auc(&flat_l, &flat_p)?, gauc(&labels, &pred)?.value, ms))
}

/// Fits one context-expanded model per radius and scores it on `eval`.
/// Rows come back sorted by `k`.
pub fn sweep_k(train: &Dataset, val: &Dataset, eval: &Dataset, base: &GbdtConfig, ks: &[usize]) -> Result<Vec<SweepKRow>> {
    if ks.is_empty() {
        return Err(Error::Argument("k sweep needs at least one radius".into()));
    }
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    ks.iter()
        .map(|&k| {
            let model = GbdtModel::fit(train, Some(val), &GbdtConfig { context_k: k, ..base.clone() })?;
            let (auc, gauc, inference_ms) = evaluate(&model, eval)?;
            Ok(SweepKRow { k, auc, gauc, inference_ms })
        })
        .collect()
}

/// Exhaustive grid over the three boosting hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GbdtGrid {
    pub iterations: Vec<usize>,
    pub learning_rate: Vec<f64>,
    pub depth: Vec<usize>,
}

impl Default for GbdtGrid {
    fn default() -> Self {
        Self { iterations: vec![150, 200, 500], learning_rate: vec![0.01, 0.03, 0.05, 0.1], depth: vec![4, 5, 6] }
    }
}

impl GbdtGrid {
    pub fn points(&self, base: &GbdtConfig) -> Vec<GbdtConfig> {
        let mut out = Vec::new();
        for &iterations in &self.iterations {
            for &learning_rate in &self.learning_rate {
                for &depth in &self.depth {
                    out.push(GbdtConfig { iterations, learning_rate, depth, ..base.clone() });
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub iterations: usize,
    pub learning_rate: f64,
    pub depth: usize,
    pub val_auc: f64,
    pub val_gauc: f64,
    pub selected: bool,
}

/// Evaluates every grid point on `val`; the point with the highest
/// validation AUC (first on ties) is marked as selected.
pub fn grid_search(train: &Dataset, val: &Dataset, base: &GbdtConfig, grid: &GbdtGrid) -> Result<(Vec<GridRow>, GbdtModel)> {
    let points = grid.points(base);
    if points.is_empty() {
        return Err(Error::Config("empty hyperparameter grid".into()));
    }
    let mut rows = Vec::with_capacity(points.len());
    let mut best: Option<(f64, GbdtModel, usize)> = None;
    for (i, cfg) in points.iter().enumerate() {
        let model = GbdtModel::fit(train, Some(val), cfg)?;
        let (val_auc, val_gauc, _) = evaluate(&model, val)?;
        rows.push(GridRow {
            iterations: cfg.iterations,
            learning_rate: cfg.learning_rate,
            depth: cfg.depth,
            val_auc,
            val_gauc,
            selected: false,
        });
        if best.as_ref().is_none_or(|b| val_auc > b.0) {
            best = Some((val_auc, model, i));
        }
    }
    let (_, model, i) = best.expect("non-empty grid");
    rows[i].selected = true;
    Ok((rows, model))
}
