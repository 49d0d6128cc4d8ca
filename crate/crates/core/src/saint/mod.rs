//! Tabular transformer click models.
//!
//! Every item becomes a sequence of `n = 1 + features` tokens: a learned CLS
//! token, one embedding per categorical feature and one affine projection
//! per continuous feature. Each layer runs self-attention across the tokens
//! of an item. The page-aware variant then lets the items of one page attend
//! to each other in chunks of `N` rows, so no information crosses pages.

mod bench;
mod model;

pub use bench::{bench_chunk_batching, BenchRow, MIN_REPETITIONS};
pub use model::{write_history_csv, ItemBatch, SaintHistoryRow, SaintModel};

use serde::{Deserialize, Serialize};

use crate::data::FeatureSet;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SaintVariant {
    /// Feature attention only; items are scored independently.
    S,
    /// Feature attention followed by chunked intersample attention.
    Q,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum LossKind {
    CrossEntropy,
    LabelSmoothing { epsilon: f64 },
}

impl LossKind {
    fn smoothing(self) -> f64 {
        match self {
            LossKind::CrossEntropy => 0.0,
            LossKind::LabelSmoothing { epsilon } => epsilon,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SaintConfig {
    pub variant: SaintVariant,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub attention_dropout: f64,
    pub mlp_dropout: f64,
    pub loss: LossKind,
    pub head_hidden: usize,
    /// Width multiplier of the feed-forward block.
    pub ff_mult: usize,
    pub learning_rate: f64,
    /// Items per page; also the intersample chunk size.
    pub page_len: usize,
    pub pages_per_batch: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps; 0 means no limit.
    pub max_steps: usize,
    /// Optional sample weights for unclicked and clicked items.
    pub class_weights: Option<[f64; 2]>,
    pub features: FeatureSet,
}

impl Default for SaintConfig {
    fn default() -> Self {
        Self::best(SaintVariant::Q)
    }
}

impl SaintConfig {
    /// The tuned setting: width 128, two layers, four heads, heavy dropout
    /// and label smoothing.
    pub fn best(variant: SaintVariant) -> Self {
        Self {
            variant,
            d_model: 128,
            n_layers: 2,
            n_heads: 4,
            attention_dropout: 0.79,
            mlp_dropout: 0.77,
            loss: LossKind::LabelSmoothing { epsilon: 0.1 },
            head_hidden: 16,
            ff_mult: 4,
            learning_rate: 1e-4,
            page_len: crate::data::DEFAULT_PAGE_LEN,
            pages_per_batch: 8,
            epochs: 10,
            max_steps: 0,
            class_weights: None,
            features: FeatureSet::clicker_default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!("{} heads do not divide model width {}", self.n_heads, self.d_model)));
        }
        if self.page_len == 0 || self.pages_per_batch == 0 {
            return Err(Error::Config("page length and pages per batch must be at least 1".into()));
        }
        if self.head_hidden == 0 || self.ff_mult == 0 {
            return Err(Error::Config("head and feed-forward widths must be positive".into()));
        }
        for (name, r) in [("attention", self.attention_dropout), ("mlp", self.mlp_dropout)] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("{name} dropout {r} outside [0, 1)")));
            }
        }
        if !(0.0..1.0).contains(&self.loss.smoothing()) {
            return Err(Error::Config(format!("label smoothing {} outside [0, 1)", self.loss.smoothing())));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if let Some(w) = self.class_weights {
            if w.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::Config(format!("class weights must be positive, got {w:?}")));
            }
        }
        Ok(())
    }

    /// Tokens per item, CLS included.
    pub fn n_tokens(&self) -> usize {
        1 + self.features.width()
    }
}
