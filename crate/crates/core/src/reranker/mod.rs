//! Revenue-aware reranking.
//!
//! An MLP scores every item of a page and the page is shown in descending
//! score order. Training compares the current order with every order that
//! differs by one transposition: a frozen click model prices each trial, and
//! swaps that would raise the page's regularised revenue pull the scores of
//! the two items toward the better order. Inference only runs the MLP.

mod model;

pub use model::{write_history_csv, RerankerHistoryRow, RerankerModel};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clicker::{expected_page_revenue, ClickModel, RevenueMode};
use crate::data::{Column, FeatureSchema, SearchPage};
use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::permutation::Permutation;

/// The reranker's per-item inputs, in column order.
pub const RERANK_FEATURES: [&str; 11] = [
    "with_delivery",
    "price",
    "rel_pred",
    "ctr_pred",
    "cr_pred",
    "is_auction_winner",
    "pos_fixed",
    "click_bid",
    "category_coincidence",
    "subcategory_coincidence",
    "platform",
];

/// Bids above this are rare; used to bring `click_bid` near unit scale.
const BID_SCALE: f64 = 100.0;

/// Per-item model inputs `[N, 11]` of a page in its given order.
///
/// Price is min-max scaled within the page (0 everywhere on a constant-price
/// page), the bid is divided by 100, and categorical codes are divided by
/// their largest possible value so every input lies roughly in `[0, 1]`.
pub fn page_features(page: &SearchPage, schema: &FeatureSchema) -> Result<Tensor> {
    let n = page.len();
    if n == 0 {
        return Err(Error::Argument(format!("page {} has no items", page.query_id)));
    }
    let price = schema.require_cont("price")?;
    let (lo, hi) = page
        .items
        .iter()
        .map(|it| it.continuous[price])
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    enum Input {
        Price,
        Bid,
        Cat(usize, f64),
        Cont(usize),
    }
    let inputs = RERANK_FEATURES
        .iter()
        .map(|&name| match (name, schema.column(name)) {
            ("price", _) => Ok(Input::Price),
            ("click_bid", _) => Ok(Input::Bid),
            (_, Some(Column::Categorical(c))) => Ok(Input::Cat(c, (schema.categorical[c].cardinality.max(2) - 1) as f64)),
            (_, Some(Column::Continuous(c))) => Ok(Input::Cont(c)),
            _ => Err(Error::Schema(format!("missing reranker input '{name}'"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let mut data = Vec::with_capacity(n * inputs.len());
    for it in &page.items {
        for input in &inputs {
            data.push(match *input {
                Input::Price if hi > lo => (it.continuous[price] - lo) / (hi - lo),
                Input::Price => 0.0,
                Input::Bid => it.bid / BID_SCALE,
                Input::Cat(c, top) => it.categorical[c] as f64 / top,
                Input::Cont(c) => it.continuous[c],
            });
        }
    }
    Tensor::new(&[n, RERANK_FEATURES.len()], data)
}

/// Bids used during training: `r_organic + alpha * r`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RevenueRegularization {
    pub alpha: f64,
    pub r_organic: f64,
}

impl RevenueRegularization {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.r_organic >= 0.0) {
            return Err(Error::Config(format!("organic revenue must be non-negative, got {}", self.r_organic)));
        }
        Ok(())
    }

    pub fn apply(&self, bids: &[f64]) -> Vec<f64> {
        bids.iter().map(|r| self.r_organic + self.alpha * r).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum TranspositionBudget {
    /// Every one of the `N(N-1)/2` single swaps.
    All,
    /// `m` swaps drawn without replacement.
    Sample { m: usize },
}

/// Slot pairs `(j, j')` with `j < j'` defining the trial orders. Sampled
/// pairs come back in the same order as under [`TranspositionBudget::All`].
pub fn trial_transpositions(n: usize, budget: TranspositionBudget, rng: &mut impl Rng) -> Result<Vec<(usize, usize)>> {
    let all: Vec<(usize, usize)> = (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect();
    match budget {
        TranspositionBudget::All => Ok(all),
        TranspositionBudget::Sample { m } => {
            if m == 0 || m > all.len() {
                return Err(Error::Config(format!("{m} transpositions requested from {} available", all.len())));
            }
            let mut idx = rand::seq::index::sample(rng, all.len(), m).into_vec();
            idx.sort_unstable();
            Ok(idx.into_iter().map(|i| all[i]).collect())
        }
    }
}

/// Regularised page revenue of `page` displayed under `perm`.
fn page_revenue(probabilities: &[f64], perm: &Permutation, reg_bids: &[f64], mode: RevenueMode) -> Result<f64> {
    let shown: Vec<f64> = perm.order().iter().map(|&i| reg_bids[i]).collect();
    expected_page_revenue(probabilities, &shown, mode)
}

/// `R(perm') - R(perm)`: change of the page's regularised revenue, as
/// predicted by the clicker, when the page is shown under `trial` instead
/// of `perm`.
pub fn delta_revenue_abs(
    clicker: &dyn ClickModel,
    page: &SearchPage,
    perm: &Permutation,
    trial: &Permutation,
    reg: RevenueRegularization,
    mode: RevenueMode,
) -> Result<f64> {
    Ok(trial_deltas(clicker, page, perm, &[trial.clone()], reg, mode)?[0])
}

/// Revenue changes of many trial orders against `perm`, with one batched
/// clicker call.
pub fn trial_deltas(
    clicker: &dyn ClickModel,
    page: &SearchPage,
    perm: &Permutation,
    trials: &[Permutation],
    reg: RevenueRegularization,
    mode: RevenueMode,
) -> Result<Vec<f64>> {
    let bids = reg.apply(&page.bids());
    let mut shown = Vec::with_capacity(trials.len() + 1);
    shown.push(page.reordered(perm, clicker.schema())?);
    for t in trials {
        shown.push(page.reordered(t, clicker.schema())?);
    }
    let p = clicker.predict_displayed_many(&shown)?;
    let base = page_revenue(&p[0], perm, &bids, mode)?;
    trials.iter().zip(&p[1..]).map(|(t, q)| Ok(page_revenue(q, t, &bids, mode)? - base)).collect()
}

/// Pairwise transposition loss and its gradient with respect to `scores`.
///
/// For each trial swapping slots `j < j'` of `perm`, let `u` be the item
/// shown at `j` and `l` the item at `j'`. The term is
/// `max(delta, 0) * ln(1 + exp(-sigma * (s_l - s_u)))`: a swap that would
/// raise revenue is penalised until the lower item is scored well above the
/// upper one.
pub fn transposition_loss(
    scores: &[f64],
    perm: &Permutation,
    trials: &[(usize, usize)],
    deltas: &[f64],
    sigma: f64,
) -> Result<(f64, Vec<f64>)> {
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
    }
    if trials.len() != deltas.len() {
        return Err(Error::Argument(format!("{} trials for {} revenue deltas", trials.len(), deltas.len())));
    }
    if perm.len() != scores.len() {
        return Err(Error::Argument(format!("permutation of {} for {} scores", perm.len(), scores.len())));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; scores.len()];
    for (&(a, b), &delta) in trials.iter().zip(deltas) {
        let w = delta.max(0.0);
        if w == 0.0 {
            continue;
        }
        let (u, l) = (perm.item_at(a), perm.item_at(b));
        let z = -sigma * (scores[l] - scores[u]);
        loss += w * softplus(z);
        // d softplus(z) / dz = sigmoid(z)
        let g = w * sigma * crate::numcore::sigmoid(z);
        grad[l] -= g;
        grad[u] += g;
    }
    Ok((loss, grad))
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RerankerConfig {
    pub hidden: Vec<usize>,
    pub regularization: RevenueRegularization,
    pub sigma: f64,
    pub budget: TranspositionBudget,
    pub revenue_mode: RevenueMode,
    /// Click threshold for validation revenue.
    pub threshold: f64,
    /// Position decay of the relevance profile used for validation.
    pub decay: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Pages scored together in one optimizer step.
    pub pages_per_step: usize,
    /// Training pages visited per epoch; 0 means all of them.
    pub pages_per_epoch: usize,
    pub bn_momentum: f64,
}

impl Default for RerankerConfig {
    fn default() -> Self {
        Self {
            hidden: vec![315, 122, 48],
            regularization: RevenueRegularization { alpha: 1.0, r_organic: 50.0 },
            sigma: 1.0,
            budget: TranspositionBudget::All,
            revenue_mode: RevenueMode::Soft,
            threshold: 0.18,
            decay: crate::clicker::DEFAULT_DECAY,
            learning_rate: 0.01,
            epochs: 3,
            pages_per_step: 1,
            pages_per_epoch: 0,
            bn_momentum: 0.1,
        }
    }
}

impl RerankerConfig {
    /// Tuned organic revenue, hidden sizes and click threshold for a click
    /// model kind.
    pub fn for_clicker(kind: &str, alpha: f64) -> Self {
        let (r_organic, hidden, threshold) = match kind {
            "ctrv" => (10.0, vec![640, 146, 53], 0.18),
            "gbdt-c" => (15.0, vec![220, 100, 62], 0.18),
            "saint-q" | "saint-s" => (50.0, vec![1024, 512, 128], 0.22),
            _ => (50.0, vec![315, 122, 48], 0.18),
        };
        Self { hidden, regularization: RevenueRegularization { alpha, r_organic }, threshold, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.regularization.validate()?;
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config(format!("hidden sizes must be positive, got {:?}", self.hidden)));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        if let TranspositionBudget::Sample { m: 0 } = self.budget {
            return Err(Error::Config("a sampled budget needs at least one transposition".into()));
        }
        if !(self.threshold > 0.0) {
            return Err(Error::Config(format!("click threshold must be positive, got {}", self.threshold)));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::Config(format!("decay {} outside (0, 1)", self.decay)));
        }
        if !(self.learning_rate > 0.0) || self.pages_per_step == 0 {
            return Err(Error::Config("learning rate and pages per step must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config(format!("batch-norm momentum {} outside [0, 1]", self.bn_momentum)));
        }
        Ok(())
    }
}
