//! Schema-complete synthetic click logs.
//!
//! Each page is built in three stages:
//!
//! 1. page-level query features (hour, platform, category, region, price level)
//!    and per-item features are drawn;
//! 2. items are ordered by a noisy production relevance score, which fixes
//!    the original positions;
//! 3. clicks are drawn from a logistic ground truth
//!
//!    ```text
//!    logit(pi_j) = own(j) - decay * (pos_j - 1) + strength * context(j)
//!    ```
//!
//!    where `context(j)` looks at the items directly above and below `j`:
//!    a more expensive neighbour makes the item look like a bargain, a more
//!    relevant neighbour draws attention away. The item above weighs more
//!    than the item below.
//!
//! The ground truth is a pure function of recorded features, so
//! [`GroundTruth::click_probabilities`] can act as an oracle click model.
//! Coefficients are calibrated for roughly three clicks per 30-item page
//! (CTR near 10%) at `context_strength = 1`; they do not describe any real
//! marketplace.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, FeatureSchema, ItemRecord, SearchPage, SplitTag};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_pages: usize,
    pub page_len: usize,
    pub seed: u64,
    pub context_strength: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self { n_pages: 1000, page_len: 30, seed: seed::DEFAULT_SEED, context_strength: 1.0 }
    }
}

/// Coefficients of the logistic click process.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub intercept: f64,
    pub relevance: f64,
    pub delivery: f64,
    pub category_match: f64,
    pub subcategory_match: f64,
    pub auction_winner: f64,
    pub log_price: f64,
    pub platform: [f64; 4],
    pub position_decay: f64,
    pub neighbour_price: f64,
    pub neighbour_relevance: f64,
    pub above_weight: f64,
    pub below_weight: f64,
    pub context_strength: f64,
}

impl GroundTruth {
    pub fn new(context_strength: f64) -> Self {
        Self {
            intercept: -2.95,
            relevance: 1.6,
            delivery: 0.4,
            category_match: 0.5,
            subcategory_match: 0.3,
            auction_winner: 0.2,
            log_price: -0.8,
            platform: [0.0, 0.1, -0.1, 0.2],
            position_decay: 0.06,
            neighbour_price: 1.0,
            neighbour_relevance: -2.0,
            above_weight: 0.65,
            below_weight: 0.35,
            context_strength,
        }
    }

    /// Position-free, context-free part of the logit.
    fn own_logit(&self, f: &ItemView) -> f64 {
        self.intercept
            + self.relevance * (f.rel - 0.5)
            + self.delivery * f.delivery
            + self.category_match * f.cat_match
            + self.subcategory_match * f.subcat_match
            + self.auction_winner * f.winner
            + self.log_price * (f.price.ln() - f.page_log_price)
            + self.platform[f.platform.min(3)]
    }

    fn neighbour_term(&self, me: &ItemView, other: &ItemView) -> f64 {
        self.neighbour_price * (other.price.ln() - me.price.ln())
            + self.neighbour_relevance * (other.rel - me.rel)
    }

    fn context(&self, views: &[ItemView], j: usize) -> f64 {
        let mut h = 0.0;
        if j > 0 {
            h += self.above_weight * self.neighbour_term(&views[j], &views[j - 1]);
        }
        if j + 1 < views.len() {
            h += self.below_weight * self.neighbour_term(&views[j], &views[j + 1]);
        }
        h
    }

    /// Click probabilities of the items of `page` as currently ordered
    /// (slot `j` holds `page.items[j]`).
    pub fn click_probabilities(&self, page: &SearchPage, schema: &FeatureSchema) -> Result<Vec<f64>> {
        let cols = Columns::resolve(schema)?;
        let page_log_price = mean_log_price(page, cols.price);
        let views: Vec<ItemView> =
            page.items.iter().map(|it| ItemView::from_item(it, &cols, page_log_price)).collect();
        Ok(self.probabilities_of(&views))
    }

    fn probabilities_of(&self, views: &[ItemView]) -> Vec<f64> {
        (0..views.len())
            .map(|j| {
                let logit = self.own_logit(&views[j]) - self.position_decay * j as f64
                    + self.context_strength * self.context(views, j);
                sigmoid(logit)
            })
            .collect()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct Columns {
    price: usize,
    rel: usize,
    delivery: usize,
    cat_match: usize,
    subcat_match: usize,
    winner: usize,
    platform: usize,
}

impl Columns {
    fn resolve(schema: &FeatureSchema) -> Result<Self> {
        Ok(Self {
            price: schema.require_cont("price")?,
            rel: schema.require_cont("rel_pred")?,
            delivery: schema.require_cat("with_delivery")?,
            cat_match: schema.require_cat("category_coincidence")?,
            subcat_match: schema.require_cat("subcategory_coincidence")?,
            winner: schema.require_cat("is_auction_winner")?,
            platform: schema.require_cat("platform")?,
        })
    }
}

fn mean_log_price(page: &SearchPage, price: usize) -> f64 {
    page.items.iter().map(|i| i.continuous[price].ln()).sum::<f64>() / page.len().max(1) as f64
}

struct ItemView {
    price: f64,
    rel: f64,
    delivery: f64,
    cat_match: f64,
    subcat_match: f64,
    winner: f64,
    platform: usize,
    page_log_price: f64,
}

impl ItemView {
    fn from_item(it: &ItemRecord, c: &Columns, page_log_price: f64) -> Self {
        Self {
            price: it.continuous[c.price],
            rel: it.continuous[c.rel],
            delivery: it.categorical[c.delivery] as f64,
            cat_match: it.categorical[c.cat_match] as f64,
            subcat_match: it.categorical[c.subcat_match] as f64,
            winner: it.categorical[c.winner] as f64,
            platform: it.categorical[c.platform] as usize,
            page_log_price,
        }
    }
}

/// Generates `n_pages` pages of `page_len` items. Identical configs produce
/// identical datasets.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<Dataset> {
    if config.n_pages < 1 {
        return Err(Error::Argument("n_pages must be at least 1".into()));
    }
    if config.page_len < 3 {
        return Err(Error::Argument("page_len must be at least 3".into()));
    }
    if !(config.context_strength >= 0.0) {
        return Err(Error::Argument("context_strength must be non-negative".into()));
    }
    let schema = FeatureSchema::rared(config.page_len);
    let truth = GroundTruth::new(config.context_strength);
    let cols = Columns::resolve(&schema)?;
    let mut rng = seed::rng(seed::derive(config.seed, "data"));
    let pages = (0..config.n_pages)
        .map(|q| generate_page(q as u64 + 1, config.page_len, &schema, &truth, &cols, &mut rng))
        .collect();
    Dataset::new(schema, pages, SplitTag::Full)
}

fn generate_page<R: Rng>(
    qid: u64,
    n: usize,
    schema: &FeatureSchema,
    truth: &GroundTruth,
    cols: &Columns,
    rng: &mut R,
) -> SearchPage {
    let std_normal = Normal::new(0.0, 1.0).expect("valid");
    let cat = |name: &str| schema.cat_index(name).expect("default schema");
    let cont = |name: &str| schema.cont_index(name).expect("default schema");

    let hour = rng.random_range(0..24u32);
    let platform = rng.random_range(0..4u32);
    let logical_category = rng.random_range(0..20u32);
    let page_region = rng.random_range(0..10u32);
    let page_price = (2000f64).ln() + 0.8 * std_normal.sample(rng);

    let mut items: Vec<(f64, ItemRecord)> = (0..n)
        .map(|_| {
            let rel = sigmoid(1.2 * std_normal.sample(rng));
            let cr = sigmoid(-3.0 + 1.0 * rel + 0.6 * std_normal.sample(rng));
            let winner = rng.random_bool(0.3);
            let price = (page_price + 0.6 * std_normal.sample(rng)).exp().round().max(1.0);
            let cat_match = rng.random_bool(0.8);
            let subcat_match = rng.random_bool(if cat_match { 0.5 } else { 0.1 });
            let bid = if winner { (rng.random::<f64>() * 100f64.ln()).exp() } else { 0.0 };
            let region = if rng.random_bool(0.7) { page_region } else { rng.random_range(0..10u32) };

            let mut categorical = vec![0u32; schema.categorical.len()];
            categorical[cat("hour")] = hour;
            categorical[cat("platform")] = platform;
            categorical[cat("logical_category_id")] = logical_category;
            categorical[cat("with_delivery")] = u32::from(rng.random_bool(0.5));
            categorical[cat("item_loc_id")] = rng.random_range(0..50);
            categorical[cat("item_mcat_id")] = rng.random_range(0..100);
            categorical[cat("item_cat_id")] = rng.random_range(0..30);
            categorical[cat("is_auction_winner")] = u32::from(winner);
            categorical[cat("campaign_type")] = if winner { rng.random_range(1..3) } else { 0 };
            categorical[cat("region")] = region;
            categorical[cat("category_coincidence")] = u32::from(cat_match);
            categorical[cat("subcategory_coincidence")] = u32::from(subcat_match);

            let mut continuous = vec![0.0; schema.continuous.len()];
            continuous[cont("price")] = price;
            continuous[cont("rel_pred")] = rel;
            continuous[cont("cr_pred")] = cr;
            continuous[cont("xn")] = if winner { 1.0 + 4.0 * rng.random::<f64>() } else { 0.0 };
            continuous[cont("click_bid")] = bid;

            // production ranking: relevance with noise, small promotion boost
            let production = rel + 0.15 * std_normal.sample(rng) + if winner { 0.05 } else { 0.0 };
            let item = ItemRecord {
                query_id: qid,
                position: 0,
                categorical,
                continuous,
                click: false,
                bid,
            };
            (production, item)
        })
        .collect();
    items.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut items: Vec<ItemRecord> = items.into_iter().map(|(_, it)| it).collect();

    let page_log_price = items.iter().map(|i| i.continuous[cols.price].ln()).sum::<f64>() / n as f64;
    let views: Vec<ItemView> =
        items.iter().map(|it| ItemView::from_item(it, cols, page_log_price)).collect();
    let probs = truth.probabilities_of(&views);
    let pos = schema.position_index();
    for (j, item) in items.iter_mut().enumerate() {
        item.position = j as u32 + 1;
        item.categorical[pos] = j as u32 + 1;
        let own = sigmoid(truth.own_logit(&views[j]) + 0.3 * std_normal.sample(rng));
        item.continuous[cont("ctr_pred")] = own;
        let vis = 0.97f64.powi(j as i32) * (0.9 + 0.1 * rng.random::<f64>());
        item.continuous[cont("visibility")] = vis.clamp(0.0, 1.0);
        item.click = rng.random_bool(probs[j]);
    }
    SearchPage { query_id: qid, items }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::permutation::Permutation;

    #[test]
    fn thousand_pages_average_about_three_clicks() {
        let ds = generate_synthetic(&SyntheticConfig::default()).unwrap();
        let clicks = ds.labels().iter().filter(|&&c| c).count() as f64;
        let per_page = clicks / ds.pages.len() as f64;
        assert!((2.4..=3.6).contains(&per_page), "{per_page}");
        let ctr = clicks / ds.n_items() as f64;
        assert!((0.08..=0.12).contains(&ctr), "{ctr}");
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SyntheticConfig { n_pages: 20, ..Default::default() };
        assert_eq!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&cfg).unwrap());
        let other = SyntheticConfig { seed: 7, ..cfg };
        assert_ne!(generate_synthetic(&other).unwrap(), generate_synthetic(&cfg).unwrap());
    }

    #[test]
    fn bids_only_for_auction_winners() {
        let ds = generate_synthetic(&SyntheticConfig { n_pages: 50, ..Default::default() }).unwrap();
        let w = ds.schema.cat_index("is_auction_winner").unwrap();
        for it in ds.pages.iter().flat_map(|p| &p.items) {
            if it.categorical[w] == 1 {
                assert!((1.0..=100.0).contains(&it.bid));
            } else {
                assert_eq!(it.bid, 0.0);
            }
        }
    }

    fn neighbour_swap_changes(strength: f64) -> (usize, usize) {
        let ds = generate_synthetic(&SyntheticConfig {
            n_pages: 40,
            context_strength: strength,
            ..Default::default()
        })
        .unwrap();
        let truth = GroundTruth::new(strength);
        let (mut changed, mut total) = (0, 0);
        for page in &ds.pages {
            let base = truth.click_probabilities(page, &ds.schema).unwrap();
            for j in 1..page.len() - 1 {
                let perm = Permutation::identity(page.len()).transposed(j - 1, j + 1);
                let mut swapped = page.clone();
                swapped.items = perm.order().iter().map(|&i| page.items[i].clone()).collect();
                let p = truth.click_probabilities(&swapped, &ds.schema).unwrap();
                total += 1;
                if (p[j] - base[j]).abs() > 1e-12 {
                    changed += 1;
                }
            }
        }
        (changed, total)
    }

    #[test]
    fn neighbours_matter_only_with_context_strength() {
        let (changed, total) = neighbour_swap_changes(1.0);
        assert!(changed * 2 >= total, "{changed}/{total}");
        let (changed, _) = neighbour_swap_changes(0.0);
        assert_eq!(changed, 0);
    }
}
