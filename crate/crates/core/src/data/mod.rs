//! Click-log data: schema, pages, CSV ingestion, splitting, synthetic
//! generation and neighbour feature expansion.

mod context;
mod csv_io;
mod schema;
mod split;
pub mod synthetic;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

pub use context::{expand_context, expand_page, ContextExpandedMatrix, MISSING_CATEGORY};
pub use csv_io::{load_csv, read_csv, save_csv, write_csv};
pub use schema::{
    CategoricalFeature, Column, FeatureSchema, FeatureSet, ResolvedFeatures, DEFAULT_PAGE_LEN,
    PROBABILITY_COLUMNS,
};
pub use split::{split, split_sizes, DEFAULT_SPLIT_RATIOS};
pub use synthetic::{generate_synthetic, SyntheticConfig};

use crate::error::{Error, Result};
use crate::permutation::Permutation;

/// One displayed item of one search page.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub query_id: u64,
    /// One-based display position in the original order.
    pub position: u32,
    pub categorical: Vec<u32>,
    pub continuous: Vec<f64>,
    pub click: bool,
    /// Revenue per click. Zero for items that did not win the auction.
    pub bid: f64,
}

/// The items of one query, ordered by their original display position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchPage {
    pub query_id: u64,
    pub items: Vec<ItemRecord>,
}

impl SearchPage {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn labels(&self) -> Vec<bool> {
        self.items.iter().map(|i| i.click).collect()
    }

    pub fn bids(&self) -> Vec<f64> {
        self.items.iter().map(|i| i.bid).collect()
    }

    /// The page as it would be displayed under `perm`: items appear in
    /// permuted order and their position fields are rewritten to the new
    /// display slots.
    pub fn reordered(&self, perm: &Permutation, schema: &FeatureSchema) -> Result<SearchPage> {
        if perm.len() != self.len() {
            return Err(Error::Argument(format!(
                "permutation of length {} applied to page of {} items",
                perm.len(),
                self.len()
            )));
        }
        let pos = schema.position_index();
        let items = perm
            .order()
            .iter()
            .enumerate()
            .map(|(slot, &i)| {
                let mut item = self.items[i].clone();
                item.position = slot as u32 + 1;
                item.categorical[pos] = slot as u32 + 1;
                item
            })
            .collect();
        Ok(SearchPage { query_id: self.query_id, items })
    }

    pub fn continuous_column(&self, index: usize) -> Vec<f64> {
        self.items.iter().map(|i| i.continuous[index]).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Full,
    Train,
    Val,
    Test,
}

/// A collection of pages sharing one schema and one page length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub schema: FeatureSchema,
    pub pages: Vec<SearchPage>,
    pub split: SplitTag,
}

impl Dataset {
    /// Builds a dataset, checking the page-level invariants.
    pub fn new(schema: FeatureSchema, pages: Vec<SearchPage>, split: SplitTag) -> Result<Self> {
        schema.validate()?;
        let ds = Self { schema, pages, split };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.page_len();
        let pos_idx = self.schema.position_index();
        let bid_idx = self.schema.bid_index();
        let prob_idx: Vec<usize> = PROBABILITY_COLUMNS
            .iter()
            .filter_map(|c| self.schema.cont_index(c))
            .collect();
        let mut qids = HashSet::new();
        for page in &self.pages {
            if !qids.insert(page.query_id) {
                return Err(Error::Integrity(format!("duplicate query id {}", page.query_id)));
            }
            if page.len() != n {
                return Err(Error::Integrity(format!(
                    "qid={} has {} items, expected page length {n}",
                    page.query_id,
                    page.len()
                )));
            }
            for (slot, item) in page.items.iter().enumerate() {
                if item.query_id != page.query_id {
                    return Err(Error::Integrity(format!(
                        "item with qid={} inside page qid={}",
                        item.query_id, page.query_id
                    )));
                }
                if item.position as usize != slot + 1 || item.categorical[pos_idx] != item.position {
                    return Err(Error::Integrity(format!(
                        "qid={}: positions are not 1..{n} in order",
                        page.query_id
                    )));
                }
                if item.categorical.len() != self.schema.categorical.len()
                    || item.continuous.len() != self.schema.continuous.len()
                {
                    return Err(Error::Integrity(format!(
                        "qid={}: item width does not match schema",
                        page.query_id
                    )));
                }
                if !(item.bid >= 0.0) || item.bid != item.continuous[bid_idx] {
                    return Err(Error::Integrity(format!(
                        "qid={}: bid {} must be non-negative and match {}",
                        page.query_id, item.bid, self.schema.bid_column
                    )));
                }
                for &p in &prob_idx {
                    let v = item.continuous[p];
                    if !(0.0..=1.0).contains(&v) {
                        return Err(Error::Integrity(format!(
                            "qid={}: {} = {v} outside [0, 1]",
                            page.query_id, self.schema.continuous[p]
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Items per page (zero for an empty dataset).
    pub fn page_len(&self) -> usize {
        self.pages.first().map_or(0, SearchPage::len)
    }

    pub fn n_items(&self) -> usize {
        self.pages.iter().map(SearchPage::len).sum()
    }

    pub fn labels(&self) -> Vec<bool> {
        self.pages.iter().flat_map(|p| p.items.iter().map(|i| i.click)).collect()
    }

    pub fn with_split(mut self, split: SplitTag) -> Self {
        self.split = split;
        self
    }

    /// A dataset holding only the first `n` pages.
    pub fn head(&self, n: usize) -> Self {
        Self {
            schema: self.schema.clone(),
            pages: self.pages.iter().take(n).cloned().collect(),
            split: self.split,
        }
    }
}
