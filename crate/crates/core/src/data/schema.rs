use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Page length used throughout the default configuration.
pub const DEFAULT_PAGE_LEN: usize = 30;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoricalFeature {
    pub name: String,
    pub cardinality: u32,
}

impl CategoricalFeature {
    pub fn new(name: &str, cardinality: u32) -> Self {
        Self { name: name.to_string(), cardinality }
    }
}

/// Where a CSV column lands in an [`super::ItemRecord`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Column {
    QueryId,
    Categorical(usize),
    Continuous(usize),
    Label,
}

/// Typed description of the columns of a click log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub categorical: Vec<CategoricalFeature>,
    pub continuous: Vec<String>,
    pub label_column: String,
    pub query_id_column: String,
    pub position_column: String,
    pub bid_column: String,
    /// Column names in file order. Every feature appears exactly once.
    pub column_order: Vec<String>,
}

/// Continuous columns whose values are probabilities.
pub const PROBABILITY_COLUMNS: [&str; 4] = ["rel_pred", "cr_pred", "ctr_pred", "visibility"];

impl FeatureSchema {
    /// The full click-log layout: query features, item features, the
    /// per-click bid and the click label. `page_len` sets the cardinality of
    /// the position column (values `1..=page_len`).
    pub fn rared(page_len: usize) -> Self {
        let categorical = vec![
            CategoricalFeature::new("hour", 24),
            CategoricalFeature::new("platform", 4),
            CategoricalFeature::new("logical_category_id", 20),
            CategoricalFeature::new("with_delivery", 2),
            CategoricalFeature::new("item_loc_id", 50),
            CategoricalFeature::new("item_mcat_id", 100),
            CategoricalFeature::new("pos_fixed", page_len as u32 + 1),
            CategoricalFeature::new("item_cat_id", 30),
            CategoricalFeature::new("is_auction_winner", 2),
            CategoricalFeature::new("campaign_type", 3),
            CategoricalFeature::new("region", 10),
            CategoricalFeature::new("category_coincidence", 2),
            CategoricalFeature::new("subcategory_coincidence", 2),
        ];
        let continuous = ["price", "rel_pred", "cr_pred", "ctr_pred", "xn", "visibility", "click_bid"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let column_order = [
            "qid",
            "hour",
            "platform",
            "logical_category_id",
            "with_delivery",
            "item_loc_id",
            "item_mcat_id",
            "pos_fixed",
            "price",
            "item_cat_id",
            "rel_pred",
            "cr_pred",
            "ctr_pred",
            "is_auction_winner",
            "campaign_type",
            "xn",
            "visibility",
            "region",
            "click_bid",
            "category_coincidence",
            "subcategory_coincidence",
            "click",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let schema = Self {
            categorical,
            continuous,
            label_column: "click".into(),
            query_id_column: "qid".into(),
            position_column: "pos_fixed".into(),
            bid_column: "click_bid".into(),
            column_order,
        };
        schema.validate().expect("built-in schema is valid");
        schema
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        let names = self
            .categorical
            .iter()
            .map(|c| c.name.as_str())
            .chain(self.continuous.iter().map(String::as_str))
            .chain([self.label_column.as_str(), self.query_id_column.as_str()]);
        for name in names {
            if !seen.insert(name) {
                return Err(Error::Schema(format!("duplicate column name '{name}'")));
            }
        }
        if self.cat_index(&self.position_column).is_none() {
            return Err(Error::Schema(format!(
                "position column '{}' must be categorical",
                self.position_column
            )));
        }
        if self.cont_index(&self.bid_column).is_none() {
            return Err(Error::Schema(format!(
                "bid column '{}' must be continuous",
                self.bid_column
            )));
        }
        if self.column_order.len() != seen.len() {
            return Err(Error::Schema(format!(
                "column order lists {} columns, schema defines {}",
                self.column_order.len(),
                seen.len()
            )));
        }
        for name in &self.column_order {
            if !seen.contains(name.as_str()) {
                return Err(Error::Schema(format!("column order names unknown column '{name}'")));
            }
        }
        Ok(())
    }

    pub fn cat_index(&self, name: &str) -> Option<usize> {
        self.categorical.iter().position(|c| c.name == name)
    }

    pub fn cont_index(&self, name: &str) -> Option<usize> {
        self.continuous.iter().position(|c| c == name)
    }

    pub fn position_index(&self) -> usize {
        self.cat_index(&self.position_column).expect("validated")
    }

    pub fn bid_index(&self) -> usize {
        self.cont_index(&self.bid_column).expect("validated")
    }

    pub fn column(&self, name: &str) -> Option<Column> {
        if name == self.query_id_column {
            Some(Column::QueryId)
        } else if name == self.label_column {
            Some(Column::Label)
        } else if let Some(i) = self.cat_index(name) {
            Some(Column::Categorical(i))
        } else {
            self.cont_index(name).map(Column::Continuous)
        }
    }

    pub fn require_cat(&self, name: &str) -> Result<usize> {
        self.cat_index(name)
            .ok_or_else(|| Error::Schema(format!("missing categorical column '{name}'")))
    }

    pub fn require_cont(&self, name: &str) -> Result<usize> {
        self.cont_index(name)
            .ok_or_else(|| Error::Schema(format!("missing continuous column '{name}'")))
    }
}

/// A named selection of schema features used as a model's input.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub categorical: Vec<String>,
    pub continuous: Vec<String>,
}

impl FeatureSet {
    /// The eleven click-model inputs: seven categorical, four continuous.
    pub fn clicker_default() -> Self {
        Self {
            categorical: [
                "with_delivery",
                "platform",
                "is_auction_winner",
                "campaign_type",
                "pos_fixed",
                "region",
                "hour",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            continuous: ["price", "ctr_pred", "xn", "click_bid"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.categorical.len() + self.continuous.len()
    }

    pub fn resolve(&self, schema: &FeatureSchema) -> Result<ResolvedFeatures> {
        let cat = self
            .categorical
            .iter()
            .map(|n| schema.require_cat(n))
            .collect::<Result<Vec<_>>>()?;
        let cont = self
            .continuous
            .iter()
            .map(|n| schema.require_cont(n))
            .collect::<Result<Vec<_>>>()?;
        let cardinalities = cat.iter().map(|&i| schema.categorical[i].cardinality).collect();
        let position_slot = self.categorical.iter().position(|n| *n == schema.position_column);
        Ok(ResolvedFeatures { cat, cont, cardinalities, position_slot })
    }
}

/// A [`FeatureSet`] bound to column indices of a particular schema.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResolvedFeatures {
    pub cat: Vec<usize>,
    pub cont: Vec<usize>,
    pub cardinalities: Vec<u32>,
    /// Index within `cat` of the position feature, if selected.
    pub position_slot: Option<usize>,
}

impl ResolvedFeatures {
    pub fn width(&self) -> usize {
        self.cat.len() + self.cont.len()
    }
}
