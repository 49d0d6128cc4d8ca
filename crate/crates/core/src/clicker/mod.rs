//! Click models: the shared prediction interface, the decayed-CTR baseline,
//! click thresholding and page revenue.

mod ctrv;
mod truth;

pub use ctrv::{ctrv_predict, Ctrv, DEFAULT_DECAY};
pub use truth::TruthClicker;

use serde::{Deserialize, Serialize};

use crate::data::{FeatureSchema, SearchPage};
use crate::error::{Error, Result};
use crate::permutation::Permutation;

/// Per-slot click probabilities of a page shown under `permutation`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClickPrediction {
    /// `probabilities[slot]` belongs to item `permutation.item_at(slot)`.
    pub probabilities: Vec<f64>,
    pub permutation: Permutation,
}

/// A trained click model. Implementations are immutable after training and
/// safe to share between threads.
pub trait ClickModel: Send + Sync {
    fn kind(&self) -> &'static str;

    fn schema(&self) -> &FeatureSchema;

    /// Probabilities for a page in display order; position fields are
    /// assumed to already match the display slots.
    fn predict_displayed(&self, page: &SearchPage) -> Result<Vec<f64>>;

    /// Batched [`ClickModel::predict_displayed`].
    fn predict_displayed_many(&self, pages: &[SearchPage]) -> Result<Vec<Vec<f64>>> {
        pages.iter().map(|p| self.predict_displayed(p)).collect()
    }

    /// Probabilities for `page` displayed under `perm`.
    fn predict(&self, page: &SearchPage, perm: &Permutation) -> Result<ClickPrediction> {
        let shown = page.reordered(perm, self.schema())?;
        Ok(ClickPrediction { probabilities: self.predict_displayed(&shown)?, permutation: perm.clone() })
    }
}

impl<T: ClickModel + ?Sized> ClickModel for Box<T> {
    fn kind(&self) -> &'static str {
        (**self).kind()
    }
    fn schema(&self) -> &FeatureSchema {
        (**self).schema()
    }
    fn predict_displayed(&self, page: &SearchPage) -> Result<Vec<f64>> {
        (**self).predict_displayed(page)
    }
    fn predict_displayed_many(&self, pages: &[SearchPage]) -> Result<Vec<Vec<f64>>> {
        (**self).predict_displayed_many(pages)
    }
}

/// Binary clicks `c_i = [p_i >= h]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClickVector {
    pub clicks: Vec<bool>,
    pub threshold: f64,
}

pub fn threshold_clicks(probabilities: &[f64], h: f64) -> Result<ClickVector> {
    if !(h > 0.0) {
        return Err(Error::Config(format!("click threshold must be positive, got {h}")));
    }
    Ok(ClickVector { clicks: probabilities.iter().map(|&p| p >= h).collect(), threshold: h })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum RevenueMode {
    /// Expected revenue `sum p_i r_i`.
    Soft,
    /// Revenue of thresholded clicks `sum [p_i >= h] r_i`.
    Thresholded { h: f64 },
}

/// Page revenue from per-slot probabilities and bids.
pub fn expected_page_revenue(probabilities: &[f64], bids: &[f64], mode: RevenueMode) -> Result<f64> {
    if probabilities.len() != bids.len() {
        return Err(Error::Argument(format!(
            "{} probabilities for {} bids",
            probabilities.len(),
            bids.len()
        )));
    }
    if let Some(b) = bids.iter().find(|b| !(**b >= 0.0)) {
        return Err(Error::Integrity(format!("negative or missing bid {b}")));
    }
    Ok(match mode {
        RevenueMode::Soft => probabilities.iter().zip(bids).map(|(p, r)| p * r).sum(),
        RevenueMode::Thresholded { h } => {
            let c = threshold_clicks(probabilities, h)?;
            c.clicks.iter().zip(bids).filter(|(c, _)| **c).map(|(_, r)| r).sum()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn threshold_includes_ties() {
        let c = threshold_clicks(&[0.3, 0.18, 0.1], 0.18).unwrap();
        assert_eq!(c.clicks, vec![true, true, false]);
        assert!(threshold_clicks(&[0.3, 0.2], 0.5).unwrap().clicks.iter().all(|c| !c));
        assert!(matches!(threshold_clicks(&[0.1], 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn revenue_modes() {
        let soft = expected_page_revenue(&[0.5, 0.5], &[10.0, 10.0], RevenueMode::Soft).unwrap();
        assert_eq!(soft, 10.0);
        let hard = expected_page_revenue(&[0.9, 0.0, 0.5], &[10.0, 20.0, 30.0], RevenueMode::Thresholded { h: 0.2 }).unwrap();
        assert_eq!(hard, 40.0);
        let none = expected_page_revenue(&[0.0, 0.0], &[5.0, 6.0], RevenueMode::Thresholded { h: 0.2 }).unwrap();
        assert_eq!(none, 0.0);
        assert!(matches!(
            expected_page_revenue(&[0.5], &[-1.0], RevenueMode::Soft),
            Err(Error::Integrity(_))
        ));
    }

    proptest! {
        #[test]
        fn thresholding_is_monotone(p in prop::collection::vec(0.0f64..1.0, 1..20), h1 in 0.01f64..1.0, dh in 0.0f64..0.5) {
            let lo = threshold_clicks(&p, h1).unwrap();
            let hi = threshold_clicks(&p, h1 + dh).unwrap();
            for (a, b) in lo.clicks.iter().zip(&hi.clicks) {
                prop_assert!(*a >= *b);
            }
        }

        #[test]
        fn soft_revenue_is_linear_in_bids(
            p in prop::collection::vec(0.0f64..1.0, 5),
            r1 in prop::collection::vec(0.0f64..100.0, 5),
            r2 in prop::collection::vec(0.0f64..100.0, 5),
            a in 0.0f64..3.0,
        ) {
            let mix: Vec<f64> = r1.iter().zip(&r2).map(|(x, y)| a * x + y).collect();
            let lhs = expected_page_revenue(&p, &mix, RevenueMode::Soft).unwrap();
            let rhs = a * expected_page_revenue(&p, &r1, RevenueMode::Soft).unwrap()
                + expected_page_revenue(&p, &r2, RevenueMode::Soft).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()));
        }
    }
}
