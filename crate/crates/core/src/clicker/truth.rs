use super::ClickModel;
use crate::data::synthetic::GroundTruth;
use crate::data::{FeatureSchema, SearchPage};
use crate::error::Result;

/// The synthetic generator's own click process used as a click model.
#[derive(Clone, Debug)]
pub struct TruthClicker {
    pub truth: GroundTruth,
    pub schema: FeatureSchema,
}

impl TruthClicker {
    pub fn new(context_strength: f64, schema: &FeatureSchema) -> Self {
        Self { truth: GroundTruth::new(context_strength), schema: schema.clone() }
    }
}

impl ClickModel for TruthClicker {
    fn kind(&self) -> &'static str {
        "truth"
    }

    fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    fn predict_displayed(&self, page: &SearchPage) -> Result<Vec<f64>> {
        self.truth.click_probabilities(page, &self.schema)
    }
}
