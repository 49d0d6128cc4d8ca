use serde::{Deserialize, Serialize};

use super::ClickModel;
use crate::data::{FeatureSchema, SearchPage};
use crate::error::{Error, Result};

/// Decay factor used when a config does not set one.
pub const DEFAULT_DECAY: f64 = 0.9;

/// `p_j = pointwise_j * P^(j-1)` for display slots `j = 1..N`.
pub fn ctrv_predict(pointwise: &[f64], decay: f64) -> Result<Vec<f64>> {
    check_decay(decay)?;
    if let Some(p) = pointwise.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Argument(format!("pointwise probability {p} outside [0, 1]")));
    }
    let mut v = 1.0;
    Ok(pointwise
        .iter()
        .map(|p| {
            let out = p * v;
            v *= decay;
            out
        })
        .collect())
}

fn check_decay(decay: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::Config(format!("decay factor P={decay} outside [0, 1]")));
    }
    Ok(())
}

/// Production CTR prediction decayed by display slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ctrv {
    pub decay: f64,
    pub schema: FeatureSchema,
    ctr_column: usize,
}

impl Ctrv {
    pub fn new(schema: &FeatureSchema, decay: f64) -> Result<Self> {
        check_decay(decay)?;
        Ok(Self { decay, schema: schema.clone(), ctr_column: schema.require_cont("ctr_pred")? })
    }
}

impl ClickModel for Ctrv {
    fn kind(&self) -> &'static str {
        "ctrv"
    }

    fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    fn predict_displayed(&self, page: &SearchPage) -> Result<Vec<f64>> {
        ctrv_predict(&page.continuous_column(self.ctr_column), self.decay)
    }
}
