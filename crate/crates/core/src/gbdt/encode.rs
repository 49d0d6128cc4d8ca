use serde::{Deserialize, Serialize};

/// Pseudo-count pulling rare categories toward the prior.
pub const SMOOTHING: f64 = 100.0;

/// Smoothed mean-target encoding of one categorical column.
///
/// Slot 0 holds the out-of-page category; slot `c + 1` holds category `c`.
/// Categories never seen during fitting encode to the prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetEncoder {
    pub prior: f64,
    pub values: Vec<f64>,
}

impl TargetEncoder {
    pub fn fit(categories: impl Iterator<Item = Option<u32>>, labels: &[bool], prior: f64, cardinality: u32) -> Self {
        let slots = cardinality as usize + 1;
        let mut sum = vec![0.0; slots];
        let mut count = vec![0.0; slots];
        for (c, &y) in categories.zip(labels) {
            let s = slot(c);
            if s < slots {
                count[s] += 1.0;
                sum[s] += y as u8 as f64;
            }
        }
        let values = sum.iter().zip(&count).map(|(s, n)| (s + SMOOTHING * prior) / (n + SMOOTHING)).collect();
        Self { prior, values }
    }

    #[inline]
    pub fn encode(&self, category: Option<u32>) -> f64 {
        self.values.get(slot(category)).copied().unwrap_or(self.prior)
    }
}

#[inline]
fn slot(c: Option<u32>) -> usize {
    c.map_or(0, |v| v as usize + 1)
}
