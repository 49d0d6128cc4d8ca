use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A display order for the items of one page.
///
/// `order()[slot]` is the index (in original page order) of the item shown
/// at display slot `slot`. Slots and item indices are zero-based; the
/// original order is the identity.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Permutation {
    order: Vec<usize>,
}

impl Permutation {
    pub fn new(order: Vec<usize>) -> Result<Self> {
        let n = order.len();
        let mut seen = vec![false; n];
        for &i in &order {
            if i >= n || seen[i] {
                return Err(Error::Argument(format!(
                    "order {order:?} is not a bijection on 0..{n}"
                )));
            }
            seen[i] = true;
        }
        Ok(Self { order })
    }

    pub fn identity(n: usize) -> Self {
        Self { order: (0..n).collect() }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Item shown at `slot`.
    pub fn item_at(&self, slot: usize) -> usize {
        self.order[slot]
    }

    /// `slots()[item]` is the display slot of `item`.
    pub fn slots(&self) -> Vec<usize> {
        let mut slots = vec![0; self.order.len()];
        for (slot, &item) in self.order.iter().enumerate() {
            slots[item] = slot;
        }
        slots
    }

    pub fn is_identity(&self) -> bool {
        self.order.iter().enumerate().all(|(s, &i)| s == i)
    }

    /// The same order with the items at two display slots exchanged.
    pub fn transposed(&self, a: usize, b: usize) -> Self {
        let mut order = self.order.clone();
        order.swap(a, b);
        Self { order }
    }

    /// Stable descending sort of scores; equal scores keep original order.
    pub fn from_scores(scores: &[f64]) -> Self {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        Self { order }
    }
}

impl TryFrom<Vec<usize>> for Permutation {
    type Error = Error;

    fn try_from(order: Vec<usize>) -> Result<Self> {
        Permutation::new(order)
    }
}

impl From<Permutation> for Vec<usize> {
    fn from(p: Permutation) -> Self {
        p.order
    }
}
