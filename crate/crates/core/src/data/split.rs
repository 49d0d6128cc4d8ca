use rand::seq::SliceRandom;

use super::{Dataset, SplitTag};
use crate::error::{Error, Result};
use crate::seed;

pub const DEFAULT_SPLIT_RATIOS: [f64; 3] = [0.65, 0.2, 0.15];

/// Page counts for each part using largest-remainder rounding; ties go to
/// the earlier part.
pub fn split_sizes(n_pages: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 || ratios.iter().any(|r| !(*r >= 0.0)) {
        return Err(Error::Config(format!(
            "split ratios {ratios:?} must be non-negative and sum to 1"
        )));
    }
    let exact: Vec<f64> = ratios.iter().map(|r| r * n_pages as f64).collect();
    // guard against representation error such as 0.15 * 68380 = 10256.999...
    let mut sizes: Vec<usize> = exact.iter().map(|e| (e + 1e-6).floor() as usize).collect();
    let mut left = n_pages - sizes.iter().sum::<usize>();
    let mut by_remainder: Vec<usize> = (0..3).collect();
    by_remainder.sort_by(|&a, &b| {
        let ra = exact[a] - sizes[a] as f64;
        let rb = exact[b] - sizes[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in by_remainder.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    Ok([sizes[0], sizes[1], sizes[2]])
}

/// Splits whole pages into train/validation/test parts. Page order is
/// shuffled with a seeded generator before assignment.
pub fn split(dataset: &Dataset, ratios: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let sizes = split_sizes(dataset.pages.len(), ratios)?;
    let mut idx: Vec<usize> = (0..dataset.pages.len()).collect();
    idx.shuffle(&mut seed::rng(seed::derive(seed, "split")));
    let part = |range: std::ops::Range<usize>, tag| Dataset {
        schema: dataset.schema.clone(),
        pages: idx[range].iter().map(|&i| dataset.pages[i].clone()).collect(),
        split: tag,
    };
    let a = sizes[0];
    let b = a + sizes[1];
    Ok((
        part(0..a, SplitTag::Train),
        part(a..b, SplitTag::Val),
        part(b..idx.len(), SplitTag::Test),
    ))
}
