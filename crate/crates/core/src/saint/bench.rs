use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::SaintModel;
use crate::data::{Dataset, SearchPage};
use crate::error::{Error, Result};

const WARMUP: usize = 5;
pub const MIN_REPETITIONS: usize = 30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    /// Pages per forward pass.
    pub b: usize,
    /// Median wall-clock milliseconds per page.
    pub ms_per_page: f64,
    pub repetitions: usize,
}

/// Per-page inference latency when `b` pages share one forward pass.
/// Each setting is warmed up, then timed `repetitions` times (at least
/// [`MIN_REPETITIONS`]); the median is reported.
pub fn bench_chunk_batching(model: &SaintModel, test: &Dataset, b_values: &[usize], repetitions: usize) -> Result<Vec<BenchRow>> {
    let reps = repetitions.max(MIN_REPETITIONS);
    b_values
        .iter()
        .map(|&b| {
            if b == 0 || b > test.pages.len() {
                return Err(Error::Argument(format!("b={b} pages requested from a set of {}", test.pages.len())));
            }
            let pages: Vec<&SearchPage> = test.pages[..b].iter().collect();
            for _ in 0..WARMUP {
                model.predict_batch(&pages)?;
            }
            let mut times = Vec::with_capacity(reps);
            for _ in 0..reps {
                let start = Instant::now();
                std::hint::black_box(model.predict_batch(&pages)?);
                times.push(start.elapsed().as_secs_f64() * 1e3 / b as f64);
            }
            times.sort_by(f64::total_cmp);
            let mid = times.len() / 2;
            let ms_per_page = if times.len() % 2 == 1 { times[mid] } else { 0.5 * (times[mid - 1] + times[mid]) };
            Ok(BenchRow { b, ms_per_page, repetitions: reps })
        })
        .collect()
}
