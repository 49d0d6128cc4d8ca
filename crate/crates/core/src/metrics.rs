//! Ranking and revenue metrics.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::clicker::{expected_page_revenue, ClickModel, RevenueMode};
use crate::data::SearchPage;
use crate::error::{Error, Result};
use crate::permutation::Permutation;

/// Probability that a random positive outscores a random negative, with ties
/// counted as one half.
pub fn auc(labels: &[bool], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(Error::Argument(format!("{} labels for {} scores", labels.len(), scores.len())));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!("AUC needs both classes ({pos} positive, {neg} negative)")));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of midranks of the positives (Mann-Whitney U)
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gauc {
    pub value: f64,
    /// Per-query AUC, `None` where the query has a single class.
    pub per_query: Vec<Option<f64>>,
    pub skipped: usize,
}

/// Mean per-query AUC over the queries where it is defined.
pub fn gauc(labels: &[Vec<bool>], scores: &[Vec<f64>]) -> Result<Gauc> {
    if labels.len() != scores.len() {
        return Err(Error::Argument(format!("{} label groups for {} score groups", labels.len(), scores.len())));
    }
    let per_query = labels
        .iter()
        .zip(scores)
        .map(|(l, s)| match auc(l, s) {
            Ok(v) => Ok(Some(v)),
            Err(Error::UndefinedMetric(_)) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<Vec<_>>>()?;
    let defined: Vec<f64> = per_query.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::UndefinedMetric("no query has both clicked and unclicked items".into()));
    }
    let value = defined.iter().sum::<f64>() / defined.len() as f64;
    Ok(Gauc { value, skipped: per_query.len() - defined.len(), per_query })
}

fn check_profile(p: f64) -> Result<()> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Argument(format!("degenerate relevance profile: P={p} must lie in (0, 1)")));
    }
    Ok(())
}

/// `v_j = P^(j-1)` for slots `j = 1..n`.
pub fn relevance_profile(n: usize, p: f64) -> Vec<f64> {
    (0..n).map(|j| p.powi(j as i32)).collect()
}

/// KL divergence (nats) between the normalised profile carried along by
/// the permutation and the normalised profile itself.
pub fn difference(perm: &Permutation, p: f64) -> Result<f64> {
    check_profile(p)?;
    let v = relevance_profile(perm.len(), p);
    let total: f64 = v.iter().sum();
    let tilde: Vec<f64> = v.iter().map(|x| x / total).collect();
    Ok((0..perm.len())
        .map(|slot| {
            let hat = tilde[perm.item_at(slot)];
            hat * (hat / tilde[slot]).ln()
        })
        .sum())
}

/// Mean [`difference`] over pages.
pub fn mean_difference(perms: &[Permutation], p: f64) -> Result<f64> {
    if perms.is_empty() {
        return Err(Error::UndefinedMetric("difference over zero pages".into()));
    }
    let mut s = 0.0;
    for perm in perms {
        s += difference(perm, p)?;
    }
    Ok(s / perms.len() as f64)
}

/// NDCG of a reordering for arbitrary per-item gains (indexed by original
/// item), normalised by the DCG of the original order.
pub fn ndcg_with_gains(perm: &Permutation, gains: &[f64]) -> Result<f64> {
    if gains.len() != perm.len() {
        return Err(Error::Argument(format!("{} gains for {} items", gains.len(), perm.len())));
    }
    let discount = |slot: usize| 1.0 / ((slot + 2) as f64).log2();
    let dcg: f64 = (0..perm.len()).map(|s| gains[perm.item_at(s)] * discount(s)).sum();
    let ideal: f64 = (0..perm.len()).map(|s| gains[s] * discount(s)).sum();
    if ideal <= 0.0 {
        return Err(Error::UndefinedMetric("NDCG with zero ideal gain".into()));
    }
    Ok(dcg / ideal)
}

/// NDCG with position-decay gains `P^(original index)`.
pub fn ndcg(perm: &Permutation, p: f64) -> Result<f64> {
    check_profile(p)?;
    ndcg_with_gains(perm, &relevance_profile(perm.len(), p))
}

pub fn mean_ndcg(perms: &[Permutation], p: f64) -> Result<f64> {
    if perms.is_empty() {
        return Err(Error::UndefinedMetric("NDCG over zero pages".into()));
    }
    let mut s = 0.0;
    for perm in perms {
        s += ndcg(perm, p)?;
    }
    Ok(s / perms.len() as f64)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Argument(format!("pearson needs two equal series of length >= 2, got {} and {}", x.len(), y.len())));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedMetric("pearson correlation of a constant series".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaRevenue {
    pub value: f64,
    /// `reranked / original` per page, `None` for pages with zero original revenue.
    pub per_query: Vec<Option<f64>>,
    pub excluded: usize,
}

/// Mean ratio of reranked to original page revenue, both computed from
/// thresholded clicker predictions and raw bids.
pub fn delta_revenue(clicker: &dyn ClickModel, pages: &[SearchPage], perms: &[Permutation], h: f64) -> Result<DeltaRevenue> {
    if pages.len() != perms.len() {
        return Err(Error::Argument(format!("{} pages for {} permutations", pages.len(), perms.len())));
    }
    let mode = RevenueMode::Thresholded { h };
    let identity: Vec<SearchPage> = pages.to_vec();
    let reranked: Vec<SearchPage> = pages
        .iter()
        .zip(perms)
        .map(|(p, perm)| p.reordered(perm, clicker.schema()))
        .collect::<Result<_>>()?;
    let before = clicker.predict_displayed_many(&identity)?;
    let after = clicker.predict_displayed_many(&reranked)?;
    let mut per_query = Vec::with_capacity(pages.len());
    for i in 0..pages.len() {
        let r0 = expected_page_revenue(&before[i], &pages[i].bids(), mode)?;
        let r1 = expected_page_revenue(&after[i], &reranked[i].bids(), mode)?;
        per_query.push((r0 > 0.0).then(|| r1 / r0));
    }
    let defined: Vec<f64> = per_query.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::UndefinedMetric("every page has zero original revenue".into()));
    }
    Ok(DeltaRevenue {
        value: defined.iter().sum::<f64>() / defined.len() as f64,
        excluded: per_query.len() - defined.len(),
        per_query,
    })
}

/// Settings that shaped a report.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportContext {
    pub decay: Option<f64>,
    pub threshold: Option<f64>,
    pub alpha: Option<f64>,
    pub r_organic: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryRow {
    pub query_id: u64,
    pub auc: Option<f64>,
    pub revenue_ratio: Option<f64>,
    pub difference: Option<f64>,
    pub ndcg: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auc: Option<f64>,
    pub gauc: Option<f64>,
    pub gauc_skipped: Option<usize>,
    pub delta_revenue: Option<f64>,
    pub revenue_excluded: Option<usize>,
    /// Nats.
    pub difference: Option<f64>,
    pub ndcg: Option<f64>,
    pub context: ReportContext,
    pub queries: Vec<QueryRow>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

impl MetricReport {
    /// Click-model quality on a set of pages.
    pub fn for_clicker(pages: &[SearchPage], predictions: &[Vec<f64>]) -> Result<Self> {
        let labels: Vec<Vec<bool>> = pages.iter().map(SearchPage::labels).collect();
        let flat_l: Vec<bool> = labels.iter().flatten().copied().collect();
        let flat_s: Vec<f64> = predictions.iter().flatten().copied().collect();
        let g = gauc(&labels, predictions)?;
        Ok(Self {
            auc: Some(auc(&flat_l, &flat_s)?),
            gauc: Some(g.value),
            gauc_skipped: Some(g.skipped),
            queries: pages
                .iter()
                .zip(&g.per_query)
                .map(|(p, a)| QueryRow { query_id: p.query_id, auc: *a, ..Default::default() })
                .collect(),
            ..Default::default()
        })
    }

    /// Reranking quality: revenue ratio, Difference and NDCG per page.
    pub fn for_reranking(
        clicker: &dyn ClickModel,
        pages: &[SearchPage],
        perms: &[Permutation],
        decay: f64,
        h: f64,
    ) -> Result<Self> {
        let dr = delta_revenue(clicker, pages, perms, h)?;
        let mut queries = Vec::with_capacity(pages.len());
        for ((page, perm), ratio) in pages.iter().zip(perms).zip(&dr.per_query) {
            queries.push(QueryRow {
                query_id: page.query_id,
                auc: None,
                revenue_ratio: *ratio,
                difference: Some(difference(perm, decay)?),
                ndcg: Some(ndcg(perm, decay)?),
            });
        }
        let mean = |f: fn(&QueryRow) -> Option<f64>| {
            let v: Vec<f64> = queries.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        Ok(Self {
            delta_revenue: Some(dr.value),
            revenue_excluded: Some(dr.excluded),
            difference: mean(|q| q.difference),
            ndcg: mean(|q| q.ndcg),
            context: ReportContext { decay: Some(decay), threshold: Some(h), ..Default::default() },
            queries,
            ..Default::default()
        })
    }

    /// One row per query followed by an aggregate row (`query_id = all`).
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "query_id,auc,gauc,delta_revenue,difference_nats,ndcg")?;
        for q in &self.queries {
            writeln!(
                w,
                "{},{},,{},{},{}",
                q.query_id,
                cell(q.auc),
                cell(q.revenue_ratio),
                cell(q.difference),
                cell(q.ndcg)
            )?;
        }
        writeln!(
            w,
            "all,{},{},{},{},{}",
            cell(self.auc),
            cell(self.gauc),
            cell(self.delta_revenue),
            cell(self.difference),
            cell(self.ndcg)
        )?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
