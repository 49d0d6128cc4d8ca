use super::{Dataset, ResolvedFeatures, SearchPage};
use crate::error::{Error, Result};

/// Rendering of a categorical cell whose neighbour slot lies outside the page.
pub const MISSING_CATEGORY: &str = "nan";

/// Per-item feature rows widened with the features of the `k` preceding and
/// `k` following items on the same page.
///
/// Blocks are ordered by neighbour offset `-k..=k`; block `k` is the item
/// itself. Out-of-page categorical cells are `None` (rendered as
/// [`MISSING_CATEGORY`]); out-of-page continuous cells are `NaN`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextExpandedMatrix {
    pub k: usize,
    pub n_cat: usize,
    pub n_cont: usize,
    pub n_rows: usize,
    cat: Vec<Option<u32>>,
    cont: Vec<f64>,
}

impl ContextExpandedMatrix {
    pub fn blocks(&self) -> usize {
        2 * self.k + 1
    }

    /// Number of feature columns per row: `(2k + 1) * d`.
    pub fn width(&self) -> usize {
        self.blocks() * (self.n_cat + self.n_cont)
    }

    pub fn cat_width(&self) -> usize {
        self.blocks() * self.n_cat
    }

    pub fn cont_width(&self) -> usize {
        self.blocks() * self.n_cont
    }

    pub fn cat_row(&self, row: usize) -> &[Option<u32>] {
        let w = self.cat_width();
        &self.cat[row * w..(row + 1) * w]
    }

    pub fn cont_row(&self, row: usize) -> &[f64] {
        let w = self.cont_width();
        &self.cont[row * w..(row + 1) * w]
    }

    /// The item's own features (the centre block).
    pub fn center(&self, row: usize) -> (&[Option<u32>], &[f64]) {
        let c = &self.cat_row(row)[self.k * self.n_cat..(self.k + 1) * self.n_cat];
        let f = &self.cont_row(row)[self.k * self.n_cont..(self.k + 1) * self.n_cont];
        (c, f)
    }

    /// Row as strings, one per column, block by block (categoricals first
    /// within each block).
    pub fn render_row(&self, row: usize) -> Vec<String> {
        let (cats, conts) = (self.cat_row(row), self.cont_row(row));
        let mut out = Vec::with_capacity(self.width());
        for b in 0..self.blocks() {
            for c in &cats[b * self.n_cat..(b + 1) * self.n_cat] {
                out.push(c.map_or_else(|| MISSING_CATEGORY.to_string(), |v| v.to_string()));
            }
            for v in &conts[b * self.n_cont..(b + 1) * self.n_cont] {
                out.push(v.to_string());
            }
        }
        out
    }

    fn with_capacity(k: usize, n_cat: usize, n_cont: usize, rows: usize) -> Self {
        Self {
            k,
            n_cat,
            n_cont,
            n_rows: 0,
            cat: Vec::with_capacity(rows * (2 * k + 1) * n_cat),
            cont: Vec::with_capacity(rows * (2 * k + 1) * n_cont),
        }
    }

    fn push_page(&mut self, page: &SearchPage, features: &ResolvedFeatures) {
        let n = page.len() as isize;
        let k = self.k as isize;
        for j in 0..n {
            for off in -k..=k {
                let m = j + off;
                if (0..n).contains(&m) {
                    let it = &page.items[m as usize];
                    self.cat.extend(features.cat.iter().map(|&c| Some(it.categorical[c])));
                } else {
                    self.cat.extend(std::iter::repeat_n(None, self.n_cat));
                }
            }
            for off in -k..=k {
                let m = j + off;
                if (0..n).contains(&m) {
                    let it = &page.items[m as usize];
                    self.cont.extend(features.cont.iter().map(|&c| it.continuous[c]));
                } else {
                    self.cont.extend(std::iter::repeat_n(f64::NAN, self.n_cont));
                }
            }
            self.n_rows += 1;
        }
    }
}

fn check_k(k: usize, page_len: usize) -> Result<()> {
    if k >= page_len {
        return Err(Error::Argument(format!(
            "neighbour radius k={k} must be smaller than the page length {page_len}"
        )));
    }
    Ok(())
}

/// Expands one page; rows follow the page's item order.
pub fn expand_page(page: &SearchPage, features: &ResolvedFeatures, k: usize) -> Result<ContextExpandedMatrix> {
    check_k(k, page.len())?;
    let mut m = ContextExpandedMatrix::with_capacity(k, features.cat.len(), features.cont.len(), page.len());
    m.push_page(page, features);
    Ok(m)
}

/// Expands every page of a dataset; rows are page-major.
pub fn expand_context(dataset: &Dataset, features: &ResolvedFeatures, k: usize) -> Result<ContextExpandedMatrix> {
    check_k(k, dataset.page_len().max(1))?;
    let mut m = ContextExpandedMatrix::with_capacity(
        k,
        features.cat.len(),
        features.cont.len(),
        dataset.n_items(),
    );
    for page in &dataset.pages {
        m.push_page(page, features);
    }
    Ok(m)
}
