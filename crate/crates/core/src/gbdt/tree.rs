use serde::{Deserialize, Serialize};

/// One node of a regression tree. Leaves have `feature == LEAF`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub feature: u32,
    /// Rows with `x <= threshold` go left.
    pub threshold: f64,
    /// Direction taken when the feature value is missing (`NaN`).
    pub default_left: bool,
    pub left: u32,
    pub right: u32,
    pub value: f64,
}

pub const LEAF: u32 = u32::MAX;

impl Node {
    fn leaf(value: f64) -> Self {
        Self { feature: LEAF, threshold: 0.0, default_left: true, left: 0, right: 0, value }
    }

    pub fn is_leaf(&self) -> bool {
        self.feature == LEAF
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    /// Leaf value reached by a row given through a feature accessor.
    #[inline]
    pub fn predict(&self, x: impl Fn(usize) -> f64) -> f64 {
        let mut i = 0usize;
        loop {
            let n = &self.nodes[i];
            if n.is_leaf() {
                return n.value;
            }
            let v = x(n.feature as usize);
            let left = if v.is_nan() { n.default_left } else { v <= n.threshold };
            i = if left { n.left } else { n.right } as usize;
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(t: &Tree, i: usize) -> usize {
            let n = &t.nodes[i];
            if n.is_leaf() {
                0
            } else {
                1 + walk(t, n.left as usize).max(walk(t, n.right as usize))
            }
        }
        walk(self, 0)
    }
}

/// Columns with at most this many distinct values are scanned through
/// per-node histograms instead of the presorted order.
const MAX_BINS: usize = 1024;

enum ColumnIndex {
    /// Rank of every row's value among the distinct values; missing rows get
    /// rank `values.len()`.
    Binned { bins: Vec<u16>, values: Vec<f64> },
    Sorted { values: Vec<f64>, rows: Vec<u32>, missing: Vec<u32> },
}

/// Column-major training matrix with a split-search index per feature.
pub struct Presorted {
    pub n_rows: usize,
    pub columns: Vec<Vec<f64>>,
    index: Vec<ColumnIndex>,
}

impl Presorted {
    pub fn new(columns: Vec<Vec<f64>>, n_rows: usize) -> Self {
        let index = columns.iter().map(|col| Self::index_column(col, n_rows)).collect();
        Self { n_rows, columns, index }
    }

    fn index_column(col: &[f64], n_rows: usize) -> ColumnIndex {
        let mut rows: Vec<u32> = (0..n_rows as u32).filter(|&r| !col[r as usize].is_nan()).collect();
        rows.sort_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]).then(a.cmp(&b)));
        let mut distinct: Vec<f64> = rows.iter().map(|&r| col[r as usize]).collect();
        distinct.dedup();
        if distinct.len() <= MAX_BINS {
            let bins = col
                .iter()
                .map(|v| {
                    if v.is_nan() {
                        distinct.len() as u16
                    } else {
                        distinct.binary_search_by(|d| d.total_cmp(v)).expect("value present") as u16
                    }
                })
                .collect();
            return ColumnIndex::Binned { bins, values: distinct };
        }
        let values = rows.iter().map(|&r| col[r as usize]).collect();
        let missing = (0..n_rows as u32).filter(|&r| col[r as usize].is_nan()).collect();
        ColumnIndex::Sorted { values, rows, missing }
    }
}

#[derive(Clone, Copy, Default, Debug)]
struct Stats {
    w: f64,
    wt: f64,
    h: f64,
    n: u32,
}

impl Stats {
    #[inline]
    fn add(&mut self, w: f64, wt: f64, h: f64) {
        self.w += w;
        self.wt += wt;
        self.h += h;
        self.n += 1;
    }

    fn minus(self, o: Stats) -> Stats {
        Stats { w: self.w - o.w, wt: self.wt - o.wt, h: self.h - o.h, n: self.n - o.n }
    }

    fn plus(self, o: Stats) -> Stats {
        Stats { w: self.w + o.w, wt: self.wt + o.wt, h: self.h + o.h, n: self.n + o.n }
    }

    #[inline]
    fn score(&self) -> f64 {
        if self.w > 0.0 {
            self.wt * self.wt / self.w
        } else {
            0.0
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Split {
    gain: f64,
    feature: u32,
    threshold: f64,
    default_left: bool,
}

pub struct TreeParams {
    pub depth: usize,
    pub l2: f64,
    pub min_child_weight: f64,
}

/// Row-level quantities of one boosting round: sample weight `w`, target
/// `t = y - p` and curvature `h = w p (1 - p)`.
pub struct Targets<'a> {
    pub w: &'a [f64],
    pub t: &'a [f64],
    pub h: &'a [f64],
}

/// Grows one tree level by level. Splits maximise weighted variance
/// reduction of `t`; leaves take the Newton step `sum(w t) / (sum(h) + l2)`.
/// Returns the tree and the leaf reached by every training row.
pub fn grow(data: &Presorted, tg: &Targets, params: &TreeParams) -> (Tree, Vec<u32>) {
    let n = data.n_rows;
    let mut node_of = vec![0u32; n];
    let mut stats = vec![Stats::default()];
    for r in 0..n {
        stats[0].add(tg.w[r], tg.w[r] * tg.t[r], tg.h[r]);
    }
    let mut nodes = vec![Node::leaf(0.0)];
    let mut active = vec![true];
    let mut frontier = vec![0u32];
    for _level in 0..params.depth {
        if frontier.is_empty() {
            break;
        }
        let best = best_splits(data, tg, &node_of, &stats, &active, &frontier, params);
        let mut next = Vec::new();
        let mut child_of = vec![(0u32, 0u32); nodes.len()];
        for &id in &frontier {
            active[id as usize] = false;
            let Some(s) = best[id as usize] else { continue };
            let l = nodes.len() as u32;
            nodes.push(Node::leaf(0.0));
            nodes.push(Node::leaf(0.0));
            stats.push(Stats::default());
            stats.push(Stats::default());
            active.push(true);
            active.push(true);
            let node = &mut nodes[id as usize];
            node.feature = s.feature;
            node.threshold = s.threshold;
            node.default_left = s.default_left;
            node.left = l;
            node.right = l + 1;
            child_of[id as usize] = (l, l + 1);
            next.push(l);
            next.push(l + 1);
        }
        if next.is_empty() {
            break;
        }
        for r in 0..n {
            let id = node_of[r] as usize;
            let node = &nodes[id];
            if node.is_leaf() || id >= child_of.len() || child_of[id] == (0, 0) {
                continue;
            }
            let v = data.columns[node.feature as usize][r];
            let left = if v.is_nan() { node.default_left } else { v <= node.threshold };
            let c = if left { child_of[id].0 } else { child_of[id].1 };
            node_of[r] = c;
            stats[c as usize].add(tg.w[r], tg.w[r] * tg.t[r], tg.h[r]);
        }
        frontier = next;
    }
    for (i, node) in nodes.iter_mut().enumerate() {
        if node.is_leaf() {
            let s = stats[i];
            node.value = if s.n > 0 { s.wt / (s.h + params.l2) } else { 0.0 };
        }
    }
    (Tree { nodes }, node_of)
}

fn best_splits(
    data: &Presorted,
    tg: &Targets,
    node_of: &[u32],
    stats: &[Stats],
    active: &[bool],
    frontier: &[u32],
    params: &TreeParams,
) -> Vec<Option<Split>> {
    let n_nodes = stats.len();
    let rows: Vec<Stats> = (0..data.n_rows).map(|r| Stats { w: tg.w[r], wt: tg.w[r] * tg.t[r], h: tg.h[r], n: 1 }).collect();
    let mut slot_of = vec![u32::MAX; n_nodes];
    for (s, &id) in frontier.iter().enumerate() {
        slot_of[id as usize] = s as u32;
    }
    let mut best: Vec<Option<Split>> = vec![None; n_nodes];
    let mut left = vec![Stats::default(); n_nodes];
    let mut miss = vec![Stats::default(); n_nodes];
    let mut last = vec![f64::NAN; n_nodes];
    let mut hist: Vec<Stats> = Vec::new();
    let ok = |s: &Stats| s.n > 0 && s.h >= params.min_child_weight;
    for f in 0..data.columns.len() {
        let consider = |id: usize, lft: Stats, m: Stats, thr: f64, best: &mut Vec<Option<Split>>| {
            let total = stats[id];
            let right_nm = total.minus(m).minus(lft);
            let base = total.score();
            let mut cands = [(false, lft, right_nm.plus(m)), (true, lft.plus(m), right_nm)];
            if m.n == 0 {
                cands[1].0 = false;
            }
            for (default_left, l, r) in cands {
                if !ok(&l) || !ok(&r) {
                    continue;
                }
                let gain = l.score() + r.score() - base;
                if gain > 1e-12 && best[id].is_none_or(|b| gain > b.gain) {
                    best[id] = Some(Split { gain, feature: f as u32, threshold: thr, default_left });
                }
            }
        };
        match &data.index[f] {
            ColumnIndex::Binned { bins, values } => {
                let width = values.len() + 1;
                hist.clear();
                hist.resize(frontier.len() * width, Stats::default());
                for (r, (&id, &b)) in node_of.iter().zip(bins).enumerate() {
                    let s = slot_of[id as usize];
                    if s != u32::MAX {
                        let cell = &mut hist[s as usize * width + b as usize];
                        let row = &rows[r];
                        cell.w += row.w;
                        cell.wt += row.wt;
                        cell.h += row.h;
                        cell.n += 1;
                    }
                }
                for (s, &id) in frontier.iter().enumerate() {
                    let h = &hist[s * width..(s + 1) * width];
                    let m = h[values.len()];
                    let mut lft = Stats::default();
                    for (b, cell) in h[..values.len()].iter().enumerate() {
                        if cell.n == 0 {
                            continue;
                        }
                        lft = lft.plus(*cell);
                        consider(id as usize, lft, m, values[b], &mut best);
                    }
                }
            }
            ColumnIndex::Sorted { values, rows: sorted, missing } => {
                for &id in frontier {
                    left[id as usize] = Stats::default();
                    miss[id as usize] = Stats::default();
                    last[id as usize] = f64::NAN;
                }
                for &r in missing {
                    let id = node_of[r as usize] as usize;
                    if active[id] {
                        miss[id] = miss[id].plus(rows[r as usize]);
                    }
                }
                for (&v, &r) in values.iter().zip(sorted) {
                    let id = node_of[r as usize] as usize;
                    if !active[id] {
                        continue;
                    }
                    let prev = last[id];
                    if left[id].n > 0 && v != prev {
                        consider(id, left[id], miss[id], prev, &mut best);
                    }
                    left[id] = left[id].plus(rows[r as usize]);
                    last[id] = v;
                }
                // every non-missing row left, missing rows right
                for &id in frontier {
                    let id = id as usize;
                    if left[id].n > 0 {
                        consider(id, left[id], miss[id], last[id], &mut best);
                    }
                }
            }
        }
    }
    best
}
