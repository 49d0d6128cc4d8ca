#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rare_core::experiment::{ClickerKind, ExperimentConfig};
use rare_core::gbdt::GbdtConfig;
use rare_core::reranker::{RerankerConfig, TranspositionBudget};
use rare_core::saint::{LossKind, SaintConfig, SaintVariant};

/// A config small enough for every command to finish in seconds.
pub fn small_config(kind: ClickerKind, out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig { seed: 100, out: out.to_path_buf(), ..Default::default() };
    cfg.data.n_pages = 60;
    cfg.data.page_len = 6;
    cfg.clicker.kind = kind;
    match kind {
        ClickerKind::Gbdt | ClickerKind::GbdtC => {
            let k = usize::from(kind == ClickerKind::GbdtC);
            cfg.clicker.gbdt = Some(GbdtConfig { iterations: 8, learning_rate: 0.2, depth: 3, context_k: k, ..GbdtConfig::gbdt() });
        }
        ClickerKind::SaintS | ClickerKind::SaintQ => {
            let variant = if kind == ClickerKind::SaintQ { SaintVariant::Q } else { SaintVariant::S };
            cfg.clicker.saint = Some(tiny_saint(variant, 6));
        }
        ClickerKind::Ctrv => {}
    }
    let mut rr = RerankerConfig::for_clicker(kind.as_str(), 1.0);
    rr.hidden = vec![8, 6, 4];
    rr.epochs = 1;
    rr.budget = TranspositionBudget::Sample { m: 5 };
    cfg.reranker = Some(rr);
    cfg.sweep_seeds = vec![1, 2];
    cfg.k_list = vec![0, 1];
    cfg.b_list = vec![1, 4];
    cfg.gbdt_grid.iterations = vec![4, 8];
    cfg.gbdt_grid.learning_rate = vec![0.2];
    cfg.gbdt_grid.depth = vec![2, 3];
    cfg.saint_grid.d_model = vec![8];
    cfg.saint_grid.n_layers = vec![1];
    cfg.saint_grid.learning_rate = vec![1e-3, 3e-3];
    cfg
}

pub fn tiny_saint(variant: SaintVariant, page_len: usize) -> SaintConfig {
    SaintConfig {
        variant,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        attention_dropout: 0.1,
        mlp_dropout: 0.1,
        loss: LossKind::CrossEntropy,
        head_hidden: 4,
        ff_mult: 2,
        learning_rate: 3e-3,
        page_len,
        pages_per_batch: 4,
        epochs: 1,
        // lifts predictions above the revenue click threshold
        class_weights: Some([1.0, 9.0]),
        ..SaintConfig::best(variant)
    }
}

/// Every output file except wall-clock measurements, by name.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let entry = entry.unwrap();
        let name = entry.file_name().to_string_lossy().into_owned();
        if entry.path().is_file() && !name.starts_with("timing") {
            out.insert(name, fs::read(entry.path()).unwrap());
        }
    }
    out
}

/// True when every file names the config hash and the seed.
pub fn has_provenance(bytes: &[u8], hash: &str, seed: u64) -> bool {
    let text = String::from_utf8_lossy(bytes);
    text.contains(hash) && (text.contains(&format!("seed={seed}")) || text.contains(&format!("\"seed\": {seed}")))
}
