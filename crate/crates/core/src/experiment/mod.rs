//! Experiment harness: one JSON config drives every command, and every
//! artifact carries the resolved config's hash and the seed.
//!
//! Files whose name starts with `timing` hold wall-clock measurements and
//! are the only outputs allowed to differ between two runs of the same
//! config.

mod checkpoint;
mod commands;

pub use checkpoint::{load_clicker, load_reranker, save_clicker, save_reranker, TrainedClicker};
pub use commands::{
    bench_attention, eval_clicker, eval_reranker, gen_data, grid_search, run, sweep_alpha, sweep_k, train_clicker,
    train_reranker, Command, CommandOutput, SweepRow,
};

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::data::{generate_synthetic, load_csv, split, Dataset, FeatureSchema, SplitTag, SyntheticConfig, DEFAULT_SPLIT_RATIOS};
use crate::error::{Error, Result};
use crate::gbdt::{GbdtConfig, GbdtGrid};
use crate::reranker::RerankerConfig;
use crate::saint::{SaintConfig, SaintVariant};
use crate::seed::DEFAULT_SEED;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClickerKind {
    Ctrv,
    Gbdt,
    GbdtC,
    SaintS,
    SaintQ,
}

impl ClickerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ClickerKind::Ctrv => "ctrv",
            ClickerKind::Gbdt => "gbdt",
            ClickerKind::GbdtC => "gbdt-c",
            ClickerKind::SaintS => "saint-s",
            ClickerKind::SaintQ => "saint-q",
        }
    }
}

/// Where pages come from. With `csv_dir` set, `train.csv`, `val.csv` and
/// `test.csv` are read from it (as written by `gen-data`); otherwise pages are
/// generated from the master seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub csv_dir: Option<PathBuf>,
    pub n_pages: usize,
    pub page_len: usize,
    pub context_strength: f64,
    pub split_ratios: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { csv_dir: None, n_pages: 5000, page_len: 30, context_strength: 1.0, split_ratios: DEFAULT_SPLIT_RATIOS }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClickerConfig {
    pub kind: ClickerKind,
    /// Position decay of the CTRV baseline.
    pub decay: f64,
    /// Neighbour radius for `gbdt-c` when `gbdt` is not given.
    pub context_k: usize,
    pub gbdt: Option<GbdtConfig>,
    pub saint: Option<SaintConfig>,
}

impl Default for ClickerConfig {
    fn default() -> Self {
        Self { kind: ClickerKind::GbdtC, decay: crate::clicker::DEFAULT_DECAY, context_k: 1, gbdt: None, saint: None }
    }
}

/// Hyperparameter grid for the attention models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaintGrid {
    pub d_model: Vec<usize>,
    pub n_layers: Vec<usize>,
    pub learning_rate: Vec<f64>,
}

impl Default for SaintGrid {
    fn default() -> Self {
        Self { d_model: vec![32, 64, 128], n_layers: vec![1, 2], learning_rate: vec![1e-4, 1e-3] }
    }
}

impl SaintGrid {
    pub fn points(&self, base: &SaintConfig) -> Vec<SaintConfig> {
        let mut out = Vec::new();
        for &d_model in &self.d_model {
            for &n_layers in &self.n_layers {
                for &learning_rate in &self.learning_rate {
                    out.push(SaintConfig { d_model, n_layers, learning_rate, ..base.clone() });
                }
            }
        }
        out
    }
}

/// Checkpoints consumed by the commands that need them.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputPaths {
    pub clicker: Option<PathBuf>,
    /// Absent: the identity reranker.
    pub reranker: Option<PathBuf>,
    /// Click models compared by `sweep-alpha`; defaults to `clicker`.
    pub clickers: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub clicker: ClickerConfig,
    /// Absent: the tuned defaults for the clicker kind at `alpha`.
    pub reranker: Option<RerankerConfig>,
    pub alpha: f64,
    pub alphas: Vec<f64>,
    /// Reranker seeds averaged by `sweep-alpha`.
    pub sweep_seeds: Vec<u64>,
    /// Position decay `P` of the Difference and NDCG relevance profile.
    pub relevance_decay: f64,
    pub k_list: Vec<usize>,
    pub b_list: Vec<usize>,
    pub bench_repetitions: usize,
    pub gbdt_grid: GbdtGrid,
    pub saint_grid: SaintGrid,
    /// Sweep jobs run at once.
    pub jobs: usize,
    pub inputs: InputPaths,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEED,
            data: DataConfig::default(),
            clicker: ClickerConfig::default(),
            reranker: None,
            alpha: 1.0,
            alphas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            sweep_seeds: (0..5).map(|i| DEFAULT_SEED + i).collect(),
            relevance_decay: 0.9,
            k_list: vec![0, 1, 3, 5],
            b_list: vec![1, 5, 10, 15, 16, 20],
            bench_repetitions: crate::saint::MIN_REPETITIONS,
            gbdt_grid: GbdtGrid::default(),
            saint_grid: SaintGrid::default(),
            jobs: 1,
            inputs: InputPaths::default(),
            out: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    /// Parses a config document and applies `key.path=value` overrides.
    /// Override values are read as JSON when they parse, as strings otherwise.
    pub fn from_json_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut doc: Value = if text.trim().is_empty() { Value::Object(Default::default()) } else { serde_json::from_str(text)? };
        for (key, raw) in overrides {
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
            set_path(&mut doc, key, value)?;
        }
        let cfg: Self = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Fills every defaulted section and checks the result.
    pub fn resolve(mut self) -> Result<Self> {
        let kind = self.clicker.kind;
        match kind {
            ClickerKind::Gbdt | ClickerKind::GbdtC => {
                let g = self.clicker.gbdt.take().unwrap_or_else(|| match kind {
                    ClickerKind::Gbdt => GbdtConfig::gbdt(),
                    _ => GbdtConfig::gbdt_c(self.clicker.context_k),
                });
                if (kind == ClickerKind::Gbdt) != (g.context_k == 0) {
                    return Err(Error::Config(format!("clicker kind {} with context_k {}", kind.as_str(), g.context_k)));
                }
                g.validate()?;
                self.clicker.context_k = g.context_k;
                self.clicker.gbdt = Some(g);
            }
            ClickerKind::SaintS | ClickerKind::SaintQ => {
                let variant = if kind == ClickerKind::SaintQ { SaintVariant::Q } else { SaintVariant::S };
                let mut s = self
                    .clicker
                    .saint
                    .take()
                    .unwrap_or_else(|| SaintConfig { page_len: self.data.page_len, ..SaintConfig::best(variant) });
                if s.variant != variant {
                    return Err(Error::Config(format!("clicker kind {} with a {:?} attention config", kind.as_str(), s.variant)));
                }
                s.page_len = self.data.page_len;
                s.validate()?;
                self.clicker.saint = Some(s);
            }
            ClickerKind::Ctrv => {}
        }
        if !(0.0..=1.0).contains(&self.clicker.decay) {
            return Err(Error::Config(format!("decay {} outside [0, 1]", self.clicker.decay)));
        }
        let rr = self.reranker.take().unwrap_or_else(|| RerankerConfig::for_clicker(kind.as_str(), self.alpha));
        rr.validate()?;
        self.alpha = rr.regularization.alpha;
        self.reranker = Some(rr);
        if let Some(a) = self.alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::Config(format!("alpha {a} outside [0, 1]")));
        }
        if !(self.relevance_decay > 0.0 && self.relevance_decay < 1.0) {
            return Err(Error::Config(format!("relevance decay {} outside (0, 1)", self.relevance_decay)));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        if self.sweep_seeds.is_empty() {
            return Err(Error::Config("sweep needs at least one seed".into()));
        }
        if self.data.page_len < 3 || self.data.n_pages == 0 {
            return Err(Error::Config("data needs pages of at least 3 items".into()));
        }
        Ok(self)
    }

    pub fn reranker_config(&self) -> RerankerConfig {
        self.reranker.clone().unwrap_or_else(|| RerankerConfig::for_clicker(self.clicker.kind.as_str(), self.alpha))
    }

    pub fn schema(&self) -> FeatureSchema {
        FeatureSchema::rared(self.data.page_len)
    }

    /// Train, validation and test pages.
    pub fn load_splits(&self) -> Result<(Dataset, Dataset, Dataset)> {
        match &self.data.csv_dir {
            Some(dir) => {
                let schema = self.schema();
                let load = |name: &str, tag: SplitTag| -> Result<Dataset> {
                    Ok(load_csv(dir.join(name), &schema)?.with_split(tag))
                };
                Ok((load("train.csv", SplitTag::Train)?, load("val.csv", SplitTag::Val)?, load("test.csv", SplitTag::Test)?))
            }
            None => {
                let ds = generate_synthetic(&SyntheticConfig {
                    n_pages: self.data.n_pages,
                    page_len: self.data.page_len,
                    seed: self.seed,
                    context_strength: self.data.context_strength,
                })?;
                split(&ds, self.data.split_ratios, self.seed)
            }
        }
    }
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Error::Config(format!("bad override key '{key}'")));
        }
        let obj = match cur {
            Value::Object(m) => m,
            Value::Null => {
                *cur = Value::Object(Default::default());
                cur.as_object_mut().expect("just set")
            }
            _ => return Err(Error::Config(format!("override '{key}' descends into a non-object"))),
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("split yields at least one part")
}

/// Identifies the run that produced an artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config_sha256: String,
    pub config: Value,
}

impl Provenance {
    pub fn new(command: &str, config: &ExperimentConfig) -> Result<Self> {
        let value = serde_json::to_value(config)?;
        let canonical = serde_json::to_string(&value)?;
        Ok(Self {
            tool: "rare".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed: config.seed,
            config_sha256: hex(&Sha256::digest(canonical.as_bytes())),
            config: value,
        })
    }

    /// Comment lines for the head of a CSV file.
    pub fn csv_preamble(&self) -> Vec<String> {
        vec![format!("rare {} {} seed={} config_sha256={}", self.version, self.command, self.seed, self.config_sha256)]
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `{"provenance": .., <body fields>}` as pretty JSON.
pub(crate) fn write_json<T: Serialize>(path: &Path, prov: &Provenance, body: &T) -> Result<()> {
    let mut doc = serde_json::Map::new();
    doc.insert("provenance".into(), serde_json::to_value(prov)?);
    match serde_json::to_value(body)? {
        Value::Object(m) => doc.extend(m),
        other => {
            doc.insert("value".into(), other);
        }
    }
    let mut text = serde_json::to_string_pretty(&Value::Object(doc))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Writes a CSV whose first lines are `#` comments with the provenance.
pub(crate) fn write_csv_with<F>(path: &Path, prov: &Provenance, body: F) -> Result<()>
where
    F: FnOnce(&mut Vec<u8>) -> Result<()>,
{
    let mut buf = Vec::new();
    for line in prov.csv_preamble() {
        writeln!(buf, "# {line}")?;
    }
    body(&mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}
