//! `rare`: train and evaluate click models and revenue-aware rerankers.
//!
//! Every verb reads one JSON config (`--config`), applies flag overrides and
//! writes its artifacts to `--out`. Exit codes: 0 on success, 1 for usage or
//! config errors, 2 for runtime failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rare_core::experiment::{run, Command, ExperimentConfig};

#[derive(Parser, Debug)]
#[command(name = "rare", version, about = "Revenue-aware reranking experiments")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON experiment config; missing keys take their defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Directory with train.csv, val.csv and test.csv instead of synthetic pages.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Override any config key, e.g. `--set data.n_pages=2000`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Verb {
    /// Generate synthetic click logs and write the splits as CSV.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pages: Option<usize>,
        #[arg(long)]
        page_len: Option<usize>,
    },
    /// Train the configured click model.
    TrainClicker {
        #[command(flatten)]
        common: Common,
        /// ctrv, gbdt, gbdt-c, saint-s or saint-q.
        #[arg(long)]
        kind: Option<String>,
    },
    /// Score a click model checkpoint on the test split.
    EvalClicker {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        clicker: Option<PathBuf>,
    },
    /// Train a reranker against a frozen click model.
    TrainReranker {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        clicker: Option<PathBuf>,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Score a reranker (or the identity order when none is given).
    EvalReranker {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        clicker: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        reranker: Option<PathBuf>,
    },
    /// Train rerankers over a list of alphas for each click model.
    SweepAlpha {
        #[command(flatten)]
        common: Common,
        /// Click model checkpoints, repeatable.
        #[arg(long = "clicker", value_name = "PATH")]
        clickers: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        alphas: Vec<f64>,
    },
    /// Compare neighbour radii of the context-expanded trees.
    SweepK {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        k: Vec<usize>,
    },
    /// Time chunked attention inference for several batch sizes.
    BenchAttention {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        clicker: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        b: Vec<usize>,
    },
    /// Exhaustive hyperparameter search for the configured click model.
    GridSearch {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        kind: Option<String>,
    },
}

fn json_path(p: &std::path::Path) -> String {
    serde_json::Value::String(p.display().to_string()).to_string()
}

fn json_list<T: ToString>(v: &[T]) -> String {
    format!("[{}]", v.iter().map(ToString::to_string).collect::<Vec<_>>().join(","))
}

/// The command, the common flags and the verb flags as config overrides.
fn plan(verb: Verb) -> (Command, Common, Vec<(String, String)>) {
    let mut o: Vec<(String, String)> = Vec::new();
    let mut put = |k: &str, v: String| o.push((k.to_string(), v));
    let (cmd, common) = match verb {
        Verb::GenData { common, pages, page_len } => {
            if let Some(v) = pages {
                put("data.n_pages", v.to_string());
            }
            if let Some(v) = page_len {
                put("data.page_len", v.to_string());
            }
            (Command::GenData, common)
        }
        Verb::TrainClicker { common, kind } => {
            if let Some(v) = kind {
                put("clicker.kind", v);
            }
            (Command::TrainClicker, common)
        }
        Verb::EvalClicker { common, clicker } => {
            if let Some(p) = clicker {
                put("inputs.clicker", json_path(&p));
            }
            (Command::EvalClicker, common)
        }
        Verb::TrainReranker { common, clicker, alpha } => {
            if let Some(p) = clicker {
                put("inputs.clicker", json_path(&p));
            }
            if let Some(a) = alpha {
                put("alpha", a.to_string());
            }
            (Command::TrainReranker, common)
        }
        Verb::EvalReranker { common, clicker, reranker } => {
            if let Some(p) = clicker {
                put("inputs.clicker", json_path(&p));
            }
            if let Some(p) = reranker {
                put("inputs.reranker", json_path(&p));
            }
            (Command::EvalReranker, common)
        }
        Verb::SweepAlpha { common, clickers, alphas } => {
            if !clickers.is_empty() {
                let list: Vec<String> = clickers.iter().map(|p| json_path(p)).collect();
                put("inputs.clickers", format!("[{}]", list.join(",")));
            }
            if !alphas.is_empty() {
                put("alphas", json_list(&alphas));
            }
            (Command::SweepAlpha, common)
        }
        Verb::SweepK { common, k } => {
            if !k.is_empty() {
                put("k_list", json_list(&k));
            }
            (Command::SweepK, common)
        }
        Verb::BenchAttention { common, clicker, b } => {
            if let Some(p) = clicker {
                put("inputs.clicker", json_path(&p));
            }
            if !b.is_empty() {
                put("b_list", json_list(&b));
            }
            (Command::BenchAttention, common)
        }
        Verb::GridSearch { common, kind } => {
            if let Some(v) = kind {
                put("clicker.kind", v);
            }
            (Command::GridSearch, common)
        }
    };
    (cmd, common, o)
}

fn configure(common: &Common, verb_overrides: Vec<(String, String)>) -> Result<ExperimentConfig, String> {
    let text = match &common.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| format!("cannot read config {}: {e}", p.display()))?,
        None => String::new(),
    };
    let mut overrides = Vec::new();
    for s in &common.set {
        let (k, v) = s.split_once('=').ok_or_else(|| format!("--set expects KEY=VALUE, got '{s}'"))?;
        overrides.push((k.trim().to_string(), v.to_string()));
    }
    if let Some(seed) = common.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    if let Some(out) = &common.out {
        overrides.push(("out".into(), json_path(out)));
    }
    if let Some(dir) = &common.data {
        overrides.push(("data.csv_dir".into(), json_path(dir)));
    }
    overrides.extend(verb_overrides);
    ExperimentConfig::from_json_with_overrides(&text, &overrides).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (cmd, common, overrides) = plan(cli.verb);
    let cfg = match configure(&common, overrides) {
        Ok(c) => c,
        Err(msg) => {
            eprintln!("rare {}: {msg}", cmd.name());
            return ExitCode::from(1);
        }
    };
    match run(cmd, cfg) {
        Ok(out) => {
            let text = serde_json::to_string_pretty(&out).expect("summary serializes");
            println!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("rare {}: {e}", cmd.name());
            ExitCode::from(if e.is_usage() { 1 } else { 2 })
        }
    }
}
