use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    load_clicker, load_reranker, save_clicker, save_reranker, write_csv_with, write_json, ClickerKind, ExperimentConfig,
    Provenance, TrainedClicker,
};
use crate::clicker::{ClickModel, Ctrv};
use crate::data::{save_csv, Dataset};
use crate::error::{Error, Result};
use crate::gbdt::{self, GbdtConfig, GbdtModel};
use crate::metrics::{auc, gauc, pearson, MetricReport, ReportContext};
use crate::permutation::Permutation;
use crate::reranker::{self, RerankerConfig, RerankerModel};
use crate::saint::{self, SaintConfig, SaintModel, SaintVariant};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    GenData,
    TrainClicker,
    EvalClicker,
    TrainReranker,
    EvalReranker,
    SweepAlpha,
    SweepK,
    BenchAttention,
    GridSearch,
}

impl Command {
    pub const ALL: [Command; 9] = [
        Command::GenData,
        Command::TrainClicker,
        Command::EvalClicker,
        Command::TrainReranker,
        Command::EvalReranker,
        Command::SweepAlpha,
        Command::SweepK,
        Command::BenchAttention,
        Command::GridSearch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainClicker => "train-clicker",
            Command::EvalClicker => "eval-clicker",
            Command::TrainReranker => "train-reranker",
            Command::EvalReranker => "eval-reranker",
            Command::SweepAlpha => "sweep-alpha",
            Command::SweepK => "sweep-k",
            Command::BenchAttention => "bench-attention",
            Command::GridSearch => "grid-search",
        }
    }
}

impl FromStr for Command {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown command '{s}'")))
    }
}

/// Files a command wrote and a short machine-readable summary.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CommandOutput {
    pub command: String,
    pub files: Vec<PathBuf>,
    pub summary: Value,
}

/// Resolves the config, runs `command` and records its wall-clock time in
/// `timing.json`.
pub fn run(command: Command, config: ExperimentConfig) -> Result<CommandOutput> {
    let cfg = config.resolve()?;
    fs::create_dir_all(&cfg.out)?;
    let prov = Provenance::new(command.name(), &cfg)?;
    let start = Instant::now();
    let mut out = match command {
        Command::GenData => gen_data(&cfg, &prov),
        Command::TrainClicker => train_clicker(&cfg, &prov),
        Command::EvalClicker => eval_clicker(&cfg, &prov),
        Command::TrainReranker => train_reranker(&cfg, &prov),
        Command::EvalReranker => eval_reranker(&cfg, &prov),
        Command::SweepAlpha => sweep_alpha(&cfg, &prov),
        Command::SweepK => sweep_k(&cfg, &prov),
        Command::BenchAttention => bench_attention(&cfg, &prov),
        Command::GridSearch => grid_search(&cfg, &prov),
    }?;
    let timing = cfg.out.join("timing.json");
    write_json(&timing, &prov, &json!({ "seconds": start.elapsed().as_secs_f64() }))?;
    out.files.push(timing);
    Ok(out)
}

fn output(command: Command, files: Vec<PathBuf>, summary: Value) -> CommandOutput {
    CommandOutput { command: command.name().into(), files, summary }
}

fn require<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    path.as_deref().ok_or_else(|| Error::Config(format!("no {what} checkpoint given (inputs.{what})")))
}

pub fn gen_data(cfg: &ExperimentConfig, prov: &Provenance) -> Result<CommandOutput> {
    if cfg.data.csv_dir.is_some() {
        return Err(Error::Config("gen-data generates pages; unset data.csv_dir".into()));
    }
    let (train, val, test) = cfg.load_splits()?;
    let mut files = Vec::new();
    for (name, ds) in [("train.csv", &train), ("val.csv", &val), ("test.csv", &test)] {
        let path = cfg.out.join(name);
        save_csv(ds, &path, &prov.csv_preamble())?;
        files.push(path);
    }
    let summary = json!({
        "pages": { "train": train.pages.len(), "val": val.pages.len(), "test": test.pages.len() },
        "page_len": cfg.data.page_len,
        "click_rate": train.labels().iter().filter(|c| **c).count() as f64 / train.n_items() as f64,
    });
    let manifest = cfg.out.join("manifest.json");
    write_json(&manifest, prov, &summary)?;
    files.push(manifest);
    Ok(output(Command::GenData, files, summary))
}

fn write_report(cfg: &ExperimentConfig, prov: &Provenance, report: &MetricReport, files: &mut Vec<PathBuf>) -> Result<()> {
    let json_path = cfg.out.join("report.json");
    write_json(&json_path, prov, report)?;
    let csv_path = cfg.out.join("metrics.csv");
    write_csv_with(&csv_path, prov, |w| report.write_csv(w))?;
    files.push(json_path);
    files.push(csv_path);
    Ok(())
}

fn clicker_summary(report: &MetricReport) -> Value {
    json!({ "auc": report.auc, "gauc": report.gauc, "gauc_skipped": report.gauc_skipped })
}

fn fit_clicker(cfg: &ExperimentConfig, train: &Dataset, val: &Dataset) -> Result<(TrainedClicker, Vec<u8>)> {
    let mut history = Vec::new();
    let clicker = match cfg.clicker.kind {
        ClickerKind::Ctrv => {
            writeln!(history, "note")?;
            writeln!(history, "no training")?;
            TrainedClicker::Ctrv(Ctrv::new(&train.schema, cfg.clicker.decay)?)
        }
        ClickerKind::Gbdt | ClickerKind::GbdtC => {
            let gc = cfg.clicker.gbdt.as_ref().expect("resolved");
            let (model, h) = GbdtModel::fit_with_history(train, Some(val), gc)?;
            writeln!(history, "trees,train_loss,val_loss,kept")?;
            for (i, t) in h.train_loss.iter().enumerate() {
                let v = h.val_loss.get(i).map_or_else(String::new, f64::to_string);
                writeln!(history, "{i},{t},{v},{}", u8::from(i == h.best_iteration))?;
            }
            TrainedClicker::Gbdt(model)
        }
        ClickerKind::SaintS | ClickerKind::SaintQ => {
            let sc = cfg.clicker.saint.as_ref().expect("resolved");
            let (model, h) = SaintModel::train(train, Some(val), sc, cfg.seed)?;
            saint::write_history_csv(&h, &mut history)?;
            TrainedClicker::Saint(model)
        }
    };
    Ok((clicker, history))
}

pub fn train_clicker(cfg: &ExperimentConfig, prov: &Provenance) -> Result<CommandOutput> {
    let (train, val, test) = cfg.load_splits()?;
    let (clicker, history) = fit_clicker(cfg, &train, &val)?;
    let mut files = Vec::new();
    let ckpt = cfg.out.join("clicker.json");
    save_clicker(&ckpt, prov, &clicker)?;
    files.push(ckpt);
    let hist = cfg.out.join("history.csv");
    write_csv_with(&hist, prov, |w| Ok(w.extend_from_slice(&history)))?;
    files.push(hist);
    let report = clicker_report(&clicker, &test, cfg)?;
    write_report(cfg, prov, &report, &mut files)?;
    Ok(output(Command::TrainClicker, files, clicker_summary(&report)))
}

fn clicker_report(clicker: &TrainedClicker, test: &Dataset, cfg: &ExperimentConfig) -> Result<MetricReport> {
    let pred = clicker.predict_displayed_many(&test.pages)?;
    let mut report = MetricReport::for_clicker(&test.pages, &pred)?;
    report.context = ReportContext { seed: Some(cfg.seed), ..Default::default() };
    if let TrainedClicker::Ctrv(c) = clicker {
        report.context.decay = Some(c.decay);
    }
    Ok(report)
}

pub fn eval_clicker(cfg: &ExperimentConfig, prov: &Provenance) -> Result<CommandOutput> {
    let clicker = load_clicker(require(&cfg.inputs.clicker, "clicker")?)?;
    let (_, _, test) = cfg.load_splits()?;
    let report = clicker_report(&clicker, &test, cfg)?;
    let mut files = Vec::new();
    write_report(cfg, prov, &report, &mut files)?;
    Ok(output(Command::EvalClicker, files, clicker_summary(&report)))
}

fn check_kind(clicker: &TrainedClicker, cfg: &ExperimentConfig) -> Result<()> {
    if clicker.kind() != cfg.clicker.kind.as_str() {
        return Err(Error::Config(format!(
            "clicker checkpoint is '{}' but the config asks for '{}'",
            clicker.kind(),
            cfg.clicker.kind.as_str()
        )));
    }
    Ok(())
}

fn reranking_report(
    clicker: &TrainedClicker,
    test: &Dataset,
    perms: &[Permutation],
    cfg: &ExperimentConfig,
    rc: &RerankerConfig,
    seed: u64,
) -> Result<MetricReport> {
    let mut report = MetricReport::for_reranking(clicker, &test.pages, perms, cfg.relevance_decay, rc.threshold)?;
    report.context.alpha = Some(rc.regularization.alpha);
    report.context.r_organic = Some(rc.regularization.r_organic);
    report.context.seed = Some(seed);
    Ok(report)
}

fn reranking_summary(report: &MetricReport) -> Value {
    json!({
        "delta_revenue": report.delta_revenue,
        "difference_nats": report.difference,
        "ndcg": report.ndcg,
        "decay": report.context.decay,
        "threshold": report.context.threshold,
    })
}

pub fn train_reranker(cfg: &ExperimentConfig, prov: &Provenance) -> Result<CommandOutput> {
    let clicker = load_clicker(require(&cfg.inputs.clicker, "clicker")?)?;
    check_kind(&clicker, cfg)?;
    let (train, val, test) = cfg.load_splits()?;
    let rc = cfg.reranker_config();
    let (model, history) = RerankerModel::train(&clicker, &train, Some(&val), &rc, cfg.seed)?;
    let mut files = Vec::new();
    let ckpt = cfg.out.join("reranker.json");
    save_reranker(&ckpt, prov, &model)?;
    files.push(ckpt);
    let hist = cfg.out.join("history.csv");
    write_csv_with(&hist, prov, |w| reranker::write_history_csv(&history, w))?;
    files.push(hist);
    let perms = model.rerank_many(&test.pages)?;
    let report = reranking_report(&clicker, &test, &perms, cfg, &rc, cfg.seed)?;
    write_report(cfg, prov, &report, &mut files)?;
    Ok(output(Command::TrainReranker, files, reranking_summary(&report)))
}

pub fn eval_reranker(cfg: &ExperimentConfig, prov: &Provenance) -> Result<CommandOutput> {
    let clicker = load_clicker(require(&cfg.inputs.clicker, "clicker")?)?;
    let (_, _, test) = cfg.load_splits()?;
    let (perms, rc) = match &cfg.inputs.reranker {
        Some(path) => {
            let model = load_reranker(path)?;
            if model.clicker_kind != clicker.kind() {
                return Err(Error::Config(format!(
                    "reranker was trained against '{}' but the clicker is '{}'",
                    model.clicker_kind,
                    clicker.kind()
                )));
            }
            (model.rerank_many(&test.pages)?, model.config)
        }
        None => (test.pages.iter().map(|p| Permutation::identity(p.len())).collect(), cfg.reranker_config()),
    };
    let report = reranking_report(&clicker, &test, &perms, cfg, &rc, cfg.seed)?;
    let mut files = Vec::new();
    write_report(cfg, prov, &report, &mut files)?;
    Ok(output(Command::EvalReranker, files, reranking_summary(&report)))
}

/// Mean and sample standard deviation of one metric over seeds.
fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub clicker: String,
    pub alpha: f64,
    pub delta_revenue: f64,
    pub delta_revenue_std: f64,
    pub difference_nats: f64,
    pub difference_std: f64,
    pub ndcg: f64,
    pub ndcg_std: f64,
    pub seeds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CorrelationRow {
    clicker: String,
    revenue_vs_difference: Option<f64>,
    revenue_vs_ndcg: Option<f64>,
}

/// Runs `n` independent jobs on at most `jobs` threads; results keep job order.
fn run_jobs<T, F>(jobs: usize, n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if jobs > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        return pool.install(|| (0..n).into_par_iter().map(&f).collect());
    }
    let _ = jobs;
    (0..n).map(f).collect()
}

/// Reranker settings for one sweep cell. The configured reranker is used
/// as is for its own clicker kind; other kinds keep their tuned sizes,
/// organic revenue and threshold but share the configured schedule.
fn sweep_reranker(cfg: &ExperimentConfig, kind: &str, alpha: f64) -> RerankerConfig {
    let base = cfg.reranker_config();
    let mut rc = if kind == cfg.clicker.kind.as_str() {
        base
    } else {
        let tuned = RerankerConfig::for_clicker(kind, alpha);
        RerankerConfig { hidden: tuned.hidden, regularization: tuned.regularization, threshold: tuned.threshold, ..base }
    };
    rc.regularization.alpha = alpha;
    rc
}

pub fn sweep_alpha(cfg: &ExperimentConfig, prov: &Provenance) -> Result<CommandOutput> {
    let paths: Vec<&Path> = if cfg.inputs.clickers.is_empty() {
        vec![require(&cfg.inputs.clicker, "clicker")?]
    } else {
        cfg.inputs.clickers.iter().map(PathBuf::as_path).collect()
    };
    if cfg.alphas.is_empty() {
        return Err(Error::Config("alpha sweep needs at least one alpha".into()));
    }
    let clickers = paths.iter().map(|p| load_clicker(p)).collect::<Result<Vec<_>>>()?;
    let (train, val, test) = cfg.load_splits()?;
    let (na, ns) = (cfg.alphas.len(), cfg.sweep_seeds.len());
    let results = run_jobs(cfg.jobs, clickers.len() * na * ns, |job| {
        let (c, a, s) = (job / (na * ns), (job / ns) % na, job % ns);
        let clicker = &clickers[c];
        let alpha = cfg.alphas[a];
        let rc = sweep_reranker(cfg, clicker.kind(), alpha);
        let seed = cfg.sweep_seeds[s];
        let (model, _) = RerankerModel::train(clicker, &train, Some(&val), &rc, seed)?;
        let perms = model.rerank_many(&test.pages)?;
        let r = reranking_report(clicker, &test, &perms, cfg, &rc, seed)?;
        let get = |v: Option<f64>| v.ok_or_else(|| Error::UndefinedMetric("empty reranking report".into()));
        Ok([get(r.delta_revenue)?, get(r.difference)?, get(r.ndcg)?])
    })?;
    let mut rows = Vec::new();
    let mut corr = Vec::new();
    for (c, clicker) in clickers.iter().enumerate() {
        let start = rows.len();
        for (a, &alpha) in cfg.alphas.iter().enumerate() {
            let cell = |m: usize| -> Vec<f64> { (0..ns).map(|s| results[(c * na + a) * ns + s][m]).collect() };
            let (r, rs) = mean_std(&cell(0));
            let (d, ds) = mean_std(&cell(1));
            let (n, nsd) = mean_std(&cell(2));
            rows.push(SweepRow {
                clicker: clicker.kind().into(),
                alpha,
                delta_revenue: r,
                delta_revenue_std: rs,
                difference_nats: d,
                difference_std: ds,
                ndcg: n,
                ndcg_std: nsd,
                seeds: ns,
            });
        }
        let mine = &rows[start..];
        let col = |f: fn(&SweepRow) -> f64| mine.iter().map(f).collect::<Vec<f64>>();
        let revenue = col(|r| r.delta_revenue);
        corr.push(CorrelationRow {
            clicker: clicker.kind().into(),
            revenue_vs_difference: pearson(&revenue, &col(|r| r.difference_nats)).ok(),
            revenue_vs_ndcg: pearson(&revenue, &col(|r| r.ndcg)).ok(),
        });
    }
    let mut files = Vec::new();
    let sweep_csv = cfg.out.join("sweep_alpha.csv");
    write_csv_with(&sweep_csv, prov, |w| write_rows(w, &rows))?;
    files.push(sweep_csv);
    let corr_csv = cfg.out.join("correlations.csv");
    write_csv_with(&corr_csv, prov, |w| write_rows(w, &corr))?;
    files.push(corr_csv);
    let summary = json!({ "rows": rows, "correlations": corr, "decay": cfg.relevance_decay });
    let report = cfg.out.join("report.json");
    write_json(&report, prov, &summary)?;
    files.push(report);
    Ok(output(Command::SweepAlpha, files, summary))
}

fn write_rows<T: Serialize>(w: &mut Vec<u8>, rows: &[T]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    for r in rows {
        csv.serialize(r)?;
    }
    csv.flush()?;
    Ok(())
}

fn gbdt_base(cfg: &ExperimentConfig) -> GbdtConfig {
    cfg.clicker.gbdt.clone().unwrap_or_else(|| GbdtConfig::gbdt_c(1))
}

#[derive(Serialize)]
struct KRow {
    k: usize,
    auc: f64,
    gauc: f64,
}

#[derive(Serialize)]
struct KTiming {
    k: usize,
    inference_ms_per_page: f64,
}

pub fn sweep_k(cfg: &ExperimentConfig, prov: &Provenance) -> Result<CommandOutput> {
    let (train, val, test) = cfg.load_splits()?;
    let rows = gbdt::sweep_k(&train, &val, &test, &gbdt_base(cfg), &cfg.k_list)?;
    let quality: Vec<KRow> = rows.iter().map(|r| KRow { k: r.k, auc: r.auc, gauc: r.gauc }).collect();
    let timing: Vec<KTiming> = rows.iter().map(|r| KTiming { k: r.k, inference_ms_per_page: r.inference_ms }).collect();
    let mut files = Vec::new();
    let path = cfg.out.join("sweep_k.csv");
    write_csv_with(&path, prov, |w| write_rows(w, &quality))?;
    files.push(path);
    let path = cfg.out.join("timing_sweep_k.csv");
    write_csv_with(&path, prov, |w| write_rows(w, &timing))?;
    files.push(path);
    let summary = json!({ "rows": quality });
    let path = cfg.out.join("report.json");
    write_json(&path, prov, &summary)?;
    files.push(path);
    Ok(output(Command::SweepK, files, summary))
}

pub fn bench_attention(cfg: &ExperimentConfig, prov: &Provenance) -> Result<CommandOutput> {
    let (train, _, test) = cfg.load_splits()?;
    let model = match &cfg.inputs.clicker {
        Some(path) => match load_clicker(path)? {
            TrainedClicker::Saint(m) if m.config.variant == SaintVariant::Q => m,
            other => return Err(Error::Config(format!("bench-attention needs a saint-q checkpoint, got '{}'", other.kind()))),
        },
        None => {
            let sc = match &cfg.clicker.saint {
                Some(s) if s.variant == SaintVariant::Q => s.clone(),
                _ => SaintConfig { page_len: cfg.data.page_len, ..SaintConfig::best(SaintVariant::Q) },
            };
            SaintModel::init(&sc, &train, cfg.seed)?
        }
    };
    let rows = saint::bench_chunk_batching(&model, &test, &cfg.b_list, cfg.bench_repetitions)?;
    let mut files = Vec::new();
    let path = cfg.out.join("timing_bench_attention.csv");
    write_csv_with(&path, prov, |w| write_rows(w, &rows))?;
    files.push(path);
    let plan = json!({
        "b_list": cfg.b_list,
        "repetitions": rows.first().map(|r| r.repetitions),
        "page_len": cfg.data.page_len,
        "threads": std::thread::available_parallelism().map(usize::from).unwrap_or(1),
    });
    let path = cfg.out.join("report.json");
    write_json(&path, prov, &plan)?;
    files.push(path);
    Ok(output(Command::BenchAttention, files, json!({ "plan": plan, "rows": rows })))
}

#[derive(Serialize)]
struct SaintGridRow {
    d_model: usize,
    n_layers: usize,
    learning_rate: f64,
    val_auc: f64,
    val_gauc: f64,
    selected: bool,
}

pub fn grid_search(cfg: &ExperimentConfig, prov: &Provenance) -> Result<CommandOutput> {
    let (train, val, _) = cfg.load_splits()?;
    let mut files = Vec::new();
    let grid_csv = cfg.out.join("grid.csv");
    let (best, n_points) = match cfg.clicker.kind {
        ClickerKind::Ctrv => return Err(Error::Config("the CTRV baseline has no hyperparameters to search".into())),
        ClickerKind::Gbdt | ClickerKind::GbdtC => {
            let (rows, model) = gbdt::grid_search(&train, &val, &gbdt_base(cfg), &cfg.gbdt_grid)?;
            write_csv_with(&grid_csv, prov, |w| write_rows(w, &rows))?;
            (TrainedClicker::Gbdt(model), rows.len())
        }
        ClickerKind::SaintS | ClickerKind::SaintQ => {
            let points = cfg.saint_grid.points(cfg.clicker.saint.as_ref().expect("resolved"));
            if points.is_empty() {
                return Err(Error::Config("empty hyperparameter grid".into()));
            }
            let labels: Vec<Vec<bool>> = val.pages.iter().map(|p| p.labels()).collect();
            let flat: Vec<bool> = labels.iter().flatten().copied().collect();
            let fitted = run_jobs(cfg.jobs, points.len(), |i| {
                let (model, _) = SaintModel::train(&train, Some(&val), &points[i], cfg.seed)?;
                let pred = model.predict_dataset(&val)?;
                let flat_p: Vec<f64> = pred.iter().flatten().copied().collect();
                Ok((model, auc(&flat, &flat_p)?, gauc(&labels, &pred)?.value))
            })?;
            let best_i = (0..fitted.len()).fold(0, |b, i| if fitted[i].2 > fitted[b].2 { i } else { b });
            let rows: Vec<SaintGridRow> = points
                .iter()
                .zip(&fitted)
                .enumerate()
                .map(|(i, (p, f))| SaintGridRow {
                    d_model: p.d_model,
                    n_layers: p.n_layers,
                    learning_rate: p.learning_rate,
                    val_auc: f.1,
                    val_gauc: f.2,
                    selected: i == best_i,
                })
                .collect();
            write_csv_with(&grid_csv, prov, |w| write_rows(w, &rows))?;
            let n = rows.len();
            (TrainedClicker::Saint(fitted.into_iter().nth(best_i).expect("non-empty").0), n)
        }
    };
    files.push(grid_csv);
    let ckpt = cfg.out.join("clicker.json");
    save_clicker(&ckpt, prov, &best)?;
    files.push(ckpt);
    let summary = json!({ "points": n_points, "selected_kind": best.kind() });
    let path = cfg.out.join("report.json");
    write_json(&path, prov, &summary)?;
    files.push(path);
    Ok(output(Command::GridSearch, files, summary))
}
