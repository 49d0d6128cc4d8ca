use std::fs;
use std::path::Path;

use serde_json::Value;

use super::{write_json, Provenance};
use crate::clicker::{ClickModel, Ctrv};
use crate::data::{FeatureSchema, SearchPage};
use crate::error::{Error, Result};
use crate::gbdt::GbdtModel;
use crate::reranker::RerankerModel;
use crate::saint::SaintModel;

/// Any click model the harness can train, save and load.
#[derive(Clone, Debug)]
pub enum TrainedClicker {
    Ctrv(Ctrv),
    Gbdt(GbdtModel),
    Saint(SaintModel),
}

impl TrainedClicker {
    fn inner(&self) -> &dyn ClickModel {
        match self {
            TrainedClicker::Ctrv(m) => m,
            TrainedClicker::Gbdt(m) => m,
            TrainedClicker::Saint(m) => m,
        }
    }

    fn model_value(&self) -> Result<Value> {
        Ok(match self {
            TrainedClicker::Ctrv(m) => serde_json::to_value(m)?,
            TrainedClicker::Gbdt(m) => serde_json::from_str(&m.to_json()?)?,
            TrainedClicker::Saint(m) => serde_json::from_str(&m.to_json()?)?,
        })
    }
}

impl ClickModel for TrainedClicker {
    fn kind(&self) -> &'static str {
        self.inner().kind()
    }
    fn schema(&self) -> &FeatureSchema {
        self.inner().schema()
    }
    fn predict_displayed(&self, page: &SearchPage) -> Result<Vec<f64>> {
        self.inner().predict_displayed(page)
    }
    fn predict_displayed_many(&self, pages: &[SearchPage]) -> Result<Vec<Vec<f64>>> {
        self.inner().predict_displayed_many(pages)
    }
}

#[derive(serde::Serialize)]
struct Envelope<'a> {
    kind: &'a str,
    model: Value,
}

pub fn save_clicker(path: &Path, prov: &Provenance, clicker: &TrainedClicker) -> Result<()> {
    write_json(path, prov, &Envelope { kind: clicker.kind(), model: clicker.model_value()? })
}

fn read_envelope(path: &Path) -> Result<(String, Value)> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let mut doc: Value = serde_json::from_str(&text)?;
    let kind = doc
        .get("kind")
        .and_then(Value::as_str)
        .map(str::to_owned)
        .ok_or_else(|| Error::Model(format!("{} has no model kind", path.display())))?;
    let model = doc.get_mut("model").map(Value::take).ok_or_else(|| Error::Model(format!("{} has no model", path.display())))?;
    Ok((kind, model))
}

pub fn load_clicker(path: &Path) -> Result<TrainedClicker> {
    let (kind, model) = read_envelope(path)?;
    let text = model.to_string();
    let clicker = match kind.as_str() {
        "ctrv" => TrainedClicker::Ctrv(serde_json::from_value(model)?),
        "gbdt" | "gbdt-c" => TrainedClicker::Gbdt(GbdtModel::from_json(&text)?),
        "saint-s" | "saint-q" => TrainedClicker::Saint(SaintModel::from_json(&text)?),
        other => return Err(Error::Model(format!("unknown click model kind '{other}'"))),
    };
    if clicker.kind() != kind {
        return Err(Error::Model(format!("checkpoint says '{kind}' but holds a '{}' model", clicker.kind())));
    }
    Ok(clicker)
}

pub fn save_reranker(path: &Path, prov: &Provenance, model: &RerankerModel) -> Result<()> {
    write_json(path, prov, &Envelope { kind: "reranker", model: serde_json::from_str(&model.to_json()?)? })
}

pub fn load_reranker(path: &Path) -> Result<RerankerModel> {
    let (kind, model) = read_envelope(path)?;
    if kind != "reranker" {
        return Err(Error::Model(format!("{} holds a '{kind}' model, not a reranker", path.display())));
    }
    RerankerModel::from_json(&model.to_string())
}
