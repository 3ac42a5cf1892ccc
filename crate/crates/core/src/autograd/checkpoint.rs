//! JSON checkpoints: one object keyed by parameter name plus a `meta` entry.
//!
//! Values are written with 17 significant digits so every `f64` survives a
//! write/read cycle bit for bit.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

use super::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// Iteration counter the next stream would be derived from.
    pub position: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub step: u64,
    pub rng: RngState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_config: Option<Value>,
}

pub fn format_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_f64_array(out: &mut String, xs: impl IntoIterator<Item = f64>) {
    out.push('[');
    for (i, x) in xs.into_iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&format_f64(x));
    }
    out.push(']');
}

pub fn checkpoint_to_string(store: &ParamStore<f64>, meta: &CheckpointMeta) -> Result<String> {
    let mut out = String::from("{\n  \"meta\": ");
    out.push_str(&serde_json::to_string(meta)?);
    for (_, p) in store.iter() {
        if p.name == "meta" {
            return Err(Error::Checkpoint("parameter may not be named meta".into()));
        }
        out.push_str(",\n  ");
        out.push_str(&serde_json::to_string(&p.name)?);
        out.push_str(": {\"shape\": ");
        out.push_str(&serde_json::to_string(p.value.shape())?);
        out.push_str(", \"data\": ");
        write_f64_array(&mut out, p.value.data().iter().copied());
        out.push('}');
    }
    let _ = write!(out, "\n}}\n");
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct LoadedParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Vec<LoadedParam>,
}

pub fn checkpoint_from_str(text: &str) -> Result<Checkpoint> {
    let doc: serde_json::Map<String, Value> = serde_json::from_str(text)?;
    let mut meta = None;
    let mut params = Vec::new();
    for (name, value) in doc {
        if name == "meta" {
            meta = Some(serde_json::from_value::<CheckpointMeta>(value)?);
            continue;
        }
        #[derive(Deserialize)]
        struct Entry {
            shape: Vec<usize>,
            data: Vec<f64>,
        }
        let e: Entry = serde_json::from_value(value)?;
        if e.shape.iter().product::<usize>() != e.data.len() {
            return Err(Error::Checkpoint(format!("{name}: shape does not match data length")));
        }
        params.push(LoadedParam {
            name,
            shape: e.shape,
            data: e.data,
        });
    }
    let meta = meta.ok_or_else(|| Error::Checkpoint("missing meta object".into()))?;
    Ok(Checkpoint { meta, params })
}

impl Checkpoint {
    /// Writes every stored value into the matching parameter of `store`.
    pub fn apply_to(&self, store: &mut ParamStore<f64>) -> Result<()> {
        let mut seen = 0;
        for p in &self.params {
            let id = store
                .lookup(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", p.name)))?;
            if store.get(id).shape() != p.shape.as_slice() {
                return Err(Error::Checkpoint(format!("shape mismatch for {}", p.name)));
            }
            store.set_data(id, p.data.clone())?;
            seen += 1;
        }
        if seen != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {seen} of {} parameters",
                store.len()
            )));
        }
        Ok(())
    }
}
