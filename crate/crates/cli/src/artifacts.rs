//! Checkpoint files inside a run directory.

use std::path::Path;

use anyhow::Result;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use upop_core::checkpoint;
use upop_core::engine::TraceRow;
use upop_core::{Error, MaskSet, Model, ModelConfig, PruneDecision, Tensor};

pub const PRETRAINED: &str = "pretrained.upck";
pub const SEARCH: &str = "search.upck";
pub const EXTRACTED: &str = "extracted.upck";
pub const RETRAINED: &str = "retrained.upck";
pub const REPORT: &str = "report.json";
pub const HEATMAP: &str = "heatmap.csv";
pub const TRACE: &str = "trace.csv";
pub const CONFIG: &str = "config.toml";

const THETA: &str = "theta.";
const MASK: &str = "mask.";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SearchMeta {
    kind: String,
    decision: PruneDecision,
    trace: Vec<TraceRow>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SubnetMeta {
    pub kind: String,
    pub kept: Vec<Vec<usize>>,
    pub params: usize,
    pub flops: usize,
    /// Largest relative output difference against the masked model.
    pub check_rel_diff: Option<f64>,
}

fn split_model(config: &ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<(Model, Vec<(String, Tensor)>)> {
    let mut theta = Vec::new();
    let mut rest = Vec::new();
    for (name, t) in tensors {
        match name.strip_prefix(THETA) {
            Some(n) => theta.push((n.to_string(), t)),
            None => rest.push((name, t)),
        }
    }
    Ok((Model::from_named(config, theta)?, rest))
}

fn theta_tensors(model: &Model) -> Vec<(String, &Tensor)> {
    model
        .params
        .named()
        .into_iter()
        .map(|(n, t)| (format!("{THETA}{n}"), t))
        .collect()
}

pub fn save_model(path: &Path, meta: &Value, model: &Model) -> Result<()> {
    checkpoint::save(path, meta, &theta_tensors(model))?;
    Ok(())
}

pub fn save_search(
    path: &Path,
    model: &Model,
    masks: &MaskSet,
    decision: &PruneDecision,
    trace: &[TraceRow],
) -> Result<()> {
    let meta = serde_json::to_value(SearchMeta {
        kind: "search".into(),
        decision: decision.clone(),
        trace: trace.to_vec(),
    })
    .map_err(Error::from)?;
    let mut tensors = theta_tensors(model);
    for (site, t) in masks.sites().iter().zip(masks.values()) {
        tensors.push((format!("{MASK}{}", site.name()), t));
    }
    checkpoint::save(path, &meta, &tensors)?;
    Ok(())
}

pub struct SearchState {
    pub model: Model,
    pub masks: MaskSet,
    pub decision: PruneDecision,
    pub trace: Vec<TraceRow>,
}

pub fn load_search(path: &Path, config: &ModelConfig) -> Result<SearchState> {
    let (meta, tensors) = checkpoint::load(path)?;
    let meta: SearchMeta = serde_json::from_value(meta).map_err(Error::from)?;
    if meta.kind != "search" {
        return Err(Error::Checkpoint(format!("expected a search checkpoint, got '{}'", meta.kind)).into());
    }
    let (model, rest) = split_model(config, tensors)?;
    let ones = MaskSet::ones(config);
    let mut values = Vec::with_capacity(ones.sites().len());
    let mut masks: std::collections::BTreeMap<String, Tensor> = rest
        .into_iter()
        .map(|(n, t)| match n.strip_prefix(MASK) {
            Some(site) => Ok((site.to_string(), t)),
            None => Err(Error::Checkpoint(format!("unexpected tensor {n}"))),
        })
        .collect::<std::result::Result<_, _>>()?;
    for site in ones.sites() {
        let t = masks
            .remove(&site.name())
            .ok_or_else(|| Error::Checkpoint(format!("missing mask {}", site.name())))?;
        values.push(t.data().to_vec());
    }
    if let Some(extra) = masks.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected mask {extra}")).into());
    }
    Ok(SearchState {
        model,
        masks: MaskSet::from_values(config, values)?,
        decision: meta.decision,
        trace: meta.trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use upop_core::masking::{per_site_select, Direction};

    fn tiny() -> ModelConfig {
        ModelConfig {
            layers: 1,
            heads: 2,
            embed_dim: 8,
            head_dim: 4,
            ffn_dim: 8,
            image_patches: 4,
            text_len: 5,
            patch_dim: 4,
            vocab: 16,
            classes: 2,
        }
    }

    #[test]
    fn search_checkpoint_round_trip() {
        let cfg = tiny();
        let model = Model::init(&cfg, 3).unwrap();
        let mut masks = MaskSet::ones(&cfg);
        masks.get_mut(2)[1] = 0.25;
        let decision = per_site_select(&masks.per_site(), 0.5, Direction::SmallestFirst).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(SEARCH);
        save_search(&path, &model, &masks, &decision, &[]).unwrap();
        let back = load_search(&path, &cfg).unwrap();
        assert_eq!(back.model, model);
        assert_eq!(back.masks, masks);
        assert_eq!(back.decision, decision);
        assert!(load_search(&dir.path().join("absent"), &cfg).is_err());
    }
}
