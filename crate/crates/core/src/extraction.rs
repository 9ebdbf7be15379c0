//! Physical subnet extraction and parameter/FLOPs accounting.
//!
//! FLOPs count `2·m·n·k` per matrix product of one forward pass on a single
//! sample, including the attention score and value products. Elementwise
//! work (norms, activations, softmax, residual adds) and embedding lookups
//! are not counted.
//!
//! Parameter counts include the modules masks never cover (patch and token
//! embeddings, norms, the classification head), so removing half of every
//! mask site removes strictly less than half of all parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{MaskSet, PruneDecision, Structure};
use crate::model::{fold_masks, Linear, Model};
use crate::tensor::Tensor;

/// A dense model with pruned rows and columns removed.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtractedModel {
    pub model: Model,
    /// Kept entry indices per site, in registry order.
    pub kept: Vec<Vec<usize>>,
    pub params: usize,
    pub flops: usize,
}

impl ExtractedModel {
    /// Kept width per site (per head for attention sites).
    pub fn kept_widths(&self) -> Vec<usize> {
        self.kept.iter().map(Vec::len).collect()
    }
}

fn take_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    t.select_rows(rows)
}

fn slice_out_rows(lin: &Linear<Tensor>, rows: &[usize]) -> Linear<Tensor> {
    Linear {
        weight: take_rows(&lin.weight, rows),
        bias: take_rows(&lin.bias, rows),
    }
}

/// Folds kept mask values into the weights, then removes every pruned row
/// and column.
pub fn extract(model: &Model, masks: &MaskSet, decision: &PruneDecision) -> Result<ExtractedModel> {
    let config = &model.config;
    if decision.marks().len() != masks.sites().len() {
        return Err(Error::MaskMisaligned {
            site: "decision".into(),
            expected: masks.sites().len(),
            got: decision.marks().len(),
        });
    }
    let mut params = fold_masks(config, &model.params, masks)?;
    let mut kept_all = Vec::with_capacity(masks.sites().len());
    for site in masks.sites() {
        if decision.marks()[site.id].len() != site.width {
            return Err(Error::MaskMisaligned {
                site: site.name(),
                expected: site.width,
                got: decision.marks()[site.id].len(),
            });
        }
        let kept = decision.kept_indices(site.id);
        if kept.is_empty() {
            return Err(Error::EmptySite(site.name()));
        }
        match site.structure {
            Structure::Attention => {
                let attn = params.attention_mut(site.modality, site.layer);
                let width = attn.q.weight.shape()[0] / config.heads;
                let rows: Vec<usize> = (0..config.heads)
                    .flat_map(|h| kept.iter().map(move |&j| h * width + j))
                    .collect();
                attn.q = slice_out_rows(&attn.q, &rows);
                attn.k = slice_out_rows(&attn.k, &rows);
                attn.v = slice_out_rows(&attn.v, &rows);
                attn.out.weight = attn.out.weight.select_cols(&rows);
            }
            Structure::Mlp => {
                let mlp = params.mlp_mut(site.modality, site.layer);
                mlp.fc1 = slice_out_rows(&mlp.fc1, &kept);
                mlp.fc2.weight = mlp.fc2.weight.select_cols(&kept);
            }
        }
        kept_all.push(kept);
    }
    let model = Model {
        config: config.clone(),
        params,
    };
    Ok(ExtractedModel {
        params: count_params(&model),
        flops: count_flops(&model),
        model,
        kept: kept_all,
    })
}

/// Every scalar parameter, covered by masks or not.
pub fn count_params(model: &Model) -> usize {
    model.params.param_count()
}

/// Parameters removed per pruned entry of a site with this structure.
///
/// An attention entry owns one row of q, k and v (weights and bias) and one
/// column of the output projection in each of `heads` heads; an MLP entry owns
/// one row and bias of the first matrix and one column of the second.
pub fn params_per_entry(structure: Structure, embed_dim: usize, heads: usize) -> usize {
    match structure {
        Structure::Attention => heads * (4 * embed_dim + 3),
        Structure::Mlp => 2 * embed_dim + 1,
    }
}

/// Parameters removed by a decision.
pub fn pruned_param_tally(masks: &MaskSet, decision: &PruneDecision, embed_dim: usize, heads: usize) -> usize {
    masks
        .sites()
        .iter()
        .map(|s| decision.pruned_indices(s.id).len() * params_per_entry(s.structure, embed_dim, heads))
        .sum()
}

fn matmul_flops(m: usize, k: usize, n: usize) -> usize {
    2 * m * k * n
}

fn linear_flops(rows: usize, lin: &Linear<Tensor>) -> usize {
    let s = lin.weight.shape();
    matmul_flops(rows, s[1], s[0])
}

fn attention_flops(nq: usize, nk: usize, a: &crate::model::Attention<Tensor>) -> usize {
    let inner = a.q.weight.shape()[0];
    linear_flops(nq, &a.q)
        + linear_flops(nk, &a.k)
        + linear_flops(nk, &a.v)
        // scores and weighted values, summed over heads
        + 2 * matmul_flops(nq, inner, nk)
        + linear_flops(nq, &a.out)
}

fn mlp_flops(rows: usize, m: &crate::model::Mlp<Tensor>) -> usize {
    linear_flops(rows, &m.fc1) + linear_flops(rows, &m.fc2)
}

/// Forward-pass FLOPs for one sample, read from the actual tensor shapes.
pub fn count_flops(model: &Model) -> usize {
    let (nv, nl) = (model.config.image_patches, model.config.text_len);
    let p = &model.params;
    let mut total = linear_flops(nv, &p.patch_embed);
    for layer in &p.vision {
        total += attention_flops(nv, nv, &layer.attn) + mlp_flops(nv, &layer.mlp);
    }
    for layer in &p.language {
        total += attention_flops(nl, nl, &layer.self_attn)
            + attention_flops(nl, nv, &layer.cross_attn)
            + mlp_flops(nl, &layer.mlp);
    }
    // only the pooled position reaches the head
    total + linear_flops(1, &p.head)
}

/// Shape-record of one site after extraction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteShape {
    pub site: String,
    pub width: usize,
    pub kept: Vec<usize>,
}

pub fn site_shapes(masks: &MaskSet, extracted: &ExtractedModel) -> Vec<SiteShape> {
    masks
        .sites()
        .iter()
        .zip(&extracted.kept)
        .map(|(s, k)| SiteShape {
            site: s.name(),
            width: s.width,
            kept: k.clone(),
        })
        .collect()
}

#[cfg(test)]
mod tests;
