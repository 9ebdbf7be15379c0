//! Toy vision-language transformer with mask insertion points.
//!
//! The image branch is a stack of pre-norm self-attention blocks over patch
//! embeddings. Each language block runs self-attention, then cross-attention
//! into the final image features, then an MLP. Classification reads the first
//! language position.
//!
//! Masks follow the site layout of [`crate::masking::SiteRegistry`]: every
//! attention site owns one vector of length `head_dim` that scales the q, k
//! and v projections of *all* heads of that layer; every MLP site owns one
//! vector of length `ffn_dim` that scales the hidden activation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::dataset::Batch;
use crate::error::{Error, Result};
use crate::masking::{MaskSet, Modality, SiteRegistry, Structure};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Layers per branch.
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub image_patches: usize,
    pub text_len: usize,
    /// Features per image patch.
    pub patch_dim: usize,
    pub vocab: usize,
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            embed_dim: 32,
            head_dim: 8,
            ffn_dim: 64,
            image_patches: 16,
            text_len: 12,
            patch_dim: 16,
            vocab: 64,
            classes: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("embed_dim", self.embed_dim),
            ("head_dim", self.head_dim),
            ("ffn_dim", self.ffn_dim),
            ("image_patches", self.image_patches),
            ("text_len", self.text_len),
            ("patch_dim", self.patch_dim),
            ("vocab", self.vocab),
            ("classes", self.classes),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
        }
        if self.embed_dim != self.heads * self.head_dim {
            return Err(Error::InvalidConfig(format!(
                "embed_dim {} != heads {} * head_dim {}",
                self.embed_dim, self.heads, self.head_dim
            )));
        }
        Ok(())
    }

    pub fn attention_scale(&self) -> f64 {
        1.0 / (self.head_dim as f64).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear<T> {
    /// `[out, in]`.
    pub weight: T,
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Norm<T> {
    pub gamma: T,
    pub beta: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attention<T> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub out: Linear<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisionLayer<T> {
    pub norm1: Norm<T>,
    pub attn: Attention<T>,
    pub norm2: Norm<T>,
    pub mlp: Mlp<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageLayer<T> {
    pub norm1: Norm<T>,
    pub self_attn: Attention<T>,
    pub norm2: Norm<T>,
    pub cross_attn: Attention<T>,
    pub norm3: Norm<T>,
    pub mlp: Mlp<T>,
}

/// Every parameter of the model, generic over the leaf type so the same tree
/// holds tensors, graph handles, or optimizer state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params<T> {
    pub patch_embed: Linear<T>,
    /// `[vocab, embed_dim]`.
    pub token_embed: T,
    pub vision: Vec<VisionLayer<T>>,
    pub vision_norm: Norm<T>,
    pub language: Vec<LanguageLayer<T>>,
    pub language_norm: Norm<T>,
    pub head: Linear<T>,
}

pub type ModelParams = Params<Tensor>;

// Tree traversal. `walk`, `walk_mut` and `map` visit leaves in the same order.

impl<T> Linear<T> {
    fn walk<'a>(&'a self, path: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(format!("{path}.weight"), &self.weight);
        f(format!("{path}.bias"), &self.bias);
    }
    fn walk_mut(&mut self, path: &str, f: &mut dyn FnMut(String, &mut T)) {
        f(format!("{path}.weight"), &mut self.weight);
        f(format!("{path}.bias"), &mut self.bias);
    }
    fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Linear<U> {
        Linear {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }
}

impl<T> Norm<T> {
    fn walk<'a>(&'a self, path: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(format!("{path}.gamma"), &self.gamma);
        f(format!("{path}.beta"), &self.beta);
    }
    fn walk_mut(&mut self, path: &str, f: &mut dyn FnMut(String, &mut T)) {
        f(format!("{path}.gamma"), &mut self.gamma);
        f(format!("{path}.beta"), &mut self.beta);
    }
    fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Norm<U> {
        Norm {
            gamma: f(&self.gamma),
            beta: f(&self.beta),
        }
    }
}

impl<T> Attention<T> {
    fn walk<'a>(&'a self, path: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.q.walk(&format!("{path}.q"), f);
        self.k.walk(&format!("{path}.k"), f);
        self.v.walk(&format!("{path}.v"), f);
        self.out.walk(&format!("{path}.out"), f);
    }
    fn walk_mut(&mut self, path: &str, f: &mut dyn FnMut(String, &mut T)) {
        self.q.walk_mut(&format!("{path}.q"), f);
        self.k.walk_mut(&format!("{path}.k"), f);
        self.v.walk_mut(&format!("{path}.v"), f);
        self.out.walk_mut(&format!("{path}.out"), f);
    }
    fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Attention<U> {
        Attention {
            q: self.q.map(f),
            k: self.k.map(f),
            v: self.v.map(f),
            out: self.out.map(f),
        }
    }
}

impl<T> Mlp<T> {
    fn walk<'a>(&'a self, path: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.fc1.walk(&format!("{path}.fc1"), f);
        self.fc2.walk(&format!("{path}.fc2"), f);
    }
    fn walk_mut(&mut self, path: &str, f: &mut dyn FnMut(String, &mut T)) {
        self.fc1.walk_mut(&format!("{path}.fc1"), f);
        self.fc2.walk_mut(&format!("{path}.fc2"), f);
    }
    fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Mlp<U> {
        Mlp {
            fc1: self.fc1.map(f),
            fc2: self.fc2.map(f),
        }
    }
}

impl<T> Params<T> {
    pub fn walk<'a>(&'a self, f: &mut dyn FnMut(String, &'a T)) {
        self.patch_embed.walk("patch_embed", f);
        f("token_embed".into(), &self.token_embed);
        for (l, layer) in self.vision.iter().enumerate() {
            let p = format!("vision.{l}");
            layer.norm1.walk(&format!("{p}.norm1"), f);
            layer.attn.walk(&format!("{p}.attn"), f);
            layer.norm2.walk(&format!("{p}.norm2"), f);
            layer.mlp.walk(&format!("{p}.mlp"), f);
        }
        self.vision_norm.walk("vision_norm", f);
        for (l, layer) in self.language.iter().enumerate() {
            let p = format!("language.{l}");
            layer.norm1.walk(&format!("{p}.norm1"), f);
            layer.self_attn.walk(&format!("{p}.self_attn"), f);
            layer.norm2.walk(&format!("{p}.norm2"), f);
            layer.cross_attn.walk(&format!("{p}.cross_attn"), f);
            layer.norm3.walk(&format!("{p}.norm3"), f);
            layer.mlp.walk(&format!("{p}.mlp"), f);
        }
        self.language_norm.walk("language_norm", f);
        self.head.walk("head", f);
    }

    pub fn walk_mut(&mut self, f: &mut dyn FnMut(String, &mut T)) {
        self.patch_embed.walk_mut("patch_embed", f);
        f("token_embed".into(), &mut self.token_embed);
        for (l, layer) in self.vision.iter_mut().enumerate() {
            let p = format!("vision.{l}");
            layer.norm1.walk_mut(&format!("{p}.norm1"), f);
            layer.attn.walk_mut(&format!("{p}.attn"), f);
            layer.norm2.walk_mut(&format!("{p}.norm2"), f);
            layer.mlp.walk_mut(&format!("{p}.mlp"), f);
        }
        self.vision_norm.walk_mut("vision_norm", f);
        for (l, layer) in self.language.iter_mut().enumerate() {
            let p = format!("language.{l}");
            layer.norm1.walk_mut(&format!("{p}.norm1"), f);
            layer.self_attn.walk_mut(&format!("{p}.self_attn"), f);
            layer.norm2.walk_mut(&format!("{p}.norm2"), f);
            layer.cross_attn.walk_mut(&format!("{p}.cross_attn"), f);
            layer.norm3.walk_mut(&format!("{p}.norm3"), f);
            layer.mlp.walk_mut(&format!("{p}.mlp"), f);
        }
        self.language_norm.walk_mut("language_norm", f);
        self.head.walk_mut("head", f);
    }

    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Params<U> {
        Params {
            patch_embed: self.patch_embed.map(f),
            token_embed: f(&self.token_embed),
            vision: self
                .vision
                .iter()
                .map(|l| VisionLayer {
                    norm1: l.norm1.map(f),
                    attn: l.attn.map(f),
                    norm2: l.norm2.map(f),
                    mlp: l.mlp.map(f),
                })
                .collect(),
            vision_norm: self.vision_norm.map(f),
            language: self
                .language
                .iter()
                .map(|l| LanguageLayer {
                    norm1: l.norm1.map(f),
                    self_attn: l.self_attn.map(f),
                    norm2: l.norm2.map(f),
                    cross_attn: l.cross_attn.map(f),
                    norm3: l.norm3.map(f),
                    mlp: l.mlp.map(f),
                })
                .collect(),
            language_norm: self.language_norm.map(f),
            head: self.head.map(f),
        }
    }

    /// Leaves in traversal order.
    pub fn leaves(&self) -> Vec<&T> {
        let mut out = Vec::new();
        self.walk(&mut |_, t| out.push(t));
        out
    }

    pub fn attention(&self, modality: Modality, layer: usize) -> &Attention<T> {
        match modality {
            Modality::Vision => &self.vision[layer].attn,
            Modality::Language => &self.language[layer].self_attn,
            Modality::Cross => &self.language[layer].cross_attn,
        }
    }

    pub fn attention_mut(&mut self, modality: Modality, layer: usize) -> &mut Attention<T> {
        match modality {
            Modality::Vision => &mut self.vision[layer].attn,
            Modality::Language => &mut self.language[layer].self_attn,
            Modality::Cross => &mut self.language[layer].cross_attn,
        }
    }

    pub fn mlp(&self, modality: Modality, layer: usize) -> &Mlp<T> {
        match modality {
            Modality::Vision => &self.vision[layer].mlp,
            _ => &self.language[layer].mlp,
        }
    }

    pub fn mlp_mut(&mut self, modality: Modality, layer: usize) -> &mut Mlp<T> {
        match modality {
            Modality::Vision => &mut self.vision[layer].mlp,
            _ => &mut self.language[layer].mlp,
        }
    }
}

impl Params<Tensor> {
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.walk(&mut |n, t| out.push((n, t)));
        out
    }

    pub fn param_count(&self) -> usize {
        self.leaves().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.leaves().iter().all(|t| t.is_finite())
    }

    /// Binds every tensor as a trainable graph leaf.
    pub fn bind(&self, g: &mut Graph) -> Params<Var> {
        self.map(&mut |t| g.param(t.clone()))
    }

    /// Binds every tensor as a constant.
    pub fn bind_constant(&self, g: &mut Graph) -> Params<Var> {
        self.map(&mut |t| g.constant(t.clone()))
    }
}

fn linear_init(rng: &mut ChaCha8Rng, out_f: usize, in_f: usize) -> Linear<Tensor> {
    Linear {
        weight: Tensor::randn(&[out_f, in_f], 1.0 / (in_f as f64).sqrt(), rng),
        bias: Tensor::zeros(&[out_f]),
    }
}

fn norm_init(dim: usize) -> Norm<Tensor> {
    Norm {
        gamma: Tensor::ones(&[dim]),
        beta: Tensor::zeros(&[dim]),
    }
}

fn attention_init(rng: &mut ChaCha8Rng, d: usize) -> Attention<Tensor> {
    Attention {
        q: linear_init(rng, d, d),
        k: linear_init(rng, d, d),
        v: linear_init(rng, d, d),
        out: linear_init(rng, d, d),
    }
}

fn mlp_init(rng: &mut ChaCha8Rng, d: usize, f: usize) -> Mlp<Tensor> {
    Mlp {
        fc1: linear_init(rng, f, d),
        fc2: linear_init(rng, d, f),
    }
}

/// A configuration together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let f = config.ffn_dim;
        let params = Params {
            patch_embed: linear_init(&mut rng, d, config.patch_dim),
            token_embed: Tensor::randn(&[config.vocab, d], 1.0, &mut rng),
            vision: (0..config.layers)
                .map(|_| VisionLayer {
                    norm1: norm_init(d),
                    attn: attention_init(&mut rng, d),
                    norm2: norm_init(d),
                    mlp: mlp_init(&mut rng, d, f),
                })
                .collect(),
            vision_norm: norm_init(d),
            language: (0..config.layers)
                .map(|_| LanguageLayer {
                    norm1: norm_init(d),
                    self_attn: attention_init(&mut rng, d),
                    norm2: norm_init(d),
                    cross_attn: attention_init(&mut rng, d),
                    norm3: norm_init(d),
                    mlp: mlp_init(&mut rng, d, f),
                })
                .collect(),
            language_norm: norm_init(d),
            head: linear_init(&mut rng, config.classes, d),
        };
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    /// Kept per-head width of an attention module (the full `head_dim` unless
    /// the model was extracted).
    pub fn head_width(&self, modality: Modality, layer: usize) -> usize {
        self.params.attention(modality, layer).q.weight.shape()[0] / self.config.heads
    }

    pub fn hidden_width(&self, modality: Modality, layer: usize) -> usize {
        self.params.mlp(modality, layer).fc1.weight.shape()[0]
    }

    /// Rebuilds a model from named tensors; shapes may be narrower than the
    /// config (extracted models).
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Model::init(config, 0)?;
        let mut map: std::collections::BTreeMap<String, Tensor> = named.into_iter().collect();
        let mut missing = Vec::new();
        model.params.walk_mut(&mut |name, t| match map.remove(&name) {
            Some(v) => *t = v,
            None => missing.push(name),
        });
        if !missing.is_empty() {
            return Err(Error::Checkpoint(format!("missing tensors: {missing:?}")));
        }
        if !map.is_empty() {
            let extra: Vec<_> = map.keys().collect();
            return Err(Error::Checkpoint(format!("unexpected tensors: {extra:?}")));
        }
        Ok(model)
    }
}

fn linear(g: &mut Graph, x: Var, p: &Linear<Var>) -> Result<Var> {
    g.linear(x, p.weight, Some(p.bias))
}

fn norm(g: &mut Graph, x: Var, p: &Norm<Var>) -> Result<Var> {
    g.layer_norm(x, p.gamma, p.beta)
}

struct Shape {
    batch: usize,
    heads: usize,
    scale: f64,
}

fn attention_block(
    g: &mut Graph,
    shape: &Shape,
    query_src: Var,
    kv_src: Var,
    p: &Attention<Var>,
    mask: Option<Var>,
) -> Result<Var> {
    let mut q = linear(g, query_src, &p.q)?;
    let mut k = linear(g, kv_src, &p.k)?;
    let mut v = linear(g, kv_src, &p.v)?;
    if let Some(m) = mask {
        q = g.scale_columns(q, m)?;
        k = g.scale_columns(k, m)?;
        v = g.scale_columns(v, m)?;
    }
    let o = g.attention(q, k, v, shape.batch, shape.heads, shape.scale)?;
    linear(g, o, &p.out)
}

fn mlp_block(g: &mut Graph, x: Var, p: &Mlp<Var>, mask: Option<Var>) -> Result<Var> {
    let h = linear(g, x, &p.fc1)?;
    let mut h = g.gelu(h)?;
    if let Some(m) = mask {
        h = g.scale_columns(h, m)?;
    }
    linear(g, h, &p.fc2)
}

fn check_masks(g: &Graph, config: &ModelConfig, params: &Params<Var>, masks: &[Var]) -> Result<()> {
    let registry = SiteRegistry::new(config);
    if masks.len() != registry.len() {
        return Err(Error::MaskMisaligned {
            site: "mask set".into(),
            expected: registry.len(),
            got: masks.len(),
        });
    }
    for site in registry.sites() {
        let expected = match site.structure {
            Structure::Attention => {
                g.value(params.attention(site.modality, site.layer).q.weight).shape()[0]
                    / config.heads
            }
            Structure::Mlp => g.value(params.mlp(site.modality, site.layer).fc1.weight).shape()[0],
        };
        let got = g.value(masks[site.id]).len();
        if got != expected || g.value(masks[site.id]).shape().len() != 1 {
            return Err(Error::MaskMisaligned {
                site: site.name(),
                expected,
                got,
            });
        }
    }
    Ok(())
}

/// Builds the forward pass and returns `[batch, classes]` logits.
pub fn forward(
    g: &mut Graph,
    config: &ModelConfig,
    params: &Params<Var>,
    masks: Option<&[Var]>,
    batch: &Batch,
) -> Result<Var> {
    batch.check(config)?;
    if let Some(m) = masks {
        check_masks(g, config, params, m)?;
    }
    let registry = SiteRegistry::new(config);
    let mask_for = |modality, structure, layer| {
        masks.map(|m| m[registry.site_index(modality, structure, layer)])
    };
    let n = batch.size;
    let shape = Shape {
        batch: n,
        heads: config.heads,
        scale: config.attention_scale(),
    };

    let img = g.constant(batch.images.clone());
    let mut v = linear(g, img, &params.patch_embed)?;
    for (l, layer) in params.vision.iter().enumerate() {
        let h = norm(g, v, &layer.norm1)?;
        let a = attention_block(
            g,
            &shape,
            h,
            h,
            &layer.attn,
            mask_for(Modality::Vision, Structure::Attention, l),
        )?;
        v = g.add(v, a)?;
        let h = norm(g, v, &layer.norm2)?;
        let m = mlp_block(g, h, &layer.mlp, mask_for(Modality::Vision, Structure::Mlp, l))?;
        v = g.add(v, m)?;
    }
    let vis = norm(g, v, &params.vision_norm)?;

    let mut t = g.embedding(params.token_embed, &batch.tokens)?;
    for (l, layer) in params.language.iter().enumerate() {
        let h = norm(g, t, &layer.norm1)?;
        let a = attention_block(
            g,
            &shape,
            h,
            h,
            &layer.self_attn,
            mask_for(Modality::Language, Structure::Attention, l),
        )?;
        t = g.add(t, a)?;
        let h = norm(g, t, &layer.norm2)?;
        let c = attention_block(
            g,
            &shape,
            h,
            vis,
            &layer.cross_attn,
            mask_for(Modality::Cross, Structure::Attention, l),
        )?;
        t = g.add(t, c)?;
        let h = norm(g, t, &layer.norm3)?;
        let m = mlp_block(g, h, &layer.mlp, mask_for(Modality::Language, Structure::Mlp, l))?;
        t = g.add(t, m)?;
    }
    let t = norm(g, t, &params.language_norm)?;
    let first: Vec<usize> = (0..n).map(|b| b * config.text_len).collect();
    let pooled = g.gather_rows(t, &first)?;
    linear(g, pooled, &params.head)
}

/// Cross-entropy plus `w_a·Σ‖ζ_a‖₁ + w_m·Σ‖ζ_m‖₁`.
pub fn loss(
    g: &mut Graph,
    logits: Var,
    labels: &[usize],
    masks: Option<&[Var]>,
    registry: &SiteRegistry,
    w_a: f64,
    w_m: f64,
) -> Result<Var> {
    let coefficients: Vec<f64> = registry
        .sites()
        .iter()
        .map(|s| match s.structure {
            Structure::Attention => w_a,
            Structure::Mlp => w_m,
        })
        .collect();
    loss_with_coefficients(g, logits, labels, masks, &coefficients)
}

/// Cross-entropy plus `Σ_site coefficient·‖ζ_site‖₁`.
pub fn loss_with_coefficients(
    g: &mut Graph,
    logits: Var,
    labels: &[usize],
    masks: Option<&[Var]>,
    coefficients: &[f64],
) -> Result<Var> {
    if coefficients.iter().any(|&w| w < 0.0 || !w.is_finite()) {
        return Err(Error::InvalidConfig("l1 coefficients must be >= 0".into()));
    }
    let mut total = g.cross_entropy(logits, labels)?;
    if let Some(masks) = masks {
        for (&m, &w) in masks.iter().zip(coefficients) {
            if w == 0.0 {
                continue;
            }
            let l1 = g.l1_norm(m)?;
            let term = g.scale(l1, w)?;
            total = g.add(total, term)?;
        }
    }
    Ok(total)
}

/// Logits without gradient tracking.
pub fn predict(model: &Model, masks: Option<&MaskSet>, batch: &Batch) -> Result<Tensor> {
    let mut g = Graph::new();
    let params = model.params.bind_constant(&mut g);
    let mask_vars: Option<Vec<Var>> =
        masks.map(|m| m.values().iter().map(|t| g.constant(t.clone())).collect());
    let logits = forward(&mut g, &model.config, &params, mask_vars.as_deref(), batch)?;
    Ok(g.value(logits).clone())
}

/// Multiplies mask values into the weights so that an unmasked forward pass
/// of the result equals the masked forward pass of `params`.
///
/// Attention masks scale the q/k/v rows (and biases) of every head; MLP masks
/// scale the columns of the second matrix.
pub fn fold_masks(config: &ModelConfig, params: &ModelParams, masks: &MaskSet) -> Result<ModelParams> {
    let mut out = params.clone();
    for (site, mask) in masks.sites().iter().zip(masks.values()) {
        let z = mask.data();
        match site.structure {
            Structure::Attention => {
                let attn = out.attention_mut(site.modality, site.layer);
                let width = attn.q.weight.shape()[0] / config.heads;
                if width != z.len() {
                    return Err(Error::MaskMisaligned {
                        site: site.name(),
                        expected: width,
                        got: z.len(),
                    });
                }
                for lin in [&mut attn.q, &mut attn.k, &mut attn.v] {
                    let cols = lin.weight.cols();
                    for (r, row) in lin.weight.data_mut().chunks_mut(cols).enumerate() {
                        row.iter_mut().for_each(|w| *w *= z[r % width]);
                    }
                    for (r, b) in lin.bias.data_mut().iter_mut().enumerate() {
                        *b *= z[r % width];
                    }
                }
            }
            Structure::Mlp => {
                let mlp = out.mlp_mut(site.modality, site.layer);
                let cols = mlp.fc2.weight.cols();
                if cols != z.len() {
                    return Err(Error::MaskMisaligned {
                        site: site.name(),
                        expected: cols,
                        got: z.len(),
                    });
                }
                for row in mlp.fc2.weight.data_mut().chunks_mut(cols) {
                    row.iter_mut().zip(z).for_each(|(w, s)| *w *= s);
                }
            }
        }
    }
    Ok(out)
}
