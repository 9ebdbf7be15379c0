//! Mask sites, group standardisation and top-k selection.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::engine::ImportanceLedger;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Vision,
    Language,
    Cross,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Structure {
    Attention,
    Mlp,
}

/// The five mask classes, in registry (and heatmap row) order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MaskClass {
    AttnVision,
    AttnLanguage,
    AttnCross,
    MlpVision,
    MlpLanguage,
}

impl MaskClass {
    pub const ALL: [MaskClass; 5] = [
        MaskClass::AttnVision,
        MaskClass::AttnLanguage,
        MaskClass::AttnCross,
        MaskClass::MlpVision,
        MaskClass::MlpLanguage,
    ];

    pub fn label(self) -> &'static str {
        match self {
            MaskClass::AttnVision => "attn_v",
            MaskClass::AttnLanguage => "attn_l",
            MaskClass::AttnCross => "attn_c",
            MaskClass::MlpVision => "mlp_v",
            MaskClass::MlpLanguage => "mlp_l",
        }
    }

    pub fn parts(self) -> (Modality, Structure) {
        match self {
            MaskClass::AttnVision => (Modality::Vision, Structure::Attention),
            MaskClass::AttnLanguage => (Modality::Language, Structure::Attention),
            MaskClass::AttnCross => (Modality::Cross, Structure::Attention),
            MaskClass::MlpVision => (Modality::Vision, Structure::Mlp),
            MaskClass::MlpLanguage => (Modality::Language, Structure::Mlp),
        }
    }

    fn position(modality: Modality, structure: Structure) -> Option<usize> {
        Self::ALL.iter().position(|c| c.parts() == (modality, structure))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSite {
    pub id: usize,
    pub modality: Modality,
    pub structure: Structure,
    pub layer: usize,
    /// `head_dim` for attention sites, `ffn_dim` for MLP sites.
    pub width: usize,
}

impl MaskSite {
    pub fn class(&self) -> MaskClass {
        MaskClass::ALL[MaskClass::position(self.modality, self.structure).expect("valid class")]
    }

    pub fn name(&self) -> String {
        format!("{}.{}", self.class().label(), self.layer)
    }
}

impl fmt::Display for MaskSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// All mask sites of a model, ordered by class then layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SiteRegistry {
    sites: Vec<MaskSite>,
    layers: usize,
}

impl SiteRegistry {
    pub fn new(config: &ModelConfig) -> Self {
        let mut sites = Vec::new();
        for class in MaskClass::ALL {
            let (modality, structure) = class.parts();
            for layer in 0..config.layers {
                let width = match structure {
                    Structure::Attention => config.head_dim,
                    Structure::Mlp => config.ffn_dim,
                };
                sites.push(MaskSite {
                    id: sites.len(),
                    modality,
                    structure,
                    layer,
                    width,
                });
            }
        }
        Self {
            sites,
            layers: config.layers,
        }
    }

    pub fn sites(&self) -> &[MaskSite] {
        &self.sites
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn site_index(&self, modality: Modality, structure: Structure, layer: usize) -> usize {
        let class = MaskClass::position(modality, structure)
            .expect("mlp sites exist only for vision and language");
        class * self.layers + layer
    }

    pub fn find(&self, name: &str) -> Option<&MaskSite> {
        self.sites.iter().find(|s| s.name() == name)
    }

    /// `Size(ζ)`.
    pub fn total_entries(&self) -> usize {
        self.sites.iter().map(|s| s.width).sum()
    }
}

/// Trainable masks ζ, one vector per site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSet {
    sites: Vec<MaskSite>,
    values: Vec<Tensor>,
}

impl MaskSet {
    /// Every entry initialised to exactly 1.
    pub fn ones(config: &ModelConfig) -> Self {
        let registry = SiteRegistry::new(config);
        let values = registry
            .sites()
            .iter()
            .map(|s| Tensor::ones(&[s.width]))
            .collect();
        Self {
            sites: registry.sites,
            values,
        }
    }

    pub fn from_values(config: &ModelConfig, values: Vec<Vec<f64>>) -> Result<Self> {
        let mut set = Self::ones(config);
        if values.len() != set.sites.len() {
            return Err(Error::MaskMisaligned {
                site: "mask set".into(),
                expected: set.sites.len(),
                got: values.len(),
            });
        }
        for (i, v) in values.into_iter().enumerate() {
            set.set(i, v)?;
        }
        Ok(set)
    }

    pub fn sites(&self) -> &[MaskSite] {
        &self.sites
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn get(&self, site: usize) -> &[f64] {
        self.values[site].data()
    }

    pub fn set(&mut self, site: usize, values: Vec<f64>) -> Result<()> {
        let width = self.sites[site].width;
        if values.len() != width {
            return Err(Error::MaskMisaligned {
                site: self.sites[site].name(),
                expected: width,
                got: values.len(),
            });
        }
        self.values[site] = Tensor::vector(values);
        Ok(())
    }

    pub fn get_mut(&mut self, site: usize) -> &mut [f64] {
        self.values[site].data_mut()
    }

    pub fn size(&self) -> usize {
        self.sites.iter().map(|s| s.width).sum()
    }

    /// ζ_a: ids of every attention site.
    pub fn attention_group(&self) -> Vec<usize> {
        self.group(Structure::Attention)
    }

    /// ζ_m: ids of every MLP site.
    pub fn mlp_group(&self) -> Vec<usize> {
        self.group(Structure::Mlp)
    }

    pub fn group(&self, structure: Structure) -> Vec<usize> {
        self.sites
            .iter()
            .filter(|s| s.structure == structure)
            .map(|s| s.id)
            .collect()
    }

    pub fn per_site(&self) -> Vec<Vec<f64>> {
        self.values.iter().map(|t| t.data().to_vec()).collect()
    }

    /// Zeroes pruned entries and keeps the rest unchanged.
    pub fn apply_decision(&self, decision: &PruneDecision) -> MaskSet {
        let mut out = self.clone();
        for (site, marks) in decision.prune_marks().iter().enumerate() {
            for (v, &pruned) in out.values[site].data_mut().iter_mut().zip(marks) {
                if pruned {
                    *v = 0.0;
                }
            }
        }
        out
    }

    /// Hard 0/1 masks from a decision.
    pub fn binary(config: &ModelConfig, decision: &PruneDecision) -> MaskSet {
        MaskSet::ones(config).apply_decision(decision)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    /// `true` marks an entry to remove.
    Prune,
    /// `true` marks an entry to retain.
    Keep,
}

/// Binary per-site selection with an explicit polarity.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneDecision {
    polarity: Polarity,
    marks: Vec<Vec<bool>>,
    selected: usize,
}

impl PruneDecision {
    pub fn new(polarity: Polarity, marks: Vec<Vec<bool>>) -> Self {
        let selected = marks.iter().flatten().filter(|&&m| m).count();
        Self {
            polarity,
            marks,
            selected,
        }
    }

    /// Nothing removed.
    pub fn keep_all(widths: &[usize]) -> Self {
        Self::new(
            Polarity::Prune,
            widths.iter().map(|&w| vec![false; w]).collect(),
        )
    }

    pub fn polarity(&self) -> Polarity {
        self.polarity
    }

    pub fn marks(&self) -> &[Vec<bool>] {
        &self.marks
    }

    /// Number of entries carrying the recorded polarity.
    pub fn selected(&self) -> usize {
        self.selected
    }

    pub fn total(&self) -> usize {
        self.marks.iter().map(Vec::len).sum()
    }

    pub fn with_polarity(&self, polarity: Polarity) -> PruneDecision {
        if polarity == self.polarity {
            return self.clone();
        }
        let marks: Vec<Vec<bool>> = self
            .marks
            .iter()
            .map(|m| m.iter().map(|b| !b).collect())
            .collect();
        PruneDecision::new(polarity, marks)
    }

    pub fn prune_marks(&self) -> Vec<Vec<bool>> {
        self.with_polarity(Polarity::Prune).marks
    }

    pub fn pruned_count(&self) -> usize {
        match self.polarity {
            Polarity::Prune => self.selected,
            Polarity::Keep => self.total() - self.selected,
        }
    }

    pub fn is_pruned(&self, site: usize, index: usize) -> bool {
        match self.polarity {
            Polarity::Prune => self.marks[site][index],
            Polarity::Keep => !self.marks[site][index],
        }
    }

    pub fn kept_indices(&self, site: usize) -> Vec<usize> {
        (0..self.marks[site].len())
            .filter(|&i| !self.is_pruned(site, i))
            .collect()
    }

    pub fn pruned_indices(&self, site: usize) -> Vec<usize> {
        (0..self.marks[site].len())
            .filter(|&i| self.is_pruned(site, i))
            .collect()
    }

    pub fn retained_fraction(&self, site: usize) -> f64 {
        self.kept_indices(site).len() as f64 / self.marks[site].len() as f64
    }
}

/// Which entries are most prunable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    LargestFirst,
    SmallestFirst,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMode {
    /// `|ζ|`, smallest pruned first.
    Magnitude,
    /// Signed `Σ G`, largest pruned first.
    AccumulatedGradient,
    /// `|Σ G|`, smallest pruned first.
    AccumulatedGradientAbs,
}

/// Z-scores with the population standard deviation.
pub fn standardize_group(values: &[f64]) -> Result<Vec<f64>> {
    if values.len() < 2 {
        return Err(Error::GroupTooSmall(values.len()));
    }
    if values.iter().all(|&v| v == values[0]) {
        return Err(Error::DegenerateGroup(values.len()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    if !(std > 0.0) || !std.is_finite() {
        return Err(Error::DegenerateGroup(values.len()));
    }
    Ok(values.iter().map(|v| (v - mean) / std).collect())
}

/// Standardises ζ_a and ζ_m separately; `scores` is indexed by site id.
pub fn standardize_groups(sites: &[MaskSite], scores: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let mut out = scores.to_vec();
    for structure in [Structure::Attention, Structure::Mlp] {
        let ids: Vec<usize> = sites
            .iter()
            .filter(|s| s.structure == structure)
            .map(|s| s.id)
            .collect();
        if ids.is_empty() {
            continue;
        }
        let flat: Vec<f64> = ids.iter().flat_map(|&i| scores[i].iter().copied()).collect();
        let z = standardize_group(&flat)?;
        let mut off = 0;
        for &i in &ids {
            let w = scores[i].len();
            out[i] = z[off..off + w].to_vec();
            off += w;
        }
    }
    Ok(out)
}

fn ranked(scores: &[Vec<f64>], direction: Direction) -> Vec<(usize, usize)> {
    let mut entries: Vec<(usize, usize)> = scores
        .iter()
        .enumerate()
        .flat_map(|(s, v)| (0..v.len()).map(move |i| (s, i)))
        .collect();
    entries.sort_by(|&(sa, ia), &(sb, ib)| {
        let (a, b) = (scores[sa][ia], scores[sb][ib]);
        let primary = match direction {
            Direction::LargestFirst => b.total_cmp(&a),
            Direction::SmallestFirst => a.total_cmp(&b),
        };
        primary.then((sa, ia).cmp(&(sb, ib)))
    });
    entries
}

/// Prune-marks the `k` most prunable entries over all listed sites.
///
/// Ties resolve by ascending site, then ascending index.
pub fn top_k_select(scores: &[Vec<f64>], k: usize, direction: Direction) -> Result<PruneDecision> {
    top_k_select_min_keep(scores, k, direction, 0)
}

/// As [`top_k_select`], but never leaves a site with fewer than `min_keep`
/// unmarked entries; skipped entries pass the budget to the next in rank.
pub fn top_k_select_min_keep(
    scores: &[Vec<f64>],
    k: usize,
    direction: Direction,
    min_keep: usize,
) -> Result<PruneDecision> {
    let total: usize = scores.iter().map(Vec::len).sum();
    let capacity: usize = scores.iter().map(|v| v.len().saturating_sub(min_keep)).sum();
    if k > total || k > capacity {
        return Err(Error::KOutOfRange { k, total: capacity });
    }
    let mut marks: Vec<Vec<bool>> = scores.iter().map(|v| vec![false; v.len()]).collect();
    let mut remaining: Vec<usize> = scores.iter().map(Vec::len).collect();
    let mut chosen = 0;
    for (s, i) in ranked(scores, direction) {
        if chosen == k {
            break;
        }
        if remaining[s] <= min_keep {
            continue;
        }
        marks[s][i] = true;
        remaining[s] -= 1;
        chosen += 1;
    }
    Ok(PruneDecision::new(Polarity::Prune, marks))
}

/// Per-site selection with `⌊ratio·width⌋` prune-marks in every site.
pub fn per_site_select(scores: &[Vec<f64>], ratio: f64, direction: Direction) -> Result<PruneDecision> {
    let mut marks = Vec::with_capacity(scores.len());
    for site in scores {
        let k = prune_count(ratio, site.len());
        let d = top_k_select(std::slice::from_ref(site), k, direction)?;
        marks.push(d.marks()[0].clone());
    }
    Ok(PruneDecision::new(Polarity::Prune, marks))
}

/// `⌊ratio·size⌋`.
pub fn prune_count(ratio: f64, size: usize) -> usize {
    // 0.29 * 100 evaluates to 28.999…; snap values within 1e-9 of an integer
    let raw = ratio * size as f64;
    let rounded = raw.round();
    if (raw - rounded).abs() < 1e-9 {
        rounded as usize
    } else {
        raw.floor() as usize
    }
}

/// Ranking scores per site and the pruning direction they imply.
pub fn group_scores(
    masks: &MaskSet,
    ledger: Option<&ImportanceLedger>,
    mode: ScoreMode,
) -> Result<(Vec<Vec<f64>>, Direction)> {
    match mode {
        ScoreMode::Magnitude => Ok((
            masks
                .values()
                .iter()
                .map(|t| t.data().iter().map(|v| v.abs()).collect())
                .collect(),
            Direction::SmallestFirst,
        )),
        ScoreMode::AccumulatedGradient => {
            let ledger = ledger.ok_or(Error::MissingLedger)?;
            Ok((ledger.sums().to_vec(), Direction::LargestFirst))
        }
        ScoreMode::AccumulatedGradientAbs => {
            let ledger = ledger.ok_or(Error::MissingLedger)?;
            Ok((
                ledger
                    .sums()
                    .iter()
                    .map(|v| v.iter().map(|x| x.abs()).collect())
                    .collect(),
                Direction::SmallestFirst,
            ))
        }
    }
}

/// Standardise each group, then rank globally.
pub fn unified_select(
    sites: &[MaskSite],
    scores: &[Vec<f64>],
    k: usize,
    direction: Direction,
    min_keep: usize,
) -> Result<PruneDecision> {
    let z = standardize_groups(sites, scores)?;
    top_k_select_min_keep(&z, k, direction, min_keep)
}

#[cfg(test)]
mod tests;
