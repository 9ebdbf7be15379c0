//! Search and retrain drivers: mask-based, unified, and unified progressive.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::dataset::{Batch, BatchSampler, Dataset};
use crate::error::{Error, Result};
use crate::extraction::{extract, ExtractedModel};
use crate::masking::{
    group_scores, per_site_select, prune_count, standardize_groups, top_k_select_min_keep,
    unified_select, MaskSet, PruneDecision, ScoreMode, SiteRegistry, Structure,
};
use crate::model::{self, Model};
use crate::schedule::{actual_ratio, ratio_at, ScheduleKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Driver {
    MaskBased,
    Unified,
    Upop,
}

impl Driver {
    pub const ALL: [Driver; 3] = [Driver::MaskBased, Driver::Unified, Driver::Upop];
}

impl fmt::Display for Driver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Driver::MaskBased => "mask-based",
            Driver::Unified => "unified",
            Driver::Upop => "upop",
        })
    }
}

impl FromStr for Driver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mask-based" => Ok(Driver::MaskBased),
            "unified" => Ok(Driver::Unified),
            "upop" => Ok(Driver::Upop),
            other => Err(Error::InvalidConfig(format!("unknown driver '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneConfig {
    /// Fraction of mask entries removed.
    pub p: f64,
    pub search_steps: usize,
    pub retrain_steps: usize,
    /// Search rate α for θ and ζ.
    pub search_lr: f64,
    /// Retrain rate β.
    pub retrain_lr: f64,
    pub momentum: f64,
    pub w_a: f64,
    pub w_m: f64,
    /// Steps between mask updates; `None` picks the 1%-of-trajectory heuristic.
    pub freq: Option<usize>,
    pub schedule: ScheduleKind,
    pub batch_size: usize,
    pub seed: u64,
    /// Ranking metric of the progressive driver.
    pub score_mode: ScoreMode,
    /// Entries every site keeps under global ranking.
    pub min_keep: usize,
    /// Per-site ℓ1 coefficients overriding `w_a`/`w_m`, in registry order.
    pub site_l1: Option<Vec<f64>>,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            p: 0.5,
            search_steps: 300,
            retrain_steps: 300,
            search_lr: 0.01,
            retrain_lr: 0.01,
            momentum: 0.9,
            w_a: 1e-2,
            w_m: 1e-2,
            freq: None,
            schedule: ScheduleKind::Cosine,
            batch_size: 32,
            seed: 0,
            score_mode: ScoreMode::AccumulatedGradient,
            min_keep: 1,
            site_l1: None,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self, registry: &SiteRegistry) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(0.0..1.0).contains(&self.p) {
            return bad(format!("p = {} outside [0, 1)", self.p));
        }
        if !(self.search_lr > 0.0) || !(self.retrain_lr > 0.0) {
            return bad("learning rates must be > 0".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.w_a >= 0.0) || !(self.w_m >= 0.0) {
            return bad("l1 coefficients must be >= 0".into());
        }
        if self.freq == Some(0) {
            return bad("freq must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.search_steps < 2 {
            return bad("search_steps must be >= 2".into());
        }
        if let Some(w) = &self.site_l1 {
            if w.len() != registry.len() || w.iter().any(|v| !(*v >= 0.0)) {
                return bad(format!(
                    "site_l1 needs {} non-negative entries",
                    registry.len()
                ));
            }
        }
        Ok(())
    }

    /// ℓ1 coefficient of every site.
    pub fn l1_coefficients(&self, registry: &SiteRegistry) -> Vec<f64> {
        match &self.site_l1 {
            Some(w) => w.clone(),
            None => registry
                .sites()
                .iter()
                .map(|s| match s.structure {
                    Structure::Attention => self.w_a,
                    Structure::Mlp => self.w_m,
                })
                .collect(),
        }
    }

    /// Mask-update period in steps.
    pub fn effective_freq(&self) -> usize {
        self.freq.unwrap_or_else(|| default_freq(self.search_steps, self.p))
    }
}

/// Steps covering 1% of the compression trajectory: `round(T_s / (100·p))`.
pub fn default_freq(search_steps: usize, p: f64) -> usize {
    if p <= 0.0 {
        return 1;
    }
    ((search_steps as f64 / (100.0 * p)).round() as usize).max(1)
}

/// Number of mask-update events in a search of `steps` steps at period `freq`.
pub fn event_count(steps: usize, freq: usize) -> usize {
    steps.div_ceil(freq)
}

/// Plain training settings for dense pretraining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 800,
            lr: 0.03,
            momentum: 0.9,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Running sums of group-standardised mask gradients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceLedger {
    sums: Vec<Vec<f64>>,
    updates: usize,
}

impl ImportanceLedger {
    pub fn new(widths: &[usize]) -> Self {
        Self {
            sums: widths.iter().map(|&w| vec![0.0; w]).collect(),
            updates: 0,
        }
    }

    pub fn from_sums(sums: Vec<Vec<f64>>) -> Self {
        Self { sums, updates: 0 }
    }

    pub fn sums(&self) -> &[Vec<f64>] {
        &self.sums
    }

    pub fn updates(&self) -> usize {
        self.updates
    }

    pub fn size(&self) -> usize {
        self.sums.iter().map(Vec::len).sum()
    }

    pub fn accumulate(&mut self, standardized: &[Vec<f64>]) -> Result<()> {
        if standardized.len() != self.sums.len()
            || standardized.iter().zip(&self.sums).any(|(a, b)| a.len() != b.len())
        {
            return Err(Error::MaskMisaligned {
                site: "ledger".into(),
                expected: self.size(),
                got: standardized.iter().map(Vec::len).sum(),
            });
        }
        for (s, g) in self.sums.iter_mut().zip(standardized) {
            s.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        self.updates += 1;
        Ok(())
    }
}

/// SGD with optional heavy-ball momentum, one velocity buffer per slot.
#[derive(Clone, Debug)]
pub struct Sgd {
    rate: f64,
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(rate: f64, momentum: f64) -> Result<Self> {
        if !(rate > 0.0) || !rate.is_finite() {
            return Err(Error::InvalidConfig(format!("learning rate {rate} must be > 0")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidConfig(format!("momentum {momentum} outside [0, 1)")));
        }
        Ok(Self {
            rate,
            momentum,
            velocity: Vec::new(),
        })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// `v ← μ·v + g; x ← x − rate·v`.
    pub fn update(&mut self, slot: usize, value: &mut [f64], grad: &[f64]) {
        if self.momentum == 0.0 {
            value.iter_mut().zip(grad).for_each(|(x, g)| *x -= self.rate * g);
            return;
        }
        if self.velocity.len() <= slot {
            self.velocity.resize(slot + 1, Vec::new());
        }
        let v = &mut self.velocity[slot];
        if v.len() != value.len() {
            *v = vec![0.0; value.len()];
        }
        for ((x, g), vi) in value.iter_mut().zip(grad).zip(v.iter_mut()) {
            *vi = self.momentum * *vi + g;
            *x -= self.rate * *vi;
        }
    }
}

struct StepOutput {
    loss: f64,
    mask_grads: Option<Vec<Vec<f64>>>,
}

/// One forward/backward pass with a θ update; mask gradients are returned,
/// not applied.
fn theta_step(
    model: &mut Model,
    masks: Option<&MaskSet>,
    batch: &Batch,
    coefficients: &[f64],
    opt: &mut Sgd,
) -> Result<StepOutput> {
    let mut g = Graph::new();
    let params = model.params.bind(&mut g);
    let mask_vars: Option<Vec<Var>> =
        masks.map(|m| m.values().iter().map(|t| g.param(t.clone())).collect());
    let logits = model::forward(&mut g, &model.config, &params, mask_vars.as_deref(), batch)?;
    let loss = model::loss_with_coefficients(
        &mut g,
        logits,
        &batch.labels,
        mask_vars.as_deref(),
        coefficients,
    )?;
    let loss_value = g.value(loss).data()[0];
    if !loss_value.is_finite() {
        return Err(Error::NonFinite(format!("training loss {loss_value}")));
    }
    g.backward(loss)?;
    let vars: Vec<Var> = params.leaves().into_iter().copied().collect();
    let mut slot = 0;
    model.params.walk_mut(&mut |_, t| {
        if let Some(grad) = g.grad(vars[slot]) {
            opt.update(slot, t.data_mut(), grad);
        }
        slot += 1;
    });
    if !model.params.is_finite() {
        return Err(Error::NonFinite("parameters after update".into()));
    }
    let mask_grads = mask_vars.map(|vs| {
        vs.iter()
            .map(|&v| g.grad(v).expect("mask is a parameter").to_vec())
            .collect::<Vec<_>>()
    });
    if let Some(gs) = &mask_grads {
        if gs.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("mask gradient".into()));
        }
    }
    Ok(StepOutput {
        loss: loss_value,
        mask_grads,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Search,
    Retrain,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Pretrain => "pretrain",
            Phase::Search => "search",
            Phase::Retrain => "retrain",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub phase: Phase,
    pub loss: f64,
    /// Schedule values in effect during the step (progressive driver only).
    pub p_t: Option<f64>,
    pub a_t: Option<f64>,
}

/// State of ζ right after a progressive mask update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskEvent {
    pub step: usize,
    pub index: usize,
    pub p_t: f64,
    pub a_t: f64,
    pub marked: usize,
    pub marks: Vec<Vec<bool>>,
    pub values: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub loss: f64,
    pub accuracy: f64,
}

/// Mean cross-entropy (without ℓ1 terms) and accuracy over `indices`.
pub fn evaluate(
    model: &Model,
    masks: Option<&MaskSet>,
    data: &Dataset,
    indices: &[usize],
) -> Result<Metrics> {
    if indices.is_empty() {
        return Err(Error::InvalidConfig("evaluation split is empty".into()));
    }
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for batch in data.chunks(indices, 128) {
        let logits = model::predict(model, masks, &batch)?;
        let c = logits.cols();
        for (row, &label) in logits.data().chunks(c).zip(&batch.labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss_sum += lse - row[label];
            let pred = (0..c)
                .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                .expect("classes >= 1");
            correct += usize::from(pred == label);
        }
    }
    let n = indices.len() as f64;
    Ok(Metrics {
        loss: loss_sum / n,
        accuracy: correct as f64 / n,
    })
}

/// Trains every parameter of an unmasked model on plain cross-entropy.
pub fn train_dense(
    model: &mut Model,
    data: &Dataset,
    train: &[usize],
    cfg: &TrainConfig,
    phase: Phase,
) -> Result<Vec<TraceRow>> {
    let mut opt = Sgd::new(cfg.lr, cfg.momentum)?;
    let mut sampler = BatchSampler::new(train.to_vec(), cfg.batch_size, cfg.seed)?;
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = data.batch(&sampler.next_indices());
        let out = theta_step(model, None, &batch, &[], &mut opt)?;
        trace.push(TraceRow {
            step,
            phase,
            loss: out.loss,
            p_t: None,
            a_t: None,
        });
    }
    Ok(trace)
}

/// Initialises a model from `cfg.seed` and trains it densely.
pub fn pretrain(
    config: &crate::model::ModelConfig,
    data: &Dataset,
    train: &[usize],
    cfg: &TrainConfig,
) -> Result<(Model, Vec<TraceRow>)> {
    let mut model = Model::init(config, cfg.seed)?;
    let trace = train_dense(&mut model, data, train, cfg, Phase::Pretrain)?;
    Ok((model, trace))
}

/// End state of the search phase.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchOutcome {
    pub driver: Driver,
    pub model: Model,
    pub masks: MaskSet,
    pub decision: PruneDecision,
    pub ledger: Option<ImportanceLedger>,
    pub trace: Vec<TraceRow>,
    pub events: Vec<MaskEvent>,
}

impl SearchOutcome {
    /// ζ with pruned entries zeroed and kept entries unchanged.
    pub fn binarized_masks(&self) -> MaskSet {
        self.masks.apply_decision(&self.decision)
    }
}

/// Runs the search phase of `driver` starting from `model`.
pub fn search(
    driver: Driver,
    model: &Model,
    data: &Dataset,
    train: &[usize],
    cfg: &PruneConfig,
) -> Result<SearchOutcome> {
    let registry = SiteRegistry::new(&model.config);
    cfg.validate(&registry)?;
    match driver {
        Driver::MaskBased | Driver::Unified => search_mask_trained(driver, model, data, train, cfg),
        Driver::Upop => search_progressive(model, data, train, cfg),
    }
}

/// Joint gradient descent on θ and ζ, then magnitude selection.
fn search_mask_trained(
    driver: Driver,
    model: &Model,
    data: &Dataset,
    train: &[usize],
    cfg: &PruneConfig,
) -> Result<SearchOutcome> {
    let registry = SiteRegistry::new(&model.config);
    let coefficients = cfg.l1_coefficients(&registry);
    let mut model = model.clone();
    let mut masks = MaskSet::ones(&model.config);
    let mut theta_opt = Sgd::new(cfg.search_lr, cfg.momentum)?;
    let mut mask_opt = Sgd::new(cfg.search_lr, cfg.momentum)?;
    let mut sampler = BatchSampler::new(train.to_vec(), cfg.batch_size, cfg.seed)?;
    let mut trace = Vec::with_capacity(cfg.search_steps);
    for step in 0..cfg.search_steps {
        let batch = data.batch(&sampler.next_indices());
        let out = theta_step(&mut model, Some(&masks), &batch, &coefficients, &mut theta_opt)?;
        let grads = out.mask_grads.expect("masks bound");
        for (site, g) in grads.iter().enumerate() {
            mask_opt.update(site, masks.get_mut(site), g);
        }
        trace.push(TraceRow {
            step,
            phase: Phase::Search,
            loss: out.loss,
            p_t: None,
            a_t: None,
        });
    }
    let (scores, direction) = group_scores(&masks, None, ScoreMode::Magnitude)?;
    let decision = match driver {
        Driver::MaskBased => per_site_select(&scores, cfg.p, direction)?,
        _ => {
            let k = prune_count(cfg.p, masks.size());
            if k == 0 {
                PruneDecision::keep_all(&widths(&masks))
            } else {
                unified_select(masks.sites(), &scores, k, direction, cfg.min_keep)?
            }
        }
    };
    Ok(SearchOutcome {
        driver,
        model,
        masks,
        decision,
        ledger: None,
        trace,
        events: Vec::new(),
    })
}

fn widths(masks: &MaskSet) -> Vec<usize> {
    masks.sites().iter().map(|s| s.width).collect()
}

/// Ranks entries by standardised accumulated gradients and decays the
/// marked ones along the schedule; ζ is never gradient-stepped.
fn search_progressive(
    model: &Model,
    data: &Dataset,
    train: &[usize],
    cfg: &PruneConfig,
) -> Result<SearchOutcome> {
    if cfg.score_mode == ScoreMode::Magnitude {
        return Err(Error::InvalidConfig(
            "progressive search ranks by accumulated gradients; magnitude mode is not available"
                .into(),
        ));
    }
    let registry = SiteRegistry::new(&model.config);
    let coefficients = cfg.l1_coefficients(&registry);
    let freq = cfg.effective_freq();
    let events_total = event_count(cfg.search_steps, freq);
    if events_total < 2 {
        return Err(Error::InvalidConfig(format!(
            "freq {freq} leaves fewer than 2 mask updates in {} steps",
            cfg.search_steps
        )));
    }
    let mut model = model.clone();
    let mut masks = MaskSet::ones(&model.config);
    let size = masks.size();
    let mut ledger = ImportanceLedger::new(&widths(&masks));
    let mut opt = Sgd::new(cfg.search_lr, cfg.momentum)?;
    let mut sampler = BatchSampler::new(train.to_vec(), cfg.batch_size, cfg.seed)?;
    let mut trace = Vec::with_capacity(cfg.search_steps);
    let mut events = Vec::with_capacity(events_total);
    let mut decision = PruneDecision::keep_all(&widths(&masks));
    let (mut p_t, mut a_t) = (0.0, 0.0);
    for step in 0..cfg.search_steps {
        let batch = data.batch(&sampler.next_indices());
        let out = theta_step(&mut model, Some(&masks), &batch, &coefficients, &mut opt)?;
        let grads = out.mask_grads.expect("masks bound");
        ledger.accumulate(&standardize_groups(masks.sites(), &grads)?)?;
        trace.push(TraceRow {
            step,
            phase: Phase::Search,
            loss: out.loss,
            p_t: Some(p_t),
            a_t: Some(a_t),
        });

        if (step + 1) % freq != 0 && step + 1 != cfg.search_steps {
            continue;
        }
        let index = events.len();
        p_t = ratio_at(cfg.schedule, index, events_total, cfg.p)?;
        a_t = actual_ratio(p_t, cfg.p);
        let k = prune_count(p_t, size);
        let (scores, direction) = group_scores(&masks, Some(&ledger), cfg.score_mode)?;
        decision = top_k_select_min_keep(&scores, k, direction, cfg.min_keep)?;
        let factor = if cfg.p > 0.0 { 1.0 - p_t / cfg.p } else { 1.0 };
        // a final p_t that equals p must give exact zeros
        let factor = if factor.abs() < 1e-12 { 0.0 } else { factor };
        for (site, marks) in decision.marks().iter().enumerate() {
            for (z, &m) in masks.get_mut(site).iter_mut().zip(marks) {
                *z = if m { factor } else { 1.0 };
            }
        }
        events.push(MaskEvent {
            step,
            index,
            p_t,
            a_t,
            marked: decision.pruned_count(),
            marks: decision.marks().to_vec(),
            values: masks.per_site(),
        });
    }
    Ok(SearchOutcome {
        driver: Driver::Upop,
        model,
        masks,
        decision,
        ledger: Some(ledger),
        trace,
        events,
    })
}

/// Slices the searched model and fine-tunes the dense subnet on plain
/// cross-entropy for `retrain_steps` steps.
pub fn retrain(
    outcome: &SearchOutcome,
    data: &Dataset,
    train: &[usize],
    cfg: &PruneConfig,
) -> Result<(ExtractedModel, Vec<TraceRow>)> {
    let mut extracted = extract(&outcome.model, &outcome.masks, &outcome.decision)?;
    let train_cfg = TrainConfig {
        steps: cfg.retrain_steps,
        lr: cfg.retrain_lr,
        momentum: cfg.momentum,
        batch_size: cfg.batch_size,
        seed: retrain_seed(cfg.seed),
    };
    let trace = train_dense(&mut extracted.model, data, train, &train_cfg, Phase::Retrain)?;
    Ok((extracted, trace))
}

fn retrain_seed(seed: u64) -> u64 {
    seed ^ 0x5eed_0f2e_72a1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    /// Starting model, no masks.
    pub dense: Metrics,
    /// Search-end θ with search-end ζ.
    pub masked: Metrics,
    /// Search-end θ with pruned ζ entries zeroed.
    pub binarized: Metrics,
    /// Extracted subnet after retraining; absent when `retrain_steps = 0`.
    pub retrained: Option<Metrics>,
}

/// Everything a complete run produces.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub driver: Driver,
    pub config: PruneConfig,
    pub search: SearchOutcome,
    /// Sliced subnet, retrained when `retrain_steps > 0`.
    pub extracted: ExtractedModel,
    pub trace: Vec<TraceRow>,
    pub metrics: RunMetrics,
    pub params_before: usize,
    pub flops_before: usize,
    pub wall_clock_secs: f64,
}

impl RunResult {
    pub fn decision(&self) -> &PruneDecision {
        &self.search.decision
    }
}

/// Search, evaluate, extract and retrain; metrics are on the test split.
pub fn run(
    driver: Driver,
    model: &Model,
    data: &Dataset,
    cfg: &PruneConfig,
) -> Result<RunResult> {
    let start = Instant::now();
    let splits = data.splits();
    let dense = evaluate(model, None, data, &splits.test)?;
    let outcome = search(driver, model, data, &splits.train, cfg)?;
    let masked = evaluate(&outcome.model, Some(&outcome.masks), data, &splits.test)?;
    let binarized = evaluate(
        &outcome.model,
        Some(&outcome.binarized_masks()),
        data,
        &splits.test,
    )?;
    let (extracted, retrain_trace) = retrain(&outcome, data, &splits.train, cfg)?;
    let retrained = if cfg.retrain_steps > 0 {
        Some(evaluate(&extracted.model, None, data, &splits.test)?)
    } else {
        None
    };
    let mut trace = outcome.trace.clone();
    trace.extend(retrain_trace);
    Ok(RunResult {
        driver,
        config: cfg.clone(),
        params_before: crate::extraction::count_params(model),
        flops_before: crate::extraction::count_flops(model),
        search: outcome,
        extracted,
        trace,
        metrics: RunMetrics {
            dense,
            masked,
            binarized,
            retrained,
        },
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

pub fn run_mask_based(model: &Model, data: &Dataset, cfg: &PruneConfig) -> Result<RunResult> {
    run(Driver::MaskBased, model, data, cfg)
}

pub fn run_unified(model: &Model, data: &Dataset, cfg: &PruneConfig) -> Result<RunResult> {
    run(Driver::Unified, model, data, cfg)
}

pub fn run_upop(model: &Model, data: &Dataset, cfg: &PruneConfig) -> Result<RunResult> {
    run(Driver::Upop, model, data, cfg)
}

#[cfg(test)]
mod tests;
