//! Run reports, retained-proportion heatmaps and cross-ratio trend tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::engine::{Driver, Metrics, PruneConfig, RunMetrics, RunResult, TraceRow};
use crate::error::{Error, Result};
use crate::extraction::{count_flops, count_params, pruned_param_tally, ExtractedModel};
use crate::masking::{MaskClass, MaskSet, Modality, PruneDecision, Structure};
use crate::model::{Model, ModelConfig};

pub const REPORT_SCHEMA: &str = "upop.report/1";
pub const HEATMAP_SCHEMA: &str = "upop.heatmap/1";
pub const TREND_SCHEMA: &str = "upop.trend/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteRecord {
    pub site: String,
    pub class: String,
    pub layer: usize,
    pub width: usize,
    pub kept: usize,
    pub retained: f64,
    pub kept_indices: Vec<usize>,
}

/// Entry-weighted retained fractions of mask groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupAggregates {
    pub attention: f64,
    pub mlp: f64,
    pub vision: f64,
    pub language: f64,
    pub cross: f64,
    pub overall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accounting {
    pub params_before: usize,
    pub params_after: usize,
    /// Parameters owned by pruned entries; `params_before − params_after`.
    pub params_pruned: usize,
    pub flops_before: usize,
    pub flops_after: usize,
    pub mask_entries: usize,
    pub pruned_entries: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub schema: String,
    pub driver: Driver,
    pub seed: u64,
    pub prune: PruneConfig,
    pub model: ModelConfig,
    /// Configuration text exactly as supplied, when run from a file.
    pub config_text: Option<String>,
    pub sites: Vec<SiteRecord>,
    /// Rows follow [`MaskClass::ALL`], columns are layers.
    pub heatmap: Vec<Vec<f64>>,
    pub groups: GroupAggregates,
    pub accounting: Accounting,
    pub metrics: RunMetrics,
    pub final_p_t: Option<f64>,
    pub search_steps_done: usize,
    pub retrain_steps_done: usize,
    pub wall_clock_secs: f64,
}

fn site_records(masks: &MaskSet, decision: &PruneDecision) -> Vec<SiteRecord> {
    masks
        .sites()
        .iter()
        .map(|s| {
            let kept = decision.kept_indices(s.id);
            SiteRecord {
                site: s.name(),
                class: s.class().label().into(),
                layer: s.layer,
                width: s.width,
                kept: kept.len(),
                retained: kept.len() as f64 / s.width as f64,
                kept_indices: kept,
            }
        })
        .collect()
}

fn aggregates(masks: &MaskSet, sites: &[SiteRecord]) -> GroupAggregates {
    let frac = |pred: &dyn Fn(Modality, Structure) -> bool| {
        let (mut kept, mut total) = (0usize, 0usize);
        for (s, r) in masks.sites().iter().zip(sites) {
            if pred(s.modality, s.structure) {
                kept += r.kept;
                total += r.width;
            }
        }
        if total == 0 {
            1.0
        } else {
            kept as f64 / total as f64
        }
    };
    GroupAggregates {
        attention: frac(&|_, s| s == Structure::Attention),
        mlp: frac(&|_, s| s == Structure::Mlp),
        vision: frac(&|m, _| m == Modality::Vision),
        language: frac(&|m, _| m == Modality::Language),
        cross: frac(&|m, _| m == Modality::Cross),
        overall: frac(&|_, _| true),
    }
}

/// Everything a report is built from.
pub struct ReportInputs<'a> {
    pub driver: Driver,
    pub prune: &'a PruneConfig,
    pub original: &'a Model,
    pub masks: &'a MaskSet,
    pub decision: &'a PruneDecision,
    pub extracted: &'a ExtractedModel,
    pub metrics: RunMetrics,
    pub trace: &'a [TraceRow],
    pub config_text: Option<String>,
    pub wall_clock_secs: f64,
}

impl CompressionReport {
    pub fn build(inputs: ReportInputs<'_>) -> Result<Self> {
        let config = &inputs.original.config;
        let sites = site_records(inputs.masks, inputs.decision);
        let mut heatmap = vec![vec![0.0; config.layers]; MaskClass::ALL.len()];
        for (s, r) in inputs.masks.sites().iter().zip(&sites) {
            let row = MaskClass::ALL
                .iter()
                .position(|&c| c == s.class())
                .expect("site class is listed");
            heatmap[row][s.layer] = r.retained;
        }
        let params_before = count_params(inputs.original);
        let params_after = inputs.extracted.params;
        let tally = pruned_param_tally(inputs.masks, inputs.decision, config.embed_dim, config.heads);
        if params_after + tally != params_before {
            return Err(Error::IncompleteRun(format!(
                "parameter accounting does not reconcile: {params_after} + {tally} != {params_before}"
            )));
        }
        let phase_count = |p| inputs.trace.iter().filter(|r| r.phase == p).count();
        Ok(Self {
            schema: REPORT_SCHEMA.into(),
            driver: inputs.driver,
            seed: inputs.prune.seed,
            prune: inputs.prune.clone(),
            model: config.clone(),
            config_text: inputs.config_text,
            groups: aggregates(inputs.masks, &sites),
            sites,
            heatmap,
            accounting: Accounting {
                params_before,
                params_after,
                params_pruned: tally,
                flops_before: count_flops(inputs.original),
                flops_after: inputs.extracted.flops,
                mask_entries: inputs.decision.total(),
                pruned_entries: inputs.decision.pruned_count(),
            },
            metrics: inputs.metrics,
            final_p_t: inputs
                .trace
                .iter()
                .rev()
                .find_map(|r| r.p_t.filter(|_| r.phase == crate::engine::Phase::Search)),
            search_steps_done: phase_count(crate::engine::Phase::Search),
            retrain_steps_done: phase_count(crate::engine::Phase::Retrain),
            wall_clock_secs: inputs.wall_clock_secs,
        })
    }

    pub fn from_run(result: &RunResult, original: &Model, config_text: Option<String>) -> Result<Self> {
        Self::build(ReportInputs {
            driver: result.driver,
            prune: &result.config,
            original,
            masks: &result.search.masks,
            decision: &result.search.decision,
            extracted: &result.extracted,
            metrics: result.metrics.clone(),
            trace: &result.trace,
            config_text,
            wall_clock_secs: result.wall_clock_secs,
        })
    }

    pub fn is_complete(&self) -> bool {
        self.search_steps_done == self.prune.search_steps
            && self.sites.len() == MaskClass::ALL.len() * self.model.layers
    }

    /// Record a retrain that happened after the report was written.
    pub fn set_retrained(&mut self, metrics: Metrics, steps: usize) {
        self.metrics.retrained = Some(metrics);
        self.retrain_steps_done = steps;
    }

    /// Standard deviation of per-site retained fractions.
    pub fn retained_spread(&self) -> f64 {
        let n = self.sites.len() as f64;
        let mean = self.sites.iter().map(|s| s.retained).sum::<f64>() / n;
        (self.sites.iter().map(|s| (s.retained - mean).powi(2)).sum::<f64>() / n).sqrt()
    }

    /// Mean retained fraction of every heatmap row.
    pub fn row_means(&self) -> Vec<(String, f64)> {
        MaskClass::ALL
            .iter()
            .zip(&self.heatmap)
            .map(|(c, row)| (c.label().to_string(), row.iter().sum::<f64>() / row.len() as f64))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text)?;
        if r.schema != REPORT_SCHEMA {
            return Err(Error::Checkpoint(format!("unknown report schema '{}'", r.schema)));
        }
        Ok(r)
    }
}

/// Retained fraction per mask class and layer, four decimals.
pub fn heatmap_csv(report: &CompressionReport) -> Result<String> {
    if !report.is_complete() {
        return Err(Error::IncompleteRun(format!(
            "search ran {} of {} steps",
            report.search_steps_done, report.prune.search_steps
        )));
    }
    let mut out = format!("# schema={HEATMAP_SCHEMA}\nclass");
    for l in 0..report.model.layers {
        write!(out, ",{l}").expect("write to string");
    }
    out.push('\n');
    for (class, row) in MaskClass::ALL.iter().zip(&report.heatmap) {
        out.push_str(class.label());
        for v in row {
            write!(out, ",{v:.4}").expect("write to string");
        }
        out.push('\n');
    }
    Ok(out)
}

/// Per-step loss and schedule values.
pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from("step,phase,loss,p_t,a_t\n");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in trace {
        writeln!(out, "{},{},{:.8},{},{}", r.step, r.phase, r.loss, opt(r.p_t), opt(r.a_t))
            .expect("write to string");
    }
    out
}

/// Share of the surviving mask budget per component and per layer, one
/// column per compression ratio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendTable {
    pub ratios: Vec<f64>,
    /// `(label, share at each ratio)`; component rows first, then layer rows.
    pub components: Vec<(String, Vec<f64>)>,
    pub layers: Vec<(String, Vec<f64>)>,
}

impl TrendTable {
    pub fn to_csv(&self) -> String {
        let mut out = format!("# schema={TREND_SCHEMA}\ngroup");
        for p in &self.ratios {
            write!(out, ",p={p}").expect("write to string");
        }
        out.push('\n');
        for (label, shares) in self.components.iter().chain(&self.layers) {
            out.push_str(label);
            for s in shares {
                write!(out, ",{s:.4}").expect("write to string");
            }
            out.push('\n');
        }
        out
    }
}

pub fn trend_summary(reports: &[CompressionReport]) -> Result<TrendTable> {
    if reports.len() < 2 {
        return Err(Error::MismatchedReports(format!(
            "need at least 2 reports, got {}",
            reports.len()
        )));
    }
    let first = &reports[0];
    for r in &reports[1..] {
        if r.model != first.model {
            return Err(Error::MismatchedReports("model configs differ".into()));
        }
        if r.driver != first.driver {
            return Err(Error::MismatchedReports(format!(
                "drivers differ: {} vs {}",
                first.driver, r.driver
            )));
        }
    }
    let mut sorted: Vec<&CompressionReport> = reports.iter().collect();
    sorted.sort_by(|a, b| a.prune.p.total_cmp(&b.prune.p));
    if sorted.windows(2).any(|w| w[0].prune.p == w[1].prune.p) {
        return Err(Error::MismatchedReports("duplicate compression ratio".into()));
    }
    let layers = first.model.layers;
    let mut components: Vec<(String, Vec<f64>)> = MaskClass::ALL
        .iter()
        .map(|c| (c.label().to_string(), Vec::new()))
        .collect();
    let mut per_layer: Vec<(String, Vec<f64>)> =
        (0..layers).map(|l| (format!("layer.{l}"), Vec::new())).collect();
    for r in &sorted {
        let kept_total: usize = r.sites.iter().map(|s| s.kept).sum();
        let kept_total = kept_total as f64;
        for (c, row) in MaskClass::ALL.iter().zip(components.iter_mut()) {
            let k: usize = r.sites.iter().filter(|s| s.class == c.label()).map(|s| s.kept).sum();
            row.1.push(k as f64 / kept_total);
        }
        for (l, row) in per_layer.iter_mut().enumerate() {
            let k: usize = r.sites.iter().filter(|s| s.layer == l).map(|s| s.kept).sum();
            row.1.push(k as f64 / kept_total);
        }
    }
    Ok(TrendTable {
        ratios: sorted.iter().map(|r| r.prune.p).collect(),
        components,
        layers: per_layer,
    })
}
