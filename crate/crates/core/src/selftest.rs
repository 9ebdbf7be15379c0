//! Built-in invariant checks, runnable without any training.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::gradcheck::run_suite;
use crate::checkpoint;
use crate::dataset::{SyntheticTask, TaskConfig};
use crate::error::Result;
use crate::extraction::{extract, pruned_param_tally};
use crate::masking::{
    per_site_select, standardize_group, top_k_select, Direction, MaskSet, SiteRegistry,
};
use crate::model::{fold_masks, predict, Model, ModelConfig};
use crate::schedule::{verify_requirements, ScheduleKind};
use crate::tensor::Tensor;

pub const GRADIENT_TOL: f64 = 1e-4;
pub const EQUIVALENCE_TOL: f64 = 1e-10;

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct SelftestReport {
    pub checks: Vec<Check>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> usize {
        self.checks.iter().filter(|c| !c.passed).count()
    }
}

impl fmt::Display for SelftestReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let tag = if c.passed { "ok  " } else { "FAIL" };
            writeln!(f, "{tag} {:<32} {}", c.name, c.detail)?;
        }
        write!(
            f,
            "{} checks, {} failed",
            self.checks.len(),
            self.failures()
        )
    }
}

fn tiny() -> ModelConfig {
    ModelConfig {
        layers: 2,
        heads: 2,
        embed_dim: 8,
        head_dim: 4,
        ffn_dim: 6,
        image_patches: 4,
        text_len: 5,
        patch_dim: 3,
        vocab: 16,
        classes: 2,
    }
}

fn random_masks(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<MaskSet> {
    let values = SiteRegistry::new(cfg)
        .sites()
        .iter()
        .map(|s| (0..s.width).map(|_| rng.gen_range(0.05..1.0)).collect())
        .collect();
    MaskSet::from_values(cfg, values)
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check {
        name: name.into(),
        passed,
        detail,
    }
}

/// Runs every check; `instances` sets the gradient-check sample count per op.
pub fn run(instances: usize, seed: u64) -> Result<SelftestReport> {
    let mut checks = Vec::new();

    for r in run_suite(instances, seed)? {
        checks.push(check(
            &format!("gradient.{}", r.op),
            r.max_rel_error < GRADIENT_TOL,
            format!("max rel err {:.2e} over {} instances", r.max_rel_error, r.instances),
        ));
    }

    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::init(&cfg, seed)?;
    let task = SyntheticTask::new(
        &TaskConfig {
            seed,
            samples: 8,
            ..TaskConfig::default()
        },
        &cfg,
    )?;
    let data = task.generate();
    let batch = data.batch(&(0..8).collect::<Vec<_>>());

    let mut worst_fold: f64 = 0.0;
    let mut worst_extract: f64 = 0.0;
    let mut tally_ok = true;
    for _ in 0..4 {
        let masks = random_masks(&cfg, &mut rng)?;
        let masked = predict(&model, Some(&masks), &batch)?;
        let folded = Model {
            config: cfg.clone(),
            params: fold_masks(&cfg, &model.params, &masks)?,
        };
        worst_fold = worst_fold.max(masked.max_rel_diff(&predict(&folded, None, &batch)?));

        let decision = per_site_select(&masks.per_site(), 0.5, Direction::SmallestFirst)?;
        let binary = masks.apply_decision(&decision);
        let sub = extract(&model, &binary, &decision)?;
        let reference = predict(&model, Some(&binary), &batch)?;
        worst_extract = worst_extract.max(reference.max_rel_diff(&predict(&sub.model, None, &batch)?));
        let tally = pruned_param_tally(&binary, &decision, cfg.embed_dim, cfg.heads);
        tally_ok &= sub.params + tally == model.params.param_count();
    }
    checks.push(check(
        "model.mask_folding",
        worst_fold < EQUIVALENCE_TOL,
        format!("max rel diff {worst_fold:.2e}"),
    ));
    checks.push(check(
        "extraction.equivalence",
        worst_extract < EQUIVALENCE_TOL,
        format!("max rel diff {worst_extract:.2e}"),
    ));
    checks.push(check(
        "extraction.param_tally",
        tally_ok,
        "removed parameters match per-entry tally".into(),
    ));

    for kind in [ScheduleKind::Cosine, ScheduleKind::Uniform, ScheduleKind::Quadratic] {
        let r = verify_requirements(kind, 50, 0.5)?;
        // only cosine is expected to satisfy all four
        let expected = kind == ScheduleKind::Cosine;
        checks.push(check(
            &format!("schedule.{kind}"),
            r.all_pass() == expected,
            format!(
                "start={} end={} monotone={} inflection={} final={:.6}",
                r.starts_at_zero, r.ends_at_target, r.nondecreasing, r.single_inflection, r.final_value
            ),
        ));
    }

    let values: Vec<f64> = (0..64).map(|_| rng.gen_range(-3.0..7.0)).collect();
    let z = standardize_group(&values)?;
    let mean = z.iter().sum::<f64>() / z.len() as f64;
    let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / z.len() as f64;
    checks.push(check(
        "masking.standardize",
        mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12,
        format!("mean {mean:.1e}, var {var:.12}"),
    ));

    let scores: Vec<Vec<f64>> = (0..3).map(|_| vec![1.0; 5]).collect();
    let d = top_k_select(&scores, 7, Direction::SmallestFirst)?;
    let tie_ok = d.selected() == 7
        && d.marks()[0].iter().all(|&m| m)
        && d.marks()[1][..2].iter().all(|&m| m)
        && !d.marks()[1][2];
    checks.push(check(
        "masking.top_k_ties",
        tie_ok,
        "equal scores resolve by site then index".into(),
    ));

    let t = Tensor::vector(vec![0.1, -0.0, 1e-300]);
    let bytes = checkpoint::encode(&serde_json::json!({"k": 1}), &[("t".into(), &t)])?;
    let (_, back) = checkpoint::decode(&bytes)?;
    let exact = back[0].1.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    checks.push(check("checkpoint.round_trip", exact, format!("{} bytes", bytes.len())));

    Ok(SelftestReport { checks })
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_checks_pass() {
        let r = super::run(3, 0).unwrap();
        assert!(r.passed(), "{r}");
        assert!(r.checks.len() > 10);
    }
}
