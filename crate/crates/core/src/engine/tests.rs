use super::*;
use crate::dataset::{SyntheticTask, TaskConfig};
use crate::model::ModelConfig;

fn small() -> ModelConfig {
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

fn setup() -> (Model, Dataset) {
    let cfg = small();
    let data = SyntheticTask::new(
        &TaskConfig {
            seed: 2,
            samples: 200,
            ..TaskConfig::default()
        },
        &cfg,
    )
    .unwrap()
    .generate();
    (Model::init(&cfg, 1).unwrap(), data)
}

fn quick(p: f64) -> PruneConfig {
    PruneConfig {
        p,
        search_steps: 40,
        retrain_steps: 5,
        batch_size: 8,
        freq: Some(4),
        ..PruneConfig::default()
    }
}

#[test]
fn sgd_linear_update_and_fixpoint() {
    let mut opt = Sgd::new(0.1, 0.0).unwrap();
    let mut x = vec![1.0, -2.0, 0.5];
    opt.update(0, &mut x, &[1.0, 1.0, 1.0]);
    for (a, b) in x.iter().zip([0.9, -2.1, 0.4]) {
        assert!((a - b).abs() < 1e-15);
    }
    let before = x.clone();
    opt.update(0, &mut x, &[0.0; 3]);
    assert_eq!(x, before);
    assert!(Sgd::new(0.0, 0.0).is_err());
    assert!(Sgd::new(-1.0, 0.0).is_err());
}

#[test]
fn sgd_steps_do_not_commute_with_rate() {
    // f(x) = x², f'(x) = 2x
    let mut two = vec![1.0];
    let mut opt = Sgd::new(0.1, 0.0).unwrap();
    for _ in 0..2 {
        let g = [2.0 * two[0]];
        opt.update(0, &mut two, &g);
    }
    let mut one = vec![1.0];
    Sgd::new(0.2, 0.0).unwrap().update(0, &mut one, &[2.0]);
    assert!((two[0] - 0.64).abs() < 1e-15);
    assert!((one[0] - 0.6).abs() < 1e-15);
}

#[test]
fn momentum_accumulates_velocity() {
    let mut opt = Sgd::new(0.1, 0.5).unwrap();
    let mut x = vec![0.0];
    opt.update(0, &mut x, &[1.0]);
    opt.update(0, &mut x, &[1.0]);
    // v₁ = 1, v₂ = 1.5
    assert!((x[0] + 0.25).abs() < 1e-15);
}

#[test]
fn ledger_accumulates_and_checks_shape() {
    let mut l = ImportanceLedger::new(&[2, 1]);
    l.accumulate(&[vec![1.0, -1.0], vec![0.5]]).unwrap();
    l.accumulate(&[vec![1.0, 2.0], vec![0.5]]).unwrap();
    assert_eq!(l.sums(), &[vec![2.0, 1.0], vec![1.0]]);
    assert_eq!(l.updates(), 2);
    assert!(l.accumulate(&[vec![1.0], vec![0.5]]).is_err());
}

#[test]
fn frequency_heuristic() {
    assert_eq!(default_freq(1000, 0.5), 20);
    assert_eq!(default_freq(300, 0.5), 6);
    assert_eq!(default_freq(300, 0.75), 4);
    assert_eq!(default_freq(10, 0.9), 1);
    assert_eq!(event_count(300, 6), 50);
    assert_eq!(event_count(10, 4), 3);
}

#[test]
fn config_validation() {
    let reg = SiteRegistry::new(&small());
    assert!(PruneConfig::default().validate(&reg).is_ok());
    for bad in [
        PruneConfig { p: 1.0, ..PruneConfig::default() },
        PruneConfig { search_lr: 0.0, ..PruneConfig::default() },
        PruneConfig { freq: Some(0), ..PruneConfig::default() },
        PruneConfig { w_a: -1.0, ..PruneConfig::default() },
        PruneConfig { batch_size: 0, ..PruneConfig::default() },
        PruneConfig { site_l1: Some(vec![0.0; 2]), ..PruneConfig::default() },
    ] {
        assert!(matches!(bad.validate(&reg), Err(Error::InvalidConfig(_))), "{bad:?}");
    }
}

#[test]
fn progressive_rejects_magnitude_ranking() {
    let (model, data) = setup();
    let cfg = PruneConfig {
        score_mode: ScoreMode::Magnitude,
        ..quick(0.5)
    };
    assert!(search(Driver::Upop, &model, &data, &data.splits().train, &cfg).is_err());
}

#[test]
fn progressive_masks_follow_the_update_rule() {
    let (model, data) = setup();
    let cfg = quick(0.5);
    let out = search(Driver::Upop, &model, &data, &data.splits().train, &cfg).unwrap();
    assert_eq!(out.events.len(), 10);
    for ev in &out.events {
        let factor = 1.0 - ev.p_t / cfg.p;
        for (marks, values) in ev.marks.iter().zip(&ev.values) {
            for (&m, &z) in marks.iter().zip(values) {
                assert!((0.0..=1.0).contains(&z));
                if m {
                    assert!((z - factor).abs() < 1e-12, "{z} vs {factor}");
                } else {
                    assert_eq!(z, 1.0);
                }
            }
        }
    }
    let last = out.events.last().unwrap();
    assert_eq!(last.p_t, cfg.p);
    let size = out.masks.size();
    assert_eq!(out.decision.pruned_count(), prune_count(0.5, size));
    for s in out.masks.sites() {
        for (i, &z) in out.masks.get(s.id).iter().enumerate() {
            assert_eq!(z, if out.decision.is_pruned(s.id, i) { 0.0 } else { 1.0 });
        }
    }
}

#[test]
fn marked_values_never_increase_across_events() {
    let (model, data) = setup();
    let out = search(Driver::Upop, &model, &data, &data.splits().train, &quick(0.5)).unwrap();
    for pair in out.events.windows(2) {
        for (s, marks) in pair[1].marks.iter().enumerate() {
            for (i, &m) in marks.iter().enumerate() {
                if m && pair[0].marks[s][i] {
                    assert!(pair[1].values[s][i] <= pair[0].values[s][i]);
                }
            }
        }
    }
}

#[test]
fn both_frequencies_end_with_exact_zero_count() {
    let (model, data) = setup();
    for f in [1, 10] {
        let cfg = PruneConfig {
            freq: Some(f),
            ..quick(0.5)
        };
        let out = search(Driver::Upop, &model, &data, &data.splits().train, &cfg).unwrap();
        let zeros = out.masks.values().iter().flat_map(|t| t.data()).filter(|&&z| z == 0.0).count();
        assert_eq!(zeros, prune_count(0.5, out.masks.size()));
    }
}

#[test]
fn mask_based_prunes_half_of_every_site() {
    let (model, data) = setup();
    let out = search(Driver::MaskBased, &model, &data, &data.splits().train, &quick(0.5)).unwrap();
    for s in out.masks.sites() {
        assert_eq!(out.decision.pruned_indices(s.id).len(), s.width / 2);
    }
    // ζ trained jointly: pruned entries stay away from zero
    let min_pruned = out
        .masks
        .sites()
        .iter()
        .flat_map(|s| out.decision.pruned_indices(s.id).into_iter().map(move |i| (s.id, i)))
        .map(|(s, i)| out.masks.get(s)[i].abs())
        .fold(f64::INFINITY, f64::min);
    assert!(min_pruned > 1e-3);
}

#[test]
fn null_compression_is_plain_fine_tuning() {
    let (model, data) = setup();
    let cfg = quick(0.0);
    for driver in [Driver::MaskBased, Driver::Unified] {
        let r = run(driver, &model, &data, &cfg).unwrap();
        assert_eq!(r.decision().pruned_count(), 0);
        let mut reference = Model {
            config: model.config.clone(),
            params: crate::model::fold_masks(&model.config, &r.search.model.params, &r.search.masks)
                .unwrap(),
        };
        let tc = TrainConfig {
            steps: cfg.retrain_steps,
            lr: cfg.retrain_lr,
            momentum: cfg.momentum,
            batch_size: cfg.batch_size,
            seed: retrain_seed(cfg.seed),
        };
        train_dense(&mut reference, &data, &data.splits().train, &tc, Phase::Retrain).unwrap();
        assert_eq!(r.extracted.model.params, reference.params);
    }
    let r = run(Driver::Upop, &model, &data, &cfg).unwrap();
    assert!(r.search.masks.values().iter().flat_map(|t| t.data()).all(|&z| z == 1.0));
}

#[test]
fn unified_cardinality_is_global() {
    let (model, data) = setup();
    let out = search(Driver::Unified, &model, &data, &data.splits().train, &quick(0.5)).unwrap();
    assert_eq!(out.decision.pruned_count(), prune_count(0.5, out.masks.size()));
}

#[test]
fn heavier_l1_site_absorbs_more_pruning() {
    let (model, data) = setup();
    let reg = SiteRegistry::new(&model.config);
    let mut w = vec![1e-3; reg.len()];
    let target = reg.find("mlp_v.0").unwrap().id;
    w[target] = 2.0;
    let cfg = PruneConfig {
        site_l1: Some(w),
        search_steps: 60,
        ..quick(0.25)
    };
    let out = search(Driver::Unified, &model, &data, &data.splits().train, &cfg).unwrap();
    let pruned = out.decision.pruned_indices(target).len() as f64;
    assert!(pruned / reg.sites()[target].width as f64 > 0.25, "{pruned}");
}

#[test]
fn runs_are_deterministic() {
    let (model, data) = setup();
    let cfg = quick(0.5);
    for driver in Driver::ALL {
        let a = run(driver, &model, &data, &cfg).unwrap();
        let b = run(driver, &model, &data, &cfg).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.search.decision, b.search.decision);
        assert_eq!(a.search.masks, b.search.masks);
        assert_eq!(a.extracted.model.params, b.extracted.model.params);
        assert_eq!(a.metrics, b.metrics);
    }
}

#[test]
fn progressive_search_has_no_binarisation_gap() {
    let (model, data) = setup();
    let r = run(Driver::Upop, &model, &data, &quick(0.5)).unwrap();
    assert_eq!(r.metrics.masked, r.metrics.binarized);
    assert!(r.metrics.retrained.is_some());
    assert_eq!(r.trace.len(), 45);
}

#[test]
fn driver_names_round_trip() {
    for d in Driver::ALL {
        assert_eq!(d.to_string().parse::<Driver>().unwrap(), d);
    }
    assert!("slimming".parse::<Driver>().is_err());
}
