use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn argsort(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
    idx
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt())
}

#[test]
fn registry_layout() {
    let cfg = ModelConfig::default();
    let reg = SiteRegistry::new(&cfg);
    assert_eq!(reg.len(), 20);
    assert_eq!(reg.sites()[0].name(), "attn_v.0");
    assert_eq!(reg.sites()[9].name(), "attn_c.1");
    assert_eq!(reg.sites()[19].name(), "mlp_l.3");
    assert_eq!(reg.site_index(Modality::Cross, Structure::Attention, 2), 10);
    assert_eq!(reg.find("mlp_v.1").unwrap().width, 64);
    // 12 attention sites of width 8 plus 8 mlp sites of width 64
    assert_eq!(reg.total_entries(), 12 * 8 + 8 * 64);
    for (i, s) in reg.sites().iter().enumerate() {
        assert_eq!(s.id, i);
    }
}

#[test]
fn mask_set_starts_at_exactly_one() {
    let cfg = ModelConfig::default();
    let m = MaskSet::ones(&cfg);
    assert!(m.values().iter().flat_map(|t| t.data()).all(|&v| v == 1.0));
    assert_eq!(m.attention_group().len(), 12);
    assert_eq!(m.mlp_group(), (12..20).collect::<Vec<_>>());
    assert_eq!(m.size(), 608);
}

#[test]
fn standardize_closed_form() {
    let z = standardize_group(&[1.0, 2.0, 3.0]).unwrap();
    // (x − 2) / √(2/3)
    let e = 1.224_744_871_391_589;
    assert!((z[0] + e).abs() < 1e-15 && z[1].abs() < 1e-15 && (z[2] - e).abs() < 1e-15);
}

#[test]
fn standardize_rejects_degenerate() {
    assert!(matches!(
        standardize_group(&[5.0, 5.0, 5.0]),
        Err(Error::DegenerateGroup(3))
    ));
    assert!(matches!(standardize_group(&[1.0]), Err(Error::GroupTooSmall(1))));
}

#[test]
fn standardize_is_affine_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x: Vec<f64> = (0..50).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let y: Vec<f64> = x.iter().map(|v| 4.5 * v - 17.0).collect();
    let (zx, zy) = (standardize_group(&x).unwrap(), standardize_group(&y).unwrap());
    for (a, b) in zx.iter().zip(&zy) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn top_k_definition_and_boundaries() {
    let s = vec![vec![0.9, 0.1, 0.5, 0.3]];
    let d = top_k_select(&s, 2, Direction::LargestFirst).unwrap();
    assert_eq!(d.marks()[0], vec![true, false, true, false]);
    assert_eq!(d.polarity(), Polarity::Prune);
    assert_eq!(d.selected(), 2);

    assert_eq!(top_k_select(&s, 0, Direction::LargestFirst).unwrap().selected(), 0);
    assert_eq!(top_k_select(&s, 4, Direction::SmallestFirst).unwrap().selected(), 4);
    assert!(matches!(
        top_k_select(&s, 5, Direction::LargestFirst),
        Err(Error::KOutOfRange { k: 5, .. })
    ));
}

#[test]
fn ties_break_by_site_then_index() {
    let s = vec![vec![1.0, 1.0], vec![1.0, 1.0]];
    let d = top_k_select(&s, 3, Direction::SmallestFirst).unwrap();
    assert_eq!(d.marks(), &[vec![true, true], vec![true, false]]);
}

#[test]
fn top_k_matches_full_sort_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let flat: Vec<f64> = (0..200).map(|_| rng.gen::<f64>()).collect();
    let scores = vec![flat[..80].to_vec(), flat[80..].to_vec()];
    let d = top_k_select(&scores, 37, Direction::LargestFirst).unwrap();
    let mut order: Vec<usize> = (0..200).collect();
    order.sort_by(|&a, &b| flat[b].partial_cmp(&flat[a]).unwrap());
    let mut expected: Vec<usize> = order[..37].to_vec();
    expected.sort_unstable();
    let got: Vec<usize> = d
        .marks()
        .iter()
        .flatten()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| i)
        .collect();
    assert_eq!(got, expected);
}

#[test]
fn min_keep_leaves_every_site_populated() {
    let s = vec![vec![0.0, 0.0, 0.0], vec![5.0, 6.0, 7.0]];
    let d = top_k_select_min_keep(&s, 3, Direction::SmallestFirst, 1).unwrap();
    assert_eq!(d.marks(), &[vec![true, true, false], vec![true, false, false]]);
    assert!(top_k_select_min_keep(&s, 5, Direction::SmallestFirst, 1).is_err());
}

#[test]
fn polarity_round_trip() {
    let d = PruneDecision::new(Polarity::Prune, vec![vec![true, false, false]]);
    let keep = d.with_polarity(Polarity::Keep);
    assert_eq!(keep.marks()[0], vec![false, true, true]);
    assert_eq!(keep.selected(), 2);
    assert_eq!(keep.pruned_count(), 1);
    assert_eq!(keep.prune_marks(), d.marks());
    assert_eq!(keep.kept_indices(0), vec![1, 2]);
    assert_eq!(d.pruned_indices(0), vec![0]);
    assert!((d.retained_fraction(0) - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn prune_count_floors_with_snap() {
    assert_eq!(prune_count(0.5, 608), 304);
    assert_eq!(prune_count(0.75, 8), 6);
    assert_eq!(prune_count(0.29, 100), 29);
    assert_eq!(prune_count(0.333, 10), 3);
    assert_eq!(prune_count(0.0, 10), 0);
}

#[test]
fn per_site_select_uses_each_width() {
    let cfg = ModelConfig::default();
    let m = MaskSet::ones(&cfg);
    let (scores, dir) = group_scores(&m, None, ScoreMode::Magnitude).unwrap();
    assert_eq!(dir, Direction::SmallestFirst);
    let d = per_site_select(&scores, 0.5, dir).unwrap();
    for s in m.sites() {
        assert_eq!(d.pruned_indices(s.id).len(), s.width / 2);
        // uniform scores fall back to index order
        assert_eq!(d.pruned_indices(s.id), (0..s.width / 2).collect::<Vec<_>>());
    }
}

#[test]
fn gradient_mode_needs_a_ledger() {
    let m = MaskSet::ones(&ModelConfig::default());
    assert!(matches!(
        group_scores(&m, None, ScoreMode::AccumulatedGradient),
        Err(Error::MissingLedger)
    ));
}

#[test]
fn single_positive_ledger_entry_is_pruned_first() {
    let cfg = ModelConfig::default();
    let m = MaskSet::ones(&cfg);
    let mut sums: Vec<Vec<f64>> = m.sites().iter().map(|s| vec![0.0; s.width]).collect();
    sums[13][5] = 2.5;
    let ledger = ImportanceLedger::from_sums(sums);
    let (scores, dir) = group_scores(&m, Some(&ledger), ScoreMode::AccumulatedGradient).unwrap();
    let d = top_k_select(&scores, 1, dir).unwrap();
    assert!(d.is_pruned(13, 5));
    assert_eq!(d.pruned_count(), 1);
}

#[test]
fn gradient_scores_copy_the_ledger() {
    let cfg = ModelConfig::default();
    let m = MaskSet::ones(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let sums: Vec<Vec<f64>> = m
        .sites()
        .iter()
        .map(|s| (0..s.width).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let ledger = ImportanceLedger::from_sums(sums.clone());
    let (scores, _) = group_scores(&m, Some(&ledger), ScoreMode::AccumulatedGradient).unwrap();
    assert_eq!(scores, sums);
    let (abs, dir) = group_scores(&m, Some(&ledger), ScoreMode::AccumulatedGradientAbs).unwrap();
    assert_eq!(dir, Direction::SmallestFirst);
    assert_eq!(abs[3][1], sums[3][1].abs());
}

#[test]
fn unified_allocation_differs_from_per_site() {
    // same budget, but one site has uniformly low magnitudes
    let cfg = ModelConfig::default();
    let m = MaskSet::ones(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let scores: Vec<Vec<f64>> = m
        .sites()
        .iter()
        .map(|s| {
            let shift = if s.id == 2 { -0.5 } else { 0.0 };
            (0..s.width).map(|_| 0.6 + shift + rng.gen_range(0.0..0.3)).collect()
        })
        .collect();
    let per_site = per_site_select(&scores, 0.5, Direction::SmallestFirst).unwrap();
    let unified = unified_select(
        m.sites(),
        &scores,
        per_site.pruned_count(),
        Direction::SmallestFirst,
        1,
    )
    .unwrap();
    assert_eq!(unified.pruned_count(), per_site.pruned_count());
    assert_ne!(unified.marks(), per_site.marks());
    assert_eq!(unified.pruned_indices(2).len(), cfg.head_dim - 1);
}

#[test]
fn standardize_groups_preserves_order_within_groups() {
    let cfg = ModelConfig::default();
    let m = MaskSet::ones(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let scores: Vec<Vec<f64>> = m
        .sites()
        .iter()
        .map(|s| (0..s.width).map(|_| rng.gen_range(-4.0..9.0)).collect())
        .collect();
    let z = standardize_groups(m.sites(), &scores).unwrap();
    for group in [m.attention_group(), m.mlp_group()] {
        let before: Vec<f64> = group.iter().flat_map(|&i| scores[i].clone()).collect();
        let after: Vec<f64> = group.iter().flat_map(|&i| z[i].clone()).collect();
        assert_eq!(argsort(&before), argsort(&after));
        let (mu, sd) = mean_std(&after);
        assert!(mu.abs() < 1e-9 && (sd - 1.0).abs() < 1e-6);
    }
}

#[test]
fn selected_count_is_floor_of_ratio_times_size() {
    let cfg = ModelConfig::default();
    let m = MaskSet::ones(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let scores: Vec<Vec<f64>> = m
        .sites()
        .iter()
        .map(|s| (0..s.width).map(|_| rng.gen::<f64>()).collect())
        .collect();
    for p in [0.0, 0.1, 0.25, 0.5, 0.75, 0.9] {
        let k = prune_count(p, m.size());
        let d = unified_select(m.sites(), &scores, k, Direction::SmallestFirst, 1).unwrap();
        assert_eq!(d.selected(), (p * 608.0).floor() as usize);
    }
}

#[test]
fn apply_decision_zeroes_only_pruned_entries() {
    let cfg = ModelConfig::default();
    let mut m = MaskSet::ones(&cfg);
    m.get_mut(0)[1] = 0.7;
    m.get_mut(0)[2] = 0.4;
    let mut marks: Vec<Vec<bool>> = m.sites().iter().map(|s| vec![false; s.width]).collect();
    marks[0][2] = true;
    let out = m.apply_decision(&PruneDecision::new(Polarity::Prune, marks));
    assert_eq!(&out.get(0)[..3], &[1.0, 0.7, 0.0]);
}

proptest! {
    #[test]
    fn z_scores_are_centered_and_scaled(v in prop::collection::vec(-1e3f64..1e3, 2..300)) {
        prop_assume!(v.iter().any(|&x| x != v[0]));
        let (_, sd) = mean_std(&v);
        prop_assume!(sd > 1e-6);
        let z = standardize_group(&v).unwrap();
        let (mu, s) = mean_std(&z);
        prop_assert!(mu.abs() < 1e-9);
        prop_assert!((s - 1.0).abs() < 1e-6);
    }
}
