use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dataset::{Dataset, SyntheticTask, TaskConfig};
use crate::masking::{Polarity, SiteRegistry};
use crate::model::{predict, ModelConfig};

fn task_data(cfg: &ModelConfig, n: usize) -> Dataset {
    SyntheticTask::new(
        &TaskConfig {
            seed: 9,
            samples: n,
            ..TaskConfig::default()
        },
        cfg,
    )
    .unwrap()
    .generate()
}

fn random_decision(cfg: &ModelConfig, p: f64, seed: u64) -> PruneDecision {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reg = SiteRegistry::new(cfg);
    let marks = reg
        .sites()
        .iter()
        .map(|s| {
            let k = crate::masking::prune_count(p, s.width);
            let mut idx: Vec<usize> = (0..s.width).collect();
            rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
            let mut m = vec![false; s.width];
            idx[..k].iter().for_each(|&i| m[i] = true);
            m
        })
        .collect();
    PruneDecision::new(Polarity::Prune, marks)
}

fn random_masks(cfg: &ModelConfig, seed: u64) -> MaskSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reg = SiteRegistry::new(cfg);
    let values = reg
        .sites()
        .iter()
        .map(|s| (0..s.width).map(|_| rng.gen_range(0.1..1.0)).collect())
        .collect();
    MaskSet::from_values(cfg, values).unwrap()
}

#[test]
fn keep_all_is_identity() {
    let cfg = ModelConfig::default();
    let model = Model::init(&cfg, 1).unwrap();
    let masks = MaskSet::ones(&cfg);
    let widths: Vec<usize> = masks.sites().iter().map(|s| s.width).collect();
    let ex = extract(&model, &masks, &PruneDecision::keep_all(&widths)).unwrap();
    assert_eq!(ex.model.params, model.params);
    assert_eq!(ex.params, count_params(&model));
    assert_eq!(ex.flops, count_flops(&model));
}

#[test]
fn halving_one_mlp_removes_closed_form_params() {
    let cfg = ModelConfig::default();
    let model = Model::init(&cfg, 2).unwrap();
    let masks = MaskSet::ones(&cfg);
    let reg = SiteRegistry::new(&cfg);
    let site = reg.find("mlp_l.2").unwrap().id;
    let mut marks: Vec<Vec<bool>> = reg.sites().iter().map(|s| vec![false; s.width]).collect();
    marks[site][cfg.ffn_dim / 2..].fill(true);
    let d = PruneDecision::new(Polarity::Prune, marks);
    let ex = extract(&model, &masks, &d).unwrap();
    let (dd, f) = (cfg.embed_dim, cfg.ffn_dim);
    let removed = dd * f / 2 + f / 2 * dd + f / 2;
    assert_eq!(count_params(&model) - ex.params, removed);
    assert_eq!(pruned_param_tally(&masks, &d, dd, cfg.heads), removed);
    assert_eq!(ex.kept[site], (0..f / 2).collect::<Vec<_>>());
}

#[test]
fn extracted_forward_matches_masked_forward() {
    let cfg = ModelConfig::default();
    let model = Model::init(&cfg, 3).unwrap();
    let data = task_data(&cfg, 64);
    let batch = data.batch(&(0..64).collect::<Vec<_>>());
    for seed in 0..3 {
        let masks = random_masks(&cfg, seed);
        let d = random_decision(&cfg, 0.5, seed + 10);
        let ex = extract(&model, &masks, &d).unwrap();
        let masked = predict(&model, Some(&masks.apply_decision(&d)), &batch).unwrap();
        let dense = predict(&ex.model, None, &batch).unwrap();
        assert!(dense.max_rel_diff(&masked) < 1e-10, "{}", dense.max_rel_diff(&masked));
    }
}

#[test]
fn head_widths_are_uniform_and_accounting_reconciles() {
    let cfg = ModelConfig::default();
    let model = Model::init(&cfg, 4).unwrap();
    let masks = MaskSet::ones(&cfg);
    let d = random_decision(&cfg, 0.5, 1);
    let ex = extract(&model, &masks, &d).unwrap();
    for s in masks.sites() {
        let width = ex.kept[s.id].len();
        match s.structure {
            Structure::Attention => {
                let a = ex.model.params.attention(s.modality, s.layer);
                for lin in [&a.q, &a.k, &a.v] {
                    assert_eq!(lin.weight.shape(), &[cfg.heads * width, cfg.embed_dim]);
                }
                assert_eq!(a.out.weight.shape(), &[cfg.embed_dim, cfg.heads * width]);
                assert_eq!(ex.model.head_width(s.modality, s.layer), width);
            }
            Structure::Mlp => assert_eq!(ex.model.hidden_width(s.modality, s.layer), width),
        }
    }
    let tally = pruned_param_tally(&masks, &d, cfg.embed_dim, cfg.heads);
    assert_eq!(ex.params + tally, count_params(&model));
    assert!(((count_params(&model) - ex.params) as f64) < 0.5 * count_params(&model) as f64);
}

#[test]
fn empty_site_is_an_error() {
    let cfg = ModelConfig::default();
    let model = Model::init(&cfg, 0).unwrap();
    let masks = MaskSet::ones(&cfg);
    let mut marks: Vec<Vec<bool>> = masks.sites().iter().map(|s| vec![false; s.width]).collect();
    marks[4] = vec![true; cfg.head_dim];
    let err = extract(&model, &masks, &PruneDecision::new(Polarity::Prune, marks)).unwrap_err();
    assert!(matches!(err, Error::EmptySite(ref s) if s == "attn_l.0"), "{err}");
}

#[test]
fn single_linear_flops() {
    let lin = Linear {
        weight: Tensor::zeros(&[5, 3]),
        bias: Tensor::zeros(&[5]),
    };
    assert_eq!(linear_flops(7, &lin), 2 * 7 * 3 * 5);
}

#[test]
fn default_flops_match_closed_form() {
    let c = ModelConfig::default();
    let (d, f, nv, nl) = (c.embed_dim, c.ffn_dim, c.image_patches, c.text_len);
    let attn = |nq: usize, nk: usize| 2 * nq * d * d * 2 + 2 * nk * d * d * 2 + 2 * 2 * nq * nk * d;
    let mlp = |n: usize| 2 * 2 * n * d * f;
    let expected = 2 * nv * c.patch_dim * d
        + c.layers * (attn(nv, nv) + mlp(nv))
        + c.layers * (attn(nl, nl) + attn(nl, nv) + mlp(nl))
        + 2 * d * c.classes;
    let model = Model::init(&c, 0).unwrap();
    assert_eq!(count_flops(&model), expected);
    assert_eq!(expected, 2_613_376);
}

#[test]
fn halving_attention_width_halves_projection_flops() {
    let cfg = ModelConfig::default();
    let model = Model::init(&cfg, 0).unwrap();
    let masks = MaskSet::ones(&cfg);
    let marks: Vec<Vec<bool>> = masks
        .sites()
        .iter()
        .map(|s| match s.structure {
            Structure::Attention => (0..s.width).map(|j| j >= s.width / 2).collect(),
            Structure::Mlp => vec![false; s.width],
        })
        .collect();
    let ex = extract(&model, &masks, &PruneDecision::new(Polarity::Prune, marks)).unwrap();
    let a0 = model.params.attention(crate::masking::Modality::Vision, 0);
    let a1 = ex.model.params.attention(crate::masking::Modality::Vision, 0);
    let proj = |a: &crate::model::Attention<Tensor>| {
        [&a.q, &a.k, &a.v, &a.out]
            .iter()
            .map(|l| linear_flops(cfg.image_patches, l))
            .sum::<usize>()
    };
    assert_eq!(proj(a0), 2 * proj(a1));
}
