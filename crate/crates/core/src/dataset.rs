//! Synthetic paired image/text classification with a planted cross-modal rule.
//!
//! Each image belongs to one of `clusters` latent classes: every patch is the
//! class prototype plus Gaussian noise. Each text carries a latent class as a
//! motif token (`1 + class`) repeated at random positions among filler tokens;
//! position 0 is always the pooling token `0`. The label is 1 exactly when the
//! two latent classes agree. Matches are drawn with probability ½ and a
//! mismatching text class is uniform over the rest, so the label is
//! independent of either modality alone.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::Tensor;

/// Token id at position 0 of every text.
pub const POOL_TOKEN: usize = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub seed: u64,
    pub samples: usize,
    pub clusters: usize,
    /// Patch noise standard deviation.
    pub noise: f64,
    /// Motif occurrences per text.
    pub motif_count: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            samples: 4000,
            clusters: 8,
            noise: 1.0,
            motif_count: 3,
        }
    }
}

/// One labelled pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[image_patches · patch_dim]`, row-major.
    pub image: Vec<f64>,
    pub tokens: Vec<usize>,
    pub label: usize,
    pub image_cluster: usize,
    pub text_cluster: usize,
}

/// A sample generator bound to a model geometry.
#[derive(Clone, Debug)]
pub struct SyntheticTask {
    config: TaskConfig,
    patches: usize,
    patch_dim: usize,
    text_len: usize,
    vocab: usize,
    prototypes: Vec<Vec<f64>>,
}

impl SyntheticTask {
    pub fn new(config: &TaskConfig, model: &ModelConfig) -> Result<Self> {
        if config.samples == 0 {
            return Err(Error::InvalidConfig("samples must be >= 1".into()));
        }
        if config.clusters < 2 {
            return Err(Error::InvalidConfig("need at least 2 clusters".into()));
        }
        if model.vocab <= config.clusters + 1 {
            return Err(Error::InvalidConfig(format!(
                "vocab {} leaves no filler tokens for {} clusters",
                model.vocab, config.clusters
            )));
        }
        if config.motif_count == 0 || model.text_len < config.motif_count + 1 {
            return Err(Error::InvalidConfig(format!(
                "text_len {} cannot hold {} motif tokens",
                model.text_len, config.motif_count
            )));
        }
        if !(config.noise >= 0.0) {
            return Err(Error::InvalidConfig("noise must be >= 0".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(u64::MAX);
        let len = model.image_patches * model.patch_dim;
        let prototypes = (0..config.clusters)
            .map(|_| (0..len).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        Ok(Self {
            config: config.clone(),
            patches: model.image_patches,
            patch_dim: model.patch_dim,
            text_len: model.text_len,
            vocab: model.vocab,
            prototypes,
        })
    }

    pub fn config(&self) -> &TaskConfig {
        &self.config
    }

    pub fn prototypes(&self) -> &[Vec<f64>] {
        &self.prototypes
    }

    /// The `index`-th sample; a pure function of `(seed, index)`.
    pub fn sample(&self, index: usize) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(index as u64);
        let k = self.config.clusters;
        let image_cluster = rng.gen_range(0..k);
        let matched = rng.gen_bool(0.5);
        let text_cluster = if matched {
            image_cluster
        } else {
            let c = rng.gen_range(0..k - 1);
            if c >= image_cluster {
                c + 1
            } else {
                c
            }
        };
        let image = self.prototypes[image_cluster]
            .iter()
            .map(|&m| {
                let e: f64 = StandardNormal.sample(&mut rng);
                m + self.config.noise * e
            })
            .collect();
        let mut tokens: Vec<usize> = (0..self.text_len)
            .map(|_| rng.gen_range(k + 1..self.vocab))
            .collect();
        tokens[0] = POOL_TOKEN;
        let mut positions: Vec<usize> = (1..self.text_len).collect();
        positions.shuffle(&mut rng);
        for &p in &positions[..self.config.motif_count] {
            tokens[p] = 1 + text_cluster;
        }
        Sample {
            image,
            tokens,
            label: usize::from(matched),
            image_cluster,
            text_cluster,
        }
    }

    pub fn generate(&self) -> Dataset {
        let samples = (0..self.config.samples).map(|i| self.sample(i)).collect();
        Dataset {
            samples,
            patches: self.patches,
            patch_dim: self.patch_dim,
            text_len: self.text_len,
        }
    }

    /// Assigns by nearest prototype and text motif; uses both modalities.
    pub fn oracle_predict(&self, sample: &Sample) -> usize {
        let image_cluster = nearest(&self.prototypes, &sample.image);
        let text_cluster = sample
            .tokens
            .iter()
            .find(|&&t| (1..=self.config.clusters).contains(&t))
            .map(|t| t - 1);
        usize::from(text_cluster == Some(image_cluster))
    }
}

fn nearest(prototypes: &[Vec<f64>], x: &[f64]) -> usize {
    let dist = |p: &[f64]| p.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    (0..prototypes.len())
        .min_by(|&a, &b| dist(&prototypes[a]).total_cmp(&dist(&prototypes[b])))
        .expect("at least one prototype")
}

/// A materialised sample list.
#[derive(Clone, Debug)]
pub struct Dataset {
    samples: Vec<Sample>,
    patches: usize,
    patch_dim: usize,
    text_len: usize,
}

/// Index lists of the 80/10/10 split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    /// Contiguous 80/10/10 split; generation order is already random.
    pub fn splits(&self) -> Splits {
        let n = self.samples.len();
        let train_end = n * 8 / 10;
        let val_end = n * 9 / 10;
        Splits {
            train: (0..train_end).collect(),
            val: (train_end..val_end).collect(),
            test: (val_end..n).collect(),
        }
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let mut images = Vec::with_capacity(indices.len() * self.patches * self.patch_dim);
        let mut tokens = Vec::with_capacity(indices.len() * self.text_len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = &self.samples[i];
            images.extend_from_slice(&s.image);
            tokens.extend_from_slice(&s.tokens);
            labels.push(s.label);
        }
        Batch {
            images: Tensor::new(vec![indices.len() * self.patches, self.patch_dim], images)
                .expect("batch extents match sample sizes"),
            tokens,
            labels,
            size: indices.len(),
        }
    }

    /// Consecutive batches of at most `size` over `indices`, in order.
    pub fn chunks(&self, indices: &[usize], size: usize) -> Vec<Batch> {
        indices.chunks(size.max(1)).map(|c| self.batch(c)).collect()
    }

    pub fn label_balance(&self) -> f64 {
        let ones = self.samples.iter().filter(|s| s.label == 1).count();
        ones as f64 / self.samples.len() as f64
    }
}

/// Shuffled-epoch sampler over a fixed index list.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    indices: Vec<usize>,
    cursor: usize,
    size: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(indices: Vec<usize>, size: usize, seed: u64) -> Result<Self> {
        if size == 0 || indices.is_empty() {
            return Err(Error::InvalidConfig("batch size and split must be non-empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut indices = indices;
        indices.shuffle(&mut rng);
        Ok(Self {
            indices,
            cursor: 0,
            size,
            rng,
        })
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.size);
        while out.len() < self.size {
            if self.cursor == self.indices.len() {
                self.indices.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.indices[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Model inputs for a batch of `size` samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[size · image_patches, patch_dim]`.
    pub images: Tensor,
    /// `size · text_len` ids.
    pub tokens: Vec<usize>,
    pub labels: Vec<usize>,
    pub size: usize,
}

impl Batch {
    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        let expected = [self.size * config.image_patches, config.patch_dim];
        if self.size == 0 || self.images.shape() != expected {
            return Err(Error::ShapeMismatch {
                op: "batch images",
                lhs: self.images.shape().to_vec(),
                rhs: expected.to_vec(),
            });
        }
        if self.tokens.len() != self.size * config.text_len {
            return Err(Error::ShapeMismatch {
                op: "batch tokens",
                lhs: vec![self.tokens.len()],
                rhs: vec![self.size * config.text_len],
            });
        }
        if let Some(&id) = self.tokens.iter().find(|&&t| t >= config.vocab) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: config.vocab,
            });
        }
        if let Some(&label) = self.labels.iter().find(|&&l| l >= config.classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: config.classes,
            });
        }
        Ok(())
    }
}

/// Features a single-modality probe sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeInput {
    /// Mean patch vector.
    Image,
    /// Bag of tokens.
    Text,
    /// One-hot (image cluster, text cluster) pair, which a linear model can
    /// separate; the reference for probe capacity.
    BothLatent,
}

fn probe_features(task: &SyntheticTask, s: &Sample, input: ProbeInput) -> Vec<f64> {
    match input {
        ProbeInput::Image => {
            let mut f = vec![0.0; task.patch_dim];
            for patch in s.image.chunks(task.patch_dim) {
                f.iter_mut().zip(patch).for_each(|(a, b)| *a += b);
            }
            let n = task.patches as f64;
            f.iter_mut().for_each(|a| *a /= n);
            f.extend_from_slice(&s.image);
            f
        }
        ProbeInput::Text => {
            let mut f = vec![0.0; task.vocab];
            for &t in &s.tokens {
                f[t] += 1.0;
            }
            f
        }
        ProbeInput::BothLatent => {
            let k = task.config.clusters;
            let mut f = vec![0.0; k * k];
            f[s.image_cluster * k + s.text_cluster] = 1.0;
            f
        }
    }
}

/// Trains a logistic-regression probe on `train` and returns test accuracy.
pub fn linear_probe(
    task: &SyntheticTask,
    data: &Dataset,
    splits: &Splits,
    input: ProbeInput,
    epochs: usize,
    rate: f64,
) -> f64 {
    let feats = |idx: &[usize]| -> Vec<(Vec<f64>, f64)> {
        idx.iter()
            .map(|&i| {
                let s = &data.samples[i];
                (probe_features(task, s, input), s.label as f64)
            })
            .collect()
    };
    let train = feats(&splits.train);
    let test = feats(&splits.test);
    let dim = train[0].0.len();
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let n = train.len() as f64;
    for _ in 0..epochs {
        let mut gw = vec![0.0; dim];
        let mut gb = 0.0;
        for (x, y) in &train {
            let z = b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let err = 1.0 / (1.0 + (-z).exp()) - y;
            gw.iter_mut().zip(x).for_each(|(g, xi)| *g += err * xi);
            gb += err;
        }
        w.iter_mut().zip(&gw).for_each(|(wi, g)| *wi -= rate * g / n);
        b -= rate * gb / n;
    }
    let correct = test
        .iter()
        .filter(|(x, y)| {
            let z = b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            (z > 0.0) == (*y > 0.5)
        })
        .count();
    correct as f64 / test.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(samples: usize) -> SyntheticTask {
        let cfg = TaskConfig {
            seed: 3,
            samples,
            ..TaskConfig::default()
        };
        SyntheticTask::new(&cfg, &ModelConfig::default()).unwrap()
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let (a, b) = (task(50).generate(), task(50).generate());
        for (x, y) in a.samples().iter().zip(b.samples()) {
            assert_eq!(x.tokens, y.tokens);
            assert_eq!(x.label, y.label);
            let bits = |v: &[f64]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&x.image), bits(&y.image));
        }
    }

    #[test]
    fn samples_are_pure_in_index() {
        let t = task(100);
        let all = t.generate();
        assert_eq!(t.sample(57), all.samples()[57]);
    }

    #[test]
    fn label_histogram_is_balanced() {
        let d = task(10_000).generate();
        let bal = d.label_balance();
        assert!((0.45..=0.55).contains(&bal), "{bal}");
    }

    #[test]
    fn text_layout() {
        let t = task(20);
        for s in t.generate().samples() {
            assert_eq!(s.tokens[0], POOL_TOKEN);
            let motif = s.tokens.iter().filter(|&&x| x == 1 + s.text_cluster).count();
            assert_eq!(motif, 3);
            assert!(s.tokens.iter().all(|&x| x == 0 || x == 1 + s.text_cluster || x > 8));
            assert_eq!(s.label == 1, s.image_cluster == s.text_cluster);
        }
    }

    #[test]
    fn splits_are_80_10_10() {
        let s = task(1000).generate().splits();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (800, 100, 100));
        assert_eq!(s.test.last(), Some(&999));
    }

    #[test]
    fn batch_layout_and_check() {
        let d = task(10).generate();
        let b = d.batch(&[2, 5]);
        let cfg = ModelConfig::default();
        b.check(&cfg).unwrap();
        assert_eq!(b.images.shape(), &[32, 16]);
        assert_eq!(&b.tokens[12..24], d.samples()[5].tokens.as_slice());
        let small = ModelConfig {
            vocab: 9,
            ..cfg
        };
        assert!(matches!(b.check(&small), Err(Error::TokenOutOfRange { .. })));
    }

    #[test]
    fn sampler_cycles_every_index_per_epoch() {
        let mut s = BatchSampler::new((0..10).collect(), 5, 1).unwrap();
        let mut seen: Vec<usize> = s.next_indices();
        seen.extend(s.next_indices());
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn planted_rule_needs_both_modalities() {
        let t = task(4000);
        let d = t.generate();
        let splits = d.splits();
        let oracle = d.samples().iter().filter(|s| t.oracle_predict(s) == s.label).count();
        assert_eq!(oracle, d.len());

        let text = linear_probe(&t, &d, &splits, ProbeInput::Text, 200, 0.5);
        let image = linear_probe(&t, &d, &splits, ProbeInput::Image, 200, 0.5);
        let both = linear_probe(&t, &d, &splits, ProbeInput::BothLatent, 200, 5.0);
        assert!(text <= 0.60, "text probe {text}");
        assert!(image <= 0.60, "image probe {image}");
        assert!(both > 0.9, "latent probe {both}");
    }
}
