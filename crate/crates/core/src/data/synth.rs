//! Synthetic paired corpus with a learnable cross-modal alignment.
//!
//! Each latent class owns a disjoint set of template tokens and an ROI
//! cluster centre. Each attribute owns a few marker tokens and an ROI offset.
//! A sample of class `c` and attribute `a` writes two text halves, each with
//! class template tokens plus one attribute marker, and `K` ROIs at
//! `centre_c + offset_a + noise`. Class and attribute are recoverable from
//! either modality, so matched text/image pairs are alignable at both
//! class and instance granularity.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::vocab::FIRST_REGULAR_ID;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::rng::{domain, stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub n_classes: usize,
    pub n_attributes: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Tokens per text half; the last one is the attribute marker.
    pub half_len: usize,
    pub class_vocab: usize,
    pub attribute_vocab: usize,
    pub rois_per_image: usize,
    /// Standard deviation of per-ROI gaussian noise.
    pub roi_noise: f64,
    /// Standard deviation of attribute offsets relative to unit-scale class centres.
    pub attribute_scale: f64,
    /// Probability that a text token is replaced by a random regular token.
    pub token_noise: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            n_classes: 4,
            n_attributes: 8,
            n_train: 512,
            n_test: 64,
            half_len: 4,
            class_vocab: 8,
            attribute_vocab: 2,
            rois_per_image: 8,
            roi_noise: 0.1,
            attribute_scale: 0.5,
            token_noise: 0.1,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config("generator needs n_classes >= 2".into()));
        }
        if self.n_attributes < 1 || self.half_len < 2 || self.class_vocab < 1 {
            return Err(Error::Config(
                "generator needs n_attributes >= 1, half_len >= 2, class_vocab >= 1".into(),
            ));
        }
        let needed = self.n_classes * self.class_vocab + self.n_attributes * self.attribute_vocab;
        if FIRST_REGULAR_ID + needed > model.vocab_size {
            return Err(Error::Config(format!(
                "templates need {needed} regular tokens but vocab_size is {}",
                model.vocab_size
            )));
        }
        if self.attribute_vocab < 1 {
            return Err(Error::Config("attribute_vocab must be >= 1".into()));
        }
        // [CLS] half [SEP] half [SEP]
        if 2 * self.half_len + 3 > model.max_text_len {
            return Err(Error::Config(format!(
                "two halves of {} tokens do not fit max_text_len {}",
                self.half_len, model.max_text_len
            )));
        }
        if self.rois_per_image == 0 || self.rois_per_image > model.max_rois {
            return Err(Error::Config(format!(
                "rois_per_image must be in 1..={}",
                model.max_rois
            )));
        }
        if !(0.0..=1.0).contains(&self.token_noise) || self.roi_noise < 0.0 {
            return Err(Error::Config("noise levels out of range".into()));
        }
        Ok(())
    }
}

/// One text/visual pair.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalSample {
    pub id: u64,
    /// Both text halves concatenated; each half has `tokens.len() / 2` ids.
    pub tokens: Vec<usize>,
    /// `[K x d_v]` ROI features.
    pub rois: Tensor,
    pub caption_is_match: bool,
    pub nsp_is_consecutive: bool,
    pub latent_class: usize,
    pub attribute: usize,
}

impl MultimodalSample {
    pub fn first_half(&self) -> &[usize] {
        &self.tokens[..self.tokens.len() / 2]
    }

    pub fn second_half(&self) -> &[usize] {
        &self.tokens[self.tokens.len() / 2..]
    }

    pub fn roi_count(&self) -> usize {
        self.rois.shape()[0]
    }
}

/// Hidden generative structure shared by every split of one seed.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub class_tokens: Vec<Vec<usize>>,
    pub attribute_tokens: Vec<Vec<usize>>,
    pub centres: Vec<Vec<f64>>,
    pub attribute_offsets: Vec<Vec<f64>>,
    pub vocab_size: usize,
    pub roi_dim: usize,
}

impl SyntheticWorld {
    pub fn new(seed: u64, spec: &GeneratorSpec, model: &ModelConfig) -> Result<Self> {
        spec.validate(model)?;
        let mut rng = stream(seed, domain::WORLD, 0);
        let mut ids: Vec<usize> = (FIRST_REGULAR_ID..model.vocab_size).collect();
        ids.shuffle(&mut rng);
        let mut it = ids.into_iter();
        let class_tokens = (0..spec.n_classes)
            .map(|_| it.by_ref().take(spec.class_vocab).collect())
            .collect();
        let attribute_tokens = (0..spec.n_attributes)
            .map(|_| it.by_ref().take(spec.attribute_vocab).collect())
            .collect();
        let d = model.roi_feature_dim;
        let unit = Normal::new(0.0, 1.0).unwrap();
        let centres = (0..spec.n_classes)
            .map(|_| (0..d).map(|_| unit.sample(&mut rng)).collect())
            .collect();
        let attribute_offsets = (0..spec.n_attributes)
            .map(|_| {
                (0..d)
                    .map(|_| spec.attribute_scale * unit.sample(&mut rng))
                    .collect()
            })
            .collect();
        Ok(SyntheticWorld {
            class_tokens,
            attribute_tokens,
            centres,
            attribute_offsets,
            vocab_size: model.vocab_size,
            roi_dim: d,
        })
    }

    fn half<R: Rng + ?Sized>(
        &self,
        spec: &GeneratorSpec,
        class: usize,
        attribute: usize,
        rng: &mut R,
    ) -> Vec<usize> {
        let mut half: Vec<usize> = (0..spec.half_len - 1)
            .map(|_| *self.class_tokens[class].choose(rng).unwrap())
            .collect();
        half.push(*self.attribute_tokens[attribute].choose(rng).unwrap());
        half.shuffle(rng);
        for t in half.iter_mut() {
            if rng.random_bool(spec.token_noise) {
                *t = rng.random_range(FIRST_REGULAR_ID..self.vocab_size);
            }
        }
        half
    }

    pub fn sample(
        &self,
        spec: &GeneratorSpec,
        id: u64,
        rng: &mut ChaCha8Rng,
    ) -> MultimodalSample {
        let class = rng.random_range(0..self.class_tokens.len());
        let attribute = rng.random_range(0..self.attribute_tokens.len());
        let mut tokens = self.half(spec, class, attribute, rng);
        tokens.extend(self.half(spec, class, attribute, rng));

        let noise = Normal::new(0.0, spec.roi_noise.max(0.0)).unwrap();
        let k = spec.rois_per_image;
        let mut data = Vec::with_capacity(k * self.roi_dim);
        for _ in 0..k {
            for j in 0..self.roi_dim {
                let base = self.centres[class][j] + self.attribute_offsets[attribute][j];
                data.push(base + noise.sample(rng));
            }
        }
        MultimodalSample {
            id,
            tokens,
            rois: Tensor::new(vec![k, self.roi_dim], data).expect("ROI shape"),
            caption_is_match: true,
            nsp_is_consecutive: true,
            latent_class: class,
            attribute,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn domain(self) -> u64 {
        match self {
            Split::Train => domain::TRAIN_SPLIT,
            Split::Test => domain::TEST_SPLIT,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub train: Vec<MultimodalSample>,
    pub test: Vec<MultimodalSample>,
}

/// Generates `n` samples of one split; sample `i` depends only on `(seed, split, i)`.
pub fn generate_split(
    world: &SyntheticWorld,
    spec: &GeneratorSpec,
    seed: u64,
    split: Split,
    n: usize,
) -> Vec<MultimodalSample> {
    (0..n)
        .map(|i| {
            let mut rng = stream(seed, split.domain(), i as u64);
            world.sample(spec, i as u64, &mut rng)
        })
        .collect()
}

pub fn generate_synthetic_corpus(
    seed: u64,
    spec: &GeneratorSpec,
    model: &ModelConfig,
) -> Result<SyntheticCorpus> {
    let world = SyntheticWorld::new(seed, spec, model)?;
    Ok(SyntheticCorpus {
        train: generate_split(&world, spec, seed, Split::Train, spec.n_train),
        test: generate_split(&world, spec, seed, Split::Test, spec.n_test),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn small() -> (GeneratorSpec, ModelConfig) {
        let spec = GeneratorSpec {
            n_train: 200,
            n_test: 20,
            ..GeneratorSpec::default()
        };
        (spec, ModelConfig::default())
    }

    #[test]
    fn same_seed_same_corpus() {
        let (spec, cfg) = small();
        let a = generate_synthetic_corpus(3, &spec, &cfg).unwrap();
        let b = generate_synthetic_corpus(3, &spec, &cfg).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        let c = generate_synthetic_corpus(4, &spec, &cfg).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn class_templates_are_distinct_multisets() {
        let (spec, cfg) = small();
        let w = SyntheticWorld::new(1, &spec, &cfg).unwrap();
        for i in 0..w.class_tokens.len() {
            for j in i + 1..w.class_tokens.len() {
                let mut a = w.class_tokens[i].clone();
                let mut b = w.class_tokens[j].clone();
                a.sort();
                b.sort();
                assert_ne!(a, b);
                assert!(a.iter().all(|t| !b.contains(t)));
            }
        }
    }

    #[test]
    fn sample_shapes_and_balance() {
        let (spec, cfg) = small();
        let c = generate_synthetic_corpus(5, &spec, &cfg).unwrap();
        let mut counts = BTreeMap::new();
        for s in &c.train {
            assert_eq!(s.tokens.len(), 2 * spec.half_len);
            assert_eq!(s.rois.shape(), &[spec.rois_per_image, cfg.roi_feature_dim]);
            assert!(s.tokens.iter().all(|&t| t >= FIRST_REGULAR_ID && t < cfg.vocab_size));
            *counts.entry(s.latent_class).or_insert(0) += 1;
        }
        assert_eq!(counts.len(), spec.n_classes);
        assert!(counts.values().all(|&n| n > 25));
    }

    #[test]
    fn rejects_single_class() {
        let (mut spec, cfg) = small();
        spec.n_classes = 1;
        assert!(generate_synthetic_corpus(1, &spec, &cfg).is_err());
    }
}
