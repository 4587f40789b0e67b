//! Batch assembly: caption-match and NSP pairing, masking, padding.
//!
//! The text span of a slot is `first_half [SEP] second_half`; the encoder
//! adds `[CLS]` and the closing `[SEP]`. Slot `i` pairs its text with the
//! image of anchor sample `i`, so the PwCL diagonal is the slot index.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::masking::{apply_masking, MaskingConfig, MaskingPlan};
use crate::data::synth::MultimodalSample;
use crate::data::vocab::{PAD_ID, SEP_ID};
use crate::error::{Error, Result};
use crate::model::SampleView;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchConfig {
    pub masking: MaskingConfig,
    /// Probability that a slot keeps its ground-truth caption.
    pub caption_match_prob: f64,
    /// Probability that the two text halves are consecutive.
    pub nsp_consecutive_prob: f64,
}

impl Default for BatchConfig {
    fn default() -> Self {
        BatchConfig {
            masking: MaskingConfig::default(),
            caption_match_prob: 0.5,
            nsp_consecutive_prob: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Slot {
    /// Index of the anchor sample that supplies the image.
    pub anchor: usize,
    /// Index of the sample that supplied the first text half.
    pub text_source: usize,
    /// Masked text span, padded to the batch text length.
    pub tokens: Vec<usize>,
    /// Masking plan with positions relative to `tokens`.
    pub masking: MaskingPlan,
    /// `[rois_len x d_v]` row-major, padded rows zero.
    pub rois: Vec<f64>,
    pub roi_keep: Vec<bool>,
    pub caption_is_match: bool,
    pub nsp_is_consecutive: bool,
}

impl Slot {
    pub fn view(&self) -> SampleView<'_> {
        SampleView {
            tokens: &self.tokens,
            rois: &self.rois,
            roi_keep: &self.roi_keep,
        }
    }

    pub fn text_keep(&self) -> Vec<bool> {
        self.tokens.iter().map(|&t| t != PAD_ID).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub slots: Vec<Slot>,
    pub text_len: usize,
    pub rois_len: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Slots whose caption is the ground truth; PwCL and APS use these.
    pub fn matched(&self) -> Vec<usize> {
        (0..self.slots.len())
            .filter(|&i| self.slots[i].caption_is_match)
            .collect()
    }
}

pub fn text_span(first: &[usize], second: &[usize]) -> Vec<usize> {
    let mut t = Vec::with_capacity(first.len() + second.len() + 1);
    t.extend_from_slice(first);
    t.push(SEP_ID);
    t.extend_from_slice(second);
    t
}

/// Unmasked, unpadded encoder input pairing the text of `text` with the image of `image`.
#[derive(Debug, Clone)]
pub struct PairInput {
    pub tokens: Vec<usize>,
    pub rois: Vec<f64>,
    pub roi_keep: Vec<bool>,
}

impl PairInput {
    pub fn new(text: &MultimodalSample, image: &MultimodalSample) -> Self {
        PairInput {
            tokens: text_span(text.first_half(), text.second_half()),
            rois: image.rois.data().to_vec(),
            roi_keep: vec![true; image.roi_count()],
        }
    }

    pub fn view(&self) -> SampleView<'_> {
        SampleView {
            tokens: &self.tokens,
            rois: &self.rois,
            roi_keep: &self.roi_keep,
        }
    }
}

fn pick_where<R: Rng + ?Sized>(
    pool: &[MultimodalSample],
    rng: &mut R,
    pred: impl Fn(&MultimodalSample) -> bool,
) -> Option<usize> {
    let candidates: Vec<usize> = (0..pool.len()).filter(|&i| pred(&pool[i])).collect();
    if candidates.is_empty() {
        None
    } else {
        Some(candidates[rng.random_range(0..candidates.len())])
    }
}

/// Builds one batch from `anchors` (indices into `pool`).
///
/// A mismatched caption comes from a sample of a different latent class. A
/// non-consecutive second half comes from another sample of the same class
/// with a different attribute when one exists, otherwise from any other
/// sample.
pub fn make_batch<R: Rng + ?Sized>(
    pool: &[MultimodalSample],
    anchors: &[usize],
    vocab_size: usize,
    rng: &mut R,
    config: &BatchConfig,
) -> Result<Batch> {
    if anchors.len() < 2 {
        return Err(Error::BatchTooSmall(anchors.len()));
    }
    if let Some(&bad) = anchors.iter().find(|&&a| a >= pool.len()) {
        return Err(Error::IndexOutOfRange {
            index: bad,
            extent: pool.len(),
        });
    }

    let mut raw = Vec::with_capacity(anchors.len());
    for &a in anchors {
        let anchor = &pool[a];
        let caption_is_match = rng.random_bool(config.caption_match_prob);
        let text_source = if caption_is_match {
            a
        } else {
            pick_where(pool, rng, |s| s.latent_class != anchor.latent_class).ok_or_else(|| {
                Error::Config("caption mismatch needs at least two latent classes in the pool".into())
            })?
        };
        let src = &pool[text_source];
        let nsp_is_consecutive = rng.random_bool(config.nsp_consecutive_prob);
        let second = if nsp_is_consecutive {
            text_source
        } else {
            pick_where(pool, rng, |s| {
                s.id != src.id && s.latent_class == src.latent_class && s.attribute != src.attribute
            })
            .or_else(|| pick_where(pool, rng, |s| s.id != src.id))
            .ok_or_else(|| Error::Config("NSP negatives need at least two samples".into()))?
        };
        let span = text_span(src.first_half(), pool[second].second_half());
        let (tokens, masking) = apply_masking(&span, vocab_size, rng, &config.masking)?;
        raw.push((a, text_source, tokens, masking, caption_is_match, nsp_is_consecutive));
    }

    let text_len = raw.iter().map(|r| r.2.len()).max().unwrap_or(0);
    let rois_len = anchors.iter().map(|&a| pool[a].roi_count()).max().unwrap_or(0);
    let d = pool[anchors[0]].rois.shape()[1];
    let slots = raw
        .into_iter()
        .map(|(a, text_source, mut tokens, masking, caption_is_match, nsp_is_consecutive)| {
            tokens.resize(text_len, PAD_ID);
            let k = pool[a].roi_count();
            let mut rois = pool[a].rois.data().to_vec();
            rois.resize(rois_len * d, 0.0);
            let mut roi_keep = vec![true; k];
            roi_keep.resize(rois_len, false);
            Slot {
                anchor: a,
                text_source,
                tokens,
                masking,
                rois,
                roi_keep,
                caption_is_match,
                nsp_is_consecutive,
            }
        })
        .collect();
    Ok(Batch {
        slots,
        text_len,
        rois_len,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_synthetic_corpus, GeneratorSpec};
    use crate::model::ModelConfig;
    use crate::rng::{domain, stream};

    fn pool() -> Vec<MultimodalSample> {
        let spec = GeneratorSpec {
            n_train: 64,
            n_test: 2,
            ..GeneratorSpec::default()
        };
        generate_synthetic_corpus(2, &spec, &ModelConfig::default())
            .unwrap()
            .train
    }

    #[test]
    fn single_slot_is_too_small() {
        let p = pool();
        let r = make_batch(&p, &[0], 1000, &mut stream(0, domain::BATCH, 0), &BatchConfig::default());
        assert!(matches!(r, Err(Error::BatchTooSmall(1))));
    }

    #[test]
    fn mismatched_captions_cross_classes() {
        let p = pool();
        let anchors: Vec<usize> = (0..32).collect();
        for b in 0..20 {
            let batch = make_batch(
                &p,
                &anchors,
                1000,
                &mut stream(0, domain::BATCH, b),
                &BatchConfig::default(),
            )
            .unwrap();
            for s in &batch.slots {
                if s.caption_is_match {
                    assert_eq!(s.text_source, s.anchor);
                } else {
                    assert_ne!(p[s.text_source].latent_class, p[s.anchor].latent_class);
                }
            }
        }
    }

    #[test]
    fn padding_to_common_lengths() {
        let mut p = pool();
        // shorten one sample's text and ROI set
        p[1].tokens.truncate(4);
        p[1].rois = crate::tensor::Tensor::zeros(&[3, 32]);
        let cfg = BatchConfig {
            caption_match_prob: 1.0,
            nsp_consecutive_prob: 1.0,
            ..BatchConfig::default()
        };
        let b = make_batch(&p, &[0, 1], 1000, &mut stream(0, domain::BATCH, 0), &cfg).unwrap();
        assert_eq!(b.text_len, 9);
        assert_eq!(b.rois_len, 8);
        let short = &b.slots[1];
        assert_eq!(short.tokens.len(), 9);
        assert_eq!(&short.tokens[5..], &[PAD_ID; 4]);
        assert_eq!(short.text_keep(), [vec![true; 5], vec![false; 4]].concat());
        assert_eq!(short.roi_keep, [vec![true; 3], vec![false; 5]].concat());
        assert_eq!(short.rois.len(), 8 * 32);
        assert!(b.slots[0].roi_keep.iter().all(|&k| k));
    }

    #[test]
    fn deterministic_given_stream() {
        let p = pool();
        let a: Vec<usize> = (0..8).collect();
        let cfg = BatchConfig::default();
        let x = make_batch(&p, &a, 1000, &mut stream(4, domain::BATCH, 1), &cfg).unwrap();
        let y = make_batch(&p, &a, 1000, &mut stream(4, domain::BATCH, 1), &cfg).unwrap();
        assert_eq!(x, y);
    }
}
