//! End-to-end gradient check of the combined pre-training loss.

use rand::seq::IndexedRandom;

use crate::data::{generate_synthetic_corpus, make_batch, BatchConfig, GeneratorSpec};
use crate::error::Result;
use crate::exec::Exec;
use crate::gradcheck::{grad_check_coords, OpCheck};
use crate::model::{Model, ModelConfig};
use crate::objectives::{ContrastiveSpec, LossWeights};
use crate::rng::{domain, stream};
use crate::training::pretrain::init_model;
use crate::training::step::{batch_gradients, batch_loss};

pub const FULL_LOSS_STEP: f64 = 1e-5;
pub const FULL_LOSS_TOLERANCE: f64 = 1e-3;

/// Small enough for thousands of forward passes in a few seconds.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 24,
        hidden: 8,
        layers: 2,
        heads: 2,
        ffn_dim: 16,
        max_text_len: 12,
        max_rois: 4,
        roi_feature_dim: 4,
        // larger than the training default so the heads are not near-linear
        init_std: 0.3,
        ..ModelConfig::default()
    }
}

pub fn tiny_generator() -> GeneratorSpec {
    GeneratorSpec {
        n_classes: 2,
        n_attributes: 2,
        n_train: 16,
        n_test: 2,
        half_len: 3,
        class_vocab: 4,
        attribute_vocab: 2,
        rois_per_image: 3,
        ..GeneratorSpec::default()
    }
}

/// Compares [`batch_gradients`] with central differences of [`batch_loss`]
/// on `per_tensor` sampled coordinates of every parameter tensor.
pub fn full_loss_gradcheck(seed: u64, spec: ContrastiveSpec, per_tensor: usize) -> Result<OpCheck> {
    let cfg = tiny_model_config();
    let corpus = generate_synthetic_corpus(seed, &tiny_generator(), &cfg)?;
    let model = init_model(&cfg, seed)?;
    let weights = LossWeights::default();
    let exec = Exec::Sequential;

    // the contrastive term needs two caption-matched slots
    let all: Vec<usize> = (0..corpus.train.len()).collect();
    let mut draw = 0u64;
    let batch = loop {
        let mut rng = stream(seed, domain::BATCH, draw);
        let anchors: Vec<usize> = all.choose_multiple(&mut rng, 5).copied().collect();
        let b = make_batch(&corpus.train, &anchors, cfg.vocab_size, &mut rng, &BatchConfig::default())?;
        draw += 1;
        if b.matched().len() >= 2 && batch_loss(&model, &b, &weights, spec, exec)?.pwcl.is_finite() {
            break b;
        }
    };

    let analytic = batch_gradients(&model, &batch, &weights, spec, exec)?.grads;
    let mut worst: f64 = 0.0;
    let mut rng = stream(seed, domain::BATCH, u64::MAX);
    for (p, grad) in analytic.iter().enumerate() {
        let grad = grad.as_deref().expect("every pre-training tensor is trainable");
        let n = grad.len();
        let idx: Vec<usize> = (0..n).collect();
        let coords: Vec<usize> = idx.choose_multiple(&mut rng, per_tensor.min(n)).copied().collect();
        let base = model.params.by_index(p).data().to_vec();
        let eval = |data: &[f64]| -> Result<f64> {
            let mut m: Model = model.clone();
            m.params.by_index_mut(p).data_mut().copy_from_slice(data);
            Ok(batch_loss(&m, &batch, &weights, spec, exec)?.total)
        };
        worst = worst.max(grad_check_coords(eval, &base, grad, &coords, FULL_LOSS_STEP)?);
    }
    Ok(OpCheck {
        name: format!("full_loss_{:?}", spec.form).to_lowercase(),
        max_relative_error: worst,
        tolerance: FULL_LOSS_TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combined_loss_gradient_matches() {
        let c = full_loss_gradcheck(5, ContrastiveSpec::default(), 3).unwrap();
        assert!(c.passed(), "{c:?}");
        let c = full_loss_gradcheck(5, ContrastiveSpec::literal(), 3).unwrap();
        assert!(c.passed(), "{c:?}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // a probe of a plainly wrong derivative must fail the same tolerance
        let base = [0.3, -0.2];
        let eval = |d: &[f64]| -> Result<f64> { Ok(d[0] * d[0] + 3.0 * d[1]) };
        let err = grad_check_coords(eval, &base, &[0.6, 3.01], &[0, 1], FULL_LOSS_STEP).unwrap();
        assert!(err > FULL_LOSS_TOLERANCE, "{err}");
    }
}
