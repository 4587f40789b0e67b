use log::{info, warn};
use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::data::{make_batch, BatchConfig, MultimodalSample};
use crate::error::{Error, Result};
use crate::eval::{evaluate_alignment, evaluate_retrieval, Scoring};
use crate::exec::Exec;
use crate::metrics::{set_recall, train_record, MetricsSink, Record};
use crate::model::{Model, ModelConfig};
use crate::objectives::{ContrastiveSpec, LossWeights};
use crate::rng::{domain, stream};
use crate::training::adam::{adam_step, AdamConfig, OptimState};
use crate::training::schedule::Schedule;
use crate::training::step::batch_gradients;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weights: LossWeights,
    pub contrastive: ContrastiveSpec,
    pub batch: BatchConfig,
    pub adam: AdamConfig,
    /// Fresh batches drawn after an undefined contrastive loss before aborting.
    pub max_retries: usize,
    /// Held-out samples used for the per-epoch retrieval estimate.
    pub eval_candidates: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            batch_size: 32,
            epochs: 30,
            lr: 1e-3,
            weights: LossWeights::default(),
            contrastive: ContrastiveSpec::default(),
            batch: BatchConfig::default(),
            adam: AdamConfig::default(),
            max_retries: 3,
            eval_candidates: 16,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::BatchTooSmall(self.batch_size));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        self.weights.validate()?;
        if !(self.contrastive.offset > 0.0 && self.contrastive.offset.is_finite()) {
            return Err(Error::Config(format!(
                "contrastive offset must be positive, got {}",
                self.contrastive.offset
            )));
        }
        self.batch.masking.validate()
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train / self.batch_size
    }
}

/// Model at initialisation for a given seed.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    Model::new(config.clone(), &mut stream(seed, domain::INIT, 0))
}

/// Epoch-level evaluation on held-out samples.
pub fn eval_record(
    model: &Model,
    eval: &[MultimodalSample],
    candidates: usize,
    step: u64,
    epoch: usize,
    exec: Exec,
) -> Result<Record> {
    let mut rec = Record::new("eval", step, epoch);
    let a = evaluate_alignment(model, eval, Scoring::ZeroShot, exec)?;
    rec.set_f64("aps", a.aps).set_f64("mean_off_diagonal", a.mean_off_diagonal);
    let n = candidates.min(eval.len());
    if n >= 1 {
        let r = evaluate_retrieval(model, &eval[..n], Scoring::ZeroShot, exec)?;
        set_recall(&mut rec, &r.recall);
        rec.set("candidates", n);
    }
    Ok(rec)
}

fn is_retryable(e: &Error) -> bool {
    matches!(e, Error::NonPositiveRatio { .. } | Error::BatchTooSmall(_))
}

/// Runs `epochs x (n_train / B)` Adam steps on the combined objective,
/// emitting one `train` record per step and one `eval` record per epoch.
///
/// A batch whose contrastive ratio is undefined (only reachable with the
/// literal form) is redrawn from fresh anchors up to `max_retries` times
/// before the run aborts.
pub fn pretrain(
    mut model: Model,
    train: &[MultimodalSample],
    eval: &[MultimodalSample],
    cfg: &PretrainConfig,
    seed: u64,
    exec: Exec,
    sink: &mut dyn MetricsSink,
) -> Result<(Model, OptimState)> {
    cfg.validate()?;
    let per_epoch = cfg.steps_per_epoch(train.len());
    if per_epoch == 0 {
        return Err(Error::SplitTooSmall {
            requested: cfg.batch_size,
            available: train.len(),
        });
    }
    let schedule = Schedule::new(cfg.lr, per_epoch * cfg.epochs)?;
    let mut optim = OptimState::new(&model.params, cfg.adam);
    let vocab = model.config.vocab_size;
    let mut step: u64 = 0;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream(seed, domain::SHUFFLE, epoch as u64));
        for chunk in order.chunks_exact(cfg.batch_size) {
            step += 1;
            let mut anchors = chunk.to_vec();
            let mut attempt = 0;
            let result = loop {
                let draw = step * 16 + attempt as u64;
                let batch = make_batch(train, &anchors, vocab, &mut stream(seed, domain::BATCH, draw), &cfg.batch)?;
                match batch_gradients(&model, &batch, &cfg.weights, cfg.contrastive, exec) {
                    Ok(r) => break r,
                    Err(e) if is_retryable(&e) && attempt < cfg.max_retries => {
                        attempt += 1;
                        warn!("step {step}: {e}; redrawing batch (attempt {attempt})");
                        let all: Vec<usize> = (0..train.len()).collect();
                        anchors = all
                            .choose_multiple(&mut stream(seed, domain::SHUFFLE, 1 << 40 | draw), cfg.batch_size)
                            .copied()
                            .collect();
                    }
                    Err(e) if is_retryable(&e) => {
                        warn!("step {step}: {e}; giving up");
                        return Err(Error::RetriesExhausted {
                            step,
                            retries: cfg.max_retries,
                        });
                    }
                    Err(e) => return Err(e),
                }
            };
            for (i, g) in result.grads.into_iter().enumerate() {
                model.params.by_index_mut(i).grad = g;
            }
            let lr = schedule.lr(step as usize);
            adam_step(&mut model.params, &mut optim, lr)?;
            model.params.zero_grads();
            let mut rec = train_record(step, epoch, lr, &result.report);
            rec.set("retries", attempt);
            sink.record(&rec)?;
        }
        let rec = eval_record(&model, eval, cfg.eval_candidates, step, epoch, exec)?;
        info!(
            "epoch {epoch}: eval aps {:.4} off-diagonal {:.4}",
            rec.get_f64("aps").unwrap_or(f64::NAN),
            rec.get_f64("mean_off_diagonal").unwrap_or(f64::NAN)
        );
        sink.record(&rec)?;
        sink.flush()?;
    }
    Ok((model, optim))
}
