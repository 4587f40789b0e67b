//! Task fine-tuning on top of a pre-trained backbone.
//!
//! Retrieval uses an in-batch listwise objective: for `B` anchors every
//! caption is scored against every image with one joint pass per pair, and
//! each caption row is a softmax cross-entropy over the `B` scaled scores
//! with its own image as the target. Classification predicts the latent
//! class from the pooled representation.

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adapters::{build_finetune_model, FinetuneMode, ParameterPartition, DEFAULT_BOTTLENECK};
use crate::autograd::{Tape, Var};
use crate::data::{MultimodalSample, PairInput};
use crate::error::{Error, Result};
use crate::eval::{evaluate_retrieval, pair_embeddings, pair_score, Scoring};
use crate::exec::Exec;
use crate::metrics::{set_recall, MetricsSink, Record};
use crate::model::{AdapterKind, Bound, Model, TaskSpec};
use crate::objectives::argmax;
use crate::rng::{domain, stream};
use crate::training::adam::{adam_step, AdamConfig, OptimState};
use crate::training::schedule::Schedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub mode: FinetuneMode,
    pub bottleneck: usize,
    pub task: TaskSpec,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Multiplier on cosine scores inside the retrieval softmax.
    pub retrieval_scale: f64,
    pub adam: AdamConfig,
    pub eval_candidates: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            mode: FinetuneMode::Adapter1,
            bottleneck: DEFAULT_BOTTLENECK,
            task: TaskSpec::Retrieval,
            batch_size: 8,
            epochs: 2,
            lr: 1e-4,
            retrieval_scale: 10.0,
            adam: AdamConfig::default(),
            eval_candidates: 16,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::BatchTooSmall(self.batch_size));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if let TaskSpec::Classification { classes } = self.task {
            if classes < 2 {
                return Err(Error::Config("classification needs at least 2 classes".into()));
            }
        }
        Ok(())
    }
}

/// Class logits `[1 x C]` for one sample.
pub fn class_logits(model: &Model, tape: &mut Tape<'_>, b: &Bound, input: &PairInput) -> Result<Var> {
    if model.arch.adapter == AdapterKind::AdapterI {
        let enc = model.encode(tape, b, input.view(), true)?;
        let sc = model.shortcut(tape, b, &enc)?;
        let rows: Vec<usize> = enc.text_rows.iter().chain(&enc.visual_rows).copied().collect();
        model.adapter1_output(tape, b, enc.states, sc, &rows)
    } else {
        let (t, v) = pair_embeddings(model, tape, b, input.view(), Scoring::Finetuned)?;
        let cat = tape.concat_cols(&[t, v])?;
        let (w, bias) = model
            .layout()
            .task
            .ok_or_else(|| Error::MissingParameter("head.task.w".into()))?;
        tape.linear(cat, b.var(w), b.var(bias))
    }
}

pub struct StepResult {
    pub loss: f64,
    pub accuracy: f64,
    pub grads: Vec<Option<Vec<f64>>>,
}

fn reduce(n_params: usize, per_item: Vec<Result<Vec<Option<Vec<f64>>>>>) -> Result<Vec<Option<Vec<f64>>>> {
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; n_params];
    for item in per_item {
        for (acc, g) in grads.iter_mut().zip(item?) {
            if let Some(g) = g {
                match acc {
                    None => *acc = Some(g),
                    Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| *x += y),
                }
            }
        }
    }
    Ok(grads)
}

/// In-batch listwise retrieval loss and gradients over `B x B` joint passes.
pub fn retrieval_step(
    model: &Model,
    samples: &[MultimodalSample],
    anchors: &[usize],
    scale: f64,
    exec: Exec,
) -> Result<StepResult> {
    let n = anchors.len();
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    let inputs: Vec<PairInput> = (0..n * n)
        .map(|k| PairInput::new(&samples[anchors[k / n]], &samples[anchors[k % n]]))
        .collect();
    let passes = exec
        .map_range(n * n, |k| -> Result<(Tape<'_>, Bound, Var)> {
            let mut tape = Tape::new();
            let b = model.bind(&mut tape);
            let s = pair_score(model, &mut tape, &b, inputs[k].view(), Scoring::Finetuned)?;
            Ok((tape, b, s))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let scores: Vec<f64> = passes.iter().map(|(t, _, s)| t.scalar(*s)).collect();
    let mut head = Tape::new();
    let sv = head.owned_leaf(crate::tensor::Tensor::new(vec![n, n], scores.clone())?.with_requires_grad(true));
    let logits = head.scale(sv, scale);
    let targets: Vec<usize> = (0..n).collect();
    let ce = head.cross_entropy_sum(logits, &targets)?;
    let loss = head.scale(ce, 1.0 / n as f64);
    head.backward(loss)?;
    let dscores = head.grad(sv).expect("leaf gradient").to_vec();
    let correct = (0..n).filter(|&i| argmax(&scores[i * n..(i + 1) * n]) == i).count();

    let n_params = model.params.len();
    let items: Vec<(usize, (Tape<'_>, Bound, Var))> = passes.into_iter().enumerate().collect();
    let per_pair = exec.map(items, |(k, (mut tape, b, s))| {
        let obj = tape.dot_const(s, &[dscores[k]])?;
        tape.backward(obj)?;
        Ok((0..n_params).map(|p| tape.take_grad(b.var(p))).collect())
    });
    Ok(StepResult {
        loss: head.scalar(loss),
        accuracy: correct as f64 / n as f64,
        grads: reduce(n_params, per_pair)?,
    })
}

/// Mean cross-entropy of latent-class prediction over `anchors`.
pub fn classification_step(
    model: &Model,
    samples: &[MultimodalSample],
    anchors: &[usize],
    exec: Exec,
) -> Result<StepResult> {
    let n = anchors.len();
    let n_params = model.params.len();
    let per = exec.map_range(n, |i| -> Result<(f64, bool, Vec<Option<Vec<f64>>>)> {
        let s = &samples[anchors[i]];
        let input = PairInput::new(s, s);
        let mut tape = Tape::new();
        let b = model.bind(&mut tape);
        let logits = class_logits(model, &mut tape, &b, &input)?;
        let ok = argmax(tape.value(logits)) == s.latent_class;
        let ce = tape.cross_entropy_sum(logits, &[s.latent_class])?;
        let l = tape.scale(ce, 1.0 / n as f64);
        tape.backward(l)?;
        let v = tape.scalar(ce);
        Ok((v, ok, (0..n_params).map(|p| tape.take_grad(b.var(p))).collect()))
    });
    let mut loss = 0.0;
    let mut correct = 0;
    let mut grads = Vec::with_capacity(n);
    for r in per {
        let (l, ok, g) = r?;
        loss += l / n as f64;
        correct += ok as usize;
        grads.push(Ok(g));
    }
    Ok(StepResult {
        loss,
        accuracy: correct as f64 / n as f64,
        grads: reduce(n_params, grads)?,
    })
}

pub fn classification_accuracy(model: &Model, samples: &[MultimodalSample], exec: Exec) -> Result<f64> {
    let hits = exec
        .map_range(samples.len(), |i| -> Result<bool> {
            let s = &samples[i];
            let input = PairInput::new(s, s);
            let mut tape = Tape::new();
            let b = model.bind(&mut tape);
            let logits = class_logits(model, &mut tape, &b, &input)?;
            Ok(argmax(tape.value(logits)) == s.latent_class)
        })
        .into_iter()
        .collect::<Result<Vec<bool>>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / samples.len().max(1) as f64)
}

pub struct FinetuneOutcome {
    pub model: Model,
    pub optim: OptimState,
    pub partition: ParameterPartition,
}

fn task_eval(model: &Model, eval: &[MultimodalSample], cfg: &FinetuneConfig, step: u64, epoch: usize, exec: Exec) -> Result<Record> {
    let mut rec = Record::new("eval", step, epoch);
    match cfg.task {
        TaskSpec::Retrieval => {
            let n = cfg.eval_candidates.min(eval.len());
            let r = evaluate_retrieval(model, &eval[..n], Scoring::Finetuned, exec)?;
            set_recall(&mut rec, &r.recall);
            rec.set("candidates", n);
        }
        TaskSpec::Classification { .. } => {
            rec.set_f64("accuracy", classification_accuracy(model, eval, exec)?);
        }
    }
    Ok(rec)
}

/// Builds the fine-tune model for `cfg.mode` and trains its trainable set.
pub fn finetune(
    pretrained: &Model,
    train: &[MultimodalSample],
    eval: &[MultimodalSample],
    cfg: &FinetuneConfig,
    seed: u64,
    exec: Exec,
    sink: &mut dyn MetricsSink,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let (mut model, partition) = build_finetune_model(
        pretrained,
        cfg.mode,
        cfg.bottleneck,
        cfg.task,
        &mut stream(seed, domain::ADAPTER, 0),
    )?;
    let per_epoch = train.len() / cfg.batch_size;
    if per_epoch == 0 {
        return Err(Error::SplitTooSmall {
            requested: cfg.batch_size,
            available: train.len(),
        });
    }
    let schedule = Schedule::new(cfg.lr, per_epoch * cfg.epochs)?;
    let mut optim = OptimState::new(&model.params, cfg.adam);
    let mut step: u64 = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream(seed, domain::FINETUNE, epoch as u64));
        for anchors in order.chunks_exact(cfg.batch_size) {
            step += 1;
            let r = match cfg.task {
                TaskSpec::Retrieval => retrieval_step(&model, train, anchors, cfg.retrieval_scale, exec)?,
                TaskSpec::Classification { .. } => classification_step(&model, train, anchors, exec)?,
            };
            for (i, g) in r.grads.into_iter().enumerate() {
                model.params.by_index_mut(i).grad = g;
            }
            let lr = schedule.lr(step as usize);
            adam_step(&mut model.params, &mut optim, lr)?;
            model.params.zero_grads();
            let mut rec = Record::new("train", step, epoch);
            rec.set_f64("lr", lr).set_f64("task_loss", r.loss).set_f64("batch_accuracy", r.accuracy);
            sink.record(&rec)?;
        }
        let rec = task_eval(&model, eval, cfg, step, epoch, exec)?;
        info!("fine-tune epoch {epoch}: {}", rec.to_line());
        sink.record(&rec)?;
        sink.flush()?;
    }
    Ok(FinetuneOutcome {
        model,
        optim,
        partition,
    })
}
