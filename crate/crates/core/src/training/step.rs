//! Loss and gradient of one pre-training batch.
//!
//! Each slot runs on its own tape, so slots can be processed in parallel.
//! The contrastive term couples slots only through the pooled `[1 x D]`
//! embeddings: it is evaluated on a small tape over the stacked `E'`/`F'`
//! rows, and its gradient with respect to each row is fed back into the
//! slot tape as a linear surrogate `g . E'_b`. Per-slot gradients are then
//! summed in slot order, so the result does not depend on the executor.

use crate::autograd::{Tape, Var};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{Bound, Model};
use crate::objectives::{aps, contrastive_loss, head_cross_entropy, pretrain_loss, ContrastiveSpec, LossReport, LossWeights};
use crate::tensor::Tensor;

struct SlotPass<'a> {
    tape: Tape<'a>,
    bound: Bound,
    text: Var,
    visual: Var,
    mlm: Var,
    nsp: Var,
    caption: Var,
    mlm_count: usize,
    mlm_correct: usize,
    nsp_correct: bool,
    caption_correct: bool,
}

fn forward_slot<'a>(model: &'a Model, batch: &Batch, i: usize) -> Result<SlotPass<'a>> {
    let heads = model
        .layout()
        .heads
        .ok_or_else(|| Error::MissingParameter("head.mlm.w".into()))?;
    let slot = &batch.slots[i];
    let mut tape = Tape::new();
    let b = model.bind(&mut tape);
    let enc = model.encode(&mut tape, &b, slot.view(), true)?;
    let pooled = model.pool(&mut tape, &enc)?;

    let rows: Vec<usize> = slot.masking.positions.iter().map(|p| p + enc.text_offset).collect();
    if rows.is_empty() {
        return Err(Error::NoMaskedPositions);
    }
    let masked = tape.gather(enc.states, &rows)?;
    let (mlm, mlm_correct) = head_cross_entropy(
        &mut tape,
        masked,
        b.var(heads.mlm.0),
        b.var(heads.mlm.1),
        &slot.masking.targets,
    )?;
    let cls = tape.gather(enc.states, &[enc.cls_row])?;
    let (nsp, nsp_ok) = head_cross_entropy(
        &mut tape,
        cls,
        b.var(heads.nsp.0),
        b.var(heads.nsp.1),
        &[slot.nsp_is_consecutive as usize],
    )?;
    let (caption, cap_ok) = head_cross_entropy(
        &mut tape,
        cls,
        b.var(heads.caption.0),
        b.var(heads.caption.1),
        &[slot.caption_is_match as usize],
    )?;
    Ok(SlotPass {
        tape,
        bound: b,
        text: pooled.text,
        visual: pooled.visual,
        mlm,
        nsp,
        caption,
        mlm_count: rows.len(),
        mlm_correct,
        nsp_correct: nsp_ok == 1,
        caption_correct: cap_ok == 1,
    })
}

/// Batch-level metrics beside the loss report.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BatchStats {
    pub mlm_accuracy: f64,
    pub nsp_accuracy: f64,
    pub caption_accuracy: f64,
    /// Slots whose caption is the ground truth (PwCL rows).
    pub matched: usize,
}

pub struct BatchGradients {
    pub report: LossReport,
    pub stats: BatchStats,
    /// Summed gradient per parameter index; `None` for frozen tensors.
    pub grads: Vec<Option<Vec<f64>>>,
}

struct Contrastive {
    pwcl: f64,
    aps: f64,
    /// d pwcl / d E'_b and d F'_b per slot, zero rows for unmatched slots.
    grad_text: Vec<Vec<f64>>,
    grad_visual: Vec<Vec<f64>>,
}

fn contrastive(
    passes: &[SlotPass<'_>],
    batch: &Batch,
    spec: ContrastiveSpec,
    need_grad: bool,
) -> Result<Contrastive> {
    let matched = batch.matched();
    let d = passes[0].tape.shape(passes[0].text)[1];
    let mut out = Contrastive {
        pwcl: f64::NAN,
        aps: f64::NAN,
        grad_text: vec![vec![0.0; d]; passes.len()],
        grad_visual: vec![vec![0.0; d]; passes.len()],
    };
    if matched.is_empty() {
        return if need_grad {
            Err(Error::BatchTooSmall(0))
        } else {
            Ok(out)
        };
    }
    let stack = |pick: &dyn Fn(&SlotPass<'_>) -> Var| -> Vec<f64> {
        matched
            .iter()
            .flat_map(|&i| passes[i].tape.value(pick(&passes[i])).to_vec())
            .collect()
    };
    let e = Tensor::new(vec![matched.len(), d], stack(&|p| p.text))?;
    let f = Tensor::new(vec![matched.len(), d], stack(&|p| p.visual))?;
    out.aps = aps(&e, &f)?;

    let mut tape = Tape::new();
    let ev = tape.owned_leaf(e.with_requires_grad(true));
    let fv = tape.owned_leaf(f.with_requires_grad(true));
    let loss = match contrastive_loss(&mut tape, ev, fv, spec) {
        Ok(l) => l,
        Err(err) if need_grad => return Err(err),
        Err(_) => return Ok(out),
    };
    out.pwcl = tape.scalar(loss);
    if need_grad {
        tape.backward(loss)?;
        let ge = tape.grad(ev).expect("leaf gradient");
        let gf = tape.grad(fv).expect("leaf gradient");
        for (k, &i) in matched.iter().enumerate() {
            out.grad_text[i] = ge[k * d..(k + 1) * d].to_vec();
            out.grad_visual[i] = gf[k * d..(k + 1) * d].to_vec();
        }
    }
    Ok(out)
}

fn report_of(passes: &[SlotPass<'_>], c: &Contrastive, w: &LossWeights) -> (LossReport, BatchStats) {
    let n = passes.len() as f64;
    let masked: usize = passes.iter().map(|p| p.mlm_count).sum();
    let mlm = passes.iter().map(|p| p.tape.scalar(p.mlm)).sum::<f64>() / masked as f64;
    let nsp = passes.iter().map(|p| p.tape.scalar(p.nsp)).sum::<f64>() / n;
    let caption = passes.iter().map(|p| p.tape.scalar(p.caption)).sum::<f64>() / n;
    let pwcl_for_total = if w.pwcl == 0.0 { 0.0 } else { c.pwcl };
    let mut report = pretrain_loss(mlm, nsp, caption, pwcl_for_total, c.aps, w);
    report.pwcl = c.pwcl;
    let stats = BatchStats {
        mlm_accuracy: passes.iter().map(|p| p.mlm_correct).sum::<usize>() as f64 / masked as f64,
        nsp_accuracy: passes.iter().filter(|p| p.nsp_correct).count() as f64 / n,
        caption_accuracy: passes.iter().filter(|p| p.caption_correct).count() as f64 / n,
        matched: 0,
    };
    (report, stats)
}

fn forward_all<'a>(model: &'a Model, batch: &Batch, exec: Exec) -> Result<Vec<SlotPass<'a>>> {
    exec.map_range(batch.len(), |i| forward_slot(model, batch, i))
        .into_iter()
        .collect()
}

/// Forward-only loss of a batch. The contrastive value is `NaN` when it is
/// undefined (fewer than two matched slots or a non-positive ratio).
pub fn batch_loss(
    model: &Model,
    batch: &Batch,
    weights: &LossWeights,
    spec: ContrastiveSpec,
    exec: Exec,
) -> Result<LossReport> {
    let passes = forward_all(model, batch, exec)?;
    let c = contrastive(&passes, batch, spec, false)?;
    Ok(report_of(&passes, &c, weights).0)
}

/// Loss, statistics and summed parameter gradients of one batch.
///
/// With a positive contrastive weight, an undefined contrastive loss is an
/// error ([`Error::NonPositiveRatio`] or [`Error::BatchTooSmall`]).
pub fn batch_gradients(
    model: &Model,
    batch: &Batch,
    weights: &LossWeights,
    spec: ContrastiveSpec,
    exec: Exec,
) -> Result<BatchGradients> {
    if batch.len() < 2 {
        return Err(Error::BatchTooSmall(batch.len()));
    }
    let passes = forward_all(model, batch, exec)?;
    let c = contrastive(&passes, batch, spec, weights.pwcl > 0.0)?;
    let (report, mut stats) = report_of(&passes, &c, weights);
    stats.matched = batch.matched().len();

    let n = passes.len() as f64;
    let masked: usize = passes.iter().map(|p| p.mlm_count).sum();
    let w = *weights;
    let n_params = model.params.len();
    let items: Vec<(usize, SlotPass<'_>)> = passes.into_iter().enumerate().collect();
    let per_slot: Vec<Result<Vec<Option<Vec<f64>>>>> = exec.map(items, |(i, mut p)| {
        let tape = &mut p.tape;
        let mut terms = vec![
            tape.scale(p.mlm, w.mlm / masked as f64),
            tape.scale(p.nsp, w.nsp / n),
            tape.scale(p.caption, w.caption / n),
        ];
        if w.pwcl > 0.0 && batch.slots[i].caption_is_match {
            let gt: Vec<f64> = c.grad_text[i].iter().map(|g| g * w.pwcl).collect();
            let gv: Vec<f64> = c.grad_visual[i].iter().map(|g| g * w.pwcl).collect();
            terms.push(tape.dot_const(p.text, &gt)?);
            terms.push(tape.dot_const(p.visual, &gv)?);
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = tape.add(total, t)?;
        }
        tape.backward(total)?;
        Ok((0..n_params).map(|k| tape.take_grad(p.bound.var(k))).collect())
    });

    let mut grads: Vec<Option<Vec<f64>>> = vec![None; n_params];
    for slot in per_slot {
        for (acc, g) in grads.iter_mut().zip(slot?) {
            if let Some(g) = g {
                match acc {
                    None => *acc = Some(g),
                    Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| *x += y),
                }
            }
        }
    }
    Ok(BatchGradients { report, stats, grads })
}
