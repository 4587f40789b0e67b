//! Retrieval scoring, Recall@K and pooled-embedding alignment.
//!
//! A caption/image pair is scored by one joint encoder pass over
//! `[CLS] caption [SEP] image`: the score is the cosine between the pooled
//! text and visual embeddings of that pass. With Adapter I the pooled
//! vectors come from its output block instead.

use crate::autograd::{Tape, Var};
use crate::data::{MultimodalSample, PairInput};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{AdapterKind, Bound, Model, SampleView};
use crate::objectives::{aps, mean_off_diagonal};
use crate::tensor::Tensor;

/// How a model turns a pair into a score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scoring {
    /// Backbone as pre-trained: adapters skipped.
    ZeroShot,
    /// Full fine-tuned architecture.
    Finetuned,
}

/// Pooled, L2-normalised `[1 x D']` text and visual embeddings of one pass.
pub fn pair_embeddings(
    model: &Model,
    tape: &mut Tape<'_>,
    b: &Bound,
    view: SampleView<'_>,
    scoring: Scoring,
) -> Result<(Var, Var)> {
    let finetuned = scoring == Scoring::Finetuned;
    let enc = model.encode(tape, b, view, finetuned)?;
    if finetuned && model.arch.adapter == AdapterKind::AdapterI {
        let sc = model.shortcut(tape, b, &enc)?;
        let t = model.adapter1_output(tape, b, enc.states, sc, &enc.text_rows)?;
        let v = model.adapter1_output(tape, b, enc.states, sc, &enc.visual_rows)?;
        Ok((tape.l2_normalize_rows(t), tape.l2_normalize_rows(v)))
    } else {
        let p = model.pool(tape, &enc)?;
        Ok((p.text, p.visual))
    }
}

/// Cosine score of one pair as a `[1]` node.
pub fn pair_score(
    model: &Model,
    tape: &mut Tape<'_>,
    b: &Bound,
    view: SampleView<'_>,
    scoring: Scoring,
) -> Result<Var> {
    let (t, v) = pair_embeddings(model, tape, b, view, scoring)?;
    let prod = tape.mul(t, v)?;
    Ok(tape.sum(prod))
}

fn embeddings_of(model: &Model, input: &PairInput, scoring: Scoring) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::new();
    let b = model.bind(&mut tape);
    let (t, v) = pair_embeddings(model, &mut tape, &b, input.view(), scoring)?;
    Ok((tape.value(t).to_vec(), tape.value(v).to_vec()))
}

/// `E'` and `F'` rows of each sample paired with its own image.
pub fn matched_embeddings(
    model: &Model,
    samples: &[MultimodalSample],
    scoring: Scoring,
    exec: Exec,
) -> Result<(Tensor, Tensor)> {
    if samples.is_empty() {
        return Err(Error::SplitTooSmall {
            requested: 1,
            available: 0,
        });
    }
    let rows = exec
        .map_range(samples.len(), |i| {
            embeddings_of(model, &PairInput::new(&samples[i], &samples[i]), scoring)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let d = rows[0].0.len();
    let n = rows.len();
    let (mut e, mut f) = (Vec::with_capacity(n * d), Vec::with_capacity(n * d));
    for (t, v) in rows {
        e.extend(t);
        f.extend(v);
    }
    Ok((Tensor::new(vec![n, d], e)?, Tensor::new(vec![n, d], f)?))
}

/// `[n x n]` scores with row = caption `i`, column = image `j`.
pub fn score_matrix(
    model: &Model,
    samples: &[MultimodalSample],
    scoring: Scoring,
    exec: Exec,
) -> Result<Tensor> {
    let n = samples.len();
    if n == 0 {
        return Err(Error::SplitTooSmall {
            requested: 1,
            available: 0,
        });
    }
    let scores = exec
        .map_range(n * n, |k| {
            let (i, j) = (k / n, k % n);
            let input = PairInput::new(&samples[i], &samples[j]);
            let mut tape = Tape::new();
            let b = model.bind(&mut tape);
            let s = pair_score(model, &mut tape, &b, input.view(), scoring)?;
            Ok(tape.scalar(s))
        })
        .into_iter()
        .collect::<Result<Vec<f64>>>()?;
    Tensor::new(vec![n, n], scores)
}

/// 1-based rank of the correct column `i` in row `i`; ties rank the lower
/// column index first.
pub fn rank_of_match(scores: &Tensor, i: usize) -> usize {
    let row = scores.row(i);
    let s = row[i];
    1 + row
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < i))
        .count()
}

/// Fraction of rows whose matching column ranks within the top `k`.
pub fn recall_at_k(scores: &Tensor, ks: &[usize]) -> Vec<f64> {
    let n = scores.shape()[0];
    let ranks: Vec<usize> = (0..n).map(|i| rank_of_match(scores, i)).collect();
    ks.iter()
        .map(|&k| ranks.iter().filter(|&&r| r <= k).count() as f64 / n as f64)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalReport {
    /// Recall@1, @5, @10.
    pub recall: [f64; 3],
    pub candidates: usize,
}

pub fn evaluate_retrieval(
    model: &Model,
    samples: &[MultimodalSample],
    scoring: Scoring,
    exec: Exec,
) -> Result<RetrievalReport> {
    let s = score_matrix(model, samples, scoring, exec)?;
    let r = recall_at_k(&s, &[1, 5, 10]);
    Ok(RetrievalReport {
        recall: [r[0], r[1], r[2]],
        candidates: samples.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentReport {
    pub aps: f64,
    pub mean_off_diagonal: f64,
}

/// APS and mean off-diagonal cosine over `E'`/`F'` of matched passes.
pub fn evaluate_alignment(
    model: &Model,
    samples: &[MultimodalSample],
    scoring: Scoring,
    exec: Exec,
) -> Result<AlignmentReport> {
    let (e, f) = matched_embeddings(model, samples, scoring, exec)?;
    Ok(AlignmentReport {
        aps: aps(&e, &f)?,
        mean_off_diagonal: mean_off_diagonal(&e, &f)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recall_with_ties_prefers_lower_index() {
        // row 1 ties column 0 with its match, so it ranks second
        let s = Tensor::new(vec![3, 3], vec![0.9, 0.1, 0.2, 0.5, 0.5, 0.0, 0.3, 0.8, 0.7]).unwrap();
        assert_eq!(rank_of_match(&s, 0), 1);
        assert_eq!(rank_of_match(&s, 1), 2);
        assert_eq!(rank_of_match(&s, 2), 2);
        assert_eq!(recall_at_k(&s, &[1, 2, 3]), vec![1.0 / 3.0, 1.0, 1.0]);
    }

    #[test]
    fn constant_scores_rank_by_index() {
        let s = Tensor::filled(&[4, 4], 0.5);
        let ranks: Vec<usize> = (0..4).map(|i| rank_of_match(&s, i)).collect();
        assert_eq!(ranks, vec![1, 2, 3, 4]);
    }
}
