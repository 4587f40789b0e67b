//! Pre-training objectives: masked-token prediction, next-sentence and
//! caption-match classification, the pair-wise contrastive loss, and the
//! averaged pair-wise similarity metric.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub mlm: f64,
    pub nsp: f64,
    pub caption: f64,
    pub pwcl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            mlm: 1.0,
            nsp: 1.0,
            caption: 1.0,
            pwcl: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.mlm, self.nsp, self.caption, self.pwcl];
        if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0, got {w:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub mlm: f64,
    pub nsp: f64,
    pub caption: f64,
    pub pwcl: f64,
    pub total: f64,
    pub aps: f64,
}

/// Weighted combination of the four losses.
pub fn pretrain_loss(mlm: f64, nsp: f64, caption: f64, pwcl: f64, aps: f64, w: &LossWeights) -> LossReport {
    LossReport {
        mlm,
        nsp,
        caption,
        pwcl,
        total: w.mlm * mlm + w.nsp * nsp + w.caption * caption + w.pwcl * pwcl,
        aps,
    }
}

/// Summed cross-entropy of a linear head over the rows of `x`, plus the
/// number of rows whose argmax equals the target.
pub fn head_cross_entropy(
    tape: &mut Tape<'_>,
    x: Var,
    w: Var,
    b: Var,
    targets: &[usize],
) -> Result<(Var, usize)> {
    let logits = tape.linear(x, w, b)?;
    let c = tape.shape(logits)[1];
    let correct = tape
        .value(logits)
        .chunks_exact(c)
        .zip(targets)
        .filter(|(row, &t)| argmax(row) == t)
        .count();
    Ok((tape.cross_entropy_sum(logits, targets)?, correct))
}

/// Index of the first maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy over masked positions (rows of `states`) and the
/// masked-token accuracy.
pub fn mlm_loss(
    tape: &mut Tape<'_>,
    states: Var,
    w: Var,
    b: Var,
    positions: &[usize],
    targets: &[usize],
) -> Result<(Var, f64)> {
    if positions.is_empty() {
        return Err(Error::NoMaskedPositions);
    }
    let rows = tape.gather(states, positions)?;
    let (sum, correct) = head_cross_entropy(tape, rows, w, b, targets)?;
    let n = positions.len() as f64;
    Ok((tape.scale(sum, 1.0 / n), correct as f64 / n))
}

/// Mean two-way cross-entropy of a binary head; label `true` is class 1.
pub fn binary_head_loss(
    tape: &mut Tape<'_>,
    cls: Var,
    w: Var,
    b: Var,
    labels: &[bool],
) -> Result<(Var, f64)> {
    let targets: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let (sum, correct) = head_cross_entropy(tape, cls, w, b, &targets)?;
    let n = labels.len() as f64;
    Ok((tape.scale(sum, 1.0 / n), correct as f64 / n))
}

/// Next-sentence prediction: label `true` means the halves are consecutive.
pub fn nsp_loss(tape: &mut Tape<'_>, cls: Var, w: Var, b: Var, labels: &[bool]) -> Result<(Var, f64)> {
    binary_head_loss(tape, cls, w, b, labels)
}

/// Caption matching: label `true` means the caption is the ground truth.
pub fn caption_match_loss(
    tape: &mut Tape<'_>,
    cls: Var,
    w: Var,
    b: Var,
    labels: &[bool],
) -> Result<(Var, f64)> {
    binary_head_loss(tape, cls, w, b, labels)
}

/// Diagonal and off-diagonal sums of `E F^T`.
pub fn pair_sums(e: &[f64], f: &[f64], dim: usize) -> (f64, f64) {
    let b = e.len() / dim;
    let mut diag = 0.0;
    let mut off = 0.0;
    for i in 0..b {
        let ei = &e[i * dim..(i + 1) * dim];
        for j in 0..b {
            let s: f64 = ei.iter().zip(&f[j * dim..(j + 1) * dim]).map(|(x, y)| x * y).sum();
            if i == j {
                diag += s;
            } else {
                off += s;
            }
        }
    }
    (diag, off)
}

/// `-ln( sum_i E_i.F_i / sum_{i != j} E_i.F_j )` over `[B x D]` pooled
/// embeddings. Both sums must be strictly positive.
pub fn pwcl_loss(tape: &mut Tape<'_>, e: Var, f: Var) -> Result<Var> {
    let (se, sf) = (tape.shape(e).to_vec(), tape.shape(f).to_vec());
    if se.len() != 2 || se != sf {
        return Err(Error::shape("pwcl_loss", &se, &sf));
    }
    if se[0] < 2 {
        return Err(Error::BatchTooSmall(se[0]));
    }
    let (num, den) = pair_sums(tape.value(e), tape.value(f), se[1]);
    if !(num > 0.0 && den > 0.0) {
        return Err(Error::NonPositiveRatio {
            numerator: num,
            denominator: den,
        });
    }
    let s = tape.matmul_nt(e, f)?;
    let diag = tape.trace(s)?;
    let all = tape.sum(s);
    let off = tape.sub(all, diag)?;
    let ln_off = tape.ln(off)?;
    let ln_diag = tape.ln(diag)?;
    tape.sub(ln_off, ln_diag)
}

/// How the trainer turns pooled similarities into the contrastive term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveForm {
    /// [`pwcl_loss`] on raw cosines. Its minimiser drives the off-diagonal
    /// sum through zero, after which the ratio is undefined.
    Literal,
    /// The same ratio over `offset + cos`, see [`pwcl_shifted_loss`].
    #[default]
    Shifted,
}

/// Offset used by [`ContrastiveForm::Shifted`] unless configured otherwise.
pub const DEFAULT_CONTRASTIVE_OFFSET: f64 = 4.0;

/// `ln( sum_{i != j} (c + E_i.F_j) ) - ln( sum_i (c + E_i.F_i) )`.
///
/// For `c > 1` both sums are positive for any unit vectors. A log ratio
/// rewards lowering every cosine together once the diagonal leads, and with
/// `c` near 1 that pull grows without bound as cosines approach -1; a
/// larger `c` keeps it small relative to the matched/mismatched contrast.
pub fn pwcl_shifted_loss(tape: &mut Tape<'_>, e: Var, f: Var, c: f64) -> Result<Var> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::Config(format!("contrastive offset must be positive, got {c}")));
    }
    let (se, sf) = (tape.shape(e).to_vec(), tape.shape(f).to_vec());
    if se.len() != 2 || se != sf {
        return Err(Error::shape("pwcl_shifted_loss", &se, &sf));
    }
    let b = se[0];
    if b < 2 {
        return Err(Error::BatchTooSmall(b));
    }
    let n_off = (b * (b - 1)) as f64;
    let (num, den) = pair_sums(tape.value(e), tape.value(f), se[1]);
    let (num, den) = (num + c * b as f64, den + c * n_off);
    if !(num > 0.0 && den > 0.0) {
        return Err(Error::NonPositiveRatio {
            numerator: num,
            denominator: den,
        });
    }
    let s = tape.matmul_nt(e, f)?;
    let diag = tape.trace(s)?;
    let all = tape.sum(s);
    let off = tape.sub(all, diag)?;
    let shift_diag = tape.constant(&[1], vec![c * b as f64])?;
    let shift_off = tape.constant(&[1], vec![c * n_off])?;
    let diag = tape.add(diag, shift_diag)?;
    let off = tape.add(off, shift_off)?;
    let ln_off = tape.ln(off)?;
    let ln_diag = tape.ln(diag)?;
    tape.sub(ln_off, ln_diag)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveSpec {
    pub form: ContrastiveForm,
    /// Similarity offset for the shifted form; ignored by the literal one.
    pub offset: f64,
}

impl Default for ContrastiveSpec {
    fn default() -> Self {
        ContrastiveSpec {
            form: ContrastiveForm::default(),
            offset: DEFAULT_CONTRASTIVE_OFFSET,
        }
    }
}

impl ContrastiveSpec {
    pub fn literal() -> Self {
        ContrastiveSpec {
            form: ContrastiveForm::Literal,
            ..Self::default()
        }
    }
}

pub fn contrastive_loss(tape: &mut Tape<'_>, e: Var, f: Var, spec: ContrastiveSpec) -> Result<Var> {
    match spec.form {
        ContrastiveForm::Literal => pwcl_loss(tape, e, f),
        ContrastiveForm::Shifted => pwcl_shifted_loss(tape, e, f, spec.offset),
    }
}

fn check_pair(e: &Tensor, f: &Tensor) -> Result<(usize, usize)> {
    if e.rank() != 2 || e.shape() != f.shape() {
        return Err(Error::shape("pooled embeddings", e.shape(), f.shape()));
    }
    Ok((e.shape()[0], e.shape()[1]))
}

pub fn pwcl_value(e: &Tensor, f: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let ev = tape.leaf(e);
    let fv = tape.leaf(f);
    let l = pwcl_loss(&mut tape, ev, fv)?;
    Ok(tape.scalar(l))
}

/// Averaged pair-wise similarity: mean of `E_i . F_i`.
pub fn aps(e: &Tensor, f: &Tensor) -> Result<f64> {
    let (b, d) = check_pair(e, f)?;
    Ok(pair_sums(e.data(), f.data(), d).0 / b as f64)
}

/// Mean of `E_i . F_j` over `i != j`; zero for a single row.
pub fn mean_off_diagonal(e: &Tensor, f: &Tensor) -> Result<f64> {
    let (b, d) = check_pair(e, f)?;
    if b < 2 {
        return Ok(0.0);
    }
    Ok(pair_sums(e.data(), f.data(), d).1 / (b * (b - 1)) as f64)
}

/// `[B x B]` matrix of `E_i . F_j`.
pub fn similarity_matrix(e: &Tensor, f: &Tensor) -> Result<Tensor> {
    check_pair(e, f)?;
    let mut tape = Tape::new();
    let ev = tape.leaf(e);
    let fv = tape.leaf(f);
    let s = tape.matmul_nt(ev, fv)?;
    Ok(tape.to_tensor(s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn pwcl_hand_values() {
        let e = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_abs_diff_eq!(pwcl_value(&e, &t(&[&[1.0, 0.0], &[1.0, 0.0]])).unwrap(), 0.0, epsilon = 1e-12);
        let f = t(&[&[0.6, 0.8], &[0.8, 0.6]]);
        assert_abs_diff_eq!(pwcl_value(&e, &f).unwrap(), 0.28768, epsilon = 1e-5);
        assert_abs_diff_eq!(aps(&e, &f).unwrap(), 0.6, epsilon = 1e-12);
    }

    #[test]
    fn pwcl_errors() {
        let e = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(matches!(pwcl_value(&e, &e), Err(Error::NonPositiveRatio { .. })));
        let one = t(&[&[1.0, 0.0]]);
        assert!(matches!(pwcl_value(&one, &one), Err(Error::BatchTooSmall(1))));
    }

    #[test]
    fn pwcl_can_be_negative() {
        // diagonal sum 2, off-diagonal sum 1.2 -> ln(1.2/2) < 0
        let e = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let f = t(&[&[1.0, 0.0], &[0.6, 0.8]]);
        let l = pwcl_value(&e, &f).unwrap();
        assert!(l < 0.0);
        assert_abs_diff_eq!(l, (0.6f64 / 1.8).ln(), epsilon = 1e-12);
    }

    fn shifted(e: &Tensor, f: &Tensor, c: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let ev = tape.leaf(e);
        let fv = tape.leaf(f);
        let l = pwcl_shifted_loss(&mut tape, ev, fv, c)?;
        Ok(tape.scalar(l))
    }

    #[test]
    fn shifted_hand_values() {
        let e = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        // diagonal 2 + 2c, off-diagonal 0 + 2c
        assert_abs_diff_eq!(shifted(&e, &e, 4.0).unwrap(), (8.0f64 / 10.0).ln(), epsilon = 1e-12);
        let same = t(&[&[1.0, 0.0], &[1.0, 0.0]]);
        assert_abs_diff_eq!(shifted(&e, &same, 4.0).unwrap(), 0.0, epsilon = 1e-12);
        // defined where the literal ratio is not
        let anti = t(&[&[-1.0, 0.0], &[0.0, -1.0]]);
        assert!(pwcl_value(&e, &anti).is_err());
        assert_abs_diff_eq!(shifted(&e, &anti, 4.0).unwrap(), (8.0f64 / 6.0).ln(), epsilon = 1e-12);
    }

    #[test]
    fn shifted_errors() {
        let e = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(matches!(shifted(&e, &e, 0.0), Err(Error::Config(_))));
        let one = t(&[&[1.0, 0.0]]);
        assert!(matches!(shifted(&one, &one, 4.0), Err(Error::BatchTooSmall(1))));
        let spec = ContrastiveSpec::literal();
        let mut tape = Tape::new();
        let ev = tape.leaf(&e);
        assert!(matches!(contrastive_loss(&mut tape, ev, ev, spec), Err(Error::NonPositiveRatio { .. })));
    }

    #[test]
    fn shifted_gradient_matches_finite_differences() {
        use crate::gradcheck::grad_check;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(&[6, 3], -1.0, 1.0, &mut rng);
        let err = grad_check(
            |tape, x| {
                let e = tape.slice_cols(x, 0, 3)?;
                let e = tape.l2_normalize_rows(e);
                let f = tape.gather(e, &[1, 0, 2, 3, 5, 4])?;
                pwcl_shifted_loss(tape, e, f, 2.0)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn aps_limits() {
        let e = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_abs_diff_eq!(aps(&e, &e).unwrap(), 1.0);
        let f = t(&[&[0.0, 1.0], &[1.0, 0.0]]);
        assert_abs_diff_eq!(aps(&e, &f).unwrap(), 0.0);
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let mut tape = Tape::new();
        let x = tape.constant(&[3, 4], vec![0.3; 12]).unwrap();
        let w = tape.constant(&[4, 1000], vec![0.0; 4000]).unwrap();
        let b = tape.constant(&[1000], vec![0.0; 1000]).unwrap();
        let (l, _) = mlm_loss(&mut tape, x, w, b, &[0, 2], &[5, 900]).unwrap();
        assert_abs_diff_eq!(tape.scalar(l), 1000f64.ln(), epsilon = 1e-9);
        let w2 = tape.constant(&[4, 2], vec![0.0; 8]).unwrap();
        let b2 = tape.constant(&[2], vec![0.0; 2]).unwrap();
        let (l, _) = nsp_loss(&mut tape, x, w2, b2, &[true, false, true]).unwrap();
        assert_abs_diff_eq!(tape.scalar(l), 2f64.ln(), epsilon = 1e-12);
        assert!(matches!(
            mlm_loss(&mut tape, x, w, b, &[], &[]),
            Err(Error::NoMaskedPositions)
        ));
    }

    #[test]
    fn confident_caption_head_has_near_zero_loss() {
        let mut tape = Tape::new();
        let x = tape.constant(&[2, 1], vec![1.0, 1.0]).unwrap();
        let w = tape.constant(&[1, 2], vec![-50.0, 50.0]).unwrap();
        let b = tape.constant(&[2], vec![0.0, 0.0]).unwrap();
        let (l, acc) = caption_match_loss(&mut tape, x, w, b, &[true, true]).unwrap();
        assert!(tape.scalar(l) < 1e-12);
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn weighted_total() {
        let w = LossWeights {
            mlm: 0.0,
            nsp: 0.0,
            caption: 0.0,
            pwcl: 1.0,
        };
        assert_eq!(pretrain_loss(1.0, 2.0, 3.0, 4.0, 0.5, &w).total, 4.0);
        let r = pretrain_loss(1.0, 2.0, 3.0, 4.0, 0.5, &LossWeights::default());
        assert_eq!(r.total, 10.0);
    }

    fn unit_rows(raw: &[f64], d: usize) -> Tensor {
        let mut v = raw.to_vec();
        for row in v.chunks_exact_mut(d) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
            row.iter_mut().for_each(|x| *x /= n);
        }
        Tensor::new(vec![raw.len() / d, d], v).unwrap()
    }

    proptest! {
        #[test]
        fn pwcl_permutation_invariant(
            raw_e in proptest::collection::vec(0.1f64..1.0, 12),
            raw_f in proptest::collection::vec(0.1f64..1.0, 12),
        ) {
            // positive entries keep both sums positive
            let e = unit_rows(&raw_e, 3);
            let f = unit_rows(&raw_f, 3);
            let perm = [2usize, 0, 3, 1];
            let pe: Vec<f64> = perm.iter().flat_map(|&i| e.row(i).to_vec()).collect();
            let pf: Vec<f64> = perm.iter().flat_map(|&i| f.row(i).to_vec()).collect();
            let a = pwcl_value(&e, &f).unwrap();
            let b = pwcl_value(
                &Tensor::new(vec![4, 3], pe).unwrap(),
                &Tensor::new(vec![4, 3], pf).unwrap(),
            ).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            let s = aps(&e, &f).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
        }

        #[test]
        fn pwcl_monotone_in_off_diagonal(
            raw in proptest::collection::vec(0.1f64..1.0, 9),
            cell in 0usize..6,
            delta in 0.01f64..0.09,
        ) {
            // with E = I, S_ij = F_j[i], so one entry of F moves one similarity
            let e = Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
            let off: Vec<usize> = (0..9).filter(|k| k % 4 != 0).collect();
            let k = off[cell];
            let f = Tensor::new(vec![3, 3], raw.clone()).unwrap();
            let mut lowered = raw;
            lowered[k] -= delta;
            let g = Tensor::new(vec![3, 3], lowered).unwrap();
            prop_assert!(pwcl_value(&e, &g).unwrap() < pwcl_value(&e, &f).unwrap());
        }
    }
}
