//! Text/image cosine-similarity matrix export as CSV and PGM.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::MultimodalSample;
use crate::error::{Error, Result};
use crate::eval::{matched_embeddings, Scoring};
use crate::exec::Exec;
use crate::model::Model;
use crate::objectives::similarity_matrix;
use crate::tensor::Tensor;

/// `[n x n]` cosines between `E'` of caption `i` and `F'` of image `j`,
/// each taken from the sample's own matched pass.
pub fn similarity_heatmap(model: &Model, samples: &[MultimodalSample], n: usize, exec: Exec) -> Result<Tensor> {
    if n == 0 || n > samples.len() {
        return Err(Error::SplitTooSmall {
            requested: n,
            available: samples.len(),
        });
    }
    let (e, f) = matched_embeddings(model, &samples[..n], Scoring::ZeroShot, exec)?;
    similarity_matrix(&e, &f)
}

/// Rows = text, columns = image, six decimals.
pub fn to_csv(m: &Tensor) -> String {
    let (r, c) = m.rows_cols();
    let mut out = String::new();
    for i in 0..r {
        for j in 0..c {
            if j > 0 {
                out.push(',');
            }
            write!(out, "{:.6}", m.get(&[i, j])).unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn parse_csv(text: &str) -> Result<Tensor> {
    let rows = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::MalformedFile(format!("heatmap CSV value {v:?}: {e}")))
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&rows)
}

/// Binary graymap (P5), one pixel per cell, `-1 -> 0` and `+1 -> 255`.
pub fn to_pgm(m: &Tensor) -> Vec<u8> {
    let (r, c) = m.rows_cols();
    let mut out = format!("P5\n{c} {r}\n255\n").into_bytes();
    out.extend(m.data().iter().map(|&v| {
        let v = v.clamp(-1.0, 1.0);
        ((v + 1.0) * 127.5).round() as u8
    }));
    out
}

pub fn export_heatmap(m: &Tensor, csv_path: &Path, pgm_path: &Path) -> Result<()> {
    std::fs::write(csv_path, to_csv(m))?;
    std::fs::write(pgm_path, to_pgm(m))?;
    Ok(())
}

/// Mean of the diagonal minus mean of the off-diagonal entries.
pub fn diagonal_margin(m: &Tensor) -> f64 {
    let (n, _) = m.rows_cols();
    let mut diag = 0.0;
    let mut off = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                diag += m.get(&[i, j]);
            } else {
                off += m.get(&[i, j]);
            }
        }
    }
    let off_n = (n * n - n).max(1) as f64;
    diag / n as f64 - off / off_n
}

/// Number of rows whose maximum sits on the diagonal (first maximum wins).
pub fn diagonal_argmax_rows(m: &Tensor) -> usize {
    let (n, _) = m.rows_cols();
    (0..n)
        .filter(|&i| crate::objectives::argmax(m.row(i)) == i)
        .count()
}
