//! Ingestion of precomputed detector outputs.
//!
//! A detection file holds two consecutive tensor records: ROI features
//! `[K x d_v]` followed by detection scores `[K]`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.5;
pub const DEFAULT_MAX_ROIS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct IngestedRois {
    /// Kept ROI features in descending score order.
    pub features: Tensor,
    /// Original row index of each kept ROI.
    pub kept: Vec<usize>,
}

pub fn write_detections(path: &Path, features: &Tensor, scores: &[f64]) -> Result<()> {
    if features.rank() != 2 || features.shape()[0] != scores.len() {
        return Err(Error::LengthMismatch {
            what: "ROI rows vs scores",
            left: features.shape()[0],
            right: scores.len(),
        });
    }
    let mut w = BufWriter::new(File::create(path)?);
    features.write_to(&mut w)?;
    Tensor::new(vec![scores.len()], scores.to_vec())?.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

/// Keeps ROIs scoring strictly above `score_threshold`, ordered by score
/// (ties by original index), truncated to `max_rois`.
pub fn select_rois(
    features: &Tensor,
    scores: &[f64],
    score_threshold: f64,
    max_rois: usize,
) -> Result<IngestedRois> {
    if features.rank() != 2 || features.shape()[0] != scores.len() {
        return Err(Error::MalformedFile(format!(
            "feature rows {:?} do not match {} scores",
            features.shape(),
            scores.len()
        )));
    }
    let mut kept: Vec<usize> = (0..scores.len())
        .filter(|&i| scores[i] > score_threshold)
        .collect();
    kept.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    kept.truncate(max_rois);
    if kept.is_empty() {
        return Err(Error::EmptyAfterFilter);
    }
    let d = features.shape()[1];
    let mut data = Vec::with_capacity(kept.len() * d);
    for &i in &kept {
        data.extend_from_slice(features.row(i));
    }
    Ok(IngestedRois {
        features: Tensor::new(vec![kept.len(), d], data)?,
        kept,
    })
}

pub fn ingest_roi_features(
    path: &Path,
    score_threshold: f64,
    max_rois: usize,
) -> Result<IngestedRois> {
    let mut r = BufReader::new(File::open(path)?);
    let features = Tensor::read_from(&mut r)?;
    let scores = Tensor::read_from(&mut r)?;
    if scores.rank() != 1 {
        return Err(Error::MalformedFile("score record must be rank 1".into()));
    }
    select_rois(&features, scores.data(), score_threshold, max_rois)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feats(k: usize) -> Tensor {
        Tensor::new(vec![k, 2], (0..2 * k).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn caps_at_one_hundred() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("det.bin");
        write_detections(&p, &feats(150), &[0.9; 150]).unwrap();
        let got = ingest_roi_features(&p, DEFAULT_SCORE_THRESHOLD, DEFAULT_MAX_ROIS).unwrap();
        assert_eq!(got.features.shape(), &[100, 2]);
        assert_eq!(got.kept, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn all_below_threshold_is_empty() {
        let r = select_rois(&feats(3), &[0.4, 0.4, 0.4], 0.5, 100);
        assert!(matches!(r, Err(Error::EmptyAfterFilter)));
        // the threshold is strict
        let r = select_rois(&feats(2), &[0.5, 0.5], 0.5, 100);
        assert!(matches!(r, Err(Error::EmptyAfterFilter)));
    }

    #[test]
    fn filters_and_orders_by_score() {
        let got = select_rois(&feats(3), &[0.9, 0.3, 0.7], 0.5, 100).unwrap();
        assert_eq!(got.kept, vec![0, 2]);
        assert_eq!(got.features.data(), &[0.0, 1.0, 4.0, 5.0]);
        let got = select_rois(&feats(3), &[0.6, 0.3, 0.95], 0.5, 100).unwrap();
        assert_eq!(got.kept, vec![2, 0]);
    }

    #[test]
    fn malformed_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.bin");
        std::fs::write(&p, b"CAVLTNSR\x01\x00").unwrap();
        assert!(matches!(
            ingest_roi_features(&p, 0.5, 100),
            Err(Error::MalformedFile(_))
        ));
    }
}
