//! On-disk corpus: `{split}.jsonl` for tokens and metadata, `{split}.rois`
//! for ROI features.
//!
//! `.rois` layout (little-endian): `u64` sample count `n`, then `n` `u64`
//! absolute byte offsets, then one tensor record per sample. Each JSON line
//! carries `pair_file_offset`, the offset of its ROI record.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Cursor, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::synth::{MultimodalSample, SyntheticCorpus};
use crate::error::{Error, Result};
use crate::tensor::{read_u64, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: u64,
    tokens: Vec<usize>,
    latent_class: usize,
    attribute: usize,
    pair_file_offset: u64,
}

pub fn split_paths(dir: &Path, split: &str) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{split}.jsonl")),
        dir.join(format!("{split}.rois")),
    )
}

pub fn write_split(dir: &Path, split: &str, samples: &[MultimodalSample]) -> Result<()> {
    let (jsonl, rois) = split_paths(dir, split);
    let records: Vec<Vec<u8>> = samples.iter().map(|s| s.rois.to_bytes()).collect();
    let header = 8 * (1 + samples.len() as u64);
    let mut offsets = Vec::with_capacity(samples.len());
    let mut at = header;
    for r in &records {
        offsets.push(at);
        at += r.len() as u64;
    }

    let mut w = BufWriter::new(File::create(&rois)?);
    w.write_all(&(samples.len() as u64).to_le_bytes())?;
    for o in &offsets {
        w.write_all(&o.to_le_bytes())?;
    }
    for r in &records {
        w.write_all(r)?;
    }
    w.flush()?;

    let mut w = BufWriter::new(File::create(&jsonl)?);
    for (s, &offset) in samples.iter().zip(&offsets) {
        let rec = Record {
            id: s.id,
            tokens: s.tokens.clone(),
            latent_class: s.latent_class,
            attribute: s.attribute,
            pair_file_offset: offset,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_split(dir: &Path, split: &str) -> Result<Vec<MultimodalSample>> {
    let (jsonl, rois) = split_paths(dir, split);
    let mut bytes = Vec::new();
    File::open(&rois)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor::new(bytes.as_slice());
    let n = read_u64(&mut cur)? as usize;
    if n.saturating_mul(8) > bytes.len() {
        return Err(Error::MalformedFile(format!("ROI index claims {n} entries")));
    }
    let offsets = (0..n)
        .map(|_| read_u64(&mut cur))
        .collect::<Result<Vec<_>>>()?;

    let mut samples = Vec::with_capacity(n);
    for (line_no, line) in BufReader::new(File::open(&jsonl)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| Error::MalformedFile(format!("{}:{}: {e}", jsonl.display(), line_no + 1)))?;
        if !offsets.contains(&rec.pair_file_offset) {
            return Err(Error::MalformedFile(format!(
                "sample {} points at offset {} missing from the ROI index",
                rec.id, rec.pair_file_offset
            )));
        }
        cur.seek(SeekFrom::Start(rec.pair_file_offset))?;
        let rois = Tensor::read_from(&mut cur)?;
        if rois.rank() != 2 {
            return Err(Error::MalformedFile(format!("ROI record of sample {} is not rank 2", rec.id)));
        }
        if rec.tokens.len() < 2 || rec.tokens.len() % 2 != 0 {
            return Err(Error::MalformedFile(format!(
                "sample {} needs an even number of tokens",
                rec.id
            )));
        }
        samples.push(MultimodalSample {
            id: rec.id,
            tokens: rec.tokens,
            rois,
            caption_is_match: true,
            nsp_is_consecutive: true,
            latent_class: rec.latent_class,
            attribute: rec.attribute,
        });
    }
    if samples.len() != n {
        return Err(Error::MalformedFile(format!(
            "{} JSON lines but {n} ROI records",
            samples.len()
        )));
    }
    Ok(samples)
}

pub fn write_corpus(dir: &Path, corpus: &SyntheticCorpus) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_split(dir, "train", &corpus.train)?;
    write_split(dir, "test", &corpus.test)
}

pub fn read_corpus(dir: &Path) -> Result<SyntheticCorpus> {
    Ok(SyntheticCorpus {
        train: read_split(dir, "train")?,
        test: read_split(dir, "test")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_synthetic_corpus, GeneratorSpec};
    use crate::model::ModelConfig;

    #[test]
    fn round_trip_is_exact() {
        let spec = GeneratorSpec {
            n_train: 10,
            n_test: 3,
            ..GeneratorSpec::default()
        };
        let c = generate_synthetic_corpus(8, &spec, &ModelConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), &c).unwrap();
        let back = read_corpus(dir.path()).unwrap();
        assert_eq!(back.train, c.train);
        assert_eq!(back.test, c.test);

        let first = std::fs::read(dir.path().join("train.rois")).unwrap();
        write_corpus(dir.path(), &back).unwrap();
        assert_eq!(std::fs::read(dir.path().join("train.rois")).unwrap(), first);
    }

    #[test]
    fn truncated_rois_rejected() {
        let spec = GeneratorSpec {
            n_train: 4,
            n_test: 2,
            ..GeneratorSpec::default()
        };
        let c = generate_synthetic_corpus(8, &spec, &ModelConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), &c).unwrap();
        let p = dir.path().join("train.rois");
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(read_split(dir.path(), "train"), Err(Error::MalformedFile(_))));
    }
}
