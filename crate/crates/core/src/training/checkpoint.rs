//! Checkpoint file layout (little-endian):
//!
//! ```text
//! "CAVLCKPT"  u32 version  u64 meta_len  meta JSON  u64 seed
//! u32 n_tensors  { u32 name_len  name  u8 trainable  tensor record } * n
//! u8 has_optim  [ u64 step  f64 beta1  f64 beta2  f64 eps
//!                 u32 n  { u32 name_len  name  m record  v record } * n ]
//! ```
//! Tensor records use the `CAVLTNSR` format.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Architecture, Model, ModelConfig, ModelParams};
use crate::tensor::{read_exact, read_u32, read_u64, Tensor};
use crate::training::adam::{AdamConfig, Moments, OptimState};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CAVLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub arch: Architecture,
    /// Free-form run description (the resolved run configuration).
    #[serde(default)]
    pub run: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub seed: u64,
    pub params: ModelParams,
    pub optim: Option<OptimState>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, optim: Option<OptimState>, seed: u64, run: serde_json::Value) -> Self {
        let mut params = model.params.clone();
        for (_, t) in params.iter_mut() {
            t.grad = None;
        }
        Checkpoint {
            meta: CheckpointMeta {
                model: model.config.clone(),
                arch: model.arch,
                run,
            },
            seed,
            params,
            optim,
        }
    }

    pub fn into_model(self) -> Result<Model> {
        Model::from_parts(self.meta.model, self.params, self.meta.arch)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let meta = serde_json::to_vec(&self.meta)?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, t) in self.params.iter() {
            write_name(w, name)?;
            w.write_all(&[t.requires_grad as u8])?;
            t.write_to(w)?;
        }
        match &self.optim {
            None => w.write_all(&[0])?,
            Some(o) => {
                w.write_all(&[1])?;
                w.write_all(&o.step.to_le_bytes())?;
                for h in [o.hyper.beta1, o.hyper.beta2, o.hyper.eps] {
                    w.write_all(&h.to_le_bytes())?;
                }
                w.write_all(&(o.moments.len() as u32).to_le_bytes())?;
                for (name, mo) in &o.moments {
                    let shape = self.params.get(name)?.shape().to_vec();
                    write_name(w, name)?;
                    Tensor::new(shape.clone(), mo.m.clone())?.write_to(w)?;
                    Tensor::new(shape, mo.v.clone())?.write_to(w)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(r, &mut magic, "checkpoint magic")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::MalformedFile("not a checkpoint (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let meta_len = read_u64(r)? as usize;
        if meta_len > 1 << 26 {
            return Err(Error::MalformedFile(format!("config blob of {meta_len} bytes")));
        }
        let mut meta = vec![0u8; meta_len];
        read_exact(r, &mut meta, "config blob")?;
        let meta: CheckpointMeta = serde_json::from_slice(&meta)
            .map_err(|e| Error::MalformedFile(format!("config blob: {e}")))?;
        let seed = read_u64(r)?;

        let n = read_u32(r)?;
        let mut params = ModelParams::new();
        for _ in 0..n {
            let name = read_name(r)?;
            let mut flag = [0u8; 1];
            read_exact(r, &mut flag, "trainable flag")?;
            let t = Tensor::read_from(r)?.with_requires_grad(flag[0] == 1);
            if params.contains(&name) {
                return Err(Error::MalformedFile(format!("duplicate tensor {name}")));
            }
            params.insert(name, t);
        }

        let mut flag = [0u8; 1];
        read_exact(r, &mut flag, "optimizer flag")?;
        let optim = match flag[0] {
            0 => None,
            1 => {
                let step = read_u64(r)?;
                let mut h = [0f64; 3];
                for v in h.iter_mut() {
                    *v = f64::from_bits(read_u64(r)?);
                }
                let n = read_u32(r)?;
                let mut moments = BTreeMap::new();
                for _ in 0..n {
                    let name = read_name(r)?;
                    let shape = params
                        .get(&name)
                        .map_err(|_| Error::MalformedFile(format!("optimizer state for unknown tensor {name}")))?
                        .shape()
                        .to_vec();
                    let m = Tensor::read_from(r)?;
                    let v = Tensor::read_from(r)?;
                    if m.shape() != shape.as_slice() || v.shape() != shape.as_slice() {
                        return Err(Error::MalformedFile(format!("moment shape mismatch for {name}")));
                    }
                    moments.insert(
                        name,
                        Moments {
                            m: m.into_data(),
                            v: v.into_data(),
                        },
                    );
                }
                Some(OptimState {
                    step,
                    hyper: AdamConfig {
                        beta1: h[0],
                        beta2: h[1],
                        eps: h[2],
                    },
                    moments,
                })
            }
            other => return Err(Error::MalformedFile(format!("optimizer flag {other}"))),
        };
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::MalformedFile("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint {
            meta,
            seed,
            params,
            optim,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }
}

fn write_name<W: Write>(w: &mut W, name: &str) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    Ok(())
}

fn read_name<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > 4096 {
        return Err(Error::MalformedFile(format!("tensor name of {len} bytes")));
    }
    let mut b = vec![0u8; len];
    read_exact(r, &mut b, "tensor name")?;
    String::from_utf8(b).map_err(|_| Error::MalformedFile("tensor name is not UTF-8".into()))
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    ckpt.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::read_from(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{domain, stream};

    fn ckpt() -> Checkpoint {
        let cfg = ModelConfig {
            vocab_size: 20,
            hidden: 4,
            layers: 1,
            heads: 2,
            ffn_dim: 8,
            max_text_len: 6,
            max_rois: 3,
            roi_feature_dim: 2,
            ..ModelConfig::default()
        };
        let mut m = Model::new(cfg, &mut stream(1, domain::INIT, 0)).unwrap();
        m.params.set_trainable("emb.tok", false).unwrap();
        let mut o = OptimState::new(&m.params, AdamConfig::default());
        o.step = 3;
        o.moments.get_mut("vis.proj.w").unwrap().m[1] = 0.25;
        Checkpoint::from_model(&m, Some(o), 42, serde_json::json!({"note": "x"}))
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        let c = ckpt();
        save_checkpoint(&c, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back, c);
        let q = dir.path().join("b.ckpt");
        save_checkpoint(&back, &q).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
        assert!(!back.optim.unwrap().moments.contains_key("emb.tok"));
    }

    #[test]
    fn truncated_is_malformed() {
        let bytes = ckpt().to_bytes().unwrap();
        for cut in [4, 20, bytes.len() / 2, bytes.len() - 1] {
            let r = Checkpoint::read_from(&mut &bytes[..cut]);
            assert!(matches!(r, Err(Error::MalformedFile(_))), "cut {cut}");
        }
    }

    #[test]
    fn newer_version_rejected() {
        let mut bytes = ckpt().to_bytes().unwrap();
        bytes[8..12].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
        assert!(matches!(
            Checkpoint::read_from(&mut bytes.as_slice()),
            Err(Error::CheckpointVersionMismatch { found: 2, expected: 1 })
        ));
    }
}
