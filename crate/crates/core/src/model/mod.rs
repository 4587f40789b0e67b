//! Single-stream encoder over `[CLS] text [SEP] visual` sequences.
//!
//! Linguistic tokens are the sum of token, segment and position embeddings;
//! visual tokens are a linear projection of ROI features plus segment and
//! ROI-order position embeddings. Both spans run through one post-norm
//! transformer stack with a padding key mask. Pooled modality embeddings
//! `E'` (text) and `F'` (visual) are L2-normalised means of the final states
//! over content positions.

mod config;
mod params;

pub use config::{ModelConfig, MAX_ROIS_CAP};
pub use params::ModelParams;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::vocab::{CLS_ID, PAD_ID, SEP_ID};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TEXT_SEGMENT: usize = 0;
pub const VISUAL_SEGMENT: usize = 1;

/// Fine-tuning head target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskSpec {
    /// Rank candidate images for a caption by pooled cosine similarity.
    Retrieval,
    /// Predict one of `classes` labels from the fused pooled representation.
    Classification { classes: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdapterKind {
    None,
    AdapterI,
    AdapterII { bottleneck: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub adapter: AdapterKind,
    pub task: Option<TaskSpec>,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            adapter: AdapterKind::None,
            task: None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AdapterIdx {
    pub down_w: usize,
    pub down_b: usize,
    pub up_w: usize,
    pub up_b: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerIdx {
    pub q: (usize, usize),
    pub k: (usize, usize),
    pub v: (usize, usize),
    pub o: (usize, usize),
    pub ffn1: (usize, usize),
    pub ffn2: (usize, usize),
    pub ln1: (usize, usize),
    pub ln2: (usize, usize),
    pub adapters: Option<(AdapterIdx, AdapterIdx)>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct PretrainHeadIdx {
    pub mlm: (usize, usize),
    pub nsp: (usize, usize),
    pub caption: (usize, usize),
}

#[derive(Debug, Clone)]
pub(crate) struct AdapterOneIdx {
    pub shortcut: LayerIdx,
    pub out1: (usize, usize),
    pub out2: (usize, usize),
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub tok: usize,
    pub seg: usize,
    pub pos_t: usize,
    pub proj: (usize, usize),
    pub pos_v: usize,
    pub layers: Vec<LayerIdx>,
    pub heads: Option<PretrainHeadIdx>,
    pub adapter1: Option<AdapterOneIdx>,
    pub task: Option<(usize, usize)>,
}

fn pair(p: &ModelParams, prefix: &str, a: &str, b: &str) -> Result<(usize, usize)> {
    Ok((p.idx(&format!("{prefix}.{a}"))?, p.idx(&format!("{prefix}.{b}"))?))
}

fn resolve_layer(p: &ModelParams, prefix: &str, with_adapters: bool) -> Result<LayerIdx> {
    let adapter = |which: &str| -> Result<AdapterIdx> {
        let base = format!("{prefix}.adapter.{which}");
        Ok(AdapterIdx {
            down_w: p.idx(&format!("{base}.down.w"))?,
            down_b: p.idx(&format!("{base}.down.b"))?,
            up_w: p.idx(&format!("{base}.up.w"))?,
            up_b: p.idx(&format!("{base}.up.b"))?,
        })
    };
    Ok(LayerIdx {
        q: pair(p, &format!("{prefix}.attn.q"), "w", "b")?,
        k: pair(p, &format!("{prefix}.attn.k"), "w", "b")?,
        v: pair(p, &format!("{prefix}.attn.v"), "w", "b")?,
        o: pair(p, &format!("{prefix}.attn.o"), "w", "b")?,
        ffn1: pair(p, &format!("{prefix}.ffn.1"), "w", "b")?,
        ffn2: pair(p, &format!("{prefix}.ffn.2"), "w", "b")?,
        ln1: pair(p, &format!("{prefix}.ln1"), "g", "b")?,
        ln2: pair(p, &format!("{prefix}.ln2"), "g", "b")?,
        adapters: if with_adapters {
            Some((adapter("attn")?, adapter("ffn")?))
        } else {
            None
        },
    })
}

impl Layout {
    fn resolve(p: &ModelParams, config: &ModelConfig, arch: &Architecture) -> Result<Self> {
        let with_adapters = matches!(arch.adapter, AdapterKind::AdapterII { .. });
        let layers = (0..config.layers)
            .map(|i| resolve_layer(p, &format!("layer.{i}"), with_adapters))
            .collect::<Result<Vec<_>>>()?;
        let heads = if p.contains("head.mlm.w") {
            Some(PretrainHeadIdx {
                mlm: pair(p, "head.mlm", "w", "b")?,
                nsp: pair(p, "head.nsp", "w", "b")?,
                caption: pair(p, "head.caption", "w", "b")?,
            })
        } else {
            None
        };
        let adapter1 = if arch.adapter == AdapterKind::AdapterI {
            Some(AdapterOneIdx {
                shortcut: resolve_layer(p, "adapter1.shortcut", false)?,
                out1: pair(p, "adapter1.out.1", "w", "b")?,
                out2: pair(p, "adapter1.out.2", "w", "b")?,
            })
        } else {
            None
        };
        let task = if p.contains("head.task.w") {
            Some(pair(p, "head.task", "w", "b")?)
        } else {
            None
        };
        Ok(Layout {
            tok: p.idx("emb.tok")?,
            seg: p.idx("emb.seg")?,
            pos_t: p.idx("emb.pos_t")?,
            proj: pair(p, "vis.proj", "w", "b")?,
            pos_v: p.idx("vis.pos_v")?,
            layers,
            heads,
            adapter1,
            task,
        })
    }
}

/// Parameters bound as leaves on one tape, indexed like [`ModelParams`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, param_index: usize) -> Var {
        self.vars[param_index]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// One sample laid out for the encoder. `tokens` is the text span between
/// `[CLS]` and the closing `[SEP]`; `[PAD]` entries are masked out. `rois`
/// holds `roi_keep.len()` rows of ROI features, padded rows masked out.
#[derive(Debug, Clone, Copy)]
pub struct SampleView<'s> {
    pub tokens: &'s [usize],
    pub rois: &'s [f64],
    pub roi_keep: &'s [bool],
}

/// Encoder output for one sample.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// Final states `[T x D]`.
    pub states: Var,
    /// Fused input embeddings `[T x D]`.
    pub inputs: Var,
    /// Row of the `[CLS]` token.
    pub cls_row: usize,
    /// Rows pooled into `E'`: text content tokens.
    pub text_rows: Vec<usize>,
    /// Rows pooled into `F'`: unpadded ROI tokens.
    pub visual_rows: Vec<usize>,
    /// Key mask used by attention.
    pub keep: Vec<bool>,
    /// Offset of the first text token (after `[CLS]`).
    pub text_offset: usize,
}

/// Pooled, L2-normalised modality embeddings for one sample, `[1 x D]` each.
#[derive(Debug, Clone, Copy)]
pub struct Pooled {
    pub text: Var,
    pub visual: Var,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub arch: Architecture,
    layout: Layout,
}

pub(crate) fn init_linear<R: Rng + ?Sized>(
    p: &mut ModelParams,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    std: f64,
    rng: &mut R,
) {
    p.insert(format!("{prefix}.w"), Tensor::randn(&[fan_in, fan_out], std, rng));
    p.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
}

/// Inserts one transformer layer's parameters under `prefix`.
pub(crate) fn init_layer<R: Rng + ?Sized>(
    p: &mut ModelParams,
    prefix: &str,
    config: &ModelConfig,
    rng: &mut R,
) {
    let (d, f, s) = (config.hidden, config.ffn_dim, config.init_std);
    for m in ["q", "k", "v", "o"] {
        init_linear(p, &format!("{prefix}.attn.{m}"), d, d, s, rng);
    }
    init_linear(p, &format!("{prefix}.ffn.1"), d, f, s, rng);
    init_linear(p, &format!("{prefix}.ffn.2"), f, d, s, rng);
    for ln in ["ln1", "ln2"] {
        p.insert(format!("{prefix}.{ln}.g"), Tensor::ones(&[d]));
        p.insert(format!("{prefix}.{ln}.b"), Tensor::zeros(&[d]));
    }
}

impl Model {
    /// Backbone plus MLM, NSP and caption-match heads, all trainable.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d, s) = (config.hidden, config.init_std);
        let mut p = ModelParams::new();
        p.insert("emb.tok", Tensor::randn(&[config.vocab_size, d], s, rng));
        p.insert("emb.seg", Tensor::randn(&[config.segment_count, d], s, rng));
        p.insert("emb.pos_t", Tensor::randn(&[config.max_text_len, d], s, rng));
        init_linear(&mut p, "vis.proj", config.roi_feature_dim, d, s, rng);
        p.insert("vis.pos_v", Tensor::randn(&[config.max_rois, d], s, rng));
        for i in 0..config.layers {
            init_layer(&mut p, &format!("layer.{i}"), &config, rng);
        }
        init_linear(&mut p, "head.mlm", d, config.vocab_size, s, rng);
        init_linear(&mut p, "head.nsp", d, 2, s, rng);
        init_linear(&mut p, "head.caption", d, 2, s, rng);
        for (_, t) in p.iter_mut() {
            t.requires_grad = true;
        }
        Self::from_parts(config, p, Architecture::default())
    }

    pub fn from_parts(config: ModelConfig, params: ModelParams, arch: Architecture) -> Result<Self> {
        config.validate()?;
        let layout = Layout::resolve(&params, &config, &arch)?;
        Ok(Model {
            config,
            params,
            arch,
            layout,
        })
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn has_pretrain_heads(&self) -> bool {
        self.layout.heads.is_some()
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(_, t)| tape.leaf(t))
            .collect();
        Bound { vars }
    }

    /// Runs the backbone. `use_adapters = false` skips Adapter II inserts,
    /// reproducing the pre-trained forward pass.
    pub fn encode(
        &self,
        tape: &mut Tape<'_>,
        b: &Bound,
        sample: SampleView<'_>,
        use_adapters: bool,
    ) -> Result<Encoded> {
        let cfg = &self.config;
        let nt = sample.tokens.len();
        let kv = sample.roi_keep.len();
        let text_side = nt + 2;
        if text_side > cfg.max_text_len {
            return Err(Error::LengthMismatch {
                what: "text span (with [CLS]/[SEP]) vs max_text_len",
                left: text_side,
                right: cfg.max_text_len,
            });
        }
        if sample.rois.len() != kv * cfg.roi_feature_dim {
            return Err(Error::LengthMismatch {
                what: "ROI feature values vs rows * roi_feature_dim",
                left: sample.rois.len(),
                right: kv * cfg.roi_feature_dim,
            });
        }
        if kv == 0 {
            return Err(Error::InvalidTensor("sample has no ROI rows".into()));
        }

        // Trailing pads go after the closing [SEP] so its position id does
        // not depend on the padded length.
        let content = sample
            .tokens
            .iter()
            .rposition(|&t| t != PAD_ID)
            .map_or(0, |i| i + 1);
        let mut ids = Vec::with_capacity(text_side);
        ids.push(CLS_ID);
        ids.extend_from_slice(&sample.tokens[..content]);
        ids.push(SEP_ID);
        ids.extend_from_slice(&sample.tokens[content..]);
        let text_pos: Vec<usize> = (0..text_side).collect();
        let text_seg = vec![TEXT_SEGMENT; text_side];
        let lay = &self.layout;
        let text = embed_linguistic(
            tape,
            b.var(lay.tok),
            b.var(lay.seg),
            b.var(lay.pos_t),
            &ids,
            &text_seg,
            &text_pos,
        )?;

        let rois = tape.constant(&[kv, cfg.roi_feature_dim], sample.rois.to_vec())?;
        let vis_pos: Vec<usize> = (0..kv).collect();
        let vis_seg = vec![VISUAL_SEGMENT; kv];
        let visual = embed_visual(
            tape,
            VisualTables {
                proj_w: b.var(lay.proj.0),
                proj_b: b.var(lay.proj.1),
                segment: b.var(lay.seg),
                position: b.var(lay.pos_v),
                max_rois: cfg.max_rois,
            },
            rois,
            &vis_seg,
            &vis_pos,
        )?;
        let inputs = tape.concat_rows(&[text, visual])?;

        let mut keep: Vec<bool> = ids.iter().map(|&t| t != PAD_ID).collect();
        keep.extend_from_slice(sample.roi_keep);

        let text_rows: Vec<usize> = sample
            .tokens
            .iter()
            .enumerate()
            .filter(|(_, &t)| t != PAD_ID && t != SEP_ID && t != CLS_ID)
            .map(|(i, _)| i + 1)
            .collect();
        let visual_rows: Vec<usize> = sample
            .roi_keep
            .iter()
            .enumerate()
            .filter(|(_, &k)| k)
            .map(|(i, _)| text_side + i)
            .collect();
        if text_rows.is_empty() || visual_rows.is_empty() {
            return Err(Error::InvalidTensor(
                "sample needs at least one text token and one ROI".into(),
            ));
        }

        let mut x = inputs;
        for layer in &lay.layers {
            x = self.layer_forward(tape, b, x, layer, &keep, use_adapters)?;
        }
        Ok(Encoded {
            states: x,
            inputs,
            cls_row: 0,
            text_rows,
            visual_rows,
            keep,
            text_offset: 1,
        })
    }

    /// Adapter I shortcut block over the fused input embeddings.
    pub fn shortcut(&self, tape: &mut Tape<'_>, b: &Bound, enc: &Encoded) -> Result<Var> {
        let a1 = self
            .layout
            .adapter1
            .as_ref()
            .ok_or_else(|| Error::MissingParameter("adapter1.shortcut".into()))?;
        self.layer_forward(tape, b, enc.inputs, &a1.shortcut, &enc.keep, false)
    }

    /// Adapter I output block: `linear(2D->D) -> GELU -> linear(D->task)` on
    /// concatenated backbone and shortcut pools of the given rows.
    pub fn adapter1_output(
        &self,
        tape: &mut Tape<'_>,
        b: &Bound,
        backbone: Var,
        shortcut: Var,
        rows: &[usize],
    ) -> Result<Var> {
        let a1 = self
            .layout
            .adapter1
            .as_ref()
            .ok_or_else(|| Error::MissingParameter("adapter1.out".into()))?;
        let pb = tape.mean_rows(backbone, rows)?;
        let ps = tape.mean_rows(shortcut, rows)?;
        let cat = tape.concat_cols(&[pb, ps])?;
        let h = tape.linear(cat, b.var(a1.out1.0), b.var(a1.out1.1))?;
        let h = tape.gelu(h);
        tape.linear(h, b.var(a1.out2.0), b.var(a1.out2.1))
    }

    /// L2-normalised mean pools over text and visual rows.
    pub fn pool(&self, tape: &mut Tape<'_>, enc: &Encoded) -> Result<Pooled> {
        let t = tape.mean_rows(enc.states, &enc.text_rows)?;
        let v = tape.mean_rows(enc.states, &enc.visual_rows)?;
        Ok(Pooled {
            text: tape.l2_normalize_rows(t),
            visual: tape.l2_normalize_rows(v),
        })
    }

    fn layer_forward(
        &self,
        tape: &mut Tape<'_>,
        b: &Bound,
        x: Var,
        l: &LayerIdx,
        keep: &[bool],
        use_adapters: bool,
    ) -> Result<Var> {
        let cfg = &self.config;
        let eps = cfg.layer_norm_eps;
        let adapters = if use_adapters { l.adapters } else { None };

        let mut a = self.attention(tape, b, x, l, keep)?;
        if let Some((ad, _)) = adapters {
            a = bottleneck(tape, b, a, ad)?;
        }
        let r = tape.add(x, a)?;
        let h = tape.layer_norm(r, b.var(l.ln1.0), b.var(l.ln1.1), eps)?;

        let f = tape.linear(h, b.var(l.ffn1.0), b.var(l.ffn1.1))?;
        let f = tape.gelu(f);
        let mut f = tape.linear(f, b.var(l.ffn2.0), b.var(l.ffn2.1))?;
        if let Some((_, ad)) = adapters {
            f = bottleneck(tape, b, f, ad)?;
        }
        let r = tape.add(h, f)?;
        tape.layer_norm(r, b.var(l.ln2.0), b.var(l.ln2.1), eps)
    }

    fn attention(
        &self,
        tape: &mut Tape<'_>,
        b: &Bound,
        x: Var,
        l: &LayerIdx,
        keep: &[bool],
    ) -> Result<Var> {
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let q = tape.linear(x, b.var(l.q.0), b.var(l.q.1))?;
        let k = tape.linear(x, b.var(l.k.0), b.var(l.k.1))?;
        let v = tape.linear(x, b.var(l.v.0), b.var(l.v.1))?;
        let mut heads = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let s = tape.matmul_nt(qh, kh)?;
            let s = tape.scale(s, scale);
            let p = tape.softmax_masked(s, keep)?;
            heads.push(tape.matmul(p, vh)?);
        }
        let o = tape.concat_cols(&heads)?;
        tape.linear(o, b.var(l.o.0), b.var(l.o.1))
    }
}

/// `h + up(gelu(down(h)))`
fn bottleneck(tape: &mut Tape<'_>, b: &Bound, h: Var, ad: AdapterIdx) -> Result<Var> {
    let z = tape.linear(h, b.var(ad.down_w), b.var(ad.down_b))?;
    let z = tape.gelu(z);
    let z = tape.linear(z, b.var(ad.up_w), b.var(ad.up_b))?;
    tape.add(h, z)
}

/// `e_n = e^t[token_n] + e^s[segment_n] + e^p[position_n]`
pub fn embed_linguistic(
    tape: &mut Tape<'_>,
    token_table: Var,
    segment_table: Var,
    position_table: Var,
    tokens: &[usize],
    segments: &[usize],
    positions: &[usize],
) -> Result<Var> {
    if tokens.len() != segments.len() || tokens.len() != positions.len() {
        return Err(Error::LengthMismatch {
            what: "tokens/segments/positions",
            left: tokens.len(),
            right: if tokens.len() != segments.len() {
                segments.len()
            } else {
                positions.len()
            },
        });
    }
    let t = tape.gather(token_table, tokens)?;
    let s = tape.gather(segment_table, segments)?;
    let p = tape.gather(position_table, positions)?;
    let ts = tape.add(t, s)?;
    tape.add(ts, p)
}

#[derive(Debug, Clone, Copy)]
pub struct VisualTables {
    pub proj_w: Var,
    pub proj_b: Var,
    pub segment: Var,
    pub position: Var,
    pub max_rois: usize,
}

/// `f_k = proj(roi_k) + f^s[segment_k] + f^p[position_k]`
pub fn embed_visual(
    tape: &mut Tape<'_>,
    tables: VisualTables,
    rois: Var,
    segments: &[usize],
    positions: &[usize],
) -> Result<Var> {
    let k = tape.shape(rois)[0];
    if k > tables.max_rois {
        return Err(Error::TooManyRois {
            count: k,
            max: tables.max_rois,
        });
    }
    if segments.len() != k || positions.len() != k {
        return Err(Error::LengthMismatch {
            what: "ROI rows vs segment/position ids",
            left: k,
            right: segments.len().min(positions.len()),
        });
    }
    let f = tape.linear(rois, tables.proj_w, tables.proj_b)?;
    let s = tape.gather(tables.segment, segments)?;
    let p = tape.gather(tables.position, positions)?;
    let fs = tape.add(f, s)?;
    tape.add(fs, p)
}

#[cfg(test)]
mod tests;
