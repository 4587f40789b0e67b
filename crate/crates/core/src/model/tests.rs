use approx::assert_abs_diff_eq;

use super::*;
use crate::data::vocab::FIRST_REGULAR_ID;
use crate::rng::{domain, stream};

fn small_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 40,
        hidden: 8,
        layers: 2,
        heads: 2,
        ffn_dim: 16,
        max_text_len: 12,
        max_rois: 6,
        roi_feature_dim: 4,
        ..ModelConfig::default()
    }
}

fn model() -> Model {
    Model::new(small_config(), &mut stream(3, domain::INIT, 0)).unwrap()
}

fn pooled(m: &Model, tokens: &[usize], rois: &[f64], keep: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let mut tape = Tape::new();
    let b = m.bind(&mut tape);
    let enc = m
        .encode(
            &mut tape,
            &b,
            SampleView {
                tokens,
                rois,
                roi_keep: keep,
            },
            true,
        )
        .unwrap();
    let p = m.pool(&mut tape, &enc).unwrap();
    (tape.value(p.text).to_vec(), tape.value(p.visual).to_vec())
}

fn rois(k: usize, seed: u64) -> Vec<f64> {
    Tensor::randn(&[k, 4], 1.0, &mut stream(seed, domain::EVAL, 0)).into_data()
}

#[test]
fn zero_tables_embed_to_zero() {
    let mut tape = Tape::new();
    let t = tape.constant(&[5, 3], vec![0.0; 15]).unwrap();
    let s = tape.constant(&[2, 3], vec![0.0; 6]).unwrap();
    let p = tape.constant(&[4, 3], vec![0.0; 12]).unwrap();
    let e = embed_linguistic(&mut tape, t, s, p, &[1, 2, 4], &[0, 0, 1], &[0, 1, 2]).unwrap();
    assert!(tape.value(e).iter().all(|&v| v == 0.0));
}

#[test]
fn linguistic_embedding_is_a_sum() {
    let mut tape = Tape::new();
    let t = tape.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let s = tape.constant(&[2, 2], vec![10.0, 20.0, 30.0, 40.0]).unwrap();
    let p = tape.constant(&[2, 2], vec![100.0, 200.0, 300.0, 400.0]).unwrap();
    let e = embed_linguistic(&mut tape, t, s, p, &[1, 0], &[0, 1], &[1, 0]).unwrap();
    assert_eq!(tape.value(e), &[313.0, 424.0, 131.0, 242.0]);
    assert!(matches!(
        embed_linguistic(&mut tape, t, s, p, &[1, 0], &[0], &[1, 0]),
        Err(Error::LengthMismatch { .. })
    ));
    assert!(matches!(
        embed_linguistic(&mut tape, t, s, p, &[2], &[0], &[0]),
        Err(Error::IndexOutOfRange { .. })
    ));
}

#[test]
fn visual_identity_projection() {
    let mut tape = Tape::new();
    let w = tape.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let b = tape.constant(&[2], vec![0.0; 2]).unwrap();
    let seg = tape.constant(&[2, 2], vec![0.0; 4]).unwrap();
    let pos = tape.constant(&[3, 2], vec![0.0; 6]).unwrap();
    let tables = VisualTables {
        proj_w: w,
        proj_b: b,
        segment: seg,
        position: pos,
        max_rois: 3,
    };
    let r = tape.constant(&[2, 2], vec![0.5, -1.0, 2.0, 3.0]).unwrap();
    let out = embed_visual(&mut tape, tables, r, &[1, 1], &[0, 1]).unwrap();
    assert_eq!(tape.value(out), &[0.5, -1.0, 2.0, 3.0]);
    let r4 = tape.constant(&[4, 2], vec![0.0; 8]).unwrap();
    assert!(matches!(
        embed_visual(&mut tape, tables, r4, &[1; 4], &[0, 1, 2, 3]),
        Err(Error::TooManyRois { count: 4, max: 3 })
    ));
}

#[test]
fn too_many_rois_through_encoder() {
    let m = model();
    let keep = vec![true; 7];
    let mut tape = Tape::new();
    let b = m.bind(&mut tape);
    let r = m.encode(
        &mut tape,
        &b,
        SampleView {
            tokens: &[5, 6],
            rois: &rois(7, 1),
            roi_keep: &keep,
        },
        true,
    );
    assert!(matches!(r, Err(Error::TooManyRois { count: 7, max: 6 })));
}

#[test]
fn zero_weight_layer_is_double_layer_norm() {
    let mut cfg = small_config();
    cfg.layers = 1;
    let mut m = Model::new(cfg, &mut stream(1, domain::INIT, 0)).unwrap();
    for (name, t) in m.params.iter_mut() {
        if name.starts_with("layer.0.attn") || name.starts_with("layer.0.ffn") {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let r = rois(2, 2);
    let keep = [true, true];
    let mut tape = Tape::new();
    let b = m.bind(&mut tape);
    let enc = m
        .encode(
            &mut tape,
            &b,
            SampleView {
                tokens: &[5, 6, 7],
                rois: &r,
                roi_keep: &keep,
            },
            false,
        )
        .unwrap();
    let x = tape.value(enc.inputs).to_vec();
    let out = tape.value(enc.states).to_vec();
    let ln = |row: &[f64]| -> Vec<f64> {
        let n = row.len() as f64;
        let mu = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
        row.iter().map(|v| (v - mu) / (var + 1e-5).sqrt()).collect()
    };
    for (xr, yr) in x.chunks(8).zip(out.chunks(8)) {
        let expect = ln(&ln(xr));
        for (a, b) in expect.iter().zip(yr) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }
}

#[test]
fn pooled_embeddings_unit_norm_and_deterministic() {
    let m = model();
    let r = rois(3, 5);
    let keep = [true; 3];
    let (e1, f1) = pooled(&m, &[5, 6, 2, 9], &r, &keep);
    let (e2, f2) = pooled(&m, &[5, 6, 2, 9], &r, &keep);
    assert_eq!(e1, e2);
    assert_eq!(f1, f2);
    for v in [&e1, &f1] {
        let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert_abs_diff_eq!(n, 1.0, epsilon = 1e-9);
    }
}

#[test]
fn padding_invariance() {
    let m = model();
    let r = rois(3, 6);
    let (e, f) = pooled(&m, &[5, 6, 2, 9], &r, &[true; 3]);
    let mut padded_rois = r.clone();
    padded_rois.extend(rois(2, 7));
    let (ep, fp) = pooled(&m, &[5, 6, 2, 9, 0, 0], &padded_rois, &[true, true, true, false, false]);
    for (a, b) in e.iter().zip(&ep).chain(f.iter().zip(&fp)) {
        assert_abs_diff_eq!(a, b, epsilon = 1e-9);
    }
}

#[test]
fn every_parameter_gets_gradient() {
    let m = model();
    let r = rois(3, 8);
    let keep = [true; 3];
    let mut tape = Tape::new();
    let b = m.bind(&mut tape);
    let enc = m
        .encode(
            &mut tape,
            &b,
            SampleView {
                tokens: &[FIRST_REGULAR_ID + 1, 7, 2, 9],
                rois: &r,
                roi_keep: &keep,
            },
            true,
        )
        .unwrap();
    let p = m.pool(&mut tape, &enc).unwrap();
    let lay = m.layout().heads.unwrap();
    let rows = tape.gather(enc.states, &[0, 1, 2]).unwrap();
    let mlm = tape.linear(rows, b.var(lay.mlm.0), b.var(lay.mlm.1)).unwrap();
    let l1 = tape.cross_entropy_sum(mlm, &[5, 6, 7]).unwrap();
    let cls = tape.gather(enc.states, &[0]).unwrap();
    let nsp = tape.linear(cls, b.var(lay.nsp.0), b.var(lay.nsp.1)).unwrap();
    let l2 = tape.cross_entropy_sum(nsp, &[1]).unwrap();
    let cap = tape.linear(cls, b.var(lay.caption.0), b.var(lay.caption.1)).unwrap();
    let l3 = tape.cross_entropy_sum(cap, &[0]).unwrap();
    let cos = tape.mul(p.text, p.visual).unwrap();
    let l4 = tape.sum(cos);
    let a = tape.add(l1, l2).unwrap();
    let a = tape.add(a, l3).unwrap();
    let loss = tape.add(a, l4).unwrap();
    tape.backward(loss).unwrap();
    for (i, (name, _)) in m.params.iter().enumerate() {
        let g = tape.grad(b.var(i)).unwrap();
        assert!(g.iter().any(|&v| v != 0.0), "{name} has an all-zero gradient");
    }
}

#[test]
fn single_token_attends_to_itself() {
    let mut tape = Tape::new();
    let s = tape.constant(&[1, 1], vec![3.7]).unwrap();
    let p = tape.softmax_masked(s, &[true]).unwrap();
    assert_eq!(tape.value(p), &[1.0]);
}
