use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cavl_core::adapters::PartitionReport;
use cavl_core::metrics::read_records;
use cavl_core::training::{tiny_generator, tiny_model_config};
use serde_json::json;

fn cavl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cavl"))
        .args(args)
        .env("CAVL_LOG", "error")
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path) -> PathBuf {
    let gen = cavl_core::data::GeneratorSpec {
        n_train: 16,
        n_test: 8,
        ..tiny_generator()
    };
    let doc = json!({
        "seed": 3,
        "model": tiny_model_config(),
        "data": {"generator": gen},
        "pretrain": {"batch_size": 8, "epochs": 2, "eval_candidates": 4},
        "finetune": {"batch_size": 8, "epochs": 1, "eval_candidates": 4, "bottleneck": 4},
    });
    let p = dir.join("c.json");
    fs::write(&p, serde_json::to_string_pretty(&doc).unwrap()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn pretrain_into(cfg: &Path, out: &Path) {
    let o = cavl(&["pretrain", "--config", s(cfg), "--out", s(out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn usage_errors_exit_one() {
    let o = cavl(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(cavl(&[]).status.code(), Some(1));
    assert_eq!(cavl(&["pretrain", "--epochs", "many"]).status.code(), Some(1));
    assert_eq!(cavl(&["gradcheck", "--ops", "nope"]).status.code(), Some(1));
    assert_eq!(cavl(&["--help"]).status.code(), Some(0));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    fs::write(&p, r#"{"seed": 1, "pretrian": {}}"#).unwrap();
    let o = cavl(&["pretrain", "--config", s(&p), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("pretrian"));
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = cavl(&["eval", "--checkpoint", s(&dir.path().join("none.ckpt"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}

#[test]
fn gradcheck_subset_prints_table() {
    let o = cavl(&["gradcheck", "--ops", "gelu,softmax"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().skip(1).all(|l| l.ends_with("ok")));
}

#[test]
fn pretrain_writes_metrics_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    pretrain_into(&cfg, &out);
    assert!(out.join("checkpoint.ckpt").is_file());
    assert!(out.join("config.json").is_file());

    let recs = read_records(&out.join("metrics.jsonl")).unwrap();
    // 16 samples / B=8 = 2 steps per epoch, 2 epochs, one eval line per epoch
    assert_eq!(recs.len(), 2 * 2 + 2);
    let train_keys: Vec<Vec<&String>> = recs
        .iter()
        .filter(|r| r.kind() == Some("train"))
        .map(|r| r.0.keys().collect())
        .collect();
    assert!(train_keys.windows(2).all(|w| w[0] == w[1]));
    for k in ["step", "epoch", "lr", "mlm", "nsp", "caption", "pwcl", "total", "aps", "retries"] {
        assert!(train_keys[0].iter().any(|x| x.as_str() == k), "{k}");
    }
    for r in &recs {
        assert_eq!(r.get("recall@1").is_some(), r.kind() == Some("eval"));
    }
    let text = fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    for line in text.lines() {
        let v: serde_json::Map<String, serde_json::Value> = serde_json::from_str(line).unwrap();
        let keys: Vec<&String> = v.keys().collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    let o = cavl(&["pretrain", "--config", s(&cfg), "--out", s(&out), "--epochs", "1", "--seed", "11"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let recs = read_records(&out.join("metrics.jsonl")).unwrap();
    assert_eq!(recs.len(), 2 + 1);
    let resolved: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(resolved["seed"], 11);
    assert_eq!(resolved["pretrain"]["epochs"], 1);
    assert_eq!(resolved["pretrain"]["batch_size"], 8);
}

#[test]
fn finetune_eval_and_heatmap_from_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let pre = dir.path().join("pre");
    pretrain_into(&cfg, &pre);
    let ckpt = pre.join("checkpoint.ckpt");

    let ft = dir.path().join("ft");
    let o = cavl(&["finetune", "--checkpoint", s(&ckpt), "--mode", "adapter2", "--out", s(&ft)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: PartitionReport = serde_json::from_str(&fs::read_to_string(ft.join("partition.json")).unwrap()).unwrap();
    let trainable: usize = report.per_tensor.iter().filter(|t| t.trainable).map(|t| t.elements).sum();
    let total: usize = report.per_tensor.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    assert_eq!(report.trainable, trainable);
    assert_eq!(report.trainable + report.frozen, total);
    assert!(ft.join("checkpoint.ckpt").is_file());

    let o = cavl(&["eval", "--checkpoint", s(&ckpt), "--zero-shot", "--candidates", "8"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let doc: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(doc["candidates"], 8);
    let r1 = doc["recall@1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&r1));

    let o = cavl(&["eval", "--checkpoint", s(&ft.join("checkpoint.ckpt")), "--candidates", "8"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let o = cavl(&["eval", "--checkpoint", s(&ckpt), "--candidates", "9"]);
    assert_eq!(o.status.code(), Some(2));

    let hm = dir.path().join("hm");
    let o = cavl(&["heatmap", "--checkpoint", s(&ckpt), "--n", "4", "--out", s(&hm)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(hm.join("heatmap.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().all(|l| l.split(',').count() == 4));
    let pgm = fs::read(hm.join("heatmap.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n4 4\n255\n"));
    assert_eq!(pgm.len(), b"P5\n4 4\n255\n".len() + 16);
}

#[test]
fn gen_data_corpus_feeds_pretrain() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("data");
    let o = cavl(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(data.join("train.jsonl").is_file());

    let a = dir.path().join("a");
    let b = dir.path().join("b");
    pretrain_into(&cfg, &a);
    let o = cavl(&["pretrain", "--config", s(&cfg), "--corpus", s(&data), "--out", s(&b)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    // same samples whether regenerated or read back
    assert_eq!(
        fs::read(a.join("metrics.jsonl")).unwrap(),
        fs::read(b.join("metrics.jsonl")).unwrap()
    );
}
