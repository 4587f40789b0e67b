use cavl_core::data::{generate_synthetic_corpus, GeneratorSpec, SyntheticCorpus};
use cavl_core::eval::{evaluate_alignment, Scoring};
use cavl_core::exec::Exec;
use cavl_core::heatmap::{parse_csv, to_csv};
use cavl_core::metrics::Record;
use cavl_core::model::{Model, ModelConfig};
use cavl_core::training::{
    init_model, load_checkpoint, pretrain, save_checkpoint, tiny_generator, tiny_model_config, Checkpoint,
    PretrainConfig,
};
use cavl_core::Tensor;
use proptest::prelude::*;

fn setup(seed: u64, n_train: usize) -> (ModelConfig, SyntheticCorpus) {
    let cfg = tiny_model_config();
    let gen = GeneratorSpec {
        n_train,
        n_test: 8,
        ..tiny_generator()
    };
    let corpus = generate_synthetic_corpus(seed, &gen, &cfg).unwrap();
    (cfg, corpus)
}

fn run(seed: u64, n_train: usize, epochs: usize, exec: Exec) -> (Model, Vec<Record>) {
    let (cfg, corpus) = setup(seed, n_train);
    let pc = PretrainConfig {
        batch_size: 8,
        epochs,
        eval_candidates: 4,
        ..PretrainConfig::default()
    };
    let mut recs = Vec::new();
    let (model, _) = pretrain(init_model(&cfg, seed).unwrap(), &corpus.train, &corpus.test, &pc, seed, exec, &mut recs).unwrap();
    (model, recs)
}

fn bits(m: &Model) -> Vec<u64> {
    m.params.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn sequential_and_parallel_agree_bitwise() {
    let (a, ra) = run(3, 32, 2, Exec::Sequential);
    let (b, rb) = run(3, 32, 2, Exec::Parallel);
    assert_eq!(bits(&a), bits(&b));
    let lines = |r: &[Record]| r.iter().map(|x| x.to_line()).collect::<Vec<_>>();
    assert_eq!(lines(&ra), lines(&rb));
}

fn epoch_mean(recs: &[Record], epoch: u64) -> f64 {
    let xs: Vec<f64> = recs
        .iter()
        .filter(|r| r.kind() == Some("train") && r.get("epoch").and_then(|v| v.as_u64()) == Some(epoch))
        .map(|r| r.get_f64("total").unwrap())
        .collect();
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
fn loss_descends_for_most_seeds() {
    // 16 batches per epoch so an epoch mean is not one lucky draw
    let epochs = 10;
    let lower = (0..10u64)
        .filter(|&seed| {
            let (_, recs) = run(seed, 128, epochs, Exec::default());
            let (first, last) = (epoch_mean(&recs, 0), epoch_mean(&recs, epochs as u64 - 1));
            println!("seed {seed}: {first:.4} -> {last:.4}");
            last < first
        })
        .count();
    assert!(lower >= 9, "{lower}/10 seeds descended");
}

#[test]
fn checkpoint_round_trip_preserves_scores() {
    let (model, _) = run(5, 32, 1, Exec::default());
    let (_, corpus) = setup(5, 32);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    save_checkpoint(&Checkpoint::from_model(&model, None, 5, serde_json::Value::Null), &p).unwrap();
    let back = load_checkpoint(&p).unwrap().into_model().unwrap();
    assert_eq!(bits(&model), bits(&back));
    let a = evaluate_alignment(&model, &corpus.test, Scoring::ZeroShot, Exec::Sequential).unwrap();
    let b = evaluate_alignment(&back, &corpus.test, Scoring::ZeroShot, Exec::Sequential).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn heatmap_csv_reloads_within_print_precision(vals in proptest::collection::vec(-1.0f64..=1.0, 9)) {
        let m = Tensor::new(vec![3, 3], vals).unwrap();
        let back = parse_csv(&to_csv(&m)).unwrap();
        prop_assert_eq!(back.shape(), m.shape());
        for (a, b) in m.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() <= 5e-7);
        }
    }
}
