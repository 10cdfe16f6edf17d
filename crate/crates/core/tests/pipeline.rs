use rul_core::corpus::{
    dataset_vocab, generate_dataset, load_dataset, load_pairs, make_preference_pairs, save_dataset, save_pairs, Counts,
    GenerationSpec, Vocab,
};
use rul_core::eval::{evaluate, EvalOptions};
use rul_core::model::{answerability, generate, load_checkpoint, save_checkpoint, Aggregation, GenerateOptions, Prepared};
use rul_core::training::{train_sft, SftExample, TrainConfig};

fn small() -> GenerationSpec {
    GenerationSpec {
        counts: Counts {
            train: 80,
            valid: 20,
            test: 20,
        },
        seed: 21,
        ..GenerationSpec::default()
    }
}

#[test]
fn files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_dataset(&small()).unwrap();
    let p = dir.path().join("train.jsonl");
    save_dataset(&data.train, &p).unwrap();
    assert_eq!(load_dataset(&p).unwrap(), data.train);

    let pairs = make_preference_pairs(&data.train, 50, 3).unwrap();
    let pp = dir.path().join("pairs.jsonl");
    save_pairs(&pairs, &pp).unwrap();
    assert_eq!(load_pairs(&pp).unwrap(), pairs);

    let vocab = dataset_vocab(&data);
    let text = serde_json::to_string(&vocab).unwrap();
    let back: Vocab = serde_json::from_str(&text).unwrap();
    assert_eq!(back, vocab);
}

#[test]
fn trained_checkpoint_reloads_with_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_dataset(&small()).unwrap();
    let vocab = dataset_vocab(&data);
    let config = TrainConfig {
        epochs: 2,
        d: 8,
        d_a: 4,
        d_h: 8,
        ..TrainConfig::default()
    };
    let train = SftExample::batch(&data.train, &vocab);
    let valid = SftExample::batch(&data.valid, &vocab);
    let (params, report) = train_sft(&train, &valid, vocab.len(), &config, |_| {}).unwrap();
    assert_eq!(report.epochs.len(), 2);

    let ck = dir.path().join("model.json");
    save_checkpoint(&params, &ck).unwrap();
    let loaded = load_checkpoint(&ck).unwrap();
    assert_eq!(loaded.max_abs_diff(&params), 0.0);

    for ex in &data.test {
        let input = Prepared::new(ex, &vocab);
        for agg in [Aggregation::Attention, Aggregation::Mean] {
            let a = answerability(&params, &input, agg, 0.5).unwrap();
            let b = answerability(&loaded, &input, agg, 0.5).unwrap();
            assert_eq!(a, b);
        }
        let opts = GenerateOptions::default();
        assert_eq!(generate(&params, &input, &opts).unwrap(), generate(&loaded, &input, &opts).unwrap());
    }
    let r = evaluate(&loaded, &data.test, &vocab, &EvalOptions::default()).unwrap();
    assert_eq!(r.counts.examples, data.test.len());
    assert!((0.0..=1.0).contains(&r.ranking_acc));
}
