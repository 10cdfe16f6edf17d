use std::ffi::{CStr, CString};
use std::ptr;

use rul_core::corpus::{dataset_vocab, generate_dataset, Counts, GenerationSpec};
use rul_core::model::{save_checkpoint, ModelConfig, ModelParams};
use rul_ffi::*;

struct Fixture {
    _dir: tempfile::TempDir,
    model: CString,
    vocab: CString,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let spec = GenerationSpec {
        counts: Counts {
            train: 10,
            valid: 2,
            test: 2,
        },
        ..GenerationSpec::default()
    };
    let data = generate_dataset(&spec).unwrap();
    let vocab = dataset_vocab(&data);
    let vp = dir.path().join("vocab.json");
    std::fs::write(&vp, serde_json::to_string(&vocab).unwrap()).unwrap();
    let params = ModelParams::init(
        ModelConfig {
            d: 8,
            d_a: 4,
            d_h: 8,
            ..ModelConfig::new(vocab.len())
        },
        1,
    );
    let mp = dir.path().join("model.json");
    save_checkpoint(&params, &mp).unwrap();
    Fixture {
        model: CString::new(mp.to_str().unwrap()).unwrap(),
        vocab: CString::new(vp.to_str().unwrap()).unwrap(),
        _dir: dir,
    }
}

fn last_error() -> String {
    let p = rul_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

const INPUT: &str = r#"{"query": "what is the color of bafo ?", "paragraphs": [["the color of bafo is kemira .", "bafo 's size is lotuna ."], ["the mood of zeki is ralope ."]]}"#;

#[test]
fn load_predict_generate() {
    let f = fixture();
    unsafe {
        let mut model = ptr::null_mut();
        let mut vocab = ptr::null_mut();
        assert_eq!(rul_model_load(f.model.as_ptr(), &mut model), RulStatus::Ok);
        assert_eq!(rul_vocab_load(f.vocab.as_ptr(), &mut vocab), RulStatus::Ok);
        assert!(rul_last_error_message().is_null());

        let input = CString::new(INPUT).unwrap();
        let mut out = ptr::null_mut();
        assert_eq!(rul_predict(model, vocab, input.as_ptr(), false, 0.5, &mut out), RulStatus::Ok);
        let v: serde_json::Value = serde_json::from_str(CStr::from_ptr(out).to_str().unwrap()).unwrap();
        rul_string_free(out);
        assert_eq!(v["sentence_scores"].as_array().unwrap().len(), 2);
        let beta: f64 = v["paragraph_attn"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
        assert!((beta - 1.0).abs() < 1e-9);

        let mut out = ptr::null_mut();
        assert_eq!(rul_generate(model, vocab, input.as_ptr(), 0.5, 5, &mut out), RulStatus::Ok);
        let g: serde_json::Value = serde_json::from_str(CStr::from_ptr(out).to_str().unwrap()).unwrap();
        rul_string_free(out);
        assert!(g["y_pred"].is_boolean());
        assert!(g["text"].as_str().unwrap().split_whitespace().count() <= 5);

        rul_model_free(model);
        rul_vocab_free(vocab);
    }
}

#[test]
fn errors_carry_status_and_message() {
    let f = fixture();
    unsafe {
        let mut model = ptr::null_mut();
        let missing = CString::new("/nonexistent/model.json").unwrap();
        assert_eq!(rul_model_load(missing.as_ptr(), &mut model), RulStatus::Io);
        assert!(last_error().contains("nonexistent"));
        assert!(model.is_null());

        assert_eq!(rul_model_load(ptr::null(), &mut model), RulStatus::NullArgument);
        // A vocabulary file is not a checkpoint.
        assert_eq!(rul_model_load(f.vocab.as_ptr(), &mut model), RulStatus::Checkpoint);

        let mut vocab = ptr::null_mut();
        assert_eq!(rul_model_load(f.model.as_ptr(), &mut model), RulStatus::Ok);
        assert_eq!(rul_vocab_load(f.vocab.as_ptr(), &mut vocab), RulStatus::Ok);
        let mut out = ptr::null_mut();
        let bad = CString::new(r#"{"query": "x"}"#).unwrap();
        assert_eq!(rul_predict(model, vocab, bad.as_ptr(), false, 0.5, &mut out), RulStatus::Parse);
        let empty = CString::new(r#"{"query": "x", "paragraphs": []}"#).unwrap();
        assert_eq!(rul_predict(model, vocab, empty.as_ptr(), false, 0.5, &mut out), RulStatus::Validation);
        assert!(last_error().contains("paragraph"));
        let input = CString::new(INPUT).unwrap();
        assert_eq!(rul_predict(model, vocab, input.as_ptr(), false, 2.0, &mut out), RulStatus::Validation);
        assert_eq!(rul_predict(ptr::null(), vocab, input.as_ptr(), false, 0.5, &mut out), RulStatus::NullArgument);
        assert!(out.is_null());
        rul_model_free(model);
        rul_vocab_free(vocab);
        rul_model_free(ptr::null_mut());
        rul_string_free(ptr::null_mut());
    }
}

#[test]
fn metrics_over_strings() {
    let c = |s: &str| CString::new(s).unwrap();
    unsafe {
        assert_eq!(rul_token_f1(c("a b").as_ptr(), c("a c").as_ptr()), 0.5);
        assert_eq!(rul_token_f1(ptr::null(), c("a").as_ptr()), -1.0);
        let full = c("The context does not contain details about color of bafo . You might try providing more details about bafo .");
        assert_eq!(rul_informativeness(full.as_ptr()), 2);
        assert_eq!(rul_informativeness(c("I cannot answer.").as_ptr()), 0);
        assert_eq!(rul_informativeness(ptr::null()), -1);
    }
}

#[test]
fn header_declares_every_export() {
    let h = include_str!("../include/rul.h");
    for name in [
        "rul_last_error_message",
        "rul_model_load",
        "rul_model_free",
        "rul_vocab_load",
        "rul_vocab_free",
        "rul_predict",
        "rul_generate",
        "rul_string_free",
        "rul_token_f1",
        "rul_informativeness",
        "typedef struct RulModel RulModel",
        "RUL_STATUS_OK = 0",
    ] {
        assert!(h.contains(name), "{name}");
    }
}
