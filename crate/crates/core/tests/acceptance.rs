//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line to
//! stdout (bypassing the capture) and then asserts.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rul_core::corpus::{
    dataset_vocab, generate_dataset, Counts, Dataset, GenerationSpec, make_preference_pairs, Vocab, BARE_REFUSAL,
};
use rul_core::eval::{evaluate, run_ablation, AblationConfig, Arm, EvalOptions, MetricsReport};
use rul_core::losses::{bce_loss, nll_loss, rm_pairwise_loss, sequence_kl};
use rul_core::model::{
    answerability, mean_pool_scores, paragraph_score, ranking_attention, ranking_score, reward_score,
    sentence_attention, Aggregation, ModelConfig, ModelParams, Prepared,
};
use rul_core::training::{
    grad_check, gradcheck_fixture, heldout_reward, pair_accuracy, train_reward_model, train_rl, train_sft,
    GradCheckOptions, LossSelector, ModelReward, RlConfig, RmPair, SftExample, TrainConfig,
};

fn verdict(id: u8, name: &str, pass: bool, detail: &str) {
    let line = format!("{} [{id}] {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

struct Desk {
    data: Dataset,
    vocab: Vocab,
    sft: ModelParams,
    sft_epochs: usize,
    rm: ModelParams,
    rm_valid: Vec<RmPair>,
}

// Default corpus, SFT and RM trained once and shared by the tests below.
fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let data = generate_dataset(&GenerationSpec::default()).unwrap();
        let vocab = dataset_vocab(&data);
        let train = SftExample::batch(&data.train, &vocab);
        let valid = SftExample::batch(&data.valid, &vocab);
        let (sft, report) = train_sft(&train, &valid, vocab.len(), &TrainConfig::default(), |_| {}).unwrap();

        let rm_cfg = TrainConfig {
            epochs: 10,
            ..TrainConfig::default()
        };
        let tp = make_preference_pairs(&data.train, 2000, rm_cfg.seed).unwrap();
        let vp = make_preference_pairs(&data.valid, 400, rm_cfg.seed + 1).unwrap();
        let tp = RmPair::resolve(&tp, &data.train, &vocab).unwrap();
        let rm_valid = RmPair::resolve(&vp, &data.valid, &vocab).unwrap();
        let (rm, _) = train_reward_model(&tp, &rm_valid, vocab.len(), &rm_cfg, |_| {}).unwrap();
        Desk {
            sft_epochs: report.epochs.len(),
            data,
            vocab,
            sft,
            rm,
            rm_valid,
        }
    })
}

fn test_metrics() -> &'static MetricsReport {
    static M: OnceLock<MetricsReport> = OnceLock::new();
    M.get_or_init(|| {
        let d = desk();
        evaluate(&d.sft, &d.data.test, &d.vocab, &EvalOptions::default()).unwrap()
    })
}

#[test]
fn c1_gradient_fidelity() {
    let start = Instant::now();
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut all = true;
    for seed in 0..5 {
        let (params, batch, pairs) = gradcheck_fixture(seed).unwrap();
        let opts = GradCheckOptions {
            seed,
            eps: 1e-4,
            tol: 1e-4,
            ..GradCheckOptions::default()
        };
        for sel in LossSelector::ALL {
            let r = grad_check(&params, &batch, &pairs, sel, &opts).unwrap();
            all &= r.pass;
            let w = worst.entry(sel.as_str()).or_insert(0.0);
            *w = w.max(r.max_rel_error);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = worst
        .iter()
        .map(|(k, v)| format!("{k}={v:.2e}"))
        .collect::<Vec<_>>()
        .join(" ");
    verdict(
        1,
        "gradient fidelity",
        all && worst.values().all(|&v| v < 1e-4) && secs < 120.0,
        &format!("5 seeds, max rel err {detail}, {secs:.1}s"),
    );
}

#[test]
fn c2_aggregation_algebra() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let config = ModelConfig {
        d: 8,
        d_a: 4,
        d_h: 8,
        ..ModelConfig::new(30)
    };
    let mut params = ModelParams::init(config.clone(), 0);
    let (mut sum_err, mut hull_viol) = (0.0f64, 0.0f64);
    for i in 0..10_000u64 {
        if i % 100 == 0 {
            params = ModelParams::init(config.clone(), i);
        }
        let k = rng.gen_range(1..=8);
        let h: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..config.d).map(|_| rng.gen_range(-3.0..3.0)).collect())
            .collect();
        let alpha = sentence_attention(&h, &params);
        sum_err = sum_err.max((alpha.iter().sum::<f64>() - 1.0).abs());
        let y: Vec<f64> = (0..k).map(|_| rng.gen::<f64>()).collect();
        let yp = paragraph_score(&alpha, &y).unwrap();
        hull_viol = hull_viol.max(hull_excess(yp, &y));

        let m = rng.gen_range(1..=6);
        let yps: Vec<f64> = (0..m).map(|_| rng.gen::<f64>()).collect();
        let beta = ranking_attention(&yps, &params);
        sum_err = sum_err.max((beta.iter().sum::<f64>() - 1.0).abs());
        let yd = ranking_score(&beta, &yps).unwrap();
        hull_viol = hull_viol.max(hull_excess(yd, &yps));
    }

    // Zeroed attention against mean pooling on real inputs.
    let spec = GenerationSpec {
        counts: Counts {
            train: 200,
            valid: 10,
            test: 10,
        },
        ..GenerationSpec::default()
    };
    let data = generate_dataset(&spec).unwrap();
    let vocab = dataset_vocab(&data);
    let mut zeroed = ModelParams::init(
        ModelConfig {
            d: 8,
            d_a: 4,
            d_h: 8,
            ..ModelConfig::new(vocab.len())
        },
        3,
    );
    zeroed.zero_attention();
    let mut pool_err = 0.0f64;
    for ex in &data.train {
        let input = Prepared::new(ex, &vocab);
        let att = answerability(&zeroed, &input, Aggregation::Attention, 0.5).unwrap();
        let mean = answerability(&zeroed, &input, Aggregation::Mean, 0.5).unwrap();
        let (yp, yd) = mean_pool_scores(&att.sentence_scores).unwrap();
        for (a, (b, c)) in att.paragraph_scores.iter().zip(yp.iter().zip(&mean.paragraph_scores)) {
            pool_err = pool_err.max((a - b).abs()).max((a - c).abs());
        }
        pool_err = pool_err
            .max((att.ranking_score - yd).abs())
            .max((att.ranking_score - mean.ranking_score).abs());
    }
    verdict(
        2,
        "aggregation algebra",
        sum_err <= 1e-9 && hull_viol <= 1e-12 && pool_err <= 1e-12,
        &format!(
            "10^4 inputs: max |sum-1| {sum_err:.1e}, hull excess {hull_viol:.1e}; zeroed attention vs mean {pool_err:.1e} on {} inputs",
            data.train.len()
        ),
    );
}

fn hull_excess(v: f64, children: &[f64]) -> f64 {
    let lo = children.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = children.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (lo - v).max(v - hi).max(0.0)
}

#[test]
fn c3_loss_identities() {
    let ln2 = std::f64::consts::LN_2;
    let bce = bce_loss(&[0.5], &[1.0]).unwrap();
    let uniform = vec![vec![0.1; 10]; 3];
    let nll = nll_loss(&[uniform], &[vec![6, 7, 8]]).unwrap();
    let rm = rm_pairwise_loss(0.4, 0.4);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut random_dist = |n: usize| -> Vec<f64> {
        let w: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() + 1e-3).collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|x| x / s).collect()
    };
    let p: Vec<Vec<f64>> = (0..4).map(|_| random_dist(12)).collect();
    let kl_self = sequence_kl(&p, &p).unwrap();
    let mut kl_min = f64::INFINITY;
    for _ in 0..1000 {
        let a: Vec<Vec<f64>> = (0..3).map(|_| random_dist(12)).collect();
        let b: Vec<Vec<f64>> = (0..3).map(|_| random_dist(12)).collect();
        kl_min = kl_min.min(sequence_kl(&a, &b).unwrap());
    }
    let tol = 1e-12;
    let pass = (bce - ln2).abs() < tol
        && (nll - 3.0 * 10f64.ln()).abs() < tol
        && (rm - ln2).abs() < tol
        && kl_self.abs() <= tol
        && kl_min >= 0.0;
    verdict(
        3,
        "loss identities",
        pass,
        &format!(
            "bce-ln2 {:.1e}, nll-3ln10 {:.1e}, rm-ln2 {:.1e}, KL(p,p) {kl_self:.1e}, min KL over 10^3 pairs {kl_min:.3e}",
            bce - ln2,
            nll - 3.0 * 10f64.ln(),
            rm - ln2
        ),
    );
}

#[test]
fn c4_sft_desk_run() {
    let d = desk();
    let (sent, _, rank) = rul_core::eval::detection_accuracy(&d.sft, &d.data.valid, &d.vocab, 0.5, Aggregation::Attention)
        .unwrap();
    let m = test_metrics();
    let refusal = m.refusal_rate.unwrap_or(0.0);
    let f1 = m.f1_answerable.unwrap_or(0.0);
    verdict(
        4,
        "SFT desk run",
        d.sft_epochs <= 50 && rank >= 0.90 && sent >= 0.85 && refusal >= 0.85 && f1 >= 0.80,
        &format!(
            "{} epochs; valid ranking {rank:.3} sentence {sent:.3}; test refusal {refusal:.3} F1 {f1:.3}",
            d.sft_epochs
        ),
    );
}

#[test]
fn c5_ablation_on_salient_split() {
    let mut config = AblationConfig::default();
    config.sft.epochs = 30;
    config.reward.epochs = 6;
    config.train_pairs = 600;
    config.valid_pairs = 150;
    config.rl.iterations = 300;
    let mut rank_ok = 0;
    let mut inform_ok = 0;
    let mut margins = Vec::new();
    for seed in 1..=3u64 {
        // One of five sentences carries the fact.
        let spec = GenerationSpec {
            counts: Counts {
                train: 600,
                valid: 150,
                test: 200,
            },
            sentences_per_paragraph: [5, 5].into(),
            paragraphs: [1, 1].into(),
            seed,
            ..GenerationSpec::default()
        };
        let data = generate_dataset(&spec).unwrap();
        let vocab = dataset_vocab(&data);
        let table = run_ablation(&data, &vocab, &config, seed, |_| {}).unwrap();
        let full = &table.arm(Arm::Full).unwrap().metrics;
        let mean = &table.arm(Arm::MeanPooling).unwrap().metrics;
        let sft = &table.arm(Arm::SftOnly).unwrap().metrics;
        let dr = full.ranking_acc - mean.ranking_acc;
        let di = full.informativeness_avg.unwrap_or(0.0) - sft.informativeness_avg.unwrap_or(0.0);
        rank_ok += usize::from(dr >= 0.0);
        inform_ok += usize::from(di >= 0.0);
        margins.push(format!("seed {seed}: ranking {dr:+.3}, informativeness {di:+.3}"));
    }
    verdict(
        5,
        "ablation on salient split",
        rank_ok >= 2 && inform_ok >= 2,
        &format!(
            "attention>=mean in {rank_ok}/3, SFT+RL>=SFT in {inform_ok}/3; {}",
            margins.join("; ")
        ),
    );
}

#[test]
fn c6_reward_model() {
    let d = desk();
    let acc = pair_accuracy(&d.rm, &d.rm_valid).unwrap();
    let bare = d.vocab.encode(&BARE_REFUSAL.map(String::from));
    let (mut wins, mut n) = (0, 0);
    for ex in d.data.valid.iter().filter(|e| !e.y) {
        let input = Prepared::new(ex, &d.vocab);
        let gold = reward_score(&d.rm, &input, &d.vocab.encode(&ex.target.tokens)).unwrap();
        let b = reward_score(&d.rm, &input, &bare).unwrap();
        wins += usize::from(gold > b);
        n += 1;
    }
    let share = wins as f64 / n as f64;
    verdict(
        6,
        "reward model",
        acc >= 0.90 && share >= 0.90,
        &format!("held-out pair accuracy {acc:.3}; full > bare refusal on {wins}/{n} ({share:.3})"),
    );
}

#[test]
fn c7_rl_refinement() {
    let d = desk();
    let prompts: Vec<Prepared> = d.data.train.iter().map(|e| Prepared::new(e, &d.vocab)).collect();
    let held: Vec<Prepared> = d.data.valid.iter().take(200).map(|e| Prepared::new(e, &d.vocab)).collect();
    let reward = ModelReward(&d.rm);
    let config = RlConfig::default();
    let half = RlConfig {
        iterations: config.iterations / 2,
        ..config.clone()
    };
    let score = |p: &ModelParams| heldout_reward(p, &reward, &held, &config, 2, 99).unwrap();
    let r0 = score(&d.sft);
    let (mid, _) = train_rl(&d.sft, &reward, &prompts, &half, |_| {}).unwrap();
    let r1 = score(&mid);
    let mut max_kl = 0.0f64;
    let (end, _) = train_rl(&d.sft, &reward, &prompts, &config, |r| max_kl = max_kl.max(r.mean_kl)).unwrap();
    let r2 = score(&end);

    let pinned = RlConfig {
        beta_kl: 1e6,
        ..config.clone()
    };
    let (frozen, _) = train_rl(&d.sft, &reward, &prompts, &pinned, |_| {}).unwrap();
    let drift = frozen.max_abs_diff(&d.sft);
    verdict(
        7,
        "RL refinement",
        r0 < r1 && r1 < r2 && max_kl <= 20.0 && drift <= 1e-3,
        &format!(
            "held-out reward {r0:.4} -> {r1:.4} -> {r2:.4} (0/{}/{} iterations); max mean KL {max_kl:.3}; beta=1e6 drift {drift:.2e}",
            half.iterations, config.iterations
        ),
    );
}

fn run_cli(dir: &Path, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_rul"))
        .args(args)
        .current_dir(dir)
        .env("RUL_LOG", "quiet")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "rul {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

// Every file under `dir`; manifests contribute only their output digests
// since they also carry wall-clock timestamps.
fn artifacts(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            continue;
        }
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        let bytes = std::fs::read(&path).unwrap();
        if name.ends_with("manifest.json") {
            let v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
            out.insert(name, serde_json::to_vec(&v["outputs"]).unwrap());
        } else {
            out.insert(name, bytes);
        }
    }
    out
}

fn pipeline(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let write = |name: &str, body: &str| std::fs::write(dir.join(name), body).unwrap();
    write(
        "spec.json",
        r#"{"counts": {"train": 60, "valid": 20, "test": 20}, "seed": 11}"#,
    );
    write("sft.json", r#"{"epochs": 2, "d": 8, "d_a": 4, "d_h": 8}"#);
    write("rm.json", r#"{"epochs": 2, "d": 8, "d_a": 4, "d_h": 8}"#);
    write("rl.json", r#"{"iterations": 5, "batch_size": 4}"#);
    run_cli(dir, &["gen-data", "--spec", "spec.json", "--out", "data"]);
    run_cli(dir, &["train-sft", "--data", "data", "--config", "sft.json", "--out", "sft.ckpt.json"]);
    run_cli(
        dir,
        &[
            "train-rm", "--data", "data", "--config", "rm.json", "--out", "rm.ckpt.json", "--train-pairs", "60",
            "--valid-pairs", "20",
        ],
    );
    run_cli(
        dir,
        &[
            "train-rl", "--data", "data", "--config", "rl.json", "--out", "rl.ckpt.json", "--sft-ckpt",
            "sft.ckpt.json", "--rm-ckpt", "rm.ckpt.json",
        ],
    );
    run_cli(dir, &["eval", "--data", "data", "--ckpt", "rl.ckpt.json", "--out", "eval.json"]);
    let mut all = artifacts(dir);
    for (k, v) in artifacts(&dir.join("data")) {
        all.insert(format!("data/{k}"), v);
    }
    all
}

#[test]
fn c8_determinism() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = pipeline(a.path());
    let second = pipeline(b.path());
    let differing: Vec<&String> = first
        .iter()
        .filter(|(k, v)| second.get(*k) != Some(*v))
        .map(|(k, _)| k)
        .collect();
    let same_set = first.keys().eq(second.keys());
    verdict(
        8,
        "determinism",
        same_set && differing.is_empty() && first.len() >= 15,
        &format!(
            "{} artifacts from gen-data, train-sft, train-rm, train-rl, eval; differing: {differing:?}",
            first.len()
        ),
    );
}

#[test]
fn c9_per_type_report() {
    let m = test_metrics();
    let types = ["MISSING", "CONTRADICTORY", "AMBIGUOUS"];
    let populated = types
        .iter()
        .all(|t| m.per_type_ranking_acc.contains_key(*t) && m.counts.per_type.get(*t).copied().unwrap_or(0) > 0);
    let detail = types
        .iter()
        .map(|t| {
            format!(
                "{t} {:.3} (n={})",
                m.per_type_ranking_acc.get(*t).copied().unwrap_or(f64::NAN),
                m.counts.per_type.get(*t).copied().unwrap_or(0)
            )
        })
        .collect::<Vec<_>>()
        .join(", ");
    verdict(9, "per-type report", populated, &detail);
}
