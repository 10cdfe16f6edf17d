//! Detection accuracy, generation metrics, timing and the ablation runner.

mod ablation;

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{derive_hierarchical_labels, Example, Vocab, BARE_REFUSAL, REASON_STEM, SUGGESTION_STEM};
use crate::error::{Error, Result};
use crate::model::{answerability, decide, generate, Aggregation, GenerateOptions, ModelParams, Prepared};

pub use ablation::{run_ablation, AblationConfig, AblationTable, Arm, ArmResult};

const REASON_PATTERN: [&str; 5] = ["does", "not", "contain", "details", "about"];
const SUGGESTION_PATTERN: [&str; 6] = ["You", "might", "try", "providing", "more", "details"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub tau: f64,
    pub aggregation: Aggregation,
    pub max_len: usize,
    /// Timing repetitions; `None` skips timing.
    pub timing_repetitions: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            tau: 0.5,
            aggregation: Aggregation::Attention,
            max_len: 24,
            timing_repetitions: None,
        }
    }
}

impl EvalOptions {
    fn generate_options(&self) -> GenerateOptions {
        GenerateOptions {
            tau: self.tau,
            max_len: self.max_len,
            temperature: 0.0,
            seed: 0,
            aggregation: self.aggregation,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricCounts {
    pub examples: usize,
    pub answerable: usize,
    pub unanswerable: usize,
    pub sentences: usize,
    pub paragraphs: usize,
    pub refusal_generations: usize,
    pub per_type: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub repetitions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sentence_acc: f64,
    pub paragraph_acc: f64,
    pub ranking_acc: f64,
    /// Mean token F1 over answerable examples.
    pub f1_answerable: Option<f64>,
    /// Over unanswerable examples.
    pub refusal_rate: Option<f64>,
    /// Over refusal-mode generations.
    pub informativeness_avg: Option<f64>,
    pub refusal_len_avg: Option<f64>,
    pub per_type_ranking_acc: BTreeMap<String, f64>,
    pub avg_inference_ms: Option<f64>,
    pub inference_ms_std: Option<f64>,
    pub counts: MetricCounts,
}

/// Multiset token-overlap F1; an empty prediction scores 0.
pub fn token_f1<T: AsRef<str>, U: AsRef<str>>(pred: &[T], gold: &[U]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for g in gold {
        *counts.entry(g.as_ref()).or_default() += 1;
    }
    let mut overlap = 0usize;
    for p in pred {
        if let Some(c) = counts.get_mut(p.as_ref()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / pred.len() as f64;
    let r = overlap as f64 / gold.len() as f64;
    2.0 * p * r / (p + r)
}

fn contains<T: AsRef<str>>(tokens: &[T], pattern: &[&str]) -> bool {
    tokens
        .windows(pattern.len())
        .any(|w| w.iter().zip(pattern).all(|(a, b)| a.as_ref() == *b))
}

fn starts_with<T: AsRef<str>>(tokens: &[T], pattern: &[&str]) -> bool {
    tokens.len() >= pattern.len() && tokens.iter().zip(pattern).all(|(a, b)| a.as_ref() == *b)
}

/// Reason and suggestion count (0..=2) and the token length.
pub fn informativeness<T: AsRef<str>>(refusal: &[T]) -> (u8, usize) {
    let score = u8::from(contains(refusal, &REASON_PATTERN)) + u8::from(contains(refusal, &SUGGESTION_PATTERN));
    (score, refusal.len())
}

/// Whether the text opens with one of the refusal stems.
pub fn matches_refusal_grammar<T: AsRef<str>>(tokens: &[T]) -> bool {
    starts_with(tokens, &REASON_STEM) || starts_with(tokens, &SUGGESTION_STEM) || starts_with(tokens, &BARE_REFUSAL)
}

fn ratio(hits: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        hits as f64 / n as f64
    }
}

/// (sentence, paragraph, ranking) accuracy.
pub fn detection_accuracy(
    params: &ModelParams,
    data: &[Example],
    vocab: &Vocab,
    tau: f64,
    agg: Aggregation,
) -> Result<(f64, f64, f64)> {
    let mut hits = [0usize; 3];
    let mut n = [0usize; 3];
    for ex in data {
        let out = answerability(params, &Prepared::new(ex, vocab), agg, tau)?;
        let (sl, pl, y) = derive_hierarchical_labels(&ex.context)?;
        for (scores, labels) in out.sentence_scores.iter().zip(&sl) {
            for (&s, &l) in scores.iter().zip(labels) {
                hits[0] += usize::from(decide(s, tau) == l);
                n[0] += 1;
            }
        }
        for (&s, &l) in out.paragraph_scores.iter().zip(&pl) {
            hits[1] += usize::from(decide(s, tau) == l);
            n[1] += 1;
        }
        hits[2] += usize::from(out.y_pred == y);
        n[2] += 1;
    }
    Ok((ratio(hits[0], n[0]), ratio(hits[1], n[1]), ratio(hits[2], n[2])))
}

/// Ranking accuracy grouped by unanswerability type.
pub fn per_type_accuracy(
    params: &ModelParams,
    data: &[Example],
    vocab: &Vocab,
    tau: f64,
    agg: Aggregation,
) -> Result<BTreeMap<String, f64>> {
    let mut acc: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for ex in data {
        let out = answerability(params, &Prepared::new(ex, vocab), agg, tau)?;
        let e = acc.entry(ex.utype.as_str().to_string()).or_default();
        e.0 += usize::from(out.y_pred == ex.y);
        e.1 += 1;
    }
    Ok(acc.into_iter().map(|(k, (h, n))| (k, ratio(h, n))).collect())
}

/// Share of unanswerable examples answered in refusal mode with refusal
/// grammar; `None` without unanswerable examples.
pub fn refusal_rate(params: &ModelParams, data: &[Example], vocab: &Vocab, opts: &EvalOptions) -> Result<Option<f64>> {
    let negatives: Vec<&Example> = data.iter().filter(|e| !e.y).collect();
    if negatives.is_empty() {
        return Ok(None);
    }
    let mut hits = 0;
    for ex in &negatives {
        let g = generate(params, &Prepared::new(ex, vocab), &opts.generate_options())?;
        let text = vocab.decode(&g.tokens);
        hits += usize::from(!g.y_pred && matches_refusal_grammar(&text));
    }
    Ok(Some(ratio(hits, negatives.len())))
}

/// Mean and standard deviation of per-pair inference time (decision plus
/// greedy decoding) over `repetitions` passes after one warm-up pass.
pub fn timing(params: &ModelParams, inputs: &[Prepared], repetitions: usize, opts: &EvalOptions) -> Result<Timing> {
    if inputs.is_empty() {
        return Err(Error::Validation("timing needs a non-empty dataset".into()));
    }
    if repetitions < 3 {
        return Err(Error::config("repetitions", "must be at least 3"));
    }
    let go = opts.generate_options();
    for p in inputs {
        generate(params, p, &go)?;
    }
    let mut per_pair = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let t0 = Instant::now();
        for p in inputs {
            generate(params, p, &go)?;
        }
        per_pair.push(t0.elapsed().as_secs_f64() * 1e3 / inputs.len() as f64);
    }
    let n = per_pair.len() as f64;
    let mean = per_pair.iter().sum::<f64>() / n;
    let var = per_pair.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(Timing {
        mean_ms: mean,
        std_ms: var.sqrt(),
        repetitions,
    })
}

/// Every metric over `data` in one pass.
pub fn evaluate(params: &ModelParams, data: &[Example], vocab: &Vocab, opts: &EvalOptions) -> Result<MetricsReport> {
    let tau = opts.tau;
    let go = opts.generate_options();
    let mut counts = MetricCounts {
        examples: data.len(),
        ..MetricCounts::default()
    };
    let mut hits = [0usize; 3];
    let mut per_type: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let (mut f1_sum, mut refusals, mut info_sum, mut len_sum) = (0.0, 0usize, 0usize, 0usize);
    for ex in data {
        let input = Prepared::new(ex, vocab);
        let out = answerability(params, &input, opts.aggregation, tau)?;
        let (sl, pl, y) = derive_hierarchical_labels(&ex.context)?;
        for (scores, labels) in out.sentence_scores.iter().zip(&sl) {
            for (&s, &l) in scores.iter().zip(labels) {
                hits[0] += usize::from(decide(s, tau) == l);
                counts.sentences += 1;
            }
        }
        for (&s, &l) in out.paragraph_scores.iter().zip(&pl) {
            hits[1] += usize::from(decide(s, tau) == l);
            counts.paragraphs += 1;
        }
        hits[2] += usize::from(out.y_pred == y);
        let t = per_type.entry(ex.utype.as_str().to_string()).or_default();
        t.0 += usize::from(out.y_pred == y);
        t.1 += 1;

        let g = generate(params, &input, &go)?;
        let text = vocab.decode(&g.tokens);
        if ex.y {
            counts.answerable += 1;
            f1_sum += token_f1(&text, &ex.target.tokens);
        } else {
            counts.unanswerable += 1;
            refusals += usize::from(!g.y_pred && matches_refusal_grammar(&text));
        }
        if !g.y_pred {
            let (score, len) = informativeness(&text);
            counts.refusal_generations += 1;
            info_sum += usize::from(score);
            len_sum += len;
        }
    }
    let avg = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
    let timing = match opts.timing_repetitions {
        Some(r) => {
            let inputs: Vec<Prepared> = data.iter().map(|e| Prepared::new(e, vocab)).collect();
            Some(timing(params, &inputs, r, opts)?)
        }
        None => None,
    };
    counts.per_type = per_type.iter().map(|(k, v)| (k.clone(), v.1)).collect();
    Ok(MetricsReport {
        sentence_acc: ratio(hits[0], counts.sentences),
        paragraph_acc: ratio(hits[1], counts.paragraphs),
        ranking_acc: ratio(hits[2], data.len()),
        f1_answerable: avg(f1_sum, counts.answerable),
        refusal_rate: avg(refusals as f64, counts.unanswerable),
        informativeness_avg: avg(info_sum as f64, counts.refusal_generations),
        refusal_len_avg: avg(len_sum as f64, counts.refusal_generations),
        per_type_ranking_acc: per_type.into_iter().map(|(k, (h, n))| (k, ratio(h, n))).collect(),
        avg_inference_ms: timing.as_ref().map(|t| t.mean_ms),
        inference_ms_std: timing.as_ref().map(|t| t.std_ms),
        counts,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"))
}

/// Plain-text rendering of a report.
pub fn render_report(r: &MetricsReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Detection accuracy");
    let _ = writeln!(s, "  {:<12}{:>8}", "level", "acc");
    for (k, v) in [("sentence", r.sentence_acc), ("paragraph", r.paragraph_acc), ("ranking", r.ranking_acc)] {
        let _ = writeln!(s, "  {k:<12}{v:>8.3}");
    }
    let _ = writeln!(s, "Generation");
    let _ = writeln!(s, "  {:<20}{:>8}", "token F1", opt(r.f1_answerable));
    let _ = writeln!(s, "  {:<20}{:>8}", "refusal rate", opt(r.refusal_rate));
    let _ = writeln!(s, "  {:<20}{:>8}", "informativeness", opt(r.informativeness_avg));
    let _ = writeln!(s, "  {:<20}{:>8}", "refusal length", opt(r.refusal_len_avg));
    let _ = writeln!(s, "Ranking accuracy by type");
    for (k, v) in &r.per_type_ranking_acc {
        let n = r.counts.per_type.get(k).copied().unwrap_or(0);
        let _ = writeln!(s, "  {k:<16}{v:>8.3}  (n={n})");
    }
    if let Some(ms) = r.avg_inference_ms {
        let _ = writeln!(s, "Inference: {ms:.3} ms/pair (sd {})", opt(r.inference_ms_std));
    }
    s
}
