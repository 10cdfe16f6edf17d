//! Encoder, answerability head, two-level attention aggregation, decoder and
//! reward head.

mod checkpoint;
mod graph;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax, Tape, Tensor, Var};
use crate::corpus::{Example, Vocab, EOS};
use crate::error::{Error, Result};
use crate::rng::{stream, Rng};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub(crate) use graph::{Graph, HierVars};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d: usize,
    pub d_a: usize,
    pub d_h: usize,
    pub tau: f64,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d: 32,
            d_a: 16,
            d_h: 32,
            tau: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 7 {
            return Err(Error::config("vocab_size", "must cover the reserved markers and one token"));
        }
        for (f, v) in [("d", self.d), ("d_a", self.d_a), ("d_h", self.d_h)] {
            if v == 0 {
                return Err(Error::config(f, "must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::config("tau", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

macro_rules! params {
    ($($variant:ident => $name:literal),* $(,)?) => {
        /// Every trainable tensor, in checkpoint order.
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
        pub enum ParamId { $($variant),* }

        impl ParamId {
            pub const ALL: &'static [ParamId] = &[$(ParamId::$variant),*];

            pub fn name(self) -> &'static str {
                match self { $(ParamId::$variant => $name),* }
            }

            pub fn from_name(name: &str) -> Option<ParamId> {
                match name { $($name => Some(ParamId::$variant),)* _ => None }
            }
        }
    };
}

params! {
    E => "E",
    MMatch => "m_match",
    Wq => "W_q",
    Wk => "W_k",
    Wv => "W_v",
    Wo => "W_o",
    BO => "b_o",
    WCls => "W_cls",
    BCls => "b_cls",
    Wa => "W_a",
    BA => "b_a",
    V => "v",
    WaPrime => "W_a_prime",
    BAPrime => "b_a_prime",
    VPrime => "v_prime",
    MAns => "m_ans",
    MRef => "m_ref",
    Wh => "W_h",
    BH => "b_h",
    WOut => "W_out",
    BOut => "b_out",
    WPtr => "W_ptr",
    WGate => "w_gate",
    BGate => "b_gate",
    WR => "w_r",
    BR => "b_r",
}

impl ParamId {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn shape(self, c: &ModelConfig) -> (usize, usize) {
        use ParamId::*;
        let (v, d, da, dh) = (c.vocab_size, c.d, c.d_a, c.d_h);
        match self {
            E => (v, d),
            MMatch | BO | WCls | MAns | MRef | WR => (1, d),
            Wq | Wk | Wv | Wo => (d, d),
            BCls | BGate | BR => (1, 1),
            Wa => (da, d),
            BA | V | BAPrime | VPrime => (1, da),
            WaPrime => (da, 1),
            Wh => (dh, 4 * d),
            BH | WGate => (1, dh),
            WOut => (v, dh),
            BOut => (1, v),
            WPtr => (d, dh),
        }
    }

    pub fn is_bias(self) -> bool {
        use ParamId::*;
        matches!(self, BO | BCls | BA | BAPrime | BH | BOut | BGate | BR)
    }

    /// Parameters that make up the sentence and ranking attention.
    pub fn is_attention(self) -> bool {
        use ParamId::*;
        matches!(self, Wa | BA | V | WaPrime | BAPrime | VPrime)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn zeros(config: ModelConfig) -> Self {
        let tensors = ParamId::ALL
            .iter()
            .map(|p| {
                let (r, c) = p.shape(&config);
                Tensor::zeros(r, c)
            })
            .collect();
        Self { config, tensors }
    }

    /// Uniform(-0.1, 0.1) weights and zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let mut params = Self::zeros(config);
        let mut rng = stream(seed, "model/init");
        for &id in ParamId::ALL {
            if id.is_bias() {
                continue;
            }
            for x in params.tensors[id.index()].data_mut() {
                *x = rng.gen_range(-0.1..0.1);
            }
        }
        params
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.index()]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.index()]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let want = id.shape(&self.config);
        if value.shape() != want {
            return Err(Error::Validation(format!(
                "{} expects shape {want:?}, got {:?}",
                id.name(),
                value.shape()
            )));
        }
        self.tensors[id.index()] = value;
        Ok(())
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn max_abs_diff(&self, other: &ModelParams) -> f64 {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }

    /// Zeroes the attention parameters so every α and β is uniform.
    pub fn zero_attention(&mut self) {
        for &id in ParamId::ALL {
            if id.is_attention() {
                self.tensors[id.index()].data_mut().fill(0.0);
            }
        }
    }
}

/// Gradients for every parameter; tensors absent from a loss are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    pub tensors: Vec<Tensor>,
}

impl Grads {
    pub fn zeros(config: &ModelConfig) -> Self {
        Self {
            tensors: ModelParams::zeros(*config).tensors,
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.index()]
    }

    pub fn add_scaled(&mut self, other: &Grads, k: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += k * y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales to global norm `max` if larger.
    pub fn clip_norm(&mut self, max: f64) {
        let n = self.norm();
        if n > max {
            let k = max / n;
            for t in &mut self.tensors {
                t.data_mut().iter_mut().for_each(|x| *x *= k);
            }
        }
    }
}

/// Reverse-mode gradients of `loss` for every parameter in `params`.
pub fn gradients(tape: &Tape, loss: Var, config: &ModelConfig) -> Result<Grads> {
    let mut raw = tape.backward(loss)?;
    let mut out = Grads::zeros(config);
    for &id in ParamId::ALL {
        if let Some(g) = raw.take(id.index()) {
            out.tensors[id.index()] = g;
        }
    }
    Ok(out)
}

/// How sentence and paragraph scores are pooled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Attention,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    Answer,
    Refusal,
}

impl Mode {
    pub fn from_decision(y_pred: bool) -> Self {
        if y_pred {
            Mode::Answer
        } else {
            Mode::Refusal
        }
    }
}

/// Token ids of one query and its ranked context.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prepared {
    pub query: Vec<usize>,
    pub paragraphs: Vec<Vec<Vec<usize>>>,
}

impl Prepared {
    pub fn new(ex: &Example, vocab: &Vocab) -> Self {
        Self {
            query: vocab.encode(&ex.query),
            paragraphs: ex
                .context
                .paragraphs
                .iter()
                .map(|p| p.sentences.iter().map(|s| vocab.encode(&s.tokens)).collect())
                .collect(),
        }
    }

    pub fn check(&self, vocab_size: usize) -> Result<()> {
        if self.query.is_empty() {
            return Err(Error::Validation("empty query".into()));
        }
        if self.paragraphs.is_empty() || self.paragraphs.iter().any(|p| p.is_empty()) {
            return Err(Error::Validation("context needs non-empty paragraphs".into()));
        }
        let all = self
            .query
            .iter()
            .chain(self.paragraphs.iter().flatten().flatten());
        for &t in all {
            if t >= vocab_size {
                return Err(Error::Validation(format!(
                    "token index {t} out of range for vocabulary of {vocab_size}"
                )));
            }
        }
        if self.paragraphs.iter().flatten().any(|s| s.is_empty()) {
            return Err(Error::Validation("empty sentence".into()));
        }
        Ok(())
    }

    pub fn sentence_count(&self) -> usize {
        self.paragraphs.iter().map(Vec::len).sum()
    }

    /// Context tokens in reading order.
    pub fn context_tokens(&self) -> Vec<usize> {
        self.paragraphs.iter().flatten().flatten().copied().collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSentence {
    pub states: Tensor,
    pub h_cls: Vec<f64>,
    pub h_k: Vec<f64>,
    pub q_bar: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedContext {
    pub sentences: Vec<Vec<EncodedSentence>>,
}

/// One encoder pass per sentence over `[CLS] query [SEP] sentence`.
pub fn encode(query: &[usize], paragraphs: &[Vec<Vec<usize>>], params: &ModelParams) -> Result<EncodedContext> {
    let prep = Prepared {
        query: query.to_vec(),
        paragraphs: paragraphs.to_vec(),
    };
    prep.check(params.config.vocab_size)?;
    let mut g = Graph::new(params);
    let mut sentences = Vec::new();
    for p in &prep.paragraphs {
        let mut row = Vec::new();
        for s in p {
            let pass = g.sentence_pass(&prep.query, s);
            let t = &g.tape;
            row.push(EncodedSentence {
                states: t.value(pass.states).clone(),
                h_cls: t.value(pass.cls).data().to_vec(),
                h_k: t.value(pass.hk).data().to_vec(),
                q_bar: t.value(pass.qbar).data().to_vec(),
            });
        }
        sentences.push(row);
    }
    Ok(EncodedContext { sentences })
}

/// ŷ = σ(W_cls·h + b_cls), the probability that the query is answerable.
pub fn classify(h_cls: &[f64], params: &ModelParams) -> f64 {
    let w = params.get(ParamId::WCls).data();
    let z: f64 = w.iter().zip(h_cls).map(|(a, b)| a * b).sum::<f64>() + params.get(ParamId::BCls).data()[0];
    crate::autodiff::sigmoid(z)
}

/// Inclusive threshold.
pub fn decide(y_hat: f64, tau: f64) -> bool {
    y_hat >= tau
}

pub fn sentence_attention(h: &[Vec<f64>], params: &ModelParams) -> Vec<f64> {
    let d = params.config.d;
    let mut g = Graph::new(params);
    let data = h.iter().flat_map(|r| r.iter().copied()).collect();
    let hk = g.tape.constant(Tensor::new(h.len(), d, data));
    let e = g.sentence_energies(hk);
    let t = g.tape.transpose(e);
    let a = g.tape.softmax_rows(t);
    g.tape.value(a).data().to_vec()
}

fn convex(weights: &[f64], scores: &[f64]) -> Result<f64> {
    if weights.len() != scores.len() || weights.is_empty() {
        return Err(Error::Validation(format!(
            "{} weights for {} scores",
            weights.len(),
            scores.len()
        )));
    }
    Ok(weights.iter().zip(scores).map(|(a, b)| a * b).sum())
}

/// ŷ_P = Σ α_k ŷ_k
pub fn paragraph_score(alpha: &[f64], y: &[f64]) -> Result<f64> {
    convex(alpha, y)
}

pub fn ranking_attention(yp: &[f64], params: &ModelParams) -> Vec<f64> {
    let mut g = Graph::new(params);
    let col = g.tape.constant(Tensor::column(yp.to_vec()));
    let e = g.ranking_energies(col);
    let t = g.tape.transpose(e);
    let b = g.tape.softmax_rows(t);
    g.tape.value(b).data().to_vec()
}

/// ŷ_D = Σ β_m ŷ_P,m
pub fn ranking_score(beta: &[f64], yp: &[f64]) -> Result<f64> {
    convex(beta, yp)
}

/// Unweighted means in place of the attention pooling.
pub fn mean_pool_scores(yk: &[Vec<f64>]) -> Result<(Vec<f64>, f64)> {
    if yk.is_empty() || yk.iter().any(Vec::is_empty) {
        return Err(Error::Validation("mean pooling needs non-empty lists".into()));
    }
    let yp: Vec<f64> = yk.iter().map(|p| p.iter().sum::<f64>() / p.len() as f64).collect();
    let yd = yp.iter().sum::<f64>() / yp.len() as f64;
    Ok((yp, yd))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnswerabilityOutput {
    pub sentence_scores: Vec<Vec<f64>>,
    pub sentence_attn: Vec<Vec<f64>>,
    pub paragraph_scores: Vec<f64>,
    pub paragraph_attn: Vec<f64>,
    pub ranking_score: f64,
    pub y_pred: bool,
}

/// Full hierarchy for one input.
pub fn answerability(params: &ModelParams, input: &Prepared, agg: Aggregation, tau: f64) -> Result<AnswerabilityOutput> {
    input.check(params.config.vocab_size)?;
    let mut g = Graph::new(params);
    let h = g.hierarchy(input, agg);
    Ok(g.answerability_output(&h, tau))
}

/// Decoder-side conditioning for one input.
pub struct DecoderState<'p> {
    graph: Graph<'p>,
    hier: HierVars,
}

impl<'p> DecoderState<'p> {
    pub fn new(params: &'p ModelParams, input: &Prepared, agg: Aggregation) -> Result<Self> {
        input.check(params.config.vocab_size)?;
        let mut graph = Graph::new(params);
        let hier = graph.hierarchy(input, agg);
        Ok(Self { graph, hier })
    }

    pub fn ranking_score(&self) -> f64 {
        self.graph.tape.scalar(self.hier.yd)
    }

    /// Next-token distribution after `prefix`, which must start with BOS.
    pub fn step(&mut self, prefix: &[usize], mode: Mode) -> Result<Vec<f64>> {
        check_prefix(prefix, self.graph.params.config.vocab_size)?;
        let tape_len = self.graph.tape.len();
        let p = self.graph.decode_step(self.hier.ctx, &self.hier.sources, prefix, mode);
        let out = self.graph.tape.value(p).data().to_vec();
        self.graph.tape.truncate(tape_len);
        Ok(out)
    }
}

pub(crate) fn check_prefix(prefix: &[usize], vocab_size: usize) -> Result<()> {
    if prefix.is_empty() {
        return Err(Error::Validation("decoder prefix is empty".into()));
    }
    if prefix[0] != crate::corpus::BOS {
        return Err(Error::Validation("decoder prefix must start with BOS".into()));
    }
    if let Some(t) = prefix.iter().find(|&&t| t >= vocab_size) {
        return Err(Error::Validation(format!("token index {t} out of range")));
    }
    Ok(())
}

/// Single decoder step.
pub fn decode_step(prefix: &[usize], input: &Prepared, mode: Mode, params: &ModelParams) -> Result<Vec<f64>> {
    DecoderState::new(params, input, Aggregation::Attention)?.step(prefix, mode)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenerateOptions {
    pub tau: f64,
    pub max_len: usize,
    /// 0 means greedy.
    pub temperature: f64,
    pub seed: u64,
    pub aggregation: Aggregation,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            tau: 0.5,
            max_len: 24,
            temperature: 0.0,
            seed: 0,
            aggregation: Aggregation::Attention,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Generation {
    pub y_pred: bool,
    pub ranking_score: f64,
    /// Generated tokens, EOS excluded.
    pub tokens: Vec<usize>,
    pub hit_eos: bool,
}

/// Picks a token from `p` at `temperature`; 0 is argmax with ties to the
/// lowest index.
pub fn pick_token(p: &[f64], temperature: f64, rng: &mut Rng) -> usize {
    if temperature <= 0.0 {
        let mut best = 0;
        for (i, &v) in p.iter().enumerate() {
            if v > p[best] {
                best = i;
            }
        }
        return best;
    }
    let logits: Vec<f64> = p
        .iter()
        .map(|&v| if v > 0.0 { v.ln() / temperature } else { f64::NEG_INFINITY })
        .collect();
    let q = softmax(&logits);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &v) in q.iter().enumerate() {
        if v > 0.0 {
            last = i;
            acc += v;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Decide answerability, then decode in the matching mode.
pub fn generate(params: &ModelParams, input: &Prepared, opts: &GenerateOptions) -> Result<Generation> {
    if opts.max_len == 0 {
        return Err(Error::Validation("max_len must be at least 1".into()));
    }
    let mut state = DecoderState::new(params, input, opts.aggregation)?;
    let yd = state.ranking_score();
    let y_pred = decide(yd, opts.tau);
    let mode = Mode::from_decision(y_pred);
    let mut rng = stream(opts.seed, "model/generate");
    let mut prefix = vec![crate::corpus::BOS];
    let mut hit_eos = false;
    for _ in 0..opts.max_len {
        let p = state.step(&prefix, mode)?;
        let t = pick_token(&p, opts.temperature, &mut rng);
        if t == EOS {
            hit_eos = true;
            break;
        }
        prefix.push(t);
    }
    prefix.remove(0);
    Ok(Generation {
        y_pred,
        ranking_score: yd,
        tokens: prefix,
        hit_eos,
    })
}

/// Scalar reward for `response` given the query and context.
pub fn reward_score(params: &ModelParams, input: &Prepared, response: &[usize]) -> Result<f64> {
    input.check(params.config.vocab_size)?;
    if response.is_empty() {
        return Err(Error::Validation("reward needs a non-empty response".into()));
    }
    if response.iter().any(|&t| t >= params.config.vocab_size) {
        return Err(Error::Validation("response token out of range".into()));
    }
    let mut g = Graph::new(params);
    let r = g.reward(input, response);
    Ok(g.tape.scalar(r))
}
