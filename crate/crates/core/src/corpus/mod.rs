//! Dataset schema, synthetic generation, vocabulary and preference pairs.

mod generate;
mod io;
mod preference;
mod vocab;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use generate::{generate_dataset, Counts, Dataset, GenerationSpec, Mix, Range};
pub use io::{load_dataset, load_pairs, save_dataset, save_pairs};
pub use preference::{make_preference_pairs, Candidate, PreferencePair, Side};
pub use vocab::{build_vocab, dataset_vocab, Vocab, BOS, CLS, EOS, PAD, SEP, UNK};

pub const REASON_STEM: [&str; 7] = ["The", "context", "does", "not", "contain", "details", "about"];
pub const SUGGESTION_STEM: [&str; 7] = ["You", "might", "try", "providing", "more", "details", "about"];
pub const BARE_REFUSAL: [&str; 3] = ["I", "cannot", "answer."];

/// Upper bounds enforced on every example read from disk.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Limits {
    pub max_sentence_len: usize,
    pub max_sentences: usize,
    pub max_paragraphs: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            max_sentence_len: 16,
            max_sentences: 5,
            max_paragraphs: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sentence {
    pub tokens: Vec<String>,
    pub answerable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Paragraph {
    pub sentences: Vec<Sentence>,
    pub answerable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedContext {
    pub paragraphs: Vec<Paragraph>,
    pub answerable: bool,
}

impl RankedContext {
    /// Builds a context from raw sentence labels, deriving the upper levels.
    pub fn from_labels(paragraphs: Vec<Vec<(Vec<String>, bool)>>) -> Result<Self> {
        let mut ctx = RankedContext {
            paragraphs: paragraphs
                .into_iter()
                .map(|p| Paragraph {
                    sentences: p
                        .into_iter()
                        .map(|(tokens, answerable)| Sentence { tokens, answerable })
                        .collect(),
                    answerable: false,
                })
                .collect(),
            answerable: false,
        };
        let (_, para, rank) = derive_hierarchical_labels(&ctx)?;
        for (p, l) in ctx.paragraphs.iter_mut().zip(para) {
            p.answerable = l;
        }
        ctx.answerable = rank;
        Ok(ctx)
    }

    pub fn sentences(&self) -> impl Iterator<Item = &Sentence> {
        self.paragraphs.iter().flat_map(|p| p.sentences.iter())
    }

    pub fn sentence_count(&self) -> usize {
        self.paragraphs.iter().map(|p| p.sentences.len()).sum()
    }
}

/// Sentence, paragraph and ranking labels under OR propagation.
pub fn derive_hierarchical_labels(
    context: &RankedContext,
) -> Result<(Vec<Vec<bool>>, Vec<bool>, bool)> {
    if context.paragraphs.is_empty() {
        return Err(Error::Validation("context has no paragraphs".into()));
    }
    let mut sentences = Vec::with_capacity(context.paragraphs.len());
    let mut paragraphs = Vec::with_capacity(context.paragraphs.len());
    for (m, p) in context.paragraphs.iter().enumerate() {
        if p.sentences.is_empty() {
            return Err(Error::Validation(format!("paragraph {m} has no sentences")));
        }
        let labels: Vec<bool> = p.sentences.iter().map(|s| s.answerable).collect();
        paragraphs.push(labels.iter().any(|&l| l));
        sentences.push(labels);
    }
    let ranking = paragraphs.iter().any(|&l| l);
    Ok((sentences, paragraphs, ranking))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum UnanswerabilityType {
    Answerable,
    Missing,
    Contradictory,
    Ambiguous,
}

impl UnanswerabilityType {
    pub const ALL: [UnanswerabilityType; 4] = [
        UnanswerabilityType::Answerable,
        UnanswerabilityType::Missing,
        UnanswerabilityType::Contradictory,
        UnanswerabilityType::Ambiguous,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            UnanswerabilityType::Answerable => "ANSWERABLE",
            UnanswerabilityType::Missing => "MISSING",
            UnanswerabilityType::Contradictory => "CONTRADICTORY",
            UnanswerabilityType::Ambiguous => "AMBIGUOUS",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ResponseKind {
    Answer,
    Refusal,
}

/// Half-open token range `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl From<[usize; 2]> for Span {
    fn from(v: [usize; 2]) -> Self {
        Span { start: v[0], end: v[1] }
    }
}

impl From<Span> for [usize; 2] {
    fn from(s: Span) -> Self {
        [s.start, s.end]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetResponse {
    pub kind: ResponseKind,
    pub tokens: Vec<String>,
    pub reason_span: Option<Span>,
    pub suggestion_span: Option<Span>,
}

impl TargetResponse {
    pub fn answer(tokens: Vec<String>) -> Self {
        Self {
            kind: ResponseKind::Answer,
            tokens,
            reason_span: None,
            suggestion_span: None,
        }
    }

    /// The full two-part refusal for `attribute` of `entity`.
    pub fn refusal(attribute: &str, entity: &str) -> Self {
        let tokens = refusal_tokens(attribute, entity);
        let reason_end = REASON_STEM.len() + 4;
        Self {
            kind: ResponseKind::Refusal,
            reason_span: Some(Span { start: 0, end: reason_end }),
            suggestion_span: Some(Span {
                start: reason_end,
                end: tokens.len(),
            }),
            tokens,
        }
    }

    pub fn reason_tokens(&self) -> Option<&[String]> {
        self.reason_span.map(|s| &self.tokens[s.start..s.end])
    }

    pub fn suggestion_tokens(&self) -> Option<&[String]> {
        self.suggestion_span.map(|s| &self.tokens[s.start..s.end])
    }
}

pub fn refusal_tokens(attribute: &str, entity: &str) -> Vec<String> {
    let mut out: Vec<String> = REASON_STEM.iter().map(|s| s.to_string()).collect();
    out.extend([attribute, "of", entity, "."].map(String::from));
    out.extend(SUGGESTION_STEM.iter().map(|s| s.to_string()));
    out.extend([entity, "."].map(String::from));
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub query: Vec<String>,
    pub context: RankedContext,
    pub y: bool,
    pub utype: UnanswerabilityType,
    pub target: TargetResponse,
}

impl Example {
    /// Checks every schema invariant, reporting the example id on failure.
    pub fn validate(&self, limits: &Limits) -> Result<()> {
        let fail = |msg: String| Err(Error::invariant(&self.id, msg));
        if self.query.is_empty() {
            return fail("empty query".into());
        }
        let ctx = &self.context;
        if ctx.paragraphs.is_empty() || ctx.paragraphs.len() > limits.max_paragraphs {
            return fail(format!(
                "paragraph count {} outside 1..={}",
                ctx.paragraphs.len(),
                limits.max_paragraphs
            ));
        }
        for p in &ctx.paragraphs {
            if p.sentences.is_empty() || p.sentences.len() > limits.max_sentences {
                return fail(format!(
                    "sentence count {} outside 1..={}",
                    p.sentences.len(),
                    limits.max_sentences
                ));
            }
            for s in &p.sentences {
                if s.tokens.is_empty() || s.tokens.len() > limits.max_sentence_len {
                    return fail(format!(
                        "sentence length {} outside 1..={}",
                        s.tokens.len(),
                        limits.max_sentence_len
                    ));
                }
            }
        }
        let (_, para, rank) =
            derive_hierarchical_labels(ctx).map_err(|e| Error::invariant(&self.id, e.to_string()))?;
        if ctx.paragraphs.iter().zip(&para).any(|(p, &l)| p.answerable != l) {
            return fail("paragraph labels disagree with sentence labels".into());
        }
        if ctx.answerable != rank {
            return fail("context label disagrees with paragraph labels".into());
        }
        if self.y != rank {
            return fail(format!("y={} but sentence labels give {}", u8::from(self.y), u8::from(rank)));
        }
        if (self.utype == UnanswerabilityType::Answerable) != self.y {
            return fail(format!("utype {} inconsistent with y={}", self.utype.as_str(), u8::from(self.y)));
        }
        let t = &self.target;
        if (t.kind == ResponseKind::Answer) != self.y {
            return fail(format!("target kind {:?} inconsistent with y={}", t.kind, u8::from(self.y)));
        }
        if t.tokens.is_empty() {
            return fail("empty target".into());
        }
        let n = t.tokens.len();
        for s in [t.reason_span, t.suggestion_span].into_iter().flatten() {
            if s.start >= s.end || s.end > n {
                return fail(format!("span [{}, {}) out of bounds for {n} tokens", s.start, s.end));
            }
        }
        if let (Some(a), Some(b)) = (t.reason_span, t.suggestion_span) {
            if a.start < b.end && b.start < a.end {
                return fail("reason and suggestion spans overlap".into());
            }
        }
        if t.kind == ResponseKind::Answer && (t.reason_span.is_some() || t.suggestion_span.is_some()) {
            return fail("answer target carries refusal spans".into());
        }
        Ok(())
    }

    /// Queried (attribute, entity), recovered from the query templates.
    pub fn query_slots(&self) -> Option<(&str, &str)> {
        parse_query(&self.query)
    }
}

/// Parses "what is the A of E ?" and "why is the A of E V ?".
pub fn parse_query(q: &[String]) -> Option<(&str, &str)> {
    match q.iter().map(String::as_str).collect::<Vec<_>>().as_slice() {
        ["what", "is", "the", a, "of", e, "?"] => Some((a, e)),
        ["why", "is", "the", a, "of", e, _, "?"] => Some((a, e)),
        _ => None,
    }
}

/// Parses a fact sentence into (entity, attribute, value).
pub fn parse_fact(s: &[String]) -> Option<(&str, &str, &str)> {
    match s.iter().map(String::as_str).collect::<Vec<_>>().as_slice() {
        ["the", a, "of", e, "is", v, "."] => Some((e, a, v)),
        [e, "'s", a, "is", v, "."] => Some((e, a, v)),
        _ => None,
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(String::from).collect()
}

pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}
