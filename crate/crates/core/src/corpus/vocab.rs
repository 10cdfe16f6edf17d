use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Dataset, Example, BARE_REFUSAL, REASON_STEM, SUGGESTION_STEM};
use crate::error::{Error, Result};

pub const CLS: usize = 0;
pub const SEP: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const PAD: usize = 4;
pub const UNK: usize = 5;

const RESERVED: [&str; 6] = ["[CLS]", "[SEP]", "[BOS]", "[EOS]", "[PAD]", "[UNK]"];

/// Token table with the six markers pinned at indices 0..6.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

impl TryFrom<VocabFile> for Vocab {
    type Error = Error;

    fn try_from(f: VocabFile) -> Result<Self> {
        Vocab::from_tokens(f.tokens)
    }
}

impl From<Vocab> for VocabFile {
    fn from(v: Vocab) -> Self {
        VocabFile { tokens: v.tokens }
    }
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Validation(
                "vocabulary must start with the six reserved markers".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    /// Appends tokens not yet present, in the given order.
    pub fn extend<'a>(&mut self, tokens: impl IntoIterator<Item = &'a str>) {
        for t in tokens {
            if !self.index.contains_key(t) {
                self.index.insert(t.to_string(), self.tokens.len());
                self.tokens.push(t.to_string());
            }
        }
    }
}

/// Vocabulary over every surface token, most frequent first, ties broken
/// lexicographically.
pub fn build_vocab(datasets: &[&[Example]]) -> Vocab {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for ex in datasets.iter().flat_map(|d| d.iter()) {
        let ctx = ex.context.sentences().flat_map(|s| s.tokens.iter());
        for t in ex.query.iter().chain(ctx).chain(ex.target.tokens.iter()) {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    let mut surface: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(t, _)| !RESERVED.contains(t))
        .collect();
    surface.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let tokens = RESERVED
        .iter()
        .map(|s| s.to_string())
        .chain(surface.into_iter().map(|(t, _)| t.to_string()))
        .collect();
    Vocab::from_tokens(tokens).expect("reserved prefix and unique tokens by construction")
}

/// Vocabulary over every split plus all refusal-template tokens, so
/// responses the corpus never contains (the bare refusal) stay encodable.
pub fn dataset_vocab(d: &Dataset) -> Vocab {
    let mut v = build_vocab(&[&d.train, &d.valid, &d.test]);
    v.extend(REASON_STEM.iter().chain(&SUGGESTION_STEM).chain(&BARE_REFUSAL).copied());
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{RankedContext, TargetResponse, UnanswerabilityType};

    fn example(query: &[&str], sentence: &[&str]) -> Example {
        let tok = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        Example {
            id: "t".into(),
            query: tok(query),
            context: RankedContext::from_labels(vec![vec![(tok(sentence), true)]]).unwrap(),
            y: true,
            utype: UnanswerabilityType::Answerable,
            target: TargetResponse::answer(tok(&sentence[..1])),
        }
    }

    #[test]
    fn two_token_example_gives_eight_entries() {
        let v = build_vocab(&[&[example(&["a"], &["b"])]]);
        assert_eq!(v.len(), 8);
        assert_eq!(v.token(CLS), "[CLS]");
        assert_eq!(v.token(UNK), "[UNK]");
    }

    #[test]
    fn frequency_then_lexicographic_order() {
        let v = build_vocab(&[&[example(&["b", "c", "a"], &["c"])]]);
        assert_eq!(&v.tokens()[6..], &["c", "a", "b"]);
    }

    #[test]
    fn union_of_datasets_matches_concatenation() {
        let a = vec![example(&["x", "y"], &["y"])];
        let b = vec![example(&["z"], &["x", "w"])];
        let joined: Vec<Example> = a.iter().chain(&b).cloned().collect();
        assert_eq!(build_vocab(&[&a, &b]), build_vocab(&[&joined]));
    }

    #[test]
    fn unknown_tokens_map_to_unk_and_round_trip_json() {
        let mut v = build_vocab(&[&[example(&["a"], &["b"])]]);
        assert_eq!(v.id("nope"), UNK);
        v.extend(["I", "a"]);
        assert_eq!(v.len(), 9);
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocab = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
        assert!(serde_json::from_str::<Vocab>(r#"{"tokens":["a"]}"#).is_err());
    }

    #[test]
    fn dataset_vocab_covers_refusal_inventory() {
        let d = Dataset {
            train: vec![example(&["what", "x"], &["x", "is", "y"])],
            valid: Vec::new(),
            test: Vec::new(),
        };
        let v = dataset_vocab(&d);
        for t in BARE_REFUSAL.iter().chain(&REASON_STEM).chain(&SUGGESTION_STEM) {
            assert_ne!(v.id(t), UNK, "{t}");
        }
        assert_ne!(v.id("what"), UNK);
    }
}
