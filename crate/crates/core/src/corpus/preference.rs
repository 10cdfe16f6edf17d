use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{parse_fact, Example, TargetResponse, BARE_REFUSAL};
use crate::error::{Error, Result};
use crate::rng::stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    A,
    B,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub example_id: String,
    pub response_a: Vec<String>,
    pub response_b: Vec<String>,
    pub preferred: Side,
}

impl PreferencePair {
    /// (preferred, rejected)
    pub fn oriented(&self) -> (&[String], &[String]) {
        match self.preferred {
            Side::A => (&self.response_a, &self.response_b),
            Side::B => (&self.response_b, &self.response_a),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Candidate {
    Gold,
    FullRefusal,
    ReasonOnly,
    SuggestionOnly,
    Bare,
    WrongValue,
}

/// Oracle rank; higher is better.
pub fn oracle_rank(answerable: bool, c: Candidate) -> u8 {
    use Candidate::*;
    match (answerable, c) {
        (false, Gold | FullRefusal) => 4,
        (false, ReasonOnly | SuggestionOnly) => 3,
        (false, Bare) => 2,
        (false, WrongValue) => 1,
        (true, Gold) => 3,
        (true, FullRefusal | ReasonOnly | SuggestionOnly | Bare) => 2,
        (true, WrongValue) => 1,
    }
}

/// Attribute → observed values, recovered from the fact sentences.
pub(crate) fn value_inventory(dataset: &[Example]) -> BTreeMap<String, BTreeSet<String>> {
    let mut inv: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for ex in dataset {
        for s in ex.context.sentences() {
            if let Some((_, a, v)) = parse_fact(&s.tokens) {
                inv.entry(a.to_string()).or_default().insert(v.to_string());
            }
        }
    }
    inv
}

/// Candidate responses for one example, with their oracle ranks.
pub fn candidates(
    ex: &Example,
    inventory: &BTreeMap<String, BTreeSet<String>>,
    rng: &mut crate::rng::Rng,
) -> Vec<(Candidate, Vec<String>, u8)> {
    let slots = ex.query_slots();
    let full = if ex.y {
        slots.map(|(a, e)| TargetResponse::refusal(a, e))
    } else {
        Some(ex.target.clone())
    };
    let mut out: Vec<(Candidate, Vec<String>)> = vec![(Candidate::Gold, ex.target.tokens.clone())];
    if let Some(full) = &full {
        if ex.y {
            out.push((Candidate::FullRefusal, full.tokens.clone()));
        }
        if let Some(r) = full.reason_tokens() {
            out.push((Candidate::ReasonOnly, r.to_vec()));
        }
        if let Some(s) = full.suggestion_tokens() {
            out.push((Candidate::SuggestionOnly, s.to_vec()));
        }
    }
    out.push((Candidate::Bare, BARE_REFUSAL.map(String::from).to_vec()));

    let seen: BTreeSet<&str> = ex
        .context
        .sentences()
        .flat_map(|s| s.tokens.iter())
        .chain(ex.query.iter())
        .chain(ex.target.tokens.iter())
        .map(String::as_str)
        .collect();
    let fresh = |vals: &BTreeSet<String>| -> Vec<String> {
        vals.iter().filter(|v| !seen.contains(v.as_str())).cloned().collect()
    };
    let mut pool = slots
        .and_then(|(a, _)| inventory.get(a))
        .map(fresh)
        .unwrap_or_default();
    if pool.is_empty() {
        pool = inventory.values().flat_map(fresh).collect();
    }
    if let Some(v) = pool.choose(rng) {
        out.push((Candidate::WrongValue, vec![v.clone()]));
    }
    out.into_iter()
        .map(|(c, t)| (c, t, oracle_rank(ex.y, c)))
        .collect()
}

/// Samples `n_pairs` oracle-labelled pairs; equal-rank draws are discarded.
pub fn make_preference_pairs(dataset: &[Example], n_pairs: i64, seed: u64) -> Result<Vec<PreferencePair>> {
    if n_pairs <= 0 {
        return Err(Error::config("n_pairs", "must be positive"));
    }
    if dataset.is_empty() {
        return Err(Error::Validation("preference pairs need a non-empty dataset".into()));
    }
    let inventory = value_inventory(dataset);
    let mut rng = stream(seed, "corpus/pairs");
    let n = n_pairs as usize;
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let ex = &dataset[rng.gen_range(0..dataset.len())];
        let cands = candidates(ex, &inventory, &mut rng);
        let i = rng.gen_range(0..cands.len());
        let mut j = rng.gen_range(0..cands.len() - 1);
        if j >= i {
            j += 1;
        }
        let (a, b) = (&cands[i], &cands[j]);
        if a.2 == b.2 || a.1 == b.1 {
            continue;
        }
        out.push(PreferencePair {
            example_id: ex.id.clone(),
            response_a: a.1.clone(),
            response_b: b.1.clone(),
            preferred: if a.2 > b.2 { Side::A } else { Side::B },
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_dataset, Counts, GenerationSpec};

    fn data() -> Vec<Example> {
        let spec = GenerationSpec {
            counts: Counts {
                train: 60,
                valid: 5,
                test: 5,
            },
            ..GenerationSpec::default()
        };
        generate_dataset(&spec).unwrap().train
    }

    #[test]
    fn full_refusal_beats_bare_when_unanswerable() {
        assert!(oracle_rank(false, Candidate::Gold) > oracle_rank(false, Candidate::Bare));
        assert!(oracle_rank(true, Candidate::Gold) > oracle_rank(true, Candidate::Bare));
        assert!(oracle_rank(true, Candidate::Bare) > oracle_rank(true, Candidate::WrongValue));
        assert!(oracle_rank(false, Candidate::ReasonOnly) > oracle_rank(false, Candidate::Bare));
        assert!(oracle_rank(false, Candidate::Bare) > oracle_rank(false, Candidate::WrongValue));
    }

    #[test]
    fn pairs_follow_oracle_and_are_deterministic() {
        let d = data();
        let inv = value_inventory(&d);
        let p1 = make_preference_pairs(&d, 300, 5).unwrap();
        let p2 = make_preference_pairs(&d, 300, 5).unwrap();
        assert_eq!(p1, p2);
        assert_ne!(p1, make_preference_pairs(&d, 300, 6).unwrap());
        for p in &p1 {
            assert_ne!(p.response_a, p.response_b);
            let ex = d.iter().find(|e| e.id == p.example_id).unwrap();
            let mut rng = stream(0, "t");
            let cands = candidates(ex, &inv, &mut rng);
            let rank = |r: &[String]| {
                cands
                    .iter()
                    .find(|c| c.1 == r)
                    .map(|c| c.2)
                    .unwrap_or(oracle_rank(ex.y, Candidate::WrongValue))
            };
            let (win, lose) = p.oriented();
            assert!(rank(win) > rank(lose), "{p:?}");
        }
    }

    #[test]
    fn wrong_value_is_absent_from_context() {
        let d = data();
        let inv = value_inventory(&d);
        let mut rng = stream(1, "t");
        for ex in &d {
            let c = candidates(ex, &inv, &mut rng);
            let wrong = c.iter().find(|c| c.0 == Candidate::WrongValue).unwrap();
            assert!(ex.context.sentences().all(|s| !s.tokens.contains(&wrong.1[0])));
            assert_ne!(wrong.1, ex.target.tokens);
        }
    }

    #[test]
    fn nonpositive_count_is_a_config_error() {
        let d = data();
        assert!(matches!(make_preference_pairs(&d, 0, 1), Err(Error::Config { .. })));
        assert!(matches!(make_preference_pairs(&d, -3, 1), Err(Error::Config { .. })));
    }
}
