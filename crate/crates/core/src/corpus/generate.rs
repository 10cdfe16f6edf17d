use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Example, Limits, RankedContext, TargetResponse, UnanswerabilityType};
use crate::error::{Error, Result};
use crate::rng::{stream, Rng};

const ATTRIBUTES: [&str; 16] = [
    "color", "size", "origin", "owner", "shape", "weight", "flavor", "height", "founder",
    "capital", "climate", "material", "language", "currency", "genre", "rank",
];

const TEMPLATE_WORDS: [&str; 24] = [
    "the", "of", "is", "what", "why", "'s", ".", "?", "The", "context", "does", "not", "contain",
    "details", "about", "You", "might", "try", "providing", "more", "I", "cannot", "answer.",
    "a",
];

const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const NUCLEI: [&str; 5] = ["a", "e", "i", "o", "u"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Counts {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

/// Share of each unanswerability type.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mix {
    #[serde(rename = "ANSWERABLE", default)]
    pub answerable: f64,
    #[serde(rename = "MISSING", default)]
    pub missing: f64,
    #[serde(rename = "CONTRADICTORY", default)]
    pub contradictory: f64,
    #[serde(rename = "AMBIGUOUS", default)]
    pub ambiguous: f64,
}

impl Mix {
    fn as_array(&self) -> [f64; 4] {
        [self.answerable, self.missing, self.contradictory, self.ambiguous]
    }
}

/// Inclusive `[min, max]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Range {
    pub min: usize,
    pub max: usize,
}

impl From<[usize; 2]> for Range {
    fn from(v: [usize; 2]) -> Self {
        Range { min: v[0], max: v[1] }
    }
}

impl From<Range> for [usize; 2] {
    fn from(r: Range) -> Self {
        [r.min, r.max]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationSpec {
    pub counts: Counts,
    pub mix: Mix,
    pub entities: usize,
    pub attributes: usize,
    pub values: usize,
    pub sentences_per_paragraph: Range,
    pub paragraphs: Range,
    /// Fraction of non-contradictory queries phrased with a presupposed value.
    pub presupposition_share: f64,
    pub seed: u64,
}

impl Default for GenerationSpec {
    fn default() -> Self {
        Self {
            counts: Counts {
                train: 2000,
                valid: 400,
                test: 400,
            },
            mix: Mix {
                answerable: 0.4,
                missing: 0.3,
                contradictory: 0.2,
                ambiguous: 0.1,
            },
            entities: 60,
            attributes: 12,
            values: 12,
            sentences_per_paragraph: Range { min: 1, max: 5 },
            paragraphs: Range { min: 1, max: 4 },
            presupposition_share: 0.25,
            seed: 7,
        }
    }
}

impl GenerationSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("counts.train", self.counts.train),
            ("counts.valid", self.counts.valid),
            ("counts.test", self.counts.test),
        ];
        for (field, n) in counts {
            if n == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        let names = ["mix.ANSWERABLE", "mix.MISSING", "mix.CONTRADICTORY", "mix.AMBIGUOUS"];
        for (name, p) in names.iter().zip(self.mix.as_array()) {
            if !p.is_finite() || p < 0.0 {
                return Err(Error::config(*name, format!("proportion {p} is not a nonnegative number")));
            }
        }
        let total: f64 = self.mix.as_array().iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::config("mix", format!("proportions sum to {total}, expected 1")));
        }
        if self.entities < 2 {
            return Err(Error::config("entities", "need at least 2"));
        }
        if self.attributes == 0 || self.attributes > ATTRIBUTES.len() {
            return Err(Error::config(
                "attributes",
                format!("must be in 1..={}", ATTRIBUTES.len()),
            ));
        }
        if self.values < 2 {
            return Err(Error::config("values", "need at least 2"));
        }
        if self.entities * self.attributes < 6 {
            return Err(Error::config("entities", "too few (entity, attribute) pairs to split"));
        }
        let limits = Limits::default();
        check_range("sentences_per_paragraph", self.sentences_per_paragraph, limits.max_sentences)?;
        check_range("paragraphs", self.paragraphs, limits.max_paragraphs)?;
        if !(0.0..=1.0).contains(&self.presupposition_share) {
            return Err(Error::config("presupposition_share", "must be in [0, 1]"));
        }
        Ok(())
    }
}

fn check_range(field: &str, r: Range, cap: usize) -> Result<()> {
    if r.min == 0 || r.min > r.max || r.max > cap {
        return Err(Error::config(
            field,
            format!("range [{}, {}] must satisfy 1 <= min <= max <= {cap}", r.min, r.max),
        ));
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

type Pair = (usize, usize);

struct World {
    entities: Vec<String>,
    attributes: Vec<String>,
    /// values[a][j]
    values: Vec<Vec<String>>,
    /// fact[(e, a)] = value index
    facts: BTreeMap<Pair, usize>,
}

impl World {
    fn new(spec: &GenerationSpec, rng: &mut Rng) -> Self {
        let mut taken: BTreeSet<String> = TEMPLATE_WORDS.iter().map(|s| s.to_string()).collect();
        taken.extend(ATTRIBUTES.iter().map(|s| s.to_string()));
        let mut word = |rng: &mut Rng, syllables: usize| loop {
            let w: String = (0..syllables)
                .map(|_| {
                    format!(
                        "{}{}",
                        ONSETS[rng.gen_range(0..ONSETS.len())],
                        NUCLEI[rng.gen_range(0..NUCLEI.len())]
                    )
                })
                .collect();
            if taken.insert(w.clone()) {
                return w;
            }
        };
        let entities = (0..spec.entities).map(|_| word(rng, 2)).collect();
        let attributes: Vec<String> = ATTRIBUTES[..spec.attributes].iter().map(|s| s.to_string()).collect();
        let values = (0..spec.attributes)
            .map(|_| (0..spec.values).map(|_| word(rng, 3)).collect())
            .collect();
        let mut facts = BTreeMap::new();
        for e in 0..spec.entities {
            for a in 0..spec.attributes {
                facts.insert((e, a), rng.gen_range(0..spec.values));
            }
        }
        Self {
            entities,
            attributes,
            values,
            facts,
        }
    }

    fn value(&self, p: Pair) -> &str {
        &self.values[p.1][self.facts[&p]]
    }

    fn sentence(&self, p: Pair, rng: &mut Rng) -> Vec<String> {
        let (e, a, v) = (&self.entities[p.0], &self.attributes[p.1], self.value(p));
        let words: Vec<&str> = if rng.gen_bool(0.5) {
            vec!["the", a, "of", e, "is", v, "."]
        } else {
            vec![e, "'s", a, "is", v, "."]
        };
        words.into_iter().map(String::from).collect()
    }
}

/// Splits `n` items over weights by largest remainder.
fn apportion(n: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    let mut out: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&i, &j| {
        let (ri, rj) = (exact[i] - exact[i].floor(), exact[j] - exact[j].floor());
        rj.partial_cmp(&ri).unwrap().then(i.cmp(&j))
    });
    let mut rest = n - out.iter().sum::<usize>();
    for i in order {
        if rest == 0 {
            break;
        }
        out[i] += 1;
        rest -= 1;
    }
    out
}

struct SplitPool<'w> {
    world: &'w World,
    pairs: Vec<Pair>,
}

impl SplitPool<'_> {
    fn distractor(&self, q: Pair, exclude_entity: bool, rng: &mut Rng) -> Result<Pair> {
        let ok = |p: &&Pair| **p != q && !(exclude_entity && p.0 == q.0);
        let same_entity: Vec<&Pair> = self.pairs.iter().filter(|p| p.0 == q.0).filter(ok).collect();
        let same_attr: Vec<&Pair> = self.pairs.iter().filter(|p| p.1 == q.1).filter(ok).collect();
        let any: Vec<&Pair> = self.pairs.iter().filter(ok).collect();
        let r: f64 = rng.gen();
        let pool = if r < 0.35 && !same_entity.is_empty() {
            &same_entity
        } else if r < 0.7 && !same_attr.is_empty() {
            &same_attr
        } else {
            &any
        };
        pool.choose(rng)
            .map(|p| **p)
            .ok_or_else(|| Error::config("entities", "split has no distractor facts"))
    }

    fn example(
        &self,
        id: String,
        utype: UnanswerabilityType,
        spec: &GenerationSpec,
        rng: &mut Rng,
    ) -> Result<Example> {
        use UnanswerabilityType::*;
        let w = self.world;
        let q = *self.pairs.choose(rng).expect("non-empty split");
        let m_count = rng.gen_range(spec.paragraphs.min..=spec.paragraphs.max);
        let k_counts: Vec<usize> = (0..m_count)
            .map(|_| rng.gen_range(spec.sentences_per_paragraph.min..=spec.sentences_per_paragraph.max))
            .collect();
        let mut paras: Vec<Vec<(Vec<String>, bool)>> = Vec::with_capacity(m_count);
        for &k in &k_counts {
            let mut sentences = Vec::with_capacity(k);
            for _ in 0..k {
                let p = self.distractor(q, utype == Ambiguous, rng)?;
                sentences.push((w.sentence(p, rng), false));
            }
            paras.push(sentences);
        }
        let pm = rng.gen_range(0..m_count);
        let pk = rng.gen_range(0..k_counts[pm]);
        let (attr, ent) = (w.attributes[q.1].as_str(), w.entities[q.0].as_str());
        let value = w.value(q).to_string();
        let what = || {
            ["what", "is", "the", attr, "of", ent, "?"]
                .map(String::from)
                .to_vec()
        };
        let why = |v: &str| {
            ["why", "is", "the", attr, "of", ent, v, "?"]
                .map(String::from)
                .to_vec()
        };
        let other_value = |rng: &mut Rng| {
            let vi = w.facts[&q];
            let mut j = rng.gen_range(0..spec.values - 1);
            if j >= vi {
                j += 1;
            }
            w.values[q.1][j].clone()
        };
        let presuppose = rng.gen_bool(spec.presupposition_share);
        let (query, target) = match utype {
            Answerable => {
                paras[pm][pk] = (w.sentence(q, rng), true);
                let query = if presuppose { why(&value) } else { what() };
                (query, TargetResponse::answer(vec![value.clone()]))
            }
            Contradictory => {
                paras[pm][pk] = (w.sentence(q, rng), false);
                let v = other_value(rng);
                (why(&v), TargetResponse::refusal(attr, ent))
            }
            Missing | Ambiguous => {
                let query = if presuppose {
                    let v = if rng.gen_bool(0.5) { value.clone() } else { other_value(rng) };
                    why(&v)
                } else {
                    what()
                };
                (query, TargetResponse::refusal(attr, ent))
            }
        };
        let context = RankedContext::from_labels(paras)?;
        Ok(Example {
            id,
            query,
            y: utype == Answerable,
            context,
            utype,
            target,
        })
    }
}

/// Generates train/valid/test splits that share no (entity, attribute) pair.
pub fn generate_dataset(spec: &GenerationSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut world_rng = stream(spec.seed, "corpus/world");
    let world = World::new(spec, &mut world_rng);
    let mut pairs: Vec<Pair> = world.facts.keys().copied().collect();
    pairs.shuffle(&mut world_rng);

    let counts = [spec.counts.train, spec.counts.valid, spec.counts.test];
    let weights: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    let mut shares = apportion(pairs.len() - 3, &weights);
    shares.iter_mut().for_each(|s| *s += 1);

    let mut out = Vec::with_capacity(3);
    let mut offset = 0;
    for (split, (&n, &share)) in ["train", "valid", "test"].iter().zip(counts.iter().zip(&shares)) {
        let mut split_pairs = pairs[offset..offset + share].to_vec();
        split_pairs.sort_unstable();
        offset += share;
        let pool = SplitPool {
            world: &world,
            pairs: split_pairs,
        };
        let mut rng = stream(spec.seed, &format!("corpus/{split}"));
        let per_type = apportion(n, &spec.mix.as_array());
        let mut types: Vec<UnanswerabilityType> = UnanswerabilityType::ALL
            .iter()
            .zip(&per_type)
            .flat_map(|(&t, &c)| std::iter::repeat(t).take(c))
            .collect();
        types.shuffle(&mut rng);
        let examples = types
            .into_iter()
            .enumerate()
            .map(|(i, t)| pool.example(format!("{split}-{i:05}"), t, spec, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        out.push(examples);
    }
    let test = out.pop().unwrap();
    let valid = out.pop().unwrap();
    let train = out.pop().unwrap();
    Ok(Dataset { train, valid, test })
}
