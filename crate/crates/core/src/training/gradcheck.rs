use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::rm::pair_loss;
use super::sft::example_loss;
use super::{RmPair, SftExample};
use crate::corpus::{build_vocab, generate_dataset, make_preference_pairs, Counts, GenerationSpec, BOS};
use crate::error::{Error, Result};
use crate::losses::SftWeights;
use crate::model::{gradients, Aggregation, DecoderState, Grads, Graph, ModelConfig, ModelParams, Mode, ParamId};
use crate::rng::stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossSelector {
    Bce,
    Nll,
    Sft,
    Rm,
    Kl,
}

impl LossSelector {
    pub const ALL: [LossSelector; 5] = [Self::Bce, Self::Nll, Self::Sft, Self::Rm, Self::Kl];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Bce => "bce",
            Self::Nll => "nll",
            Self::Sft => "sft",
            Self::Rm => "rm",
            Self::Kl => "kl",
        }
    }
}

impl fmt::Display for LossSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::Usage(format!("unknown loss `{s}` (expected bce, nll, sft, rm or kl)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Coordinates checked per tensor; smaller tensors are checked fully.
    pub coords_per_tensor: usize,
    /// Denominator floor for the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            tol: 1e-4,
            coords_per_tensor: 200,
            floor: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub loss: LossSelector,
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// Parameter and flat index of the worst coordinate.
    pub worst: String,
    pub pass: bool,
}

/// The selected loss and, on request, its gradient.
struct Objective<'a> {
    selector: LossSelector,
    batch: &'a [SftExample],
    pairs: &'a [RmPair],
    reference: Option<ModelParams>,
}

impl Objective<'_> {
    fn eval(&self, params: &ModelParams, grad: bool) -> Result<(f64, Option<Grads>)> {
        let mut total = 0.0;
        let mut acc = grad.then(|| Grads::zeros(&params.config));
        let mut add = |(l, g): (f64, Option<Grads>), n: usize| {
            total += l / n as f64;
            if let (Some(a), Some(g)) = (acc.as_mut(), g) {
                a.add_scaled(&g, 1.0 / n as f64);
            }
        };
        match self.selector {
            LossSelector::Bce | LossSelector::Nll | LossSelector::Sft => {
                let w = match self.selector {
                    LossSelector::Bce => SftWeights { lambda_cls: 1.0, lambda_gen: 0.0 },
                    LossSelector::Nll => SftWeights { lambda_cls: 0.0, lambda_gen: 1.0 },
                    _ => SftWeights { lambda_cls: 1.0, lambda_gen: 0.5 },
                };
                for ex in self.batch {
                    let l = example_loss(params, ex, Aggregation::Attention, &w, 0.5, grad)?;
                    add((l.total, l.grads), self.batch.len());
                }
            }
            LossSelector::Rm => {
                for p in self.pairs {
                    add(pair_loss(params, p, grad)?, self.pairs.len());
                }
            }
            LossSelector::Kl => {
                let reference = self.reference.as_ref().expect("kl needs a reference");
                for ex in self.batch {
                    add(teacher_forced_kl(params, reference, ex, grad)?, self.batch.len());
                }
            }
        }
        Ok((total, acc))
    }
}

/// Σ_t KL(π_θ ‖ π_ref) along the gold target prefixes.
fn teacher_forced_kl(
    params: &ModelParams,
    reference: &ModelParams,
    ex: &SftExample,
    grad: bool,
) -> Result<(f64, Option<Grads>)> {
    let mode = Mode::from_decision(ex.y);
    let mut refstate = DecoderState::new(reference, &ex.input, Aggregation::Attention)?;
    let mut g = Graph::new(params);
    let h = g.hierarchy(&ex.input, Aggregation::Attention);
    let mut prefix = vec![BOS];
    let mut acc = None;
    for &t in &ex.target {
        let dist = g.decode_step(h.ctx, &h.sources, &prefix, mode);
        let q = refstate.step(&prefix, mode)?;
        let kl = g.tape.kl_const(dist, &q);
        acc = Some(match acc {
            None => kl,
            Some(a) => g.tape.add(a, kl),
        });
        prefix.push(t);
    }
    let loss = acc.ok_or_else(|| Error::Validation("empty target".into()))?;
    let grads = if grad { Some(gradients(&g.tape, loss, &params.config)?) } else { None };
    Ok((g.tape.scalar(loss), grads))
}

/// Compares analytic gradients with central differences on a random
/// subsample of coordinates of every parameter tensor.
pub fn grad_check(
    params: &ModelParams,
    batch: &[SftExample],
    pairs: &[RmPair],
    selector: LossSelector,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let needs_pairs = selector == LossSelector::Rm;
    if (needs_pairs && pairs.is_empty()) || (!needs_pairs && batch.is_empty()) {
        return Err(Error::Validation(format!("gradient check for {selector} has no data")));
    }
    let mut rng = stream(opts.seed, "gradcheck/coords");
    let reference = (selector == LossSelector::Kl).then(|| {
        let mut r = params.clone();
        let mut prng = stream(opts.seed, "gradcheck/reference");
        for t in r.tensors_mut() {
            for x in t.data_mut() {
                *x += prng.gen_range(-0.05..0.05);
            }
        }
        r
    });
    let obj = Objective {
        selector,
        batch,
        pairs,
        reference,
    };
    let fail = |worst: String| GradCheckReport {
        loss: selector,
        max_rel_error: f64::INFINITY,
        coordinates: 0,
        worst,
        pass: false,
    };
    let (l0, grads) = obj.eval(params, true)?;
    if !l0.is_finite() {
        return Ok(fail(format!("loss is {l0} at the base point")));
    }
    let grads = grads.expect("gradients requested");

    let mut probe = params.clone();
    let mut worst = (0.0f64, String::from("none"));
    let mut coordinates = 0;
    for &id in ParamId::ALL {
        let n = params.get(id).len();
        let idx: Vec<usize> = if n <= opts.coords_per_tensor {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, opts.coords_per_tensor).into_vec();
            v.sort_unstable();
            v
        };
        for i in idx {
            let x = params.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = x + opts.eps;
            let (fp, _) = obj.eval(&probe, false)?;
            probe.get_mut(id).data_mut()[i] = x - opts.eps;
            let (fm, _) = obj.eval(&probe, false)?;
            probe.get_mut(id).data_mut()[i] = x;
            if !fp.is_finite() || !fm.is_finite() {
                return Ok(fail(format!("non-finite loss perturbing {}[{i}]", id.name())));
            }
            let numeric = (fp - fm) / (2.0 * opts.eps);
            let analytic = grads.get(id).data()[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(opts.floor);
            coordinates += 1;
            if rel > worst.0 || !rel.is_finite() {
                worst = (rel, format!("{}[{i}]", id.name()));
            }
        }
    }
    Ok(GradCheckReport {
        loss: selector,
        max_rel_error: worst.0,
        coordinates,
        worst: worst.1,
        pass: worst.0 < opts.tol,
    })
}

/// Small model, four examples and four preference pairs for gradient checks.
pub fn gradcheck_fixture(seed: u64) -> Result<(ModelParams, Vec<SftExample>, Vec<RmPair>)> {
    let spec = GenerationSpec {
        counts: Counts {
            train: 8,
            valid: 1,
            test: 1,
        },
        entities: 6,
        attributes: 4,
        values: 4,
        sentences_per_paragraph: [1, 3].into(),
        paragraphs: [1, 2].into(),
        seed,
        ..GenerationSpec::default()
    };
    let data = generate_dataset(&spec)?;
    let vocab = build_vocab(&[&data.train]);
    let examples: Vec<_> = data.train.iter().take(4).cloned().collect();
    let batch = SftExample::batch(&examples, &vocab);
    let pairs = make_preference_pairs(&examples, 4, seed)?;
    let pairs = RmPair::resolve(&pairs, &examples, &vocab)?;
    let config = ModelConfig {
        vocab_size: vocab.len(),
        d: 8,
        d_a: 4,
        d_h: 8,
        tau: 0.5,
    };
    let mut params = ModelParams::init(config, seed);
    // Non-zero biases so their gradients are exercised away from the origin.
    let mut rng = stream(seed, "gradcheck/bias");
    for &id in ParamId::ALL {
        if id.is_bias() {
            for x in params.get_mut(id).data_mut() {
                *x = rng.gen_range(-0.1..0.1);
            }
        }
    }
    Ok((params, batch, pairs))
}
