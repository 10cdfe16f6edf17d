//! Training objectives as plain scalars and as recorded tape nodes.

use serde::{Deserialize, Serialize};

use crate::autodiff::{kl_terms, Tape, Var, LOG_FLOOR};
use crate::corpus::PAD;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftWeights {
    pub lambda_cls: f64,
    pub lambda_gen: f64,
}

impl Default for SftWeights {
    fn default() -> Self {
        Self {
            lambda_cls: 1.0,
            lambda_gen: 1.0,
        }
    }
}

impl SftWeights {
    pub fn validate(&self) -> Result<()> {
        for (f, v) in [("lambda_cls", self.lambda_cls), ("lambda_gen", self.lambda_gen)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(f, "must be a nonnegative number"));
            }
        }
        if self.lambda_cls == 0.0 && self.lambda_gen == 0.0 {
            return Err(Error::config("lambda_cls", "lambda_cls and lambda_gen are both zero"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    #[default]
    BatchMean,
}

fn ln(x: f64) -> f64 {
    x.max(LOG_FLOOR).ln()
}

/// Mean binary cross-entropy.
pub fn bce_loss(y_hat: &[f64], y: &[f64]) -> Result<f64> {
    if y_hat.len() != y.len() || y.is_empty() {
        return Err(Error::Validation(format!(
            "bce needs equal non-empty batches, got {} scores and {} labels",
            y_hat.len(),
            y.len()
        )));
    }
    let total: f64 = y_hat
        .iter()
        .zip(y)
        .map(|(&p, &t)| -(t * ln(p) + (1.0 - t) * ln(1.0 - p)))
        .sum();
    Ok(total / y.len() as f64)
}

/// Teacher-forced negative log-likelihood: summed over each target, averaged
/// over the batch. `dists[i][t]` is the distribution that predicts
/// `targets[i][t]`; PAD targets are skipped.
pub fn nll_loss(dists: &[Vec<Vec<f64>>], targets: &[Vec<usize>]) -> Result<f64> {
    if dists.len() != targets.len() || targets.is_empty() {
        return Err(Error::Validation("nll needs one distribution list per target".into()));
    }
    let mut total = 0.0;
    for (d, t) in dists.iter().zip(targets) {
        if d.len() != t.len() {
            return Err(Error::Validation(format!(
                "{} distributions for a target of {} tokens",
                d.len(),
                t.len()
            )));
        }
        for (p, &tok) in d.iter().zip(t) {
            if tok == PAD {
                continue;
            }
            let v = *p
                .get(tok)
                .ok_or_else(|| Error::Validation(format!("target token {tok} outside distribution")))?;
            total -= ln(v);
        }
    }
    Ok(total / targets.len() as f64)
}

pub fn sft_loss(bce: f64, nll: f64, w: &SftWeights) -> f64 {
    w.lambda_cls * bce + w.lambda_gen * nll
}

/// −log σ(a − b) with `a` the preferred response's score.
pub fn rm_pairwise_loss(score_a: f64, score_b: f64) -> f64 {
    let m = score_a - score_b;
    // softplus(−m), stable in both tails
    if m > 0.0 {
        (-m).exp().ln_1p()
    } else {
        -m + m.exp().ln_1p()
    }
}

/// Σ_t KL(π_θ(·|t) ‖ π_SFT(·|t)).
pub fn sequence_kl(policy: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<f64> {
    if policy.len() != reference.len() {
        return Err(Error::Validation(format!(
            "{} policy steps against {} reference steps",
            policy.len(),
            reference.len()
        )));
    }
    let mut total = 0.0;
    for (p, q) in policy.iter().zip(reference) {
        if p.len() != q.len() {
            return Err(Error::Validation("distributions over different vocabularies".into()));
        }
        total += kl_terms(p, q);
    }
    Ok(total)
}

/// Mean of `reward − β·kl`.
pub fn rl_objective(samples: &[(f64, f64)], beta_kl: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Validation("rl objective needs at least one sample".into()));
    }
    Ok(samples.iter().map(|(r, k)| r - beta_kl * k).sum::<f64>() / samples.len() as f64)
}

/// BCE of one 1×1 probability node against label `y`.
pub(crate) fn bce_node(tape: &mut Tape, y_hat: Var, y: f64) -> Var {
    let lp = tape.log(y_hat, LOG_FLOOR);
    let neg = tape.scale(y_hat, -1.0);
    let one_minus = tape.add_const(neg, 1.0);
    let lq = tape.log(one_minus, LOG_FLOOR);
    let a = tape.scale(lp, -y);
    let b = tape.scale(lq, -(1.0 - y));
    tape.add(a, b)
}

/// −log p[token] for a 1×|V| distribution node.
pub(crate) fn nll_node(tape: &mut Tape, dist: Var, token: usize) -> Var {
    let p = tape.pick(dist, token);
    let l = tape.log(p, LOG_FLOOR);
    tape.scale(l, -1.0)
}

pub(crate) fn rm_node(tape: &mut Tape, score_a: Var, score_b: Var) -> Var {
    let m = tape.sub(score_a, score_b);
    let s = tape.sigmoid(m);
    let l = tape.log(s, f64::MIN_POSITIVE);
    tape.scale(l, -1.0)
}
