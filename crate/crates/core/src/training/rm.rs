use std::collections::HashMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{check_finite, Optimizer, TrainConfig};
use crate::corpus::{Example, PreferencePair, Vocab};
use crate::error::{Error, Result};
use crate::losses::rm_node;
use crate::model::{gradients, reward_score, Grads, Graph, ModelParams, Prepared};
use crate::rng::stream;

/// A preference pair resolved against its example.
#[derive(Clone, Debug, PartialEq)]
pub struct RmPair {
    pub input: Prepared,
    pub chosen: Vec<usize>,
    pub rejected: Vec<usize>,
}

impl RmPair {
    /// Resolves every pair whose example is in `examples`.
    pub fn resolve(pairs: &[PreferencePair], examples: &[Example], vocab: &Vocab) -> Result<Vec<Self>> {
        let by_id: HashMap<&str, &Example> = examples.iter().map(|e| (e.id.as_str(), e)).collect();
        pairs
            .iter()
            .map(|p| {
                let ex = by_id.get(p.example_id.as_str()).ok_or_else(|| {
                    Error::Validation(format!("preference pair refers to unknown example `{}`", p.example_id))
                })?;
                let (c, r) = p.oriented();
                Ok(Self {
                    input: Prepared::new(ex, vocab),
                    chosen: vocab.encode(c),
                    rejected: vocab.encode(r),
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub valid_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmReport {
    pub epochs: Vec<RmEpoch>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    #[serde(skip)]
    pub epoch_seconds: Vec<f64>,
}

pub(crate) fn pair_loss(params: &ModelParams, pair: &RmPair, grad: bool) -> Result<(f64, Option<Grads>)> {
    pair.input.check(params.config.vocab_size)?;
    if pair.chosen.is_empty() || pair.rejected.is_empty() {
        return Err(Error::Validation("preference responses must be non-empty".into()));
    }
    let mut g = Graph::new(params);
    let a = g.reward(&pair.input, &pair.chosen);
    let b = g.reward(&pair.input, &pair.rejected);
    let l = rm_node(&mut g.tape, a, b);
    let grads = if grad { Some(gradients(&g.tape, l, &params.config)?) } else { None };
    Ok((g.tape.scalar(l), grads))
}

/// Fraction of pairs whose preferred side scores strictly higher.
pub fn pair_accuracy(params: &ModelParams, pairs: &[RmPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for p in pairs {
        let a = reward_score(params, &p.input, &p.chosen)?;
        let b = reward_score(params, &p.input, &p.rejected)?;
        hits += usize::from(a > b);
    }
    Ok(hits as f64 / pairs.len() as f64)
}

fn mean_loss(params: &ModelParams, pairs: &[RmPair]) -> Result<f64> {
    let mut s = 0.0;
    for p in pairs {
        s += pair_loss(params, p, false)?.0;
    }
    Ok(s / pairs.len().max(1) as f64)
}

/// Fits the reward head and encoder on preference pairs. Early stopping
/// tracks the validation pairwise loss.
pub fn train_reward_model(
    train: &[RmPair],
    valid: &[RmPair],
    vocab_size: usize,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&RmEpoch),
) -> Result<(ModelParams, RmReport)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Validation("no preference pairs to train on".into()));
    }
    let model_config = config.model_config(vocab_size);
    model_config.validate()?;
    let mut params = ModelParams::init(model_config, config.seed);
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate);
    let mut rng = stream(config.seed, "train/rm/order");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = RmReport {
        epochs: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
        checkpoint: None,
        epoch_seconds: Vec::new(),
    };
    let mut best = (f64::INFINITY, params.clone());
    let mut since_best = 0;
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut acc = Grads::zeros(&params.config);
            for &i in chunk {
                let (l, g) = pair_loss(&params, &train[i], true)?;
                check_finite("reward-model loss", l, || format!("epoch {epoch}, batch {b}, pair {i}"))?;
                total += l;
                acc.add_scaled(g.as_ref().expect("gradients requested"), 1.0 / chunk.len() as f64);
            }
            opt.apply(&mut params, &acc)?;
        }
        let held = if valid.is_empty() { train } else { valid };
        let rec = RmEpoch {
            epoch,
            train_loss: total / train.len() as f64,
            valid_loss: mean_loss(&params, held)?,
            valid_accuracy: pair_accuracy(&params, held)?,
        };
        check_finite("validation loss", rec.valid_loss, || format!("epoch {epoch}"))?;
        on_epoch(&rec);
        let v = rec.valid_loss;
        report.epochs.push(rec);
        report.epoch_seconds.push(started.elapsed().as_secs_f64());
        if v < best.0 {
            best = (v, params.clone());
            report.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if config.patience > 0 && since_best >= config.patience {
                report.stopped_early = epoch < config.epochs;
                break;
            }
        }
    }
    Ok((best.1, report))
}
