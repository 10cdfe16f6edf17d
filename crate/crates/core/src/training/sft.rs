use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{check_finite, target_ids, Optimizer, TrainConfig};
use crate::corpus::{Example, Vocab, BOS};
use crate::error::{Error, Result};
use crate::losses::{bce_node, nll_node, SftWeights};
use crate::model::{decide, gradients, Aggregation, Grads, Graph, ModelParams, Mode, Prepared};
use crate::rng::stream;

/// One tokenized training example.
#[derive(Clone, Debug, PartialEq)]
pub struct SftExample {
    pub input: Prepared,
    pub y: bool,
    /// Gold target ids ending with EOS.
    pub target: Vec<usize>,
}

impl SftExample {
    pub fn new(ex: &Example, vocab: &Vocab) -> Self {
        Self {
            input: Prepared::new(ex, vocab),
            y: ex.y,
            target: target_ids(ex, vocab),
        }
    }

    pub fn batch(examples: &[Example], vocab: &Vocab) -> Vec<Self> {
        examples.iter().map(|e| Self::new(e, vocab)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_bce: f64,
    pub train_nll: f64,
    pub train_loss: f64,
    pub valid_bce: f64,
    pub valid_nll: f64,
    pub valid_loss: f64,
    pub valid_ranking_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    /// Wall-clock seconds per epoch; kept out of the serialized report so
    /// reports stay byte-identical across runs.
    #[serde(skip)]
    pub epoch_seconds: Vec<f64>,
}

pub(crate) struct LossParts {
    pub bce: f64,
    pub nll: f64,
    pub total: f64,
    pub correct: bool,
    pub grads: Option<Grads>,
}

/// Composite loss of one example, with gradients when `grad` is set.
pub(crate) fn example_loss(
    params: &ModelParams,
    ex: &SftExample,
    agg: Aggregation,
    w: &SftWeights,
    tau: f64,
    grad: bool,
) -> Result<LossParts> {
    ex.input.check(params.config.vocab_size)?;
    let mut g = Graph::new(params);
    let h = g.hierarchy(&ex.input, agg);
    let y = if ex.y { 1.0 } else { 0.0 };
    let bce = bce_node(&mut g.tape, h.yd, y);
    let correct = decide(g.tape.scalar(h.yd), tau) == ex.y;
    let mut total = g.tape.scale(bce, w.lambda_cls);
    let mut nll_value = 0.0;
    if w.lambda_gen > 0.0 {
        let mode = Mode::from_decision(ex.y);
        let mut prefix = vec![BOS];
        let mut terms = Vec::with_capacity(ex.target.len());
        for &t in &ex.target {
            let dist = g.decode_step(h.ctx, &h.sources, &prefix, mode);
            terms.push(nll_node(&mut g.tape, dist, t));
            prefix.push(t);
        }
        let mut nll = terms[0];
        for &t in &terms[1..] {
            nll = g.tape.add(nll, t);
        }
        nll_value = g.tape.scalar(nll);
        let weighted = g.tape.scale(nll, w.lambda_gen);
        total = g.tape.add(total, weighted);
    }
    let grads = if grad {
        Some(gradients(&g.tape, total, &params.config)?)
    } else {
        None
    };
    Ok(LossParts {
        bce: g.tape.scalar(bce),
        nll: nll_value,
        total: g.tape.scalar(total),
        correct,
        grads,
    })
}

struct Totals {
    bce: f64,
    nll: f64,
    total: f64,
    acc: f64,
}

/// Mean composite loss and ranking accuracy over `data`, without gradients.
pub fn evaluate_sft(params: &ModelParams, data: &[SftExample], config: &TrainConfig) -> Result<(f64, f64, f64, f64)> {
    let t = mean_losses(params, data, config)?;
    Ok((t.bce, t.nll, t.total, t.acc))
}

fn mean_losses(params: &ModelParams, data: &[SftExample], config: &TrainConfig) -> Result<Totals> {
    let mut t = Totals {
        bce: 0.0,
        nll: 0.0,
        total: 0.0,
        acc: 0.0,
    };
    if data.is_empty() {
        return Ok(t);
    }
    for ex in data {
        let l = example_loss(params, ex, config.aggregation, &config.sft_weights, config.tau, false)?;
        t.bce += l.bce;
        t.nll += l.nll;
        t.total += l.total;
        t.acc += f64::from(u8::from(l.correct));
    }
    let n = data.len() as f64;
    t.bce /= n;
    t.nll /= n;
    t.total /= n;
    t.acc /= n;
    Ok(t)
}

/// Supervised fine-tuning from a fresh initialization.
pub fn train_sft(
    train: &[SftExample],
    valid: &[SftExample],
    vocab_size: usize,
    config: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<(ModelParams, TrainReport)> {
    config.validate()?;
    let model_config = config.model_config(vocab_size);
    model_config.validate()?;
    let params = ModelParams::init(model_config, config.seed);
    train_sft_from(params, train, valid, config, on_epoch)
}

/// Supervised fine-tuning starting at `params`.
pub fn train_sft_from(
    mut params: ModelParams,
    train: &[SftExample],
    valid: &[SftExample],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(ModelParams, TrainReport)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate);
    let mut order_rng = stream(config.seed, "train/sft/order");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = TrainReport {
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
        order.shuffle(&mut order_rng);
        let (mut sb, mut sn, mut st) = (0.0, 0.0, 0.0);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut acc = Grads::zeros(&params.config);
            let k = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let l = example_loss(&params, &train[i], config.aggregation, &config.sft_weights, config.tau, true)?;
                check_finite("training loss", l.total, || format!("epoch {epoch}, batch {b}, example {i}"))?;
                sb += l.bce;
                sn += l.nll;
                st += l.total;
                acc.add_scaled(l.grads.as_ref().expect("gradients requested"), k);
            }
            if !acc.is_finite() {
                return Err(Error::Training(format!("non-finite gradient at epoch {epoch}, batch {b}")));
            }
            opt.apply(&mut params, &acc)?;
        }
        let n = train.len() as f64;
        let held = if valid.is_empty() { train } else { valid };
        let v = mean_losses(&params, held, config)?;
        check_finite("validation loss", v.total, || format!("epoch {epoch}"))?;
        let rec = EpochRecord {
            epoch,
            train_bce: sb / n,
            train_nll: sn / n,
            train_loss: st / n,
            valid_bce: v.bce,
            valid_nll: v.nll,
            valid_loss: v.total,
            valid_ranking_acc: v.acc,
        };
        on_epoch(&rec);
        report.epochs.push(rec);
        report.epoch_seconds.push(started.elapsed().as_secs_f64());
        if v.total < best.0 {
            best = (v.total, params.clone());
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
