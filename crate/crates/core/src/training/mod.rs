//! Optimizers, the SFT / reward-model / policy-gradient loops and the
//! finite-difference gradient check.

mod gradcheck;
mod rl;
mod rm;
mod sft;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::corpus::{Example, Vocab, EOS};
use crate::error::{Error, Result};
use crate::losses::SftWeights;
use crate::model::{Aggregation, Grads, ModelConfig, ModelParams};

pub use gradcheck::{grad_check, gradcheck_fixture, GradCheckOptions, GradCheckReport, LossSelector};
pub use rl::{heldout_reward, train_rl, ModelReward, RewardFn, RlConfig, RlIteration, RlReport};
pub use rm::{pair_accuracy, train_reward_model, RmEpoch, RmPair, RmReport};
pub use sft::{evaluate_sft, train_sft, train_sft_from, EpochRecord, SftExample, TrainReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Optimizer with its per-parameter state.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn apply(&mut self, params: &mut ModelParams, grads: &Grads) -> Result<()> {
        self.step(params.tensors_mut(), &grads.tensors)
    }

    /// Applies one update in place.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Validation(format!(
                "{} parameter tensors but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Validation(format!(
                    "tensor {i}: parameter shape {:?} but gradient shape {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *x -= self.lr * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.m.is_empty() {
                    self.m = grads.iter().map(|g| Tensor::zeros(g.rows(), g.cols())).collect();
                    self.v = self.m.clone();
                }
                let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
                let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
                for ((p, g), (m, v)) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.m.iter_mut().zip(self.v.iter_mut()))
                {
                    let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
                    for (k, &d) in g.data().iter().enumerate() {
                        md[k] = ADAM_BETA1 * md[k] + (1.0 - ADAM_BETA1) * d;
                        vd[k] = ADAM_BETA2 * vd[k] + (1.0 - ADAM_BETA2) * d * d;
                        let mh = md[k] / c1;
                        let vh = vd[k] / c2;
                        pd[k] -= self.lr * mh / (vh.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Supervised fine-tuning settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub sft_weights: SftWeights,
    pub tau: f64,
    pub patience: usize,
    pub aggregation: Aggregation,
    pub d: usize,
    pub d_a: usize,
    pub d_h: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            learning_rate: 3e-3,
            optimizer: OptimizerKind::Adam,
            seed: 1,
            sft_weights: SftWeights {
                lambda_cls: 1.0,
                lambda_gen: 0.1,
            },
            tau: 0.5,
            patience: 5,
            aggregation: Aggregation::Attention,
            d: 32,
            d_a: 16,
            d_h: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::config("tau", "must lie in [0, 1]"));
        }
        self.sft_weights.validate()
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d: self.d,
            d_a: self.d_a,
            d_h: self.d_h,
            tau: self.tau,
        }
    }
}

/// Target ids followed by EOS.
pub(crate) fn target_ids(ex: &Example, vocab: &Vocab) -> Vec<usize> {
    let mut t = vocab.encode(&ex.target.tokens);
    t.push(EOS);
    t
}

pub(crate) fn check_finite(what: &str, value: f64, where_: impl FnOnce() -> String) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Training(format!("non-finite {what} ({value}) at {}", where_())))
    }
}
