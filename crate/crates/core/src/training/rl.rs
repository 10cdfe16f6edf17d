use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{check_finite, Optimizer, OptimizerKind};
use crate::autodiff::Var;
use crate::corpus::{BOS, EOS};
use crate::error::{Error, Result};
use crate::losses::{rl_objective, Baseline};
use crate::model::{
    decide, generate, gradients, pick_token, reward_score, Aggregation, DecoderState, GenerateOptions, Grads, Graph,
    ModelParams, Mode, Prepared,
};
use crate::rng::{stream, Rng};

/// Scores a response (EOS excluded) for an input.
pub trait RewardFn {
    fn reward(&self, input: &Prepared, response: &[usize]) -> Result<f64>;
}

/// A trained reward model used as the reward.
pub struct ModelReward<'a>(pub &'a ModelParams);

impl RewardFn for ModelReward<'_> {
    fn reward(&self, input: &Prepared, response: &[usize]) -> Result<f64> {
        if response.is_empty() {
            reward_score(self.0, input, &[EOS])
        } else {
            reward_score(self.0, input, response)
        }
    }
}

impl<F: Fn(&Prepared, &[usize]) -> f64> RewardFn for F {
    fn reward(&self, input: &Prepared, response: &[usize]) -> Result<f64> {
        Ok(self(input, response))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlConfig {
    pub beta_kl: f64,
    pub batch_size: usize,
    pub temperature: f64,
    pub baseline: Baseline,
    pub iterations: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Global gradient-norm clip applied before each update.
    pub max_grad_norm: Option<f64>,
    /// Mean per-sequence KL above this for 3 iterations in a row aborts.
    pub kl_bound: f64,
    pub max_len: usize,
    pub tau: f64,
    pub aggregation: Aggregation,
    pub seed: u64,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            beta_kl: 0.1,
            batch_size: 32,
            temperature: 1.0,
            baseline: Baseline::BatchMean,
            iterations: 600,
            learning_rate: 3e-2,
            optimizer: OptimizerKind::Sgd,
            max_grad_norm: Some(0.1),
            kl_bound: 20.0,
            max_len: 24,
            tau: 0.5,
            aggregation: Aggregation::Attention,
            seed: 1,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_kl >= 0.0) || !self.beta_kl.is_finite() {
            return Err(Error::config("beta_kl", "must be a nonnegative number"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "the batch-mean baseline needs at least 2 samples"));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::config("temperature", "must be positive"));
        }
        if self.iterations == 0 {
            return Err(Error::config("iterations", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if matches!(self.max_grad_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::config("max_grad_norm", "must be positive"));
        }
        if !(self.kl_bound > 0.0) {
            return Err(Error::config("kl_bound", "must be positive"));
        }
        if self.max_len == 0 {
            return Err(Error::config("max_len", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::config("tau", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RlIteration {
    pub iteration: usize,
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub objective: f64,
    /// Mean sampled length, EOS included.
    pub mean_len: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RlReport {
    pub iterations: Vec<RlIteration>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
}

/// One sampled response kept on its tape until the baseline is known.
pub(crate) struct Rollout<'p> {
    pub graph: Graph<'p>,
    pub logp: Var,
    pub kl: Var,
    pub tokens: Vec<usize>,
    pub steps: usize,
}

impl Rollout<'_> {
    pub fn kl_value(&self) -> f64 {
        self.graph.tape.scalar(self.kl)
    }
}

/// Samples one response from the policy, recording Σ log π and the per-token
/// KL against the frozen reference along the sampled prefix.
pub(crate) fn rollout<'p>(
    policy: &'p ModelParams,
    reference: &ModelParams,
    input: &Prepared,
    config: &RlConfig,
    rng: &mut Rng,
) -> Result<Rollout<'p>> {
    input.check(policy.config.vocab_size)?;
    let mut graph = Graph::new(policy);
    let h = graph.hierarchy(input, config.aggregation);
    let mode = Mode::from_decision(decide(graph.tape.scalar(h.yd), config.tau));
    let mut reference = DecoderState::new(reference, input, config.aggregation)?;
    let mut prefix = vec![BOS];
    let mut logps = Vec::new();
    let mut kls = Vec::new();
    for _ in 0..config.max_len {
        let dist = graph.decode_step(h.ctx, &h.sources, &prefix, mode);
        let q = reference.step(&prefix, mode)?;
        let t = pick_token(graph.tape.value(dist).data(), config.temperature, rng);
        let p = graph.tape.pick(dist, t);
        logps.push(graph.tape.log(p, crate::autodiff::LOG_FLOOR));
        kls.push(graph.tape.kl_const(dist, &q));
        prefix.push(t);
        if t == EOS {
            break;
        }
    }
    let steps = logps.len();
    let logp = sum(&mut graph, &logps);
    let kl = sum(&mut graph, &kls);
    let mut tokens = prefix.split_off(1);
    if tokens.last() == Some(&EOS) {
        tokens.pop();
    }
    Ok(Rollout {
        graph,
        logp,
        kl,
        tokens,
        steps,
    })
}

fn sum(g: &mut Graph, vars: &[Var]) -> Var {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = g.tape.add(acc, v);
    }
    acc
}

/// Gradient of mean[−(R − b)·Σ log π + β·Σ KL] over the batch, plus the
/// batch statistics.
fn batch_gradient(
    rollouts: Vec<Rollout<'_>>,
    rewards: &[f64],
    config: &RlConfig,
    model: &crate::model::ModelConfig,
) -> Result<Grads> {
    let n = rollouts.len() as f64;
    let returns: Vec<f64> = rollouts
        .iter()
        .zip(rewards)
        .map(|(r, &rw)| rw - config.beta_kl * r.kl_value())
        .collect();
    let baseline = match config.baseline {
        Baseline::BatchMean => returns.iter().sum::<f64>() / n,
    };
    let mut acc = Grads::zeros(model);
    for (mut r, &ret) in rollouts.into_iter().zip(&returns) {
        let t = &mut r.graph.tape;
        let pg = t.scale(r.logp, -(ret - baseline));
        let kl = t.scale(r.kl, config.beta_kl);
        let loss = t.add(pg, kl);
        let g = gradients(t, loss, model)?;
        acc.add_scaled(&g, 1.0 / n);
    }
    Ok(acc)
}

/// KL-regularized policy-gradient refinement of `sft`.
pub fn train_rl(
    sft: &ModelParams,
    reward: &dyn RewardFn,
    prompts: &[Prepared],
    config: &RlConfig,
    mut on_iteration: impl FnMut(&RlIteration),
) -> Result<(ModelParams, RlReport)> {
    config.validate()?;
    if prompts.is_empty() {
        return Err(Error::Validation("no prompts for policy training".into()));
    }
    let mut params = sft.clone();
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate);
    let mut order_rng = stream(config.seed, "train/rl/order");
    let mut sample_rng = stream(config.seed, "train/rl/sample");
    let mut order: Vec<usize> = Vec::new();
    let mut report = RlReport {
        iterations: Vec::new(),
        checkpoint: None,
    };
    let mut over_bound = 0;
    for it in 1..=config.iterations {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if order.is_empty() {
                order = (0..prompts.len()).collect();
                order.shuffle(&mut order_rng);
            }
            batch.push(order.pop().expect("refilled above"));
        }
        let mut rollouts = Vec::with_capacity(batch.len());
        let mut rewards = Vec::with_capacity(batch.len());
        for &i in &batch {
            let r = rollout(&params, sft, &prompts[i], config, &mut sample_rng)?;
            let rw = reward.reward(&prompts[i], &r.tokens)?;
            check_finite("reward", rw, || format!("iteration {it}, prompt {i}"))?;
            rewards.push(rw);
            rollouts.push(r);
        }
        let samples: Vec<(f64, f64)> = rollouts.iter().zip(&rewards).map(|(r, &w)| (w, r.kl_value())).collect();
        let n = samples.len() as f64;
        let rec = RlIteration {
            iteration: it,
            mean_reward: rewards.iter().sum::<f64>() / n,
            mean_kl: samples.iter().map(|s| s.1).sum::<f64>() / n,
            objective: rl_objective(&samples, config.beta_kl)?,
            mean_len: rollouts.iter().map(|r| r.steps as f64).sum::<f64>() / n,
        };
        check_finite("KL", rec.mean_kl, || format!("iteration {it}"))?;
        let mut grads = batch_gradient(rollouts, &rewards, config, &params.config)?;
        if !grads.is_finite() {
            return Err(Error::Training(format!("non-finite policy gradient at iteration {it}")));
        }
        if let Some(c) = config.max_grad_norm {
            grads.clip_norm(c);
        }
        opt.apply(&mut params, &grads)?;
        on_iteration(&rec);
        over_bound = if rec.mean_kl > config.kl_bound { over_bound + 1 } else { 0 };
        let mean_kl = rec.mean_kl;
        report.iterations.push(rec);
        if over_bound >= 3 {
            return Err(Error::Training(format!(
                "policy drift: mean KL {mean_kl:.3} above bound {} for 3 consecutive iterations (iteration {it})",
                config.kl_bound
            )));
        }
    }
    Ok((params, report))
}

/// Mean reward of sampled responses, `samples` per prompt. Seeds depend only
/// on `seed` and the prompt position, so two policies see common random
/// numbers.
pub fn heldout_reward(
    params: &ModelParams,
    reward: &dyn RewardFn,
    prompts: &[Prepared],
    config: &RlConfig,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if prompts.is_empty() || samples == 0 {
        return Err(Error::Validation("held-out reward needs prompts and samples".into()));
    }
    let mut total = 0.0;
    for (i, p) in prompts.iter().enumerate() {
        for s in 0..samples {
            let opts = GenerateOptions {
                tau: config.tau,
                max_len: config.max_len,
                temperature: config.temperature,
                seed: seed ^ ((i * samples + s) as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
                aggregation: config.aggregation,
            };
            let g = generate(params, p, &opts)?;
            total += reward.reward(p, &g.tokens)?;
        }
    }
    Ok(total / (prompts.len() * samples) as f64)
}
