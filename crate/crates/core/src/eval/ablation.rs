use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{evaluate, EvalOptions, MetricsReport};
use crate::corpus::{make_preference_pairs, Dataset, Vocab};
use crate::error::Result;
use crate::model::{Aggregation, ModelParams, Prepared};
use crate::training::{
    pair_accuracy, train_reward_model, train_rl, train_sft, ModelReward, RlConfig, RmPair, SftExample, TrainConfig,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub sft: TrainConfig,
    pub reward: TrainConfig,
    pub rl: RlConfig,
    pub train_pairs: i64,
    pub valid_pairs: i64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            sft: TrainConfig::default(),
            reward: TrainConfig {
                epochs: 10,
                ..TrainConfig::default()
            },
            rl: RlConfig::default(),
            train_pairs: 2000,
            valid_pairs: 400,
        }
    }
}

impl AblationConfig {
    /// Copy with every seed replaced by `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.sft.seed = seed;
        c.reward.seed = seed;
        c.rl.seed = seed;
        c
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    /// Attention aggregation, SFT then RL.
    Full,
    /// Mean pooling, SFT then RL.
    MeanPooling,
    /// Attention aggregation, SFT only.
    SftOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: Arm,
    pub aggregation: Aggregation,
    pub rl: bool,
    pub seed: u64,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seed: u64,
    pub reward_model_accuracy: f64,
    pub arms: Vec<ArmResult>,
}

impl AblationTable {
    pub fn arm(&self, arm: Arm) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.arm == arm)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<14}{:>10}{:>10}{:>10}{:>10}{:>10}", "arm", "ranking", "sentence", "F1", "refusal", "inform.");
        for a in &self.arms {
            let m = &a.metrics;
            let f = |v: Option<f64>| v.map_or_else(|| "-".into(), |x| format!("{x:.3}"));
            let name = serde_json::to_value(a.arm).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
            let _ = writeln!(
                s,
                "{:<14}{:>10.3}{:>10.3}{:>10}{:>10}{:>10}",
                name,
                m.ranking_acc,
                m.sentence_acc,
                f(m.f1_answerable),
                f(m.refusal_rate),
                f(m.informativeness_avg)
            );
        }
        s
    }
}

/// Trains the three arms with shared data and seed and evaluates each on the
/// test split. One reward model serves both RL arms.
pub fn run_ablation(
    data: &Dataset,
    vocab: &Vocab,
    config: &AblationConfig,
    seed: u64,
    mut progress: impl FnMut(&str),
) -> Result<AblationTable> {
    let c = config.with_seed(seed);
    let v = vocab.len();
    let train = SftExample::batch(&data.train, vocab);
    let valid = SftExample::batch(&data.valid, vocab);
    let prompts: Vec<Prepared> = train.iter().map(|e| e.input.clone()).collect();

    progress("reward model");
    let tp = make_preference_pairs(&data.train, c.train_pairs, seed)?;
    let vp = make_preference_pairs(&data.valid, c.valid_pairs, seed.wrapping_add(1))?;
    let tp = RmPair::resolve(&tp, &data.train, vocab)?;
    let vp = RmPair::resolve(&vp, &data.valid, vocab)?;
    let (rm, _) = train_reward_model(&tp, &vp, v, &c.reward, |_| {})?;
    let reward_model_accuracy = pair_accuracy(&rm, &vp)?;
    let reward = ModelReward(&rm);

    let mut arms = Vec::new();
    let eval = |params: &ModelParams, arm: Arm, agg: Aggregation, rl: bool| -> Result<ArmResult> {
        let opts = EvalOptions {
            tau: c.sft.tau,
            aggregation: agg,
            max_len: c.rl.max_len,
            timing_repetitions: None,
        };
        Ok(ArmResult {
            arm,
            aggregation: agg,
            rl,
            seed,
            metrics: evaluate(params, &data.test, vocab, &opts)?,
        })
    };

    for agg in [Aggregation::Attention, Aggregation::Mean] {
        progress(match agg {
            Aggregation::Attention => "sft (attention)",
            Aggregation::Mean => "sft (mean pooling)",
        });
        let sft_cfg = TrainConfig {
            aggregation: agg,
            ..c.sft.clone()
        };
        let (sft, _) = train_sft(&train, &valid, v, &sft_cfg, |_| {})?;
        let rl_cfg = RlConfig {
            aggregation: agg,
            tau: c.sft.tau,
            ..c.rl.clone()
        };
        progress("rl");
        let (policy, _) = train_rl(&sft, &reward, &prompts, &rl_cfg, |_| {})?;
        match agg {
            Aggregation::Attention => {
                arms.push(eval(&policy, Arm::Full, agg, true)?);
                arms.push(eval(&sft, Arm::SftOnly, agg, false)?);
            }
            Aggregation::Mean => arms.push(eval(&policy, Arm::MeanPooling, agg, true)?),
        }
    }
    arms.sort_by_key(|a| a.arm as u8);
    Ok(AblationTable {
        seed,
        reward_model_accuracy,
        arms,
    })
}
