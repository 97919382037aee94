//! Rollout groups: stochastic expert trajectories under the frozen
//! behavior policy with greedy token decoding, recording everything the
//! surrogate-ratio losses need.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modality::ExpertMask;
use crate::model::forward::Sampler;
use crate::model::Model;
use crate::numeric::rng::{streams, SeededRng};
use crate::routing::RoutingDecision;
use crate::tasks::{accuracy_reward, Modality, MultimodalSample};

/// Guard against division by zero in the all-equal-rewards case.
pub const ADV_EPSILON: f64 = 1e-4;

/// One complete rollout: the expert trajectory, the generated tokens,
/// the behavior policy's stored log-probabilities, and the reward.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RolloutTrajectory {
    pub prompt_len: usize,
    pub generated: Vec<u32>,
    /// log pi_old of each generated token, from the same forward pass
    /// that produced it.
    pub token_old_logprobs: Vec<f64>,
    /// decisions[layer][position] for every routed input position.
    pub decisions: Vec<Vec<RoutingDecision>>,
    pub reward: f64,
}

impl RolloutTrajectory {
    /// Tokens fed to a forced-trajectory replay: the prompt plus every
    /// generated token that was routed as an input.
    pub fn replay_tokens(&self, sample: &MultimodalSample) -> Vec<u32> {
        let mut t = sample.prompt_tokens();
        if self.generated.len() > 1 {
            t.extend_from_slice(&self.generated[..self.generated.len() - 1]);
        }
        t
    }

    pub fn replay_tags(&self, sample: &MultimodalSample) -> Vec<Modality> {
        let mut tags = sample.modality_tags.clone();
        if self.generated.len() > 1 {
            tags.extend(std::iter::repeat(Modality::Text).take(self.generated.len() - 1));
        }
        tags
    }

    /// Input positions whose logits produce the generated tokens:
    /// position prompt_len - 1 + j generates token j.
    pub fn generating_positions(&self) -> std::ops::Range<usize> {
        self.prompt_len - 1..self.prompt_len - 1 + self.generated.len()
    }

    /// Number of routed input positions.
    pub fn routed_positions(&self) -> usize {
        self.prompt_len + self.generated.len() - 1
    }
}

/// G rollouts for one prompt plus their normalized advantages.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub sample: MultimodalSample,
    pub trajectories: Vec<RolloutTrajectory>,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    pub fn rewards(&self) -> Vec<f64> {
        self.trajectories.iter().map(|t| t.reward).collect()
    }

    pub fn reward_mean(&self) -> f64 {
        let r = self.rewards();
        r.iter().sum::<f64>() / r.len() as f64
    }

    /// Population standard deviation of the group's rewards.
    pub fn reward_std(&self) -> f64 {
        let r = self.rewards();
        let mean = r.iter().sum::<f64>() / r.len() as f64;
        (r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / r.len() as f64).sqrt()
    }

    /// All rewards equal: the group contributes zero gradient.
    pub fn is_zero_variance(&self) -> bool {
        self.reward_std() == 0.0
    }
}

/// Fill normalized advantages: (R - mean) / (population std + epsilon).
pub fn compute_advantages(group: &mut RolloutGroup, epsilon: f64) {
    let rewards = group.rewards();
    let g = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / g;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / g;
    let std = var.sqrt();
    group.advantages = rewards.iter().map(|r| (r - mean) / (std + epsilon)).collect();
}

/// Run G independent greedy decodes with masked-multinomial expert
/// sampling against a frozen model snapshot. Rollouts draw from
/// disjoint rng streams keyed by (seed, step, group, rollout), so the
/// result is a pure function of those values.
#[allow(clippy::too_many_arguments)]
pub fn run_group(
    model: &Model,
    sample: &MultimodalSample,
    mask: Option<&ExpertMask>,
    g: usize,
    seed: u64,
    step: usize,
    group_index: usize,
    max_new: usize,
) -> Result<RolloutGroup> {
    assert!(g >= 2, "a rollout group needs at least 2 rollouts");
    let prompt = sample.prompt_tokens();
    let tags = &sample.modality_tags;
    let trajectories: Vec<RolloutTrajectory> = (0..g)
        .into_par_iter()
        .map(|i| -> Result<RolloutTrajectory> {
            let rng = SeededRng::stream(
                seed,
                streams::ROLLOUT,
                step as u64,
                ((group_index as u64) << 20) | i as u64,
            );
            let out = model.greedy_decode(
                &prompt,
                tags,
                max_new,
                Sampler::MaskedMultinomial { rng },
                mask,
                Some(&sample.choices),
            )?;
            let reward = accuracy_reward(&out.generated, sample);
            for lp in &out.token_logprobs {
                if !lp.is_finite() {
                    return Err(Error::NonFinite("rollout token log-probability".into()));
                }
            }
            Ok(RolloutTrajectory {
                prompt_len: prompt.len(),
                generated: out.generated,
                token_old_logprobs: out.token_logprobs,
                decisions: out.decisions,
                reward,
            })
        })
        .collect::<Result<_>>()?;
    Ok(RolloutGroup { sample: sample.clone(), trajectories, advantages: Vec::new() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn group_with_rewards(rewards: &[f64]) -> RolloutGroup {
        let mut rng = SeededRng::stream(1, streams::TEST, 40, 0);
        let sample = crate::tasks::generate_sample(crate::tasks::TaskFamily::PositionalQuery, &mut rng);
        let trajectories = rewards
            .iter()
            .map(|&r| RolloutTrajectory {
                prompt_len: sample.prompt_tokens().len(),
                generated: vec![sample.answer_token()],
                token_old_logprobs: vec![-1.0],
                decisions: Vec::new(),
                reward: r,
            })
            .collect();
        RolloutGroup { sample, trajectories, advantages: Vec::new() }
    }

    #[test]
    fn advantages_half_and_half() {
        // rewards [1 x4, 0 x4]: mean 0.5, population std 0.5,
        // advantages +-1 up to the epsilon guard.
        let mut g = group_with_rewards(&[1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        compute_advantages(&mut g, ADV_EPSILON);
        for i in 0..4 {
            assert!((g.advantages[i] - 1.0).abs() < 2e-4, "{}", g.advantages[i]);
        }
        for i in 4..8 {
            assert!((g.advantages[i] + 1.0).abs() < 2e-4);
        }
    }

    #[test]
    fn advantages_single_winner() {
        // rewards [1, 0 x7]: mean 0.125, std = sqrt(0.125 * 0.875),
        // winner advantage about 2.6458, the rest about -0.37796.
        let mut g = group_with_rewards(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        compute_advantages(&mut g, ADV_EPSILON);
        let std = (0.125f64 * 0.875).sqrt();
        assert!((std - 0.33072).abs() < 1e-5);
        assert!((g.advantages[0] - 2.6458).abs() < 2e-3, "{}", g.advantages[0]);
        for i in 1..8 {
            assert!((g.advantages[i] + 0.37796).abs() < 2e-3);
        }
    }

    #[test]
    fn advantages_zero_variance() {
        let mut g = group_with_rewards(&[0.0; 8]);
        compute_advantages(&mut g, ADV_EPSILON);
        assert!(g.is_zero_variance());
        assert!(g.advantages.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn advantages_sum_to_zero() {
        for rewards in [
            vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            vec![1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ] {
            let mut g = group_with_rewards(&rewards);
            compute_advantages(&mut g, ADV_EPSILON);
            let s: f64 = g.advantages.iter().sum();
            assert!(s.abs() < 1e-6, "sum {s}");
        }
    }
}
