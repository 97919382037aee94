//! MoE-GRPO training: the Token-GRPO and Gate-GRPO clipped-surrogate
//! objectives, the load-balancing auxiliary, Adam updates with cosine
//! learning-rate annealing, and the supervised fine-tuning baselines.
//!
//! Both surrogate losses compare the current parameters against the
//! frozen snapshot the rollouts were sampled from. There is no
//! reference policy and no KL term: gates are trained from scratch, so
//! no pretrained routing policy exists to regularize toward.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modality::ExpertMask;
use crate::model::forward::{argmax_token, RoutingSpec, Sampler};
use crate::model::{Model, ModelConfig};
use crate::numeric::params::ParamGrads;
use crate::numeric::rng::{streams, SeededRng};
use crate::numeric::tape::{Tape, Var};
use crate::rollout::RolloutGroup;
use crate::routing::{RouterMode, RoutingDecision, SetProbMode};
use crate::tasks::MultimodalSample;

/// Trajectories processed concurrently before an ordered gradient merge.
const PAR_CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// G: rollouts per prompt group.
    pub rollouts_per_group: usize,
    /// Prompt groups per optimizer step.
    pub groups_per_step: usize,
    pub total_steps: usize,
    /// Clipping half-width for both ratio families.
    pub clip_epsilon: f64,
    /// Desk-scale default; a random-init toy model needs far more than
    /// the 1e-6 used to fine-tune billion-parameter checkpoints.
    pub learning_rate: f64,
    /// Coefficient on the load-balancing auxiliary.
    pub lb_coefficient: f64,
    /// Weight on the Gate-GRPO term (the combined objective is an
    /// unweighted sum by default).
    pub gate_loss_weight: f64,
    /// Bottom-P% of experts masked per modality during rollouts.
    pub mask_percent: f64,
    /// Extend the Gate-GRPO sum from generated positions to prompt
    /// positions as well (normalizer enlarged accordingly).
    pub include_prompt_gate_gradient: bool,
    /// Guard added to the advantage denominator.
    pub adv_epsilon: f64,
    /// Behavior probability of a sampled expert set: order-free product
    /// surrogate or exact sequential chain.
    pub set_prob_mode: SetProbMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            rollouts_per_group: 8,
            groups_per_step: 4,
            total_steps: 2000,
            clip_epsilon: 0.2,
            learning_rate: 3e-4,
            lb_coefficient: 0.01,
            gate_loss_weight: 1.0,
            mask_percent: 25.0,
            include_prompt_gate_gradient: false,
            adv_epsilon: 1e-4,
            set_prob_mode: SetProbMode::Product,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::InvalidConfig(m));
        if self.rollouts_per_group < 2 {
            return err("rollouts_per_group must be >= 2".into());
        }
        if self.groups_per_step < 1 {
            return err("groups_per_step must be >= 1".into());
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return err(format!("clip_epsilon must be in (0, 1), got {}", self.clip_epsilon));
        }
        if self.learning_rate <= 0.0 {
            return err("learning_rate must be positive".into());
        }
        if self.lb_coefficient < 0.0 {
            return err("lb_coefficient must be nonnegative".into());
        }
        if !(0.0..100.0).contains(&self.mask_percent) {
            return err(format!("mask_percent must be in [0, 100), got {}", self.mask_percent));
        }
        if self.adv_epsilon <= 0.0 {
            return err("adv_epsilon must be positive".into());
        }
        Ok(())
    }
}

/// Loss components of one optimizer step.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub token_grpo: f64,
    pub gate_grpo: f64,
    pub load_balance: f64,
    pub total: f64,
    /// Fraction of ratios outside [1 - eps, 1 + eps], per family.
    pub token_clip_fraction: f64,
    pub gate_clip_fraction: f64,
}

/// Diagnostics attached to a standalone loss evaluation.
#[derive(Debug, Clone, Default)]
pub struct LossDiag {
    pub ratios: Vec<f64>,
    pub clip_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossSelect {
    Both,
    TokenOnly,
    GateOnly,
}

/// Full result of evaluating the batch objective.
pub struct BatchEvaluation {
    pub breakdown: LossBreakdown,
    pub token_ratios: Vec<f64>,
    pub gate_ratios: Vec<f64>,
    pub grads: Option<ParamGrads>,
}

/// The clipped surrogate term of both GRPO objectives (to be maximized;
/// losses negate it).
pub fn surrogate_objective(ratio: f64, advantage: f64, clip_epsilon: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - clip_epsilon, 1.0 + clip_epsilon);
    f64::min(ratio * advantage, clipped * advantage)
}

struct LbContext {
    /// fractions[layer][expert]: share of selection slots, sums to 1.
    fractions: Vec<Vec<f64>>,
    total_tokens: usize,
}

fn lb_context(groups: &[RolloutGroup], config: &ModelConfig) -> LbContext {
    let mut counts = vec![vec![0u64; config.num_experts]; config.num_layers];
    let mut total_tokens = 0usize;
    for g in groups {
        for t in &g.trajectories {
            total_tokens += t.routed_positions();
            for (l, layer) in t.decisions.iter().enumerate() {
                for d in layer {
                    for &e in &d.selected_experts {
                        counts[l][e] += 1;
                    }
                }
            }
        }
    }
    let fractions = counts
        .into_iter()
        .map(|layer| {
            let total: u64 = layer.iter().sum();
            layer
                .into_iter()
                .map(|c| if total > 0 { c as f64 / total as f64 } else { 0.0 })
                .collect()
        })
        .collect();
    LbContext { fractions, total_tokens }
}

/// Switch-style load-balancing loss over plain routing records:
/// per layer N * sum_e f_e * P_e, averaged over layers, where f_e is
/// the fraction of selection slots assigned to expert e and P_e the
/// mean gate probability of e.
pub fn load_balancing_loss<'a, I>(records: I, num_layers: usize, num_experts: usize) -> f64
where
    I: IntoIterator<Item = &'a RoutingDecision>,
{
    let mut slot_counts = vec![vec![0u64; num_experts]; num_layers];
    let mut prob_sums = vec![vec![0.0f64; num_experts]; num_layers];
    let mut token_counts = vec![0u64; num_layers];
    for d in records {
        token_counts[d.layer] += 1;
        for &e in &d.selected_experts {
            slot_counts[d.layer][e] += 1;
        }
        for (e, &p) in d.gate_probs.iter().enumerate() {
            prob_sums[d.layer][e] += p;
        }
    }
    let mut total = 0.0;
    let mut layers_seen = 0usize;
    for l in 0..num_layers {
        if token_counts[l] == 0 {
            continue;
        }
        let slots: u64 = slot_counts[l].iter().sum();
        let mut layer_loss = 0.0;
        for e in 0..num_experts {
            let f = slot_counts[l][e] as f64 / slots as f64;
            let p = prob_sums[l][e] / token_counts[l] as f64;
            layer_loss += f * p;
        }
        total += num_experts as f64 * layer_loss;
        layers_seen += 1;
    }
    assert!(layers_seen > 0, "load_balancing_loss needs at least one routed token");
    total / layers_seen as f64
}

struct TrajOutcome {
    token_value: f64,
    gate_value: f64,
    lb_value: f64,
    token_ratios: Vec<f64>,
    gate_ratios: Vec<f64>,
    grads: Vec<(usize, Vec<f64>)>,
}

/// Build the surrogate pipeline for a ratio vector:
/// -(1/len) * sum(min(r * adv, clip(r) * adv)).
fn surrogate_loss_from_logprobs(
    tape: &mut Tape,
    new_logprobs: Var,
    old_logprobs: &[f64],
    advantage: f64,
    clip_epsilon: f64,
) -> (Var, Vec<f64>) {
    let neg_old: Vec<f64> = old_logprobs.iter().map(|v| -v).collect();
    let diff = tape.add_const_vec(new_logprobs, &neg_old);
    let ratios = tape.exp(diff);
    let ratio_values = tape.value(ratios).to_vec();
    let unclipped = tape.scale(ratios, advantage);
    let clipped = tape.clamp(ratios, 1.0 - clip_epsilon, 1.0 + clip_epsilon);
    let clipped = tape.scale(clipped, advantage);
    let objective = tape.min_elem(unclipped, clipped);
    let sum = tape.sum(objective);
    let loss = tape.scale(sum, -1.0 / old_logprobs.len() as f64);
    (loss, ratio_values)
}

/// Differentiable sequential set log-probability for one position,
/// mirroring `routing::sequential_set_logprob` operation for operation
/// so the ratio is exactly 1 immediately after a snapshot.
fn sequential_logprob_var(
    tape: &mut Tape,
    gate_probs: Var,
    position: usize,
    selected_in_order: &[usize],
) -> Var {
    let mut lp: Option<Var> = None;
    let mut used: Option<Var> = None;
    let one = tape.leaf(1, 1, vec![1.0]);
    for &e in selected_in_order {
        let p = tape.gather(gate_probs, &[(position, e)]);
        let ln_p = tape.ln(p);
        let remaining = match used {
            Some(u) => tape.sub(one, u),
            None => one,
        };
        let ln_rem = tape.ln(remaining);
        let term = tape.sub(ln_p, ln_rem);
        lp = Some(match lp {
            Some(acc) => tape.add(acc, term),
            None => term,
        });
        used = Some(match used {
            Some(u) => tape.add(u, p),
            None => p,
        });
    }
    lp.expect("at least one selected expert")
}

#[allow(clippy::too_many_arguments)]
fn trajectory_contribution(
    model: &Model,
    group: &RolloutGroup,
    traj_index: usize,
    mask: Option<&ExpertMask>,
    cfg: &TrainConfig,
    select: LossSelect,
    traj_weight: f64,
    lb: Option<&LbContext>,
    with_grads: bool,
) -> Result<TrajOutcome> {
    let traj = &group.trajectories[traj_index];
    let advantage = group.advantages[traj_index];
    let sample = &group.sample;
    let cfgm = &model.config;

    let tokens = traj.replay_tokens(sample);
    let tags = traj.replay_tags(sample);
    let mut tape = Tape::new(with_grads);
    let mut spec = RoutingSpec::forced(&traj.decisions, mask);
    let art = model.forward(&mut tape, &tokens, &tags, &mut spec)?;

    let mut parts: Vec<Var> = Vec::new();
    let mut token_value = 0.0;
    let mut gate_value = 0.0;
    let mut lb_value = 0.0;
    let mut token_ratios = Vec::new();
    let mut gate_ratios = Vec::new();

    if matches!(select, LossSelect::Both | LossSelect::TokenOnly) {
        if traj.token_old_logprobs.len() != traj.generated.len() {
            return Err(Error::MissingLogProbs(
                "trajectory lacks stored token log-probabilities".into(),
            ));
        }
        let lsm = tape.log_softmax_rows(art.logits, None)?;
        let pairs: Vec<(usize, usize)> = traj
            .generating_positions()
            .zip(&traj.generated)
            .map(|(pos, &tok)| (pos, tok as usize))
            .collect();
        let lp_new = tape.gather(lsm, &pairs);
        let (loss, ratios) = surrogate_loss_from_logprobs(
            &mut tape,
            lp_new,
            &traj.token_old_logprobs,
            advantage,
            cfg.clip_epsilon,
        );
        token_value = tape.scalar_value(loss);
        token_ratios = ratios;
        parts.push(tape.scale(loss, traj_weight));
    }

    if matches!(select, LossSelect::Both | LossSelect::GateOnly) {
        let positions: Vec<usize> = if cfg.include_prompt_gate_gradient {
            (0..traj.routed_positions()).collect()
        } else {
            traj.generating_positions().collect()
        };
        let k = cfgm.experts_per_token;
        let mut layer_losses: Option<Var> = None;
        for (l, layer_art) in art.layers.iter().enumerate() {
            let decisions = &traj.decisions[l];
            for &pos in &positions {
                if decisions[pos].draw_probs.is_empty() {
                    return Err(Error::MissingLogProbs(format!(
                        "no stored gate log-probability at position {pos}, layer {l}"
                    )));
                }
            }
            let (loss, ratios) = match cfg.set_prob_mode {
                SetProbMode::Product => {
                    let pairs: Vec<(usize, usize)> = positions
                        .iter()
                        .flat_map(|&pos| {
                            decisions[pos].selected_experts.iter().map(move |&e| (pos, e))
                        })
                        .collect();
                    let gathered = tape.gather(layer_art.gate_logprobs, &pairs);
                    let lp_new = tape.segment_sum(gathered, k);
                    let old: Vec<f64> = positions
                        .iter()
                        .map(|&pos| decisions[pos].set_logprob_product)
                        .collect();
                    surrogate_loss_from_logprobs(
                        &mut tape,
                        lp_new,
                        &old,
                        advantage,
                        cfg.clip_epsilon,
                    )
                }
                SetProbMode::Sequential => {
                    // Scalar chain per position; K is small.
                    let mut ratios = Vec::with_capacity(positions.len());
                    let mut sum: Option<Var> = None;
                    for &pos in &positions {
                        let lp = sequential_logprob_var(
                            &mut tape,
                            layer_art.gate_probs,
                            pos,
                            &decisions[pos].selected_experts,
                        );
                        let old = decisions[pos].set_logprob_sequential;
                        let diff = tape.add_const_vec(lp, &[-old]);
                        let r = tape.exp(diff);
                        ratios.push(tape.scalar_value(r));
                        let s1 = tape.scale(r, advantage);
                        let clipped = tape.clamp(r, 1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon);
                        let s2 = tape.scale(clipped, advantage);
                        let m = tape.min_elem(s1, s2);
                        sum = Some(match sum {
                            Some(acc) => tape.add(acc, m),
                            None => m,
                        });
                    }
                    let total = sum.expect("at least one gate position");
                    let loss = tape.scale(total, -1.0 / positions.len() as f64);
                    (loss, ratios)
                }
            };
            gate_ratios.extend(ratios);
            layer_losses = Some(match layer_losses {
                Some(acc) => tape.add(acc, loss),
                None => loss,
            });
        }
        // Each per-layer term already divides by the position count;
        // dividing the sum by L completes the 1/(L * |y|) normalizer.
        let summed = layer_losses.expect("model has at least one layer");
        let gate_loss = tape.scale(summed, 1.0 / cfgm.num_layers as f64);
        gate_value = tape.scalar_value(gate_loss);
        parts.push(tape.scale(gate_loss, traj_weight * cfg.gate_loss_weight));
    }

    if let Some(lb) = lb {
        let mut acc: Option<Var> = None;
        for (l, layer_art) in art.layers.iter().enumerate() {
            let tiled: Vec<f64> = std::iter::repeat(&lb.fractions[l])
                .take(tokens.len())
                .flat_map(|f| f.iter().copied())
                .collect();
            let dot = tape.dot_const(layer_art.gate_probs, &tiled);
            acc = Some(match acc {
                Some(a) => tape.add(a, dot),
                None => dot,
            });
        }
        let raw = acc.expect("at least one layer");
        let scale = cfgm.num_experts as f64
            / (cfgm.num_layers as f64 * lb.total_tokens as f64);
        let piece = tape.scale(raw, scale);
        lb_value = tape.scalar_value(piece);
        parts.push(tape.scale(piece, cfg.lb_coefficient));
    }

    let mut total = parts[0];
    for p in &parts[1..] {
        total = tape.add(total, *p);
    }

    let mut grads = Vec::new();
    if with_grads {
        tape.backward(total)?;
        for &(pid, var) in tape.param_bindings() {
            if let Some(g) = tape.grad(var) {
                grads.push((pid, g.to_vec()));
            }
        }
    }

    Ok(TrajOutcome { token_value, gate_value, lb_value, token_ratios, gate_ratios, grads })
}

fn clip_fraction(ratios: &[f64], eps: f64) -> f64 {
    if ratios.is_empty() {
        return 0.0;
    }
    ratios.iter().filter(|r| (**r - 1.0).abs() > eps).count() as f64 / ratios.len() as f64
}

/// Evaluate the batch objective, optionally with gradients. Trajectory
/// tapes run concurrently; gradients are merged in trajectory order so
/// results are bitwise deterministic.
pub fn evaluate_batch(
    model: &Model,
    groups: &[RolloutGroup],
    mask: Option<&ExpertMask>,
    cfg: &TrainConfig,
    select: LossSelect,
    with_grads: bool,
) -> Result<BatchEvaluation> {
    if groups.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    for g in groups {
        if g.advantages.len() != g.trajectories.len() {
            return Err(Error::InvalidArgument(
                "advantages not computed for rollout group".into(),
            ));
        }
    }
    let lb = (matches!(select, LossSelect::Both) && cfg.lb_coefficient >= 0.0)
        .then(|| lb_context(groups, &model.config));
    let lb_ref = lb.as_ref();

    let tasks: Vec<(usize, usize)> = groups
        .iter()
        .enumerate()
        .flat_map(|(gi, g)| (0..g.trajectories.len()).map(move |ti| (gi, ti)))
        .collect();
    let n_traj = tasks.len() as f64;
    let traj_weight = 1.0 / n_traj;

    let mut grads = with_grads.then(|| model.params.zero_grads());
    let mut token_sum = 0.0;
    let mut gate_sum = 0.0;
    let mut lb_sum = 0.0;
    let mut token_ratios = Vec::new();
    let mut gate_ratios = Vec::new();

    for chunk in tasks.chunks(PAR_CHUNK) {
        let outcomes: Vec<TrajOutcome> = chunk
            .par_iter()
            .map(|&(gi, ti)| {
                trajectory_contribution(
                    model, &groups[gi], ti, mask, cfg, select, traj_weight, lb_ref, with_grads,
                )
            })
            .collect::<Result<_>>()?;
        for out in outcomes {
            token_sum += out.token_value;
            gate_sum += out.gate_value;
            lb_sum += out.lb_value;
            token_ratios.extend(out.token_ratios);
            gate_ratios.extend(out.gate_ratios);
            if let Some(gr) = grads.as_mut() {
                for (pid, g) in out.grads {
                    let acc = &mut gr[pid];
                    for (a, b) in acc.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
            }
        }
    }

    let token_grpo = token_sum / n_traj;
    let gate_grpo = gate_sum / n_traj;
    let load_balance = lb_sum;
    let total = match select {
        LossSelect::Both => {
            token_grpo + cfg.gate_loss_weight * gate_grpo + cfg.lb_coefficient * load_balance
        }
        LossSelect::TokenOnly => token_grpo,
        LossSelect::GateOnly => gate_grpo,
    };
    let breakdown = LossBreakdown {
        token_grpo,
        gate_grpo,
        load_balance,
        total,
        token_clip_fraction: clip_fraction(&token_ratios, cfg.clip_epsilon),
        gate_clip_fraction: clip_fraction(&gate_ratios, cfg.clip_epsilon),
    };
    Ok(BatchEvaluation { breakdown, token_ratios, gate_ratios, grads })
}

/// Token-GRPO loss of one group against the current model, with ratio
/// diagnostics. Expert selections are forced from the trajectories;
/// gating weights follow current parameters.
pub fn token_grpo_loss(
    model: &Model,
    group: &RolloutGroup,
    mask: Option<&ExpertMask>,
    cfg: &TrainConfig,
) -> Result<(f64, LossDiag)> {
    let eval = evaluate_batch(
        model,
        std::slice::from_ref(group),
        mask,
        cfg,
        LossSelect::TokenOnly,
        false,
    )?;
    let diag = LossDiag {
        clip_fraction: eval.breakdown.token_clip_fraction,
        ratios: eval.token_ratios,
    };
    Ok((eval.breakdown.token_grpo, diag))
}

/// Gate-GRPO loss of one group against the current model.
pub fn gate_grpo_loss(
    model: &Model,
    group: &RolloutGroup,
    mask: Option<&ExpertMask>,
    cfg: &TrainConfig,
) -> Result<(f64, LossDiag)> {
    let eval = evaluate_batch(
        model,
        std::slice::from_ref(group),
        mask,
        cfg,
        LossSelect::GateOnly,
        false,
    )?;
    let diag = LossDiag {
        clip_fraction: eval.breakdown.gate_clip_fraction,
        ratios: eval.gate_ratios,
    };
    Ok((eval.breakdown.gate_grpo, diag))
}

/// Cosine-annealed learning rate.
pub fn cosine_lr(base: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return base;
    }
    let t = (step.min(total_steps)) as f64 / total_steps as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Result of one optimizer step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub loss: LossBreakdown,
    pub reward_mean: f64,
    /// Mean over groups of the within-group population std.
    pub reward_std: f64,
    pub learning_rate: f64,
}

/// Result of one supervised baseline step.
#[derive(Debug, Clone)]
pub struct BaselineOutcome {
    pub ce_loss: f64,
    pub lb_loss: f64,
    pub total: f64,
    /// Fraction of the batch answered correctly by the constrained
    /// argmax under the step's routing.
    pub batch_accuracy: f64,
    pub learning_rate: f64,
}

/// Adam state plus the step counter; one instance per training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    m: ParamGrads,
    v: ParamGrads,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Trainer {
    pub fn new(model: &Model) -> Self {
        Trainer {
            m: model.params.zero_grads(),
            v: model.params.zero_grads(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One Adam update with the given gradients.
    pub fn apply_gradients(&mut self, model: &mut Model, grads: &ParamGrads, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for id in 0..model.params.len() {
            let g = &grads[id];
            let m = &mut self.m[id];
            let v = &mut self.v[id];
            let p = model.params.values_mut(id);
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }

    /// One MoE-GRPO step over a batch of rollout groups built against
    /// the current snapshot. Mutating the parameters afterwards is the
    /// snapshot refresh: the next rollouts sample from the new policy.
    pub fn train_step(
        &mut self,
        model: &mut Model,
        groups: &[RolloutGroup],
        mask: Option<&ExpertMask>,
        cfg: &TrainConfig,
        step: usize,
    ) -> Result<StepOutcome> {
        let eval = evaluate_batch(model, groups, mask, cfg, LossSelect::Both, true)?;
        if !eval.breakdown.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss at step {step}: token {} gate {} lb {}",
                eval.breakdown.token_grpo, eval.breakdown.gate_grpo, eval.breakdown.load_balance
            )));
        }
        let lr = cosine_lr(cfg.learning_rate, step, cfg.total_steps);
        self.apply_gradients(model, &eval.grads.expect("gradients requested"), lr);
        let reward_mean =
            groups.iter().map(|g| g.reward_mean()).sum::<f64>() / groups.len() as f64;
        let reward_std =
            groups.iter().map(|g| g.reward_std()).sum::<f64>() / groups.len() as f64;
        Ok(StepOutcome { loss: eval.breakdown, reward_mean, reward_std, learning_rate: lr })
    }

    /// One supervised fine-tuning step: cross-entropy on the answer
    /// token under the chosen baseline router, plus the load-balancing
    /// auxiliary. Gradients reach the gates through the Eq. 2 mixture
    /// weights.
    #[allow(clippy::too_many_arguments)]
    pub fn baseline_finetune_step(
        &mut self,
        model: &mut Model,
        samples: &[&MultimodalSample],
        router: &RouterMode,
        cfg: &TrainConfig,
        step: usize,
        seed: u64,
    ) -> Result<BaselineOutcome> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("empty baseline batch".into()));
        }
        let sampler_for = |i: usize| -> Result<Sampler> {
            let rng =
                SeededRng::stream(seed, streams::BASELINE_ROUTING, step as u64, i as u64);
            match router {
                RouterMode::DetTopk => Ok(Sampler::DetTopk),
                RouterMode::StochMulti => Ok(Sampler::MaskedMultinomial { rng }),
                RouterMode::StochNoise { sigma } => {
                    Ok(Sampler::NoisyTopk { sigma: *sigma, rng })
                }
                RouterMode::ExpertChoice { capacity } => {
                    Ok(Sampler::ExpertChoice { capacity: *capacity })
                }
                RouterMode::Sinkhorn { iterations, temperature } => Ok(Sampler::Sinkhorn {
                    iterations: *iterations,
                    temperature: *temperature,
                }),
                RouterMode::MaskedMulti { .. } => Err(Error::InvalidArgument(
                    "masked_multi trains with MoE-GRPO, not supervised fine-tuning".into(),
                )),
            }
        };

        // Phase 1: forward every sample with gradients recorded, keeping
        // the tapes alive so the batch-level load-balance fractions can
        // be attached before backward.
        struct Forwarded {
            tape: Tape,
            logits: Var,
            gate_probs: Vec<Var>,
            decisions: Vec<Vec<RoutingDecision>>,
            seq_len: usize,
            correct: bool,
        }
        let forwarded: Vec<Forwarded> = samples
            .par_iter()
            .enumerate()
            .map(|(i, sample)| -> Result<Forwarded> {
                let mut tape = Tape::new(true);
                let mut spec = RoutingSpec {
                    sampler: sampler_for(i)?,
                    mask: None,
                    forced: None,
                    require_forced_complete: false,
                };
                let prompt = sample.prompt_tokens();
                let art = model.forward(&mut tape, &prompt, &sample.modality_tags, &mut spec)?;
                let vocab = model.config.vocab_size;
                let last = prompt.len() - 1;
                let row = &tape.value(art.logits)[last * vocab..(last + 1) * vocab];
                let correct = argmax_token(row, Some(&sample.choices)) == sample.answer_token();
                Ok(Forwarded {
                    logits: art.logits,
                    gate_probs: art.layers.iter().map(|l| l.gate_probs).collect(),
                    decisions: art
                        .layers
                        .iter()
                        .map(|l| l.decisions.clone())
                        .collect(),
                    seq_len: prompt.len(),
                    tape,
                    correct,
                })
            })
            .collect::<Result<_>>()?;

        // Batch load-balance fractions from the routed selections.
        let cfgm = &model.config;
        let mut counts = vec![vec![0u64; cfgm.num_experts]; cfgm.num_layers];
        let mut total_tokens = 0usize;
        for f in &forwarded {
            total_tokens += f.seq_len;
            for (l, layer) in f.decisions.iter().enumerate() {
                for d in layer {
                    for &e in &d.selected_experts {
                        counts[l][e] += 1;
                    }
                }
            }
        }
        let fractions: Vec<Vec<f64>> = counts
            .into_iter()
            .map(|layer| {
                let total: u64 = layer.iter().sum();
                layer
                    .into_iter()
                    .map(|c| if total > 0 { c as f64 / total as f64 } else { 0.0 })
                    .collect()
            })
            .collect();

        // Phase 2: attach losses and run backward per sample.
        let correct = forwarded.iter().filter(|f| f.correct).count();
        let n = samples.len() as f64;
        let lb_scale =
            cfgm.num_experts as f64 / (cfgm.num_layers as f64 * total_tokens as f64);
        struct PhaseTwo {
            ce: f64,
            lb: f64,
            grads: Vec<(usize, Vec<f64>)>,
        }
        let outcomes: Vec<PhaseTwo> = forwarded
            .into_par_iter()
            .enumerate()
            .map(|(i, mut f)| -> Result<PhaseTwo> {
                let sample = samples[i];
                let tape = &mut f.tape;
                let lsm = tape.log_softmax_rows(f.logits, None)?;
                let picked =
                    tape.gather(lsm, &[(f.seq_len - 1, sample.answer_token() as usize)]);
                let nll_sum = tape.sum(picked);
                let ce = tape.scale(nll_sum, -1.0);
                let mut acc: Option<Var> = None;
                for (l, &gp) in f.gate_probs.iter().enumerate() {
                    let tiled: Vec<f64> = std::iter::repeat(&fractions[l])
                        .take(f.seq_len)
                        .flat_map(|v| v.iter().copied())
                        .collect();
                    let dot = tape.dot_const(gp, &tiled);
                    acc = Some(match acc {
                        Some(a) => tape.add(a, dot),
                        None => dot,
                    });
                }
                let lb_piece = tape.scale(acc.expect("layers"), lb_scale);
                let ce_w = tape.scale(ce, 1.0 / n);
                let lb_w = tape.scale(lb_piece, cfg.lb_coefficient);
                let total = tape.add(ce_w, lb_w);
                let ce_value = tape.scalar_value(ce);
                let lb_value = tape.scalar_value(lb_piece);
                tape.backward(total)?;
                let grads = tape
                    .param_bindings()
                    .iter()
                    .filter_map(|&(pid, var)| tape.grad(var).map(|g| (pid, g.to_vec())))
                    .collect();
                Ok(PhaseTwo { ce: ce_value, lb: lb_value, grads })
            })
            .collect::<Result<_>>()?;

        let mut grads = model.params.zero_grads();
        let mut ce_sum = 0.0;
        let mut lb_sum = 0.0;
        for out in &outcomes {
            ce_sum += out.ce;
            lb_sum += out.lb;
            for (pid, g) in &out.grads {
                let acc = &mut grads[*pid];
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }

        let ce_loss = ce_sum / n;
        let lb_loss = lb_sum;
        let total = ce_loss + cfg.lb_coefficient * lb_loss;
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("baseline loss at step {step}")));
        }
        let lr = cosine_lr(cfg.learning_rate, step, cfg.total_steps);
        self.apply_gradients(model, &grads, lr);
        Ok(BaselineOutcome {
            ce_loss,
            lb_loss,
            total,
            batch_accuracy: correct as f64 / n,
            learning_rate: lr,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn surrogate_positive_advantage_clips_from_above() {
        // r = 2.0, adv = 1, eps = 0.2 -> min(2.0, 1.2) = 1.2
        assert_eq!(surrogate_objective(2.0, 1.0, 0.2), 1.2);
        // r = 1.25, adv = 1 -> min(1.25, 1.2) = 1.2
        assert!((surrogate_objective(1.25, 1.0, 0.2) - 1.2).abs() < 1e-15);
    }

    #[test]
    fn surrogate_negative_advantage_is_pessimistic() {
        // r = 0.5, adv = -1, eps = 0.2 -> min(-0.5, -0.8) = -0.8
        assert_eq!(surrogate_objective(0.5, -1.0, 0.2), -0.8);
    }

    #[test]
    fn surrogate_bounded_by_clip() {
        for &r in &[0.01, 0.5, 0.9, 1.0, 1.1, 1.9, 5.0] {
            for &adv in &[-2.0, -1.0, 0.0, 1.0, 2.0] {
                let v = surrogate_objective(r, adv, 0.2);
                assert!(v.abs() <= (1.0 + 0.2) * adv.abs() + 1e-12 || v <= r * adv);
            }
        }
    }

    #[test]
    fn lb_uniform_is_one() {
        // Perfectly balanced routing with a uniform gate: f_e = P_e = 1/N
        // per layer -> N * N * (1/N^2) = 1.
        let n = 8;
        let mut records = Vec::new();
        for t in 0..n {
            records.push(RoutingDecision {
                position: t,
                layer: 0,
                selected_experts: vec![t % n, (t + 1) % n],
                gate_probs: vec![1.0 / n as f64; n],
                behavior_prob: 1.0,
                draw_probs: vec![],
                set_logprob_product: 0.0,
                set_logprob_sequential: 0.0,
            });
        }
        let lb = load_balancing_loss(records.iter(), 1, n);
        assert!((lb - 1.0).abs() < 1e-12, "{lb}");
    }

    #[test]
    fn lb_collapsed_is_n() {
        // Every token routes to expert 0 with gate probability 1.
        let n = 8;
        let records: Vec<RoutingDecision> = (0..10)
            .map(|t| {
                let mut probs = vec![0.0; n];
                probs[0] = 1.0;
                RoutingDecision {
                    position: t,
                    layer: 0,
                    selected_experts: vec![0],
                    gate_probs: probs,
                    behavior_prob: 1.0,
                    draw_probs: vec![],
                    set_logprob_product: 0.0,
                    set_logprob_sequential: 0.0,
                }
            })
            .collect();
        let lb = load_balancing_loss(records.iter(), 1, n);
        assert!((lb - n as f64).abs() < 1e-12, "{lb}");
    }

    #[test]
    fn lb_at_least_one_for_topk_routing() {
        // Top-K of the gate distribution correlates f with P, so the
        // Switch loss sits at or above its balanced minimum.
        use crate::numeric::rng::streams;
        use crate::routing::select_topk;
        let n = 8;
        for trial in 0..100u64 {
            let mut rng = SeededRng::stream(50, streams::TEST, 60, trial);
            let mut records = Vec::new();
            for t in 0..16 {
                let logits: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
                let mut probs = vec![0.0; n];
                crate::numeric::kernels::row_softmax_masked(
                    &logits, None, 0, &mut probs, None,
                )
                .unwrap();
                records.push(select_topk(&probs, 2).at(t, 0));
            }
            let lb = load_balancing_loss(records.iter(), 1, n);
            assert!(lb >= 1.0 - 1e-12, "trial {trial}: {lb}");
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert!((cosine_lr(1.0, 0, 100) - 1.0).abs() < 1e-12);
        assert!((cosine_lr(1.0, 50, 100) - 0.5).abs() < 1e-12);
        assert!(cosine_lr(1.0, 100, 100).abs() < 1e-12);
        assert_eq!(cosine_lr(0.3, 5, 0), 0.3);
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        let mut c = TrainConfig::default();
        c.clip_epsilon = 1.5;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.rollouts_per_group = 1;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.mask_percent = 100.0;
        assert!(c.validate().is_err());
    }
}
