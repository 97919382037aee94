//! Routing-aware forward passes and greedy decoding.
//!
//! One forward implementation serves every mode: stochastic rollout
//! sampling, deterministic top-K inference, and forced-trajectory
//! recomputation for GRPO ratios. Value computation is identical with
//! gradients on or off, and per-position work depends only on earlier
//! positions, so replaying a recorded trajectory with unchanged
//! parameters reproduces the original logits bitwise.

use crate::error::{Error, Result};
use crate::modality::ExpertMask;
use crate::numeric::kernels::row_softmax_masked;
use crate::numeric::rng::SeededRng;
use crate::numeric::sampling::sample_multinomial_without_replacement;
use crate::numeric::tape::{Tape, Var};
use crate::routing::{self, RoutingDecision};
use crate::tasks::Modality;

use super::Model;

/// Expert-selection sampler for positions not covered by a forced
/// trajectory.
#[derive(Debug, Clone)]
pub enum Sampler {
    DetTopk,
    MaskedMultinomial { rng: SeededRng },
    NoisyTopk { sigma: f64, rng: SeededRng },
    ExpertChoice { capacity: Option<usize> },
    Sinkhorn { iterations: usize, temperature: f64 },
}

/// Routing instructions for one forward pass.
#[derive(Debug)]
pub struct RoutingSpec<'a> {
    pub sampler: Sampler,
    /// Modality-conditioned expert mask applied to every gate softmax.
    pub mask: Option<&'a ExpertMask>,
    /// Decisions to force, indexed [layer][position]; positions beyond
    /// the recorded prefix are sampled.
    pub forced: Option<&'a [Vec<RoutingDecision>]>,
    /// Error out if the forced trajectory does not cover every position.
    pub require_forced_complete: bool,
}

impl<'a> RoutingSpec<'a> {
    pub fn det_topk() -> Self {
        RoutingSpec {
            sampler: Sampler::DetTopk,
            mask: None,
            forced: None,
            require_forced_complete: false,
        }
    }

    pub fn masked_multinomial(mask: Option<&'a ExpertMask>, rng: SeededRng) -> Self {
        RoutingSpec {
            sampler: Sampler::MaskedMultinomial { rng },
            mask,
            forced: None,
            require_forced_complete: false,
        }
    }

    /// Recompute under a fully recorded trajectory: selections are
    /// taken from it, gating weights follow current parameters.
    pub fn forced(
        trajectory: &'a [Vec<RoutingDecision>],
        mask: Option<&'a ExpertMask>,
    ) -> Self {
        RoutingSpec {
            sampler: Sampler::DetTopk,
            mask,
            forced: Some(trajectory),
            require_forced_complete: true,
        }
    }
}

/// Per-layer tape handles and routing records from one forward pass.
pub struct LayerArtifacts {
    /// Masked row-softmax of the gate logits; the Eq. 2 mixture weights.
    pub gate_probs: Var,
    /// Masked row-log-softmax of the same logits.
    pub gate_logprobs: Var,
    pub decisions: Vec<RoutingDecision>,
}

pub struct ForwardArtifacts {
    /// Next-token logits, [positions x vocab].
    pub logits: Var,
    pub layers: Vec<LayerArtifacts>,
}

/// Result of greedy decoding.
#[derive(Debug, Clone)]
pub struct DecodeOutput {
    pub generated: Vec<u32>,
    /// Full-vocabulary log-probability of each generated token under the
    /// decoding parameters, from the same forward pass that produced it.
    pub token_logprobs: Vec<f64>,
    /// Routing decisions for every processed input position,
    /// indexed [layer][position].
    pub decisions: Vec<Vec<RoutingDecision>>,
}

fn build_mask_rows(
    mask: &ExpertMask,
    layer: usize,
    tags: &[Modality],
    num_experts: usize,
    k: usize,
) -> Result<Vec<bool>> {
    let mut rows = Vec::with_capacity(tags.len() * num_experts);
    for &tag in tags {
        let row = mask.masked_row(layer, tag);
        let unmasked = row.iter().filter(|&&m| !m).count();
        if unmasked < k {
            return Err(Error::MaskTooAggressive { unmasked, k });
        }
        rows.extend_from_slice(&row);
    }
    Ok(rows)
}

fn validate_selection(sel: &[usize], num_experts: usize) -> Result<()> {
    for (i, &e) in sel.iter().enumerate() {
        if e >= num_experts {
            return Err(Error::InvalidArgument(format!(
                "expert index {e} out of range (N={num_experts})"
            )));
        }
        if sel[..i].contains(&e) {
            return Err(Error::InvalidArgument(format!("duplicate expert index {e}")));
        }
    }
    Ok(())
}

/// Rebuild a forced decision's probability fields from the current
/// gating distribution, preserving the recorded draw order.
fn recompute_decision(
    stored: &RoutingDecision,
    probs_row: &[f64],
    logp_row: &[f64],
    position: usize,
    layer: usize,
) -> RoutingDecision {
    let selected = stored.selected_experts.clone();
    let set_logprob_product: f64 = selected.iter().map(|&e| logp_row[e]).sum();
    let behavior_prob: f64 = selected.iter().map(|&e| probs_row[e]).product();
    let set_logprob_sequential = routing::sequential_set_logprob(probs_row, &selected);
    let mut used = 0.0;
    let draw_probs: Vec<f64> = selected
        .iter()
        .map(|&e| {
            let p = probs_row[e] / (1.0 - used);
            used += probs_row[e];
            p
        })
        .collect();
    RoutingDecision {
        position,
        layer,
        selected_experts: selected,
        gate_probs: probs_row.to_vec(),
        behavior_prob,
        draw_probs,
        set_logprob_product,
        set_logprob_sequential,
    }
}

impl Model {
    /// Run the transformer over `tokens`, routing each (position, layer)
    /// per `spec`. Returns next-token logits for every position plus the
    /// full routing record.
    pub fn forward(
        &self,
        tape: &mut Tape,
        tokens: &[u32],
        tags: &[Modality],
        spec: &mut RoutingSpec,
    ) -> Result<ForwardArtifacts> {
        let cfg = &self.config;
        let s = tokens.len();
        if s == 0 {
            return Err(Error::InvalidArgument("empty token sequence".into()));
        }
        if s > cfg.max_seq_len {
            return Err(Error::SequenceTooLong { len: s, max: cfg.max_seq_len });
        }
        if tags.len() != s {
            return Err(Error::InvalidArgument(format!(
                "modality tags cover {} of {} positions",
                tags.len(),
                s
            )));
        }
        for &t in tokens {
            if t as usize >= cfg.vocab_size {
                return Err(Error::TokenOutOfRange { id: t, vocab: cfg.vocab_size });
            }
        }
        if spec.require_forced_complete {
            let forced = spec
                .forced
                .ok_or_else(|| Error::IncompleteTrajectory { position: 0, layer: 0 })?;
            for (l, layer) in forced.iter().enumerate() {
                if layer.len() < s {
                    return Err(Error::IncompleteTrajectory { position: layer.len(), layer: l });
                }
            }
        }

        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..s).collect();
        let idx = &self.index;
        let pbind = |tape: &mut Tape, id: crate::numeric::params::ParamId| {
            let e = self.params.entry(id);
            let (r, c) = match e.shape.len() {
                1 => (1, e.shape[0]),
                _ => (e.shape[0], e.shape[1]),
            };
            tape.param(id, &e.data, r, c)
        };

        let tok_table = pbind(tape, idx.tok_emb);
        let pos_table = pbind(tape, idx.pos_emb);
        let te = tape.embedding(tok_table, &ids);
        let pe = tape.embedding(pos_table, &positions);
        let mut x = tape.add(te, pe);

        let mut layers = Vec::with_capacity(cfg.num_layers);
        for (l, li) in idx.layers.iter().enumerate() {
            // Attention block (pre-norm).
            let attn_gain = pbind(tape, li.attn_gain);
            let normed = tape.rms_norm(x, attn_gain);
            let wq = pbind(tape, li.wq);
            let bq = pbind(tape, li.bq);
            let wk = pbind(tape, li.wk);
            let bk = pbind(tape, li.bk);
            let wv = pbind(tape, li.wv);
            let bv = pbind(tape, li.bv);
            let q0 = tape.matmul(normed, wq);
            let q = tape.add_bias(q0, bq);
            let k0 = tape.matmul(normed, wk);
            let k = tape.add_bias(k0, bk);
            let v0 = tape.matmul(normed, wv);
            let v = tape.add_bias(v0, bv);
            let attn = tape.causal_attention(q, k, v, cfg.num_heads);
            let wo = pbind(tape, li.wo);
            let bo = pbind(tape, li.bo);
            let proj0 = tape.matmul(attn, wo);
            let proj = tape.add_bias(proj0, bo);
            x = tape.add(x, proj);

            // Mixture block.
            let moe_gain = pbind(tape, li.moe_gain);
            let h = tape.rms_norm(x, moe_gain);
            let gate_w = pbind(tape, li.gate_w);
            let gate_b = pbind(tape, li.gate_b);
            let gl0 = tape.matmul(h, gate_w);
            let gate_logits = tape.add_bias(gl0, gate_b);
            let mask_rows = match spec.mask {
                Some(m) => {
                    Some(build_mask_rows(m, l, tags, cfg.num_experts, cfg.experts_per_token)?)
                }
                None => None,
            };
            let gate_probs = tape.softmax_rows(gate_logits, mask_rows.as_deref())?;
            let gate_logprobs = tape.log_softmax_rows(gate_logits, mask_rows.as_deref())?;

            let decisions = self.decide_layer(
                tape,
                l,
                s,
                gate_logits,
                gate_probs,
                gate_logprobs,
                spec,
            )?;
            let selections: Vec<Vec<usize>> = decisions
                .iter()
                .map(|d| {
                    let sel = d.sorted_experts();
                    validate_selection(&sel, cfg.num_experts).map(|_| sel)
                })
                .collect::<Result<_>>()?;

            let expert_vars: Vec<[Var; 4]> = li
                .experts
                .iter()
                .map(|ids| {
                    [
                        pbind(tape, ids[0]),
                        pbind(tape, ids[1]),
                        pbind(tape, ids[2]),
                        pbind(tape, ids[3]),
                    ]
                })
                .collect();
            let moe = tape.moe_experts(h, gate_probs, &expert_vars, &selections);
            x = tape.add(x, moe);

            layers.push(LayerArtifacts { gate_probs, gate_logprobs, decisions });
        }

        let final_gain = pbind(tape, idx.final_gain);
        let xf = tape.rms_norm(x, final_gain);
        let out_w = pbind(tape, idx.out_w);
        let out_b = pbind(tape, idx.out_b);
        let lg0 = tape.matmul(xf, out_w);
        let logits = tape.add_bias(lg0, out_b);

        Ok(ForwardArtifacts { logits, layers })
    }

    #[allow(clippy::too_many_arguments)]
    fn decide_layer(
        &self,
        tape: &Tape,
        layer: usize,
        s: usize,
        gate_logits: Var,
        gate_probs: Var,
        gate_logprobs: Var,
        spec: &mut RoutingSpec,
    ) -> Result<Vec<RoutingDecision>> {
        let n = self.config.num_experts;
        let k = self.config.experts_per_token;
        let logits_v = tape.value(gate_logits).to_vec();
        let probs_v = tape.value(gate_probs).to_vec();
        let logp_v = tape.value(gate_logprobs).to_vec();
        let forced_len = spec.forced.map_or(0, |f| f[layer].len().min(s));

        // Batch routers assign all non-forced positions at once.
        let batch_assignment: Option<Vec<Vec<usize>>> = match &spec.sampler {
            Sampler::ExpertChoice { capacity } => {
                let cap = capacity
                    .unwrap_or_else(|| routing::expert_choice_default_capacity(s, k, n));
                Some(routing::expert_choice_assign(&probs_v, s, n, cap))
            }
            Sampler::Sinkhorn { iterations, temperature } => {
                Some(routing::sinkhorn_assign(&probs_v, s, n, k, *iterations, *temperature))
            }
            _ => None,
        };

        let mut decisions = Vec::with_capacity(s);
        for p in 0..s {
            let probs_row = &probs_v[p * n..(p + 1) * n];
            let logp_row = &logp_v[p * n..(p + 1) * n];
            if p < forced_len {
                let stored = &spec.forced.unwrap()[layer][p];
                validate_selection(&stored.selected_experts, n)?;
                decisions.push(recompute_decision(stored, probs_row, logp_row, p, layer));
                continue;
            }
            let decision = match &mut spec.sampler {
                Sampler::DetTopk => routing::select_topk(probs_row, k).at(p, layer),
                Sampler::MaskedMultinomial { rng } => {
                    let draws = sample_multinomial_without_replacement(probs_row, k, rng)?;
                    let selected: Vec<usize> = draws.iter().map(|d| d.index).collect();
                    let draw_probs: Vec<f64> = draws.iter().map(|d| d.prob).collect();
                    let set_logprob_product: f64 =
                        selected.iter().map(|&e| logp_row[e]).sum();
                    let behavior_prob: f64 = selected.iter().map(|&e| probs_row[e]).product();
                    let set_logprob_sequential =
                        routing::sequential_set_logprob(probs_row, &selected);
                    RoutingDecision {
                        position: p,
                        layer,
                        selected_experts: selected,
                        gate_probs: probs_row.to_vec(),
                        behavior_prob,
                        draw_probs,
                        set_logprob_product,
                        set_logprob_sequential,
                    }
                }
                Sampler::NoisyTopk { sigma, rng } => {
                    let logits_row = &logits_v[p * n..(p + 1) * n];
                    let perturbed: Vec<f64> = if *sigma == 0.0 {
                        logits_row.to_vec()
                    } else {
                        logits_row.iter().map(|&z| z + *sigma * rng.normal()).collect()
                    };
                    let selected = routing::topk_indices(&perturbed, k);
                    RoutingDecision {
                        position: p,
                        layer,
                        selected_experts: selected,
                        gate_probs: probs_row.to_vec(),
                        behavior_prob: 1.0,
                        draw_probs: Vec::new(),
                        set_logprob_product: 0.0,
                        set_logprob_sequential: 0.0,
                    }
                }
                Sampler::ExpertChoice { .. } | Sampler::Sinkhorn { .. } => {
                    let selected = batch_assignment.as_ref().unwrap()[p].clone();
                    RoutingDecision {
                        position: p,
                        layer,
                        selected_experts: selected,
                        gate_probs: probs_row.to_vec(),
                        behavior_prob: 1.0,
                        draw_probs: Vec::new(),
                        set_logprob_product: 0.0,
                        set_logprob_sequential: 0.0,
                    }
                }
            };
            decisions.push(decision);
        }
        Ok(decisions)
    }

    /// Greedy decoding: every generated token is the argmax of the
    /// logits (optionally restricted to `allowed`; ties break toward the
    /// lowest token id). Stochasticity, if any, comes only from expert
    /// selection. Previously routed positions are forced to their
    /// recorded selections on every subsequent forward, so the
    /// trajectory stays consistent across the decode.
    pub fn greedy_decode(
        &self,
        prompt: &[u32],
        prompt_tags: &[Modality],
        max_new: usize,
        sampler: Sampler,
        mask: Option<&ExpertMask>,
        allowed: Option<&[u32]>,
    ) -> Result<DecodeOutput> {
        assert!(max_new >= 1, "max_new must be >= 1");
        let mut tokens = prompt.to_vec();
        let mut tags = prompt_tags.to_vec();
        let mut decisions: Vec<Vec<RoutingDecision>> =
            vec![Vec::new(); self.config.num_layers];
        let mut generated = Vec::with_capacity(max_new);
        let mut token_logprobs = Vec::with_capacity(max_new);
        let mut sampler = sampler;

        for step in 0..max_new {
            let mut tape = Tape::new(false);
            let mut spec = RoutingSpec {
                sampler: sampler.clone(),
                mask,
                forced: Some(&decisions),
                require_forced_complete: false,
            };
            let art = self.forward(&mut tape, &tokens, &tags, &mut spec)?;
            sampler = spec.sampler;
            for (l, layer_art) in art.layers.into_iter().enumerate() {
                decisions[l] = layer_art.decisions;
            }
            let vocab = self.config.vocab_size;
            let last = tokens.len() - 1;
            let row = &tape.value(art.logits)[last * vocab..(last + 1) * vocab];
            let next = argmax_token(row, allowed);
            let mut probs = vec![0.0; vocab];
            let mut logp = vec![0.0; vocab];
            row_softmax_masked(row, None, last, &mut probs, Some(&mut logp))?;
            token_logprobs.push(logp[next as usize]);
            generated.push(next);
            if step + 1 < max_new {
                tokens.push(next);
                tags.push(Modality::Text);
            }
        }
        Ok(DecodeOutput { generated, token_logprobs, decisions })
    }
}

/// Argmax over the allowed token set (or the full row); ties break
/// toward the lowest token id.
pub fn argmax_token(logits_row: &[f64], allowed: Option<&[u32]>) -> u32 {
    match allowed {
        Some(ids) => {
            let mut best = ids[0];
            let mut best_v = f64::NEG_INFINITY;
            for &id in ids {
                let v = logits_row[id as usize];
                if v > best_v {
                    best_v = v;
                    best = id;
                }
            }
            best
        }
        None => {
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for (i, &v) in logits_row.iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = i;
                }
            }
            best as u32
        }
    }
}
