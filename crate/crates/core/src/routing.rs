//! Expert-selection strategies: deterministic top-K, the stochastic
//! fine-tuning baselines, masked multinomial rollout sampling, and the
//! comparison routers (Expert Choice, Sinkhorn optimal transport).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::kernels::row_softmax_masked;
use crate::numeric::rng::SeededRng;
use crate::numeric::sampling::sample_multinomial_without_replacement;

/// How the behavior probability of a sampled expert set is computed.
///
/// `Product` multiplies the K individual masked-softmax probabilities —
/// an order-free surrogate under which the Gate-GRPO ratio decomposes
/// per expert. `Sequential` uses the exact without-replacement chain
/// probability in draw order; kept for ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetProbMode {
    #[default]
    Product,
    Sequential,
}

/// Expert-selection strategy, as selected by CLI flag or config key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum RouterMode {
    DetTopk,
    StochMulti,
    StochNoise { sigma: f64 },
    MaskedMulti { mask_percent: f64, set_prob: SetProbMode },
    ExpertChoice { capacity: Option<usize> },
    Sinkhorn { iterations: usize, temperature: f64 },
}

impl RouterMode {
    pub fn key(&self) -> &'static str {
        match self {
            RouterMode::DetTopk => "det_topk",
            RouterMode::StochMulti => "stoch_multi",
            RouterMode::StochNoise { .. } => "stoch_noise",
            RouterMode::MaskedMulti { .. } => "masked_multi",
            RouterMode::ExpertChoice { .. } => "expert_choice",
            RouterMode::Sinkhorn { .. } => "sinkhorn",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            RouterMode::StochNoise { sigma } if *sigma < 0.0 => Err(Error::InvalidConfig(
                format!("noise sigma must be nonnegative, got {sigma}"),
            )),
            RouterMode::MaskedMulti { mask_percent, .. }
                if !(0.0..100.0).contains(mask_percent) =>
            {
                Err(Error::InvalidConfig(format!(
                    "mask percentage must be in [0, 100), got {mask_percent}"
                )))
            }
            RouterMode::Sinkhorn { iterations, temperature } => {
                if *iterations < 1 {
                    Err(Error::InvalidConfig("sinkhorn iterations must be >= 1".into()))
                } else if *temperature <= 0.0 {
                    Err(Error::InvalidConfig("sinkhorn temperature must be positive".into()))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

/// Per-(token, layer) record of one expert-selection action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub position: usize,
    pub layer: usize,
    /// Selected expert indices, in draw order for sampled modes.
    pub selected_experts: Vec<usize>,
    /// Full gating distribution at selection time (masked softmax when a
    /// mask was in effect); masked experts hold exactly 0.
    pub gate_probs: Vec<f64>,
    /// Probability the behavior policy assigned to this selection:
    /// the product of the selected experts' gating probabilities
    /// (1.0 for deterministic modes).
    pub behavior_prob: f64,
    /// Renormalized probability of each draw, in draw order; empty for
    /// deterministic modes.
    pub draw_probs: Vec<f64>,
    /// log of `behavior_prob`, accumulated from per-expert log-softmax
    /// values so the training-side recomputation matches bitwise.
    pub set_logprob_product: f64,
    /// Exact sequential without-replacement log-probability.
    pub set_logprob_sequential: f64,
}

impl RoutingDecision {
    pub fn at(mut self, position: usize, layer: usize) -> Self {
        self.position = position;
        self.layer = layer;
        self
    }

    /// Selected experts in canonical ascending order. Forward passes sum
    /// expert contributions in this order so that rollouts that picked
    /// the same set in a different draw order produce identical outputs.
    pub fn sorted_experts(&self) -> Vec<usize> {
        let mut v = self.selected_experts.clone();
        v.sort_unstable();
        v
    }
}

/// Indices of the k largest values; ties broken toward the lower index.
pub fn topk_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b].partial_cmp(&values[a]).unwrap().then(a.cmp(&b))
    });
    order.truncate(k);
    order.sort_unstable();
    order
}

/// Deterministic top-K selection from a gating probability vector.
pub fn select_topk(gate_probs: &[f64], k: usize) -> RoutingDecision {
    assert!(k <= gate_probs.len());
    let selected = topk_indices(gate_probs, k);
    let lp: f64 = 0.0;
    RoutingDecision {
        position: 0,
        layer: 0,
        selected_experts: selected,
        gate_probs: gate_probs.to_vec(),
        behavior_prob: 1.0,
        draw_probs: Vec::new(),
        set_logprob_product: lp,
        set_logprob_sequential: lp,
    }
}

/// Sample k experts without replacement from the masked softmax of the
/// gating logits. Masked experts get a `-inf` logit, so the softmax
/// renormalizes over the remaining support automatically.
pub fn sample_masked_multinomial(
    gate_logits: &[f64],
    mask: Option<&[bool]>,
    k: usize,
    rng: &mut SeededRng,
) -> Result<RoutingDecision> {
    let n = gate_logits.len();
    if let Some(m) = mask {
        assert_eq!(m.len(), n);
        let unmasked = m.iter().filter(|&&x| !x).count();
        if unmasked < k {
            return Err(Error::MaskTooAggressive { unmasked, k });
        }
    }
    let mut probs = vec![0.0; n];
    let mut logp = vec![0.0; n];
    row_softmax_masked(gate_logits, mask, 0, &mut probs, Some(&mut logp))?;
    let draws = sample_multinomial_without_replacement(&probs, k, rng)?;

    let selected: Vec<usize> = draws.iter().map(|d| d.index).collect();
    let draw_probs: Vec<f64> = draws.iter().map(|d| d.prob).collect();
    let set_logprob_product: f64 = selected.iter().map(|&e| logp[e]).sum();
    let behavior_prob: f64 = selected.iter().map(|&e| probs[e]).product();
    let set_logprob_sequential: f64 = sequential_set_logprob(&probs, &selected);

    Ok(RoutingDecision {
        position: 0,
        layer: 0,
        selected_experts: selected,
        gate_probs: probs,
        behavior_prob,
        draw_probs,
        set_logprob_product,
        set_logprob_sequential,
    })
}

/// log P(e_1, ..., e_k) under sequential without-replacement sampling:
/// sum_i [ ln p(e_i) - ln(1 - p(e_1) - ... - p(e_{i-1})) ].
pub fn sequential_set_logprob(probs: &[f64], selected_in_order: &[usize]) -> f64 {
    let mut lp: f64 = 0.0;
    let mut used: f64 = 0.0;
    for &e in selected_in_order {
        lp += probs[e].ln() - (1.0 - used).ln();
        used += probs[e];
    }
    lp
}

/// Top-k of the logits after i.i.d. Gaussian perturbation. The reported
/// gating distribution comes from the unperturbed softmax; the recorded
/// behavior probability is 1 (not a proper density — baseline only,
/// never used for GRPO ratios).
pub fn noisy_topk(
    gate_logits: &[f64],
    sigma: f64,
    k: usize,
    rng: &mut SeededRng,
) -> Result<RoutingDecision> {
    assert!(sigma >= 0.0, "sigma must be nonnegative");
    let n = gate_logits.len();
    let mut probs = vec![0.0; n];
    row_softmax_masked(gate_logits, None, 0, &mut probs, None)?;
    let perturbed: Vec<f64> = if sigma == 0.0 {
        gate_logits.to_vec()
    } else {
        gate_logits.iter().map(|&z| z + sigma * rng.normal()).collect()
    };
    let selected = topk_indices(&perturbed, k);
    Ok(RoutingDecision {
        position: 0,
        layer: 0,
        selected_experts: selected,
        gate_probs: probs,
        behavior_prob: 1.0,
        draw_probs: Vec::new(),
        set_logprob_product: 0.0,
        set_logprob_sequential: 0.0,
    })
}

/// Expert Choice assignment: each expert independently selects its
/// top-`capacity` tokens by gating probability (column-wise top-k). A
/// token may end up with anywhere from 0 to N experts; tokens with zero
/// experts pass through on the residual alone.
pub fn expert_choice_assign(
    gate_probs: &[f64],
    tokens: usize,
    num_experts: usize,
    capacity: usize,
) -> Vec<Vec<usize>> {
    assert!(capacity >= 1 && tokens >= 1);
    assert_eq!(gate_probs.len(), tokens * num_experts);
    let mut selections: Vec<Vec<usize>> = vec![Vec::new(); tokens];
    for e in 0..num_experts {
        let col: Vec<f64> = (0..tokens).map(|t| gate_probs[t * num_experts + e]).collect();
        for t in topk_indices(&col, capacity.min(tokens)) {
            selections[t].push(e);
        }
    }
    for sel in selections.iter_mut() {
        sel.sort_unstable();
    }
    selections
}

/// Default Expert Choice capacity: ceil(tokens * K / N), so the expected
/// load matches top-K routing.
pub fn expert_choice_default_capacity(tokens: usize, k: usize, num_experts: usize) -> usize {
    (tokens * k).div_ceil(num_experts).max(1)
}

/// Sinkhorn row/column balancing of a [tokens x N] matrix toward row
/// sums K and column sums tokens*K/N. Returns the balanced matrix and
/// the worst marginal deviation at the final iterate.
pub fn sinkhorn_balance(
    gate_probs: &[f64],
    tokens: usize,
    num_experts: usize,
    k: usize,
    iterations: usize,
    temperature: f64,
) -> (Vec<f64>, f64) {
    assert!(iterations >= 1 && temperature > 0.0);
    assert_eq!(gate_probs.len(), tokens * num_experts);
    let row_target = k as f64;
    let col_target = tokens as f64 * k as f64 / num_experts as f64;
    // exp(log p / T) = p^(1/T); softmax probabilities are strictly
    // positive on the unmasked support.
    let mut m: Vec<f64> = gate_probs
        .iter()
        .map(|&p| if p > 0.0 { (p.ln() / temperature).exp() } else { 0.0 })
        .collect();
    let mut worst = f64::INFINITY;
    for _ in 0..iterations {
        for t in 0..tokens {
            let row = &mut m[t * num_experts..(t + 1) * num_experts];
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                let f = row_target / s;
                row.iter_mut().for_each(|v| *v *= f);
            }
        }
        for e in 0..num_experts {
            let s: f64 = (0..tokens).map(|t| m[t * num_experts + e]).sum();
            if s > 0.0 {
                let f = col_target / s;
                (0..tokens).for_each(|t| m[t * num_experts + e] *= f);
            }
        }
        worst = marginal_deviation(&m, tokens, num_experts, row_target, col_target);
        if worst < 1e-9 {
            break;
        }
    }
    (m, worst)
}

fn marginal_deviation(
    m: &[f64],
    tokens: usize,
    num_experts: usize,
    row_target: f64,
    col_target: f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    for t in 0..tokens {
        let s: f64 = m[t * num_experts..(t + 1) * num_experts].iter().sum();
        worst = worst.max((s - row_target).abs());
    }
    for e in 0..num_experts {
        let s: f64 = (0..tokens).map(|t| m[t * num_experts + e]).sum();
        worst = worst.max((s - col_target).abs());
    }
    worst
}

/// Sinkhorn-balanced assignment: balance the gating matrix, then take
/// the per-token top-k of the balanced matrix.
pub fn sinkhorn_assign(
    gate_probs: &[f64],
    tokens: usize,
    num_experts: usize,
    k: usize,
    iterations: usize,
    temperature: f64,
) -> Vec<Vec<usize>> {
    let (m, _) = sinkhorn_balance(gate_probs, tokens, num_experts, k, iterations, temperature);
    (0..tokens)
        .map(|t| topk_indices(&m[t * num_experts..(t + 1) * num_experts], k))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::rng::streams;

    #[test]
    fn topk_on_ordered_input() {
        let d = select_topk(&[0.4, 0.3, 0.2, 0.1], 2);
        assert_eq!(d.selected_experts, vec![0, 1]);
        assert_eq!(d.behavior_prob, 1.0);
    }

    #[test]
    fn topk_tie_break_lowest_index() {
        let d = select_topk(&[0.25, 0.25, 0.25, 0.25], 2);
        assert_eq!(d.selected_experts, vec![0, 1]);
    }

    #[test]
    fn topk_matches_exhaustive_pair_search() {
        let mut rng = SeededRng::stream(11, streams::TEST, 20, 0);
        for _ in 0..50 {
            let raw: Vec<f64> = (0..6).map(|_| rng.uniform() + 1e-3).collect();
            let total: f64 = raw.iter().sum();
            let probs: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let d = select_topk(&probs, 2);
            // brute force over all pairs
            let mut best = (0, 1);
            let mut best_sum = f64::NEG_INFINITY;
            for a in 0..6 {
                for b in (a + 1)..6 {
                    let s = probs[a] + probs[b];
                    if s > best_sum + 1e-15 {
                        best_sum = s;
                        best = (a, b);
                    }
                }
            }
            assert_eq!(d.selected_experts, vec![best.0, best.1]);
        }
    }

    #[test]
    fn topk_scale_invariant() {
        let logits = [1.4, -0.2, 0.8, 0.1];
        let base = topk_indices(&logits, 2);
        for &c in &[0.5, 2.0, 10.0] {
            let scaled: Vec<f64> = logits.iter().map(|&v| v * c).collect();
            assert_eq!(topk_indices(&scaled, 2), base);
        }
    }

    #[test]
    fn masked_multinomial_forced_support() {
        let mut rng = SeededRng::stream(21, streams::TEST, 21, 0);
        let mask = vec![true, true, false, true, true, false, true, true];
        let logits = vec![0.3; 8];
        for _ in 0..100 {
            let d = sample_masked_multinomial(&logits, Some(&mask), 2, &mut rng).unwrap();
            assert_eq!(d.sorted_experts(), vec![2, 5]);
            let expected = d.gate_probs[2] * d.gate_probs[5];
            assert!((d.behavior_prob - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn masked_multinomial_rejects_small_support() {
        let mut rng = SeededRng::stream(22, streams::TEST, 22, 0);
        let mask = vec![true, true, true, false];
        match sample_masked_multinomial(&[0.0; 4], Some(&mask), 2, &mut rng) {
            Err(Error::MaskTooAggressive { unmasked: 1, k: 2 }) => {}
            other => panic!("expected mask too aggressive, got {other:?}"),
        }
    }

    #[test]
    fn masked_expert_never_selected() {
        let mut mask = vec![false; 8];
        mask[3] = true;
        let logits: Vec<f64> = (0..8).map(|i| i as f64 * 0.1).collect();
        for trial in 0..100_000u64 {
            let mut rng = SeededRng::stream(23, streams::TEST, 23, trial);
            let d = sample_masked_multinomial(&logits, Some(&mask), 2, &mut rng).unwrap();
            assert!(!d.selected_experts.contains(&3));
            assert!(d.set_logprob_product.is_finite());
        }
    }

    #[test]
    fn uniform_unmasked_inclusion_frequency() {
        // Uniform gate, N = 8, k = 2: inclusion probability of each
        // expert is k/N = 0.25.
        let logits = vec![0.0; 8];
        let mut counts = [0usize; 8];
        let n = 100_000u64;
        for trial in 0..n {
            let mut rng = SeededRng::stream(24, streams::TEST, 24, trial);
            let d = sample_masked_multinomial(&logits, None, 2, &mut rng).unwrap();
            for e in d.selected_experts {
                counts[e] += 1;
            }
        }
        for (e, &c) in counts.iter().enumerate() {
            let freq = c as f64 / n as f64;
            assert!((freq - 0.25).abs() < 0.01, "expert {e}: {freq}");
        }
    }

    #[test]
    fn noisy_topk_sigma_zero_equals_select_topk() {
        let logits = [0.9, -0.4, 1.3, 0.0];
        let mut probs = vec![0.0; 4];
        row_softmax_masked(&logits, None, 0, &mut probs, None).unwrap();
        let det = select_topk(&probs, 2);
        let mut rng = SeededRng::stream(25, streams::TEST, 25, 0);
        let noisy = noisy_topk(&logits, 0.0, 2, &mut rng).unwrap();
        assert_eq!(noisy.selected_experts, det.selected_experts);
    }

    #[test]
    fn noisy_topk_dominant_logit_wins() {
        // logits [10, 0, 0, 0] with sigma 0.1: expert 0 essentially always.
        let logits = [10.0, 0.0, 0.0, 0.0];
        let n = 100_000u64;
        let mut hits = 0usize;
        for trial in 0..n {
            let mut rng = SeededRng::stream(26, streams::TEST, 26, trial);
            let d = noisy_topk(&logits, 0.1, 1, &mut rng).unwrap();
            if d.selected_experts == [0] {
                hits += 1;
            }
        }
        assert!(hits as f64 / n as f64 > 0.999);
    }

    #[test]
    fn noisy_topk_uniform_logits_symmetric() {
        let logits = [0.0; 4];
        let n = 100_000u64;
        let mut counts = [0usize; 4];
        for trial in 0..n {
            let mut rng = SeededRng::stream(27, streams::TEST, 27, trial);
            let d = noisy_topk(&logits, 1.0, 1, &mut rng).unwrap();
            counts[d.selected_experts[0]] += 1;
        }
        for &c in &counts {
            assert!((c as f64 / n as f64 - 0.25).abs() < 0.01);
        }
    }

    #[test]
    fn expert_choice_single_token_gets_all_experts() {
        let probs = vec![0.1, 0.2, 0.3, 0.4];
        let sel = expert_choice_assign(&probs, 1, 4, 1);
        assert_eq!(sel, vec![vec![0, 1, 2, 3]]);
    }

    #[test]
    fn expert_choice_diagonal_dominance() {
        let n = 4;
        let mut probs = vec![0.05; n * n];
        for i in 0..n {
            probs[i * n + i] = 0.85;
        }
        let sel = expert_choice_assign(&probs, n, n, 1);
        for (i, s) in sel.iter().enumerate() {
            assert_eq!(s, &vec![i]);
        }
    }

    #[test]
    fn expert_choice_matches_bruteforce_column_topk() {
        let mut rng = SeededRng::stream(28, streams::TEST, 28, 0);
        let (tokens, n, cap) = (6, 4, 2);
        let probs: Vec<f64> = (0..tokens * n).map(|_| rng.uniform()).collect();
        let sel = expert_choice_assign(&probs, tokens, n, cap);
        for e in 0..n {
            let mut col: Vec<(usize, f64)> =
                (0..tokens).map(|t| (t, probs[t * n + e])).collect();
            col.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            for &(t, _) in col.iter().take(cap) {
                assert!(sel[t].contains(&e));
            }
            for &(t, _) in col.iter().skip(cap) {
                assert!(!sel[t].contains(&e));
            }
        }
    }

    #[test]
    fn sinkhorn_uniform_matrix_is_fixed_point() {
        let tokens = 4;
        let n = 4;
        let probs = vec![0.25; tokens * n];
        let (m, dev) = sinkhorn_balance(&probs, tokens, n, 2, 1, 1.0);
        assert!(dev < 1e-12);
        for &v in &m {
            assert!((v - 0.5).abs() < 1e-12);
        }
        let sel = sinkhorn_assign(&probs, tokens, n, 2, 1, 1.0);
        for s in sel {
            assert_eq!(s, vec![0, 1]); // tie-break by index
        }
    }

    #[test]
    fn sinkhorn_matrix_meeting_marginals_unchanged() {
        // 2 tokens x 2 experts, k = 1: row sums 1, column sums 1.
        let probs = vec![0.7, 0.3, 0.3, 0.7];
        let (m, _) = sinkhorn_balance(&probs, 2, 2, 1, 1, 1.0);
        for (a, b) in m.iter().zip(&probs) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sinkhorn_marginals_converge_on_random_input() {
        let mut rng = SeededRng::stream(29, streams::TEST, 29, 0);
        let (tokens, n, k) = (8, 4, 2);
        for _ in 0..20 {
            let logits: Vec<f64> = (0..tokens * n).map(|_| rng.normal()).collect();
            let mut probs = vec![0.0; tokens * n];
            for t in 0..tokens {
                row_softmax_masked(
                    &logits[t * n..(t + 1) * n],
                    None,
                    t,
                    &mut probs[t * n..(t + 1) * n],
                    None,
                )
                .unwrap();
            }
            let (m, dev) = sinkhorn_balance(&probs, tokens, n, k, 100, 1.0);
            assert!(dev < 1e-6, "deviation {dev}");
            let col_target = tokens as f64 * k as f64 / n as f64;
            for t in 0..tokens {
                let s: f64 = m[t * n..(t + 1) * n].iter().sum();
                assert!((s - k as f64).abs() < 1e-6);
            }
            for e in 0..n {
                let s: f64 = (0..tokens).map(|t| m[t * n + e]).sum();
                assert!((s - col_target).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn sequential_logprob_chains_renormalization() {
        let probs = [0.5, 0.3, 0.2];
        let lp = sequential_set_logprob(&probs, &[1, 0]);
        let expected = (0.3f64).ln() + (0.5f64 / 0.7).ln();
        assert!((lp - expected).abs() < 1e-15);
    }
}
