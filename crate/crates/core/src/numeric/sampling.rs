//! Multinomial sampling of distinct indices without replacement.

use crate::error::{Error, Result};
use crate::numeric::rng::SeededRng;

/// One draw: the selected index and the probability it carried at draw
/// time (renormalized over the indices still available).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Draw {
    pub index: usize,
    pub prob: f64,
}

/// Draw `k` distinct indices from `probs` without replacement.
///
/// Draw i is sampled from `probs` renormalized over the remaining
/// indices; each draw records its renormalized probability. The result
/// is deterministic given the rng state.
pub fn sample_multinomial_without_replacement(
    probs: &[f64],
    k: usize,
    rng: &mut SeededRng,
) -> Result<Vec<Draw>> {
    assert!(
        probs.iter().all(|&p| p >= 0.0),
        "probabilities must be nonnegative"
    );
    let total: f64 = probs.iter().sum();
    assert!(
        (total - 1.0).abs() <= 1e-9,
        "probabilities must sum to 1, got {total}"
    );
    let support = probs.iter().filter(|&&p| p > 0.0).count();
    if support < k {
        return Err(Error::InsufficientSupport { k, available: support });
    }

    let mut active: Vec<bool> = probs.iter().map(|&p| p > 0.0).collect();
    let mut draws = Vec::with_capacity(k);
    for _ in 0..k {
        // Recompute the remaining mass each draw; N is small and this
        // avoids drift from repeated subtraction.
        let mass: f64 = probs
            .iter()
            .zip(&active)
            .filter(|(_, &a)| a)
            .map(|(&p, _)| p)
            .sum();
        let u = rng.uniform() * mass;
        let mut acc = 0.0;
        let mut picked = None;
        for (i, &p) in probs.iter().enumerate() {
            if !active[i] {
                continue;
            }
            acc += p;
            if u < acc {
                picked = Some(i);
                break;
            }
        }
        // Floating-point edge: u landed at the very top of the range.
        let picked = picked.unwrap_or_else(|| {
            active
                .iter()
                .rposition(|&a| a)
                .expect("at least one active index remains")
        });
        draws.push(Draw { index: picked, prob: probs[picked] / mass });
        active[picked] = false;
    }
    Ok(draws)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::rng::streams;

    #[test]
    fn degenerate_distribution_is_forced() {
        let mut rng = SeededRng::stream(1, streams::TEST, 10, 0);
        let draws =
            sample_multinomial_without_replacement(&[1.0, 0.0, 0.0, 0.0], 1, &mut rng).unwrap();
        assert_eq!(draws.len(), 1);
        assert_eq!(draws[0].index, 0);
        assert_eq!(draws[0].prob, 1.0);
    }

    #[test]
    fn two_supported_indices_always_selected() {
        let mut rng = SeededRng::stream(2, streams::TEST, 11, 0);
        for _ in 0..200 {
            let draws =
                sample_multinomial_without_replacement(&[0.5, 0.5, 0.0, 0.0], 2, &mut rng)
                    .unwrap();
            let mut set: Vec<usize> = draws.iter().map(|d| d.index).collect();
            set.sort_unstable();
            assert_eq!(set, vec![0, 1]);
        }
    }

    #[test]
    fn insufficient_support_errors() {
        let mut rng = SeededRng::stream(3, streams::TEST, 12, 0);
        match sample_multinomial_without_replacement(&[1.0, 0.0, 0.0], 2, &mut rng) {
            Err(Error::InsufficientSupport { k: 2, available: 1 }) => {}
            other => panic!("expected insufficient support, got {other:?}"),
        }
    }

    #[test]
    fn set_probability_matches_exact_enumeration() {
        // probs = [0.7, 0.2, 0.1], k = 2:
        // P({0,1}) = 0.7 * (0.2 / 0.3) + 0.2 * (0.7 / 0.8) = 0.641666...
        let probs = [0.7, 0.2, 0.1];
        let exact: f64 = 0.7 * (0.2 / 0.3) + 0.2 * (0.7 / 0.8);
        assert!((exact - 0.64167).abs() < 5e-6);

        let n = 1_000_000usize;
        let mut hits = 0usize;
        for trial in 0..n {
            let mut rng = SeededRng::stream(99, streams::TEST, 13, trial as u64);
            let draws =
                sample_multinomial_without_replacement(&probs, 2, &mut rng).unwrap();
            let mut set: Vec<usize> = draws.iter().map(|d| d.index).collect();
            set.sort_unstable();
            if set == vec![0, 1] {
                hits += 1;
            }
        }
        let freq = hits as f64 / n as f64;
        assert!((freq - exact).abs() < 0.005, "freq {freq} vs exact {exact}");
    }

    #[test]
    fn marginal_inclusion_matches_enumeration_within_three_se() {
        // k = 2 of [0.5, 0.3, 0.2]: inclusion probability of index i is
        // p_i + sum_{j != i} p_j * p_i / (1 - p_j).
        let probs = [0.5, 0.3, 0.2];
        let mut exact = [0.0f64; 3];
        for i in 0..3 {
            let mut inc = probs[i];
            for j in 0..3 {
                if j != i {
                    inc += probs[j] * probs[i] / (1.0 - probs[j]);
                }
            }
            exact[i] = inc;
        }
        let n = 100_000usize;
        let mut counts = [0usize; 3];
        for trial in 0..n {
            let mut rng = SeededRng::stream(7, streams::TEST, 14, trial as u64);
            for d in sample_multinomial_without_replacement(&probs, 2, &mut rng).unwrap() {
                counts[d.index] += 1;
            }
        }
        for i in 0..3 {
            let freq = counts[i] as f64 / n as f64;
            let se = (exact[i] * (1.0 - exact[i]) / n as f64).sqrt();
            assert!(
                (freq - exact[i]).abs() <= 3.0 * se,
                "index {i}: freq {freq}, exact {}",
                exact[i]
            );
        }
    }

    #[test]
    fn deterministic_given_stream() {
        let run = || {
            let mut rng = SeededRng::stream(5, streams::TEST, 15, 0);
            (0..50)
                .map(|_| {
                    sample_multinomial_without_replacement(&[0.4, 0.3, 0.2, 0.1], 2, &mut rng)
                        .unwrap()
                })
                .collect::<Vec<_>>()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }
}
