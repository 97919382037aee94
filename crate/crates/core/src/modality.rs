//! Modality-awareness scores from top-K routing statistics and the
//! bottom-P% expert masks used during rollout sampling.
//!
//! Each expert's affinity for vision vs. text inputs is estimated by
//! counting how often deterministic top-K routing selects it for tokens
//! of each modality; normalized counts yield awareness scores, and the
//! lowest-scoring experts per modality are barred from rollout
//! exploration.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::forward::Sampler;
use crate::model::Model;
use crate::tasks::{Modality, MultimodalSample};

/// Per-expert counts and scores for one layer.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExpertStats {
    pub vision_count: u64,
    pub text_count: u64,
    /// Normalized usage: this expert's share of all vision selections
    /// at its layer (likewise for text).
    pub vision_usage: f64,
    pub text_usage: f64,
    /// Awareness scores; sum to 1 per expert when any usage exists,
    /// both 0.5 for never-selected experts.
    pub vision_awareness: f64,
    pub text_awareness: f64,
}

/// Per-layer, per-expert activation statistics for vision vs. text
/// tokens, plus the derived modality-awareness scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityProfile {
    pub num_layers: usize,
    pub num_experts: usize,
    /// Samples used for calibration.
    pub calibration_samples: usize,
    /// stats[layer][expert]
    pub stats: Vec<Vec<ExpertStats>>,
}

impl ModalityProfile {
    pub fn new(num_layers: usize, num_experts: usize) -> Self {
        ModalityProfile {
            num_layers,
            num_experts,
            calibration_samples: 0,
            stats: vec![vec![ExpertStats::default(); num_experts]; num_layers],
        }
    }

    pub fn record(&mut self, layer: usize, expert: usize, modality: Modality) {
        let s = &mut self.stats[layer][expert];
        match modality {
            Modality::Vision => s.vision_count += 1,
            Modality::Text => s.text_count += 1,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Count expert selections per modality over deterministic top-K
/// forward passes on (up to) `sample_size` dataset samples. Counts
/// cover every routed position: prompt tokens carry their own tags and
/// generated tokens count as text.
pub fn calibrate_counts(
    model: &Model,
    samples: &[MultimodalSample],
    sample_size: usize,
) -> Result<ModalityProfile> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    assert!(sample_size >= 1, "sample_size must be >= 1");
    let used = &samples[..sample_size.min(samples.len())];
    let per_sample: Vec<Vec<(usize, usize, Modality)>> = used
        .par_iter()
        .map(|sample| -> Result<Vec<(usize, usize, Modality)>> {
            let out = model.greedy_decode(
                &sample.prompt_tokens(),
                &sample.modality_tags,
                1,
                Sampler::DetTopk,
                None,
                Some(&sample.choices),
            )?;
            let mut hits = Vec::new();
            for (l, layer) in out.decisions.iter().enumerate() {
                for d in layer {
                    let tag = sample
                        .modality_tags
                        .get(d.position)
                        .copied()
                        .unwrap_or(Modality::Text);
                    for &e in &d.selected_experts {
                        hits.push((l, e, tag));
                    }
                }
            }
            Ok(hits)
        })
        .collect::<Result<_>>()?;

    let mut profile = ModalityProfile::new(model.config.num_layers, model.config.num_experts);
    for hits in per_sample {
        for (l, e, tag) in hits {
            profile.record(l, e, tag);
        }
    }
    profile.calibration_samples = used.len();
    Ok(profile)
}

/// Fill normalized usages and awareness scores from the raw counts.
///
/// Per layer: usage_m(e) = count_m(e) / sum_j count_m(j); awareness
/// scores divide each expert's usages by their sum. Experts never
/// selected by either modality get the neutral 0.5/0.5.
pub fn compute_scores(profile: &mut ModalityProfile) {
    for layer in profile.stats.iter_mut() {
        let vision_total: u64 = layer.iter().map(|s| s.vision_count).sum();
        let text_total: u64 = layer.iter().map(|s| s.text_count).sum();
        for s in layer.iter_mut() {
            s.vision_usage =
                if vision_total > 0 { s.vision_count as f64 / vision_total as f64 } else { 0.0 };
            s.text_usage =
                if text_total > 0 { s.text_count as f64 / text_total as f64 } else { 0.0 };
            let denom = s.vision_usage + s.text_usage;
            if denom > 0.0 {
                s.vision_awareness = s.vision_usage / denom;
                s.text_awareness = s.text_usage / denom;
            } else {
                s.vision_awareness = 0.5;
                s.text_awareness = 0.5;
            }
        }
    }
}

/// Per-layer, per-modality usability vectors (true = usable).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertMask {
    pub num_experts: usize,
    /// usable[layer] = (vision usability, text usability).
    pub usable: Vec<(Vec<bool>, Vec<bool>)>,
}

impl ExpertMask {
    /// Mask that leaves every expert usable.
    pub fn all_usable(num_layers: usize, num_experts: usize) -> Self {
        ExpertMask {
            num_experts,
            usable: vec![(vec![true; num_experts], vec![true; num_experts]); num_layers],
        }
    }

    pub fn usable_row(&self, layer: usize, modality: Modality) -> &[bool] {
        match modality {
            Modality::Vision => &self.usable[layer].0,
            Modality::Text => &self.usable[layer].1,
        }
    }

    /// Inverted view for softmax masking (true = masked out).
    pub fn masked_row(&self, layer: usize, modality: Modality) -> Vec<bool> {
        self.usable_row(layer, modality).iter().map(|&u| !u).collect()
    }
}

/// Deactivate the bottom P% of experts per layer and modality, ranked
/// ascending by awareness score; ties mask the lower index first.
pub fn build_mask(profile: &ModalityProfile, p_percent: f64, k: usize) -> Result<ExpertMask> {
    if !(0.0..100.0).contains(&p_percent) {
        return Err(Error::InvalidConfig(format!(
            "mask percentage must be in [0, 100), got {p_percent}"
        )));
    }
    let n = profile.num_experts;
    let to_mask = (n as f64 * p_percent / 100.0).floor() as usize;
    if n - to_mask < k {
        return Err(Error::MaskTooAggressive { unmasked: n - to_mask, k });
    }
    let mut usable = Vec::with_capacity(profile.num_layers);
    for layer in &profile.stats {
        let mask_lowest = |score: &dyn Fn(&ExpertStats) -> f64| -> Vec<bool> {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                score(&layer[a]).partial_cmp(&score(&layer[b])).unwrap().then(a.cmp(&b))
            });
            let mut usable = vec![true; n];
            for &e in order.iter().take(to_mask) {
                usable[e] = false;
            }
            usable
        };
        let vision = mask_lowest(&|s: &ExpertStats| s.vision_awareness);
        let text = mask_lowest(&|s: &ExpertStats| s.text_awareness);
        usable.push((vision, text));
    }
    Ok(ExpertMask { num_experts: n, usable })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile_from_counts(vision: &[u64], text: &[u64]) -> ModalityProfile {
        let mut p = ModalityProfile::new(1, vision.len());
        for (e, (&v, &t)) in vision.iter().zip(text).enumerate() {
            p.stats[0][e].vision_count = v;
            p.stats[0][e].text_count = t;
        }
        p
    }

    #[test]
    fn worked_example() {
        // N_v(e1) = 30 of 100, N_t(e1) = 10 of 100:
        // s_v = 0.3, s_t = 0.1, awareness 0.75 / 0.25.
        let mut p = profile_from_counts(&[30, 70], &[10, 90]);
        compute_scores(&mut p);
        let s = &p.stats[0][0];
        assert!((s.vision_usage - 0.3).abs() < 1e-12);
        assert!((s.text_usage - 0.1).abs() < 1e-12);
        assert!((s.vision_awareness - 0.75).abs() < 1e-12);
        assert!((s.text_awareness - 0.25).abs() < 1e-12);
    }

    #[test]
    fn symmetric_counts_give_half() {
        let mut p = profile_from_counts(&[25, 25, 25, 25], &[25, 25, 25, 25]);
        compute_scores(&mut p);
        for s in &p.stats[0] {
            assert!((s.vision_awareness - 0.5).abs() < 1e-12);
            assert!((s.text_awareness - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn never_selected_expert_is_neutral() {
        let mut p = profile_from_counts(&[10, 0], &[10, 0]);
        compute_scores(&mut p);
        let s = &p.stats[0][1];
        assert_eq!(s.vision_awareness, 0.5);
        assert_eq!(s.text_awareness, 0.5);
    }

    #[test]
    fn pure_text_counts_guarded() {
        let mut p = profile_from_counts(&[0, 0], &[6, 2]);
        compute_scores(&mut p);
        let s = &p.stats[0][0];
        assert_eq!(s.vision_usage, 0.0);
        assert_eq!(s.text_awareness, 1.0);
        assert_eq!(s.vision_awareness, 0.0);
    }

    #[test]
    fn usage_sums_to_one_when_modality_occurred() {
        let mut p = profile_from_counts(&[3, 9, 21, 0], &[1, 1, 1, 1]);
        compute_scores(&mut p);
        let sv: f64 = p.stats[0].iter().map(|s| s.vision_usage).sum();
        let st: f64 = p.stats[0].iter().map(|s| s.text_usage).sum();
        assert!((sv - 1.0).abs() < 1e-9);
        assert!((st - 1.0).abs() < 1e-9);
        // awareness of each expert sums to 1 where defined
        for s in &p.stats[0] {
            if s.vision_usage + s.text_usage > 0.0 {
                assert!((s.vision_awareness + s.text_awareness - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn mask_counts_for_quarter_percent() {
        // N = 8, P = 25 -> exactly 2 experts masked per modality.
        let mut p = ModalityProfile::new(2, 8);
        for l in 0..2 {
            for e in 0..8 {
                p.stats[l][e].vision_count = (e + 1) as u64;
                p.stats[l][e].text_count = (8 - e) as u64;
            }
        }
        compute_scores(&mut p);
        let mask = build_mask(&p, 25.0, 2).unwrap();
        for l in 0..2 {
            let masked_v = mask.usable[l].0.iter().filter(|&&u| !u).count();
            let masked_t = mask.usable[l].1.iter().filter(|&&u| !u).count();
            assert_eq!(masked_v, 2);
            assert_eq!(masked_t, 2);
        }
    }

    #[test]
    fn zero_percent_masks_nothing() {
        let mut p = profile_from_counts(&[1, 2, 3, 4], &[4, 3, 2, 1]);
        compute_scores(&mut p);
        let mask = build_mask(&p, 0.0, 2).unwrap();
        assert_eq!(mask, ExpertMask::all_usable(1, 4));
    }

    #[test]
    fn rank_and_floor_oracle() {
        // vision awareness [0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.1, 0.0]:
        // experts 7 and 6 are masked for vision at P = 25.
        let mut p = ModalityProfile::new(1, 8);
        let aw = [0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.1, 0.0];
        for e in 0..8 {
            // counts engineered so vision awareness = aw[e]
            p.stats[0][e].vision_count = (aw[e] * 1000.0) as u64;
            p.stats[0][e].text_count = ((1.0 - aw[e]) * 1000.0) as u64;
        }
        compute_scores(&mut p);
        let mask = build_mask(&p, 25.0, 2).unwrap();
        let masked: Vec<usize> =
            (0..8).filter(|&e| !mask.usable[0].0[e]).collect();
        assert_eq!(masked, vec![6, 7]);
    }

    #[test]
    fn too_aggressive_mask_rejected() {
        let mut p = profile_from_counts(&[1, 2, 3, 4], &[4, 3, 2, 1]);
        compute_scores(&mut p);
        match build_mask(&p, 75.0, 2) {
            Err(Error::MaskTooAggressive { unmasked: 1, k: 2 }) => {}
            other => panic!("expected mask too aggressive, got {other:?}"),
        }
    }

    #[test]
    fn awareness_orders_reverse_between_modalities() {
        let mut p = ModalityProfile::new(1, 6);
        for e in 0..6 {
            p.stats[0][e].vision_count = (e as u64 + 1) * 3;
            p.stats[0][e].text_count = (6 - e as u64) * 5;
        }
        compute_scores(&mut p);
        let mut by_v: Vec<usize> = (0..6).collect();
        by_v.sort_by(|&a, &b| {
            p.stats[0][a].vision_awareness.partial_cmp(&p.stats[0][b].vision_awareness).unwrap()
        });
        let mut by_t: Vec<usize> = (0..6).collect();
        by_t.sort_by(|&a, &b| {
            p.stats[0][a].text_awareness.partial_cmp(&p.stats[0][b].text_awareness).unwrap()
        });
        by_t.reverse();
        assert_eq!(by_v, by_t);
    }

    #[test]
    fn json_round_trip() {
        let mut p = profile_from_counts(&[5, 6, 7, 8], &[8, 7, 6, 5]);
        p.calibration_samples = 16;
        compute_scores(&mut p);
        let s = p.to_json().unwrap();
        let back = ModalityProfile::from_json(&s).unwrap();
        assert_eq!(p, back);
    }
}
