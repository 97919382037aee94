//! Deterministic evaluation: top-K inference over a dataset, accuracy
//! per task family, and routing-count collection for the diversity
//! diagnostics.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::forward::Sampler;
use crate::model::Model;
use crate::tasks::{accuracy_reward, MultimodalSample, TaskFamily};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub overall_accuracy: f64,
    pub per_family: BTreeMap<String, f64>,
    pub samples: usize,
}

/// Expert-selection counts accumulated over an evaluation pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoutingCounts {
    pub num_layers: usize,
    pub num_experts: usize,
    /// family name -> per-expert selection counts (summed over layers).
    pub per_family: BTreeMap<String, Vec<u64>>,
    /// per_layer[layer][expert]
    pub per_layer: Vec<Vec<u64>>,
    pub total_selections: u64,
}

impl RoutingCounts {
    pub fn new(num_layers: usize, num_experts: usize) -> Self {
        RoutingCounts {
            num_layers,
            num_experts,
            per_family: BTreeMap::new(),
            per_layer: vec![vec![0; num_experts]; num_layers],
            total_selections: 0,
        }
    }

    /// Global per-expert counts, summed over layers and families.
    pub fn global(&self) -> Vec<u64> {
        let mut g = vec![0u64; self.num_experts];
        for layer in &self.per_layer {
            for (e, &c) in layer.iter().enumerate() {
                g[e] += c;
            }
        }
        g
    }
}

/// One row of the per-token expert-index trace (bounded export of the
/// token-level routing diversity picture).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenTraceEntry {
    pub sample_index: usize,
    pub family: String,
    pub position: usize,
    pub layer: usize,
    pub experts: Vec<usize>,
}

pub struct EvalArtifacts {
    pub summary: EvalSummary,
    pub counts: RoutingCounts,
    pub token_trace: Vec<TokenTraceEntry>,
}

/// Samples whose full routing trace is exported.
const TRACE_SAMPLES: usize = 32;

/// Evaluate with deterministic top-K routing (no mask) and greedy
/// decoding restricted to the answer letters.
pub fn evaluate(model: &Model, samples: &[MultimodalSample]) -> Result<EvalArtifacts> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    struct PerSample {
        family: TaskFamily,
        reward: f64,
        selections: Vec<Vec<Vec<usize>>>, // [layer][pos] experts
    }
    let per_sample: Vec<PerSample> = samples
        .par_iter()
        .map(|sample| -> Result<PerSample> {
            let out = model.greedy_decode(
                &sample.prompt_tokens(),
                &sample.modality_tags,
                1,
                Sampler::DetTopk,
                None,
                Some(&sample.choices),
            )?;
            let reward = accuracy_reward(&out.generated, sample);
            let selections = out
                .decisions
                .iter()
                .map(|layer| layer.iter().map(|d| d.sorted_experts()).collect())
                .collect();
            Ok(PerSample { family: sample.family, reward, selections })
        })
        .collect::<Result<_>>()?;

    let mut counts = RoutingCounts::new(model.config.num_layers, model.config.num_experts);
    let mut token_trace = Vec::new();
    let mut per_family_hits: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    let mut total_hits = 0u64;
    for (i, ps) in per_sample.iter().enumerate() {
        let fam = ps.family.name().to_string();
        let entry = per_family_hits.entry(fam.clone()).or_insert((0, 0));
        entry.1 += 1;
        if ps.reward > 0.0 {
            entry.0 += 1;
            total_hits += 1;
        }
        let fam_counts = counts
            .per_family
            .entry(fam.clone())
            .or_insert_with(|| vec![0; model.config.num_experts]);
        for (l, layer) in ps.selections.iter().enumerate() {
            for (pos, experts) in layer.iter().enumerate() {
                for &e in experts {
                    fam_counts[e] += 1;
                    counts.per_layer[l][e] += 1;
                    counts.total_selections += 1;
                }
                if i < TRACE_SAMPLES {
                    token_trace.push(TokenTraceEntry {
                        sample_index: i,
                        family: fam.clone(),
                        position: pos,
                        layer: l,
                        experts: experts.clone(),
                    });
                }
            }
        }
    }

    let per_family = per_family_hits
        .into_iter()
        .map(|(k, (hits, n))| (k, hits as f64 / n as f64))
        .collect();
    let summary = EvalSummary {
        overall_accuracy: total_hits as f64 / samples.len() as f64,
        per_family,
        samples: samples.len(),
    };
    Ok(EvalArtifacts { summary, counts, token_trace })
}
