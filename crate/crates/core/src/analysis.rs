//! Routing diagnostics: expert-utilization distributions, routing
//! entropy, task-wise Jensen-Shannon divergence, reward-curve
//! extraction, and the machine-readable report with static SVG plots.
//!
//! Entropy and JSD use the natural log throughout.

pub mod svg;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{RoutingCounts, TokenTraceEntry};

/// Probability vector over experts for some scope (global, one layer,
/// or one task family).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilizationDistribution {
    pub scope: String,
    pub probs: Vec<f64>,
    pub token_count: u64,
}

/// Normalize raw per-expert selection counts.
pub fn utilization_distribution(counts: &[u64], scope: &str) -> Result<UtilizationDistribution> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::EmptyScope);
    }
    Ok(UtilizationDistribution {
        scope: scope.to_string(),
        probs: counts.iter().map(|&c| c as f64 / total as f64).collect(),
        token_count: total,
    })
}

/// Shannon entropy in nats, with 0 * ln 0 := 0.
pub fn routing_entropy(dist: &UtilizationDistribution) -> f64 {
    entropy_nats(&dist.probs)
}

pub fn entropy_nats(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

fn kl_nats(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum()
}

/// JSD(p, q) = KL(p||m)/2 + KL(q||m)/2 with m the midpoint, in nats.
pub fn jsd_nats(p: &[f64], q: &[f64]) -> f64 {
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    0.5 * kl_nats(p, &m) + 0.5 * kl_nats(q, &m)
}

/// Mean pairwise JSD over all unordered pairs of distributions.
pub fn task_jsd(dists: &[UtilizationDistribution]) -> f64 {
    assert!(dists.len() >= 2, "task_jsd needs at least two distributions");
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..dists.len() {
        for j in (i + 1)..dists.len() {
            total += jsd_nats(&dists[i].probs, &dists[j].probs);
            pairs += 1;
        }
    }
    total / pairs as f64
}

/// One row of the per-step training curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub step: usize,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub token_loss: f64,
    pub gate_loss: f64,
    pub lb_loss: f64,
}

/// Everything the report generator consumes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalysisInputs {
    pub curve: Vec<CurveRow>,
    pub counts: RoutingCounts,
    #[serde(default)]
    pub token_trace: Vec<TokenTraceEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScopeEntropy {
    pub scope: String,
    pub entropy_nats: f64,
    pub token_count: u64,
}

/// The versioned machine-readable report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub version: u32,
    pub steps: usize,
    pub final_reward_mean: Option<f64>,
    pub final_reward_std: Option<f64>,
    /// Entropy of the global expert-utilization distribution (nats).
    pub routing_entropy: Option<f64>,
    /// Mean pairwise JSD across task families (nats).
    pub task_jsd: Option<f64>,
    pub entropies: Vec<ScopeEntropy>,
    pub utilization: BTreeMap<String, UtilizationDistribution>,
}

pub const REPORT_VERSION: u32 = 1;

/// Assemble the report structure from raw inputs.
pub fn build_report(inputs: &AnalysisInputs) -> Result<AnalysisReport> {
    let mut utilization = BTreeMap::new();
    let mut entropies = Vec::new();
    let mut global_entropy = None;
    let mut jsd = None;

    if inputs.counts.total_selections > 0 {
        let global = utilization_distribution(&inputs.counts.global(), "global")?;
        global_entropy = Some(routing_entropy(&global));
        entropies.push(ScopeEntropy {
            scope: "global".into(),
            entropy_nats: routing_entropy(&global),
            token_count: global.token_count,
        });
        utilization.insert("global".to_string(), global);

        for (l, layer) in inputs.counts.per_layer.iter().enumerate() {
            if layer.iter().sum::<u64>() == 0 {
                continue;
            }
            let scope = format!("layer/{l}");
            let dist = utilization_distribution(layer, &scope)?;
            entropies.push(ScopeEntropy {
                scope: scope.clone(),
                entropy_nats: routing_entropy(&dist),
                token_count: dist.token_count,
            });
            utilization.insert(scope, dist);
        }

        let mut family_dists = Vec::new();
        for (fam, counts) in &inputs.counts.per_family {
            if counts.iter().sum::<u64>() == 0 {
                continue;
            }
            let scope = format!("family/{fam}");
            let dist = utilization_distribution(counts, &scope)?;
            entropies.push(ScopeEntropy {
                scope: scope.clone(),
                entropy_nats: routing_entropy(&dist),
                token_count: dist.token_count,
            });
            family_dists.push(dist.clone());
            utilization.insert(scope, dist);
        }
        if family_dists.len() >= 2 {
            jsd = Some(task_jsd(&family_dists));
        }
    }

    let last = inputs.curve.last();
    Ok(AnalysisReport {
        version: REPORT_VERSION,
        steps: inputs.curve.len(),
        final_reward_mean: last.map(|r| r.reward_mean),
        final_reward_std: last.map(|r| r.reward_std),
        routing_entropy: global_entropy,
        task_jsd: jsd,
        entropies,
        utilization,
    })
}

/// Write report.json, curves.csv, utilization.csv, the token trace and
/// the static SVG plots. Deterministic given identical inputs; empty
/// inputs still produce a valid report with zero steps and no plots.
pub fn emit_report(inputs: &AnalysisInputs, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let report = build_report(inputs)?;
    let mut written = Vec::new();

    let report_path = dir.join("report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
    written.push(report_path);

    let curves_path = dir.join("curves.csv");
    let mut csv = String::from("step,reward_mean,reward_std,token_loss,gate_loss,lb_loss\n");
    for r in &inputs.curve {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step, r.reward_mean, r.reward_std, r.token_loss, r.gate_loss, r.lb_loss
        ));
    }
    std::fs::write(&curves_path, csv)?;
    written.push(curves_path);

    let util_path = dir.join("utilization.csv");
    let mut csv = String::from("scope,expert,probability,selections\n");
    for (scope, dist) in &report.utilization {
        for (e, &p) in dist.probs.iter().enumerate() {
            csv.push_str(&format!("{scope},{e},{p},{}\n", dist.token_count));
        }
    }
    std::fs::write(&util_path, csv)?;
    written.push(util_path);

    if !inputs.token_trace.is_empty() {
        let trace_path = dir.join("token_trace.csv");
        let mut csv = String::from("sample,family,position,layer,experts\n");
        for t in &inputs.token_trace {
            let experts: Vec<String> = t.experts.iter().map(|e| e.to_string()).collect();
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                t.sample_index,
                t.family,
                t.position,
                t.layer,
                experts.join("|")
            ));
        }
        std::fs::write(&trace_path, csv)?;
        written.push(trace_path);
    }

    if !inputs.curve.is_empty() {
        let steps: Vec<f64> = inputs.curve.iter().map(|r| r.step as f64).collect();
        let means: Vec<f64> = inputs.curve.iter().map(|r| r.reward_mean).collect();
        let stds: Vec<f64> = inputs.curve.iter().map(|r| r.reward_std).collect();
        let plot = svg::line_chart(
            "reward mean / std per step",
            &steps,
            &[("reward_mean", &means), ("reward_std", &stds)],
        );
        let path = dir.join("reward_curves.svg");
        std::fs::write(&path, plot)?;
        written.push(path);
    }

    if inputs.counts.total_selections > 0 {
        let families: Vec<&String> = report
            .utilization
            .keys()
            .filter(|k| k.starts_with("family/"))
            .collect();
        if !families.is_empty() {
            let labels: Vec<String> =
                families.iter().map(|k| k.trim_start_matches("family/").to_string()).collect();
            let rows: Vec<Vec<f64>> =
                families.iter().map(|k| report.utilization[*k].probs.clone()).collect();
            let path = dir.join("utilization_heatmap.svg");
            std::fs::write(&path, svg::heatmap("expert utilization per task family", &labels, &rows))?;
            written.push(path);
        }
        let labels: Vec<String> = report.entropies.iter().map(|e| e.scope.clone()).collect();
        let values: Vec<f64> = report.entropies.iter().map(|e| e.entropy_nats).collect();
        let path = dir.join("entropy_bars.svg");
        std::fs::write(&path, svg::bar_chart("routing entropy (nats)", &labels, &values))?;
        written.push(path);
    }

    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn utilization_direct_counting() {
        // All tokens select experts {0, 1} out of 8.
        let counts = [10u64, 10, 0, 0, 0, 0, 0, 0];
        let d = utilization_distribution(&counts, "global").unwrap();
        assert_eq!(d.probs[0], 0.5);
        assert_eq!(d.probs[1], 0.5);
        assert_eq!(d.probs[2..], [0.0; 6]);
    }

    #[test]
    fn empty_scope_errors() {
        assert!(matches!(
            utilization_distribution(&[0, 0, 0], "x"),
            Err(Error::EmptyScope)
        ));
    }

    #[test]
    fn entropy_reference_values() {
        let uniform = UtilizationDistribution {
            scope: "g".into(),
            probs: vec![0.125; 8],
            token_count: 8,
        };
        assert!((routing_entropy(&uniform) - (8.0f64).ln()).abs() < 1e-12);
        assert!((routing_entropy(&uniform) - 2.0794).abs() < 1e-4);

        let onehot = UtilizationDistribution {
            scope: "g".into(),
            probs: vec![1.0, 0.0, 0.0],
            token_count: 3,
        };
        assert_eq!(routing_entropy(&onehot), 0.0);

        let half = UtilizationDistribution {
            scope: "g".into(),
            probs: vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            token_count: 2,
        };
        assert!((routing_entropy(&half) - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn jsd_reference_values() {
        assert_eq!(jsd_nats(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
        // Disjoint supports: ln 2.
        let j = jsd_nats(&[1.0, 0.0], &[0.0, 1.0]);
        assert!((j - (2.0f64).ln()).abs() < 1e-12);
        // Direct evaluation of the KL sums for [0.75, 0.25] vs [0.25, 0.75].
        let j = jsd_nats(&[0.75, 0.25], &[0.25, 0.75]);
        assert!((j - 0.1308).abs() < 1e-4, "{j}");
    }

    #[test]
    fn jsd_symmetric_and_permutation_invariant() {
        let mk = |p: Vec<f64>| UtilizationDistribution {
            scope: "s".into(),
            probs: p,
            token_count: 1,
        };
        let a = mk(vec![0.6, 0.3, 0.1]);
        let b = mk(vec![0.2, 0.5, 0.3]);
        let c = mk(vec![0.1, 0.1, 0.8]);
        let fwd = task_jsd(&[a.clone(), b.clone(), c.clone()]);
        let rev = task_jsd(&[c, a, b]);
        assert!((fwd - rev).abs() < 1e-15);
    }

    #[test]
    fn report_is_deterministic() {
        let mut counts = RoutingCounts::new(2, 4);
        counts.per_layer[0] = vec![5, 3, 2, 0];
        counts.per_layer[1] = vec![1, 1, 4, 4];
        counts.total_selections = 20;
        counts.per_family.insert("a".into(), vec![4, 2, 2, 2]);
        counts.per_family.insert("b".into(), vec![2, 2, 4, 2]);
        let inputs = AnalysisInputs {
            curve: vec![CurveRow {
                step: 0,
                reward_mean: 0.25,
                reward_std: 0.4,
                token_loss: 0.0,
                gate_loss: 0.0,
                lb_loss: 1.0,
            }],
            counts,
            token_trace: vec![],
        };
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        emit_report(&inputs, dir1.path()).unwrap();
        emit_report(&inputs, dir2.path()).unwrap();
        let a = std::fs::read(dir1.path().join("report.json")).unwrap();
        let b = std::fs::read(dir2.path().join("report.json")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_inputs_produce_zero_step_report() {
        let inputs = AnalysisInputs {
            curve: vec![],
            counts: RoutingCounts::new(1, 4),
            token_trace: vec![],
        };
        let dir = tempfile::tempdir().unwrap();
        let written = emit_report(&inputs, dir.path()).unwrap();
        let report: AnalysisReport = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("report.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(report.steps, 0);
        assert!(report.routing_entropy.is_none());
        // no plots for empty inputs
        assert!(written.iter().all(|p| p.extension().map_or(true, |e| e != "svg")));
    }

    #[test]
    fn report_entropy_matches_recomputation_from_utilization() {
        let mut counts = RoutingCounts::new(1, 4);
        counts.per_layer[0] = vec![7, 1, 1, 1];
        counts.total_selections = 10;
        counts.per_family.insert("a".into(), vec![7, 1, 1, 1]);
        let inputs = AnalysisInputs { curve: vec![], counts, token_trace: vec![] };
        let report = build_report(&inputs).unwrap();
        let global = &report.utilization["global"];
        let recomputed = entropy_nats(&global.probs);
        assert!((report.routing_entropy.unwrap() - recomputed).abs() < 1e-9);
    }
}
