//! Decoder-only transformer whose feed-forward sublayers are sparse
//! mixture-of-experts layers.

pub mod checkpoint;
pub mod forward;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::params::{ParamId, ParamSet};
use crate::numeric::rng::{streams, SeededRng};
use crate::tasks::vocab;

pub use forward::{ForwardArtifacts, LayerArtifacts, RoutingSpec, Sampler};

/// Architecture hyperparameters.
///
/// Defaults are the desk-scale configuration: large enough for expert
/// specialization to emerge, small enough for CPU training in minutes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub num_experts: usize,
    pub experts_per_token: usize,
    pub expert_hidden_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 4,
            model_dim: 64,
            num_heads: 4,
            num_experts: 8,
            experts_per_token: 2,
            expert_hidden_dim: 128,
            vocab_size: 96,
            max_seq_len: 160,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::InvalidConfig(m));
        if self.num_layers == 0
            || self.model_dim == 0
            || self.num_heads == 0
            || self.num_experts == 0
            || self.expert_hidden_dim == 0
            || self.vocab_size == 0
            || self.max_seq_len == 0
        {
            return err("all model dimensions must be positive".into());
        }
        if self.experts_per_token < 1 || self.experts_per_token > self.num_experts {
            return err(format!(
                "experts_per_token {} must be in [1, {}]",
                self.experts_per_token, self.num_experts
            ));
        }
        if self.model_dim % self.num_heads != 0 {
            return err(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            ));
        }
        if self.vocab_size < vocab::MIN_VOCAB {
            return err(format!(
                "vocab_size {} below the task vocabulary minimum {}",
                self.vocab_size,
                vocab::MIN_VOCAB
            ));
        }
        Ok(())
    }
}

/// Parameter ids for one transformer layer.
#[derive(Debug, Clone)]
pub struct LayerIndex {
    pub attn_gain: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub moe_gain: ParamId,
    pub gate_w: ParamId,
    pub gate_b: ParamId,
    /// Per expert: (w1, b1, w2, b2).
    pub experts: Vec<[ParamId; 4]>,
}

#[derive(Debug, Clone)]
pub struct ParamIndex {
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub layers: Vec<LayerIndex>,
    pub final_gain: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

/// Model = config + named parameter set + typed parameter index.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub index: ParamIndex,
}

const INIT_STD: f64 = 0.02;

fn normal_vec(rng: &mut SeededRng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * rng.normal()).collect()
}

impl Model {
    /// Randomly initialized model; gates and experts are trained from
    /// scratch (no upcycling from a dense checkpoint).
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::stream(seed, streams::PARAM_INIT, 0, 0);
        let d = config.model_dim;
        let hid = config.expert_hidden_dim;
        let v = config.vocab_size;
        let n = config.num_experts;

        let mut params = ParamSet::new();
        let tok_emb = params.push("tok_emb", vec![v, d], normal_vec(&mut rng, v * d, INIT_STD));
        let pos_emb = params.push(
            "pos_emb",
            vec![config.max_seq_len, d],
            normal_vec(&mut rng, config.max_seq_len * d, INIT_STD),
        );
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let p = |name: &str| format!("layers.{l}.{name}");
            let attn_gain = params.push(p("attn_norm.gain"), vec![d], vec![1.0; d]);
            let wq = params.push(p("attn.wq"), vec![d, d], normal_vec(&mut rng, d * d, INIT_STD));
            let bq = params.push(p("attn.bq"), vec![d], vec![0.0; d]);
            let wk = params.push(p("attn.wk"), vec![d, d], normal_vec(&mut rng, d * d, INIT_STD));
            let bk = params.push(p("attn.bk"), vec![d], vec![0.0; d]);
            let wv = params.push(p("attn.wv"), vec![d, d], normal_vec(&mut rng, d * d, INIT_STD));
            let bv = params.push(p("attn.bv"), vec![d], vec![0.0; d]);
            let wo = params.push(p("attn.wo"), vec![d, d], normal_vec(&mut rng, d * d, INIT_STD));
            let bo = params.push(p("attn.bo"), vec![d], vec![0.0; d]);
            let moe_gain = params.push(p("moe_norm.gain"), vec![d], vec![1.0; d]);
            let gate_w = params.push(p("gate.weight"), vec![d, n], normal_vec(&mut rng, d * n, INIT_STD));
            let gate_b = params.push(p("gate.bias"), vec![n], vec![0.0; n]);
            let mut experts = Vec::with_capacity(n);
            for e in 0..n {
                let q = |name: &str| format!("layers.{l}.experts.{e}.{name}");
                let w1 = params.push(q("w1"), vec![d, hid], normal_vec(&mut rng, d * hid, INIT_STD));
                let b1 = params.push(q("b1"), vec![hid], vec![0.0; hid]);
                let w2 = params.push(q("w2"), vec![hid, d], normal_vec(&mut rng, hid * d, INIT_STD));
                let b2 = params.push(q("b2"), vec![d], vec![0.0; d]);
                experts.push([w1, b1, w2, b2]);
            }
            layers.push(LayerIndex {
                attn_gain,
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                moe_gain,
                gate_w,
                gate_b,
                experts,
            });
        }
        let final_gain = params.push("final_norm.gain", vec![d], vec![1.0; d]);
        let out_w = params.push("output.weight", vec![d, v], normal_vec(&mut rng, d * v, INIT_STD));
        let out_b = params.push("output.bias", vec![v], vec![0.0; v]);

        let index = ParamIndex { tok_emb, pos_emb, layers, final_gain, out_w, out_b };
        Ok(Model { config, params, index })
    }

    /// Same architecture over a different parameter set (ids must come
    /// from a model built with the same config).
    pub fn with_params(&self, params: ParamSet) -> Model {
        assert_eq!(params.len(), self.params.len());
        Model { config: self.config.clone(), params, index: self.index.clone() }
    }
}
