//! Desk-scale laboratory for reinforcement-learning-based optimization of
//! expert routing in Mixture-of-Experts transformers.
//!
//! The crate implements MoE-GRPO end to end on synthetic verifiable
//! multi-modal tasks: a small f64 autodiff engine, a decoder-only MoE
//! transformer, stochastic and deterministic routing policies,
//! modality-aware router guidance, a GRPO trainer with Token-GRPO and
//! Gate-GRPO objectives, and routing-diversity diagnostics.

pub mod analysis;
pub mod error;
pub mod eval;
pub mod modality;
pub mod model;
pub mod numeric;
pub mod rollout;
pub mod routing;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};
pub use modality::{build_mask, calibrate_counts, compute_scores, ExpertMask, ModalityProfile};
pub use model::{Model, ModelConfig};
pub use numeric::{SeededRng, Tape, Tensor, Var};
pub use rollout::{RolloutGroup, RolloutTrajectory};
pub use routing::{RouterMode, RoutingDecision, SetProbMode};
pub use tasks::{Modality, MultimodalSample, TaskFamily};
pub use trainer::{LossBreakdown, TrainConfig, Trainer};
