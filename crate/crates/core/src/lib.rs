//! Desk-scale laboratory for confidence-gated teacher injection in
//! group-relative policy optimization.
//!
//! Tasks are synthetic token-generation problems with binary verifiable
//! rewards; the policy is a tabular softmax so every log-probability and
//! gradient is exact. See the README for the experiment suites.

pub mod baselines;
pub mod commands;
pub mod config;
pub mod env;
pub mod error;
pub mod gating;
pub mod gradcheck;
pub mod grpo;
pub mod hapo;
pub mod metrics;
pub mod policy;
pub mod suites;
pub mod trainer;

pub use baselines::{run_method, sft_objective, static_mix_step, Method};
pub use env::{make_chain_task, make_lock_task, teacher_demo, verify, PromptId, TaskSpec, TeacherMode, Token, Trajectory};
pub use error::{LabError, Result};
pub use gating::{
    confidence, gate_and_inject, ssi_transform, success_threshold, threshold_at, GateConfig, GateDecision, GateRule,
    ThresholdSchedule,
};
pub use grpo::{clip_surrogate, compute_advantages, rollout_group, Group};
pub use hapo::{hapo_batch_objective, teacher_loss, BatchStats, ShapingConfig};
pub use metrics::{check_hoeffding, consistency_probe, export_curves, BoundReport, RunMetrics, StepMetrics};
pub use policy::{sample_trajectory, ContextKey, Gradient, PolicyParams};
pub use trainer::{evaluate, train_step, EvalReport, LrSchedule, TrainConfig, TrainState};
