//! Comparison methods: SFT, plain GRPO, SFT followed by RL, and static
//! mixing (a teacher injected into every group unconditionally).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{TaskSpec, Trajectory};
use crate::error::{LabError, Result};
use crate::gating::{gate_and_inject, GateConfig, GateDecision, GateRule};
use crate::grpo::{compute_advantages_with, Group, StdKind};
use crate::hapo::{batch_objective, BatchObjective, ObjectiveConfig, ShapingConfig, TeacherTerm};
use crate::policy::{Gradient, PolicyParams};
use crate::trainer::{self, RunOptions, RunResult, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Method {
    /// Imitate the teacher demos only.
    Sft,
    /// On-policy clipped surrogate, no teacher.
    Grpo,
    /// SFT until `switch_step`, GRPO afterwards.
    SftThenRl { switch_step: u64 },
    /// Teacher injected into every group; its term weighted by `lambda`.
    /// `use_shaping` selects the shaped term over plain log-likelihood.
    StaticMix { use_shaping: bool, lambda: f64 },
    /// Confidence-gated injection.
    #[default]
    Hapo,
}

impl Method {
    pub fn validate(&self) -> Result<()> {
        if let Method::StaticMix { lambda, .. } = self {
            if !(*lambda >= 0.0 && lambda.is_finite()) {
                return Err(LabError::Config(format!("static_mix lambda must be non-negative, got {lambda}")));
            }
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        match self {
            Method::Sft => "sft".into(),
            Method::Grpo => "grpo".into(),
            Method::SftThenRl { switch_step } => format!("sft_then_rl@{switch_step}"),
            Method::StaticMix { use_shaping, lambda } => {
                format!("static_mix[{}, lambda={lambda}]", if *use_shaping { "shaped" } else { "sft" })
            }
            Method::Hapo => "hapo".into(),
        }
    }

    /// Whether this method runs the SFT objective at `step`.
    pub fn is_sft_at(&self, step: u64) -> bool {
        match self {
            Method::Sft => true,
            Method::SftThenRl { switch_step } => step < *switch_step,
            _ => false,
        }
    }
}

/// Mean per-token log-likelihood of the demos, with its gradient.
pub fn sft_objective(params: &PolicyParams, demos: &[Trajectory]) -> Result<(f64, Gradient)> {
    let tokens: usize = demos.iter().map(Trajectory::len).sum();
    if demos.is_empty() || tokens == 0 {
        return Err(LabError::Input("sft objective needs at least one non-empty demo".into()));
    }
    let mut grad = Gradient::default();
    let mut total = 0.0;
    for d in demos {
        for t in 0..d.tokens.len() {
            let ctx = params.context(d.prompt, &d.tokens[..t]);
            total += params.logp(&ctx, d.tokens[t]);
            params.accumulate_grad_logp(&mut grad, &ctx, d.tokens[t], 1.0);
        }
    }
    let inv = 1.0 / tokens as f64;
    grad.scale(inv);
    Ok((total * inv, grad))
}

/// Objective settings of the static mixture.
pub fn static_mix_objective(
    use_shaping: bool,
    lambda: f64,
    shaping: ShapingConfig,
    eps_clip: f64,
    count_teacher_tokens: bool,
) -> ObjectiveConfig {
    ObjectiveConfig {
        eps_clip,
        shaping,
        teacher_term: if use_shaping {
            TeacherTerm::Shaped
        } else {
            TeacherTerm::LogLikelihood
        },
        teacher_weight: lambda,
        count_teacher_tokens,
    }
}

/// Injects the teacher into every rolled-out group, computes advantages and
/// evaluates the mixed objective. Returns the transformed groups and gate
/// decisions as well.
#[allow(clippy::too_many_arguments)]
pub fn static_mix_step<R: Rng + ?Sized>(
    params: &PolicyParams,
    groups: Vec<Group>,
    task: &TaskSpec,
    objective: &ObjectiveConfig,
    gate: &GateConfig,
    std_kind: StdKind,
    step: u64,
    rng: &mut R,
) -> Result<(Vec<Group>, Vec<GateDecision>, BatchObjective)> {
    let forced = gate.with_rule(GateRule::AlwaysOpen);
    let (mut groups, decisions) = gate_and_inject(groups, task, &forced, step, rng)?;
    for g in &mut groups {
        compute_advantages_with(g, std_kind);
    }
    let obj = batch_objective(params, &groups, objective)?;
    Ok((groups, decisions, obj))
}

/// Runs `method` end to end in memory.
pub fn run_method(method: &Method, task: &TaskSpec, config: &TrainConfig) -> Result<RunResult> {
    trainer::run(method, task, config, &RunOptions::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{make_lock_task, teacher_demo};
    use crate::gating::GateRule;
    use crate::grpo::rollout_group;
    use crate::hapo::hapo_batch_objective;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sft_at_uniform() {
        let task = make_lock_task(4, 1, 3, 1, 0).unwrap();
        let p = PolicyParams::for_task(&task, None);
        let (v, _) = sft_objective(&p, &[teacher_demo(&task, 0).unwrap()]).unwrap();
        assert!((v - 0.25f64.ln()).abs() < 1e-12);
        assert!((v + 1.386).abs() < 1e-3);
        assert!(sft_objective(&p, &[]).is_err());
    }

    #[test]
    fn sft_converges_on_single_demo() {
        let task = make_lock_task(4, 1, 3, 1, 0).unwrap();
        let mut p = PolicyParams::for_task(&task, None);
        let demo = [teacher_demo(&task, 0).unwrap()];
        for _ in 0..500 {
            let (_, g) = sft_objective(&p, &demo).unwrap();
            p.apply(&g, 5.0);
        }
        let (v, _) = sft_objective(&p, &demo).unwrap();
        assert!(v > -0.01, "{v}");
    }

    #[test]
    fn static_mix_equals_always_open_hapo() {
        let task = make_lock_task(3, 2, 2, 2, 1).unwrap();
        let p = PolicyParams::for_task(&task, None);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let groups: Vec<Group> = (0..2)
            .map(|i| {
                let mut g = rollout_group(&p, &task, i, 5, &mut rng).unwrap();
                g.id = i as usize;
                g
            })
            .collect();
        let shaping = ShapingConfig::default();
        let obj = static_mix_objective(true, 1.0, shaping, 0.2, true);
        let gate = GateConfig::constant(0.8);
        let (mixed_groups, _, mixed) =
            static_mix_step(&p, groups.clone(), &task, &obj, &gate, StdKind::Population, 0, &mut rng).unwrap();
        assert!(mixed_groups.iter().all(|g| g.injected && g.teacher_count() == 1));

        let open = gate.with_rule(GateRule::AlwaysOpen);
        let (mut hg, _) = gate_and_inject(groups, &task, &open, 0, &mut rng).unwrap();
        hg.iter_mut().for_each(|g| compute_advantages_with(g, StdKind::Population));
        let h = hapo_batch_objective(&p, &hg, &shaping, 0.2).unwrap();
        assert_eq!(h.value, mixed.value);
        assert_eq!(h.gradient, mixed.gradient);
    }

    #[test]
    fn zero_lambda_drops_teacher_term() {
        let task = make_lock_task(3, 1, 2, 1, 1).unwrap();
        let p = PolicyParams::for_task(&task, None);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = rollout_group(&p, &task, 0, 4, &mut rng).unwrap();
        let obj = static_mix_objective(false, 0.0, ShapingConfig::default(), 0.2, true);
        let (groups, _, mixed) = static_mix_step(
            &p,
            vec![g],
            &task,
            &obj,
            &GateConfig::default(),
            StdKind::Population,
            0,
            &mut rng,
        )
        .unwrap();
        assert_eq!(mixed.stats.teacher_value, 0.0);
        // teacher reward still enters the advantage baseline
        assert_eq!(groups[0].success_count, 1 + groups[0].without_injection().success_count
            - usize::from(groups[0].displaced.as_ref().unwrap().trajectory.reward));
    }

    #[test]
    fn method_labels_and_switch() {
        let m = Method::SftThenRl { switch_step: 10 };
        assert!(m.is_sft_at(9));
        assert!(!m.is_sft_at(10));
        assert!(Method::Sft.is_sft_at(1_000_000));
        assert!(!Method::Hapo.is_sft_at(0));
        assert!(Method::StaticMix {
            use_shaping: true,
            lambda: -1.0
        }
        .validate()
        .is_err());
    }
}
