//! Group rollouts, group-relative advantages and the clipped surrogate.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{PromptId, TaskSpec, Trajectory};
use crate::error::{LabError, Result};
use crate::policy::{sample_trajectory, Gradient, PolicyParams};

/// Reward spread below which a group counts as degenerate.
pub const STD_FLOOR: f64 = 1e-8;

/// Which standard deviation normalizes rewards inside a group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StdKind {
    /// Divide by N.
    #[default]
    Population,
    /// Divide by N - 1.
    Sample,
}

/// An on-policy trajectory that was overwritten by teacher injection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Displaced {
    pub index: usize,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub id: usize,
    pub prompt: PromptId,
    pub trajectories: Vec<Trajectory>,
    /// Filled by [`compute_advantages`].
    pub advantages: Option<Vec<f64>>,
    pub success_count: usize,
    /// Filled by the gate.
    pub confidence: Option<f64>,
    pub injected: bool,
    /// Kept so the pure on-policy batch can be rebuilt for consistency probes.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub displaced: Option<Displaced>,
}

impl Group {
    pub fn new(id: usize, prompt: PromptId, trajectories: Vec<Trajectory>) -> Self {
        let mut g = Group {
            id,
            prompt,
            trajectories,
            advantages: None,
            success_count: 0,
            confidence: None,
            injected: false,
            displaced: None,
        };
        g.recount();
        g
    }

    pub fn size(&self) -> usize {
        self.trajectories.len()
    }

    pub fn recount(&mut self) {
        self.success_count = self.trajectories.iter().map(|t| usize::from(t.reward)).sum();
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.trajectories.iter().map(Trajectory::reward_f64).collect()
    }

    pub fn teacher_count(&self) -> usize {
        self.trajectories.iter().filter(|t| t.is_teacher).count()
    }

    pub fn token_count(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    /// The group as it was before injection, with gate and advantage state cleared.
    pub fn without_injection(&self) -> Group {
        let mut trajectories = self.trajectories.clone();
        if let Some(d) = &self.displaced {
            trajectories[d.index] = d.trajectory.clone();
        }
        Group::new(self.id, self.prompt, trajectories)
    }
}

/// Samples `n` independent rollouts for `prompt` from `params`.
pub fn rollout_group<R: Rng + ?Sized>(
    params: &PolicyParams,
    task: &TaskSpec,
    prompt: PromptId,
    n: usize,
    rng: &mut R,
) -> Result<Group> {
    if n < 2 {
        return Err(LabError::Input(format!("group size must be at least 2, got {n}")));
    }
    let trajectories = (0..n)
        .map(|_| sample_trajectory(params, task, prompt, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(Group::new(0, prompt, trajectories))
}

/// `(R_j - mean) / std`, or all zeros when the spread is below [`STD_FLOOR`].
pub fn normalized_advantages(rewards: &[f64], kind: StdKind) -> Vec<f64> {
    let n = rewards.len();
    if n == 0 {
        return Vec::new();
    }
    let mean = rewards.iter().sum::<f64>() / n as f64;
    let ss: f64 = rewards.iter().map(|r| (r - mean).powi(2)).sum();
    let denom = match kind {
        StdKind::Population => n as f64,
        StdKind::Sample if n > 1 => (n - 1) as f64,
        StdKind::Sample => 1.0,
    };
    let std = (ss / denom).sqrt();
    if std < STD_FLOOR {
        return vec![0.0; n];
    }
    rewards.iter().map(|r| (r - mean) / std).collect()
}

pub fn compute_advantages(group: &mut Group) {
    compute_advantages_with(group, StdKind::Population);
}

pub fn compute_advantages_with(group: &mut Group, kind: StdKind) {
    group.advantages = Some(normalized_advantages(&group.rewards(), kind));
}

/// Clipped surrogate of one trajectory, summed over tokens. The gradient is
/// accumulated into `grad`.
pub fn trajectory_surrogate(
    params: &PolicyParams,
    traj: &Trajectory,
    old_logps: &[f64],
    advantage: f64,
    eps_clip: f64,
    grad: &mut Gradient,
) -> Result<f64> {
    if traj.tokens.len() != old_logps.len() {
        return Err(LabError::Input(format!(
            "trajectory has {} tokens but {} old log-probabilities",
            traj.tokens.len(),
            old_logps.len()
        )));
    }
    let mut total = 0.0;
    for t in 0..traj.tokens.len() {
        let ctx = params.context(traj.prompt, &traj.tokens[..t]);
        let tok = traj.tokens[t];
        let ratio = (params.logp(&ctx, tok) - old_logps[t]).exp();
        let unclipped = ratio * advantage;
        let clipped = ratio.clamp(1.0 - eps_clip, 1.0 + eps_clip) * advantage;
        if unclipped <= clipped {
            total += unclipped;
            // d(r A) = A r dlogp
            params.accumulate_grad_logp(grad, &ctx, tok, advantage * ratio);
        } else {
            total += clipped;
        }
    }
    Ok(total)
}

/// Token-summed clipped surrogate over the on-policy members of `group`,
/// using their recorded behavior log-probabilities as the old policy.
pub fn clip_surrogate(params: &PolicyParams, group: &Group, eps_clip: f64) -> Result<(f64, Gradient)> {
    let adv = group
        .advantages
        .as_ref()
        .ok_or_else(|| LabError::State(format!("group {} has no advantages", group.id)))?;
    let mut grad = Gradient::default();
    let mut total = 0.0;
    for (traj, &a) in group.trajectories.iter().zip(adv) {
        if traj.is_teacher {
            continue;
        }
        total += trajectory_surrogate(params, traj, &traj.behavior_logps, a, eps_clip, &mut grad)?;
    }
    Ok((total, grad))
}

/// Plain GRPO objective over a batch, divided by the batch's on-policy token count.
pub fn grpo_batch_objective(params: &PolicyParams, groups: &[Group], eps_clip: f64) -> Result<(f64, Gradient)> {
    let mut grad = Gradient::default();
    let mut total = 0.0;
    let mut tokens = 0usize;
    for g in groups {
        let (v, gg) = clip_surrogate(params, g, eps_clip)?;
        total += v;
        grad.add_scaled(&gg, 1.0);
        tokens += g.trajectories.iter().filter(|t| !t.is_teacher).map(Trajectory::len).sum::<usize>();
    }
    if tokens == 0 {
        return Err(LabError::Input("empty batch".into()));
    }
    let inv = 1.0 / tokens as f64;
    grad.scale(inv);
    Ok((total * inv, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::make_lock_task;
    use crate::policy::ContextKey;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn traj(prompt: PromptId, tokens: Vec<u32>, logps: Vec<f64>, reward: u8) -> Trajectory {
        Trajectory {
            prompt,
            tokens,
            behavior_logps: logps,
            reward,
            is_teacher: false,
        }
    }

    #[test]
    fn advantages_one_success_in_four() {
        // mean 0.25, population std sqrt(0.1875)
        let a = normalized_advantages(&[1.0, 0.0, 0.0, 0.0], StdKind::Population);
        let std = 0.1875f64.sqrt();
        assert!((a[0] - 0.75 / std).abs() < 1e-12);
        assert!((a[0] - 1.7321).abs() < 1e-4);
        for x in &a[1..] {
            assert!((x + 0.25 / std).abs() < 1e-12);
            assert!((x + 0.5774).abs() < 1e-4);
        }
    }

    #[test]
    fn degenerate_groups_have_zero_advantages() {
        assert_eq!(normalized_advantages(&[0.0; 5], StdKind::Population), vec![0.0; 5]);
        assert_eq!(normalized_advantages(&[1.0; 5], StdKind::Sample), vec![0.0; 5]);
    }

    #[test]
    fn sample_std_variant() {
        let a = normalized_advantages(&[1.0, 0.0], StdKind::Sample);
        let s = 0.5f64.sqrt();
        assert!((a[0] - 0.5 / s).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn normalized_moments(bits in prop::collection::vec(0u8..=1, 2..40)) {
            let r: Vec<f64> = bits.iter().map(|&b| f64::from(b)).collect();
            let a = normalized_advantages(&r, StdKind::Population);
            let n = a.len() as f64;
            if bits.iter().all(|&b| b == bits[0]) {
                prop_assert!(a.iter().all(|&x| x == 0.0));
            } else {
                let mean = a.iter().sum::<f64>() / n;
                let var = a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
                prop_assert!(mean.abs() < 1e-9);
                prop_assert!((var.sqrt() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rollout_group_counts_successes() {
        let task = make_lock_task(2, 1, 1, 2, 0).unwrap();
        let p = PolicyParams::for_task(&task, None);
        let g = rollout_group(&p, &task, 0, 8, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(g.success_count, 8);
        assert!(!g.injected);
        assert!(g.advantages.is_none());
        assert!(rollout_group(&p, &task, 0, 1, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let a = rollout_group(&p, &task, 0, 4, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = rollout_group(&p, &task, 0, 4, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn surrogate_at_ratio_one() {
        let task = make_lock_task(4, 1, 3, 1, 2).unwrap();
        let p = PolicyParams::for_task(&task, None);
        let mut g = rollout_group(&p, &task, 0, 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        g.trajectories[0].reward = 1;
        g.recount();
        compute_advantages(&mut g);
        let (v, grad) = clip_surrogate(&p, &g, 0.2).unwrap();
        let adv = g.advantages.clone().unwrap();
        let expect: f64 = adv.iter().zip(&g.trajectories).map(|(a, t)| a * t.len() as f64).sum();
        assert!((v - expect).abs() < 1e-12);

        let mut oracle = Gradient::default();
        for (a, t) in adv.iter().zip(&g.trajectories) {
            for s in 0..t.len() {
                let ctx = p.context(0, &t.tokens[..s]);
                oracle.add_scaled(&p.grad_logp(&ctx, t.tokens[s]), *a);
            }
        }
        assert!(grad.max_abs_diff(&oracle) < 1e-14);
    }

    #[test]
    fn clip_binding_zeroes_gradient() {
        let p = PolicyParams::new(4, 1);
        // r = 4 / ... choose old logp so that r = 2 > 1.2 with A > 0
        let lp = 0.25f64.ln();
        let t = traj(0, vec![1], vec![lp - 2f64.ln()], 1);
        let mut g = Gradient::default();
        let v = trajectory_surrogate(&p, &t, &t.behavior_logps, 1.0, 0.2, &mut g).unwrap();
        assert!((v - 1.2).abs() < 1e-12);
        assert!(g.is_zero());
    }

    #[test]
    fn unclipped_branch_below_range() {
        // single token, A = 1, r = 0.5 => min(0.5, 0.8) = 0.5
        let p = PolicyParams::new(4, 1);
        let lp = 0.25f64.ln();
        let t = traj(0, vec![2], vec![lp + 2f64.ln()], 1);
        let mut g = Gradient::default();
        let v = trajectory_surrogate(&p, &t, &t.behavior_logps, 1.0, 0.2, &mut g).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
        let root = ContextKey {
            prompt: 0,
            position: 0,
            suffix: vec![],
        };
        let row = g.get(&root).unwrap();
        assert!((row[2] - 0.5 * 0.75).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_is_input_error() {
        let p = PolicyParams::new(4, 1);
        let t = traj(0, vec![1, 2], vec![-1.0], 0);
        let mut g = Gradient::default();
        assert!(matches!(
            trajectory_surrogate(&p, &t, &t.behavior_logps, 1.0, 0.2, &mut g),
            Err(LabError::Input(_))
        ));
    }

    proptest! {
        #[test]
        fn clipped_term_is_pessimistic(lr in -3.0f64..3.0, a in -3.0f64..3.0, eps in 0.01f64..0.5) {
            let p = PolicyParams::new(3, 1);
            let lp = (1.0f64 / 3.0).ln();
            let t = traj(0, vec![0], vec![lp - lr], 1);
            let mut g = Gradient::default();
            let v = trajectory_surrogate(&p, &t, &t.behavior_logps, a, eps, &mut g).unwrap();
            let r = lr.exp();
            prop_assert!(v <= r * a + 1e-12);
            if a >= 0.0 {
                prop_assert!(v.abs() <= (r * a).abs() + 1e-12);
            }
        }
    }

    #[test]
    fn clipping_can_grow_negative_terms() {
        // A = -1, r = 0.5, eps = 0.2: min(-0.5, -0.8) = -0.8
        let p = PolicyParams::new(4, 1);
        let lp = 0.25f64.ln();
        let t = traj(0, vec![2], vec![lp + 2f64.ln()], 0);
        let mut g = Gradient::default();
        let v = trajectory_surrogate(&p, &t, &t.behavior_logps, -1.0, 0.2, &mut g).unwrap();
        assert!((v + 0.8).abs() < 1e-12);
        assert!(g.is_zero());
    }
}
