//! Batch objective with teacher anchoring.
//!
//! On-policy trajectories contribute the clipped surrogate. An injected
//! teacher trajectory contributes a shaped likelihood term instead,
//! `w(c) * sum_t f(p_t)` with `f(x) = x / (x + beta)` and `w(c) = 1 - c`
//! when confidence annealing is on. Everything is divided once by the total
//! token count of the batch.

use serde::{Deserialize, Serialize};

use crate::env::Trajectory;
use crate::error::{LabError, Result};
use crate::grpo::{trajectory_surrogate, Group};
use crate::policy::{Gradient, PolicyParams};

/// Teacher-term shaping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapingConfig {
    pub beta: f64,
    /// Scale the teacher term by `1 - c`.
    pub confidence_anneal: bool,
}

impl Default for ShapingConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            confidence_anneal: true,
        }
    }
}

impl ShapingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(LabError::Config(format!("shaping beta must be positive, got {}", self.beta)));
        }
        Ok(())
    }

    pub fn weight(&self, confidence: f64) -> f64 {
        if self.confidence_anneal {
            1.0 - confidence
        } else {
            1.0
        }
    }
}

pub fn shape(p: f64, beta: f64) -> f64 {
    p / (p + beta)
}

/// `f'(p) = beta / (p + beta)^2`.
pub fn shape_slope(p: f64, beta: f64) -> f64 {
    beta / ((p + beta) * (p + beta))
}

/// Loss applied to the tokens of a teacher trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TeacherTerm {
    #[default]
    Shaped,
    /// Plain token log-likelihood (SFT loss).
    LogLikelihood,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub eps_clip: f64,
    pub shaping: ShapingConfig,
    pub teacher_term: TeacherTerm,
    pub teacher_weight: f64,
    /// Include teacher tokens in the normalizing token count.
    pub count_teacher_tokens: bool,
}

impl ObjectiveConfig {
    pub fn hapo(shaping: ShapingConfig, eps_clip: f64) -> Self {
        Self {
            eps_clip,
            shaping,
            teacher_term: TeacherTerm::Shaped,
            teacher_weight: 1.0,
            count_teacher_tokens: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    pub n_groups: usize,
    pub n_injected: usize,
    pub total_tokens: usize,
    pub teacher_tokens: usize,
    pub teacher_token_share: f64,
    /// Mean |A| over on-policy trajectories.
    pub mean_abs_advantage: f64,
    /// Normalized surrogate part of the objective.
    pub surrogate_value: f64,
    /// Normalized teacher part of the objective.
    pub teacher_value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchObjective {
    pub value: f64,
    pub gradient: Gradient,
    pub stats: BatchStats,
}

/// Shaped teacher term for one demonstration at confidence `c`.
pub fn teacher_loss(
    params: &PolicyParams,
    teacher: &Trajectory,
    confidence: f64,
    shaping: &ShapingConfig,
) -> Result<(f64, Gradient)> {
    let mut grad = Gradient::default();
    let v = accumulate_teacher(params, teacher, confidence, shaping, TeacherTerm::Shaped, 1.0, &mut grad)?;
    Ok((v, grad))
}

fn accumulate_teacher(
    params: &PolicyParams,
    teacher: &Trajectory,
    confidence: f64,
    shaping: &ShapingConfig,
    term: TeacherTerm,
    weight: f64,
    grad: &mut Gradient,
) -> Result<f64> {
    if !teacher.is_teacher {
        return Err(LabError::Input("teacher loss applied to an on-policy trajectory".into()));
    }
    let mut total = 0.0;
    for t in 0..teacher.tokens.len() {
        let ctx = params.context(teacher.prompt, &teacher.tokens[..t]);
        let tok = teacher.tokens[t];
        let lp = params.logp(&ctx, tok);
        match term {
            TeacherTerm::Shaped => {
                let w = weight * shaping.weight(confidence);
                let p = lp.exp();
                total += w * shape(p, shaping.beta);
                // grad p = p * grad logp
                params.accumulate_grad_logp(grad, &ctx, tok, w * shape_slope(p, shaping.beta) * p);
            }
            TeacherTerm::LogLikelihood => {
                total += weight * lp;
                params.accumulate_grad_logp(grad, &ctx, tok, weight);
            }
        }
    }
    Ok(total)
}

/// Anchored objective with the default teacher branch: shaped term, unit weight.
pub fn hapo_batch_objective(
    params: &PolicyParams,
    groups: &[Group],
    shaping: &ShapingConfig,
    eps_clip: f64,
) -> Result<BatchObjective> {
    batch_objective(params, groups, &ObjectiveConfig::hapo(*shaping, eps_clip))
}

/// Dispatches every trajectory to the teacher or surrogate branch, sums in
/// group-id order and divides by the batch token count.
pub fn batch_objective(params: &PolicyParams, groups: &[Group], cfg: &ObjectiveConfig) -> Result<BatchObjective> {
    if groups.is_empty() {
        return Err(LabError::Input("empty batch".into()));
    }
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by_key(|&i| groups[i].id);

    let mut grad = Gradient::default();
    let mut stats = BatchStats {
        n_groups: groups.len(),
        ..BatchStats::default()
    };
    let mut surrogate = 0.0;
    let mut teacher = 0.0;
    let mut abs_adv = 0.0;
    let mut n_onpolicy = 0usize;

    for &i in &order {
        let g = &groups[i];
        let c = g
            .confidence
            .ok_or_else(|| LabError::State(format!("group {} has not been gated", g.id)))?;
        let adv = g
            .advantages
            .as_ref()
            .ok_or_else(|| LabError::State(format!("group {} has no advantages", g.id)))?;
        stats.n_injected += usize::from(g.injected);
        for (traj, &a) in g.trajectories.iter().zip(adv) {
            if traj.is_teacher {
                stats.teacher_tokens += traj.len();
                teacher += accumulate_teacher(
                    params,
                    traj,
                    c,
                    &cfg.shaping,
                    cfg.teacher_term,
                    cfg.teacher_weight,
                    &mut grad,
                )?;
            } else {
                stats.total_tokens += traj.len();
                abs_adv += a.abs();
                n_onpolicy += 1;
                surrogate += trajectory_surrogate(params, traj, &traj.behavior_logps, a, cfg.eps_clip, &mut grad)?;
            }
        }
    }
    let denom = if cfg.count_teacher_tokens {
        stats.total_tokens + stats.teacher_tokens
    } else {
        stats.total_tokens
    };
    stats.total_tokens += stats.teacher_tokens;
    if denom == 0 {
        return Err(LabError::Input("batch contains no tokens".into()));
    }
    let inv = 1.0 / denom as f64;
    grad.scale(inv);
    stats.teacher_token_share = stats.teacher_tokens as f64 / stats.total_tokens as f64;
    stats.mean_abs_advantage = if n_onpolicy > 0 { abs_adv / n_onpolicy as f64 } else { 0.0 };
    stats.surrogate_value = surrogate * inv;
    stats.teacher_value = teacher * inv;
    Ok(BatchObjective {
        value: (surrogate + teacher) * inv,
        gradient: grad,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::make_lock_task;
    use crate::gating::{gate_and_inject, GateConfig, GateRule};
    use crate::grpo::{compute_advantages, grpo_batch_objective, rollout_group};
    use crate::policy::ContextKey;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn teacher(tokens: Vec<u32>) -> Trajectory {
        Trajectory {
            prompt: 0,
            tokens,
            behavior_logps: vec![],
            reward: 1,
            is_teacher: true,
        }
    }

    #[test]
    fn shaping_algebra() {
        let b = 0.1;
        assert!((shape(b, b) - 0.5).abs() < 1e-15);
        assert!((shape_slope(b, b) - 1.0 / (4.0 * b)).abs() < 1e-12);
        assert!((shape_slope(1.0, b) - b / (1.0 + b).powi(2)).abs() < 1e-15);
        let s = ShapingConfig::default();
        assert!((s.weight(0.1) - 0.9).abs() < 1e-15);
        assert!((s.weight(0.7) - 0.3).abs() < 1e-15);
        let off = ShapingConfig {
            confidence_anneal: false,
            ..s
        };
        assert_eq!(off.weight(0.7), 1.0);
    }

    #[test]
    fn teacher_loss_at_uniform() {
        let p = PolicyParams::new(4, 3);
        let s = ShapingConfig::default();
        let (v, g) = teacher_loss(&p, &teacher(vec![1, 2]), 0.1, &s).unwrap();
        // each token: p = 1/4, f = 0.25 / 0.35
        assert!((v - 0.9 * 2.0 * (0.25 / 0.35)).abs() < 1e-12);
        let root = ContextKey {
            prompt: 0,
            position: 0,
            suffix: vec![],
        };
        let row = g.get(&root).unwrap();
        let k = 0.9 * (0.1 / 0.35f64.powi(2)) * 0.25;
        assert!((row[1] - k * 0.75).abs() < 1e-12);
        assert!((row[0] + k * 0.25).abs() < 1e-12);
    }

    #[test]
    fn teacher_loss_rejects_on_policy() {
        let p = PolicyParams::new(4, 3);
        let mut t = teacher(vec![1]);
        t.is_teacher = false;
        assert!(matches!(
            teacher_loss(&p, &t, 0.1, &ShapingConfig::default()),
            Err(LabError::Input(_))
        ));
    }

    #[test]
    fn shaped_gradient_points_toward_demo() {
        let mut p = PolicyParams::new(5, 3);
        let root = ContextKey {
            prompt: 0,
            position: 0,
            suffix: vec![],
        };
        p.set_row(root, vec![0.3, -1.0, 2.0, 0.1, 0.0]).unwrap();
        let t = teacher(vec![1, 4, 2]);
        let (_, shaped) = teacher_loss(&p, &t, 0.3, &ShapingConfig::default()).unwrap();
        let mut ll = Gradient::default();
        for s in 0..3 {
            let ctx = p.context(0, &t.tokens[..s]);
            ll.add_scaled(&p.grad_logp(&ctx, t.tokens[s]), 1.0);
        }
        assert!(shaped.dot(&ll) >= 0.0);
    }

    #[test]
    fn empty_and_ungated_batches() {
        let p = PolicyParams::new(4, 2);
        assert!(matches!(
            hapo_batch_objective(&p, &[], &ShapingConfig::default(), 0.2),
            Err(LabError::Input(_))
        ));
        let task = make_lock_task(4, 1, 2, 1, 0).unwrap();
        let mut g = rollout_group(&p, &task, 0, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        compute_advantages(&mut g);
        assert!(matches!(
            hapo_batch_objective(&p, &[g], &ShapingConfig::default(), 0.2),
            Err(LabError::State(_))
        ));
    }

    #[test]
    fn no_injection_matches_grpo_bitwise() {
        let task = make_lock_task(3, 3, 2, 2, 5).unwrap();
        let p = PolicyParams::for_task(&task, None);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let groups: Vec<Group> = (0..3)
            .map(|i| {
                let mut g = rollout_group(&p, &task, i as u32, 6, &mut rng).unwrap();
                g.id = i;
                g
            })
            .collect();
        let cfg = GateConfig::constant(0.8).with_rule(GateRule::Closed);
        let (mut groups, _) = gate_and_inject(groups, &task, &cfg, 0, &mut rng).unwrap();
        groups.iter_mut().for_each(compute_advantages);
        let h = hapo_batch_objective(&p, &groups, &ShapingConfig::default(), 0.2).unwrap();
        let (v, g) = grpo_batch_objective(&p, &groups, 0.2).unwrap();
        assert_eq!(h.value, v);
        assert_eq!(h.gradient, g);
        assert_eq!(h.stats.teacher_tokens, 0);
    }

    #[test]
    fn teacher_tokens_in_denominator_flag() {
        let task = make_lock_task(4, 1, 3, 1, 1).unwrap();
        let p = PolicyParams::for_task(&task, None);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = rollout_group(&p, &task, 0, 4, &mut rng).unwrap();
        let cfg = GateConfig::constant(0.8).with_rule(GateRule::AlwaysOpen);
        let (mut groups, _) = gate_and_inject(vec![g], &task, &cfg, 0, &mut rng).unwrap();
        compute_advantages(&mut groups[0]);
        let with = batch_objective(&p, &groups, &ObjectiveConfig::hapo(ShapingConfig::default(), 0.2)).unwrap();
        let mut c = ObjectiveConfig::hapo(ShapingConfig::default(), 0.2);
        c.count_teacher_tokens = false;
        let without = batch_objective(&p, &groups, &c).unwrap();
        assert!((with.value * 12.0 - without.value * 9.0).abs() < 1e-12);
        assert_eq!(with.stats.teacher_tokens, 3);
        assert!((with.stats.teacher_token_share - 0.25).abs() < 1e-15);
    }
}
