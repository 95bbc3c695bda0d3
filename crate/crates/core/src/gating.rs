//! Beta-Binomial confidence gate and teacher injection.
//!
//! Each group's success count `S` out of `N` gives a Beta posterior over the
//! prompt's success rate. The gate compares the posterior mean against a
//! threshold `gamma_t`; when the policy is not yet confident on the prompt
//! (`c < gamma_t`) the worst trajectory of the group is replaced by the
//! teacher demonstration.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::env::{teacher_demo, PromptId, TaskSpec, Trajectory};
use crate::error::{LabError, Result};
use crate::grpo::{Displaced, Group};

/// Threshold schedule over training steps. Every value lies in (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ThresholdSchedule {
    Constant { gamma: f64 },
    Step { gamma0: f64, gamma1: f64, switch_step: u64 },
    Sigmoid { gamma_min: f64, gamma_max: f64, midpoint: f64, slope: f64 },
}

impl Default for ThresholdSchedule {
    fn default() -> Self {
        ThresholdSchedule::Constant { gamma: 0.8 }
    }
}

/// How the gate turns a success count into an open/closed decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GateRule {
    /// Open iff the posterior mean is below the threshold.
    #[default]
    PosteriorMean,
    /// Open iff a draw from the posterior is below the threshold.
    PosteriorSample,
    /// Inject into every group.
    AlwaysOpen,
    /// Never inject.
    Closed,
}

/// Which trajectory the teacher replaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReplaceRule {
    /// Lowest-reward trajectory, lowest index on ties.
    #[default]
    FirstWorst,
    /// Lowest-reward trajectory, longest first on ties, then lowest index.
    LongestFailed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateConfig {
    pub schedule: ThresholdSchedule,
    pub rule: GateRule,
    pub prior_alpha: f64,
    pub prior_beta: f64,
    pub replace: ReplaceRule,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            schedule: ThresholdSchedule::default(),
            rule: GateRule::PosteriorMean,
            prior_alpha: 1.0,
            prior_beta: 1.0,
            replace: ReplaceRule::FirstWorst,
        }
    }
}

impl GateConfig {
    pub fn constant(gamma: f64) -> Self {
        Self {
            schedule: ThresholdSchedule::Constant { gamma },
            ..Self::default()
        }
    }

    pub fn with_rule(mut self, rule: GateRule) -> Self {
        self.rule = rule;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |g: f64| g > 0.0 && g < 1.0;
        let ok = match self.schedule {
            ThresholdSchedule::Constant { gamma } => in_unit(gamma),
            ThresholdSchedule::Step { gamma0, gamma1, .. } => in_unit(gamma0) && in_unit(gamma1),
            ThresholdSchedule::Sigmoid {
                gamma_min,
                gamma_max,
                slope,
                midpoint,
            } => in_unit(gamma_min) && in_unit(gamma_max) && slope > 0.0 && midpoint.is_finite(),
        };
        if !ok {
            return Err(LabError::Config(format!(
                "gate thresholds must lie strictly inside (0, 1) and sigmoid slope must be positive: {:?}",
                self.schedule
            )));
        }
        if !(self.prior_alpha > 0.0 && self.prior_beta > 0.0) {
            return Err(LabError::Config("Beta prior parameters must be positive".into()));
        }
        Ok(())
    }
}

/// Gate outcome for one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub group_id: usize,
    pub prompt: PromptId,
    pub success_count: usize,
    pub group_size: usize,
    pub confidence: f64,
    pub threshold: f64,
    pub opened: bool,
    pub replaced_index: Option<usize>,
}

/// Posterior mean of the success rate under a Beta(1, 1) prior: `(1 + S) / (2 + N)`.
pub fn confidence(successes: usize, n: usize) -> Result<f64> {
    posterior_mean(successes, n, 1.0, 1.0)
}

pub fn posterior_mean(successes: usize, n: usize, alpha: f64, beta: f64) -> Result<f64> {
    if successes > n {
        return Err(LabError::Input(format!("success count {successes} exceeds group size {n}")));
    }
    Ok((alpha + successes as f64) / (alpha + beta + n as f64))
}

pub fn threshold_at(schedule: &ThresholdSchedule, step: u64) -> f64 {
    match *schedule {
        ThresholdSchedule::Constant { gamma } => gamma,
        ThresholdSchedule::Step {
            gamma0,
            gamma1,
            switch_step,
        } => {
            if step < switch_step {
                gamma0
            } else {
                gamma1
            }
        }
        ThresholdSchedule::Sigmoid {
            gamma_min,
            gamma_max,
            midpoint,
            slope,
        } => {
            let z = (step as f64 - midpoint) / slope;
            gamma_min + (gamma_max - gamma_min) / (1.0 + (-z).exp())
        }
    }
}

/// Success-count threshold `k = gamma (2 + N) - 1`: under the uniform prior
/// the gate opens exactly when `S < k`.
///
/// Thresholds are usually written as short decimals, so products that land
/// within 1e-9 of an integer are snapped to it; otherwise `0.28 * 25 - 1`
/// would come out as `6.000000000000001`.
pub fn success_threshold(gamma: f64, n: usize) -> f64 {
    let k = gamma * (2 + n) as f64 - 1.0;
    let nearest = k.round();
    if (k - nearest).abs() <= 1e-9 * nearest.abs().max(1.0) {
        nearest
    } else {
        k
    }
}

fn replace_index(group: &Group, rule: ReplaceRule) -> usize {
    let mut best = 0;
    for (j, t) in group.trajectories.iter().enumerate().skip(1) {
        let b = &group.trajectories[best];
        let better = match t.reward.cmp(&b.reward) {
            std::cmp::Ordering::Less => true,
            std::cmp::Ordering::Greater => false,
            std::cmp::Ordering::Equal => rule == ReplaceRule::LongestFailed && t.len() > b.len(),
        };
        if better {
            best = j;
        }
    }
    best
}

/// Replaces the lowest-reward trajectory of `group` with `teacher` and
/// recounts successes. Group size is unchanged.
pub fn ssi_transform(group: Group, teacher: Trajectory) -> Result<Group> {
    ssi_transform_with(group, teacher, ReplaceRule::FirstWorst)
}

pub fn ssi_transform_with(mut group: Group, teacher: Trajectory, rule: ReplaceRule) -> Result<Group> {
    if !teacher.is_teacher {
        return Err(LabError::Input("injected trajectory is not marked as teacher".into()));
    }
    if teacher.prompt != group.prompt {
        return Err(LabError::Input(format!(
            "teacher for prompt {} cannot be injected into group for prompt {}",
            teacher.prompt, group.prompt
        )));
    }
    if group.injected || group.teacher_count() > 0 {
        return Err(LabError::State(format!("group {} already holds a teacher trajectory", group.id)));
    }
    if group.trajectories.is_empty() {
        return Err(LabError::Input("cannot inject into an empty group".into()));
    }
    let j = replace_index(&group, rule);
    let old = std::mem::replace(&mut group.trajectories[j], teacher);
    group.displaced = Some(Displaced {
        index: j,
        trajectory: old,
    });
    group.injected = true;
    group.recount();
    Ok(group)
}

/// Runs the gate over a batch: scores every group, injects the teacher where
/// the gate opens, and returns the transformed groups with one decision per
/// group. `rng` is only drawn from under [`GateRule::PosteriorSample`].
pub fn gate_and_inject<R: Rng + ?Sized>(
    groups: Vec<Group>,
    task: &TaskSpec,
    config: &GateConfig,
    step: u64,
    rng: &mut R,
) -> Result<(Vec<Group>, Vec<GateDecision>)> {
    let threshold = threshold_at(&config.schedule, step);
    let mut out = Vec::with_capacity(groups.len());
    let mut decisions = Vec::with_capacity(groups.len());
    for mut g in groups {
        let n = g.size();
        let s = g.success_count;
        let c = posterior_mean(s, n, config.prior_alpha, config.prior_beta)?;
        let opened = match config.rule {
            GateRule::PosteriorMean => c < threshold,
            GateRule::PosteriorSample => {
                let beta = Beta::new(config.prior_alpha + s as f64, config.prior_beta + (n - s) as f64)
                    .map_err(|e| LabError::Input(e.to_string()))?;
                beta.sample(rng) < threshold
            }
            GateRule::AlwaysOpen => true,
            GateRule::Closed => false,
        };
        g.confidence = Some(c);
        let mut decision = GateDecision {
            group_id: g.id,
            prompt: g.prompt,
            success_count: s,
            group_size: n,
            confidence: c,
            threshold,
            opened,
            replaced_index: None,
        };
        if opened {
            let teacher = teacher_demo(task, g.prompt)?;
            g = ssi_transform_with(g, teacher, config.replace)?;
            decision.replaced_index = g.displaced.as_ref().map(|d| d.index);
        }
        decisions.push(decision);
        out.push(g);
    }
    Ok((out, decisions))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::make_lock_task;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn group_with(prompt: PromptId, rewards: &[u8]) -> Group {
        let trajs = rewards
            .iter()
            .map(|&r| Trajectory {
                prompt,
                tokens: vec![0, 0],
                behavior_logps: vec![-1.0, -1.0],
                reward: r,
                is_teacher: false,
            })
            .collect();
        Group::new(0, prompt, trajs)
    }

    #[test]
    fn confidence_values() {
        assert!((confidence(0, 8).unwrap() - 0.1).abs() < 1e-15);
        assert!((confidence(8, 8).unwrap() - 0.9).abs() < 1e-15);
        assert!((confidence(6, 8).unwrap() - 0.7).abs() < 1e-15);
        assert!((confidence(7, 8).unwrap() - 0.8).abs() < 1e-15);
        assert!(matches!(confidence(9, 8), Err(LabError::Input(_))));
    }

    #[test]
    fn confidence_monotone_and_consistent() {
        for n in 1..=64 {
            let mut prev = 0.0;
            for s in 0..=n {
                let c = confidence(s, n).unwrap();
                assert!(c > prev && c < 1.0);
                assert!((c - s as f64 / n as f64).abs() <= 2.0 / (2 + n) as f64 + 1e-15);
                prev = c;
            }
        }
    }

    #[test]
    fn schedules() {
        let c = ThresholdSchedule::Constant { gamma: 0.8 };
        assert_eq!(threshold_at(&c, 0), 0.8);
        assert_eq!(threshold_at(&c, 12345), 0.8);
        let s = ThresholdSchedule::Step {
            gamma0: 0.9,
            gamma1: 0.5,
            switch_step: 100,
        };
        assert_eq!(threshold_at(&s, 99), 0.9);
        assert_eq!(threshold_at(&s, 100), 0.5);
        let g = ThresholdSchedule::Sigmoid {
            gamma_min: 0.3,
            gamma_max: 0.9,
            midpoint: 50.0,
            slope: 10.0,
        };
        assert!((threshold_at(&g, 50) - 0.6).abs() < 1e-15);
        assert!(threshold_at(&g, 0) < threshold_at(&g, 100));
    }

    #[test]
    fn config_validation() {
        assert!(GateConfig::constant(0.8).validate().is_ok());
        assert!(GateConfig::constant(1.0).validate().is_err());
        assert!(GateConfig::constant(0.0).validate().is_err());
    }

    #[test]
    fn ssi_replaces_first_failure() {
        let g = group_with(0, &[0, 0, 1, 0]);
        let teacher = Trajectory {
            prompt: 0,
            tokens: vec![1, 1],
            behavior_logps: vec![],
            reward: 1,
            is_teacher: true,
        };
        let out = ssi_transform(g, teacher.clone()).unwrap();
        assert_eq!(out.rewards(), vec![1.0, 0.0, 1.0, 0.0]);
        assert_eq!(out.size(), 4);
        assert_eq!(out.teacher_count(), 1);
        assert!(out.trajectories[0].is_teacher);
        assert_eq!(out.success_count, 2);
        assert!(out.injected);

        let wrong = Trajectory { prompt: 3, ..teacher.clone() };
        assert!(matches!(ssi_transform(group_with(0, &[0, 0]), wrong), Err(LabError::Input(_))));
        let not_teacher = Trajectory {
            is_teacher: false,
            ..teacher
        };
        assert!(ssi_transform(group_with(0, &[0, 0]), not_teacher).is_err());
    }

    #[test]
    fn longest_failed_rule() {
        let mut g = group_with(0, &[0, 1, 0]);
        g.trajectories[2].tokens = vec![0, 0, 0];
        g.trajectories[2].behavior_logps = vec![-1.0; 3];
        let teacher = Trajectory {
            prompt: 0,
            tokens: vec![1, 1],
            behavior_logps: vec![],
            reward: 1,
            is_teacher: true,
        };
        let out = ssi_transform_with(g, teacher, ReplaceRule::LongestFailed).unwrap();
        assert_eq!(out.displaced.unwrap().index, 2);
    }

    #[test]
    fn gate_opens_below_seven_of_eight() {
        let task = make_lock_task(4, 1, 2, 1, 0).unwrap();
        let cfg = GateConfig::constant(0.8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for s in 0..=8usize {
            let rewards: Vec<u8> = (0..8).map(|j| u8::from(j < s)).collect();
            let (groups, dec) = gate_and_inject(vec![group_with(0, &rewards)], &task, &cfg, 0, &mut rng).unwrap();
            let k = success_threshold(0.8, 8);
            assert_eq!(k, 7.0);
            assert_eq!(dec[0].opened, (s as f64) < k, "S = {s}");
            assert_eq!(groups[0].injected, dec[0].opened);
            assert_eq!(dec[0].replaced_index.is_some(), dec[0].opened);
            if dec[0].opened {
                assert_eq!(groups[0].success_count, s + 1);
            }
        }
        let (g, d) = gate_and_inject(vec![], &task, &cfg, 0, &mut rng).unwrap();
        assert!(g.is_empty() && d.is_empty());
    }

    #[test]
    fn forced_rules() {
        let task = make_lock_task(4, 1, 2, 1, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let all_ok = group_with(0, &[1; 4]);
        let (_, d) = gate_and_inject(vec![all_ok.clone()], &task, &GateConfig::constant(0.8), 0, &mut rng).unwrap();
        assert!(!d[0].opened);
        let cfg = GateConfig::constant(0.8).with_rule(GateRule::AlwaysOpen);
        let (g, d) = gate_and_inject(vec![all_ok], &task, &cfg, 0, &mut rng).unwrap();
        assert!(d[0].opened && g[0].injected);
        let cfg = GateConfig::constant(0.8).with_rule(GateRule::Closed);
        let (_, d) = gate_and_inject(vec![group_with(0, &[0; 4])], &task, &cfg, 0, &mut rng).unwrap();
        assert!(!d[0].opened);
    }

    #[test]
    fn posterior_sample_rule_tracks_posterior() {
        let task = make_lock_task(4, 1, 2, 1, 0).unwrap();
        let cfg = GateConfig::constant(0.5).with_rule(GateRule::PosteriorSample);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let trials = 4000;
        let mut opened = 0;
        for _ in 0..trials {
            let (_, d) = gate_and_inject(vec![group_with(0, &[1, 0, 0, 0])], &task, &cfg, 0, &mut rng).unwrap();
            opened += usize::from(d[0].opened);
        }
        // Beta(2, 4): P(x < 1/2) = P(Binomial(5, 1/2) >= 2) = 13/16
        let p = 13.0 / 16.0;
        let se = (p * (1.0 - p) / trials as f64).sqrt();
        assert!((opened as f64 / trials as f64 - p).abs() < 4.0 * se);
    }
}
