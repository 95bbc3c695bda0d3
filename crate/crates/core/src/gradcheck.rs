//! Central finite-difference audit of every analytic gradient in the lab.
//!
//! Each instance is a small random lock task with random logits on every
//! reachable context. The batch objective is audited at the parameters that
//! produced the rollouts, where every importance ratio is exactly 1 and the
//! clip kinks at `1 +- eps` are out of reach of the perturbation.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::sft_objective;
use crate::env::{make_lock_task, teacher_demo, TaskSpec, Token};
use crate::error::{LabError, Result};
use crate::gating::{confidence, ssi_transform};
use crate::grpo::{compute_advantages, rollout_group, Group};
use crate::hapo::{hapo_batch_objective, teacher_loss, ShapingConfig};
use crate::policy::{ContextKey, Gradient, PolicyParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub instances: usize,
    pub seed: u64,
    /// Finite-difference step.
    pub h: f64,
    /// Largest accepted relative error.
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            instances: 100,
            seed: 0,
            h: 1e-5,
            tolerance: 1e-5,
        }
    }
}

impl GradcheckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.instances == 0 {
            return Err(LabError::Config("gradcheck.instances must be positive".into()));
        }
        if !(self.h > 0.0 && self.h < 1.0) {
            return Err(LabError::Config("gradcheck.h must lie in (0, 1)".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(LabError::Config("gradcheck.tolerance must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Audited {
    Logp,
    Sft,
    TeacherLoss,
    BatchObjective,
}

impl Audited {
    pub const ALL: [Audited; 4] = [Audited::Logp, Audited::Sft, Audited::TeacherLoss, Audited::BatchObjective];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindReport {
    pub kind: Audited,
    pub max_relative_error: f64,
    /// Instance index that produced the maximum.
    pub worst_instance: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub instances: usize,
    pub h: f64,
    pub tolerance: f64,
    pub kinds: Vec<KindReport>,
    pub max_relative_error: f64,
    pub passed: bool,
}

/// `||a - b|| / (||a|| + ||b||)`, with the denominator floored at 1e-8 so two
/// vanishing gradients do not divide rounding noise by zero.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb: f64 = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / (na + nb).max(1e-8)
}

/// Every context a sequence of the task can visit.
fn all_contexts(params: &PolicyParams, task: &TaskSpec) -> Vec<ContextKey> {
    let v = params.vocab_size();
    let mut out = Vec::new();
    for &p in &task.prompts {
        let mut prefixes: Vec<Vec<Token>> = vec![Vec::new()];
        for _ in 0..task.max_len {
            let mut next = Vec::new();
            for pre in &prefixes {
                out.push(params.context(p, pre));
                for t in 0..v {
                    let mut q = pre.clone();
                    q.push(t);
                    next.push(q);
                }
            }
            prefixes = next;
        }
    }
    out.sort();
    out.dedup();
    out
}

fn flatten(grad: &Gradient, keys: &[ContextKey], vocab: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(keys.len() * vocab);
    for k in keys {
        match grad.get(k) {
            Some(row) => out.extend_from_slice(row),
            None => out.extend(std::iter::repeat_n(0.0, vocab)),
        }
    }
    out
}

fn numeric_gradient(
    params: &PolicyParams,
    keys: &[ContextKey],
    h: f64,
    f: &dyn Fn(&PolicyParams) -> Result<f64>,
) -> Result<Vec<f64>> {
    let vocab = params.vocab_size() as usize;
    let mut work = params.clone();
    let mut out = Vec::with_capacity(keys.len() * vocab);
    for k in keys {
        for v in 0..vocab {
            let x = work.row(k)[v];
            work.row_mut(k)[v] = x + h;
            let up = f(&work)?;
            work.row_mut(k)[v] = x - h;
            let down = f(&work)?;
            work.row_mut(k)[v] = x;
            out.push((up - down) / (2.0 * h));
        }
    }
    Ok(out)
}

struct Instance {
    task: TaskSpec,
    params: PolicyParams,
    keys: Vec<ContextKey>,
}

fn random_instance(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let vocab = rng.random_range(2..=4u32);
    let len = rng.random_range(1..=3usize);
    let prompts = rng.random_range(1..=3u32);
    let space = (vocab as usize).pow(len as u32);
    let sols = rng.random_range(1..=space.min(3));
    let task = make_lock_task(vocab, prompts, len, sols, rng.random())?;
    let mut params = PolicyParams::for_task(&task, None);
    let keys = all_contexts(&params, &task);
    for k in &keys {
        let row: Vec<f64> = (0..vocab).map(|_| rng.random_range(-1.5..1.5)).collect();
        params.set_row(k.clone(), row)?;
    }
    Ok(Instance { task, params, keys })
}

fn audit_instance(inst: &Instance, h: f64, rng: &mut ChaCha8Rng) -> Result<[f64; 4]> {
    let Instance { task, params, keys } = inst;
    let vocab = params.vocab_size() as usize;
    let prompt = *task.prompts.choose(rng).expect("task has prompts");

    // logp of one token at one reachable context
    let ctx = keys.iter().filter(|k| k.prompt == prompt).collect::<Vec<_>>();
    let ctx = (*ctx.choose(rng).expect("prompt has contexts")).clone();
    let tok = rng.random_range(0..params.vocab_size());
    let a = flatten(&params.grad_logp(&ctx, tok), keys, vocab);
    let n = numeric_gradient(params, keys, h, &|p| Ok(p.logp(&ctx, tok)))?;
    let e_logp = relative_error(&a, &n);

    let demos: Vec<_> = task
        .prompts
        .iter()
        .map(|&p| teacher_demo(task, p))
        .collect::<Result<_>>()?;
    let (_, g) = sft_objective(params, &demos)?;
    let a = flatten(&g, keys, vocab);
    let n = numeric_gradient(params, keys, h, &|p| Ok(sft_objective(p, &demos)?.0))?;
    let e_sft = relative_error(&a, &n);

    let shaping = ShapingConfig {
        beta: rng.random_range(0.05..1.0),
        confidence_anneal: rng.random_bool(0.5),
    };
    let c: f64 = rng.random_range(0.0..1.0);
    let demo = teacher_demo(task, prompt)?;
    let (_, g) = teacher_loss(params, &demo, c, &shaping)?;
    let a = flatten(&g, keys, vocab);
    let n = numeric_gradient(params, keys, h, &|p| Ok(teacher_loss(p, &demo, c, &shaping)?.0))?;
    let e_teacher = relative_error(&a, &n);

    let n_groups = rng.random_range(1..=3usize);
    let group_size = rng.random_range(2..=5usize);
    let eps = rng.random_range(0.1..0.3);
    let mut groups: Vec<Group> = Vec::with_capacity(n_groups);
    for i in 0..n_groups {
        let p = *task.prompts.choose(rng).expect("task has prompts");
        let mut g = rollout_group(params, task, p, group_size, rng)?;
        g.id = i;
        if rng.random_bool(0.5) {
            g = ssi_transform(g, teacher_demo(task, p)?)?;
        }
        g.confidence = Some(confidence(g.success_count, g.size())?);
        compute_advantages(&mut g);
        groups.push(g);
    }
    let obj = hapo_batch_objective(params, &groups, &shaping, eps)?;
    let a = flatten(&obj.gradient, keys, vocab);
    let n = numeric_gradient(params, keys, h, &|p| Ok(hapo_batch_objective(p, &groups, &shaping, eps)?.value))?;
    let e_batch = relative_error(&a, &n);

    Ok([e_logp, e_sft, e_teacher, e_batch])
}

/// Runs `cfg.instances` random instances and reports the worst relative
/// error per audited gradient.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut worst = [(0.0f64, 0usize); 4];
    for i in 0..cfg.instances {
        let inst = random_instance(&mut rng)?;
        let errs = audit_instance(&inst, cfg.h, &mut rng)?;
        for (w, e) in worst.iter_mut().zip(errs) {
            // NaN compares false, so route it through explicitly
            if e.is_nan() || e > w.0 {
                *w = (if e.is_nan() { f64::INFINITY } else { e }, i);
            }
        }
    }
    let kinds: Vec<KindReport> = Audited::ALL
        .iter()
        .zip(worst)
        .map(|(&kind, (e, i))| KindReport {
            kind,
            max_relative_error: e,
            worst_instance: i,
        })
        .collect();
    let max = kinds.iter().map(|k| k.max_relative_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        instances: cfg.instances,
        h: cfg.h,
        tolerance: cfg.tolerance,
        kinds,
        max_relative_error: max,
        passed: max < cfg.tolerance,
    })
}
