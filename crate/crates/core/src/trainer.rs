//! Synchronous on-policy training loop.
//!
//! One step: roll out a group per prompt against the current parameters,
//! gate and inject, normalize advantages, evaluate the method's objective and
//! take a gradient-ascent step. All randomness comes from one ChaCha stream
//! whose position is checkpointed, so a resumed run replays bit-for-bit.

use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{sft_objective, static_mix_objective, static_mix_step, Method};
use crate::env::{teacher_demo, PromptId, TaskSpec, Token, Trajectory};
use crate::error::{LabError, Result};
use crate::gating::{gate_and_inject, GateConfig, GateDecision, GateRule};
use crate::grpo::{compute_advantages_with, grpo_batch_objective, rollout_group, Group, StdKind};
use crate::hapo::{batch_objective, BatchObjective, BatchStats, ObjectiveConfig, ShapingConfig};
use crate::metrics::{read_metrics_csv, truncate_logs, RunLogger, RunMetrics, StepMetrics};
use crate::policy::{sample_with_temperature, ContextKey, Gradient, PolicyParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant { eta0: f64 },
    /// `eta0 / sqrt(t + 1)`.
    InvSqrt { eta0: f64 },
}

impl LrSchedule {
    pub fn at(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant { eta0 } => eta0,
            LrSchedule::InvSqrt { eta0 } => eta0 / ((step + 1) as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    /// Plain gradient ascent.
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    /// Prompts per batch, taken cyclically over the task's prompt list.
    pub batch_prompts: usize,
    pub group_size: usize,
    pub lr: LrSchedule,
    pub optimizer: OptimizerKind,
    /// Gradient steps per rollout batch; more than one exercises clipping.
    pub updates_per_batch: usize,
    pub seed: u64,
    pub gate: GateConfig,
    pub shaping: ShapingConfig,
    pub eps_clip: f64,
    pub std_kind: StdKind,
    pub count_teacher_tokens: bool,
    /// Tokens of generated prefix the policy conditions on; `None` for all.
    pub context_order: Option<usize>,
    pub log_trajectories: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_prompts: 16,
            group_size: 8,
            lr: LrSchedule::Constant { eta0: 6.0 },
            optimizer: OptimizerKind::Sgd,
            updates_per_batch: 1,
            seed: 0,
            gate: GateConfig::default(),
            shaping: ShapingConfig::default(),
            eps_clip: 0.2,
            std_kind: StdKind::Population,
            count_teacher_tokens: true,
            context_order: None,
            log_trajectories: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LabError::Config(m.to_string()));
        if self.batch_prompts == 0 {
            return bad("train.batch_prompts must be positive");
        }
        if self.group_size < 2 {
            return bad("train.group_size must be at least 2");
        }
        if self.updates_per_batch == 0 {
            return bad("train.updates_per_batch must be positive");
        }
        let eta0 = match self.lr {
            LrSchedule::Constant { eta0 } | LrSchedule::InvSqrt { eta0 } => eta0,
        };
        if !(eta0 > 0.0 && eta0.is_finite()) {
            return bad("train.lr.eta0 must be positive");
        }
        if !(self.eps_clip > 0.0 && self.eps_clip < 1.0) {
            return bad("train.eps_clip must lie in (0, 1)");
        }
        if let OptimizerKind::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
                return bad("train.optimizer: adam needs beta1, beta2 in [0, 1) and eps > 0");
            }
        }
        self.gate.validate()?;
        self.shaping.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerState {
    Sgd,
    Adam {
        t: u64,
        m: Vec<(ContextKey, Vec<f64>)>,
        v: Vec<(ContextKey, Vec<f64>)>,
    },
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: PolicyParams,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub optimizer: OptimizerState,
}

impl TrainState {
    pub fn new(task: &TaskSpec, config: &TrainConfig) -> Self {
        Self {
            params: PolicyParams::for_task(task, config.context_order),
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            optimizer: match config.optimizer {
                OptimizerKind::Sgd => OptimizerState::Sgd,
                OptimizerKind::Adam { .. } => OptimizerState::Adam {
                    t: 0,
                    m: Vec::new(),
                    v: Vec::new(),
                },
            },
        }
    }
}

/// Everything one step produced.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub metrics: StepMetrics,
    pub groups: Vec<Group>,
    pub decisions: Vec<GateDecision>,
    pub gradient: Gradient,
}

/// Prompts used at `step`: a cyclic walk over the task's prompt list.
pub fn batch_prompts(task: &TaskSpec, step: u64, m: usize) -> Vec<PromptId> {
    let p = task.prompts.len() as u64;
    (0..m as u64)
        .map(|i| task.prompts[((step * m as u64 + i) % p) as usize])
        .collect()
}

/// The on-policy gradient of the batch with every injection undone.
pub fn pure_grpo_gradient(
    params: &PolicyParams,
    groups: &[Group],
    eps_clip: f64,
    std_kind: StdKind,
) -> Result<Gradient> {
    let stripped: Vec<Group> = groups
        .iter()
        .map(|g| {
            let mut s = g.without_injection();
            compute_advantages_with(&mut s, std_kind);
            s
        })
        .collect();
    Ok(grpo_batch_objective(params, &stripped, eps_clip)?.1)
}

fn gate_for(method: &Method, config: &TrainConfig) -> GateConfig {
    match method {
        Method::Hapo => config.gate,
        Method::StaticMix { .. } => config.gate.with_rule(GateRule::AlwaysOpen),
        Method::Grpo | Method::Sft | Method::SftThenRl { .. } => config.gate.with_rule(GateRule::Closed),
    }
}

fn objective_for(method: &Method, config: &TrainConfig) -> ObjectiveConfig {
    match *method {
        Method::StaticMix { use_shaping, lambda } => static_mix_objective(
            use_shaping,
            lambda,
            config.shaping,
            config.eps_clip,
            config.count_teacher_tokens,
        ),
        _ => ObjectiveConfig {
            count_teacher_tokens: config.count_teacher_tokens,
            ..ObjectiveConfig::hapo(config.shaping, config.eps_clip)
        },
    }
}

fn adam_update(
    params: &mut PolicyParams,
    state: &mut OptimizerState,
    grad: &Gradient,
    lr: f64,
    (beta1, beta2, eps): (f64, f64, f64),
) {
    let OptimizerState::Adam { t, m, v } = state else {
        return;
    };
    *t += 1;
    let vocab = params.vocab_size() as usize;
    let mut mm: std::collections::BTreeMap<ContextKey, Vec<f64>> = std::mem::take(m).into_iter().collect();
    let mut vv: std::collections::BTreeMap<ContextKey, Vec<f64>> = std::mem::take(v).into_iter().collect();
    for (ctx, g) in grad.rows() {
        mm.entry(ctx.clone()).or_insert_with(|| vec![0.0; vocab]);
        vv.entry(ctx.clone()).or_insert_with(|| vec![0.0; vocab]);
        let _ = g;
    }
    let bc1 = 1.0 - beta1.powi(*t as i32);
    let bc2 = 1.0 - beta2.powi(*t as i32);
    for (ctx, mrow) in mm.iter_mut() {
        let vrow = vv.get_mut(ctx).expect("moments share keys");
        let g = grad.get(ctx);
        let row = params.row_mut(ctx);
        for i in 0..vocab {
            let gi = g.map_or(0.0, |g| g[i]);
            mrow[i] = beta1 * mrow[i] + (1.0 - beta1) * gi;
            vrow[i] = beta2 * vrow[i] + (1.0 - beta2) * gi * gi;
            let mhat = mrow[i] / bc1;
            let vhat = vrow[i] / bc2;
            row[i] += lr * mhat / (vhat.sqrt() + eps);
        }
    }
    *m = mm.into_iter().collect();
    *v = vv.into_iter().collect();
}

fn finite_or_abort(step: u64, grad: &Gradient, value: f64) -> Result<()> {
    let bad = grad.non_finite_rows();
    if bad.is_empty() && value.is_finite() {
        return Ok(());
    }
    let rows: Vec<String> = bad
        .iter()
        .take(16)
        .map(|c| format!("(prompt {}, pos {}, suffix {:?})", c.prompt, c.position, c.suffix))
        .collect();
    Err(LabError::NonFinite {
        step,
        detail: format!("objective {value}; {} non-finite rows: {}", bad.len(), rows.join(", ")),
    })
}

/// One training step for `method`.
pub fn train_step(state: &mut TrainState, task: &TaskSpec, method: &Method, config: &TrainConfig) -> Result<StepOutput> {
    let step = state.step;
    let prompts = batch_prompts(task, step, config.batch_prompts);

    // per-group streams are drawn up front so rollouts are order-independent
    let seeds: Vec<u64> = prompts.iter().map(|_| state.rng.next_u64()).collect();
    let mut groups = Vec::with_capacity(prompts.len());
    for (i, (&p, &s)) in prompts.iter().zip(&seeds).enumerate() {
        let mut g = rollout_group(&state.params, task, p, config.group_size, &mut ChaCha8Rng::seed_from_u64(s))?;
        g.id = i;
        groups.push(g);
    }

    let lr = config.lr.at(step);
    let sft = method.is_sft_at(step);
    let objective_cfg = objective_for(method, config);

    let objective = |params: &PolicyParams, groups: &[Group]| -> Result<BatchObjective> {
        if !sft {
            return batch_objective(params, groups, &objective_cfg);
        }
        let demos = groups
            .iter()
            .map(|g| teacher_demo(task, g.prompt))
            .collect::<Result<Vec<Trajectory>>>()?;
        let (value, gradient) = sft_objective(params, &demos)?;
        let tokens = demos.iter().map(Trajectory::len).sum();
        let stats = BatchStats {
            n_groups: groups.len(),
            teacher_tokens: tokens,
            total_tokens: tokens,
            teacher_token_share: 1.0,
            teacher_value: value,
            ..BatchStats::default()
        };
        Ok(BatchObjective { value, gradient, stats })
    };

    let (groups, decisions, first) = if let Method::StaticMix { .. } = method {
        static_mix_step(
            &state.params,
            groups,
            task,
            &objective_cfg,
            &config.gate,
            config.std_kind,
            step,
            &mut state.rng,
        )?
    } else {
        let (mut groups, decisions) = gate_and_inject(groups, task, &gate_for(method, config), step, &mut state.rng)?;
        for g in &mut groups {
            compute_advantages_with(g, config.std_kind);
        }
        let obj = objective(&state.params, &groups)?;
        (groups, decisions, obj)
    };
    finite_or_abort(step, &first.gradient, first.value)?;

    let grpo_cosine = if sft {
        None
    } else {
        // identical gradients report exactly 1 rather than a rounded quotient
        let pure = pure_grpo_gradient(&state.params, &groups, config.eps_clip, config.std_kind)?;
        Some(if pure == first.gradient { 1.0 } else { first.gradient.cosine(&pure) })
    };

    let grad_norm = first.gradient.norm();
    let first_gradient = first.gradient.clone();
    let mut current = first;
    for k in 0..config.updates_per_batch {
        match config.optimizer {
            OptimizerKind::Sgd => state.params.apply(&current.gradient, lr),
            OptimizerKind::Adam { beta1, beta2, eps } => adam_update(
                &mut state.params,
                &mut state.optimizer,
                &current.gradient,
                lr,
                (beta1, beta2, eps),
            ),
        }
        if k + 1 < config.updates_per_batch {
            current = objective(&state.params, &groups)?;
            finite_or_abort(step, &current.gradient, current.value)?;
        }
    }
    if !state.params.all_finite() {
        return Err(LabError::NonFinite {
            step,
            detail: "parameters became non-finite after the update".into(),
        });
    }

    let injected = groups.iter().filter(|g| g.injected).count();
    let mut reward_sum = 0.0;
    let mut len_sum = 0.0;
    let mut count = 0usize;
    for g in &groups {
        for t in g.without_injection().trajectories.iter() {
            reward_sum += t.reward_f64();
            len_sum += t.len() as f64;
            count += 1;
        }
    }
    let m = groups.len().max(1) as f64;
    let metrics = StepMetrics {
        step,
        mean_reward: reward_sum / count.max(1) as f64,
        mean_gen_length: len_sum / count.max(1) as f64,
        teacher_injection_count: if sft { groups.len() } else { injected },
        n_groups: groups.len(),
        intervention_rate: if sft { 1.0 } else { injected as f64 / m },
        mean_confidence: decisions.iter().map(|d| d.confidence).sum::<f64>() / m,
        threshold: decisions.first().map_or(0.0, |d| d.threshold),
        grad_norm,
        objective: current.value,
        surrogate_value: current.stats.surrogate_value,
        teacher_value: current.stats.teacher_value,
        teacher_token_share: current.stats.teacher_token_share,
        mean_abs_advantage: current.stats.mean_abs_advantage,
        learning_rate: lr,
        grpo_cosine,
    };
    state.step += 1;
    Ok(StepOutput {
        metrics,
        groups,
        decisions,
        gradient: first_gradient,
    })
}

/// Per-prompt evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptEval {
    pub prompt: PromptId,
    pub success_rate: f64,
    pub mean_length: f64,
    /// Exact probability of emitting any accepted sequence.
    pub success_prob: f64,
    pub teacher_solution_prob: f64,
    pub non_teacher_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_samples: usize,
    pub temperature: f64,
    pub per_prompt: Vec<PromptEval>,
    pub mean_success: f64,
    pub mean_length: f64,
    pub mean_success_prob: f64,
    pub mean_teacher_prob: f64,
    pub mean_non_teacher_prob: f64,
}

fn exact_prob(params: &PolicyParams, prompt: PromptId, seqs: &[Vec<Token>]) -> f64 {
    seqs.iter().map(|s| params.sequence_logp(prompt, s).exp()).sum()
}

/// Sampled success rates at `temperature` plus exact solution probabilities
/// of the policy itself (temperature 1).
pub fn evaluate(
    params: &PolicyParams,
    task: &TaskSpec,
    n_samples: usize,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<EvalReport> {
    if n_samples == 0 {
        return Err(LabError::Input("evaluation needs at least one sample".into()));
    }
    let mut per_prompt = Vec::with_capacity(task.prompts.len());
    for &p in &task.prompts {
        let mut succ = 0usize;
        let mut len = 0usize;
        for _ in 0..n_samples {
            let t = sample_with_temperature(params, task, p, temperature, rng)?;
            succ += usize::from(t.reward);
            len += t.len();
        }
        let accepted: Vec<Vec<Token>> = task.accepted[&p].iter().cloned().collect();
        let teacher = task.teacher_demos.get(&p).cloned().map(|d| vec![d]).unwrap_or_default();
        per_prompt.push(PromptEval {
            prompt: p,
            success_rate: succ as f64 / n_samples as f64,
            mean_length: len as f64 / n_samples as f64,
            success_prob: exact_prob(params, p, &accepted),
            teacher_solution_prob: exact_prob(params, p, &teacher),
            non_teacher_prob: exact_prob(params, p, &task.non_teacher_solutions(p)),
        });
    }
    let k = per_prompt.len() as f64;
    let mean = |f: fn(&PromptEval) -> f64| per_prompt.iter().map(f).sum::<f64>() / k;
    Ok(EvalReport {
        n_samples,
        temperature,
        mean_success: mean(|e| e.success_rate),
        mean_length: mean(|e| e.mean_length),
        mean_success_prob: mean(|e| e.success_prob),
        mean_teacher_prob: mean(|e| e.teacher_solution_prob),
        mean_non_teacher_prob: mean(|e| e.non_teacher_prob),
        per_prompt,
    })
}

/// Mean exact probability, over prompts, of the accepted sequences other
/// than the teacher's.
pub fn non_teacher_probability(params: &PolicyParams, task: &TaskSpec) -> f64 {
    let k = task.prompts.len() as f64;
    task.prompts
        .iter()
        .map(|&p| exact_prob(params, p, &task.non_teacher_solutions(p)))
        .sum::<f64>()
        / k
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointState {
    schema_version: u32,
    step: u64,
    rng_seed: Vec<u8>,
    rng_stream: u64,
    rng_word_pos: String,
    optimizer: OptimizerState,
}

/// Writes `policy.tsv` and `state.json` into `dir`.
pub fn save_checkpoint(state: &TrainState, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    state.params.save(&dir.join("policy.tsv"))?;
    let s = CheckpointState {
        schema_version: 1,
        step: state.step,
        rng_seed: state.rng.get_seed().to_vec(),
        rng_stream: state.rng.get_stream(),
        rng_word_pos: state.rng.get_word_pos().to_string(),
        optimizer: state.optimizer.clone(),
    };
    std::fs::write(dir.join("state.json"), serde_json::to_string_pretty(&s)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<TrainState> {
    let params = PolicyParams::load(&dir.join("policy.tsv"))?;
    let s: CheckpointState = serde_json::from_str(&std::fs::read_to_string(dir.join("state.json"))?)?;
    let seed: [u8; 32] = s
        .rng_seed
        .as_slice()
        .try_into()
        .map_err(|_| LabError::Serde("checkpoint rng seed must be 32 bytes".into()))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(s.rng_stream);
    rng.set_word_pos(
        s.rng_word_pos
            .parse::<u128>()
            .map_err(|_| LabError::Serde("bad rng word position".into()))?,
    );
    Ok(TrainState {
        params,
        step: s.step,
        rng,
        optimizer: s.optimizer,
    })
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Run directory for logs and checkpoints; `None` keeps everything in memory.
    pub out_dir: Option<PathBuf>,
    /// Write `checkpoint/` every this many steps (and always at the end).
    pub checkpoint_every: Option<u64>,
    /// Continue from `out_dir/checkpoint` when present.
    pub resume: bool,
    /// Stop after this many total steps even if `config.steps` is larger.
    pub stop_at: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub metrics: RunMetrics,
    pub params: PolicyParams,
    pub state: TrainState,
}

/// Trains `method` on `task` for `config.steps` steps.
pub fn run(method: &Method, task: &TaskSpec, config: &TrainConfig, opts: &RunOptions) -> Result<RunResult> {
    config.validate()?;
    method.validate()?;
    task.validate()?;
    for &p in &task.prompts {
        if !task.teacher_demos.contains_key(&p) && !matches!(method, Method::Grpo) {
            return Err(LabError::Config(format!("prompt {p} has no teacher demo")));
        }
    }

    let ckpt_dir = opts.out_dir.as_ref().map(|d| d.join("checkpoint"));
    let mut history = Vec::new();
    let mut state = match (&ckpt_dir, opts.resume) {
        (Some(c), true) if c.join("state.json").exists() => {
            let s = load_checkpoint(c)?;
            let dir = opts.out_dir.as_ref().expect("checkpoint implies out_dir");
            truncate_logs(dir, s.step)?;
            if dir.join("metrics.csv").exists() {
                history = read_metrics_csv(&dir.join("metrics.csv"))?;
            }
            s
        }
        _ => {
            if let Some(dir) = &opts.out_dir {
                // fresh run: start the logs over
                for f in ["metrics.csv", "gates.csv", "trajectories.jsonl"] {
                    let p = dir.join(f);
                    if p.exists() {
                        std::fs::remove_file(p)?;
                    }
                }
            }
            TrainState::new(task, config)
        }
    };

    let mut logger = match &opts.out_dir {
        Some(d) => Some(RunLogger::open(d, config.log_trajectories)?),
        None => None,
    };
    let end = opts.stop_at.map_or(config.steps, |s| s.min(config.steps));
    while state.step < end {
        let out = train_step(&mut state, task, method, config)?;
        if let Some(l) = logger.as_mut() {
            l.record(&out.metrics, &out.decisions, &out.groups)?;
        }
        history.push(out.metrics);
        if let (Some(every), Some(c)) = (opts.checkpoint_every, &ckpt_dir) {
            if every > 0 && state.step % every == 0 {
                if let Some(l) = logger.as_mut() {
                    l.flush()?;
                }
                save_checkpoint(&state, c)?;
            }
        }
    }
    if let Some(l) = logger.as_mut() {
        l.flush()?;
    }
    if let Some(c) = &ckpt_dir {
        save_checkpoint(&state, c)?;
    }
    Ok(RunResult {
        metrics: RunMetrics {
            label: method.label(),
            seed: config.seed,
            steps: history,
        },
        params: state.params.clone(),
        state,
    })
}
