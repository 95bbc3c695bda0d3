//! Synthetic verifiable-reward tasks.
//!
//! A task is a finite-horizon, deterministic-transition generation problem:
//! the policy emits tokens conditioned on an opaque prompt id and receives a
//! binary reward at the end, 1 iff the emitted sequence is one of the
//! prompt's accepted sequences. Each prompt carries one teacher
//! demonstration. When a prompt has several accepted sequences the teacher
//! always shows the same one, which is how a suboptimal teacher is modeled.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

pub type PromptId = u32;
pub type Token = u32;

pub const TASK_SCHEMA_VERSION: u32 = 1;

/// Whether teacher demonstrations are required to pass the verifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TeacherMode {
    #[default]
    Verified,
    /// Ablation mode: demos may be rejected by the verifier and then carry reward 0.
    Unverified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub schema_version: u32,
    pub name: String,
    pub vocab_size: u32,
    pub prompts: Vec<PromptId>,
    /// Generation horizon.
    pub max_len: usize,
    /// End-of-sequence token. `None` means every rollout is exactly `max_len` tokens.
    pub eos: Option<Token>,
    pub accepted: BTreeMap<PromptId, BTreeSet<Vec<Token>>>,
    pub teacher_demos: BTreeMap<PromptId, Vec<Token>>,
    pub teacher_mode: TeacherMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt: PromptId,
    pub tokens: Vec<Token>,
    /// Log-probabilities under the sampling policy. Empty for teacher demos.
    pub behavior_logps: Vec<f64>,
    pub reward: u8,
    pub is_teacher: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn reward_f64(&self) -> f64 {
        f64::from(self.reward)
    }
}

impl TaskSpec {
    /// Checks the structural invariants. Called by every constructor and loader.
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(LabError::Config("vocab_size must be positive".into()));
        }
        if self.max_len == 0 {
            return Err(LabError::Config("max_len must be positive".into()));
        }
        if let Some(eos) = self.eos {
            if eos >= self.vocab_size {
                return Err(LabError::Config(format!("eos token {eos} outside vocabulary")));
            }
        }
        let mut seen = BTreeSet::new();
        for &p in &self.prompts {
            if !seen.insert(p) {
                return Err(LabError::Config(format!("duplicate prompt id {p}")));
            }
            let acc = self
                .accepted
                .get(&p)
                .filter(|a| !a.is_empty())
                .ok_or_else(|| LabError::Config(format!("prompt {p} has no accepted sequences")))?;
            for seq in acc {
                self.check_sequence(seq)
                    .map_err(|e| LabError::Config(format!("prompt {p}: {e}")))?;
            }
            if let Some(demo) = self.teacher_demos.get(&p) {
                self.check_sequence(demo)
                    .map_err(|e| LabError::Config(format!("prompt {p} demo: {e}")))?;
                if self.teacher_mode == TeacherMode::Verified && !acc.contains(demo) {
                    return Err(LabError::Config(format!(
                        "prompt {p}: teacher demo is not accepted (use unverified teacher mode for ablations)"
                    )));
                }
            }
        }
        Ok(())
    }

    fn check_sequence(&self, seq: &[Token]) -> std::result::Result<(), String> {
        if seq.is_empty() {
            return Err("empty sequence".into());
        }
        if seq.len() > self.max_len {
            return Err(format!("sequence length {} exceeds max_len {}", seq.len(), self.max_len));
        }
        if let Some(&t) = seq.iter().find(|&&t| t >= self.vocab_size) {
            return Err(format!("token {t} outside vocabulary"));
        }
        Ok(())
    }

    pub fn contains_prompt(&self, prompt: PromptId) -> bool {
        self.accepted.contains_key(&prompt) && self.prompts.contains(&prompt)
    }

    /// Sequences accepted for `prompt` other than its teacher demo.
    pub fn non_teacher_solutions(&self, prompt: PromptId) -> Vec<Vec<Token>> {
        let demo = self.teacher_demos.get(&prompt);
        self.accepted
            .get(&prompt)
            .map(|acc| acc.iter().filter(|s| Some(*s) != demo).cloned().collect())
            .unwrap_or_default()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let task: TaskSpec = serde_json::from_str(&text)?;
        if task.schema_version != TASK_SCHEMA_VERSION {
            return Err(LabError::Config(format!(
                "unsupported task schema version {}",
                task.schema_version
            )));
        }
        task.validate()?;
        Ok(task)
    }
}

/// Binary verifier: 1 iff `tokens` is an accepted sequence for `prompt`.
pub fn verify(task: &TaskSpec, prompt: PromptId, tokens: &[Token]) -> Result<u8> {
    if !task.prompts.contains(&prompt) {
        return Err(LabError::UnknownPrompt(prompt));
    }
    let acc = task.accepted.get(&prompt).ok_or(LabError::UnknownPrompt(prompt))?;
    Ok(u8::from(acc.contains(tokens)))
}

/// The prompt's registered demonstration as a teacher trajectory.
///
/// Teacher tokens are scored under the live policy at loss time, so no
/// behavior log-probabilities are attached.
pub fn teacher_demo(task: &TaskSpec, prompt: PromptId) -> Result<Trajectory> {
    let demo = task
        .teacher_demos
        .get(&prompt)
        .ok_or_else(|| LabError::Config(format!("no teacher demo registered for prompt {prompt}")))?;
    let reward = verify(task, prompt, demo)?;
    Ok(Trajectory {
        prompt,
        tokens: demo.clone(),
        behavior_logps: Vec::new(),
        reward,
        is_teacher: true,
    })
}

/// Sparse "combination lock": each prompt accepts `n_solutions` distinct
/// fixed-length sequences drawn uniformly at random. The teacher demo is the
/// first solution drawn.
pub fn make_lock_task(
    vocab_size: u32,
    n_prompts: u32,
    seq_len: usize,
    n_solutions: usize,
    seed: u64,
) -> Result<TaskSpec> {
    if vocab_size < 2 {
        return Err(LabError::Config("lock task needs vocab_size >= 2".into()));
    }
    if seq_len == 0 || n_solutions == 0 || n_prompts == 0 {
        return Err(LabError::Config(
            "lock task needs seq_len, n_solutions and n_prompts >= 1".into(),
        ));
    }
    let space = u64::from(vocab_size).checked_pow(seq_len as u32);
    if let Some(space) = space {
        if n_solutions as u64 > space {
            return Err(LabError::Infeasible(format!(
                "{n_solutions} solutions requested but only {space} sequences of length {seq_len} exist"
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut accepted = BTreeMap::new();
    let mut demos = BTreeMap::new();
    for p in 0..n_prompts {
        let solutions = match space {
            // small spaces: enumerate and shuffle so that n_solutions == space terminates
            Some(space) if space <= 1 << 16 => {
                let mut all: Vec<u64> = (0..space).collect();
                let (chosen, _) = all.partial_shuffle(&mut rng, n_solutions);
                chosen
                    .iter()
                    .map(|&code| decode_sequence(code, vocab_size, seq_len))
                    .collect::<Vec<_>>()
            }
            _ => {
                let mut out: Vec<Vec<Token>> = Vec::with_capacity(n_solutions);
                while out.len() < n_solutions {
                    let seq: Vec<Token> = (0..seq_len).map(|_| rng.random_range(0..vocab_size)).collect();
                    if !out.contains(&seq) {
                        out.push(seq);
                    }
                }
                out
            }
        };
        demos.insert(p, solutions[0].clone());
        accepted.insert(p, solutions.into_iter().collect::<BTreeSet<_>>());
    }

    let task = TaskSpec {
        schema_version: TASK_SCHEMA_VERSION,
        name: format!("lock-v{vocab_size}-l{seq_len}-s{n_solutions}"),
        vocab_size,
        prompts: (0..n_prompts).collect(),
        max_len: seq_len,
        eos: None,
        accepted,
        teacher_demos: demos,
        teacher_mode: TeacherMode::Verified,
    };
    task.validate()?;
    Ok(task)
}

fn decode_sequence(mut code: u64, vocab_size: u32, len: usize) -> Vec<Token> {
    let mut seq = vec![0; len];
    for slot in seq.iter_mut().rev() {
        *slot = (code % u64::from(vocab_size)) as Token;
        code /= u64::from(vocab_size);
    }
    seq
}

/// Variable-length digit-sum task with an end-of-sequence token.
///
/// Digits are tokens `0..n_digits`, EOS is token `n_digits`. Prompt `p`
/// accepts every digit string of length `1..max_len` whose digits sum to the
/// prompt's target, followed by EOS. The teacher shows the shortest
/// (largest-digit-first) solution, so generation length is a real degree of
/// freedom for the learner.
pub fn make_chain_task(n_digits: u32, n_prompts: u32, max_len: usize, seed: u64) -> Result<TaskSpec> {
    if n_digits < 2 || max_len < 2 || n_prompts == 0 {
        return Err(LabError::Config(
            "chain task needs n_digits >= 2, max_len >= 2 and n_prompts >= 1".into(),
        ));
    }
    let body_max = max_len - 1;
    let space = u64::from(n_digits).checked_pow(body_max as u32);
    if space.is_none_or(|s| s > 1 << 20) {
        return Err(LabError::Infeasible(format!(
            "chain task with {n_digits} digits and max_len {max_len} is too large to enumerate"
        )));
    }
    let eos = n_digits;
    let top = n_digits - 1;
    let max_target = body_max as u32 * top;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut accepted = BTreeMap::new();
    let mut demos = BTreeMap::new();
    for p in 0..n_prompts {
        let target = rng.random_range(1..=max_target);
        let mut solutions = BTreeSet::new();
        let mut prefix = Vec::with_capacity(max_len);
        enumerate_sums(n_digits, body_max, target, &mut prefix, &mut solutions, eos);

        let mut demo = Vec::new();
        let mut remaining = target;
        while remaining > 0 {
            let d = remaining.min(top);
            demo.push(d);
            remaining -= d;
        }
        demo.push(eos);
        debug_assert!(solutions.contains(&demo));
        demos.insert(p, demo);
        accepted.insert(p, solutions);
    }
    let task = TaskSpec {
        schema_version: TASK_SCHEMA_VERSION,
        name: format!("chain-d{n_digits}-l{max_len}"),
        vocab_size: n_digits + 1,
        prompts: (0..n_prompts).collect(),
        max_len,
        eos: Some(eos),
        accepted,
        teacher_demos: demos,
        teacher_mode: TeacherMode::Verified,
    };
    task.validate()?;
    Ok(task)
}

fn enumerate_sums(
    n_digits: u32,
    body_max: usize,
    target: u32,
    prefix: &mut Vec<Token>,
    out: &mut BTreeSet<Vec<Token>>,
    eos: Token,
) {
    let sum: u32 = prefix.iter().sum();
    if !prefix.is_empty() && sum == target {
        let mut seq = prefix.clone();
        seq.push(eos);
        out.insert(seq);
    }
    if prefix.len() == body_max {
        return;
    }
    for d in 0..n_digits {
        if sum + d > target {
            break;
        }
        prefix.push(d);
        enumerate_sums(n_digits, body_max, target, prefix, out, eos);
        prefix.pop();
    }
}
