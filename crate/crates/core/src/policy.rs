//! Tabular autoregressive softmax policy.
//!
//! The next-token distribution is a softmax over a row of logits selected by
//! a [`ContextKey`]: the prompt, the position, and the last `k` generated
//! tokens. Rows are created lazily at zero, so a fresh table is the uniform
//! policy.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{verify, PromptId, TaskSpec, Token, Trajectory};
use crate::error::{LabError, Result};

const POLICY_HEADER: &str = "# hapo-lab policy v1";

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ContextKey {
    pub prompt: PromptId,
    pub position: u32,
    /// Last `min(k, position)` generated tokens.
    pub suffix: Vec<Token>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    vocab_size: u32,
    context_order: usize,
    logits: BTreeMap<ContextKey, Vec<f64>>,
}

/// Sparse gradient over logit rows. Missing rows are zero.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradient {
    entries: BTreeMap<ContextKey, Vec<f64>>,
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&x| (x - max).exp()).sum();
    let lse = max + sum.ln();
    row.iter().map(|&x| x - lse).collect()
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

impl PolicyParams {
    pub fn new(vocab_size: u32, context_order: usize) -> Self {
        Self {
            vocab_size,
            context_order,
            logits: BTreeMap::new(),
        }
    }

    /// Uniform policy for `task`. `context_order = None` conditions on the
    /// whole generated prefix.
    pub fn for_task(task: &TaskSpec, context_order: Option<usize>) -> Self {
        Self::new(task.vocab_size, context_order.unwrap_or(task.max_len))
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    pub fn context_order(&self) -> usize {
        self.context_order
    }

    pub fn context(&self, prompt: PromptId, prefix: &[Token]) -> ContextKey {
        let keep = self.context_order.min(prefix.len());
        ContextKey {
            prompt,
            position: prefix.len() as u32,
            suffix: prefix[prefix.len() - keep..].to_vec(),
        }
    }

    /// Touched rows in key order.
    pub fn rows(&self) -> impl Iterator<Item = (&ContextKey, &[f64])> {
        self.logits.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn num_rows(&self) -> usize {
        self.logits.len()
    }

    pub fn row(&self, ctx: &ContextKey) -> Vec<f64> {
        self.logits
            .get(ctx)
            .cloned()
            .unwrap_or_else(|| vec![0.0; self.vocab_size as usize])
    }

    pub fn row_mut(&mut self, ctx: &ContextKey) -> &mut Vec<f64> {
        let v = self.vocab_size as usize;
        self.logits.entry(ctx.clone()).or_insert_with(|| vec![0.0; v])
    }

    pub fn set_row(&mut self, ctx: ContextKey, row: Vec<f64>) -> Result<()> {
        if row.len() != self.vocab_size as usize {
            return Err(LabError::Input(format!(
                "logit row has {} entries, vocabulary has {}",
                row.len(),
                self.vocab_size
            )));
        }
        self.logits.insert(ctx, row);
        Ok(())
    }

    pub fn log_probs(&self, ctx: &ContextKey) -> Vec<f64> {
        match self.logits.get(ctx) {
            Some(row) => log_softmax(row),
            None => vec![-(f64::from(self.vocab_size)).ln(); self.vocab_size as usize],
        }
    }

    pub fn probs(&self, ctx: &ContextKey) -> Vec<f64> {
        match self.logits.get(ctx) {
            Some(row) => softmax(row),
            None => vec![1.0 / f64::from(self.vocab_size); self.vocab_size as usize],
        }
    }

    pub fn logp(&self, ctx: &ContextKey, token: Token) -> f64 {
        debug_assert!(token < self.vocab_size);
        self.log_probs(ctx)[token as usize]
    }

    /// d logp(ctx, token) / d logits[ctx, v] = 1{v = token} - softmax[v].
    pub fn grad_logp(&self, ctx: &ContextKey, token: Token) -> Gradient {
        let mut g = Gradient::default();
        self.accumulate_grad_logp(&mut g, ctx, token, 1.0);
        g
    }

    /// Adds `scale * grad_logp(ctx, token)` into `grad`.
    pub fn accumulate_grad_logp(&self, grad: &mut Gradient, ctx: &ContextKey, token: Token, scale: f64) {
        if scale == 0.0 {
            return;
        }
        let probs = self.probs(ctx);
        let row = grad.row_mut(ctx, self.vocab_size as usize);
        for (v, (slot, p)) in row.iter_mut().zip(probs).enumerate() {
            let indicator = if v == token as usize { 1.0 } else { 0.0 };
            *slot += scale * (indicator - p);
        }
    }

    /// Per-token log-probabilities of `tokens` under this policy.
    pub fn token_logps(&self, prompt: PromptId, tokens: &[Token]) -> Vec<f64> {
        (0..tokens.len())
            .map(|t| self.logp(&self.context(prompt, &tokens[..t]), tokens[t]))
            .collect()
    }

    pub fn sequence_logp(&self, prompt: PromptId, tokens: &[Token]) -> f64 {
        self.token_logps(prompt, tokens).iter().sum()
    }

    /// Gradient ascent step: `logits += step_size * grad`.
    pub fn apply(&mut self, grad: &Gradient, step_size: f64) {
        for (ctx, g) in &grad.entries {
            let row = self.row_mut(ctx);
            for (x, d) in row.iter_mut().zip(g) {
                *x += step_size * d;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.logits.values().all(|r| r.iter().all(|x| x.is_finite()))
    }

    /// Flat text table, one `(context, token, logit)` per line. Floats are
    /// written in shortest round-trip form so a reload is bit-exact.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{POLICY_HEADER}");
        let _ = writeln!(out, "# vocab_size={} context_order={}", self.vocab_size, self.context_order);
        let _ = writeln!(out, "prompt\tposition\tsuffix\ttoken\tlogit");
        for (ctx, row) in &self.logits {
            let suffix = if ctx.suffix.is_empty() {
                "-".to_string()
            } else {
                ctx.suffix.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(".")
            };
            for (tok, logit) in row.iter().enumerate() {
                let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}", ctx.prompt, ctx.position, suffix, tok, logit);
            }
        }
        out
    }

    pub fn from_table(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| LabError::Serde(format!("policy table line {line}: {msg}"));
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == POLICY_HEADER => {}
            _ => return Err(bad(1, "missing policy header")),
        }
        let (_, meta) = lines.next().ok_or_else(|| bad(2, "missing metadata"))?;
        let mut vocab = None;
        let mut order = None;
        for kv in meta.trim_start_matches('#').split_whitespace() {
            match kv.split_once('=') {
                Some(("vocab_size", v)) => vocab = v.parse::<u32>().ok(),
                Some(("context_order", v)) => order = v.parse::<usize>().ok(),
                _ => {}
            }
        }
        let (vocab, order) = vocab.zip(order).ok_or_else(|| bad(2, "bad metadata"))?;
        lines.next();
        let mut params = PolicyParams::new(vocab, order);
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(bad(i + 1, "expected 5 fields"));
            }
            let num = |s: &str| s.parse::<u32>().map_err(|_| bad(i + 1, "bad integer"));
            let suffix = if f[2] == "-" {
                Vec::new()
            } else {
                f[2].split('.').map(num).collect::<Result<Vec<_>>>()?
            };
            let ctx = ContextKey {
                prompt: num(f[0])?,
                position: num(f[1])?,
                suffix,
            };
            let tok = num(f[3])? as usize;
            if tok >= vocab as usize {
                return Err(bad(i + 1, "token outside vocabulary"));
            }
            let logit: f64 = f[4].parse().map_err(|_| bad(i + 1, "bad logit"))?;
            params.row_mut(&ctx)[tok] = logit;
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_table())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_table(&std::fs::read_to_string(path)?)
    }
}

impl Gradient {
    pub fn row_mut(&mut self, ctx: &ContextKey, vocab: usize) -> &mut Vec<f64> {
        if !self.entries.contains_key(ctx) {
            self.entries.insert(ctx.clone(), vec![0.0; vocab]);
        }
        self.entries.get_mut(ctx).expect("row inserted above")
    }

    pub fn get(&self, ctx: &ContextKey) -> Option<&[f64]> {
        self.entries.get(ctx).map(Vec::as_slice)
    }

    pub fn rows(&self) -> impl Iterator<Item = (&ContextKey, &[f64])> {
        self.entries.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn is_zero(&self) -> bool {
        self.entries.values().all(|r| r.iter().all(|&x| x == 0.0))
    }

    pub fn add_scaled(&mut self, other: &Gradient, scale: f64) {
        for (ctx, g) in &other.entries {
            let row = self.row_mut(ctx, g.len());
            for (x, d) in row.iter_mut().zip(g) {
                *x += scale * d;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for row in self.entries.values_mut() {
            for x in row.iter_mut() {
                *x *= s;
            }
        }
    }

    pub fn dot(&self, other: &Gradient) -> f64 {
        self.entries
            .iter()
            .filter_map(|(ctx, a)| other.entries.get(ctx).map(|b| (a, b)))
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>())
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Cosine similarity; two zero gradients count as identical.
    pub fn cosine(&self, other: &Gradient) -> f64 {
        let (na, nb) = (self.norm(), other.norm());
        match (na == 0.0, nb == 0.0) {
            (true, true) => 1.0,
            (true, false) | (false, true) => 0.0,
            _ => self.dot(other) / (na * nb),
        }
    }

    pub fn max_abs_diff(&self, other: &Gradient) -> f64 {
        let mut diff = self.clone();
        diff.add_scaled(other, -1.0);
        diff.entries
            .values()
            .flat_map(|r| r.iter())
            .fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Context keys holding non-finite entries.
    pub fn non_finite_rows(&self) -> Vec<ContextKey> {
        self.entries
            .iter()
            .filter(|(_, r)| r.iter().any(|x| !x.is_finite()))
            .map(|(k, _)| k.clone())
            .collect()
    }
}

fn draw_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the cumulative total; take the last positive entry
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Samples one rollout from the policy and scores it with the verifier.
pub fn sample_trajectory<R: Rng + ?Sized>(
    params: &PolicyParams,
    task: &TaskSpec,
    prompt: PromptId,
    rng: &mut R,
) -> Result<Trajectory> {
    sample_with_temperature(params, task, prompt, 1.0, rng)
}

/// Sampling from `softmax(logits / temperature)`; `temperature == 0` decodes
/// greedily (lowest index wins ties). `behavior_logps` are log-probabilities
/// of the distribution actually sampled from.
pub fn sample_with_temperature<R: Rng + ?Sized>(
    params: &PolicyParams,
    task: &TaskSpec,
    prompt: PromptId,
    temperature: f64,
    rng: &mut R,
) -> Result<Trajectory> {
    if !task.contains_prompt(prompt) {
        return Err(LabError::UnknownPrompt(prompt));
    }
    if !(temperature >= 0.0 && temperature.is_finite()) {
        return Err(LabError::Input(format!("invalid temperature {temperature}")));
    }
    let mut tokens = Vec::with_capacity(task.max_len);
    let mut logps = Vec::with_capacity(task.max_len);
    while tokens.len() < task.max_len {
        let ctx = params.context(prompt, &tokens);
        let (tok, lp) = if temperature == 0.0 {
            (argmax(&params.row(&ctx)), 0.0)
        } else if temperature == 1.0 {
            let tok = draw_categorical(&params.probs(&ctx), rng);
            (tok, params.logp(&ctx, tok as Token))
        } else {
            let scaled: Vec<f64> = params.row(&ctx).iter().map(|x| x / temperature).collect();
            let lps = log_softmax(&scaled);
            let tok = draw_categorical(&softmax(&scaled), rng);
            (tok, lps[tok])
        };
        tokens.push(tok as Token);
        logps.push(lp);
        if task.eos == Some(tok as Token) {
            break;
        }
    }
    let reward = verify(task, prompt, &tokens)?;
    Ok(Trajectory {
        prompt,
        tokens,
        behavior_logps: logps,
        reward,
        is_teacher: false,
    })
}
