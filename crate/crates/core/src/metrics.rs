//! Per-step metrics, log files, bound checks and curve export.
//!
//! Files written for a run directory:
//!
//! * `metrics.csv`: one row per step, versioned comment header, append-only.
//! * `gates.csv`: one row per group per step with the gate decision.
//! * `trajectories.jsonl`: optional full dump, one group per line.
//! * `curve_*.tsv` and `curves_summary.json`: training-dynamics panels.

use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::gating::{confidence, success_threshold, GateDecision};
use crate::grpo::Group;

pub const METRICS_HEADER: &str = "# hapo-lab metrics v1";
pub const GATES_HEADER: &str = "# hapo-lab gates v1";

const METRICS_COLUMNS: &[&str] = &[
    "step",
    "mean_reward",
    "mean_gen_length",
    "teacher_injection_count",
    "n_groups",
    "intervention_rate",
    "mean_confidence",
    "threshold",
    "grad_norm",
    "objective",
    "surrogate_value",
    "teacher_value",
    "teacher_token_share",
    "mean_abs_advantage",
    "learning_rate",
    "grpo_cosine",
];

/// Aggregates for one training step. Reward and length are averaged over
/// policy samples only; teacher demos never enter them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub mean_reward: f64,
    pub mean_gen_length: f64,
    pub teacher_injection_count: usize,
    pub n_groups: usize,
    /// Injected groups over groups.
    pub intervention_rate: f64,
    pub mean_confidence: f64,
    pub threshold: f64,
    pub grad_norm: f64,
    pub objective: f64,
    pub surrogate_value: f64,
    pub teacher_value: f64,
    pub teacher_token_share: f64,
    pub mean_abs_advantage: f64,
    pub learning_rate: f64,
    /// Cosine between the batch gradient and the pure on-policy gradient of
    /// the same batch with injections undone. `None` on SFT steps.
    pub grpo_cosine: Option<f64>,
}

impl StepMetrics {
    pub fn to_csv_row(&self) -> String {
        let cos = self.grpo_cosine.map(|c| c.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.mean_reward,
            self.mean_gen_length,
            self.teacher_injection_count,
            self.n_groups,
            self.intervention_rate,
            self.mean_confidence,
            self.threshold,
            self.grad_norm,
            self.objective,
            self.surrogate_value,
            self.teacher_value,
            self.teacher_token_share,
            self.mean_abs_advantage,
            self.learning_rate,
            cos
        )
    }

    pub fn from_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != METRICS_COLUMNS.len() {
            return Err(LabError::Serde(format!("metrics row has {} fields", f.len())));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse::<f64>()
                .map_err(|_| LabError::Serde(format!("bad {} value {:?}", METRICS_COLUMNS[i], f[i])))
        };
        let int = |i: usize| -> Result<u64> {
            f[i].parse::<u64>()
                .map_err(|_| LabError::Serde(format!("bad {} value {:?}", METRICS_COLUMNS[i], f[i])))
        };
        Ok(StepMetrics {
            step: int(0)?,
            mean_reward: num(1)?,
            mean_gen_length: num(2)?,
            teacher_injection_count: int(3)? as usize,
            n_groups: int(4)? as usize,
            intervention_rate: num(5)?,
            mean_confidence: num(6)?,
            threshold: num(7)?,
            grad_norm: num(8)?,
            objective: num(9)?,
            surrogate_value: num(10)?,
            teacher_value: num(11)?,
            teacher_token_share: num(12)?,
            mean_abs_advantage: num(13)?,
            learning_rate: num(14)?,
            grpo_cosine: if f[15].is_empty() { None } else { Some(num(15)?) },
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub label: String,
    pub seed: u64,
    pub steps: Vec<StepMetrics>,
}

impl RunMetrics {
    pub fn max_grad_norm(&self) -> f64 {
        self.steps.iter().map(|s| s.grad_norm).fold(0.0, f64::max)
    }

    pub fn injection_series(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.teacher_injection_count as f64).collect()
    }

    pub fn reward_series(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.mean_reward).collect()
    }

    /// First step at which the trailing `window`-step mean reward reaches `level`.
    pub fn first_step_reaching(&self, level: f64, window: usize) -> Option<u64> {
        let r = self.reward_series();
        if window == 0 || r.len() < window {
            return None;
        }
        let mut sum: f64 = r[..window].iter().sum();
        if sum / window as f64 >= level {
            return Some(self.steps[window - 1].step);
        }
        for i in window..r.len() {
            sum += r[i] - r[i - window];
            if sum / window as f64 >= level {
                return Some(self.steps[i].step);
            }
        }
        None
    }

    /// Largest trailing `window`-step mean reward over the run.
    pub fn max_window_reward(&self, window: usize) -> f64 {
        let r = self.reward_series();
        if r.is_empty() {
            return 0.0;
        }
        let w = window.clamp(1, r.len());
        r.windows(w).map(|x| x.iter().sum::<f64>() / w as f64).fold(0.0, f64::max)
    }

    pub fn mean_over(&self, range: std::ops::Range<usize>, f: impl Fn(&StepMetrics) -> f64) -> f64 {
        let s = &self.steps[range];
        if s.is_empty() {
            return 0.0;
        }
        s.iter().map(f).sum::<f64>() / s.len() as f64
    }

    /// Mean injection count in the first and last quarter of the run.
    pub fn injection_quartiles(&self) -> (f64, f64) {
        let n = self.steps.len();
        let q = (n / 4).max(1).min(n);
        let inj = |s: &StepMetrics| s.teacher_injection_count as f64;
        (self.mean_over(0..q, inj), self.mean_over(n - q..n, inj))
    }
}

fn open_with_header(path: &Path, header: &str, columns: &str) -> Result<BufWriter<File>> {
    let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = BufWriter::new(file);
    if fresh {
        writeln!(w, "{header}")?;
        writeln!(w, "{columns}")?;
    }
    Ok(w)
}

/// Single-writer sink for one run directory.
pub struct RunLogger {
    metrics: BufWriter<File>,
    gates: BufWriter<File>,
    trajectories: Option<BufWriter<File>>,
}

impl RunLogger {
    pub fn open(dir: &Path, log_trajectories: bool) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let metrics = open_with_header(&dir.join("metrics.csv"), METRICS_HEADER, &METRICS_COLUMNS.join(","))?;
        let gates = open_with_header(
            &dir.join("gates.csv"),
            GATES_HEADER,
            "step,group_id,prompt,success_count,group_size,confidence,threshold,opened,replaced_index",
        )?;
        let trajectories = if log_trajectories {
            let f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join("trajectories.jsonl"))?;
            Some(BufWriter::new(f))
        } else {
            None
        };
        Ok(Self {
            metrics,
            gates,
            trajectories,
        })
    }

    pub fn record(&mut self, m: &StepMetrics, decisions: &[GateDecision], groups: &[Group]) -> Result<()> {
        writeln!(self.metrics, "{}", m.to_csv_row())?;
        for d in decisions {
            writeln!(
                self.gates,
                "{},{},{},{},{},{},{},{},{}",
                m.step,
                d.group_id,
                d.prompt,
                d.success_count,
                d.group_size,
                d.confidence,
                d.threshold,
                d.opened,
                d.replaced_index.map(|i| i.to_string()).unwrap_or_default()
            )?;
        }
        if let Some(w) = self.trajectories.as_mut() {
            for g in groups {
                let line = serde_json::to_string(&TrajectoryRecord {
                    step: m.step,
                    group: g.clone(),
                })?;
                writeln!(w, "{line}")?;
            }
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.metrics.flush()?;
        self.gates.flush()?;
        if let Some(w) = self.trajectories.as_mut() {
            w.flush()?;
        }
        Ok(())
    }
}

/// One line of `trajectories.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub step: u64,
    pub group: Group,
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<StepMetrics>> {
    let reader = BufReader::new(File::open(path)?);
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        match i {
            0 if line != METRICS_HEADER => {
                return Err(LabError::Serde(format!("unexpected metrics header {line:?}")));
            }
            0 | 1 => {}
            _ if line.is_empty() => {}
            _ => rows.push(StepMetrics::from_csv_row(&line)?),
        }
    }
    Ok(rows)
}

/// Drops every log row at or after `step`, used before resuming from a
/// checkpoint taken at `step`.
pub fn truncate_logs(dir: &Path, step: u64) -> Result<()> {
    let keep_csv = |path: PathBuf| -> Result<()> {
        if !path.exists() {
            return Ok(());
        }
        let text = std::fs::read_to_string(&path)?;
        let mut out = String::new();
        for (i, line) in text.lines().enumerate() {
            let keep = i < 2
                || line
                    .split(',')
                    .next()
                    .and_then(|s| s.parse::<u64>().ok())
                    .is_some_and(|s| s < step);
            if keep {
                out.push_str(line);
                out.push('\n');
            }
        }
        std::fs::write(&path, out)?;
        Ok(())
    };
    keep_csv(dir.join("metrics.csv"))?;
    keep_csv(dir.join("gates.csv"))?;
    let traj = dir.join("trajectories.jsonl");
    if traj.exists() {
        let text = std::fs::read_to_string(&traj)?;
        let mut out = String::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let rec: TrajectoryRecord = serde_json::from_str(line)?;
            if rec.step < step {
                out.push_str(line);
                out.push('\n');
            }
        }
        std::fs::write(&traj, out)?;
    }
    Ok(())
}

/// Step aggregates recomputed from a trajectory dump:
/// `(step, mean_reward, mean_gen_length, teacher_injection_count)`.
pub fn recompute_from_dump(path: &Path) -> Result<Vec<(u64, f64, f64, usize)>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out: Vec<(u64, f64, f64, usize, usize)> = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let rec: TrajectoryRecord = serde_json::from_str(&line)?;
        if out.last().map(|r| r.0) != Some(rec.step) {
            out.push((rec.step, 0.0, 0.0, 0, 0));
        }
        let slot = out.last_mut().expect("pushed above");
        let sampled = rec.group.without_injection();
        for t in &sampled.trajectories {
            slot.1 += t.reward_f64();
            slot.2 += t.len() as f64;
            slot.4 += 1;
        }
        slot.3 += usize::from(rec.group.injected);
    }
    Ok(out
        .into_iter()
        .map(|(s, r, l, inj, n)| (s, r / n as f64, l / n as f64, inj))
        .collect())
}

/// Outcome of comparing gate-open frequencies with the concentration bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub group_size: usize,
    pub mu: f64,
    pub gamma: f64,
    /// Gate opens iff `S < k_gamma`.
    pub k_gamma: f64,
    pub n_groups: usize,
    pub gate_open_count: usize,
    pub empirical_frequency: f64,
    /// Binomial standard error of the frequency at the bound value.
    pub standard_error: f64,
    /// 95% Wilson interval for the true gate-open probability.
    pub ci_low: f64,
    pub ci_high: f64,
    pub hoeffding_bound: f64,
    /// Exact `P(S < k_gamma)` for `S ~ Binomial(N, mu)`.
    pub exact_tail: f64,
    /// False when even `S = N` keeps the gate open.
    pub gate_can_close: bool,
    pub empirical_within_bound: bool,
    pub exact_within_bound: bool,
    pub passed: bool,
}

/// Exact `P(S < k)` for `S ~ Binomial(n, p)`.
pub fn binomial_tail_below(n: usize, p: f64, k: f64) -> f64 {
    let mut total = 0.0;
    let mut log_choose = 0.0f64;
    for s in 0..=n {
        if s > 0 {
            log_choose += ((n - s + 1) as f64).ln() - (s as f64).ln();
        }
        if (s as f64) < k {
            let lp = log_choose + pow_log(p, s) + pow_log(1.0 - p, n - s);
            total += lp.exp();
        }
    }
    total.min(1.0)
}

fn pow_log(base: f64, exp: usize) -> f64 {
    if exp == 0 {
        0.0
    } else {
        exp as f64 * base.ln()
    }
}

pub fn hoeffding_bound(n: usize, mu: f64, gamma: f64) -> f64 {
    (-2.0 * n as f64 * (mu - gamma).powi(2)).exp()
}

fn wilson(k: usize, n: usize) -> (f64, f64) {
    let z = 1.959_963_984_540_054;
    let nf = n as f64;
    let p = k as f64 / nf;
    let denom = 1.0 + z * z / nf;
    let centre = (p + z * z / (2.0 * nf)) / denom;
    let half = z * ((p * (1.0 - p) / nf) + z * z / (4.0 * nf * nf)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// Compares how often the gate opened on `samples` (pairs `(S, N)`, one
/// group size) with the concentration bound and the exact binomial tail.
pub fn check_hoeffding(samples: &[(usize, usize)], mu_hat: f64, gamma: f64) -> Result<BoundReport> {
    check_hoeffding_with(samples, mu_hat, gamma, &confidence)
}

/// [`check_hoeffding`] with the confidence function supplied by the caller.
pub fn check_hoeffding_with(
    samples: &[(usize, usize)],
    mu_hat: f64,
    gamma: f64,
    conf: &dyn Fn(usize, usize) -> Result<f64>,
) -> Result<BoundReport> {
    if !(mu_hat > gamma) {
        return Err(LabError::Regime(format!(
            "success rate {mu_hat} does not exceed threshold {gamma}"
        )));
    }
    let n = samples
        .first()
        .map(|s| s.1)
        .ok_or_else(|| LabError::Input("no samples".into()))?;
    if samples.iter().any(|s| s.1 != n) {
        return Err(LabError::Input("samples mix group sizes".into()));
    }
    let mut opened = 0usize;
    for &(s, size) in samples {
        if conf(s, size)? < gamma {
            opened += 1;
        }
    }
    let m = samples.len();
    let freq = opened as f64 / m as f64;
    let bound = hoeffding_bound(n, mu_hat, gamma);
    let se = (bound * (1.0 - bound) / m as f64).sqrt();
    let k = success_threshold(gamma, n);
    let exact = binomial_tail_below(n, mu_hat.min(1.0), k);
    let (ci_low, ci_high) = wilson(opened, m);
    let empirical_ok = freq <= bound + 3.0 * se;
    let exact_ok = exact <= bound;
    Ok(BoundReport {
        group_size: n,
        mu: mu_hat,
        gamma,
        k_gamma: k,
        n_groups: m,
        gate_open_count: opened,
        empirical_frequency: freq,
        standard_error: se,
        ci_low,
        ci_high,
        hoeffding_bound: bound,
        exact_tail: exact,
        gate_can_close: conf(n, n)? >= gamma,
        empirical_within_bound: empirical_ok,
        exact_within_bound: exact_ok,
        passed: empirical_ok && exact_ok,
    })
}

/// Two-sided exact sign test: probability under a fair coin of a split at
/// least as lopsided as `wins` out of `n`.
pub fn sign_test_p(wins: usize, n: usize) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let extreme = wins.max(n - wins);
    // P(X >= extreme) for X ~ Binomial(n, 1/2)
    let upper = 1.0 - binomial_tail_below(n, 0.5, extreme as f64);
    (2.0 * upper).min(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub window: usize,
    /// Injected groups over groups in the window.
    pub injection_rate: f64,
    pub mean_injection_count: f64,
    pub injection_free_steps: usize,
    pub mean_cosine: f64,
    pub min_cosine: f64,
}

/// Late-training check that the batch gradient has become the on-policy one.
pub fn consistency_probe(run: &RunMetrics, window: usize) -> Result<ConsistencyReport> {
    let n = run.steps.len();
    if window == 0 || window > n {
        return Err(LabError::Input(format!("window {window} does not fit a run of {n} steps")));
    }
    let tail = &run.steps[n - window..];
    let groups: usize = tail.iter().map(|s| s.n_groups).sum();
    let injected: usize = tail.iter().map(|s| s.teacher_injection_count).sum();
    let cos: Vec<f64> = tail.iter().filter_map(|s| s.grpo_cosine).collect();
    if cos.is_empty() {
        return Err(LabError::Input("window holds no on-policy steps".into()));
    }
    Ok(ConsistencyReport {
        window,
        injection_rate: if groups == 0 { 0.0 } else { injected as f64 / groups as f64 },
        mean_injection_count: injected as f64 / window as f64,
        injection_free_steps: tail.iter().filter(|s| s.teacher_injection_count == 0).count(),
        mean_cosine: cos.iter().sum::<f64>() / cos.len() as f64,
        min_cosine: cos.iter().copied().fold(f64::INFINITY, f64::min),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelSummary {
    pub name: String,
    pub points: usize,
    pub first: f64,
    pub last: f64,
    pub min: f64,
    pub max: f64,
    pub first_quartile_mean: f64,
    pub last_quartile_mean: f64,
}

fn panel(name: &str, xs: &[f64]) -> PanelSummary {
    let n = xs.len();
    let q = (n / 4).max(1).min(n.max(1));
    let mean = |s: &[f64]| if s.is_empty() { 0.0 } else { s.iter().sum::<f64>() / s.len() as f64 };
    PanelSummary {
        name: name.into(),
        points: n,
        first: xs.first().copied().unwrap_or(0.0),
        last: xs.last().copied().unwrap_or(0.0),
        min: xs.iter().copied().fold(f64::INFINITY, f64::min),
        max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        first_quartile_mean: mean(&xs[..q.min(n)]),
        last_quartile_mean: mean(&xs[n.saturating_sub(q)..]),
    }
}

/// Writes reward, length and teacher-count panels plus a combined table and
/// a JSON summary into `dir`. Returns the paths written.
pub fn export_curves(run: &RunMetrics, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    for w in run.steps.windows(2) {
        if w[1].step != w[0].step + 1 {
            return Err(LabError::Input(format!("gap in step index after step {}", w[0].step)));
        }
    }
    let mut written = Vec::new();
    let mut combined = String::from("step\tmean_reward\tmean_gen_length\tteacher_injection_count\n");
    for s in &run.steps {
        let _ = writeln!(
            combined,
            "{}\t{}\t{}\t{}",
            s.step, s.mean_reward, s.mean_gen_length, s.teacher_injection_count
        );
    }
    let path = dir.join("curves.tsv");
    std::fs::write(&path, combined)?;
    written.push(path);

    let panels: [(&str, Box<dyn Fn(&StepMetrics) -> String>); 3] = [
        ("reward", Box::new(|s| s.mean_reward.to_string())),
        ("length", Box::new(|s| s.mean_gen_length.to_string())),
        ("teacher", Box::new(|s| s.teacher_injection_count.to_string())),
    ];
    for (name, value) in &panels {
        let mut text = format!("step\t{name}\n");
        for s in &run.steps {
            let _ = writeln!(text, "{}\t{}", s.step, value(s));
        }
        let path = dir.join(format!("curve_{name}.tsv"));
        std::fs::write(&path, text)?;
        written.push(path);
    }

    let summary = vec![
        panel("reward", &run.reward_series()),
        panel(
            "length",
            &run.steps.iter().map(|s| s.mean_gen_length).collect::<Vec<_>>(),
        ),
        panel("teacher", &run.injection_series()),
    ];
    let path = dir.join("curves_summary.json");
    std::fs::write(&path, serde_json::to_string_pretty(&summary)?)?;
    written.push(path);
    Ok(written)
}
