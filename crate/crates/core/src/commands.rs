//! Command-line front end: `train`, `compare`, `check-bounds`, `gradcheck`
//! and `eval`.
//!
//! Exit codes: 0 success, 1 I/O or internal error, 2 configuration error,
//! 3 failed assertion (a check suite or a comparison cell), 4 numeric abort.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::Method;
use crate::config::{ExperimentConfig, NamedMethod};
use crate::env::TaskSpec;
use crate::error::{LabError, Result};
use crate::gradcheck::run_gradcheck;
use crate::metrics::{consistency_probe, export_curves, sign_test_p, RunMetrics};
use crate::suites::{
    default_confidence, enumerate_gate_algebra, hoeffding_grid, off_by_one_confidence, percent_gammas, ConfidenceFn,
    EnumerationReport, GridReport,
};
use crate::trainer::{evaluate, load_checkpoint, non_teacher_probability, run, RunOptions, RunResult};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_ASSERTION: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

pub fn exit_code(e: &LabError) -> i32 {
    match e {
        LabError::Config(_)
        | LabError::Input(_)
        | LabError::UnknownPrompt(_)
        | LabError::Infeasible(_)
        | LabError::Regime(_) => EXIT_CONFIG,
        LabError::NonFinite { .. } => EXIT_NUMERIC,
        LabError::Io(_) | LabError::Serde(_) | LabError::State(_) => EXIT_IO,
    }
}

#[derive(Debug, Parser)]
#[command(name = "hapo-lab", version, about = "Confidence-gated teacher injection lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set train.seed=7`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one method and write metrics, checkpoints and curves.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from the run directory's checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Run every method for every seed and summarize.
    Compare {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Gate/threshold enumeration and the concentration-bound grid.
    CheckBounds {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Swap in a confidence function with an off-by-one error.
        #[arg(long)]
        mutate_confidence: bool,
    },
    /// Finite-difference audit of the analytic gradients.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a saved checkpoint.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint directory; defaults to `<output_dir>/checkpoint`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

/// Parses `args` (program name first) and runs the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match dispatch(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: &Command) -> Result<i32> {
    match cmd {
        Command::Train { cfg, resume } => cmd_train(cfg, *resume),
        Command::Compare { cfg } => cmd_compare(cfg),
        Command::CheckBounds { cfg, mutate_confidence } => cmd_check_bounds(cfg, *mutate_confidence),
        Command::Gradcheck { cfg } => cmd_gradcheck(cfg),
        Command::Eval { cfg, checkpoint } => cmd_eval(cfg, checkpoint.as_deref()),
    }
}

/// Loads the config and builds its task; both fail before any compute.
pub fn load_experiment(args: &ConfigArgs) -> Result<(ExperimentConfig, TaskSpec)> {
    let (mut cfg, base) = match &args.config {
        Some(p) => (
            ExperimentConfig::load(p, &args.overrides)?,
            p.parent().map(Path::to_path_buf).unwrap_or_default(),
        ),
        None => (ExperimentConfig::from_toml_str("", &args.overrides)?, PathBuf::from(".")),
    };
    let task = cfg.task.build(&base)?;
    cfg.resolve(&task);
    Ok((cfg, task))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AbortReport {
    step: u64,
    detail: String,
    last_checkpoint: Option<PathBuf>,
}

/// Runs one method into `dir`, writing the resolved config, the task, curves
/// and an evaluation. A numeric abort leaves `abort.json` behind.
pub fn train_into(
    cfg: &ExperimentConfig,
    task: &TaskSpec,
    method: &Method,
    dir: &Path,
    resume: bool,
) -> Result<RunResult> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.resolved.toml"), cfg.to_toml()?)?;
    task.save(&dir.join("task.json"))?;
    let opts = RunOptions {
        out_dir: Some(dir.to_path_buf()),
        checkpoint_every: Some(cfg.run.checkpoint_every),
        resume,
        stop_at: None,
    };
    let result = match run(method, task, &cfg.train, &opts) {
        Ok(r) => r,
        Err(LabError::NonFinite { step, detail }) => {
            let ckpt = dir.join("checkpoint");
            write_json(
                &dir.join("abort.json"),
                &AbortReport {
                    step,
                    detail: detail.clone(),
                    last_checkpoint: ckpt.join("state.json").exists().then_some(ckpt),
                },
            )?;
            return Err(LabError::NonFinite { step, detail });
        }
        Err(e) => return Err(e),
    };
    export_curves(&result.metrics, &dir.join("curves"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval.seed);
    let report = evaluate(&result.params, task, cfg.eval.n_samples, cfg.eval.temperature, &mut rng)?;
    write_json(&dir.join("eval.json"), &report)?;
    Ok(result)
}

fn cmd_train(args: &ConfigArgs, resume: bool) -> Result<i32> {
    let (cfg, task) = load_experiment(args)?;
    let dir = cfg.output_path();
    println!("{}", cfg.to_toml()?);
    let r = train_into(&cfg, &task, &cfg.method, &dir, resume)?;
    let n = r.metrics.steps.len();
    let w = n.min(100);
    println!(
        "{}: {} steps, final mean reward {:.4}, injections/step {:.3}, non-teacher probability {:.4} -> {}",
        r.metrics.label,
        n,
        r.metrics.mean_over(n - w..n, |s| s.mean_reward),
        r.metrics.mean_over(n - w..n, |s| s.teacher_injection_count as f64),
        non_teacher_probability(&r.params, &task),
        dir.display()
    );
    Ok(EXIT_OK)
}

/// Summary of one finished (method, seed) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub method: String,
    pub seed: u64,
    pub steps: usize,
    /// Mean training reward over the final window.
    pub final_success: f64,
    pub final_injection_rate: f64,
    /// Smallest per-step injection rate over the run.
    pub min_injection_rate: f64,
    pub non_teacher_prob: f64,
    pub first_step_reaching_0_9: Option<u64>,
    pub final_window_cosine: Option<f64>,
}

impl CellSummary {
    pub fn from_run(name: &str, run: &RunMetrics, params_nt: f64, window: usize) -> Self {
        let n = run.steps.len();
        let w = window.min(n);
        CellSummary {
            method: name.into(),
            seed: run.seed,
            steps: n,
            final_success: run.mean_over(n - w..n, |s| s.mean_reward),
            final_injection_rate: run.mean_over(n - w..n, |s| s.intervention_rate),
            min_injection_rate: run.steps.iter().map(|s| s.intervention_rate).fold(f64::INFINITY, f64::min),
            non_teacher_prob: params_nt,
            first_step_reaching_0_9: run.first_step_reaching(0.9, w.clamp(1, 20)),
            final_window_cosine: consistency_probe(run, w.max(1)).ok().map(|r| r.mean_cosine),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellFailure {
    pub method: String,
    pub seed: u64,
    pub exit_code: i32,
    pub error: String,
}

/// Gate-versus-static comparison on the non-teacher probability.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeparationReport {
    pub gated: String,
    pub static_mix: String,
    pub seeds: usize,
    pub gated_wins: usize,
    pub ties: usize,
    pub sign_test_p: f64,
    pub gated_final_injection_rate: f64,
    pub static_min_injection_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareOutcome {
    pub cells: Vec<CellSummary>,
    pub failures: Vec<CellFailure>,
    pub separations: Vec<SeparationReport>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 { f64::NAN } else { s / n as f64 }
}

/// Pairs every gated method with every static-mix method over shared seeds.
pub fn separation_reports(methods: &[NamedMethod], cells: &[CellSummary]) -> Vec<SeparationReport> {
    let find = |name: &str, seed: u64| cells.iter().find(|c| c.method == name && c.seed == seed);
    let mut out = Vec::new();
    for g in methods.iter().filter(|m| matches!(m.method, Method::Hapo)) {
        for s in methods.iter().filter(|m| matches!(m.method, Method::StaticMix { .. })) {
            let mut wins = 0;
            let mut ties = 0;
            let mut n = 0;
            let mut g_rate = Vec::new();
            let mut s_rate = Vec::new();
            for c in cells.iter().filter(|c| c.method == g.name) {
                if let Some(o) = find(&s.name, c.seed) {
                    n += 1;
                    if c.non_teacher_prob > o.non_teacher_prob {
                        wins += 1;
                    } else if c.non_teacher_prob == o.non_teacher_prob {
                        ties += 1;
                    }
                    g_rate.push(c.final_injection_rate);
                    s_rate.push(o.min_injection_rate);
                }
            }
            out.push(SeparationReport {
                gated: g.name.clone(),
                static_mix: s.name.clone(),
                seeds: n,
                gated_wins: wins,
                ties,
                sign_test_p: sign_test_p(wins, n - ties),
                gated_final_injection_rate: mean(g_rate.into_iter()),
                static_min_injection_rate: s_rate.into_iter().fold(f64::INFINITY, f64::min),
            });
        }
    }
    out
}

/// Method-by-metric table, seeds averaged.
pub fn summary_table(methods: &[NamedMethod], cells: &[CellSummary]) -> String {
    let mut t = String::from("method\tseeds\tfinal_success\tnon_teacher_prob\tfinal_injection_rate\treached_0.9\n");
    for m in methods {
        let cs: Vec<&CellSummary> = cells.iter().filter(|c| c.method == m.name).collect();
        let _ = writeln!(
            t,
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{}",
            m.name,
            cs.len(),
            mean(cs.iter().map(|c| c.final_success)),
            mean(cs.iter().map(|c| c.non_teacher_prob)),
            mean(cs.iter().map(|c| c.final_injection_rate)),
            cs.iter().filter(|c| c.first_step_reaching_0_9.is_some()).count()
        );
    }
    t
}

/// Runs the comparison matrix into `dir`. Cells with a `summary.json` are
/// reused, so an interrupted matrix picks up where it stopped.
pub fn run_compare(cfg: &ExperimentConfig, task: &TaskSpec, dir: &Path) -> Result<CompareOutcome> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.resolved.toml"), cfg.to_toml()?)?;
    let mut cells = Vec::new();
    let mut failures = Vec::new();
    for &seed in &cfg.compare.seeds {
        for m in &cfg.compare.methods {
            let cell_dir = dir.join(&m.name).join(format!("seed_{seed}"));
            let done = cell_dir.join("summary.json");
            if done.exists() {
                let text = std::fs::read_to_string(&done)?;
                cells.push(serde_json::from_str(&text)?);
                continue;
            }
            let mut c = cfg.clone();
            c.method = m.method;
            c.train.seed = seed;
            match train_into(&c, task, &m.method, &cell_dir, false) {
                Ok(r) => {
                    let s = CellSummary::from_run(
                        &m.name,
                        &r.metrics,
                        non_teacher_probability(&r.params, task),
                        cfg.compare.final_window,
                    );
                    write_json(&done, &s)?;
                    cells.push(s);
                }
                Err(e) => failures.push(CellFailure {
                    method: m.name.clone(),
                    seed,
                    exit_code: exit_code(&e),
                    error: e.to_string(),
                }),
            }
        }
    }
    let separations = separation_reports(&cfg.compare.methods, &cells);
    std::fs::write(dir.join("summary.tsv"), summary_table(&cfg.compare.methods, &cells))?;
    write_json(&dir.join("failures.json"), &failures)?;
    write_json(&dir.join("separation.json"), &separations)?;
    Ok(CompareOutcome {
        cells,
        failures,
        separations,
    })
}

fn cmd_compare(args: &ConfigArgs) -> Result<i32> {
    let (cfg, task) = load_experiment(args)?;
    let dir = cfg.output_path();
    let out = run_compare(&cfg, &task, &dir)?;
    print!("{}", summary_table(&cfg.compare.methods, &out.cells));
    for s in &out.separations {
        println!(
            "{} vs {}: non-teacher probability higher in {}/{} seeds (ties {}), sign test p = {:.4}; injection rate {:.3} vs min {:.3}",
            s.gated,
            s.static_mix,
            s.gated_wins,
            s.seeds,
            s.ties,
            s.sign_test_p,
            s.gated_final_injection_rate,
            s.static_min_injection_rate
        );
    }
    if let Some(f) = out.failures.first() {
        eprintln!("{} cell(s) failed; first: {} seed {}: {}", out.failures.len(), f.method, f.seed, f.error);
        return Ok(f.exit_code);
    }
    Ok(EXIT_OK)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundsOutcome {
    pub enumeration: EnumerationReport,
    pub enumeration_seconds: f64,
    pub grid: GridReport,
    pub grid_seconds: f64,
    pub passed: bool,
}

/// Both bound suites with the given confidence function.
pub fn run_bounds(cfg: &ExperimentConfig, conf: &ConfidenceFn) -> Result<BoundsOutcome> {
    let t = Instant::now();
    let enumeration = enumerate_gate_algebra(cfg.bounds.enumeration_max_n, &percent_gammas(), conf)?;
    let enumeration_seconds = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let grid = hoeffding_grid(&cfg.bounds.grid, conf)?;
    let grid_seconds = t.elapsed().as_secs_f64();
    Ok(BoundsOutcome {
        passed: enumeration.passed && grid.passed,
        enumeration,
        enumeration_seconds,
        grid,
        grid_seconds,
    })
}

fn cmd_check_bounds(args: &ConfigArgs, mutate: bool) -> Result<i32> {
    let (cfg, _) = load_experiment(args)?;
    let conf: Box<ConfidenceFn> = if mutate {
        Box::new(off_by_one_confidence)
    } else {
        default_confidence()
    };
    let out = run_bounds(&cfg, conf.as_ref())?;
    let e = &out.enumeration;
    println!(
        "enumeration: N <= {}, {} thresholds, {} cases, {} mismatches ({:.3}s) {}",
        e.max_group_size,
        e.n_gammas,
        e.cases,
        e.mismatches.len(),
        out.enumeration_seconds,
        if e.passed { "PASS" } else { "FAIL" }
    );
    for m in e.mismatches.iter().take(10) {
        println!(
            "  mismatch N={} S={} gamma={} c={} k={}",
            m.group_size, m.successes, m.gamma, m.confidence, m.k_gamma
        );
    }
    println!("N\tgamma\tmu\tfreq\tbound\texact_tail\tgate_can_close\tresult");
    for c in &out.grid.cells {
        match (&c.report, &c.regime_error) {
            (Some(r), _) => println!(
                "{}\t{}\t{}\t{:.5}\t{:.5}\t{:.5}\t{}\t{}",
                c.group_size,
                c.gamma,
                c.mu,
                r.empirical_frequency,
                r.hoeffding_bound,
                r.exact_tail,
                r.gate_can_close,
                if r.passed { "PASS" } else { "FAIL" }
            ),
            (None, Some(m)) => println!("{}\t{}\t{}\tregime: {m}", c.group_size, c.gamma, c.mu),
            (None, None) => {}
        }
    }
    println!(
        "grid: {} cells checked, {} failed ({:.3}s) {}",
        out.grid.n_checked,
        out.grid.n_failed,
        out.grid_seconds,
        if out.grid.passed { "PASS" } else { "FAIL" }
    );
    let dir = cfg.output_path();
    std::fs::create_dir_all(&dir)?;
    write_json(&dir.join("bounds_report.json"), &out)?;
    Ok(if out.passed { EXIT_OK } else { EXIT_ASSERTION })
}

fn cmd_gradcheck(args: &ConfigArgs) -> Result<i32> {
    let (cfg, _) = load_experiment(args)?;
    let r = run_gradcheck(&cfg.gradcheck)?;
    for k in &r.kinds {
        println!(
            "{:?}: max relative error {:.3e} (instance {})",
            k.kind, k.max_relative_error, k.worst_instance
        );
    }
    println!(
        "{} instances, h = {}, tolerance {}: {}",
        r.instances,
        r.h,
        r.tolerance,
        if r.passed { "PASS" } else { "FAIL" }
    );
    let dir = cfg.output_path();
    std::fs::create_dir_all(&dir)?;
    write_json(&dir.join("gradcheck_report.json"), &r)?;
    Ok(if r.passed { EXIT_OK } else { EXIT_ASSERTION })
}

fn cmd_eval(args: &ConfigArgs, checkpoint: Option<&Path>) -> Result<i32> {
    let (cfg, task) = load_experiment(args)?;
    let ckpt = checkpoint.map_or_else(|| cfg.output_path().join("checkpoint"), Path::to_path_buf);
    if !ckpt.join("state.json").exists() {
        return Err(LabError::Config(format!("no checkpoint at {}", ckpt.display())));
    }
    let state = load_checkpoint(&ckpt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval.seed);
    let report = evaluate(&state.params, &task, cfg.eval.n_samples, cfg.eval.temperature, &mut rng)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(method: &str, seed: u64, nt: f64, rate: f64) -> CellSummary {
        CellSummary {
            method: method.into(),
            seed,
            steps: 10,
            final_success: 1.0,
            final_injection_rate: rate,
            min_injection_rate: rate,
            non_teacher_prob: nt,
            first_step_reaching_0_9: Some(3),
            final_window_cosine: Some(1.0),
        }
    }

    #[test]
    fn separation_counts_wins_and_ties() {
        let methods = vec![
            NamedMethod {
                name: "h".into(),
                method: Method::Hapo,
            },
            NamedMethod {
                name: "s".into(),
                method: Method::StaticMix {
                    use_shaping: true,
                    lambda: 1.0,
                },
            },
            NamedMethod {
                name: "g".into(),
                method: Method::Grpo,
            },
        ];
        let mut cells = Vec::new();
        for seed in 0..4 {
            cells.push(cell("h", seed, 0.4, 0.0));
            cells.push(cell("s", seed, if seed == 3 { 0.4 } else { 0.1 }, 1.0));
        }
        let r = separation_reports(&methods, &cells);
        assert_eq!(r.len(), 1);
        assert_eq!((r[0].gated_wins, r[0].ties, r[0].seeds), (3, 1, 4));
        assert!((r[0].sign_test_p - 0.25).abs() < 1e-12);
        assert_eq!(r[0].static_min_injection_rate, 1.0);
        assert!(summary_table(&methods, &cells).lines().count() == 4);
    }

    #[test]
    fn exit_codes_are_distinct() {
        let codes = [
            exit_code(&LabError::Config("x".into())),
            exit_code(&LabError::NonFinite {
                step: 0,
                detail: String::new(),
            }),
            exit_code(&LabError::Serde("x".into())),
            EXIT_ASSERTION,
            EXIT_OK,
        ];
        let mut sorted = codes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), codes.len());
    }

    #[test]
    fn bad_args_are_config_errors() {
        assert_eq!(main_with_args(["hapo-lab", "frobnicate"]), EXIT_CONFIG);
        assert_eq!(
            main_with_args(["hapo-lab", "gradcheck", "--set", "gradcheck.instances=0"]),
            EXIT_CONFIG
        );
    }
}
