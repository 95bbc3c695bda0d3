//! Experiment configuration: one TOML file per experiment plus dotted-path
//! overrides. Every field has a default and the resolved configuration is
//! written back out in full, so a run directory records exactly what ran.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::Method;
use crate::env::{make_chain_task, make_lock_task, TaskSpec};
use crate::error::{LabError, Result};
use crate::gradcheck::GradcheckConfig;
use crate::suites::GridConfig;
use crate::trainer::TrainConfig;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Output root override; relative `output_dir`s are placed under it.
pub const OUTPUT_ROOT_ENV: &str = "HAPO_LAB_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskConfig {
    Lock {
        #[serde(default = "lock_vocab")]
        vocab_size: u32,
        #[serde(default = "sixteen")]
        n_prompts: u32,
        #[serde(default = "four")]
        seq_len: usize,
        #[serde(default = "one")]
        n_solutions: usize,
        #[serde(default)]
        seed: u64,
    },
    Chain {
        #[serde(default = "four")]
        n_digits: u32,
        #[serde(default = "sixteen")]
        n_prompts: u32,
        #[serde(default = "chain_len")]
        max_len: usize,
        #[serde(default)]
        seed: u64,
    },
    /// A task saved with [`TaskSpec::save`]. Relative paths resolve against
    /// the config file's directory.
    File { path: PathBuf },
}

fn lock_vocab() -> u32 {
    8
}
fn sixteen() -> u32 {
    16
}
fn four<T: From<u8>>() -> T {
    T::from(4)
}
fn one() -> usize {
    1
}
fn chain_len() -> usize {
    8
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig::Lock {
            vocab_size: 8,
            n_prompts: 16,
            seq_len: 4,
            n_solutions: 1,
            seed: 0,
        }
    }
}

impl TaskConfig {
    pub fn build(&self, base_dir: &Path) -> Result<TaskSpec> {
        match self {
            TaskConfig::Lock {
                vocab_size,
                n_prompts,
                seq_len,
                n_solutions,
                seed,
            } => make_lock_task(*vocab_size, *n_prompts, *seq_len, *n_solutions, *seed),
            TaskConfig::Chain {
                n_digits,
                n_prompts,
                max_len,
                seed,
            } => make_chain_task(*n_digits, *n_prompts, *max_len, *seed),
            TaskConfig::File { path } => {
                let p = if path.is_absolute() { path.clone() } else { base_dir.join(path) };
                if !p.exists() {
                    return Err(LabError::Config(format!("task.path: {} does not exist", p.display())));
                }
                TaskSpec::load(&p)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_samples: usize,
    /// 0 decodes greedily.
    pub temperature: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_samples: 256,
            temperature: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedMethod {
    pub name: String,
    pub method: Method,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub methods: Vec<NamedMethod>,
    pub seeds: Vec<u64>,
    /// Steps at the end of a run averaged for the summary.
    pub final_window: usize,
}

impl Default for CompareConfig {
    fn default() -> Self {
        let m = |name: &str, method| NamedMethod {
            name: name.into(),
            method,
        };
        Self {
            methods: vec![
                m("grpo", Method::Grpo),
                m("sft", Method::Sft),
                m(
                    "static_mix_0.5",
                    Method::StaticMix {
                        use_shaping: true,
                        lambda: 0.5,
                    },
                ),
                m(
                    "static_mix",
                    Method::StaticMix {
                        use_shaping: true,
                        lambda: 1.0,
                    },
                ),
                m(
                    "static_mix_2",
                    Method::StaticMix {
                        use_shaping: true,
                        lambda: 2.0,
                    },
                ),
                m("hapo", Method::Hapo),
            ],
            seeds: (0..10).collect(),
            final_window: 100,
        }
    }
}

impl CompareConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.len() < 2 {
            return Err(LabError::Config("compare.methods needs at least two entries".into()));
        }
        if self.seeds.is_empty() {
            return Err(LabError::Config("compare.seeds is empty".into()));
        }
        if self.final_window == 0 {
            return Err(LabError::Config("compare.final_window must be positive".into()));
        }
        let mut names: Vec<&str> = self.methods.iter().map(|m| m.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(LabError::Config("compare.methods names must be unique".into()));
        }
        for m in &self.methods {
            if m.name.is_empty() || m.name.contains(['/', '\\']) {
                return Err(LabError::Config(format!("compare.methods: bad name {:?}", m.name)));
            }
            m.method.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundsConfig {
    /// Largest group size in the gate/threshold enumeration.
    pub enumeration_max_n: usize,
    pub grid: GridConfig,
}

impl Default for BoundsConfig {
    fn default() -> Self {
        Self {
            enumeration_max_n: 64,
            grid: GridConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { checkpoint_every: 500 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub output_dir: PathBuf,
    pub task: TaskConfig,
    pub method: Method,
    pub train: TrainConfig,
    pub run: RunConfig,
    pub eval: EvalConfig,
    pub compare: CompareConfig,
    pub bounds: BoundsConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            output_dir: PathBuf::from("runs/default"),
            task: TaskConfig::default(),
            method: Method::default(),
            train: TrainConfig::default(),
            run: RunConfig::default(),
            eval: EvalConfig::default(),
            compare: CompareConfig::default(),
            bounds: BoundsConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

/// Parses an override value as TOML, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Applies `a.b.c=value` to `table`, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| LabError::Config(format!("override {spec:?} is not of the form key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(LabError::Config(format!("override {spec:?} has an empty key")));
    }
    let mut cur = table;
    for k in &keys[..keys.len() - 1] {
        let entry = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| LabError::Config(format!("override {spec:?}: {k} is not a table")))?;
    }
    cur.insert(keys[keys.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl ExperimentConfig {
    pub fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| LabError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| LabError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LabError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(LabError::Config(format!(
                "schema_version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.method.validate()?;
        self.train.validate()?;
        self.compare.validate()?;
        self.bounds.grid.validate()?;
        self.gradcheck.validate()?;
        if !(self.eval.temperature >= 0.0 && self.eval.temperature.is_finite()) {
            return Err(LabError::Config("eval.temperature must be non-negative".into()));
        }
        if self.eval.n_samples == 0 {
            return Err(LabError::Config("eval.n_samples must be positive".into()));
        }
        Ok(())
    }

    /// Fills in values that depend on the task so the echoed config is
    /// complete.
    pub fn resolve(&mut self, task: &TaskSpec) {
        if self.train.context_order.is_none() {
            self.train.context_order = Some(task.max_len);
        }
    }

    /// Output directory after applying the output-root environment variable.
    pub fn output_path(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| LabError::Serde(e.to_string()))
    }
}
