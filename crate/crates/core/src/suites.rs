//! Bound-check suites: exhaustive gate/threshold enumeration and the
//! Bernoulli-simulation grid for the gate-open probability.
//!
//! Both suites take the confidence function as an argument so a deliberately
//! broken one can be slotted in to confirm the suites notice.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::gating::{confidence, success_threshold};
use crate::metrics::{check_hoeffding_with, BoundReport};

pub type ConfidenceFn = dyn Fn(usize, usize) -> Result<f64>;

/// The production confidence function, boxed for the suites.
pub fn default_confidence() -> Box<ConfidenceFn> {
    Box::new(confidence)
}

/// `gamma = 0.01, 0.02, ..., 0.99`.
pub fn percent_gammas() -> Vec<f64> {
    (1..=99).map(|i| i as f64 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateMismatch {
    pub group_size: usize,
    pub successes: usize,
    pub gamma: f64,
    pub confidence: f64,
    pub k_gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnumerationReport {
    pub max_group_size: usize,
    pub n_gammas: usize,
    pub cases: usize,
    pub mismatches: Vec<GateMismatch>,
    pub passed: bool,
}

/// Checks `c(S, N) < gamma  <=>  S < gamma (2 + N) - 1` for every
/// `1 <= N <= max_n`, `0 <= S <= N` and every gamma given.
pub fn enumerate_gate_algebra(max_n: usize, gammas: &[f64], conf: &ConfidenceFn) -> Result<EnumerationReport> {
    let mut cases = 0;
    let mut mismatches = Vec::new();
    for n in 1..=max_n {
        for &gamma in gammas {
            let k = success_threshold(gamma, n);
            for s in 0..=n {
                cases += 1;
                let c = conf(s, n)?;
                if (c < gamma) != ((s as f64) < k) {
                    mismatches.push(GateMismatch {
                        group_size: n,
                        successes: s,
                        gamma,
                        confidence: c,
                        k_gamma: k,
                    });
                }
            }
        }
    }
    Ok(EnumerationReport {
        max_group_size: max_n,
        n_gammas: gammas.len(),
        cases,
        passed: mismatches.is_empty(),
        mismatches,
    })
}

/// Which success rates to simulate for each threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MuSpec {
    /// `gamma + offset`, capped at 1.
    Offset { offset: f64 },
    Fixed { mu: f64 },
}

impl MuSpec {
    pub fn resolve(&self, gamma: f64) -> f64 {
        match *self {
            // rounded so 0.8 + 0.05 reads as 0.85
            MuSpec::Offset { offset } => (((gamma + offset) * 1e12).round() / 1e12).min(1.0),
            MuSpec::Fixed { mu } => mu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub group_sizes: Vec<usize>,
    pub gammas: Vec<f64>,
    pub mus: Vec<MuSpec>,
    /// Simulated groups per cell.
    pub n_groups: usize,
    pub seed: u64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            group_sizes: vec![4, 8, 16, 32],
            gammas: vec![0.5, 0.8, 0.9],
            mus: vec![
                MuSpec::Offset { offset: 0.05 },
                MuSpec::Offset { offset: 0.1 },
                MuSpec::Fixed { mu: 0.99 },
            ],
            n_groups: 100_000,
            seed: 0,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_sizes.is_empty() || self.gammas.is_empty() || self.mus.is_empty() {
            return Err(LabError::Config("bounds grid needs group sizes, thresholds and success rates".into()));
        }
        if self.group_sizes.contains(&0) {
            return Err(LabError::Config("bounds.group_sizes must be positive".into()));
        }
        if self.n_groups == 0 {
            return Err(LabError::Config("bounds.n_groups must be positive".into()));
        }
        if self.gammas.iter().any(|g| !(*g > 0.0 && *g < 1.0)) {
            return Err(LabError::Config("bounds.gammas must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// One grid cell: either a report or the reason the bound does not apply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub group_size: usize,
    pub gamma: f64,
    pub mu: f64,
    pub report: Option<BoundReport>,
    pub regime_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub cells: Vec<GridCell>,
    pub n_checked: usize,
    pub n_failed: usize,
    pub passed: bool,
}

/// Simulates `n_groups` success counts per (N, gamma, mu) cell and checks
/// each against the bound. Cells are seeded independently so adding one
/// leaves the others unchanged.
pub fn hoeffding_grid(cfg: &GridConfig, conf: &ConfidenceFn) -> Result<GridReport> {
    cfg.validate()?;
    let mut cells = Vec::new();
    for (ni, &n) in cfg.group_sizes.iter().enumerate() {
        for (gi, &gamma) in cfg.gammas.iter().enumerate() {
            let mut seen: Vec<f64> = Vec::new();
            for spec in &cfg.mus {
                let mu = spec.resolve(gamma);
                if seen.contains(&mu) {
                    continue;
                }
                seen.push(mu);
                let cell_seed = cfg
                    .seed
                    .wrapping_mul(1_000_003)
                    .wrapping_add((ni * 1000 + gi * 100 + seen.len()) as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(cell_seed);
                let dist = Binomial::new(n as u64, mu).map_err(|e| LabError::Config(e.to_string()))?;
                let samples: Vec<(usize, usize)> =
                    (0..cfg.n_groups).map(|_| (dist.sample(&mut rng) as usize, n)).collect();
                let cell = match check_hoeffding_with(&samples, mu, gamma, conf) {
                    Ok(r) => GridCell {
                        group_size: n,
                        gamma,
                        mu,
                        report: Some(r),
                        regime_error: None,
                    },
                    Err(LabError::Regime(m)) => GridCell {
                        group_size: n,
                        gamma,
                        mu,
                        report: None,
                        regime_error: Some(m),
                    },
                    Err(e) => return Err(e),
                };
                cells.push(cell);
            }
        }
    }
    let checked: Vec<&BoundReport> = cells.iter().filter_map(|c| c.report.as_ref()).collect();
    let failed = checked.iter().filter(|r| !r.passed).count();
    Ok(GridReport {
        n_checked: checked.len(),
        n_failed: failed,
        passed: failed == 0,
        cells,
    })
}

/// Confidence with the prior's pseudo-success counted twice, `(2 + S) / (2 + N)`.
/// Used to confirm the suites reject a wrong confidence function.
pub fn off_by_one_confidence(successes: usize, n: usize) -> Result<f64> {
    if successes > n {
        return Err(LabError::Input(format!("success count {successes} exceeds group size {n}")));
    }
    Ok((2.0 + successes as f64) / (2.0 + n as f64))
}
