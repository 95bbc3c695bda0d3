//! Python bindings: tasks, the gate, the tabular policy, training runs and
//! the concentration-bound check.

use pyo3::prelude::*;

#[pymodule]
mod hapo_lab {
    use hapo_core::baselines::{run_method, Method};
    use hapo_core::env::{self, TaskSpec};
    use hapo_core::gating::{self, GateConfig};
    use hapo_core::metrics;
    use hapo_core::policy::{sample_trajectory, PolicyParams};
    use hapo_core::trainer::{non_teacher_probability, LrSchedule, TrainConfig};
    use hapo_core::LabError;
    use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
    use pyo3::prelude::*;
    use pyo3::types::PyDict;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn err(e: LabError) -> PyErr {
        match e {
            LabError::NonFinite { .. } => PyArithmeticError::new_err(e.to_string()),
            LabError::Io(_) => PyOSError::new_err(e.to_string()),
            _ => PyValueError::new_err(e.to_string()),
        }
    }

    #[pyclass(frozen)]
    struct Task {
        inner: TaskSpec,
    }

    #[pymethods]
    impl Task {
        #[getter]
        fn vocab_size(&self) -> u32 {
            self.inner.vocab_size
        }

        #[getter]
        fn prompts(&self) -> Vec<u32> {
            self.inner.prompts.clone()
        }

        #[getter]
        fn max_len(&self) -> usize {
            self.inner.max_len
        }

        fn verify(&self, prompt: u32, tokens: Vec<u32>) -> PyResult<u8> {
            env::verify(&self.inner, prompt, &tokens).map_err(err)
        }

        fn teacher_demo(&self, prompt: u32) -> PyResult<Vec<u32>> {
            env::teacher_demo(&self.inner, prompt).map(|t| t.tokens).map_err(err)
        }

        fn save(&self, path: std::path::PathBuf) -> PyResult<()> {
            self.inner.save(&path).map_err(err)
        }

        fn __repr__(&self) -> String {
            format!(
                "Task({}, vocab={}, prompts={}, max_len={})",
                self.inner.name,
                self.inner.vocab_size,
                self.inner.prompts.len(),
                self.inner.max_len
            )
        }
    }

    #[pyfunction]
    #[pyo3(signature = (vocab_size, n_prompts, seq_len, n_solutions=1, seed=0))]
    fn lock_task(vocab_size: u32, n_prompts: u32, seq_len: usize, n_solutions: usize, seed: u64) -> PyResult<Task> {
        env::make_lock_task(vocab_size, n_prompts, seq_len, n_solutions, seed)
            .map(|inner| Task { inner })
            .map_err(err)
    }

    #[pyfunction]
    #[pyo3(signature = (n_digits, n_prompts, max_len, seed=0))]
    fn chain_task(n_digits: u32, n_prompts: u32, max_len: usize, seed: u64) -> PyResult<Task> {
        env::make_chain_task(n_digits, n_prompts, max_len, seed)
            .map(|inner| Task { inner })
            .map_err(err)
    }

    #[pyfunction]
    fn load_task(path: std::path::PathBuf) -> PyResult<Task> {
        TaskSpec::load(&path).map(|inner| Task { inner }).map_err(err)
    }

    /// Posterior-mean success rate `(1 + S) / (2 + N)`.
    #[pyfunction]
    fn confidence(successes: usize, n: usize) -> PyResult<f64> {
        gating::confidence(successes, n).map_err(err)
    }

    /// Gate opens iff `S < success_threshold(gamma, N)`.
    #[pyfunction]
    fn success_threshold(gamma: f64, n: usize) -> f64 {
        gating::success_threshold(gamma, n)
    }

    /// Tabular softmax policy; starts uniform.
    #[pyclass]
    struct Policy {
        inner: PolicyParams,
    }

    #[pymethods]
    impl Policy {
        #[new]
        #[pyo3(signature = (task, context_order=None))]
        fn new(task: &Task, context_order: Option<usize>) -> Self {
            Policy {
                inner: PolicyParams::for_task(&task.inner, context_order),
            }
        }

        fn logp(&self, prompt: u32, prefix: Vec<u32>, token: u32) -> PyResult<f64> {
            if token >= self.inner.vocab_size() {
                return Err(PyValueError::new_err(format!("token {token} outside vocabulary")));
            }
            Ok(self.inner.logp(&self.inner.context(prompt, &prefix), token))
        }

        fn probs(&self, prompt: u32, prefix: Vec<u32>) -> Vec<f64> {
            self.inner.probs(&self.inner.context(prompt, &prefix))
        }

        fn set_logits(&mut self, prompt: u32, prefix: Vec<u32>, logits: Vec<f64>) -> PyResult<()> {
            let ctx = self.inner.context(prompt, &prefix);
            self.inner.set_row(ctx, logits).map_err(err)
        }

        fn sequence_logp(&self, prompt: u32, tokens: Vec<u32>) -> f64 {
            self.inner.sequence_logp(prompt, &tokens)
        }

        /// Samples `n` rollouts; returns `(tokens, reward)` pairs.
        #[pyo3(signature = (task, prompt, n=1, seed=0))]
        fn sample(&self, task: &Task, prompt: u32, n: usize, seed: u64) -> PyResult<Vec<(Vec<u32>, u8)>> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n)
                .map(|_| {
                    sample_trajectory(&self.inner, &task.inner, prompt, &mut rng)
                        .map(|t| (t.tokens, t.reward))
                        .map_err(err)
                })
                .collect()
        }

        fn non_teacher_probability(&self, task: &Task) -> f64 {
            non_teacher_probability(&self.inner, &task.inner)
        }
    }

    fn parse_method(name: &str, lambda: f64) -> PyResult<Method> {
        Ok(match name {
            "grpo" => Method::Grpo,
            "sft" => Method::Sft,
            "hapo" => Method::Hapo,
            "static_mix" => Method::StaticMix {
                use_shaping: true,
                lambda,
            },
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown method {other:?}; expected grpo, sft, hapo or static_mix"
                )))
            }
        })
    }

    /// Trains one method and returns per-step curves plus the final policy.
    #[pyfunction]
    #[pyo3(signature = (method, task, steps=2000, seed=0, lr=6.0, gamma=0.8, group_size=8, batch_prompts=16, mix_lambda=1.0))]
    #[allow(clippy::too_many_arguments)]
    fn train<'py>(
        py: Python<'py>,
        method: &str,
        task: &Task,
        steps: u64,
        seed: u64,
        lr: f64,
        gamma: f64,
        group_size: usize,
        batch_prompts: usize,
        mix_lambda: f64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let m = parse_method(method, mix_lambda)?;
        let cfg = TrainConfig {
            steps,
            seed,
            lr: LrSchedule::Constant { eta0: lr },
            gate: GateConfig::constant(gamma),
            group_size,
            batch_prompts,
            ..TrainConfig::default()
        };
        let inner = task.inner.clone();
        let r = py.detach(|| run_method(&m, &inner, &cfg)).map_err(err)?;
        let s = &r.metrics.steps;
        let out = PyDict::new(py);
        out.set_item("mean_reward", s.iter().map(|m| m.mean_reward).collect::<Vec<_>>())?;
        out.set_item("intervention_rate", s.iter().map(|m| m.intervention_rate).collect::<Vec<_>>())?;
        out.set_item("mean_confidence", s.iter().map(|m| m.mean_confidence).collect::<Vec<_>>())?;
        out.set_item("grpo_cosine", s.iter().map(|m| m.grpo_cosine).collect::<Vec<_>>())?;
        out.set_item("non_teacher_probability", non_teacher_probability(&r.params, &task.inner))?;
        out.set_item("policy", Policy { inner: r.params })?;
        Ok(out)
    }

    /// Gate-open frequency of `(S, N)` samples against the concentration
    /// bound and the exact binomial tail.
    #[pyfunction]
    fn check_hoeffding<'py>(
        py: Python<'py>,
        successes: Vec<usize>,
        n: usize,
        mu: f64,
        gamma: f64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let samples: Vec<(usize, usize)> = successes.into_iter().map(|s| (s, n)).collect();
        let r = metrics::check_hoeffding(&samples, mu, gamma).map_err(err)?;
        let out = PyDict::new(py);
        out.set_item("k_gamma", r.k_gamma)?;
        out.set_item("n_groups", r.n_groups)?;
        out.set_item("empirical_frequency", r.empirical_frequency)?;
        out.set_item("standard_error", r.standard_error)?;
        out.set_item("hoeffding_bound", r.hoeffding_bound)?;
        out.set_item("exact_tail", r.exact_tail)?;
        out.set_item("gate_can_close", r.gate_can_close)?;
        out.set_item("passed", r.passed)?;
        Ok(out)
    }
}
