//! Python bindings. Structured values (states, episodes, reports, configs)
//! cross the boundary as plain dicts/lists via their JSON form.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;

use dpdp::dialogue::{self as dlg, DialogueState, Episode, TaskKind, TaskSpec};
use dpdp::env::{self as denv, Environment, Phase, ScriptedBackend, ScriptedSimSpec};
use dpdp::eval::{self as deval, PlannerMode, RunConfig};
use dpdp::gate::{self as dgate, Decision, GateState};
use dpdp::mcts::{self as dmcts, MctsConfig, UniformPrior};
use dpdp::policy::{ActionDistribution, PolicyModel, DEFAULT_HIDDEN};
use dpdp::pretrain::{run_pretraining, PretrainConfig, ScoredDataset};
use dpdp::selfplay::{run_selfplay_training, SelfPlayConfig, SelfPlayOutputs};

fn value_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn to_py<T: Serialize>(py: Python<'_>, v: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(v).map_err(value_err)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

/// Accepts either a JSON string or a dict/list.
fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = match obj.extract::<String>() {
        Ok(s) => s,
        Err(_) => obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?,
    };
    serde_json::from_str(&text).map_err(value_err)
}

fn task_kind(name: &str) -> PyResult<TaskKind> {
    name.parse().map_err(|_| PyValueError::new_err(format!("unknown task {name:?}")))
}

fn builtin_task(name: &str) -> PyResult<TaskSpec> {
    let kind = task_kind(name)?;
    TaskSpec::builtin(kind).ok_or_else(|| PyValueError::new_err(format!("no built-in definition for {name}")))
}

/// Task environment driven by the scripted simulator.
#[pyclass(name = "ScriptedEnv", module = "dpdp")]
struct PyEnv {
    env: Environment,
    spec: ScriptedSimSpec,
}

#[pymethods]
impl PyEnv {
    #[new]
    #[pyo3(signature = (task = "esconv", max_turns = None, critic_samples = None, noise = 0.0, noise_seed = 0))]
    fn new(task: &str, max_turns: Option<usize>, critic_samples: Option<usize>, noise: f64, noise_seed: u64) -> PyResult<Self> {
        let mut t = builtin_task(task)?;
        if let Some(n) = max_turns {
            t.max_turns = n;
        }
        if let Some(l) = critic_samples {
            t.critic_samples = l;
        }
        let mut spec = match t.task() {
            TaskKind::CraigslistBargain => ScriptedSimSpec::bargaining(t.num_actions()),
            k => ScriptedSimSpec::two_phase(k, t.num_actions()),
        };
        spec.noise = noise;
        spec.noise_seed = noise_seed;
        let env = Environment::new(t, Arc::new(ScriptedBackend::new(spec.clone())));
        Ok(PyEnv { env, spec })
    }

    #[getter]
    fn task(&self) -> String {
        self.env.task.task().to_string()
    }

    #[getter]
    fn num_actions(&self) -> usize {
        self.env.task.num_actions()
    }

    #[getter]
    fn max_turns(&self) -> usize {
        self.env.task.max_turns
    }

    /// `(name, instruction)` for every strategy.
    fn strategies(&self) -> Vec<(String, String)> {
        self.env
            .task
            .catalog
            .strategies
            .iter()
            .map(|s| (s.name.clone(), s.instruction.clone()))
            .collect()
    }

    /// Case backgrounds drawn from the simulator.
    #[pyo3(signature = (n, seed = 0))]
    fn cases(&self, py: Python<'_>, n: usize, seed: u64) -> PyResult<Py<PyAny>> {
        to_py(py, &deval::scripted_cases(&self.spec, self.env.task.task(), n, seed))
    }

    fn initial_state(&self, py: Python<'_>, case: &Bound<'_, PyAny>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.env.initial_state(from_py(case)?))
    }

    /// One acting turn; returns the transition.
    fn step(&self, py: Python<'_>, state: &Bound<'_, PyAny>, action: usize) -> PyResult<Py<PyAny>> {
        let s: DialogueState = from_py(state)?;
        let t = self.env.step(&s, action, Phase::Acting).map_err(runtime_err)?;
        to_py(py, &t)
    }

    /// Exact success probability of the uniform-random policy from `state`.
    fn random_policy_success(&self, state: &Bound<'_, PyAny>) -> PyResult<f64> {
        let s: DialogueState = from_py(state)?;
        Ok(self.spec.random_policy_success(&self.env.task, &s))
    }

    /// Exhaustive-search optimum from `state`.
    fn optimal_plan(&self, py: Python<'_>, state: &Bound<'_, PyAny>) -> PyResult<Py<PyAny>> {
        let s: DialogueState = from_py(state)?;
        to_py(py, &denv::optimal_plan(&self.spec, &self.env.task, &s))
    }

    /// Call counts so far, per phase and role.
    fn counts(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.env.counter().snapshot())
    }

    fn reset_counts(&self) {
        self.env.counter().reset();
    }
}

/// Policy network with its encoder and strategy catalog.
#[pyclass(name = "PolicyModel", module = "dpdp")]
struct PyModel {
    model: PolicyModel,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    #[pyo3(signature = (task = "esconv", hidden = DEFAULT_HIDDEN, seed = 0, max_turns = None))]
    fn random(task: &str, hidden: usize, seed: u64, max_turns: Option<usize>) -> PyResult<Self> {
        let t = builtin_task(task)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = PolicyModel::random(t.catalog, max_turns.unwrap_or(t.max_turns), hidden, &mut rng);
        Ok(PyModel { model })
    }

    #[staticmethod]
    #[pyo3(signature = (path, task = "esconv", max_turns = None))]
    fn load(path: PathBuf, task: &str, max_turns: Option<usize>) -> PyResult<Self> {
        let t = builtin_task(task)?;
        let base = PolicyModel::untrained(t.catalog.clone(), max_turns.unwrap_or(t.max_turns));
        let model = PolicyModel::load(&path, base.encoder.clone(), t.catalog).map_err(value_err)?;
        Ok(PyModel { model })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.model.save(&path).map_err(runtime_err)
    }

    fn policy(&self, state: &Bound<'_, PyAny>) -> PyResult<Vec<f64>> {
        let s: DialogueState = from_py(state)?;
        Ok(self.model.policy(&s).map_err(value_err)?.probs)
    }

    fn q_values(&self, state: &Bound<'_, PyAny>) -> PyResult<Vec<f64>> {
        let s: DialogueState = from_py(state)?;
        Ok(self.model.q_values(&s).map_err(value_err)?.values)
    }

    fn greedy_action(&self, state: &Bound<'_, PyAny>) -> PyResult<usize> {
        let s: DialogueState = from_py(state)?;
        self.model.greedy_action(&s).map_err(value_err)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.model.params.num_params()
    }
}

/// Uncertainty gate with a running-percentile threshold.
#[pyclass(name = "Gate", module = "dpdp")]
struct PyGate {
    gate: GateState,
}

fn decision_name(d: Decision) -> &'static str {
    match d {
        Decision::PolicyLm => "policy",
        Decision::Mcts => "mcts",
    }
}

#[pymethods]
impl PyGate {
    #[new]
    #[pyo3(signature = (target_ratio, seed = 0, min_samples = dgate::DEFAULT_MIN_SAMPLES))]
    fn new(target_ratio: f64, seed: u64, min_samples: usize) -> PyResult<Self> {
        let gate = GateState::new(target_ratio, seed).map_err(value_err)?.with_min_samples(min_samples);
        Ok(PyGate { gate })
    }

    /// Routes a turn with confidence `delta`; returns "policy" or "mcts".
    #[pyo3(signature = (delta, turn = 0))]
    fn decide(&mut self, delta: f64, turn: usize) -> &'static str {
        decision_name(self.gate.decide_delta(turn, delta))
    }

    /// Routes a turn from the policy's action probabilities.
    #[pyo3(signature = (probs, turn = 0))]
    fn decide_probs(&mut self, probs: Vec<f64>, turn: usize) -> PyResult<&'static str> {
        let d = dgate::gate_decide(&mut self.gate, turn, &ActionDistribution { probs }).map_err(value_err)?;
        Ok(decision_name(d))
    }

    #[getter]
    fn mcts_fraction(&self) -> f64 {
        self.gate.mcts_fraction()
    }

    fn trace(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.gate.trace)
    }
}

/// Runs MCTS from `state`; a missing model means a uniform prior.
#[pyfunction]
#[pyo3(signature = (env, state, model = None, n_simulations = 10, c_p = 1.0, q0 = 0.0))]
fn plan(
    py: Python<'_>,
    env: &PyEnv,
    state: &Bound<'_, PyAny>,
    model: Option<&PyModel>,
    n_simulations: usize,
    c_p: f64,
    q0: f64,
) -> PyResult<Py<PyAny>> {
    let s: DialogueState = from_py(state)?;
    let cfg = MctsConfig {
        n_simulations,
        c_p,
        q0,
        uniform_prior: model.is_none(),
        ..Default::default()
    };
    let out = match model {
        Some(m) => dmcts::plan(&s, &m.model, &env.env, &cfg),
        None => dmcts::plan(&s, &UniformPrior(env.env.task.num_actions()), &env.env, &cfg),
    }
    .map_err(runtime_err)?;
    to_py(py, &out)
}

#[pyfunction]
fn puct_score(q: f64, prior: f64, visits: u32, total_visits: u64, c_p: f64) -> f64 {
    dmcts::puct_score(q, prior, visits, total_visits, c_p)
}

#[pyfunction]
fn percentile(samples: Vec<f64>, q: f64) -> PyResult<f64> {
    dgate::percentile(&samples, q).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (verdicts, task = "esconv"))]
fn map_verdicts_to_reward(verdicts: Vec<String>, task: &str) -> PyResult<f64> {
    let map = dlg::RewardMap::for_task(task_kind(task)?);
    dlg::map_verdicts_to_reward(&verdicts, &map).map_err(value_err)
}

/// Discounted returns-to-go of a reward sequence.
#[pyfunction]
fn discounted_returns(rewards: Vec<f64>, gamma: f64) -> Vec<f64> {
    dlg::discounted_returns(&rewards, gamma)
}

#[pyfunction]
#[pyo3(signature = (deal_price, listed, buyer_target))]
fn compute_sl(deal_price: Option<f64>, listed: f64, buyer_target: f64) -> PyResult<f64> {
    deval::compute_sl(deal_price, listed, buyer_target).map_err(value_err)
}

#[pyfunction]
fn parse_deal(answer: &str) -> PyResult<Option<f64>> {
    denv::parse_deal(answer).map_err(value_err)
}

/// Evaluates a planner. `config` is a run config (dict or JSON); the model
/// overrides the config's checkpoint. Returns `(report, episodes)`.
#[pyfunction]
#[pyo3(signature = (config, model = None))]
fn run_eval(py: Python<'_>, config: &Bound<'_, PyAny>, model: Option<&PyModel>) -> PyResult<Py<PyAny>> {
    let cfg: RunConfig = from_py(config)?;
    let model = model.map(|m| m.model.clone());
    let result = py.detach(move || -> Result<_, deval::EvalError> {
        let env = deval::build_environment(&cfg)?;
        let model = match model {
            Some(m) => m,
            None => deval::load_model(&cfg, &env)?,
        };
        deval::run_eval(&cfg, &model, &env, &deval::eval_cases(&cfg)?)
    });
    let (report, episodes) = result.map_err(|e| if e.is_config() { value_err(e) } else { runtime_err(e) })?;
    to_py(py, &(report, episodes))
}

/// Default run config for a task and mode ("system1", "system2", "dual").
#[pyfunction]
#[pyo3(signature = (task = "esconv", mode = "system1", mcts_ratio = 0.5, n_eval_cases = 100, seed = 0))]
fn run_config(py: Python<'_>, task: &str, mode: &str, mcts_ratio: f64, n_eval_cases: usize, seed: u64) -> PyResult<Py<PyAny>> {
    let mode = match mode {
        "system1" => PlannerMode::System1,
        "system2" => PlannerMode::System2,
        "dual" => PlannerMode::Dual { target_ratio: mcts_ratio },
        other => return Err(PyValueError::new_err(format!("unknown mode {other:?}"))),
    };
    let cfg = RunConfig {
        n_eval_cases,
        seed,
        ..RunConfig::new(task_kind(task)?, mode)
    };
    cfg.validate().map_err(value_err)?;
    to_py(py, &cfg)
}

/// Offline pretraining on scored episodes; returns the trained model and
/// the per-epoch history.
#[pyfunction]
#[pyo3(signature = (model, episodes, config = None))]
fn pretrain(py: Python<'_>, model: &PyModel, episodes: &Bound<'_, PyAny>, config: Option<&Bound<'_, PyAny>>) -> PyResult<(PyModel, Py<PyAny>)> {
    let eps: Vec<Episode> = from_py(episodes)?;
    let cfg = match config {
        Some(c) => from_py(c)?,
        None => PretrainConfig::for_task(model.model.catalog.task),
    };
    let start = model.model.clone();
    let out = py
        .detach(move || run_pretraining(&start, &ScoredDataset::from_episodes(eps), None, &cfg, None))
        .map_err(runtime_err)?;
    Ok((PyModel { model: out.model }, to_py(py, &out.history)?))
}

/// MCTS-guided self-play fine-tuning on `n_cases` simulator cases.
#[pyfunction]
#[pyo3(signature = (model, env, n_cases = 100, seed = 0, config = None))]
fn selfplay(
    py: Python<'_>,
    model: &PyModel,
    env: &PyEnv,
    n_cases: usize,
    seed: u64,
    config: Option<&Bound<'_, PyAny>>,
) -> PyResult<(PyModel, Py<PyAny>)> {
    let cfg = match config {
        Some(c) => from_py(c)?,
        None => SelfPlayConfig::for_task(env.env.task.task()),
    };
    let cases = deval::scripted_cases(&env.spec, env.env.task.task(), n_cases, seed);
    let start = model.model.clone();
    let e = env.env.clone();
    let out = py
        .detach(move || run_selfplay_training(&start, &e, &cases, &cfg, &SelfPlayOutputs::default()))
        .map_err(runtime_err)?;
    Ok((PyModel { model: out.model }, to_py(py, &out.history)?))
}

#[pymodule]
#[pyo3(name = "dpdp")]
fn dpdp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyEnv>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyGate>()?;
    m.add_function(wrap_pyfunction!(plan, m)?)?;
    m.add_function(wrap_pyfunction!(puct_score, m)?)?;
    m.add_function(wrap_pyfunction!(percentile, m)?)?;
    m.add_function(wrap_pyfunction!(map_verdicts_to_reward, m)?)?;
    m.add_function(wrap_pyfunction!(discounted_returns, m)?)?;
    m.add_function(wrap_pyfunction!(compute_sl, m)?)?;
    m.add_function(wrap_pyfunction!(parse_deal, m)?)?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_eval, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(selfplay, m)?)?;
    Ok(())
}
