//! Python bindings: scenarios, the market environment, agent training and the
//! DP oracle. Structured results come back as plain dicts and lists.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde_json::Value;

use drlab::agent::{self, AgentConfig, ObsScaler, Td3Agent};
use drlab::approximator::Archive;
use drlab::dataio::{self, SynthProfile};
use drlab::domain::{self, UserProfile};
use drlab::market_env::{self, ActionRaw, FixedActions, Observation};
use drlab::oracle::{self, DpLimits, GridSpec};
use drlab::penalty::PenaltyState;
use drlab::user_model;

fn err(e: drlab::Error) -> PyErr {
    match e {
        drlab::Error::Io(io) => PyIOError::new_err(io.to_string()),
        drlab::Error::Validation(_)
        | drlab::Error::InvalidArgument(_)
        | drlab::Error::ScenarioFile(_)
        | drlab::Error::Shape(_)
        | drlab::Error::Calendar(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn to_py(py: Python<'_>, v: &Value) -> PyResult<PyObject> {
    Ok(match v {
        Value::Null => py.None(),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any().unbind(),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_pyobject(py)?.into_any().unbind(),
            None => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any().unbind(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any().unbind(),
        Value::Array(xs) => {
            let items = xs.iter().map(|x| to_py(py, x)).collect::<PyResult<Vec<_>>>()?;
            PyList::new(py, items)?.into_any().unbind()
        }
        Value::Object(m) => {
            let d = PyDict::new(py);
            for (k, x) in m {
                d.set_item(k, to_py(py, x)?)?;
            }
            d.into_any().unbind()
        }
    })
}

fn ser<T: serde::Serialize>(py: Python<'_>, x: &T) -> PyResult<PyObject> {
    let v = serde_json::to_value(x).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    to_py(py, &v)
}

fn from_py(obj: &Bound<'_, PyAny>) -> PyResult<Value> {
    if obj.is_none() {
        return Ok(Value::Null);
    }
    if let Ok(b) = obj.downcast::<pyo3::types::PyBool>() {
        return Ok(Value::Bool(b.is_true()));
    }
    if let Ok(i) = obj.extract::<i64>() {
        return Ok(Value::from(i));
    }
    if let Ok(f) = obj.extract::<f64>() {
        return Ok(Value::from(f));
    }
    if let Ok(s) = obj.extract::<String>() {
        return Ok(Value::String(s));
    }
    if let Ok(d) = obj.downcast::<PyDict>() {
        let mut m = serde_json::Map::new();
        for (k, v) in d.iter() {
            m.insert(k.extract::<String>()?, from_py(&v)?);
        }
        return Ok(Value::Object(m));
    }
    if let Ok(items) = obj.extract::<Vec<Bound<'_, PyAny>>>() {
        return Ok(Value::Array(items.iter().map(from_py).collect::<PyResult<_>>()?));
    }
    Err(PyValueError::new_err(format!("cannot convert {obj}")))
}

/// Agent configuration from keyword overrides of the defaults.
fn agent_config(overrides: Option<&Bound<'_, PyDict>>) -> PyResult<AgentConfig> {
    let mut v = serde_json::to_value(AgentConfig::default())
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    if let Some(d) = overrides {
        let obj = v.as_object_mut().expect("config serializes to an object");
        for (k, x) in d.iter() {
            let key: String = k.extract()?;
            if !obj.contains_key(&key) {
                return Err(PyValueError::new_err(format!("unknown agent option '{key}'")));
            }
            obj.insert(key, from_py(&x)?);
        }
    }
    let cfg: AgentConfig =
        serde_json::from_value(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    cfg.check().map_err(err)?;
    Ok(cfg)
}

fn profile(name: &str) -> PyResult<SynthProfile> {
    name.parse().map_err(err)
}

/// A complete experiment configuration.
#[pyclass(name = "Scenario", module = "drlab")]
#[derive(Clone)]
struct PyScenario {
    inner: domain::Scenario,
}

#[pymethods]
impl PyScenario {
    /// Seeded synthetic day ("winter" or "summer").
    #[staticmethod]
    #[pyo3(signature = (profile_name, seed = 0))]
    fn synth(profile_name: &str, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: dataio::synth_scenario(seed, profile(profile_name)?),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: domain::Scenario::from_toml_file(&path).map_err(err)?,
        })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: domain::Scenario::from_toml_str(text).map_err(err)?,
        })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml_string().map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write_toml_file(&path).map_err(err)
    }

    /// Shorter episode starting `offset` periods in, keeping `users` users.
    #[pyo3(signature = (offset, horizon, users = None))]
    fn window(&self, offset: usize, horizon: usize, users: Option<usize>) -> PyResult<Self> {
        let n = users.unwrap_or(self.inner.users.len());
        Ok(Self {
            inner: self.inner.window(offset, horizon, n).map_err(err)?,
        })
    }

    /// Broken invariants as "field: rule" strings; empty when valid.
    fn validate(&self) -> Vec<String> {
        domain::validate_scenario(&self.inner)
            .iter()
            .map(ToString::to_string)
            .collect()
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.horizon
    }

    #[getter]
    fn n_users(&self) -> usize {
        self.inner.users.len()
    }

    #[getter]
    fn t_his(&self) -> usize {
        self.inner.t_his
    }

    #[setter]
    fn set_t_his(&mut self, v: usize) {
        self.inner.t_his = v;
    }

    #[getter]
    fn t_pre(&self) -> usize {
        self.inner.t_pre
    }

    #[setter]
    fn set_t_pre(&mut self, v: usize) {
        self.inner.t_pre = v;
    }

    #[getter]
    fn obs_dim(&self) -> usize {
        self.inner.obs_dim()
    }

    #[getter]
    fn penalty_enabled(&self) -> bool {
        self.inner.penalty.enabled
    }

    #[setter]
    fn set_penalty_enabled(&mut self, v: bool) {
        self.inner.penalty.enabled = v;
    }

    #[getter]
    fn persist_penalty(&self) -> bool {
        self.inner.penalty.persist_across_episodes
    }

    #[setter]
    fn set_persist_penalty(&mut self, v: bool) {
        self.inner.penalty.persist_across_episodes = v;
    }

    /// Penalty settings as a dict.
    fn penalty(&self, py: Python<'_>) -> PyResult<PyObject> {
        ser(py, &self.inner.penalty)
    }

    #[pyo3(signature = (eta_lin, eta_sqr, beta_lin0 = None, beta_sqr0 = None))]
    fn set_penalty_steps(
        &mut self,
        eta_lin: f64,
        eta_sqr: f64,
        beta_lin0: Option<f64>,
        beta_sqr0: Option<f64>,
    ) {
        let p = &mut self.inner.penalty;
        p.eta_lin = eta_lin;
        p.eta_sqr = eta_sqr;
        if let Some(b) = beta_lin0 {
            p.beta_lin0 = b;
        }
        if let Some(b) = beta_sqr0 {
            p.beta_sqr0 = b;
        }
    }

    fn __repr__(&self) -> String {
        format!(
            "Scenario(horizon={}, users={}, t_his={}, t_pre={})",
            self.inner.horizon,
            self.inner.users.len(),
            self.inner.t_his,
            self.inner.t_pre
        )
    }
}

/// Gym-style environment. Observations are flat lists in the agent's order.
#[pyclass(name = "MarketEnv", module = "drlab")]
struct PyMarketEnv {
    env: market_env::MarketEnv,
    seed: u64,
}

#[pymethods]
impl PyMarketEnv {
    #[new]
    #[pyo3(signature = (scenario, seed = 0))]
    fn new(scenario: &PyScenario, seed: u64) -> PyResult<Self> {
        let s = scenario.inner.clone().validated().map_err(err)?;
        Ok(Self {
            env: market_env::MarketEnv::new(Arc::new(s), seed),
            seed,
        })
    }

    #[pyo3(signature = (seed = None))]
    fn reset(&mut self, seed: Option<u64>) -> PyResult<Vec<f64>> {
        if let Some(s) = seed {
            self.seed = s;
        }
        Ok(self.env.reset(self.seed).map_err(err)?.flatten())
    }

    /// Applies raw actions in [-1, 1]; returns (obs, reward, done, info).
    fn step(&mut self, py: Python<'_>, a1: f64, a2: f64) -> PyResult<(Vec<f64>, f64, bool, PyObject)> {
        let (out, obs) = self.env.step(ActionRaw::new(a1, a2)).map_err(err)?;
        Ok((obs.flatten(), out.reward, out.done, ser(py, &out)?))
    }

    /// Current (beta_lin, beta_sqr).
    fn penalty_coefficients(&self) -> (f64, f64) {
        let p = self.env.penalty_state();
        (p.beta_lin, p.beta_sqr)
    }
}

/// Trained twin-delayed agent.
#[pyclass(name = "Agent", module = "drlab")]
struct PyAgent {
    inner: Td3Agent,
    penalty: Option<PenaltyState>,
}

#[pymethods]
impl PyAgent {
    /// Untrained agent for a scenario; keyword arguments override the defaults.
    #[new]
    #[pyo3(signature = (scenario, seed = 0, **config))]
    fn new(scenario: &PyScenario, seed: u64, config: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let cfg = agent_config(config)?;
        let s = &scenario.inner;
        let inner = Td3Agent::new(cfg, ObsScaler::for_scenario(s), s.seq_len(), seed).map_err(err)?;
        Ok(Self { inner, penalty: None })
    }

    #[staticmethod]
    #[pyo3(signature = (path, seed = 0))]
    fn load(path: PathBuf, seed: u64) -> PyResult<Self> {
        let a = Archive::load(&path).map_err(err)?;
        let (inner, penalty) = Td3Agent::from_archive(&a, seed).map_err(err)?;
        Ok(Self { inner, penalty })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner
            .to_archive(self.penalty.as_ref())
            .and_then(|a| a.save(&path))
            .map_err(err)
    }

    /// Greedy action (a1, a2) for a flat observation.
    fn act(&self, obs: Vec<f64>) -> PyResult<(f64, f64)> {
        let o = Observation::from_flat(&obs, self.inner.seq_len()).map_err(err)?;
        let a = self.inner.greedy(&o).map_err(err)?;
        Ok((a.a1, a.a2))
    }

    fn config(&self, py: Python<'_>) -> PyResult<PyObject> {
        ser(py, &self.inner.cfg)
    }

    /// Greedy rollouts; starts from the coefficients saved with the agent
    /// unless `initial_penalty` is set.
    #[pyo3(signature = (scenario, episodes = 1, initial_penalty = false))]
    fn evaluate(
        &self,
        py: Python<'_>,
        scenario: &PyScenario,
        episodes: usize,
        initial_penalty: bool,
    ) -> PyResult<PyObject> {
        let s = &scenario.inner;
        let start = match self.penalty {
            Some(p) if !initial_penalty => PenaltyState { cfg: s.penalty, ..p },
            _ => PenaltyState::new(s.penalty),
        };
        let e = py
            .allow_threads(|| agent::evaluate_from(&self.inner, s, episodes, start))
            .map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("mean_return", e.mean_return)?;
        d.set_item("mean_c_ave", e.mean_c_ave)?;
        d.set_item("traces", ser(py, &e.traces)?)?;
        Ok(d.into_any().unbind())
    }
}

/// Trains an agent; returns (agent, per-episode metrics as dicts).
#[pyfunction]
#[pyo3(signature = (scenario, seed = 0, **config))]
fn train(
    py: Python<'_>,
    scenario: &PyScenario,
    seed: u64,
    config: Option<&Bound<'_, PyDict>>,
) -> PyResult<(PyAgent, PyObject)> {
    let cfg = agent_config(config)?;
    let s = scenario.inner.clone();
    let out = py
        .allow_threads(|| agent::train(&s, cfg, seed, None))
        .map_err(err)?;
    let metrics = ser(py, &out.metrics)?;
    Ok((
        PyAgent {
            inner: out.agent,
            penalty: Some(out.penalty),
        },
        metrics,
    ))
}

/// Dynamic-programming optimum over a price x battery action grid.
#[pyfunction]
#[pyo3(signature = (scenario, n_price = 3, n_battery = 3))]
fn dp_optimal(py: Python<'_>, scenario: &PyScenario, n_price: usize, n_battery: usize) -> PyResult<PyObject> {
    let grid = GridSpec::new(n_price, n_battery);
    let r = py
        .allow_threads(|| oracle::dp_optimal(&scenario.inner, &grid, &DpLimits::default()))
        .map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("value", r.best_value)?;
    d.set_item(
        "actions",
        r.best_actions.iter().map(|a| (a.a1, a.a2)).collect::<Vec<_>>(),
    )?;
    d.set_item("trace", ser(py, &r.trace)?)?;
    Ok(d.into_any().unbind())
}

/// Agent return over the DP optimum on a short scenario. Without an agent the
/// oracle's own actions are replayed.
#[pyfunction]
#[pyo3(signature = (scenario, agent = None, n_price = 3, n_battery = 3))]
fn certify(
    py: Python<'_>,
    scenario: &PyScenario,
    agent: Option<&PyAgent>,
    n_price: usize,
    n_battery: usize,
) -> PyResult<PyObject> {
    let grid = GridSpec::new(n_price, n_battery);
    let limits = DpLimits::default();
    let s = &scenario.inner;
    let report = match agent {
        Some(a) => oracle::certify(&mut agent::GreedyPolicy(&a.inner), s, &grid, &limits),
        None => oracle::dp_optimal(s, &grid, &limits).and_then(|o| {
            oracle::certify(&mut FixedActions(o.best_actions), s, &grid, &limits)
        }),
    }
    .map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("ratio", report.ratio)?;
    d.set_item("agent_return", report.agent_return)?;
    d.set_item("oracle_value", report.oracle.best_value)?;
    Ok(d.into_any().unbind())
}

/// Closed-form demand of a quadratic-utility user at `price`, clipped to [lo, hi].
#[pyfunction]
fn optimal_demand(u_a: f64, u_b: f64, lo: f64, hi: f64, price: f64) -> PyResult<f64> {
    if !(u_a < 0.0 && lo <= hi) {
        return Err(PyValueError::new_err("need u_a < 0 and lo <= hi"));
    }
    let user = UserProfile {
        u_a,
        u_b,
        d_lo: vec![lo],
        d_hi: vec![hi],
        d_ideal: vec![0.5 * (lo + hi)],
        epsilon: 0.0,
    };
    Ok(user_model::optimal_demand(&user, price, 0))
}

#[pymodule]
#[pyo3(name = "drlab")]
fn drlab_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScenario>()?;
    m.add_class::<PyMarketEnv>()?;
    m.add_class::<PyAgent>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(dp_optimal, m)?)?;
    m.add_function(wrap_pyfunction!(certify, m)?)?;
    m.add_function(wrap_pyfunction!(optimal_demand, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
