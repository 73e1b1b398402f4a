//! Python bindings: the model, its expansion, and both oracles, driven
//! in-process from Python. State fields cross the boundary as nested lists
//! indexed [state][grid node].
//!
//! Usage from Python (see python/smoke_test.py):
//!
//!     import evomax_py as evx
//!     model = evx.Model.from_json(config_text)
//!     expansion = model.expand(order=3)
//!     values = expansion.evaluate(order=2, eps=0.05, t=0.5)
//!     mean, stderr = model.mc_estimate(eps=0.05, t=0.5, u=1.57, x=0)

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use evomax::config::ModelConfig;
use evomax::expansion::{expand_to, BuildTolerances, ExpansionResult};
use evomax::function_space::StateField;
use evomax::oracle::{self, DirectConfig};
use evomax::validation;

/// Snapshots as [time][state][node] plus the solver grid nodes.
type SolveOutput = (Vec<f64>, Vec<Vec<Vec<f64>>>);
/// (order, slope, band_low, band_high, certified).
type SweepRowOut = (usize, f64, f64, f64, bool);

fn to_py_err(e: evomax::Error) -> PyErr {
    if e.exit_code() == 2 {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn field_to_lists(f: &StateField) -> Vec<Vec<f64>> {
    (0..f.n_states())
        .map(|x| (0..f.grid.n_points).map(|i| f.values[(x, i)]).collect())
        .collect()
}

/// A validated model: switching chain, velocities, test function and grids.
#[pyclass]
struct Model {
    inner: evomax::model::Model,
    hash: String,
}

#[pymethods]
impl Model {
    /// Build a model from JSON config text.
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Model> {
        let cfg = ModelConfig::from_json(text).map_err(to_py_err)?;
        let inner = evomax::model::Model::from_config(&cfg).map_err(to_py_err)?;
        Ok(Model {
            inner,
            hash: cfg.hash(),
        })
    }

    /// Build a model from a JSON config file.
    #[staticmethod]
    fn from_file(path: &str) -> PyResult<Model> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PyValueError::new_err(format!("{path}: {e}")))?;
        Model::from_json(&text)
    }

    #[getter]
    fn n_states(&self) -> usize {
        self.inner.n_states()
    }

    #[getter]
    fn config_hash(&self) -> &str {
        &self.hash
    }

    /// Stationary distribution of the switching chain.
    #[getter]
    fn stationary(&self) -> Vec<f64> {
        self.inner.chain.pi.as_vector().iter().copied().collect()
    }

    #[getter]
    fn spectral_gap(&self) -> f64 {
        self.inner.chain.gap.gamma
    }

    /// Grid nodes that fields are sampled on.
    #[getter]
    fn grid(&self) -> Vec<f64> {
        self.inner.grid.nodes()
    }

    /// Stored time nodes of the slow grid.
    #[getter]
    fn times(&self) -> Vec<f64> {
        (0..=self.inner.time.n_steps)
            .map(|j| self.inner.time.time(j))
            .collect()
    }

    /// pi-averaged velocity at a position.
    fn average_velocity(&self, u: f64) -> f64 {
        self.inner.vhat.eval(u)
    }

    /// Build the expansion to `order` (default: the configured order).
    #[pyo3(signature = (order=None))]
    fn expand(&self, order: Option<usize>) -> PyResult<Expansion> {
        let order = order.unwrap_or(self.inner.order);
        let inner = expand_to(&self.inner, order, BuildTolerances::default()).map_err(to_py_err)?;
        Ok(Expansion { inner })
    }

    /// Direct solve of the backward system; returns [time][state][node]
    /// values on the (possibly refined) solver grid, plus that grid.
    #[pyo3(signature = (eps, times, refine=1))]
    fn direct_solve(&self, eps: f64, times: Vec<f64>, refine: usize) -> PyResult<SolveOutput> {
        let cfg = DirectConfig {
            refine: refine.max(1),
            ..DirectConfig::default()
        };
        let sol = oracle::direct_solve(&self.inner, eps, &times, cfg).map_err(to_py_err)?;
        let values = sol.snapshots.iter().map(field_to_lists).collect();
        Ok((sol.grid.nodes(), values))
    }

    /// Monte Carlo estimate of Phi(u, x, t); returns (mean, stderr).
    #[pyo3(signature = (eps, t, u, x, n_paths=None, seed=None, workers=1))]
    #[allow(clippy::too_many_arguments)]
    fn mc_estimate(
        &self,
        eps: f64,
        t: f64,
        u: f64,
        x: usize,
        n_paths: Option<u64>,
        seed: Option<u64>,
        workers: usize,
    ) -> PyResult<(f64, f64)> {
        let est = oracle::mc_estimate_with_workers(
            &self.inner,
            eps,
            t,
            u,
            x,
            n_paths.unwrap_or(self.inner.mc_paths),
            seed.unwrap_or(self.inner.mc_seed),
            workers,
        )
        .map_err(to_py_err)?;
        Ok((est.mean, est.stderr))
    }

    /// Convergence-order sweep; returns rows of
    /// (order, slope, band_low, band_high, certified).
    #[pyo3(signature = (orders, epsilons=None, t=None))]
    fn sweep(
        &self,
        orders: Vec<usize>,
        epsilons: Option<Vec<f64>>,
        t: Option<f64>,
    ) -> PyResult<Vec<SweepRowOut>> {
        let epsilons = epsilons.unwrap_or_else(|| self.inner.epsilons.clone());
        let t = t.unwrap_or(self.inner.time.t_end);
        let max_order = orders.iter().copied().max().unwrap_or(0);
        let expansion =
            expand_to(&self.inner, max_order, BuildTolerances::default()).map_err(to_py_err)?;
        let rows =
            validation::sweep(&self.inner, &expansion, &orders, &epsilons, t).map_err(to_py_err)?;
        Ok(rows
            .iter()
            .map(|r| {
                (
                    r.order,
                    r.fit.slope,
                    r.fit.band.0,
                    r.fit.band.1,
                    r.certified,
                )
            })
            .collect())
    }
}

/// A computed expansion: terms on their grids plus per-order diagnostics.
#[pyclass]
struct Expansion {
    inner: ExpansionResult,
}

#[pymethods]
impl Expansion {
    #[getter]
    fn order(&self) -> usize {
        self.inner.order
    }

    /// Evaluate the order-N truncation at (eps, t) as [state][node].
    #[pyo3(signature = (order, eps, t, include_layers=true))]
    fn evaluate(
        &self,
        order: usize,
        eps: f64,
        t: f64,
        include_layers: bool,
    ) -> PyResult<Vec<Vec<f64>>> {
        let f = self
            .inner
            .evaluate(order, eps, t, include_layers)
            .map_err(to_py_err)?;
        Ok(field_to_lists(&f))
    }

    /// Regular term u_k at a stored time index, as [state][node].
    fn regular_term(&self, k: usize, t_index: usize) -> PyResult<Vec<Vec<f64>>> {
        let series = self
            .inner
            .regular
            .get(k)
            .ok_or_else(|| PyValueError::new_err(format!("no regular term {k}")))?;
        let f = series
            .fields
            .get(t_index)
            .ok_or_else(|| PyValueError::new_err(format!("no time index {t_index}")))?;
        Ok(field_to_lists(f))
    }

    /// Scalar correction c_k at a stored time index (k >= 1).
    fn correction(&self, k: usize, t_index: usize) -> PyResult<Vec<f64>> {
        if k == 0 {
            return Err(PyValueError::new_err("corrections start at k = 1"));
        }
        let series = self
            .inner
            .corrections
            .get(k - 1)
            .ok_or_else(|| PyValueError::new_err(format!("no correction {k}")))?;
        let g = series
            .values
            .get(t_index)
            .ok_or_else(|| PyValueError::new_err(format!("no time index {t_index}")))?;
        Ok(g.values.iter().copied().collect())
    }

    /// Layer term w_k at a stored tau index (k >= 1), as [state][node].
    fn singular_term(&self, k: usize, tau_index: usize) -> PyResult<Vec<Vec<f64>>> {
        if k == 0 {
            return Err(PyValueError::new_err("layer terms start at k = 1"));
        }
        let series = self
            .inner
            .singular
            .get(k - 1)
            .ok_or_else(|| PyValueError::new_err(format!("no layer term {k}")))?;
        let f = series
            .fields
            .get(tau_index)
            .ok_or_else(|| PyValueError::new_err(format!("no tau index {tau_index}")))?;
        Ok(field_to_lists(f))
    }

    /// Stored fast-time nodes.
    #[getter]
    fn taus(&self) -> Vec<f64> {
        (0..=self.inner.layer.n_tau)
            .map(|m| self.inner.layer.tau(m))
            .collect()
    }

    /// Per-order solvability residuals sup |Pi L u_k|, k = 1..=order.
    #[getter]
    fn solvability(&self) -> Vec<f64> {
        self.inner.solvability.clone()
    }

    /// Per-order initial-matching defects sup |u_k(0) + w_k(0)|.
    #[getter]
    fn matching(&self) -> Vec<f64> {
        self.inner.matching.clone()
    }

    /// Per-order layer decay sup |w_k(tau_max)|.
    #[getter]
    fn layer_decay(&self) -> Vec<f64> {
        self.inner.layer_decay.clone()
    }
}

#[pymodule]
fn evomax_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_class::<Expansion>()?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
