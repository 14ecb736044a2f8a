//! Python bindings for the `mfcast` forecasting library.
//!
//! Missing-feature patterns cross the boundary as lists of missing feature
//! indices; matrices as lists of rows.

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyIOError, PyValueError};
use pyo3::prelude::*;

use mfcast::adversarial::{find_adversarial, train_adversarial};
use mfcast::dataio::{self, split_sequential};
use mfcast::evalx;
use mfcast::missingness::simulate_markov as simulate;
use mfcast::models::{forward, mse};
use mfcast::partition::{self, learn_partition, PartitionConfig, UncertaintySet};
use mfcast::training::{self, TrainData};
use mfcast::{AdvSearchScope, Error, Family, MissingPattern, MissingnessConfig, ModelSpec, SynthConfig};

create_exception!(mfcast_py, MfcastError, PyException, "Training or evaluation failure.");

fn to_py(err: Error) -> PyErr {
    match err {
        Error::Io { .. } => PyIOError::new_err(err.to_string()),
        Error::Training { .. } | Error::Capacity(_) => MfcastError::new_err(err.to_string()),
        _ => PyValueError::new_err(err.to_string()),
    }
}

fn pattern(p: usize, missing: &[usize]) -> PyResult<MissingPattern> {
    if let Some(j) = missing.iter().find(|&&j| j >= p) {
        return Err(PyValueError::new_err(format!("feature {j} out of range for {p} features")));
    }
    Ok(MissingPattern::from_indices(p, missing))
}

fn spec_from(family: &str, hidden: Vec<usize>, adaptive: bool) -> PyResult<ModelSpec> {
    match family {
        "lr" => Ok(ModelSpec::lr(adaptive)),
        "nn" => Ok(ModelSpec::nn(hidden, adaptive)),
        other => Err(PyValueError::new_err(format!("unknown family `{other}` (use `lr` or `nn`)"))),
    }
}

/// Optimizer settings shared by all trainers.
#[pyclass(module = "mfcast_py", from_py_object)]
#[derive(Clone)]
struct TrainConfig {
    inner: training::TrainConfig,
}

#[pymethods]
impl TrainConfig {
    #[new]
    #[pyo3(signature = (learning_rate=1e-3, max_iters=1000, patience=20, batch_size=512, weight_decay=1e-5, seed=0, shuffle=false))]
    fn new(
        learning_rate: f64,
        max_iters: usize,
        patience: usize,
        batch_size: usize,
        weight_decay: f64,
        seed: u64,
        shuffle: bool,
    ) -> PyResult<Self> {
        let inner = training::TrainConfig {
            learning_rate,
            max_iters,
            patience,
            batch_size,
            weight_decay,
            seed,
            shuffle,
        };
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    fn __repr__(&self) -> String {
        let c = &self.inner;
        format!(
            "TrainConfig(learning_rate={}, max_iters={}, patience={}, batch_size={}, weight_decay={}, seed={}, shuffle={})",
            c.learning_rate, c.max_iters, c.patience, c.batch_size, c.weight_decay, c.seed, c.shuffle
        )
    }
}

/// Normalized production of several plants on a regular period grid.
#[pyclass(module = "mfcast_py")]
struct RawSeries {
    inner: mfcast::RawSeries,
}

#[pymethods]
impl RawSeries {
    #[staticmethod]
    #[pyo3(signature = (n_plants=4, n_periods=8000, ar_coefficient=0.98, cross_plant_correlation=0.8, noise_std=0.1, seed=0, weather=true))]
    fn synth(
        n_plants: usize,
        n_periods: usize,
        ar_coefficient: f64,
        cross_plant_correlation: f64,
        noise_std: f64,
        seed: u64,
        weather: bool,
    ) -> PyResult<Self> {
        let cfg = SynthConfig {
            n_plants,
            n_periods,
            ar_coefficient,
            cross_plant_correlation,
            noise_std,
            seed,
            weather,
            ..SynthConfig::default()
        };
        Ok(Self {
            inner: mfcast::gen_synthetic(&cfg).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load_csv(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: mfcast::load_csv(path).map_err(to_py)?,
        })
    }

    fn to_csv(&self, path: &str) -> PyResult<()> {
        dataio::write_csv(&self.inner, path).map_err(to_py)
    }

    #[getter]
    fn n_periods(&self) -> usize {
        self.inner.n_periods()
    }

    #[getter]
    fn n_plants(&self) -> usize {
        self.inner.n_plants()
    }

    /// `n_periods` rows of per-plant values.
    fn values(&self) -> Vec<Vec<f64>> {
        (0..self.inner.n_periods()).map(|t| self.inner.values.row(t).to_vec()).collect()
    }

    fn weather(&self) -> Option<Vec<f64>> {
        self.inner.weather.clone()
    }

    /// Lagged supervised matrix for one target plant and horizon.
    #[pyo3(signature = (target_plant=0, max_lag=2, horizon=1))]
    fn supervised(&self, target_plant: usize, max_lag: usize, horizon: usize) -> PyResult<Dataset> {
        Ok(Dataset {
            inner: mfcast::build_supervised(&self.inner, target_plant, max_lag, horizon).map_err(to_py)?,
        })
    }

    fn __repr__(&self) -> String {
        format!("RawSeries(n_plants={}, n_periods={})", self.n_plants(), self.n_periods())
    }
}

/// Feature matrix, targets and the indices of the maskable features.
#[pyclass(module = "mfcast_py")]
struct Dataset {
    inner: mfcast::Dataset,
}

#[pymethods]
impl Dataset {
    #[getter]
    fn n_rows(&self) -> usize {
        self.inner.n_rows()
    }

    #[getter]
    fn n_features(&self) -> usize {
        self.inner.n_features()
    }

    #[getter]
    fn maskable(&self) -> Vec<usize> {
        self.inner.maskable.clone()
    }

    #[getter]
    fn y(&self) -> Vec<f64> {
        self.inner.y.clone()
    }

    fn x(&self) -> Vec<Vec<f64>> {
        (0..self.inner.n_rows()).map(|r| self.inner.x.row(r).to_vec()).collect()
    }

    fn feature_labels(&self) -> Vec<String> {
        self.inner.descriptors.iter().map(|d| d.label()).collect()
    }

    /// Sequential (train, validation, test) split.
    #[pyo3(signature = (train_frac=0.8, val_frac=0.2))]
    fn split(&self, train_frac: f64, val_frac: f64) -> PyResult<(Dataset, Dataset, Dataset)> {
        let (a, b, c) = split_sequential(&self.inner, train_frac, val_frac).map_err(to_py)?;
        Ok((Dataset { inner: a }, Dataset { inner: b }, Dataset { inner: c }))
    }

    fn __len__(&self) -> usize {
        self.inner.n_rows()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(n_rows={}, n_features={}, maskable={})",
            self.inner.n_rows(),
            self.inner.n_features(),
            self.inner.maskable.len()
        )
    }
}

/// Trained model parameters.
#[pyclass(module = "mfcast_py")]
struct Model {
    inner: mfcast::ModelParams,
}

#[pymethods]
impl Model {
    #[pyo3(signature = (x, missing=Vec::new()))]
    fn predict(&self, x: Vec<f64>, missing: Vec<usize>) -> PyResult<f64> {
        let a = pattern(x.len(), &missing)?;
        forward(&self.inner, &x, &a).map_err(to_py)
    }

    /// Mean squared error on `ds` with the same features missing in every row.
    #[pyo3(signature = (ds, missing=Vec::new()))]
    fn mse(&self, ds: &Dataset, missing: Vec<usize>) -> PyResult<f64> {
        let a = pattern(ds.inner.n_features(), &missing)?;
        mse(&self.inner, &ds.inner, &a).map_err(to_py)
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.inner.n_params()
    }

    #[getter]
    fn adaptive(&self) -> bool {
        self.inner.adaptive
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        Ok(Self {
            inner: serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))?,
        })
    }

    fn __repr__(&self) -> String {
        let family = match self.inner.family {
            Family::Lr => "lr",
            Family::Nn => "nn",
        };
        format!("Model(family={family}, adaptive={}, n_params={})", self.inner.adaptive, self.inner.n_params())
    }
}

/// Deployable model: a single model or a partition of missing patterns.
#[pyclass(module = "mfcast_py")]
struct Artifact {
    inner: partition::Artifact,
}

impl Artifact {
    fn tree(&self) -> PyResult<&partition::Partition> {
        match &self.inner {
            partition::Artifact::Learned(p) => Ok(p),
            _ => Err(PyValueError::new_err("artifact is not a learned partition")),
        }
    }
}

#[pymethods]
impl Artifact {
    #[pyo3(signature = (x, missing=Vec::new()))]
    fn predict(&self, x: Vec<f64>, missing: Vec<usize>) -> PyResult<f64> {
        let a = pattern(x.len(), &missing)?;
        self.inner.predict(&x, &a).map_err(to_py)
    }

    /// Leaf id a missing pattern is routed to.
    fn locate(&self, missing: Vec<usize>) -> PyResult<usize> {
        let tree = self.tree()?;
        let a = pattern(tree.uncertainty.n_features, &missing)?;
        tree.locate(&a).map_err(to_py)
    }

    fn leaf_ids(&self) -> PyResult<Vec<usize>> {
        Ok(self.tree()?.leaf_ids())
    }

    fn max_relgap(&self) -> PyResult<f64> {
        Ok(self.tree()?.max_relgap())
    }

    fn bounds_table(&self) -> PyResult<String> {
        Ok(self.tree()?.bounds_table())
    }

    /// The first `max_subsets` subsets of a learned partition.
    fn truncate(&self, max_subsets: usize) -> PyResult<Artifact> {
        Ok(Artifact {
            inner: partition::Artifact::Learned(self.tree()?.truncate(max_subsets).map_err(to_py)?),
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(to_py)
    }

    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        Ok(Self {
            inner: partition::Artifact::from_json(s).map_err(to_py)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: partition::Artifact::load(path).map_err(to_py)?,
        })
    }

    fn __repr__(&self) -> String {
        match &self.inner {
            partition::Artifact::Single { .. } => "Artifact(single)".into(),
            partition::Artifact::Learned(p) => format!("Artifact(learned, leaves={})", p.leaf_ids().len()),
            partition::Artifact::Fixed(f) => format!("Artifact(fixed, subsets={})", f.subsets.len()),
        }
    }
}

fn train_data<'a>(train: &'a Dataset, val: &'a Dataset) -> PyResult<TrainData<'a>> {
    TrainData::new(&train.inner, &val.inner).map_err(to_py)
}

/// Trains with a fixed set of missing features; returns `(model, val_loss)`.
#[pyfunction]
#[pyo3(signature = (train, val, cfg, family="lr", hidden=vec![50, 50, 50, 50], adaptive=false, missing=Vec::new()))]
#[allow(clippy::too_many_arguments)]
fn train_nominal(
    py: Python<'_>,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    family: &str,
    hidden: Vec<usize>,
    adaptive: bool,
    missing: Vec<usize>,
) -> PyResult<(Model, f64)> {
    let spec = spec_from(family, hidden, adaptive)?;
    let data = train_data(train, val)?;
    let a = pattern(train.inner.n_features(), &missing)?;
    let out = py
        .detach(|| training::train_nominal(data, &a, &cfg.inner, &spec, None))
        .map_err(to_py)?;
    Ok((Model { inner: out.params }, out.loss))
}

/// Robust training against up to `budget` missing features; returns
/// `(model, worst-case val_loss)`.
#[pyfunction(name = "train_adversarial")]
#[pyo3(signature = (train, val, cfg, budget, family="lr", hidden=vec![50, 50, 50, 50], adaptive=false))]
#[allow(clippy::too_many_arguments)]
fn train_adversarial_py(
    py: Python<'_>,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    budget: usize,
    family: &str,
    hidden: Vec<usize>,
    adaptive: bool,
) -> PyResult<(Model, f64)> {
    let spec = spec_from(family, hidden, adaptive)?;
    let data = train_data(train, val)?;
    let scope = AdvSearchScope::full(train.inner.n_features(), &train.inner.maskable, budget);
    let out = py
        .detach(|| train_adversarial(data, &scope, &cfg.inner, &spec))
        .map_err(to_py)?;
    Ok((Model { inner: out.params }, out.loss))
}

/// Greedy worst-case pattern for `model` on `ds`; returns
/// `(missing features, loss)`.
#[pyfunction(name = "find_adversarial")]
fn find_adversarial_py(ds: &Dataset, model: &Model, budget: usize) -> PyResult<(Vec<usize>, f64)> {
    let scope = AdvSearchScope::full(ds.inner.n_features(), &ds.inner.maskable, budget);
    let res = find_adversarial(&ds.inner, &scope, &model.inner).map_err(to_py)?;
    Ok((res.alpha.missing_indices(), res.loss))
}

/// Learns a partition of the patterns with at most `budget` missing features.
#[pyfunction(name = "learn_partition")]
#[pyo3(signature = (train, val, cfg, budget, max_subsets=10, epsilon=0.001, family="lr", hidden=vec![50, 50, 50, 50], adaptive=true))]
#[allow(clippy::too_many_arguments)]
fn learn_partition_py(
    py: Python<'_>,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    budget: usize,
    max_subsets: usize,
    epsilon: f64,
    family: &str,
    hidden: Vec<usize>,
    adaptive: bool,
) -> PyResult<Artifact> {
    let spec = spec_from(family, hidden, adaptive)?;
    let data = train_data(train, val)?;
    let u = UncertaintySet::new(train.inner.n_features(), train.inner.maskable.clone(), budget).map_err(to_py)?;
    let pcfg = PartitionConfig { max_subsets, epsilon };
    let part = py
        .detach(|| learn_partition(data, &u, &pcfg, &cfg.inner, &spec))
        .map_err(to_py)?;
    Ok(Artifact {
        inner: partition::Artifact::Learned(part),
    })
}

/// One subset per missing-feature count `0..=budget`.
#[pyfunction(name = "fixed_partition")]
#[pyo3(signature = (train, val, cfg, budget, family="lr", hidden=vec![50, 50, 50, 50], adaptive=false))]
#[allow(clippy::too_many_arguments)]
fn fixed_partition_py(
    py: Python<'_>,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    budget: usize,
    family: &str,
    hidden: Vec<usize>,
    adaptive: bool,
) -> PyResult<Artifact> {
    let spec = spec_from(family, hidden, adaptive)?;
    let data = train_data(train, val)?;
    let u = UncertaintySet::new(train.inner.n_features(), train.inner.maskable.clone(), budget).map_err(to_py)?;
    let fp = py
        .detach(|| partition::fixed_partition(data, &u, &cfg.inner, &spec))
        .map_err(to_py)?;
    Ok(Artifact {
        inner: partition::Artifact::Fixed(fp),
    })
}

/// Per-plant two-state availability chains; `True` marks a missing value.
#[pyfunction]
fn simulate_markov(p01: f64, p11: f64, seed: u64, periods: usize, plants: usize) -> PyResult<Vec<Vec<bool>>> {
    let mask = simulate(&MissingnessConfig { p01, p11, seed }, periods, plants).map_err(to_py)?;
    Ok((0..periods)
        .map(|t| (0..plants).map(|s| mask.get(t, s)).collect())
        .collect())
}

/// RMSE as a percentage of the mean actual value.
#[pyfunction]
fn nrmse(preds: Vec<f64>, actuals: Vec<f64>) -> PyResult<f64> {
    evalx::nrmse(&preds, &actuals).map_err(to_py)
}

/// Pairwise test of equal accuracy; returns `(statistic, p_value)`.
#[pyfunction]
fn dm_test(loss_a: Vec<f64>, loss_b: Vec<f64>) -> PyResult<(f64, f64)> {
    let r = evalx::dm_test(&loss_a, &loss_b).map_err(to_py)?;
    Ok((r.statistic, r.p_value))
}

#[pymodule]
fn mfcast_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("MfcastError", m.py().get_type::<MfcastError>())?;
    m.add_class::<TrainConfig>()?;
    m.add_class::<RawSeries>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_class::<Artifact>()?;
    m.add_function(wrap_pyfunction!(train_nominal, m)?)?;
    m.add_function(wrap_pyfunction!(train_adversarial_py, m)?)?;
    m.add_function(wrap_pyfunction!(find_adversarial_py, m)?)?;
    m.add_function(wrap_pyfunction!(learn_partition_py, m)?)?;
    m.add_function(wrap_pyfunction!(fixed_partition_py, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_markov, m)?)?;
    m.add_function(wrap_pyfunction!(nrmse, m)?)?;
    m.add_function(wrap_pyfunction!(dm_test, m)?)?;
    Ok(())
}
