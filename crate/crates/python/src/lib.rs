//! Python bindings. Images cross the boundary as flat lists of floats in
//! channel-major order; shapes come from the model or config.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use eprobust::attacks::{cw_attack, pgd_attack, square_attack, AttackConfig, AttackFamily, AttackResult, Norm};
use eprobust::bench::checkpoint::Checkpoint;
use eprobust::bench::config::RunConfig;
use eprobust::bench::dataset::Split;
use eprobust::bench::records::{load_results, mean_robustness as mean_of};
use eprobust::corruptions::{self, CorruptionKind, CorruptionSpec};
use eprobust::model::{self, Classifier, ModelKind};
use eprobust::tensor::Tensor;
use eprobust::train;
use eprobust::uncertainty::{bootstrap_exponent, disagreement_curve, fit_exponent};

fn err(e: eprobust::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn tensor(shape: [usize; 3], data: Vec<f64>) -> PyResult<Tensor> {
    Tensor::new(shape.to_vec(), data).map_err(err)
}

fn tensors(shape: [usize; 3], xs: Vec<Vec<f64>>) -> PyResult<Vec<Tensor>> {
    xs.into_iter().map(|x| tensor(shape, x)).collect()
}

/// A trained model together with its run configuration.
#[pyclass(name = "Model", from_py_object)]
#[derive(Clone)]
struct PyModel {
    ckpt: Checkpoint,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            ckpt: Checkpoint::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.ckpt.save(&path).map_err(err)
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.ckpt.model.kind.as_str()
    }

    #[getter]
    fn input_shape(&self) -> (usize, usize, usize) {
        let [c, h, w] = self.ckpt.model.spec.input_shape;
        (c, h, w)
    }

    #[getter]
    fn classes(&self) -> usize {
        self.ckpt.model.spec.classes
    }

    #[getter]
    fn config(&self) -> String {
        self.ckpt.config.clone()
    }

    /// Free-phase step used for predictions and gradients (EP models).
    #[getter]
    fn timestep(&self) -> usize {
        self.ckpt.model.timestep()
    }

    #[setter]
    fn set_timestep(&mut self, t: usize) {
        self.ckpt.model.timestep = Some(t);
    }

    fn convergence_step(&self, xs: Vec<Vec<f64>>) -> PyResult<usize> {
        let xs = tensors(self.ckpt.model.spec.input_shape, xs)?;
        self.ckpt.model.convergence_step(&xs).map_err(err)
    }

    fn logits(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        let x = tensor(self.ckpt.model.spec.input_shape, x)?;
        Ok(self.ckpt.model.logits(&x).map_err(err)?.into_data())
    }

    fn predict(&self, x: Vec<f64>) -> PyResult<usize> {
        let x = tensor(self.ckpt.model.spec.input_shape, x)?;
        self.ckpt.model.predict(&x).map_err(err)
    }

    fn accuracy(&self, xs: Vec<Vec<f64>>, ys: Vec<usize>) -> PyResult<f64> {
        let xs = tensors(self.ckpt.model.spec.input_shape, xs)?;
        model::accuracy(&self.ckpt.model, &xs, &ys).map_err(err)
    }

    fn __repr__(&self) -> String {
        let [c, h, w] = self.ckpt.model.spec.input_shape;
        format!("Model(kind={:?}, input_shape=({c}, {h}, {w}), classes={})", self.kind(), self.classes())
    }
}

/// Trains a model of `kind` (`ep`, `bp` or `adv`) on the synthetic data the
/// config describes.
#[pyfunction]
fn train_synthetic(kind: &str, config: &str) -> PyResult<PyModel> {
    let cfg = RunConfig::parse(config).map_err(err)?;
    let kind = ModelKind::parse(kind).map_err(err)?;
    let data = cfg.synth_split(Split::Train).map_err(err)?;
    let mut tcfg = cfg.train.clone();
    if kind == ModelKind::Adv {
        tcfg.adversarial = Some(cfg.adversarial);
    }
    let (model, _) = train::train(kind, &data, None, &cfg.spec, &tcfg).map_err(err)?;
    Ok(PyModel {
        ckpt: Checkpoint {
            model,
            config: cfg.to_text(),
            seed: tcfg.seed,
        },
    })
}

/// `(images, labels)` of a synthetic split (`train` or `test`).
#[pyfunction]
fn synthetic_split(config: &str, split: &str) -> PyResult<(Vec<Vec<f64>>, Vec<usize>)> {
    let cfg = RunConfig::parse(config).map_err(err)?;
    let split = match split {
        "train" => Split::Train,
        "test" => Split::Test,
        other => return Err(PyValueError::new_err(format!("split must be train or test, got {other:?}"))),
    };
    let d = cfg.synth_split(split).map_err(err)?;
    Ok((d.images.into_iter().map(Tensor::into_data).collect(), d.labels))
}

fn result_dict<'py>(py: Python<'py>, r: AttackResult) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("robust_accuracy", r.robust_accuracy())?;
    d.set_item("success", r.outcomes.iter().map(|o| o.success).collect::<Vec<_>>())?;
    d.set_item("queries", r.outcomes.iter().map(|o| o.queries).collect::<Vec<_>>())?;
    d.set_item("norms", r.outcomes.iter().map(|o| o.norm).collect::<Vec<_>>())?;
    d.set_item("adversarial", r.adversarial.into_iter().map(Tensor::into_data).collect::<Vec<_>>())?;
    Ok(d)
}

/// Runs `pgd`, `cw` or `square`. `strength` is epsilon, or the constant c
/// for `cw`.
#[pyfunction]
#[pyo3(signature = (model, xs, ys, family, strength, norm = "linf", seed = 0, steps = None, query_budget = 5000))]
#[allow(clippy::too_many_arguments)]
fn attack<'py>(
    py: Python<'py>,
    model: &PyModel,
    xs: Vec<Vec<f64>>,
    ys: Vec<usize>,
    family: &str,
    strength: f64,
    norm: &str,
    seed: u64,
    steps: Option<usize>,
    query_budget: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let m = &model.ckpt.model;
    let xs = tensors(m.spec.input_shape, xs)?;
    let norm = Norm::parse(norm).map_err(err)?;
    let mut cfg = match AttackFamily::parse(family).map_err(err)? {
        AttackFamily::Pgd => AttackConfig::pgd(norm, strength),
        AttackFamily::Cw => AttackConfig::cw(strength),
        AttackFamily::Square => AttackConfig::square(strength),
    }
    .with_seed(seed);
    if let Some(s) = steps {
        cfg.steps = s;
    }
    cfg.query_budget = query_budget;
    let r = match cfg.family {
        AttackFamily::Pgd => pgd_attack(m, &xs, &ys, &cfg),
        AttackFamily::Cw => cw_attack(m, &xs, &ys, &cfg),
        AttackFamily::Square => square_attack(m, &xs, &ys, &cfg),
    }
    .map_err(err)?;
    result_dict(py, r)
}

/// Corrupts one image; `shape` is `(channels, height, width)`.
#[pyfunction]
#[pyo3(signature = (x, shape, kind, severity, seed = 0))]
fn corrupt(x: Vec<f64>, shape: (usize, usize, usize), kind: &str, severity: u8, seed: u64) -> PyResult<Vec<f64>> {
    let x = tensor([shape.0, shape.1, shape.2], x)?;
    let spec = CorruptionSpec {
        kind: CorruptionKind::parse(kind).map_err(err)?,
        severity,
        seed,
    };
    Ok(corruptions::corrupt(&x, &spec).map_err(err)?.into_data())
}

/// Disagreement rates over `eps_grid`, the fitted exponent (or None) and a
/// 95% bootstrap interval (or None).
#[pyfunction]
#[pyo3(signature = (model, xs, eps_grid, samples = 100, norm = "l2", seed = 0, bootstrap = 200))]
#[allow(clippy::type_complexity)]
fn uncertainty(
    model: &PyModel,
    xs: Vec<Vec<f64>>,
    eps_grid: Vec<f64>,
    samples: usize,
    norm: &str,
    seed: u64,
    bootstrap: usize,
) -> PyResult<(Vec<f64>, Option<f64>, Option<(f64, f64)>)> {
    let m = &model.ckpt.model;
    let xs = tensors(m.spec.input_shape, xs)?;
    let norm = Norm::parse(norm).map_err(err)?;
    let curve = disagreement_curve(m, &xs, norm, &eps_grid, samples, seed).map_err(err)?;
    let alpha = fit_exponent(&curve).ok().map(|f| f.alpha);
    Ok((curve.rates(), alpha, bootstrap_exponent(&curve, bootstrap, 0.95, seed)))
}

/// Mean robustness over result files (CSV or JSON).
#[pyfunction]
fn mean_robustness(paths: Vec<PathBuf>) -> PyResult<f64> {
    let mut rows = Vec::new();
    for p in &paths {
        rows.extend(load_results(p).map_err(err)?);
    }
    mean_of(&rows).map_err(err)
}

#[pymodule]
fn eprobust_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_split, m)?)?;
    m.add_function(wrap_pyfunction!(attack, m)?)?;
    m.add_function(wrap_pyfunction!(corrupt, m)?)?;
    m.add_function(wrap_pyfunction!(uncertainty, m)?)?;
    m.add_function(wrap_pyfunction!(mean_robustness, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
