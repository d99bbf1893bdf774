//! Python bindings. Thin wrappers over the core types with list-based
//! conversions, so a notebook can drive the whole pipeline (generate,
//! train, embed, score, probe, estimate) without shelling out to the CLI.
//!
//! Embedding matrices cross the boundary as `list[list[float]]`; at desk
//! scale the copies are cheap and the module stays free of a numpy
//! build-time dependency.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict};

use agesplit_core::backbone;
use agesplit_core::checkpoint::{self, Checkpoint};
use agesplit_core::config::{Precision, RunConfig as CoreConfig};
use agesplit_core::scalar::{Dtype, Real};
use agesplit_core::synth::{self, Dataset as CoreDataset, Trial};
use agesplit_core::tensor::Tensor;
use agesplit_core::train::{self as core_train, FitOptions};
use agesplit_core::{gradsuite, metrics, mi, objectives, ParamSet};

fn pyerr(e: agesplit_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn rows_to_tensor<F: Real>(rows: &[Vec<f64>]) -> PyResult<Tensor<F>> {
    if rows.is_empty() {
        return Err(PyValueError::new_err("empty row list"));
    }
    let d = rows[0].len();
    let mut flat = Vec::with_capacity(rows.len() * d);
    for r in rows {
        if r.len() != d {
            return Err(PyValueError::new_err(format!(
                "ragged rows: {} vs {d}",
                r.len()
            )));
        }
        flat.extend(r.iter().map(|&v| F::from_f64(v)));
    }
    Tensor::from_rows(rows.len(), d, flat).map_err(pyerr)
}

fn tensor_to_rows<F: Real>(t: &Tensor<F>) -> Vec<Vec<f64>> {
    (0..t.shape()[0])
        .map(|i| t.row(i).iter().map(|&v| v.into_f64()).collect())
        .collect()
}

/// Config values arrive as Python literals; bools need lowercasing before
/// they hit the config key parser.
fn value_str(v: &Bound<'_, PyAny>) -> PyResult<String> {
    if v.is_instance_of::<PyBool>() {
        Ok(if v.extract::<bool>()? { "true" } else { "false" }.into())
    } else {
        Ok(v.str()?.to_string())
    }
}

/// Run settings. Accepts the same keys as a config file, as keyword
/// arguments: `RunConfig(num_speakers=20, mode="no_mim", precision="f64")`.
#[pyclass]
#[derive(Clone)]
struct RunConfig {
    inner: CoreConfig,
}

#[pymethods]
impl RunConfig {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut inner = CoreConfig::default();
        if let Some(kw) = kwargs {
            for (k, v) in kw.iter() {
                inner
                    .set(&k.extract::<String>()?, &value_str(&v)?)
                    .map_err(pyerr)?;
            }
        }
        Ok(RunConfig { inner })
    }

    /// Set a single key with config file syntax, e.g. set("mode", "no_aa").
    fn set(&mut self, key: &str, value: &Bound<'_, PyAny>) -> PyResult<()> {
        self.inner.set(key, &value_str(value)?).map_err(pyerr)
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(pyerr)
    }

    /// The full settings in config file form.
    fn __str__(&self) -> String {
        self.inner.emit()
    }

    fn __repr__(&self) -> String {
        format!(
            "<RunConfig mode={} precision={} seed={}>",
            self.inner.mode.as_str(),
            self.inner.precision.as_str(),
            self.inner.seed
        )
    }
}

enum Ds {
    F32(CoreDataset<f32>),
    F64(CoreDataset<f64>),
}

macro_rules! with_ds {
    ($ds:expr, $d:ident, $e:expr) => {
        match &$ds.inner {
            Ds::F32($d) => $e,
            Ds::F64($d) => $e,
        }
    };
}

/// A generated utterance set; index order is the on-disk manifest order.
#[pyclass]
struct Dataset {
    inner: Ds,
}

#[pymethods]
impl Dataset {
    fn __len__(&self) -> usize {
        with_ds!(self, d, d.len())
    }

    fn num_speakers(&self) -> usize {
        with_ds!(self, d, d.num_speakers())
    }

    fn utterance_ids(&self) -> Vec<String> {
        with_ds!(
            self,
            d,
            d.items.iter().map(|s| s.utterance_id.clone()).collect()
        )
    }

    fn speakers(&self) -> Vec<usize> {
        with_ds!(self, d, d.items.iter().map(|s| s.speaker_id).collect())
    }

    fn ages(&self) -> Vec<f64> {
        with_ds!(self, d, d.items.iter().map(|s| s.age_years).collect())
    }

    fn precision(&self) -> &'static str {
        match self.inner {
            Ds::F32(_) => "f32",
            Ds::F64(_) => "f64",
        }
    }

    fn __repr__(&self) -> String {
        format!(
            "<Dataset {} utterances, {} speakers, {}>",
            with_ds!(self, d, d.len()),
            self.num_speakers(),
            self.precision()
        )
    }
}

enum Ps {
    F32(ParamSet<f32>),
    F64(ParamSet<f64>),
}

/// Trained (or loaded) model parameters.
#[pyclass]
struct Model {
    inner: Ps,
}

fn embed_rows<F: Real>(
    p: &ParamSet<F>,
    d: &CoreDataset<F>,
) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let triples = backbone::embed_batch(p, &d.items).map_err(pyerr)?;
    let (init, age, id) = backbone::stack_triples(&triples).map_err(pyerr)?;
    Ok((
        tensor_to_rows(&init),
        tensor_to_rows(&age),
        tensor_to_rows(&id),
    ))
}

#[pymethods]
impl Model {
    fn precision(&self) -> &'static str {
        match self.inner {
            Ps::F32(_) => "f32",
            Ps::F64(_) => "f64",
        }
    }

    /// Embed every utterance; returns (x_init, x_age, x_id) row lists in
    /// dataset order.
    fn embed(
        &self,
        ds: &Dataset,
    ) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        match (&self.inner, &ds.inner) {
            (Ps::F32(p), Ds::F32(d)) => embed_rows(p, d),
            (Ps::F64(p), Ds::F64(d)) => embed_rows(p, d),
            _ => Err(PyValueError::new_err(
                "model and dataset precision differ",
            )),
        }
    }
}

enum Ck {
    F32(Checkpoint<f32>),
    F64(Checkpoint<f64>),
}

/// Outcome of a training run.
#[pyclass]
struct TrainResult {
    /// Header plus one tab-separated line per epoch.
    #[pyo3(get)]
    log: String,
    #[pyo3(get)]
    epochs_run: usize,
    #[pyo3(get)]
    steps: u64,
    ck: Ck,
}

#[pymethods]
impl TrainResult {
    fn model(&self) -> Model {
        let inner = match &self.ck {
            Ck::F32(c) => Ps::F32(c.model_params()),
            Ck::F64(c) => Ps::F64(c.model_params()),
        };
        Model { inner }
    }

    /// Write the checkpoint (model plus optimizer state).
    fn save(&self, path: PathBuf) -> PyResult<()> {
        match &self.ck {
            Ck::F32(c) => checkpoint::save(&path, c),
            Ck::F64(c) => checkpoint::save(&path, c),
        }
        .map_err(pyerr)
    }
}

/// Draw the synthetic corpus described by the config.
#[pyfunction]
fn generate(cfg: &RunConfig) -> PyResult<Dataset> {
    let inner = match cfg.inner.precision {
        Precision::F32 => Ds::F32(synth::generate(&cfg.inner).map_err(pyerr)?),
        Precision::F64 => Ds::F64(synth::generate(&cfg.inner).map_err(pyerr)?),
    };
    Ok(Dataset { inner })
}

fn run_train<F: Real>(
    py: Python<'_>,
    cfg: &CoreConfig,
    ds: &CoreDataset<F>,
    progress: Option<Py<PyAny>>,
) -> PyResult<(String, usize, u64, Checkpoint<F>)> {
    let outcome = py
        .allow_threads(|| {
            core_train::train(cfg, ds, |_, line, _| {
                if let Some(cb) = &progress {
                    Python::with_gil(|py| cb.call1(py, (line,)).map(drop)).map_err(|e| {
                        agesplit_core::Error::Invalid(format!("progress callback raised: {e}"))
                    })?;
                }
                Ok(())
            })
        })
        .map_err(pyerr)?;
    Ok((
        outcome.log,
        outcome.epochs_run,
        outcome.steps,
        outcome.checkpoint,
    ))
}

/// Run the alternating training loop. `progress`, when given, is called
/// with each finished epoch's log line.
#[pyfunction]
#[pyo3(signature = (cfg, ds, progress=None))]
fn train(
    py: Python<'_>,
    cfg: &RunConfig,
    ds: &Dataset,
    progress: Option<Py<PyAny>>,
) -> PyResult<TrainResult> {
    let want = match ds.inner {
        Ds::F32(_) => Precision::F32,
        Ds::F64(_) => Precision::F64,
    };
    if cfg.inner.precision != want {
        return Err(PyValueError::new_err(format!(
            "config precision {} but dataset is {}",
            cfg.inner.precision.as_str(),
            ds.precision()
        )));
    }
    let (log, epochs_run, steps, ck) = match &ds.inner {
        Ds::F32(d) => {
            let (log, e, s, c) = run_train(py, &cfg.inner, d, progress)?;
            (log, e, s, Ck::F32(c))
        }
        Ds::F64(d) => {
            let (log, e, s, c) = run_train(py, &cfg.inner, d, progress)?;
            (log, e, s, Ck::F64(c))
        }
    };
    Ok(TrainResult {
        log,
        epochs_run,
        steps,
        ck,
    })
}

/// Load a checkpoint written by `TrainResult.save` or the CLI.
#[pyfunction]
fn load_model(path: PathBuf) -> PyResult<Model> {
    let inner = match checkpoint::peek_dtype(&path).map_err(pyerr)? {
        Dtype::F32 => Ps::F32(checkpoint::load::<f32>(&path).map_err(pyerr)?.model_params()),
        Dtype::F64 => Ps::F64(checkpoint::load::<f64>(&path).map_err(pyerr)?.model_params()),
    };
    Ok(Model { inner })
}

/// Same-speaker / different-speaker pairs for a gap tier ("all", "gap05",
/// "gap10", "gap15", "gap20"); returns (enroll, test, is_target) triples.
#[pyfunction]
#[pyo3(signature = (ds, tier="all", match_group=true, seed=7))]
fn build_trials(
    ds: &Dataset,
    tier: &str,
    match_group: bool,
    seed: u64,
) -> PyResult<Vec<(usize, usize, bool)>> {
    let gap = synth::tier_min_gap(tier)
        .ok_or_else(|| PyValueError::new_err(format!("unknown trial tier `{tier}`")))?;
    let trials =
        with_ds!(ds, d, synth::build_trials(d, tier, gap, match_group, seed)).map_err(pyerr)?;
    Ok(trials.iter().map(|t| (t.enroll, t.test, t.target)).collect())
}

/// Cosine-score embedding rows over trials; returns (target scores,
/// nontarget scores) in trial order.
#[pyfunction]
fn score_trials(
    rows: Vec<Vec<f64>>,
    trials: Vec<(usize, usize, bool)>,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let t = rows_to_tensor::<f64>(&rows)?;
    let list: Vec<Trial> = trials
        .iter()
        .map(|&(enroll, test, target)| Trial {
            enroll,
            test,
            target,
        })
        .collect();
    metrics::score_trials(&t, &list).map_err(pyerr)
}

/// Equal error rate as (fraction, threshold); scores are similarities.
#[pyfunction]
fn eer(targets: Vec<f64>, nontargets: Vec<f64>) -> PyResult<(f64, f64)> {
    let r = metrics::eer(&targets, &nontargets).map_err(pyerr)?;
    Ok((r.eer, r.threshold))
}

/// Minimum normalized detection cost as (cost, threshold).
#[pyfunction]
#[pyo3(signature = (targets, nontargets, p_target=0.01, c_miss=1.0, c_fa=1.0))]
fn min_dcf(
    targets: Vec<f64>,
    nontargets: Vec<f64>,
    p_target: f64,
    c_miss: f64,
    c_fa: f64,
) -> PyResult<(f64, f64)> {
    let r = metrics::min_dcf(&targets, &nontargets, p_target, c_miss, c_fa).map_err(pyerr)?;
    Ok((r.min_dcf, r.threshold))
}

/// Holdout accuracy (percent) of a linear age-group probe on the rows.
#[pyfunction]
fn age_probe(rows: Vec<Vec<f64>>, ids: Vec<String>, ages: Vec<f64>) -> PyResult<f64> {
    let t = rows_to_tensor::<f64>(&rows)?;
    let groups: Vec<usize> = ages.iter().map(|&a| objectives::age_group(a)).collect();
    Ok(
        metrics::age_probe(&t, &ids, &groups, objectives::NUM_AGE_GROUPS)
            .map_err(pyerr)?
            .accuracy_pct,
    )
}

/// Jointly Gaussian (x, y) rows with the given per-dimension correlations.
#[pyfunction]
#[pyo3(signature = (n, rho, seed=7))]
fn gaussian_pairs(
    n: usize,
    rho: Vec<f64>,
    seed: u64,
) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let (x, y) = synth::gaussian_pairs::<f64>(n, &rho, seed).map_err(pyerr)?;
    Ok((tensor_to_rows(&x), tensor_to_rows(&y)))
}

/// Closed-form mutual information of such a pair, in nats.
#[pyfunction]
fn gaussian_mi(rho: Vec<f64>) -> f64 {
    synth::gaussian_mi(&rho)
}

/// Fit a fresh variational conditional on (x, y) rows, then report the
/// contrastive estimate over the same rows.
#[pyfunction]
#[pyo3(signature = (x, y, fit_steps=2000, fit_batch=256, fit_lr=1e-3, seed=7))]
fn fit_estimate_mi(
    py: Python<'_>,
    x: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    fit_steps: usize,
    fit_batch: usize,
    fit_lr: f64,
    seed: u64,
) -> PyResult<f64> {
    let (tx, ty) = (rows_to_tensor::<f64>(&x)?, rows_to_tensor::<f64>(&y)?);
    let opts = FitOptions {
        steps: fit_steps,
        batch_size: fit_batch,
        lr: fit_lr,
        weight_decay: 0.0,
        seed,
    };
    py.allow_threads(|| {
        let (params, _) = core_train::fit_estimator(&tx, &ty, &opts)?;
        mi::estimate_mi(&params, &tx, &ty)
    })
    .map_err(pyerr)
}

/// Central-difference check of every loss and pooling graph; returns
/// (case, max relative error) pairs.
#[pyfunction]
#[pyo3(signature = (seed=7, points=10))]
fn gradcheck(py: Python<'_>, seed: u64, points: usize) -> PyResult<Vec<(String, f64)>> {
    let reports = py
        .allow_threads(|| gradsuite::check_all(seed, points, gradsuite::DEFAULT_EPS))
        .map_err(pyerr)?;
    Ok(reports
        .into_iter()
        .map(|r| (r.name.to_string(), r.max_rel_err))
        .collect())
}

#[pymodule]
fn agesplit(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<RunConfig>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_class::<TrainResult>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(load_model, m)?)?;
    m.add_function(wrap_pyfunction!(build_trials, m)?)?;
    m.add_function(wrap_pyfunction!(score_trials, m)?)?;
    m.add_function(wrap_pyfunction!(eer, m)?)?;
    m.add_function(wrap_pyfunction!(min_dcf, m)?)?;
    m.add_function(wrap_pyfunction!(age_probe, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_pairs, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_mi, m)?)?;
    m.add_function(wrap_pyfunction!(fit_estimate_mi, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
