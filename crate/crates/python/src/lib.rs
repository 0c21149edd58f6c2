//! Python bindings. Matrices cross the boundary as lists of row lists.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use gam_core::verify;
use gam_core::{
    Checkpoint, FeatureMap, GamError, GamHeadParams, InputSequence, LanguageModel, MixtureSpec, ParamSet,
    RunConfig, Tensor, TokenWithLocation,
};

type Rows = Vec<Vec<f64>>;

fn py_err(e: GamError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: &Rows) -> PyResult<Tensor> {
    Tensor::from_rows(rows).map_err(py_err)
}

fn feature_map(n1: Option<f64>, coeffs: Option<Vec<f64>>) -> PyResult<FeatureMap> {
    match (n1, coeffs) {
        (Some(_), Some(_)) => Err(PyValueError::new_err("pass either n1 or coeffs, not both")),
        (_, Some(coeffs)) => Ok(FeatureMap::Polynomial { coeffs }),
        (n1, None) => Ok(FeatureMap::PowerLaw { n1: n1.unwrap_or(1.0) }),
    }
}

/// Relative-position vectors for strictly increasing corpus locations.
#[pyfunction]
fn build_r(locations: Vec<u64>) -> PyResult<Vec<Vec<u64>>> {
    Ok(gam_core::build_r(&locations).map_err(py_err)?.to_rows())
}

#[pyfunction]
fn signed_pow(x: f64, n1: f64) -> PyResult<f64> {
    gam_core::signed_pow(x, n1).map_err(py_err)
}

/// `W^Q (W^K)ᵀ / √d_k`.
#[pyfunction]
fn compose_b(w_q: Rows, w_k: Rows) -> PyResult<Rows> {
    let w_q = matrix(&w_q)?;
    let w_v = Tensor::zeros(&[w_q.rows(), 1]);
    let params = gam_core::BaselineHeadParams::new(w_q, matrix(&w_k)?, w_v).map_err(py_err)?;
    Ok(gam_core::compose_b(&params).to_rows())
}

/// Scaled dot-product attention output.
#[pyfunction]
fn baseline_head(y: Rows, w_q: Rows, w_k: Rows, w_v: Rows) -> PyResult<Rows> {
    let seq = InputSequence::new(matrix(&y)?).map_err(py_err)?;
    let params = gam_core::BaselineHeadParams::new(matrix(&w_q)?, matrix(&w_k)?, matrix(&w_v)?).map_err(py_err)?;
    Ok(gam_core::baseline_head(&seq, &params).map_err(py_err)?.to_rows())
}

/// Generalized attention head output. `mixture_logits=None` weighs brains uniformly;
/// `coeffs` selects the polynomial feature map, otherwise the power law with `n1`.
#[pyfunction]
#[pyo3(signature = (y, brains, w_v, n1=None, coeffs=None, mixture_logits=None, causal=false))]
fn gam_head(
    y: Rows,
    brains: Vec<Rows>,
    w_v: Rows,
    n1: Option<f64>,
    coeffs: Option<Vec<f64>>,
    mixture_logits: Option<Vec<f64>>,
    causal: bool,
) -> PyResult<Rows> {
    let mut seq = InputSequence::new(matrix(&y)?).map_err(py_err)?;
    seq.causal = causal;
    let mixture = match mixture_logits {
        Some(logits) => MixtureSpec::LearnedSimplex { logits },
        None => MixtureSpec::FixedUniform { n_b: brains.len() },
    };
    let params = GamHeadParams {
        brains: brains.iter().map(matrix).collect::<PyResult<_>>()?,
        w_v: matrix(&w_v)?,
        mixture,
        fmap: feature_map(n1, coeffs)?,
    };
    Ok(gam_core::gam_head(&seq, &params).map_err(py_err)?.to_rows())
}

#[pyfunction]
#[pyo3(signature = (seed=0, trials=100, perturb=0.0))]
fn equiv_check<'py>(py: Python<'py>, seed: u64, trials: usize, perturb: f64) -> PyResult<Bound<'py, PyDict>> {
    let rep = verify::equiv_check(seed, trials, perturb).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("trials", rep.trials)?;
    d.set_item("max_deviation", rep.max_deviation)?;
    d.set_item("failing_seed", rep.failing_seed)?;
    d.set_item("passed", rep.passed())?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (config_json, seed=0, trials=10, batch_size=2, perturb=0.0))]
fn grad_check<'py>(
    py: Python<'py>,
    config_json: &str,
    seed: u64,
    trials: usize,
    batch_size: usize,
    perturb: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = RunConfig::from_json(config_json).map_err(py_err)?;
    let rep = verify::grad_check(&cfg, seed, trials, batch_size, perturb).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("groups", rep.groups.clone())?;
    d.set_item("worst", rep.worst.clone())?;
    d.set_item("skipped", rep.skipped)?;
    d.set_item("passed", rep.passed())?;
    Ok(d)
}

/// A language model together with its parameters.
#[pyclass(module = "gam_py")]
struct Model {
    config: RunConfig,
    model: LanguageModel,
    params: ParamSet,
}

impl Model {
    fn from_parts(config: RunConfig, params: Option<ParamSet>) -> Result<Self, GamError> {
        let model = config.language_model()?;
        let params = match params {
            Some(p) => {
                model.check_params(&p)?;
                p
            }
            None => model.init_params(config.train.init_seed())?,
        };
        Ok(Model { config, model, params })
    }
}

#[pymethods]
impl Model {
    /// Fresh parameters for a JSON run configuration.
    #[new]
    fn new(config_json: &str) -> PyResult<Self> {
        let config = RunConfig::from_json(config_json).map_err(py_err)?;
        Model::from_parts(config, None).map_err(py_err)
    }

    #[staticmethod]
    fn from_checkpoint(checkpoint_json: &str) -> PyResult<Self> {
        let ck = Checkpoint::from_json(checkpoint_json).map_err(py_err)?;
        Model::from_parts(ck.config, Some(ck.params)).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ck = Checkpoint::load(path).map_err(py_err)?;
        Model::from_parts(ck.config, Some(ck.params)).map_err(py_err)
    }

    fn checkpoint_json(&self) -> PyResult<String> {
        Checkpoint::new(self.config.clone(), self.params.clone()).to_json().map_err(py_err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        Checkpoint::new(self.config.clone(), self.params.clone()).save(path).map_err(py_err)
    }

    #[getter]
    fn config_json(&self) -> PyResult<String> {
        self.config.to_json().map_err(py_err)
    }

    fn param_names(&self) -> Vec<String> {
        self.params.names().map(str::to_owned).collect()
    }

    /// `(shape, flat row-major values)` of one parameter.
    fn param(&self, name: &str) -> PyResult<(Vec<usize>, Vec<f64>)> {
        let t = self.params.expect(name).map_err(py_err)?;
        Ok((t.shape().to_vec(), t.data().to_vec()))
    }

    /// `n × V` logits; locations default to `0..n`.
    #[pyo3(signature = (tokens, locations=None))]
    fn logits(&self, tokens: Vec<usize>, locations: Option<Vec<u64>>) -> PyResult<Rows> {
        let locations = locations.unwrap_or_else(|| (0..tokens.len() as u64).collect());
        if locations.len() != tokens.len() {
            return Err(PyValueError::new_err("tokens and locations differ in length"));
        }
        let seq: Vec<TokenWithLocation> = tokens
            .into_iter()
            .zip(locations)
            .map(|(token_id, corpus_location)| TokenWithLocation { token_id, corpus_location })
            .collect();
        Ok(self.model.logits(&self.params, &seq).map_err(py_err)?.to_rows())
    }

    /// Continues training from the current parameters; returns `(step, loss, accuracy)` records.
    fn train(&mut self, py: Python<'_>) -> PyResult<Vec<(usize, f64, f64)>> {
        let (model, config, params) = (&self.model, &self.config, self.params.clone());
        let outcome = py
            .detach(|| gam_core::train_from(model, &config.task, &config.train, params))
            .map_err(py_err)?;
        self.params = outcome.params;
        Ok(outcome.metrics.iter().map(|m| (m.step, m.loss, m.accuracy)).collect())
    }

    /// Accuracy on freshly seeded batches; defaults match the in-training evaluation.
    #[pyo3(signature = (seed=None, batches=None, batch_size=None))]
    fn evaluate(&self, seed: Option<u64>, batches: Option<usize>, batch_size: Option<usize>) -> PyResult<f64> {
        let t = &self.config.train;
        gam_core::evaluate(
            &self.model.with(&self.params),
            &self.config.task,
            seed.unwrap_or_else(|| t.eval_seed()),
            batches.unwrap_or(t.eval_batches),
            batch_size.unwrap_or(t.eval_batch_size),
        )
        .map_err(py_err)
    }
}

#[pymodule]
fn gam_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(build_r, m)?)?;
    m.add_function(wrap_pyfunction!(signed_pow, m)?)?;
    m.add_function(wrap_pyfunction!(compose_b, m)?)?;
    m.add_function(wrap_pyfunction!(baseline_head, m)?)?;
    m.add_function(wrap_pyfunction!(gam_head, m)?)?;
    m.add_function(wrap_pyfunction!(equiv_check, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
