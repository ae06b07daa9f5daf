//! Python bindings. Structured results (summaries, reports) come back as
//! JSON strings; tensors as the `Tensor` class.

use std::path::Path;

use lava_core::data::generate_synthetic as gen;
use lava_core::encoders::encode_video;
use lava_core::eval::{evaluate_all_splits, train_probe};
use lava_core::losses::{nce_with, parse_terms};
use lava_core::train::pretrain as run_pretrain;
use lava_core::{ltf, Checkpoint, Config, Dataset, EncoderStack, Error, Graph, NceForm, ProbeMode, Split};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e.exit_code() {
        2 => PyValueError::new_err(e.to_string()),
        3 => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("value serializes")
}

fn config_from(json: Option<&str>) -> PyResult<Config> {
    json.map_or_else(|| Ok(Config::default()), |j| Config::from_json(j).map_err(py_err))
}

/// Dense row-major f64 tensor.
#[pyclass(name = "Tensor", frozen)]
struct PyTensor(lava_core::Tensor);

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        lava_core::Tensor::new(shape, data).map(Self).map_err(py_err)
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.shape().to_vec()
    }

    fn tolist(&self) -> Vec<f64> {
        self.0.to_vec()
    }

    fn matmul(&self, other: &PyTensor) -> PyResult<Self> {
        self.0.matmul(&other.0).map(Self).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.0.shape())
    }
}

/// The three encoders with their projection heads.
#[pyclass(name = "Model")]
struct PyModel(EncoderStack);

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config_json=None, seed=0))]
    fn new(config_json: Option<&str>, seed: u64) -> PyResult<Self> {
        let cfg = config_from(config_json)?;
        EncoderStack::new(&cfg.model, seed).map(Self).map_err(py_err)
    }

    /// Model weights from a training checkpoint.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Checkpoint::load(Path::new(path)).map(|c| Self(c.stack)).map_err(py_err)
    }

    fn param_count(&self) -> usize {
        self.0.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    fn param_names(&self) -> Vec<String> {
        self.0.named_params().into_iter().map(|(n, _)| n).collect()
    }

    /// `z_v` for one clip of shape `[tokens, d_v_raw]`.
    fn embed_video(&self, clip: &PyTensor) -> PyResult<PyTensor> {
        let mut g = Graph::inference();
        let z = encode_video(&mut g, &self.0, &clip.0).map_err(py_err)?;
        Ok(PyTensor(g.value(z).clone()))
    }
}

#[pyfunction]
fn read_ltf(path: &str) -> PyResult<PyTensor> {
    ltf::read_tensor(Path::new(path)).map(PyTensor).map_err(py_err)
}

#[pyfunction]
fn write_ltf(path: &str, tensor: &PyTensor) -> PyResult<()> {
    ltf::write_tensor(Path::new(path), &tensor.0).map_err(py_err)
}

/// NCE between the rows of two `[N, d]` unit-norm matrices.
#[pyfunction]
#[pyo3(signature = (z, zp, tau, mask=None, form="aggregate"))]
fn nce(z: &PyTensor, zp: &PyTensor, tau: f64, mask: Option<Vec<bool>>, form: &str) -> PyResult<f64> {
    let form = match form {
        "aggregate" => NceForm::Aggregate,
        "per_row" => NceForm::PerRow,
        other => return Err(PyValueError::new_err(format!("unknown form {other:?}"))),
    };
    let n = z.0.shape().first().copied().unwrap_or(0);
    let mask = mask.unwrap_or_else(|| vec![true; n]);
    let mut g = Graph::inference();
    let a = g.constant(z.0.clone());
    let b = g.constant(zp.0.clone());
    let l = nce_with(&mut g, form, a, b, tau, &mask).map_err(py_err)?;
    g.value(l).item().map_err(py_err)
}

/// Write a synthetic dataset; returns the generation summary as JSON.
#[pyfunction]
#[pyo3(signature = (out, config_json=None, force=false))]
fn generate_synthetic(out: &str, config_json: Option<&str>, force: bool) -> PyResult<String> {
    let cfg = config_from(config_json)?;
    gen(&cfg.data, Path::new(out), force).map(|s| to_json(&s)).map_err(py_err)
}

/// Pre-train and write a checkpoint; returns the final batch losses as JSON.
#[pyfunction]
#[pyo3(signature = (data, out, config_json=None, epochs=None, seed=None, losses=None))]
fn pretrain(
    py: Python<'_>,
    data: &str,
    out: &str,
    config_json: Option<&str>,
    epochs: Option<u64>,
    seed: Option<u64>,
    losses: Option<&str>,
) -> PyResult<String> {
    let mut cfg = config_from(config_json)?;
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if seed.is_some() {
        cfg.train.seed = seed;
    }
    if let Some(l) = losses {
        cfg.loss.terms = parse_terms(l).map_err(py_err)?;
    }
    py.detach(|| {
        let ds = Dataset::load(Path::new(data))?;
        run_pretrain(&cfg, &ds, Path::new(out), &mut |_| Ok(()))
    })
    .map(|o| to_json(&o.final_losses))
    .map_err(py_err)
}

/// Train a linear probe on a checkpoint's frozen encoders and return the
/// EvalReport as JSON.
#[pyfunction]
#[pyo3(signature = (ckpt, data, mode="video", clips=None, splits="all"))]
fn evaluate(py: Python<'_>, ckpt: &str, data: &str, mode: &str, clips: Option<usize>, splits: &str) -> PyResult<String> {
    let mode: ProbeMode = mode.parse().map_err(py_err)?;
    let splits: &[Split] = match splits {
        "1" => &[Split::Test1],
        "all" => &Split::TESTS,
        other => return Err(PyValueError::new_err(format!("splits must be \"1\" or \"all\", got {other:?}"))),
    };
    py.detach(|| {
        let c = Checkpoint::load(Path::new(ckpt))?;
        let ds = Dataset::load(Path::new(data))?;
        let head = train_probe(&c.stack, &ds, mode, &c.config.eval)?;
        evaluate_all_splits(&c.stack, &head, &ds, splits, clips.unwrap_or(c.config.eval.clips_per_video))
    })
    .map(|r| to_json(&r))
    .map_err(py_err)
}

/// Finite-difference gradient check; returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (seed=0, instances=lava_core::gradcheck::DEFAULT_INSTANCES, ops=None))]
fn gradcheck(py: Python<'_>, seed: u64, instances: usize, ops: Option<Vec<String>>) -> PyResult<String> {
    let ops = ops.unwrap_or_default();
    py.detach(|| {
        let cases: Vec<&str> = ops.iter().map(String::as_str).collect();
        lava_core::gradcheck::run_cases(seed, instances, &cases)
    })
    .map(|r| to_json(&r))
    .map_err(py_err)
}

#[pymodule]
fn lava_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(read_ltf, m)?)?;
    m.add_function(wrap_pyfunction!(write_ltf, m)?)?;
    m.add_function(wrap_pyfunction!(nce, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
