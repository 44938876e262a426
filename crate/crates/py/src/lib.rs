//! Python bindings: tensors, masks, the OTSU/APSC primitives, the cache store
//! and the generate/edit pipeline. Tensors cross the boundary as flat lists.

use std::path::PathBuf;

use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyList, PyString};
use serde_json::Value;

use sparse_edit_core::cache::{CacheStore, StoreConfig};
use sparse_edit_core::mask::{self, pgm, BinaryMask, DiffMap, MaskStatus, MaskWindow};
use sparse_edit_core::sparse::{apsc_select, DEFAULT_BLOCK_CANDIDATES};
use sparse_edit_core::tensor::{io as ft4, Shape4, Tensor4};
use sparse_edit_core::unet::{EditSession, Pipeline, PromptTokens, UNetConfig};

pyo3::create_exception!(sparse_edit, SparseEditError, PyException);

fn err(e: sparse_edit_core::Error) -> PyErr {
    SparseEditError::new_err(e.to_string())
}

fn json_to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => PyBool::new(py, *b).to_owned().into_any(),
        Value::Number(n) => match (n.as_u64(), n.as_i64()) {
            (Some(u), _) => u.into_pyobject(py)?.into_any(),
            (None, Some(i)) => i.into_pyobject(py)?.into_any(),
            _ => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => PyString::new(py, s).into_any(),
        Value::Array(a) => {
            let items = a.iter().map(|x| json_to_py(py, x)).collect::<PyResult<Vec<_>>>()?;
            PyList::new(py, items)?.into_any()
        }
        Value::Object(o) => {
            let d = PyDict::new(py);
            for (k, x) in o {
                d.set_item(k, json_to_py(py, x)?)?;
            }
            d.into_any()
        }
    })
}

fn to_dict<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let v = serde_json::to_value(value).map_err(|e| SparseEditError::new_err(e.to_string()))?;
    json_to_py(py, &v)
}

/// Dense NCHW float32 tensor.
#[pyclass(name = "Tensor", module = "sparse_edit", frozen, from_py_object)]
#[derive(Clone)]
struct PyTensor(Tensor4);

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: (usize, usize, usize, usize), data: Vec<f32>) -> PyResult<Self> {
        let (n, c, h, w) = shape;
        Tensor4::new(Shape4::new(n, c, h, w), data).map(PyTensor).map_err(err)
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize, usize) {
        let s = self.0.shape();
        (s.n, s.c, s.h, s.w)
    }

    /// Flat values in n, c, h, w order.
    fn tolist(&self) -> Vec<f32> {
        self.0.data().to_vec()
    }

    fn max_abs_diff(&self, other: &PyTensor) -> PyResult<f32> {
        if self.0.shape() != other.0.shape() {
            return Err(SparseEditError::new_err("tensor shapes differ"));
        }
        Ok(self.0.max_abs_diff(&other.0))
    }

    fn bit_eq(&self, other: &PyTensor) -> bool {
        self.0.bit_eq(&other.0)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        ft4::save(path, &self.0).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        ft4::load(path).map(PyTensor).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Tensor({})", self.0.shape())
    }
}

/// Binary spatial mask.
#[pyclass(name = "Mask", module = "sparse_edit", frozen, from_py_object)]
#[derive(Clone)]
struct PyMask(BinaryMask);

#[pymethods]
impl PyMask {
    #[new]
    fn new(height: usize, width: usize, bits: Vec<bool>) -> PyResult<Self> {
        BinaryMask::from_bits(height, width, bits).map(PyMask).map_err(err)
    }

    #[staticmethod]
    fn full(height: usize, width: usize) -> Self {
        PyMask(BinaryMask::full(height, width))
    }

    #[staticmethod]
    fn empty(height: usize, width: usize) -> Self {
        PyMask(BinaryMask::empty(height, width))
    }

    #[staticmethod]
    fn rect(height: usize, width: usize, y: usize, x: usize, rh: usize, rw: usize) -> Self {
        PyMask(BinaryMask::rect(height, width, y, x, rh, rw))
    }

    #[getter]
    fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    fn bits(&self) -> Vec<bool> {
        self.0.bits().to_vec()
    }

    fn active_count(&self) -> usize {
        self.0.active_count()
    }

    fn sparsity(&self) -> f64 {
        self.0.sparsity()
    }

    fn dilate(&self, radius: usize) -> Self {
        PyMask(mask::dilate(&self.0, radius))
    }

    fn save_pgm(&self, path: PathBuf) -> PyResult<()> {
        pgm::save(path, &self.0).map_err(err)
    }

    #[staticmethod]
    fn load_pgm(path: PathBuf) -> PyResult<Self> {
        pgm::load(path).map(PyMask).map_err(err)
    }

    fn __eq__(&self, other: &PyMask) -> bool {
        self.0 == other.0
    }

    fn __repr__(&self) -> String {
        let (h, w) = self.0.dims();
        format!("Mask({h}x{w}, {} active)", self.0.active_count())
    }
}

/// OTSU threshold of a normalized difference map with values in [0, 1].
///
/// Returns `(epsilon, objective, mask)`; `mask` is None for a no-edit map.
#[pyfunction]
fn otsu(height: usize, width: usize, values: Vec<f32>) -> PyResult<(f32, f64, Option<PyMask>)> {
    let d = DiffMap::from_values(height, width, values).map_err(err)?;
    let r = mask::otsu_threshold(&d);
    let m = (r.status == MaskStatus::Edit).then(|| PyMask(r.mask));
    Ok((r.epsilon, r.objective, m))
}

/// Block plan for a mask: dict with block, tile, cost and origins.
#[pyfunction]
#[pyo3(signature = (mask, kernel = 3, candidates = None))]
fn apsc<'py>(
    py: Python<'py>,
    mask: &PyMask,
    kernel: usize,
    candidates: Option<Vec<usize>>,
) -> PyResult<Bound<'py, PyAny>> {
    let cands = candidates.unwrap_or_else(|| DEFAULT_BLOCK_CANDIDATES.to_vec());
    let plan = apsc_select(&mask.0, (kernel, kernel), &cands).map_err(err)?;
    to_dict(py, &plan)
}

/// Two-tier activation cache.
#[pyclass(name = "CacheStore", module = "sparse_edit", frozen)]
struct PyCacheStore(CacheStore);

#[pymethods]
impl PyCacheStore {
    #[new]
    #[pyo3(signature = (hot_budget = None, prefetch_horizon = 1, background = true))]
    fn new(hot_budget: Option<u64>, prefetch_horizon: u32, background: bool) -> PyResult<Self> {
        CacheStore::new(StoreConfig {
            hot_budget,
            prefetch_horizon,
            background,
            ..Default::default()
        })
        .map(PyCacheStore)
        .map_err(err)
    }

    #[staticmethod]
    #[pyo3(signature = (path, hot_budget = None))]
    fn load_spill(path: PathBuf, hot_budget: Option<u64>) -> PyResult<Self> {
        let config = StoreConfig {
            hot_budget,
            ..Default::default()
        };
        CacheStore::load_spill(&path, config).map(PyCacheStore).map_err(err)
    }

    fn save_spill(&self, path: PathBuf) -> PyResult<()> {
        self.0.save_spill(&path).map_err(err)
    }

    fn duplicate(&self) -> PyResult<Self> {
        self.0.duplicate().map(PyCacheStore).map_err(err)
    }

    fn set_budget(&self, budget: Option<u64>) -> PyResult<()> {
        self.0.set_budget(budget).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn total_bytes(&self) -> u64 {
        self.0.total_bytes()
    }

    fn stats<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_dict(py, &self.0.stats())
    }
}

/// Result of `Pipeline.edit`.
#[pyclass(name = "EditResult", module = "sparse_edit", frozen, get_all)]
struct PyEditResult {
    latent: PyTensor,
    mask: PyMask,
    /// "edit" or "no_edit".
    status: String,
    /// "detected" or "user".
    mask_source: String,
    epsilon: Option<f32>,
    dense_macs: u64,
    sparse_macs: u64,
    macs_ratio: Option<f64>,
    phase1_macs: u64,
    phase2_macs: u64,
    bytes_before: u64,
    bytes_after: u64,
}

#[pymethods]
impl PyEditResult {
    fn __repr__(&self) -> String {
        format!(
            "EditResult(status={}, edit_size={:.4}, macs_ratio={})",
            self.status,
            self.mask.0.sparsity(),
            self.macs_ratio.map_or("None".into(), |r| format!("{r:.2}"))
        )
    }
}

fn tag<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_value(v).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default()
}

/// Toy text-conditioned U-Net with dense generation and cached sparse edits.
#[pyclass(name = "Pipeline", module = "sparse_edit", frozen)]
struct PyPipeline(Pipeline);

#[pymethods]
impl PyPipeline {
    /// `config` is a JSON object string; missing fields take their defaults.
    #[new]
    #[pyo3(signature = (config = None))]
    fn new(config: Option<&str>) -> PyResult<Self> {
        let cfg: UNetConfig = match config {
            Some(s) => serde_json::from_str(s).map_err(|e| SparseEditError::new_err(e.to_string()))?,
            None => UNetConfig::default(),
        };
        Pipeline::new(cfg).map(PyPipeline).map_err(err)
    }

    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_dict(py, self.0.config())
    }

    fn initial_latent(&self) -> PyTensor {
        PyTensor(self.0.initial_latent())
    }

    /// Dense generation; records the cache into `store` when given.
    #[pyo3(signature = (prompt, store = None))]
    fn generate(&self, py: Python<'_>, prompt: Vec<u32>, store: Option<PyRef<'_, PyCacheStore>>) -> PyResult<PyTensor> {
        let prompt = PromptTokens::new(prompt);
        let store = store.as_deref().map(|s| &s.0);
        let g = py.detach(|| self.0.generate_dense(&prompt, store)).map_err(err)?;
        Ok(PyTensor(g.latent))
    }

    /// Edits the generation cached in `store` from `old` toward `new`.
    /// The store is compacted to the edit mask.
    #[pyo3(signature = (old, new, store, user_mask = None, t1 = 5, t2 = 10, dilation_radius = 1))]
    #[allow(clippy::too_many_arguments)]
    fn edit(
        &self,
        py: Python<'_>,
        old: Vec<u32>,
        new: Vec<u32>,
        store: PyRef<'_, PyCacheStore>,
        user_mask: Option<PyMask>,
        t1: usize,
        t2: usize,
        dilation_radius: usize,
    ) -> PyResult<PyEditResult> {
        let window = MaskWindow::new(t1, t2).map_err(err)?;
        let mut session = EditSession::new(PromptTokens::new(old), PromptTokens::new(new)).with_window(window);
        session.dilation_radius = dilation_radius;
        session.user_mask = user_mask.map(|m| m.0);
        let store = &store.0;
        let o = py.detach(|| self.0.edit(&session, store)).map_err(err)?;
        Ok(PyEditResult {
            status: tag(&o.status),
            mask_source: tag(&o.mask_source),
            epsilon: o.epsilon,
            dense_macs: o.macs.dense_total(),
            sparse_macs: o.macs.sparse_total(),
            macs_ratio: o.macs.ratio(),
            phase1_macs: o.phase1_macs,
            phase2_macs: o.phase2_macs,
            bytes_before: o.compaction.bytes_before,
            bytes_after: o.compaction.bytes_after,
            latent: PyTensor(o.latent),
            mask: PyMask(o.mask),
        })
    }
}

#[pymodule]
fn sparse_edit(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SparseEditError", m.py().get_type::<SparseEditError>())?;
    m.add_class::<PyTensor>()?;
    m.add_class::<PyMask>()?;
    m.add_class::<PyCacheStore>()?;
    m.add_class::<PyPipeline>()?;
    m.add_class::<PyEditResult>()?;
    m.add_function(wrap_pyfunction!(otsu, m)?)?;
    m.add_function(wrap_pyfunction!(apsc, m)?)?;
    Ok(())
}
