//! Python bindings for the voxnn engine.
//!
//! Volumes map to numpy arrays of shape `(nz, ny, nx)` (C order), matching
//! the engine's x-fastest memory layout, so conversions are single copies
//! with no reordering. Label volumes use `uint32`, everything else `float32`.

use std::collections::HashMap;
use std::path::PathBuf;

use numpy::ndarray::Array3;
use numpy::{IntoPyArray, PyArray3, PyReadonlyArray3};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use voxnn_core::conv::{self, ConvMethod, Kernel, Sparsity};
use voxnn_core::data;
use voxnn_core::eval;
use voxnn_core::exec::{tune_plan, MethodPlan};
use voxnn_core::net::{field_of_view, param_count, NetworkSpec};
use voxnn_core::tensor::{self, Dims};
use voxnn_core::train::{self, StackPair, TrainConfig, TrainState};
use voxnn_core::Error;

fn pyerr(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Numerical(_) | Error::Internal(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_dims(t: (usize, usize, usize)) -> Dims {
    [t.0, t.1, t.2]
}

fn from_dims(d: Dims) -> (usize, usize, usize) {
    (d[0], d[1], d[2])
}

/// A dense float volume with dims (nx, ny, nz), x-fastest in memory.
#[pyclass(name = "Volume", module = "voxnn_py", skip_from_py_object)]
#[derive(Clone)]
struct PyVolume {
    inner: tensor::Volume,
}

#[pymethods]
impl PyVolume {
    /// Build from a float32 array of shape (nz, ny, nx).
    #[staticmethod]
    fn from_numpy(arr: PyReadonlyArray3<'_, f32>) -> PyResult<Self> {
        let view = arr.as_array();
        let (nz, ny, nx) = view.dim();
        let values: Vec<f32> = view.iter().copied().collect();
        let inner = tensor::Volume::new([nx, ny, nz], values).map_err(pyerr)?;
        Ok(PyVolume { inner })
    }

    /// Copy out as a float32 array of shape (nz, ny, nx).
    fn to_numpy<'py>(&self, py: Python<'py>) -> Bound<'py, PyArray3<f32>> {
        let [nx, ny, nz] = self.inner.dims();
        Array3::from_shape_vec((nz, ny, nx), self.inner.values().to_vec())
            .expect("volume length matches dims")
            .into_pyarray(py)
    }

    #[getter]
    fn dims(&self) -> (usize, usize, usize) {
        from_dims(self.inner.dims())
    }

    /// Largest absolute elementwise difference; dims must match.
    fn max_abs_diff(&self, other: &PyVolume) -> PyResult<f32> {
        self.inner.max_abs_diff(&other.inner).map_err(pyerr)
    }

    fn __repr__(&self) -> String {
        let [nx, ny, nz] = self.inner.dims();
        format!("Volume(dims=({nx}, {ny}, {nz}))")
    }
}

/// An integer-labeled volume; label 0 is boundary/background.
#[pyclass(name = "Segmentation", module = "voxnn_py", skip_from_py_object)]
#[derive(Clone)]
struct PySegmentation {
    inner: eval::Segmentation,
}

#[pymethods]
impl PySegmentation {
    /// Build from a uint32 array of shape (nz, ny, nx).
    #[staticmethod]
    fn from_numpy(arr: PyReadonlyArray3<'_, u32>) -> PyResult<Self> {
        let view = arr.as_array();
        let (nz, ny, nx) = view.dim();
        let labels: Vec<u32> = view.iter().copied().collect();
        let inner = eval::Segmentation::new([nx, ny, nz], labels).map_err(pyerr)?;
        Ok(PySegmentation { inner })
    }

    /// Copy out as a uint32 array of shape (nz, ny, nx).
    fn to_numpy<'py>(&self, py: Python<'py>) -> Bound<'py, PyArray3<u32>> {
        let [nx, ny, nz] = self.inner.dims();
        Array3::from_shape_vec((nz, ny, nx), self.inner.labels().to_vec())
            .expect("label length matches dims")
            .into_pyarray(py)
    }

    #[getter]
    fn dims(&self) -> (usize, usize, usize) {
        from_dims(self.inner.dims())
    }

    /// Count of distinct nonzero labels.
    fn segment_count(&self) -> usize {
        self.inner.segment_count()
    }

    /// Relabel so each (z-slice, label) pair is its own segment; use this on
    /// volumetric truth before Rand-scoring 2D per-slice proposals.
    fn slicewise(&self) -> PySegmentation {
        PySegmentation { inner: self.inner.slicewise() }
    }

    fn __repr__(&self) -> String {
        let [nx, ny, nz] = self.inner.dims();
        format!("Segmentation(dims=({nx}, {ny}, {nz}), segments={})", self.segment_count())
    }
}

/// A parsed network architecture.
#[pyclass(name = "Network", module = "voxnn_py", skip_from_py_object)]
#[derive(Clone)]
struct PyNetwork {
    spec: NetworkSpec,
}

#[pymethods]
impl PyNetwork {
    /// Parse a network from its text form.
    #[new]
    fn new(text: &str) -> PyResult<Self> {
        Ok(PyNetwork { spec: NetworkSpec::parse(text).map_err(pyerr)? })
    }

    /// Parse a network from a `.net` file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let text = std::fs::read_to_string(&path).map_err(|e| pyerr(Error::io(&path, e)))?;
        Ok(PyNetwork { spec: NetworkSpec::parse(&text).map_err(pyerr)? })
    }

    #[getter]
    fn field_of_view(&self) -> PyResult<(usize, usize, usize)> {
        Ok(from_dims(field_of_view(&self.spec).map_err(pyerr)?))
    }

    #[getter]
    fn param_count(&self) -> usize {
        param_count(&self.spec)
    }

    #[getter]
    fn input_names(&self) -> Vec<String> {
        self.spec.input_names().iter().map(|s| s.to_string()).collect()
    }

    #[getter]
    fn node_names(&self) -> Vec<String> {
        self.spec.nodes().iter().map(|n| n.name.clone()).collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Network(nodes={}, params={})",
            self.spec.nodes().len(),
            param_count(&self.spec)
        )
    }
}

fn input_map(
    spec: &NetworkSpec,
    image: &tensor::Volume,
    recursive_map: Option<&tensor::Volume>,
) -> PyResult<HashMap<String, tensor::Volume>> {
    let names = spec.input_names();
    let mut inputs = HashMap::new();
    inputs.insert(names[0].to_string(), image.clone());
    match (names.get(1), recursive_map) {
        (Some(n), Some(m)) => {
            inputs.insert(n.to_string(), m.clone());
        }
        (Some(n), None) => {
            return Err(PyValueError::new_err(format!(
                "network has a second input stream `{n}`; pass recursive_map"
            )));
        }
        (None, Some(_)) => {
            return Err(PyValueError::new_err(
                "network has a single input stream; recursive_map is not accepted",
            ));
        }
        (None, None) => {}
    }
    Ok(inputs)
}

/// A network with parameters, sampler state, and a per-layer method plan.
#[pyclass(name = "Model", module = "voxnn_py")]
struct PyModel {
    spec: NetworkSpec,
    state: TrainState,
    methods: MethodPlan,
}

#[pymethods]
impl PyModel {
    /// Fresh model: parameter initialization and sampler stream both derive
    /// from `seed`.
    #[staticmethod]
    #[pyo3(signature = (network, seed = 0))]
    fn init(network: &PyNetwork, seed: u64) -> PyModel {
        let cfg = TrainConfig { seed, ..Default::default() };
        let state = TrainState::fresh(&network.spec, &cfg);
        let methods = MethodPlan::all_direct(&network.spec);
        PyModel { spec: network.spec.clone(), state, methods }
    }

    /// Load a checkpoint written by `save` (or the command-line trainer).
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = data::load_checkpoint(&path).map_err(pyerr)?;
        let rng = ck.restore_rng();
        let methods = MethodPlan::all_direct(&ck.spec);
        Ok(PyModel {
            spec: ck.spec,
            state: TrainState { params: ck.params, update: ck.update, rng },
            methods,
        })
    }

    /// Write a checkpoint that training can resume from exactly.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        data::save_checkpoint(
            &path,
            &self.spec,
            &self.state.params,
            self.state.update,
            self.state.rng.get_seed(),
            self.state.rng.get_word_pos(),
        )
        .map_err(pyerr)
    }

    #[getter]
    fn update(&self) -> u64 {
        self.state.update
    }

    #[getter]
    fn field_of_view(&self) -> PyResult<(usize, usize, usize)> {
        Ok(from_dims(field_of_view(&self.spec).map_err(pyerr)?))
    }

    #[getter]
    fn param_count(&self) -> usize {
        param_count(&self.spec)
    }

    /// Train in place on (image, truth) stacks; boundary labels are derived
    /// from the truth. Returns the `(update, loss, pixel_error, wallclock_s)`
    /// log records (every `log_every` updates; 0 disables them). `maps`
    /// supplies a fixed recursive boundary map per stack for two-input
    /// networks.
    #[allow(clippy::too_many_arguments)]
    #[pyo3(signature = (images, truths, updates, lr = 0.01, momentum = 0.9,
        patch = (16, 16, 1), rebalance = true, augment = true, log_every = 0,
        maps = None))]
    fn train(
        &mut self,
        py: Python<'_>,
        images: Vec<Py<PyVolume>>,
        truths: Vec<Py<PySegmentation>>,
        updates: u64,
        lr: f32,
        momentum: f32,
        patch: (usize, usize, usize),
        rebalance: bool,
        augment: bool,
        log_every: u64,
        maps: Option<Vec<Py<PyVolume>>>,
    ) -> PyResult<Vec<(u64, f64, f64, f64)>> {
        if images.len() != truths.len() {
            return Err(PyValueError::new_err(format!(
                "{} images vs {} truths",
                images.len(),
                truths.len()
            )));
        }
        if let Some(m) = &maps {
            if m.len() != images.len() {
                return Err(PyValueError::new_err(format!(
                    "{} maps vs {} images",
                    m.len(),
                    images.len()
                )));
            }
        }
        let mut pairs = Vec::with_capacity(images.len());
        for (i, (img, tr)) in images.iter().zip(&truths).enumerate() {
            let mut pair =
                StackPair::new(img.borrow(py).inner.clone(), tr.borrow(py).inner.clone())
                    .map_err(pyerr)?;
            if let Some(m) = &maps {
                pair = pair.with_recursive_map(m[i].borrow(py).inner.clone()).map_err(pyerr)?;
            }
            pairs.push(pair);
        }
        let cfg = TrainConfig {
            learning_rate: lr,
            momentum,
            updates,
            patch: to_dims(patch),
            seed: 0, // unused: the sampler stream continues from `state`
            rebalance,
            augment,
            log_every,
        };
        let spec = self.spec.clone();
        let methods = self.methods.clone();
        let resume = Some(self.state.clone());
        let (state, log) = py
            .detach(move || train::train(&spec, &pairs, &cfg, &methods, resume, None))
            .map_err(pyerr)?;
        self.state = state;
        Ok(log.into_iter().map(|r| (r.update, r.loss, r.pixel_error, r.wallclock_s)).collect())
    }

    /// Dense inference: boundary-probability map for the valid region
    /// (`image dims − fov + 1`). `tile` computes the output in patches of
    /// that shape (same result, bounded memory).
    #[pyo3(signature = (image, recursive_map = None, tile = None))]
    fn infer(
        &self,
        py: Python<'_>,
        image: &PyVolume,
        recursive_map: Option<&PyVolume>,
        tile: Option<(usize, usize, usize)>,
    ) -> PyResult<PyVolume> {
        let inputs = input_map(&self.spec, &image.inner, recursive_map.map(|m| &m.inner))?;
        let spec = self.spec.clone();
        let methods = self.methods.clone();
        let params = self.state.params.clone();
        let out = py
            .detach(move || train::infer(&spec, &params, &methods, &inputs, tile.map(to_dims)))
            .map_err(pyerr)?;
        Ok(PyVolume { inner: out })
    }

    /// Initialize layers from same-named layers of `src` (weights, not
    /// momenta): exact copies for matching kernel shapes, central-z embedding
    /// for kernels extended along z. Returns {"copied", "embedded", "fresh"}.
    fn warm_start_from<'py>(
        &mut self,
        py: Python<'py>,
        src: &PyModel,
    ) -> PyResult<Bound<'py, PyDict>> {
        let report =
            train::warm_start(&self.spec, &mut self.state.params, &src.spec, &src.state.params)
                .map_err(pyerr)?;
        let d = PyDict::new(py);
        d.set_item("copied", report.copied)?;
        d.set_item("embedded", report.embedded)?;
        d.set_item("fresh", report.fresh)?;
        Ok(d)
    }

    /// Time direct vs FFT convolution per layer at the given input shape and
    /// adopt the faster method for each. Returns
    /// `(node, choice, direct_ms, fft_ms, rel_err)` per conv layer.
    #[pyo3(signature = (dims = (128, 128, 8), trials = 3))]
    fn tune(
        &mut self,
        py: Python<'_>,
        dims: (usize, usize, usize),
        trials: usize,
    ) -> PyResult<Vec<(String, &'static str, Option<f64>, Option<f64>, Option<f64>)>> {
        let spec = self.spec.clone();
        let (plan, reports) =
            py.detach(move || tune_plan(&spec, to_dims(dims), trials)).map_err(pyerr)?;
        self.methods = plan;
        Ok(reports
            .into_iter()
            .map(|r| {
                let choice = match r.outcome.choice {
                    ConvMethod::Direct => "direct",
                    ConvMethod::Fft => "fft",
                };
                (r.node, choice, r.outcome.direct_ms, r.outcome.fft_ms, r.outcome.rel_err)
            })
            .collect())
    }

    /// Force direct convolution everywhere (the deterministic default).
    fn use_direct(&mut self) {
        self.methods = MethodPlan::all_direct(&self.spec);
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(nodes={}, params={}, update={})",
            self.spec.nodes().len(),
            param_count(&self.spec),
            self.state.update
        )
    }
}

/// Synthetic (image, truth) stack: jittered Voronoi cells with smooth
/// boundaries and additive noise.
#[pyfunction]
#[pyo3(signature = (seed = 0, dims = (96, 96, 16), cells = 40, z_blur = 0.5, noise_sd = 0.05))]
fn synth(
    seed: u64,
    dims: (usize, usize, usize),
    cells: usize,
    z_blur: f64,
    noise_sd: f64,
) -> PyResult<(PyVolume, PySegmentation)> {
    let (img, seg) = data::synth_generate(seed, to_dims(dims), cells, z_blur, noise_sd)
        .map_err(pyerr)?;
    Ok((PyVolume { inner: img }, PySegmentation { inner: seg }))
}

/// Binary boundary labels from a segmentation: 1.0 where a pixel is labeled 0
/// or touches a different label in-plane.
#[pyfunction]
fn derive_boundary_labels(truth: &PySegmentation) -> PyVolume {
    PyVolume { inner: train::derive_boundary_labels(&truth.inner) }
}

/// Pad a valid-region map back to full stack dims, filling the fov margin
/// with 0.5.
#[pyfunction]
fn pad_map(
    map: &PyVolume,
    dims: (usize, usize, usize),
    fov: (usize, usize, usize),
) -> PyResult<PyVolume> {
    Ok(PyVolume { inner: train::pad_map(&map.inner, to_dims(dims), to_dims(fov)).map_err(pyerr)? })
}

fn make_kernel(kernel: PyReadonlyArray3<'_, f32>) -> PyResult<Kernel> {
    let view = kernel.as_array();
    let (kz, ky, kx) = view.dim();
    Kernel::new([kx, ky, kz], view.iter().copied().collect()).map_err(pyerr)
}

/// Valid sparse correlation, direct accumulation. `kernel` has shape
/// (kz, ky, kx); `sparsity` is the tap spacing per axis.
#[pyfunction]
#[pyo3(signature = (volume, kernel, sparsity = (1, 1, 1)))]
fn conv_direct(
    volume: &PyVolume,
    kernel: PyReadonlyArray3<'_, f32>,
    sparsity: (usize, usize, usize),
) -> PyResult<PyVolume> {
    let k = make_kernel(kernel)?;
    let out = conv::conv_direct(&volume.inner, &k, Sparsity(to_dims(sparsity))).map_err(pyerr)?;
    Ok(PyVolume { inner: out })
}

/// Same contract as `conv_direct`, computed via FFT.
#[pyfunction]
#[pyo3(signature = (volume, kernel, sparsity = (1, 1, 1)))]
fn conv_fft(
    volume: &PyVolume,
    kernel: PyReadonlyArray3<'_, f32>,
    sparsity: (usize, usize, usize),
) -> PyResult<PyVolume> {
    let k = make_kernel(kernel)?;
    let out = conv::conv_fft(&volume.inner, &k, Sparsity(to_dims(sparsity))).map_err(pyerr)?;
    Ok(PyVolume { inner: out })
}

/// Sparse max filter; window taps sit `sparsity` apart per axis.
#[pyfunction]
#[pyo3(signature = (volume, window, sparsity = (1, 1, 1)))]
fn max_filter(
    volume: &PyVolume,
    window: (usize, usize, usize),
    sparsity: (usize, usize, usize),
) -> PyResult<PyVolume> {
    let (out, _) = conv::max_filter(&volume.inner, to_dims(window), Sparsity(to_dims(sparsity)))
        .map_err(pyerr)?;
    Ok(PyVolume { inner: out })
}

/// The eight in-plane dihedral transforms; t in 0..8 (rotation = t & 3,
/// x-flip if t >= 4).
#[pyfunction]
fn dihedral_xy(volume: &PyVolume, t: u8) -> PyResult<PyVolume> {
    Ok(PyVolume { inner: tensor::dihedral_xy(&volume.inner, t).map_err(pyerr)? })
}

/// Threshold + per-slice 4-connected components of the sub-threshold
/// (interior) region; boundary pixels stay 0.
#[pyfunction]
fn connected_components_2d(map: &PyVolume, t: f32) -> PySegmentation {
    PySegmentation { inner: eval::connected_components_2d(&map.inner, t) }
}

/// Seeded per-slice watershed: seeds below `t_low`, flooding up to `t_high`,
/// basins smaller than `min_size` merged into their closest neighbor.
#[pyfunction]
#[pyo3(signature = (map, t_low, t_high, min_size = 0))]
fn watershed_2d(
    map: &PyVolume,
    t_low: f32,
    t_high: f32,
    min_size: usize,
) -> PyResult<PySegmentation> {
    Ok(PySegmentation {
        inner: eval::watershed_2d(&map.inner, t_low, t_high, min_size).map_err(pyerr)?,
    })
}

/// Rand merge/split/F scores of a proposal against ground truth; pixels
/// labeled 0 in either volume are excluded.
#[pyfunction]
fn rand_scores<'py>(
    py: Python<'py>,
    proposal: &PySegmentation,
    truth: &PySegmentation,
) -> PyResult<Bound<'py, PyDict>> {
    let s = eval::rand_scores(&proposal.inner, &truth.inner).map_err(pyerr)?;
    let d = PyDict::new(py);
    d.set_item("merge", s.merge)?;
    d.set_item("split", s.split)?;
    d.set_item("f", s.f)?;
    Ok(d)
}

/// Best `(threshold, pixel_error)` over the 0.01 threshold grid.
#[pyfunction]
fn best_pixel_error(map: &PyVolume, labels: &PyVolume) -> PyResult<(f32, f64)> {
    eval::best_pixel_error(&map.inner, &labels.inner).map_err(pyerr)
}

/// Per-pixel class-rebalancing weights (class c gets P / (2 N_c)).
#[pyfunction]
#[pyo3(signature = (labels, rebalance = true))]
fn class_weights(labels: &PyVolume, rebalance: bool) -> PyVolume {
    PyVolume { inner: train::class_weights(&labels.inner, rebalance) }
}

/// Two-stage inference: stage 1's padded map feeds stage 2's second input.
#[pyfunction]
#[pyo3(signature = (model1, model2, image, tile = None))]
fn recursive_infer(
    py: Python<'_>,
    model1: &PyModel,
    model2: &PyModel,
    image: &PyVolume,
    tile: Option<(usize, usize, usize)>,
) -> PyResult<PyVolume> {
    let (s1, p1, m1) = (model1.spec.clone(), model1.state.params.clone(), model1.methods.clone());
    let (s2, p2, m2) = (model2.spec.clone(), model2.state.params.clone(), model2.methods.clone());
    let img = image.inner.clone();
    let out = py
        .detach(move || {
            train::recursive_infer(&s1, &p1, &m1, &s2, &p2, &m2, &img, tile.map(to_dims))
        })
        .map_err(pyerr)?;
    Ok(PyVolume { inner: out })
}

#[pymodule]
fn voxnn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVolume>()?;
    m.add_class::<PySegmentation>()?;
    m.add_class::<PyNetwork>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(derive_boundary_labels, m)?)?;
    m.add_function(wrap_pyfunction!(pad_map, m)?)?;
    m.add_function(wrap_pyfunction!(conv_direct, m)?)?;
    m.add_function(wrap_pyfunction!(conv_fft, m)?)?;
    m.add_function(wrap_pyfunction!(max_filter, m)?)?;
    m.add_function(wrap_pyfunction!(dihedral_xy, m)?)?;
    m.add_function(wrap_pyfunction!(connected_components_2d, m)?)?;
    m.add_function(wrap_pyfunction!(watershed_2d, m)?)?;
    m.add_function(wrap_pyfunction!(rand_scores, m)?)?;
    m.add_function(wrap_pyfunction!(best_pixel_error, m)?)?;
    m.add_function(wrap_pyfunction!(class_weights, m)?)?;
    m.add_function(wrap_pyfunction!(recursive_infer, m)?)?;
    Ok(())
}
