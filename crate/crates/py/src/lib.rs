//! Python module `vnet`: volumes, synthetic data, metrics, and the
//! segmentation network.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyIOError, PyValueError};
use pyo3::prelude::*;

use vnet_core::checkpoint::Checkpoint;
use vnet_core::config::KvConfig;
use vnet_core::dataset::Dataset;
use vnet_core::metrics::{self, SurfaceDistance};
use vnet_core::model::{self as net, NetworkConfig, VNetModel};
use vnet_core::train::{self, TrainConfig, Trainer};
use vnet_core::{rng, volume};

create_exception!(vnet, VNetError, PyException);

fn to_py(e: vnet_core::Error) -> PyErr {
    match e {
        vnet_core::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        vnet_core::Error::Shape(_)
        | vnet_core::Error::InvalidArgument(_)
        | vnet_core::Error::Config { .. }
        | vnet_core::Error::NonBinaryLabel { .. }
        | vnet_core::Error::NonFinite { .. } => PyValueError::new_err(e.to_string()),
        other => VNetError::new_err(format!("{}: {other}", other.kind())),
    }
}

type Zyx<T> = (T, T, T);

fn arr<T: Copy>(t: Zyx<T>) -> [T; 3] {
    [t.0, t.1, t.2]
}

fn tup<T: Copy>(a: [T; 3]) -> Zyx<T> {
    (a[0], a[1], a[2])
}

/// Scalar image volume; `dims` and `spacing` are in (z, y, x) order and
/// `data` is flattened with x fastest.
#[pyclass(name = "Volume", module = "vnet", from_py_object)]
#[derive(Clone)]
pub struct PyVolume {
    inner: volume::Volume,
}

#[pymethods]
impl PyVolume {
    #[new]
    #[pyo3(signature = (dims, data, spacing = (1.0, 1.0, 1.0)))]
    fn new(dims: Zyx<usize>, data: Vec<f64>, spacing: Zyx<f64>) -> PyResult<Self> {
        let inner = volume::Volume::new(arr(dims), arr(spacing), data).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: volume::load_volume(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        volume::save_volume(&self.inner, path).map_err(to_py)
    }

    #[getter]
    fn dims(&self) -> Zyx<usize> {
        tup(self.inner.dims())
    }

    #[getter]
    fn spacing(&self) -> Zyx<f64> {
        tup(self.inner.spacing())
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn at(&self, z: usize, y: usize, x: usize) -> PyResult<f64> {
        let [d, h, w] = self.inner.dims();
        if z >= d || y >= h || x >= w {
            return Err(PyValueError::new_err(format!(
                "({z}, {y}, {x}) outside {d}x{h}x{w}"
            )));
        }
        Ok(self.inner.at(z, y, x))
    }

    fn min_max(&self) -> (f64, f64) {
        self.inner.min_max()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        let [d, h, w] = self.inner.dims();
        format!("Volume(dims=({d}, {h}, {w}))")
    }
}

/// Binary mask with the same layout as [`PyVolume`].
#[pyclass(name = "LabelVolume", module = "vnet", from_py_object)]
#[derive(Clone)]
pub struct PyLabelVolume {
    inner: volume::LabelVolume,
}

#[pymethods]
impl PyLabelVolume {
    #[new]
    #[pyo3(signature = (dims, data, spacing = (1.0, 1.0, 1.0)))]
    fn new(dims: Zyx<usize>, data: Vec<u8>, spacing: Zyx<f64>) -> PyResult<Self> {
        let inner = volume::LabelVolume::new(arr(dims), arr(spacing), data).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: volume::load_label(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        volume::save_label(&self.inner, path).map_err(to_py)
    }

    #[getter]
    fn dims(&self) -> Zyx<usize> {
        tup(self.inner.dims())
    }

    #[getter]
    fn spacing(&self) -> Zyx<f64> {
        tup(self.inner.spacing())
    }

    /// Mask values as `bytes`.
    #[getter]
    fn data(&self) -> Vec<u8> {
        self.inner.data().to_vec()
    }

    fn foreground_count(&self) -> usize {
        self.inner.foreground_count()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        let [d, h, w] = self.inner.dims();
        format!(
            "LabelVolume(dims=({d}, {h}, {w}), foreground={})",
            self.inner.foreground_count()
        )
    }
}

/// Noisy sphere image and its mask.
#[pyfunction]
#[pyo3(signature = (dims, radius, seed = 0, noise_std = None))]
fn synthetic_sphere(
    dims: Zyx<usize>,
    radius: f64,
    seed: u64,
    noise_std: Option<f64>,
) -> PyResult<(PyVolume, PyLabelVolume)> {
    let mut spec = volume::SyntheticSpec::sphere(arr(dims), radius, seed);
    if let Some(n) = noise_std {
        spec.noise_std = n;
    }
    let (image, label) = volume::generate_synthetic(&spec).map_err(to_py)?;
    Ok((PyVolume { inner: image }, PyLabelVolume { inner: label }))
}

#[pyfunction]
fn dice(a: &PyLabelVolume, b: &PyLabelVolume) -> PyResult<f64> {
    metrics::dice_metric(&a.inner, &b.inner).map_err(to_py)
}

/// Symmetric boundary distance in mm: the maximum, or the given percentile.
#[pyfunction]
#[pyo3(signature = (a, b, percentile = None))]
fn hausdorff(a: &PyLabelVolume, b: &PyLabelVolume, percentile: Option<f64>) -> PyResult<f64> {
    let d = match percentile {
        Some(q) => SurfaceDistance::Percentile(q),
        None => SurfaceDistance::Max,
    };
    d.measure(&a.inner, &b.inner).map_err(to_py)
}

fn network_from(
    overrides: Option<Vec<(String, String)>>,
    base: NetworkConfig,
) -> PyResult<NetworkConfig> {
    let mut kv = KvConfig::new();
    for (k, v) in overrides.unwrap_or_default() {
        kv.set(k, v);
    }
    kv.reject_unknown(net::NETWORK_KEYS).map_err(to_py)?;
    base.overlay(&kv).map_err(to_py)
}

/// `(layer, input extent (x, y, z), receptive field)` rows for the default
/// network with optional `key=value` overrides.
#[pyfunction]
#[pyo3(signature = (overrides = None))]
fn receptive_fields(
    overrides: Option<Vec<(String, String)>>,
) -> PyResult<Vec<(String, Zyx<usize>, usize)>> {
    let cfg = network_from(overrides, NetworkConfig::default())?;
    Ok(net::receptive_fields(&cfg)
        .rows
        .into_iter()
        .map(|r| {
            let [z, y, x] = r.input_size;
            (r.layer, (x, y, z), r.receptive_field)
        })
        .collect())
}

#[pyfunction]
#[pyo3(signature = (iteration, lr = 1e-4, decay = 0.1, interval = 25_000))]
fn lr_schedule(iteration: usize, lr: f64, decay: f64, interval: usize) -> PyResult<f64> {
    let cfg = TrainConfig {
        lr,
        lr_decay: decay,
        decay_interval: interval,
        ..TrainConfig::default()
    };
    cfg.validate().map_err(to_py)?;
    Ok(train::lr_schedule(iteration, &cfg))
}

/// Segmentation network.
#[pyclass(name = "Model", module = "vnet")]
pub struct PyModel {
    inner: VNetModel,
}

#[pymethods]
impl PyModel {
    /// Desk-scale network (32^3 input) unless `overrides` change it.
    #[new]
    #[pyo3(signature = (seed = 0, overrides = None))]
    fn new(seed: u64, overrides: Option<Vec<(String, String)>>) -> PyResult<Self> {
        let cfg = network_from(overrides, NetworkConfig::desk())?;
        let init = rng::derive(seed, &[rng::tag::MODEL_INIT]);
        Ok(Self {
            inner: VNetModel::build(cfg, init).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(path).map_err(to_py)?;
        Ok(Self {
            inner: train::model_from_checkpoint(&ck).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        train::model_checkpoint(&self.inner)
            .save(path)
            .map_err(to_py)
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    /// Input extent in (z, y, x).
    #[getter]
    fn input_dims(&self) -> Zyx<usize> {
        tup(self.inner.config().input)
    }

    /// Foreground probability and thresholded mask.
    fn segment(&self, py: Python<'_>, image: &PyVolume) -> PyResult<(PyVolume, PyLabelVolume)> {
        let model = &self.inner;
        let v = &image.inner;
        let seg = py.detach(|| metrics::segment(model, v)).map_err(to_py)?;
        Ok((
            PyVolume {
                inner: seg.probability,
            },
            PyLabelVolume { inner: seg.mask },
        ))
    }

    /// Trains in place on the `*_image.vvol` / `*_label.vvol` pairs of
    /// `data_dir` for `iterations` steps and returns `(iter, lr, loss,
    /// train_dice)` rows. `overrides` are training keys such as `lr` or
    /// `loss`.
    #[pyo3(signature = (data_dir, iterations, overrides = None))]
    fn fit(
        &mut self,
        py: Python<'_>,
        data_dir: PathBuf,
        iterations: usize,
        overrides: Option<Vec<(String, String)>>,
    ) -> PyResult<Vec<(usize, f64, f64, f64)>> {
        let mut kv = KvConfig::new();
        for (k, v) in overrides.unwrap_or_default() {
            kv.set(k, v);
        }
        kv.reject_unknown(&train::known_keys()).map_err(to_py)?;
        let mut cfg = TrainConfig::desk().overlay(&kv).map_err(to_py)?;
        cfg.max_iters = iterations;
        let data = Dataset::load_dir(&data_dir).map_err(to_py)?;
        let model = self.inner.clone();
        let trained = py
            .detach(|| -> vnet_core::Result<_> {
                let mut t = Trainer::new(cfg, model, data)?;
                t.run_until(iterations, |_, _| Ok(()))?;
                let rows = t
                    .history()
                    .iter()
                    .map(|r| (r.iter, r.lr, r.loss, r.train_dice))
                    .collect();
                Ok((t.into_model(), rows))
            })
            .map_err(to_py)?;
        self.inner = trained.0;
        Ok(trained.1)
    }
}

#[pymodule]
pub fn vnet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("VNetError", m.py().get_type::<VNetError>())?;
    m.add_class::<PyVolume>()?;
    m.add_class::<PyLabelVolume>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synthetic_sphere, m)?)?;
    m.add_function(wrap_pyfunction!(dice, m)?)?;
    m.add_function(wrap_pyfunction!(hausdorff, m)?)?;
    m.add_function(wrap_pyfunction!(receptive_fields, m)?)?;
    m.add_function(wrap_pyfunction!(lr_schedule, m)?)?;
    Ok(())
}
