//! Python bindings. Images cross the boundary as `Image` objects holding
//! row-major `height × width × channels` floats; no numpy dependency.

use nalgebra::Vector3;
use patchsplat::msrn;
use patchsplat::scene::{self, ShInitConfig, ShInitMode};
use patchsplat::trainer::{self, LearningRates, TrainConfig, View};
use patchsplat::{raster, Error, ImageF};
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

pyo3::create_exception!(patchsplat, PatchsplatError, PyValueError);

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        other => PatchsplatError::new_err(other.to_string()),
    }
}

fn vec3(v: [f64; 3]) -> Vector3<f64> {
    Vector3::new(v[0], v[1], v[2])
}

#[pyclass(name = "Image", module = "patchsplat")]
pub struct PyImage {
    pub inner: ImageF,
}

#[pymethods]
impl PyImage {
    #[new]
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> PyResult<Self> {
        let inner = ImageF::from_vec(height, width, channels, data).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    pub fn load(path: &str) -> PyResult<Self> {
        let inner = patchsplat::io::load_image(path).map_err(py_err)?;
        Ok(Self { inner })
    }

    pub fn save(&self, path: &str) -> PyResult<()> {
        patchsplat::io::save_image(&self.inner, path).map_err(py_err)
    }

    #[getter]
    pub fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    pub fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    pub fn channels(&self) -> usize {
        self.inner.channels()
    }

    /// Flat row-major values.
    pub fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    /// Nested `[row][col][channel]` lists.
    pub fn to_list(&self) -> Vec<Vec<Vec<f64>>> {
        let img = &self.inner;
        (0..img.height())
            .map(|r| {
                (0..img.width())
                    .map(|c| (0..img.channels()).map(|ch| img.get(r, c, ch)).collect())
                    .collect()
            })
            .collect()
    }

    fn __repr__(&self) -> String {
        format!("Image({}x{}x{})", self.height(), self.width(), self.channels())
    }
}

#[pyclass(name = "Camera", module = "patchsplat")]
pub struct PyCamera {
    pub inner: patchsplat::Camera,
}

#[pymethods]
impl PyCamera {
    /// Pinhole camera looking from `eye` at `target`, principal point at the
    /// image centre.
    #[staticmethod]
    #[pyo3(signature = (width, height, focal, eye, target, up = [0.0, -1.0, 0.0]))]
    pub fn look_at(
        width: usize,
        height: usize,
        focal: f64,
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
    ) -> PyResult<Self> {
        let inner = patchsplat::Camera::look_at(width, height, focal, vec3(eye), vec3(target), vec3(up))
            .map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    pub fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    pub fn height(&self) -> usize {
        self.inner.height
    }

    pub fn center(&self) -> [f64; 3] {
        let c = self.inner.center();
        [c.x, c.y, c.z]
    }
}

#[pyclass(name = "PointCloud", module = "patchsplat")]
pub struct PyPointCloud {
    pub inner: patchsplat::PointCloud,
}

#[pymethods]
impl PyPointCloud {
    /// Positions in scene units, colours in [0, 1].
    #[new]
    pub fn new(positions: Vec<[f64; 3]>, colors: Vec<[f64; 3]>) -> PyResult<Self> {
        let inner = patchsplat::PointCloud::new(positions, colors).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.count()
    }

    pub fn positions(&self) -> Vec<[f64; 3]> {
        self.inner.positions().to_vec()
    }

    pub fn colors(&self) -> Vec<[f64; 3]> {
        self.inner.colors().to_vec()
    }
}

#[pyclass(name = "GaussianSet", module = "patchsplat")]
pub struct PyGaussianSet {
    pub inner: patchsplat::GaussianSet,
}

#[pymethods]
impl PyGaussianSet {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    pub fn max_degree(&self) -> usize {
        self.inner.max_degree
    }

    /// SH degree of every Gaussian.
    pub fn degrees(&self) -> Vec<usize> {
        self.inner.gaussians.iter().map(|g| g.sh.degree()).collect()
    }

    pub fn opacities(&self) -> Vec<f64> {
        self.inner.gaussians.iter().map(|g| g.opacity()).collect()
    }

    /// Per-degree variance of the SH coefficients, degrees `0..=max_degree`.
    pub fn sh_variance(&self) -> PyResult<Vec<f64>> {
        scene::sh_variance_report(&self.inner).map_err(py_err)
    }

    /// Copy without the Gaussians whose opacity is below `threshold`.
    pub fn pruned(&self, threshold: f64) -> PyResult<Self> {
        let inner = scene::prune(&self.inner, threshold).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn __repr__(&self) -> String {
        format!("GaussianSet({} Gaussians, max degree {})", self.inner.len(), self.inner.max_degree)
    }
}

#[pyclass(name = "MsrnModel", module = "patchsplat")]
pub struct PyMsrnModel {
    pub inner: msrn::MsrnModel,
}

#[pymethods]
impl PyMsrnModel {
    /// Randomly initialised model, useful for smoke tests.
    #[staticmethod]
    pub fn fixture(scale_factor: usize, blocks: usize, features: usize, seed: u64) -> PyResult<Self> {
        let inner = msrn::MsrnModel::fixture(scale_factor, blocks, features, seed).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    pub fn load(path: &str) -> PyResult<Self> {
        let inner = msrn::load_weights(path).map_err(py_err)?;
        Ok(Self { inner })
    }

    pub fn save(&self, path: &str) -> PyResult<()> {
        msrn::save_weights(&self.inner, path).map_err(py_err)
    }

    #[getter]
    pub fn scale_factor(&self) -> usize {
        self.inner.scale_factor
    }

    pub fn upscale(&self, py: Python<'_>, image: &PyImage) -> PyResult<PyImage> {
        let lr = image.inner.clone();
        let inner = py.detach(|| msrn::msrn_forward(&lr, &self.inner)).map_err(py_err)?;
        Ok(PyImage { inner })
    }
}

#[pyfunction]
pub fn load_ply(path: &str) -> PyResult<PyPointCloud> {
    let inner = patchsplat::io::load_ply(path).map_err(py_err)?;
    Ok(PyPointCloud { inner })
}

/// Gaussians from a point cloud. `mode` is `"standard"` or `"dynamic"`.
#[pyfunction]
#[pyo3(signature = (cloud, mode = "dynamic", max_degree = 5))]
pub fn init_scene(cloud: &PyPointCloud, mode: &str, max_degree: usize) -> PyResult<PyGaussianSet> {
    let mode = match mode {
        "standard" => ShInitMode::Standard,
        "dynamic" => ShInitMode::Dynamic,
        other => return Err(PyValueError::new_err(format!("unknown SH mode {other:?}"))),
    };
    let cfg = ShInitConfig {
        max_degree,
        ..Default::default()
    };
    let inner = scene::init_scene(&cloud.inner, &cfg, mode).map_err(py_err)?;
    Ok(PyGaussianSet { inner })
}

#[pyfunction]
pub fn render(py: Python<'_>, set: &PyGaussianSet, camera: &PyCamera) -> PyResult<PyImage> {
    let cfg = raster::RasterConfig::default();
    let inner = py
        .detach(|| raster::render(&set.inner, &camera.inner, &cfg))
        .map_err(py_err)?;
    Ok(PyImage { inner })
}

/// Trains `set` against `(camera, image)` pairs and returns the trained set
/// with the per-iteration total loss.
#[pyfunction]
#[pyo3(signature = (set, views, iterations = 500, k_switch = 200, seed = 0, lr_scale = 1.0))]
pub fn train(
    py: Python<'_>,
    set: &PyGaussianSet,
    views: Vec<(PyRef<'_, PyCamera>, PyRef<'_, PyImage>)>,
    iterations: u64,
    k_switch: u64,
    seed: u64,
    lr_scale: f64,
) -> PyResult<(PyGaussianSet, Vec<f64>)> {
    let views: Vec<View> = views
        .iter()
        .enumerate()
        .map(|(k, (cam, img))| View {
            name: format!("{k:03}"),
            camera: cam.inner.clone(),
            image: img.inner.clone(),
        })
        .collect();
    let mut cfg = TrainConfig {
        iterations,
        seed,
        learning_rates: LearningRates::default().scaled(lr_scale),
        ..Default::default()
    };
    cfg.loss.k_switch = k_switch;
    cfg.loss.seed = seed;
    let start = set.inner.clone();
    let out = py.detach(|| trainer::train(start, &views, &cfg)).map_err(py_err)?;
    let totals = out.log.records.iter().map(|r| r.total).collect();
    Ok((PyGaussianSet { inner: out.set }, totals))
}

/// PSNR in dB, capped at 99 for identical images.
#[pyfunction]
pub fn psnr(a: &PyImage, b: &PyImage) -> PyResult<f64> {
    trainer::psnr_capped(&a.inner, &b.inner).map_err(py_err)
}

/// SSIM with the default 11×11 window.
#[pyfunction]
pub fn ssim(a: &PyImage, b: &PyImage) -> PyResult<f64> {
    trainer::ssim_full(&a.inner, &b.inner, &Default::default()).map_err(py_err)
}

#[pyfunction]
pub fn load_checkpoint(path: &str) -> PyResult<(PyGaussianSet, u64)> {
    let ckpt = patchsplat::io::load_checkpoint(path).map_err(py_err)?;
    Ok((PyGaussianSet { inner: ckpt.set }, ckpt.iteration))
}

/// Writes `set` as an iteration-0 checkpoint with default training settings.
#[pyfunction]
pub fn save_checkpoint(set: &PyGaussianSet, path: &str) -> PyResult<()> {
    let ckpt = patchsplat::io::Checkpoint::initial(set.inner.clone(), TrainConfig::default());
    patchsplat::io::save_checkpoint(&ckpt, path).map_err(py_err)
}

#[pymodule]
#[pyo3(name = "patchsplat")]
fn patchsplat_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("PatchsplatError", m.py().get_type::<PatchsplatError>())?;
    m.add_class::<PyImage>()?;
    m.add_class::<PyCamera>()?;
    m.add_class::<PyPointCloud>()?;
    m.add_class::<PyGaussianSet>()?;
    m.add_class::<PyMsrnModel>()?;
    m.add_function(wrap_pyfunction!(load_ply, m)?)?;
    m.add_function(wrap_pyfunction!(init_scene, m)?)?;
    m.add_function(wrap_pyfunction!(render, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(load_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(save_checkpoint, m)?)?;
    Ok(())
}
