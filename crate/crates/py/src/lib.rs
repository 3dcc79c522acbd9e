//! Python bindings: point clouds, geometry kernels, metrics, configuration
//! and the completion model.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use symmcomp::geometry::{self, io};
use symmcomp::{Error, GuidanceFlags, ModelConfig, SymmCompletion};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// An ordered set of 3D points.
#[pyclass(name = "PointCloud", module = "symmcomp_py")]
#[derive(Clone)]
pub struct PyPointCloud {
    inner: geometry::PointCloud,
}

#[pymethods]
impl PyPointCloud {
    #[new]
    fn new(points: Vec<[f64; 3]>) -> PyResult<Self> {
        Ok(Self {
            inner: geometry::PointCloud::new(points).map_err(to_py)?,
        })
    }

    /// Reads an XYZ text or PCF1 binary file.
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: io::read_cloud(&path).map_err(to_py)?,
        })
    }

    /// Writes PCF1 for a `.pcf` extension, XYZ text otherwise.
    fn write(&self, path: PathBuf) -> PyResult<()> {
        io::write_cloud(&path, &self.inner).map_err(to_py)
    }

    fn points(&self) -> Vec<[f64; 3]> {
        self.inner.points().to_vec()
    }

    fn select(&self, indices: Vec<usize>) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.select(&indices).map_err(to_py)?,
        })
    }

    fn reflect(&self, normal: [f64; 3]) -> PyResult<Self> {
        Ok(Self {
            inner: geometry::reflect_about_plane(&self.inner, normal).map_err(to_py)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("PointCloud({} points)", self.inner.len())
    }
}

#[pyfunction]
fn chamfer_l1(p: &PyPointCloud, q: &PyPointCloud) -> f64 {
    geometry::chamfer_l1(&p.inner, &q.inner)
}

#[pyfunction]
fn chamfer_l2(p: &PyPointCloud, q: &PyPointCloud) -> f64 {
    geometry::chamfer_l2(&p.inner, &q.inner)
}

#[pyfunction]
fn fidelity_distance(input: &PyPointCloud, output: &PyPointCloud) -> f64 {
    geometry::fidelity_distance(&input.inner, &output.inner)
}

#[pyfunction]
#[pyo3(signature = (p, q, threshold = geometry::F1_THRESHOLD))]
fn f1_score(p: &PyPointCloud, q: &PyPointCloud, threshold: f64) -> PyResult<f64> {
    geometry::f1_score(&p.inner, &q.inner, threshold).map_err(to_py)
}

#[pyfunction]
fn mmd(output: &PyPointCloud, gallery: Vec<PyPointCloud>) -> PyResult<f64> {
    let g: Vec<geometry::PointCloud> = gallery.into_iter().map(|c| c.inner).collect();
    geometry::mmd(&output.inner, &g).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (cloud, m, seed = 0))]
fn fps(cloud: &PyPointCloud, m: usize, seed: usize) -> PyResult<Vec<usize>> {
    geometry::fps(&cloud.inner, m, seed).map_err(to_py)
}

#[pyfunction]
fn knn(queries: &PyPointCloud, reference: &PyPointCloud, k: usize) -> PyResult<Vec<Vec<usize>>> {
    geometry::knn(&queries.inner, &reference.inner, k).map_err(to_py)
}

/// Model and training hyperparameters.
#[pyclass(name = "ModelConfig", module = "symmcomp_py")]
#[derive(Clone)]
pub struct PyModelConfig {
    inner: ModelConfig,
}

#[pymethods]
impl PyModelConfig {
    #[new]
    #[pyo3(signature = (text = None))]
    fn new(text: Option<&str>) -> PyResult<Self> {
        let inner = match text {
            Some(t) => ModelConfig::from_text(t).map_err(to_py)?,
            None => ModelConfig::default(),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn toy() -> Self {
        Self { inner: ModelConfig::toy() }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: ModelConfig::load(&path).map_err(to_py)?,
        })
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn output_counts(&self) -> [usize; 3] {
        self.inner.output_counts()
    }

    fn set_guidance(&mut self, use_f_k: bool, use_f_m: bool) {
        self.inner.guidance = GuidanceFlags { use_f_k, use_f_m };
    }

    #[getter]
    fn n_k(&self) -> usize {
        self.inner.n_k
    }

    #[setter]
    fn set_n_k(&mut self, v: usize) {
        self.inner.n_k = v;
    }

    #[getter]
    fn ratios(&self) -> [usize; 2] {
        self.inner.ratios
    }

    #[setter]
    fn set_ratios(&mut self, v: [usize; 2]) {
        self.inner.ratios = v;
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, v: u64) {
        self.inner.seed = v;
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

/// The completion network.
#[pyclass(name = "Model", module = "symmcomp_py")]
pub struct PyModel {
    inner: SymmCompletion,
}

#[pymethods]
impl PyModel {
    #[new]
    fn new(cfg: &PyModelConfig) -> PyResult<Self> {
        Ok(Self {
            inner: SymmCompletion::new(&cfg.inner).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(cfg: &PyModelConfig, path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: SymmCompletion::load(&cfg.inner, &path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// Returns `(key points, predicted missing points, initial cloud, [fine1, fine2])`.
    fn complete(
        &self,
        py: Python<'_>,
        partial: &PyPointCloud,
    ) -> PyResult<(PyPointCloud, PyPointCloud, PyPointCloud, Vec<PyPointCloud>)> {
        let c = py
            .allow_threads(|| self.inner.complete(&partial.inner))
            .map_err(to_py)?;
        let wrap = |inner| PyPointCloud { inner };
        Ok((
            wrap(c.p_k),
            wrap(c.p_m),
            wrap(c.p_init),
            c.fines.into_iter().map(wrap).collect(),
        ))
    }

    /// Total training loss for one partial/ground-truth pair.
    fn loss(&self, partial: &PyPointCloud, gt: &PyPointCloud) -> PyResult<f64> {
        self.inner.loss_value(&partial.inner, &gt.inner).map_err(to_py)
    }
}

/// Runs the built-in checks; returns `(name, passed, detail)` triples.
#[pyfunction]
#[pyo3(signature = (quick = true))]
fn selftest(py: Python<'_>, quick: bool) -> PyResult<Vec<(String, bool, String)>> {
    let checks = py.allow_threads(|| symmcomp::selftest::run(quick)).map_err(to_py)?;
    Ok(checks
        .into_iter()
        .map(|c| (c.name.to_string(), c.passed, c.detail))
        .collect())
}

#[pymodule]
fn symmcomp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPointCloud>()?;
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(chamfer_l1, m)?)?;
    m.add_function(wrap_pyfunction!(chamfer_l2, m)?)?;
    m.add_function(wrap_pyfunction!(fidelity_distance, m)?)?;
    m.add_function(wrap_pyfunction!(f1_score, m)?)?;
    m.add_function(wrap_pyfunction!(mmd, m)?)?;
    m.add_function(wrap_pyfunction!(fps, m)?)?;
    m.add_function(wrap_pyfunction!(knn, m)?)?;
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrappers_agree_with_the_core() {
        let p = PyPointCloud::new(vec![[0.0, 0.0, 0.0]]).unwrap();
        let q = PyPointCloud::new(vec![[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]]).unwrap();
        assert_eq!(chamfer_l1(&p, &q), 1.25);
        assert_eq!(fps(&q, 2, 0).unwrap(), vec![0, 1]);
        assert_eq!(p.reflect([1.0, 0.0, 0.0]).unwrap().points(), vec![[0.0, 0.0, 0.0]]);
    }

    #[test]
    fn config_text_and_counts() {
        let cfg = PyModelConfig::new(Some("[model]\nn_k = 8\nratios = [2, 2]\n")).unwrap();
        assert_eq!(cfg.output_counts(), [16, 32, 64]);
        assert!(PyModelConfig::new(Some("[model]\nheads = 0\n")).is_err());
    }
}
