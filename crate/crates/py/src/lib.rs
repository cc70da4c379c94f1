//! Python module `treesplat`.
//!
//! Exposes datasets, configuration, full runs and the standalone metric,
//! clustering and denoising operations. Library errors become `ValueError`,
//! except non-finite optimization which raises `FloatingPointError` and I/O
//! failures which raise `OSError`.

use pyo3::exceptions::{PyFloatingPointError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use treesplat::cluster::{kmeans_restarts, DEFAULT_MAX_ITERS, DEFAULT_RESTARTS};
use treesplat::config;
use treesplat::denoise::{denoise_cluster, DenoiseParams};
use treesplat::metrics;
use treesplat::pipeline::{self, Arm};
use treesplat::query::click_query;
use treesplat::render::{rasterize, render_features};
use treesplat::{Error, GaussianPoint, Scene};

fn to_py(e: Error) -> PyErr {
    if e.is_numeric() {
        PyFloatingPointError::new_err(e.to_string())
    } else if matches!(e, Error::Io(_)) {
        PyIOError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

/// Key/value configuration; the same keys as the CLI config file.
#[pyclass(skip_from_py_object)]
#[derive(Clone, Default)]
struct Config {
    inner: config::Config,
}

#[pymethods]
impl Config {
    #[new]
    #[pyo3(signature = (text=None))]
    fn new(text: Option<&str>) -> PyResult<Self> {
        let inner = match text {
            Some(t) => config::Config::parse(t).map_err(to_py)?,
            None => config::Config::default(),
        };
        Ok(Config { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Config {
            inner: config::Config::load(path).map_err(to_py)?,
        })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(to_py)?;
        self.inner.validate().map_err(to_py)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn __repr__(&self) -> String {
        format!("Config(seed={})", self.inner.train.seed)
    }
}

/// Scene, views and label maps.
#[pyclass(skip_from_py_object)]
#[derive(Clone)]
struct Dataset {
    inner: pipeline::Dataset,
}

#[pymethods]
impl Dataset {
    /// Synthetic scene built from the `synth.*` keys of `config`.
    #[staticmethod]
    #[pyo3(signature = (config=None))]
    fn synthetic(config: Option<&Config>) -> PyResult<Self> {
        let spec = config.map(|c| c.inner.synth.clone()).unwrap_or_default();
        Ok(Dataset {
            inner: pipeline::Dataset::synthetic(&spec).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(dir: &str) -> PyResult<Self> {
        Ok(Dataset {
            inner: pipeline::Dataset::load(dir).map_err(to_py)?,
        })
    }

    fn save(&self, dir: &str) -> PyResult<()> {
        self.inner.save(dir).map_err(to_py)
    }

    #[getter]
    fn n_points(&self) -> usize {
        self.inner.scene.len()
    }

    #[getter]
    fn n_views(&self) -> usize {
        self.inner.views.len()
    }

    #[getter]
    fn positions(&self) -> Vec<[f64; 3]> {
        positions(&self.inner.scene)
    }

    /// `(whole, part, subpart)` per point, or `None`.
    #[getter]
    fn ground_truth(&self) -> Option<Vec<(i64, i64, i64)>> {
        let gt = self.inner.scene.ground_truth.as_ref()?;
        Some(gt.iter().map(|g| (g.whole, g.part, g.subpart)).collect())
    }

    /// Label map of `view` at `level` as rows.
    fn labels(&self, view: usize, level: usize) -> PyResult<Vec<Vec<u32>>> {
        let m = self
            .inner
            .labels
            .get(view)
            .and_then(|l| l.get(level))
            .ok_or_else(|| PyValueError::new_err(format!("no map for view {view} level {level}")))?;
        Ok(m.labels.chunks(m.width).map(<[u32]>::to_vec).collect())
    }

    fn __repr__(&self) -> String {
        format!("Dataset(points={}, views={})", self.n_points(), self.n_views())
    }
}

fn positions(scene: &Scene) -> Vec<[f64; 3]> {
    scene
        .points
        .iter()
        .map(|p| [p.position.x, p.position.y, p.position.z])
        .collect()
}

/// Outcome of a pipeline run.
#[pyclass(skip_from_py_object)]
struct Run {
    inner: pipeline::Run,
}

#[pymethods]
impl Run {
    #[getter]
    fn features(&self) -> Vec<Vec<f64>> {
        self.inner.scene.features()
    }

    #[getter]
    fn k_schedule(&self) -> Vec<usize> {
        self.inner.k_schedule.clone()
    }

    #[getter]
    fn warnings(&self) -> Vec<String> {
        self.inner.warnings.clone()
    }

    /// Metrics as a dict, or `None` without ground truth.
    #[getter]
    fn metrics<'py>(&self, py: Python<'py>) -> PyResult<Option<Bound<'py, PyDict>>> {
        let Some(m) = &self.inner.metrics else { return Ok(None) };
        let d = PyDict::new(py);
        d.set_item("ari", m.ari.clone())?;
        d.set_item("miou", m.miou)?;
        d.set_item("macc", m.macc)?;
        d.set_item("mask_count", m.mask_count)?;
        d.set_item("intra_cosine", m.intra_cosine)?;
        d.set_item("inter_cosine", m.inter_cosine)?;
        Ok(Some(d))
    }

    /// Node id per point at `depth`, `-1` where none.
    fn labels_at_depth(&self, depth: usize) -> Vec<i64> {
        let n = self.inner.scene.len();
        match &self.inner.tree {
            Some(t) => t
                .labels_at_depth(depth, n)
                .iter()
                .map(|l| l.map_or(-1, |v| v as i64))
                .collect(),
            None => vec![-1; n],
        }
    }

    /// Tree nodes as dicts: id, depth, parent, children, size, kept.
    fn tree<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let Some(t) = &self.inner.tree else {
            return Ok(Vec::new());
        };
        t.nodes
            .iter()
            .map(|n| {
                let d = PyDict::new(py);
                d.set_item("id", n.id)?;
                d.set_item("depth", n.depth)?;
                d.set_item("parent", n.parent)?;
                d.set_item("children", n.children.clone())?;
                d.set_item("size", n.point_indices.len())?;
                d.set_item("kept", n.kept_indices.len())?;
                Ok(d)
            })
            .collect()
    }

    /// Node ids from root down under pixel `(x, y)`, or `None` on background.
    fn query(&self, data: &Dataset, view: usize, x: usize, y: usize) -> PyResult<Option<(Vec<usize>, Vec<f64>)>> {
        let tree = self
            .inner
            .tree
            .as_ref()
            .ok_or_else(|| PyValueError::new_err("run has no cluster tree"))?;
        let v = data
            .inner
            .views
            .get(view)
            .ok_or_else(|| PyValueError::new_err(format!("no view {view}")))?;
        let sel = click_query(&self.inner.scene, tree, v, x, y).map_err(to_py)?;
        Ok(sel.map(|s| (s.nodes, s.similarity)))
    }

    /// Rendered feature image of `view` as `[height][width][dim]`.
    fn render(&self, data: &Dataset, view: usize) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let v = data
            .inner
            .views
            .get(view)
            .ok_or_else(|| PyValueError::new_err(format!("no view {view}")))?;
        let fmap = render_features(&self.inner.scene, &rasterize(&self.inner.scene, v)).map_err(to_py)?;
        Ok((0..fmap.height)
            .map(|h| {
                (0..fmap.width)
                    .map(|w| fmap.pixel(h * fmap.width + w).to_vec())
                    .collect()
            })
            .collect())
    }

    fn write_artifacts(&self, dir: &str) -> PyResult<()> {
        pipeline::write_artifacts(dir, &self.inner).map_err(to_py)
    }
}

/// Global stage, clustering cascade, denoising and evaluation.
#[pyfunction]
#[pyo3(signature = (data, config=None))]
fn run_pipeline(py: Python<'_>, data: &Dataset, config: Option<&Config>) -> PyResult<Run> {
    let cfg = config.map(|c| c.inner.train.clone()).unwrap_or_default();
    let inner = py.detach(|| pipeline::run_pipeline(&data.inner, &cfg)).map_err(to_py)?;
    Ok(Run { inner })
}

/// Perturbation sweep rows `(tau, arm, seed, ari, miou, runtime_s)`.
#[pyfunction]
#[pyo3(signature = (config=None))]
fn noise_sweep(py: Python<'_>, config: Option<&Config>) -> PyResult<Vec<(f64, String, u64, f64, f64, f64)>> {
    let c = config.map(|c| c.inner.clone()).unwrap_or_default();
    let rows = py
        .detach(|| pipeline::noise_sweep(&c.synth, &c.sweep, &c.train))
        .map_err(to_py)?;
    Ok(rows
        .into_iter()
        .map(|r| (r.tau, r.arm.to_string(), r.seed, r.ari, r.miou, r.runtime_s))
        .collect())
}

#[pyfunction]
fn adjusted_rand_index(a: Vec<i64>, b: Vec<i64>) -> PyResult<f64> {
    if a.len() != b.len() {
        return Err(PyValueError::new_err("label lists differ in length"));
    }
    Ok(metrics::adjusted_rand_index(&a, &b))
}

/// k-means++ with restarts; returns `(assignments, centroids, inertia)`.
#[pyfunction]
#[pyo3(signature = (data, k, seed=0, max_iters=DEFAULT_MAX_ITERS, restarts=DEFAULT_RESTARTS))]
fn kmeans(
    data: Vec<Vec<f64>>,
    k: usize,
    seed: u64,
    max_iters: usize,
    restarts: usize,
) -> PyResult<(Vec<usize>, Vec<Vec<f64>>, f64)> {
    let r = kmeans_restarts(&data, k, seed, max_iters, restarts).map_err(to_py)?;
    Ok((r.assignments, r.centroids, r.inertia))
}

/// Graph denoising of one cluster; returns `(kept, removed, restored)`
/// indices into the inputs.
#[pyfunction]
#[pyo3(signature = (positions, features, position_multiplier=100.0, feature_multiplier=50.0, obb_scale=1.2))]
fn denoise(
    positions: Vec<[f64; 3]>,
    features: Vec<Vec<f64>>,
    position_multiplier: f64,
    feature_multiplier: f64,
    obb_scale: f64,
) -> PyResult<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    if positions.len() != features.len() {
        return Err(PyValueError::new_err("positions and features differ in length"));
    }
    let dim = features.first().map_or(1, Vec::len);
    let mut scene = Scene::new(dim);
    for (p, f) in positions.iter().zip(&features) {
        if f.len() != dim {
            return Err(PyValueError::new_err("features differ in dimension"));
        }
        let mut g = GaussianPoint::new((*p).into(), 0.01, 0.5, dim);
        g.feature.clone_from(f);
        scene.points.push(g);
    }
    let params = DenoiseParams {
        position_multiplier,
        feature_multiplier,
        obb_scale,
        ..Default::default()
    };
    let all: Vec<usize> = (0..scene.len()).collect();
    let out = denoise_cluster(&scene, &all, &params);
    Ok((out.kept, out.removed, out.restored))
}

#[pymodule]
#[pyo3(name = "treesplat")]
pub fn treesplat_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Config>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<Run>()?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(noise_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(adjusted_rand_index, m)?)?;
    m.add_function(wrap_pyfunction!(kmeans, m)?)?;
    m.add_function(wrap_pyfunction!(denoise, m)?)?;
    m.add("POSITION_ARM", Arm::Position.to_string())?;
    m.add("FEATURE_ARM", Arm::FeatureOnly.to_string())?;
    Ok(())
}
