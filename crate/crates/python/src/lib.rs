use std::collections::HashMap;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use gidp_core::config::PipelineConfig;
use gidp_core::dataset::{generate_synthetic_world, SyntheticWorldConfig};
use gidp_core::encoder::{self, Architecture};
use gidp_core::error::Error;
use gidp_core::pointcloud as pc;
use gidp_core::retrieval::{self, EnhanceConfig, EnhanceMode, Origin};
use gidp_core::{finetune, pipeline, pretrain, rng};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn origin(name: &str) -> PyResult<Origin> {
    match name {
        "train" => Ok(Origin::Train),
        "database" => Ok(Origin::Database),
        "query" => Ok(Origin::Query),
        _ => Err(PyValueError::new_err(format!("origin must be train, database or query, got `{name}`"))),
    }
}

#[pyclass(name = "PointCloud", module = "gidp_py", from_py_object)]
#[derive(Clone)]
struct PyPointCloud {
    inner: pc::PointCloud,
}

#[pymethods]
impl PyPointCloud {
    #[new]
    fn new(points: Vec<[f64; 3]>) -> PyResult<Self> {
        Ok(Self {
            inner: pc::PointCloud::new(points).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: pc::load_pointcloud(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        pc::save_pointcloud(&self.inner, path).map_err(to_py)
    }

    fn points(&self) -> Vec<[f64; 3]> {
        self.inner.points().to_vec()
    }

    fn permuted(&self, order: Vec<usize>) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.permuted(&order).map_err(to_py)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("PointCloud(n={})", self.inner.len())
    }
}

fn wrap(inner: pc::PointCloud) -> PyPointCloud {
    PyPointCloud { inner }
}

#[pyfunction]
fn jitter(cloud: &PyPointCloud, sigma: f64, clip: f64, seed: u64) -> PyResult<PyPointCloud> {
    pc::jitter(&cloud.inner, sigma, clip, &mut rng::seeded(seed)).map(wrap).map_err(to_py)
}

#[pyfunction]
fn remove_random_points(cloud: &PyPointCloud, fraction: f64, seed: u64) -> PyResult<PyPointCloud> {
    pc::remove_random_points(&cloud.inner, fraction, &mut rng::seeded(seed))
        .map(wrap)
        .map_err(to_py)
}

/// Returns the cloud and the number of removed points.
#[pyfunction]
fn remove_block(cloud: &PyPointCloud, center: [f64; 3], extent: f64) -> PyResult<(PyPointCloud, usize)> {
    let (out, info) = pc::remove_block_at(&cloud.inner, center, extent).map_err(to_py)?;
    Ok((wrap(out), info.removed))
}

#[pyfunction]
fn shear(cloud: &PyPointCloud, shear_max: f64, seed: u64) -> PyResult<PyPointCloud> {
    pc::shear(&cloud.inner, shear_max, &mut rng::seeded(seed)).map(wrap).map_err(to_py)
}

/// Default augmentation chain: jitter, point removal, block removal, shear.
#[pyfunction]
fn augment(cloud: &PyPointCloud, seed: u64) -> PyResult<PyPointCloud> {
    pc::compose_augmentations(&cloud.inner, &pc::AugmentationConfig::default(), &mut rng::seeded(seed))
        .map(wrap)
        .map_err(to_py)
}

#[pyclass(name = "Encoder", module = "gidp_py", skip_from_py_object)]
#[derive(Clone)]
struct PyEncoder {
    inner: encoder::EncoderParams,
}

#[pymethods]
impl PyEncoder {
    #[new]
    #[pyo3(signature = (seed=0, widths=vec![3, 64, 128, 256], proj_hidden=None))]
    fn new(seed: u64, widths: Vec<usize>, proj_hidden: Option<usize>) -> PyResult<Self> {
        let hidden = proj_hidden.unwrap_or(*widths.last().unwrap_or(&0));
        let arch = Architecture::new(widths, hidden).map_err(to_py)?;
        Ok(Self {
            inner: encoder::init_architecture(seed, &arch).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: encoder::load_checkpoint(path).map_err(to_py)?.0,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        encoder::save_checkpoint(&self.inner, None, path).map_err(to_py)
    }

    #[getter]
    fn descriptor_dim(&self) -> usize {
        self.inner.descriptor_dim()
    }

    #[getter]
    fn gem_p(&self) -> f64 {
        self.inner.gem_p()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.values().len()
    }

    /// Unit-norm global descriptor.
    fn forward(&self, cloud: &PyPointCloud) -> PyResult<Vec<f64>> {
        Ok(encoder::forward(&self.inner, &cloud.inner).map_err(to_py)?.descriptor)
    }

    fn forward_batch(&self, py: Python<'_>, clouds: Vec<PyPointCloud>) -> PyResult<Vec<Vec<f64>>> {
        let owned: Vec<pc::PointCloud> = clouds.into_iter().map(|c| c.inner).collect();
        py.detach(|| {
            let refs: Vec<&pc::PointCloud> = owned.iter().collect();
            encoder::encode_batch(&self.inner, &refs, encoder::Target::Descriptor)
        })
        .map_err(to_py)
    }

    /// Projection-head embedding of a descriptor.
    fn project(&self, descriptor: Vec<f64>) -> PyResult<Vec<f64>> {
        encoder::projection_head(&self.inner, &descriptor).map_err(to_py)
    }
}

#[pyclass(name = "DescriptorStore", module = "gidp_py", skip_from_py_object)]
#[derive(Clone)]
struct PyStore {
    inner: retrieval::DescriptorStore,
}

#[pymethods]
impl PyStore {
    #[new]
    fn new(dim: usize) -> PyResult<Self> {
        Ok(Self {
            inner: retrieval::DescriptorStore::new(dim).map_err(to_py)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (path, origin="database"))]
    fn load(path: &str, origin: &str) -> PyResult<Self> {
        let o = self::origin(origin)?;
        Ok(Self {
            inner: retrieval::load_descriptors(path, o).map_err(to_py)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        retrieval::save_descriptors(&self.inner, path).map_err(to_py)
    }

    #[pyo3(signature = (id, descriptor, coord, origin="database"))]
    fn insert(&mut self, id: u64, descriptor: Vec<f64>, coord: [f64; 2], origin: &str) -> PyResult<()> {
        let o = self::origin(origin)?;
        self.inner.insert(id, descriptor, coord, o).map_err(to_py)
    }

    fn get(&self, id: u64) -> Option<Vec<f64>> {
        self.inner.get(id).map(|e| e.descriptor.clone())
    }

    fn ids(&self) -> Vec<u64> {
        self.inner.entries().iter().map(|e| e.id).collect()
    }

    /// `(id, distance)` pairs, nearest first.
    #[pyo3(signature = (query, k, exclude=None))]
    fn knn(&self, query: Vec<f64>, k: usize, exclude: Option<u64>) -> PyResult<Vec<(u64, f64)>> {
        Ok(retrieval::knn(&self.inner, &query, k, exclude)
            .map_err(to_py)?
            .into_iter()
            .map(|n| (n.id, n.distance))
            .collect())
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyfunction]
fn enhance_descriptor(v: Vec<f64>, neighbors: Vec<Vec<f64>>, lam: f64) -> PyResult<Vec<f64>> {
    let refs: Vec<&[f64]> = neighbors.iter().map(Vec::as_slice).collect();
    retrieval::enhance_descriptor(&v, &refs, lam).map_err(to_py)
}

/// Returns the enhanced `(queries, database)` stores.
#[pyfunction]
#[pyo3(signature = (queries, database, train, lam=0.2, k=5, mode="inductive"))]
fn enhance_all(
    queries: &PyStore,
    database: &PyStore,
    train: &PyStore,
    lam: f64,
    k: usize,
    mode: &str,
) -> PyResult<(PyStore, PyStore)> {
    let cfg = EnhanceConfig {
        lambda: lam,
        neighbors_k: k,
        mode: mode.parse::<EnhanceMode>().map_err(to_py)?,
        ..EnhanceConfig::default()
    };
    let (q, d) = retrieval::enhance_all(&queries.inner, &database.inner, &train.inner, &cfg).map_err(to_py)?;
    Ok((PyStore { inner: q }, PyStore { inner: d }))
}

/// Recall metrics as a dict; `ranks` maps query id to the rank of its first
/// correct match (None when it has none).
#[pyfunction]
#[pyo3(signature = (queries, database, match_radius=25.0))]
fn evaluate<'py>(
    py: Python<'py>,
    queries: &PyStore,
    database: &PyStore,
    match_radius: f64,
) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
    use pyo3::types::PyDict;
    let r = retrieval::evaluate(&queries.inner, &database.inner, match_radius).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("recall_top1", r.recall_top1)?;
    d.set_item("recall_top1pct", r.recall_top1pct)?;
    d.set_item("num_queries_evaluated", r.num_queries_evaluated)?;
    d.set_item("top1pct_cutoff", r.top1pct_cutoff)?;
    let ranks: HashMap<u64, Option<usize>> = r.ranks.iter().copied().collect();
    d.set_item("ranks", ranks)?;
    d.set_item("text", r.to_text())?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (anchor, positive, negatives, temperature=1.0, include_positive_in_denominator=false))]
fn info_nce_loss(
    anchor: Vec<f64>,
    positive: Vec<f64>,
    negatives: Vec<Vec<f64>>,
    temperature: f64,
    include_positive_in_denominator: bool,
) -> PyResult<f64> {
    Ok(
        pretrain::info_nce_loss(&anchor, &positive, &negatives, temperature, include_positive_in_denominator)
            .map_err(to_py)?
            .loss,
    )
}

#[pyfunction]
#[pyo3(signature = (anchor, positive, negative, margin=0.2))]
fn triplet_loss(anchor: Vec<f64>, positive: Vec<f64>, negative: Vec<f64>, margin: f64) -> PyResult<f64> {
    Ok(finetune::triplet_loss(&anchor, &positive, &negative, margin).map_err(to_py)?.loss)
}

/// Synthetic submaps as `(id, (easting, northing), PointCloud)` tuples.
#[pyfunction]
#[pyo3(signature = (num_sites=60, submaps_per_site=4, points_per_cloud=1024, seed=0))]
fn synthetic_world(
    num_sites: usize,
    submaps_per_site: usize,
    points_per_cloud: usize,
    seed: u64,
) -> PyResult<Vec<(u64, [f64; 2], PyPointCloud)>> {
    let cfg = SyntheticWorldConfig {
        num_sites,
        submaps_per_site,
        points_per_cloud,
        ..SyntheticWorldConfig::default()
    };
    let records = generate_synthetic_world(&cfg, &mut rng::seeded(seed)).map_err(to_py)?;
    Ok(records
        .into_iter()
        .map(|r| (r.id, r.coord, wrap((*r.cloud).clone())))
        .collect())
}

/// Runs every stage from config text (`section.key = value` lines) and
/// returns the recall summary table.
#[pyfunction]
fn run_pipeline(py: Python<'_>, config: &str) -> PyResult<String> {
    let cfg = PipelineConfig::parse(config).map_err(to_py)?;
    let outcome = py.detach(|| pipeline::run_pipeline(&cfg)).map_err(to_py)?;
    Ok(outcome.summary())
}

#[pymodule]
fn gidp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPointCloud>()?;
    m.add_class::<PyEncoder>()?;
    m.add_class::<PyStore>()?;
    m.add_function(wrap_pyfunction!(jitter, m)?)?;
    m.add_function(wrap_pyfunction!(remove_random_points, m)?)?;
    m.add_function(wrap_pyfunction!(remove_block, m)?)?;
    m.add_function(wrap_pyfunction!(shear, m)?)?;
    m.add_function(wrap_pyfunction!(augment, m)?)?;
    m.add_function(wrap_pyfunction!(enhance_descriptor, m)?)?;
    m.add_function(wrap_pyfunction!(enhance_all, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(info_nce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(triplet_loss, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_world, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
