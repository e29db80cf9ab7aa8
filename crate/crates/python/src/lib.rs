//! Python bindings: build a problem, run the enrichment strategies, read back
//! the per-level records.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use gmsfem::adaptivity::{self, EnrichmentHistory, LevelRecord, OfflineConfig, OnlineConfig, RegionStrategy, StopCriteria};
use gmsfem::error::GmsError;
use gmsfem::fields::{load_field, corner_source, preset_field, FieldPreset};
use gmsfem::harness;
use gmsfem::mesh::{build_grid, GridSpec};
use gmsfem::spectral::SpectralProblem;

fn to_py(e: GmsError) -> PyErr {
    match e {
        GmsError::Io(io) => PyOSError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn spectral(name: &str) -> PyResult<SpectralProblem> {
    match name {
        "sp1" => Ok(SpectralProblem::Sp1),
        "sp2" => Ok(SpectralProblem::Sp2),
        _ => Err(PyValueError::new_err(format!("spectral must be 'sp1' or 'sp2', got {name:?}"))),
    }
}

fn stop(max_levels: usize, eta_rel_tol: f64, dof_fraction: f64) -> StopCriteria {
    StopCriteria {
        eta_rel_tol,
        dof_fraction,
        max_levels,
    }
}

/// One recorded level of an enrichment run.
#[pyclass(frozen, get_all, skip_from_py_object, name = "Level")]
#[derive(Clone)]
struct PyLevel {
    level: usize,
    dof: usize,
    e: f64,
    err_sq: f64,
    step_sq: f64,
    sum_eta2: f64,
    lambda_min: f64,
    counts: Vec<usize>,
    enriched: Vec<usize>,
    regions: Vec<Vec<usize>>,
    skipped: usize,
    wall_ms: f64,
}

impl From<&LevelRecord> for PyLevel {
    fn from(r: &LevelRecord) -> Self {
        Self {
            level: r.level,
            dof: r.dof,
            e: r.e,
            err_sq: r.err_sq,
            step_sq: r.step_sq,
            sum_eta2: r.sum_eta2,
            lambda_min: r.lambda_min,
            counts: r.counts.clone(),
            enriched: r.enriched.clone(),
            regions: r.regions.clone(),
            skipped: r.skipped,
            wall_ms: r.wall_ms,
        }
    }
}

#[pymethods]
impl PyLevel {
    fn __repr__(&self) -> String {
        format!("Level(level={}, dof={}, e={:.3e})", self.level, self.dof, self.e)
    }
}

#[pyclass(frozen, name = "History")]
struct PyHistory {
    inner: EnrichmentHistory,
}

#[pymethods]
impl PyHistory {
    #[getter]
    fn method(&self) -> String {
        format!("{:?}", self.inner.method).to_lowercase()
    }

    #[getter]
    fn levels(&self) -> Vec<PyLevel> {
        self.inner.levels.iter().map(PyLevel::from).collect()
    }

    #[getter]
    fn dof(&self) -> Vec<usize> {
        self.inner.levels.iter().map(|r| r.dof).collect()
    }

    #[getter]
    fn errors(&self) -> Vec<f64> {
        self.inner.levels.iter().map(|r| r.e).collect()
    }

    /// Largest relative defect of the energy identity between consecutive levels.
    fn pythagoras_defect(&self) -> f64 {
        self.inner.pythagoras_defect()
    }

    fn __len__(&self) -> usize {
        self.inner.levels.len()
    }

    fn __repr__(&self) -> String {
        let last = self.inner.final_level();
        format!(
            "History(method={}, levels={}, final_e={:.3e})",
            self.method(),
            self.inner.levels.len(),
            last.map_or(f64::NAN, |r| r.e)
        )
    }
}

/// A coarse grid, a permeability field and the snapshot reference solution.
#[pyclass(frozen, name = "Problem")]
struct PyProblem {
    inner: adaptivity::Problem,
}

#[pymethods]
impl PyProblem {
    /// Bundled field family on an `ncx` x `ncy` coarse grid refined `nf` times per block.
    #[new]
    #[pyo3(signature = (ncx, ncy, nf, preset="inclusions", contrast=1e4, seed=0))]
    fn new(py: Python<'_>, ncx: usize, ncy: usize, nf: usize, preset: &str, contrast: f64, seed: u64) -> PyResult<Self> {
        let preset = match preset {
            "inclusions" => FieldPreset::Inclusions,
            "channels" => FieldPreset::Channels,
            _ => return Err(PyValueError::new_err(format!("unknown preset {preset:?}"))),
        };
        py.detach(|| {
            let grid = build_grid(GridSpec::new(ncx, ncy, nf))?;
            let kappa = preset_field(&grid, preset, contrast, seed)?;
            let source = corner_source(&grid)?;
            adaptivity::Problem::new(grid, kappa, source)
        })
        .map(|inner| Self { inner })
        .map_err(to_py)
    }

    /// Field read from a raster written by `gmsfem field gen`.
    #[staticmethod]
    fn from_raster(py: Python<'_>, ncx: usize, ncy: usize, nf: usize, path: PathBuf) -> PyResult<Self> {
        py.detach(|| {
            let grid = build_grid(GridSpec::new(ncx, ncy, nf))?;
            let kappa = load_field(&grid, &path)?;
            let source = corner_source(&grid)?;
            adaptivity::Problem::new(grid, kappa, source)
        })
        .map(|inner| Self { inner })
        .map_err(to_py)
    }

    #[getter]
    fn n_faces(&self) -> usize {
        self.inner.space.n_faces()
    }

    #[getter]
    fn snapshot_dim(&self) -> usize {
        self.inner.face_sizes().iter().sum()
    }

    /// Cell permeabilities, row-major from the bottom row.
    #[getter]
    fn kappa(&self) -> Vec<f64> {
        self.inner.kappa.values().to_vec()
    }

    #[pyo3(signature = (counts, spectral="sp1"))]
    fn run_uniform(&self, py: Python<'_>, counts: Vec<usize>, spectral: &str) -> PyResult<PyHistory> {
        let problem = self::spectral(spectral)?;
        py.detach(|| adaptivity::run_uniform(&self.inner, problem, &counts))
            .map(|inner| PyHistory { inner })
            .map_err(to_py)
    }

    #[pyo3(signature = (theta, delta0, initial=1, max_levels=25, eta_rel_tol=1e-10, dof_fraction=0.5))]
    fn run_offline(
        &self,
        py: Python<'_>,
        theta: f64,
        delta0: f64,
        initial: usize,
        max_levels: usize,
        eta_rel_tol: f64,
        dof_fraction: f64,
    ) -> PyResult<PyHistory> {
        let cfg = OfflineConfig {
            stop: stop(max_levels, eta_rel_tol, dof_fraction),
            ..OfflineConfig::new(theta, delta0, initial)
        };
        cfg.validate().map_err(to_py)?;
        py.detach(|| adaptivity::run_offline(&self.inner, &cfg))
            .map(|inner| PyHistory { inner })
            .map_err(to_py)
    }

    #[pyo3(signature = (initial=1, regions="neighborhood", spectral="sp1", max_levels=25, eta_rel_tol=1e-10, dof_fraction=0.5))]
    #[allow(clippy::too_many_arguments)]
    fn run_online(
        &self,
        py: Python<'_>,
        initial: usize,
        regions: &str,
        spectral: &str,
        max_levels: usize,
        eta_rel_tol: f64,
        dof_fraction: f64,
    ) -> PyResult<PyHistory> {
        let strategy = match regions {
            "neighborhood" => RegionStrategy::Neighborhood,
            "blocks2x2" => RegionStrategy::Blocks2x2,
            _ => return Err(PyValueError::new_err(format!("regions must be 'neighborhood' or 'blocks2x2', got {regions:?}"))),
        };
        let cfg = OnlineConfig {
            stop: stop(max_levels, eta_rel_tol, dof_fraction),
            ..OnlineConfig::new(self::spectral(spectral)?, initial, strategy)
        };
        cfg.validate(&self.inner.grid).map_err(to_py)?;
        py.detach(|| adaptivity::run_online(&self.inner, &cfg))
            .map(|inner| PyHistory { inner })
            .map_err(to_py)
    }
}

/// Run an experiment config and return `{file name: [level dicts]}`.
#[pyfunction]
#[pyo3(signature = (path, workers=None))]
fn run_config<'py>(py: Python<'py>, path: PathBuf, workers: Option<usize>) -> PyResult<Bound<'py, PyDict>> {
    let cfg = harness::load_config(&path).map_err(|errs| {
        let text: Vec<String> = errs.iter().map(|e| e.to_string()).collect();
        PyValueError::new_err(text.join("\n"))
    })?;
    let summary = py.detach(|| harness::run_experiment(&cfg, workers)).map_err(to_py)?;
    let out = PyDict::new(py);
    for job in summary.jobs {
        let rows = job
            .rows
            .iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("method", &r.method)?;
                d.set_item("contrast", r.contrast)?;
                d.set_item("level", r.level)?;
                d.set_item("dof", r.dof)?;
                d.set_item("e", r.e)?;
                d.set_item("sum_eta2", r.sum_eta2)?;
                d.set_item("lambda_min", r.lambda_min)?;
                Ok(d)
            })
            .collect::<PyResult<Vec<_>>>()?;
        out.set_item(job.job.file_name(), rows)?;
    }
    Ok(out)
}

#[pymodule]
fn gmsfem_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyProblem>()?;
    m.add_class::<PyHistory>()?;
    m.add_class::<PyLevel>()?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    Ok(())
}
