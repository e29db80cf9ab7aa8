//! Running experiment sweeps.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rayon::prelude::*;

use crate::adaptivity::{run_offline, run_online, run_uniform, EnrichmentHistory, Problem};
use crate::error::{GmsError, Result};
use crate::fields::{load_field, corner_source, preset_field, PermField, SourceField};
use crate::harness::config::{ExperimentConfig, FieldSource, Job, MethodConfig, SourceConfig};
use crate::harness::report::{plot_to_csv, rows, rows_to_csv, write_atomic, PlotPoint, ReportRow};
use crate::mesh::{build_grid, Grid};

/// Environment variable holding the worker-thread count.
pub const WORKERS_ENV: &str = "GMSFEM_WORKERS";

/// Worker count from the environment, if set and valid.
pub fn workers_from_env() -> Result<Option<usize>> {
    match std::env::var(WORKERS_ENV) {
        Err(_) => Ok(None),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(GmsError::Config(format!("{WORKERS_ENV} must be a positive integer, got {s:?}"))),
        },
    }
}

pub fn build_problem(cfg: &ExperimentConfig, contrast: f64) -> Result<Problem> {
    let grid = build_grid(cfg.grid)?;
    let kappa = match &cfg.field.source {
        FieldSource::Preset(p) => {
            let k = preset_field(&grid, *p, contrast, cfg.field.seed)?;
            if cfg.field.background != 1.0 {
                scale_field(&k, cfg.field.background)?
            } else {
                k
            }
        }
        FieldSource::Raster(path) => load_field(&grid, path)?.with_contrast(cfg.field.background, cfg.field.background * contrast)?,
    };
    let source = load_source(&grid, &cfg.source)?;
    Problem::new(grid, kappa, source)
}

fn scale_field(k: &PermField, background: f64) -> Result<PermField> {
    let (nx, ny) = k.dims();
    PermField::new(nx, ny, k.values().iter().map(|v| v * background).collect())
}

pub fn load_source(grid: &Grid, source: &SourceConfig) -> Result<SourceField> {
    match source {
        SourceConfig::Corners => corner_source(grid),
        SourceConfig::Raster(path) => {
            let text = std::fs::read_to_string(path)?;
            let (nx, ny, values) = parse_block_raster(&text)?;
            if (nx, ny) != (grid.spec.ncx, grid.spec.ncy) {
                return Err(GmsError::Dimension(format!(
                    "source raster is {nx}x{ny}, coarse grid is {}x{}",
                    grid.spec.ncx, grid.spec.ncy
                )));
            }
            let f = SourceField::new(grid, values)?;
            f.check_compatible(grid)?;
            Ok(f)
        }
    }
}

/// Block values, one line per row of coarse blocks, bottom row first.
fn parse_block_raster(text: &str) -> Result<(usize, usize, Vec<f64>)> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| GmsError::Parse(format!("line {}: {e}", n + 1))))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    let nx = rows.first().map_or(0, |r| r.len());
    if nx == 0 || rows.iter().any(|r| r.len() != nx) {
        return Err(GmsError::Parse("source raster rows must be nonempty and equally long".into()));
    }
    let ny = rows.len();
    Ok((nx, ny, rows.into_iter().flatten().collect()))
}

pub fn run_job(problem: &Problem, job: &Job) -> Result<EnrichmentHistory> {
    match &job.method {
        MethodConfig::Uniform { spectral, counts } => run_uniform(problem, *spectral, counts),
        MethodConfig::Offline(c) => run_offline(problem, c),
        MethodConfig::Online(c) => run_online(problem, c),
    }
}

#[derive(Debug, Clone)]
pub struct JobResult {
    pub job: Job,
    pub rows: Vec<ReportRow>,
    pub path: PathBuf,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub jobs: Vec<JobResult>,
    pub plot_path: PathBuf,
}

/// Run every job of `cfg`, writing one CSV per job and a combined plot file.
pub fn run_experiment(cfg: &ExperimentConfig, workers: Option<usize>) -> Result<RunSummary> {
    faer::set_global_parallelism(faer::Par::Seq);
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| GmsError::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| run_in_pool(cfg))
}

fn run_in_pool(cfg: &ExperimentConfig) -> Result<RunSummary> {
    let jobs = cfg.jobs();
    let mut contrasts: Vec<f64> = jobs.iter().map(|j| j.contrast).collect();
    contrasts.sort_by(f64::total_cmp);
    contrasts.dedup();
    let problems: Vec<Problem> = contrasts
        .par_iter()
        .map(|&c| build_problem(cfg, c).map_err(|e| context(e, &format!("setting up contrast {c:e}"))))
        .collect::<Result<_>>()?;
    let by_contrast: BTreeMap<u64, &Problem> = contrasts.iter().map(|c| c.to_bits()).zip(&problems).collect();

    let results: Vec<JobResult> = jobs
        .par_iter()
        .map(|job| {
            let problem = by_contrast[&job.contrast.to_bits()];
            let history = run_job(problem, job).map_err(|e| context(e, &job.series()))?;
            let rows = rows(&job.name, job.contrast, &history);
            let path = cfg.output.join(job.file_name());
            write_atomic(&path, rows_to_csv(&rows)?.as_bytes())?;
            log::info!("wrote {}", path.display());
            Ok(JobResult {
                job: job.clone(),
                rows,
                path,
            })
        })
        .collect::<Result<_>>()?;

    let points: Vec<PlotPoint> = results
        .iter()
        .flat_map(|r| {
            r.rows.iter().map(|row| PlotPoint {
                series: r.job.series(),
                dof: row.dof,
                e: row.e,
            })
        })
        .collect();
    let plot_path = cfg.output.join("plot_data.csv");
    write_atomic(&plot_path, plot_to_csv(&points)?.as_bytes())?;
    Ok(RunSummary {
        jobs: results,
        plot_path,
    })
}

fn context(e: GmsError, what: &str) -> GmsError {
    match e {
        GmsError::Singular(s) => GmsError::Singular(format!("{what}: {s}")),
        GmsError::Domain(s) => GmsError::Domain(format!("{what}: {s}")),
        GmsError::Dimension(s) => GmsError::Dimension(format!("{what}: {s}")),
        other => other,
    }
}
