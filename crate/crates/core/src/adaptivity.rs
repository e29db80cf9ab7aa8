//! Offline and online adaptive enrichment loops.

use std::fmt;
use std::sync::OnceLock;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GmsError, Result};
use crate::fem_fine::FineSystem;
use crate::fields::{PermField, SourceField};
use crate::indicators::{eta, GramCache, NormFlavor, ResidualReport};
use crate::linalg::{dot, solve_saddle, PressureFix};
use crate::mesh::{Axis, Grid};
use crate::ms_solver::{error_parts, solve_ms, ColumnKind, MsColumn, MsSolution, MsSpace};
use crate::snapshot::{solve_snapshot_reference, CoarseSolution, SnapshotSpace};
use crate::spectral::{select_offline, solve_all, FaceEigen, MsBasisSelection, SpectralProblem};

/// Everything that stays fixed while the multiscale space is enriched.
pub struct Problem {
    pub grid: Grid,
    pub kappa: PermField,
    pub sys: FineSystem,
    pub space: SnapshotSpace,
    pub source: SourceField,
    pub reference: CoarseSolution,
    eigen: [OnceLock<Vec<FaceEigen>>; 2],
    grams: [OnceLock<GramCache>; 2],
}

impl Problem {
    pub fn new(grid: Grid, kappa: PermField, source: SourceField) -> Result<Self> {
        kappa.check_matches(&grid)?;
        let sys = FineSystem::assemble(&grid, &kappa)?;
        let space = SnapshotSpace::assemble(&grid, &sys)?;
        let reference = solve_snapshot_reference(&space, &grid, &source)?;
        Ok(Self {
            grid,
            kappa,
            sys,
            space,
            source,
            reference,
            eigen: Default::default(),
            grams: Default::default(),
        })
    }

    /// Eigenpairs of every face, computed on first use.
    pub fn eigen(&self, problem: SpectralProblem) -> Result<&[FaceEigen]> {
        let cell = &self.eigen[problem as usize];
        if let Some(e) = cell.get() {
            return Ok(e);
        }
        let e = solve_all(&self.grid, &self.sys, &self.space, problem)?;
        Ok(cell.get_or_init(|| e))
    }

    pub fn grams(&self, flavor: NormFlavor) -> Result<&GramCache> {
        let cell = &self.grams[flavor as usize];
        if let Some(g) = cell.get() {
            return Ok(g);
        }
        let g = GramCache::build(&self.grid, &self.space, flavor)?;
        Ok(cell.get_or_init(|| g))
    }

    /// `‖v_snap‖²`.
    pub fn reference_norm_sq(&self) -> f64 {
        self.space.l2_sq(&self.reference.coeffs)
    }

    pub fn face_sizes(&self) -> Vec<usize> {
        (0..self.space.n_faces()).map(|i| self.space.face_len(i)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Uniform,
    Offline,
    Online,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Uniform => "uniform",
            Method::Offline => "offline",
            Method::Online => "online",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionStrategy {
    Neighborhood,
    Blocks2x2,
}

impl fmt::Display for RegionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RegionStrategy::Neighborhood => "neighborhood",
            RegionStrategy::Blocks2x2 => "blocks2x2",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StopCriteria {
    /// Stop once `Σ η²` falls below this fraction of its initial value.
    pub eta_rel_tol: f64,
    /// Stop once the DOF reach this fraction of the snapshot dimension.
    pub dof_fraction: f64,
    /// Number of recorded levels, the initial one included.
    pub max_levels: usize,
}

impl Default for StopCriteria {
    fn default() -> Self {
        Self {
            eta_rel_tol: 1e-10,
            dof_fraction: 0.5,
            max_levels: 25,
        }
    }
}

impl StopCriteria {
    pub fn validate(&self) -> Result<()> {
        if self.eta_rel_tol.is_nan() || self.eta_rel_tol < 0.0 {
            return Err(GmsError::Config(format!("eta_rel_tol must be >= 0, got {}", self.eta_rel_tol)));
        }
        if !(self.dof_fraction > 0.0) {
            return Err(GmsError::Config(format!("dof_fraction must be > 0, got {}", self.dof_fraction)));
        }
        if self.max_levels == 0 {
            return Err(GmsError::Config("max_levels must be >= 1".into()));
        }
        Ok(())
    }

    fn reached(&self, recorded: usize, dof: usize, dim: usize, sum_eta2: f64, initial: f64) -> bool {
        recorded >= self.max_levels || dof as f64 >= self.dof_fraction * dim as f64 || sum_eta2 <= self.eta_rel_tol * initial
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OfflineConfig {
    pub theta: f64,
    pub delta0: f64,
    pub initial: usize,
    pub stop: StopCriteria,
}

impl OfflineConfig {
    pub fn new(theta: f64, delta0: f64, initial: usize) -> Self {
        Self {
            theta,
            delta0,
            initial,
            stop: StopCriteria::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(GmsError::Config(format!("theta must lie in (0, 1), got {}", self.theta)));
        }
        if !(self.delta0 > 0.0 && self.delta0 < 1.0) {
            return Err(GmsError::Config(format!("delta0 must lie in (0, 1), got {}", self.delta0)));
        }
        if self.initial == 0 {
            return Err(GmsError::Config("initial basis count must be >= 1".into()));
        }
        self.stop.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OnlineConfig {
    pub problem: SpectralProblem,
    pub initial: usize,
    pub strategy: RegionStrategy,
    pub stop: StopCriteria,
    /// Representers with `‖φ‖ < skip_tol·‖v_ms‖` are dropped.
    pub skip_tol: f64,
}

impl OnlineConfig {
    pub fn new(problem: SpectralProblem, initial: usize, strategy: RegionStrategy) -> Self {
        Self {
            problem,
            initial,
            strategy,
            stop: StopCriteria::default(),
            skip_tol: 1e-12,
        }
    }

    pub fn validate(&self, grid: &Grid) -> Result<()> {
        if self.initial == 0 {
            return Err(GmsError::Config("initial basis count must be >= 1".into()));
        }
        if self.skip_tol.is_nan() || self.skip_tol < 0.0 {
            return Err(GmsError::Config(format!("skip_tol must be >= 0, got {}", self.skip_tol)));
        }
        check_strategy(grid, self.strategy)?;
        self.stop.validate()
    }
}

pub fn check_strategy(grid: &Grid, strategy: RegionStrategy) -> Result<()> {
    let (ncx, ncy) = (grid.spec.ncx, grid.spec.ncy);
    if strategy == RegionStrategy::Blocks2x2 && (ncx % 2 != 0 || ncy % 2 != 0) {
        return Err(GmsError::Config(format!(
            "blocks2x2 regions need an even number of coarse blocks per axis, got {ncx}x{ncy}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelRecord {
    pub level: usize,
    pub dof: usize,
    /// Relative snapshot error.
    pub e: f64,
    /// `‖v_snap − v_ms‖²`.
    pub err_sq: f64,
    /// `‖v_ms − v_ms(previous level)‖²`, zero on the first level.
    pub step_sq: f64,
    pub sum_eta2: f64,
    pub lambda_min: f64,
    /// Faces enriched to produce the next level (offline).
    pub enriched: Vec<usize>,
    /// Regions enriched to produce the next level (online), as face lists.
    pub regions: Vec<Vec<usize>>,
    /// Per-face offline counts.
    pub counts: Vec<usize>,
    /// Sum of squared representer norms that produced this level (online).
    pub representer_sq: f64,
    pub skipped: usize,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnrichmentHistory {
    pub method: Method,
    pub reference_norm_sq: f64,
    pub levels: Vec<LevelRecord>,
}

impl EnrichmentHistory {
    /// Largest `|err²_m − err²_{m+1} − ‖v_{m+1} − v_m‖²| / ‖v_snap‖²`.
    pub fn pythagoras_defect(&self) -> f64 {
        self.levels
            .windows(2)
            .map(|w| (w[0].err_sq - w[1].err_sq - w[1].step_sq).abs() / self.reference_norm_sq)
            .fold(0.0, f64::max)
    }

    /// Per transition, `err²_{m+1} − (err²_m − Σ‖φ_j‖²)` relative to `‖v_snap‖²`.
    /// Nonpositive values confirm the online contraction bound.
    pub fn contraction_excess(&self) -> Vec<f64> {
        self.levels
            .windows(2)
            .map(|w| (w[1].err_sq - (w[0].err_sq - w[1].representer_sq)) / self.reference_norm_sq)
            .collect()
    }

    pub fn final_level(&self) -> Option<&LevelRecord> {
        self.levels.last()
    }
}

/// Smallest prefix of `report.order` carrying a `θ²` share of `Σ η²`.
pub fn select_faces(report: &ResidualReport, theta: f64) -> Vec<usize> {
    let sorted: Vec<f64> = report.order.iter().map(|&i| report.eta2[i]).collect();
    let total: f64 = sorted.iter().sum();
    if !(total > 0.0) {
        return Vec::new();
    }
    let target = theta * theta * total;
    let mut prefix = 0.0;
    for (k, v) in sorted.iter().enumerate() {
        prefix += v;
        if target <= prefix {
            return report.order[..=k].to_vec();
        }
    }
    report.order.clone()
}

/// Number of eigenvectors to add to a face currently holding `current`.
pub fn count_new_bases(eigen: &FaceEigen, current: usize, delta0: f64) -> Result<usize> {
    let n = eigen.len();
    if current >= n {
        return Err(GmsError::OutOfRange { index: current, len: n });
    }
    let base = eigen.values[current];
    for s in 1..n - current {
        if base <= delta0 * eigen.values[current + s] {
            return Ok(s);
        }
    }
    if n - current > 1 {
        log::warn!(
            "face {}: no eigenvalue gap below ratio {delta0} after index {current}, taking the remaining {}",
            eigen.face,
            n - current
        );
    }
    Ok(n - current)
}

/// Disjoint regions, each a list of interior coarse faces, enriched at `level`.
pub fn pick_regions(grid: &Grid, strategy: RegionStrategy, level: usize) -> Result<Vec<Vec<usize>>> {
    check_strategy(grid, strategy)?;
    match strategy {
        RegionStrategy::Neighborhood => {
            let (axis, parity) = match level % 4 {
                0 => (Axis::X, 0),
                1 => (Axis::X, 1),
                2 => (Axis::Y, 0),
                _ => (Axis::Y, 1),
            };
            Ok(grid
                .coarse_faces()
                .iter()
                .filter(|cf| {
                    let (bx, by) = grid.block_coords(cf.blocks[0]);
                    cf.normal == axis && (if axis == Axis::X { bx } else { by }) % 2 == parity
                })
                .map(|cf| vec![cf.index])
                .collect())
        }
        RegionStrategy::Blocks2x2 => {
            let intervals = |n: usize| -> Vec<(usize, usize)> {
                if level % 2 == 0 {
                    (0..n / 2).map(|a| (2 * a, 2 * a + 2)).collect()
                } else {
                    let mut v = vec![(0, 1)];
                    v.extend((0..n / 2 - 1).map(|a| (2 * a + 1, 2 * a + 3)));
                    v.push((n - 1, n));
                    v
                }
            };
            let mut regions = Vec::new();
            for &(y0, y1) in &intervals(grid.spec.ncy) {
                for &(x0, x1) in &intervals(grid.spec.ncx) {
                    let blocks: Vec<usize> = (y0..y1)
                        .flat_map(|by| (x0..x1).map(move |bx| (bx, by)))
                        .map(|(bx, by)| grid.block_index(bx, by))
                        .collect();
                    let faces = grid.faces_inside(&blocks);
                    if !faces.is_empty() {
                        regions.push(faces);
                    }
                }
            }
            Ok(regions)
        }
    }
}

/// Normalized online column for one region, with `‖R_Ω‖²`.
#[derive(Debug, Clone)]
pub struct OnlineBasis {
    pub column: MsColumn,
    pub residual_sq: f64,
}

/// Riesz representer of the residual on the divergence-free snapshot
/// functions of a region, or `None` when it is negligible.
pub fn online_basis(
    grid: &Grid,
    space: &SnapshotSpace,
    sol: &MsSolution,
    faces: &[usize],
    skip_below: f64,
    kind: ColumnKind,
) -> Result<Option<OnlineBasis>> {
    let mut blocks: Vec<usize> = Vec::new();
    for &f in faces {
        blocks.extend(grid.coarse_face(f)?.blocks);
    }
    blocks.sort_unstable();
    blocks.dedup();
    let (cols, r) = crate::indicators::region_residual(space, sol, faces);
    let g = space.mass().submatrix(&cols, &cols);
    let b = space.div().submatrix(&blocks, &cols);
    let areas: Vec<f64> = blocks.iter().map(|&k| grid.block_area(k)).collect();
    let (phi, _) = solve_saddle(&g, &b, &r, &vec![0.0; blocks.len()], PressureFix::MeanZero(areas))?;
    let norm_sq = dot(&r, &phi).max(0.0);
    let norm = norm_sq.sqrt();
    if !(norm > skip_below) {
        return Ok(None);
    }
    Ok(Some(OnlineBasis {
        column: MsColumn {
            kind,
            indices: cols,
            values: phi.iter().map(|x| x / norm).collect(),
        },
        residual_sq: norm_sq,
    }))
}

fn lambda_min(sel: &MsBasisSelection) -> f64 {
    sel.thresholds.iter().copied().fold(f64::INFINITY, f64::min)
}

fn clip_counts(problem: &Problem, l: usize) -> Vec<usize> {
    problem.face_sizes().into_iter().map(|j| l.min(j)).collect()
}

struct Snapshot {
    sol: MsSolution,
    report: ResidualReport,
    err_sq: f64,
    step_sq: f64,
}

fn evaluate(
    problem: &Problem,
    ms: &MsSpace,
    thresholds: &[f64],
    flavor: NormFlavor,
    previous: Option<&MsSolution>,
) -> Result<Snapshot> {
    let sol = solve_ms(ms, &problem.space, &problem.grid, &problem.source)?;
    let report = eta(&problem.space, &sol, problem.grams(flavor)?, thresholds)?;
    let (err_sq, _) = error_parts(&problem.space, &sol, &problem.reference)?;
    let step_sq = previous.map_or(0.0, |p| {
        let d: Vec<f64> = sol.snap_coeffs.iter().zip(&p.snap_coeffs).map(|(a, b)| a - b).collect();
        problem.space.l2_sq(&d).max(0.0)
    });
    Ok(Snapshot {
        sol,
        report,
        err_sq,
        step_sq,
    })
}

fn relative(err_sq: f64, norm_sq: f64) -> f64 {
    if norm_sq > 0.0 {
        (err_sq / norm_sq).sqrt()
    } else {
        err_sq.sqrt()
    }
}

/// One solve per requested uniform count.
pub fn run_uniform(problem: &Problem, spectral: SpectralProblem, counts: &[usize]) -> Result<EnrichmentHistory> {
    let eigen = problem.eigen(spectral)?;
    let norm_sq = problem.reference_norm_sq();
    let mut levels = Vec::new();
    for &l in counts {
        let start = Instant::now();
        let per_face = clip_counts(problem, l);
        let sel = select_offline(eigen, &per_face)?;
        let ms = MsSpace::offline(&problem.space, eigen, &sel)?;
        let snap = evaluate(problem, &ms, &sel.thresholds, spectral.into(), None)?;
        levels.push(LevelRecord {
            level: l,
            dof: ms.dof(),
            e: relative(snap.err_sq, norm_sq),
            err_sq: snap.err_sq,
            step_sq: 0.0,
            sum_eta2: snap.report.total,
            lambda_min: lambda_min(&sel),
            enriched: Vec::new(),
            regions: Vec::new(),
            counts: per_face,
            representer_sq: 0.0,
            skipped: 0,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(EnrichmentHistory {
        method: Method::Uniform,
        reference_norm_sq: norm_sq,
        levels,
    })
}

/// Residual-driven enrichment with eigenvectors of the first spectral problem.
pub fn run_offline(problem: &Problem, cfg: &OfflineConfig) -> Result<EnrichmentHistory> {
    cfg.validate()?;
    let eigen = problem.eigen(SpectralProblem::Sp1)?;
    let norm_sq = problem.reference_norm_sq();
    let dim = problem.space.dim();
    let mut counts = clip_counts(problem, cfg.initial);
    let mut levels: Vec<LevelRecord> = Vec::new();
    let mut previous: Option<MsSolution> = None;
    let mut initial_eta = None;
    loop {
        let start = Instant::now();
        let sel = select_offline(eigen, &counts)?;
        let ms = MsSpace::offline(&problem.space, eigen, &sel)?;
        let snap = evaluate(problem, &ms, &sel.thresholds, NormFlavor::Hdiv, previous.as_ref())?;
        let total = snap.report.total;
        let initial = *initial_eta.get_or_insert(total);
        let mut record = LevelRecord {
            level: levels.len(),
            dof: ms.dof(),
            e: relative(snap.err_sq, norm_sq),
            err_sq: snap.err_sq,
            step_sq: snap.step_sq,
            sum_eta2: total,
            lambda_min: lambda_min(&sel),
            enriched: Vec::new(),
            regions: Vec::new(),
            counts: counts.clone(),
            representer_sq: 0.0,
            skipped: 0,
            wall_ms: 0.0,
        };
        let done = cfg.stop.reached(levels.len() + 1, ms.dof(), dim, total, initial);
        let mut grew = false;
        if !done {
            for i in select_faces(&snap.report, cfg.theta) {
                if counts[i] < eigen[i].len() {
                    counts[i] += count_new_bases(&eigen[i], counts[i], cfg.delta0)?;
                    record.enriched.push(i);
                    grew = true;
                }
            }
        }
        record.wall_ms = start.elapsed().as_secs_f64() * 1e3;
        log::info!(
            "offline level {}: dof {} e {:.3e} sum eta2 {:.3e}",
            record.level,
            record.dof,
            record.e,
            record.sum_eta2
        );
        levels.push(record);
        if done || !grew {
            break;
        }
        previous = Some(snap.sol);
    }
    Ok(EnrichmentHistory {
        method: Method::Offline,
        reference_norm_sq: norm_sq,
        levels,
    })
}

/// Enrichment with residual representers on rotating disjoint regions.
pub fn run_online(problem: &Problem, cfg: &OnlineConfig) -> Result<EnrichmentHistory> {
    cfg.validate(&problem.grid)?;
    let eigen = problem.eigen(cfg.problem)?;
    let flavor = NormFlavor::from(cfg.problem);
    let norm_sq = problem.reference_norm_sq();
    let dim = problem.space.dim();
    let counts = clip_counts(problem, cfg.initial);
    let sel = select_offline(eigen, &counts)?;
    let mut ms = MsSpace::offline(&problem.space, eigen, &sel)?;
    let lam = lambda_min(&sel);
    let mut levels: Vec<LevelRecord> = Vec::new();
    let mut previous: Option<MsSolution> = None;
    let mut representer_sq = 0.0;
    let mut initial_eta = None;
    loop {
        let start = Instant::now();
        let level = levels.len();
        let snap = evaluate(problem, &ms, &sel.thresholds, flavor, previous.as_ref())?;
        let total = snap.report.total;
        let initial = *initial_eta.get_or_insert(total);
        if let Some(prev) = levels.last() {
            let excess = (snap.err_sq - (prev.err_sq - representer_sq)) / norm_sq;
            if excess > 1e-8 {
                log::warn!("online level {level}: contraction bound exceeded by {excess:.3e}");
            }
        }
        let mut record = LevelRecord {
            level,
            dof: ms.dof(),
            e: relative(snap.err_sq, norm_sq),
            err_sq: snap.err_sq,
            step_sq: snap.step_sq,
            sum_eta2: total,
            lambda_min: lam,
            enriched: Vec::new(),
            regions: Vec::new(),
            counts: counts.clone(),
            representer_sq,
            skipped: 0,
            wall_ms: 0.0,
        };
        let done = cfg.stop.reached(level + 1, ms.dof(), dim, total, initial);
        let mut added = 0;
        representer_sq = 0.0;
        if !done {
            let regions = pick_regions(&problem.grid, cfg.strategy, level)?;
            let skip_below = cfg.skip_tol * problem.space.l2_sq(&snap.sol.snap_coeffs).max(0.0).sqrt();
            let bases: Vec<Option<OnlineBasis>> = regions
                .par_iter()
                .enumerate()
                .map(|(j, faces)| {
                    let kind = ColumnKind::Online { level, region: j };
                    online_basis(&problem.grid, &problem.space, &snap.sol, faces, skip_below, kind)
                })
                .collect::<Result<_>>()?;
            for (faces, basis) in regions.into_iter().zip(bases) {
                match basis {
                    Some(b) => {
                        representer_sq += b.residual_sq;
                        ms.push_online(&problem.space, b.column)?;
                        record.regions.push(faces);
                        added += 1;
                    }
                    None => record.skipped += 1,
                }
            }
        }
        record.wall_ms = start.elapsed().as_secs_f64() * 1e3;
        log::info!(
            "online level {}: dof {} e {:.3e} ({} regions, {} skipped)",
            record.level,
            record.dof,
            record.e,
            record.regions.len(),
            record.skipped
        );
        // a whole skipped round only ends the run once every color has been tried
        let stalled = added == 0 && levels.iter().rev().take(3).all(|r| r.regions.is_empty());
        levels.push(record);
        if done || (stalled && level >= 3) {
            break;
        }
        previous = Some(snap.sol);
    }
    Ok(EnrichmentHistory {
        method: Method::Online,
        reference_norm_sq: norm_sq,
        levels,
    })
}
