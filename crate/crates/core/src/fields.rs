//! Permeability fields and coarse-block sources.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GmsError, Result};
use crate::mesh::Grid;

/// Cellwise-constant conductivity on the fine grid, row-major from the bottom row.
#[derive(Debug, Clone, PartialEq)]
pub struct PermField {
    nx: usize,
    ny: usize,
    values: Vec<f64>,
}

impl PermField {
    pub fn new(nx: usize, ny: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != nx * ny {
            return Err(GmsError::Dimension(format!(
                "field has {} values, grid needs {}x{}={}",
                values.len(),
                nx,
                ny,
                nx * ny
            )));
        }
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
            return Err(GmsError::Domain(format!(
                "permeability must be positive and finite, cell {i} has {v}"
            )));
        }
        Ok(Self { nx, ny, values })
    }

    pub fn constant(grid: &Grid, value: f64) -> Result<Self> {
        Self::new(grid.nx, grid.ny, vec![value; grid.n_cells()])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, ix: usize, iy: usize) -> f64 {
        self.values[iy * self.nx + ix]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn check_matches(&self, grid: &Grid) -> Result<()> {
        if (self.nx, self.ny) != (grid.nx, grid.ny) {
            return Err(GmsError::Dimension(format!(
                "field is {}x{}, fine grid is {}x{}",
                self.nx, self.ny, grid.nx, grid.ny
            )));
        }
        Ok(())
    }

    /// Same geometry with every non-background value replaced by `contrast`.
    pub fn with_contrast(&self, background: f64, contrast: f64) -> Result<Self> {
        let values = self
            .values
            .iter()
            .map(|&v| if v == background { v } else { contrast })
            .collect();
        Self::new(self.nx, self.ny, values)
    }
}

/// Axis-aligned rectangle of fine cells, `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

/// One-cell-wide channel through the listed fine-cell vertices. Consecutive
/// vertices are joined by a horizontal run followed by a vertical run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Channel {
    pub path: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomGeometry {
    pub seed: u64,
    #[serde(default)]
    pub inclusions: usize,
    #[serde(default)]
    pub channels: usize,
    /// Inclusion side length range in fine cells.
    #[serde(default = "default_inclusion_size")]
    pub inclusion_size: (usize, usize),
}

fn default_inclusion_size() -> (usize, usize) {
    (2, 6)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    #[serde(default = "default_background")]
    pub background: f64,
    pub contrast: f64,
    #[serde(default)]
    pub inclusions: Vec<CellRect>,
    #[serde(default)]
    pub channels: Vec<Channel>,
    #[serde(default)]
    pub random: Option<RandomGeometry>,
}

fn default_background() -> f64 {
    1.0
}

impl FieldSpec {
    pub fn new(contrast: f64) -> Self {
        Self {
            background: 1.0,
            contrast,
            inclusions: Vec::new(),
            channels: Vec::new(),
            random: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("background", self.background), ("contrast", self.contrast)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(GmsError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

fn mark_rect(mask: &mut [bool], nx: usize, ny: usize, r: &CellRect) -> Result<()> {
    if r.x0 >= r.x1 || r.y0 >= r.y1 || r.x1 > nx || r.y1 > ny {
        return Err(GmsError::Domain(format!(
            "inclusion {r:?} is empty or outside the {nx}x{ny} fine grid"
        )));
    }
    for iy in r.y0..r.y1 {
        for ix in r.x0..r.x1 {
            mask[iy * nx + ix] = true;
        }
    }
    Ok(())
}

fn mark_channel(mask: &mut [bool], nx: usize, ny: usize, ch: &Channel) -> Result<()> {
    if let Some(p) = ch.path.iter().find(|(x, y)| *x >= nx || *y >= ny) {
        return Err(GmsError::Domain(format!(
            "channel vertex {p:?} outside the {nx}x{ny} fine grid"
        )));
    }
    if let [(x, y)] = ch.path[..] {
        mask[y * nx + x] = true;
    }
    for w in ch.path.windows(2) {
        let ((xa, ya), (xb, yb)) = (w[0], w[1]);
        for x in xa.min(xb)..=xa.max(xb) {
            mask[ya * nx + x] = true;
        }
        for y in ya.min(yb)..=ya.max(yb) {
            mask[y * nx + xb] = true;
        }
    }
    Ok(())
}

fn random_geometry(nx: usize, ny: usize, r: &RandomGeometry) -> (Vec<CellRect>, Vec<Channel>) {
    let mut rng = ChaCha8Rng::seed_from_u64(r.seed);
    let (smin, smax) = (r.inclusion_size.0.max(1), r.inclusion_size.1.max(r.inclusion_size.0).max(1));
    let rects = (0..r.inclusions)
        .map(|_| {
            let w = rng.random_range(smin..=smax).min(nx);
            let h = rng.random_range(smin..=smax).min(ny);
            let x0 = rng.random_range(0..=nx - w);
            let y0 = rng.random_range(0..=ny - h);
            CellRect { x0, y0, x1: x0 + w, y1: y0 + h }
        })
        .collect();
    let channels = (0..r.channels)
        .map(|k| {
            // alternate mostly-horizontal and mostly-vertical channels with one kink
            let horizontal = k % 2 == 0;
            let (len, across) = if horizontal { (nx, ny) } else { (ny, nx) };
            let start = rng.random_range(0..len / 4 + 1);
            let end = rng.random_range(3 * len / 4..len);
            let kink = rng.random_range(start..=end);
            let a = rng.random_range(0..across);
            let b = (a + rng.random_range(0..across / 8 + 1)).min(across - 1);
            let pts = [(start, a), (kink, a), (kink, b), (end, b)];
            Channel {
                path: pts
                    .iter()
                    .map(|&(s, t)| if horizontal { (s, t) } else { (t, s) })
                    .collect(),
            }
        })
        .collect();
    (rects, channels)
}

/// Rasterize a field description on the fine grid.
pub fn generate_field(grid: &Grid, spec: &FieldSpec) -> Result<PermField> {
    spec.validate()?;
    let (nx, ny) = (grid.nx, grid.ny);
    let mut mask = vec![false; nx * ny];
    for r in &spec.inclusions {
        mark_rect(&mut mask, nx, ny, r)?;
    }
    for ch in &spec.channels {
        mark_channel(&mut mask, nx, ny, ch)?;
    }
    if let Some(random) = &spec.random {
        let (rects, channels) = random_geometry(nx, ny, random);
        for r in &rects {
            mark_rect(&mut mask, nx, ny, r)?;
        }
        for ch in &channels {
            mark_channel(&mut mask, nx, ny, ch)?;
        }
    }
    let values = mask
        .into_iter()
        .map(|m| if m { spec.contrast } else { spec.background })
        .collect();
    PermField::new(nx, ny, values)
}

/// Named field families bundled with the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldPreset {
    /// Scattered rectangular inclusions plus a few short channels.
    Inclusions,
    /// Long kinked channels crossing the domain, plus small inclusions.
    Channels,
}

/// Geometry of a bundled field family, scaled to the fine grid.
pub fn preset_spec(grid: &Grid, preset: FieldPreset, contrast: f64, seed: u64) -> FieldSpec {
    let (nx, ny) = (grid.nx, grid.ny);
    let nf = grid.spec.nf;
    let mut spec = FieldSpec::new(contrast);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match preset {
        FieldPreset::Inclusions => {
            let n = (nx * ny) / (6 * nf * nf).max(1) + 2;
            let smax = (nf / 3).max(1);
            for _ in 0..n {
                let w = rng.random_range(1..=smax).min(nx);
                let h = rng.random_range(1..=smax).min(ny);
                let x0 = rng.random_range(0..=nx - w);
                let y0 = rng.random_range(0..=ny - h);
                spec.inclusions.push(CellRect { x0, y0, x1: x0 + w, y1: y0 + h });
            }
            spec.random = Some(RandomGeometry {
                seed: seed.wrapping_add(1),
                inclusions: 0,
                channels: (grid.spec.ncx + grid.spec.ncy) / 4,
                inclusion_size: default_inclusion_size(),
            });
        }
        FieldPreset::Channels => {
            // channel rows/columns avoid coarse-block edges and are spaced so
            // that no coarse face is crossed by two channels of one family
            let pick = |rng: &mut ChaCha8Rng, block: usize| {
                let lo = block * nf + nf / 4;
                let hi = (block * nf + 3 * nf / 4).max(lo + 1);
                rng.random_range(lo..hi)
            };
            for by in (0..grid.spec.ncy).step_by(2) {
                let y = pick(&mut rng, by);
                let y2 = if by + 1 < grid.spec.ncy { pick(&mut rng, by + 1) } else { y };
                let kink = rng.random_range(nx / 3..(2 * nx / 3).max(nx / 3 + 1));
                spec.channels.push(Channel {
                    path: vec![(0, y), (kink, y), (kink, y2), (nx - 1, y2)],
                });
            }
            for bx in (1..grid.spec.ncx).step_by(2) {
                let x = pick(&mut rng, bx);
                let y0 = rng.random_range(0..ny / 4 + 1);
                let y1 = rng.random_range(3 * ny / 4..ny);
                spec.channels.push(Channel { path: vec![(x, y0), (x, y1)] });
            }
            let n = grid.n_blocks() / 4 + 1;
            let smax = (nf / 4).max(1);
            for _ in 0..n {
                let w = rng.random_range(1..=smax).min(nx);
                let h = rng.random_range(1..=smax).min(ny);
                let x0 = rng.random_range(0..=nx - w);
                let y0 = rng.random_range(0..=ny - h);
                spec.inclusions.push(CellRect { x0, y0, x1: x0 + w, y1: y0 + h });
            }
        }
    }
    spec
}

pub fn preset_field(grid: &Grid, preset: FieldPreset, contrast: f64, seed: u64) -> Result<PermField> {
    generate_field(grid, &preset_spec(grid, preset, contrast, seed))
}

/// Write a raster: one line per fine-cell row, bottom row first.
pub fn save_field(field: &PermField, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::with_capacity(field.values.len() * 8);
    for row in field.values.chunks(field.nx) {
        for (k, v) in row.iter().enumerate() {
            if k > 0 {
                out.push(' ');
            }
            // shortest round-trip representation
            write!(out, "{v:?}").expect("writing to a String");
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn parse_field(text: &str) -> Result<PermField> {
    let mut values = Vec::new();
    let mut nx = None;
    let mut ny = 0;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| GmsError::Parse(format!("line {}: not a number: {t:?}", lineno + 1)))
            })
            .collect::<Result<_>>()?;
        match nx {
            None => nx = Some(row.len()),
            Some(n) if n != row.len() => {
                return Err(GmsError::Dimension(format!(
                    "line {}: row has {} values, expected {n}",
                    lineno + 1,
                    row.len()
                )))
            }
            _ => {}
        }
        values.extend(row);
        ny += 1;
    }
    PermField::new(nx.unwrap_or(0), ny, values)
}

/// Read a raster and check it against the fine grid.
pub fn load_field(grid: &Grid, path: impl AsRef<Path>) -> Result<PermField> {
    let field = parse_field(&std::fs::read_to_string(path)?)?;
    field.check_matches(grid)?;
    Ok(field)
}

/// Constant source value per coarse block.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceField {
    values: Vec<f64>,
}

impl SourceField {
    pub fn new(grid: &Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_blocks() {
            return Err(GmsError::Dimension(format!(
                "source has {} values, grid has {} blocks",
                values.len(),
                grid.n_blocks()
            )));
        }
        Ok(Self { values })
    }

    pub fn zeros(grid: &Grid) -> Self {
        Self {
            values: vec![0.0; grid.n_blocks()],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| a * v).collect(),
        }
    }

    /// Block-integrated source `f_K |K|`.
    pub fn integrated(&self, grid: &Grid) -> Vec<f64> {
        self.values
            .iter()
            .enumerate()
            .map(|(b, f)| f * grid.block_area(b))
            .collect()
    }

    /// Reject sources violating `sum f_K |K| = 0` (required when `g = 0`).
    pub fn check_compatible(&self, grid: &Grid) -> Result<()> {
        let integ = self.integrated(grid);
        let sum: f64 = integ.iter().sum();
        let scale = integ.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if sum.abs() > 1e-12 * scale {
            return Err(GmsError::Incompatible(format!(
                "source integrates to {sum:e}, must vanish for homogeneous Neumann data"
            )));
        }
        Ok(())
    }
}

/// `+1` on the top-left block, `-1` on the bottom-right block.
pub fn corner_source(grid: &Grid) -> Result<SourceField> {
    let (ncx, ncy) = (grid.spec.ncx, grid.spec.ncy);
    let top_left = grid.block_index(0, ncy - 1);
    let bottom_right = grid.block_index(ncx - 1, 0);
    if top_left == bottom_right {
        return Err(GmsError::Config(
            "corner source needs at least two coarse blocks".into(),
        ));
    }
    let mut values = vec![0.0; grid.n_blocks()];
    values[top_left] = 1.0;
    values[bottom_right] = -1.0;
    SourceField::new(grid, values)
}
