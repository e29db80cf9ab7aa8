//! Two-level Cartesian mesh.
//!
//! The domain `[0, width] x [0, height]` is split into `ncx x ncy` coarse
//! blocks, each refined into `nf x nf` fine cells. Fine cells are numbered
//! row-major from the bottom-left corner. Fine faces come in two families:
//! vertical faces (normal `+x`) are numbered first, horizontal faces (normal
//! `+y`) after them. A velocity coefficient on a fine face is the normal flux
//! density in the positive axis direction.
//!
//! Interior coarse faces are numbered vertical faces first (row by row), then
//! horizontal faces. Every coarse face stores its two adjacent blocks with the
//! lower block index first; the face normal points from the lower block to the
//! upper block, which coincides with the global `+x` / `+y` direction.

use crate::error::{GmsError, Result};

/// Maximum number of faces of a rectangular coarse block.
pub const MAX_BLOCK_FACES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub ncx: usize,
    pub ncy: usize,
    pub nf: usize,
    pub width: f64,
    pub height: f64,
}

impl GridSpec {
    /// Unit square with `ncx x ncy` coarse blocks of `nf x nf` fine cells.
    pub fn new(ncx: usize, ncy: usize, nf: usize) -> Self {
        Self {
            ncx,
            ncy,
            nf,
            width: 1.0,
            height: 1.0,
        }
    }

    pub fn with_size(mut self, width: f64, height: f64) -> Self {
        self.width = width;
        self.height = height;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.ncx == 0 || self.ncy == 0 || self.nf == 0 {
            return Err(GmsError::Config(format!(
                "grid dimensions must be positive (ncx={}, ncy={}, nf={})",
                self.ncx, self.ncy, self.nf
            )));
        }
        if !(self.width > 0.0 && self.width.is_finite() && self.height > 0.0 && self.height.is_finite())
        {
            return Err(GmsError::Config(format!(
                "domain size must be positive and finite ({} x {})",
                self.width, self.height
            )));
        }
        Ok(())
    }

    /// Number of interior coarse faces, `ncx (ncy - 1) + ncy (ncx - 1)`.
    pub fn interior_coarse_faces(&self) -> usize {
        self.ncx * (self.ncy - 1) + self.ncy * (self.ncx - 1)
    }
}

/// Normal direction of a face.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    X,
    Y,
}

/// Side of a coarse block (equivalently of a fine cell).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    West = 0,
    East = 1,
    South = 2,
    North = 3,
}

impl Side {
    pub const ALL: [Side; 4] = [Side::West, Side::East, Side::South, Side::North];
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineFace {
    pub normal: Axis,
    /// Cell on the negative side of the normal, if any.
    pub minus: Option<usize>,
    /// Cell on the positive side of the normal, if any.
    pub plus: Option<usize>,
    pub measure: f64,
}

impl FineFace {
    pub fn is_boundary(&self) -> bool {
        self.minus.is_none() || self.plus.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoarseFace {
    pub index: usize,
    pub normal: Axis,
    /// Adjacent blocks, lower index first. Together they form the neighborhood.
    pub blocks: [usize; 2],
    /// Member fine faces ordered along the face.
    pub fine_faces: Vec<usize>,
    pub length: f64,
}

impl CoarseFace {
    pub fn n_fine(&self) -> usize {
        self.fine_faces.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryCoarseFace {
    pub block: usize,
    pub side: Side,
    pub fine_faces: Vec<usize>,
}

/// Fine faces supported in a coarse neighborhood.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborhoodMask {
    /// Faces whose two adjacent cells both lie in the neighborhood.
    pub interior: Vec<usize>,
    /// Faces on the neighborhood boundary (zero normal flux for snapshots).
    pub boundary: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub spec: GridSpec,
    pub nx: usize,
    pub ny: usize,
    fine_faces: Vec<FineFace>,
    coarse_faces: Vec<CoarseFace>,
    boundary_faces: Vec<BoundaryCoarseFace>,
    block_faces: Vec<[Option<usize>; 4]>,
}

pub fn build_grid(spec: GridSpec) -> Result<Grid> {
    spec.validate()?;
    let nx = spec.ncx * spec.nf;
    let ny = spec.ncy * spec.nf;
    let hx = spec.width / nx as f64;
    let hy = spec.height / ny as f64;

    let n_vert = (nx + 1) * ny;
    let mut fine_faces = Vec::with_capacity(n_vert + nx * (ny + 1));
    for iy in 0..ny {
        for ix in 0..=nx {
            fine_faces.push(FineFace {
                normal: Axis::X,
                minus: (ix > 0).then(|| iy * nx + ix - 1),
                plus: (ix < nx).then(|| iy * nx + ix),
                measure: hy,
            });
        }
    }
    for iy in 0..=ny {
        for ix in 0..nx {
            fine_faces.push(FineFace {
                normal: Axis::Y,
                minus: (iy > 0).then(|| (iy - 1) * nx + ix),
                plus: (iy < ny).then(|| iy * nx + ix),
                measure: hx,
            });
        }
    }

    let (ncx, ncy, nf) = (spec.ncx, spec.ncy, spec.nf);
    let vface = |ix: usize, iy: usize| iy * (nx + 1) + ix;
    let hface = |ix: usize, iy: usize| n_vert + iy * nx + ix;
    let block = |bx: usize, by: usize| by * ncx + bx;

    let mut coarse_faces = Vec::with_capacity(spec.interior_coarse_faces());
    let mut block_faces = vec![[None; 4]; ncx * ncy];
    for by in 0..ncy {
        for bx in 0..ncx.saturating_sub(1) {
            let index = coarse_faces.len();
            let ix = (bx + 1) * nf;
            let lower = block(bx, by);
            let upper = block(bx + 1, by);
            block_faces[lower][Side::East as usize] = Some(index);
            block_faces[upper][Side::West as usize] = Some(index);
            coarse_faces.push(CoarseFace {
                index,
                normal: Axis::X,
                blocks: [lower, upper],
                fine_faces: (by * nf..(by + 1) * nf).map(|iy| vface(ix, iy)).collect(),
                length: nf as f64 * hy,
            });
        }
    }
    for by in 0..ncy.saturating_sub(1) {
        for bx in 0..ncx {
            let index = coarse_faces.len();
            let iy = (by + 1) * nf;
            let lower = block(bx, by);
            let upper = block(bx, by + 1);
            block_faces[lower][Side::North as usize] = Some(index);
            block_faces[upper][Side::South as usize] = Some(index);
            coarse_faces.push(CoarseFace {
                index,
                normal: Axis::Y,
                blocks: [lower, upper],
                fine_faces: (bx * nf..(bx + 1) * nf).map(|ix| hface(ix, iy)).collect(),
                length: nf as f64 * hx,
            });
        }
    }

    let mut boundary_faces = Vec::new();
    for by in 0..ncy {
        for bx in 0..ncx {
            let b = block(bx, by);
            if bx == 0 {
                boundary_faces.push(BoundaryCoarseFace {
                    block: b,
                    side: Side::West,
                    fine_faces: (by * nf..(by + 1) * nf).map(|iy| vface(0, iy)).collect(),
                });
            }
            if bx + 1 == ncx {
                boundary_faces.push(BoundaryCoarseFace {
                    block: b,
                    side: Side::East,
                    fine_faces: (by * nf..(by + 1) * nf).map(|iy| vface(nx, iy)).collect(),
                });
            }
            if by == 0 {
                boundary_faces.push(BoundaryCoarseFace {
                    block: b,
                    side: Side::South,
                    fine_faces: (bx * nf..(bx + 1) * nf).map(|ix| hface(ix, 0)).collect(),
                });
            }
            if by + 1 == ncy {
                boundary_faces.push(BoundaryCoarseFace {
                    block: b,
                    side: Side::North,
                    fine_faces: (bx * nf..(bx + 1) * nf).map(|ix| hface(ix, ny)).collect(),
                });
            }
        }
    }

    Ok(Grid {
        spec,
        nx,
        ny,
        fine_faces,
        coarse_faces,
        boundary_faces,
        block_faces,
    })
}

impl Grid {
    pub fn hx(&self) -> f64 {
        self.spec.width / self.nx as f64
    }

    pub fn hy(&self) -> f64 {
        self.spec.height / self.ny as f64
    }

    pub fn coarse_hx(&self) -> f64 {
        self.spec.width / self.spec.ncx as f64
    }

    pub fn coarse_hy(&self) -> f64 {
        self.spec.height / self.spec.ncy as f64
    }

    /// Coarse mesh size `H` (largest block side).
    pub fn coarse_size(&self) -> f64 {
        self.coarse_hx().max(self.coarse_hy())
    }

    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn n_blocks(&self) -> usize {
        self.spec.ncx * self.spec.ncy
    }

    pub fn n_fine_faces(&self) -> usize {
        self.fine_faces.len()
    }

    pub fn n_coarse_faces(&self) -> usize {
        self.coarse_faces.len()
    }

    pub fn fine_faces(&self) -> &[FineFace] {
        &self.fine_faces
    }

    pub fn fine_face(&self, f: usize) -> &FineFace {
        &self.fine_faces[f]
    }

    pub fn coarse_faces(&self) -> &[CoarseFace] {
        &self.coarse_faces
    }

    pub fn coarse_face(&self, i: usize) -> Result<&CoarseFace> {
        self.coarse_faces.get(i).ok_or(GmsError::OutOfRange {
            index: i,
            len: self.coarse_faces.len(),
        })
    }

    pub fn boundary_coarse_faces(&self) -> &[BoundaryCoarseFace] {
        &self.boundary_faces
    }

    /// Interior coarse faces of a block, indexed by [`Side`].
    pub fn block_faces(&self, b: usize) -> [Option<usize>; 4] {
        self.block_faces[b]
    }

    pub fn cell_volume(&self) -> f64 {
        self.hx() * self.hy()
    }

    pub fn block_area(&self, _b: usize) -> f64 {
        self.coarse_hx() * self.coarse_hy()
    }

    pub fn cell_index(&self, ix: usize, iy: usize) -> usize {
        iy * self.nx + ix
    }

    pub fn cell_coords(&self, c: usize) -> (usize, usize) {
        (c % self.nx, c / self.nx)
    }

    pub fn block_index(&self, bx: usize, by: usize) -> usize {
        by * self.spec.ncx + bx
    }

    pub fn block_coords(&self, b: usize) -> (usize, usize) {
        (b % self.spec.ncx, b / self.spec.ncx)
    }

    pub fn cell_block(&self, c: usize) -> usize {
        let (ix, iy) = self.cell_coords(c);
        self.block_index(ix / self.spec.nf, iy / self.spec.nf)
    }

    /// Vertical fine face at the left edge of column `ix`, row `iy`.
    pub fn vface(&self, ix: usize, iy: usize) -> usize {
        iy * (self.nx + 1) + ix
    }

    /// Horizontal fine face at the bottom edge of column `ix`, row `iy`.
    pub fn hface(&self, ix: usize, iy: usize) -> usize {
        (self.nx + 1) * self.ny + iy * self.nx + ix
    }

    /// The four faces of a fine cell, indexed by [`Side`].
    pub fn cell_faces(&self, c: usize) -> [usize; 4] {
        let (ix, iy) = self.cell_coords(c);
        [
            self.vface(ix, iy),
            self.vface(ix + 1, iy),
            self.hface(ix, iy),
            self.hface(ix, iy + 1),
        ]
    }

    /// Center of a fine cell.
    pub fn cell_center(&self, c: usize) -> (f64, f64) {
        let (ix, iy) = self.cell_coords(c);
        ((ix as f64 + 0.5) * self.hx(), (iy as f64 + 0.5) * self.hy())
    }

    /// Fine cells of a coarse block, row-major within the block.
    pub fn block_cells(&self, b: usize) -> Vec<usize> {
        let nf = self.spec.nf;
        let (bx, by) = self.block_coords(b);
        let mut cells = Vec::with_capacity(nf * nf);
        for iy in by * nf..(by + 1) * nf {
            for ix in bx * nf..(bx + 1) * nf {
                cells.push(self.cell_index(ix, iy));
            }
        }
        cells
    }

    /// All fine faces touching the cells of block `b`, sorted ascending.
    pub fn block_local_faces(&self, b: usize) -> Vec<usize> {
        let nf = self.spec.nf;
        let (bx, by) = self.block_coords(b);
        let mut faces = Vec::with_capacity(2 * nf * (nf + 1));
        for iy in by * nf..(by + 1) * nf {
            for ix in bx * nf..=(bx + 1) * nf {
                faces.push(self.vface(ix, iy));
            }
        }
        for iy in by * nf..=(by + 1) * nf {
            for ix in bx * nf..(bx + 1) * nf {
                faces.push(self.hface(ix, iy));
            }
        }
        faces
    }

    /// Fine faces on one side of block `b`, ordered along the side.
    pub fn block_side_faces(&self, b: usize, side: Side) -> Vec<usize> {
        let nf = self.spec.nf;
        let (bx, by) = self.block_coords(b);
        match side {
            Side::West => (by * nf..(by + 1) * nf).map(|iy| self.vface(bx * nf, iy)).collect(),
            Side::East => (by * nf..(by + 1) * nf)
                .map(|iy| self.vface((bx + 1) * nf, iy))
                .collect(),
            Side::South => (bx * nf..(bx + 1) * nf).map(|ix| self.hface(ix, by * nf)).collect(),
            Side::North => (bx * nf..(bx + 1) * nf)
                .map(|ix| self.hface(ix, (by + 1) * nf))
                .collect(),
        }
    }

    /// Side of `face`'s lower and upper block on which the face lies.
    pub fn coarse_face_sides(&self, face: &CoarseFace) -> [Side; 2] {
        match face.normal {
            Axis::X => [Side::East, Side::West],
            Axis::Y => [Side::North, Side::South],
        }
    }

    /// Interior coarse faces sharing at least one block with face `i`
    /// (including `i` itself), ascending.
    pub fn neighbor_coarse_faces(&self, i: usize) -> Result<Vec<usize>> {
        let face = self.coarse_face(i)?;
        let mut out: Vec<usize> = face
            .blocks
            .iter()
            .flat_map(|&b| self.block_faces[b].into_iter().flatten())
            .collect();
        out.sort_unstable();
        out.dedup();
        Ok(out)
    }

    /// Interior coarse faces whose two blocks both belong to `blocks`.
    pub fn faces_inside(&self, blocks: &[usize]) -> Vec<usize> {
        let mut member = vec![false; self.n_blocks()];
        for &b in blocks {
            member[b] = true;
        }
        self.coarse_faces
            .iter()
            .filter(|f| member[f.blocks[0]] && member[f.blocks[1]])
            .map(|f| f.index)
            .collect()
    }

    /// Fine faces supported in the neighborhood of coarse face `i`.
    pub fn neighborhood_fine_faces(&self, i: usize) -> Result<NeighborhoodMask> {
        let face = self.coarse_face(i)?;
        let [lo, hi] = face.blocks;
        let inside = |c: Option<usize>| c.map(|c| {
            let b = self.cell_block(c);
            b == lo || b == hi
        });
        let mut interior = Vec::new();
        let mut boundary = Vec::new();
        for b in face.blocks {
            for f in self.block_local_faces(b) {
                let ff = &self.fine_faces[f];
                match (inside(ff.minus), inside(ff.plus)) {
                    (Some(true), Some(true)) => interior.push(f),
                    _ => boundary.push(f),
                }
            }
        }
        interior.sort_unstable();
        interior.dedup();
        boundary.sort_unstable();
        boundary.dedup();
        Ok(NeighborhoodMask { interior, boundary })
    }
}
