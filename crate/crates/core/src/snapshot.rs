//! Snapshot spaces: local Neumann solves with unit fine-face flux data.
//!
//! For every interior coarse face `E_i` and every fine face `e_j` on it, the
//! snapshot column is the fine velocity on `ω_i = K1 ∪ K2` with normal flux
//! density 1 on `e_j`, 0 on the rest of `∂K1 ∪ ∂K2`, and divergence equal to
//! a constant on each block. Each block problem depends only on the block, so
//! it is factored once and solved for every face slot on its sides.
//!
//! All multiscale computations work in snapshot coordinates: a velocity in
//! the snapshot space is a coefficient vector over the columns, and the mass
//! and divergence operators are assembled block by block from the local
//! Gram matrices.

use faer::Mat;
use rayon::prelude::*;

use crate::error::{GmsError, Result};
use crate::fem_fine::FineSystem;
use crate::fields::SourceField;
use crate::linalg::{dot, PressureFix, SaddleFactor, SparseMat};
use crate::mesh::{Grid, Side};

/// A coarse face on one side of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub side: Side,
    pub face: usize,
    /// First local column of this slot within the block.
    pub offset: usize,
    pub len: usize,
}

/// Restrictions to one block of all snapshot columns touching it.
#[derive(Debug, Clone)]
pub struct BlockSnapshots {
    pub block: usize,
    /// Sorted fine faces of the block, sides included.
    pub faces: Vec<usize>,
    pub slots: Vec<Slot>,
    /// `faces.len() x n_cols` velocity coefficients.
    pub values: Mat<f64>,
    /// `∫_K κ⁻¹ v · w` between local columns.
    pub gram: Mat<f64>,
    /// Block-integrated divergence of each local column.
    pub flux: Vec<f64>,
}

impl BlockSnapshots {
    pub fn n_cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn slot_of(&self, face: usize) -> Option<&Slot> {
        self.slots.iter().find(|s| s.face == face)
    }
}

/// Solve the local problems of block `b` for the given coarse faces on its sides.
pub fn solve_block(grid: &Grid, sys: &FineSystem, b: usize, faces_on_block: &[usize]) -> Result<BlockSnapshots> {
    let block_faces = grid.block_faces(b);
    let mut slots = Vec::new();
    let mut offset = 0;
    for side in Side::ALL {
        if let Some(face) = block_faces[side as usize] {
            if faces_on_block.contains(&face) {
                let len = grid.coarse_face(face)?.n_fine();
                slots.push(Slot { side, face, offset, len });
                offset += len;
            }
        }
    }
    if slots.len() != faces_on_block.len() {
        return Err(GmsError::Domain(format!(
            "requested coarse faces {faces_on_block:?} are not all interior sides of block {b}"
        )));
    }
    let n_cols = offset;
    let cells = grid.block_cells(b);
    let faces = grid.block_local_faces(b);
    let local = |f: usize| faces.binary_search(&f).expect("side face belongs to block");
    let mass = sys.restricted_mass(grid, &cells, &faces)?;

    let mut on_side = vec![false; faces.len()];
    let sides: Vec<Vec<usize>> = Side::ALL.iter().map(|&s| grid.block_side_faces(b, s)).collect();
    for side in &sides {
        for &f in side {
            on_side[local(f)] = true;
        }
    }
    let interior: Vec<usize> = (0..faces.len()).filter(|&k| !on_side[k]).collect();
    let cell_pos: Vec<usize> = cells.clone();
    let mut div_t = Vec::with_capacity(4 * cells.len());
    for (kc, &c) in cell_pos.iter().enumerate() {
        let (cols, vals) = sys.div_fine.row(c);
        for (&f, &v) in cols.iter().zip(vals) {
            div_t.push((kc, local(f), v));
        }
    }
    let div = SparseMat::from_triplets(cells.len(), faces.len(), &div_t)?;
    let all_cells: Vec<usize> = (0..cells.len()).collect();
    let m_ii = mass.submatrix(&interior, &interior);
    let b_i = div.submatrix(&all_cells, &interior);
    let vol = sys.cell_volume();
    let area = grid.block_area(b);
    let factor = SaddleFactor::new(&m_ii, &b_i, PressureFix::MeanZero(vec![vol; cells.len()]))
        .map_err(|e| GmsError::Singular(format!("block {b}: {e}")))?;

    let mass_t = mass.transpose();
    let div_t = div.transpose();
    let mut values = Mat::zeros(faces.len(), n_cols);
    let mut flux = vec![0.0; n_cols];
    for slot in &slots {
        for (j, &f) in sides[slot.side as usize].iter().enumerate() {
            let col = slot.offset + j;
            let g = local(f);
            // prescribed data: unit flux density on face g, zero elsewhere on ∂K
            let (mc, mv) = mass_t.row(g);
            let mut rhs_v = vec![0.0; interior.len()];
            for (&r, &v) in mc.iter().zip(mv) {
                if let Ok(k) = interior.binary_search(&r) {
                    rhs_v[k] = -v;
                }
            }
            let (dc, dv) = div_t.row(g);
            let mut bg = vec![0.0; cells.len()];
            for (&r, &v) in dc.iter().zip(dv) {
                bg[r] = v;
            }
            let total: f64 = bg.iter().sum();
            let rhs_p: Vec<f64> = bg.iter().map(|&x| vol * total / area - x).collect();
            let (vi, _) = factor.solve(&rhs_v, &rhs_p)?;
            for (k, &li) in interior.iter().enumerate() {
                values[(li, col)] = vi[k];
            }
            values[(g, col)] = 1.0;
            flux[col] = total;
        }
    }

    let mut gram = Mat::zeros(n_cols, n_cols);
    let cols: Vec<Vec<f64>> = (0..n_cols).map(|j| (0..faces.len()).map(|r| values[(r, j)]).collect()).collect();
    let mcols: Vec<Vec<f64>> = cols.iter().map(|c| mass.matvec(c)).collect();
    for a in 0..n_cols {
        for bcol in a..n_cols {
            let v = dot(&cols[a], &mcols[bcol]);
            gram[(a, bcol)] = v;
            gram[(bcol, a)] = v;
        }
    }
    Ok(BlockSnapshots {
        block: b,
        faces,
        slots,
        values,
        gram,
        flux,
    })
}

/// Snapshot columns of one coarse face as fine velocity vectors on `ω_i`.
#[derive(Debug, Clone)]
pub struct SnapshotBasis {
    pub face: usize,
    /// Sorted fine faces of `ω_i`.
    pub support: Vec<usize>,
    /// `support.len() x J` coefficients.
    pub values: Mat<f64>,
    /// Constant divergence of each column on the lower and upper block.
    pub divergence: Vec<[f64; 2]>,
}

impl SnapshotBasis {
    pub fn n_cols(&self) -> usize {
        self.values.ncols()
    }

    /// Column `j` as a global fine velocity vector.
    pub fn column(&self, j: usize, n_fine_faces: usize) -> Vec<f64> {
        let mut v = vec![0.0; n_fine_faces];
        for (k, &f) in self.support.iter().enumerate() {
            v[f] = self.values[(k, j)];
        }
        v
    }

    /// Normal-trace coefficients on the fine faces of `E_i`, one row per fine face.
    pub fn trace_matrix(&self, grid: &Grid) -> Result<Mat<f64>> {
        let face = grid.coarse_face(self.face)?;
        let rows: Vec<usize> = face
            .fine_faces
            .iter()
            .map(|f| self.support.binary_search(f).expect("face trace is in support"))
            .collect();
        Ok(Mat::from_fn(rows.len(), self.n_cols(), |r, j| self.values[(rows[r], j)]))
    }
}

fn glue(grid: &Grid, face: usize, parts: [&BlockSnapshots; 2]) -> Result<SnapshotBasis> {
    let mut support: Vec<usize> = parts.iter().flat_map(|p| p.faces.iter().copied()).collect();
    support.sort_unstable();
    support.dedup();
    let n = parts[0].slot_of(face).expect("slot").len;
    let mut values = Mat::zeros(support.len(), n);
    for part in parts {
        let slot = part.slot_of(face).expect("slot");
        for (r, f) in part.faces.iter().enumerate() {
            let k = support.binary_search(f).expect("in support");
            for j in 0..n {
                let v = part.values[(r, slot.offset + j)];
                if v != 0.0 {
                    values[(k, j)] = v;
                }
            }
        }
    }
    let divergence = (0..n)
        .map(|j| {
            let [a, b] = parts.map(|p| {
                let s = p.slot_of(face).expect("slot");
                p.flux[s.offset + j] / grid.block_area(p.block)
            });
            [a, b]
        })
        .collect();
    Ok(SnapshotBasis {
        face,
        support,
        values,
        divergence,
    })
}

/// Snapshot basis of a single coarse face.
pub fn build_snapshots(grid: &Grid, sys: &FineSystem, face: usize) -> Result<SnapshotBasis> {
    let cf = grid.coarse_face(face)?;
    let [lo, hi] = cf.blocks;
    let a = solve_block(grid, sys, lo, &[face])?;
    let b = solve_block(grid, sys, hi, &[face])?;
    glue(grid, face, [&a, &b])
}

/// Global snapshot space in snapshot coordinates.
#[derive(Debug, Clone)]
pub struct SnapshotSpace {
    pub blocks: Vec<BlockSnapshots>,
    offsets: Vec<usize>,
    mass: SparseMat,
    div: SparseMat,
    areas: Vec<f64>,
    n_fine_faces: usize,
}

impl SnapshotSpace {
    pub fn assemble(grid: &Grid, sys: &FineSystem) -> Result<Self> {
        Self::assemble_with(grid, sys, true)
    }

    pub fn assemble_with(grid: &Grid, sys: &FineSystem, parallel: bool) -> Result<Self> {
        let solve = |b: usize| {
            let faces: Vec<usize> = grid.block_faces(b).into_iter().flatten().collect();
            solve_block(grid, sys, b, &faces)
        };
        let blocks: Vec<BlockSnapshots> = if parallel {
            (0..grid.n_blocks()).into_par_iter().map(solve).collect::<Result<_>>()?
        } else {
            (0..grid.n_blocks()).map(solve).collect::<Result<_>>()?
        };
        let mut offsets = Vec::with_capacity(grid.n_coarse_faces() + 1);
        offsets.push(0);
        for f in grid.coarse_faces() {
            offsets.push(offsets.last().unwrap() + f.n_fine());
        }
        let dim = *offsets.last().unwrap();
        let mut mt = Vec::new();
        let mut dt = Vec::new();
        for blk in &blocks {
            let global = global_cols(&offsets, blk);
            for (a, &ga) in global.iter().enumerate() {
                dt.push((blk.block, ga, blk.flux[a]));
                for (bb, &gb) in global.iter().enumerate() {
                    mt.push((ga, gb, blk.gram[(a, bb)]));
                }
            }
        }
        let mass = SparseMat::from_triplets(dim, dim, &mt)?;
        let div = SparseMat::from_triplets(grid.n_blocks(), dim, &dt)?;
        let areas = (0..grid.n_blocks()).map(|b| grid.block_area(b)).collect();
        Ok(Self {
            blocks,
            offsets,
            mass,
            div,
            areas,
            n_fine_faces: grid.n_fine_faces(),
        })
    }

    pub fn dim(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn n_faces(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Global snapshot columns owned by coarse face `i`.
    pub fn face_range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn face_len(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    /// Owning coarse face of a snapshot column.
    pub fn face_of(&self, col: usize) -> usize {
        self.offsets.partition_point(|&o| o <= col) - 1
    }

    /// `∫ κ⁻¹ v · w` in snapshot coordinates.
    pub fn mass(&self) -> &SparseMat {
        &self.mass
    }

    /// Block-integrated divergence, `n_blocks x dim`.
    pub fn div(&self) -> &SparseMat {
        &self.div
    }

    pub fn block_areas(&self) -> &[f64] {
        &self.areas
    }

    /// Global column indices of the local columns of a block.
    pub fn block_global_cols(&self, b: usize) -> Vec<usize> {
        global_cols(&self.offsets, &self.blocks[b])
    }

    /// Squared `L²(κ⁻¹)` norm of snapshot coefficients.
    pub fn l2_sq(&self, c: &[f64]) -> f64 {
        self.mass.quad_form(c)
    }

    /// Squared `H(div; κ⁻¹)` norm of snapshot coefficients.
    pub fn hdiv_sq(&self, c: &[f64]) -> f64 {
        let d = self.div.matvec(c);
        self.l2_sq(c) + d.iter().zip(&self.areas).map(|(x, a)| x * x / a).sum::<f64>()
    }

    /// Fine velocity coefficients of a snapshot-coordinate vector.
    pub fn expand(&self, c: &[f64]) -> Vec<f64> {
        let mut v = vec![0.0; self.n_fine_faces];
        for blk in &self.blocks {
            let global = self.block_global_cols(blk.block);
            let local_c: Vec<f64> = global.iter().map(|&g| c[g]).collect();
            if local_c.iter().all(|x| *x == 0.0) {
                continue;
            }
            for (r, &f) in blk.faces.iter().enumerate() {
                let val: f64 = (0..blk.n_cols()).map(|k| blk.values[(r, k)] * local_c[k]).sum();
                // faces shared by two blocks carry the same trace from both sides
                v[f] = val;
            }
        }
        v
    }

    /// Snapshot basis of face `i` as fine vectors.
    pub fn face_basis(&self, grid: &Grid, i: usize) -> Result<SnapshotBasis> {
        let cf = grid.coarse_face(i)?;
        glue(grid, i, cf.blocks.map(|b| &self.blocks[b]))
    }
}

fn global_cols(offsets: &[usize], blk: &BlockSnapshots) -> Vec<usize> {
    let mut out = Vec::with_capacity(blk.n_cols());
    for s in &blk.slots {
        out.extend(offsets[s.face]..offsets[s.face] + s.len);
    }
    out
}

/// Galerkin solution of a coarse saddle problem in some set of coordinates.
#[derive(Debug, Clone)]
pub struct CoarseSolution {
    pub coeffs: Vec<f64>,
    /// Block pressures with zero area-weighted mean.
    pub pressure: Vec<f64>,
}

/// Solve `∫ κ⁻¹ v w − ∫ div(w) p = 0`, `∫ div(v) q = ∫ f q` for mass `a`
/// and block-integrated divergence `b` in the same coordinates.
pub fn solve_coarse(a: &SparseMat, b: &SparseMat, grid: &Grid, f: &SourceField) -> Result<CoarseSolution> {
    f.check_compatible(grid)?;
    let rhs_p = f.integrated(grid);
    let areas: Vec<f64> = (0..grid.n_blocks()).map(|k| grid.block_area(k)).collect();
    let (coeffs, p) = crate::linalg::solve_saddle(a, b, &vec![0.0; a.nrows()], &rhs_p, PressureFix::MeanZero(areas))?;
    Ok(CoarseSolution {
        coeffs,
        pressure: p.into_iter().map(|x| -x).collect(),
    })
}

/// Snapshot reference solution `(v_snap, p_snap)`.
pub fn solve_snapshot_reference(space: &SnapshotSpace, grid: &Grid, f: &SourceField) -> Result<CoarseSolution> {
    solve_coarse(space.mass(), space.div(), grid, f)
}
