//! Lowest-order face-flux mixed discretization on the fine grid.
//!
//! Each fine face carries one unknown, the normal flux density in the `+x`
//! or `+y` direction; fine pressures are cellwise constant. With this
//! normalization the velocity inside a cell is linear in the normal
//! direction between the two opposite face values.

use rayon::prelude::*;

use crate::error::{GmsError, Result};
use crate::fields::{PermField, SourceField};
use crate::linalg::{dot, solve_saddle, PressureFix, SparseMat};
use crate::mesh::{Grid, Side};

/// Assembled fine-grid operators.
#[derive(Debug, Clone)]
pub struct FineSystem {
    /// `∫ κ⁻¹ v · w` over fine faces.
    pub mass: SparseMat,
    /// Cell-integrated divergence, `n_cells x n_faces`.
    pub div_fine: SparseMat,
    /// Block-integrated divergence, `n_blocks x n_faces`.
    pub div_coarse: SparseMat,
    pub face_measure: Vec<f64>,
    pub kappa_inv: Vec<f64>,
    hx: f64,
    hy: f64,
}

/// `[[a, b], [b, a]]` coefficient pair of one cell for opposite faces.
fn cell_pair(h_along: f64, h_across: f64, kinv: f64) -> (f64, f64) {
    let area = h_along * h_across;
    (kinv * area / 3.0, kinv * area / 6.0)
}

impl FineSystem {
    pub fn assemble(grid: &Grid, kappa: &PermField) -> Result<Self> {
        kappa.check_matches(grid)?;
        let (hx, hy) = (grid.hx(), grid.hy());
        let kappa_inv: Vec<f64> = kappa.values().iter().map(|k| 1.0 / k).collect();
        let per_cell: Vec<[(usize, usize, f64); 8]> = (0..grid.n_cells())
            .into_par_iter()
            .map(|c| {
                let [w, e, s, n] = grid.cell_faces(c);
                let (a, b) = cell_pair(hx, hy, kappa_inv[c]);
                [
                    (w, w, a),
                    (w, e, b),
                    (e, w, b),
                    (e, e, a),
                    (s, s, a),
                    (s, n, b),
                    (n, s, b),
                    (n, n, a),
                ]
            })
            .collect();
        let triplets: Vec<_> = per_cell.into_iter().flatten().collect();
        let nf = grid.n_fine_faces();
        let mass = SparseMat::from_triplets(nf, nf, &triplets)?;

        let mut div = Vec::with_capacity(4 * grid.n_cells());
        let mut div_c = Vec::with_capacity(4 * grid.n_cells());
        for c in 0..grid.n_cells() {
            let faces = grid.cell_faces(c);
            let blk = grid.cell_block(c);
            for (side, sign, h) in [
                (Side::West, -1.0, hy),
                (Side::East, 1.0, hy),
                (Side::South, -1.0, hx),
                (Side::North, 1.0, hx),
            ] {
                let f = faces[side as usize];
                div.push((c, f, sign * h));
                div_c.push((blk, f, sign * h));
            }
        }
        let div_fine = SparseMat::from_triplets(grid.n_cells(), nf, &div)?;
        let div_coarse = SparseMat::from_triplets(grid.n_blocks(), nf, &div_c)?;
        let face_measure = grid.fine_faces().iter().map(|f| f.measure).collect();
        Ok(Self {
            mass,
            div_fine,
            div_coarse,
            face_measure,
            kappa_inv,
            hx,
            hy,
        })
    }

    pub fn n_faces(&self) -> usize {
        self.mass.nrows()
    }

    pub fn n_cells(&self) -> usize {
        self.div_fine.nrows()
    }

    pub fn cell_volume(&self) -> f64 {
        self.hx * self.hy
    }

    /// Mass matrix of the cells `cells` on the sorted face list `faces`.
    /// Every face of every listed cell must be in `faces`.
    pub fn restricted_mass(&self, grid: &Grid, cells: &[usize], faces: &[usize]) -> Result<SparseMat> {
        let local = |f: usize| {
            faces
                .binary_search(&f)
                .map_err(|_| GmsError::Dimension(format!("fine face {f} missing from local face list")))
        };
        let mut t = Vec::with_capacity(8 * cells.len());
        for &c in cells {
            let [w, e, s, n] = grid.cell_faces(c);
            let (a, b) = cell_pair(self.hx, self.hy, self.kappa_inv[c]);
            let (w, e, s, n) = (local(w)?, local(e)?, local(s)?, local(n)?);
            t.extend([
                (w, w, a),
                (w, e, b),
                (e, w, b),
                (e, e, a),
                (s, s, a),
                (s, n, b),
                (n, s, b),
                (n, n, a),
            ]);
        }
        SparseMat::from_triplets(faces.len(), faces.len(), &t)
    }

    /// `κ⁻¹`-weighted energy and integrated divergence of `v` on one cell.
    pub fn cell_terms(&self, grid: &Grid, v: &[f64], c: usize) -> (f64, f64) {
        let [w, e, s, n] = grid.cell_faces(c);
        let (a, b) = cell_pair(self.hx, self.hy, self.kappa_inv[c]);
        let energy = a * (v[w] * v[w] + v[e] * v[e] + v[s] * v[s] + v[n] * v[n])
            + 2.0 * b * (v[w] * v[e] + v[s] * v[n]);
        let div = self.hy * (v[e] - v[w]) + self.hx * (v[n] - v[s]);
        (energy, div)
    }

    fn check_len(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.n_faces() {
            return Err(GmsError::Dimension(format!(
                "velocity has {} coefficients, system has {} faces",
                v.len(),
                self.n_faces()
            )));
        }
        Ok(())
    }

    pub fn norm_l2k(&self, v: &[f64]) -> Result<f64> {
        self.check_len(v)?;
        Ok(self.mass.quad_form(v).max(0.0).sqrt())
    }

    pub fn norm_hdivk(&self, v: &[f64]) -> Result<f64> {
        self.check_len(v)?;
        let div = self.div_fine.matvec(v);
        let vol = self.cell_volume();
        let d2: f64 = div.iter().map(|d| d * d / vol).sum();
        Ok((self.mass.quad_form(v) + d2).max(0.0).sqrt())
    }

    /// Norms `(L2, Hdiv)` restricted to a set of cells.
    pub fn norms_on(&self, grid: &Grid, v: &[f64], cells: &[usize]) -> Result<(f64, f64)> {
        self.check_len(v)?;
        let vol = self.cell_volume();
        let mut l2 = 0.0;
        let mut dd = 0.0;
        for &c in cells {
            if c >= self.n_cells() {
                return Err(GmsError::OutOfRange { index: c, len: self.n_cells() });
            }
            let (e, d) = self.cell_terms(grid, v, c);
            l2 += e;
            dd += d * d / vol;
        }
        Ok((l2.max(0.0).sqrt(), (l2 + dd).max(0.0).sqrt()))
    }
}

/// Velocity of the face-flux field `v` at local coordinates `(xi, eta) ∈ [0,1]²` of cell `c`.
pub fn velocity_at(grid: &Grid, v: &[f64], c: usize, xi: f64, eta: f64) -> (f64, f64) {
    let [w, e, s, n] = grid.cell_faces(c);
    ((1.0 - xi) * v[w] + xi * v[e], (1.0 - eta) * v[s] + eta * v[n])
}

const GAUSS3: [(f64, f64); 3] = [
    (0.112_701_665_379_258_31, 5.0 / 18.0),
    (0.5, 8.0 / 18.0),
    (0.887_298_334_620_741_7, 5.0 / 18.0),
];

/// `‖v_h − v*‖_{L²(κ⁻¹)}` by tensor Gauss quadrature with three points per axis.
pub fn l2k_error_against(
    grid: &Grid,
    sys: &FineSystem,
    v: &[f64],
    exact: impl Fn(f64, f64) -> (f64, f64) + Sync,
) -> f64 {
    let (hx, hy) = (grid.hx(), grid.hy());
    let sum: f64 = (0..grid.n_cells())
        .into_par_iter()
        .map(|c| {
            let (ix, iy) = grid.cell_coords(c);
            let mut acc = 0.0;
            for &(xi, wx) in &GAUSS3 {
                for &(eta, wy) in &GAUSS3 {
                    let (ux, uy) = velocity_at(grid, v, c, xi, eta);
                    let (ex, ey) = exact((ix as f64 + xi) * hx, (iy as f64 + eta) * hy);
                    acc += wx * wy * ((ux - ex).powi(2) + (uy - ey).powi(2));
                }
            }
            acc * hx * hy * sys.kappa_inv[c]
        })
        .collect::<Vec<_>>()
        .iter()
        .sum();
    sum.sqrt()
}

#[derive(Debug, Clone)]
pub struct FineSolution {
    /// Normal flux density per fine face; zero on the domain boundary.
    pub velocity: Vec<f64>,
    /// Pressure per fine cell with zero mean.
    pub pressure: Vec<f64>,
}

/// Solve with homogeneous Neumann data and cell-integrated sources `cell_rhs`.
pub fn solve_fine_cells(grid: &Grid, sys: &FineSystem, cell_rhs: &[f64]) -> Result<FineSolution> {
    if cell_rhs.len() != grid.n_cells() {
        return Err(GmsError::Dimension(format!(
            "{} cell sources for {} cells",
            cell_rhs.len(),
            grid.n_cells()
        )));
    }
    let free: Vec<usize> = (0..grid.n_fine_faces())
        .filter(|&f| !grid.fine_face(f).is_boundary())
        .collect();
    let cells: Vec<usize> = (0..grid.n_cells()).collect();
    let m = sys.mass.submatrix(&free, &free);
    let b = sys.div_fine.submatrix(&cells, &free);
    let weights = vec![sys.cell_volume(); grid.n_cells()];
    let (vf, p) = solve_saddle(
        &m,
        &b,
        &vec![0.0; free.len()],
        cell_rhs,
        PressureFix::MeanZero(weights),
    )?;
    let mut velocity = vec![0.0; grid.n_fine_faces()];
    for (k, &f) in free.iter().enumerate() {
        velocity[f] = vf[k];
    }
    Ok(FineSolution {
        velocity,
        pressure: p.into_iter().map(|x| -x).collect(),
    })
}

/// Fine reference solve for a block-constant source.
pub fn solve_fine(grid: &Grid, sys: &FineSystem, f: &SourceField) -> Result<FineSolution> {
    f.check_compatible(grid)?;
    let vol = sys.cell_volume();
    let rhs: Vec<f64> = (0..grid.n_cells())
        .map(|c| f.values()[grid.cell_block(c)] * vol)
        .collect();
    solve_fine_cells(grid, sys, &rhs)
}

/// Weighted residual of the discrete Darcy equations for a fine solution.
pub fn fine_residual(grid: &Grid, sys: &FineSystem, sol: &FineSolution, cell_rhs: &[f64]) -> (f64, f64) {
    let free: Vec<usize> = (0..grid.n_fine_faces())
        .filter(|&f| !grid.fine_face(f).is_boundary())
        .collect();
    let mv = sys.mass.matvec(&sol.velocity);
    let bp = sys.div_fine.matvec_t(&sol.pressure);
    let r1: f64 = free.iter().map(|&f| (mv[f] - bp[f]).powi(2)).sum::<f64>().sqrt();
    let s1: f64 = free.iter().map(|&f| mv[f].powi(2)).sum::<f64>().sqrt().max(1e-14);
    let bv = sys.div_fine.matvec(&sol.velocity);
    let r2 = bv.iter().zip(cell_rhs).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let s2 = dot(cell_rhs, cell_rhs).sqrt().max(1e-14);
    (r1 / s1, r2 / s2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{corner_source, preset_field, FieldPreset};
    use crate::mesh::{build_grid, GridSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_cell_entries() {
        let g = build_grid(GridSpec::new(1, 1, 1).with_size(0.5, 0.5)).unwrap();
        let k = PermField::constant(&g, 1.0).unwrap();
        let sys = FineSystem::assemble(&g, &k).unwrap();
        let [w, e, s, n] = g.cell_faces(0);
        let h2 = 0.25;
        assert!((sys.mass.get(w, w) - h2 / 3.0).abs() < 1e-15);
        assert!((sys.mass.get(w, e) - h2 / 6.0).abs() < 1e-15);
        assert_eq!(sys.mass.get(w, s), 0.0);
        assert_eq!(sys.div_fine.get(0, e), 0.5);
        assert_eq!(sys.div_fine.get(0, w), -0.5);
        assert_eq!(sys.div_fine.get(0, n), 0.5);
        assert_eq!(sys.div_fine.get(0, s), -0.5);
    }

    #[test]
    fn structural_invariants() {
        let g = build_grid(GridSpec::new(3, 2, 4)).unwrap();
        let k = preset_field(&g, FieldPreset::Inclusions, 1e4, 2).unwrap();
        let sys = FineSystem::assemble(&g, &k).unwrap();
        assert!(sys.mass.is_symmetric(1e-12));
        // each interior face: +|e| on one cell, -|e| on the other
        let bt = sys.div_fine.transpose();
        for f in 0..g.n_fine_faces() {
            let (cells, vals) = bt.row(f);
            let ff = g.fine_face(f);
            let expected = usize::from(ff.minus.is_some()) + usize::from(ff.plus.is_some());
            assert_eq!(cells.len(), expected);
            if expected == 2 {
                assert!((vals[0] + vals[1]).abs() < 1e-15);
            }
            assert!(vals.iter().all(|v| (v.abs() - ff.measure).abs() < 1e-15));
        }
        // coarse divergence is the block aggregate of fine divergence
        let mut agg = Vec::new();
        for (c, f, v) in sys.div_fine.triplets() {
            agg.push((g.cell_block(c), f, v));
        }
        let agg = SparseMat::from_triplets(g.n_blocks(), g.n_fine_faces(), &agg).unwrap();
        for (b, f, v) in agg.triplets() {
            assert!((sys.div_coarse.get(b, f) - v).abs() < 1e-15);
        }
    }

    #[test]
    fn mass_scales_with_inverse_kappa() {
        let g = build_grid(GridSpec::new(2, 2, 3)).unwrap();
        let k = preset_field(&g, FieldPreset::Inclusions, 1e2, 4).unwrap();
        let k2 = PermField::new(g.nx, g.ny, k.values().iter().map(|v| 2.0 * v).collect()).unwrap();
        let a = FineSystem::assemble(&g, &k).unwrap();
        let b = FineSystem::assemble(&g, &k2).unwrap();
        for (r, c, v) in a.mass.triplets() {
            assert_eq!(b.mass.get(r, c), 0.5 * v);
        }
    }

    #[test]
    fn zero_source_zero_solution() {
        let g = build_grid(GridSpec::new(2, 2, 4)).unwrap();
        let k = PermField::constant(&g, 1.0).unwrap();
        let sys = FineSystem::assemble(&g, &k).unwrap();
        let sol = solve_fine(&g, &sys, &SourceField::zeros(&g)).unwrap();
        assert!(sol.velocity.iter().all(|v| *v == 0.0));
        assert!(sol.pressure.iter().all(|p| *p == 0.0));
    }

    #[test]
    fn fine_solve_invariants() {
        let g = build_grid(GridSpec::new(4, 4, 4)).unwrap();
        let k = preset_field(&g, FieldPreset::Channels, 1e-4, 9).unwrap();
        let sys = FineSystem::assemble(&g, &k).unwrap();
        let f = corner_source(&g).unwrap();
        let sol = solve_fine(&g, &sys, &f).unwrap();
        let vol = sys.cell_volume();
        let rhs: Vec<f64> = (0..g.n_cells()).map(|c| f.values()[g.cell_block(c)] * vol).collect();
        let (r1, r2) = fine_residual(&g, &sys, &sol, &rhs);
        assert!(r1 < 1e-10 && r2 < 1e-10, "{r1} {r2}");
        assert!(sol.pressure.iter().sum::<f64>().abs() * vol < 1e-10);
        for (f, ff) in g.fine_faces().iter().enumerate() {
            if ff.is_boundary() {
                assert_eq!(sol.velocity[f], 0.0);
            }
        }
        let bv = sys.div_fine.matvec(&sol.velocity);
        let total: f64 = bv.iter().zip(&rhs).map(|(a, b)| a - b).sum();
        assert!(total.abs() < 1e-12);

        let bad = SourceField::new(&g, vec![1.0; 16]).unwrap();
        assert!(matches!(solve_fine(&g, &sys, &bad), Err(GmsError::Incompatible(_))));
    }

    #[test]
    fn norms_match_quadrature() {
        let g = build_grid(GridSpec::new(2, 2, 3)).unwrap();
        let k = preset_field(&g, FieldPreset::Inclusions, 10.0, 1).unwrap();
        let sys = FineSystem::assemble(&g, &k).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v: Vec<f64> = (0..g.n_fine_faces()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let quad = l2k_error_against(&g, &sys, &v, |_, _| (0.0, 0.0));
        let l2 = sys.norm_l2k(&v).unwrap();
        assert!((quad - l2).abs() < 1e-12 * l2);
        let all: Vec<usize> = (0..g.n_cells()).collect();
        let (l2b, hd) = sys.norms_on(&g, &v, &all).unwrap();
        assert!((l2b - l2).abs() < 1e-12 * l2);
        assert!((hd - sys.norm_hdivk(&v).unwrap()).abs() < 1e-12 * hd);
        assert_eq!(sys.norm_l2k(&vec![0.0; g.n_fine_faces()]).unwrap(), 0.0);
        assert!(sys.norm_l2k(&v[1..]).is_err());
    }

    #[test]
    fn divergence_free_norms_agree() {
        let g = build_grid(GridSpec::new(2, 1, 3)).unwrap();
        let k = preset_field(&g, FieldPreset::Inclusions, 50.0, 2).unwrap();
        let sys = FineSystem::assemble(&g, &k).unwrap();
        // discrete curl of a vertex stream function vanishing on the boundary
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let psi: Vec<Vec<f64>> = (0..=g.nx)
            .map(|i| {
                (0..=g.ny)
                    .map(|j| if i == 0 || j == 0 || i == g.nx || j == g.ny { 0.0 } else { rng.random_range(-1.0..1.0) })
                    .collect()
            })
            .collect();
        let mut v = vec![0.0; g.n_fine_faces()];
        for j in 0..g.ny {
            for i in 0..=g.nx {
                v[g.vface(i, j)] = (psi[i][j + 1] - psi[i][j]) / g.hy();
            }
        }
        for j in 0..=g.ny {
            for i in 0..g.nx {
                v[g.hface(i, j)] = -(psi[i + 1][j] - psi[i][j]) / g.hx();
            }
        }
        assert!(sys.div_fine.matvec(&v).iter().all(|d| d.abs() < 1e-12));
        let a = sys.norm_l2k(&v).unwrap();
        let b = sys.norm_hdivk(&v).unwrap();
        assert!(a > 0.0 && (a - b).abs() < 1e-12 * a);
        let zero = vec![0.0; g.n_fine_faces()];
        assert_eq!(sys.norm_hdivk(&zero).unwrap(), 0.0);
    }
}
