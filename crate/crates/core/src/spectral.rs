//! Local spectral problems on each face's snapshot space.

use faer::Mat;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GmsError, Result};
use crate::fem_fine::FineSystem;
use crate::linalg::{sym_geig, Cholesky};
use crate::mesh::Grid;
use crate::snapshot::SnapshotSpace;

/// Which pair of bilinear forms defines the offline eigenfunctions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpectralProblem {
    /// Trace energy on the face against the scaled `H(div)` norm on `ω_i`.
    Sp1,
    /// Energy of the minimum-energy extension against the `L²` norm on `ω_i`.
    Sp2,
}

impl std::fmt::Display for SpectralProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SpectralProblem::Sp1 => "sp1",
            SpectralProblem::Sp2 => "sp2",
        })
    }
}

#[derive(Debug, Clone)]
pub struct FaceEigen {
    pub face: usize,
    pub problem: SpectralProblem,
    /// Ascending.
    pub values: Vec<f64>,
    /// Eigenvectors in the face's snapshot coordinates, `S`-orthonormal.
    pub vectors: Mat<f64>,
}

impl FaceEigen {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `λ_{l+1}`, the first eigenvalue not selected with `l` bases.
    pub fn threshold(&self, l: usize) -> f64 {
        self.values.get(l).copied().unwrap_or(f64::INFINITY)
    }

    pub fn vector(&self, k: usize) -> Vec<f64> {
        (0..self.vectors.nrows()).map(|r| self.vectors[(r, k)]).collect()
    }
}

fn degenerate(face: usize, e: GmsError) -> GmsError {
    GmsError::Degenerate {
        face,
        reason: e.to_string(),
    }
}

/// Dense `L²(ω_i; κ⁻¹)` Gram of face `i`'s snapshot columns.
pub fn face_mass_gram(space: &SnapshotSpace, face: usize) -> Mat<f64> {
    let r: Vec<usize> = space.face_range(face).collect();
    space.mass().submatrix(&r, &r).to_dense()
}

/// Dense `∫_{ω_i} div v div w` of face `i`'s snapshot columns.
pub fn face_div_gram(grid: &Grid, space: &SnapshotSpace, face: usize) -> Result<Mat<f64>> {
    let cf = grid.coarse_face(face)?;
    let range = space.face_range(face);
    let n = range.len();
    let mut d = Mat::zeros(n, n);
    for b in cf.blocks {
        let flux: Vec<f64> = range.clone().map(|c| space.div().get(b, c)).collect();
        let area = grid.block_area(b);
        for i in 0..n {
            for j in 0..n {
                d[(i, j)] += flux[i] * flux[j] / area;
            }
        }
    }
    Ok(d)
}

/// `(a, s)` of the first spectral problem.
pub fn sp1_matrices(grid: &Grid, sys: &FineSystem, space: &SnapshotSpace, face: usize) -> Result<(Mat<f64>, Mat<f64>)> {
    let cf = grid.coarse_face(face)?;
    let n = cf.n_fine();
    let mut a = Mat::zeros(n, n);
    for (j, &f) in cf.fine_faces.iter().enumerate() {
        let ff = grid.fine_face(f);
        let (lo, hi) = (ff.minus.expect("interior"), ff.plus.expect("interior"));
        // harmonic mean of the two cell values
        let kinv = 0.5 * (sys.kappa_inv[lo] + sys.kappa_inv[hi]);
        a[(j, j)] = kinv * ff.measure;
    }
    let m = face_mass_gram(space, face);
    let d = face_div_gram(grid, space, face)?;
    let h = grid.coarse_size();
    let s = Mat::from_fn(n, n, |i, j| (m[(i, j)] + d[(i, j)]) / h);
    Ok((a, s))
}

pub fn spectral_problem_1(grid: &Grid, sys: &FineSystem, space: &SnapshotSpace, face: usize) -> Result<FaceEigen> {
    let (a, s) = sp1_matrices(grid, sys, space, face)?;
    let e = sym_geig(a.as_ref(), s.as_ref()).map_err(|e| degenerate(face, e))?;
    Ok(FaceEigen {
        face,
        problem: SpectralProblem::Sp1,
        values: e.values,
        vectors: e.vectors,
    })
}

/// Snapshot columns of all faces whose neighborhood meets `ω_i`, face `i`
/// first, with their `L²(ω_i; κ⁻¹)` Gram matrix.
pub fn neighborhood_gram(grid: &Grid, space: &SnapshotSpace, face: usize) -> Result<(Vec<usize>, Mat<f64>)> {
    let cf = grid.coarse_face(face)?;
    let mut cols: Vec<usize> = space.face_range(face).collect();
    for f in grid.neighbor_coarse_faces(face)? {
        if f != face {
            cols.extend(space.face_range(f));
        }
    }
    let mut pos = std::collections::HashMap::with_capacity(cols.len());
    for (k, &c) in cols.iter().enumerate() {
        pos.insert(c, k);
    }
    let mut g = Mat::zeros(cols.len(), cols.len());
    for b in cf.blocks {
        let blk = &space.blocks[b];
        let global = space.block_global_cols(b);
        for (la, ga) in global.iter().enumerate() {
            let pa = pos[ga];
            for (lb, gb) in global.iter().enumerate() {
                g[(pa, pos[gb])] += blk.gram[(la, lb)];
            }
        }
    }
    Ok((cols, g))
}

/// Minimum-energy extension of face `i`'s snapshot function `v` into the
/// neighboring snapshot spaces. Returns coefficients over the columns of
/// [`neighborhood_gram`], the first `J_i` of which equal `v`.
pub fn min_energy_extension(grid: &Grid, space: &SnapshotSpace, face: usize, v: &[f64]) -> Result<Vec<f64>> {
    let n = space.face_len(face);
    if v.len() != n {
        return Err(GmsError::Dimension(format!("{} coefficients for face with {n} columns", v.len())));
    }
    let (cols, g) = neighborhood_gram(grid, space, face)?;
    let m = cols.len() - n;
    let mut out = v.to_vec();
    if m > 0 {
        // neighbor columns have zero trace on E_i, so the constraint fixes the
        // first block and the rest solves G_NN y = -G_Ni v
        let g_nn = Mat::from_fn(m, m, |i, j| g[(n + i, n + j)]);
        let rhs: Vec<f64> = (0..m).map(|i| -(0..n).map(|j| g[(n + i, j)] * v[j]).sum::<f64>()).collect();
        let y = Cholesky::new(g_nn.as_ref()).map_err(|e| degenerate(face, e))?.solve(&rhs);
        out.extend(y);
    }
    Ok(out)
}

/// `(a, s)` of the second spectral problem.
pub fn sp2_matrices(grid: &Grid, space: &SnapshotSpace, face: usize) -> Result<(Mat<f64>, Mat<f64>)> {
    let n = space.face_len(face);
    let (cols, g) = neighborhood_gram(grid, space, face)?;
    let m = cols.len() - n;
    let s = Mat::from_fn(n, n, |i, j| g[(i, j)]);
    if m == 0 {
        return Ok((s.clone(), s));
    }
    let g_nn = Mat::from_fn(m, m, |i, j| g[(n + i, n + j)]);
    let g_ni = Mat::from_fn(m, n, |i, j| g[(n + i, j)]);
    let chol = Cholesky::new(g_nn.as_ref()).map_err(|e| degenerate(face, e))?;
    let x = chol.solve_mat(g_ni.as_ref());
    let corr = g_ni.transpose() * &x;
    let a = Mat::from_fn(n, n, |i, j| s[(i, j)] - 0.5 * (corr[(i, j)] + corr[(j, i)]));
    Ok((a, s))
}

pub fn spectral_problem_2(grid: &Grid, space: &SnapshotSpace, face: usize) -> Result<FaceEigen> {
    let (a, s) = sp2_matrices(grid, space, face)?;
    let e = sym_geig(a.as_ref(), s.as_ref()).map_err(|e| degenerate(face, e))?;
    Ok(FaceEigen {
        face,
        problem: SpectralProblem::Sp2,
        values: e.values,
        vectors: e.vectors,
    })
}

/// Eigenpairs of every interior face, in face order.
pub fn solve_all(grid: &Grid, sys: &FineSystem, space: &SnapshotSpace, problem: SpectralProblem) -> Result<Vec<FaceEigen>> {
    (0..grid.n_coarse_faces())
        .into_par_iter()
        .map(|i| match problem {
            SpectralProblem::Sp1 => spectral_problem_1(grid, sys, space, i),
            SpectralProblem::Sp2 => spectral_problem_2(grid, space, i),
        })
        .collect()
}

/// Per-face basis counts with their first excluded eigenvalues.
#[derive(Debug, Clone, PartialEq)]
pub struct MsBasisSelection {
    pub counts: Vec<usize>,
    /// `λ_{l_i+1}`, or `+∞` when every column of face `i` is selected.
    pub thresholds: Vec<f64>,
    pub lambda_min: f64,
}

pub fn select_offline(eigen: &[FaceEigen], counts: &[usize]) -> Result<MsBasisSelection> {
    if counts.len() != eigen.len() {
        return Err(GmsError::Dimension(format!(
            "{} basis counts for {} faces",
            counts.len(),
            eigen.len()
        )));
    }
    let mut thresholds = Vec::with_capacity(eigen.len());
    for (e, &l) in eigen.iter().zip(counts) {
        if l == 0 || l > e.len() {
            return Err(GmsError::Config(format!(
                "face {}: basis count {l} outside 1..={}",
                e.face,
                e.len()
            )));
        }
        let t = e.threshold(l);
        if t.is_finite() {
            let prev = e.values[l - 1];
            if (t - prev).abs() < 1e-8 * t.abs().max(f64::MIN_POSITIVE) {
                log::warn!(
                    "face {}: eigenvalues {l} and {} coincide, the selected space depends on the eigenbasis",
                    e.face,
                    l + 1
                );
            }
        }
        thresholds.push(t);
    }
    let lambda_min = thresholds.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(MsBasisSelection {
        counts: counts.to_vec(),
        thresholds,
        lambda_min,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{preset_field, FieldPreset, PermField};
    use crate::linalg::{dot, mat_vec};
    use crate::mesh::{build_grid, GridSpec};
    use crate::snapshot::build_snapshots;

    fn setup(ncx: usize, ncy: usize, nf: usize, contrast: f64, preset: FieldPreset) -> (Grid, FineSystem, SnapshotSpace) {
        let g = build_grid(GridSpec::new(ncx, ncy, nf)).unwrap();
        let k = preset_field(&g, preset, contrast, 6).unwrap();
        let sys = FineSystem::assemble(&g, &k).unwrap();
        let s = SnapshotSpace::assemble(&g, &sys).unwrap();
        (g, sys, s)
    }

    #[test]
    fn sp1_matrices_match_fine_quadrature() {
        let g = build_grid(GridSpec::new(2, 1, 2)).unwrap();
        let k = PermField::constant(&g, 1.0).unwrap();
        let sys = FineSystem::assemble(&g, &k).unwrap();
        let s = SnapshotSpace::assemble(&g, &sys).unwrap();
        let (a, sm) = sp1_matrices(&g, &sys, &s, 0).unwrap();
        let basis = build_snapshots(&g, &sys, 0).unwrap();
        let cf = g.coarse_face(0).unwrap();
        let n = g.n_fine_faces();
        let cells: Vec<usize> = (0..g.n_cells()).collect();
        for i in 0..2 {
            for j in 0..2 {
                let vi = basis.column(i, n);
                let vj = basis.column(j, n);
                let trace: f64 = cf.fine_faces.iter().map(|&f| vi[f] * vj[f] * sys.face_measure[f]).sum();
                assert!((a[(i, j)] - trace).abs() < 1e-12);
                let sum: Vec<f64> = vi.iter().zip(&vj).map(|(x, y)| x + y).collect();
                let dif: Vec<f64> = vi.iter().zip(&vj).map(|(x, y)| x - y).collect();
                let (_, hs) = sys.norms_on(&g, &sum, &cells).unwrap();
                let (_, hd) = sys.norms_on(&g, &dif, &cells).unwrap();
                let ip = 0.25 * (hs * hs - hd * hd) / g.coarse_size();
                assert!((sm[(i, j)] - ip).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sp1_scaling_with_kappa() {
        let g = build_grid(GridSpec::new(2, 2, 3)).unwrap();
        let k = preset_field(&g, FieldPreset::Inclusions, 20.0, 1).unwrap();
        let k3 = PermField::new(g.nx, g.ny, k.values().iter().map(|v| 3.0 * v).collect()).unwrap();
        let mats = |k: &PermField| {
            let sys = FineSystem::assemble(&g, k).unwrap();
            let s = SnapshotSpace::assemble(&g, &sys).unwrap();
            let h = g.coarse_size();
            let (a, _) = sp1_matrices(&g, &sys, &s, 1).unwrap();
            (a, face_mass_gram(&s, 1), face_div_gram(&g, &s, 1).unwrap(), h)
        };
        let (a1, m1, d1, _) = mats(&k);
        let (a3, m3, d3, _) = mats(&k3);
        for i in 0..3 {
            for j in 0..3 {
                assert!((a3[(i, j)] - a1[(i, j)] / 3.0).abs() < 1e-12 * a1[(i, i)].abs().max(1e-300));
                assert!((m3[(i, j)] - m1[(i, j)] / 3.0).abs() < 1e-10 * m1[(i, i)]);
                assert!((d3[(i, j)] - d1[(i, j)]).abs() < 1e-10 * d1[(i, i)]);
            }
        }
    }

    #[test]
    fn eigen_contracts() {
        let (g, sys, s) = setup(3, 3, 4, 1e4, FieldPreset::Inclusions);
        for problem in [SpectralProblem::Sp1, SpectralProblem::Sp2] {
            let all = solve_all(&g, &sys, &s, problem).unwrap();
            for e in &all {
                assert!(e.values.windows(2).all(|w| w[0] <= w[1]));
                let sm = match problem {
                    SpectralProblem::Sp1 => sp1_matrices(&g, &sys, &s, e.face).unwrap().1,
                    SpectralProblem::Sp2 => sp2_matrices(&g, &s, e.face).unwrap().1,
                };
                let vsv = e.vectors.transpose() * &sm * &e.vectors;
                for i in 0..e.len() {
                    for j in 0..e.len() {
                        let id = if i == j { 1.0 } else { 0.0 };
                        assert!((vsv[(i, j)] - id).abs() < 1e-10);
                    }
                }
                if problem == SpectralProblem::Sp2 {
                    assert!(e.values.iter().all(|&l| l >= -1e-12 && l <= 1.0 + 1e-10));
                }
            }
        }
    }

    #[test]
    fn sp2_without_neighbors_is_identity_pencil() {
        let (g, _, s) = setup(2, 1, 4, 1e2, FieldPreset::Inclusions);
        let e = spectral_problem_2(&g, &s, 0).unwrap();
        assert!(e.values.iter().all(|l| (l - 1.0).abs() < 1e-10));
        let v = vec![1.0, -2.0, 0.5, 3.0];
        assert_eq!(min_energy_extension(&g, &s, 0, &v).unwrap(), v);
    }

    #[test]
    fn extension_matches_dense_kkt() {
        let (g, _, s) = setup(3, 1, 3, 1e3, FieldPreset::Inclusions);
        let face = 1;
        let (cols, gm) = neighborhood_gram(&g, &s, face).unwrap();
        let n = s.face_len(face);
        let v = vec![0.3, -1.0, 2.0];
        let ext = min_energy_extension(&g, &s, face, &v).unwrap();
        // [G  E^T; E  0] [x; mu] = [0; v] with E selecting the face columns
        let t = cols.len();
        let kkt = Mat::from_fn(t + n, t + n, |i, j| match (i < t, j < t) {
            (true, true) => gm[(i, j)],
            (true, false) => f64::from(u8::from(i == j - t)),
            (false, true) => f64::from(u8::from(j == i - t)),
            _ => 0.0,
        });
        let mut rhs = Mat::zeros(t + n, 1);
        for k in 0..n {
            rhs[(t + k, 0)] = v[k];
        }
        use faer::linalg::solvers::Solve;
        let x = kkt.partial_piv_lu().solve(&rhs);
        for k in 0..t {
            assert!((ext[k] - x[(k, 0)]).abs() < 1e-9 * (1.0 + ext[k].abs()));
        }
        // energy never exceeds that of v itself
        let e_ext = dot(&ext, &mat_vec(gm.as_ref(), &ext));
        let mut padded = v.clone();
        padded.resize(t, 0.0);
        let e_v = dot(&padded, &mat_vec(gm.as_ref(), &padded));
        assert!(e_ext <= e_v * (1.0 + 1e-12));
    }

    #[test]
    fn selection_thresholds() {
        let (g, sys, s) = setup(2, 2, 4, 1e-4, FieldPreset::Channels);
        let all = solve_all(&g, &sys, &s, SpectralProblem::Sp1).unwrap();
        let full = select_offline(&all, &vec![4; 4]).unwrap();
        assert_eq!(full.lambda_min, f64::INFINITY);
        let mut prev = 0.0;
        for l in 1..4 {
            let sel = select_offline(&all, &vec![l; 4]).unwrap();
            assert!(sel.lambda_min >= prev);
            prev = sel.lambda_min;
        }
        assert!(select_offline(&all, &[0, 1, 1, 1]).is_err());
        assert!(select_offline(&all, &[5, 1, 1, 1]).is_err());
    }

    #[test]
    fn eigenvalues_stable_under_column_permutation() {
        let (g, sys, s) = setup(3, 2, 4, 1e4, FieldPreset::Inclusions);
        let (a, sm) = sp1_matrices(&g, &sys, &s, 2).unwrap();
        let perm = [2usize, 0, 3, 1];
        let ap = Mat::from_fn(4, 4, |i, j| a[(perm[i], perm[j])]);
        let sp = Mat::from_fn(4, 4, |i, j| sm[(perm[i], perm[j])]);
        let e1 = sym_geig(a.as_ref(), sm.as_ref()).unwrap();
        let e2 = sym_geig(ap.as_ref(), sp.as_ref()).unwrap();
        for (x, y) in e1.values.iter().zip(&e2.values) {
            assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
        }
    }
}
