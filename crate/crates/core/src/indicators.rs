//! Residual functionals, their dual norms and the error indicators.

use faer::linalg::solvers::Solve;
use faer::Mat;
use rayon::prelude::*;

use crate::error::{GmsError, Result};
use crate::linalg::{dot, mat_vec, Cholesky};
use crate::mesh::Grid;
use crate::ms_solver::{MsSolution, MsSpace};
use crate::snapshot::SnapshotSpace;
use crate::spectral::{face_div_gram, face_mass_gram, SpectralProblem};

/// Test-function norm of a dual norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormFlavor {
    Hdiv,
    L2,
}

impl From<SpectralProblem> for NormFlavor {
    fn from(p: SpectralProblem) -> Self {
        match p {
            SpectralProblem::Sp1 => NormFlavor::Hdiv,
            SpectralProblem::Sp2 => NormFlavor::L2,
        }
    }
}

/// Factored per-face Gram matrices of the snapshot columns on `ω_i`.
pub struct GramCache {
    pub flavor: NormFlavor,
    factors: Vec<Cholesky>,
}

impl GramCache {
    pub fn build(grid: &Grid, space: &SnapshotSpace, flavor: NormFlavor) -> Result<Self> {
        let factors = (0..grid.n_coarse_faces())
            .into_par_iter()
            .map(|i| {
                let mut g = face_mass_gram(space, i);
                if flavor == NormFlavor::Hdiv {
                    g += face_div_gram(grid, space, i)?;
                }
                Cholesky::new(g.as_ref()).map_err(|e| GmsError::Degenerate {
                    face: i,
                    reason: e.to_string(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { flavor, factors })
    }

    pub fn factor(&self, face: usize) -> &Cholesky {
        &self.factors[face]
    }
}

/// `R(β)` for every snapshot column `β`: `∫ κ⁻¹ v_ms · β − ∫ div(β) p_ms`.
pub fn residual_vector(space: &SnapshotSpace, sol: &MsSolution) -> Vec<f64> {
    let mut r = space.mass().matvec(&sol.snap_coeffs);
    for (ri, d) in r.iter_mut().zip(space.div().matvec_t(&sol.pressure)) {
        *ri -= d;
    }
    r
}

/// Coefficients of `R_i` on face `i`'s snapshot columns.
pub fn residual_coeffs(space: &SnapshotSpace, sol: &MsSolution, face: usize) -> Vec<f64> {
    residual_vector(space, sol)[space.face_range(face)].to_vec()
}

/// `sqrt(r^T G^{-1} r)`.
pub fn dual_norm(r: &[f64], gram: &Cholesky) -> f64 {
    gram.inv_quad(r).max(0.0).sqrt()
}

#[derive(Debug, Clone)]
pub struct ResidualReport {
    pub flavor: NormFlavor,
    /// `‖R_i‖` per face.
    pub norms: Vec<f64>,
    /// `λ_{l_i+1}` per face.
    pub thresholds: Vec<f64>,
    /// `η_i² = ‖R_i‖² / λ_{l_i+1}`, zero for saturated faces.
    pub eta2: Vec<f64>,
    pub total: f64,
    /// Faces by decreasing `η_i²`, ties by index.
    pub order: Vec<usize>,
}

pub fn eta(space: &SnapshotSpace, sol: &MsSolution, cache: &GramCache, thresholds: &[f64]) -> Result<ResidualReport> {
    if thresholds.len() != space.n_faces() {
        return Err(GmsError::Dimension(format!(
            "{} thresholds for {} faces",
            thresholds.len(),
            space.n_faces()
        )));
    }
    let r = residual_vector(space, sol);
    let norms: Vec<f64> = (0..space.n_faces())
        .into_par_iter()
        .map(|i| dual_norm(&r[space.face_range(i)], cache.factor(i)))
        .collect();
    let eta2: Vec<f64> = norms
        .iter()
        .zip(thresholds)
        .map(|(n, &t)| if t.is_finite() { n * n / t } else { 0.0 })
        .collect();
    let mut order: Vec<usize> = (0..eta2.len()).collect();
    order.sort_by(|&a, &b| eta2[b].total_cmp(&eta2[a]).then(a.cmp(&b)));
    Ok(ResidualReport {
        flavor: cache.flavor,
        total: eta2.iter().sum(),
        norms,
        thresholds: thresholds.to_vec(),
        eta2,
        order,
    })
}

/// Coefficients of `R_Ω` on the snapshot columns of the faces of a region.
pub fn region_residual(space: &SnapshotSpace, sol: &MsSolution, faces: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let r = residual_vector(space, sol);
    let cols: Vec<usize> = faces.iter().flat_map(|&f| space.face_range(f)).collect();
    let vals = cols.iter().map(|&c| r[c]).collect();
    (cols, vals)
}

/// `sqrt(|K1||K2| / (|K1| + |K2|))`.
pub fn infsup_prefactor(grid: &Grid, face: usize) -> Result<f64> {
    let [a, b] = grid.coarse_face(face)?.blocks.map(|k| grid.block_area(k));
    Ok((a * b / (a + b)).sqrt())
}

/// Inf-sup constant for the span of `columns`, given in face `i`'s snapshot
/// coordinates: the prefactor times the smallest `L²(ω_i; κ⁻¹)` norm of a
/// function with unit net flux through `E_i`.
pub fn infsup_from_columns(grid: &Grid, space: &SnapshotSpace, face: usize, columns: &[Vec<f64>]) -> Result<f64> {
    let cf = grid.coarse_face(face)?;
    let gf = face_mass_gram(space, face);
    let measures: Vec<f64> = cf.fine_faces.iter().map(|&f| grid.fine_face(f).measure).collect();
    let k = columns.len();
    let flux: Vec<f64> = columns.iter().map(|c| dot(c, &measures)).collect();
    let scale = columns
        .iter()
        .map(|c| c.iter().zip(&measures).map(|(x, m)| (x * m).abs()).sum::<f64>())
        .fold(0.0f64, f64::max);
    if k == 0 || flux.iter().all(|g| g.abs() <= 1e-12 * scale) {
        log::warn!("face {face}: no multiscale column carries net flux, inf-sup constant is infinite");
        return Ok(f64::INFINITY);
    }
    let gc: Vec<Vec<f64>> = columns.iter().map(|c| mat_vec(gf.as_ref(), c)).collect();
    // [G g; g^T 0] [a; mu] = [0; 1]
    let kkt = Mat::from_fn(k + 1, k + 1, |i, j| match (i < k, j < k) {
        (true, true) => dot(&columns[i], &gc[j]),
        (true, false) => flux[i],
        (false, true) => flux[j],
        _ => 0.0,
    });
    let mut rhs = Mat::zeros(k + 1, 1);
    rhs[(k, 0)] = 1.0;
    let x = kkt.partial_piv_lu().solve(&rhs);
    // at the optimum a^T G a = -mu
    let min_sq = -x[(k, 0)];
    if !(min_sq.is_finite() && min_sq > 0.0) {
        return Err(GmsError::Degenerate {
            face,
            reason: format!("inf-sup minimization failed (value {min_sq:e})"),
        });
    }
    Ok(infsup_prefactor(grid, face)? * min_sq.sqrt())
}

/// Inf-sup constant of the multiscale columns supported on face `i`'s snapshots.
pub fn infsup_constant(grid: &Grid, space: &SnapshotSpace, ms: &MsSpace, face: usize) -> Result<f64> {
    let r = space.face_range(face);
    let columns: Vec<Vec<f64>> = ms
        .face_columns(space, face)
        .into_iter()
        .map(|c| {
            let mut v = vec![0.0; r.len()];
            for (&i, &x) in c.indices.iter().zip(&c.values) {
                v[i - r.start] = x;
            }
            v
        })
        .collect();
    infsup_from_columns(grid, space, face, &columns)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem_fine::FineSystem;
    use crate::fields::{corner_source, preset_field, FieldPreset};
    use crate::mesh::{build_grid, GridSpec};
    use crate::ms_solver::{solve_ms, MsSolution};
    use crate::spectral::{select_offline, solve_all};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Ctx {
        g: Grid,
        sys: FineSystem,
        s: SnapshotSpace,
    }

    fn ctx() -> Ctx {
        let g = build_grid(GridSpec::new(3, 3, 4)).unwrap();
        let k = preset_field(&g, FieldPreset::Inclusions, 1e3, 5).unwrap();
        let sys = FineSystem::assemble(&g, &k).unwrap();
        let s = SnapshotSpace::assemble(&g, &sys).unwrap();
        Ctx { g, sys, s }
    }

    fn solve(c: &Ctx, l: usize) -> (MsSpace, MsSolution, Vec<f64>) {
        let eig = solve_all(&c.g, &c.sys, &c.s, SpectralProblem::Sp1).unwrap();
        let sel = select_offline(&eig, &vec![l; c.g.n_coarse_faces()]).unwrap();
        let ms = MsSpace::offline(&c.s, &eig, &sel).unwrap();
        let sol = solve_ms(&ms, &c.s, &c.g, &corner_source(&c.g).unwrap()).unwrap();
        (ms, sol, sel.thresholds)
    }

    #[test]
    fn full_space_has_zero_residual() {
        let c = ctx();
        let (_, sol, th) = solve(&c, 4);
        let cache = GramCache::build(&c.g, &c.s, NormFlavor::Hdiv).unwrap();
        let rep = eta(&c.s, &sol, &cache, &th).unwrap();
        assert_eq!(rep.total, 0.0);
        let r = residual_vector(&c.s, &sol);
        let scale = c.s.mass().max_abs() * sol.snap_coeffs.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(r.iter().all(|x| x.abs() < 1e-10 * scale));
    }

    #[test]
    fn residual_is_linear_and_indicator_quadratic() {
        let c = ctx();
        let (_, sol, th) = solve(&c, 2);
        let doubled = MsSolution {
            coeffs: sol.coeffs.iter().map(|x| 2.0 * x).collect(),
            snap_coeffs: sol.snap_coeffs.iter().map(|x| 2.0 * x).collect(),
            pressure: sol.pressure.iter().map(|x| 2.0 * x).collect(),
        };
        let cache = GramCache::build(&c.g, &c.s, NormFlavor::L2).unwrap();
        let a = eta(&c.s, &sol, &cache, &th).unwrap();
        let b = eta(&c.s, &doubled, &cache, &th).unwrap();
        for i in 0..c.g.n_coarse_faces() {
            let r1 = residual_coeffs(&c.s, &sol, i);
            let r2 = residual_coeffs(&c.s, &doubled, i);
            for (x, y) in r1.iter().zip(&r2) {
                assert!((2.0 * x - y).abs() <= 1e-12 * y.abs().max(1e-300));
            }
            assert!((b.norms[i] - 2.0 * a.norms[i]).abs() <= 1e-10 * b.norms[i].max(1e-300));
            assert!((b.eta2[i] - 4.0 * a.eta2[i]).abs() <= 1e-10 * b.eta2[i].max(1e-300));
        }
        let mut sorted = a.eta2.clone();
        sorted.sort_by(|x, y| y.total_cmp(x));
        let permuted: Vec<f64> = a.order.iter().map(|&i| a.eta2[i]).collect();
        assert_eq!(sorted, permuted);
    }

    #[test]
    fn residual_matches_fine_quadrature() {
        let c = ctx();
        let (_, sol, _) = solve(&c, 2);
        let v = c.s.expand(&sol.snap_coeffs);
        let mv = c.sys.mass.matvec(&v);
        for face in [0usize, 5, 11] {
            let basis = c.s.face_basis(&c.g, face).unwrap();
            let r = residual_coeffs(&c.s, &sol, face);
            let blocks = c.g.coarse_face(face).unwrap().blocks;
            for j in 0..basis.n_cols() {
                let col = basis.column(j, c.g.n_fine_faces());
                let mass_term = dot(&col, &mv);
                let div_term: f64 = blocks
                    .iter()
                    .enumerate()
                    .map(|(k, &b)| basis.divergence[j][k] * c.g.block_area(b) * sol.pressure[b])
                    .sum();
                let expected = mass_term - div_term;
                assert!((r[j] - expected).abs() < 1e-10 * mass_term.abs().max(div_term.abs()).max(1e-300));
            }
        }
    }

    #[test]
    fn region_residual_of_one_neighborhood() {
        let c = ctx();
        let (_, sol, _) = solve(&c, 1);
        let (cols, r) = region_residual(&c.s, &sol, &[3]);
        assert_eq!(cols, c.s.face_range(3).collect::<Vec<_>>());
        assert_eq!(r, residual_coeffs(&c.s, &sol, 3));
        let (other, _) = region_residual(&c.s, &sol, &[9]);
        assert!(cols.iter().all(|x| !other.contains(x)));
    }

    #[test]
    fn dual_norm_identity_gram() {
        let id = Cholesky::new(Mat::<f64>::identity(3, 3).as_ref()).unwrap();
        assert!((dual_norm(&[3.0, 4.0, 0.0], &id) - 5.0).abs() < 1e-14);
        assert_eq!(dual_norm(&[0.0; 3], &id), 0.0);
    }

    #[test]
    fn dual_norm_is_a_supremum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 4;
        let a = Mat::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let g = Mat::from_fn(n, n, |i, j| (0..n).map(|k| a[(k, i)] * a[(k, j)]).sum::<f64>() + if i == j { 0.5 } else { 0.0 });
        let chol = Cholesky::new(g.as_ref()).unwrap();
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let exact = dual_norm(&r, &chol);
        let mut best = 0.0f64;
        for _ in 0..100_000 {
            let c: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let nrm = dot(&c, &mat_vec(g.as_ref(), &c)).sqrt();
            best = best.max(dot(&r, &c).abs() / nrm);
        }
        assert!(best <= exact * (1.0 + 1e-12));
        assert!(best >= 0.99 * exact);
    }

    #[test]
    fn infsup_prefactor_and_single_column() {
        let c = ctx();
        let h = c.g.coarse_hx();
        assert!((infsup_prefactor(&c.g, 0).unwrap() - h / 2f64.sqrt()).abs() < 1e-15);
        let col = vec![0.5, -1.0, 2.0, 0.25];
        let cf = c.g.coarse_face(2).unwrap();
        let flux: f64 = col.iter().zip(&cf.fine_faces).map(|(x, &f)| x * c.g.fine_face(f).measure).sum();
        let gram = face_mass_gram(&c.s, 2);
        let norm = dot(&col, &mat_vec(gram.as_ref(), &col)).sqrt();
        let got = infsup_from_columns(&c.g, &c.s, 2, &[col]).unwrap();
        let expected = infsup_prefactor(&c.g, 2).unwrap() * norm / flux.abs();
        assert!((got - expected).abs() < 1e-12 * expected);
        let divfree = vec![1.0, -1.0, 0.0, 0.0];
        assert_eq!(infsup_from_columns(&c.g, &c.s, 2, &[divfree]).unwrap(), f64::INFINITY);
    }
}
