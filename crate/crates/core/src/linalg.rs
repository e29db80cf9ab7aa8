//! Sparse matrices, bordered saddle-point solves and small dense kernels.

use faer::linalg::solvers::Solve;
use faer::sparse::{SparseColMat, Triplet};
use faer::{Mat, MatRef};

use crate::error::{GmsError, Result};

const ABS_FLOOR: f64 = 1e-14;

/// Compressed sparse row matrix with sorted, unique column indices per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMat {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMat {
    /// Build from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut counts = vec![0usize; nrows + 1];
        for &(r, c, _) in triplets {
            if r >= nrows {
                return Err(GmsError::OutOfRange { index: r, len: nrows });
            }
            if c >= ncols {
                return Err(GmsError::OutOfRange { index: c, len: ncols });
            }
            counts[r + 1] += 1;
        }
        for i in 0..nrows {
            counts[i + 1] += counts[i];
        }
        let mut next = counts.clone();
        let mut cols = vec![0usize; triplets.len()];
        let mut vals = vec![0.0; triplets.len()];
        for &(r, c, v) in triplets {
            cols[next[r]] = c;
            vals[next[r]] = v;
            next[r] += 1;
        }
        let mut indptr = Vec::with_capacity(nrows + 1);
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        indptr.push(0);
        let mut row: Vec<(usize, f64)> = Vec::new();
        for r in 0..nrows {
            row.clear();
            row.extend((counts[r]..counts[r + 1]).map(|k| (cols[k], vals[k])));
            row.sort_unstable_by_key(|e| e.0);
            for &(c, v) in &row {
                if indices.len() > indptr[r] && *indices.last().unwrap() == c {
                    *values.last_mut().unwrap() += v;
                } else {
                    indices.push(c);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        Ok(Self {
            nrows,
            ncols,
            indptr,
            indices,
            values,
        })
    }

    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            indptr: vec![0; nrows + 1],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            nrows: n,
            ncols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn from_dense(a: MatRef<'_, f64>) -> Self {
        let mut t = Vec::new();
        for i in 0..a.nrows() {
            for j in 0..a.ncols() {
                if a[(i, j)] != 0.0 {
                    t.push((i, j, a[(i, j)]));
                }
            }
        }
        Self::from_triplets(a.nrows(), a.ncols(), &t).expect("indices in range")
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Column indices and values of row `r`.
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.indptr[r], self.indptr[r + 1]);
        (&self.indices[a..b], &self.values[a..b])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (cols, vals) = self.row(r);
        cols.binary_search(&c).map(|k| vals[k]).unwrap_or(0.0)
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.nrows).flat_map(move |r| {
            let (cols, vals) = self.row(r);
            cols.iter().zip(vals).map(move |(&c, &v)| (r, c, v))
        })
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols, "matvec dimension");
        (0..self.nrows)
            .map(|r| {
                let (cols, vals) = self.row(r);
                cols.iter().zip(vals).map(|(&c, &v)| v * x[c]).sum()
            })
            .collect()
    }

    /// `self^T x`.
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.nrows, "matvec_t dimension");
        let mut y = vec![0.0; self.ncols];
        for r in 0..self.nrows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                y[c] += v * x[r];
            }
        }
        y
    }

    pub fn transpose(&self) -> Self {
        let mut counts = vec![0usize; self.ncols + 1];
        for &c in &self.indices {
            counts[c + 1] += 1;
        }
        for i in 0..self.ncols {
            counts[i + 1] += counts[i];
        }
        let mut next = counts.clone();
        let mut indices = vec![0; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for r in 0..self.nrows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                indices[next[c]] = r;
                values[next[c]] = v;
                next[c] += 1;
            }
        }
        Self {
            nrows: self.ncols,
            ncols: self.nrows,
            indptr: counts,
            indices,
            values,
        }
    }

    pub fn matmul(&self, other: &SparseMat) -> Result<Self> {
        if self.ncols != other.nrows {
            return Err(GmsError::Dimension(format!(
                "cannot multiply {}x{} by {}x{}",
                self.nrows, self.ncols, other.nrows, other.ncols
            )));
        }
        let mut acc = vec![0.0; other.ncols];
        let mut mark = vec![usize::MAX; other.ncols];
        let mut touched = Vec::new();
        let mut indptr = Vec::with_capacity(self.nrows + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for r in 0..self.nrows {
            touched.clear();
            let (cols, vals) = self.row(r);
            for (&k, &a) in cols.iter().zip(vals) {
                let (ocols, ovals) = other.row(k);
                for (&c, &b) in ocols.iter().zip(ovals) {
                    if mark[c] != r {
                        mark[c] = r;
                        acc[c] = 0.0;
                        touched.push(c);
                    }
                    acc[c] += a * b;
                }
            }
            touched.sort_unstable();
            for &c in &touched {
                indices.push(c);
                values.push(acc[c]);
            }
            indptr.push(indices.len());
        }
        Ok(Self {
            nrows: self.nrows,
            ncols: other.ncols,
            indptr,
            indices,
            values,
        })
    }

    /// Rows `rows` and columns `cols` (in the given order).
    pub fn submatrix(&self, rows: &[usize], cols: &[usize]) -> Self {
        let mut map = vec![usize::MAX; self.ncols];
        for (k, &c) in cols.iter().enumerate() {
            map[c] = k;
        }
        let mut t = Vec::new();
        for (i, &r) in rows.iter().enumerate() {
            let (rc, rv) = self.row(r);
            for (&c, &v) in rc.iter().zip(rv) {
                if map[c] != usize::MAX {
                    t.push((i, map[c], v));
                }
            }
        }
        Self::from_triplets(rows.len(), cols.len(), &t).expect("indices in range")
    }

    pub fn to_dense(&self) -> Mat<f64> {
        let mut a = Mat::zeros(self.nrows, self.ncols);
        for (r, c, v) in self.triplets() {
            a[(r, c)] = v;
        }
        a
    }

    pub fn is_symmetric(&self, rel_tol: f64) -> bool {
        if self.nrows != self.ncols {
            return false;
        }
        let tol = rel_tol * self.max_abs().max(ABS_FLOOR);
        self.triplets().all(|(r, c, v)| (v - self.get(c, r)).abs() <= tol)
    }

    /// `x^T A x`.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        dot(x, &self.matvec(x))
    }

    fn faer_triplets(&self, row_off: usize, col_off: usize, out: &mut Vec<Triplet<usize, usize, f64>>) {
        out.extend(self.triplets().map(|(r, c, v)| Triplet::new(r + row_off, c + col_off, v)));
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// How the pressure nullspace of a saddle system is removed.
#[derive(Debug, Clone, PartialEq)]
pub enum PressureFix {
    /// Weighted mean zero, `w^T p = 0`.
    MeanZero(Vec<f64>),
    /// First pressure unknown set to zero.
    PinFirst,
    /// No constraint; `B^T` must have trivial kernel.
    None,
}

/// Factorization of `[M B^T; B 0]` with the pressure fix appended as a border.
pub struct SaddleFactor {
    m: SparseMat,
    b: SparseMat,
    bt: SparseMat,
    border: Option<Vec<f64>>,
    constant_kernel: bool,
    lu: faer::sparse::linalg::solvers::Lu<usize, f64>,
}

impl std::fmt::Debug for SaddleFactor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SaddleFactor")
            .field("nv", &self.nv())
            .field("np", &self.np())
            .field("bordered", &self.border.is_some())
            .finish()
    }
}

impl SaddleFactor {
    pub fn new(m: &SparseMat, b: &SparseMat, fix: PressureFix) -> Result<Self> {
        let (nv, np) = (m.nrows(), b.nrows());
        if m.ncols() != nv || b.ncols() != nv {
            return Err(GmsError::Dimension(format!(
                "saddle blocks M {}x{}, B {}x{}",
                m.nrows(),
                m.ncols(),
                b.nrows(),
                b.ncols()
            )));
        }
        let border = match fix {
            PressureFix::MeanZero(w) => {
                if w.len() != np {
                    return Err(GmsError::Dimension(format!(
                        "{} pressure weights for {np} pressures",
                        w.len()
                    )));
                }
                Some(w)
            }
            PressureFix::PinFirst if np > 0 => {
                let mut w = vec![0.0; np];
                w[0] = 1.0;
                Some(w)
            }
            _ => None,
        };
        let bt = b.transpose();
        let ones = vec![1.0; np];
        let kernel_defect = b.matvec_t(&ones).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let constant_kernel = np > 0 && kernel_defect <= 1e-10 * b.max_abs().max(ABS_FLOOR);

        let n = nv + np + usize::from(border.is_some());
        let mut t = Vec::with_capacity(m.nnz() + 2 * b.nnz() + 2 * np);
        m.faer_triplets(0, 0, &mut t);
        b.faer_triplets(nv, 0, &mut t);
        bt.faer_triplets(0, nv, &mut t);
        if let Some(w) = &border {
            for (k, &wk) in w.iter().enumerate() {
                if wk != 0.0 {
                    t.push(Triplet::new(nv + k, nv + np, wk));
                    t.push(Triplet::new(nv + np, nv + k, wk));
                }
            }
        }
        let full = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &t)
            .map_err(|e| GmsError::Singular(format!("assembling saddle matrix: {e:?}")))?;
        let lu = full
            .sp_lu()
            .map_err(|e| GmsError::Singular(format!("saddle factorization failed: {e:?}")))?;
        Ok(Self {
            m: m.clone(),
            b: b.clone(),
            bt,
            border,
            constant_kernel,
            lu,
        })
    }

    pub fn nv(&self) -> usize {
        self.m.nrows()
    }

    pub fn np(&self) -> usize {
        self.b.nrows()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let (nv, np) = (self.nv(), self.np());
        let (v, rest) = x.split_at(nv);
        let (p, mu) = rest.split_at(np);
        let mut top = self.m.matvec(v);
        for (t, s) in top.iter_mut().zip(self.bt.matvec(p)) {
            *t += s;
        }
        let mut mid = self.b.matvec(v);
        let mut out = top;
        if let Some(w) = &self.border {
            for (m, wk) in mid.iter_mut().zip(w) {
                *m += wk * mu[0];
            }
            out.append(&mut mid);
            out.push(dot(w, p));
        } else {
            out.append(&mut mid);
        }
        out
    }

    fn raw_solve(&self, rhs: &[f64]) -> Vec<f64> {
        let mut x = Mat::from_fn(rhs.len(), 1, |i, _| rhs[i]);
        self.lu.solve_in_place(x.as_mut());
        (0..rhs.len()).map(|i| x[(i, 0)]).collect()
    }

    /// Solve `M v + B^T p = rhs_v`, `B v = rhs_p`.
    pub fn solve(&self, rhs_v: &[f64], rhs_p: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (nv, np) = (self.nv(), self.np());
        if rhs_v.len() != nv || rhs_p.len() != np {
            return Err(GmsError::Dimension(format!(
                "saddle rhs lengths {}/{} for system {nv}/{np}",
                rhs_v.len(),
                rhs_p.len()
            )));
        }
        if self.constant_kernel {
            let sum: f64 = rhs_p.iter().sum();
            let scale: f64 = rhs_p.iter().map(|v| v.abs()).sum::<f64>();
            let bv = self.b.max_abs() * norm2(rhs_v);
            if sum.abs() > 1e-10 * scale.max(bv).max(ABS_FLOOR) {
                return Err(GmsError::Incompatible(format!(
                    "pressure right-hand side sums to {sum:e}, must vanish"
                )));
            }
        }
        let mut rhs = Vec::with_capacity(nv + np + 1);
        rhs.extend_from_slice(rhs_v);
        rhs.extend_from_slice(rhs_p);
        if self.border.is_some() {
            rhs.push(0.0);
        }
        let mut x = self.raw_solve(&rhs);
        // one step of iterative refinement
        let ax = self.apply(&x);
        let res: Vec<f64> = rhs.iter().zip(&ax).map(|(r, a)| r - a).collect();
        let dx = self.raw_solve(&res);
        for (xi, d) in x.iter_mut().zip(&dx) {
            *xi += d;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(GmsError::Singular("saddle solve produced non-finite values".into()));
        }
        let ax = self.apply(&x);
        let res = norm2(&rhs.iter().zip(&ax).map(|(r, a)| r - a).collect::<Vec<_>>());
        let scale = norm2(&rhs).max(ABS_FLOOR);
        if res > 1e-6 * scale {
            return Err(GmsError::Singular(format!(
                "saddle system is singular beyond its pressure nullspace (residual {:e})",
                res / scale
            )));
        }
        let p = x[nv..nv + np].to_vec();
        x.truncate(nv);
        Ok((x, p))
    }
}

pub fn solve_saddle(
    m: &SparseMat,
    b: &SparseMat,
    rhs_v: &[f64],
    rhs_p: &[f64],
    fix: PressureFix,
) -> Result<(Vec<f64>, Vec<f64>)> {
    SaddleFactor::new(m, b, fix)?.solve(rhs_v, rhs_p)
}

/// Relative residuals `(|M v + B^T p - f| / |f|, |B v - g| / |g|)`, each with
/// the norm of the corresponding operator terms as fallback scale.
pub fn saddle_residual(
    m: &SparseMat,
    b: &SparseMat,
    v: &[f64],
    p: &[f64],
    rhs_v: &[f64],
    rhs_p: &[f64],
) -> (f64, f64) {
    let mv = m.matvec(v);
    let btp = b.matvec_t(p);
    let r1: Vec<f64> = (0..v.len()).map(|i| mv[i] + btp[i] - rhs_v[i]).collect();
    let bv = b.matvec(v);
    let r2: Vec<f64> = (0..p.len()).map(|i| bv[i] - rhs_p[i]).collect();
    let s1 = norm2(rhs_v).max(norm2(&mv)).max(norm2(&btp)).max(ABS_FLOOR);
    let s2 = norm2(rhs_p).max(norm2(&bv)).max(ABS_FLOOR);
    (norm2(&r1) / s1, norm2(&r2) / s2)
}

/// Dense Cholesky factor of an SPD matrix.
pub struct Cholesky {
    llt: faer::linalg::solvers::Llt<f64>,
    n: usize,
}

impl Cholesky {
    pub fn new(a: MatRef<'_, f64>) -> Result<Self> {
        let llt = a
            .llt(faer::Side::Lower)
            .map_err(|e| GmsError::Singular(format!("matrix is not positive definite: {e:?}")))?;
        Ok(Self { llt, n: a.nrows() })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let rhs = Mat::from_fn(self.n, 1, |i, _| b[i]);
        let x = self.llt.solve(&rhs);
        (0..self.n).map(|i| x[(i, 0)]).collect()
    }

    pub fn solve_mat(&self, b: MatRef<'_, f64>) -> Mat<f64> {
        self.llt.solve(b)
    }

    /// `b^T A^{-1} b`.
    pub fn inv_quad(&self, b: &[f64]) -> f64 {
        dot(b, &self.solve(b))
    }

    pub fn l(&self) -> MatRef<'_, f64> {
        self.llt.L()
    }
}

/// Eigenpairs of a symmetric-definite pencil `(A, S)`, ascending.
#[derive(Debug, Clone)]
pub struct EigPairs {
    pub values: Vec<f64>,
    /// Columns are eigenvectors normalized so that `V^T S V = I`.
    pub vectors: Mat<f64>,
}

/// Solve `A v = lambda S v` by Cholesky reduction.
pub fn sym_geig(a: MatRef<'_, f64>, s: MatRef<'_, f64>) -> Result<EigPairs> {
    let n = a.nrows();
    if a.ncols() != n || s.nrows() != n || s.ncols() != n {
        return Err(GmsError::Dimension(format!(
            "pencil shapes {}x{} and {}x{}",
            a.nrows(),
            a.ncols(),
            s.nrows(),
            s.ncols()
        )));
    }
    if n == 0 {
        return Ok(EigPairs {
            values: Vec::new(),
            vectors: Mat::zeros(0, 0),
        });
    }
    let s_sym = Mat::from_fn(n, n, |i, j| 0.5 * (s[(i, j)] + s[(j, i)]));
    let chol = Cholesky::new(s_sym.as_ref())?;
    let l = chol.l();
    // C = L^{-1} A L^{-T}
    let mut x = Mat::from_fn(n, n, |i, j| 0.5 * (a[(i, j)] + a[(j, i)]));
    faer::linalg::triangular_solve::solve_lower_triangular_in_place(l, x.as_mut(), faer::Par::Seq);
    let mut c = x.transpose().to_owned();
    faer::linalg::triangular_solve::solve_lower_triangular_in_place(l, c.as_mut(), faer::Par::Seq);
    let c = Mat::from_fn(n, n, |i, j| 0.5 * (c[(i, j)] + c[(j, i)]));
    let evd = c
        .self_adjoint_eigen(faer::Side::Lower)
        .map_err(|e| GmsError::Singular(format!("symmetric eigensolver failed: {e:?}")))?;
    let values: Vec<f64> = (0..n).map(|i| evd.S().column_vector()[i]).collect();
    // V = L^{-T} U
    let mut v = evd.U().to_owned();
    faer::linalg::triangular_solve::solve_upper_triangular_in_place(l.transpose(), v.as_mut(), faer::Par::Seq);
    Ok(EigPairs { values, vectors: v })
}

/// Dense `A^T B A`.
pub fn congruence(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> Mat<f64> {
    let ba = b * a;
    a.transpose() * ba
}

pub fn mat_vec(a: MatRef<'_, f64>, x: &[f64]) -> Vec<f64> {
    (0..a.nrows())
        .map(|i| (0..a.ncols()).map(|j| a[(i, j)] * x[j]).sum())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> Mat<f64> {
        let g = Mat::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let mut a = g.transpose() * &g;
        for i in 0..n {
            a[(i, i)] += n as f64 * 0.1;
        }
        a
    }

    #[test]
    fn triplets_sum_duplicates() {
        let a = SparseMat::from_triplets(2, 3, &[(0, 1, 1.0), (0, 1, 2.0), (1, 0, 4.0), (0, 0, -1.0)]).unwrap();
        assert_eq!(a.nnz(), 3);
        assert_eq!(a.get(0, 1), 3.0);
        assert_eq!(a.row(0).0, &[0, 1]);
        assert!(SparseMat::from_triplets(2, 2, &[(2, 0, 1.0)]).is_err());
    }

    #[test]
    fn products_match_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t1 = Vec::new();
        let mut t2 = Vec::new();
        for _ in 0..40 {
            t1.push((rng.random_range(0..7), rng.random_range(0..5), rng.random_range(-1.0..1.0)));
            t2.push((rng.random_range(0..5), rng.random_range(0..6), rng.random_range(-1.0..1.0)));
        }
        let a = SparseMat::from_triplets(7, 5, &t1).unwrap();
        let b = SparseMat::from_triplets(5, 6, &t2).unwrap();
        let ab = a.matmul(&b).unwrap().to_dense();
        let dense = a.to_dense() * b.to_dense();
        for i in 0..7 {
            for j in 0..6 {
                assert!((ab[(i, j)] - dense[(i, j)]).abs() < 1e-14);
            }
        }
        assert_eq!(a.transpose().transpose(), a);
        let x: Vec<f64> = (0..5).map(|i| i as f64 - 2.0).collect();
        let y: Vec<f64> = (0..7).map(|i| 0.5 * i as f64).collect();
        assert!((dot(&a.matvec(&x), &y) - dot(&x, &a.matvec_t(&y))).abs() < 1e-12);
        let sub = a.submatrix(&[3, 1], &[4, 0]);
        assert_eq!(sub.get(0, 0), a.get(3, 4));
        assert_eq!(sub.get(1, 1), a.get(1, 0));
    }

    #[test]
    fn unconstrained_spd() {
        let m = SparseMat::identity(3);
        let b = SparseMat::zeros(0, 3);
        let (v, p) = solve_saddle(&m, &b, &[1.0, 2.0, 3.0], &[], PressureFix::None).unwrap();
        assert_eq!(p.len(), 0);
        for (a, e) in v.iter().zip([1.0, 2.0, 3.0]) {
            assert!((a - e).abs() < 1e-14);
        }
    }

    #[test]
    fn constant_nullspace_mean_zero() {
        // one flux between two cells
        let m = SparseMat::from_triplets(1, 1, &[(0, 0, 2.0)]).unwrap();
        let b = SparseMat::from_triplets(2, 1, &[(0, 0, 1.0), (1, 0, -1.0)]).unwrap();
        let (v, p) = solve_saddle(&m, &b, &[0.0], &[0.5, -0.5], PressureFix::MeanZero(vec![1.0, 1.0])).unwrap();
        assert!((v[0] - 0.5).abs() < 1e-14);
        assert!((p[0] + p[1]).abs() < 1e-14);
        // M v + B^T p = 0 -> p0 - p1 = -1
        assert!((p[0] - p[1] + 1.0).abs() < 1e-14);

        let (_, p) = solve_saddle(&m, &b, &[0.0], &[0.5, -0.5], PressureFix::PinFirst).unwrap();
        assert!(p[0].abs() < 1e-14);

        let err = solve_saddle(&m, &b, &[0.0], &[0.5, 0.5], PressureFix::MeanZero(vec![1.0, 1.0]));
        assert!(matches!(err, Err(GmsError::Incompatible(_))));
        assert!(solve_saddle(&m, &b, &[0.0], &[0.5, -0.5], PressureFix::None).is_err());
    }

    #[test]
    fn manufactured_random_saddle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (nv, np) = (50, 12);
        let m = SparseMat::from_dense(random_spd(nv, &mut rng).as_ref());
        let bd = Mat::from_fn(np, nv, |_, _| rng.random_range(-1.0..1.0));
        let b = SparseMat::from_dense(bd.as_ref());
        let v_star: Vec<f64> = (0..nv).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p_star: Vec<f64> = (0..np).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut f = m.matvec(&v_star);
        for (fi, bi) in f.iter_mut().zip(b.matvec_t(&p_star)) {
            *fi += bi;
        }
        let g = b.matvec(&v_star);
        let (v, p) = solve_saddle(&m, &b, &f, &g, PressureFix::None).unwrap();
        for (a, e) in v.iter().zip(&v_star).chain(p.iter().zip(&p_star)) {
            assert!((a - e).abs() < 1e-8);
        }
        let (r1, r2) = saddle_residual(&m, &b, &v, &p, &f, &g);
        assert!(r1 < 1e-10 && r2 < 1e-10);
    }

    #[test]
    fn geig_small_cases() {
        let e = sym_geig(Mat::from_fn(1, 1, |_, _| 2.0).as_ref(), Mat::<f64>::identity(1, 1).as_ref()).unwrap();
        assert!((e.values[0] - 2.0).abs() < 1e-14);

        let a = Mat::from_fn(2, 2, |i, j| if i == j { 2.0 } else { 1.0 });
        let e = sym_geig(a.as_ref(), Mat::<f64>::identity(2, 2).as_ref()).unwrap();
        assert!((e.values[0] - 1.0).abs() < 1e-14 && (e.values[1] - 3.0).abs() < 1e-14);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_spd(6, &mut rng);
        let e = sym_geig(s.as_ref(), s.as_ref()).unwrap();
        assert!(e.values.iter().all(|l| (l - 1.0).abs() < 1e-12));

        let bad = Mat::from_fn(2, 2, |i, j| if i == j { -1.0 } else { 0.0 });
        assert!(sym_geig(a.as_ref(), bad.as_ref()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn geig_contract(n in 1usize..64, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_spd(n, &mut rng);
            let g = Mat::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let a = Mat::from_fn(n, n, |i, j| g[(i, j)] + g[(j, i)]);
            let e = sym_geig(a.as_ref(), s.as_ref()).unwrap();
            prop_assert!(e.values.windows(2).all(|w| w[0] <= w[1]));
            let v = &e.vectors;
            let vsv = v.transpose() * &s * v;
            let av = &a * v;
            let sv = &s * v;
            let anorm = (0..n).map(|i| (0..n).map(|j| a[(i, j)].abs()).sum::<f64>()).fold(0.0, f64::max);
            for i in 0..n {
                for j in 0..n {
                    let id = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((vsv[(i, j)] - id).abs() < 1e-10);
                    prop_assert!((av[(i, j)] - sv[(i, j)] * e.values[j]).abs() <= 1e-9 * anorm.max(1.0));
                }
            }
            // trace identity
            let sia = Cholesky::new(s.as_ref()).unwrap().solve_mat(a.as_ref());
            let tr: f64 = (0..n).map(|i| sia[(i, i)]).sum();
            let sum: f64 = e.values.iter().sum();
            let scale = e.values.iter().map(|l| l.abs()).sum::<f64>().max(1e-300);
            prop_assert!((tr - sum).abs() <= 1e-8 * scale);
        }
    }
}
