//! Multiscale velocity spaces and the coarse mixed solve.
//!
//! Multiscale columns are sparse vectors in snapshot coordinates. The coarse
//! system is the congruence transform of the snapshot mass and divergence
//! operators with the column matrix.

use crate::error::{GmsError, Result};
use crate::fields::SourceField;
use crate::linalg::SparseMat;
use crate::mesh::Grid;
use crate::snapshot::{solve_coarse, CoarseSolution, SnapshotSpace};
use crate::spectral::{FaceEigen, MsBasisSelection};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnKind {
    /// Eigenfunction `index` (0-based) of a face's spectral problem.
    Offline { face: usize, index: usize },
    /// First snapshot column of a face, added when all selected eigenfunctions
    /// are divergence free.
    Artificial { face: usize },
    /// Residual representer on a region.
    Online { level: usize, region: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MsColumn {
    pub kind: ColumnKind,
    /// Sorted snapshot indices.
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl MsColumn {
    pub fn from_dense(kind: ColumnKind, offset: usize, values: &[f64]) -> Self {
        Self {
            kind,
            indices: (offset..offset + values.len()).collect(),
            values: values.to_vec(),
        }
    }

    pub fn to_dense(&self, dim: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        for (&i, &x) in self.indices.iter().zip(&self.values) {
            v[i] = x;
        }
        v
    }
}

/// Block-integrated divergence of a column relative to its size.
fn relative_divergence(space: &SnapshotSpace, col: &MsColumn) -> f64 {
    let x = col.to_dense(space.dim());
    let div = space.div();
    let mut d2 = 0.0;
    let mut scale = 0.0;
    for b in 0..div.nrows() {
        let (cols, vals) = div.row(b);
        let mut d = 0.0;
        for (&i, &w) in cols.iter().zip(vals) {
            d += w * x[i];
            scale += (w * x[i]).abs();
        }
        d2 += d * d;
    }
    if scale == 0.0 {
        0.0
    } else {
        d2.sqrt() / scale
    }
}

#[derive(Debug, Clone)]
pub struct MsSpace {
    columns: Vec<MsColumn>,
    snap_dim: usize,
}

impl MsSpace {
    pub fn empty(space: &SnapshotSpace) -> Self {
        Self {
            columns: Vec::new(),
            snap_dim: space.dim(),
        }
    }

    /// Offline space from the first `sel.counts[i]` eigenfunctions of every
    /// face, with the artificial column added where needed.
    pub fn offline(space: &SnapshotSpace, eigen: &[FaceEigen], sel: &MsBasisSelection) -> Result<Self> {
        let mut ms = Self::empty(space);
        for (e, &l) in eigen.iter().zip(&sel.counts) {
            let offset = space.face_range(e.face).start;
            let mut has_flux = false;
            for k in 0..l {
                let col = MsColumn::from_dense(ColumnKind::Offline { face: e.face, index: k }, offset, &e.vector(k));
                has_flux |= relative_divergence(space, &col) > 1e-10;
                ms.columns.push(col);
            }
            if !has_flux {
                log::info!("face {}: selected eigenfunctions are divergence free, adding the first snapshot", e.face);
                let mut unit = vec![0.0; space.face_len(e.face)];
                unit[0] = 1.0;
                let col = MsColumn::from_dense(ColumnKind::Artificial { face: e.face }, offset, &unit);
                if relative_divergence(space, &col) <= 1e-10 {
                    return Err(GmsError::Degenerate {
                        face: e.face,
                        reason: "no column with nonzero divergence available".into(),
                    });
                }
                ms.columns.push(col);
            }
        }
        Ok(ms)
    }

    /// Append a divergence-free column.
    pub fn push_online(&mut self, space: &SnapshotSpace, col: MsColumn) -> Result<()> {
        let rel = relative_divergence(space, &col);
        if rel > 1e-10 {
            return Err(GmsError::Domain(format!(
                "online column has relative divergence {rel:e}, must be divergence free"
            )));
        }
        self.columns.push(col);
        Ok(())
    }

    pub fn columns(&self) -> &[MsColumn] {
        &self.columns
    }

    pub fn dof(&self) -> usize {
        self.columns.len()
    }

    pub fn snap_dim(&self) -> usize {
        self.snap_dim
    }

    pub fn n_online(&self) -> usize {
        self.columns
            .iter()
            .filter(|c| matches!(c.kind, ColumnKind::Online { .. }))
            .count()
    }

    /// `snap_dim x dof` expansion matrix.
    pub fn expansion(&self) -> SparseMat {
        let mut t = Vec::new();
        for (j, col) in self.columns.iter().enumerate() {
            for (&i, &x) in col.indices.iter().zip(&col.values) {
                t.push((i, j, x));
            }
        }
        SparseMat::from_triplets(self.snap_dim, self.columns.len(), &t).expect("column indices in range")
    }

    /// Columns whose support lies in the snapshot space of one face.
    pub fn face_columns(&self, space: &SnapshotSpace, face: usize) -> Vec<&MsColumn> {
        let r = space.face_range(face);
        self.columns
            .iter()
            .filter(|c| c.indices.iter().all(|i| r.contains(i)) && !c.indices.is_empty())
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct MsSolution {
    /// Coefficients over the multiscale columns.
    pub coeffs: Vec<f64>,
    /// The same velocity in snapshot coordinates.
    pub snap_coeffs: Vec<f64>,
    /// Block pressures with zero area-weighted mean.
    pub pressure: Vec<f64>,
}

pub fn solve_ms(ms: &MsSpace, space: &SnapshotSpace, grid: &Grid, f: &SourceField) -> Result<MsSolution> {
    if ms.snap_dim() != space.dim() {
        return Err(GmsError::Dimension("multiscale space built for another snapshot space".into()));
    }
    let c = ms.expansion();
    let mc = space.mass().matmul(&c)?;
    let a = c.transpose().matmul(&mc)?;
    let b = space.div().matmul(&c)?;
    let CoarseSolution { coeffs, pressure } = solve_coarse(&a, &b, grid, f).map_err(|e| match e {
        GmsError::Singular(s) => GmsError::Singular(format!("coarse multiscale system: {s}")),
        other => other,
    })?;
    let snap_coeffs = c.matvec(&coeffs);
    Ok(MsSolution {
        coeffs,
        snap_coeffs,
        pressure,
    })
}

/// Relative `L²(κ⁻¹)` distance between a multiscale and the snapshot solution.
pub fn snapshot_error(space: &SnapshotSpace, ms: &MsSolution, reference: &CoarseSolution) -> Result<f64> {
    let (num, den) = error_parts(space, ms, reference)?;
    Ok(if den == 0.0 { num.sqrt() } else { (num / den).sqrt() })
}

/// `(‖v_snap − v_ms‖², ‖v_snap‖²)`.
pub fn error_parts(space: &SnapshotSpace, ms: &MsSolution, reference: &CoarseSolution) -> Result<(f64, f64)> {
    if ms.snap_coeffs.len() != reference.coeffs.len() {
        return Err(GmsError::Dimension("solutions live in different snapshot spaces".into()));
    }
    let d: Vec<f64> = ms.snap_coeffs.iter().zip(&reference.coeffs).map(|(a, b)| a - b).collect();
    Ok((space.l2_sq(&d).max(0.0), space.l2_sq(&reference.coeffs)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem_fine::FineSystem;
    use crate::fields::{corner_source, preset_field, FieldPreset};
    use crate::linalg::dot;
    use crate::mesh::{build_grid, GridSpec};
    use crate::snapshot::solve_snapshot_reference;
    use crate::spectral::{select_offline, solve_all, SpectralProblem};

    struct Ctx {
        g: Grid,
        s: SnapshotSpace,
        eig: Vec<FaceEigen>,
        f: SourceField,
        reference: CoarseSolution,
    }

    fn ctx(contrast: f64) -> Ctx {
        let g = build_grid(GridSpec::new(3, 3, 4)).unwrap();
        let k = preset_field(&g, FieldPreset::Inclusions, contrast, 2).unwrap();
        let sys = FineSystem::assemble(&g, &k).unwrap();
        let s = SnapshotSpace::assemble(&g, &sys).unwrap();
        let eig = solve_all(&g, &sys, &s, SpectralProblem::Sp1).unwrap();
        let f = corner_source(&g).unwrap();
        let reference = solve_snapshot_reference(&s, &g, &f).unwrap();
        Ctx { g, s, eig, f, reference }
    }

    fn solve_uniform(c: &Ctx, l: usize) -> (MsSpace, MsSolution) {
        let sel = select_offline(&c.eig, &vec![l; c.g.n_coarse_faces()]).unwrap();
        let ms = MsSpace::offline(&c.s, &c.eig, &sel).unwrap();
        let sol = solve_ms(&ms, &c.s, &c.g, &c.f).unwrap();
        (ms, sol)
    }

    #[test]
    fn full_selection_reproduces_snapshot_solution() {
        let c = ctx(1e4);
        let (ms, sol) = solve_uniform(&c, 4);
        assert!(ms.dof() >= c.s.dim());
        assert!(snapshot_error(&c.s, &sol, &c.reference).unwrap() < 1e-10);
    }

    #[test]
    fn errors_decrease_with_uniform_l_and_divergence_matches() {
        let c = ctx(1e4);
        let mut prev = f64::INFINITY;
        for l in 1..=4 {
            let (ms, sol) = solve_uniform(&c, l);
            assert!(ms.dof() >= l * c.g.n_coarse_faces());
            let e = snapshot_error(&c.s, &sol, &c.reference).unwrap();
            assert!(e <= prev * (1.0 + 1e-9), "l={l}: {e} > {prev}");
            prev = e;
            let d = c.s.div().matvec(&sol.snap_coeffs);
            for (a, b) in d.iter().zip(c.f.integrated(&c.g)) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn galerkin_orthogonality_on_divergence_free_columns() {
        let c = ctx(1e2);
        let (ms, sol) = solve_uniform(&c, 2);
        let d: Vec<f64> = c.reference.coeffs.iter().zip(&sol.snap_coeffs).map(|(a, b)| a - b).collect();
        let md = c.s.mass().matvec(&d);
        // a divergence-free combination of two columns on the same face
        let cols = ms.columns();
        let bt = c.s.div();
        let flux = |col: &MsColumn| -> f64 {
            let b = c.g.coarse_face(0).unwrap().blocks[0];
            col.indices.iter().zip(&col.values).map(|(&i, &x)| bt.get(b, i) * x).sum()
        };
        let (a, b) = (&cols[0], &cols[1]);
        let (fa, fb) = (flux(a), flux(b));
        let mut w = a.to_dense(c.s.dim());
        for (wi, bi) in w.iter_mut().zip(b.to_dense(c.s.dim())) {
            *wi = fb * *wi - fa * bi;
        }
        assert!(bt.matvec(&w).iter().all(|x| x.abs() < 1e-12));
        let ip = dot(&w, &md);
        let scale = c.s.l2_sq(&w).sqrt() * c.s.l2_sq(&d).sqrt();
        assert!(ip.abs() < 1e-10 * scale.max(1e-300));
    }

    #[test]
    fn zero_source_and_determinism() {
        let c = ctx(10.0);
        let sel = select_offline(&c.eig, &vec![2; c.g.n_coarse_faces()]).unwrap();
        let ms = MsSpace::offline(&c.s, &c.eig, &sel).unwrap();
        let sol = solve_ms(&ms, &c.s, &c.g, &SourceField::zeros(&c.g)).unwrap();
        assert!(sol.snap_coeffs.iter().all(|x| *x == 0.0));
        let again = MsSpace::offline(&c.s, &c.eig, &sel).unwrap();
        assert_eq!(ms.expansion(), again.expansion());
    }

    #[test]
    fn online_columns_must_be_divergence_free() {
        let c = ctx(10.0);
        let mut ms = MsSpace::empty(&c.s);
        let col = MsColumn::from_dense(ColumnKind::Online { level: 0, region: 0 }, 0, &[1.0, 0.0, 0.0, 0.0]);
        assert!(ms.push_online(&c.s, col).is_err());
    }
}
