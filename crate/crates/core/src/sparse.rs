//! Thin wrapper over `sprs` / `sprs-ldl` for the symmetric positive definite
//! systems that show up in the Newton solver and the Poisson reconstruction.

use sprs::{CsMat, FillInReduction, SymmetryCheck, TriMat};
use sprs_ldl::{Ldl, LdlNumeric};

use crate::error::{Error, Result};

/// Accumulates `(row, col, value)` entries; duplicates are summed on build.
#[derive(Debug)]
pub struct Triplets {
    n: usize,
    inner: TriMat<f64>,
}

impl Triplets {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            inner: TriMat::new((n, n)),
        }
    }

    #[inline]
    pub fn add(&mut self, row: usize, col: usize, value: f64) {
        self.inner.add_triplet(row, col, value);
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn build(&self) -> CsMat<f64> {
        self.inner.to_csc()
    }
}

/// Sparse `y = A x` for a square matrix in any storage order.
pub fn mul_vec(a: &CsMat<f64>, x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; a.rows()];
    for (&v, (r, c)) in a.iter() {
        y[r] += v * x[c];
    }
    y
}

/// LDLᵀ factorization of a symmetric positive definite matrix with a
/// reverse Cuthill–McKee ordering.
pub struct SpdFactor {
    ldl: LdlNumeric<f64, usize>,
    n: usize,
}

impl std::fmt::Debug for SpdFactor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpdFactor")
            .field("n", &self.n)
            .field("nnz", &self.ldl.nnz())
            .finish()
    }
}

impl SpdFactor {
    pub fn new(matrix: &CsMat<f64>) -> Result<Self> {
        let n = matrix.rows();
        if n != matrix.cols() {
            return Err(Error::Solver("matrix is not square".into()));
        }
        let ldl = Ldl::new()
            .fill_in_reduction(FillInReduction::ReverseCuthillMcKee)
            .check_symmetry(SymmetryCheck::DontCheckSymmetry)
            .numeric(matrix.view())
            .map_err(|e| Error::Solver(format!("factorization failed: {e:?}")))?;
        if let Some(d) = ldl.d().iter().find(|d| !(**d > 0.0) || !d.is_finite()) {
            return Err(Error::Solver(format!(
                "matrix is not positive definite (pivot {d:e})"
            )));
        }
        Ok(Self { ldl, n })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        debug_assert_eq!(rhs.len(), self.n);
        self.ldl.solve(rhs.to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_tridiagonal_system() {
        let n = 6;
        let mut t = Triplets::new(n);
        for i in 0..n {
            t.add(i, i, 2.0);
            if i + 1 < n {
                t.add(i, i + 1, -1.0);
                t.add(i + 1, i, -1.0);
            }
        }
        let a = t.build();
        let x_true: Vec<f64> = (0..n).map(|i| i as f64 - 1.5).collect();
        let b = mul_vec(&a, &x_true);
        let x = SpdFactor::new(&a).unwrap().solve(&b);
        for (u, v) in x.iter().zip(&x_true) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let mut t = Triplets::new(2);
        t.add(0, 0, 1.0);
        t.add(1, 1, -1.0);
        assert!(SpdFactor::new(&t.build()).is_err());
    }
}
