//! Small dense Hermitian solves used per frequency bin and per STFT bin.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use num_complex::Complex64;

/// Cholesky factorization of a Hermitian positive-definite matrix given in
/// row-major order. Returns `None` when the matrix is not numerically PD.
pub fn cholesky(mat: &[Complex64], n: usize) -> Option<Cholesky<Complex64, Dyn>> {
    debug_assert_eq!(mat.len(), n * n);
    if mat.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return None;
    }
    let m = DMatrix::from_row_slice(n, n, mat);
    let chol = m.cholesky()?;
    // For complex scalars nalgebra takes the complex square root of a negative
    // pivot instead of failing, so check that every diagonal entry is real and
    // positive.
    let l = chol.l_dirty();
    if (0..n).any(|i| {
        let d = l[(i, i)];
        !(d.re > 0.0) || !d.re.is_finite() || d.im.abs() > 1e-10 * d.re
    }) {
        return None;
    }
    Some(chol)
}

/// Solves `A x = b` for Hermitian PD `A` (row-major) and one right-hand side.
pub fn hpd_solve(mat: &[Complex64], n: usize, rhs: &[Complex64]) -> Option<Vec<Complex64>> {
    let chol = cholesky(mat, n)?;
    let x = chol.solve(&DVector::from_column_slice(rhs));
    Some(x.iter().copied().collect())
}

/// Inverse of a Hermitian PD matrix, returned row-major and exactly Hermitian.
pub fn hpd_inverse(mat: &[Complex64], n: usize) -> Option<Vec<Complex64>> {
    let inv = cholesky(mat, n)?.inverse();
    let mut out = vec![Complex64::new(0.0, 0.0); n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = 0.5 * (inv[(i, j)] + inv[(j, i)].conj());
        }
    }
    if out.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return None;
    }
    Some(out)
}

/// Replaces `mat` (row-major, n×n) by `(mat + mat^H) / 2`.
pub fn symmetrize(mat: &mut [Complex64], n: usize) {
    for i in 0..n {
        mat[i * n + i].im = 0.0;
        for j in (i + 1)..n {
            let avg = 0.5 * (mat[i * n + j] + mat[j * n + i].conj());
            mat[i * n + j] = avg;
            mat[j * n + i] = avg.conj();
        }
    }
}
