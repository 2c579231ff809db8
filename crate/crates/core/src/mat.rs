//! Small dense-matrix utilities shared across the crate: block assembly,
//! symmetric eigenvalue helpers, inertia counts, and null-space bases.
//!
//! Everything operates on `nalgebra::DMatrix<f64>`. Blocks of width or height
//! zero are legal throughout; degenerate nodes (no interconnection, no
//! disturbance) rely on that.

use nalgebra::{DMatrix, DVector};

/// Stacks a grid of blocks into one matrix.
///
/// `rows` is a list of block rows; within a block row all blocks must share
/// the same height, and every block row must produce the same total width.
/// Zero-height/zero-width blocks participate like any other.
///
/// # Panics
/// Panics on inconsistent block dimensions (programming error, not data error).
pub fn block_matrix(rows: &[&[&DMatrix<f64>]]) -> DMatrix<f64> {
    let total_rows: usize = rows.iter().map(|r| r.first().map_or(0, |b| b.nrows())).sum();
    let total_cols: usize = rows
        .first()
        .map_or(0, |r| r.iter().map(|b| b.ncols()).sum());
    let mut out = DMatrix::zeros(total_rows, total_cols);
    let mut r0 = 0;
    for row in rows {
        let h = row.first().map_or(0, |b| b.nrows());
        let mut c0 = 0;
        for blk in *row {
            assert_eq!(blk.nrows(), h, "inconsistent block heights in block row");
            out.view_mut((r0, c0), (blk.nrows(), blk.ncols())).copy_from(*blk);
            c0 += blk.ncols();
        }
        assert_eq!(c0, total_cols, "inconsistent block-row widths");
        r0 += h;
    }
    out
}

/// Horizontal concatenation.
pub fn hstack(mats: &[&DMatrix<f64>]) -> DMatrix<f64> {
    block_matrix(&[mats])
}

/// Vertical concatenation.
pub fn vstack(mats: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows: Vec<&[&DMatrix<f64>]> = mats.iter().map(std::slice::from_ref).collect();
    block_matrix(&rows)
}

/// Block-diagonal assembly; off-diagonal blocks are zero.
pub fn block_diag(mats: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let nr: usize = mats.iter().map(|m| m.nrows()).sum();
    let nc: usize = mats.iter().map(|m| m.ncols()).sum();
    let mut out = DMatrix::zeros(nr, nc);
    let (mut r0, mut c0) = (0, 0);
    for m in mats {
        out.view_mut((r0, c0), (m.nrows(), m.ncols())).copy_from(*m);
        r0 += m.nrows();
        c0 += m.ncols();
    }
    out
}

/// (m + mᵀ)/2.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()).scale(0.5)
}

/// Eigenvalues of a (numerically) symmetric matrix, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> DVector<f64> {
    if m.nrows() == 0 {
        return DVector::zeros(0);
    }
    let mut ev: Vec<f64> = symmetrize(m).symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
    DVector::from_vec(ev)
}

/// Largest eigenvalue of a symmetric matrix; −∞ for the 0×0 matrix
/// (every constraint on an empty space holds vacuously).
pub fn lambda_max(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::NEG_INFINITY;
    }
    let ev = sym_eigenvalues(m);
    ev[ev.len() - 1]
}

/// Smallest eigenvalue of a symmetric matrix; +∞ for the 0×0 matrix.
pub fn lambda_min(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    sym_eigenvalues(m)[0]
}

/// Largest singular value (0 for empty matrices).
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    // Largest eigenvalue of the Gram matrix of the thinner side; avoids a full SVD.
    let g = if m.nrows() <= m.ncols() { m * m.transpose() } else { m.transpose() * m };
    lambda_max(&g).max(0.0).sqrt()
}

/// Reciprocal condition number σ_min/σ_max via SVD; 0 for singular,
/// +∞ convention avoided by returning 1.0 for empty matrices (vacuously
/// perfectly conditioned — an empty interconnection is always well posed).
pub fn rcond(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 1.0;
    }
    let sv = m.clone().singular_values();
    let smax = sv.max();
    if smax == 0.0 {
        return 0.0;
    }
    sv.min() / smax
}

/// Inertia of a symmetric matrix: counts of (negative, zero, positive)
/// eigenvalues, with |λ| ≤ tol·(1 + max|λ|) counted as zero.
pub fn inertia(m: &DMatrix<f64>, tol: f64) -> (usize, usize, usize) {
    let ev = sym_eigenvalues(m);
    let scale = 1.0 + ev.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
    let thr = tol * scale;
    let mut counts = (0usize, 0usize, 0usize);
    for &l in ev.iter() {
        if l < -thr {
            counts.0 += 1;
        } else if l > thr {
            counts.2 += 1;
        } else {
            counts.1 += 1;
        }
    }
    counts
}

/// Orthonormal basis of the null space of `m`, as columns.
///
/// Computed from an SVD; singular values below `1e-10 · σ_max` are treated as
/// zero. A matrix with no rows (or an all-zero matrix) has the full space as
/// kernel, returning an identity-sized orthogonal basis. The result may have
/// zero columns when the kernel is trivial.
pub fn null_space(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.ncols();
    if m.nrows() == 0 || n == 0 {
        return DMatrix::identity(n, n);
    }
    // nalgebra's thin SVD of a wide matrix does not expose the trailing rows
    // of Vᵀ that span the kernel; padding with zero rows to square makes Vᵀ
    // full while leaving singular values (up to appended zeros) unchanged.
    let padded = if m.nrows() < n {
        let mut p = DMatrix::zeros(n, n);
        p.view_mut((0, 0), (m.nrows(), n)).copy_from(m);
        p
    } else {
        m.clone()
    };
    let svd = padded.svd(false, true);
    let vt = svd.v_t.expect("SVD requested with V^T");
    let smax = svd.singular_values.max();
    let tol = 1e-10 * smax;
    let mut cols: Vec<usize> = Vec::new();
    for i in 0..n {
        let s = if i < svd.singular_values.len() { svd.singular_values[i] } else { 0.0 };
        if s <= tol {
            cols.push(i);
        }
    }
    let mut basis = DMatrix::zeros(n, cols.len());
    for (k, &i) in cols.iter().enumerate() {
        basis.set_column(k, &vt.row(i).transpose());
    }
    basis
}

/// Moore–Penrose pseudo-inverse with relative rank cutoff 1e-12.
pub fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return DMatrix::zeros(m.ncols(), m.nrows());
    }
    m.clone()
        .svd(true, true)
        .pseudo_inverse(1e-12 * spectral_norm(m).max(1.0))
        .expect("SVD requested with U and V^T")
}

/// Maximum absolute entry (0 for empty matrices).
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |a, &x| a.max(x.abs()))
}

/// Spectral radius max |λ| over the (complex) eigenvalues; 0 for empty
/// matrices.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn block_matrix_assembles_grid() {
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let b = DMatrix::from_row_slice(1, 1, &[3.0]);
        let c = DMatrix::from_row_slice(2, 2, &[4.0, 5.0, 6.0, 7.0]);
        let d = DMatrix::from_row_slice(2, 1, &[8.0, 9.0]);
        let m = block_matrix(&[&[&a, &b], &[&c, &d]]);
        let expected = DMatrix::from_row_slice(3, 3, &[1., 2., 3., 4., 5., 8., 6., 7., 9.]);
        assert_eq!(m, expected);
    }

    #[test]
    fn zero_width_blocks_are_transparent() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let e = DMatrix::<f64>::zeros(2, 0);
        assert_eq!(hstack(&[&e, &a, &e]), a);
        let e2 = DMatrix::<f64>::zeros(0, 2);
        assert_eq!(vstack(&[&e2, &a]), a);
    }

    #[test]
    fn null_space_of_wide_row() {
        let m = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let k = null_space(&m);
        assert_eq!(k.ncols(), 1);
        assert_abs_diff_eq!((&m * &k).norm(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(k.column(0).norm(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn null_space_of_zero_matrix_is_full() {
        let k = null_space(&DMatrix::zeros(2, 2));
        assert_eq!(k.ncols(), 2);
        // Orthonormal basis of R².
        assert_abs_diff_eq!((&k.transpose() * &k - DMatrix::identity(2, 2)).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn inertia_counts() {
        let m = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, -1.0, 0.0]));
        assert_eq!(inertia(&m, 1e-12), (1, 1, 1));
    }

    #[test]
    fn empty_matrix_conventions() {
        let e = DMatrix::<f64>::zeros(0, 0);
        assert_eq!(lambda_max(&e), f64::NEG_INFINITY);
        assert_eq!(lambda_min(&e), f64::INFINITY);
        assert_eq!(rcond(&e), 1.0);
    }
}
