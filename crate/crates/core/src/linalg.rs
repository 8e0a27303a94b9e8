//! Dense linear-algebra helpers shared by the pipeline stages.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Relative eigenvalue floor below which a covariance is treated as singular.
pub const COVARIANCE_GUARD: f64 = 1e-10;

pub fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

pub fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    // Row-major fill so the draw order does not depend on nalgebra's layout.
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    DMatrix::from_row_slice(rows, cols, &data)
}

pub fn gaussian_vector<R: Rng + ?Sized>(len: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_iterator(len, (0..len).map(|_| rng.sample(StandardNormal)))
}

/// Haar-distributed matrix with orthonormal columns (`rows >= cols`) or
/// orthonormal rows (`rows < cols`).
pub fn random_orthonormal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    if rows < cols {
        return random_orthonormal(cols, rows, rng).transpose();
    }
    let g = gaussian_matrix(rows, cols, rng);
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..cols {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Inverse of a symmetric positive semidefinite matrix, refusing matrices
/// whose smallest eigenvalue falls below `COVARIANCE_GUARD * largest`.
pub fn guarded_spd_inverse(c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !c.is_square() {
        return Err(Error::Shape(format!(
            "covariance must be square, got {}x{}",
            c.nrows(),
            c.ncols()
        )));
    }
    let sym = (c + c.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let sigma_max = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let sigma_min = eig.eigenvalues.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    if !(sigma_max > 0.0) || !(sigma_min > COVARIANCE_GUARD * sigma_max) {
        return Err(Error::SingularCovariance {
            sigma_min,
            sigma_max,
        });
    }
    let inv_diag = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v));
    let inv = &eig.eigenvectors * inv_diag * eig.eigenvectors.transpose();
    Ok((&inv + inv.transpose()) * 0.5)
}

/// Singular values in descending order.
pub fn singular_values_desc(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Full right singular basis of `m`.
///
/// Returns `cols` singular values in descending order (zero-padded when the
/// matrix is wide) and the `cols x cols` orthogonal matrix whose columns are
/// the matching right singular vectors. Ties keep the solver's index order.
pub fn right_singular_basis(m: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let cols = m.ncols();
    let padded;
    let src = if m.nrows() < cols {
        let mut p = DMatrix::zeros(cols, cols);
        p.view_mut((0, 0), (m.nrows(), cols)).copy_from(m);
        padded = p;
        &padded
    } else {
        m
    };
    let svd = src.clone().svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Numerical("SVD did not return right singular vectors".into()))?;
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
    let values = order.iter().map(|&i| svd.singular_values[i]).collect();
    let mut v = DMatrix::zeros(cols, cols);
    for (dst, &src_row) in order.iter().enumerate() {
        v.set_column(dst, &v_t.row(src_row).transpose());
    }
    Ok((values, v))
}

/// Top `k` left singular vectors as columns, plus all singular values (descending).
pub fn top_left_singular(m: &DMatrix<f64>, k: usize) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let svd = m.clone().svd(true, false);
    let u = svd
        .u
        .ok_or_else(|| Error::Numerical("SVD did not return left singular vectors".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
    if k > order.len() {
        return Err(Error::Shape(format!(
            "requested {k} singular vectors from a {}x{} matrix",
            m.nrows(),
            m.ncols()
        )));
    }
    let mut p = DMatrix::zeros(m.nrows(), k);
    for (dst, &src) in order.iter().take(k).enumerate() {
        p.set_column(dst, &u.column(src));
    }
    let values = order.iter().map(|&i| svd.singular_values[i]).collect();
    Ok((p, values))
}

/// Orthonormal basis for the column span of `m` (numerical rank by relative tolerance).
pub fn orthonormal_span(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    if m.ncols() == 0 {
        return DMatrix::zeros(m.nrows(), 0);
    }
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let smax = svd.singular_values.iter().fold(0.0f64, |a, &b| a.max(b));
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| smax > 0.0 && svd.singular_values[i] > rel_tol * smax)
        .collect();
    let mut out = DMatrix::zeros(m.nrows(), keep.len());
    for (dst, &src) in keep.iter().enumerate() {
        out.set_column(dst, &u.column(src));
    }
    out
}

/// Spectral-norm distance between the orthogonal projectors onto the column
/// spans of two matrices with orthonormal columns.
pub fn projector_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let pa = a * a.transpose();
    let pb = b * b.transpose();
    singular_values_desc(&(pa - pb)).first().copied().unwrap_or(0.0)
}

pub fn normalize_rows(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut row in out.row_iter_mut() {
        let n = row.norm();
        if n > 0.0 {
            row /= n;
        }
    }
    out
}

pub fn normalize_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut col in out.column_iter_mut() {
        let n = col.norm();
        if n > 0.0 {
            col /= n;
        }
    }
    out
}

/// Nested-vector view of a matrix (row-major), for JSON documents.
pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Shape("ragged matrix rows".into()));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(nrows, ncols, &flat))
}
