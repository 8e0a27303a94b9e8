//! Distinguishing matrices.
//!
//! For first-layer rows `w_i`, column `(i, j)` (`i < j`, lexicographic) is
//!
//! ```text
//! N_ij = E[(w_i.x)(w_j.x) (x (x) x) 1{(w_i.x)(w_j.x) <= 0}]
//! ```
//!
//! and the augmented matrix `M` appends `E[x (x) x]` as its last column. The
//! scalars `m_ij = E[(w_i.x)(w_j.x) 1{..}]` are carried alongside.

use std::fmt::Write as _;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{self, DistributionSpec};
use crate::reduce;
use crate::seeds;

/// Lexicographic list of pairs `(i, j)` with `i < j < k`.
pub fn pairs(k: usize) -> Vec<(usize, usize)> {
    (0..k).flat_map(|i| (i + 1..k).map(move |j| (i, j))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    MonteCarlo { n: usize, seed: u64 },
    ClosedFormGaussian,
}

#[derive(Debug, Clone)]
pub struct DistinguishingMatrix {
    /// `d^2 x k2` (or `d^2 x (k2 + 1)` when augmented).
    pub data: DMatrix<f64>,
    pub k: usize,
    pub d: usize,
    pub augmented: bool,
    /// `m_ij` in pair order.
    pub m: Vec<f64>,
    pub provenance: Provenance,
}

impl DistinguishingMatrix {
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        pairs(self.k)
    }

    /// Column index of pair `(i, j)`, `i < j`.
    pub fn column_of(&self, i: usize, j: usize) -> Option<usize> {
        pairs(self.k).iter().position(|&p| p == (i.min(j), i.max(j)))
    }

    /// Column `c` reshaped to `d x d`.
    pub fn column_matrix(&self, c: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.d, self.d, self.data.column(c).as_slice())
    }

    /// The non-augmented part.
    pub fn n_matrix(&self) -> DMatrix<f64> {
        let k2 = self.k * (self.k - 1) / 2;
        self.data.columns(0, k2).into_owned()
    }
}

/// Closed-form Gaussian `mat(N_ij)` and `m_ij` for one pair of rows.
pub fn closed_form_pair(wi: &DVector<f64>, wj: &DVector<f64>) -> (DMatrix<f64>, f64) {
    let d = wi.len();
    let ni = wi.norm();
    let nj = wj.norm();
    let ui = wi / ni;
    let uj = wj / nj;
    let cos = ui.dot(&uj).clamp(-1.0, 1.0);
    let sin = (&ui - &uj * cos).norm();
    let phi = sin.atan2(cos);
    let m = (phi * cos - sin) / PI * ni * nj;
    let mut mat = DMatrix::identity(d, d) * m;
    mat += (wi * wj.transpose() + wj * wi.transpose()) * (phi / PI);
    mat -= (wj * wj.transpose() * (ni / nj) + wi * wi.transpose() * (nj / ni)) * (sin / PI);
    (mat, m)
}

/// Exact augmented distinguishing matrix for standard Gaussian inputs.
pub fn closed_form_m_gaussian(w: &DMatrix<f64>) -> Result<DistinguishingMatrix> {
    closed_form_gaussian(w, true)
}

pub fn closed_form_gaussian(w: &DMatrix<f64>, augmented: bool) -> Result<DistinguishingMatrix> {
    let (k, d) = w.shape();
    for i in 0..k {
        if w.row(i).norm() == 0.0 {
            return Err(Error::ZeroRow(i));
        }
    }
    let ps = pairs(k);
    let cols = ps.len() + usize::from(augmented);
    let mut data = DMatrix::zeros(d * d, cols);
    let mut m = Vec::with_capacity(ps.len());
    for (c, &(i, j)) in ps.iter().enumerate() {
        let (mat, mij) = closed_form_pair(&w.row(i).transpose(), &w.row(j).transpose());
        data.set_column(c, &flatten(&mat));
        m.push(mij);
    }
    if augmented {
        data.set_column(cols - 1, &flatten(&DMatrix::identity(d, d)));
    }
    Ok(DistinguishingMatrix {
        data,
        k,
        d,
        augmented,
        m,
        provenance: Provenance::ClosedFormGaussian,
    })
}

/// Row-major flattening, matching the `x (x) x` index `a * d + b`.
pub fn flatten(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.len(), m.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()))
}

/// Monte-Carlo estimate from `n` inputs drawn under `seed`.
pub fn estimate_n(
    w: &DMatrix<f64>,
    spec: &DistributionSpec,
    n: usize,
    seed: u64,
    augmented: bool,
) -> Result<DistinguishingMatrix> {
    if n == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    let (k, d) = w.shape();
    if spec.dim() != d {
        return Err(Error::Shape(format!("distribution dim {} but W has {d} columns", spec.dim())));
    }
    let sampler = spec.compile()?;
    let ps = pairs(k);
    let cols = ps.len() + usize::from(augmented);
    let d2 = d * d;
    let width = cols * d2 + ps.len();
    let sums = reduce::block_sum(n, width, |rows, acc| {
        let mut x = vec![0.0; d];
        let mut proj = vec![0.0; k];
        let mut xx = vec![0.0; d2];
        for r in rows {
            sampler.sample_row(seed, r, &mut x);
            for (i, p) in proj.iter_mut().enumerate() {
                *p = (0..d).map(|c| w[(i, c)] * x[c]).sum();
            }
            for a in 0..d {
                for b in 0..d {
                    xx[a * d + b] = x[a] * x[b];
                }
            }
            for (c, &(i, j)) in ps.iter().enumerate() {
                let t = proj[i] * proj[j];
                if t <= 0.0 {
                    let col = &mut acc[c * d2..(c + 1) * d2];
                    for (o, v) in col.iter_mut().zip(&xx) {
                        *o += t * v;
                    }
                    acc[cols * d2 + c] += t;
                }
            }
            if augmented {
                let col = &mut acc[(cols - 1) * d2..cols * d2];
                for (o, v) in col.iter_mut().zip(&xx) {
                    *o += v;
                }
            }
        }
    });
    let inv = 1.0 / n as f64;
    let data = DMatrix::from_column_slice(d2, cols, &sums[..cols * d2]) * inv;
    let m = sums[cols * d2..].iter().map(|v| v * inv).collect();
    Ok(DistinguishingMatrix {
        data,
        k,
        d,
        augmented,
        m,
        provenance: Provenance::MonteCarlo { n, seed },
    })
}

/// Smallest singular value.
pub fn sigma_min(m: &DMatrix<f64>) -> f64 {
    linalg::singular_values_desc(m).last().copied().unwrap_or(0.0)
}

/// Smallest distance from a column to the span of the others. The optional
/// special column still spans but is not itself a candidate.
pub fn leave_one_out_distance(m: &DMatrix<f64>, special_column: Option<usize>) -> Result<f64> {
    let n = m.ncols();
    if n < 2 {
        return Err(Error::Config("leave-one-out distance needs at least two columns".into()));
    }
    if let Some(s) = special_column {
        if s >= n {
            return Err(Error::Config(format!("special column {s} out of range")));
        }
    }
    let mut best = f64::INFINITY;
    for i in (0..n).filter(|&i| Some(i) != special_column) {
        let others = m.clone().remove_column(i);
        let basis = linalg::orthonormal_span(&others, 1e-12 * (m.nrows().max(n) as f64));
        let col = m.column(i).into_owned();
        let resid = &col - &basis * (basis.transpose() * &col);
        best = best.min(resid.norm());
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub rho: f64,
    pub trial: usize,
    pub sigma_min: f64,
}

/// `sigma_min` of the closed-form augmented matrix of `W + rho E` for each
/// `rho` and trial. `rho = 0` evaluates `W` itself.
pub fn smoothed_sigma_scan(w: &DMatrix<f64>, rho_grid: &[f64], trials: usize, seed: u64) -> Result<Vec<ScanRow>> {
    let mut rows = Vec::with_capacity(rho_grid.len() * trials);
    for (g, &rho) in rho_grid.iter().enumerate() {
        for trial in 0..trials {
            let wt = if rho == 0.0 {
                w.clone()
            } else {
                let s = seeds::derive_indexed(seeds::derive_indexed(seed, "rho", g as u64), "trial", trial as u64);
                model::perturb_weights(w, rho, s)?
            };
            let m = closed_form_m_gaussian(&wt)?;
            rows.push(ScanRow { rho, trial, sigma_min: sigma_min(&m.data) });
        }
    }
    Ok(rows)
}

pub fn scan_csv(rows: &[ScanRow]) -> String {
    let mut out = String::from("rho,trial,sigma_min\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.rho, r.trial, r.sigma_min);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn orthogonal_pair_column() -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[-2.0 / PI, 0.5, 0.5, -2.0 / PI])
    }

    #[test]
    fn orthogonal_unit_rows_give_known_column() {
        let w = DMatrix::identity(2, 2);
        let m = closed_form_m_gaussian(&w).unwrap();
        assert_eq!(m.data.shape(), (4, 2));
        assert!((m.column_matrix(0) - orthogonal_pair_column()).amax() < 1e-15);
        assert!((m.column_matrix(1) - DMatrix::identity(2, 2)).amax() == 0.0);
        assert!((m.m[0] + 1.0 / PI).abs() < 1e-15);
    }

    #[test]
    fn identical_rows_give_zero_column() {
        let w = DMatrix::from_row_slice(2, 3, &[0.3, -0.4, 1.2, 0.3, -0.4, 1.2]);
        let m = closed_form_gaussian(&w, false).unwrap();
        assert!(m.data.amax() < 1e-12);
        assert!(m.m[0].abs() < 1e-12);
    }

    #[test]
    fn opposite_rows_match_direct_expectation() {
        // w_j = -w_i makes the indicator always true: N = -E[(w.x)^2 xx^T].
        let wi = DVector::from_vec(vec![0.6, 0.8, 0.0]);
        let (mat, m) = closed_form_pair(&wi, &(-&wi));
        let expected = -(DMatrix::identity(3, 3) + &wi * wi.transpose() * 2.0);
        assert!((mat - expected).amax() < 1e-12);
        assert!((m + 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_row_is_rejected() {
        let w = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(closed_form_m_gaussian(&w), Err(Error::ZeroRow(1))));
    }

    #[test]
    fn sigma_min_of_diagonals() {
        assert!((sigma_min(&DMatrix::identity(3, 3)) - 1.0).abs() < 1e-15);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 2.0, 1e-5]));
        assert!((sigma_min(&d) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn leave_one_out_edge_cases() {
        assert!((leave_one_out_distance(&DMatrix::identity(4, 3), None).unwrap() - 1.0).abs() < 1e-14);
        let dup = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 2.0, 2.0, 0.5, 0.5]);
        assert!(leave_one_out_distance(&dup, None).unwrap() < 1e-12);
        assert!(leave_one_out_distance(&DMatrix::identity(3, 1), None).is_err());
        // Column 1 is close to column 0; excluding both candidates but 2 leaves distance 1.
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 0.0, 0.0, 1e-3, 0.0, 0.0, 0.0, 1.0]);
        assert!(leave_one_out_distance(&m, None).unwrap() < 1e-2);
        let md = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 0.0, 1e-3, 0.0, 0.0]);
        assert!(leave_one_out_distance(&md, Some(1)).unwrap() < 1e-2);
    }

    #[test]
    fn colinear_start_has_singular_matrix() {
        let w = DMatrix::from_row_slice(3, 15, &{
            let mut v = vec![0.0; 45];
            v[0] = 1.0;
            v[15] = 1.0;
            v[32] = 1.0;
            v
        });
        let rows = smoothed_sigma_scan(&w, &[0.0, 0.1], 20, 3).unwrap();
        assert!(rows[0].sigma_min < 1e-12);
        let perturbed_min = rows.iter().filter(|r| r.rho == 0.1).map(|r| r.sigma_min).fold(f64::INFINITY, f64::min);
        assert!(perturbed_min > 0.0);
        assert!(scan_csv(&rows).starts_with("rho,trial,sigma_min\n0,0,"));
    }
}
