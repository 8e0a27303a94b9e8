//! Pure-neuron detector and its linearization.
//!
//! For a direction `u` in output space the detector is the `d^2`-vector
//!
//! ```text
//! f(u) = 2 E[(u.y)(q_u.x)(x (x) x)] - E[(u.y)^2 (x (x) x)],   q_u = C2^-1 Cyx^T u
//! ```
//!
//! with the noise-robust variant adding
//! `(u^T Cyy u - 2 u^T Cyx C2^-1 Cyx^T u) E[x (x) x]`. `f` vanishes exactly at
//! pure neurons. Because `f` is quadratic in `u`, there is a matrix `T` with
//! `T vec*(u u^T) = f(u)`; its null space is spanned by `vec*(z_i z_i^T)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::distmat;
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::NetworkParams;
use crate::moments::MomentSet;

/// `vec*` / `mat*`: symmetric `k x k` matrices as vectors of their upper
/// triangle (diagonal included), pairs `(i, j)` with `i <= j` in lexicographic
/// order. Off-diagonal entries appear once and are mirrored by `mat*` without
/// halving, so `vec*(u u^T)` holds the monomials `u_i u_j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SymVec {
    pub k: usize,
}

impl SymVec {
    pub fn new(k: usize) -> Self {
        Self { k }
    }

    /// `k(k+1)/2`, i.e. `k2 + k`.
    pub fn len(&self) -> usize {
        self.k * (self.k + 1) / 2
    }

    pub fn is_empty(&self) -> bool {
        self.k == 0
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        let (i, j) = (i.min(j), i.max(j));
        i * self.k - i * i.saturating_sub(1) / 2 + (j - i)
    }

    /// Pair at position `p`.
    pub fn pair(&self, p: usize) -> (usize, usize) {
        self.pairs()[p]
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        (0..self.k).flat_map(|i| (i..self.k).map(move |j| (i, j))).collect()
    }

    pub fn vec(&self, m: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.pairs().into_iter().map(|(i, j)| m[(i, j)]))
    }

    pub fn mat(&self, b: &DVector<f64>) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.k, self.k);
        for (p, (i, j)) in self.pairs().into_iter().enumerate() {
            m[(i, j)] = b[p];
            m[(j, i)] = b[p];
        }
        m
    }

    /// `vec*(u u^T)`.
    pub fn outer(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.pairs().into_iter().map(|(i, j)| u[i] * u[j]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Noiseless,
    /// Cancels the label-noise bias with the augmented `E[x (x) x]` term.
    #[default]
    Noisy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    /// `sigma_{k2}(T)`; absent when `k = 1`.
    pub sigma_k2: Option<f64>,
    /// `sigma_{k2+1}(T)`.
    pub sigma_k2_plus_1: f64,
    pub singular_values: Vec<f64>,
}

impl GapReport {
    fn from_matrix(t: &DMatrix<f64>, k: usize) -> Result<Self> {
        let (sv, _) = linalg::right_singular_basis(t)?;
        let k2 = k * (k - 1) / 2;
        Ok(GapReport {
            sigma_k2: (k2 > 0).then(|| sv[k2 - 1]),
            sigma_k2_plus_1: sv[k2],
            singular_values: sv,
        })
    }

    /// `sigma_{k2+1} / sigma_{k2}`; zero when `k = 1`.
    pub fn ratio(&self) -> f64 {
        match self.sigma_k2 {
            Some(s) if s > 0.0 => self.sigma_k2_plus_1 / s,
            Some(_) => f64::INFINITY,
            None => 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DetectorMatrix {
    /// `d^2 x (k2 + k)`.
    pub t: DMatrix<f64>,
    pub convention: SymVec,
    pub variant: Variant,
    pub gap: GapReport,
}

impl DetectorMatrix {
    pub fn k(&self) -> usize {
        self.convention.k
    }

    fn new(t: DMatrix<f64>, k: usize, variant: Variant) -> Result<Self> {
        let gap = GapReport::from_matrix(&t, k)?;
        Ok(Self { t, convention: SymVec::new(k), variant, gap })
    }
}

fn check_square_outputs(m: &MomentSet, k: usize) -> Result<()> {
    if m.l != k {
        return Err(Error::Shape(format!(
            "detector needs as many outputs as hidden units (l={}, k={k}); reduce the outputs first",
            m.l
        )));
    }
    if k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    Ok(())
}

/// `C2^-1 Cyx^T`, `d x l`.
fn regression_map(m: &MomentSet) -> Result<DMatrix<f64>> {
    Ok(linalg::guarded_spd_inverse(&m.c2)? * m.cyx.transpose())
}

/// Evaluates `f(u)` directly from the moment tensors.
pub fn f_value(u: &DVector<f64>, m: &MomentSet, variant: Variant) -> Result<DVector<f64>> {
    if u.len() != m.l {
        return Err(Error::Shape(format!("u has length {}, expected {}", u.len(), m.l)));
    }
    let r = regression_map(m)?;
    let q = &r * u;
    let d2 = m.d2();
    let mut f = DVector::zeros(d2);
    for a in 0..m.l {
        if u[a] == 0.0 {
            continue;
        }
        for b in 0..m.d {
            let coef = 2.0 * u[a] * q[b];
            for (o, v) in f.iter_mut().zip(m.g(a, b)) {
                *o += coef * v;
            }
        }
        for a2 in 0..m.l {
            let coef = u[a] * u[a2];
            for (o, v) in f.iter_mut().zip(m.h(a, a2)) {
                *o -= coef * v;
            }
        }
    }
    if variant == Variant::Noisy {
        let second = u.dot(&(&m.cyy * u));
        let explained = u.dot(&(&m.cyx * &q));
        f += &m.c2vec * (second - 2.0 * explained);
    }
    Ok(f)
}

/// Linearized detector built by direct bilinear contraction of `G` and `H`.
pub fn build_t(m: &MomentSet, k: usize, variant: Variant) -> Result<DetectorMatrix> {
    check_square_outputs(m, k)?;
    let r = regression_map(m)?;
    let (d, d2, l) = (m.d, m.d2(), m.l);
    // Q[a, a'] = 2 sum_b R[b, a'] G[a, b] - H[a, a'] (+ noise correction)
    let noise_coef = (variant == Variant::Noisy).then(|| &m.cyy - &m.cyx * &r * 2.0);
    let mut q = vec![DVector::<f64>::zeros(d2); l * l];
    for a in 0..l {
        for a2 in 0..l {
            let dst = &mut q[a * l + a2];
            for b in 0..d {
                let coef = 2.0 * r[(b, a2)];
                for (o, v) in dst.iter_mut().zip(m.g(a, b)) {
                    *o += coef * v;
                }
            }
            for (o, v) in dst.iter_mut().zip(m.h(a, a2)) {
                *o -= v;
            }
            if let Some(nc) = &noise_coef {
                let c = nc[(a, a2)];
                for (o, v) in dst.iter_mut().zip(m.c2vec.iter()) {
                    *o += c * v;
                }
            }
        }
    }
    let conv = SymVec::new(k);
    let mut t = DMatrix::zeros(d2, conv.len());
    for (p, (i, j)) in conv.pairs().into_iter().enumerate() {
        let col = if i == j { q[i * l + i].clone() } else { &q[i * l + j] + &q[j * l + i] };
        t.set_column(p, &col);
    }
    DetectorMatrix::new(t, k, variant)
}

/// The same matrix assembled by polarization of `f`: column `(i, i)` is
/// `f(e_i)`, column `(i, j)` is `f(e_i + e_j) - f(e_i) - f(e_j)`.
pub fn build_t_polarized(m: &MomentSet, k: usize, variant: Variant) -> Result<DetectorMatrix> {
    check_square_outputs(m, k)?;
    let conv = SymVec::new(k);
    let basis = |i: usize| {
        let mut e = DVector::zeros(k);
        e[i] = 1.0;
        e
    };
    let diag: Vec<DVector<f64>> = (0..k).map(|i| f_value(&basis(i), m, variant)).collect::<Result<_>>()?;
    let mut t = DMatrix::zeros(m.d2(), conv.len());
    for (p, (i, j)) in conv.pairs().into_iter().enumerate() {
        let col = if i == j {
            diag[i].clone()
        } else {
            f_value(&(basis(i) + basis(j)), m, variant)? - &diag[i] - &diag[j]
        };
        t.set_column(p, &col);
    }
    DetectorMatrix::new(t, k, variant)
}

/// Population `T` for standard Gaussian inputs, from
/// `f(u) = sum_{i<j} (A^T u u^T A)_ij K_ij` with `K_ij = N_ij` (noiseless) or
/// `K_ij = N_ij - m_ij E[x (x) x]` (noisy).
pub fn exact_t_gaussian(params: &NetworkParams, variant: Variant) -> Result<DetectorMatrix> {
    let k = params.k();
    if params.l() != k {
        return Err(Error::Shape(format!("exact detector needs square A, got {}x{k}", params.l())));
    }
    let d = params.d();
    let dm = distmat::closed_form_gaussian(&params.w, false)?;
    let vec_eye = distmat::flatten(&DMatrix::identity(d, d));
    let kernels: Vec<DVector<f64>> = dm
        .pairs()
        .iter()
        .enumerate()
        .map(|(c, _)| {
            let col = dm.data.column(c).into_owned();
            match variant {
                Variant::Noiseless => col,
                Variant::Noisy => col - &vec_eye * dm.m[c],
            }
        })
        .collect();
    let a = &params.a;
    let conv = SymVec::new(k);
    let mut t = DMatrix::zeros(d * d, conv.len());
    for (p, (r, s)) in conv.pairs().into_iter().enumerate() {
        let mut col = DVector::zeros(d * d);
        for (c, &(i, j)) in dm.pairs().iter().enumerate() {
            // coefficient of the monomial u_r u_s in (A^T u u^T A)_ij
            let coef = if r == s {
                a[(r, i)] * a[(r, j)]
            } else {
                a[(r, i)] * a[(s, j)] + a[(s, i)] * a[(r, j)]
            };
            if coef != 0.0 {
                col += &kernels[c] * coef;
            }
        }
        t.set_column(p, &col);
    }
    DetectorMatrix::new(t, k, variant)
}

/// Second-order purity residual `2 (u^T Cyx) C2^-1 (Cyx^T u) - (u^T Cyy u - noise_var |u|^2)`.
/// Zero at pure neurons but also at some mixtures; diagnostic only.
pub fn purity_residual_order2(u: &DVector<f64>, m: &MomentSet, noise_var: f64) -> Result<f64> {
    if u.len() != m.l {
        return Err(Error::Shape(format!("u has length {}, expected {}", u.len(), m.l)));
    }
    let r = regression_map(m)?;
    let explained = u.dot(&(&m.cyx * (&r * u)));
    let second = u.dot(&(&m.cyy * u)) - noise_var * u.norm_squared();
    Ok(2.0 * explained - second)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DistributionSpec;
    use crate::moments::analytic_gaussian_moments;
    use std::f64::consts::PI;

    #[test]
    fn symvec_ordering_is_lexicographic() {
        let c = SymVec::new(3);
        assert_eq!(c.pairs(), vec![(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]);
        for (p, (i, j)) in c.pairs().into_iter().enumerate() {
            assert_eq!(c.index(i, j), p);
            assert_eq!(c.index(j, i), p);
        }
        let u = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(c.outer(&u).as_slice(), &[1.0, 2.0, 3.0, 4.0, 6.0, 9.0]);
        assert_eq!(c.mat(&c.outer(&u)), &u * u.transpose());
        let b = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0, 7.0, -1.0]);
        assert_eq!(c.vec(&c.mat(&b)), b);
    }

    fn identity_instance() -> MomentSet {
        let p = NetworkParams::new(DMatrix::identity(2, 2), DMatrix::identity(2, 2), 0.0).unwrap();
        analytic_gaussian_moments(&p, &DistributionSpec::standard_gaussian(2)).unwrap()
    }

    #[test]
    fn detector_matches_closed_form_at_orthogonal_pair() {
        let m = identity_instance();
        let f = f_value(&DVector::from_vec(vec![1.0, 1.0]), &m, Variant::Noiseless).unwrap();
        let expected = [-2.0 / PI, 0.5, 0.5, -2.0 / PI];
        for (a, b) in f.iter().zip(expected) {
            assert!((a - b).abs() < 1e-14, "{f}");
        }
        let t = build_t(&m, 2, Variant::Noiseless).unwrap();
        assert!(t.t.column(0).amax() < 1e-15);
        assert!(t.t.column(2).amax() < 1e-15);
        for (a, b) in t.t.column(1).iter().zip(expected) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_direction_gives_zero() {
        let m = identity_instance();
        let f = f_value(&DVector::zeros(2), &m, Variant::Noisy).unwrap();
        assert_eq!(f.amax(), 0.0);
        assert_eq!(purity_residual_order2(&DVector::zeros(2), &m, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn single_unit_detector_is_zero() {
        let p = NetworkParams::new(
            DMatrix::from_row_slice(1, 3, &[0.0, 0.6, 0.8]),
            DMatrix::from_row_slice(1, 1, &[1.3]),
            0.0,
        )
        .unwrap();
        let m = analytic_gaussian_moments(&p, &DistributionSpec::standard_gaussian(3)).unwrap();
        let t = build_t(&m, 1, Variant::Noiseless).unwrap();
        assert_eq!(t.t.shape(), (9, 1));
        assert!(t.t.amax() < 1e-14);
        assert_eq!(t.gap.sigma_k2, None);
    }

    #[test]
    fn polarization_agrees_with_contraction() {
        let p = NetworkParams::random_orthonormal(3, 4, 3, 0.3, 11).unwrap();
        let m = analytic_gaussian_moments(&p, &DistributionSpec::standard_gaussian(4)).unwrap();
        for variant in [Variant::Noiseless, Variant::Noisy] {
            let a = build_t(&m, 3, variant).unwrap();
            let b = build_t_polarized(&m, 3, variant).unwrap();
            assert!((&a.t - &b.t).amax() < 1e-12);
        }
    }

    #[test]
    fn wrong_output_count_is_a_shape_error() {
        let p = NetworkParams::random_orthonormal(2, 3, 3, 0.0, 1).unwrap();
        let m = analytic_gaussian_moments(&p, &DistributionSpec::standard_gaussian(3)).unwrap();
        assert!(matches!(build_t(&m, 2, Variant::Noisy), Err(Error::Shape(_))));
    }

    #[test]
    fn singular_covariance_is_reported() {
        let mut m = identity_instance();
        m.c2[(1, 1)] = 0.0;
        assert!(matches!(
            f_value(&DVector::from_vec(vec![1.0, 0.0]), &m, Variant::Noisy),
            Err(Error::SingularCovariance { .. })
        ));
    }
}
