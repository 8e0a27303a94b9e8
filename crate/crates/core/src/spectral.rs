//! Null space of the detector and recovery of the pure-neuron directions.
//!
//! The `k` least right singular vectors of `T` span `{vec*(z_i z_i^T)}`.
//! Two random members `X = Z^T D_X Z`, `Y = Z^T D_Y Z` of that span share the
//! eigenvectors `z_i` of `X Y^-1`. An alternating-least-squares CP fit over
//! many random members is provided as a noise-tolerant alternative.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{DetectorMatrix, SymVec};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::SampleSet;
use crate::seeds;

#[derive(Debug, Clone)]
pub struct SubspaceBasis {
    /// `(k2 + k) x k`, orthonormal columns.
    pub s: DMatrix<f64>,
    pub k: usize,
    /// `sigma_{k2}(T) - sigma_{k2+1}(T)`; absent when `k = 1`.
    pub source_gap: Option<f64>,
}

impl SubspaceBasis {
    pub fn convention(&self) -> SymVec {
        SymVec::new(self.k)
    }

    /// `mat*(S zeta)`.
    pub fn member(&self, zeta: &DVector<f64>) -> DMatrix<f64> {
        self.convention().mat(&(&self.s * zeta))
    }

    /// Orthonormal basis for `span{vec*(z_i z_i^T)}` of the given rows.
    pub fn from_directions(z: &DMatrix<f64>) -> Result<Self> {
        let k = z.nrows();
        let conv = SymVec::new(k);
        let mut gen = DMatrix::zeros(conv.len(), k);
        for i in 0..k {
            gen.set_column(i, &conv.outer(&z.row(i).transpose()));
        }
        let s = linalg::orthonormal_span(&gen, 1e-12);
        if s.ncols() != k {
            return Err(Error::RankDeficiency { rank: k, sigma: 0.0, sigma_max: 1.0 });
        }
        Ok(Self { s, k, source_gap: None })
    }
}

pub fn nullspace_basis(t: &DetectorMatrix) -> Result<SubspaceBasis> {
    nullspace_of(&t.t, t.k())
}

/// The `k` least right singular vectors of `t` (ties keep index order).
pub fn nullspace_of(t: &DMatrix<f64>, k: usize) -> Result<SubspaceBasis> {
    let cols = t.ncols();
    if k == 0 || cols < k {
        return Err(Error::Shape(format!("need at least k={k} columns, T has {cols}")));
    }
    if t.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("detector matrix has non-finite entries".into()));
    }
    let (sv, v) = linalg::right_singular_basis(t)?;
    let s = v.columns(cols - k, k).into_owned();
    let k2 = cols - k;
    let source_gap = (k2 > 0).then(|| sv[k2 - 1] - sv[k2]);
    Ok(SubspaceBasis { s, k, source_gap })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimDiagOptions {
    /// Extra probe pairs after the first one.
    pub retries: usize,
    /// Largest accepted `|imag| / |real|` among the eigenvalues.
    pub imag_tol: f64,
    /// Minimum eigenvalue separation relative to the largest magnitude.
    pub sep_tol: f64,
}

impl Default for SimDiagOptions {
    fn default() -> Self {
        Self { retries: 5, imag_tol: 1e-6, sep_tol: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZMethod {
    Eigen,
    Als,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZRecovery {
    /// `k x k`, unit-norm rows `z_i`.
    #[serde(skip)]
    pub z: DMatrix<f64>,
    pub method: Option<ZMethod>,
    /// Eigenvalues of `X Y^-1` (eigen method), ascending, row-aligned with `z`.
    pub eigenvalues: Vec<f64>,
    pub probe_seed: u64,
    /// Largest `|imag| / |real|` discarded when taking real parts.
    pub max_imag: f64,
    /// Probe pairs (eigen) or restarts (ALS) consumed.
    pub attempts: usize,
    /// Relative CP reconstruction residual (ALS only).
    pub residual: Option<f64>,
}

/// Flips `v` so that its largest-magnitude entry is positive.
fn canonical_sign(v: &mut DVector<f64>) {
    let idx = v.iamax();
    if v[idx] < 0.0 {
        v.neg_mut();
    }
}

pub fn simultaneous_diagonalize(basis: &SubspaceBasis, seed: u64, opts: &SimDiagOptions) -> Result<ZRecovery> {
    let k = basis.k;
    let mut last_complex: Option<f64> = None;
    let mut last_reason = String::new();
    for attempt in 0..=opts.retries {
        let mut rng = seeds::rng(seeds::derive_indexed(seed, "probe", attempt as u64));
        let x = basis.member(&linalg::gaussian_vector(k, &mut rng));
        let y = basis.member(&linalg::gaussian_vector(k, &mut rng));
        let ysv = linalg::singular_values_desc(&y);
        if !(ysv[k - 1] > 1e-12 * ysv[0]) {
            last_reason = format!("Y is near-singular (sigma ratio {:e})", ysv[k - 1] / ysv[0]);
            last_complex = None;
            continue;
        }
        // X Y^-1 = (Y^-1 X)^T for symmetric X, Y.
        let m = match y.clone().lu().solve(&x) {
            Some(s) => s.transpose(),
            None => {
                last_reason = "Y could not be factored".into();
                continue;
            }
        };
        let eig = m.complex_eigenvalues();
        let ratio = eig.iter().map(|c| c.im.abs() / c.re.abs().max(f64::MIN_POSITIVE)).fold(0.0, f64::max);
        if ratio > opts.imag_tol {
            last_complex = Some(ratio);
            continue;
        }
        let mut mu: Vec<f64> = eig.iter().map(|c| c.re).collect();
        mu.sort_by(f64::total_cmp);
        let scale = mu.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        let sep = mu.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
        if k > 1 && !(sep >= opts.sep_tol * scale) {
            last_reason = format!("eigenvalue separation {sep:e} below tolerance (scale {scale:e})");
            last_complex = None;
            continue;
        }
        let mut z = DMatrix::zeros(k, k);
        for (i, &val) in mu.iter().enumerate() {
            let shifted = &m - DMatrix::identity(k, k) * val;
            let (_, v) = linalg::right_singular_basis(&shifted)?;
            let mut vec = v.column(k - 1).into_owned();
            vec /= vec.norm();
            canonical_sign(&mut vec);
            z.set_row(i, &vec.transpose());
        }
        return Ok(ZRecovery {
            z,
            method: Some(ZMethod::Eigen),
            eigenvalues: mu,
            probe_seed: seed,
            max_imag: ratio,
            attempts: attempt + 1,
            residual: None,
        });
    }
    let attempts = opts.retries + 1;
    match last_complex {
        Some(ratio) => Err(Error::ComplexEigenpairs { attempts, ratio }),
        None => Err(Error::DegenerateSpan { attempts, reason: last_reason }),
    }
}

#[derive(Debug, Clone)]
pub struct SignFix {
    pub z: DMatrix<f64>,
    /// `E[z_i . y]` after flipping.
    pub margins: Vec<f64>,
    /// Rows whose sign was not resolved beyond the tolerance.
    pub ambiguous: Vec<usize>,
}

/// Flips rows so that `E[z_i . y] >= 0`, given `E[y]`. Rows with
/// `|E[z_i . y]| <= tol[i]` are reported as ambiguous.
pub fn fix_signs_with_mean(z: &DMatrix<f64>, ey: &DVector<f64>, tol: &[f64]) -> SignFix {
    let mut out = z.clone();
    let mut margins = Vec::with_capacity(z.nrows());
    let mut ambiguous = Vec::new();
    for i in 0..z.nrows() {
        let mean = z.row(i).transpose().dot(ey);
        if mean < 0.0 {
            out.row_mut(i).neg_mut();
        }
        if mean.abs() <= tol.get(i).copied().unwrap_or(0.0) {
            ambiguous.push(i);
        }
        margins.push(mean.abs());
    }
    SignFix { z: out, margins, ambiguous }
}

/// Sign fix from samples; a row is ambiguous when its mean is within two
/// standard errors of zero.
pub fn fix_signs(z: &DMatrix<f64>, samples: &SampleSet) -> Result<SignFix> {
    let n = samples.n();
    if n == 0 {
        return Err(Error::EmptyInput("no samples for sign fixing".into()));
    }
    if z.ncols() != samples.l() {
        return Err(Error::Shape(format!("z has {} columns, outputs have {}", z.ncols(), samples.l())));
    }
    let proj = &samples.y * z.transpose();
    let mut ey = DVector::zeros(z.ncols());
    for j in 0..samples.l() {
        ey[j] = samples.y.column(j).mean();
    }
    let tol: Vec<f64> = (0..z.nrows())
        .map(|i| {
            let col = proj.column(i);
            let mean = col.mean();
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n.max(2) - 1) as f64;
            2.0 * (var / n as f64).sqrt()
        })
        .collect();
    Ok(fix_signs_with_mean(z, &ey, &tol))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlsOptions {
    /// Random members of the span; `None` means `10 k`.
    pub num_probes: Option<usize>,
    pub restarts: usize,
    pub max_iters: usize,
    /// Stop once the relative residual changes by less than this.
    pub tol: f64,
}

impl Default for AlsOptions {
    fn default() -> Self {
        Self { num_probes: None, restarts: 10, max_iters: 500, tol: 1e-10 }
    }
}

struct AlsFit {
    z: DMatrix<f64>,
    residual: f64,
}

fn als_fit(slices: &[DMatrix<f64>], init: DMatrix<f64>, opts: &AlsOptions) -> Option<AlsFit> {
    let k = init.ncols();
    let p = slices.len();
    let total: f64 = slices.iter().map(|x| x.norm_squared()).sum();
    let mut b1 = linalg::normalize_columns(&init);
    let mut b2 = b1.clone();
    let update_c = |b1: &DMatrix<f64>, b2: &DMatrix<f64>| -> Option<DMatrix<f64>> {
        let mut f = DMatrix::zeros(p, k);
        for (t, x) in slices.iter().enumerate() {
            let xb2 = x * b2;
            for r in 0..k {
                f[(t, r)] = b1.column(r).dot(&xb2.column(r));
            }
        }
        let gram = (b1.transpose() * b1).component_mul(&(b2.transpose() * b2));
        Some(f * gram.try_inverse()?)
    };
    let update_factor = |other: &DMatrix<f64>, c: &DMatrix<f64>| -> Option<DMatrix<f64>> {
        let mut num = DMatrix::zeros(k, k);
        for (t, x) in slices.iter().enumerate() {
            let xo = x * other;
            for r in 0..k {
                let w = c[(t, r)];
                let mut col = num.column_mut(r);
                col.axpy(w, &xo.column(r), 1.0);
            }
        }
        let gram = (other.transpose() * other).component_mul(&(c.transpose() * c));
        Some(num * gram.try_inverse()?)
    };
    let residual = |b1: &DMatrix<f64>, b2: &DMatrix<f64>, c: &DMatrix<f64>| -> f64 {
        let mut acc = 0.0;
        for (t, x) in slices.iter().enumerate() {
            let mut scaled = b1.clone();
            for r in 0..k {
                scaled.column_mut(r).scale_mut(c[(t, r)]);
            }
            acc += (x - scaled * b2.transpose()).norm_squared();
        }
        acc / total.max(f64::MIN_POSITIVE)
    };

    let mut c = update_c(&b1, &b2)?;
    let mut prev = f64::INFINITY;
    let mut res = f64::INFINITY;
    for _ in 0..opts.max_iters {
        b1 = linalg::normalize_columns(&update_factor(&b2, &c)?);
        b2 = linalg::normalize_columns(&update_factor(&b1, &c)?);
        c = update_c(&b1, &b2)?;
        res = residual(&b1, &b2, &c);
        if !res.is_finite() {
            return None;
        }
        if (prev.is_finite() && (prev - res).abs() <= opts.tol * prev) || res < 1e-28 {
            break;
        }
        prev = res;
    }
    let mut z = DMatrix::zeros(k, k);
    for r in 0..k {
        let (u, v) = (b1.column(r), b2.column(r));
        let sign = if u.dot(&v) < 0.0 { -1.0 } else { 1.0 };
        let mut row = (u + v * sign).into_owned();
        let norm = row.norm();
        if !(norm > 0.0) {
            return None;
        }
        row /= norm;
        canonical_sign(&mut row);
        z.set_row(r, &row.transpose());
    }
    Some(AlsFit { z, residual: res })
}

/// Rank-`k` CP fit of `num_probes` random members of the span, restarted
/// `restarts` times; the lowest-residual fit wins (ties by restart index).
/// Restart 0 starts from `init` rows when given.
pub fn robust_recover_z(
    basis: &SubspaceBasis,
    opts: &AlsOptions,
    seed: u64,
    init: Option<&DMatrix<f64>>,
) -> Result<ZRecovery> {
    let k = basis.k;
    let num_probes = opts.num_probes.unwrap_or(10 * k);
    if num_probes < k {
        return Err(Error::Config(format!("need at least k={k} probes, got {num_probes}")));
    }
    if opts.restarts == 0 {
        return Err(Error::Config("need at least one restart".into()));
    }
    let mut rng = seeds::rng(seeds::derive(seed, "als-probes"));
    let slices: Vec<DMatrix<f64>> =
        (0..num_probes).map(|_| basis.member(&linalg::gaussian_vector(k, &mut rng))).collect();

    let fits: Vec<Option<AlsFit>> = (0..opts.restarts)
        .into_par_iter()
        .map(|r| {
            let start = match (r, init) {
                (0, Some(z)) => z.transpose(),
                _ => linalg::gaussian_matrix(k, k, &mut seeds::rng(seeds::derive_indexed(seed, "als-init", r as u64))),
            };
            als_fit(&slices, start, opts)
        })
        .collect();
    let best = fits
        .into_iter()
        .flatten()
        .enumerate()
        .min_by(|(i, a), (j, b)| a.residual.total_cmp(&b.residual).then(i.cmp(j)))
        .map(|(_, f)| f);
    match best {
        Some(fit) => Ok(ZRecovery {
            z: fit.z,
            method: Some(ZMethod::Als),
            eigenvalues: Vec::new(),
            probe_seed: seed,
            max_imag: 0.0,
            attempts: opts.restarts,
            residual: Some(fit.residual),
        }),
        None => Err(Error::ConvergenceFailure { best_residual: f64::INFINITY }),
    }
}
