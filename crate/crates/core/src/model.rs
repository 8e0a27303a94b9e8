//! Ground-truth networks, sign-symmetric input distributions and sampling.
//!
//! The teacher is `y = A relu(W x) + xi` with `W` of shape `k x d`, `A` of
//! shape `l x k` (`l >= k`) and `xi ~ N(0, noise_sigma^2 I_l)`.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, MatrixFormat};
use crate::linalg::{self, relu};
use crate::seeds;

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    /// First layer, `k x d`; row `i` is `w_i`.
    pub w: DMatrix<f64>,
    /// Second layer, `l x k`; column `i` is `a_i`.
    pub a: DMatrix<f64>,
    pub noise_sigma: f64,
}

/// JSON form of [`NetworkParams`]: matrices as nested row arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamsDoc {
    pub w: Vec<Vec<f64>>,
    pub a: Vec<Vec<f64>>,
    #[serde(default)]
    pub noise_sigma: f64,
}

impl NetworkParams {
    pub fn new(w: DMatrix<f64>, a: DMatrix<f64>, noise_sigma: f64) -> Result<Self> {
        let (k, d) = w.shape();
        let (l, ka) = a.shape();
        if k == 0 || d == 0 {
            return Err(Error::Config("W must be non-empty".into()));
        }
        if ka != k {
            return Err(Error::Shape(format!("A is {l}x{ka} but W has {k} rows")));
        }
        if k > d {
            return Err(Error::Config(format!("hidden width k={k} exceeds input dim d={d}")));
        }
        if k > l {
            return Err(Error::Config(format!("hidden width k={k} exceeds output dim l={l}")));
        }
        if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma must be finite and >= 0, got {noise_sigma}")));
        }
        if w.iter().chain(a.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite weight".into()));
        }
        Ok(Self { w, a, noise_sigma })
    }

    /// Random instance with orthonormal rows of `W` and orthonormal columns of `A`.
    pub fn random_orthonormal(k: usize, d: usize, l: usize, noise_sigma: f64, seed: u64) -> Result<Self> {
        if k > d || k > l {
            return Err(Error::Config(format!("need k <= d and k <= l, got k={k}, d={d}, l={l}")));
        }
        let mut rng = seeds::rng(seeds::derive(seed, "instance"));
        let w = linalg::random_orthonormal(k, d, &mut rng);
        let a = linalg::random_orthonormal(l, k, &mut rng);
        Self::new(w, a, noise_sigma)
    }

    pub fn k(&self) -> usize {
        self.w.nrows()
    }

    pub fn d(&self) -> usize {
        self.w.ncols()
    }

    pub fn l(&self) -> usize {
        self.a.nrows()
    }

    /// Rescales every row of `W` to unit norm and pushes the scale into the
    /// matching column of `A`; the network function is unchanged.
    pub fn canonicalize(&self) -> Result<Self> {
        let mut w = self.w.clone();
        let mut a = self.a.clone();
        for i in 0..self.k() {
            let n = w.row(i).norm();
            if n == 0.0 {
                return Err(Error::ZeroRow(i));
            }
            w.row_mut(i).scale_mut(1.0 / n);
            a.column_mut(i).scale_mut(n);
        }
        Ok(Self { w, a, noise_sigma: self.noise_sigma })
    }

    /// Noise-free outputs `relu(X W^T) A^T`, one row per input row.
    pub fn forward_clean(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.d() {
            return Err(Error::Shape(format!("inputs have {} columns, expected d={}", x.ncols(), self.d())));
        }
        let hidden = (x * self.w.transpose()).map(relu);
        Ok(hidden * self.a.transpose())
    }

    /// Outputs with label noise drawn from per-row streams of `noise_seed`.
    pub fn forward(&self, x: &DMatrix<f64>, noise_seed: u64) -> Result<DMatrix<f64>> {
        let mut y = self.forward_clean(x)?;
        if self.noise_sigma > 0.0 {
            let noise = gaussian_rows(x.nrows(), self.l(), noise_seed);
            y += noise * self.noise_sigma;
        }
        Ok(y)
    }

    pub fn to_doc(&self) -> ParamsDoc {
        ParamsDoc {
            w: linalg::to_rows(&self.w),
            a: linalg::to_rows(&self.a),
            noise_sigma: self.noise_sigma,
        }
    }

    pub fn from_doc(doc: &ParamsDoc) -> Result<Self> {
        Self::new(linalg::from_rows(&doc.w)?, linalg::from_rows(&doc.a)?, doc.noise_sigma)
    }
}

fn gaussian_rows(n: usize, width: usize, seed: u64) -> DMatrix<f64> {
    let mut data = vec![0.0; n * width];
    if width > 0 {
        data.par_chunks_mut(width).enumerate().for_each(|(row, out)| {
            let mut rng = seeds::row_rng(seed, row as u64);
            for v in out.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
        });
    }
    DMatrix::from_row_slice(n, width, &data)
}

/// One pair of mirrored mixture components `N(+mean, cov)` and `N(-mean, cov)`,
/// each with probability `weight / 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Covariance; identity when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cov: Option<Vec<Vec<f64>>>,
}

/// A sign-symmetric input distribution (`p(x) = p(-x)`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum DistributionSpec {
    StandardGaussian {
        dim: usize,
    },
    /// `x = Q g` with `g` standard normal, i.e. `N(0, Q Q^T)`.
    ShapedGaussian {
        q: Vec<Vec<f64>>,
    },
    SymmetricMixture {
        dim: usize,
        components: Vec<MixtureComponent>,
    },
    /// Uniform draw from the rows of a dataset, with a uniformly random sign.
    SymmetrizedEmpirical {
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        rows: Vec<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        path: Option<PathBuf>,
    },
    /// Draws from `base` with probability `1 - lambda` and from `N(0, Q Q^T)`
    /// with probability `lambda`.
    QLambdaMixture {
        base: Box<DistributionSpec>,
        q: Vec<Vec<f64>>,
        lambda: f64,
    },
}

impl DistributionSpec {
    pub fn standard_gaussian(dim: usize) -> Self {
        DistributionSpec::StandardGaussian { dim }
    }

    pub fn dim(&self) -> usize {
        match self {
            DistributionSpec::StandardGaussian { dim } => *dim,
            DistributionSpec::ShapedGaussian { q } => q.len(),
            DistributionSpec::SymmetricMixture { dim, .. } => *dim,
            DistributionSpec::SymmetrizedEmpirical { rows, path } => match rows.first() {
                Some(r) => r.len(),
                None => path
                    .as_ref()
                    .and_then(|p| crate::io::read_matrix(p).ok())
                    .map_or(0, |m| m.ncols()),
            },
            DistributionSpec::QLambdaMixture { base, .. } => base.dim(),
        }
    }

    pub fn is_standard_gaussian(&self) -> bool {
        matches!(self, DistributionSpec::StandardGaussian { .. })
    }

    pub fn validate(&self) -> Result<()> {
        self.compile().map(|_| ())
    }

    /// Resolves file handles and factorizations once, ahead of sampling.
    pub fn compile(&self) -> Result<Sampler> {
        let kind = match self {
            DistributionSpec::StandardGaussian { dim } => {
                if *dim == 0 {
                    return Err(Error::Config("dimension must be positive".into()));
                }
                SamplerKind::Standard
            }
            DistributionSpec::ShapedGaussian { q } => SamplerKind::Shaped(square(q, "Q")?),
            DistributionSpec::SymmetricMixture { dim, components } => {
                if *dim == 0 || components.is_empty() {
                    return Err(Error::Config("mixture needs a positive dimension and components".into()));
                }
                let total: f64 = components.iter().map(|c| c.weight).sum();
                if components.iter().any(|c| !(c.weight > 0.0)) || (total - 1.0).abs() > 1e-9 {
                    return Err(Error::Config(format!(
                        "mixture weights must be positive and sum to 1 (sum {total})"
                    )));
                }
                let mut cumulative = Vec::with_capacity(components.len());
                let mut means = Vec::with_capacity(components.len());
                let mut factors = Vec::with_capacity(components.len());
                let mut acc = 0.0;
                for c in components {
                    if c.mean.len() != *dim {
                        return Err(Error::Config(format!(
                            "component mean has length {}, expected {dim}",
                            c.mean.len()
                        )));
                    }
                    acc += c.weight / total;
                    cumulative.push(acc);
                    means.push(DVector::from_vec(c.mean.clone()));
                    factors.push(match &c.cov {
                        None => None,
                        Some(cov) => {
                            let cov = square(cov, "component covariance")?;
                            if cov.nrows() != *dim {
                                return Err(Error::Config("component covariance has wrong size".into()));
                            }
                            let chol = cov.cholesky().ok_or_else(|| {
                                Error::Config("component covariance is not positive definite".into())
                            })?;
                            Some(chol.l())
                        }
                    });
                }
                SamplerKind::Mixture { cumulative, means, factors }
            }
            DistributionSpec::SymmetrizedEmpirical { rows, path } => {
                let data = if !rows.is_empty() {
                    linalg::from_rows(rows)?
                } else if let Some(p) = path {
                    crate::io::read_matrix(p)?
                } else {
                    return Err(Error::Config("empirical distribution needs rows or a path".into()));
                };
                if data.nrows() == 0 || data.ncols() == 0 {
                    return Err(Error::Config("empirical dataset is empty".into()));
                }
                SamplerKind::Empirical(data)
            }
            DistributionSpec::QLambdaMixture { base, q, lambda } => {
                if !(*lambda > 0.0 && *lambda <= 1.0) {
                    return Err(Error::Config(format!("lambda must lie in (0, 1], got {lambda}")));
                }
                let q = square(q, "Q")?;
                let base = base.compile()?;
                if q.nrows() != base.dim {
                    return Err(Error::Config(format!(
                        "Q is {}x{} but the base distribution has dim {}",
                        q.nrows(),
                        q.ncols(),
                        base.dim
                    )));
                }
                SamplerKind::QLambda { base: Box::new(base), q, lambda: *lambda }
            }
        };
        Ok(Sampler { dim: self.dim(), kind })
    }
}

fn square(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let m = linalg::from_rows(rows).map_err(|_| Error::Config(format!("{what} has ragged rows")))?;
    if !m.is_square() || m.nrows() == 0 {
        return Err(Error::Config(format!("{what} must be square and non-empty, got {}x{}", m.nrows(), m.ncols())));
    }
    Ok(m)
}

#[derive(Debug, Clone)]
enum SamplerKind {
    Standard,
    Shaped(DMatrix<f64>),
    Mixture {
        cumulative: Vec<f64>,
        means: Vec<DVector<f64>>,
        factors: Vec<Option<DMatrix<f64>>>,
    },
    Empirical(DMatrix<f64>),
    QLambda {
        base: Box<Sampler>,
        q: DMatrix<f64>,
        lambda: f64,
    },
}

/// A compiled [`DistributionSpec`].
#[derive(Debug, Clone)]
pub struct Sampler {
    dim: usize,
    kind: SamplerKind,
}

impl Sampler {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim);
        match &self.kind {
            SamplerKind::Standard => {
                for v in out.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
            }
            SamplerKind::Shaped(q) => shaped(q, rng, out),
            SamplerKind::Mixture { cumulative, means, factors } => {
                let u: f64 = rng.random();
                let c = cumulative.iter().position(|&p| u < p).unwrap_or(cumulative.len() - 1);
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                match &factors[c] {
                    None => {
                        for (o, m) in out.iter_mut().zip(means[c].iter()) {
                            *o = sign * m + rng.sample::<f64, _>(StandardNormal);
                        }
                    }
                    Some(l) => {
                        shaped(l, rng, out);
                        for (o, m) in out.iter_mut().zip(means[c].iter()) {
                            *o += sign * m;
                        }
                    }
                }
            }
            SamplerKind::Empirical(data) => {
                let i = rng.random_range(0..data.nrows());
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                for (j, o) in out.iter_mut().enumerate() {
                    *o = sign * data[(i, j)];
                }
            }
            SamplerKind::QLambda { base, q, lambda } => {
                let u: f64 = rng.random();
                if u < *lambda {
                    shaped(q, rng, out);
                } else {
                    base.sample_into(rng, out);
                }
            }
        }
    }

    /// `n` rows, row `i` drawn from stream `i` of `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> DMatrix<f64> {
        let d = self.dim;
        let mut data = vec![0.0; n * d];
        data.par_chunks_mut(d).enumerate().for_each(|(row, out)| {
            let mut rng = seeds::row_rng(seed, row as u64);
            self.sample_into(&mut rng, out);
        });
        DMatrix::from_row_slice(n, d, &data)
    }

    /// Row `row` of `self.sample(_, seed)`, without materializing the matrix.
    pub fn sample_row(&self, seed: u64, row: usize, out: &mut [f64]) {
        let mut rng = seeds::row_rng(seed, row as u64);
        self.sample_into(&mut rng, out);
    }
}

fn shaped<R: Rng + ?Sized>(q: &DMatrix<f64>, rng: &mut R, out: &mut [f64]) {
    let g: Vec<f64> = (0..q.ncols()).map(|_| rng.sample(StandardNormal)).collect();
    for (i, o) in out.iter_mut().enumerate() {
        *o = (0..q.ncols()).map(|j| q[(i, j)] * g[j]).sum();
    }
}

/// Paired inputs and outputs.
#[derive(Debug, Clone)]
pub struct SampleSet {
    /// `n x d`, one sample per row.
    pub x: DMatrix<f64>,
    /// `n x l`.
    pub y: DMatrix<f64>,
    pub seed: u64,
    pub spec: Option<DistributionSpec>,
}

impl SampleSet {
    pub fn new(x: DMatrix<f64>, y: DMatrix<f64>, seed: u64, spec: Option<DistributionSpec>) -> Result<Self> {
        if x.nrows() != y.nrows() {
            return Err(Error::Shape(format!("X has {} rows but Y has {}", x.nrows(), y.nrows())));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite sample entry".into()));
        }
        Ok(Self { x, y, seed, spec })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn l(&self) -> usize {
        self.y.ncols()
    }

    /// Rows `range` as a new sample set.
    pub fn slice(&self, range: std::ops::Range<usize>) -> SampleSet {
        let len = range.end - range.start;
        SampleSet {
            x: self.x.rows(range.start, len).into_owned(),
            y: self.y.rows(range.start, len).into_owned(),
            seed: self.seed,
            spec: self.spec.clone(),
        }
    }

    /// First `floor(n/2)` rows and the remainder.
    pub fn split_halves(&self) -> (SampleSet, SampleSet) {
        let half = self.n() / 2;
        (self.slice(0..half), self.slice(half..self.n()))
    }

    pub fn concat(&self, other: &SampleSet) -> Result<SampleSet> {
        if self.d() != other.d() || self.l() != other.l() {
            return Err(Error::Shape("cannot concatenate sample sets of different widths".into()));
        }
        let mut x = DMatrix::zeros(self.n() + other.n(), self.d());
        let mut y = DMatrix::zeros(self.n() + other.n(), self.l());
        x.rows_mut(0, self.n()).copy_from(&self.x);
        x.rows_mut(self.n(), other.n()).copy_from(&other.x);
        y.rows_mut(0, self.n()).copy_from(&self.y);
        y.rows_mut(self.n(), other.n()).copy_from(&other.y);
        Ok(SampleSet { x, y, seed: self.seed, spec: self.spec.clone() })
    }

    /// Same inputs with outputs mapped through `y -> P^T y`.
    pub fn project_outputs(&self, p: &DMatrix<f64>) -> SampleSet {
        SampleSet {
            x: self.x.clone(),
            y: &self.y * p,
            seed: self.seed,
            spec: self.spec.clone(),
        }
    }

    /// Writes `X`, `Y` and `manifest.json`.
    pub fn write_dir(&self, dir: &Path, format: MatrixFormat) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        io::write_matrix(&format.path_in(dir, "X"), &self.x, format)?;
        io::write_matrix(&format.path_in(dir, "Y"), &self.y, format)?;
        io::write_json(
            &dir.join("manifest.json"),
            &SamplesManifest { n: self.n(), d: self.d(), l: self.l(), seed: self.seed, format, spec: self.spec.clone() },
        )
    }

    /// Reads `X` and `Y` (either format); the manifest is optional.
    pub fn read_dir(dir: &Path) -> Result<SampleSet> {
        let manifest_path = dir.join("manifest.json");
        let manifest: Option<SamplesManifest> =
            if manifest_path.exists() { Some(io::read_json(&manifest_path)?) } else { None };
        let x = io::read_matrix(&io::find_matrix(dir, "X")?)?;
        let y = io::read_matrix(&io::find_matrix(dir, "Y")?)?;
        if let Some(m) = &manifest {
            if (m.n, m.d, m.l) != (x.nrows(), x.ncols(), y.ncols()) {
                return Err(Error::Data(format!(
                    "manifest says n={}, d={}, l={} but files hold {}x{} and {}x{}",
                    m.n,
                    m.d,
                    m.l,
                    x.nrows(),
                    x.ncols(),
                    y.nrows(),
                    y.ncols()
                )));
            }
        }
        let (seed, spec) = manifest.map_or((0, None), |m| (m.seed, m.spec));
        SampleSet::new(x, y, seed, spec).map_err(|e| match e {
            Error::Shape(msg) => Error::Data(msg),
            other => other,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplesManifest {
    pub n: usize,
    pub d: usize,
    pub l: usize,
    pub seed: u64,
    pub format: MatrixFormat,
    pub spec: Option<DistributionSpec>,
}

/// `n` inputs from `spec`, row `i` drawn from stream `i` of `seed`.
pub fn sample_inputs(spec: &DistributionSpec, n: usize, seed: u64) -> Result<DMatrix<f64>> {
    if n == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    Ok(spec.compile()?.sample(n, seed))
}

/// Inputs and teacher outputs. Inputs use substream `"inputs"` of `seed`,
/// label noise substream `"noise"`.
pub fn draw_samples(params: &NetworkParams, spec: &DistributionSpec, n: usize, seed: u64) -> Result<SampleSet> {
    if spec.dim() != params.d() {
        return Err(Error::Shape(format!(
            "distribution has dim {} but the network expects d={}",
            spec.dim(),
            params.d()
        )));
    }
    let x = sample_inputs(spec, n, seeds::derive(seed, "inputs"))?;
    let y = params.forward(&x, seeds::derive(seed, "noise"))?;
    SampleSet::new(x, y, seed, Some(spec.clone()))
}

/// `[X; -X]`: the negation-augmented dataset, exactly symmetric.
pub fn symmetrize_dataset(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let mut out = DMatrix::zeros(2 * n, x.ncols());
    out.rows_mut(0, n).copy_from(x);
    out.rows_mut(n, n).copy_from(&(-x));
    out
}

/// `W + rho E` with `E` i.i.d. standard normal.
pub fn perturb_weights(w: &DMatrix<f64>, rho: f64, seed: u64) -> Result<DMatrix<f64>> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::Config(format!("perturbation size must be positive, got {rho}")));
    }
    let mut rng = seeds::rng(seed);
    let e = linalg::gaussian_matrix(w.nrows(), w.ncols(), &mut rng);
    Ok(w + e * rho)
}

/// `U diag(lambda^0, lambda^-1, ..) V^T` with random orthogonal `U, V` and
/// `lambda^(k-1) = kappa`, so the condition number is exactly `kappa`.
pub fn condition_controlled_matrix(k: usize, kappa: f64, seed: u64) -> Result<DMatrix<f64>> {
    if !(kappa >= 1.0 && kappa.is_finite()) {
        return Err(Error::Config(format!("condition number must be >= 1, got {kappa}")));
    }
    if k == 0 {
        return Err(Error::Config("dimension must be positive".into()));
    }
    if k == 1 && kappa != 1.0 {
        return Err(Error::Config("a 1x1 matrix always has condition number 1".into()));
    }
    let ratio = if k > 1 { kappa.powf(1.0 / (k as f64 - 1.0)) } else { 1.0 };
    let mut rng = seeds::rng(seed);
    let u = linalg::random_orthonormal(k, k, &mut rng);
    let v = linalg::random_orthonormal(k, k, &mut rng);
    let sigma = DMatrix::from_diagonal(&DVector::from_iterator(k, (0..k).map(|i| ratio.powi(-(i as i32)))));
    Ok(u * sigma * v.transpose())
}
