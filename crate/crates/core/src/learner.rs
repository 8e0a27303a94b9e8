//! End-to-end recovery of `(W, A)`.
//!
//! The pipeline estimates moments on the first half of the samples, builds
//! the detector, extracts the pure-neuron directions `z_i`, then uses the
//! second half to fix their signs and to fit each single neuron `z_i . y`
//! with the closed-form one-layer estimator `2 C^-1 E[y x]`.

use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::detector::{self, GapReport, Variant};
use crate::error::{Error, Result};
use crate::io::{self, MatrixFormat};
use crate::linalg::{self, relu};
use crate::moments::{self, MomentSet};
use crate::model::SampleSet;
use crate::spectral::{self, AlsOptions, SimDiagOptions, ZMethod, ZRecovery};

/// Closed-form single-neuron estimate `2 C^-1 v` with `C = E[x x^T]`, `v = E[y x]`.
pub fn learn_single_layer(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let n = x.nrows();
    if n == 0 {
        return Err(Error::EmptyInput("no samples for single-layer fit".into()));
    }
    if y.len() != n {
        return Err(Error::Shape(format!("{} inputs but {} targets", n, y.len())));
    }
    let c = x.transpose() * x / n as f64;
    let v = x.transpose() * y / n as f64;
    single_layer_from_moments(&c, &v)
}

pub fn single_layer_from_moments(c: &DMatrix<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(linalg::guarded_spd_inverse(c)? * v * 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GdOptions {
    pub lr: f64,
    pub iters: usize,
}

impl Default for GdOptions {
    fn default() -> Self {
        Self { lr: 0.1, iters: 2000 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnOptions {
    pub variant: Variant,
    pub z_method: ZMethod,
    pub simdiag: SimDiagOptions,
    pub als: AlsOptions,
    /// Route `l > k` outputs through the column-span reduction.
    pub nonsquare: bool,
    /// Refit `W` by gradient descent with the recovered `A` held fixed.
    pub refine: Option<GdOptions>,
    pub seed: u64,
}

impl Default for LearnOptions {
    fn default() -> Self {
        Self {
            variant: Variant::Noisy,
            z_method: ZMethod::Eigen,
            simdiag: SimDiagOptions::default(),
            als: AlsOptions::default(),
            nonsquare: false,
            refine: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitInfo {
    /// Rows `[start, end)` of the caller's sample set.
    pub moment_rows: (usize, usize),
    pub fit_rows: (usize, usize),
    /// Rows used for the column-span reduction, if any.
    pub projection_rows: Option<(usize, usize)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Diagnostics {
    pub variant: Variant,
    pub split: Option<SplitInfo>,
    pub gap: GapReport,
    pub source_gap: Option<f64>,
    pub z: ZRecovery,
    pub sign_margins: Vec<f64>,
    pub ambiguous_signs: Vec<usize>,
    pub projection_singular_values: Option<Vec<f64>>,
    pub refinement: Option<GdReport>,
    pub runtime_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct RecoveryResult {
    /// `k x d`, rows `v_i = lambda_i w_i`.
    pub v: DMatrix<f64>,
    /// `k x k`, rows `z_i` (in reduced output coordinates when projected).
    pub z: DMatrix<f64>,
    /// `l x k`: `Z^-1`, or `P Z^-1` after a column-span reduction.
    pub a_hat: DMatrix<f64>,
    pub projection: Option<DMatrix<f64>>,
    pub diagnostics: Diagnostics,
}

impl RecoveryResult {
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        predict(&self.v, &self.a_hat, x)
    }

    /// `V`, `Z`, `A_hat` (and `P` when projected) plus `diagnostics.json`.
    pub fn write_dir(&self, dir: &Path, format: MatrixFormat) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        io::write_matrix(&format.path_in(dir, "V"), &self.v, format)?;
        io::write_matrix(&format.path_in(dir, "Z"), &self.z, format)?;
        io::write_matrix(&format.path_in(dir, "A_hat"), &self.a_hat, format)?;
        if let Some(p) = &self.projection {
            io::write_matrix(&format.path_in(dir, "P"), p, format)?;
        }
        io::write_json(&dir.join("diagnostics.json"), &self.diagnostics)
    }

    /// Reads `V` and `A_hat` back; enough to predict and score.
    pub fn read_network(dir: &Path) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let v = io::read_matrix(&io::find_matrix(dir, "V")?)?;
        let a_hat = io::read_matrix(&io::find_matrix(dir, "A_hat")?)?;
        if a_hat.ncols() != v.nrows() {
            return Err(Error::Data("A_hat and V disagree on the hidden width".into()));
        }
        Ok((v, a_hat))
    }
}

/// Rows `A_hat relu(V x)`.
pub fn predict(v: &DMatrix<f64>, a_hat: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.ncols() != v.ncols() {
        return Err(Error::Shape(format!("inputs have {} columns, expected {}", x.ncols(), v.ncols())));
    }
    if a_hat.ncols() != v.nrows() {
        return Err(Error::Shape("A_hat and V disagree on the hidden width".into()));
    }
    Ok((x * v.transpose()).map(relu) * a_hat.transpose())
}

fn check_dims(d: usize, l: usize, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    if k > d || k > l {
        return Err(Error::Config(format!("k={k} exceeds min(d={d}, l={l})")));
    }
    Ok(())
}

struct DirectionStage {
    gap: GapReport,
    source_gap: Option<f64>,
    z: ZRecovery,
}

fn recover_directions(m: &MomentSet, k: usize, opts: &LearnOptions) -> Result<DirectionStage> {
    let t = detector::build_t(m, k, opts.variant)?;
    let basis = spectral::nullspace_basis(&t)?;
    let z = match opts.z_method {
        ZMethod::Eigen => spectral::simultaneous_diagonalize(&basis, opts.seed, &opts.simdiag)?,
        ZMethod::Als => {
            let init = spectral::simultaneous_diagonalize(&basis, opts.seed, &opts.simdiag).ok();
            spectral::robust_recover_z(&basis, &opts.als, opts.seed, init.as_ref().map(|r| &r.z))?
        }
    };
    Ok(DirectionStage { gap: t.gap, source_gap: basis.source_gap, z })
}

fn invert_directions(z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    z.clone()
        .try_inverse()
        .filter(|inv| inv.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Numerical("recovered direction matrix Z is singular".into()))
}

/// Full pipeline on samples whose outputs have exactly `k` coordinates (or
/// more, with `opts.nonsquare`).
pub fn learn_two_layer(samples: &SampleSet, k: usize, opts: &LearnOptions) -> Result<RecoveryResult> {
    let start = Instant::now();
    let (n, d, l) = (samples.n(), samples.d(), samples.l());
    if n < 2 {
        return Err(Error::EmptyInput(format!("need at least 2 samples, got {n}")));
    }
    check_dims(d, l, k)?;
    if l > k && !opts.nonsquare {
        return Err(Error::Config(format!(
            "outputs have l={l} > k={k} coordinates; enable the non-square reduction"
        )));
    }
    let mut result = if l > k {
        let reduction = reduce_nonsquare(samples, k)?;
        let half = n / 2;
        let mut inner = learn_square(&reduction.reduced, k, opts)?;
        inner.a_hat = &reduction.p * &inner.a_hat;
        if let Some(split) = inner.diagnostics.split.as_mut() {
            split.moment_rows = (split.moment_rows.0 + half, split.moment_rows.1 + half);
            split.fit_rows = (split.fit_rows.0 + half, split.fit_rows.1 + half);
            split.projection_rows = Some((0, half));
        }
        inner.diagnostics.projection_singular_values = Some(reduction.singular_values);
        inner.projection = Some(reduction.p);
        inner
    } else {
        learn_square(samples, k, opts)?
    };
    if let Some(gd) = opts.refine {
        let report = refine_w_gd(&result.a_hat, &result.v, samples, gd.lr, gd.iters)?;
        result.v = report.w.clone();
        result.diagnostics.refinement = Some(report.summary());
    }
    result.diagnostics.runtime_seconds = start.elapsed().as_secs_f64();
    Ok(result)
}

fn learn_square(samples: &SampleSet, k: usize, opts: &LearnOptions) -> Result<RecoveryResult> {
    let (first, second) = samples.split_halves();
    if first.n() == 0 || second.n() == 0 {
        return Err(Error::EmptyInput("each half of the samples must be non-empty".into()));
    }
    let m = moments::estimate_moments(&first)?;
    let stage = recover_directions(&m, k, opts)?;
    let signs = spectral::fix_signs(&stage.z.z, &second)?;
    let z = signs.z;
    let mut v = DMatrix::zeros(k, samples.d());
    for i in 0..k {
        let target = &second.y * z.row(i).transpose();
        v.set_row(i, &learn_single_layer(&second.x, &target)?.transpose());
    }
    let a_hat = invert_directions(&z)?;
    let half = first.n();
    Ok(RecoveryResult {
        v,
        z,
        a_hat,
        projection: None,
        diagnostics: Diagnostics {
            variant: opts.variant,
            split: Some(SplitInfo {
                moment_rows: (0, half),
                fit_rows: (half, samples.n()),
                projection_rows: None,
            }),
            gap: stage.gap,
            source_gap: stage.source_gap,
            z: stage.z,
            sign_margins: signs.margins,
            ambiguous_signs: signs.ambiguous,
            projection_singular_values: None,
            refinement: None,
            runtime_seconds: 0.0,
        },
    })
}

/// The pipeline driven by a single moment set (no sample split), e.g.
/// population moments. Signs come from `E[y]`, neurons from `2 C2^-1 Cyx^T z_i`.
pub fn learn_two_layer_from_moments(m: &MomentSet, k: usize, opts: &LearnOptions) -> Result<RecoveryResult> {
    let start = Instant::now();
    check_dims(m.d, m.l, k)?;
    if m.l > k && !opts.nonsquare {
        return Err(Error::Config(format!(
            "outputs have l={} > k={k} coordinates; enable the non-square reduction",
            m.l
        )));
    }
    let (reduced, p, psv) = if m.l > k {
        let (p, sv) = column_span(&m.cyx, k)?;
        (m.project_outputs(&p)?, Some(p), Some(sv))
    } else {
        (m.clone(), None, None)
    };
    let stage = recover_directions(&reduced, k, opts)?;
    let signs = spectral::fix_signs_with_mean(&stage.z.z, &reduced.ey, &vec![0.0; k]);
    let z = signs.z;
    let c_inv = linalg::guarded_spd_inverse(&reduced.c2)?;
    let v = (&c_inv * reduced.cyx.transpose() * z.transpose() * 2.0).transpose();
    let z_inv = invert_directions(&z)?;
    let a_hat = match &p {
        Some(p) => p * &z_inv,
        None => z_inv,
    };
    Ok(RecoveryResult {
        v,
        z,
        a_hat,
        projection: p,
        diagnostics: Diagnostics {
            variant: opts.variant,
            split: None,
            gap: stage.gap,
            source_gap: stage.source_gap,
            z: stage.z,
            sign_margins: signs.margins,
            ambiguous_signs: signs.ambiguous,
            projection_singular_values: psv,
            refinement: None,
            runtime_seconds: start.elapsed().as_secs_f64(),
        },
    })
}

/// Top-`k` left singular vectors of `E[y x^T]`, refusing a numerically rank-deficient span.
fn column_span(cyx: &DMatrix<f64>, k: usize) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let (p, sv) = linalg::top_left_singular(cyx, k)?;
    let smax = sv.first().copied().unwrap_or(0.0);
    let sk = sv.get(k - 1).copied().unwrap_or(0.0);
    if !(sk > 1e-10 * smax) {
        return Err(Error::RankDeficiency { rank: k, sigma: sk, sigma_max: smax });
    }
    Ok((p, sv))
}

#[derive(Debug, Clone)]
pub struct Reduction {
    /// `l x k`, orthonormal columns spanning the estimated column span of `A`.
    pub p: DMatrix<f64>,
    /// Second half of the samples with outputs `P^T y`.
    pub reduced: SampleSet,
    pub singular_values: Vec<f64>,
}

/// Column-span reduction for `l > k`: `P` from the first half, the second
/// half projected onto it.
pub fn reduce_nonsquare(samples: &SampleSet, k: usize) -> Result<Reduction> {
    check_dims(samples.d(), samples.l(), k)?;
    let (first, second) = samples.split_halves();
    if first.n() == 0 || second.n() == 0 {
        return Err(Error::EmptyInput("each half of the samples must be non-empty".into()));
    }
    let cyx = first.y.transpose() * &first.x / first.n() as f64;
    let (p, sv) = column_span(&cyx, k)?;
    let reduced = second.project_outputs(&p);
    Ok(Reduction { p, reduced, singular_values: sv })
}

/// Mean squared error `||Y - relu(X W^T) A^T||^2 / (n l)` and its gradient in `W`.
/// The ReLU derivative at 0 is taken as 0.
pub fn gd_loss_and_grad(
    a: &DMatrix<f64>,
    w: &DMatrix<f64>,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
) -> (f64, DMatrix<f64>) {
    let scale = 1.0 / (x.nrows() * y.ncols()) as f64;
    let pre = x * w.transpose();
    let resid = pre.map(relu) * a.transpose() - y;
    let loss = resid.norm_squared() * scale;
    let mut dpre = resid * a * (2.0 * scale);
    dpre.zip_apply(&pre, |g, p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
    (loss, dpre.transpose() * x)
}

#[derive(Debug, Clone)]
pub struct GdOutcome {
    pub w: DMatrix<f64>,
    pub losses: Vec<f64>,
    pub final_lr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GdReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub accepted_steps: usize,
    pub final_lr: f64,
}

impl GdOutcome {
    pub fn summary(&self) -> GdReport {
        GdReport {
            initial_loss: self.losses.first().copied().unwrap_or(f64::NAN),
            final_loss: self.losses.last().copied().unwrap_or(f64::NAN),
            accepted_steps: self.losses.len().saturating_sub(1),
            final_lr: self.final_lr,
        }
    }
}

/// Full-batch gradient descent on `W` with `A` fixed. A step that raises the
/// loss is rejected and the rate halved; `losses` records accepted iterates.
pub fn refine_w_gd(
    a_fixed: &DMatrix<f64>,
    w_init: &DMatrix<f64>,
    samples: &SampleSet,
    lr: f64,
    iters: usize,
) -> Result<GdOutcome> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    if a_fixed.ncols() != w_init.nrows() || a_fixed.nrows() != samples.l() || w_init.ncols() != samples.d() {
        return Err(Error::Shape("A, W and the samples disagree on dimensions".into()));
    }
    let mut w = w_init.clone();
    let (mut loss, mut grad) = gd_loss_and_grad(a_fixed, &w, &samples.x, &samples.y);
    if !loss.is_finite() {
        return Err(Error::Divergence { iteration: 0 });
    }
    let mut losses = vec![loss];
    let mut rate = lr;
    for iteration in 1..=iters {
        if grad.norm() == 0.0 || rate < 1e-12 {
            break;
        }
        let candidate = &w - &grad * rate;
        let (cand_loss, cand_grad) = gd_loss_and_grad(a_fixed, &candidate, &samples.x, &samples.y);
        if !cand_loss.is_finite() {
            return Err(Error::Divergence { iteration });
        }
        if cand_loss <= loss {
            w = candidate;
            loss = cand_loss;
            grad = cand_grad;
            losses.push(loss);
        } else {
            rate *= 0.5;
        }
    }
    Ok(GdOutcome { w, losses, final_lr: rate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{self, DistributionSpec, NetworkParams};
    use crate::moments::analytic_gaussian_moments;

    #[test]
    fn single_neuron_closed_loop_on_exact_moments() {
        let c = DMatrix::identity(3, 3);
        let v = DVector::from_vec(vec![0.5, 0.0, 0.0]);
        let w = single_layer_from_moments(&c, &v).unwrap();
        assert_eq!(w.as_slice(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn single_layer_singular_covariance() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 2.0, 0.0, -1.0, 0.0]);
        let y = DVector::from_vec(vec![1.0, 2.0, 0.0]);
        assert!(matches!(learn_single_layer(&x, &y), Err(Error::SingularCovariance { .. })));
    }

    #[test]
    fn single_unit_network_reduces_to_one_layer() {
        let p = NetworkParams::new(
            DMatrix::from_row_slice(1, 3, &[0.0, 0.6, 0.8]),
            DMatrix::from_row_slice(1, 1, &[1.0]),
            0.0,
        )
        .unwrap();
        let m = analytic_gaussian_moments(&p, &DistributionSpec::standard_gaussian(3)).unwrap();
        let r = learn_two_layer_from_moments(&m, 1, &LearnOptions::default()).unwrap();
        assert!((&r.v - &p.w).amax() < 1e-6);
        assert!((r.a_hat[(0, 0)] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn prediction_edge_cases() {
        let v = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.3, 2.0]);
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        let zero = predict(&v, &a, &DMatrix::zeros(1, 2)).unwrap();
        assert_eq!(zero.amax(), 0.0);
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, -1.0, 0.5, 0.3, -0.2]);
        let mut v2 = v.clone();
        let mut a2 = a.clone();
        v2.row_mut(0).scale_mut(3.0);
        a2.column_mut(0).scale_mut(1.0 / 3.0);
        let diff = predict(&v, &a, &x).unwrap() - predict(&v2, &a2, &x).unwrap();
        assert!(diff.amax() < 1e-12);
        assert!(predict(&v, &a, &DMatrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn gd_at_ground_truth_stays_put() {
        let p = NetworkParams::random_orthonormal(3, 4, 3, 0.0, 2).unwrap();
        let s = model::draw_samples(&p, &DistributionSpec::standard_gaussian(4), 500, 2).unwrap();
        let out = refine_w_gd(&p.a, &p.w, &s, 0.1, 50).unwrap();
        assert!(out.losses[0] < 1e-28);
        assert!((&out.w - &p.w).amax() < 1e-8);
    }

    #[test]
    fn gd_loss_never_increases() {
        let p = NetworkParams::random_orthonormal(3, 4, 3, 0.05, 6).unwrap();
        let s = model::draw_samples(&p, &DistributionSpec::standard_gaussian(4), 800, 6).unwrap();
        let start = &p.w + DMatrix::from_element(3, 4, 0.1);
        let out = refine_w_gd(&p.a, &start, &s, 1.0, 200).unwrap();
        assert!(out.losses.windows(2).all(|w| w[1] <= w[0]));
        assert!(out.losses.last().unwrap() < &out.losses[0]);
        assert!(refine_w_gd(&p.a, &start, &s, 0.0, 5).is_err());
    }

    #[test]
    fn nonsquare_requires_opt_in() {
        let p = NetworkParams::random_orthonormal(2, 3, 4, 0.0, 1).unwrap();
        let s = model::draw_samples(&p, &DistributionSpec::standard_gaussian(3), 100, 1).unwrap();
        assert!(matches!(learn_two_layer(&s, 2, &LearnOptions::default()), Err(Error::Config(_))));
        assert!(matches!(learn_two_layer(&s, 4, &LearnOptions::default()), Err(Error::Config(_))));
    }

    #[test]
    fn options_deserialize_from_partial_json() {
        let o: LearnOptions = serde_json::from_str(r#"{"variant":"noiseless","refine":{"lr":0.05,"iters":10}}"#).unwrap();
        assert_eq!(o.variant, Variant::Noiseless);
        assert_eq!(o.refine, Some(GdOptions { lr: 0.05, iters: 10 }));
        assert_eq!(o.z_method, ZMethod::Eigen);
    }
}
