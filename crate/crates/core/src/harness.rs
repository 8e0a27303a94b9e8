//! Alignment-based error metrics and the three experiment suites.

use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learner::{self, LearnOptions, RecoveryResult};
use crate::linalg;
use crate::model::{self, DistributionSpec, NetworkParams, SampleSet};
use crate::seeds;
use crate::spectral::ZMethod;

/// Minimum-cost perfect matching on a square cost matrix. Returns
/// `assignment[row] = column`.
pub fn hungarian(cost: &DMatrix<f64>) -> Result<Vec<usize>> {
    let n = cost.nrows();
    if cost.ncols() != n {
        return Err(Error::Shape(format!("cost matrix must be square, got {}x{}", n, cost.ncols())));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::Numerical("non-finite assignment cost".into()));
    }
    // Potentials formulation with 1-based sentinel column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        matched[0] = row;
        let mut col0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r0 = matched[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(r0 - 1, j - 1)] - u[r0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = col0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    col1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            col0 = col1;
            if matched[col0] == 0 {
                break;
            }
        }
        loop {
            let col1 = way[col0];
            matched[col0] = matched[col1];
            col0 = col1;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[matched[j] - 1] = j - 1;
    }
    Ok(assignment)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub w_err: f64,
    pub a_err: f64,
    /// `perm[learned unit] = true unit`.
    pub perm: Vec<usize>,
}

/// Normalizes rows of `V`, `W` and columns of `A_hat`, `A`, matches hidden
/// units by the optimal assignment on the `W` distances, and sums squared
/// distances under that single permutation.
pub fn align(v: &DMatrix<f64>, a_hat: &DMatrix<f64>, w: &DMatrix<f64>, a: &DMatrix<f64>) -> Result<Alignment> {
    if v.shape() != w.shape() || a_hat.shape() != a.shape() || w.nrows() != a.ncols() {
        return Err(Error::Shape(format!(
            "learned V {:?}, A {:?} vs truth W {:?}, A {:?}",
            v.shape(),
            a_hat.shape(),
            w.shape(),
            a.shape()
        )));
    }
    let (vn, wn) = (linalg::normalize_rows(v), linalg::normalize_rows(w));
    let (an_hat, an) = (linalg::normalize_columns(a_hat), linalg::normalize_columns(a));
    let k = w.nrows();
    let cost = DMatrix::from_fn(k, k, |i, j| (vn.row(i) - wn.row(j)).norm_squared());
    let perm = hungarian(&cost)?;
    let w_err = perm.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum();
    let a_err = perm.iter().enumerate().map(|(i, &j)| (an_hat.column(i) - an.column(j)).norm_squared()).sum();
    Ok(Alignment { w_err, a_err, perm })
}

pub fn align_and_score(learned: &RecoveryResult, truth: &NetworkParams) -> Result<(f64, f64)> {
    let al = align(&learned.v, &learned.a_hat, &truth.w, &truth.a)?;
    Ok((al.w_err, al.a_err))
}

/// Mean squared residual over samples and output units.
pub fn mse(result: &RecoveryResult, test: &SampleSet) -> Result<f64> {
    mse_of(&result.v, &result.a_hat, &test.x, &test.y)
}

pub fn mse_of(v: &DMatrix<f64>, a_hat: &DMatrix<f64>, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
    if y.nrows() != x.nrows() || y.ncols() != a_hat.nrows() {
        return Err(Error::Shape("test outputs do not match the prediction shape".into()));
    }
    if y.is_empty() {
        return Err(Error::EmptyInput("empty test set".into()));
    }
    let pred = learner::predict(v, a_hat, x)?;
    Ok((pred - y).norm_squared() / y.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    SampleEfficiency,
    Noise,
    Conditioning,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::SampleEfficiency => "sample_efficiency",
            ExperimentKind::Noise => "noise",
            ExperimentKind::Conditioning => "conditioning",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MseTarget {
    Noisy,
    Clean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConditionTarget {
    W,
    A,
}

fn default_trials() -> usize {
    5
}
fn default_n() -> usize {
    10_000
}
fn default_test_samples() -> usize {
    10_000
}
fn default_mse_target() -> MseTarget {
    MseTarget::Noisy
}
fn default_condition_target() -> ConditionTarget {
    ConditionTarget::W
}
fn default_true() -> bool {
    true
}

/// The experiments use the ALS direction recovery, as in the reference runs.
pub fn experiment_learn_options() -> LearnOptions {
    LearnOptions { z_method: ZMethod::Als, ..LearnOptions::default() }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub d: usize,
    pub k: usize,
    /// Output dimension; defaults to `k`.
    #[serde(default)]
    pub l: Option<usize>,
    /// Sample sizes, noise levels or condition numbers, depending on the experiment.
    #[serde(alias = "n_grid", alias = "noise_grid", alias = "kappa_grid")]
    pub grid: Vec<f64>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    /// Training samples when the grid is not over `n`.
    #[serde(default = "default_n")]
    pub n: usize,
    /// Label noise when the grid is not over noise.
    #[serde(default)]
    pub noise: f64,
    /// Input law; defaults to the standard Gaussian in `d` dimensions.
    #[serde(default)]
    pub distribution: Option<DistributionSpec>,
    #[serde(default = "experiment_learn_options")]
    pub options: LearnOptions,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_test_samples")]
    pub test_samples: usize,
    #[serde(default = "default_mse_target")]
    pub mse_against: MseTarget,
    #[serde(default = "default_condition_target")]
    pub condition_target: ConditionTarget,
    /// When false, `runtime_seconds` is written as 0 so reruns are byte-identical.
    #[serde(default = "default_true")]
    pub record_runtime: bool,
}

impl ExperimentConfig {
    pub fn new(experiment: ExperimentKind, d: usize, k: usize, grid: Vec<f64>) -> Self {
        Self {
            experiment,
            d,
            k,
            l: None,
            grid,
            trials: default_trials(),
            n: default_n(),
            noise: 0.0,
            distribution: None,
            options: experiment_learn_options(),
            seed: 0,
            test_samples: default_test_samples(),
            mse_against: default_mse_target(),
            condition_target: default_condition_target(),
            record_runtime: true,
        }
    }

    pub fn l(&self) -> usize {
        self.l.unwrap_or(self.k)
    }

    pub fn distribution(&self) -> DistributionSpec {
        self.distribution.clone().unwrap_or_else(|| DistributionSpec::standard_gaussian(self.d))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.grid.is_empty() {
            return fail("grid must be non-empty".into());
        }
        if self.trials == 0 {
            return fail("trials must be at least 1".into());
        }
        if self.k == 0 || self.k > self.d || self.k > self.l() {
            return fail(format!("need 1 <= k <= min(d, l), got d={}, k={}, l={}", self.d, self.k, self.l()));
        }
        if self.test_samples == 0 {
            return fail("test_samples must be positive".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return fail(format!("noise must be non-negative, got {}", self.noise));
        }
        let spec = self.distribution();
        spec.validate()?;
        if spec.dim() != self.d {
            return fail(format!("distribution has dimension {}, config has d={}", spec.dim(), self.d));
        }
        for &g in &self.grid {
            let ok = match self.experiment {
                ExperimentKind::SampleEfficiency => g >= 2.0 && g.fract() == 0.0,
                ExperimentKind::Noise => g >= 0.0 && g.is_finite(),
                ExperimentKind::Conditioning => g >= 1.0 && g.is_finite(),
            };
            if !ok {
                return fail(format!("invalid grid value {g} for {} experiment", self.experiment.as_str()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub experiment: ExperimentKind,
    pub d: usize,
    pub k: usize,
    pub l: usize,
    pub grid_value: f64,
    pub trial: usize,
    pub w_err: Option<f64>,
    pub a_err: Option<f64>,
    pub mse: Option<f64>,
    pub runtime_seconds: f64,
    /// `ok`, or the error kind of a failed trial.
    pub status: String,
}

impl MetricsRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

pub const CSV_HEADER: &str = "experiment,d,k,l,grid_value,trial,W_err,A_err,mse,runtime_seconds,status";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn rows_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.experiment.as_str(),
            r.d,
            r.k,
            r.l,
            r.grid_value,
            r.trial,
            opt(r.w_err),
            opt(r.a_err),
            opt(r.mse),
            r.runtime_seconds,
            r.status
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl Stat {
    fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        let m = s.len();
        let median = if m % 2 == 1 { s[m / 2] } else { 0.5 * (s[m / 2 - 1] + s[m / 2]) };
        Some(Stat { mean: s.iter().sum::<f64>() / m as f64, median, min: s[0], max: s[m - 1] })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSummary {
    pub grid_value: f64,
    pub ok_trials: usize,
    pub failed_trials: usize,
    pub w_err: Option<Stat>,
    pub a_err: Option<Stat>,
    pub mse: Option<Stat>,
    /// Mean of `sqrt(err / k)` across successful trials.
    pub w_err_normalized: Option<f64>,
    pub a_err_normalized: Option<f64>,
}

pub fn summarize(rows: &[MetricsRow], grid: &[f64]) -> Vec<GridSummary> {
    grid.iter()
        .map(|&g| {
            let at: Vec<&MetricsRow> = rows.iter().filter(|r| r.grid_value == g).collect();
            let ok: Vec<&MetricsRow> = at.iter().copied().filter(|r| r.is_ok()).collect();
            let col = |f: fn(&MetricsRow) -> Option<f64>| ok.iter().filter_map(|r| f(r)).collect::<Vec<_>>();
            let (w, a, m) = (col(|r| r.w_err), col(|r| r.a_err), col(|r| r.mse));
            let norm = |vals: &[f64]| {
                let k = ok.first().map_or(1, |r| r.k) as f64;
                (!vals.is_empty()).then(|| vals.iter().map(|e| (e / k).sqrt()).sum::<f64>() / vals.len() as f64)
            };
            GridSummary {
                grid_value: g,
                ok_trials: ok.len(),
                failed_trials: at.len() - ok.len(),
                w_err_normalized: norm(&w),
                a_err_normalized: norm(&a),
                w_err: Stat::of(&w),
                a_err: Stat::of(&a),
                mse: Stat::of(&m),
            }
        })
        .collect()
}

pub const SUMMARY_HEADER: &str = "experiment,grid_value,ok_trials,failed_trials,W_err_mean,W_err_median,A_err_mean,A_err_median,mse_mean,mse_median,W_err_normalized,A_err_normalized";

pub fn summary_csv(kind: ExperimentKind, summary: &[GridSummary]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    let mean = |s: &Option<Stat>| opt(s.as_ref().map(|s| s.mean));
    let median = |s: &Option<Stat>| opt(s.as_ref().map(|s| s.median));
    for s in summary {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            kind.as_str(),
            s.grid_value,
            s.ok_trials,
            s.failed_trials,
            mean(&s.w_err),
            median(&s.w_err),
            mean(&s.a_err),
            median(&s.a_err),
            mean(&s.mse),
            median(&s.mse),
            opt(s.w_err_normalized),
            opt(s.a_err_normalized)
        );
    }
    out
}

/// One panel per metric: mean across trials with a min–max bar.
pub fn summary_svg(kind: ExperimentKind, summary: &[GridSummary]) -> String {
    let (pw, ph, pad) = (260.0, 200.0, 40.0);
    let panels: [(&str, fn(&GridSummary) -> &Option<Stat>); 3] =
        [("W_err", |s| &s.w_err), ("A_err", |s| &s.a_err), ("mse", |s| &s.mse)];
    let width = panels.len() as f64 * (pw + pad) + pad;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{}\" font-family=\"sans-serif\" font-size=\"11\">\n",
        ph + 2.0 * pad
    );
    let _ = writeln!(svg, "<text x=\"{pad}\" y=\"16\">{}</text>", kind.as_str());
    let n = summary.len();
    for (p, (name, get)) in panels.iter().enumerate() {
        let x0 = pad + p as f64 * (pw + pad);
        let y0 = pad;
        let stats: Vec<Option<&Stat>> = summary.iter().map(|s| get(s).as_ref()).collect();
        let hi = stats.iter().flatten().map(|s| s.max).fold(0.0f64, f64::max).max(1e-12);
        let px = |i: usize| x0 + if n > 1 { i as f64 * pw / (n - 1) as f64 } else { pw / 2.0 };
        let py = |v: f64| y0 + ph - v / hi * ph;
        let _ = writeln!(
            svg,
            "<rect x=\"{x0}\" y=\"{y0}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"#999\"/>\n<text x=\"{x0}\" y=\"{}\">{name} (max {hi:.3e})</text>",
            y0 - 6.0
        );
        let mut points = Vec::new();
        for (i, s) in stats.iter().enumerate() {
            if let Some(s) = s {
                let x = px(i);
                let _ = writeln!(
                    svg,
                    "<line x1=\"{x}\" y1=\"{}\" x2=\"{x}\" y2=\"{}\" stroke=\"#88a\"/>",
                    py(s.min),
                    py(s.max)
                );
                points.push(format!("{x},{}", py(s.mean)));
            }
            let _ = writeln!(
                svg,
                "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
                px(i),
                y0 + ph + 14.0,
                summary[i].grid_value
            );
        }
        let _ = writeln!(svg, "<polyline points=\"{}\" fill=\"none\" stroke=\"#c33\"/>", points.join(" "));
    }
    svg.push_str("</svg>\n");
    svg
}

struct TrialPlan {
    instance_seed: u64,
    data_seed: u64,
    test_seed: u64,
    learn_seed: u64,
}

fn plan(seed: u64, grid_index: usize, trial: usize) -> TrialPlan {
    let t = trial as u64;
    let g = seeds::derive_indexed(seed, "grid", grid_index as u64);
    TrialPlan {
        // Shared across grid points so trends compare the same networks.
        instance_seed: seeds::derive_indexed(seed, "instance", t),
        data_seed: seeds::derive_indexed(g, "data", t),
        test_seed: seeds::derive_indexed(g, "test", t),
        learn_seed: seeds::derive_indexed(g, "learn", t),
    }
}

fn build_instance(cfg: &ExperimentConfig, grid_value: f64, seed: u64) -> Result<NetworkParams> {
    let (k, d, l) = (cfg.k, cfg.d, cfg.l());
    let noise = if cfg.experiment == ExperimentKind::Noise { grid_value } else { cfg.noise };
    if cfg.experiment != ExperimentKind::Conditioning {
        return NetworkParams::random_orthonormal(k, d, l, noise, seed);
    }
    let base = NetworkParams::random_orthonormal(k, d, l, noise, seed)?;
    let shaped = condition_controlled_matrix_for(k, grid_value, seeds::derive(seed, "conditioning"))?;
    match cfg.condition_target {
        ConditionTarget::W => NetworkParams::new(shaped * &base.w, base.a, noise),
        ConditionTarget::A => {
            let frame = if l == k {
                DMatrix::identity(k, k)
            } else {
                linalg::random_orthonormal(l, k, &mut seeds::rng(seeds::derive(seed, "frame")))
            };
            NetworkParams::new(base.w, frame * shaped, noise)
        }
    }
}

fn condition_controlled_matrix_for(k: usize, kappa: f64, seed: u64) -> Result<DMatrix<f64>> {
    if k == 1 {
        return Ok(DMatrix::identity(1, 1));
    }
    model::condition_controlled_matrix(k, kappa, seed)
}

fn run_trial(cfg: &ExperimentConfig, grid_value: f64, p: &TrialPlan) -> Result<(f64, f64, f64, f64)> {
    let truth = build_instance(cfg, grid_value, p.instance_seed)?;
    let spec = cfg.distribution();
    let n = if cfg.experiment == ExperimentKind::SampleEfficiency { grid_value as usize } else { cfg.n };
    let train = model::draw_samples(&truth, &spec, n, p.data_seed)?;
    let mut opts = cfg.options.clone();
    opts.seed = p.learn_seed;
    opts.nonsquare |= cfg.l() > cfg.k;
    let start = Instant::now();
    let learned = learner::learn_two_layer(&train, cfg.k, &opts)?;
    let runtime = start.elapsed().as_secs_f64();
    let (w_err, a_err) = align_and_score(&learned, &truth)?;
    let test = model::draw_samples(&truth, &spec, cfg.test_samples, p.test_seed)?;
    let err = match cfg.mse_against {
        MseTarget::Noisy => mse(&learned, &test)?,
        MseTarget::Clean => mse_of(&learned.v, &learned.a_hat, &test.x, &truth.forward_clean(&test.x)?)?,
    };
    Ok((w_err, a_err, err, runtime))
}

/// Every grid point times every trial, in `(grid, trial)` order. A failing
/// trial yields a row tagged with its error kind.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<MetricsRow>> {
    cfg.validate()?;
    let jobs: Vec<(usize, usize)> =
        (0..cfg.grid.len()).flat_map(|g| (0..cfg.trials).map(move |t| (g, t))).collect();
    let rows = jobs
        .par_iter()
        .map(|&(gi, trial)| {
            let g = cfg.grid[gi];
            let outcome = run_trial(cfg, g, &plan(cfg.seed, gi, trial));
            let mut row = MetricsRow {
                experiment: cfg.experiment,
                d: cfg.d,
                k: cfg.k,
                l: cfg.l(),
                grid_value: g,
                trial,
                w_err: None,
                a_err: None,
                mse: None,
                runtime_seconds: 0.0,
                status: "ok".into(),
            };
            match outcome {
                Ok((w, a, m, t)) => {
                    row.w_err = Some(w);
                    row.a_err = Some(a);
                    row.mse = Some(m);
                    if cfg.record_runtime {
                        row.runtime_seconds = t;
                    }
                }
                Err(e) => row.status = e.kind().to_string(),
            }
            row
        })
        .collect();
    Ok(rows)
}
