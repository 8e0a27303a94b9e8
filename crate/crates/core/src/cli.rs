//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde::Serialize;

use crate::detector::Variant;
use crate::distmat;
use crate::error::{Error, Result};
use crate::harness::{self, ExperimentConfig};
use crate::io::{self, MatrixFormat};
use crate::learner::{self, GdOptions, LearnOptions, RecoveryResult};
use crate::model::{self, DistributionSpec, NetworkParams, ParamsDoc, SampleSet};
use crate::moments::{self, MomentSet};
use crate::seeds;
use crate::spectral::ZMethod;

#[derive(Debug, Parser)]
#[command(name = "relu-mom", version, about = "Method-of-moments learning of two-layer ReLU networks")]
pub struct Cli {
    /// Root seed; every random draw derives from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// Matrix file format for outputs.
    #[arg(long, global = true, value_enum, default_value_t = FormatArg::Csv)]
    pub format: FormatArg,
    /// Cap on worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Csv,
    Bin,
}

impl From<FormatArg> for MatrixFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => MatrixFormat::Csv,
            FormatArg::Bin => MatrixFormat::Bin,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a training set from a teacher network.
    Gen(GenArgs),
    /// Estimate (or compute exactly) the moment tensors.
    Moments(MomentsArgs),
    /// Recover V and A_hat from samples or a moment directory.
    Learn(LearnArgs),
    /// Score a learned network against the teacher.
    Eval(EvalArgs),
    /// Run an experiment suite from a JSON config.
    Experiment(ExperimentArgs),
    /// Distinguishing-matrix analysis.
    Distmat(DistmatArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Teacher parameters (JSON with `w`, `a`, `noise_sigma`). Without it a random
    /// orthonormal teacher is drawn from --k, --d, --l and written as params.json.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Input distribution (JSON); defaults to the standard Gaussian.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Number of samples.
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    /// Output dimension of a random teacher (default: k).
    #[arg(long)]
    pub l: Option<usize>,
    /// Label noise of a random teacher.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
}

#[derive(Debug, Args)]
pub struct MomentsArgs {
    /// Sample directory to estimate from.
    #[arg(long, conflicts_with = "params")]
    pub samples: Option<PathBuf>,
    /// Teacher parameters for exact standard-Gaussian moments.
    #[arg(long)]
    pub params: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum VariantArg {
    Noisy,
    Noiseless,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ZMethodArg {
    Eigen,
    Als,
}

#[derive(Debug, Args)]
pub struct LearnArgs {
    /// Sample directory (X, Y).
    #[arg(long, required_unless_present = "moments", conflicts_with = "moments")]
    pub samples: Option<PathBuf>,
    /// Moment directory; runs the exact-moment pipeline without a sample split.
    #[arg(long)]
    pub moments: Option<PathBuf>,
    /// Hidden width.
    #[arg(long)]
    pub k: usize,
    #[arg(long, value_enum, default_value_t = VariantArg::Noisy)]
    pub variant: VariantArg,
    #[arg(long, value_enum, default_value_t = ZMethodArg::Eigen)]
    pub z_method: ZMethodArg,
    /// Reduce l > k outputs to the column span of A first.
    #[arg(long)]
    pub nonsquare: bool,
    /// Refit W by gradient descent with A_hat fixed.
    #[arg(long)]
    pub refine: bool,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 2000)]
    pub iters: usize,
    /// Full options as JSON; overrides the individual flags.
    #[arg(long)]
    pub options: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory written by `learn`.
    #[arg(long)]
    pub result: PathBuf,
    /// Teacher parameters.
    #[arg(long)]
    pub params: PathBuf,
    /// Test sample directory; otherwise fresh samples are drawn.
    #[arg(long)]
    pub samples: Option<PathBuf>,
    /// Fresh test samples when --samples is absent.
    #[arg(long, default_value_t = 10_000)]
    pub test_n: usize,
    /// Input distribution of fresh test samples.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Score MSE against noiseless teacher outputs.
    #[arg(long)]
    pub clean: bool,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Also write an SVG plot.
    #[arg(long)]
    pub plot: bool,
}

#[derive(Debug, Args)]
pub struct DistmatArgs {
    #[command(subcommand)]
    pub action: DistmatAction,
}

#[derive(Debug, Subcommand)]
pub enum DistmatAction {
    /// Closed-form matrix for standard Gaussian inputs.
    ClosedForm {
        /// W as a matrix file, or teacher params JSON.
        #[arg(long)]
        w: PathBuf,
        /// Append the vec(I) column.
        #[arg(long)]
        augmented: bool,
    },
    /// Monte-Carlo estimate.
    Estimate {
        #[arg(long)]
        w: PathBuf,
        #[arg(long)]
        n: usize,
        /// Input distribution (JSON); defaults to the standard Gaussian.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        augmented: bool,
    },
    /// Smallest singular value under random perturbations of W.
    Scan {
        #[arg(long)]
        w: PathBuf,
        /// Comma-separated perturbation sizes.
        #[arg(long, value_delimiter = ',', required = true)]
        rho: Vec<f64>,
        #[arg(long, default_value_t = 20)]
        trials: usize,
    },
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    error: &'a str,
    kind: &'a str,
    message: String,
}

/// Parses arguments, runs, and returns the process exit code. Errors are
/// reported as one JSON object on stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let report = ErrorReport { error: e.class().as_str(), kind: e.kind(), message: e.to_string() };
            eprintln!("{}", serde_json::to_string(&report).unwrap_or_else(|_| e.to_string()));
            e.class().exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    match cli.threads {
        Some(0) => return Err(Error::Config("--threads must be positive".into())),
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            pool.install(|| dispatch(cli))
        }
        None => dispatch(cli),
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    let format = MatrixFormat::from(cli.format);
    let out = cli.out_dir.as_path();
    match &cli.command {
        Command::Gen(a) => cmd_gen(a, cli.seed, out, format),
        Command::Moments(a) => cmd_moments(a, out, format),
        Command::Learn(a) => cmd_learn(a, cli.seed, out, format),
        Command::Eval(a) => cmd_eval(a, cli.seed, out),
        Command::Experiment(a) => cmd_experiment(a, cli.seed, out),
        Command::Distmat(a) => cmd_distmat(&a.action, cli.seed, out, format),
    }
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, format!("{} not found", path.display()))))
    }
}

fn require_dir(path: &Path) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, format!("{} not found", path.display()))))
    }
}

fn load_params(path: &Path) -> Result<NetworkParams> {
    require_file(path)?;
    NetworkParams::from_doc(&io::read_json::<ParamsDoc>(path)?)
}

fn load_spec(path: Option<&Path>, d: usize) -> Result<DistributionSpec> {
    let spec = match path {
        Some(p) => {
            require_file(p)?;
            io::read_json::<DistributionSpec>(p)?
        }
        None => DistributionSpec::standard_gaussian(d),
    };
    spec.validate()?;
    if spec.dim() != d {
        return Err(Error::Config(format!("distribution has dimension {}, network expects {d}", spec.dim())));
    }
    Ok(spec)
}

/// `W` from a matrix file or from the `w` field of a params JSON.
fn load_w(path: &Path) -> Result<DMatrix<f64>> {
    require_file(path)?;
    if path.extension().is_some_and(|e| e == "json") {
        let doc: ParamsDoc = io::read_json(path)?;
        return crate::linalg::from_rows(&doc.w);
    }
    io::read_matrix(path)
}

fn cmd_gen(a: &GenArgs, seed: u64, out: &Path, format: MatrixFormat) -> Result<()> {
    let (params, fresh) = match &a.params {
        Some(p) => (load_params(p)?, false),
        None => {
            let (Some(k), Some(d)) = (a.k, a.d) else {
                return Err(Error::Config("either --params or both --k and --d are required".into()));
            };
            let p = NetworkParams::random_orthonormal(k, d, a.l.unwrap_or(k), a.noise, seeds::derive(seed, "teacher"))?;
            (p, true)
        }
    };
    let spec = load_spec(a.spec.as_deref(), params.d())?;
    let samples = model::draw_samples(&params, &spec, a.n, seed)?;
    samples.write_dir(out, format)?;
    if fresh {
        io::write_json(&out.join("params.json"), &params.to_doc())?;
    }
    Ok(())
}

fn cmd_moments(a: &MomentsArgs, out: &Path, format: MatrixFormat) -> Result<()> {
    let m = match (&a.samples, &a.params) {
        (Some(dir), _) => {
            require_dir(dir)?;
            moments::estimate_moments(&SampleSet::read_dir(dir)?)?
        }
        (None, Some(p)) => {
            let params = load_params(p)?;
            moments::analytic_gaussian_moments(&params, &DistributionSpec::standard_gaussian(params.d()))?
        }
        (None, None) => return Err(Error::Config("either --samples or --params is required".into())),
    };
    m.write_dir(out, format)
}

fn learn_options(a: &LearnArgs, seed: u64) -> Result<LearnOptions> {
    if let Some(path) = &a.options {
        require_file(path)?;
        let mut o: LearnOptions = io::read_json(path)?;
        o.seed = seed;
        return Ok(o);
    }
    Ok(LearnOptions {
        variant: match a.variant {
            VariantArg::Noisy => Variant::Noisy,
            VariantArg::Noiseless => Variant::Noiseless,
        },
        z_method: match a.z_method {
            ZMethodArg::Eigen => ZMethod::Eigen,
            ZMethodArg::Als => ZMethod::Als,
        },
        nonsquare: a.nonsquare,
        refine: a.refine.then_some(GdOptions { lr: a.lr, iters: a.iters }),
        seed,
        ..LearnOptions::default()
    })
}

fn cmd_learn(a: &LearnArgs, seed: u64, out: &Path, format: MatrixFormat) -> Result<()> {
    let opts = learn_options(a, seed)?;
    let result = match (&a.samples, &a.moments) {
        (Some(dir), _) => {
            require_dir(dir)?;
            let samples = SampleSet::read_dir(dir)?;
            learner::learn_two_layer(&samples, a.k, &opts)?
        }
        (None, Some(dir)) => {
            require_dir(dir)?;
            if opts.refine.is_some() {
                return Err(Error::Config("--refine needs samples".into()));
            }
            learner::learn_two_layer_from_moments(&MomentSet::read_dir(dir)?, a.k, &opts)?
        }
        (None, None) => return Err(Error::Config("either --samples or --moments is required".into())),
    };
    write_result_atomically(&result, out, format)
}

/// Writes into a sibling staging directory first so that a failure leaves no
/// partial result behind.
fn write_result_atomically(result: &RecoveryResult, out: &Path, format: MatrixFormat) -> Result<()> {
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(parent)?;
    let name = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
    let staging = parent.join(format!(".{name}.partial-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&staging);
    let written = result.write_dir(&staging, format).and_then(|()| {
        std::fs::create_dir_all(out)?;
        for entry in std::fs::read_dir(&staging)? {
            let entry = entry?;
            std::fs::rename(entry.path(), out.join(entry.file_name()))?;
        }
        Ok(())
    });
    let _ = std::fs::remove_dir_all(&staging);
    written
}

#[derive(Serialize)]
struct EvalReport {
    #[serde(rename = "W_err")]
    w_err: f64,
    #[serde(rename = "A_err")]
    a_err: f64,
    mse: f64,
    mse_against: &'static str,
    test_samples: usize,
}

fn cmd_eval(a: &EvalArgs, seed: u64, out: &Path) -> Result<()> {
    require_dir(&a.result)?;
    let (v, a_hat) = RecoveryResult::read_network(&a.result)?;
    let truth = load_params(&a.params)?;
    let al = harness::align(&v, &a_hat, &truth.w, &truth.a)?;
    let test = match &a.samples {
        Some(dir) => {
            require_dir(dir)?;
            SampleSet::read_dir(dir)?
        }
        None => {
            let spec = load_spec(a.spec.as_deref(), truth.d())?;
            model::draw_samples(&truth, &spec, a.test_n, seeds::derive(seed, "eval"))?
        }
    };
    let target = if a.clean { truth.forward_clean(&test.x)? } else { test.y.clone() };
    let report = EvalReport {
        w_err: al.w_err,
        a_err: al.a_err,
        mse: harness::mse_of(&v, &a_hat, &test.x, &target)?,
        mse_against: if a.clean { "clean" } else { "noisy" },
        test_samples: test.n(),
    };
    std::fs::create_dir_all(out)?;
    io::write_json(&out.join("eval.json"), &report)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn cmd_experiment(a: &ExperimentArgs, seed: u64, out: &Path) -> Result<()> {
    require_file(&a.config)?;
    let mut cfg: ExperimentConfig = io::read_json(&a.config)?;
    if seed != 0 {
        cfg.seed = seed;
    }
    let rows = harness::run_experiment(&cfg)?;
    let summary = harness::summarize(&rows, &cfg.grid);
    let name = cfg.experiment.as_str();
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join(format!("{name}.csv")), harness::rows_csv(&rows))?;
    std::fs::write(out.join(format!("{name}_summary.csv")), harness::summary_csv(cfg.experiment, &summary))?;
    if a.plot {
        std::fs::write(out.join(format!("{name}.svg")), harness::summary_svg(cfg.experiment, &summary))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct DistmatReport {
    rows: usize,
    cols: usize,
    augmented: bool,
    sigma_min: f64,
    leave_one_out: f64,
}

fn cmd_distmat(action: &DistmatAction, seed: u64, out: &Path, format: MatrixFormat) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let dm = match action {
        DistmatAction::ClosedForm { w, augmented } => distmat::closed_form_gaussian(&load_w(w)?, *augmented)?,
        DistmatAction::Estimate { w, n, spec, augmented } => {
            let w = load_w(w)?;
            let spec = load_spec(spec.as_deref(), w.ncols())?;
            distmat::estimate_n(&w, &spec, *n, seed, *augmented)?
        }
        DistmatAction::Scan { w, rho, trials } => {
            let rows = distmat::smoothed_sigma_scan(&load_w(w)?, rho, *trials, seed)?;
            std::fs::write(out.join("scan.csv"), distmat::scan_csv(&rows))?;
            return Ok(());
        }
    };
    let n = dm.data.clone();
    io::write_matrix(&format.path_in(out, "N"), &n, format)?;
    let special = dm.augmented.then(|| n.ncols() - 1);
    let report = DistmatReport {
        rows: n.nrows(),
        cols: n.ncols(),
        augmented: dm.augmented,
        sigma_min: distmat::sigma_min(&n),
        leave_one_out: if n.ncols() >= 2 { distmat::leave_one_out_distance(&n, special)? } else { n.norm() },
    };
    io::write_matrix(&format.path_in(out, "m"), &DMatrix::from_column_slice(dm.m.len(), 1, &dm.m), format)?;
    io::write_json(&out.join("distmat.json"), &report)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}
