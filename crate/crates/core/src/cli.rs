//! The `lab` batch runner.
//!
//! Each subcommand reads an optional JSON config, applies `--seed`, writes
//! its outputs plus the effective `config.json` into `--out`, and maps
//! outcomes to exit codes: 0 success, 1 usage or bad config, 2 failed
//! verdict under `--strict`, 3 numeric divergence.

use crate::distributions::{GaussianMixture, MixtureSpec};
use crate::error::LabError;
use crate::invariance::{
    check_invariance, span_coverage, Algorithm, Dataset, InnerAlgorithm, InvarianceVerdict, SpanCoverage, SpanSource,
    TransformFamily,
};
use crate::objective::{landscape_grid, GridSpec, Problem, DEFAULT_MC_SAMPLES};
use crate::oracle_sim::{trajectory_independence_check, FeedbackSpec, IndependenceReport, OracleConfig, Trainer};
use crate::periodic::{PeriodicFn, PeriodicSpec};
use crate::predictors::PredictorFamily;
use crate::reductions::{check_padding, exhaustive_check, network_matrix, round_and_bound, HalfspaceIntersection, RoundingReport};
use crate::rng::{derive_seed, stream_rng, with_workers};
use crate::variance_lab::{variance_of_gradient, DecayFits, VarianceScanConfig};
use clap::{Args, Parser, Subcommand};
use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VERDICT: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "lab", version, about = "Gradient-flatness and invariance experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Objective heatmap over a 2-D grid.
    Landscape(CommonArgs),
    /// Variance of the gradient over random targets.
    VarianceScan(CommonArgs),
    /// Trainer runs through the approximate gradient oracle.
    Trajectory(CommonArgs),
    /// Whitening pipeline and invariance checks.
    Invariance(CommonArgs),
    /// Halfspace-intersection reduction checks.
    ReductionCheck(CommonArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// JSON config file; keys override built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed; overrides the config file. Required if the config has none.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Exit with code 2 when a verdict fails.
    #[arg(long)]
    strict: bool,
    /// Worker threads (0 picks the default).
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Lab(LabError),
}

impl From<LabError> for CliError {
    fn from(e: LabError) -> Self {
        CliError::Lab(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Lab(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Lab(e.into())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `args` (program name first), runs the subcommand and returns the
/// exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let (name, common) = match &cli.command {
        Command::Landscape(a) => ("landscape", a),
        Command::VarianceScan(a) => ("variance-scan", a),
        Command::Trajectory(a) => ("trajectory", a),
        Command::Invariance(a) => ("invariance", a),
        Command::ReductionCheck(a) => ("reduction-check", a),
    };
    let outcome = with_workers(common.workers, || dispatch(&cli.command, common));
    match outcome {
        Ok(pass) => {
            if common.strict && !pass {
                eprintln!("{name}: verdict failed");
                EXIT_VERDICT
            } else {
                EXIT_OK
            }
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("{name}: {msg}");
            EXIT_USAGE
        }
        Err(CliError::Lab(e)) => {
            eprintln!("{name}: {e}");
            match e {
                LabError::Divergence { .. } => EXIT_DIVERGENCE,
                _ => EXIT_USAGE,
            }
        }
    }
}

fn dispatch(command: &Command, args: &CommonArgs) -> CliResult<bool> {
    fs::create_dir_all(&args.out)?;
    match command {
        Command::Landscape(_) => {
            let cfg: LandscapeConfig = load_config(args)?;
            write_config(&args.out, &cfg)?;
            run_landscape(&cfg, &args.out)
        }
        Command::VarianceScan(_) => {
            let cfg: VarianceScanConfig = load_config(args)?;
            write_config(&args.out, &cfg)?;
            run_variance_scan(&cfg, &args.out)
        }
        Command::Trajectory(_) => {
            let cfg: TrajectoryConfig = load_config(args)?;
            let cfg = cfg.seeded();
            write_config(&args.out, &cfg)?;
            run_trajectory(&cfg, &args.out)
        }
        Command::Invariance(_) => {
            let cfg: InvarianceConfig = load_config(args)?;
            write_config(&args.out, &cfg)?;
            run_invariance(&cfg, &args.out)
        }
        Command::ReductionCheck(_) => {
            let cfg: ReductionConfig = load_config(args)?;
            write_config(&args.out, &cfg)?;
            run_reduction_check(&cfg, &args.out)
        }
    }
}

/// Defaults, then the config file, then `--seed`. A seed must come from one
/// of the latter two.
fn load_config<T: DeserializeOwned>(args: &CommonArgs) -> CliResult<T> {
    let mut value = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            serde_json::from_str::<Value>(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        }
        None => Value::Object(Default::default()),
    };
    let obj = value
        .as_object_mut()
        .ok_or_else(|| CliError::Usage("config must be a JSON object".into()))?;
    if let Some(seed) = args.seed {
        obj.insert("seed".into(), Value::from(seed));
    }
    if !obj.contains_key("seed") {
        return Err(CliError::Usage("a seed is required (--seed or \"seed\" in the config)".into()));
    }
    serde_json::from_value(value).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
}

fn write_config<T: Serialize>(out: &Path, cfg: &T) -> CliResult<()> {
    write_json(&out.join("config.json"), cfg)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn usage_on_invalid(e: LabError) -> CliError {
    match e {
        LabError::InvalidParameter { .. } | LabError::DimensionMismatch { .. } => CliError::Usage(e.to_string()),
        other => CliError::Lab(other),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LandscapeConfig {
    pub seed: u64,
    pub wstar: Vec<f64>,
    pub grid: GridSpec,
    /// Input distribution; standard Gaussian when absent.
    pub input: Option<MixtureSpec>,
    pub psi: PeriodicSpec,
    /// Samples per cell when no closed form applies.
    pub mc_samples: usize,
    pub log_scale: bool,
    pub flat_radius: f64,
    pub flat_threshold: f64,
}

impl Default for LandscapeConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            wstar: vec![2.0, 2.0],
            grid: GridSpec::square(-3.0, 3.0, 201),
            input: None,
            psi: PeriodicSpec::Cosine,
            mc_samples: DEFAULT_MC_SAMPLES,
            log_scale: true,
            flat_radius: 0.5,
            flat_threshold: 1e-6,
        }
    }
}

/// Writes `landscape.csv`, `landscape.svg` and `summary.json`.
fn run_landscape(cfg: &LandscapeConfig, out: &Path) -> CliResult<bool> {
    if cfg.wstar.len() != 2 {
        return Err(CliError::Usage("landscape needs a 2-dimensional wstar".into()));
    }
    let mixture = match &cfg.input {
        Some(spec) => GaussianMixture::from_spec(spec).map_err(usage_on_invalid)?,
        None => GaussianMixture::standard(2)?,
    };
    let psi = PeriodicFn::from_spec(&cfg.psi).map_err(usage_on_invalid)?;
    let problem = Problem::new(mixture, psi, cfg.wstar.clone(), PredictorFamily::cosine(2)).map_err(usage_on_invalid)?;
    cfg.grid.validate().map_err(usage_on_invalid)?;
    let land = landscape_grid(&problem, &cfg.grid, cfg.mc_samples, cfg.seed)?;
    let mut summary = land.summary();
    summary.flatness = land.flat_fraction(cfg.flat_radius, cfg.flat_threshold);
    fs::write(out.join("landscape.csv"), land.to_csv())?;
    fs::write(out.join("landscape.svg"), land.to_svg(cfg.log_scale))?;
    write_json(&out.join("summary.json"), &summary)?;
    println!(
        "landscape: {} cells, min {:.3e}, max {:.3e} at ({}, {})",
        summary.cells, summary.min_value, summary.max_value, summary.maximum.w1, summary.maximum.w2
    );
    Ok(true)
}

#[derive(Serialize)]
struct VarianceSummary<'a> {
    fits: &'a DecayFits,
    monotone: bool,
}

/// Writes `variance.csv` and `fits.json`; the verdict is the monotonicity check.
fn run_variance_scan(cfg: &VarianceScanConfig, out: &Path) -> CliResult<bool> {
    cfg.validate().map_err(usage_on_invalid)?;
    let report = variance_of_gradient(cfg)?;
    let fits = report.fits();
    let monotone = report.is_monotone(2.0);
    fs::write(out.join("variance.csv"), report.to_csv())?;
    write_json(&out.join("fits.json"), &VarianceSummary { fits: &fits, monotone })?;
    println!("variance-scan: {} cells, monotone in r: {monotone}", report.cells.len());
    Ok(monotone)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryConfig {
    pub seed: u64,
    pub dim: usize,
    /// Every target has norm `2r`.
    pub r: f64,
    pub n_targets: usize,
    pub input_variance: f64,
    /// Its `seed` is derived from the top-level seed.
    pub trainer: Trainer,
    /// Its `seed` is derived from the top-level seed.
    pub oracle: OracleConfig,
    pub feedback: FeedbackSpec,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dim: 30,
            r: 4.0,
            n_targets: 10,
            input_variance: 1.0,
            trainer: Trainer::default(),
            oracle: OracleConfig::default(),
            feedback: FeedbackSpec::Oracle,
        }
    }
}

impl TrajectoryConfig {
    /// Copies seeds derived from the top-level seed into the sub-blocks.
    pub fn seeded(mut self) -> Self {
        self.trainer.seed = derive_seed(self.seed, &[1]);
        self.oracle.seed = derive_seed(self.seed, &[2]);
        self
    }
}

/// Writes one `trajectory_NN.jsonl` per target and `report.json`.
fn run_trajectory(cfg: &TrajectoryConfig, out: &Path) -> CliResult<bool> {
    let (report, records) = trajectory_report(cfg)?;
    for (k, rec) in records.iter().enumerate() {
        fs::write(out.join(format!("trajectory_{k:02}.jsonl")), rec.to_json_lines()?)?;
    }
    write_json(&out.join("report.json"), &report)?;
    println!(
        "trajectory: {}/{} identical pairs, {} true-branch flags, earliest divergence {:?}",
        report.identical_pairs, report.pairs, report.true_branch_flags, report.earliest_divergence
    );
    Ok(match cfg.feedback {
        FeedbackSpec::Oracle => report.identical_pairs == report.pairs && report.valid,
        FeedbackSpec::Honest { .. } => true,
    })
}

pub fn trajectory_report(
    cfg: &TrajectoryConfig,
) -> crate::error::Result<(IndependenceReport, Vec<crate::oracle_sim::TrajectoryRecord>)> {
    let d = cfg.dim;
    let template = Problem::new(
        GaussianMixture::isotropic(d, cfg.input_variance)?,
        PeriodicFn::cosine(),
        vec![0.0; d],
        PredictorFamily::cosine(d),
    )?;
    trajectory_independence_check(&template, 2.0 * cfg.r, cfg.n_targets, &cfg.trainer, &cfg.oracle, cfg.feedback)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Random { dim: usize, size: usize },
    Csv { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlCheck {
    pub algorithm: InnerAlgorithm,
    pub trials: usize,
    /// The control counts as detected when its discrepancy reaches this.
    pub min_discrepancy: f64,
}

impl Default for ControlCheck {
    fn default() -> Self {
        Self {
            algorithm: InnerAlgorithm::greedy_coordinate(),
            trials: 5,
            min_discrepancy: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpanCheck {
    pub dim: usize,
    pub directions: usize,
    pub sizes: Vec<usize>,
    pub n_datasets: usize,
    pub n_holdout: usize,
}

impl Default for SpanCheck {
    fn default() -> Self {
        Self {
            dim: 10,
            directions: 3,
            sizes: vec![2, 5, 20],
            n_datasets: 200,
            n_holdout: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InvarianceConfig {
    pub seed: u64,
    pub dataset: DatasetSource,
    pub algorithms: Vec<InnerAlgorithm>,
    pub whitened: bool,
    pub transforms: TransformFamily,
    pub trials: usize,
    pub holdout: usize,
    pub tolerance: f64,
    /// Coordinate-dependent algorithm that must fail the unwhitened
    /// orthogonal check.
    pub control: Option<ControlCheck>,
    pub span: Option<SpanCheck>,
}

impl Default for InvarianceConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetSource::Random { dim: 10, size: 200 },
            algorithms: InnerAlgorithm::registry(),
            whitened: true,
            transforms: TransformFamily::Linear { cond: 1e3 },
            trials: 20,
            holdout: 100,
            tolerance: 1e-6,
            control: Some(ControlCheck::default()),
            span: Some(SpanCheck::default()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlVerdict {
    pub verdict: InvarianceVerdict,
    pub detected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceOutput {
    pub verdicts: Vec<InvarianceVerdict>,
    pub control: Option<ControlVerdict>,
    pub span: Vec<SpanCoverage>,
    pub pass: bool,
}

pub fn invariance_output(cfg: &InvarianceConfig) -> crate::error::Result<InvarianceOutput> {
    let data = match &cfg.dataset {
        DatasetSource::Random { dim, size } => Dataset::random(*dim, *size, derive_seed(cfg.seed, &[1]))?,
        DatasetSource::Csv { path } => Dataset::from_csv(&fs::read_to_string(path)?)?,
    };
    let verdicts = cfg
        .algorithms
        .iter()
        .map(|inner| {
            let alg = Algorithm {
                inner: inner.clone(),
                whitened: cfg.whitened,
            };
            check_invariance(&alg, &data, cfg.transforms, cfg.trials, cfg.holdout, derive_seed(cfg.seed, &[2]), cfg.tolerance)
        })
        .collect::<crate::error::Result<Vec<_>>>()?;
    let control = match &cfg.control {
        Some(c) => {
            let v = check_invariance(
                &Algorithm::plain(c.algorithm.clone()),
                &data,
                TransformFamily::Orthogonal,
                c.trials,
                cfg.holdout,
                derive_seed(cfg.seed, &[3]),
                cfg.tolerance,
            )?;
            Some(ControlVerdict {
                detected: v.max_train_discrepancy >= c.min_discrepancy,
                verdict: v,
            })
        }
        None => None,
    };
    let span = match &cfg.span {
        Some(s) => {
            let src = SpanSource::random_directions(s.dim, s.directions, derive_seed(cfg.seed, &[4]));
            s.sizes
                .iter()
                .map(|&m| span_coverage(&src, m, s.n_holdout, s.n_datasets, derive_seed(cfg.seed, &[5, m as u64])))
                .collect::<crate::error::Result<Vec<_>>>()?
        }
        None => Vec::new(),
    };
    let pass = verdicts.iter().all(|v| v.pass)
        && control.as_ref().is_none_or(|c| c.detected)
        && span.iter().all(|s| s.mean <= s.bound);
    Ok(InvarianceOutput {
        verdicts,
        control,
        span,
        pass,
    })
}

/// Writes `verdicts.json`.
fn run_invariance(cfg: &InvarianceConfig, out: &Path) -> CliResult<bool> {
    let output = invariance_output(cfg).map_err(usage_on_invalid)?;
    write_json(&out.join("verdicts.json"), &output)?;
    for v in &output.verdicts {
        println!(
            "invariance: {}{} max train discrepancy {:.3e} ({})",
            if v.whitened { "whitened " } else { "" },
            v.algorithm,
            v.max_train_discrepancy,
            if v.pass { "pass" } else { "FAIL" }
        );
    }
    Ok(output.pass)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReductionConfig {
    pub seed: u64,
    pub instances: usize,
    /// Largest cube dimension `d − 1` of random instances.
    pub max_dim: usize,
    pub max_halfspaces: usize,
    /// JSON array of instances used instead of random ones.
    pub instances_file: Option<PathBuf>,
    pub padding_points: usize,
    pub rounding_pairs: usize,
}

impl Default for ReductionConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 100,
            max_dim: 12,
            max_halfspaces: 5,
            instances_file: None,
            padding_points: 10_000,
            rounding_pairs: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceResult {
    pub dim: usize,
    pub halfspaces: usize,
    pub max_norm: f64,
    pub points: u64,
    pub mismatches: u64,
    pub float_mismatches: u64,
    pub s_min: f64,
    pub eigen_gap: f64,
    pub padding_max_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionOutput {
    pub instances: Vec<InstanceResult>,
    pub total_mismatches: u64,
    pub max_eigen_gap: f64,
    pub rounding: RoundingReport,
    pub pass: bool,
}

/// Random instances with weights bounded by `d`, where `d − 1` is the cube
/// dimension.
pub fn random_instances(n: usize, max_dim: usize, max_halfspaces: usize, seed: u64) -> crate::error::Result<Vec<HalfspaceIntersection>> {
    if max_dim == 0 || max_halfspaces == 0 {
        return Err(crate::error::invalid("max_dim", "dimension and halfspace limits must be positive"));
    }
    let mut rng = stream_rng(seed, 0);
    (0..n)
        .map(|k| {
            let dim = rng.random_range(1..=max_dim);
            let halfspaces = rng.random_range(1..=max_halfspaces);
            HalfspaceIntersection::random(dim, halfspaces, dim as i64 + 1, derive_seed(seed, &[k as u64]))
        })
        .collect()
}

pub fn reduction_output(cfg: &ReductionConfig) -> crate::error::Result<(Vec<HalfspaceIntersection>, ReductionOutput)> {
    let instances = match &cfg.instances_file {
        Some(path) => serde_json::from_str(&fs::read_to_string(path)?)?,
        None => random_instances(cfg.instances, cfg.max_dim, cfg.max_halfspaces, derive_seed(cfg.seed, &[1]))?,
    };
    let mut results = Vec::with_capacity(instances.len());
    for (k, h) in instances.iter().enumerate() {
        let rep = exhaustive_check(h)?;
        let pad = check_padding(&network_matrix(h), cfg.padding_points, derive_seed(cfg.seed, &[2, k as u64]))?;
        results.push(InstanceResult {
            dim: rep.dim,
            halfspaces: rep.halfspaces,
            max_norm: h.max_norm(),
            points: rep.points,
            mismatches: rep.mismatches,
            float_mismatches: rep.float_mismatches,
            s_min: pad.s_min,
            eigen_gap: pad.eigen_gap,
            padding_max_diff: pad.max_output_diff,
        });
    }
    let mut rng = stream_rng(derive_seed(cfg.seed, &[3]), 0);
    let f: Vec<f64> = (0..cfg.rounding_pairs).map(|_| rng.random::<f64>()).collect();
    let g: Vec<i64> = (0..cfg.rounding_pairs).map(|_| i64::from(rng.random::<bool>())).collect();
    let rounding = round_and_bound(&f, &g)?;
    let total_mismatches = results.iter().map(|r| r.mismatches + r.float_mismatches).sum();
    let max_eigen_gap = results.iter().map(|r| r.eigen_gap).fold(0.0, f64::max);
    let pass = total_mismatches == 0
        && max_eigen_gap <= 1e-10
        && results.iter().all(|r| r.padding_max_diff == 0.0 && r.s_min >= 1.0 - 1e-12)
        && rounding.holds
        && rounding.pointwise_violations == 0;
    Ok((
        instances,
        ReductionOutput {
            instances: results,
            total_mismatches,
            max_eigen_gap,
            rounding,
            pass,
        },
    ))
}

/// Writes `instances.json` and `report.json`.
fn run_reduction_check(cfg: &ReductionConfig, out: &Path) -> CliResult<bool> {
    let (instances, output) = reduction_output(cfg).map_err(usage_on_invalid)?;
    write_json(&out.join("instances.json"), &instances)?;
    write_json(&out.join("report.json"), &output)?;
    println!(
        "reduction-check: {} instances, {} mismatches, rounding violations {}",
        output.instances.len(),
        output.total_mismatches,
        output.rounding.pointwise_violations
    );
    Ok(output.pass)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_in(dir: &Path, extra: &[&str]) -> i32 {
        let mut args = vec!["lab".to_string()];
        args.extend(extra.iter().map(|s| s.to_string()));
        args.push("--out".into());
        args.push(dir.display().to_string());
        run(args)
    }

    #[test]
    fn missing_seed_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(run_in(dir.path(), &["landscape"]), EXIT_USAGE);
    }

    #[test]
    fn unknown_subcommand_is_usage_error() {
        assert_eq!(run(["lab", "nonsense"]), EXIT_USAGE);
        assert_eq!(run(["lab", "--help"]), EXIT_OK);
    }

    #[test]
    fn unknown_config_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        fs::write(&cfg, r#"{"seed": 1, "wstar": [1, 1], "colour": "red"}"#).unwrap();
        assert_eq!(run_in(dir.path(), &["landscape", "--config", cfg.to_str().unwrap()]), EXIT_USAGE);
    }

    #[test]
    fn flag_seed_overrides_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        fs::write(&cfg, r#"{"seed": 1, "grid": {"lo": [-1, -1], "hi": [1, 1], "n": [5, 5]}}"#).unwrap();
        let out = dir.path().join("o");
        let code = run_in(&out, &["landscape", "--config", cfg.to_str().unwrap(), "--seed", "9"]);
        assert_eq!(code, EXIT_OK);
        let echoed: Value = serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
        assert_eq!(echoed["seed"], 9);
        assert_eq!(echoed["grid"]["n"][0], 5);
        assert_eq!(echoed["wstar"][0], 2.0);
    }

    #[test]
    fn divergence_maps_to_exit_three() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        fs::write(
            &cfg,
            r#"{"dim": 2, "r": 0.25, "n_targets": 2,
                "trainer": {"step": 1e308, "iters": 3, "init": {"kind": "fixed", "w": [0.05, 0.02]}},
                "feedback": {"kind": "honest", "gradient": {"kind": "closed_form"}}}"#,
        )
        .unwrap();
        assert_eq!(
            run_in(&dir.path().join("o"), &["trajectory", "--config", cfg.to_str().unwrap(), "--seed", "1"]),
            EXIT_DIVERGENCE
        );
    }

    #[test]
    fn strict_failure_exits_two() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        // The greedy algorithm is not invariant, so its verdict fails.
        fs::write(
            &cfg,
            r#"{"dataset": {"kind": "random", "dim": 5, "size": 30},
                "algorithms": [{"kind": "greedy_coordinate", "steps": 2}],
                "whitened": false, "transforms": {"kind": "orthogonal"}, "trials": 2,
                "control": null, "span": null}"#,
        )
        .unwrap();
        let path = cfg.to_str().unwrap();
        assert_eq!(run_in(&dir.path().join("a"), &["invariance", "--config", path, "--seed", "3"]), EXIT_OK);
        assert_eq!(
            run_in(&dir.path().join("b"), &["invariance", "--config", path, "--seed", "3", "--strict"]),
            EXIT_VERDICT
        );
    }
}
