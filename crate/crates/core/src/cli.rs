//! Batch front end: config loading, command dispatch and artifact output.
//!
//! # Config document
//!
//! TOML, or JSON when the file name ends in `.json`. Unknown keys are
//! rejected. All top-level keys are optional except where a command needs
//! them.
//!
//! ```toml
//! command = "approx"          # value | sensitivity | approx | eps-sweep |
//!                             # dim-sweep | fd-solve | complexity
//! dim = 1                     # inline model
//! drift = [1.0]
//! vol = [1.0]                 # row-major d×d
//! horizon = 1.0
//! # [generate]                # or a normalized random model
//! # dim = 5
//! # seed = 0
//! boundary = "quartic"        # quartic | sine | external
//! gamma = 1.0                 # default 1
//! eta = 0.0                   # default 1
//! epsilon = 0.05
//! epsilons = [0.01, 0.02, 0.03]
//! t = 0.0
//! x = [0.0]                   # default: origin
//!
//! [mc]
//! N = 100
//! M0 = 3000000
//! M1 = 30000
//! h = 1e-3                    # default 1e-3·max(1, |x|∞)
//! seed = 0
//! runs = 10
//! force_fd = false
//! difference = "forward"      # forward | central
//! sampling = "scaled"         # scaled | path
//! inner_pool = "shared"       # shared | independent
//!
//! [fd]
//! half_width = 10.0           # default from the problem scales
//! nx = 2001
//! nt = 20000                  # default from the stability bound
//! safety = 0.9
//! scheme = "auto"             # auto | central | upwind
//! allow_nonconvex = false
//!
//! [sweep]                     # eps-sweep
//! v0_source = "fd"            # fd | mc | analytic
//! sens_source = "analytic"    # analytic | mc
//!
//! [dim_sweep]
//! dims = [1, 5, 10]
//! model_seed = 0
//!
//! [complexity]                # defaults from dim and [mc]
//! d = 1
//! N = 1
//! M0 = 1
//! M1 = 1
//!
//! [output]
//! path = "out.csv"
//! format = "csv"              # csv | json
//! ```
//!
//! Command-line flags override the document. With an output path, a
//! `<path>.summary.json` sidecar records the command, seed, config hash and
//! version next to the artifact.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Parser, ValueEnum};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analytic::{quartic_sensitivity, quartic_v0, SensitivityKind};
use crate::boundary::{Boundary, Quartic, Sine};
use crate::engine::{
    estimate, predicted_complexity, sensitivity_mc, v0_mc, Difference, EstimatorStats, McConfig,
    SensitivityReport,
};
use crate::error::{Error, Result};
use crate::fd_oracle::{epsilon_sweep, solve, AdvectionScheme, FdProblem1d, SweepTable};
use crate::model::{generate_normalized_model, validate_expansion_regime, BaselineModel, EvalPoint, UncertaintySpec};
use crate::quadrature::TimeRule;
use crate::sampling::{InnerPool, SamplingMode, SamplingOptions};

/// Environment variable holding the worker count.
pub const THREADS_ENV: &str = "KOLSENS_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Value,
    Sensitivity,
    Approx,
    EpsSweep,
    DimSweep,
    FdSolve,
    Complexity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SamplingArg {
    Scaled,
    Path,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryKind {
    #[default]
    Quartic,
    Sine,
    /// User-supplied functions; only reachable through the library.
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum V0Source {
    #[default]
    Fd,
    Mc,
    Analytic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SensSource {
    #[default]
    Analytic,
    Mc,
}

/// Command-line flags.
#[derive(Debug, Clone, Parser)]
#[command(name = "kolsens", version, about = "Drift/volatility sensitivity of Kolmogorov PDE values")]
pub struct Args {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_enum)]
    pub command: Option<Command>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    /// Fail with exit code 4 when ε is outside the expansion regime.
    #[arg(long)]
    pub strict: bool,
    #[arg(long)]
    pub force_fd: bool,
    #[arg(long)]
    pub h: Option<f64>,
    #[arg(long, value_enum)]
    pub sampling: Option<SamplingArg>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    command: Option<Command>,
    dim: Option<usize>,
    drift: Option<Vec<f64>>,
    vol: Option<Vec<f64>>,
    horizon: Option<f64>,
    generate: Option<GenerateSection>,
    boundary: Option<BoundaryKind>,
    gamma: Option<f64>,
    eta: Option<f64>,
    epsilon: Option<f64>,
    epsilons: Option<Vec<f64>>,
    t: Option<f64>,
    x: Option<Vec<f64>>,
    #[serde(default)]
    mc: McSection,
    #[serde(default)]
    fd: FdSettings,
    #[serde(default)]
    sweep: SweepSettings,
    #[serde(default)]
    dim_sweep: DimSweepSection,
    complexity: Option<ComplexityArgs>,
    #[serde(default)]
    output: OutputSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenerateSection {
    dim: Option<usize>,
    #[serde(default)]
    seed: u64,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct McSection {
    #[serde(alias = "N")]
    n_steps: Option<usize>,
    #[serde(alias = "M0")]
    m0: Option<usize>,
    #[serde(alias = "M1")]
    m1: Option<usize>,
    h: Option<f64>,
    seed: Option<u64>,
    runs: Option<usize>,
    force_fd: Option<bool>,
    difference: Option<Difference>,
    sampling: Option<SamplingMode>,
    inner_pool: Option<InnerPool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct DimSweepSection {
    dims: Option<Vec<usize>>,
    #[serde(default)]
    model_seed: u64,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct OutputSection {
    path: Option<PathBuf>,
    format: Option<Format>,
}

/// Finite-difference settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FdSettings {
    pub half_width: Option<f64>,
    pub nx: usize,
    pub nt: Option<usize>,
    pub safety: f64,
    pub scheme: AdvectionScheme,
    pub allow_nonconvex: bool,
}

impl Default for FdSettings {
    fn default() -> Self {
        Self {
            half_width: None,
            nx: 2001,
            nt: None,
            safety: 0.9,
            scheme: AdvectionScheme::Auto,
            allow_nonconvex: false,
        }
    }
}

/// Where an ε sweep takes `v⁰` and the sensitivity from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSettings {
    pub v0_source: V0Source,
    pub sens_source: SensSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComplexityArgs {
    pub d: Option<usize>,
    #[serde(rename = "N")]
    pub n: Option<usize>,
    #[serde(rename = "M0")]
    pub m0: Option<usize>,
    #[serde(rename = "M1")]
    pub m1: Option<usize>,
}

/// Baseline model source.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelSource {
    Inline {
        drift: Vec<f64>,
        vol: Vec<f64>,
        horizon: f64,
    },
    Generated {
        dim: usize,
        seed: u64,
        horizon: f64,
    },
}

impl ModelSource {
    pub fn build(&self) -> Result<BaselineModel> {
        match self {
            ModelSource::Inline { drift, vol, horizon } => BaselineModel::new(drift.clone(), vol.clone(), *horizon),
            ModelSource::Generated { dim, seed, horizon } => {
                generate_normalized_model(*dim, *seed)?.with_horizon(*horizon)
            }
        }
    }
}

/// Monte Carlo settings including the number of independent runs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McSettings {
    pub config: McConfig,
    pub runs: usize,
}

/// Fully resolved configuration; defaults are filled in so that the hash
/// only depends on what a run actually does.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub command: Command,
    pub model: Option<ModelSource>,
    pub boundary: BoundaryKind,
    pub t: f64,
    pub x: Option<Vec<f64>>,
    pub gamma: f64,
    pub eta: f64,
    pub epsilon: Option<f64>,
    pub epsilons: Vec<f64>,
    pub mc: McSettings,
    pub fd: FdSettings,
    pub sweep: SweepSettings,
    pub dims: Vec<usize>,
    pub model_seed: u64,
    pub complexity: Option<ComplexityArgs>,
    #[serde(skip)]
    pub strict: bool,
    #[serde(skip)]
    pub out: Option<PathBuf>,
    #[serde(skip)]
    pub format: Format,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Reads a config document and applies the command-line overrides.
pub fn load(args: &Args) -> Result<RunConfig> {
    let text = fs::read_to_string(&args.config).map_err(|e| Error::io(&args.config, e))?;
    let is_json = args.config.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let file: ConfigFile = if is_json {
        serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", args.config.display())))?
    } else {
        toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", args.config.display())))?
    };
    resolve(file, args)
}

/// Parses a config document from a string (TOML) without flag overrides.
pub fn parse_toml(text: &str, config_path: &Path) -> Result<RunConfig> {
    let file: ConfigFile = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
    let args = Args::parse_from(["kolsens", "--config", &config_path.to_string_lossy()]);
    resolve(file, &args)
}

fn resolve(file: ConfigFile, args: &Args) -> Result<RunConfig> {
    let command = args
        .command
        .or(file.command)
        .ok_or_else(|| config_err("no command given"))?;
    let horizon = file.horizon.unwrap_or(1.0);

    let model = match (&file.generate, &file.drift, &file.vol) {
        (Some(_), Some(_), _) | (Some(_), _, Some(_)) => {
            return Err(config_err("give either drift/vol or [generate], not both"))
        }
        (Some(g), None, None) => {
            let dim = g.dim.or(file.dim).ok_or_else(|| config_err("[generate] needs a dimension"))?;
            if dim == 0 {
                return Err(config_err("dimension must be at least 1"));
            }
            Some(ModelSource::Generated {
                dim,
                seed: g.seed,
                horizon,
            })
        }
        (None, Some(drift), Some(vol)) => {
            if let Some(d) = file.dim {
                if d != drift.len() || d * d != vol.len() {
                    return Err(config_err(format!(
                        "dim = {d} does not match drift ({}) and vol ({}) lengths",
                        drift.len(),
                        vol.len()
                    )));
                }
            }
            Some(ModelSource::Inline {
                drift: drift.clone(),
                vol: vol.clone(),
                horizon,
            })
        }
        (None, None, None) => None,
        _ => return Err(config_err("drift and vol must be given together")),
    };

    let defaults = McConfig::default();
    let mc = &file.mc;
    let sampling_mode = match args.sampling {
        Some(SamplingArg::Scaled) => SamplingMode::Scaled,
        Some(SamplingArg::Path) => SamplingMode::Path,
        None => mc.sampling.unwrap_or_default(),
    };
    let config = McConfig {
        n_steps: mc.n_steps.unwrap_or(defaults.n_steps),
        m0: mc.m0.unwrap_or(defaults.m0),
        m1: mc.m1.unwrap_or(defaults.m1),
        h: args.h.or(mc.h),
        seed: args.seed.or(mc.seed).unwrap_or(defaults.seed),
        force_fd: args.force_fd || mc.force_fd.unwrap_or(false),
        difference: mc.difference.unwrap_or_default(),
        sampling: SamplingOptions {
            mode: sampling_mode,
            inner_pool: mc.inner_pool.unwrap_or_default(),
        },
    };
    let runs = args.runs.or(mc.runs).unwrap_or(10);
    if runs == 0 {
        return Err(config_err("runs must be at least 1"));
    }
    if config.n_steps == 0 || config.m1 == 0 {
        return Err(config_err("N and M1 must be at least 1"));
    }
    if config.m0 < config.m1 {
        return Err(config_err(format!("M0 = {} must be at least M1 = {}", config.m0, config.m1)));
    }
    if let Some(h) = config.h {
        if !(h > 0.0 && h.is_finite()) {
            return Err(config_err("h must be positive"));
        }
    }

    let epsilons = file.epsilons.unwrap_or_default();
    if epsilons.iter().any(|e| !(*e >= 0.0 && e.is_finite())) || file.epsilon.is_some_and(|e| !(e >= 0.0)) {
        return Err(config_err("epsilon values must be finite and non-negative"));
    }
    let dims = file.dim_sweep.dims.unwrap_or_else(|| vec![1, 5, 10]);
    if dims.contains(&0) {
        return Err(config_err("dim-sweep dimensions must be at least 1"));
    }

    Ok(RunConfig {
        command,
        model,
        boundary: file.boundary.unwrap_or_default(),
        t: file.t.unwrap_or(0.0),
        x: file.x,
        gamma: file.gamma.unwrap_or(1.0),
        eta: file.eta.unwrap_or(1.0),
        epsilon: file.epsilon,
        epsilons,
        mc: McSettings { config, runs },
        fd: file.fd,
        sweep: file.sweep,
        dims,
        model_seed: file.dim_sweep.model_seed,
        complexity: file.complexity,
        strict: args.strict,
        out: args.out.clone().or(file.output.path),
        format: args.format.or(file.output.format).unwrap_or_default(),
    })
}

impl RunConfig {
    /// SHA-256 of the resolved config without output settings.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    fn model(&self) -> Result<BaselineModel> {
        self.model
            .as_ref()
            .ok_or_else(|| config_err("this command needs a model (drift/vol or [generate])"))?
            .build()
            .map_err(|e| match e {
                Error::Generation { .. } => e,
                other => config_err(other.to_string()),
            })
    }

    fn point(&self, model: &BaselineModel) -> Result<EvalPoint> {
        let x = self.x.clone().unwrap_or_else(|| vec![0.0; model.dim()]);
        EvalPoint::new(self.t, x, model).map_err(|e| config_err(e.to_string()))
    }

    fn uncertainty(&self, epsilon: f64) -> Result<UncertaintySpec> {
        UncertaintySpec::new(self.gamma, self.eta, epsilon).map_err(|e| config_err(e.to_string()))
    }

    fn check_regime(&self, model: &BaselineModel, unc: &UncertaintySpec) -> Result<()> {
        let regime = validate_expansion_regime(model, unc);
        if !regime.valid {
            if self.strict {
                return Err(Error::Regime {
                    epsilon: unc.epsilon,
                    bound: regime.bound,
                });
            }
            warn!("epsilon = {} is not below the expansion bound {}", unc.epsilon, regime.bound);
        }
        Ok(())
    }
}

fn boundary_for(kind: BoundaryKind, dim: usize) -> Result<Arc<dyn Boundary>> {
    match kind {
        BoundaryKind::Quartic if dim == 1 => Ok(Arc::new(Quartic)),
        BoundaryKind::Quartic => Err(config_err(format!("quartic boundary is one-dimensional, model has d = {dim}"))),
        BoundaryKind::Sine => Ok(Arc::new(Sine::new(dim)?)),
        BoundaryKind::External => Err(config_err(
            "external boundaries are supplied through the library API, not the command line",
        )),
    }
}

/// One line of the `value` / `sensitivity` tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatRow {
    pub quantity: String,
    pub mean: f64,
    pub std_dev: f64,
    pub std_error: f64,
    pub runs: usize,
}

impl StatRow {
    fn new(quantity: &str, s: EstimatorStats) -> Self {
        Self {
            quantity: quantity.into(),
            mean: s.mean,
            std_dev: s.std_dev,
            std_error: s.std_error(),
            runs: s.runs,
        }
    }
}

/// One line of a dimension sweep; the runtime column comes last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimSweepRow {
    pub d: usize,
    pub v0_mean: f64,
    pub v0_std: f64,
    pub sens_drift_mean: f64,
    pub sens_drift_std: f64,
    pub sens_vol_mean: f64,
    pub sens_vol_std: f64,
    pub sens_sum_mean: f64,
    pub sens_sum_std: f64,
    pub lambda_min: f64,
    pub runtime_seconds: f64,
}

/// Summary of a single finite-difference solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdSummary {
    pub t: f64,
    pub x: f64,
    pub v_fd: f64,
    pub gamma: f64,
    pub eta: f64,
    pub epsilon: f64,
    pub nx: usize,
    pub nt: usize,
    pub dt: f64,
    pub half_width: f64,
    pub scheme: AdvectionScheme,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridValue {
    pub x: f64,
    pub v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityRow {
    pub d: usize,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "M0")]
    pub m0: usize,
    #[serde(rename = "M1")]
    pub m1: usize,
    pub predicted_ops: u64,
}

/// Primary result of a command.
#[derive(Debug, Clone, PartialEq)]
pub enum Artifact {
    Stats(Vec<StatRow>),
    Reports(Vec<SensitivityReport>),
    Sweep(SweepTable),
    DimSweep(Vec<DimSweepRow>),
    FdSolve { summary: FdSummary, profile: Vec<GridValue> },
    Complexity(ComplexityRow),
}

/// Provenance written next to every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub command: Command,
    pub seed: u64,
    pub config_hash: String,
    pub version: String,
    pub runs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slope: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub v0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sens_drift: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sens_vol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fd: Option<FdSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub artifact: Artifact,
    pub summary: Summary,
}

/// Executes the configured command.
pub fn run(cfg: &RunConfig) -> Result<Outcome> {
    let mut summary = Summary {
        command: cfg.command,
        seed: cfg.mc.config.seed,
        config_hash: cfg.hash(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        runs: cfg.mc.runs,
        slope: None,
        v0: None,
        sens_drift: None,
        sens_vol: None,
        fd: None,
    };
    let artifact = match cfg.command {
        Command::Value => run_value(cfg)?,
        Command::Sensitivity => run_sensitivity(cfg)?,
        Command::Approx => run_approx(cfg)?,
        Command::EpsSweep => run_eps_sweep(cfg, &mut summary)?,
        Command::DimSweep => run_dim_sweep(cfg)?,
        Command::FdSolve => run_fd_solve(cfg, &mut summary)?,
        Command::Complexity => run_complexity(cfg)?,
    };
    Ok(Outcome { artifact, summary })
}

fn seeds(cfg: &RunConfig) -> impl Iterator<Item = u64> + '_ {
    (0..cfg.mc.runs).map(|r| cfg.mc.config.seed.wrapping_add(r as u64))
}

fn tag_seed<T>(seed: u64, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::RunFailed {
        seed,
        source: Box::new(e),
    })
}

fn run_value(cfg: &RunConfig) -> Result<Artifact> {
    let model = cfg.model()?;
    let boundary = boundary_for(cfg.boundary, model.dim())?;
    let point = cfg.point(&model)?;
    let mut values = Vec::with_capacity(cfg.mc.runs);
    for seed in seeds(cfg) {
        let mc = cfg.mc.config.with_seed(seed);
        let v = tag_seed(seed, mc.draw(&model, &point).and_then(|s| v0_mc(&model, boundary.as_ref(), &point, &s)))?;
        values.push(v);
    }
    Ok(Artifact::Stats(vec![StatRow::new("v0", EstimatorStats::from_values(&values))]))
}

fn run_sensitivity(cfg: &RunConfig) -> Result<Artifact> {
    let model = cfg.model()?;
    let boundary = boundary_for(cfg.boundary, model.dim())?;
    let point = cfg.point(&model)?;
    let (mut drift, mut vol, mut total) = (Vec::new(), Vec::new(), Vec::new());
    for seed in seeds(cfg) {
        let mc = cfg.mc.config.with_seed(seed);
        let s = tag_seed(
            seed,
            mc.draw(&model, &point)
                .and_then(|g| sensitivity_mc(&model, boundary.as_ref(), &point, &g, mc.sensitivity_options())),
        )?;
        drift.push(s.sens_drift);
        vol.push(s.sens_vol);
        total.push(s.total(cfg.gamma, cfg.eta));
    }
    Ok(Artifact::Stats(vec![
        StatRow::new("sens_drift", EstimatorStats::from_values(&drift)),
        StatRow::new("sens_vol", EstimatorStats::from_values(&vol)),
        StatRow::new("sens_total", EstimatorStats::from_values(&total)),
    ]))
}

fn run_approx(cfg: &RunConfig) -> Result<Artifact> {
    let model = cfg.model()?;
    let boundary = boundary_for(cfg.boundary, model.dim())?;
    let point = cfg.point(&model)?;
    let epsilon = cfg.epsilon.ok_or_else(|| config_err("approx needs epsilon"))?;
    let unc = cfg.uncertainty(epsilon)?;
    cfg.check_regime(&model, &unc)?;
    let mut reports = Vec::with_capacity(cfg.mc.runs);
    for seed in seeds(cfg) {
        let mc = cfg.mc.config.with_seed(seed);
        reports.push(tag_seed(seed, estimate(&model, boundary.as_ref(), &point, &unc, &mc))?);
    }
    Ok(Artifact::Reports(reports))
}

fn fd_template(cfg: &RunConfig, model: &BaselineModel, point: &EvalPoint, boundary: Arc<dyn Boundary>) -> Result<FdProblem1d> {
    if model.dim() != 1 {
        return Err(config_err("finite-difference commands need a one-dimensional model"));
    }
    Ok(FdProblem1d {
        gamma: cfg.gamma,
        eta: cfg.eta,
        t: point.t,
        x: point.x[0],
        half_width: cfg.fd.half_width,
        nx: cfg.fd.nx,
        nt: cfg.fd.nt,
        safety: cfg.fd.safety,
        scheme: cfg.fd.scheme,
        allow_nonconvex: cfg.fd.allow_nonconvex,
        ..FdProblem1d::new(model.drift()[0], model.vol()[0], model.horizon(), boundary)
    })
}

fn run_eps_sweep(cfg: &RunConfig, summary: &mut Summary) -> Result<Artifact> {
    let model = cfg.model()?;
    let boundary = boundary_for(cfg.boundary, model.dim())?;
    let point = cfg.point(&model)?;
    if cfg.epsilons.len() < 3 {
        return Err(config_err("eps-sweep needs at least 3 epsilons"));
    }
    for &e in &cfg.epsilons {
        cfg.check_regime(&model, &cfg.uncertainty(e)?)?;
    }
    let template = fd_template(cfg, &model, &point, boundary.clone())?;
    let quartic = cfg.boundary == BoundaryKind::Quartic;
    let (b0, s0, horizon, x) = (model.drift()[0], model.vol()[0], model.horizon(), point.x[0]);

    let needs_mc = cfg.sweep.v0_source == V0Source::Mc || cfg.sweep.sens_source == SensSource::Mc;
    let mc_report = if needs_mc {
        let unc = cfg.uncertainty(0.0)?;
        Some(estimate(&model, boundary.as_ref(), &point, &unc, &cfg.mc.config)?)
    } else {
        None
    };

    let v0 = match cfg.sweep.v0_source {
        V0Source::Fd => solve(&FdProblem1d {
            epsilon: 0.0,
            ..template.clone()
        })?
        .at(point.t, x)?,
        V0Source::Mc => mc_report.as_ref().map(|r| r.v0).unwrap_or(f64::NAN),
        V0Source::Analytic if quartic => quartic_v0(point.t, x, b0, s0, horizon),
        V0Source::Analytic => return Err(config_err("analytic v0 is only available for the quartic boundary")),
    };
    let (sens_drift, sens_vol) = match cfg.sweep.sens_source {
        SensSource::Analytic if quartic => {
            let rule = TimeRule::default();
            (
                quartic_sensitivity(point.t, x, b0, s0, horizon, SensitivityKind::Drift, rule)?,
                quartic_sensitivity(point.t, x, b0, s0, horizon, SensitivityKind::Vol, rule)?,
            )
        }
        SensSource::Analytic => {
            return Err(config_err("analytic sensitivities are only available for the quartic boundary"))
        }
        SensSource::Mc => {
            let r = mc_report.as_ref().expect("estimated above");
            (r.sens_drift, r.sens_vol)
        }
    };
    let approx: Vec<f64> = cfg
        .epsilons
        .iter()
        .map(|e| v0 + e * (cfg.gamma * sens_drift + cfg.eta * sens_vol))
        .collect();
    let table = epsilon_sweep(&template, &cfg.epsilons, &approx)?;
    summary.slope = table.slope;
    summary.v0 = Some(v0);
    summary.sens_drift = Some(sens_drift);
    summary.sens_vol = Some(sens_vol);
    summary.runs = 1;
    Ok(Artifact::Sweep(table))
}

fn run_dim_sweep(cfg: &RunConfig) -> Result<Artifact> {
    let horizon = match &cfg.model {
        Some(ModelSource::Inline { .. }) => {
            return Err(config_err("dim-sweep generates its own models; remove drift/vol"))
        }
        Some(ModelSource::Generated { horizon, .. }) => *horizon,
        None => 1.0,
    };
    let mut rows = Vec::with_capacity(cfg.dims.len());
    for &d in &cfg.dims {
        let model = generate_normalized_model(d, cfg.model_seed)?.with_horizon(horizon)?;
        let boundary = boundary_for(cfg.boundary, d)?;
        let point = EvalPoint {
            t: cfg.t,
            x: vec![0.0; d],
        };
        let point = EvalPoint::new(point.t, point.x, &model).map_err(|e| config_err(e.to_string()))?;
        let (mut v0s, mut drift, mut vol, mut total, mut times) = (vec![], vec![], vec![], vec![], vec![]);
        for seed in seeds(cfg) {
            let mc = cfg.mc.config.with_seed(seed);
            let started = Instant::now();
            let (v0, s) = tag_seed(seed, (|| {
                let grid = mc.draw(&model, &point)?;
                let v0 = v0_mc(&model, boundary.as_ref(), &point, &grid)?;
                let s = sensitivity_mc(&model, boundary.as_ref(), &point, &grid, mc.sensitivity_options())?;
                Ok((v0, s))
            })())?;
            times.push(started.elapsed().as_secs_f64());
            v0s.push(v0);
            drift.push(s.sens_drift);
            vol.push(s.sens_vol);
            total.push(s.total(1.0, 1.0));
        }
        let (v, dr, vo, to) = (
            EstimatorStats::from_values(&v0s),
            EstimatorStats::from_values(&drift),
            EstimatorStats::from_values(&vol),
            EstimatorStats::from_values(&total),
        );
        info!("d = {d}: v0 = {:.6}, sens = ({:.6}, {:.6})", v.mean, dr.mean, vo.mean);
        rows.push(DimSweepRow {
            d,
            v0_mean: v.mean,
            v0_std: v.std_dev,
            sens_drift_mean: dr.mean,
            sens_drift_std: dr.std_dev,
            sens_vol_mean: vo.mean,
            sens_vol_std: vo.std_dev,
            sens_sum_mean: to.mean,
            sens_sum_std: to.std_dev,
            lambda_min: model.lambda_min(),
            runtime_seconds: times.iter().sum::<f64>() / times.len() as f64,
        });
    }
    Ok(Artifact::DimSweep(rows))
}

fn run_fd_solve(cfg: &RunConfig, summary: &mut Summary) -> Result<Artifact> {
    let model = cfg.model()?;
    let boundary = boundary_for(cfg.boundary, model.dim())?;
    let point = cfg.point(&model)?;
    let epsilon = cfg.epsilon.unwrap_or(0.0);
    cfg.check_regime(&model, &cfg.uncertainty(epsilon)?)?;
    let problem = FdProblem1d {
        epsilon,
        ..fd_template(cfg, &model, &point, boundary)?
    };
    let sol = solve(&problem)?;
    let profile = sol
        .grid_x
        .iter()
        .map(|&x| sol.at(point.t, x).map(|v| GridValue { x, v }))
        .collect::<Result<Vec<_>>>()?;
    let fd = FdSummary {
        t: point.t,
        x: point.x[0],
        v_fd: sol.at(point.t, point.x[0])?,
        gamma: problem.gamma,
        eta: problem.eta,
        epsilon,
        nx: problem.nx,
        nt: sol.nt,
        dt: sol.dt,
        half_width: problem.domain_half_width(),
        scheme: sol.scheme,
    };
    summary.fd = Some(fd.clone());
    summary.runs = 1;
    Ok(Artifact::FdSolve { summary: fd, profile })
}

fn run_complexity(cfg: &RunConfig) -> Result<Artifact> {
    let given = cfg.complexity.unwrap_or(ComplexityArgs {
        d: None,
        n: None,
        m0: None,
        m1: None,
    });
    let model_dim = match &cfg.model {
        Some(ModelSource::Inline { drift, .. }) => Some(drift.len()),
        Some(ModelSource::Generated { dim, .. }) => Some(*dim),
        None => None,
    };
    let d = given
        .d
        .or(model_dim)
        .ok_or_else(|| config_err("complexity needs a dimension"))?;
    let (n, m0, m1) = (
        given.n.unwrap_or(cfg.mc.config.n_steps),
        given.m0.unwrap_or(cfg.mc.config.m0),
        given.m1.unwrap_or(cfg.mc.config.m1),
    );
    let predicted_ops = predicted_complexity(d, n, m0, m1)?;
    Ok(Artifact::Complexity(ComplexityRow {
        d,
        n,
        m0,
        m1,
        predicted_ops,
    }))
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| config_err(format!("csv: {e}")))?;
    }
    w.into_inner().map_err(|e| config_err(format!("csv: {e}")))
}

fn json_bytes<T: Serialize + ?Sized>(v: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(v).expect("artifact serializes");
    out.push(b'\n');
    out
}

/// Renders the primary artifact in `format`.
pub fn render(artifact: &Artifact, format: Format) -> Result<Vec<u8>> {
    match (artifact, format) {
        (Artifact::Stats(rows), Format::Csv) => csv_bytes(rows),
        (Artifact::Stats(rows), Format::Json) => Ok(json_bytes(rows)),
        (Artifact::Reports(r), Format::Csv) => csv_bytes(r),
        (Artifact::Reports(r), Format::Json) if r.len() == 1 => Ok(json_bytes(&r[0])),
        (Artifact::Reports(r), Format::Json) => Ok(json_bytes(r)),
        (Artifact::Sweep(t), Format::Csv) => csv_bytes(&t.rows),
        (Artifact::Sweep(t), Format::Json) => Ok(json_bytes(t)),
        (Artifact::DimSweep(rows), Format::Csv) => csv_bytes(rows),
        (Artifact::DimSweep(rows), Format::Json) => Ok(json_bytes(rows)),
        (Artifact::FdSolve { profile, .. }, Format::Csv) => csv_bytes(profile),
        (Artifact::FdSolve { summary, .. }, Format::Json) => Ok(json_bytes(summary)),
        (Artifact::Complexity(row), Format::Csv) => csv_bytes(std::slice::from_ref(row)),
        (Artifact::Complexity(row), Format::Json) => Ok(json_bytes(row)),
    }
}

/// Sidecar path for an artifact path.
pub fn summary_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".summary.json");
    PathBuf::from(name)
}

/// Writes the artifact and its summary sidecar to `out`, or the artifact to
/// stdout when no path is set.
pub fn emit(outcome: &Outcome, format: Format, out: Option<&Path>) -> Result<()> {
    let body = render(&outcome.artifact, format)?;
    match out {
        Some(path) => {
            fs::write(path, &body).map_err(|e| Error::io(path, e))?;
            let side = summary_path(path);
            fs::write(&side, json_bytes(&outcome.summary)).map_err(|e| Error::io(&side, e))?;
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            let res = match &outcome.artifact {
                Artifact::Complexity(row) => writeln!(stdout, "{}", row.predicted_ops),
                _ => stdout.write_all(&body),
            };
            res.map_err(|e| Error::io("<stdout>", e))?;
            info!(
                "seed {} config {} version {}",
                outcome.summary.seed, outcome.summary.config_hash, outcome.summary.version
            );
            if let Some(s) = outcome.summary.slope {
                info!("log-log slope {s:.4}");
            }
        }
    }
    Ok(())
}

/// Exit code for a failed run.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Regime { .. } => 4,
        Error::RunFailed { source, .. } => exit_code(source),
        e if e.is_numeric() => 3,
        _ => 2,
    }
}

fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| config_err(format!("{THREADS_ENV} must be a positive integer, got '{v}'")))?;
        if n == 0 {
            return Err(config_err(format!("{THREADS_ENV} must be at least 1")));
        }
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| config_err(e.to_string()))
}

/// Loads, runs and emits; returns the process exit code.
pub fn main_with(args: &Args) -> i32 {
    let result = load(args).and_then(|cfg| {
        let pool = worker_pool()?;
        let outcome = pool.install(|| run(&cfg))?;
        emit(&outcome, cfg.format, cfg.out.as_deref())
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
