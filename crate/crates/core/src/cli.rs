//! Command-line front end: JSON configs, experiment drivers and CSV/JSON output.
//!
//! Exit codes: 0 ok, 1 invariant failure, 2 configuration error, 3 numerical error.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::Error;
use crate::fredholm::{FredholmOperator, FredholmProblem, MAX_CONDITION, RESIDUAL_TOL, SELF_ADJOINT_TOL};
use crate::grid_ops::{discretize_kernel, GridKernel, KernelFamily, KernelSpec, TimeGrid};
use crate::meanfield::{self, Deviation, HModel, MeanFieldSolver, MfgSpec};
use crate::model_builders::{self as mb, DelayMeasure, PiecewiseDensity, VolterraGameSpec};
use crate::nplayer::{GameSpec, NashSolver, CONSISTENCY_TOL, FOC_TOL};
use crate::oracle;
use crate::signals::{LinearSignal, NoiseBundle, NoiseKind, SignalFamily, PRNG_NAME};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVARIANT: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "volterra-games", version, about = "Nash and mean-field equilibria of Volterra LQ games")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON configuration; a built-in default is used when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Number of Monte Carlo paths (overrides the config).
    #[arg(long, global = true)]
    pub paths: Option<usize>,
    /// PRNG seed (overrides the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Number of grid cells (overrides the config).
    #[arg(long = "grid-n", global = true)]
    pub grid_n: Option<usize>,
    /// Also compare against the scenario-tree oracle (solve only).
    #[arg(long, global = true)]
    pub oracle: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Solve the configured game on Monte Carlo paths.
    Solve,
    /// N-player to mean-field convergence study.
    Converge,
    /// Deviation gains against mean-field strategies.
    EpsNash,
    /// Run the invariant suites on the configured model.
    Validate,
    /// Compare the solver with the scenario-tree oracle.
    OracleCheck,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Converge => "converge",
            Command::EpsNash => "eps-nash",
            Command::Validate => "validate",
            Command::OracleCheck => "oracle-check",
        }
    }
}

// ---------------------------------------------------------------- config schema

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub run: RunOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "one")]
    pub horizon: f64,
    #[serde(default = "default_n")]
    pub n: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { horizon: 1.0, n: default_n() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    #[serde(default = "default_paths")]
    pub paths: usize,
    #[serde(default = "one_u64")]
    pub seed: u64,
    /// Paths per common-noise realization.
    #[serde(default = "one_usize")]
    pub common_group: usize,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { paths: default_paths(), seed: 1, common_group: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunOptions {
    /// Player counts for `converge` and `eps-nash`.
    #[serde(default = "default_ns")]
    pub ns: Vec<usize>,
    #[serde(default)]
    pub deviation: DeviationConfig,
    #[serde(default = "default_directions")]
    pub concavity_directions: usize,
    #[serde(default = "default_branching")]
    pub branching: usize,
    /// Tree depth; defaults to `min(n, 6)`.
    #[serde(default)]
    pub depth: Option<usize>,
    #[serde(default)]
    pub tolerances: Tolerances,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            ns: default_ns(),
            deviation: DeviationConfig::default(),
            concavity_directions: default_directions(),
            branching: default_branching(),
            depth: None,
            tolerances: Tolerances::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    #[serde(default = "tol_residual")]
    pub fredholm_residual: f64,
    #[serde(default = "tol_foc")]
    pub foc: f64,
    #[serde(default = "tol_consistency")]
    pub consistency: f64,
    #[serde(default = "tol_self_adjoint")]
    pub self_adjoint: f64,
    #[serde(default = "tol_concavity")]
    pub concavity: f64,
    #[serde(default = "tol_oracle")]
    pub oracle: f64,
    #[serde(default = "tol_oracle")]
    pub reduction: f64,
    #[serde(default = "tol_condition")]
    pub max_condition: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            fredholm_residual: RESIDUAL_TOL,
            foc: FOC_TOL,
            consistency: CONSISTENCY_TOL,
            self_adjoint: SELF_ADJOINT_TOL,
            concavity: 1e-10,
            oracle: 1e-8,
            reduction: 1e-8,
            max_condition: MAX_CONDITION,
        }
    }
}

fn one() -> f64 {
    1.0
}
fn one_u64() -> u64 {
    1
}
fn one_usize() -> usize {
    1
}
fn default_n() -> usize {
    16
}
fn default_paths() -> usize {
    200
}
fn default_ns() -> Vec<usize> {
    vec![4, 8, 16, 32, 64]
}
fn default_directions() -> usize {
    50
}
fn default_branching() -> usize {
    2
}
fn tol_residual() -> f64 {
    RESIDUAL_TOL
}
fn tol_foc() -> f64 {
    FOC_TOL
}
fn tol_consistency() -> f64 {
    CONSISTENCY_TOL
}
fn tol_self_adjoint() -> f64 {
    SELF_ADJOINT_TOL
}
fn tol_concavity() -> f64 {
    1e-10
}
fn tol_oracle() -> f64 {
    1e-8
}
fn tol_condition() -> f64 {
    MAX_CONDITION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DeviationConfig {
    MeanField,
    Deterministic { values: Vec<f64> },
    BestResponse { n_ref: usize },
}

impl Default for DeviationConfig {
    fn default() -> Self {
        DeviationConfig::BestResponse { n_ref: 256 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelConfig {
    /// `c exp(-rho (t - s))`
    Exponential { c: f64, rho: f64 },
    /// `c (t - s)^(-alpha)`
    PowerLaw { c: f64, alpha: f64 },
    /// `1{0 <= t - s < tau}`
    Delay { tau: f64 },
    Constant { c: f64 },
    /// Values on the grid, row `i` holding `K(t_i, t_j)` for `j < i`.
    Tabulated { values: Vec<Vec<f64>> },
    #[default]
    Zero,
}

impl KernelConfig {
    pub fn to_spec(&self) -> KernelSpec {
        KernelSpec::new(match self {
            KernelConfig::Exponential { c, rho } => KernelFamily::ExponentialDecay { c: *c, rho: *rho },
            KernelConfig::PowerLaw { c, alpha } => KernelFamily::PowerLaw { c: *c, alpha: *alpha },
            KernelConfig::Delay { tau } => KernelFamily::DelayIndicator { tau: *tau },
            KernelConfig::Constant { c } => KernelFamily::ConstantLower { c: *c },
            KernelConfig::Tabulated { values } => KernelFamily::Tabulated(values.clone()),
            KernelConfig::Zero => KernelFamily::Zero,
        })
    }

    fn kernel(&self, grid: &TimeGrid) -> crate::Result<GridKernel> {
        discretize_kernel(&self.to_spec(), grid)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKindConfig {
    Common,
    Idiosyncratic,
}

impl From<NoiseKindConfig> for NoiseKind {
    fn from(k: NoiseKindConfig) -> Self {
        match k {
            NoiseKindConfig::Common => NoiseKind::Common,
            NoiseKindConfig::Idiosyncratic => NoiseKind::Idiosyncratic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SignalConfig {
    Constant { value: f64 },
    Deterministic { values: Vec<f64> },
    Martingale {
        sigma: f64,
        #[serde(default)]
        x0: f64,
        noise: NoiseKindConfig,
    },
    Ou {
        kappa: f64,
        sigma: f64,
        #[serde(default)]
        x0: f64,
        noise: NoiseKindConfig,
    },
    Combination { parts: Vec<WeightedSignal> },
}

impl Default for SignalConfig {
    fn default() -> Self {
        SignalConfig::Constant { value: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightedSignal {
    pub weight: f64,
    pub signal: SignalConfig,
}

impl SignalConfig {
    pub fn to_family(&self) -> SignalFamily {
        match self {
            SignalConfig::Constant { value } => SignalFamily::constant(*value),
            SignalConfig::Deterministic { values } => SignalFamily::Deterministic(values.clone()),
            SignalConfig::Martingale { sigma, x0, noise } => {
                SignalFamily::Martingale { sigma: *sigma, x0: *x0, noise: (*noise).into() }
            }
            SignalConfig::Ou { kappa, sigma, x0, noise } => {
                SignalFamily::Ou { kappa: *kappa, sigma: *sigma, x0: *x0, noise: (*noise).into() }
            }
            SignalConfig::Combination { parts } => {
                SignalFamily::LinearCombination(parts.iter().map(|p| (p.weight, p.signal.to_family())).collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelayConfig {
    /// `[location, mass]` pairs.
    #[serde(default)]
    pub atoms: Vec<(f64, f64)>,
    #[serde(default)]
    pub density: Option<DensityConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityConfig {
    pub width: f64,
    pub values: Vec<f64>,
}

impl DelayConfig {
    pub fn to_measure(&self) -> DelayMeasure {
        DelayMeasure {
            atoms: self.atoms.clone(),
            density: self.density.as_ref().map(|d| PiecewiseDensity { width: d.width, values: d.values.clone() }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HModelConfig {
    Zero,
    InverseN,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    /// Kernels and signals given directly.
    Static {
        n_players: usize,
        lambda: f64,
        #[serde(default)]
        a1: KernelConfig,
        #[serde(default)]
        a2hat: KernelConfig,
        #[serde(default)]
        a3: KernelConfig,
        /// One signal shared by all players or one per player.
        b: Vec<SignalConfig>,
        #[serde(default)]
        b0: Vec<SignalConfig>,
        #[serde(default)]
        c: Vec<f64>,
    },
    /// A single Fredholm problem `lambda v + K v + L* E v = f`.
    Fredholm { k: KernelConfig, l: KernelConfig, lambda: f64, f: SignalConfig },
    Liquidation {
        n_players: usize,
        lambda: f64,
        phi: f64,
        varrho: f64,
        propagator: KernelConfig,
        x0: Vec<f64>,
        #[serde(default)]
        signal: SignalConfig,
    },
    Systemic {
        n_players: usize,
        beta: f64,
        epsilon: f64,
        c: f64,
        #[serde(default)]
        sigma: Vec<f64>,
        #[serde(default)]
        sigma_common: f64,
        #[serde(default)]
        x0: Vec<f64>,
        #[serde(default)]
        h: Vec<f64>,
        #[serde(default)]
        delay: DelayConfig,
    },
    Advertising {
        n_players: usize,
        lambda: f64,
        beta: f64,
        #[serde(default)]
        forgetting: DelayConfig,
        #[serde(default)]
        competition: DelayConfig,
        #[serde(default)]
        sigma: Vec<f64>,
        #[serde(default)]
        x0: Vec<f64>,
    },
    MeanField {
        lambda: f64,
        #[serde(default)]
        a1: KernelConfig,
        #[serde(default)]
        a2hat: KernelConfig,
        #[serde(default)]
        a3: KernelConfig,
        beta: SignalConfig,
        #[serde(default)]
        beta0: SignalConfig,
        #[serde(default)]
        b0: SignalConfig,
        #[serde(default)]
        offset: f64,
        h_model: HModelConfig,
    },
}

impl ModelConfig {
    fn kind(&self) -> &'static str {
        match self {
            ModelConfig::Static { .. } => "static",
            ModelConfig::Fredholm { .. } => "fredholm",
            ModelConfig::Liquidation { .. } => "liquidation",
            ModelConfig::Systemic { .. } => "systemic",
            ModelConfig::Advertising { .. } => "advertising",
            ModelConfig::MeanField { .. } => "mean_field",
        }
    }
}

/// Built-in configuration for a subcommand.
pub fn default_config(command: Command) -> RunConfig {
    let exp = |c: f64, rho: f64| KernelConfig::Exponential { c, rho };
    let model = match command {
        Command::Converge | Command::EpsNash => ModelConfig::MeanField {
            lambda: 0.6,
            a1: exp(1.0, 1.0),
            a2hat: exp(0.5, 2.0),
            a3: exp(0.4, 0.5),
            beta: SignalConfig::Ou { kappa: 1.0, sigma: 0.6, x0: 0.5, noise: NoiseKindConfig::Idiosyncratic },
            beta0: SignalConfig::Martingale { sigma: 0.3, x0: 1.0, noise: NoiseKindConfig::Common },
            b0: SignalConfig::Constant { value: 0.2 },
            offset: 0.0,
            h_model: HModelConfig::InverseN,
        },
        _ => ModelConfig::Static {
            n_players: 3,
            lambda: 1.0,
            a1: exp(1.0, 1.0),
            a2hat: exp(0.5, 2.0),
            a3: exp(0.3, 0.5),
            b: vec![SignalConfig::Ou { kappa: 1.0, sigma: 0.5, x0: 1.0, noise: NoiseKindConfig::Idiosyncratic }],
            b0: vec![SignalConfig::Martingale { sigma: 0.2, x0: 0.5, noise: NoiseKindConfig::Common }],
            c: vec![],
        },
    };
    let n = if matches!(command, Command::Converge | Command::EpsNash) { 16 } else { 8 };
    RunConfig {
        model,
        grid: GridConfig { horizon: 1.0, n },
        noise: NoiseConfig::default(),
        run: RunOptions::default(),
    }
}

// ---------------------------------------------------------------- errors and outcome

#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        CliError { code: EXIT_CONFIG, message: message.into() }
    }

    fn io(e: std::io::Error, path: &Path) -> Self {
        CliError { code: EXIT_NUMERICAL, message: format!("{}: {e}", path.display()) }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidGrid(_)
            | Error::InadmissibleKernel(_)
            | Error::ShapeError(_)
            | Error::UnsupportedSignal(_)
            | Error::NotSelfAdjoint(_)
            | Error::ConvexityViolation(_)
            | Error::InvalidParameter(_) => EXIT_CONFIG,
            Error::SingularOperator(_)
            | Error::ConsistencyViolation(_)
            | Error::SizeExceeded(_)
            | Error::SingularSystem(_)
            | Error::NonConcave(_) => EXIT_NUMERICAL,
        };
        CliError { code, message: e.to_string() }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

/// Result of a command: exit code plus a one-line summary.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub code: i32,
    pub summary: String,
}

type CliResult<T> = std::result::Result<T, CliError>;

// ---------------------------------------------------------------- config loading

pub fn parse_config(text: &str) -> CliResult<RunConfig> {
    serde_json::from_str(text).map_err(|e| CliError::config(format!("config error: {e}")))
}

fn load_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
            parse_config(&text)?
        }
        None => default_config(cli.command),
    };
    if let Some(p) = cli.paths {
        cfg.noise.paths = p;
    }
    if let Some(s) = cli.seed {
        cfg.noise.seed = s;
    }
    if let Some(n) = cli.grid_n {
        cfg.grid.n = n;
    }
    if cfg.noise.paths == 0 || cfg.noise.common_group == 0 {
        return Err(CliError::config("paths and common_group must be positive"));
    }
    Ok(cfg)
}

/// Model assembled from a config.
#[derive(Debug, Clone)]
pub enum Model {
    Game { game: GameSpec, volterra: Option<Box<VolterraGameSpec>>, liquidation_x0: Option<Vec<f64>> },
    Fredholm { problem: FredholmProblem, f: SignalFamily },
    MeanField(MfgSpec),
}

fn replicate<T: Clone>(v: &[T], n: usize, name: &str) -> CliResult<Vec<T>> {
    match v.len() {
        1 => Ok(vec![v[0].clone(); n]),
        l if l == n => Ok(v.to_vec()),
        l => Err(CliError::config(format!("{name}: {l} entries for {n} players"))),
    }
}

pub fn build_model(cfg: &RunConfig) -> CliResult<Model> {
    let grid = TimeGrid::new(cfg.grid.horizon, cfg.grid.n)?;
    Ok(match &cfg.model {
        ModelConfig::Static { n_players, lambda, a1, a2hat, a3, b, b0, c } => {
            let b0 = if b0.is_empty() { vec![SignalConfig::default()] } else { b0.clone() };
            let game = GameSpec {
                n_players: *n_players,
                lambda: *lambda,
                a1: a1.kernel(&grid)?,
                a2hat: a2hat.kernel(&grid)?,
                a3: a3.kernel(&grid)?,
                b: replicate(b, *n_players, "b")?.iter().map(|s| s.to_family()).collect(),
                b0: b0.iter().map(|s| s.to_family()).collect(),
                c: c.clone(),
                grid,
            };
            game.validate()?;
            Model::Game { game, volterra: None, liquidation_x0: None }
        }
        ModelConfig::Fredholm { k, l, lambda, f } => {
            let problem = FredholmProblem::new(k.kernel(&grid)?, l.kernel(&grid)?, *lambda);
            Model::Fredholm { problem, f: f.to_family() }
        }
        ModelConfig::Liquidation { n_players, lambda, phi, varrho, propagator, x0, signal } => {
            let params = mb::LiquidationParams {
                n_players: *n_players,
                lambda: *lambda,
                phi: *phi,
                varrho: *varrho,
                propagator: propagator.to_spec(),
                x0: x0.clone(),
                signal: signal.to_family(),
            };
            let m = mb::build_liquidation_game(&params, &grid)?;
            let x0 = replicate(x0, *n_players, "x0")?;
            Model::Game { game: m.game, volterra: Some(Box::new(m.volterra)), liquidation_x0: Some(x0) }
        }
        ModelConfig::Systemic { n_players, beta, epsilon, c, sigma, sigma_common, x0, h, delay } => {
            let params = mb::SystemicParams {
                n_players: *n_players,
                beta: *beta,
                epsilon: *epsilon,
                c: *c,
                sigma: sigma.clone(),
                sigma_common: *sigma_common,
                x0: x0.clone(),
                h: h.clone(),
                delay: delay.to_measure(),
            };
            let m = mb::build_systemic_game(&params, &grid)?;
            Model::Game { game: m.game, volterra: Some(Box::new(m.volterra)), liquidation_x0: None }
        }
        ModelConfig::Advertising { n_players, lambda, beta, forgetting, competition, sigma, x0 } => {
            let params = mb::AdvertisingParams {
                n_players: *n_players,
                lambda: *lambda,
                beta: *beta,
                forgetting: forgetting.to_measure(),
                competition: competition.to_measure(),
                sigma: sigma.clone(),
                x0: x0.clone(),
            };
            let m = mb::build_advertising_game(&params, &grid)?;
            Model::Game { game: m.game, volterra: Some(Box::new(m.volterra)), liquidation_x0: None }
        }
        ModelConfig::MeanField { lambda, a1, a2hat, a3, beta, beta0, b0, offset, h_model } => {
            let spec = MfgSpec {
                lambda: *lambda,
                a1: a1.kernel(&grid)?,
                a2hat: a2hat.kernel(&grid)?,
                a3: a3.kernel(&grid)?,
                beta: beta.to_family(),
                beta0: beta0.to_family(),
                b0: b0.to_family(),
                offset: *offset,
                h_model: match h_model {
                    HModelConfig::Zero => HModel::Zero,
                    HModelConfig::InverseN => HModel::InverseN,
                },
                grid,
            };
            spec.validate()?;
            Model::MeanField(spec)
        }
    })
}

fn bundle(cfg: &RunConfig, grid: &TimeGrid) -> NoiseBundle {
    NoiseBundle::new(cfg.noise.seed, cfg.noise.paths, grid).with_common_groups(cfg.noise.common_group)
}

// ---------------------------------------------------------------- output

fn write_file(dir: &Path, name: &str, contents: &str) -> CliResult<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| CliError::io(e, &path))
}

fn write_csv(dir: &Path, name: &str, header: &[&str], rows: &[Vec<String>]) -> CliResult<()> {
    let path = dir.join(name);
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError { code: EXIT_NUMERICAL, message: e.to_string() })?;
    let io = |e: csv::Error| CliError { code: EXIT_NUMERICAL, message: format!("{}: {e}", path.display()) };
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(r).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::io(e, &path))
}

fn write_json(dir: &Path, name: &str, value: &Value) -> CliResult<()> {
    write_file(dir, name, &(serde_json::to_string_pretty(value).expect("serializable") + "\n"))
}

fn manifest(cfg: &RunConfig, command: Command) -> Value {
    json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "command": command.name(),
        "seed": cfg.noise.seed,
        "paths": cfg.noise.paths,
        "prng": PRNG_NAME,
        "tolerances": serde_json::to_value(cfg.run.tolerances).expect("serializable"),
        "config": serde_json::to_value(cfg).expect("serializable"),
    })
}

fn fmt(x: f64) -> String {
    if x != 0.0 && (x.abs() < 1e-4 || x.abs() >= 1e9) {
        format!("{x:e}")
    } else {
        format!("{x}")
    }
}

/// `(mean, std)` across samples.
fn mean_std(xs: &[f64]) -> (f64, f64) {
    let m = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / m;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

/// JSON number or null for non-finite values.
fn num(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        Value::Null
    }
}

// ---------------------------------------------------------------- entry points

/// Parses arguments, runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(o) => {
            println!("{}", o.summary);
            o.code
        }
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

pub fn run(cli: &Cli) -> CliResult<Outcome> {
    let cfg = load_config(cli)?;
    let model = build_model(&cfg)?;
    fs::create_dir_all(&cli.out).map_err(|e| CliError::io(e, &cli.out))?;
    write_json(&cli.out, "manifest.json", &manifest(&cfg, cli.command))?;
    match cli.command {
        Command::Solve => run_solve(&cfg, &model, &cli.out, cli.oracle),
        Command::Converge => run_converge(&cfg, &model, &cli.out),
        Command::EpsNash => run_eps_nash(&cfg, &model, &cli.out),
        Command::Validate => run_validate(&cfg, &model, &cli.out),
        Command::OracleCheck => run_oracle_check(&cfg, &model, &cli.out),
    }
}

fn grid_of(cfg: &RunConfig) -> CliResult<TimeGrid> {
    Ok(TimeGrid::new(cfg.grid.horizon, cfg.grid.n)?)
}

pub fn run_solve(cfg: &RunConfig, model: &Model, out: &Path, with_oracle: bool) -> CliResult<Outcome> {
    let grid = grid_of(cfg)?;
    let n = grid.n();
    let noise = bundle(cfg, &grid);
    let paths = cfg.noise.paths;
    let tol = cfg.run.tolerances;
    let mut rows = Vec::new();
    let diagnostics = match model {
        Model::Game { game, liquidation_x0, .. } => {
            let solver = NashSolver::new(game.clone())?.with_consistency_tol(tol.consistency);
            let sol = solver.solve_nash(&noise, paths)?;
            let np = game.n_players;
            let inventories: Option<Vec<Vec<Vec<f64>>>> = liquidation_x0.as_ref().map(|x0| {
                (0..np)
                    .map(|i| sol.paths.iter().map(|p| mb::inventory(x0[i], p.u(i), grid.dt())).collect())
                    .collect()
            });
            let mut terminal = Vec::new();
            for k in 0..=n {
                for who in 0..=np {
                    let label = if who == np { "bar".to_string() } else { who.to_string() };
                    let mut row = vec![fmt(grid.time(k)), label];
                    if k < n {
                        let xs: Vec<f64> =
                            sol.paths.iter().map(|p| if who == np { p.ubar()[k] } else { p.u(who)[k] }).collect();
                        let (m, s) = mean_std(&xs);
                        row.extend([fmt(m), fmt(s)]);
                    } else if inventories.is_some() {
                        row.extend([String::new(), String::new()]);
                    } else {
                        continue;
                    }
                    if let Some(inv) = &inventories {
                        if who < np {
                            let xs: Vec<f64> = inv[who].iter().map(|x| x[k]).collect();
                            let m = mean_std(&xs).0;
                            if k == n {
                                terminal.push(m);
                            }
                            row.push(fmt(m));
                        } else {
                            row.push(String::new());
                        }
                    }
                    rows.push(row);
                }
            }
            let header: &[&str] =
                if inventories.is_some() { &["t", "player", "mean", "std", "inventory"] } else { &["t", "player", "mean", "std"] };
            write_csv(out, "strategies.csv", header, &rows)?;
            let d = &sol.diagnostics;
            let mut v = json!({
                "max_foc_residual": num(d.max_foc_residual),
                "max_fredholm_residual": num(d.max_fredholm_residual),
                "max_consistency_gap": num(d.max_consistency_gap),
                "mean_condition": num(d.mean_condition),
                "player_condition": num(d.player_condition),
                "kernel_min_eigenvalues": d.kernel_min_eigenvalues.iter().map(|x| num(*x)).collect::<Vec<_>>(),
                "hessian_min_eigenvalue": num(d.hessian_min_eigenvalue),
                "warnings": d.warnings,
            });
            if !terminal.is_empty() {
                v["terminal_inventory"] = json!(terminal);
            }
            if with_oracle {
                let (gap, _) = oracle_gap(cfg, game)?;
                v["oracle_max_diff"] = num(gap);
                v["oracle_pass"] = json!(gap <= tol.oracle);
            }
            v
        }
        Model::Fredholm { problem, f } => {
            let op = FredholmOperator::new(problem.clone())?;
            let sig = f.compile(&grid, Some(0))?.adapted_projection();
            let sols: Vec<_> = (0..paths)
                .into_par_iter()
                .map(|p| op.solve(&sig.realize(&noise, p)))
                .collect::<crate::Result<Vec<_>>>()?;
            for k in 0..n {
                let xs: Vec<f64> = sols.iter().map(|s| s.v[k]).collect();
                let (m, s) = mean_std(&xs);
                rows.push(vec![fmt(grid.time(k)), "0".into(), fmt(m), fmt(s)]);
            }
            write_csv(out, "strategies.csv", &["t", "player", "mean", "std"], &rows)?;
            json!({
                "max_fredholm_residual": num(sols.iter().map(|s| s.residual).fold(0.0, f64::max)),
                "max_condition": num(op.max_condition()),
                "self_adjoint_gap": num(problem.self_adjoint_gap()),
                "warnings": op.warnings(),
            })
        }
        Model::MeanField(spec) => {
            let mf = MeanFieldSolver::new(spec.clone())?;
            let sol = mf.solve_generic(&noise, paths)?;
            for k in 0..n {
                for (label, pick) in [("mu", 0), ("v", 1)] {
                    let xs: Vec<f64> =
                        sol.paths.iter().map(|p| if pick == 0 { p.mean.v[k] } else { p.v.v[k] }).collect();
                    let (m, s) = mean_std(&xs);
                    rows.push(vec![fmt(grid.time(k)), label.into(), fmt(m), fmt(s)]);
                }
            }
            write_csv(out, "strategies.csv", &["t", "player", "mean", "std"], &rows)?;
            json!({
                "max_foc_residual": num(sol.max_foc_residual),
                "max_fredholm_residual": num(sol.paths.iter().map(|p| p.mean.residual.max(p.v.residual)).fold(0.0, f64::max)),
            })
        }
    };
    let mut diagnostics = diagnostics;
    diagnostics["seed"] = json!(cfg.noise.seed);
    diagnostics["paths"] = json!(paths);
    diagnostics["config"] = serde_json::to_value(cfg).expect("serializable");
    write_json(out, "diagnostics.json", &diagnostics)?;
    let oracle_fail = diagnostics.get("oracle_pass").is_some_and(|v| v == &json!(false));
    Ok(Outcome {
        code: if oracle_fail { EXIT_INVARIANT } else { EXIT_OK },
        summary: format!("solve: {} model, {} paths, output in {}", cfg.model.kind(), paths, out.display()),
    })
}

fn mean_field_spec(model: &Model) -> CliResult<&MfgSpec> {
    match model {
        Model::MeanField(s) => Ok(s),
        _ => Err(CliError::config("this command needs a mean_field model")),
    }
}

fn in_bracket(x: Option<f64>, (lo, hi): (f64, f64)) -> bool {
    x.is_some_and(|s| (lo..=hi).contains(&s))
}

pub fn run_converge(cfg: &RunConfig, model: &Model, out: &Path) -> CliResult<Outcome> {
    let spec = mean_field_spec(model)?;
    if cfg.run.ns.is_empty() || cfg.run.ns.iter().any(|n| *n < 2) {
        return Err(CliError::config("run.ns must list player counts >= 2"));
    }
    let noise = bundle(cfg, &spec.grid);
    let rows = meanfield::convergence_study(spec, &cfg.run.ns, &noise)?;
    let opt = |x: Option<f64>| x.map(fmt).unwrap_or_default();
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![r.n_players.to_string(), fmt(r.mse_mean), fmt(r.mse_player), opt(r.slope_mean), opt(r.slope_player)]
        })
        .collect();
    write_csv(out, "convergence.csv", &["n_players", "mse_mean", "mse_player", "slope_mean", "slope_player"], &csv_rows)?;
    let last = rows.last().expect("nonempty");
    let bracket = spec.h_model.slope_bracket();
    let fitted = rows.len() >= 2;
    // the bracket applies to the aggregate error; the player column is informative
    let pass = !fitted || in_bracket(last.slope_mean, bracket);
    write_json(
        out,
        "diagnostics.json",
        &json!({
            "slope_mean": last.slope_mean.map(num),
            "slope_player": last.slope_player.map(num),
            "bracket": [bracket.0, bracket.1],
            "pass": pass,
            "seed": cfg.noise.seed,
            "paths": cfg.noise.paths,
        }),
    )?;
    Ok(Outcome {
        code: if pass { EXIT_OK } else { EXIT_INVARIANT },
        summary: format!(
            "converge: slope mean {} (player {}) bracket [{}, {}] {}",
            opt(last.slope_mean),
            opt(last.slope_player),
            bracket.0,
            bracket.1,
            if !fitted { "(single N, no fit)" } else if pass { "PASS" } else { "FAIL" }
        ),
    })
}

pub fn run_eps_nash(cfg: &RunConfig, model: &Model, out: &Path) -> CliResult<Outcome> {
    let spec = mean_field_spec(model)?;
    let noise = bundle(cfg, &spec.grid);
    let deviation = match &cfg.run.deviation {
        DeviationConfig::MeanField => Deviation::MeanField,
        DeviationConfig::Deterministic { values } => Deviation::Deterministic(values.clone()),
        DeviationConfig::BestResponse { n_ref } => Deviation::BestResponse { n_ref: *n_ref },
    };
    let mut rows = Vec::new();
    let mut csv_rows = Vec::new();
    for &np in &cfg.run.ns {
        let r = meanfield::eps_nash_gap(spec, np, &deviation, &noise)?;
        csv_rows.push(vec![
            np.to_string(),
            fmt(r.gain.mean),
            fmt(r.gain.stderr),
            fmt(r.gain.mean.max(0.0)),
            fmt(r.best_response_gain.mean),
            fmt(r.best_response_gain.stderr),
        ]);
        rows.push(r);
    }
    write_csv(
        out,
        "eps_nash.csv",
        &["n_players", "gain", "gain_stderr", "positive_part", "best_response_gain", "best_response_stderr"],
        &csv_rows,
    )?;
    let xs: Vec<f64> = rows.iter().map(|r| r.n_players as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.gain.mean.max(0.0)).collect();
    let slope = meanfield::loglog_slope(&xs, &ys);
    // a deviation that never gains has nothing to decay
    let pass = slope.is_some_and(|s| s <= -0.4) || ys.iter().all(|y| *y == 0.0);
    write_json(out, "diagnostics.json", &json!({ "slope": slope.map(num), "pass": pass, "seed": cfg.noise.seed }))?;
    Ok(Outcome {
        code: if pass { EXIT_OK } else { EXIT_INVARIANT },
        summary: format!(
            "eps-nash: positive-part slope {} {}",
            slope.map(fmt).unwrap_or_else(|| "undefined".into()),
            if pass { "PASS" } else { "FAIL" }
        ),
    })
}

/// One invariant with its measured value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: Option<f64>,
    pub threshold: Option<f64>,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn at_most(name: &str, value: f64, threshold: f64) -> Check {
        Check { name: name.into(), value: Some(value), threshold: Some(threshold), pass: value <= threshold, detail: String::new() }
    }

    fn at_least(name: &str, value: f64, threshold: f64) -> Check {
        Check { name: name.into(), value: Some(value), threshold: Some(threshold), pass: value >= threshold, detail: String::new() }
    }

    fn failed(name: &str, detail: String) -> Check {
        Check { name: name.into(), value: None, threshold: None, pass: false, detail }
    }

    fn skipped(name: &str, detail: &str) -> Check {
        Check { name: name.into(), value: None, threshold: None, pass: true, detail: detail.into() }
    }
}

fn oracle_gap(cfg: &RunConfig, game: &GameSpec) -> crate::Result<(f64, usize)> {
    let grid = game.grid;
    let depth = cfg.run.depth.unwrap_or(grid.n().min(6));
    let tree = oracle::build_tree(&grid, cfg.run.branching, depth)?;
    let sol = oracle::discrete_nash_kkt(game, &tree)?;
    let solver = NashSolver::new(game.clone())?;
    let eqs = oracle::solve_on_tree(&solver, &tree)?;
    Ok((oracle::compare(&sol, &eqs, &tree), tree.n_nodes()))
}

fn game_checks(cfg: &RunConfig, game: &GameSpec, volterra: Option<&VolterraGameSpec>) -> CliResult<Vec<Check>> {
    let tol = cfg.run.tolerances;
    let grid = game.grid;
    let mut checks = Vec::new();
    let solver = NashSolver::new(game.clone())?.with_consistency_tol(f64::INFINITY);
    let stat = solver.static_diagnostics();
    checks.push(Check::at_least("hessian_positive", stat.hessian_min_eigenvalue, 0.0));
    for (name, op) in [("mean", solver.mean_operator()), ("player", solver.player_operator())] {
        checks.push(Check::at_most(&format!("self_adjoint_{name}"), op.problem().self_adjoint_gap(), tol.self_adjoint));
        checks.push(Check::at_most(&format!("condition_{name}"), op.max_condition(), tol.max_condition));
    }
    let paths = cfg.noise.paths.min(64);
    let noise = bundle(cfg, &grid);
    let sol = solver.solve_nash(&noise, paths)?;
    let scale = 1.0
        + sol.paths.iter().flat_map(|p| p.mean.v.iter().chain(p.players.iter().flat_map(|s| s.v.iter()))).fold(0.0f64, |a, x| a.max(x.abs()));
    checks.push(Check::at_most("fredholm_residual", sol.diagnostics.max_fredholm_residual, tol.fredholm_residual * scale));
    checks.push(Check::at_most("foc_residual", sol.diagnostics.max_foc_residual, tol.foc));
    checks.push(Check::at_most("mean_consistency", sol.diagnostics.max_consistency_gap, tol.consistency));
    // concavity along random directions around the equilibrium of path 0
    let eq = &sol.paths[0];
    let np = game.n_players;
    let nf = np as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.noise.seed);
    let mut worst = f64::NEG_INFINITY;
    for d in 0..cfg.run.concavity_directions {
        let i = d % np;
        let h: Vec<f64> = (0..grid.n()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = eq.ubar().iter().zip(eq.u(i)).map(|(a, u)| a - u / nf).collect();
        let b = solver.b_signal(i).realize(&noise, 0);
        let b0 = solver.b0_signal(i).realize(&noise, 0);
        worst = worst.max(solver.second_difference(i, eq.u(i), &w, &h, 0.1, b.values(), b0.values()));
    }
    if cfg.run.concavity_directions > 0 {
        checks.push(Check::at_most("concavity", worst, tol.concavity));
    }
    if grid.n() <= oracle::MAX_GRID {
        match oracle_gap(cfg, game) {
            Ok((gap, _)) => checks.push(Check::at_most("oracle_equivalence", gap, tol.oracle)),
            Err(e @ Error::SizeExceeded(_)) => checks.push(Check::skipped("oracle_equivalence", &e.to_string())),
            Err(e) => checks.push(Check::failed("oracle_equivalence", e.to_string())),
        }
    } else {
        checks.push(Check::skipped("oracle_equivalence", "grid larger than the oracle cap"));
    }
    if let Some(v) = volterra {
        checks.push(Check::at_most("reduction_fidelity", reduction_error(v, cfg.noise.seed, 20)?, tol.reduction));
    }
    Ok(checks)
}

/// Worst relative gap between static and direct objectives over random symmetric profiles
/// (every player uses the same control), on a copy of the game with signals at their means.
pub fn reduction_error(v: &VolterraGameSpec, seed: u64, samples: usize) -> crate::Result<f64> {
    let n = v.grid.n();
    let mut det = v.clone();
    for pair in det.s.iter_mut().chain(det.d.iter_mut()) {
        for sig in pair.iter_mut() {
            *sig = LinearSignal::deterministic(sig.mean().to_vec());
        }
    }
    let game = mb::reduce_volterra_game(&det)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for t in 0..samples {
        let i = t % det.n_players;
        let u: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let z = det.simulate_state([det.d[i][0].mean(), det.d[i][1].mean()], &u, &u);
        let s = [det.s[i][0].mean()[n], det.s[i][1].mean()[n]];
        let direct = det.direct_objective(&z, &u, s);
        let reduced = mb::reduced_objective(&game, i, &u, &u)?;
        worst = worst.max((direct - reduced).abs() / (1.0 + direct.abs()));
    }
    Ok(worst)
}

pub fn validate_model(cfg: &RunConfig, model: &Model) -> CliResult<Vec<Check>> {
    let tol = cfg.run.tolerances;
    match model {
        Model::Game { game, volterra, .. } => game_checks(cfg, game, volterra.as_deref()),
        Model::Fredholm { problem, f } => {
            let gap = problem.self_adjoint_gap();
            let mut checks = vec![Check::at_most("self_adjoint", gap, tol.self_adjoint)];
            if gap <= tol.self_adjoint {
                let op = FredholmOperator::new(problem.clone())?;
                checks.push(Check::at_most("condition", op.max_condition(), tol.max_condition));
                let grid = *problem.grid();
                let sig = f.compile(&grid, Some(0))?.adapted_projection();
                let noise = bundle(cfg, &grid);
                let mut worst: f64 = 0.0;
                for p in 0..cfg.noise.paths.min(64) {
                    let s = op.solve(&sig.realize(&noise, p))?;
                    worst = worst.max(s.residual / (1.0 + s.v.iter().fold(0.0f64, |a, x| a.max(x.abs()))));
                }
                checks.push(Check::at_most("fredholm_residual", worst, tol.fredholm_residual));
            }
            Ok(checks)
        }
        Model::MeanField(spec) => {
            let mf = MeanFieldSolver::new(spec.clone())?;
            let noise = NoiseBundle::new(cfg.noise.seed, cfg.noise.paths.min(64), &spec.grid)
                .with_common_groups(cfg.noise.paths.min(64).clamp(1, 8));
            let sol = mf.solve_generic(&noise, noise.paths())?;
            let report = mf.consistency_study(&noise)?;
            Ok(vec![
                Check::at_most("mfg_foc_residual", sol.max_foc_residual, tol.foc),
                Check::at_most("mfg_exact_consistency", report.exact_gap, tol.consistency),
                Check {
                    name: "mfg_common_measurable".into(),
                    value: None,
                    threshold: None,
                    pass: report.common_measurable,
                    detail: String::new(),
                },
            ])
        }
    }
}

pub fn run_validate(cfg: &RunConfig, model: &Model, out: &Path) -> CliResult<Outcome> {
    let checks = match validate_model(cfg, model) {
        Ok(c) => c,
        Err(e) => vec![Check::failed("model", e.message)],
    };
    let pass = checks.iter().all(|c| c.pass);
    write_json(out, "report.json", &json!({ "pass": pass, "checks": checks }))?;
    let failed: Vec<&str> = checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
    Ok(Outcome {
        code: if pass { EXIT_OK } else { EXIT_INVARIANT },
        summary: if pass {
            format!("validate: {} checks PASS", checks.len())
        } else {
            format!("validate: FAIL ({})", failed.join(", "))
        },
    })
}

pub fn run_oracle_check(cfg: &RunConfig, model: &Model, out: &Path) -> CliResult<Outcome> {
    let game = match model {
        Model::Game { game, .. } => game,
        _ => return Err(CliError::config("oracle-check needs a game model")),
    };
    let (gap, nodes) = oracle_gap(cfg, game)?;
    let pass = gap <= cfg.run.tolerances.oracle;
    write_json(
        out,
        "oracle.json",
        &json!({ "max_abs_diff": num(gap), "tolerance": cfg.run.tolerances.oracle, "nodes": nodes, "pass": pass }),
    )?;
    Ok(Outcome {
        code: if pass { EXIT_OK } else { EXIT_INVARIANT },
        summary: format!("oracle-check: max diff {gap:.3e} over {nodes} nodes {}", if pass { "PASS" } else { "FAIL" }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        for c in [Command::Solve, Command::Converge] {
            let cfg = default_config(c);
            let text = serde_json::to_string(&cfg).unwrap();
            assert_eq!(parse_config(&text).unwrap(), cfg);
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = parse_config(r#"{"model": {"kind": "static", "n_players": 1, "lambda": 1, "b": [], "bogus": 1}}"#);
        assert_eq!(err.unwrap_err().code, EXIT_CONFIG);
        let err = parse_config(r#"{"model": {"kind": "fredholm", "k": {"family": "zero"}, "l": {"family": "zero"}, "lambda": 1, "f": {"kind": "constant", "value": 1}}, "extra": 0}"#);
        assert_eq!(err.unwrap_err().code, EXIT_CONFIG);
        let err = parse_config("{\n  \"model\": ").unwrap_err();
        assert!(err.message.contains("line 2"), "{}", err.message);
    }

    #[test]
    fn error_codes() {
        assert_eq!(CliError::from(Error::InvalidParameter("x".into())).code, EXIT_CONFIG);
        assert_eq!(CliError::from(Error::SingularOperator("x".into())).code, EXIT_NUMERICAL);
    }

    #[test]
    fn default_validate_passes() {
        let cfg = default_config(Command::Validate);
        let model = build_model(&cfg).unwrap();
        let checks = validate_model(&cfg, &model).unwrap();
        for c in &checks {
            assert!(c.pass, "{c:?}");
        }
    }
}
