//! Run configuration: the JSON document driving every subcommand.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use nlbt_core::schema::{rows_to_mat, SystemSchema};
use nlbt_core::{
    builtins, ControlKind, ControlSignal, Error as CoreError, QuadraticCertificate, SimGrid,
    StochasticSystem,
};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SystemSpec {
    Builtin(String),
    File { path: PathBuf },
}

impl Default for SystemSpec {
    fn default() -> Self {
        SystemSpec::Builtin("example1".into())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Named(String),
    Rows(Vec<Vec<f64>>),
}

impl Default for MatrixSpec {
    fn default() -> Self {
        MatrixSpec::Named("identity".into())
    }
}

impl MatrixSpec {
    fn resolve(&self, dim: usize, what: &str) -> Result<DMatrix<f64>, String> {
        match self {
            MatrixSpec::Named(name) if name == "identity" => Ok(DMatrix::identity(dim, dim)),
            MatrixSpec::Named(other) => Err(format!("unknown {what} spec `{other}`")),
            MatrixSpec::Rows(rows) => {
                let m = rows_to_mat(rows, what).map_err(|e| e.to_string())?;
                if m.nrows() != dim || m.ncols() != dim {
                    return Err(format!(
                        "{what} must be {dim}x{dim}, got {}x{}",
                        m.nrows(),
                        m.ncols()
                    ));
                }
                Ok(m)
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificateSpec {
    #[serde(default)]
    pub x: MatrixSpec,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub cal_u: MatrixSpec,
}

fn default_delta() -> f64 {
    1.0
}

impl Default for CertificateSpec {
    fn default() -> Self {
        Self {
            x: MatrixSpec::default(),
            delta: 1.0,
            cal_u: MatrixSpec::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "kebab-case")]
pub enum OrdersSpec {
    List { values: Vec<usize> },
    Tolerance { tau: f64 },
    Fixed { r: usize },
    EnergyFraction { fraction: f64 },
}

impl Default for OrdersSpec {
    fn default() -> Self {
        OrdersSpec::Tolerance { tau: 0.1 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_paths")]
    pub paths: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub t0: f64,
    #[serde(default)]
    pub tamed: bool,
}

fn default_horizon() -> f64 {
    2.0
}
fn default_steps() -> usize {
    2000
}
fn default_paths() -> usize {
    2000
}
fn default_seed() -> u64 {
    42
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            horizon: default_horizon(),
            steps: default_steps(),
            paths: default_paths(),
            seed: default_seed(),
            t0: 0.0,
            tamed: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub system: SystemSpec,
    #[serde(default)]
    pub control: Option<ControlSignal>,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub certificate: CertificateSpec,
    #[serde(default)]
    pub orders: OrdersSpec,
    /// Pair count for sampled inequality certification.
    #[serde(default = "default_certify_pairs")]
    pub certify_pairs: usize,
    #[serde(default)]
    pub certify_seed: Option<u64>,
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_certify_pairs() -> usize {
    10_000
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("nlbt-out")
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            system: SystemSpec::default(),
            control: None,
            grid: GridSpec::default(),
            certificate: CertificateSpec::default(),
            orders: OrdersSpec::default(),
            certify_pairs: default_certify_pairs(),
            certify_seed: None,
            x0: None,
            output_dir: default_output_dir(),
        }
    }
}

/// Everything a command needs, resolved from a [`RunConfig`].
pub struct ResolvedConfig {
    pub system: StochasticSystem,
    pub system_name: String,
    pub control: ControlSignal,
    pub grid: SimGrid,
    pub certificate: QuadraticCertificate,
    pub orders: OrdersSpec,
    pub certify_pairs: usize,
    pub certify_seed: u64,
    pub x0: DVector<f64>,
    pub output_dir: PathBuf,
}

/// Load a config document. A bare builtin name is accepted in place of a
/// file path for convenience.
pub fn load_config(path: &str) -> Result<RunConfig, String> {
    if !Path::new(path).exists() {
        if builtins::by_name(path).is_some() {
            return Ok(RunConfig {
                system: SystemSpec::Builtin(path.to_string()),
                ..RunConfig::default()
            });
        }
        return Err(format!("config file `{path}` not found"));
    }
    let text = std::fs::read_to_string(path).map_err(|e| format!("reading `{path}`: {e}"))?;
    serde_json::from_str(&text).map_err(|e| format!("parsing `{path}`: {e}"))
}

pub fn resolve(config: &RunConfig) -> Result<ResolvedConfig, String> {
    let (system, system_name) = match &config.system {
        SystemSpec::Builtin(name) => {
            let b = builtins::by_name(name)
                .ok_or_else(|| format!("unknown builtin system `{name}`"))?;
            (b.system, b.name.to_string())
        }
        SystemSpec::File { path } => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| format!("reading system file {}: {e}", path.display()))?;
            let schema: SystemSchema =
                serde_json::from_str(&text).map_err(|e| format!("parsing system file: {e}"))?;
            let sys = schema.to_system().map_err(|e| e.to_string())?;
            let name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "system".into());
            (sys, name)
        }
    };

    let grid = SimGrid {
        horizon: config.grid.horizon,
        steps: config.grid.steps,
        paths: config.grid.paths,
        seed: config.grid.seed,
        t0: config.grid.t0,
        tamed: config.grid.tamed,
    };
    grid.validate().map_err(|e| e.to_string())?;

    let control = match &config.control {
        Some(u) => {
            if u.channels != system.m {
                return Err(format!(
                    "control has {} channels, system expects {}",
                    u.channels, system.m
                ));
            }
            validate_control(u)?;
            u.clone()
        }
        None => ControlSignal {
            kind: ControlKind::Sinusoid {
                amplitudes: vec![1.0; system.m],
                frequencies: vec![std::f64::consts::PI; system.m],
            },
            channels: system.m,
            horizon: grid.horizon,
        },
    };

    let x_mat = config.certificate.x.resolve(system.n, "certificate.x")?;
    let cal_u = config.certificate.cal_u.resolve(system.m, "certificate.cal_u")?;
    let certificate = QuadraticCertificate::new(x_mat, config.certificate.delta, cal_u)
        .map_err(|e| e.to_string())?;

    let x0 = match &config.x0 {
        Some(v) => {
            if v.len() != system.n {
                return Err(format!("x0 has length {}, expected {}", v.len(), system.n));
            }
            DVector::from_row_slice(v)
        }
        None => DVector::zeros(system.n),
    };

    Ok(ResolvedConfig {
        system,
        system_name,
        control,
        grid,
        certificate,
        orders: config.orders.clone(),
        certify_pairs: config.certify_pairs,
        certify_seed: config.certify_seed.unwrap_or(config.grid.seed),
        x0,
        output_dir: config.output_dir.clone(),
    })
}

fn validate_control(u: &ControlSignal) -> Result<(), String> {
    let finite = |vals: &[f64]| vals.iter().all(|v| v.is_finite());
    let ok = match &u.kind {
        ControlKind::Zero => true,
        ControlKind::PiecewiseConstant { values } => values.iter().all(|r| finite(r)),
        ControlKind::Sinusoid {
            amplitudes,
            frequencies,
        } => finite(amplitudes) && finite(frequencies),
        ControlKind::ExponentialDecay { amplitudes, rates } => finite(amplitudes) && finite(rates),
    };
    if !ok || !u.horizon.is_finite() {
        return Err("control signal has non-finite entries".into());
    }
    Ok(())
}

/// Map a core error to the documented exit code.
pub fn exit_code_for(err: &CoreError) -> i32 {
    match err {
        CoreError::CertificationFailed { .. }
        | CoreError::LipschitzFailure { .. }
        | CoreError::MissingPointSymmetry { .. }
        | CoreError::FreeParameterTooSmall { .. } => 2,
        _ => 1,
    }
}
