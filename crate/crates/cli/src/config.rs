//! Run configuration: one JSON file covers every subcommand, flags win
//! over file values, and the resolved result names the run directory
//! through its hash.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use matteforge_core::bench::{config_hash, BenchConfig};
use matteforge_core::data::ForegroundConfig;
use matteforge_core::net::ModelConfig;
use matteforge_core::scalar::Precision;
use matteforge_core::train::{SocConfig, TrainConfig};
use matteforge_core::video::OfdConfig;

/// Errors are split by exit code: bad configuration or inputs exit 2,
/// failures while doing the work exit 3.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config: {msg}"),
            CliError::Runtime(msg) => write!(f, "runtime: {msg}"),
        }
    }
}

impl std::error::Error for CliError {}

/// Tags a fallible step with the exit class its failure belongs to.
pub trait Phase<T> {
    /// Configuration and input preparation; failures exit 2.
    fn config_err(self) -> Result<T, CliError>;
    /// Execution and artifact emission; failures exit 3.
    fn runtime_err(self) -> Result<T, CliError>;
}

impl<T, E: std::fmt::Display> Phase<T> for Result<T, E> {
    fn config_err(self) -> Result<T, CliError> {
        self.map_err(|e| CliError::Config(e.to_string()))
    }

    fn runtime_err(self) -> Result<T, CliError> {
        self.map_err(|e| CliError::Runtime(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    /// Distinct foreground figures to synthesize.
    pub count: usize,
    /// (height, width); both must be divisible by 16.
    pub size: (usize, usize),
    /// Size of the background pool shared by all composites.
    pub backgrounds: usize,
    /// Crop-and-zoom variants per figure.
    pub n_crops: usize,
    /// Background replacements per figure.
    pub n_composites: usize,
    pub foreground: ForegroundConfig,
    /// Re-render every sample in the shifted appearance domain.
    pub shift: bool,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            count: 4,
            size: (64, 64),
            backgrounds: 6,
            n_crops: 1,
            n_composites: 2,
            foreground: ForegroundConfig::default(),
            shift: false,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.count == 0 {
            return Err(CliError::Config("gen.count: must be at least 1".into()));
        }
        if self.size.0 % 16 != 0 || self.size.1 % 16 != 0 || self.size.0 == 0 || self.size.1 == 0 {
            return Err(CliError::Config(format!(
                "gen.size: dimensions must be positive multiples of 16, got {}x{}",
                self.size.0, self.size.1
            )));
        }
        if self.backgrounds == 0 && self.n_composites > 0 {
            return Err(CliError::Config(
                "gen.backgrounds: composites need a non-empty pool".into(),
            ));
        }
        if !(self.foreground.feather.is_finite() && self.foreground.feather > 0.0) {
            return Err(CliError::Config(format!(
                "gen.foreground.feather: must be positive, got {}",
                self.foreground.feather
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrimapConfig {
    /// Reversed-depth cut: pixels at least this far from the deepest
    /// point seed the foreground.
    pub threshold: f64,
    /// Structuring element for the erode/dilate carving.
    pub kernel: usize,
    pub iterations: usize,
}

impl Default for TrimapConfig {
    fn default() -> Self {
        TrimapConfig { threshold: 0.5, kernel: 3, iterations: 2 }
    }
}

impl TrimapConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if !(self.threshold.is_finite() && self.threshold >= 0.0) {
            return Err(CliError::Config(format!(
                "trimap.threshold: must be finite and non-negative, got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompositeConfig {
    /// RGB of the solid backdrop, each channel in [0,1].
    pub background: [f64; 3],
}

impl Default for CompositeConfig {
    fn default() -> Self {
        CompositeConfig { background: [0.0, 1.0, 0.0] }
    }
}

impl CompositeConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        for (i, &v) in self.background.iter().enumerate() {
            if !(v >= 0.0 && v <= 1.0) {
                return Err(CliError::Config(format!(
                    "composite.background[{i}]: must lie in [0,1], got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Everything a run can be told, in one file. Sections a file omits keep
/// their defaults; unknown keys anywhere are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub precision: Precision,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub soc: SocConfig,
    pub ofd: OfdConfig,
    pub bench: BenchConfig,
    pub gen: GenConfig,
    pub trimap: TrimapConfig,
    pub composite: CompositeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            precision: Precision::Single,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            soc: SocConfig::default(),
            ofd: OfdConfig::default(),
            bench: BenchConfig::default(),
            gen: GenConfig::default(),
            trimap: TrimapConfig::default(),
            composite: CompositeConfig::default(),
        }
    }
}

pub fn load_run_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Creates `<out>/<hash>/` where the hash covers the subcommand and its
/// resolved configuration, and drops the configuration there as
/// `config.json`. Different settings can never overwrite each other.
pub fn prepare_run_dir(
    out: &Path,
    command: &str,
    config: &RunConfig,
) -> Result<PathBuf, CliError> {
    let hash = config_hash(&(command, config)).config_err()?;
    let dir = out.join(&hash[..16]);
    fs::create_dir_all(&dir).runtime_err()?;
    let file = fs::File::create(dir.join("config.json")).runtime_err()?;
    serde_json::to_writer_pretty(file, config).runtime_err()?;
    Ok(dir)
}

pub fn parse_size(raw: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::Config(format!("size {raw:?}: expected HxW, e.g. 64x64"));
    let (h, w) = raw.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?))
}
