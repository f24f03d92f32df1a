//! Run configurations. Every command writes its fully resolved configuration
//! as JSON next to its outputs; feeding that file back reproduces the run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use voxsr::simulate::PatchSpec;
use voxsr::{ModelConfig, SrRequest, TrainConfig};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    /// Source volumes: `.nii` files and `.vvol` directories.
    pub inputs: Vec<PathBuf>,
    pub out_dir: PathBuf,
    pub patches: PatchSpec,
    pub k_min: f64,
    pub k_max: f64,
    /// Volume `i` uses sampler seed `seed + i`.
    pub seed: u64,
    /// Rescale each source volume to [0, 1] before extraction.
    pub normalize: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// `index.json` written by `simulate`.
    pub train_index: PathBuf,
    /// Separate validation index; when absent, `val_fraction` of the
    /// training pairs (at least one) is held out from the end of the index.
    #[serde(default)]
    pub val_index: Option<PathBuf>,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
}

fn default_val_fraction() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRunConfig {
    pub data: DataConfig,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SrRunConfig {
    pub checkpoint: PathBuf,
    pub input: PathBuf,
    pub output: PathBuf,
    pub request: SrRequest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRunConfig {
    pub sr: PathBuf,
    pub gt: PathBuf,
    pub report: PathBuf,
    pub scale: Option<f64>,
    pub windowed: bool,
    pub slicewise: bool,
}

/// Parse a train config; relative paths are taken from the file's directory.
pub fn load_train_config(path: &Path) -> CliResult<TrainRunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut cfg: TrainRunConfig = serde_json::from_str(&text).map_err(|e| CliError::Config {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    cfg.data.train_index = anchor(base, &cfg.data.train_index);
    cfg.data.val_index = cfg.data.val_index.as_deref().map(|p| anchor(base, p));
    cfg.out_dir = anchor(base, &cfg.out_dir);
    Ok(cfg)
}

fn anchor(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Absolute form of `p` for resolved configs.
pub fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

/// `<dir>/<name>` for a sibling resolved-config file of `output`.
pub fn sibling_config(output: &Path, suffix: &str) -> PathBuf {
    let name = output
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "output".into());
    output.with_file_name(format!("{name}.{suffix}"))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    voxsr::fsutil::write_atomic(path, &bytes)?;
    Ok(())
}
