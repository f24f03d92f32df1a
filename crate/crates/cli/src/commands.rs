use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use voxsr::metrics::{evaluate, format_table, EvalOptions};
use voxsr::nn::load_checkpoint;
use voxsr::simulate::extract_training_pairs;
use voxsr::train::{train, BEST_CHECKPOINT, HISTORY_FILE};
use voxsr::volume::normalize_intensity;
use voxsr::{fsutil, read_volume, super_resolve, write_volume, PatchPair, ScaleSampler, Volume, VolumeFormat};

use crate::config::{self, EvalRunConfig, SimulateConfig, SrRunConfig, TrainRunConfig};
use crate::error::{CliError, CliResult};

pub const INDEX_FILE: &str = "index.json";
pub const SIMULATE_CONFIG: &str = "simulate.config.json";
pub const TRAIN_CONFIG: &str = "train.config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexEntry {
    /// Paths relative to the index file.
    pub lr_path: PathBuf,
    pub hr_path: PathBuf,
    pub effective_scale: f64,
    pub source: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairIndex {
    pub pairs: Vec<IndexEntry>,
}

fn read(path: &Path) -> CliResult<Volume> {
    Ok(read_volume(path, VolumeFormat::from_path(path))?)
}

fn is_volume_path(p: &Path) -> bool {
    if p.is_dir() {
        p.join("header.json").is_file()
    } else {
        p.extension().is_some_and(|e| e == "nii")
    }
}

/// Expand directories of volumes into a sorted file list.
fn collect_inputs(inputs: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if is_volume_path(p) {
            out.push(p.clone());
            continue;
        }
        if !p.is_dir() {
            return Err(CliError::Usage(format!("{} is not a volume or a directory of volumes", p.display())));
        }
        let mut found: Vec<PathBuf> = std::fs::read_dir(p)
            .map_err(|e| CliError::io(p, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| is_volume_path(p))
            .collect();
        found.sort();
        out.extend(found);
    }
    if out.is_empty() {
        return Err(CliError::Usage("no input volumes found".into()));
    }
    Ok(out)
}

pub fn simulate(cfg: &SimulateConfig) -> CliResult<()> {
    let inputs = collect_inputs(&cfg.inputs)?;
    let staged = fsutil::staging_dir(&cfg.out_dir)?;
    let mut index = PairIndex { pairs: Vec::new() };
    for (i, src) in inputs.iter().enumerate() {
        let mut vol = read(src)?;
        if cfg.normalize {
            vol = normalize_intensity(&vol);
        }
        let mut sampler = ScaleSampler::new(cfg.k_min, cfg.k_max, cfg.seed.wrapping_add(i as u64))?;
        let pairs = extract_training_pairs(&vol, &cfg.patches, &mut sampler)?;
        for pair in pairs {
            let n = index.pairs.len();
            let lr_path = PathBuf::from(format!("pair{n:05}_lr.vvol"));
            let hr_path = PathBuf::from(format!("pair{n:05}_hr.vvol"));
            write_volume(&pair.lr, staged.path().join(&lr_path), VolumeFormat::Vvol)?;
            write_volume(&pair.hr, staged.path().join(&hr_path), VolumeFormat::Vvol)?;
            index.pairs.push(IndexEntry {
                lr_path,
                hr_path,
                effective_scale: pair.effective_scale,
                source: config::absolute(src),
            });
        }
        log::info!("{}: {} pairs", src.display(), cfg.patches.n_patches);
    }
    config::write_json(&staged.path().join(INDEX_FILE), &index)?;
    let resolved = SimulateConfig {
        inputs: inputs.iter().map(|p| config::absolute(p)).collect(),
        out_dir: config::absolute(&cfg.out_dir),
        ..cfg.clone()
    };
    config::write_json(&staged.path().join(SIMULATE_CONFIG), &resolved)?;
    fsutil::replace_dir(&staged.keep(), &cfg.out_dir)?;
    println!("wrote {} pairs to {}", index.pairs.len(), cfg.out_dir.display());
    Ok(())
}

pub fn load_pairs(index_path: &Path) -> CliResult<Vec<PatchPair>> {
    let text = std::fs::read_to_string(index_path).map_err(|e| CliError::io(index_path, e))?;
    let index: PairIndex =
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", index_path.display())))?;
    let base = index_path.parent().unwrap_or(Path::new("."));
    index
        .pairs
        .iter()
        .map(|e| {
            Ok(PatchPair {
                lr: read(&base.join(&e.lr_path))?,
                hr: read(&base.join(&e.hr_path))?,
                effective_scale: e.effective_scale,
            })
        })
        .collect()
}

fn split_validation(mut pairs: Vec<PatchPair>, fraction: f64) -> CliResult<(Vec<PatchPair>, Vec<PatchPair>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(CliError::Usage(format!("val_fraction {fraction} must be in [0, 1)")));
    }
    if pairs.len() < 2 {
        return Err(CliError::Data("need at least two pairs to hold out validation data".into()));
    }
    let n_val = ((pairs.len() as f64 * fraction).round() as usize).clamp(1, pairs.len() - 1);
    let val = pairs.split_off(pairs.len() - n_val);
    Ok((pairs, val))
}

pub fn train_run(cfg: &TrainRunConfig) -> CliResult<()> {
    cfg.model.validate()?;
    cfg.train.validate()?;
    let all = load_pairs(&cfg.data.train_index)?;
    let (train_pairs, val_pairs) = match &cfg.data.val_index {
        Some(p) => (all, load_pairs(p)?),
        None => split_validation(all, cfg.data.val_fraction)?,
    };
    log::info!("{} training pairs, {} validation pairs", train_pairs.len(), val_pairs.len());
    let staged = fsutil::staging_dir(&cfg.out_dir)?;
    let outcome = train(&cfg.train, &cfg.model, &train_pairs, &val_pairs, staged.path())?;
    let mut resolved = cfg.clone();
    resolved.data.train_index = config::absolute(&cfg.data.train_index);
    resolved.data.val_index = cfg.data.val_index.as_deref().map(config::absolute);
    resolved.out_dir = config::absolute(&cfg.out_dir);
    config::write_json(&staged.path().join(TRAIN_CONFIG), &resolved)?;
    fsutil::replace_dir(&staged.keep(), &cfg.out_dir)?;
    match (outcome.best_epoch, outcome.best_val_l1) {
        (Some(e), Some(v)) => println!(
            "best validation L1 {v:.6} at epoch {e}; checkpoint {}",
            cfg.out_dir.join(BEST_CHECKPOINT).display()
        ),
        _ => println!("no epochs run; initial checkpoint {}", cfg.out_dir.join(BEST_CHECKPOINT).display()),
    }
    println!("loss history {}", cfg.out_dir.join(HISTORY_FILE).display());
    Ok(())
}

pub fn sr(cfg: &SrRunConfig) -> CliResult<()> {
    cfg.request.validate()?;
    let model = load_checkpoint(&cfg.checkpoint)?;
    let input = read(&cfg.input)?;
    let out = super_resolve(&model, &input, &cfg.request)?;
    let format = VolumeFormat::from_path(&cfg.output);
    write_volume(&out, &cfg.output, format)?;
    let resolved = SrRunConfig {
        checkpoint: config::absolute(&cfg.checkpoint),
        input: config::absolute(&cfg.input),
        output: config::absolute(&cfg.output),
        request: cfg.request,
    };
    config::write_json(&config::sibling_config(&cfg.output, "config.json"), &resolved)?;
    let (d, h, w) = out.shape();
    println!("{} -> {} ({d}x{h}x{w})", cfg.input.display(), cfg.output.display());
    Ok(())
}

pub fn eval(cfg: &EvalRunConfig) -> CliResult<()> {
    let sr = read(&cfg.sr)?;
    let gt = read(&cfg.gt)?;
    let opts = EvalOptions {
        windowed: cfg.windowed,
        slicewise: cfg.slicewise,
    };
    let mut report = evaluate(&sr, &gt, opts)?;
    report.scale = cfg.scale;
    report.sr_id = Some(cfg.sr.display().to_string());
    report.gt_id = Some(cfg.gt.display().to_string());
    config::write_json(&cfg.report, &report)?;
    let resolved = EvalRunConfig {
        sr: config::absolute(&cfg.sr),
        gt: config::absolute(&cfg.gt),
        report: config::absolute(&cfg.report),
        ..cfg.clone()
    };
    config::write_json(&config::sibling_config(&cfg.report, "config.json"), &resolved)?;
    print!("{}", format_table(std::slice::from_ref(&report)));
    Ok(())
}
