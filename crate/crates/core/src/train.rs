//! The training objective and loop: per step, sample coordinates from each
//! HR patch, encode the LR patch, interpolate features at those coordinates,
//! decode, and minimize the mean absolute error with Adam.

use std::path::{Path, PathBuf};

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{self, CoordinateBatch};
use crate::fsutil;
use crate::nn::checkpoint::{save_checkpoint_with_meta, CheckpointMeta};
use crate::nn::{channels_last, decoder_input, volume_row, ModelConfig, ParamStore, SrModel};
use crate::real::Real;
use crate::simulate::PatchPair;
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Patch pairs per optimizer step.
    pub n_pairs_per_step: usize,
    /// Coordinates sampled from each HR patch per step.
    pub k_coords: usize,
    pub lr_init: f64,
    pub decay_factor: f64,
    pub decay_every_epochs: usize,
    pub total_epochs: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_pairs_per_step: 15,
            k_coords: 8000,
            lr_init: 1e-4,
            decay_factor: 0.5,
            decay_every_epochs: 200,
            total_epochs: 2500,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_pairs_per_step == 0 || self.k_coords == 0 || self.decay_every_epochs == 0 {
            return Err(Error::Config(
                "n_pairs_per_step, k_coords and decay_every_epochs must be positive".into(),
            ));
        }
        if !(self.lr_init.is_finite() && self.lr_init >= 0.0) {
            return Err(Error::Config(format!("lr_init {} must be >= 0", self.lr_init)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!("decay_factor {} must be in (0, 1]", self.decay_factor)));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::Config(format!("invalid Adam hyperparameters {a:?}")));
        }
        Ok(())
    }

    /// Step-decay schedule for a 0-based epoch index.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_init * self.decay_factor.powi((epoch / self.decay_every_epochs) as i32)
    }
}

/// Mean absolute error over all entries.
pub fn l1_loss(pred: &[f32], target: &[f32]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "l1_loss needs equal non-empty lengths, got {} and {}",
            pred.len(),
            target.len()
        )));
    }
    let sum: f64 = pred.iter().zip(target).map(|(p, t)| (*t as f64 - *p as f64).abs()).sum();
    Ok(sum / pred.len() as f64)
}

/// Adam moments and step counter, one slot per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Real = f32> {
    config: AdamConfig,
    m: ParamStore<T>,
    v: ParamStore<T>,
    step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>, config: AdamConfig) -> Self {
        Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update with learning rate `lr`.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &ParamStore<T>, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let tensors = params
            .tensors_mut()
            .iter_mut()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut().iter_mut().zip(self.v.tensors_mut().iter_mut()));
        for ((p, g), (m, v)) in tensors {
            for i in 0..p.data.len() {
                let gi = g.data[i].to_f64().expect("real");
                let mi = beta1 * m.data[i].to_f64().expect("real") + (1.0 - beta1) * gi;
                let vi = beta2 * v.data[i].to_f64().expect("real") + (1.0 - beta2) * gi * gi;
                m.data[i] = T::from_f64_lossy(mi);
                v.data[i] = T::from_f64_lossy(vi);
                let delta = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
                p.data[i] -= T::from_f64_lossy(delta);
            }
        }
    }
}

/// An LR patch with the HR coordinates and intensities it is scored on.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub lr: Volume,
    pub batch: CoordinateBatch,
}

impl Sample {
    /// Draw `k` distinct HR voxels of `pair`.
    pub fn draw<R: rand::Rng + ?Sized>(pair: &PatchPair, k: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            lr: pair.lr.clone(),
            batch: field::sample_coordinates(&pair.hr, k, rng)?,
        })
    }

    fn targets(&self) -> Result<&[f32]> {
        self.batch
            .targets()
            .ok_or_else(|| Error::Shape("training sample has no target intensities".into()))
    }
}

/// Mean L1 loss over every coordinate of every sample together with its
/// gradient with respect to all encoder and decoder parameters.
pub fn loss_and_gradients<T: Real>(model: &SrModel<T>, samples: &[Sample]) -> Result<(f64, ParamStore<T>)> {
    let total: usize = samples.iter().map(|s| s.batch.len()).sum();
    if total == 0 {
        return Err(Error::Shape("no coordinates to score".into()));
    }
    let scale = T::from_f64_lossy(1.0 / total as f64);
    let store = model.params();
    let mut grads = store.zeros_like();
    let mut loss_sum = 0.0f64;
    for sample in samples {
        model.check_input(&sample.lr)?;
        let targets = sample.targets()?;
        let dims = sample.lr.shape();
        let n_vox = sample.lr.len();
        let c = model.feature_channels();

        let (feat, enc_trace) = model.encoder.forward_train(store, volume_row(&sample.lr), dims);
        let grid = channels_last(feat, dims);
        let rows = grid.into_shape_with_order((n_vox, c)).expect("contiguous");
        let stencils = field::stencils(sample.batch.coords(), dims)?;
        let mut gathered = Array2::<T>::zeros((stencils.len(), c));
        field::gather(rows.view(), &stencils, gathered.as_slice_mut().expect("fresh array"));
        let input = decoder_input(sample.batch.coords(), gathered.view());
        let (out, dec_trace) = model.decoder.forward_train(store, input);

        let mut d_out = Array2::<T>::zeros(out.raw_dim());
        for ((d, p), t) in d_out.iter_mut().zip(out.iter()).zip(targets) {
            let t = T::from_f64_lossy(*t as f64);
            let r = *p - t;
            loss_sum += r.to_f64().expect("real").abs();
            *d = if r > T::zero() {
                scale
            } else if r < T::zero() {
                -scale
            } else {
                T::zero()
            };
        }
        let d_input = model.decoder.backward(store, &mut grads, &dec_trace, d_out);
        let d_feat = d_input.slice(s![.., 3..]);
        let mut d_rows = Array2::<T>::zeros((n_vox, c));
        field::scatter(d_feat, &stencils, d_rows.as_slice_mut().expect("fresh array"));
        let d_grid = d_rows.t().as_standard_layout().into_owned();
        model.encoder.backward(store, &mut grads, &enc_trace, d_grid, dims);
    }
    Ok((loss_sum / total as f64, grads))
}

/// Forward-only predictions for every coordinate of every sample.
pub fn predict<T: Real>(model: &SrModel<T>, samples: &[Sample]) -> Result<Vec<Vec<T>>> {
    samples
        .iter()
        .map(|s| {
            let grid = model.encode(&s.lr)?;
            let stencils = field::stencils(s.batch.coords(), grid.spatial_shape())?;
            let mut gathered = Array2::<T>::zeros((stencils.len(), grid.channels()));
            field::gather(grid.rows(), &stencils, gathered.as_slice_mut().expect("fresh array"));
            model.decode(s.batch.coords(), gathered.view())
        })
        .collect()
}

/// Mean L1 loss of the model on fixed samples.
pub fn evaluate_l1(model: &SrModel<f32>, samples: &[Sample]) -> Result<f64> {
    let preds = predict(model, samples)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, s) in preds.iter().zip(samples) {
        let t = s.targets()?;
        sum += l1_loss(p, t)? * t.len() as f64;
        n += t.len();
    }
    if n == 0 {
        return Err(Error::Shape("no coordinates to score".into()));
    }
    Ok(sum / n as f64)
}

/// One optimizer step on `batch`; returns the loss before the update.
pub fn train_step<R: rand::Rng + ?Sized>(
    model: &mut SrModel<f32>,
    opt: &mut AdamState<f32>,
    batch: &[PatchPair],
    config: &TrainConfig,
    lr: f64,
    rng: &mut R,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Shape("empty training batch".into()));
    }
    let samples = batch
        .iter()
        .map(|p| Sample::draw(p, config.k_coords, rng))
        .collect::<Result<Vec<_>>>()?;
    let (loss, grads) = loss_and_gradients(model, &samples)?;
    if !loss.is_finite() || !grads.is_finite() {
        return Err(Error::Numerical(format!("non-finite training loss {loss}")));
    }
    opt.update(model.params_mut(), &grads, lr);
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_l1: f64,
    pub val_l1: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Checkpoint with the lowest validation loss.
    pub checkpoint: PathBuf,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_l1: Option<f64>,
    /// Parameters after the last epoch (not necessarily the best).
    pub final_model: SrModel<f32>,
}

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const HISTORY_FILE: &str = "history.json";

/// Train from scratch. Epochs are full passes over `train_pairs` in
/// shuffled steps of `n_pairs_per_step` (the last step may be smaller).
/// After each epoch the fixed validation sample is scored, and the model is
/// checkpointed to `out_dir/best.ckpt` whenever that score improves.
/// `out_dir/history.json` is rewritten after every epoch.
pub fn train(
    config: &TrainConfig,
    model_config: &ModelConfig,
    train_pairs: &[PatchPair],
    val_pairs: &[PatchPair],
    out_dir: &Path,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_pairs.is_empty() || val_pairs.is_empty() {
        return Err(Error::Config("training and validation pairs must be non-empty".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let checkpoint = out_dir.join(BEST_CHECKPOINT);
    let history_path = out_dir.join(HISTORY_FILE);

    let mut model = SrModel::<f32>::init(*model_config, config.seed)?;
    let mut opt = AdamState::new(model.params(), config.adam);
    let mut data_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut val_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));
    let val_samples = val_pairs
        .iter()
        .map(|p| Sample::draw(p, config.k_coords.min(p.hr.len()), &mut val_rng))
        .collect::<Result<Vec<_>>>()?;

    let mut history = Vec::with_capacity(config.total_epochs);
    let mut best: Option<(usize, f64)> = None;
    if config.total_epochs == 0 {
        save_checkpoint_with_meta(&model, &CheckpointMeta::default(), &checkpoint)?;
    }
    let mut order: Vec<usize> = (0..train_pairs.len()).collect();
    for epoch in 0..config.total_epochs {
        let lr = config.lr_at(epoch);
        order.shuffle(&mut data_rng);
        let mut weighted = 0.0;
        for step in order.chunks(config.n_pairs_per_step) {
            let batch: Vec<PatchPair> = step.iter().map(|&i| train_pairs[i].clone()).collect();
            let loss = train_step(&mut model, &mut opt, &batch, config, lr, &mut data_rng)
                .map_err(|e| annotate(e, epoch))?;
            weighted += loss * batch.len() as f64;
        }
        let train_l1 = weighted / train_pairs.len() as f64;
        let val_l1 = evaluate_l1(&model, &val_samples)?;
        if !val_l1.is_finite() {
            return Err(Error::Numerical(format!("non-finite validation loss at epoch {epoch}")));
        }
        history.push(EpochRecord {
            epoch,
            train_l1,
            val_l1,
            lr,
        });
        log::info!("epoch {epoch}: train_l1 {train_l1:.6} val_l1 {val_l1:.6} lr {lr:.3e}");
        if best.is_none_or(|(_, b)| val_l1 < b) {
            best = Some((epoch, val_l1));
            let meta = CheckpointMeta {
                epoch: Some(epoch),
                val_l1: Some(val_l1),
            };
            save_checkpoint_with_meta(&model, &meta, &checkpoint)?;
        }
        fsutil::write_atomic(&history_path, &serde_json::to_vec_pretty(&history)?)?;
    }
    if config.total_epochs == 0 {
        fsutil::write_atomic(&history_path, b"[]")?;
    }
    Ok(TrainOutcome {
        checkpoint,
        history,
        best_epoch: best.map(|b| b.0),
        best_val_l1: best.map(|b| b.1),
        final_model: model,
    })
}

fn annotate(e: Error, epoch: usize) -> Error {
    match e {
        Error::Numerical(msg) => Error::Numerical(format!("epoch {epoch}: {msg}")),
        other => other,
    }
}
