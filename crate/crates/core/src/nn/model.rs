use ndarray::{Array2, Array4, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::decoder::{decoder_param_count, Decoder};
use super::encoder::{encoder_param_count, min_input_size, receptive_radius, Encoder};
use super::layers::init_uniform;
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::field::FeatureGrid;
use crate::real::Real;
use crate::volume::Volume;

/// Encoder + decoder parameters and the architecture they belong to. One
/// model serves every up-sampling scale.
#[derive(Debug, Clone, PartialEq)]
pub struct SrModel<T: Real = f32> {
    config: ModelConfig,
    params: ParamStore<T>,
    pub(crate) encoder: Encoder,
    pub(crate) decoder: Decoder,
}

impl<T: Real> SrModel<T> {
    /// Allocate all tensors with zeros.
    fn skeleton(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let encoder = Encoder::register(&mut params, &config.encoder);
        let decoder = Decoder::register(&mut params, &config.decoder);
        Ok(Self {
            config,
            params,
            encoder,
            decoder,
        })
    }

    /// Weights uniform in `+-1/sqrt(fan_in)`, biases zero, from a seeded
    /// ChaCha8 stream.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut model = Self::skeleton(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for conv in model.encoder.convs() {
            init_uniform(model.params.data_mut(conv.weight), conv.fan_in(), &mut rng);
        }
        for layer in model.decoder.layers().to_vec() {
            init_uniform(model.params.data_mut(layer.weight), layer.fan_in, &mut rng);
        }
        Ok(model)
    }

    /// Build a model from externally supplied tensors, which must match the
    /// architecture's names and shapes exactly.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let mut model = Self::skeleton(config)?;
        let expected = model.params.tensors();
        if expected.len() != params.tensors().len() {
            return Err(Error::MalformedCheckpoint(format!(
                "architecture has {} tensors, got {}",
                expected.len(),
                params.tensors().len()
            )));
        }
        for (e, g) in expected.iter().zip(params.tensors()) {
            if e.name != g.name || e.shape != g.shape || g.data.len() != e.data.len() {
                return Err(Error::MalformedCheckpoint(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    g.name, g.shape, e.name, e.shape
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Closed-form parameter count for a configuration.
    pub fn expected_param_count(config: &ModelConfig) -> usize {
        encoder_param_count(&config.encoder) + decoder_param_count(&config.decoder)
    }

    pub fn feature_channels(&self) -> usize {
        self.config.encoder.out_channels
    }

    pub fn receptive_radius(&self) -> usize {
        receptive_radius(&self.config.encoder)
    }

    pub fn min_input_size(&self) -> usize {
        min_input_size(&self.config.encoder)
    }

    pub fn cast<U: Real>(&self) -> SrModel<U> {
        SrModel {
            config: self.config,
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
        }
    }

    pub(crate) fn check_input(&self, lr: &Volume) -> Result<()> {
        let (d, h, w) = lr.shape();
        let min = self.min_input_size();
        if d < min || h < min || w < min {
            return Err(Error::Shape(format!(
                "input {:?} is smaller than the encoder minimum {min}",
                (d, h, w)
            )));
        }
        Ok(())
    }

    /// Run the encoder: `(d, h, w)` volume -> `(d, h, w, C)` features.
    pub fn encode(&self, lr: &Volume) -> Result<FeatureGrid<T>> {
        self.check_input(lr)?;
        let dims = lr.shape();
        let x = volume_row(lr);
        let out = self.encoder.forward(&self.params, x, dims);
        let grid = channels_last(out, dims);
        if grid.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("encoder produced non-finite features".into()));
        }
        Ok(FeatureGrid::from_raw(grid))
    }

    /// Decode one intensity per query from its coordinate and feature row.
    pub fn decode(&self, coords: &[[f64; 3]], feats: ArrayView2<'_, T>) -> Result<Vec<T>> {
        if feats.nrows() != coords.len() {
            return Err(Error::Shape(format!(
                "{} feature rows for {} coordinates",
                feats.nrows(),
                coords.len()
            )));
        }
        if feats.ncols() != self.feature_channels() {
            return Err(Error::Shape(format!(
                "features have {} channels, decoder expects {}",
                feats.ncols(),
                self.feature_channels()
            )));
        }
        if coords.is_empty() {
            return Ok(Vec::new());
        }
        let input = decoder_input(coords, feats);
        let out = self.decoder.forward(&self.params, input.view());
        Ok(out.into_raw_vec_and_offset().0)
    }
}

/// `(1, voxels)` encoder input.
pub(crate) fn volume_row<T: Real>(v: &Volume) -> Array2<T> {
    Array2::from_shape_vec(
        (1, v.len()),
        v.as_slice().iter().map(|&x| T::from_f64_lossy(x as f64)).collect(),
    )
    .expect("shape matches")
}

/// `(C, voxels)` -> `(d, h, w, C)`.
pub(crate) fn channels_last<T: Real>(x: Array2<T>, dims: (usize, usize, usize)) -> Array4<T> {
    let c = x.nrows();
    let rows = x.t().as_standard_layout().into_owned();
    Array4::from_shape_vec((dims.0, dims.1, dims.2, c), rows.into_raw_vec_and_offset().0).expect("shape matches")
}

/// Concatenate `[x, y, z, features...]` per query.
pub(crate) fn decoder_input<T: Real>(coords: &[[f64; 3]], feats: ArrayView2<'_, T>) -> Array2<T> {
    let c = feats.ncols();
    let mut input = Array2::<T>::zeros((coords.len(), c + 3));
    for (q, (mut row, coord)) in input.outer_iter_mut().zip(coords).enumerate() {
        for a in 0..3 {
            row[a] = T::from_f64_lossy(coord[a]);
        }
        row.slice_mut(ndarray::s![3..]).assign(&feats.row(q));
    }
    input
}
