//! The coordinate-conditioned MLP decoder.
//!
//! Eight fully connected layers; ReLU after the first seven, the last is
//! linear. Widths are `in -> H -> H -> H -> in`, then the decoder input is
//! added back after the fourth ReLU, then `in -> H -> H -> H -> 1`, where
//! `in = C + 3` and `H` is the hidden width.

use ndarray::{Array2, ArrayView2};

use super::config::DecoderConfig;
use super::layers::{relu_backward_inplace, relu_inplace, Linear};
use super::params::ParamStore;
use crate::real::Real;

pub const DECODER_LAYERS: usize = 8;
/// Index (0-based) of the layer after whose ReLU the input is re-added.
pub const RESIDUAL_AFTER: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Decoder {
    layers: Vec<Linear>,
}

/// Activations of a training forward pass: the input, then each layer's
/// post-activation output, with the residual sum standing in for layer 4.
pub(crate) struct DecoderTrace<T> {
    input: Array2<T>,
    acts: Vec<Array2<T>>,
    relu4: Array2<T>,
}

fn widths(cfg: &DecoderConfig) -> [(usize, usize); DECODER_LAYERS] {
    let (n, h) = (cfg.in_features, cfg.hidden);
    [(n, h), (h, h), (h, h), (h, n), (n, h), (h, h), (h, h), (h, 1)]
}

impl Decoder {
    pub fn register<T: Real>(store: &mut ParamStore<T>, cfg: &DecoderConfig) -> Self {
        let layers = widths(cfg)
            .iter()
            .enumerate()
            .map(|(i, &(a, b))| Linear::register(store, &format!("decoder.fc{}", i + 1), a, b))
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, input: ArrayView2<'_, T>) -> Array2<T> {
        let mut h = self.layers[0].forward(store, input);
        relu_inplace(&mut h);
        for (i, layer) in self.layers.iter().enumerate().skip(1) {
            h = layer.forward(store, h.view());
            if i + 1 < DECODER_LAYERS {
                relu_inplace(&mut h);
            }
            if i == RESIDUAL_AFTER {
                h += &input;
            }
        }
        h
    }

    pub fn forward_train<T: Real>(&self, store: &ParamStore<T>, input: Array2<T>) -> (Array2<T>, DecoderTrace<T>) {
        let mut acts: Vec<Array2<T>> = Vec::with_capacity(DECODER_LAYERS);
        let mut relu4 = Array2::zeros((0, 0));
        for (i, layer) in self.layers.iter().enumerate() {
            let x = if i == 0 { input.view() } else { acts[i - 1].view() };
            let mut h = layer.forward(store, x);
            if i + 1 < DECODER_LAYERS {
                relu_inplace(&mut h);
            }
            if i == RESIDUAL_AFTER {
                relu4 = h.clone();
                h += &input;
            }
            acts.push(h);
        }
        let out = acts.pop().expect("eight layers");
        (out, DecoderTrace { input, acts, relu4 })
    }

    /// Accumulate parameter gradients; returns the gradient of the input.
    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        grads: &mut ParamStore<T>,
        trace: &DecoderTrace<T>,
        d_out: Array2<T>,
    ) -> Array2<T> {
        let mut d = d_out;
        let mut d_input_skip: Option<Array2<T>> = None;
        for i in (0..DECODER_LAYERS).rev() {
            if i + 1 < DECODER_LAYERS {
                if i == RESIDUAL_AFTER {
                    d_input_skip = Some(d.clone());
                    relu_backward_inplace(&mut d, trace.relu4.view());
                } else {
                    relu_backward_inplace(&mut d, trace.acts[i].view());
                }
            }
            let x = if i == 0 { trace.input.view() } else { trace.acts[i - 1].view() };
            d = self.layers[i].backward(store, grads, x, d.view());
        }
        if let Some(skip) = d_input_skip {
            d += &skip;
        }
        d
    }
}

pub fn decoder_param_count(cfg: &DecoderConfig) -> usize {
    widths(cfg).iter().map(|&(a, b)| Linear::param_count(a, b)).sum()
}
