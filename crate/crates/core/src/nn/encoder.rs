//! Shape-preserving convolutional encoders: LR volume -> per-voxel features.
//!
//! Every convolution is zero padded, so the feature lattice equals the input
//! lattice for any input size of at least one voxel per axis. Layer layouts:
//!
//! `rdn`: two 3^3 convs to `base_channels`; `num_blocks` residual dense blocks
//! of `convs_per_block` densely concatenated 3^3 conv+ReLU layers (growth
//! `growth_rate`) fused by a 1^3 conv plus a local skip; global fusion of all
//! block outputs (1^3 conv, 3^3 conv) plus a skip from the first conv; a 3^3
//! head to `out_channels`.
//!
//! `rescnn_style`: 3^3 conv+ReLU, `num_blocks` 3^3 conv+ReLU layers, skip from
//! the first layer, 3^3 head.
//!
//! `srresnet_style`: 3^3 conv+ReLU, `num_blocks` blocks of
//! (3^3 conv, ReLU, 3^3 conv) + skip, a 3^3 conv plus a skip from the first
//! layer, 3^3 head.

use ndarray::{concatenate, s, Array2, Axis};

use super::config::{EncoderConfig, EncoderVariant};
use super::layers::{relu_backward_inplace, relu_inplace, Conv3d, Dims};
use super::params::ParamStore;
use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Rdb {
    convs: Vec<Conv3d>,
    fuse: Conv3d,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Encoder {
    Rdn {
        sfe1: Conv3d,
        sfe2: Conv3d,
        blocks: Vec<Rdb>,
        gff1: Conv3d,
        gff2: Conv3d,
        head: Conv3d,
        base: usize,
    },
    Rescnn {
        input: Conv3d,
        hidden: Vec<Conv3d>,
        head: Conv3d,
    },
    Srresnet {
        input: Conv3d,
        blocks: Vec<(Conv3d, Conv3d)>,
        mid: Conv3d,
        head: Conv3d,
    },
}

/// Activations kept by a training forward pass.
pub(crate) enum EncoderTrace<T> {
    Rdn {
        x: Array2<T>,
        f1: Array2<T>,
        /// Per block: input rows followed by every dense layer's output.
        bufs: Vec<Array2<T>>,
        cat: Array2<T>,
        g1: Array2<T>,
        fused: Array2<T>,
    },
    Rescnn {
        x: Array2<T>,
        acts: Vec<Array2<T>>,
        sum: Array2<T>,
    },
    Srresnet {
        x: Array2<T>,
        hs: Vec<Array2<T>>,
        ts: Vec<Array2<T>>,
        mid: Array2<T>,
    },
}

impl Encoder {
    pub fn register<T: Real>(store: &mut ParamStore<T>, cfg: &EncoderConfig) -> Self {
        let g0 = cfg.base_channels;
        let c = cfg.out_channels;
        match cfg.variant {
            EncoderVariant::Rdn => {
                let g = cfg.growth_rate;
                let sfe1 = Conv3d::register(store, "encoder.sfe1", 1, g0, 3);
                let sfe2 = Conv3d::register(store, "encoder.sfe2", g0, g0, 3);
                let blocks = (0..cfg.num_blocks)
                    .map(|b| Rdb {
                        convs: (0..cfg.convs_per_block)
                            .map(|i| Conv3d::register(store, &format!("encoder.rdb{b}.conv{i}"), g0 + i * g, g, 3))
                            .collect(),
                        fuse: Conv3d::register(
                            store,
                            &format!("encoder.rdb{b}.fuse"),
                            g0 + cfg.convs_per_block * g,
                            g0,
                            1,
                        ),
                    })
                    .collect();
                let gff1 = Conv3d::register(store, "encoder.gff1", cfg.num_blocks * g0, g0, 1);
                let gff2 = Conv3d::register(store, "encoder.gff2", g0, g0, 3);
                let head = Conv3d::register(store, "encoder.head", g0, c, 3);
                Encoder::Rdn {
                    sfe1,
                    sfe2,
                    blocks,
                    gff1,
                    gff2,
                    head,
                    base: g0,
                }
            }
            EncoderVariant::RescnnStyle => Encoder::Rescnn {
                input: Conv3d::register(store, "encoder.input", 1, g0, 3),
                hidden: (0..cfg.num_blocks)
                    .map(|i| Conv3d::register(store, &format!("encoder.hidden{i}"), g0, g0, 3))
                    .collect(),
                head: Conv3d::register(store, "encoder.head", g0, c, 3),
            },
            EncoderVariant::SrresnetStyle => Encoder::Srresnet {
                input: Conv3d::register(store, "encoder.input", 1, g0, 3),
                blocks: (0..cfg.num_blocks)
                    .map(|i| {
                        (
                            Conv3d::register(store, &format!("encoder.res{i}.conv0"), g0, g0, 3),
                            Conv3d::register(store, &format!("encoder.res{i}.conv1"), g0, g0, 3),
                        )
                    })
                    .collect(),
                mid: Conv3d::register(store, "encoder.mid", g0, g0, 3),
                head: Conv3d::register(store, "encoder.head", g0, c, 3),
            },
        }
    }

    pub fn convs(&self) -> Vec<Conv3d> {
        match self {
            Encoder::Rdn {
                sfe1,
                sfe2,
                blocks,
                gff1,
                gff2,
                head,
                ..
            } => {
                let mut v = vec![*sfe1, *sfe2];
                for b in blocks {
                    v.extend(b.convs.iter().copied());
                    v.push(b.fuse);
                }
                v.extend([*gff1, *gff2, *head]);
                v
            }
            Encoder::Rescnn { input, hidden, head } => {
                let mut v = vec![*input];
                v.extend(hidden.iter().copied());
                v.push(*head);
                v
            }
            Encoder::Srresnet {
                input,
                blocks,
                mid,
                head,
            } => {
                let mut v = vec![*input];
                for (a, b) in blocks {
                    v.extend([*a, *b]);
                }
                v.extend([*mid, *head]);
                v
            }
        }
    }

    /// Forward pass keeping the activations needed by [`Encoder::backward`].
    /// Input is `(1, voxels)`, output `(out_channels, voxels)`.
    pub fn forward_train<T: Real>(&self, store: &ParamStore<T>, x: Array2<T>, dims: Dims) -> (Array2<T>, EncoderTrace<T>) {
        match self {
            Encoder::Rdn {
                sfe1,
                sfe2,
                blocks,
                gff1,
                gff2,
                head,
                base,
            } => {
                let f1 = sfe1.forward(store, x.view(), dims);
                let f0 = sfe2.forward(store, f1.view(), dims);
                let mut bufs = Vec::with_capacity(blocks.len());
                let mut outs: Vec<Array2<T>> = Vec::with_capacity(blocks.len());
                for block in blocks {
                    let input = outs.last().unwrap_or(&f0);
                    let (out, buf) = rdb_forward(store, block, input, *base, dims);
                    outs.push(out);
                    bufs.push(buf);
                }
                let views: Vec<_> = outs.iter().map(|o| o.view()).collect();
                let cat = concatenate(Axis(0), &views).expect("equal widths");
                let g1 = gff1.forward(store, cat.view(), dims);
                let fused = gff2.forward(store, g1.view(), dims) + &f1;
                let out = head.forward(store, fused.view(), dims);
                (
                    out,
                    EncoderTrace::Rdn {
                        x,
                        f1,
                        bufs,
                        cat,
                        g1,
                        fused,
                    },
                )
            }
            Encoder::Rescnn { input, hidden, head } => {
                let mut h0 = input.forward(store, x.view(), dims);
                relu_inplace(&mut h0);
                let mut acts = vec![h0];
                for conv in hidden {
                    let mut h = conv.forward(store, acts.last().expect("non-empty").view(), dims);
                    relu_inplace(&mut h);
                    acts.push(h);
                }
                let sum = acts.last().expect("non-empty") + &acts[0];
                let out = head.forward(store, sum.view(), dims);
                (out, EncoderTrace::Rescnn { x, acts, sum })
            }
            Encoder::Srresnet {
                input,
                blocks,
                mid,
                head,
            } => {
                let mut h0 = input.forward(store, x.view(), dims);
                relu_inplace(&mut h0);
                let mut hs = vec![h0];
                let mut ts = Vec::with_capacity(blocks.len());
                for (c0, c1) in blocks {
                    let h = hs.last().expect("non-empty");
                    let mut t = c0.forward(store, h.view(), dims);
                    relu_inplace(&mut t);
                    let next = c1.forward(store, t.view(), dims) + h;
                    ts.push(t);
                    hs.push(next);
                }
                let m = mid.forward(store, hs.last().expect("non-empty").view(), dims) + &hs[0];
                let out = head.forward(store, m.view(), dims);
                (out, EncoderTrace::Srresnet { x, hs, ts, mid: m })
            }
        }
    }

    /// Inference forward pass; intermediate activations are dropped early.
    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: Array2<T>, dims: Dims) -> Array2<T> {
        match self {
            Encoder::Rdn {
                sfe1,
                sfe2,
                blocks,
                gff1,
                gff2,
                head,
                base,
            } => {
                let f1 = sfe1.forward(store, x.view(), dims);
                let mut h = sfe2.forward(store, f1.view(), dims);
                let n = h.ncols();
                let mut cat = Array2::<T>::zeros((blocks.len() * base, n));
                for (b, block) in blocks.iter().enumerate() {
                    h = rdb_forward(store, block, &h, *base, dims).0;
                    cat.slice_mut(s![b * base..(b + 1) * base, ..]).assign(&h);
                }
                drop(h);
                let g1 = gff1.forward(store, cat.view(), dims);
                drop(cat);
                let fused = gff2.forward(store, g1.view(), dims) + &f1;
                head.forward(store, fused.view(), dims)
            }
            _ => self.forward_train(store, x, dims).0,
        }
    }

    /// Accumulate parameter gradients given the gradient of the output.
    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        grads: &mut ParamStore<T>,
        trace: &EncoderTrace<T>,
        d_out: Array2<T>,
        dims: Dims,
    ) {
        match (self, trace) {
            (
                Encoder::Rdn {
                    sfe1,
                    sfe2,
                    blocks,
                    gff1,
                    gff2,
                    head,
                    base,
                },
                EncoderTrace::Rdn {
                    x,
                    f1,
                    bufs,
                    cat,
                    g1,
                    fused,
                },
            ) => {
                let d_fused = head.backward(store, grads, fused.view(), dims, d_out.view());
                let mut d_f1 = d_fused.clone();
                let d_g1 = gff2.backward(store, grads, g1.view(), dims, d_fused.view());
                let d_cat = gff1.backward(store, grads, cat.view(), dims, d_g1.view());
                let mut carry: Option<Array2<T>> = None;
                for (b, block) in blocks.iter().enumerate().rev() {
                    let mut d_h = d_cat.slice(s![b * base..(b + 1) * base, ..]).to_owned();
                    if let Some(c) = carry.take() {
                        d_h += &c;
                    }
                    carry = Some(rdb_backward(store, grads, block, &bufs[b], d_h, *base, dims));
                }
                let d_f0 = carry.expect("at least one block");
                d_f1 += &sfe2.backward(store, grads, f1.view(), dims, d_f0.view());
                sfe1.backward(store, grads, x.view(), dims, d_f1.view());
            }
            (Encoder::Rescnn { input, hidden, head }, EncoderTrace::Rescnn { x, acts, sum }) => {
                let d_sum = head.backward(store, grads, sum.view(), dims, d_out.view());
                let mut d_h = d_sum.clone();
                for (i, conv) in hidden.iter().enumerate().rev() {
                    relu_backward_inplace(&mut d_h, acts[i + 1].view());
                    d_h = conv.backward(store, grads, acts[i].view(), dims, d_h.view());
                }
                d_h += &d_sum;
                relu_backward_inplace(&mut d_h, acts[0].view());
                input.backward(store, grads, x.view(), dims, d_h.view());
            }
            (
                Encoder::Srresnet {
                    input,
                    blocks,
                    mid,
                    head,
                },
                EncoderTrace::Srresnet { x, hs, ts, mid: m },
            ) => {
                let d_m = head.backward(store, grads, m.view(), dims, d_out.view());
                let mut d_h = mid.backward(store, grads, hs[blocks.len()].view(), dims, d_m.view());
                for (i, (c0, c1)) in blocks.iter().enumerate().rev() {
                    let mut d_t = c1.backward(store, grads, ts[i].view(), dims, d_h.view());
                    relu_backward_inplace(&mut d_t, ts[i].view());
                    d_h += &c0.backward(store, grads, hs[i].view(), dims, d_t.view());
                }
                d_h += &d_m;
                relu_backward_inplace(&mut d_h, hs[0].view());
                input.backward(store, grads, x.view(), dims, d_h.view());
            }
            _ => unreachable!("trace produced by a different encoder"),
        }
    }
}

/// One residual dense block. Returns the block output and the dense buffer
/// (block input rows followed by each layer's activations).
fn rdb_forward<T: Real>(store: &ParamStore<T>, block: &Rdb, input: &Array2<T>, base: usize, dims: Dims) -> (Array2<T>, Array2<T>) {
    let n = input.ncols();
    let growth = block.convs.first().map(|c| c.cout).unwrap_or(0);
    let rows = base + block.convs.len() * growth;
    let mut buf = Array2::<T>::zeros((rows, n));
    buf.slice_mut(s![0..base, ..]).assign(input);
    let mut filled = base;
    for conv in &block.convs {
        let mut y = conv.forward(store, buf.slice(s![0..filled, ..]), dims);
        relu_inplace(&mut y);
        buf.slice_mut(s![filled..filled + growth, ..]).assign(&y);
        filled += growth;
    }
    let out = block.fuse.forward(store, buf.view(), dims) + input;
    (out, buf)
}

/// Backward through one block; returns the gradient of its input.
fn rdb_backward<T: Real>(
    store: &ParamStore<T>,
    grads: &mut ParamStore<T>,
    block: &Rdb,
    buf: &Array2<T>,
    d_out: Array2<T>,
    base: usize,
    dims: Dims,
) -> Array2<T> {
    let growth = block.convs.first().map(|c| c.cout).unwrap_or(0);
    let mut d_buf = block.fuse.backward(store, grads, buf.view(), dims, d_out.view());
    for (i, conv) in block.convs.iter().enumerate().rev() {
        let lo = base + i * growth;
        let mut d_y = d_buf.slice(s![lo..lo + growth, ..]).to_owned();
        relu_backward_inplace(&mut d_y, buf.slice(s![lo..lo + growth, ..]));
        let d_in = conv.backward(store, grads, buf.slice(s![0..lo, ..]), dims, d_y.view());
        let mut head = d_buf.slice_mut(s![0..lo, ..]);
        head += &d_in;
    }
    let mut d_input = d_buf.slice(s![0..base, ..]).to_owned();
    d_input += &d_out;
    d_input
}

/// Closed-form parameter count of an encoder configuration.
pub fn encoder_param_count(cfg: &EncoderConfig) -> usize {
    let (g0, c, nb) = (cfg.base_channels, cfg.out_channels, cfg.num_blocks);
    let conv = Conv3d::param_count;
    match cfg.variant {
        EncoderVariant::Rdn => {
            let (g, cpb) = (cfg.growth_rate, cfg.convs_per_block);
            let block: usize = (0..cpb).map(|i| conv(g0 + i * g, g, 3)).sum::<usize>() + conv(g0 + cpb * g, g0, 1);
            conv(1, g0, 3) + conv(g0, g0, 3) + nb * block + conv(nb * g0, g0, 1) + conv(g0, g0, 3) + conv(g0, c, 3)
        }
        EncoderVariant::RescnnStyle => conv(1, g0, 3) + nb * conv(g0, g0, 3) + conv(g0, c, 3),
        EncoderVariant::SrresnetStyle => conv(1, g0, 3) + 2 * nb * conv(g0, g0, 3) + conv(g0, g0, 3) + conv(g0, c, 3),
    }
}

/// Number of voxels along each axis on which one output feature depends,
/// counted from the center: the sum of 3^3 kernel radii on the longest path.
pub fn receptive_radius(cfg: &EncoderConfig) -> usize {
    match cfg.variant {
        EncoderVariant::Rdn => 2 + cfg.num_blocks * cfg.convs_per_block + 2,
        EncoderVariant::RescnnStyle => 1 + cfg.num_blocks + 1,
        EncoderVariant::SrresnetStyle => 1 + 2 * cfg.num_blocks + 2,
    }
}

/// Smallest accepted input side. Zero padding makes every variant valid
/// down to a single voxel.
pub fn min_input_size(_cfg: &EncoderConfig) -> usize {
    1
}
