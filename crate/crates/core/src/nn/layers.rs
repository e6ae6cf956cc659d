//! Layer kernels with explicit reverse-mode gradients.
//!
//! Every layer maps a batch tensor whose leading axis is the batch. Forward
//! passes record what their backward pass needs in a [`Tape`]. Per-sample
//! work runs in parallel; parameter gradients are reduced over the batch in
//! a fixed order so results do not depend on thread scheduling.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

use super::params::{Grads, ModelParams};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    /// Input `[B, C, T, H, W]`; no temporal padding, spatial padding `pad`.
    Conv3d {
        name: String,
        in_ch: usize,
        out_ch: usize,
        kt: usize,
        ks: usize,
        st: usize,
        ss: usize,
        pad: usize,
    },
    /// Input `[B, C, H, W]`.
    Conv2d {
        name: String,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    },
    Linear {
        name: String,
        in_f: usize,
        out_f: usize,
    },
    /// Normalizes over every axis except axis 1.
    BatchNorm {
        name: String,
        channels: usize,
    },
    Relu,
    Sigmoid,
    /// Non-overlapping pooling over the last two axes.
    Pool {
        pool: PoolKind,
        size: usize,
    },
    Dropout {
        rate: f64,
    },
    /// Nearest-neighbour upsampling of the last two axes.
    Upsample {
        scale: usize,
    },
    /// Per-sample reshape.
    Reshape {
        shape: Vec<usize>,
    },
}

/// Shape and fan-in of one parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
    pub init: ParamInit,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParamInit {
    FanInUniform,
    Zeros,
    Ones,
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Conv3d { .. } => "conv3d",
            Layer::Conv2d { .. } => "conv2d",
            Layer::Linear { .. } => "linear",
            Layer::BatchNorm { .. } => "batch_norm",
            Layer::Relu => "relu",
            Layer::Sigmoid => "sigmoid",
            Layer::Pool {
                pool: PoolKind::Max,
                ..
            } => "max_pool",
            Layer::Pool {
                pool: PoolKind::Avg,
                ..
            } => "avg_pool",
            Layer::Dropout { .. } => "dropout",
            Layer::Upsample { .. } => "upsample",
            Layer::Reshape { .. } => "reshape",
        }
    }

    pub fn params(&self) -> Vec<ParamDecl> {
        let d = |name: &str, suffix: &str, shape: Vec<usize>, fan_in: usize, init| ParamDecl {
            name: format!("{name}.{suffix}"),
            shape,
            fan_in,
            init,
        };
        match self {
            Layer::Conv3d {
                name,
                in_ch,
                out_ch,
                kt,
                ks,
                ..
            } => {
                let fan = in_ch * kt * ks * ks;
                vec![
                    d(
                        name,
                        "weight",
                        vec![*out_ch, *in_ch, *kt, *ks, *ks],
                        fan,
                        ParamInit::FanInUniform,
                    ),
                    d(name, "bias", vec![*out_ch], fan, ParamInit::Zeros),
                ]
            }
            Layer::Conv2d {
                name,
                in_ch,
                out_ch,
                k,
                ..
            } => {
                let fan = in_ch * k * k;
                vec![
                    d(
                        name,
                        "weight",
                        vec![*out_ch, *in_ch, *k, *k],
                        fan,
                        ParamInit::FanInUniform,
                    ),
                    d(name, "bias", vec![*out_ch], fan, ParamInit::Zeros),
                ]
            }
            Layer::Linear { name, in_f, out_f } => vec![
                d(
                    name,
                    "weight",
                    vec![*out_f, *in_f],
                    *in_f,
                    ParamInit::FanInUniform,
                ),
                d(name, "bias", vec![*out_f], *in_f, ParamInit::Zeros),
            ],
            Layer::BatchNorm { name, channels } => vec![
                d(name, "gamma", vec![*channels], 1, ParamInit::Ones),
                d(name, "beta", vec![*channels], 1, ParamInit::Zeros),
                d(name, "running_mean", vec![*channels], 1, ParamInit::Zeros),
                d(name, "running_var", vec![*channels], 1, ParamInit::Ones),
            ],
            _ => vec![],
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Conv3d {
                in_ch,
                out_ch,
                kt,
                ks,
                st,
                ss,
                pad,
                name,
            } => {
                if input.len() != 4 || input[0] != *in_ch {
                    return Err(shape_err(format!(
                        "{name}: expected [{in_ch},T,H,W], got {input:?}"
                    )));
                }
                let (t, h, w) = (input[1], input[2], input[3]);
                if t < *kt || h + 2 * pad < *ks || w + 2 * pad < *ks {
                    return Err(shape_err(format!(
                        "{name}: kernel larger than input {input:?}"
                    )));
                }
                Ok(vec![
                    *out_ch,
                    (t - kt) / st + 1,
                    (h + 2 * pad - ks) / ss + 1,
                    (w + 2 * pad - ks) / ss + 1,
                ])
            }
            Layer::Conv2d {
                in_ch,
                out_ch,
                k,
                stride,
                pad,
                name,
            } => {
                if input.len() != 3 || input[0] != *in_ch {
                    return Err(shape_err(format!(
                        "{name}: expected [{in_ch},H,W], got {input:?}"
                    )));
                }
                let (h, w) = (input[1], input[2]);
                if h + 2 * pad < *k || w + 2 * pad < *k {
                    return Err(shape_err(format!(
                        "{name}: kernel larger than input {input:?}"
                    )));
                }
                Ok(vec![
                    *out_ch,
                    (h + 2 * pad - k) / stride + 1,
                    (w + 2 * pad - k) / stride + 1,
                ])
            }
            Layer::Linear { in_f, out_f, name } => {
                if input.iter().product::<usize>() != *in_f || input.len() != 1 {
                    return Err(shape_err(format!(
                        "{name}: expected [{in_f}], got {input:?}"
                    )));
                }
                Ok(vec![*out_f])
            }
            Layer::BatchNorm { channels, name } => {
                if input.first() != Some(channels) {
                    return Err(shape_err(format!(
                        "{name}: expected {channels} channels, got {input:?}"
                    )));
                }
                Ok(input.to_vec())
            }
            Layer::Pool { size, .. } => {
                let n = input.len();
                if n < 2 || input[n - 2] < *size || input[n - 1] < *size {
                    return Err(shape_err(format!("pool {size} on {input:?}")));
                }
                let mut s = input.to_vec();
                s[n - 2] /= size;
                s[n - 1] /= size;
                Ok(s)
            }
            Layer::Upsample { scale } => {
                let n = input.len();
                if n < 2 {
                    return Err(shape_err("upsample needs 2 spatial axes"));
                }
                let mut s = input.to_vec();
                s[n - 2] *= scale;
                s[n - 1] *= scale;
                Ok(s)
            }
            Layer::Reshape { shape } => {
                if shape.iter().product::<usize>() != input.iter().product::<usize>() {
                    return Err(shape_err(format!("reshape {input:?} -> {shape:?}")));
                }
                Ok(shape.clone())
            }
            Layer::Relu | Layer::Sigmoid | Layer::Dropout { .. } => Ok(input.to_vec()),
        }
    }
}

/// What a layer's backward pass needs from its forward pass.
#[derive(Debug, Clone)]
pub enum Cache {
    Input(Tensor),
    Output(Tensor),
    Shape(Vec<usize>),
    Argmax {
        input_shape: Vec<usize>,
        idx: Vec<usize>,
    },
    Mask(Vec<f64>),
    Norm {
        x_hat: Tensor,
        inv_std: Vec<f64>,
        train: bool,
    },
    None,
}

/// Running-statistics update produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub name: String,
    pub mean: Vec<f64>,
    pub var_unbiased: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    pub caches: Vec<Cache>,
    pub bn_updates: Vec<BnUpdate>,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c: usize,
    t: usize,
    h: usize,
    w: usize,
    o: usize,
    kt: usize,
    ks: usize,
    st: usize,
    ss: usize,
    pad: usize,
    to: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn in_len(&self) -> usize {
        self.c * self.t * self.h * self.w
    }
    fn out_len(&self) -> usize {
        self.o * self.to * self.ho * self.wo
    }
    fn w_len(&self) -> usize {
        self.o * self.c * self.kt * self.ks * self.ks
    }
    /// Output index range along one spatial axis valid for kernel tap `d`.
    fn valid(&self, d: usize, n_in: usize, n_out: usize) -> (usize, usize) {
        // need 0 <= o*ss + d - pad < n_in
        let lo = if d >= self.pad {
            0
        } else {
            (self.pad - d).div_ceil(self.ss)
        };
        let hi = if n_in + self.pad > d {
            ((n_in + self.pad - d - 1) / self.ss + 1).min(n_out)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

fn conv_forward_sample(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    let plane_o = g.ho * g.wo;
    let plane_i = g.h * g.w;
    for o in 0..g.o {
        let out_o = &mut out[o * g.to * plane_o..(o + 1) * g.to * plane_o];
        out_o.fill(b[o]);
        for c in 0..g.c {
            for dt in 0..g.kt {
                for dh in 0..g.ks {
                    let (oh_lo, oh_hi) = g.valid(dh, g.h, g.ho);
                    for dw in 0..g.ks {
                        let (ow_lo, ow_hi) = g.valid(dw, g.w, g.wo);
                        let wv = w[(((o * g.c + c) * g.kt + dt) * g.ks + dh) * g.ks + dw];
                        if wv == 0.0 {
                            continue;
                        }
                        for ot in 0..g.to {
                            let it = ot * g.st + dt;
                            let xin = &x[(c * g.t + it) * plane_i..(c * g.t + it + 1) * plane_i];
                            let yo = &mut out_o[ot * plane_o..(ot + 1) * plane_o];
                            for oh in oh_lo..oh_hi {
                                let ih = oh * g.ss + dh - g.pad;
                                let xr = &xin[ih * g.w..(ih + 1) * g.w];
                                let yr = &mut yo[oh * g.wo..(oh + 1) * g.wo];
                                if g.ss == 1 {
                                    let off = dw as isize - g.pad as isize;
                                    let xs = &xr[(ow_lo as isize + off) as usize
                                        ..(ow_hi as isize + off) as usize];
                                    for (y, xv) in yr[ow_lo..ow_hi].iter_mut().zip(xs) {
                                        *y += wv * xv;
                                    }
                                } else {
                                    for (ow, y) in yr.iter_mut().enumerate().take(ow_hi).skip(ow_lo)
                                    {
                                        *y += wv * xr[ow * g.ss + dw - g.pad];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradients for one sample: (input grad, weight grad, bias grad).
fn conv_backward_sample(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    gy: &[f64],
    want_params: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let plane_o = g.ho * g.wo;
    let plane_i = g.h * g.w;
    let mut gx = vec![0.0; g.in_len()];
    let mut gw = if want_params {
        vec![0.0; g.w_len()]
    } else {
        vec![]
    };
    let mut gb = if want_params { vec![0.0; g.o] } else { vec![] };
    for o in 0..g.o {
        let gy_o = &gy[o * g.to * plane_o..(o + 1) * g.to * plane_o];
        if want_params {
            gb[o] = gy_o.iter().sum();
        }
        for c in 0..g.c {
            for dt in 0..g.kt {
                for dh in 0..g.ks {
                    let (oh_lo, oh_hi) = g.valid(dh, g.h, g.ho);
                    for dw in 0..g.ks {
                        let (ow_lo, ow_hi) = g.valid(dw, g.w, g.wo);
                        let widx = (((o * g.c + c) * g.kt + dt) * g.ks + dh) * g.ks + dw;
                        let wv = w[widx];
                        let mut acc = 0.0;
                        for ot in 0..g.to {
                            let it = ot * g.st + dt;
                            let base_i = (c * g.t + it) * plane_i;
                            let gyo = &gy_o[ot * plane_o..(ot + 1) * plane_o];
                            for oh in oh_lo..oh_hi {
                                let ih = oh * g.ss + dh - g.pad;
                                let row_i = base_i + ih * g.w;
                                let gyr = &gyo[oh * g.wo..(oh + 1) * g.wo];
                                if g.ss == 1 {
                                    let start = (row_i as isize + ow_lo as isize + dw as isize
                                        - g.pad as isize)
                                        as usize;
                                    let len = ow_hi - ow_lo;
                                    let xs = &x[start..start + len];
                                    let gys = &gyr[ow_lo..ow_hi];
                                    if want_params {
                                        for (a, b) in gys.iter().zip(xs) {
                                            acc += a * b;
                                        }
                                    }
                                    if wv != 0.0 {
                                        for (gxv, gv) in gx[start..start + len].iter_mut().zip(gys)
                                        {
                                            *gxv += wv * gv;
                                        }
                                    }
                                } else {
                                    for ow in ow_lo..ow_hi {
                                        let ii = row_i + ow * g.ss + dw - g.pad;
                                        if want_params {
                                            acc += gyr[ow] * x[ii];
                                        }
                                        gx[ii] += wv * gyr[ow];
                                    }
                                }
                            }
                        }
                        if want_params {
                            gw[widx] = acc;
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

fn geom_3d(layer: &Layer, x: &Tensor) -> Result<ConvGeom> {
    let s = x.shape();
    match layer {
        Layer::Conv3d {
            in_ch,
            out_ch,
            kt,
            ks,
            st,
            ss,
            pad,
            ..
        } => {
            let out = layer.output_shape(&s[1..])?;
            Ok(ConvGeom {
                c: *in_ch,
                t: s[2],
                h: s[3],
                w: s[4],
                o: *out_ch,
                kt: *kt,
                ks: *ks,
                st: *st,
                ss: *ss,
                pad: *pad,
                to: out[1],
                ho: out[2],
                wo: out[3],
            })
        }
        Layer::Conv2d {
            in_ch,
            out_ch,
            k,
            stride,
            pad,
            ..
        } => {
            let out = layer.output_shape(&s[1..])?;
            Ok(ConvGeom {
                c: *in_ch,
                t: 1,
                h: s[2],
                w: s[3],
                o: *out_ch,
                kt: 1,
                ks: *k,
                st: 1,
                ss: *stride,
                pad: *pad,
                to: 1,
                ho: out[1],
                wo: out[2],
            })
        }
        _ => unreachable!("geom_3d on non-conv layer"),
    }
}

fn batch_shape(b: usize, per: &[usize]) -> Vec<usize> {
    let mut s = vec![b];
    s.extend_from_slice(per);
    s
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Forward one layer. `rng` is only consumed by training-mode dropout.
pub fn layer_forward(
    layer: &Layer,
    params: &ModelParams,
    x: Tensor,
    train: bool,
    rng: &mut Option<&mut ChaCha8Rng>,
    mut tape: Option<&mut Tape>,
) -> Result<Tensor> {
    let b = x.dim(0);
    let per_in = &x.shape()[1..];
    let out_shape = batch_shape(b, &layer.output_shape(per_in)?);
    let (y, cache) = match layer {
        Layer::Conv3d { name, .. } | Layer::Conv2d { name, .. } => {
            let g = geom_3d(layer, &x)?;
            let w = params.get(&format!("{name}.weight"))?.data();
            let bias = params.get(&format!("{name}.bias"))?.data();
            let mut out = vec![0.0; b * g.out_len()];
            out.par_chunks_mut(g.out_len())
                .zip(x.data().par_chunks(g.in_len()))
                .for_each(|(o, xi)| conv_forward_sample(&g, xi, w, bias, o));
            (Tensor::new(out_shape, out)?, Cache::Input(x))
        }
        Layer::Linear { name, in_f, out_f } => {
            let w = params.get(&format!("{name}.weight"))?.data();
            let bias = params.get(&format!("{name}.bias"))?.data();
            let mut out = vec![0.0; b * out_f];
            out.par_chunks_mut(*out_f)
                .zip(x.data().par_chunks(*in_f))
                .for_each(|(o, xi)| {
                    for (j, oj) in o.iter_mut().enumerate() {
                        let wr = &w[j * in_f..(j + 1) * in_f];
                        *oj = bias[j] + wr.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
            (Tensor::new(out_shape, out)?, Cache::Input(x))
        }
        Layer::BatchNorm { name, channels } => {
            let c = *channels;
            let inner: usize = per_in[1..].iter().product();
            let gamma = params.get(&format!("{name}.gamma"))?.data();
            let beta = params.get(&format!("{name}.beta"))?.data();
            let xd = x.data();
            let m = (b * inner) as f64;
            let (mean, var) = if train {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for bi in 0..b {
                        let base = (bi * c + ch) * inner;
                        s += xd[base..base + inner].iter().sum::<f64>();
                    }
                    let mu = s / m;
                    let mut ss = 0.0;
                    for bi in 0..b {
                        let base = (bi * c + ch) * inner;
                        ss += xd[base..base + inner]
                            .iter()
                            .map(|v| (v - mu) * (v - mu))
                            .sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = ss / m;
                }
                (mean, var)
            } else {
                (
                    params.get(&format!("{name}.running_mean"))?.data().to_vec(),
                    params.get(&format!("{name}.running_var"))?.data().to_vec(),
                )
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let mut xh = vec![0.0; xd.len()];
            let mut y = vec![0.0; xd.len()];
            for bi in 0..b {
                for ch in 0..c {
                    let base = (bi * c + ch) * inner;
                    for k in base..base + inner {
                        let h = (xd[k] - mean[ch]) * inv_std[ch];
                        xh[k] = h;
                        y[k] = gamma[ch] * h + beta[ch];
                    }
                }
            }
            if train {
                let var_unbiased = if m > 1.0 {
                    var.iter().map(|v| v * m / (m - 1.0)).collect()
                } else {
                    var
                };
                if let Some(t) = tape.as_deref_mut() {
                    t.bn_updates.push(BnUpdate {
                        name: name.clone(),
                        mean,
                        var_unbiased,
                    });
                }
            }
            (
                Tensor::new(out_shape.clone(), y)?,
                Cache::Norm {
                    x_hat: Tensor::new(out_shape, xh)?,
                    inv_std,
                    train,
                },
            )
        }
        Layer::Relu => {
            let y = x.map(|v| if v > 0.0 { v } else { 0.0 });
            (y.clone(), Cache::Output(y))
        }
        Layer::Sigmoid => {
            let y = x.map(sigmoid);
            (y.clone(), Cache::Output(y))
        }
        Layer::Pool { pool, size } => {
            let k = *size;
            let n = per_in.len();
            let (h, w) = (per_in[n - 2], per_in[n - 1]);
            let (ho, wo) = (h / k, w / k);
            let planes = x.len() / (h * w);
            let xd = x.data();
            let mut y = vec![0.0; planes * ho * wo];
            let mut idx = if *pool == PoolKind::Max {
                vec![0usize; y.len()]
            } else {
                vec![]
            };
            for p in 0..planes {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let oi = (p * ho + oy) * wo + ox;
                        match pool {
                            PoolKind::Max => {
                                let mut best = f64::NEG_INFINITY;
                                let mut bi = 0;
                                for dy in 0..k {
                                    for dx in 0..k {
                                        let ii = (p * h + oy * k + dy) * w + ox * k + dx;
                                        if xd[ii] > best {
                                            best = xd[ii];
                                            bi = ii;
                                        }
                                    }
                                }
                                y[oi] = best;
                                idx[oi] = bi;
                            }
                            PoolKind::Avg => {
                                let mut s = 0.0;
                                for dy in 0..k {
                                    for dx in 0..k {
                                        s += xd[(p * h + oy * k + dy) * w + ox * k + dx];
                                    }
                                }
                                y[oi] = s / (k * k) as f64;
                            }
                        }
                    }
                }
            }
            let cache = match pool {
                PoolKind::Max => Cache::Argmax {
                    input_shape: x.shape().to_vec(),
                    idx,
                },
                PoolKind::Avg => Cache::Shape(x.shape().to_vec()),
            };
            (Tensor::new(out_shape, y)?, cache)
        }
        Layer::Dropout { rate } => {
            if train && *rate > 0.0 {
                let keep = 1.0 / (1.0 - rate);
                let r = rng
                    .as_deref_mut()
                    .ok_or_else(|| crate::error::arg_err("training-mode dropout needs an rng"))?;
                let mask: Vec<f64> = (0..x.len())
                    .map(|_| {
                        if r.random::<f64>() >= *rate {
                            keep
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let y: Vec<f64> = x.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
                (Tensor::new(out_shape, y)?, Cache::Mask(mask))
            } else {
                (x, Cache::None)
            }
        }
        Layer::Upsample { scale } => {
            let s = *scale;
            let n = per_in.len();
            let (h, w) = (per_in[n - 2], per_in[n - 1]);
            let planes = x.len() / (h * w);
            let xd = x.data();
            let (ho, wo) = (h * s, w * s);
            let mut y = vec![0.0; planes * ho * wo];
            for p in 0..planes {
                for oy in 0..ho {
                    for ox in 0..wo {
                        y[(p * ho + oy) * wo + ox] = xd[(p * h + oy / s) * w + ox / s];
                    }
                }
            }
            (Tensor::new(out_shape, y)?, Cache::Shape(x.shape().to_vec()))
        }
        Layer::Reshape { .. } => {
            let in_shape = x.shape().to_vec();
            (x.reshape(&out_shape)?, Cache::Shape(in_shape))
        }
    };
    if let Some(t) = tape {
        t.caches.push(cache);
    }
    Ok(y)
}

/// Backward one layer. Returns the input gradient; parameter gradients are
/// accumulated into `grads` when given.
pub fn layer_backward(
    layer: &Layer,
    params: &ModelParams,
    cache: &Cache,
    gy: Tensor,
    grads: Option<&mut Grads>,
) -> Result<Tensor> {
    let b = gy.dim(0);
    match (layer, cache) {
        (Layer::Conv3d { name, .. } | Layer::Conv2d { name, .. }, Cache::Input(x)) => {
            let g = geom_3d(layer, x)?;
            let w = params.get(&format!("{name}.weight"))?.data();
            let want = grads.is_some();
            let parts: Vec<_> = x
                .data()
                .par_chunks(g.in_len())
                .zip(gy.data().par_chunks(g.out_len()))
                .map(|(xi, gyi)| conv_backward_sample(&g, xi, w, gyi, want))
                .collect();
            let mut gx = Vec::with_capacity(x.len());
            let mut gw = vec![0.0; g.w_len()];
            let mut gb = vec![0.0; g.o];
            for (pgx, pgw, pgb) in parts {
                gx.extend_from_slice(&pgx);
                if want {
                    gw.iter_mut().zip(&pgw).for_each(|(a, b)| *a += b);
                    gb.iter_mut().zip(&pgb).for_each(|(a, b)| *a += b);
                }
            }
            if let Some(gr) = grads {
                let ws = params.get(&format!("{name}.weight"))?.shape().to_vec();
                gr.accumulate(&format!("{name}.weight"), Tensor::new(ws, gw)?)?;
                gr.accumulate(&format!("{name}.bias"), Tensor::new(vec![g.o], gb)?)?;
            }
            Tensor::new(x.shape().to_vec(), gx)
        }
        (Layer::Linear { name, in_f, out_f }, Cache::Input(x)) => {
            let (in_f, out_f) = (*in_f, *out_f);
            let w = params.get(&format!("{name}.weight"))?.data();
            let gyd = gy.data();
            let xd = x.data();
            let mut gx = vec![0.0; b * in_f];
            gx.par_chunks_mut(in_f)
                .zip(gyd.par_chunks(out_f))
                .for_each(|(gxi, gyi)| {
                    for (j, &gj) in gyi.iter().enumerate() {
                        if gj == 0.0 {
                            continue;
                        }
                        let wr = &w[j * in_f..(j + 1) * in_f];
                        for (a, wv) in gxi.iter_mut().zip(wr) {
                            *a += gj * wv;
                        }
                    }
                });
            if let Some(gr) = grads {
                let mut gw = vec![0.0; out_f * in_f];
                gw.par_chunks_mut(in_f).enumerate().for_each(|(j, row)| {
                    for bi in 0..b {
                        let gj = gyd[bi * out_f + j];
                        if gj == 0.0 {
                            continue;
                        }
                        for (a, xv) in row.iter_mut().zip(&xd[bi * in_f..(bi + 1) * in_f]) {
                            *a += gj * xv;
                        }
                    }
                });
                let gb: Vec<f64> = (0..out_f)
                    .map(|j| (0..b).map(|bi| gyd[bi * out_f + j]).sum())
                    .collect();
                gr.accumulate(
                    &format!("{name}.weight"),
                    Tensor::new(vec![out_f, in_f], gw)?,
                )?;
                gr.accumulate(&format!("{name}.bias"), Tensor::new(vec![out_f], gb)?)?;
            }
            Tensor::new(x.shape().to_vec(), gx)
        }
        (
            Layer::BatchNorm { name, channels },
            Cache::Norm {
                x_hat,
                inv_std,
                train,
            },
        ) => {
            let c = *channels;
            let inner = x_hat.len() / (b * c);
            let gamma = params.get(&format!("{name}.gamma"))?.data();
            let gyd = gy.data();
            let xh = x_hat.data();
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for bi in 0..b {
                for ch in 0..c {
                    let base = (bi * c + ch) * inner;
                    for k in base..base + inner {
                        sum_g[ch] += gyd[k];
                        sum_gx[ch] += gyd[k] * xh[k];
                    }
                }
            }
            let mut gx = vec![0.0; xh.len()];
            let m = (b * inner) as f64;
            for bi in 0..b {
                for ch in 0..c {
                    let base = (bi * c + ch) * inner;
                    let k0 = gamma[ch] * inv_std[ch];
                    for k in base..base + inner {
                        gx[k] = if *train {
                            k0 / m * (m * gyd[k] - sum_g[ch] - xh[k] * sum_gx[ch])
                        } else {
                            k0 * gyd[k]
                        };
                    }
                }
            }
            if let Some(gr) = grads {
                gr.accumulate(&format!("{name}.gamma"), Tensor::new(vec![c], sum_gx)?)?;
                gr.accumulate(&format!("{name}.beta"), Tensor::new(vec![c], sum_g)?)?;
            }
            Tensor::new(x_hat.shape().to_vec(), gx)
        }
        (Layer::Relu, Cache::Output(y)) => {
            let g: Vec<f64> = gy
                .data()
                .iter()
                .zip(y.data())
                .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
                .collect();
            Tensor::new(y.shape().to_vec(), g)
        }
        (Layer::Sigmoid, Cache::Output(y)) => {
            let g: Vec<f64> = gy
                .data()
                .iter()
                .zip(y.data())
                .map(|(g, y)| g * y * (1.0 - y))
                .collect();
            Tensor::new(y.shape().to_vec(), g)
        }
        (Layer::Pool { .. }, Cache::Argmax { input_shape, idx }) => {
            let mut gx = Tensor::zeros(input_shape);
            let d = gx.data_mut();
            for (g, &i) in gy.data().iter().zip(idx) {
                d[i] += g;
            }
            Ok(gx)
        }
        (Layer::Pool { size, .. }, Cache::Shape(input_shape)) => {
            let k = *size;
            let n = input_shape.len();
            let (h, w) = (input_shape[n - 2], input_shape[n - 1]);
            let (ho, wo) = (h / k, w / k);
            let mut gx = Tensor::zeros(input_shape);
            let planes = gx.len() / (h * w);
            let d = gx.data_mut();
            let gyd = gy.data();
            let inv = 1.0 / (k * k) as f64;
            for p in 0..planes {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let g = gyd[(p * ho + oy) * wo + ox] * inv;
                        for dy in 0..k {
                            for dx in 0..k {
                                d[(p * h + oy * k + dy) * w + ox * k + dx] += g;
                            }
                        }
                    }
                }
            }
            Ok(gx)
        }
        (Layer::Dropout { .. }, Cache::Mask(mask)) => {
            let g: Vec<f64> = gy.data().iter().zip(mask).map(|(g, m)| g * m).collect();
            Tensor::new(gy.shape().to_vec(), g)
        }
        (Layer::Dropout { .. }, Cache::None) => Ok(gy),
        (Layer::Upsample { scale }, Cache::Shape(input_shape)) => {
            let s = *scale;
            let n = input_shape.len();
            let (h, w) = (input_shape[n - 2], input_shape[n - 1]);
            let (ho, wo) = (h * s, w * s);
            let mut gx = Tensor::zeros(input_shape);
            let planes = gx.len() / (h * w);
            let d = gx.data_mut();
            let gyd = gy.data();
            for p in 0..planes {
                for oy in 0..ho {
                    for ox in 0..wo {
                        d[(p * h + oy / s) * w + ox / s] += gyd[(p * ho + oy) * wo + ox];
                    }
                }
            }
            Ok(gx)
        }
        (Layer::Reshape { .. }, Cache::Shape(input_shape)) => gy.reshape(input_shape),
        (l, _) => Err(shape_err(format!(
            "tape does not match layer {}",
            l.kind_name()
        ))),
    }
}
