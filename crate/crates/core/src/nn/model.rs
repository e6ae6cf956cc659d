//! Encoder (video chunk → voxels), decoder (voxels → frame) and their
//! end-to-end composition.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Result};
use crate::stimulus::{VideoChunk, FRAMES_PER_TR};
use crate::tensor::Tensor;

use super::layers::{Layer, PoolKind, Tape};
use super::params::{Grads, ModelParams};
use super::sequential::Sequential;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSpec {
    pub kind: PoolKind,
    pub size: usize,
}

/// 3-D convolution over (time, height, width) followed by ReLU, optional
/// batch norm and optional spatial pooling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemporalBlock {
    pub out_channels: usize,
    pub temporal_kernel: usize,
    pub temporal_stride: usize,
    pub spatial_kernel: usize,
    #[serde(default = "one")]
    pub spatial_stride: usize,
    pub pool: Option<PoolSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpatialBlock {
    pub out_channels: usize,
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
    pub pool: Option<PoolSpec>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub height: usize,
    pub width: usize,
    pub temporal_conv_blocks: Vec<TemporalBlock>,
    pub spatial_conv_blocks: Vec<SpatialBlock>,
    /// Fully connected widths; the last one is the voxel count.
    pub fc_widths: Vec<usize>,
    pub dropout_rate: f64,
    pub use_batch_norm: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpsampleBlock {
    pub scale: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderSpec {
    pub voxels: usize,
    pub entry_channels: usize,
    pub entry_height: usize,
    pub entry_width: usize,
    pub upsample_blocks: Vec<UpsampleBlock>,
    pub output_kernel: usize,
    pub use_batch_norm: bool,
}

fn max2() -> Option<PoolSpec> {
    Some(PoolSpec {
        kind: PoolKind::Max,
        size: 2,
    })
}

fn avg2() -> Option<PoolSpec> {
    Some(PoolSpec {
        kind: PoolKind::Avg,
        size: 2,
    })
}

impl EncoderSpec {
    /// Reference full-size encoder for 112×112 input: three temporal blocks
    /// (16/32/64 channels, temporal kernels 5/3/3 collapsing 32 frames to 1),
    /// two spatial blocks of 128 channels with average pooling, then
    /// FC 1024 → FC `voxels`.
    pub fn reference(voxels: usize) -> Self {
        let tb = |c, kt, st| TemporalBlock {
            out_channels: c,
            temporal_kernel: kt,
            temporal_stride: st,
            spatial_kernel: 3,
            spatial_stride: 1,
            pool: max2(),
        };
        let sb = |c| SpatialBlock {
            out_channels: c,
            kernel: 3,
            stride: 1,
            pool: avg2(),
        };
        Self {
            height: 112,
            width: 112,
            temporal_conv_blocks: vec![tb(16, 5, 3), tb(32, 3, 3), tb(64, 3, 1)],
            spatial_conv_blocks: vec![sb(128), sb(128)],
            fc_widths: vec![1024, voxels],
            dropout_rate: 0.25,
            use_batch_norm: true,
        }
    }

    /// Small encoder for 32×32 input used by the synthetic closed-loop runs.
    pub fn desk(voxels: usize, size: usize) -> Self {
        let tb = |c, kt, st, pool| TemporalBlock {
            out_channels: c,
            temporal_kernel: kt,
            temporal_stride: st,
            spatial_kernel: 3,
            spatial_stride: 1,
            pool,
        };
        Self {
            height: size,
            width: size,
            temporal_conv_blocks: vec![
                tb(8, 4, 4, max2()),
                tb(16, 4, 4, max2()),
                tb(16, 2, 1, None),
            ],
            spatial_conv_blocks: vec![
                SpatialBlock {
                    out_channels: 32,
                    kernel: 3,
                    stride: 1,
                    pool: avg2(),
                },
                SpatialBlock {
                    out_channels: 32,
                    kernel: 3,
                    stride: 1,
                    pool: avg2(),
                },
            ],
            fc_widths: vec![128, voxels],
            dropout_rate: 0.25,
            use_batch_norm: true,
        }
    }

    pub fn voxels(&self) -> usize {
        *self.fc_widths.last().unwrap_or(&0)
    }

    pub fn with_voxels(mut self, voxels: usize) -> Self {
        if let Some(last) = self.fc_widths.last_mut() {
            *last = voxels;
        }
        self
    }

    pub fn build(&self) -> Result<Sequential> {
        if self.fc_widths.is_empty() {
            return Err(arg_err("encoder needs at least one fully connected layer"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(arg_err(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        let mut layers = Vec::new();
        let mut shape = vec![3, FRAMES_PER_TR, self.height, self.width];
        let push = |l: Layer, shape: &mut Vec<usize>, layers: &mut Vec<Layer>| -> Result<()> {
            *shape = l.output_shape(shape)?;
            layers.push(l);
            Ok(())
        };
        for (i, b) in self.temporal_conv_blocks.iter().enumerate() {
            let name = format!("temporal{i}");
            push(
                Layer::Conv3d {
                    name: format!("{name}.conv"),
                    in_ch: shape[0],
                    out_ch: b.out_channels,
                    kt: b.temporal_kernel,
                    ks: b.spatial_kernel,
                    st: b.temporal_stride,
                    ss: b.spatial_stride,
                    pad: b.spatial_kernel / 2,
                },
                &mut shape,
                &mut layers,
            )?;
            push(Layer::Relu, &mut shape, &mut layers)?;
            if self.use_batch_norm {
                push(
                    Layer::BatchNorm {
                        name: format!("{name}.bn"),
                        channels: b.out_channels,
                    },
                    &mut shape,
                    &mut layers,
                )?;
            }
            if let Some(p) = b.pool {
                push(
                    Layer::Pool {
                        pool: p.kind,
                        size: p.size,
                    },
                    &mut shape,
                    &mut layers,
                )?;
            }
        }
        if shape[1] != 1 {
            return Err(shape_err(format!(
                "temporal blocks leave {} time steps; they must collapse to 1",
                shape[1]
            )));
        }
        let s3 = vec![shape[0], shape[2], shape[3]];
        push(Layer::Reshape { shape: s3 }, &mut shape, &mut layers)?;
        for (i, b) in self.spatial_conv_blocks.iter().enumerate() {
            let name = format!("spatial{i}");
            push(
                Layer::Conv2d {
                    name: format!("{name}.conv"),
                    in_ch: shape[0],
                    out_ch: b.out_channels,
                    k: b.kernel,
                    stride: b.stride,
                    pad: b.kernel / 2,
                },
                &mut shape,
                &mut layers,
            )?;
            push(Layer::Relu, &mut shape, &mut layers)?;
            if self.use_batch_norm {
                push(
                    Layer::BatchNorm {
                        name: format!("{name}.bn"),
                        channels: b.out_channels,
                    },
                    &mut shape,
                    &mut layers,
                )?;
            }
            if let Some(p) = b.pool {
                push(
                    Layer::Pool {
                        pool: p.kind,
                        size: p.size,
                    },
                    &mut shape,
                    &mut layers,
                )?;
            }
        }
        let flat = shape.iter().product();
        push(
            Layer::Reshape { shape: vec![flat] },
            &mut shape,
            &mut layers,
        )?;
        let n_fc = self.fc_widths.len();
        for (i, &w) in self.fc_widths.iter().enumerate() {
            push(
                Layer::Linear {
                    name: format!("fc{i}"),
                    in_f: shape[0],
                    out_f: w,
                },
                &mut shape,
                &mut layers,
            )?;
            if i + 1 < n_fc {
                push(Layer::Relu, &mut shape, &mut layers)?;
                if self.dropout_rate > 0.0 {
                    push(
                        Layer::Dropout {
                            rate: self.dropout_rate,
                        },
                        &mut shape,
                        &mut layers,
                    )?;
                }
            }
        }
        Sequential::new(vec![3, FRAMES_PER_TR, self.height, self.width], layers)
    }
}

impl DecoderSpec {
    /// Reference full-size decoder: FC(V → 256×7×7), four ×2 upsampling
    /// blocks to 112×112, 3-channel output convolution, sigmoid.
    pub fn reference(voxels: usize) -> Self {
        let ub = |c| UpsampleBlock {
            scale: 2,
            out_channels: c,
            kernel: 3,
        };
        Self {
            voxels,
            entry_channels: 256,
            entry_height: 7,
            entry_width: 7,
            upsample_blocks: vec![ub(128), ub(64), ub(32), ub(16)],
            output_kernel: 3,
            use_batch_norm: true,
        }
    }

    /// Small decoder producing `size × size` frames (size divisible by 8).
    pub fn desk(voxels: usize, size: usize) -> Self {
        let ub = |c| UpsampleBlock {
            scale: 2,
            out_channels: c,
            kernel: 3,
        };
        Self {
            voxels,
            entry_channels: 16,
            entry_height: size / 8,
            entry_width: size / 8,
            upsample_blocks: vec![ub(16), ub(16), ub(8)],
            output_kernel: 3,
            use_batch_norm: true,
        }
    }

    pub fn output_size(&self) -> (usize, usize) {
        let s: usize = self.upsample_blocks.iter().map(|b| b.scale).product();
        (self.entry_height * s, self.entry_width * s)
    }

    pub fn build(&self) -> Result<Sequential> {
        let mut layers = Vec::new();
        let entry = self.entry_channels * self.entry_height * self.entry_width;
        layers.push(Layer::Linear {
            name: "entry".into(),
            in_f: self.voxels,
            out_f: entry,
        });
        layers.push(Layer::Reshape {
            shape: vec![self.entry_channels, self.entry_height, self.entry_width],
        });
        let mut ch = self.entry_channels;
        for (i, b) in self.upsample_blocks.iter().enumerate() {
            layers.push(Layer::Upsample { scale: b.scale });
            layers.push(Layer::Conv2d {
                name: format!("up{i}.conv"),
                in_ch: ch,
                out_ch: b.out_channels,
                k: b.kernel,
                stride: 1,
                pad: b.kernel / 2,
            });
            layers.push(Layer::Relu);
            if self.use_batch_norm {
                layers.push(Layer::BatchNorm {
                    name: format!("up{i}.bn"),
                    channels: b.out_channels,
                });
            }
            ch = b.out_channels;
        }
        layers.push(Layer::Conv2d {
            name: "out.conv".into(),
            in_ch: ch,
            out_ch: 3,
            k: self.output_kernel,
            stride: 1,
            pad: self.output_kernel / 2,
        });
        layers.push(Layer::Sigmoid);
        let net = Sequential::new(vec![self.voxels], layers)?;
        let (h, w) = self.output_size();
        if net.output_shape()? != vec![3, h, w] {
            return Err(shape_err("decoder output shape inconsistent"));
        }
        Ok(net)
    }
}

/// A built network together with the spec it came from.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub spec: EncoderSpec,
    pub net: Sequential,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub spec: DecoderSpec,
    pub net: Sequential,
}

impl Encoder {
    pub fn new(spec: EncoderSpec) -> Result<Self> {
        let net = spec.build()?;
        Ok(Self { spec, net })
    }

    pub fn init_params(&self, seed: u64) -> ModelParams {
        ModelParams::init(&self.net.params(), seed)
    }

    /// `[B, 32, 3, H, W]` → `[B, V]`.
    pub fn forward(
        &self,
        params: &ModelParams,
        chunk_batch: &Tensor,
        train: bool,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Tensor, Tape)> {
        let x = frames_to_channels_first(chunk_batch, self.spec.height, self.spec.width)?;
        self.net.forward(params, x, train, rng)
    }

    pub fn infer(&self, params: &ModelParams, chunk_batch: &Tensor) -> Result<Tensor> {
        let x = frames_to_channels_first(chunk_batch, self.spec.height, self.spec.width)?;
        self.net.infer(params, x)
    }

    /// Parameter gradients for an output gradient (input gradient discarded).
    pub fn backward(&self, params: &ModelParams, tape: &Tape, grad_out: Tensor) -> Result<Grads> {
        let mut g = Grads::new();
        self.net.backward(params, tape, grad_out, Some(&mut g))?;
        Ok(g)
    }
}

impl Decoder {
    pub fn new(spec: DecoderSpec) -> Result<Self> {
        let net = spec.build()?;
        Ok(Self { spec, net })
    }

    pub fn init_params(&self, seed: u64) -> ModelParams {
        ModelParams::init(&self.net.params(), seed)
    }

    /// `[B, V]` → `[B, 3, H, W]` in `(0, 1)`.
    pub fn forward(
        &self,
        params: &ModelParams,
        voxels: &Tensor,
        train: bool,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Tensor, Tape)> {
        self.net.forward(params, voxels.clone(), train, rng)
    }

    pub fn infer(&self, params: &ModelParams, voxels: &Tensor) -> Result<Tensor> {
        self.net.infer(params, voxels.clone())
    }

    /// Returns (gradient w.r.t. voxel input, parameter gradients).
    pub fn backward(
        &self,
        params: &ModelParams,
        tape: &Tape,
        grad_out: Tensor,
        want_params: bool,
    ) -> Result<(Tensor, Grads)> {
        let mut g = Grads::new();
        let gx = self
            .net
            .backward(params, tape, grad_out, want_params.then_some(&mut g))?;
        Ok((gx, g))
    }
}

/// Encoder then decoder on the encoder's prediction.
pub fn end_to_end_forward(
    enc: &Encoder,
    enc_params: &ModelParams,
    dec: &Decoder,
    dec_params: &ModelParams,
    chunk_batch: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let v_hat = enc.infer(enc_params, chunk_batch)?;
    let f_hat = dec.infer(dec_params, &v_hat)?;
    Ok((v_hat, f_hat))
}

/// `[B, 32, 3, H, W]` → `[B, 3, 32, H, W]`.
pub fn frames_to_channels_first(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 5 || s[1] != FRAMES_PER_TR || s[2] != 3 || s[3] != h || s[4] != w {
        return Err(shape_err(format!(
            "chunk batch must be [B, {FRAMES_PER_TR}, 3, {h}, {w}], got {s:?}"
        )));
    }
    let b = s[0];
    let plane = h * w;
    let per = FRAMES_PER_TR * 3 * plane;
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for bi in 0..b {
        for t in 0..FRAMES_PER_TR {
            for c in 0..3 {
                let from = bi * per + (t * 3 + c) * plane;
                let to = bi * per + (c * FRAMES_PER_TR + t) * plane;
                out[to..to + plane].copy_from_slice(&src[from..from + plane]);
            }
        }
    }
    Tensor::new(vec![b, 3, FRAMES_PER_TR, h, w], out)
}

/// Stack chunks into a `[B, 32, 3, H, W]` batch.
pub fn chunk_batch(chunks: &[&VideoChunk]) -> Result<Tensor> {
    let first = chunks.first().ok_or_else(|| arg_err("empty chunk batch"))?;
    let (h, w) = (first.height, first.width);
    let per = FRAMES_PER_TR * 3 * h * w;
    let mut data = Vec::with_capacity(chunks.len() * per);
    for c in chunks {
        if c.height != h || c.width != w || c.frames.len() != per {
            return Err(shape_err("chunks in a batch must share one shape"));
        }
        data.extend(c.frames.iter().map(|&v| v as f64));
    }
    Tensor::new(vec![chunks.len(), FRAMES_PER_TR, 3, h, w], data)
}
