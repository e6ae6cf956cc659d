//! Perceptual distance over a five-stage convolutional feature pyramid with
//! VGG16 topology.
//!
//! Stage taps are the last ReLU of each VGG16 block (relu1_2, relu2_2,
//! relu3_3, relu4_3, relu5_3). Pretrained weights are read from a checkpoint
//! whose tensor names follow `stage{s}.conv{k}.weight` / `.bias`; without
//! one, a seeded fixed random pyramid with channel widths divided by
//! `width_divisor` stands in.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Error, Result};
use crate::nn::checkpoint;
use crate::nn::layers::{Layer, PoolKind, Tape};
use crate::nn::params::ModelParams;
use crate::nn::sequential::Sequential;
use crate::tensor::Tensor;

/// VGG16 convolution widths per block.
pub const VGG16_BLOCKS: [&[usize]; 5] = [
    &[64, 64],
    &[128, 128],
    &[256, 256, 256],
    &[512, 512, 512],
    &[512, 512, 512],
];

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];
const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomPyramidConfig {
    pub width_divisor: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerceptualConfig {
    /// Pretrained VGG16 weights in checkpoint format.
    pub weights: Option<PathBuf>,
    /// Used when `weights` is absent or missing on disk.
    pub fallback: Option<RandomPyramidConfig>,
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        Self {
            weights: None,
            fallback: Some(RandomPyramidConfig {
                width_divisor: 16,
                seed: 0,
            }),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    stages: Vec<Sequential>,
    params: ModelParams,
    imagenet_input: bool,
    pub source: String,
}

fn stage_layers(widths: &[&[usize]], divisor: usize) -> Vec<Vec<Layer>> {
    let mut in_ch = 3;
    widths
        .iter()
        .enumerate()
        .map(|(s, block)| {
            let mut layers = Vec::new();
            if s > 0 {
                layers.push(Layer::Pool {
                    pool: PoolKind::Max,
                    size: 2,
                });
            }
            for (k, &w) in block.iter().enumerate() {
                let out = (w / divisor).max(1);
                layers.push(Layer::Conv2d {
                    name: format!("stage{s}.conv{k}"),
                    in_ch,
                    out_ch: out,
                    k: 3,
                    stride: 1,
                    pad: 1,
                });
                layers.push(Layer::Relu);
                in_ch = out;
            }
            layers
        })
        .collect()
}

fn build_stages(size: (usize, usize), divisor: usize) -> Result<Vec<Sequential>> {
    let mut shape = vec![3, size.0, size.1];
    let mut out = Vec::new();
    for layers in stage_layers(&VGG16_BLOCKS, divisor) {
        let seq = Sequential::new(shape.clone(), layers)?;
        shape = seq.output_shape()?;
        out.push(seq);
    }
    Ok(out)
}

impl FeaturePyramid {
    /// Seeded fixed-random pyramid for `h × w` inputs (h, w ≥ 16).
    pub fn random(h: usize, w: usize, cfg: &RandomPyramidConfig) -> Result<Self> {
        if cfg.width_divisor == 0 {
            return Err(arg_err("width divisor must be positive"));
        }
        let stages = build_stages((h, w), cfg.width_divisor)?;
        let decls: Vec<_> = stages.iter().flat_map(|s| s.params()).collect();
        Ok(Self {
            stages,
            params: ModelParams::init(&decls, cfg.seed),
            imagenet_input: false,
            source: format!("random-vgg16/{}#{}", cfg.width_divisor, cfg.seed),
        })
    }

    /// Full-width VGG16 pyramid with weights from a checkpoint file.
    pub fn pretrained(h: usize, w: usize, path: &Path) -> Result<Self> {
        let stages = build_stages((h, w), 1)?;
        let (_, tensors) = checkpoint::load(path)?;
        let params = ModelParams::from_map(tensors);
        let decls: Vec<_> = stages.iter().flat_map(|s| s.params()).collect();
        params.check_against(&decls)?;
        Ok(Self {
            stages,
            params,
            imagenet_input: true,
            source: format!("vgg16:{}", path.display()),
        })
    }

    pub fn from_config(h: usize, w: usize, cfg: &PerceptualConfig) -> Result<Self> {
        if let Some(p) = cfg.weights.as_ref().filter(|p| p.exists()) {
            return Self::pretrained(h, w, p);
        }
        match &cfg.fallback {
            Some(r) => Self::random(h, w, r),
            None => Err(Error::InvalidArgument(
                "perceptual extractor weights unavailable and no fallback configured".into(),
            )),
        }
    }

    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    fn prepare(&self, x: &Tensor) -> Tensor {
        if !self.imagenet_input {
            return x.clone();
        }
        let plane = x.dim(2) * x.dim(3);
        let mut y = x.clone();
        for (k, v) in y.data_mut().iter_mut().enumerate() {
            let c = (k / plane) % 3;
            *v = (*v - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
        }
        y
    }

    fn features(&self, x: &Tensor, record: bool) -> Result<(Vec<Tensor>, Vec<Tape>)> {
        let mut h = self.prepare(x);
        let mut feats = Vec::with_capacity(self.stages.len());
        let mut tapes = Vec::new();
        for s in &self.stages {
            if record {
                let (y, t) = s.forward(&self.params, h, false, None)?;
                tapes.push(t);
                h = y;
            } else {
                h = s.infer(&self.params, h)?;
            }
            feats.push(h.clone());
        }
        Ok((feats, tapes))
    }

    /// Input gradient given per-stage output gradients.
    fn backward(&self, tapes: &[Tape], stage_grads: Vec<Tensor>) -> Result<Tensor> {
        let mut carry: Option<Tensor> = None;
        for (i, gs) in stage_grads.into_iter().enumerate().rev() {
            let mut g = gs;
            if let Some(c) = carry.take() {
                g.add_assign(&c)?;
            }
            carry = Some(self.stages[i].backward(&self.params, &tapes[i], g, None)?);
        }
        let mut g = carry.ok_or_else(|| shape_err("empty pyramid"))?;
        if self.imagenet_input {
            let plane = g.dim(2) * g.dim(3);
            for (k, v) in g.data_mut().iter_mut().enumerate() {
                *v /= IMAGENET_STD[(k / plane) % 3];
            }
        }
        Ok(g)
    }
}

/// Per-sample RMS normalization of a `[B, ...]` feature tensor.
fn rms_normalize(f: &Tensor) -> (Tensor, Vec<f64>) {
    let b = f.dim(0);
    let n = f.row_len();
    let mut out = f.clone();
    let mut norms = Vec::with_capacity(b);
    for i in 0..b {
        let r = out.row_mut(i);
        let rms = (r.iter().map(|v| v * v).sum::<f64>() / n as f64 + NORM_EPS).sqrt();
        r.iter_mut().for_each(|v| *v /= rms);
        norms.push(rms);
    }
    (out, norms)
}

fn check_batch(f: &Tensor, g: &Tensor) -> Result<()> {
    f.check_same(g)?;
    if f.ndim() != 4 || f.dim(1) != 3 {
        return Err(shape_err(format!(
            "perceptual loss expects [B, 3, H, W], got {:?}",
            f.shape()
        )));
    }
    Ok(())
}

/// Sum over the five stages of the mean squared difference between
/// per-sample RMS-normalized feature maps.
pub fn perceptual_loss(f: &Tensor, g: &Tensor, extractor: &FeaturePyramid) -> Result<f64> {
    check_batch(f, g)?;
    let (ff, _) = extractor.features(f, false)?;
    let (fg, _) = extractor.features(g, false)?;
    let mut total = 0.0;
    for (a, b) in ff.iter().zip(&fg) {
        let (na, _) = rms_normalize(a);
        let (nb, _) = rms_normalize(b);
        total += na
            .data()
            .iter()
            .zip(nb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / na.len() as f64;
    }
    Ok(total)
}

/// Perceptual loss and its gradient with respect to `g`.
pub fn perceptual_with_grad(
    f: &Tensor,
    g: &Tensor,
    extractor: &FeaturePyramid,
) -> Result<(f64, Tensor)> {
    check_batch(f, g)?;
    let (ff, _) = extractor.features(f, false)?;
    let (fg, tapes) = extractor.features(g, true)?;
    let mut total = 0.0;
    let mut stage_grads = Vec::with_capacity(fg.len());
    for (a, b) in ff.iter().zip(&fg) {
        let (na, _) = rms_normalize(a);
        let (nb, norms) = rms_normalize(b);
        let len = na.len() as f64;
        let diff: Vec<f64> = nb
            .data()
            .iter()
            .zip(na.data())
            .map(|(y, x)| y - x)
            .collect();
        total += diff.iter().map(|d| d * d).sum::<f64>() / len;
        // d/dφ of φ/rms(φ): (u - φ̂ <u, φ̂> / n) / rms
        let per = b.row_len();
        let mut grad = vec![0.0; b.len()];
        for i in 0..b.dim(0) {
            let u: Vec<f64> = diff[i * per..(i + 1) * per]
                .iter()
                .map(|d| 2.0 * d / len)
                .collect();
            let phat = nb.row(i);
            let dot: f64 = u.iter().zip(phat).map(|(a, b)| a * b).sum();
            for k in 0..per {
                grad[i * per + k] = (u[k] - phat[k] * dot / per as f64) / norms[i];
            }
        }
        stage_grads.push(Tensor::new(b.shape().to_vec(), grad)?);
    }
    let gx = extractor.backward(&tapes, stage_grads)?;
    Ok((total, gx))
}
