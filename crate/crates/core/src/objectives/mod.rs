//! Encoder loss, decoder loss and their convex combination.
//!
//! * `L_E = MSE(v, v̂) + α · (1 − cos(v, v̂))`, cosine per sample over voxels
//! * `L_D = β · psim(f, f̂) + γ · (1 − SSIM(f, f̂)) + δ · TV(f̂)`
//! * `L_ED = ε · L_E + (1 − ε) · L_D`

pub mod perceptual;
pub mod ssim;
pub mod tv;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Result};
use crate::tensor::Tensor;

pub use perceptual::{
    perceptual_loss, perceptual_with_grad, FeaturePyramid, PerceptualConfig, RandomPyramidConfig,
};
pub use ssim::{ssim, ssim_with_grad};
pub use tv::{tv_loss, tv_with_grad};

/// Norm below which a vector counts as zero for the cosine term.
pub const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for HyperConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.35,
            gamma: 0.35,
            delta: 0.30,
            epsilon: 0.5,
            learning_rate: 1e-4,
            epochs: 11,
            seed: 0,
        }
    }
}

impl HyperConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(arg_err(format!("epsilon {} outside [0, 1]", self.epsilon)));
        }
        for (n, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("delta", self.delta),
            ("learning_rate", self.learning_rate),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(arg_err(format!(
                    "{n} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Loss terms of one evaluation. Terms that were not computed (decoder terms
/// of an encoder-only model and vice versa) are NaN.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse_v: f64,
    pub cos_dist: f64,
    pub l_e: f64,
    pub psim: f64,
    pub ssim_loss: f64,
    pub tv: f64,
    pub l_d: f64,
    pub l_ed: f64,
    /// Samples whose cosine term hit the zero-norm rule.
    pub zero_norm_rows: usize,
}

impl Default for LossBreakdown {
    fn default() -> Self {
        Self {
            mse_v: f64::NAN,
            cos_dist: f64::NAN,
            l_e: f64::NAN,
            psim: f64::NAN,
            ssim_loss: f64::NAN,
            tv: f64::NAN,
            l_d: f64::NAN,
            l_ed: f64::NAN,
            zero_norm_rows: 0,
        }
    }
}

impl LossBreakdown {
    /// Largest violation of the recomposition identities among the terms present.
    pub fn identity_error(&self, hp: &HyperConfig) -> f64 {
        let mut err: f64 = 0.0;
        if self.l_e.is_finite() {
            err = err.max((self.l_e - (self.mse_v + hp.alpha * self.cos_dist)).abs());
        }
        if self.l_d.is_finite() {
            err = err.max(
                (self.l_d - (hp.beta * self.psim + hp.gamma * self.ssim_loss + hp.delta * self.tv))
                    .abs(),
            );
        }
        if self.l_ed.is_finite() {
            err = err
                .max((self.l_ed - (hp.epsilon * self.l_e + (1.0 - hp.epsilon) * self.l_d)).abs());
        }
        err
    }

    /// Weighted sum of breakdowns (weights are usually batch sizes).
    pub fn weighted_mean(items: &[(LossBreakdown, f64)]) -> LossBreakdown {
        let total: f64 = items.iter().map(|(_, w)| w).sum();
        let avg =
            |f: fn(&LossBreakdown) -> f64| items.iter().map(|(b, w)| f(b) * w).sum::<f64>() / total;
        LossBreakdown {
            mse_v: avg(|b| b.mse_v),
            cos_dist: avg(|b| b.cos_dist),
            l_e: avg(|b| b.l_e),
            psim: avg(|b| b.psim),
            ssim_loss: avg(|b| b.ssim_loss),
            tv: avg(|b| b.tv),
            l_d: avg(|b| b.l_d),
            l_ed: avg(|b| b.l_ed),
            zero_norm_rows: items.iter().map(|(b, _)| b.zero_norm_rows).sum(),
        }
    }
}

fn check_2d(v: &Tensor, v_hat: &Tensor) -> Result<(usize, usize)> {
    v.check_same(v_hat)?;
    if v.ndim() != 2 || v.dim(0) == 0 || v.dim(1) == 0 {
        return Err(shape_err(format!(
            "encoder loss expects [B, V], got {:?}",
            v.shape()
        )));
    }
    Ok((v.dim(0), v.dim(1)))
}

/// Encoder loss terms and the gradient of `L_E` with respect to `v̂`.
pub fn encoder_loss_with_grad(
    v: &Tensor,
    v_hat: &Tensor,
    alpha: f64,
) -> Result<(LossBreakdown, Tensor)> {
    let (b, n) = check_2d(v, v_hat)?;
    let mut grad = vec![0.0; b * n];
    let total = (b * n) as f64;
    let mut mse = 0.0;
    let mut cos_sum = 0.0;
    let mut zero_rows = 0;
    for i in 0..b {
        let x = v.row(i);
        let y = v_hat.row(i);
        let g = &mut grad[i * n..(i + 1) * n];
        for k in 0..n {
            let d = y[k] - x[k];
            mse += d * d;
            g[k] = 2.0 * d / total;
        }
        let sx = x.iter().map(|a| a * a).sum::<f64>();
        let sy = y.iter().map(|a| a * a).sum::<f64>();
        let (nx, ny) = (sx.sqrt(), sy.sqrt());
        if nx < ZERO_NORM || ny < ZERO_NORM {
            zero_rows += 1;
            cos_sum += 1.0;
            continue;
        }
        let dot: f64 = x.iter().zip(y).map(|(a, c)| a * c).sum();
        // sqrt(sx * sy) == sx when x == y, so identical rows give cos == 1 exactly
        let cos = dot / (sx * sy).sqrt();
        cos_sum += 1.0 - cos;
        // d(1 - cos)/dy = -(x / (|x||y|) - cos * y / |y|^2), averaged over batch
        let s = alpha / b as f64;
        for k in 0..n {
            g[k] -= s * (x[k] / (nx * ny) - cos * y[k] / (ny * ny));
        }
    }
    let mse_v = mse / total;
    let cos_dist = cos_sum / b as f64;
    let bd = LossBreakdown {
        mse_v,
        cos_dist,
        l_e: mse_v + alpha * cos_dist,
        zero_norm_rows: zero_rows,
        ..Default::default()
    };
    Ok((bd, Tensor::new(vec![b, n], grad)?))
}

pub fn loss_encoder(v: &Tensor, v_hat: &Tensor, alpha: f64) -> Result<LossBreakdown> {
    Ok(encoder_loss_with_grad(v, v_hat, alpha)?.0)
}

fn check_frames(f: &Tensor, f_hat: &Tensor) -> Result<usize> {
    f.check_same(f_hat)?;
    if f.ndim() != 4 || f.dim(1) != 3 || f.dim(0) == 0 {
        return Err(shape_err(format!(
            "decoder loss expects [B, 3, H, W], got {:?}",
            f.shape()
        )));
    }
    Ok(f.dim(0))
}

fn frame(t: &Tensor, i: usize) -> Tensor {
    Tensor::new(t.shape()[1..].to_vec(), t.row(i).to_vec()).expect("frame slice")
}

/// Decoder loss terms and the gradient of `L_D` with respect to `f̂`.
/// SSIM and TV are averaged over the batch.
pub fn decoder_loss_with_grad(
    f: &Tensor,
    f_hat: &Tensor,
    hp: &HyperConfig,
    extractor: &FeaturePyramid,
) -> Result<(LossBreakdown, Tensor)> {
    let b = check_frames(f, f_hat)?;
    let (psim, g_psim) = perceptual_with_grad(f, f_hat, extractor)?;
    let mut grad = g_psim;
    grad.scale(hp.beta);
    let mut ssim_sum = 0.0;
    let mut tv_sum = 0.0;
    let inv_b = 1.0 / b as f64;
    for i in 0..b {
        let fi = frame(f, i);
        let gi = frame(f_hat, i);
        let (s, gs) = ssim_with_grad(&fi, &gi)?;
        let (t, gt) = tv_with_grad(&gi)?;
        ssim_sum += 1.0 - s;
        tv_sum += t;
        let row = grad.row_mut(i);
        for ((r, a), c) in row.iter_mut().zip(gs.data()).zip(gt.data()) {
            *r += inv_b * (-hp.gamma * a + hp.delta * c);
        }
    }
    let ssim_loss = ssim_sum * inv_b;
    let tv = tv_sum * inv_b;
    let bd = LossBreakdown {
        psim,
        ssim_loss,
        tv,
        l_d: hp.beta * psim + hp.gamma * ssim_loss + hp.delta * tv,
        ..Default::default()
    };
    Ok((bd, grad))
}

pub fn loss_decoder(
    f: &Tensor,
    f_hat: &Tensor,
    hp: &HyperConfig,
    extractor: &FeaturePyramid,
) -> Result<LossBreakdown> {
    let b = check_frames(f, f_hat)?;
    let psim = perceptual_loss(f, f_hat, extractor)?;
    let mut ssim_sum = 0.0;
    let mut tv_sum = 0.0;
    for i in 0..b {
        let gi = frame(f_hat, i);
        ssim_sum += 1.0 - ssim(&frame(f, i), &gi)?;
        tv_sum += tv_loss(&gi)?;
    }
    let ssim_loss = ssim_sum / b as f64;
    let tv = tv_sum / b as f64;
    Ok(LossBreakdown {
        psim,
        ssim_loss,
        tv,
        l_d: hp.beta * psim + hp.gamma * ssim_loss + hp.delta * tv,
        ..Default::default()
    })
}

/// Merge encoder and decoder breakdowns into the combined loss.
pub fn combine(enc: &LossBreakdown, dec: &LossBreakdown, epsilon: f64) -> LossBreakdown {
    LossBreakdown {
        mse_v: enc.mse_v,
        cos_dist: enc.cos_dist,
        l_e: enc.l_e,
        psim: dec.psim,
        ssim_loss: dec.ssim_loss,
        tv: dec.tv,
        l_d: dec.l_d,
        l_ed: epsilon * enc.l_e + (1.0 - epsilon) * dec.l_d,
        zero_norm_rows: enc.zero_norm_rows,
    }
}

pub fn loss_combined(
    v: &Tensor,
    v_hat: &Tensor,
    f: &Tensor,
    f_hat: &Tensor,
    hp: &HyperConfig,
    extractor: &FeaturePyramid,
) -> Result<LossBreakdown> {
    hp.validate()?;
    let e = loss_encoder(v, v_hat, hp.alpha)?;
    let d = loss_decoder(f, f_hat, hp, extractor)?;
    Ok(combine(&e, &d, hp.epsilon))
}
