//! Central finite-difference checks of analytic gradients: one per layer
//! kind, per desk-style model and per loss term.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::params::is_trainable;
use crate::nn::{
    Decoder, DecoderSpec, EncoderSpec, Grads, Layer, ModelParams, PoolKind, PoolSpec, Sequential,
    SpatialBlock, TemporalBlock, UpsampleBlock,
};
use crate::objectives::{
    combine, decoder_loss_with_grad, encoder_loss_with_grad, perceptual_with_grad, ssim_with_grad,
    tv_with_grad, FeaturePyramid, HyperConfig, RandomPyramidConfig,
};
use crate::seed::rng_for;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Coordinates probed per block; larger blocks are sampled.
pub const MAX_PROBES: usize = 256;

/// Outcome of one check. `rel_err` is the worst, over the input block and
/// each parameter tensor, of `|analytic - numeric| / max(|analytic|, |numeric|)`
/// (L2 norms; absolute when both norms vanish).
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub label: String,
    pub covers: Vec<String>,
    pub params: usize,
    pub entries: usize,
    pub rel_err: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.rel_err < TOLERANCE
    }
}

fn norm(x: impl Iterator<Item = f64>) -> f64 {
    x.map(|v| v * v).sum::<f64>().sqrt()
}

pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let d = norm(analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let s = norm(analytic.iter().copied()).max(norm(numeric.iter().copied()));
    if s < 1e-7 {
        d
    } else {
        d / s
    }
}

pub fn central_difference(
    x: &[f64],
    h: f64,
    mut f: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut xs = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + h;
        let fp = f(&xs)?;
        xs[i] = orig - h;
        let fm = f(&xs)?;
        xs[i] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}

/// Relative error of one block on up to [`MAX_PROBES`] coordinates, and
/// the number probed.
fn block_err(
    x: &[f64],
    analytic: &[f64],
    rng: &mut impl Rng,
    mut f: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<(f64, usize)> {
    let idx: Vec<usize> = if x.len() <= MAX_PROBES {
        (0..x.len()).collect()
    } else {
        let mut v = rand::seq::index::sample(rng, x.len(), MAX_PROBES).into_vec();
        v.sort_unstable();
        v
    };
    let mut xs = x.to_vec();
    let mut numeric = Vec::with_capacity(idx.len());
    for &i in &idx {
        let orig = xs[i];
        xs[i] = orig + FD_STEP;
        let fp = f(&xs)?;
        xs[i] = orig - FD_STEP;
        let fm = f(&xs)?;
        xs[i] = orig;
        numeric.push((fp - fm) / (2.0 * FD_STEP));
    }
    let a: Vec<f64> = idx.iter().map(|&i| analytic[i]).collect();
    Ok((rel_err(&a, &numeric), idx.len()))
}

/// Worst block error over every trainable tensor, probes and parameter count.
fn param_blocks(
    params: &ModelParams,
    grads: &Grads,
    rng: &mut impl Rng,
    objective: impl Fn(&ModelParams) -> Result<f64>,
) -> Result<(f64, usize, usize)> {
    let (mut worst, mut probes, mut count) = (0.0f64, 0, 0);
    let names: Vec<String> = params
        .names()
        .filter(|n| is_trainable(n))
        .cloned()
        .collect();
    for n in &names {
        let p0 = params.get(n)?;
        count += p0.len();
        let analytic = grads
            .get(n)
            .map_or_else(|| vec![0.0; p0.len()], |g| g.data().to_vec());
        let mut p = params.clone();
        let (e, k) = block_err(p0.data(), &analytic, rng, |vals| {
            p.get_mut(n)?.data_mut().copy_from_slice(vals);
            objective(&p)
        })?;
        worst = worst.max(e);
        probes += k;
    }
    Ok((worst, probes, count))
}

fn normal(shape: &[usize], rng: &mut impl Rng, scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| scale * rng.sample::<f64, _>(StandardNormal))
}

fn uniform(shape: &[usize], rng: &mut impl Rng, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn with_data(t: &Tensor, data: &[f64]) -> Tensor {
    Tensor::new(t.shape().to_vec(), data.to_vec()).expect("same length")
}

/// Initialised parameters with non-trivial batch-norm scale, shift and statistics.
fn busy_params(net: &Sequential, seed: u64) -> ModelParams {
    let mut params = ModelParams::init(&net.params(), seed);
    let mut rng = rng_for(seed, "gradcheck/params");
    let names: Vec<String> = params.names().cloned().collect();
    for n in names {
        let t = params.get_mut(&n).expect("declared");
        for v in t.data_mut() {
            let z: f64 = rng.sample(StandardNormal);
            if n.ends_with(".gamma") {
                *v = 1.0 + 0.3 * z;
            } else if n.ends_with(".beta") || n.ends_with(".bias") || n.ends_with(".running_mean") {
                *v = 0.2 * z;
            } else if n.ends_with(".running_var") {
                *v = 0.5 + rng.random::<f64>();
            }
        }
    }
    params
}

/// Checks input and parameter gradients of `Σ w ⊙ net(x)` for random `x`, `w`.
/// Dropout masks are replayed from a fixed stream on every evaluation.
pub fn check_network(
    label: &str,
    net: &Sequential,
    batch: usize,
    train: bool,
    seed: u64,
) -> Result<GradCheck> {
    let params = busy_params(net, seed);
    let mut rng = rng_for(seed, "gradcheck/data");
    let mut in_shape = vec![batch];
    in_shape.extend(&net.input_shape);
    let mut out_shape = vec![batch];
    out_shape.extend(net.output_shape()?);
    let x = normal(&in_shape, &mut rng, 1.0);
    let w = normal(&out_shape, &mut rng, 1.0);
    let drop_rng = || rng_for(seed, "gradcheck/dropout");
    let objective = |p: &ModelParams, x: Tensor| -> Result<f64> {
        let mut r = drop_rng();
        let (y, _) = net.forward(p, x, train, Some(&mut r))?;
        Ok(dot(&y, &w))
    };

    let mut r = drop_rng();
    let (_, tape) = net.forward(&params, x.clone(), train, Some(&mut r))?;
    let mut grads = Grads::new();
    let gx = net.backward(&params, &tape, w.clone(), Some(&mut grads))?;

    let mut probe_rng = rng_for(seed, "gradcheck/probes");
    let (ex, kx) = block_err(x.data(), gx.data(), &mut probe_rng, |xs| {
        objective(&params, with_data(&x, xs))
    })?;
    let (ep, kp, count) =
        param_blocks(&params, &grads, &mut probe_rng, |p| objective(p, x.clone()))?;
    let mut covers: Vec<String> = net
        .layers
        .iter()
        .map(|l| l.kind_name().to_string())
        .collect();
    covers.sort();
    covers.dedup();
    Ok(GradCheck {
        label: label.to_string(),
        covers,
        params: count,
        entries: kx + kp,
        rel_err: ex.max(ep),
    })
}

fn check_loss(
    label: &str,
    covers: &[&str],
    x: &Tensor,
    analytic: &Tensor,
    f: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<GradCheck> {
    let mut rng = rng_for(x.len() as u64, "gradcheck/probes");
    let (e, k) = block_err(x.data(), analytic.data(), &mut rng, f)?;
    Ok(GradCheck {
        label: label.to_string(),
        covers: covers.iter().map(|s| s.to_string()).collect(),
        params: 0,
        entries: k,
        rel_err: e,
    })
}

fn net(input: &[usize], layers: Vec<Layer>) -> Result<Sequential> {
    Sequential::new(input.to_vec(), layers)
}

fn conv3d(
    in_ch: usize,
    out_ch: usize,
    kt: usize,
    ks: usize,
    st: usize,
    ss: usize,
    pad: usize,
) -> Layer {
    Layer::Conv3d {
        name: "c3".into(),
        in_ch,
        out_ch,
        kt,
        ks,
        st,
        ss,
        pad,
    }
}

fn conv2d(name: &str, in_ch: usize, out_ch: usize, k: usize, stride: usize, pad: usize) -> Layer {
    Layer::Conv2d {
        name: name.into(),
        in_ch,
        out_ch,
        k,
        stride,
        pad,
    }
}

fn linear(in_f: usize, out_f: usize) -> Layer {
    Layer::Linear {
        name: "fc".into(),
        in_f,
        out_f,
    }
}

fn bn(channels: usize) -> Layer {
    Layer::BatchNorm {
        name: "bn".into(),
        channels,
    }
}

fn pool(kind: PoolKind, size: usize) -> Layer {
    Layer::Pool { pool: kind, size }
}

/// Small encoder with every encoder layer kind; 4×4 frames.
pub fn mini_encoder_spec() -> EncoderSpec {
    let tb = |c, kt, st| TemporalBlock {
        out_channels: c,
        temporal_kernel: kt,
        temporal_stride: st,
        spatial_kernel: 3,
        spatial_stride: 1,
        pool: None,
    };
    EncoderSpec {
        height: 4,
        width: 4,
        temporal_conv_blocks: vec![tb(2, 8, 8), tb(2, 4, 1)],
        spatial_conv_blocks: vec![SpatialBlock {
            out_channels: 2,
            kernel: 3,
            stride: 1,
            pool: Some(PoolSpec {
                kind: PoolKind::Avg,
                size: 2,
            }),
        }],
        fc_widths: vec![6, 5],
        dropout_rate: 0.25,
        use_batch_norm: true,
    }
}

/// Small decoder from `voxels` voxels to `4 · 2^blocks` square frames.
pub fn mini_decoder_spec(voxels: usize, blocks: usize) -> DecoderSpec {
    DecoderSpec {
        voxels,
        entry_channels: 2,
        entry_height: 4,
        entry_width: 4,
        upsample_blocks: (0..blocks)
            .map(|_| UpsampleBlock {
                scale: 2,
                out_channels: 2,
                kernel: 3,
            })
            .collect(),
        output_kernel: 3,
        use_batch_norm: true,
    }
}

/// Every layer kind, both desk-style models, and every loss term.
pub fn standard_suite() -> Result<Vec<GradCheck>> {
    use PoolKind::{Avg, Max};
    let mut out = vec![
        check_network(
            "conv3d",
            &net(&[2, 4, 5, 5], vec![conv3d(2, 3, 2, 3, 2, 1, 1)])?,
            2,
            true,
            1,
        )?,
        check_network(
            "conv3d strided",
            &net(&[2, 3, 7, 7], vec![conv3d(2, 2, 3, 3, 1, 2, 0)])?,
            2,
            true,
            2,
        )?,
        check_network(
            "conv2d",
            &net(&[2, 6, 6], vec![conv2d("c2", 2, 3, 3, 1, 1)])?,
            2,
            true,
            3,
        )?,
        check_network(
            "conv2d strided",
            &net(&[2, 7, 7], vec![conv2d("c2", 2, 2, 3, 2, 0)])?,
            2,
            true,
            4,
        )?,
        check_network("linear", &net(&[6], vec![linear(6, 4)])?, 3, true, 5)?,
        check_network(
            "batch_norm train",
            &net(&[3, 4, 4], vec![bn(3)])?,
            4,
            true,
            6,
        )?,
        check_network("batch_norm train 2d", &net(&[5], vec![bn(5)])?, 6, true, 7)?,
        check_network(
            "batch_norm eval",
            &net(&[3, 4, 4], vec![bn(3)])?,
            4,
            false,
            8,
        )?,
        check_network(
            "relu",
            &net(&[6], vec![linear(6, 8), Layer::Relu])?,
            3,
            true,
            9,
        )?,
        check_network(
            "sigmoid",
            &net(&[6], vec![linear(6, 5), Layer::Sigmoid])?,
            3,
            true,
            10,
        )?,
        check_network(
            "max_pool",
            &net(&[2, 6, 6], vec![pool(Max, 2)])?,
            2,
            true,
            11,
        )?,
        check_network(
            "max_pool 4d",
            &net(&[2, 3, 4, 4], vec![pool(Max, 2)])?,
            2,
            true,
            12,
        )?,
        check_network(
            "avg_pool",
            &net(&[2, 6, 6], vec![pool(Avg, 3)])?,
            2,
            true,
            13,
        )?,
        check_network(
            "dropout",
            &net(&[6], vec![linear(6, 10), Layer::Dropout { rate: 0.3 }])?,
            3,
            true,
            14,
        )?,
        check_network(
            "upsample",
            &net(&[2, 3, 3], vec![Layer::Upsample { scale: 2 }])?,
            2,
            true,
            15,
        )?,
        check_network(
            "reshape",
            &net(
                &[8],
                vec![
                    linear(8, 12),
                    Layer::Reshape {
                        shape: vec![3, 2, 2],
                    },
                    conv2d("c2", 3, 2, 2, 1, 0),
                ],
            )?,
            2,
            true,
            16,
        )?,
        check_network("encoder", &mini_encoder_spec().build()?, 3, true, 17)?,
        check_network("decoder", &mini_decoder_spec(5, 1).build()?, 3, true, 18)?,
    ];

    let mut rng = rng_for(19, "gradcheck/losses");
    let v = normal(&[3, 6], &mut rng, 1.0);
    let v_hat = normal(&[3, 6], &mut rng, 1.0);
    for alpha in [0.0, 0.5, 2.0] {
        let (_, g) = encoder_loss_with_grad(&v, &v_hat, alpha)?;
        out.push(check_loss(
            &format!("loss_encoder alpha {alpha}"),
            &["l_e"],
            &v_hat,
            &g,
            |xs| {
                Ok(encoder_loss_with_grad(&v, &with_data(&v_hat, xs), alpha)?
                    .0
                    .l_e)
            },
        )?);
    }

    let f1 = uniform(&[3, 16, 16], &mut rng, 0.0, 1.0);
    let g1 = uniform(&[3, 16, 16], &mut rng, 0.0, 1.0);
    let (_, gs) = ssim_with_grad(&f1, &g1)?;
    out.push(check_loss("ssim", &["ssim"], &g1, &gs, |xs| {
        Ok(ssim_with_grad(&f1, &with_data(&g1, xs))?.0)
    })?);
    let t1 = normal(&[3, 8, 8], &mut rng, 1.0);
    let (_, gt) = tv_with_grad(&t1)?;
    out.push(check_loss("tv", &["tv"], &t1, &gt, |xs| {
        Ok(tv_with_grad(&with_data(&t1, xs))?.0)
    })?);

    let extractor = FeaturePyramid::random(
        16,
        16,
        &RandomPyramidConfig {
            width_divisor: 16,
            seed: 0,
        },
    )?;
    let f = uniform(&[2, 3, 16, 16], &mut rng, 0.0, 1.0);
    let g = uniform(&[2, 3, 16, 16], &mut rng, 0.0, 1.0);
    let (_, gp) = perceptual_with_grad(&f, &g, &extractor)?;
    out.push(check_loss("perceptual", &["psim"], &g, &gp, |xs| {
        Ok(perceptual_with_grad(&f, &with_data(&g, xs), &extractor)?.0)
    })?);
    let hp = HyperConfig::default();
    let (_, gd) = decoder_loss_with_grad(&f, &g, &hp, &extractor)?;
    out.push(check_loss("loss_decoder", &["l_d"], &g, &gd, |xs| {
        Ok(
            decoder_loss_with_grad(&f, &with_data(&g, xs), &hp, &extractor)?
                .0
                .l_d,
        )
    })?);

    out.push(check_combined(&extractor, &hp)?);
    Ok(out)
}

/// Smallest absolute difference between horizontal or vertical neighbours
/// of `[B, C, H, W]` images.
fn min_neighbour_gap(f: &Tensor) -> f64 {
    let (h, w) = (f.dim(2), f.dim(3));
    let d = f.data();
    let mut gap = f64::INFINITY;
    for plane in d.chunks(h * w) {
        for r in 0..h {
            for c in 0..w {
                let v = plane[r * w + c];
                if c + 1 < w {
                    gap = gap.min((v - plane[r * w + c + 1]).abs());
                }
                if r + 1 < h {
                    gap = gap.min((v - plane[(r + 1) * w + c]).abs());
                }
            }
        }
    }
    gap
}

/// `ε·L_E(v, v̂) + (1-ε)·L_D(f, dec(v̂))` with respect to `v̂` and the decoder
/// parameters, the way end-to-end training routes gradients. Seeds whose
/// decoder output puts a TV difference near its kink are skipped.
fn check_combined(extractor: &FeaturePyramid, hp: &HyperConfig) -> Result<GradCheck> {
    let dec = Decoder::new(mini_decoder_spec(4, 2))?;
    let eps = hp.epsilon;
    for seed in 20..40 {
        let params = busy_params(&dec.net, seed);
        let mut rng = rng_for(seed, "gradcheck/combined");
        let v = normal(&[2, 4], &mut rng, 1.0);
        let v_hat = normal(&[2, 4], &mut rng, 1.0);
        let f = uniform(&[2, 3, 16, 16], &mut rng, 0.0, 1.0);
        let (f_hat, tape) = dec.forward(&params, &v_hat, true, None)?;
        if min_neighbour_gap(&f_hat) < 1e-4 {
            continue;
        }
        let objective = |p: &ModelParams, vh: &Tensor| -> Result<f64> {
            let (le, _) = encoder_loss_with_grad(&v, vh, hp.alpha)?;
            let (f_hat, _) = dec.forward(p, vh, true, None)?;
            let (ld, _) = decoder_loss_with_grad(&f, &f_hat, hp, extractor)?;
            Ok(combine(&le, &ld, eps).l_ed)
        };
        let (_, mut gv) = encoder_loss_with_grad(&v, &v_hat, hp.alpha)?;
        let (_, mut gf) = decoder_loss_with_grad(&f, &f_hat, hp, extractor)?;
        gf.scale(1.0 - eps);
        let (gv_dec, grads) = dec.backward(&params, &tape, gf, true)?;
        gv.scale(eps);
        gv.add_assign(&gv_dec)?;

        let (ev, kv) = block_err(v_hat.data(), gv.data(), &mut rng, |xs| {
            objective(&params, &with_data(&v_hat, xs))
        })?;
        let (ep, kp, count) = param_blocks(&params, &grads, &mut rng, |p| objective(p, &v_hat))?;
        return Ok(GradCheck {
            label: "loss_combined through decoder".into(),
            covers: vec!["l_ed".into()],
            params: count,
            entries: kv + kp,
            rel_err: ev.max(ep),
        });
    }
    Err(Error::Numerical(
        "no kink-free decoder output for the combined check".into(),
    ))
}

/// Layer kinds and loss terms a complete suite must exercise.
pub const REQUIRED_COVERAGE: &[&str] = &[
    "conv3d",
    "conv2d",
    "linear",
    "batch_norm",
    "relu",
    "sigmoid",
    "max_pool",
    "avg_pool",
    "dropout",
    "upsample",
    "reshape",
    "l_e",
    "ssim",
    "tv",
    "psim",
    "l_d",
    "l_ed",
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_basics() {
        assert_eq!(rel_err(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((rel_err(&[1.0, 0.0], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
        assert!(rel_err(&[1e-9], &[0.0]) < 1e-8);
    }

    #[test]
    fn central_difference_of_cubic() {
        let g = central_difference(&[1.0, -2.0], 1e-5, |x| Ok(x[0].powi(3) + 2.0 * x[1])).unwrap();
        assert!((g[0] - 3.0).abs() < 1e-8);
        assert!((g[1] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let bad = Tensor::new(vec![3], vec![1.0, -2.0, 4.1]).unwrap();
        let c = check_loss("square", &["x"], &x, &bad, |xs| {
            Ok(xs.iter().map(|v| v * v).sum())
        })
        .unwrap();
        assert!(!c.passed());
    }
}
