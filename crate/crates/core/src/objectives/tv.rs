//! Anisotropic total variation: mean |horizontal difference| plus mean
//! |vertical difference| of a `[C, H, W]` image.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

fn dims(f: &Tensor) -> Result<(usize, usize, usize)> {
    if f.ndim() != 3 {
        return Err(shape_err(format!(
            "tv expects [C, H, W], got {:?}",
            f.shape()
        )));
    }
    let (c, h, w) = (f.dim(0), f.dim(1), f.dim(2));
    if h < 2 || w < 2 {
        return Err(shape_err(format!("tv needs H, W >= 2, got {h}×{w}")));
    }
    Ok((c, h, w))
}

pub fn tv_loss(f: &Tensor) -> Result<f64> {
    Ok(tv_with_grad(f)?.0)
}

/// TV and its subgradient (sign(0) = 0).
pub fn tv_with_grad(f: &Tensor) -> Result<(f64, Tensor)> {
    let (c, h, w) = dims(f)?;
    let x = f.data();
    let nh = (c * h * (w - 1)) as f64;
    let nv = (c * (h - 1) * w) as f64;
    let mut sh = 0.0;
    let mut sv = 0.0;
    let mut g = vec![0.0; x.len()];
    let sign = |d: f64| {
        if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let i = (ch * h + y) * w + xx;
                if xx + 1 < w {
                    let d = x[i + 1] - x[i];
                    sh += d.abs();
                    let s = sign(d) / nh;
                    g[i + 1] += s;
                    g[i] -= s;
                }
                if y + 1 < h {
                    let d = x[i + w] - x[i];
                    sv += d.abs();
                    let s = sign(d) / nv;
                    g[i + w] += s;
                    g[i] -= s;
                }
            }
        }
    }
    Ok((sh / nh + sv / nv, Tensor::new(f.shape().to_vec(), g)?))
}
