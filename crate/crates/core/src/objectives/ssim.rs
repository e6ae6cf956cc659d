//! Structural similarity with an 11×11 Gaussian window (σ = 1.5), valid
//! filtering, unit data range, averaged over positions and channels.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; WINDOW] {
    let mut g = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Separable valid-mode Gaussian filtering of one `h × w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64; WINDOW]) -> Vec<f64> {
    let (ho, wo) = (h - WINDOW + 1, w - WINDOW + 1);
    let mut tmp = vec![0.0; h * wo];
    for y in 0..h {
        for ox in 0..wo {
            let row = &x[y * w + ox..y * w + ox + WINDOW];
            tmp[y * wo + ox] = row.iter().zip(g).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for oy in 0..ho {
        for ox in 0..wo {
            let mut s = 0.0;
            for (k, gk) in g.iter().enumerate() {
                s += gk * tmp[(oy + k) * wo + ox];
            }
            out[oy * wo + ox] = s;
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters an `(h-10) × (w-10)` map back to `h × w`.
fn filter_valid_adjoint(m: &[f64], h: usize, w: usize, g: &[f64; WINDOW]) -> Vec<f64> {
    let (ho, wo) = (h - WINDOW + 1, w - WINDOW + 1);
    let mut tmp = vec![0.0; h * wo];
    for oy in 0..ho {
        for ox in 0..wo {
            let v = m[oy * wo + ox];
            for (k, gk) in g.iter().enumerate() {
                tmp[(oy + k) * wo + ox] += gk * v;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for ox in 0..wo {
            let v = tmp[y * wo + ox];
            for (k, gk) in g.iter().enumerate() {
                out[y * w + ox + k] += gk * v;
            }
        }
    }
    out
}

fn check(f: &Tensor, g: &Tensor) -> Result<(usize, usize, usize)> {
    f.check_same(g)?;
    if f.ndim() != 3 {
        return Err(shape_err(format!(
            "ssim expects [C, H, W], got {:?}",
            f.shape()
        )));
    }
    let (c, h, w) = (f.dim(0), f.dim(1), f.dim(2));
    if h < WINDOW || w < WINDOW {
        return Err(shape_err(format!(
            "{WINDOW}×{WINDOW} SSIM window larger than {h}×{w} image"
        )));
    }
    Ok((c, h, w))
}

struct Moments {
    mx: Vec<f64>,
    my: Vec<f64>,
    exx: Vec<f64>,
    eyy: Vec<f64>,
    exy: Vec<f64>,
}

fn moments(x: &[f64], y: &[f64], h: usize, w: usize, g: &[f64; WINDOW]) -> Moments {
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    Moments {
        mx: filter_valid(x, h, w, g),
        my: filter_valid(y, h, w, g),
        exx: filter_valid(&xx, h, w, g),
        eyy: filter_valid(&yy, h, w, g),
        exy: filter_valid(&xy, h, w, g),
    }
}

fn ssim_at(m: &Moments, i: usize) -> (f64, f64, f64, f64, f64) {
    let (mx, my) = (m.mx[i], m.my[i]);
    let sxx = m.exx[i] - mx * mx;
    let syy = m.eyy[i] - my * my;
    let sxy = m.exy[i] - mx * my;
    let a1 = 2.0 * mx * my + C1;
    let a2 = 2.0 * sxy + C2;
    let b1 = mx * mx + my * my + C1;
    let b2 = sxx + syy + C2;
    (a1 * a2 / (b1 * b2), a1, a2, b1, b2)
}

/// Mean SSIM of two `[C, H, W]` images.
pub fn ssim(f: &Tensor, g: &Tensor) -> Result<f64> {
    let (c, h, w) = check(f, g)?;
    let win = gaussian_window();
    let plane = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let m = moments(
            &f.data()[ch * plane..(ch + 1) * plane],
            &g.data()[ch * plane..(ch + 1) * plane],
            h,
            w,
            &win,
        );
        let n = m.mx.len();
        total += (0..n).map(|i| ssim_at(&m, i).0).sum::<f64>() / n as f64;
    }
    Ok(total / c as f64)
}

/// SSIM and its gradient with respect to the second image.
pub fn ssim_with_grad(f: &Tensor, g: &Tensor) -> Result<(f64, Tensor)> {
    let (c, h, w) = check(f, g)?;
    let win = gaussian_window();
    let plane = h * w;
    let mut total = 0.0;
    let mut grad = vec![0.0; c * plane];
    for ch in 0..c {
        let x = &f.data()[ch * plane..(ch + 1) * plane];
        let y = &g.data()[ch * plane..(ch + 1) * plane];
        let m = moments(x, y, h, w, &win);
        let n = m.mx.len();
        let scale = 1.0 / (n as f64 * c as f64);
        let mut d_my = vec![0.0; n];
        let mut d_eyy = vec![0.0; n];
        let mut d_exy = vec![0.0; n];
        let mut s_sum = 0.0;
        for i in 0..n {
            let (s, a1, a2, b1, b2) = ssim_at(&m, i);
            s_sum += s;
            let (mx, my) = (m.mx[i], m.my[i]);
            let den = b1 * b2;
            // my enters a1, a2 (via sxy), b1 and b2 (via syy).
            let da1 = 2.0 * mx;
            let da2 = -2.0 * mx;
            let db1 = 2.0 * my;
            let db2 = -2.0 * my;
            d_my[i] = scale * ((da1 * a2 + a1 * da2) / den - s * (db1 * b2 + b1 * db2) / den);
            d_eyy[i] = scale * (-s / b2);
            d_exy[i] = scale * (2.0 * a1 / den);
        }
        total += s_sum / n as f64;
        let g_my = filter_valid_adjoint(&d_my, h, w, &win);
        let g_eyy = filter_valid_adjoint(&d_eyy, h, w, &win);
        let g_exy = filter_valid_adjoint(&d_exy, h, w, &win);
        let out = &mut grad[ch * plane..(ch + 1) * plane];
        for p in 0..plane {
            out[p] = g_my[p] + 2.0 * y[p] * g_eyy[p] + x[p] * g_exy[p];
        }
    }
    Ok((total / c as f64, Tensor::new(f.shape().to_vec(), grad)?))
}
