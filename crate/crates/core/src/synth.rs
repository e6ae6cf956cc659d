//! Synthetic paired video / fMRI data with a known linear response model.
//!
//! Each TR shows one random scene (bright and dark blobs over a drifting
//! low-contrast grating). Voxel activity is a linear mix of Gabor energies of
//! the target frame, convolved with an HRF, plus Gaussian noise.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Error, Result};
use crate::fmri::{
    average_subjects, compute_snr, write_subject_stack, zscore_voxels, SubjectStack, VoxelMask,
    DEFAULT_SNR_FRACTION,
};
use crate::io;
use crate::seed::{derive_seed, rng_for};
use crate::stimulus::{
    chunk_movie, extract_target, write_movie_dir, FrameStack, TargetFrame, VideoChunk,
    DEFAULT_TR_SECONDS, FRAMES_PER_TR,
};
use crate::tensor::Tensor;

/// Region names used for block labelling, in order.
pub const REGION_NAMES: [&str; 8] = [
    "Calc", "Fusi", "Ling", "Oc.I", "Oc.M", "Oc.S", "Temp", "Other",
];

pub const LABELS_FILE: &str = "labels.json";
pub const GROUND_TRUTH_FILE: &str = "ground_truth";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gabor {
    pub orientation: f64,
    pub frequency: f64,
    pub phase: f64,
    pub center_x: f64,
    pub center_y: f64,
    pub sigma: f64,
}

impl Gabor {
    /// Kernel sampled at pixel centers, row-major `[h, w]`.
    pub fn kernel(&self, h: usize, w: usize) -> Vec<f64> {
        let (s, c) = self.orientation.sin_cos();
        let two_s2 = 2.0 * self.sigma * self.sigma;
        let mut k = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let dx = x as f64 - self.center_x;
                let dy = y as f64 - self.center_y;
                let along = dx * c + dy * s;
                let env = (-(dx * dx + dy * dy) / two_s2).exp();
                k.push(env * (std::f64::consts::TAU * self.frequency * along + self.phase).cos());
            }
        }
        k
    }
}

/// `count` Gabors on a square grid of centers, four orientations cycled,
/// low spatial frequency and wide envelopes.
pub fn gabor_grid(count: usize, size: usize) -> Vec<Gabor> {
    let side = (count as f64).sqrt().ceil() as usize;
    let cell = size as f64 / side as f64;
    (0..count)
        .map(|i| {
            let (r, c) = (i / side, i % side);
            Gabor {
                orientation: (i % 4) as f64 * std::f64::consts::FRAC_PI_4,
                frequency: 1.0 / (2.0 * cell),
                phase: 0.0,
                center_x: (c as f64 + 0.5) * cell - 0.5,
                center_y: (r as f64 + 0.5) * cell - 0.5,
                sigma: 0.375 * cell,
            }
        })
        .collect()
}

fn grayscale(frame: &TargetFrame) -> Vec<f64> {
    let n = frame.height * frame.width;
    (0..n)
        .map(|i| {
            (frame.pixels[i] as f64 + frame.pixels[n + i] as f64 + frame.pixels[2 * n + i] as f64)
                / 3.0
        })
        .collect()
}

/// `|<gray(frame), gabor_f>|` for every filter of the bank.
pub fn gabor_features(frame: &TargetFrame, bank: &[Gabor]) -> Vec<f64> {
    let gray = grayscale(frame);
    bank.iter()
        .map(|g| {
            let k = g.kernel(frame.height, frame.width);
            k.iter().zip(&gray).map(|(a, b)| a * b).sum::<f64>().abs()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HrfSpec {
    DoubleGamma,
    Delay { trs: usize },
    Custom { kernel: Vec<f64> },
}

impl HrfSpec {
    pub fn kernel(&self, tr_seconds: f64) -> Result<Vec<f64>> {
        match self {
            HrfSpec::DoubleGamma => Ok(double_gamma_hrf(tr_seconds)),
            HrfSpec::Delay { trs } => Ok(delay_hrf(*trs)),
            HrfSpec::Custom { kernel } => {
                let s: f64 = kernel.iter().sum();
                if kernel.is_empty() || !s.is_finite() || s.abs() < 1e-12 {
                    return Err(arg_err(
                        "custom HRF must be nonempty with nonzero finite sum",
                    ));
                }
                Ok(kernel.iter().map(|k| k / s).collect())
            }
        }
    }
}

/// Canonical double-gamma HRF (peak near 5 s, undershoot near 15 s) sampled
/// every `tr_seconds` up to 20 s, scaled to unit sum.
pub fn double_gamma_hrf(tr_seconds: f64) -> Vec<f64> {
    use statrs::function::gamma::gamma;
    let n = (20.0 / tr_seconds + 1e-9).floor() as usize + 1;
    let pdf = |t: f64, a: f64| {
        if t <= 0.0 {
            0.0
        } else {
            t.powf(a - 1.0) * (-t).exp() / gamma(a)
        }
    };
    let raw: Vec<f64> = (0..n)
        .map(|k| {
            let t = k as f64 * tr_seconds;
            pdf(t, 6.0) - pdf(t, 16.0) / 6.0
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / s).collect()
}

/// Pure delay: all mass at lag `trs`.
pub fn delay_hrf(trs: usize) -> Vec<f64> {
    let mut k = vec![0.0; trs + 1];
    k[trs] = 1.0;
    k
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthGroundTruth {
    pub gabor_bank: Vec<Gabor>,
    /// `[V, F]`
    pub weights: Tensor,
    pub hrf_kernel: Vec<f64>,
    pub noise_sigma: f64,
    pub region_of_voxel: Vec<String>,
}

impl SynthGroundTruth {
    pub fn voxels(&self) -> usize {
        self.weights.dim(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.ndim() != 2 || self.weights.dim(1) != self.gabor_bank.len() {
            return Err(shape_err(format!(
                "weights {:?} do not match {} features",
                self.weights.shape(),
                self.gabor_bank.len()
            )));
        }
        if !self.weights.all_finite() {
            return Err(Error::Numerical("non-finite ground-truth weights".into()));
        }
        if (self.hrf_kernel.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(arg_err("HRF kernel must sum to 1"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(arg_err("noise sigma must be >= 0"));
        }
        if self.region_of_voxel.len() != self.voxels() {
            return Err(shape_err("one region label per voxel required"));
        }
        Ok(())
    }
}

/// Features of every chunk's target frame, `[T, F]`.
pub fn feature_matrix(chunks: &[VideoChunk], bank: &[Gabor]) -> Result<Tensor> {
    if chunks.is_empty() {
        return Err(arg_err("no chunks"));
    }
    let rows: Vec<Vec<f64>> = chunks
        .par_iter()
        .map(|c| gabor_features(&extract_target(c), bank))
        .collect();
    Tensor::stack_rows(&[bank.len()], rows.iter().map(|r| r.as_slice()))
}

/// Noise-free voxel drive before normalization: features mapped by the
/// weights and convolved causally with the HRF, `[T, V]`.
pub fn clean_drive(chunks: &[VideoChunk], gt: &SynthGroundTruth) -> Result<Tensor> {
    gt.validate()?;
    let x = feature_matrix(chunks, &gt.gabor_bank)?;
    let (t, f, v) = (x.dim(0), x.dim(1), gt.voxels());
    let w = gt.weights.data();
    let mut lin = vec![0.0; t * v];
    for ti in 0..t {
        let xr = x.row(ti);
        for j in 0..v {
            lin[ti * v + j] = (0..f).map(|k| w[j * f + k] * xr[k]).sum();
        }
    }
    let mut out = vec![0.0; t * v];
    for ti in 0..t {
        for (lag, h) in gt.hrf_kernel.iter().enumerate() {
            if lag > ti || *h == 0.0 {
                continue;
            }
            let src = (ti - lag) * v;
            for j in 0..v {
                out[ti * v + j] += h * lin[src + j];
            }
        }
    }
    Tensor::new(vec![t, v], out)
}

/// Z-scored drive plus `noise_sigma` Gaussian noise, z-scored again. The
/// noise level is therefore relative to a unit-variance signal.
pub fn synth_bold(chunks: &[VideoChunk], gt: &SynthGroundTruth, seed: u64) -> Result<Tensor> {
    let clean = clean_drive(chunks, gt)?;
    add_noise_and_normalize(&clean, gt.noise_sigma, seed)
}

fn add_noise_and_normalize(clean: &Tensor, sigma: f64, seed: u64) -> Result<Tensor> {
    let mut z = zscore_voxels(clean)?;
    if sigma > 0.0 {
        let mut rng = rng_for(seed, "synth/bold-noise");
        for x in z.data_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *x += sigma * e;
        }
    }
    zscore_voxels(&z)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_movies: usize,
    pub chunks_per_movie: usize,
    pub voxels: usize,
    pub features: usize,
    pub size: usize,
    pub seed: u64,
    pub noise_sigma: f64,
    pub hrf: HrfSpec,
    pub subjects: usize,
    pub regions: usize,
    /// Leading fraction of voxels with nonzero weights; the rest are pure noise.
    pub informative_fraction: f64,
    pub tr_seconds: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_movies: 2,
            chunks_per_movie: 50,
            voxels: 128,
            features: 16,
            size: 32,
            seed: 7,
            noise_sigma: 0.5,
            hrf: HrfSpec::DoubleGamma,
            subjects: 4,
            regions: 4,
            informative_fraction: 1.0,
            tr_seconds: DEFAULT_TR_SECONDS,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (n, v) in [
            ("n_movies", self.n_movies),
            ("chunks_per_movie", self.chunks_per_movie),
            ("voxels", self.voxels),
            ("features", self.features),
            ("size", self.size),
            ("subjects", self.subjects),
            ("regions", self.regions),
        ] {
            if v == 0 {
                return Err(arg_err(format!("{n} must be positive")));
            }
        }
        if self.chunks_per_movie < 2 {
            return Err(arg_err("chunks_per_movie must be at least 2"));
        }
        if self.regions > REGION_NAMES.len() {
            return Err(arg_err(format!("at most {} regions", REGION_NAMES.len())));
        }
        if !(self.informative_fraction > 0.0 && self.informative_fraction <= 1.0) {
            return Err(arg_err("informative_fraction must be in (0, 1]"));
        }
        if !(self.noise_sigma >= 0.0) || !(self.tr_seconds > 0.0) {
            return Err(arg_err("noise_sigma must be >= 0 and tr_seconds > 0"));
        }
        Ok(())
    }

    pub fn informative_voxels(&self) -> usize {
        ((self.informative_fraction * self.voxels as f64).round() as usize).clamp(1, self.voxels)
    }
}

/// Contiguous block labels: voxel `v` gets region `floor(v * R / V)`.
pub fn block_regions(voxels: usize, regions: usize) -> Vec<String> {
    (0..voxels)
        .map(|v| REGION_NAMES[v * regions / voxels].to_string())
        .collect()
}

pub fn make_ground_truth(cfg: &SynthConfig) -> Result<SynthGroundTruth> {
    cfg.validate()?;
    let mut rng = rng_for(cfg.seed, "synth/weights");
    let live = cfg.informative_voxels();
    let weights = Tensor::from_fn(&[cfg.voxels, cfg.features], |i| {
        let e: f64 = StandardNormal.sample(&mut rng);
        if i / cfg.features < live {
            e
        } else {
            0.0
        }
    });
    let gt = SynthGroundTruth {
        gabor_bank: gabor_grid(cfg.features, cfg.size),
        weights,
        hrf_kernel: cfg.hrf.kernel(cfg.tr_seconds)?,
        noise_sigma: cfg.noise_sigma,
        region_of_voxel: block_regions(cfg.voxels, cfg.regions),
    };
    gt.validate()?;
    Ok(gt)
}

fn quantize(x: f64) -> f32 {
    ((x.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}

/// Random movie of `n_trs` scenes, `32` frames each.
pub fn render_movie(n_trs: usize, size: usize, seed: u64) -> Result<FrameStack> {
    let plane = size * size;
    let frame_len = 3 * plane;
    let mut data = vec![0f32; n_trs * FRAMES_PER_TR * frame_len];
    let cell = size as f64 / 4.0;
    data.par_chunks_mut(FRAMES_PER_TR * frame_len)
        .enumerate()
        .for_each(|(tr, chunk)| {
            let mut rng = rng_for(seed, &format!("scene/{tr}"));
            let base: f64 = rng.random_range(0.35..0.65);
            let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let freq: f64 = rng.random_range(0.04..0.12);
            let contrast: f64 = rng.random_range(0.0..0.08);
            let phase0: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let drift: f64 = rng.random_range(-0.1..0.1);
            let n_blobs = rng.random_range(2..=5);
            let blobs: Vec<(f64, f64, f64, f64, [f64; 3])> = (0..n_blobs)
                .map(|_| {
                    let cx = (rng.random_range(0..4) as f64 + 0.5) * cell - 0.5
                        + rng.random_range(-1.0..1.0);
                    let cy = (rng.random_range(0..4) as f64 + 0.5) * cell - 0.5
                        + rng.random_range(-1.0..1.0);
                    let sigma = rng.random_range(0.25..0.45) * cell;
                    let amp = if rng.random_bool(0.75) { 1.0 } else { -1.0 }
                        * rng.random_range(0.15..0.35);
                    let tint = [
                        rng.random_range(0.7..1.0),
                        rng.random_range(0.7..1.0),
                        rng.random_range(0.7..1.0),
                    ];
                    (cx, cy, sigma, amp, tint)
                })
                .collect();
            let (st, ct) = theta.sin_cos();
            for k in 0..FRAMES_PER_TR {
                let phase = phase0 + drift * k as f64;
                let frame = &mut chunk[k * frame_len..(k + 1) * frame_len];
                for y in 0..size {
                    for x in 0..size {
                        let (xf, yf) = (x as f64, y as f64);
                        let g = contrast
                            * (std::f64::consts::TAU * freq * (xf * ct + yf * st) + phase).cos();
                        let mut px = [base + g; 3];
                        for &(cx, cy, s, a, tint) in &blobs {
                            let d2 = (xf - cx).powi(2) + (yf - cy).powi(2);
                            let e = a * (-d2 / (2.0 * s * s)).exp();
                            for c in 0..3 {
                                px[c] += e * tint[c];
                            }
                        }
                        for c in 0..3 {
                            frame[c * plane + y * size + x] = quantize(px[c]);
                        }
                    }
                }
            }
        });
    FrameStack::new(n_trs * FRAMES_PER_TR, size, size, data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthMovie {
    pub movie_id: String,
    pub chunks: Vec<VideoChunk>,
    /// Per-subject recordings with voxel baselines, `[S, T, V]`.
    pub raw: SubjectStack,
    /// Z-scored subject average, `[T, V]`.
    pub bold: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub movies: Vec<SynthMovie>,
    pub ground_truth: SynthGroundTruth,
    /// SNR top-fraction mask over the raw stacks of all movies.
    pub mask: VoxelMask,
}

pub fn movie_id(i: usize) -> String {
    format!("synth{i:02}")
}

pub fn make_synth_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    let gt = make_ground_truth(cfg)?;
    let mut base_rng = rng_for(cfg.seed, "synth/baselines");
    // Per-(subject, voxel) baseline offsets shared across movies.
    let baselines: Vec<f64> = (0..cfg.subjects * cfg.voxels)
        .map(|_| {
            let e: f64 = StandardNormal.sample(&mut base_rng);
            100.0 + e
        })
        .collect();
    let movies: Vec<SynthMovie> = (0..cfg.n_movies)
        .into_par_iter()
        .map(|m| -> Result<SynthMovie> {
            let id = movie_id(m);
            let frames = render_movie(
                cfg.chunks_per_movie,
                cfg.size,
                derive_seed(cfg.seed, &format!("movie/{id}")),
            )?;
            let chunks = chunk_movie(&frames, &id)?;
            let clean = clean_drive(&chunks, &gt)?;
            let (t, v) = (clean.dim(0), clean.dim(1));
            let mut raw = Vec::with_capacity(cfg.subjects * t * v);
            for s in 0..cfg.subjects {
                let seed = derive_seed(cfg.seed, &format!("noise/{id}/subject{s}"));
                let b = add_noise_and_normalize(&clean, cfg.noise_sigma, seed)?;
                for ti in 0..t {
                    for j in 0..v {
                        raw.push(baselines[s * v + j] + b.data()[ti * v + j]);
                    }
                }
            }
            let raw =
                SubjectStack::new(Tensor::new(vec![cfg.subjects, t, v], raw)?, cfg.tr_seconds)?;
            let bold = zscore_voxels(&average_subjects(&raw))?;
            Ok(SynthMovie {
                movie_id: id,
                chunks,
                raw,
                bold,
            })
        })
        .collect::<Result<_>>()?;
    let mask = if cfg.subjects >= 2 {
        let refs: Vec<&SubjectStack> = movies.iter().map(|m| &m.raw).collect();
        let snr = compute_snr(&SubjectStack::concat_time(&refs)?)?;
        VoxelMask::from_snr(gt.region_of_voxel.clone(), snr, DEFAULT_SNR_FRACTION)?
    } else {
        VoxelMask::all(gt.region_of_voxel.clone())
    };
    Ok(SynthDataset {
        config: cfg.clone(),
        movies,
        ground_truth: gt,
        mask,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionLabels {
    pub region_labels: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GroundTruthHeader {
    gabor_bank: Vec<Gabor>,
    weights_shape: [usize; 2],
    hrf_kernel: Vec<f64>,
    noise_sigma: f64,
    region_of_voxel: Vec<String>,
}

pub fn write_ground_truth(dir: &Path, gt: &SynthGroundTruth) -> Result<()> {
    let (bin, json) = io::pair_paths(dir, GROUND_TRUTH_FILE);
    io::write_f32_le(&bin, gt.weights.data().iter().copied())?;
    io::write_json(
        &json,
        &GroundTruthHeader {
            gabor_bank: gt.gabor_bank.clone(),
            weights_shape: [gt.weights.dim(0), gt.weights.dim(1)],
            hrf_kernel: gt.hrf_kernel.clone(),
            noise_sigma: gt.noise_sigma,
            region_of_voxel: gt.region_of_voxel.clone(),
        },
    )
}

/// Weights come back at f32 precision.
pub fn read_ground_truth(dir: &Path) -> Result<SynthGroundTruth> {
    let (bin, json) = io::pair_paths(dir, GROUND_TRUTH_FILE);
    let h: GroundTruthHeader = io::read_json(&json)?;
    let [v, f] = h.weights_shape;
    let w = io::read_f32_le(&bin, v * f)?;
    let gt = SynthGroundTruth {
        gabor_bank: h.gabor_bank,
        weights: Tensor::new(vec![v, f], w.into_iter().map(f64::from).collect())?,
        hrf_kernel: h.hrf_kernel,
        noise_sigma: h.noise_sigma,
        region_of_voxel: h.region_of_voxel,
    };
    Ok(gt)
}

/// Raw layout: `movies/<id>/`, `fmri/<id>.{bin,json}`, `labels.json`,
/// `ground_truth.{bin,json}`, `synth_config.json`.
pub fn write_synth_dataset(dir: &Path, ds: &SynthDataset) -> Result<()> {
    let fps = FRAMES_PER_TR as f64 / ds.config.tr_seconds;
    ds.movies.par_iter().try_for_each(|m| -> Result<()> {
        let n = m.chunks.len() * FRAMES_PER_TR;
        let size = ds.config.size;
        let data: Vec<f32> = m
            .chunks
            .iter()
            .flat_map(|c| c.frames.iter().copied())
            .collect();
        let frames = FrameStack::new(n, size, size, data)?;
        write_movie_dir(
            &dir.join("movies").join(&m.movie_id),
            &m.movie_id,
            fps,
            &frames,
        )?;
        write_subject_stack(&dir.join("fmri"), &m.movie_id, &m.raw)
    })?;
    io::write_json(
        &dir.join(LABELS_FILE),
        &RegionLabels {
            region_labels: ds.ground_truth.region_of_voxel.clone(),
        },
    )?;
    write_ground_truth(dir, &ds.ground_truth)?;
    io::write_json(&dir.join("synth_config.json"), &ds.config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame_from_gray(gray: &[f64], size: usize) -> TargetFrame {
        let mut pixels = Vec::with_capacity(3 * size * size);
        for _ in 0..3 {
            pixels.extend(gray.iter().map(|&g| g as f32));
        }
        TargetFrame {
            height: size,
            width: size,
            pixels,
        }
    }

    fn chunk_with_target(gray: &[f64], size: usize, idx: usize) -> VideoChunk {
        let f = frame_from_gray(gray, size).pixels;
        let mut frames = Vec::new();
        for _ in 0..FRAMES_PER_TR {
            frames.extend_from_slice(&f);
        }
        VideoChunk {
            movie_id: "m".into(),
            chunk_index: idx,
            height: size,
            width: size,
            frames,
            target_frame_index: 16,
        }
    }

    #[test]
    fn zero_frame_gives_zero_features() {
        let bank = gabor_grid(16, 32);
        let f = frame_from_gray(&vec![0.0; 1024], 32);
        assert!(gabor_features(&f, &bank).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn kernel_positive_part_prefers_its_own_orientation() {
        let g = gabor_grid(16, 32)[5];
        let pos: Vec<f64> = g.kernel(32, 32).iter().map(|&k| k.max(0.0)).collect();
        let frame = frame_from_gray(&pos, 32);
        let own = gabor_features(&frame, &[g])[0];
        for r in 1..8 {
            let mut rot = g;
            rot.orientation += r as f64 * std::f64::consts::PI / 8.0;
            let other = gabor_features(&frame, &[rot])[0];
            assert!(own > other, "rotation {r}: {own} vs {other}");
        }
    }

    #[test]
    fn matched_grating_beats_orthogonal() {
        let bank = gabor_grid(16, 32);
        for (i, g) in bank.iter().enumerate() {
            // Grating through the filter center with the filter's frequency.
            let grating = |theta: f64| -> Vec<f64> {
                let (s, c) = theta.sin_cos();
                (0..1024)
                    .map(|p| {
                        let (x, y) = ((p % 32) as f64 - g.center_x, (p / 32) as f64 - g.center_y);
                        0.5 + 0.5 * (std::f64::consts::TAU * g.frequency * (x * c + y * s)).cos()
                    })
                    .collect()
            };
            let m = gabor_features(&frame_from_gray(&grating(g.orientation), 32), &bank)[i];
            let o = gabor_features(
                &frame_from_gray(&grating(g.orientation + std::f64::consts::FRAC_PI_2), 32),
                &bank,
            )[i];
            assert!(m > o, "filter {i}: {m} vs {o}");
        }
    }

    #[test]
    fn hrf_kernels_sum_to_one() {
        let dg = double_gamma_hrf(1.3);
        assert_eq!(dg.len(), 16);
        assert!((dg.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let peak = dg
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert!((3..=5).contains(&peak), "peak at TR {peak}");
        assert_eq!(delay_hrf(4), vec![0.0, 0.0, 0.0, 0.0, 1.0]);
        let c = HrfSpec::Custom {
            kernel: vec![1.0, 3.0],
        }
        .kernel(1.3)
        .unwrap();
        assert_eq!(c, vec![0.25, 0.75]);
    }

    fn identity_gt(bank: Vec<Gabor>, hrf: Vec<f64>, sigma: f64) -> SynthGroundTruth {
        let f = bank.len();
        SynthGroundTruth {
            weights: Tensor::from_fn(&[f, f], |i| if i / f == i % f { 1.0 } else { 0.0 }),
            gabor_bank: bank,
            hrf_kernel: hrf,
            noise_sigma: sigma,
            region_of_voxel: block_regions(f, 1),
        }
    }

    fn movie_chunks(n: usize, seed: u64) -> Vec<VideoChunk> {
        chunk_movie(&render_movie(n, 16, seed).unwrap(), "m").unwrap()
    }

    #[test]
    fn delta_hrf_without_noise_is_zscored_features() {
        let bank = gabor_grid(4, 16);
        let chunks = movie_chunks(20, 3);
        let gt = identity_gt(bank.clone(), vec![1.0], 0.0);
        let bold = synth_bold(&chunks, &gt, 0).unwrap();
        let want = zscore_voxels(&feature_matrix(&chunks, &bank).unwrap()).unwrap();
        for (a, b) in bold.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn two_tap_hrf_mixes_adjacent_trs() {
        let bank = gabor_grid(4, 16);
        let chunks = movie_chunks(12, 4);
        let gt = identity_gt(bank.clone(), vec![0.5, 0.5], 0.0);
        let drive = clean_drive(&chunks, &gt).unwrap();
        let x = feature_matrix(&chunks, &bank).unwrap();
        for t in 1..12 {
            for j in 0..4 {
                let want = 0.5 * x.row(t)[j] + 0.5 * x.row(t - 1)[j];
                assert!((drive.row(t)[j] - want).abs() < 1e-12);
            }
        }
        // Changing chunk 5 only moves rows 5 and 6.
        let mut alt = chunks.clone();
        alt[5] = chunk_with_target(&vec![0.9; 256], 16, 5);
        let d2 = clean_drive(&alt, &gt).unwrap();
        for t in 0..12 {
            let same = drive.row(t) == d2.row(t);
            assert_eq!(same, t != 5 && t != 6, "row {t}");
        }
    }

    #[test]
    fn bold_is_seed_deterministic_and_normalized() {
        let bank = gabor_grid(4, 16);
        let chunks = movie_chunks(30, 5);
        let gt = identity_gt(bank, delay_hrf(2), 0.7);
        let a = synth_bold(&chunks, &gt, 11).unwrap();
        let b = synth_bold(&chunks, &gt, 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_bold(&chunks, &gt, 12).unwrap());
        for j in 0..4 {
            let col = a.col(j);
            let m = col.iter().sum::<f64>() / 30.0;
            let var = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 29.0;
            assert!(m.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dataset_shapes_and_determinism() {
        let cfg = SynthConfig {
            n_movies: 2,
            chunks_per_movie: 50,
            voxels: 128,
            features: 16,
            size: 32,
            seed: 7,
            ..Default::default()
        };
        let a = make_synth_dataset(&cfg).unwrap();
        assert_eq!(a.movies.len(), 2);
        for m in &a.movies {
            assert_eq!(m.chunks.len(), 50);
            assert_eq!(m.chunks[0].frames.len(), 32 * 3 * 32 * 32);
            assert_eq!(m.bold.shape(), &[50, 128]);
            assert_eq!(m.raw.data.shape(), &[4, 50, 128]);
        }
        let counts: Vec<usize> = REGION_NAMES[..4]
            .iter()
            .map(|r| {
                a.ground_truth
                    .region_of_voxel
                    .iter()
                    .filter(|l| l == r)
                    .count()
            })
            .collect();
        assert_eq!(counts, vec![32; 4]);
        assert_eq!(a.mask.selected.iter().filter(|&&s| s).count(), 38);
        let b = make_synth_dataset(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noise_free_identity_model_is_perfectly_predictable() {
        // With zero noise and a delta HRF each voxel is an affine function of
        // the features, so the linear oracle correlates perfectly.
        let cfg = SynthConfig {
            chunks_per_movie: 40,
            voxels: 16,
            features: 16,
            noise_sigma: 0.0,
            hrf: HrfSpec::Delay { trs: 0 },
            subjects: 1,
            regions: 1,
            ..Default::default()
        };
        let ds = make_synth_dataset(&cfg).unwrap();
        let m = &ds.movies[0];
        let x = feature_matrix(&m.chunks, &ds.ground_truth.gabor_bank).unwrap();
        let w = &ds.ground_truth.weights;
        let pred = Tensor::from_fn(&[40, 16], |i| {
            let (t, j) = (i / 16, i % 16);
            (0..16).map(|k| w.data()[j * 16 + k] * x.row(t)[k]).sum()
        });
        let pz = zscore_voxels(&pred).unwrap();
        for j in 0..16 {
            let r: f64 = pz
                .col(j)
                .iter()
                .zip(m.bold.col(j))
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / 39.0;
            assert!((r - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn uninformative_voxels_have_zero_weight() {
        let cfg = SynthConfig {
            informative_fraction: 0.5,
            ..Default::default()
        };
        let gt = make_ground_truth(&cfg).unwrap();
        for v in 0..128 {
            let nz = gt.weights.row(v).iter().any(|&w| w != 0.0);
            assert_eq!(nz, v < 64);
        }
    }

    #[test]
    fn ground_truth_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let gt = make_ground_truth(&SynthConfig::default()).unwrap();
        write_ground_truth(dir.path(), &gt).unwrap();
        let back = read_ground_truth(dir.path()).unwrap();
        assert_eq!(back.gabor_bank, gt.gabor_bank);
        assert_eq!(back.region_of_voxel, gt.region_of_voxel);
        for (a, b) in back.weights.data().iter().zip(gt.weights.data()) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }
}
