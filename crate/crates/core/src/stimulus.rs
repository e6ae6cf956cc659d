//! Movie frames → TR-aligned 32-frame chunks and middle-frame targets.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Error, Result};
use crate::io;
use crate::tensor::Tensor;

pub const FRAMES_PER_TR: usize = 32;
pub const DEFAULT_TARGET_INDEX: usize = 16;
pub const DEFAULT_TR_SECONDS: f64 = 1.3;

/// A stack of RGB frames `[n, 3, height, width]`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameStack {
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FrameStack {
    pub fn new(n: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n * 3 * height * width {
            return Err(shape_err(format!(
                "frame stack [{n},3,{height},{width}] given {} values",
                data.len()
            )));
        }
        Ok(Self {
            n,
            height,
            width,
            data,
        })
    }

    pub fn frame_len(&self) -> usize {
        3 * self.height * self.width
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        let l = self.frame_len();
        &self.data[i * l..(i + 1) * l]
    }
}

/// One TR worth of stimulus: `[32, 3, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoChunk {
    pub movie_id: String,
    pub chunk_index: usize,
    pub height: usize,
    pub width: usize,
    pub frames: Vec<f32>,
    pub target_frame_index: usize,
}

impl VideoChunk {
    pub fn frame_len(&self) -> usize {
        3 * self.height * self.width
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        let l = self.frame_len();
        &self.frames[i * l..(i + 1) * l]
    }
}

/// Decoder target `[3, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetFrame {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl TargetFrame {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![3, self.height, self.width],
            self.pixels.iter().map(|&p| p as f64).collect(),
        )
        .expect("target frame shape is consistent")
    }
}

/// Temporal nearest-neighbour resampling to 32 frames per TR followed by a
/// center crop to square and bilinear scaling to `out_size × out_size`.
/// A trailing partial TR is dropped.
pub fn resample_movie(
    frames: &FrameStack,
    fps_raw: f64,
    tr_seconds: f64,
    out_size: usize,
) -> Result<FrameStack> {
    if frames.n == 0 || frames.height == 0 || frames.width == 0 {
        return Err(arg_err("empty movie"));
    }
    if !(fps_raw > 0.0) || !(tr_seconds > 0.0) {
        return Err(arg_err("frame rate and TR must be positive"));
    }
    if out_size == 0 {
        return Err(arg_err("output size must be positive"));
    }
    let src_per_tr = fps_raw * tr_seconds;
    let n_trs = (frames.n as f64 / src_per_tr + 1e-9).floor() as usize;
    let total = n_trs * FRAMES_PER_TR;
    let out_len = 3 * out_size * out_size;
    let mut data = Vec::with_capacity(total * out_len);
    for k in 0..total {
        let src = temporal_source_index(k, fps_raw, tr_seconds).min(frames.n - 1);
        data.extend(resize_center_crop(
            frames.frame(src),
            frames.height,
            frames.width,
            out_size,
        ));
    }
    FrameStack::new(total, out_size, out_size, data)
}

/// Source frame for output frame `k` at 32 frames per TR.
pub fn temporal_source_index(k: usize, fps_raw: f64, tr_seconds: f64) -> usize {
    let t = k as f64 * tr_seconds / FRAMES_PER_TR as f64;
    (t * fps_raw).round() as usize
}

fn resize_center_crop(frame: &[f32], h: usize, w: usize, out: usize) -> Vec<f32> {
    let side = h.min(w);
    let y0 = (h - side) / 2;
    let x0 = (w - side) / 2;
    let scale = side as f64 / out as f64;
    let mut res = Vec::with_capacity(3 * out * out);
    let coord = |o: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (side - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(side - 1);
        (i0, i1, s - i0 as f64)
    };
    let ys: Vec<_> = (0..out).map(coord).collect();
    let xs: Vec<_> = (0..out).map(coord).collect();
    for c in 0..3 {
        let plane = &frame[c * h * w..(c + 1) * h * w];
        let at = |y: usize, x: usize| plane[(y0 + y) * w + x0 + x] as f64;
        for &(ya, yb, fy) in &ys {
            for &(xa, xb, fx) in &xs {
                let top = at(ya, xa) * (1.0 - fx) + at(ya, xb) * fx;
                let bot = at(yb, xa) * (1.0 - fx) + at(yb, xb) * fx;
                let v = top * (1.0 - fy) + bot * fy;
                res.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    res
}

pub fn chunk_movie(frames: &FrameStack, movie_id: &str) -> Result<Vec<VideoChunk>> {
    chunk_movie_with_target(frames, movie_id, DEFAULT_TARGET_INDEX)
}

pub fn chunk_movie_with_target(
    frames: &FrameStack,
    movie_id: &str,
    target_frame_index: usize,
) -> Result<Vec<VideoChunk>> {
    if frames.n % FRAMES_PER_TR != 0 {
        return Err(shape_err(format!(
            "{} frames is not a multiple of {FRAMES_PER_TR}",
            frames.n
        )));
    }
    if target_frame_index >= FRAMES_PER_TR {
        return Err(arg_err(format!(
            "target frame index {target_frame_index} outside 0..{FRAMES_PER_TR}"
        )));
    }
    let chunk_len = FRAMES_PER_TR * frames.frame_len();
    Ok(frames
        .data
        .chunks_exact(chunk_len)
        .enumerate()
        .map(|(i, c)| VideoChunk {
            movie_id: movie_id.to_string(),
            chunk_index: i,
            height: frames.height,
            width: frames.width,
            frames: c.to_vec(),
            target_frame_index,
        })
        .collect())
}

pub fn extract_target(chunk: &VideoChunk) -> TargetFrame {
    TargetFrame {
        height: chunk.height,
        width: chunk.width,
        pixels: chunk.frame(chunk.target_frame_index).to_vec(),
    }
}

/// JSON sidecar of a raw movie directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MovieSidecar {
    pub movie_id: String,
    pub fps: f64,
    pub width: usize,
    pub height: usize,
    pub frame_count: usize,
}

/// Header of a chunked stimulus payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChunkHeader {
    pub movie_id: String,
    pub n_chunks: usize,
    pub shape: [usize; 4],
    #[serde(default = "default_target")]
    pub target_frame_index: usize,
}

fn default_target() -> usize {
    DEFAULT_TARGET_INDEX
}

pub const SIDECAR_NAME: &str = "movie.json";
pub const FRAMES_DIR: &str = "frames";

/// Write frames as numbered 8-bit PNGs plus the sidecar.
pub fn write_movie_dir(dir: &Path, movie_id: &str, fps: f64, frames: &FrameStack) -> Result<()> {
    let fdir = dir.join(FRAMES_DIR);
    fs::create_dir_all(&fdir).map_err(|e| Error::io(&fdir, e))?;
    let (h, w) = (frames.height, frames.width);
    for i in 0..frames.n {
        let f = frames.frame(i);
        let mut buf = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let v = f[c * h * w + y * w + x];
                    buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        let img = image::RgbImage::from_raw(w as u32, h as u32, buf)
            .ok_or_else(|| shape_err("frame buffer size"))?;
        img.save(fdir.join(format!("{i:06}.png")))?;
    }
    io::write_json(
        &dir.join(SIDECAR_NAME),
        &MovieSidecar {
            movie_id: movie_id.to_string(),
            fps,
            width: w,
            height: h,
            frame_count: frames.n,
        },
    )
}

/// Read a raw movie directory; frames are ordered lexicographically by file name.
pub fn read_movie_dir(dir: &Path) -> Result<(MovieSidecar, FrameStack)> {
    let side: MovieSidecar = io::read_json(&dir.join(SIDECAR_NAME))?;
    let fdir = dir.join(FRAMES_DIR);
    let mut names: Vec<_> = fs::read_dir(&fdir)
        .map_err(|e| Error::io(&fdir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    names.sort();
    if names.len() != side.frame_count {
        return Err(Error::Format(format!(
            "{}: sidecar lists {} frames, found {}",
            dir.display(),
            side.frame_count,
            names.len()
        )));
    }
    let (h, w) = (side.height, side.width);
    let mut data = vec![0f32; names.len() * 3 * h * w];
    for (i, p) in names.iter().enumerate() {
        let img = image::open(p)?.to_rgb8();
        if img.width() as usize != w || img.height() as usize != h {
            return Err(Error::Format(format!(
                "{}: {}x{} frame, sidecar says {w}x{h}",
                p.display(),
                img.width(),
                img.height()
            )));
        }
        let base = i * 3 * h * w;
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[base + c * h * w + y as usize * w + x as usize] = px[c] as f32 / 255.0;
            }
        }
    }
    Ok((side, FrameStack::new(names.len(), h, w, data)?))
}

pub fn write_chunks(dir: &Path, movie_id: &str, chunks: &[VideoChunk]) -> Result<()> {
    let first = chunks
        .first()
        .ok_or_else(|| arg_err("no chunks to write"))?;
    let header = ChunkHeader {
        movie_id: movie_id.to_string(),
        n_chunks: chunks.len(),
        shape: [FRAMES_PER_TR, 3, first.height, first.width],
        target_frame_index: first.target_frame_index,
    };
    let (bin, json) = io::pair_paths(dir, movie_id);
    let mut all = Vec::with_capacity(chunks.len() * first.frames.len());
    for c in chunks {
        all.extend_from_slice(&c.frames);
    }
    io::write_f32_slice(&bin, &all)?;
    io::write_json(&json, &header)
}

pub fn read_chunks(dir: &Path, movie_id: &str) -> Result<Vec<VideoChunk>> {
    let (bin, json) = io::pair_paths(dir, movie_id);
    let header: ChunkHeader = io::read_json(&json)?;
    if header.shape[0] != FRAMES_PER_TR || header.shape[1] != 3 {
        return Err(Error::Format(format!("bad chunk shape {:?}", header.shape)));
    }
    let per = header.shape.iter().product::<usize>();
    let data = io::read_f32_le(&bin, per * header.n_chunks)?;
    Ok(data
        .chunks_exact(per)
        .enumerate()
        .map(|(i, c)| VideoChunk {
            movie_id: header.movie_id.clone(),
            chunk_index: i,
            height: header.shape[2],
            width: header.shape[3],
            frames: c.to_vec(),
            target_frame_index: header.target_frame_index,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_movie(n: usize, h: usize, w: usize) -> FrameStack {
        let len = 3 * h * w;
        let data = (0..n * len)
            .map(|i| ((i / len) % 256) as f32 / 255.0)
            .collect();
        FrameStack::new(n, h, w, data).unwrap()
    }

    #[test]
    fn native_rate_is_identity() {
        let m = ramp_movie(64, 8, 8);
        let out = resample_movie(&m, 32.0 / 1.3, 1.3, 8).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn thirty_fps_matches_brute_force_mapping() {
        // Oracle: output frame k sits at time k * 1.3 / 32 s; pick the source
        // frame whose timestamp i / 30 is closest, later frame on exact ties.
        let m = ramp_movie(120, 4, 4);
        let out = resample_movie(&m, 30.0, 1.3, 4).unwrap();
        assert_eq!(out.n, 96);
        for k in 0..out.n {
            let t = k as f64 * 1.3 / 32.0;
            let dist = |a: usize| ((a as f64 / 30.0 - t).abs() * 1e9).round() as i64;
            let best = (0..m.n)
                .min_by_key(|&a| (dist(a), std::cmp::Reverse(a)))
                .unwrap();
            assert_eq!(out.frame(k), m.frame(best), "frame {k}");
        }
        // 39 source frames per TR feed 32 output frames.
        let used: std::collections::BTreeSet<_> = (0..32)
            .map(|k| temporal_source_index(k, 30.0, 1.3))
            .collect();
        assert!(used.iter().all(|&i| i < 39));
        assert_eq!(used.len(), 32);
    }

    #[test]
    fn trailing_partial_tr_dropped() {
        let m = ramp_movie(33, 4, 4);
        let out = resample_movie(&m, 32.0 / 1.3, 1.3, 4).unwrap();
        assert_eq!(out.n, 32);
        assert_eq!(chunk_movie(&out, "m").unwrap().len(), 1);
    }

    #[test]
    fn rejects_bad_rates() {
        let m = ramp_movie(32, 4, 4);
        assert!(resample_movie(&m, 0.0, 1.3, 4).is_err());
        assert!(resample_movie(&m, 30.0, -1.0, 4).is_err());
        let empty = FrameStack::new(0, 4, 4, vec![]).unwrap();
        assert!(resample_movie(&empty, 30.0, 1.3, 4).is_err());
    }

    #[test]
    fn center_crop_keeps_middle() {
        // 4x8 frame whose outer columns are 1 and inner 4 columns are 0.
        let (h, w) = (4, 8);
        let mut data = vec![1.0f32; 3 * h * w];
        for c in 0..3 {
            for y in 0..h {
                for x in 2..6 {
                    data[c * h * w + y * w + x] = 0.0;
                }
            }
        }
        let m = FrameStack::new(1, h, w, data).unwrap();
        let r = resize_center_crop(m.frame(0), h, w, 4);
        assert!(r.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn chunking_counts_and_target() {
        let m = ramp_movie(96, 4, 4);
        let chunks = chunk_movie(&m, "movie").unwrap();
        assert_eq!(chunks.len(), 3);
        assert_eq!(
            chunks.iter().map(|c| c.chunk_index).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
        for c in &chunks {
            assert_eq!(c.frame(16), extract_target(c).pixels.as_slice());
        }
        let first = chunk_movie_with_target(&m, "movie", 0).unwrap();
        assert_eq!(extract_target(&first[1]).pixels, first[1].frame(0));
        assert!(chunk_movie(&ramp_movie(33, 2, 2), "x").is_err());
    }

    #[test]
    fn shortest_run_gives_309_chunks() {
        let m = FrameStack::new(309 * 32, 1, 1, vec![0.5; 309 * 32 * 3]).unwrap();
        assert_eq!(chunk_movie(&m, "short").unwrap().len(), 309);
    }

    #[test]
    fn constant_target() {
        let mut data = vec![0.0f32; 32 * 3 * 2 * 2];
        for v in &mut data[16 * 12..17 * 12] {
            *v = 0.5;
        }
        let m = FrameStack::new(32, 2, 2, data).unwrap();
        let c = &chunk_movie(&m, "m").unwrap()[0];
        assert!(extract_target(c).pixels.iter().all(|&p| p == 0.5));
    }

    #[test]
    fn movie_dir_and_chunk_roundtrip() {
        let tmp = tempfile::tempdir().unwrap();
        let m = ramp_movie(32, 6, 5);
        write_movie_dir(tmp.path(), "mv", 24.0, &m).unwrap();
        let (side, back) = read_movie_dir(tmp.path()).unwrap();
        assert_eq!(side.frame_count, 32);
        assert_eq!(back, m);
        let chunks =
            chunk_movie(&resample_movie(&back, 32.0 / 1.3, 1.3, 4).unwrap(), "mv").unwrap();
        write_chunks(tmp.path(), "mv", &chunks).unwrap();
        assert_eq!(read_chunks(tmp.path(), "mv").unwrap(), chunks);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn outputs_stay_in_unit_range(
                n in 1usize..80,
                h in 2usize..9,
                w in 2usize..9,
                out in 1usize..7,
                fps in 5.0f64..60.0,
                seed in any::<u64>(),
            ) {
                use rand::{Rng, SeedableRng};
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let data = (0..n * 3 * h * w).map(|_| rng.random::<f32>()).collect();
                let m = FrameStack::new(n, h, w, data).unwrap();
                let r = resample_movie(&m, fps, 1.3, out).unwrap();
                prop_assert!(r.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
                prop_assert_eq!(r.n % FRAMES_PER_TR, 0);
            }

            #[test]
            fn chunking_is_lossless(n_tr in 1usize..5, seed in any::<u64>()) {
                use rand::{Rng, SeedableRng};
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let n = n_tr * 32;
                let data: Vec<f32> = (0..n * 12).map(|_| rng.random::<f32>()).collect();
                let m = FrameStack::new(n, 2, 2, data.clone()).unwrap();
                let chunks = chunk_movie(&m, "p").unwrap();
                let joined: Vec<f32> = chunks.iter().flat_map(|c| c.frames.iter().copied()).collect();
                prop_assert_eq!(joined, data);
            }

            #[test]
            fn resampling_on_target_grid_is_idempotent(n_tr in 1usize..4, seed in any::<u64>()) {
                use rand::{Rng, SeedableRng};
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let n = n_tr * 32;
                let data = (0..n * 3 * 16).map(|_| rng.random::<f32>()).collect();
                let m = FrameStack::new(n, 4, 4, data).unwrap();
                let once = resample_movie(&m, 32.0 / 1.3, 1.3, 4).unwrap();
                let twice = resample_movie(&once, 32.0 / 1.3, 1.3, 4).unwrap();
                prop_assert_eq!(&once, &m);
                prop_assert_eq!(once, twice);
            }
        }
    }
}
