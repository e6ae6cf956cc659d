//! fMRI preprocessing: z-scoring, hemodynamic delay alignment, SNR voxel
//! selection, subject averaging and the train/validation/test split.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Error, Result};
use crate::io;
use crate::seed::rng_for;
use crate::tensor::Tensor;

pub const DEFAULT_DELAY_TR: usize = 4;
pub const DEFAULT_SNR_FRACTION: f64 = 0.30;
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;
pub const DEFAULT_TRAIN_VAL_RATIO: (usize, usize) = (4, 1);

/// Per-subject time series `[S, T, V]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectStack {
    pub data: Tensor,
    pub tr_seconds: f64,
}

impl SubjectStack {
    pub fn new(data: Tensor, tr_seconds: f64) -> Result<Self> {
        if data.ndim() != 3 {
            return Err(shape_err(format!(
                "subject stack must be 3-D, got {:?}",
                data.shape()
            )));
        }
        if data.dim(0) < 1 || data.dim(1) < 2 || data.dim(2) < 1 {
            return Err(Error::InsufficientData(format!(
                "subject stack {:?} needs S>=1, T>=2, V>=1",
                data.shape()
            )));
        }
        if !data.all_finite() {
            return Err(Error::Format(
                "subject stack holds non-finite values".into(),
            ));
        }
        Ok(Self { data, tr_seconds })
    }

    pub fn subjects(&self) -> usize {
        self.data.dim(0)
    }
    pub fn trs(&self) -> usize {
        self.data.dim(1)
    }
    pub fn voxels(&self) -> usize {
        self.data.dim(2)
    }

    #[inline]
    pub fn at(&self, s: usize, t: usize, v: usize) -> f64 {
        let (tt, vv) = (self.trs(), self.voxels());
        self.data.data()[(s * tt + t) * vv + v]
    }

    /// Subject `s` as a `[T, V]` tensor.
    pub fn subject(&self, s: usize) -> Tensor {
        let per = self.trs() * self.voxels();
        Tensor::new(
            vec![self.trs(), self.voxels()],
            self.data.data()[s * per..(s + 1) * per].to_vec(),
        )
        .expect("subject slice")
    }

    /// Concatenate stacks along time (same subjects and voxels).
    pub fn concat_time(stacks: &[&SubjectStack]) -> Result<SubjectStack> {
        let first = stacks.first().ok_or_else(|| arg_err("no stacks"))?;
        let (s, v) = (first.subjects(), first.voxels());
        if stacks.iter().any(|x| x.subjects() != s || x.voxels() != v) {
            return Err(shape_err("stacks disagree on subjects or voxels"));
        }
        let t_total: usize = stacks.iter().map(|x| x.trs()).sum();
        let mut data = Vec::with_capacity(s * t_total * v);
        for si in 0..s {
            for st in stacks {
                let per = st.trs() * v;
                data.extend_from_slice(&st.data.data()[si * per..(si + 1) * per]);
            }
        }
        SubjectStack::new(Tensor::new(vec![s, t_total, v], data)?, first.tr_seconds)
    }
}

/// Delay-aligned, z-scored `[T, V]` activations for one movie.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelSeries {
    pub data: Tensor,
    pub movie_id: String,
    pub delay_applied_tr: usize,
}

/// Column-wise z-score with sample (n-1) standard deviation. Constant
/// columns become all-zero.
pub fn zscore_voxels(data: &Tensor) -> Result<Tensor> {
    if data.ndim() != 2 {
        return Err(shape_err("zscore_voxels expects [T, V]"));
    }
    let (t, v) = (data.dim(0), data.dim(1));
    if t < 2 {
        return Err(Error::InsufficientData(format!(
            "z-score needs T >= 2, got {t}"
        )));
    }
    let x = data.data();
    let mut out = vec![0.0; t * v];
    for j in 0..v {
        let mean = (0..t).map(|i| x[i * v + j]).sum::<f64>() / t as f64;
        let ss = (0..t).map(|i| (x[i * v + j] - mean).powi(2)).sum::<f64>();
        let sd = (ss / (t - 1) as f64).sqrt();
        // Relative threshold: rounding residue of a constant column is not signal.
        let scale = mean.abs().max(1.0);
        if sd <= 1e-12 * scale {
            continue;
        }
        for i in 0..t {
            out[i * v + j] = (x[i * v + j] - mean) / sd;
        }
    }
    Tensor::new(vec![t, v], out)
}

/// Row `i` of the result is fMRI row `i + delay_tr`, paired with stimulus chunk `i`.
pub fn align_delay(fmri: &Tensor, n_chunks: usize, delay_tr: usize) -> Result<Tensor> {
    if fmri.ndim() != 2 {
        return Err(shape_err("align_delay expects [T, V]"));
    }
    let t = fmri.dim(0);
    if t < n_chunks + delay_tr {
        return Err(Error::InsufficientData(format!(
            "{t} TRs cannot cover {n_chunks} chunks with a {delay_tr}-TR delay"
        )));
    }
    let idx: Vec<usize> = (delay_tr..delay_tr + n_chunks).collect();
    Ok(fmri.select_rows(&idx))
}

fn sample_var(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
}

/// Per-voxel SNR: variance over time of the subject-mean signal divided by
/// the variance over subjects of each subject's temporal mean. Both use the
/// sample (n-1) variance. Zero noise yields `+inf`.
pub fn compute_snr(stack: &SubjectStack) -> Result<Vec<f64>> {
    let (s, t, v) = (stack.subjects(), stack.trs(), stack.voxels());
    if s < 2 || t < 2 {
        return Err(Error::InsufficientData(format!(
            "SNR needs at least 2 subjects and 2 TRs, got S={s}, T={t}"
        )));
    }
    let mut snr = Vec::with_capacity(v);
    let mut across_subjects = vec![0.0; t];
    let mut across_time = vec![0.0; s];
    for j in 0..v {
        for (ti, slot) in across_subjects.iter_mut().enumerate() {
            *slot = (0..s).map(|si| stack.at(si, ti, j)).sum::<f64>() / s as f64;
        }
        for (si, slot) in across_time.iter_mut().enumerate() {
            *slot = (0..t).map(|ti| stack.at(si, ti, j)).sum::<f64>() / t as f64;
        }
        let signal = sample_var(&across_subjects);
        let noise = sample_var(&across_time);
        snr.push(if noise == 0.0 {
            f64::INFINITY
        } else {
            signal / noise
        });
    }
    Ok(snr)
}

/// Indices of the `floor(fraction * V)` largest values, ties broken by lower
/// index. Returned in ascending index order.
pub fn select_top_fraction(snr: &[f64], fraction: f64) -> Result<Vec<usize>> {
    if snr.is_empty() {
        return Err(arg_err("empty SNR vector"));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(arg_err(format!("fraction {fraction} outside (0, 1]")));
    }
    let k = (fraction * snr.len() as f64 + 1e-9).floor() as usize;
    Ok(top_k_indices(snr, k))
}

/// `k` largest by value (descending), ties by ascending index; NaN ranks last.
pub(crate) fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (values[a], values[b]);
        let key = |z: f64| if z.is_nan() { f64::NEG_INFINITY } else { z };
        key(y).partial_cmp(&key(x)).unwrap().then(a.cmp(&b))
    });
    let mut chosen: Vec<usize> = order.into_iter().take(k).collect();
    chosen.sort_unstable();
    chosen
}

/// Elementwise mean over subjects.
pub fn average_subjects(stack: &SubjectStack) -> Tensor {
    let (s, t, v) = (stack.subjects(), stack.trs(), stack.voxels());
    let per = t * v;
    let x = stack.data.data();
    let mut out = vec![0.0; per];
    for si in 0..s {
        for (o, xi) in out.iter_mut().zip(&x[si * per..(si + 1) * per]) {
            *o += xi;
        }
    }
    for o in &mut out {
        *o /= s as f64;
    }
    Tensor::new(vec![t, v], out).expect("average shape")
}

/// Ordered voxel ids with region labels and SNR selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoxelMask {
    pub voxel_ids: Vec<usize>,
    pub region_labels: Vec<String>,
    pub snr: Vec<f64>,
    pub selected: Vec<bool>,
}

impl VoxelMask {
    /// Mask with every voxel selected and unknown SNR.
    pub fn all(region_labels: Vec<String>) -> Self {
        let v = region_labels.len();
        Self {
            voxel_ids: (0..v).collect(),
            region_labels,
            snr: vec![f64::NAN; v],
            selected: vec![true; v],
        }
    }

    pub fn from_snr(region_labels: Vec<String>, snr: Vec<f64>, fraction: f64) -> Result<Self> {
        if region_labels.len() != snr.len() {
            return Err(shape_err(format!(
                "{} region labels for {} SNR values",
                region_labels.len(),
                snr.len()
            )));
        }
        let chosen = select_top_fraction(&snr, fraction)?;
        let mut selected = vec![false; snr.len()];
        for i in chosen {
            selected[i] = true;
        }
        Ok(Self {
            voxel_ids: (0..snr.len()).collect(),
            region_labels,
            snr,
            selected,
        })
    }

    pub fn len(&self) -> usize {
        self.voxel_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxel_ids.is_empty()
    }

    pub fn selected_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.selected[i]).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.voxel_ids.len();
        if self.region_labels.len() != n || self.snr.len() != n || self.selected.len() != n {
            return Err(Error::Format("voxel mask fields differ in length".into()));
        }
        Ok(())
    }
}

// Non-finite SNR values (the +inf sentinel, NaN for unknown) are stored as
// strings in JSON.
mod snr_json {
    use serde::{Deserialize, Serialize};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    pub enum Value {
        Num(f64),
        Text(String),
    }

    pub fn encode(x: f64) -> Value {
        if x.is_nan() {
            Value::Text("nan".into())
        } else if x == f64::INFINITY {
            Value::Text("inf".into())
        } else if x == f64::NEG_INFINITY {
            Value::Text("-inf".into())
        } else {
            Value::Num(x)
        }
    }

    pub fn decode(v: Value) -> Result<f64, String> {
        match v {
            Value::Num(x) => Ok(x),
            Value::Text(s) => match s.as_str() {
                "nan" => Ok(f64::NAN),
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(format!("bad SNR value {other:?}")),
            },
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskFile {
    voxel_ids: Vec<usize>,
    region_labels: Vec<String>,
    snr: Vec<snr_json::Value>,
    selected: Vec<bool>,
}

pub fn write_mask(path: &Path, mask: &VoxelMask) -> Result<()> {
    let f = MaskFile {
        voxel_ids: mask.voxel_ids.clone(),
        region_labels: mask.region_labels.clone(),
        snr: mask.snr.iter().map(|&x| snr_json::encode(x)).collect(),
        selected: mask.selected.clone(),
    };
    io::write_json(path, &f)
}

pub fn read_mask(path: &Path) -> Result<VoxelMask> {
    let f: MaskFile = io::read_json(path)?;
    let snr = f
        .snr
        .into_iter()
        .map(snr_json::decode)
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(Error::Format)?;
    let m = VoxelMask {
        voxel_ids: f.voxel_ids,
        region_labels: f.region_labels,
        snr,
        selected: f.selected,
    };
    m.validate()?;
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MovieSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitPlan {
    pub held_out_movie_id: String,
    pub movies: BTreeMap<String, MovieSplit>,
}

impl SplitPlan {
    pub fn total(&self, pick: impl Fn(&MovieSplit) -> usize) -> usize {
        self.movies.values().map(pick).sum()
    }
}

/// Per non-held-out movie the first `floor(train_frac * N)` chunks are split
/// at random (seeded by `(seed, movie_id)`) into train and validation with
/// `floor(head / (a + b)) * b` validation chunks; the rest of the movie is test.
/// The held-out movie is entirely test.
pub fn make_split(
    movie_chunk_counts: &BTreeMap<String, usize>,
    held_out: &str,
    train_frac: f64,
    train_val_ratio: (usize, usize),
    seed: u64,
) -> Result<SplitPlan> {
    if !movie_chunk_counts.contains_key(held_out) {
        return Err(arg_err(format!(
            "held-out movie {held_out:?} not in dataset"
        )));
    }
    if !(train_frac > 0.0 && train_frac <= 1.0) {
        return Err(arg_err(format!(
            "train fraction {train_frac} outside (0, 1]"
        )));
    }
    let (a, b) = train_val_ratio;
    if a + b == 0 {
        return Err(arg_err("train:val ratio must not be 0:0"));
    }
    let mut movies = BTreeMap::new();
    for (id, &n) in movie_chunk_counts {
        if n < 5 {
            return Err(Error::InsufficientData(format!(
                "movie {id:?} has {n} chunks; at least 5 are required"
            )));
        }
        if id == held_out {
            movies.insert(
                id.clone(),
                MovieSplit {
                    train: vec![],
                    val: vec![],
                    test: (0..n).collect(),
                },
            );
            continue;
        }
        let head = (train_frac * n as f64 + 1e-9).floor() as usize;
        let n_val = head * b / (a + b);
        let mut idx: Vec<usize> = (0..head).collect();
        idx.shuffle(&mut rng_for(seed, &format!("split/{id}")));
        let mut val = idx[..n_val].to_vec();
        let mut train = idx[n_val..].to_vec();
        val.sort_unstable();
        train.sort_unstable();
        movies.insert(
            id.clone(),
            MovieSplit {
                train,
                val,
                test: (head..n).collect(),
            },
        );
    }
    Ok(SplitPlan {
        held_out_movie_id: held_out.to_string(),
        movies,
    })
}

/// Header of a packed `[S, T, V]` fMRI payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FmriHeader {
    pub subjects: usize,
    pub trs: usize,
    pub voxels: usize,
    pub tr_seconds: f64,
    pub movie_id: String,
}

pub fn write_subject_stack(dir: &Path, movie_id: &str, stack: &SubjectStack) -> Result<()> {
    let (bin, json) = io::pair_paths(dir, movie_id);
    io::write_f32_le(&bin, stack.data.data().iter().copied())?;
    io::write_json(
        &json,
        &FmriHeader {
            subjects: stack.subjects(),
            trs: stack.trs(),
            voxels: stack.voxels(),
            tr_seconds: stack.tr_seconds,
            movie_id: movie_id.to_string(),
        },
    )
}

pub fn read_subject_stack(dir: &Path, movie_id: &str) -> Result<(FmriHeader, SubjectStack)> {
    let (bin, json) = io::pair_paths(dir, movie_id);
    let h: FmriHeader = io::read_json(&json)?;
    if h.movie_id != movie_id {
        return Err(Error::Format(format!(
            "{}: header names movie {:?}",
            json.display(),
            h.movie_id
        )));
    }
    let raw = io::read_f32_le(&bin, h.subjects * h.trs * h.voxels)?;
    let t = Tensor::new(
        vec![h.subjects, h.trs, h.voxels],
        raw.into_iter().map(f64::from).collect(),
    )?;
    let s = SubjectStack::new(t, h.tr_seconds)?;
    Ok((h, s))
}

/// Header of a processed `[T, V]` series payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeriesHeader {
    pub movie_id: String,
    pub trs: usize,
    pub voxels: usize,
    pub delay_applied_tr: usize,
}

pub fn write_series(dir: &Path, series: &VoxelSeries) -> Result<()> {
    let (bin, json) = io::pair_paths(dir, &series.movie_id);
    io::write_f32_le(&bin, series.data.data().iter().copied())?;
    io::write_json(
        &json,
        &SeriesHeader {
            movie_id: series.movie_id.clone(),
            trs: series.data.dim(0),
            voxels: series.data.dim(1),
            delay_applied_tr: series.delay_applied_tr,
        },
    )
}

pub fn read_series(dir: &Path, movie_id: &str) -> Result<VoxelSeries> {
    let (bin, json) = io::pair_paths(dir, movie_id);
    let h: SeriesHeader = io::read_json(&json)?;
    let raw = io::read_f32_le(&bin, h.trs * h.voxels)?;
    Ok(VoxelSeries {
        data: Tensor::new(
            vec![h.trs, h.voxels],
            raw.into_iter().map(f64::from).collect(),
        )?,
        movie_id: h.movie_id,
        delay_applied_tr: h.delay_applied_tr,
    })
}
