//! Adam training of encoder-only, end-to-end and decoder-only models.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Error, Result};
use crate::eval::{evaluate_decoder, evaluate_encoder};
use crate::fmri::{MovieSplit, SplitPlan};
use crate::io;
use crate::nn::checkpoint;
use crate::nn::layers::BnUpdate;
use crate::nn::params::is_trainable;
use crate::nn::{chunk_batch, Decoder, DecoderSpec, Encoder, EncoderSpec, Grads, ModelParams};
use crate::objectives::{
    combine, decoder_loss_with_grad, encoder_loss_with_grad, FeaturePyramid, HyperConfig,
    LossBreakdown, PerceptualConfig,
};
use crate::seed::{derive_seed, rng_for};
use crate::stimulus::{extract_target, VideoChunk};
use crate::tensor::Tensor;

pub const DEFAULT_BATCH_SIZE: usize = 16;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    EncoderOnly,
    EndToEnd,
    /// Decoder trained on measured fMRI; no encoder.
    DecoderOnly,
}

impl TrainMode {
    pub fn has_encoder(self) -> bool {
        !matches!(self, TrainMode::DecoderOnly)
    }

    pub fn has_decoder(self) -> bool {
        !matches!(self, TrainMode::EncoderOnly)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::EncoderOnly => "encoder_only",
            TrainMode::EndToEnd => "end_to_end",
            TrainMode::DecoderOnly => "decoder_only",
        }
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder_only" => Ok(TrainMode::EncoderOnly),
            "end_to_end" => Ok(TrainMode::EndToEnd),
            "decoder_only" => Ok(TrainMode::DecoderOnly),
            _ => Err(arg_err(format!("unknown mode {s:?}"))),
        }
    }
}

/// Aligned chunks and fMRI rows of one movie.
#[derive(Debug, Clone, PartialEq)]
pub struct MovieData {
    pub movie_id: String,
    pub chunks: Vec<VideoChunk>,
    /// `[N, V]`, row `i` paired with `chunks[i]`.
    pub fmri: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainData {
    pub movies: Vec<MovieData>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SampleRef {
    pub movie: usize,
    pub index: usize,
}

impl TrainData {
    pub fn voxels(&self) -> usize {
        self.movies.first().map_or(0, |m| m.fmri.dim(1))
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.voxels();
        for m in &self.movies {
            if m.fmri.ndim() != 2 || m.fmri.dim(0) != m.chunks.len() || m.fmri.dim(1) != v {
                return Err(shape_err(format!(
                    "movie {}: {} chunks vs fMRI {:?} (V = {v})",
                    m.movie_id,
                    m.chunks.len(),
                    m.fmri.shape()
                )));
            }
        }
        Ok(())
    }

    /// Samples of one split part, movies in data order, indices in split order.
    pub fn refs(
        &self,
        split: &SplitPlan,
        part: fn(&MovieSplit) -> &Vec<usize>,
    ) -> Result<Vec<SampleRef>> {
        let mut out = Vec::new();
        for (mi, m) in self.movies.iter().enumerate() {
            let Some(s) = split.movies.get(&m.movie_id) else {
                continue;
            };
            for &i in part(s) {
                if i >= m.chunks.len() {
                    return Err(shape_err(format!(
                        "split index {i} beyond movie {}",
                        m.movie_id
                    )));
                }
                out.push(SampleRef {
                    movie: mi,
                    index: i,
                });
            }
        }
        Ok(out)
    }

    pub fn chunk_batch(&self, refs: &[SampleRef]) -> Result<Tensor> {
        let chunks: Vec<&VideoChunk> = refs
            .iter()
            .map(|r| &self.movies[r.movie].chunks[r.index])
            .collect();
        chunk_batch(&chunks)
    }

    pub fn fmri_batch(&self, refs: &[SampleRef]) -> Result<Tensor> {
        let v = self.voxels();
        Tensor::stack_rows(
            &[v],
            refs.iter().map(|r| self.movies[r.movie].fmri.row(r.index)),
        )
    }

    pub fn target_batch(&self, refs: &[SampleRef]) -> Result<Tensor> {
        let first =
            &self.movies[refs.first().ok_or_else(|| arg_err("empty batch"))?.movie].chunks[0];
        let (h, w) = (first.height, first.width);
        let frames: Vec<Vec<f64>> = refs
            .iter()
            .map(|r| {
                extract_target(&self.movies[r.movie].chunks[r.index])
                    .pixels
                    .iter()
                    .map(|&p| p as f64)
                    .collect()
            })
            .collect();
        Tensor::stack_rows(&[3, h, w], frames.iter().map(|f| f.as_slice()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub hyper: HyperConfig,
    pub batch_size: usize,
    /// Decoupled weight decay; 0 disables it.
    #[serde(default)]
    pub weight_decay: f64,
    pub encoder: EncoderSpec,
    pub decoder: DecoderSpec,
    pub perceptual: PerceptualConfig,
}

impl TrainConfig {
    /// Desk-scale models for `size × size` frames.
    pub fn desk(mode: TrainMode, voxels: usize, size: usize) -> Self {
        Self {
            mode,
            hyper: HyperConfig::default(),
            batch_size: DEFAULT_BATCH_SIZE,
            weight_decay: 0.0,
            encoder: EncoderSpec::desk(voxels, size),
            decoder: DecoderSpec::desk(voxels, size),
            perceptual: PerceptualConfig::default(),
        }
    }

    pub fn validate(&self, data: &TrainData) -> Result<()> {
        self.hyper.validate()?;
        if self.batch_size == 0 {
            return Err(arg_err("batch_size must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay * self.hyper.learning_rate < 1.0) {
            return Err(arg_err(format!(
                "weight_decay {} out of range",
                self.weight_decay
            )));
        }
        data.validate()?;
        let v = data.voxels();
        if self.mode.has_encoder() && self.encoder.voxels() != v {
            return Err(shape_err(format!(
                "encoder predicts {} voxels, data has {v}",
                self.encoder.voxels()
            )));
        }
        if self.mode.has_decoder() && self.decoder.voxels != v {
            return Err(shape_err(format!(
                "decoder takes {} voxels, data has {v}",
                self.decoder.voxels
            )));
        }
        Ok(())
    }
}

/// Parameters of the parts present in a mode.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub mode: TrainMode,
    pub encoder: Option<ModelParams>,
    pub decoder: Option<ModelParams>,
}

impl TrainedModel {
    fn to_tensors(&self, prefix: &str, out: &mut BTreeMap<String, Tensor>) {
        for (part, p) in [("enc", &self.encoder), ("dec", &self.decoder)] {
            if let Some(p) = p {
                for (n, t) in p.iter() {
                    out.insert(format!("{prefix}{part}/{n}"), t.clone());
                }
            }
        }
    }

    fn from_tensors(mode: TrainMode, prefix: &str, tensors: &BTreeMap<String, Tensor>) -> Self {
        let pick = |part: &str| {
            let key = format!("{prefix}{part}/");
            let m: BTreeMap<String, Tensor> = tensors
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(&key).map(|s| (s.to_string(), t.clone())))
                .collect();
            (!m.is_empty()).then(|| ModelParams::from_map(m))
        };
        Self {
            mode,
            encoder: pick("enc"),
            decoder: pick("dec"),
        }
    }
}

/// Adam with bias correction; one step count shared by all parameters.
/// A nonzero `weight_decay` shrinks `*.weight` tensors by `lr * weight_decay`
/// per step, decoupled from the gradient moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self::with_weight_decay(lr, 0.0)
    }

    pub fn with_weight_decay(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Update the trainable tensors of `params`; a missing gradient counts as zero.
    pub fn apply(&mut self, prefix: &str, params: &mut ModelParams, grads: &Grads) -> Result<()> {
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        let names: Vec<String> = params
            .names()
            .filter(|n| is_trainable(n))
            .cloned()
            .collect();
        for name in names {
            let key = format!("{prefix}/{name}");
            let p = params.get_mut(&name)?;
            let g = grads.get(&name);
            if let Some(g) = g {
                p.check_same(g)?;
            }
            let m = self
                .m
                .entry(key.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self
                .v
                .entry(key)
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let gd = g.map(Tensor::data);
            let shrink = if name.ends_with(".weight") {
                1.0 - self.lr * self.weight_decay
            } else {
                1.0
            };
            for i in 0..p.len() {
                let gi = gd.map_or(0.0, |d| d[i]);
                let mi = &mut m.data_mut()[i];
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                let vi = &mut v.data_mut()[i];
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                let mh = m.data()[i] / c1;
                let vh = v.data()[i] / c2;
                let pi = &mut p.data_mut()[i];
                *pi = *pi * shrink - self.lr * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val: LossBreakdown,
    /// Mean per-voxel validation Pearson (NaN without encoder or < 2 samples).
    pub val_pearson: f64,
    /// Mean validation SSIM of reconstructions (NaN without decoder).
    pub val_ssim: f64,
}

const LOSS_FIELDS: [&str; 8] = [
    "mse_v",
    "cos_dist",
    "l_e",
    "psim",
    "ssim_loss",
    "tv",
    "l_d",
    "l_ed",
];

fn loss_values(b: &LossBreakdown) -> [f64; 8] {
    [
        b.mse_v,
        b.cos_dist,
        b.l_e,
        b.psim,
        b.ssim_loss,
        b.tv,
        b.l_d,
        b.l_ed,
    ]
}

fn loss_from(v: &[f64], zero_rows: f64) -> LossBreakdown {
    LossBreakdown {
        mse_v: v[0],
        cos_dist: v[1],
        l_e: v[2],
        psim: v[3],
        ssim_loss: v[4],
        tv: v[5],
        l_d: v[6],
        l_ed: v[7],
        zero_norm_rows: zero_rows as usize,
    }
}

const RECORD_WIDTH: usize = 21;

impl EpochRecord {
    fn to_row(&self) -> Vec<f64> {
        let mut r = vec![self.epoch as f64];
        r.extend(loss_values(&self.train));
        r.push(self.train.zero_norm_rows as f64);
        r.extend(loss_values(&self.val));
        r.push(self.val.zero_norm_rows as f64);
        r.push(self.val_pearson);
        r.push(self.val_ssim);
        r
    }

    fn from_row(r: &[f64]) -> Self {
        Self {
            epoch: r[0] as usize,
            train: loss_from(&r[1..9], r[9]),
            val: loss_from(&r[10..18], r[18]),
            val_pearson: r[19],
            val_ssim: r[20],
        }
    }
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch");
    for split in ["train", "val"] {
        for f in LOSS_FIELDS {
            let _ = write!(out, ",{split}_{f}");
        }
    }
    out.push_str(",val_pearson,val_ssim\n");
    for h in history {
        let _ = write!(out, "{}", h.epoch);
        for b in [&h.train, &h.val] {
            for v in loss_values(b) {
                let _ = write!(out, ",{v}");
            }
        }
        let _ = writeln!(out, ",{},{}", h.val_pearson, h.val_ssim);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Parameters at the best validation loss (or the last epoch without a
    /// validation set).
    pub model: TrainedModel,
    pub final_model: TrainedModel,
    pub history: Vec<EpochRecord>,
    /// 0 means the initial parameters.
    pub best_epoch: usize,
}

struct Nets {
    encoder: Option<Encoder>,
    decoder: Option<Decoder>,
    extractor: Option<FeaturePyramid>,
}

impl Nets {
    fn new(cfg: &TrainConfig) -> Result<Self> {
        let decoder = cfg
            .mode
            .has_decoder()
            .then(|| Decoder::new(cfg.decoder.clone()))
            .transpose()?;
        let extractor = match &decoder {
            Some(d) => {
                let (h, w) = d.spec.output_size();
                Some(FeaturePyramid::from_config(h, w, &cfg.perceptual)?)
            }
            None => None,
        };
        Ok(Self {
            encoder: cfg
                .mode
                .has_encoder()
                .then(|| Encoder::new(cfg.encoder.clone()))
                .transpose()?,
            decoder,
            extractor,
        })
    }

    fn init(&self, mode: TrainMode, seed: u64) -> TrainedModel {
        TrainedModel {
            mode,
            encoder: self
                .encoder
                .as_ref()
                .map(|e| e.init_params(derive_seed(seed, "init/encoder"))),
            decoder: self
                .decoder
                .as_ref()
                .map(|d| d.init_params(derive_seed(seed, "init/decoder"))),
        }
    }
}

/// Parameter gradients and batch-norm statistics of one training batch.
struct BatchResult {
    loss: LossBreakdown,
    enc_grads: Option<Grads>,
    dec_grads: Option<Grads>,
    enc_bn: Vec<BnUpdate>,
    dec_bn: Vec<BnUpdate>,
}

fn objective(mode: TrainMode, b: &LossBreakdown) -> f64 {
    match mode {
        TrainMode::EncoderOnly => b.l_e,
        TrainMode::EndToEnd => b.l_ed,
        TrainMode::DecoderOnly => b.l_d,
    }
}

fn train_batch(
    nets: &Nets,
    cfg: &TrainConfig,
    model: &TrainedModel,
    data: &TrainData,
    refs: &[SampleRef],
    rng_seed: u64,
) -> Result<BatchResult> {
    let hp = &cfg.hyper;
    let v = data.fmri_batch(refs)?;
    let mut rng = rng_for(rng_seed, "dropout");
    let mut out = BatchResult {
        loss: LossBreakdown::default(),
        enc_grads: None,
        dec_grads: None,
        enc_bn: Vec::new(),
        dec_bn: Vec::new(),
    };
    match cfg.mode {
        TrainMode::EncoderOnly => {
            let enc = nets.encoder.as_ref().expect("encoder");
            let ep = model.encoder.as_ref().expect("encoder params");
            let (v_hat, tape) = enc.forward(ep, &data.chunk_batch(refs)?, true, Some(&mut rng))?;
            let (loss, g) = encoder_loss_with_grad(&v, &v_hat, hp.alpha)?;
            out.enc_grads = Some(enc.backward(ep, &tape, g)?);
            out.enc_bn = tape.bn_updates;
            out.loss = loss;
        }
        TrainMode::EndToEnd => {
            let enc = nets.encoder.as_ref().expect("encoder");
            let dec = nets.decoder.as_ref().expect("decoder");
            let ep = model.encoder.as_ref().expect("encoder params");
            let dp = model.decoder.as_ref().expect("decoder params");
            let f = data.target_batch(refs)?;
            let (v_hat, etape) = enc.forward(ep, &data.chunk_batch(refs)?, true, Some(&mut rng))?;
            let (f_hat, dtape) = dec.forward(dp, &v_hat, true, Some(&mut rng))?;
            let (le, gv) = encoder_loss_with_grad(&v, &v_hat, hp.alpha)?;
            let (ld, mut gf) = decoder_loss_with_grad(
                &f,
                &f_hat,
                hp,
                nets.extractor.as_ref().expect("extractor"),
            )?;
            gf.scale(1.0 - hp.epsilon);
            let (mut gx, dg) = dec.backward(dp, &dtape, gf, true)?;
            gx.add_scaled(&gv, hp.epsilon)?;
            out.enc_grads = Some(enc.backward(ep, &etape, gx)?);
            out.dec_grads = Some(dg);
            out.enc_bn = etape.bn_updates;
            out.dec_bn = dtape.bn_updates;
            out.loss = combine(&le, &ld, hp.epsilon);
        }
        TrainMode::DecoderOnly => {
            let dec = nets.decoder.as_ref().expect("decoder");
            let dp = model.decoder.as_ref().expect("decoder params");
            let f = data.target_batch(refs)?;
            let (f_hat, tape) = dec.forward(dp, &v, true, Some(&mut rng))?;
            let (ld, gf) = decoder_loss_with_grad(
                &f,
                &f_hat,
                hp,
                nets.extractor.as_ref().expect("extractor"),
            )?;
            out.dec_grads = Some(dec.backward(dp, &tape, gf, true)?.1);
            out.dec_bn = tape.bn_updates;
            out.loss = ld;
        }
    }
    Ok(out)
}

/// Eval-mode predictions for `refs`, in order.
pub struct Predictions {
    pub v_true: Tensor,
    pub v_hat: Option<Tensor>,
    pub f_true: Option<Tensor>,
    pub f_hat: Option<Tensor>,
}

fn concat(parts: Vec<Tensor>) -> Result<Tensor> {
    Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
}

/// Batched eval-mode forward passes. In decoder-only mode the decoder reads
/// the measured fMRI.
pub fn predict(
    cfg: &TrainConfig,
    model: &TrainedModel,
    data: &TrainData,
    refs: &[SampleRef],
) -> Result<Predictions> {
    if refs.is_empty() {
        return Err(arg_err("nothing to predict"));
    }
    let enc = model
        .encoder
        .as_ref()
        .map(|_| Encoder::new(cfg.encoder.clone()))
        .transpose()?;
    let dec = model
        .decoder
        .as_ref()
        .map(|_| Decoder::new(cfg.decoder.clone()))
        .transpose()?;
    let (mut vt, mut vh, mut ft, mut fh) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for batch in refs.chunks(cfg.batch_size.max(1)) {
        let v = data.fmri_batch(batch)?;
        let v_hat = match (&enc, &model.encoder) {
            (Some(e), Some(p)) => Some(e.infer(p, &data.chunk_batch(batch)?)?),
            _ => None,
        };
        if let (Some(d), Some(p)) = (&dec, &model.decoder) {
            let input = v_hat.as_ref().unwrap_or(&v);
            fh.push(d.infer(p, input)?);
            ft.push(data.target_batch(batch)?);
        }
        if let Some(x) = v_hat {
            vh.push(x);
        }
        vt.push(v);
    }
    Ok(Predictions {
        v_true: concat(vt)?,
        v_hat: (!vh.is_empty()).then(|| concat(vh)).transpose()?,
        f_true: (!ft.is_empty()).then(|| concat(ft)).transpose()?,
        f_hat: (!fh.is_empty()).then(|| concat(fh)).transpose()?,
    })
}

/// Validation losses in eval mode plus mean Pearson / SSIM.
fn validate(
    nets: &Nets,
    cfg: &TrainConfig,
    model: &TrainedModel,
    data: &TrainData,
    refs: &[SampleRef],
) -> Result<(LossBreakdown, f64, f64)> {
    let hp = &cfg.hyper;
    let pred = predict(cfg, model, data, refs)?;
    let le = match &pred.v_hat {
        Some(vh) => Some(encoder_loss_with_grad(&pred.v_true, vh, hp.alpha)?.0),
        None => None,
    };
    let ld = match (&pred.f_true, &pred.f_hat) {
        (Some(ft), Some(fh)) => {
            let ex = nets.extractor.as_ref().expect("extractor");
            // Batched to bound memory; weights give the full-set mean.
            let mut parts = Vec::new();
            for start in (0..ft.dim(0)).step_by(cfg.batch_size) {
                let idx: Vec<usize> = (start..(start + cfg.batch_size).min(ft.dim(0))).collect();
                let a = ft.select_rows(&idx);
                let b = fh.select_rows(&idx);
                parts.push((decoder_loss_with_grad(&a, &b, hp, ex)?.0, idx.len() as f64));
            }
            Some(LossBreakdown::weighted_mean(&parts))
        }
        _ => None,
    };
    let loss = match (le, ld) {
        (Some(e), Some(d)) => combine(&e, &d, hp.epsilon),
        (Some(e), None) => e,
        (None, Some(d)) => d,
        (None, None) => LossBreakdown::default(),
    };
    let pearson = match &pred.v_hat {
        Some(vh) if vh.dim(0) >= 2 => evaluate_encoder(&pred.v_true, vh)?.mean_pearson,
        _ => f64::NAN,
    };
    let ssim = match (&pred.f_true, &pred.f_hat) {
        (Some(a), Some(b)) => evaluate_decoder(a, b)?.mean_ssim,
        _ => f64::NAN,
    };
    Ok((loss, pearson, ssim))
}

/// Mutable state carried between epochs.
#[derive(Debug, Clone, PartialEq)]
struct State {
    epoch: usize,
    model: TrainedModel,
    adam: Adam,
    best: TrainedModel,
    best_epoch: usize,
    best_val: f64,
    history: Vec<EpochRecord>,
}

fn nan_abort(what: &str, epoch: usize, batch: usize, loss: &LossBreakdown) -> Error {
    Error::Numerical(format!(
        "non-finite {what} at epoch {epoch}, batch {batch}: {loss:?}; try a lower learning rate"
    ))
}

fn run(
    data: &TrainData,
    split: &SplitPlan,
    cfg: &TrainConfig,
    start: Option<State>,
    dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate(data)?;
    let train_refs = data.refs(split, |s| &s.train)?;
    if train_refs.is_empty() {
        return Err(Error::InsufficientData("empty train split".into()));
    }
    let val_refs = data.refs(split, |s| &s.val)?;
    let nets = Nets::new(cfg)?;
    let seed = cfg.hyper.seed;
    let mut st = match start {
        Some(s) => s,
        None => {
            let init = nets.init(cfg.mode, seed);
            State {
                epoch: 0,
                best: init.clone(),
                model: init,
                adam: Adam::with_weight_decay(cfg.hyper.learning_rate, cfg.weight_decay),
                best_epoch: 0,
                best_val: f64::INFINITY,
                history: Vec::new(),
            }
        }
    };
    while st.epoch < cfg.hyper.epochs {
        let epoch = st.epoch + 1;
        let mut order = train_refs.clone();
        order.shuffle(&mut rng_for(seed, &format!("shuffle/epoch{epoch}")));
        let mut losses = Vec::new();
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let r = train_batch(
                &nets,
                cfg,
                &st.model,
                data,
                batch,
                derive_seed(seed, &format!("epoch{epoch}/batch{bi}")),
            )?;
            if !objective(cfg.mode, &r.loss).is_finite() {
                return Err(nan_abort("loss", epoch, bi, &r.loss));
            }
            st.adam.begin_step();
            if let (Some(p), Some(g)) = (st.model.encoder.as_mut(), &r.enc_grads) {
                if !g.all_finite() {
                    return Err(nan_abort("encoder gradient", epoch, bi, &r.loss));
                }
                st.adam.apply("enc", p, g)?;
                p.apply_bn_updates(&r.enc_bn)?;
            }
            if let (Some(p), Some(g)) = (st.model.decoder.as_mut(), &r.dec_grads) {
                if !g.all_finite() {
                    return Err(nan_abort("decoder gradient", epoch, bi, &r.loss));
                }
                st.adam.apply("dec", p, g)?;
                p.apply_bn_updates(&r.dec_bn)?;
            }
            losses.push((r.loss, batch.len() as f64));
        }
        let train = LossBreakdown::weighted_mean(&losses);
        let (val, val_pearson, val_ssim) = if val_refs.is_empty() {
            (LossBreakdown::default(), f64::NAN, f64::NAN)
        } else {
            validate(&nets, cfg, &st.model, data, &val_refs)?
        };
        let score = objective(cfg.mode, &val);
        if val_refs.is_empty() || score < st.best_val {
            st.best_val = if val_refs.is_empty() {
                f64::INFINITY
            } else {
                score
            };
            st.best = st.model.clone();
            st.best_epoch = epoch;
        }
        if !val_refs.is_empty() && !score.is_finite() {
            return Err(nan_abort("validation loss", epoch, 0, &val));
        }
        st.history.push(EpochRecord {
            epoch,
            train,
            val,
            val_pearson,
            val_ssim,
        });
        st.epoch = epoch;
        if let Some(d) = dir {
            save_state(
                &d.join("checkpoints").join(format!("epoch_{epoch}.bin")),
                cfg,
                &st,
            )?;
            io::write_text(&d.join("history.csv"), &history_csv(&st.history))?;
            save_model(&d.join("best.bin"), cfg, &st.best, st.best_epoch)?;
        }
    }
    if let Some(d) = dir {
        io::write_text(&d.join("history.csv"), &history_csv(&st.history))?;
        save_model(&d.join("best.bin"), cfg, &st.best, st.best_epoch)?;
    }
    Ok(TrainOutcome {
        model: st.best,
        final_model: st.model,
        history: st.history,
        best_epoch: st.best_epoch,
    })
}

/// Train in memory.
pub fn train(data: &TrainData, split: &SplitPlan, cfg: &TrainConfig) -> Result<TrainOutcome> {
    run(data, split, cfg, None, None)
}

/// Train, writing `history.csv`, `checkpoints/epoch_k.bin` and `best.bin`
/// under `run_dir`.
pub fn train_in_dir(
    data: &TrainData,
    split: &SplitPlan,
    cfg: &TrainConfig,
    run_dir: &Path,
) -> Result<TrainOutcome> {
    run(data, split, cfg, None, Some(run_dir))
}

/// Continue from `checkpoints/epoch_<epoch>.bin` up to `cfg.hyper.epochs`.
pub fn resume_in_dir(
    data: &TrainData,
    split: &SplitPlan,
    cfg: &TrainConfig,
    run_dir: &Path,
    epoch: usize,
) -> Result<TrainOutcome> {
    let st = load_state(
        &run_dir
            .join("checkpoints")
            .join(format!("epoch_{epoch}.bin")),
        cfg,
    )?;
    run(data, split, cfg, Some(st), Some(run_dir))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StateManifest {
    kind: String,
    version: u32,
    epoch: usize,
    step: u64,
    best_epoch: usize,
    config: TrainConfig,
}

fn save_state(path: &Path, cfg: &TrainConfig, st: &State) -> Result<()> {
    let mut t = BTreeMap::new();
    st.model.to_tensors("", &mut t);
    st.best.to_tensors("best/", &mut t);
    for (k, v) in &st.adam.m {
        t.insert(format!("adam_m/{k}"), v.clone());
    }
    for (k, v) in &st.adam.v {
        t.insert(format!("adam_v/{k}"), v.clone());
    }
    t.insert(
        "meta/best_val".into(),
        Tensor::new(vec![1], vec![st.best_val])?,
    );
    let rows: Vec<f64> = st.history.iter().flat_map(EpochRecord::to_row).collect();
    t.insert(
        "meta/history".into(),
        Tensor::new(vec![st.history.len(), RECORD_WIDTH], rows)?,
    );
    let manifest = StateManifest {
        kind: "train_state".into(),
        version: CHECKPOINT_VERSION,
        epoch: st.epoch,
        step: st.adam.step,
        best_epoch: st.best_epoch,
        config: cfg.clone(),
    };
    checkpoint::save(path, &serde_json::to_value(&manifest)?, &t)
}

fn load_state(path: &Path, cfg: &TrainConfig) -> Result<State> {
    let (man, t) = checkpoint::load(path)?;
    let man: StateManifest = serde_json::from_value(man)
        .map_err(|e| Error::Format(format!("{}: bad manifest: {e}", path.display())))?;
    if man.kind != "train_state" || man.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "{}: expected train_state v{CHECKPOINT_VERSION}, found {} v{}",
            path.display(),
            man.kind,
            man.version
        )));
    }
    if &man.config != cfg {
        return Err(arg_err(
            "checkpoint was written with a different training configuration",
        ));
    }
    let strip = |p: &str| -> BTreeMap<String, Tensor> {
        t.iter()
            .filter_map(|(n, x)| n.strip_prefix(p).map(|s| (s.to_string(), x.clone())))
            .collect()
    };
    let meta = |n: &str| {
        t.get(n)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks {n}")))
    };
    let hist = meta("meta/history")?;
    let history = (0..hist.dim(0))
        .map(|i| EpochRecord::from_row(hist.row(i)))
        .collect();
    let main: BTreeMap<String, Tensor> = t
        .iter()
        .filter(|(n, _)| n.starts_with("enc/") || n.starts_with("dec/"))
        .map(|(n, x)| (n.clone(), x.clone()))
        .collect();
    Ok(State {
        epoch: man.epoch,
        model: TrainedModel::from_tensors(cfg.mode, "", &main),
        best: TrainedModel::from_tensors(cfg.mode, "best/", &t),
        adam: Adam {
            lr: cfg.hyper.learning_rate,
            weight_decay: cfg.weight_decay,
            step: man.step,
            m: strip("adam_m/"),
            v: strip("adam_v/"),
        },
        best_epoch: man.best_epoch,
        best_val: meta("meta/best_val")?.data()[0],
        history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub kind: String,
    pub version: u32,
    pub mode: TrainMode,
    pub epoch: usize,
    pub config: TrainConfig,
}

pub fn save_model(
    path: &Path,
    cfg: &TrainConfig,
    model: &TrainedModel,
    epoch: usize,
) -> Result<()> {
    let mut t = BTreeMap::new();
    model.to_tensors("", &mut t);
    let manifest = ModelManifest {
        kind: "model".into(),
        version: CHECKPOINT_VERSION,
        mode: model.mode,
        epoch,
        config: cfg.clone(),
    };
    checkpoint::save(path, &serde_json::to_value(&manifest)?, &t)
}

/// Load a model checkpoint and check its tensors against the recorded specs.
pub fn load_model(path: &Path) -> Result<(ModelManifest, TrainedModel)> {
    let (man, t) = checkpoint::load(path)?;
    let man: ModelManifest = serde_json::from_value(man)
        .map_err(|e| Error::Format(format!("{}: bad manifest: {e}", path.display())))?;
    if man.kind != "model" || man.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "{}: expected model v{CHECKPOINT_VERSION}, found {} v{}",
            path.display(),
            man.kind,
            man.version
        )));
    }
    let model = TrainedModel::from_tensors(man.mode, "", &t);
    if let Some(p) = &model.encoder {
        p.check_against(&man.config.encoder.build()?.params())?;
    }
    if let Some(p) = &model.decoder {
        p.check_against(&man.config.decoder.build()?.params())?;
    }
    if model.encoder.is_some() != man.mode.has_encoder()
        || model.decoder.is_some() != man.mode.has_decoder()
    {
        return Err(Error::Format(format!(
            "{}: parts do not match mode {}",
            path.display(),
            man.mode.as_str()
        )));
    }
    Ok((man, model))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub epsilon: f64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub val_pearson: f64,
    pub val_ssim: f64,
    pub val_loss: f64,
    pub best: bool,
}

/// One end-to-end model per (epsilon, epochs) cell, ranked by validation
/// encoder correlation of the kept checkpoint (descending; NaN last).
pub fn grid_search(
    epsilons: &[f64],
    epoch_range: &[usize],
    data: &TrainData,
    split: &SplitPlan,
    base: &TrainConfig,
) -> Result<Vec<GridCell>> {
    if epsilons.is_empty() || epoch_range.is_empty() {
        return Err(arg_err(
            "grid needs at least one epsilon and one epoch count",
        ));
    }
    let mut cells = Vec::new();
    for &eps in epsilons {
        for &epochs in epoch_range {
            let mut cfg = base.clone();
            cfg.hyper.epsilon = eps;
            cfg.hyper.epochs = epochs;
            let out = train(data, split, &cfg)?;
            let rec = out.history.iter().find(|h| h.epoch == out.best_epoch);
            cells.push(GridCell {
                epsilon: eps,
                epochs,
                best_epoch: out.best_epoch,
                val_pearson: rec.map_or(f64::NAN, |r| r.val_pearson),
                val_ssim: rec.map_or(f64::NAN, |r| r.val_ssim),
                val_loss: rec.map_or(f64::NAN, |r| objective(cfg.mode, &r.val)),
                best: false,
            });
        }
    }
    let key = |c: &GridCell| {
        if c.val_pearson.is_nan() {
            f64::NEG_INFINITY
        } else {
            c.val_pearson
        }
    };
    cells.sort_by(|a, b| key(b).total_cmp(&key(a)));
    if let Some(c) = cells.first_mut() {
        c.best = true;
    }
    Ok(cells)
}

pub fn grid_csv(cells: &[GridCell]) -> String {
    let mut out = String::from("epsilon,epochs,best_epoch,val_pearson,val_ssim,val_loss,best\n");
    for c in cells {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            c.epsilon, c.epochs, c.best_epoch, c.val_pearson, c.val_ssim, c.val_loss, c.best
        );
    }
    out
}

pub fn checkpoint_path(run_dir: &Path, epoch: usize) -> PathBuf {
    run_dir
        .join("checkpoints")
        .join(format!("epoch_{epoch}.bin"))
}
