//! Evaluation metrics, shuffle nulls, rank statistics and report rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Error, Result};
use crate::io;
use crate::objectives::ssim;
use crate::seed::rng_for;
use crate::tensor::Tensor;

/// Sample correlation; constant input gives 0 and `true` in the flag.
pub fn pearson_flagged(x: &[f64], y: &[f64]) -> Result<(f64, bool)> {
    if x.len() != y.len() {
        return Err(shape_err(format!(
            "pearson length mismatch: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::InsufficientData(
            "pearson needs at least 2 points".into(),
        ));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok((0.0, true));
    }
    Ok(((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0), false))
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    Ok(pearson_flagged(x, y)?.0)
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Sample standard deviation (n - 1); 0 for fewer than two values.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderEval {
    pub per_voxel_pearson: Vec<f64>,
    pub per_voxel_mse: Vec<f64>,
    pub mean_pearson: f64,
    pub median_pearson: f64,
    pub mse: f64,
    pub constant_voxels: usize,
}

/// Per-voxel correlation across time and element-wise MSE.
pub fn evaluate_encoder(v_true: &Tensor, v_hat: &Tensor) -> Result<EncoderEval> {
    v_true.check_same(v_hat)?;
    if v_true.ndim() != 2 {
        return Err(shape_err("evaluate_encoder expects [T, V]"));
    }
    let (t, v) = (v_true.dim(0), v_true.dim(1));
    if t < 2 {
        return Err(Error::InsufficientData(format!("need T >= 2, got {t}")));
    }
    let cols: Vec<(f64, bool, f64)> = (0..v)
        .into_par_iter()
        .map(|j| {
            let a = v_true.col(j);
            let b = v_hat.col(j);
            let (r, flag) = pearson_flagged(&a, &b).expect("equal lengths");
            let mse = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / t as f64;
            (r, flag, mse)
        })
        .collect();
    let per_voxel_pearson: Vec<f64> = cols.iter().map(|c| c.0).collect();
    let per_voxel_mse: Vec<f64> = cols.iter().map(|c| c.2).collect();
    let mse = v_true
        .data()
        .iter()
        .zip(v_hat.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / v_true.len() as f64;
    Ok(EncoderEval {
        mean_pearson: mean(&per_voxel_pearson),
        median_pearson: median(&per_voxel_pearson),
        constant_voxels: cols.iter().filter(|c| c.1).count(),
        per_voxel_pearson,
        per_voxel_mse,
        mse,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderEval {
    pub per_frame_ssim: Vec<f64>,
    pub per_frame_mse: Vec<f64>,
    pub mean_ssim: f64,
    pub median_ssim: f64,
    pub mse: f64,
}

fn frame_of(t: &Tensor, i: usize) -> Tensor {
    Tensor::new(t.shape()[1..].to_vec(), t.row(i).to_vec()).expect("frame slice")
}

fn check_frames(f_true: &Tensor, f_hat: &Tensor) -> Result<usize> {
    f_true.check_same(f_hat)?;
    if f_true.ndim() != 4 || f_true.dim(1) != 3 || f_true.dim(0) == 0 {
        return Err(shape_err(format!(
            "expected [N, 3, H, W], got {:?}",
            f_true.shape()
        )));
    }
    Ok(f_true.dim(0))
}

pub fn evaluate_decoder(f_true: &Tensor, f_hat: &Tensor) -> Result<DecoderEval> {
    let n = check_frames(f_true, f_hat)?;
    let per: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let a = frame_of(f_true, i);
            let b = frame_of(f_hat, i);
            let s = ssim(&a, &b)?;
            let m = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                / a.len() as f64;
            Ok((s, m))
        })
        .collect::<Result<_>>()?;
    let per_frame_ssim: Vec<f64> = per.iter().map(|p| p.0).collect();
    let per_frame_mse: Vec<f64> = per.iter().map(|p| p.1).collect();
    Ok(DecoderEval {
        mean_ssim: mean(&per_frame_ssim),
        median_ssim: median(&per_frame_ssim),
        mse: mean(&per_frame_mse),
        per_frame_ssim,
        per_frame_mse,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NullMetric {
    Pearson,
    Ssim,
}

/// Per-shuffle mean scores. Pearson permutes the time rows of the
/// predictions; SSIM permutes the pairing of reconstructions with targets.
pub fn null_distribution(
    metric: NullMetric,
    truth: &Tensor,
    pred: &Tensor,
    n_shuffles: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if n_shuffles == 0 {
        return Err(arg_err("n_shuffles must be >= 1"));
    }
    truth.check_same(pred)?;
    let n = truth.dim(0);
    (0..n_shuffles)
        .into_par_iter()
        .map(|k| {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng_for(seed, &format!("null/{k}")));
            let shuffled = pred.select_rows(&perm);
            match metric {
                NullMetric::Pearson => Ok(evaluate_encoder(truth, &shuffled)?.mean_pearson),
                NullMetric::Ssim => Ok(evaluate_decoder(truth, &shuffled)?.mean_ssim),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// U statistic of the first sample.
    pub u: f64,
    /// Two-sided p-value.
    pub p: f64,
    pub exact: bool,
}

/// Largest `n1 * n2` for which the exact null distribution is enumerated.
pub const EXACT_LIMIT: usize = 64;

fn check_sample(a: &[f64], b: &[f64]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(arg_err("samples must be nonempty"));
    }
    if a.iter().chain(b).any(|x| x.is_nan()) {
        return Err(arg_err("samples contain NaN"));
    }
    Ok(())
}

/// Doubled midranks of the pooled sample (integers), first `a` then `b`,
/// and the tie-group sizes.
fn doubled_ranks(a: &[f64], b: &[f64]) -> (Vec<u64>, Vec<usize>) {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by(|&i, &j| pooled[i].total_cmp(&pooled[j]));
    let mut ranks = vec![0u64; pooled.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && pooled[order[j + 1]] == pooled[order[i]] {
            j += 1;
        }
        // positions i..=j hold ranks i+1..=j+1; doubled midrank = i + j + 2
        for &k in &order[i..=j] {
            ranks[k] = (i + j + 2) as u64;
        }
        ties.push(j - i + 1);
        i = j + 1;
    }
    (ranks, ties)
}

fn u_statistic(ranks2: &[u64], n1: usize) -> f64 {
    let r2: u64 = ranks2[..n1].iter().sum();
    r2 as f64 / 2.0 - (n1 * (n1 + 1)) as f64 / 2.0
}

/// Exact two-sided p: share of all size-`n1` rank subsets whose rank sum lies
/// at least as far from its mean as the observed one.
pub fn mann_whitney_exact_p(a: &[f64], b: &[f64]) -> Result<f64> {
    check_sample(a, b)?;
    let (ranks, _) = doubled_ranks(a, b);
    let n1 = a.len();
    let n = ranks.len();
    let max_sum: usize = ranks.iter().map(|&r| r as usize).sum();
    // counts[k][s] = subsets of size k with doubled rank sum s
    let mut counts = vec![vec![0f64; max_sum + 1]; n1 + 1];
    counts[0][0] = 1.0;
    for &r in &ranks {
        let r = r as usize;
        for k in (1..=n1).rev() {
            let (lo, hi) = counts.split_at_mut(k);
            let prev = &lo[k - 1];
            let cur = &mut hi[0];
            for s in (r..=max_sum).rev() {
                cur[s] += prev[s - r];
            }
        }
    }
    let center2 = (n1 * (n + 1)) as i64;
    let observed: i64 = ranks[..n1].iter().map(|&r| r as i64).sum();
    let dev = (observed - center2).abs();
    let total: f64 = counts[n1].iter().sum();
    let extreme: f64 = counts[n1]
        .iter()
        .enumerate()
        .filter(|(s, _)| (*s as i64 - center2).abs() >= dev)
        .map(|(_, c)| c)
        .sum();
    Ok((extreme / total).min(1.0))
}

/// Normal approximation with tie-corrected variance and continuity correction.
pub fn mann_whitney_normal_p(a: &[f64], b: &[f64]) -> Result<f64> {
    check_sample(a, b)?;
    let (ranks, ties) = doubled_ranks(a, b);
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let n = n1 + n2;
    let u = u_statistic(&ranks, a.len());
    let mu = n1 * n2 / 2.0;
    let tie_term: f64 = ties.iter().map(|&t| (t as f64).powi(3) - t as f64).sum();
    let var = n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)).max(1.0));
    if var <= 0.0 {
        return Ok(1.0);
    }
    let z = ((u - mu).abs() - 0.5).max(0.0) / var.sqrt();
    Ok(statrs::function::erf::erfc(z / std::f64::consts::SQRT_2).min(1.0))
}

/// U of the first sample from midranks; p exact when `n1 * n2 <= 64`,
/// normal approximation otherwise.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MannWhitney> {
    check_sample(a, b)?;
    let (ranks, _) = doubled_ranks(a, b);
    let u = u_statistic(&ranks, a.len());
    let exact = a.len() * b.len() <= EXACT_LIMIT;
    let p = if exact {
        mann_whitney_exact_p(a, b)?
    } else {
        mann_whitney_normal_p(a, b)?
    };
    Ok(MannWhitney { u, p, exact })
}

/// `(#{a > b} - #{a < b}) / (n1 n2)` by a merge over sorted copies.
pub fn cliffs_delta(a: &[f64], b: &[f64]) -> Result<f64> {
    check_sample(a, b)?;
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    // For each a (ascending), advance pointers over b: lt = #b < a, le = #b <= a.
    let (mut lt, mut le) = (0usize, 0usize);
    let (mut greater, mut less) = (0i128, 0i128);
    for &x in &sa {
        while lt < sb.len() && sb[lt] < x {
            lt += 1;
        }
        if le < lt {
            le = lt;
        }
        while le < sb.len() && sb[le] <= x {
            le += 1;
        }
        greater += lt as i128;
        less += (sb.len() - le) as i128;
    }
    Ok((greater - less) as f64 / (sa.len() as f64 * sb.len() as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullSummary {
    pub metric: NullMetric,
    pub shuffles: usize,
    pub seed: u64,
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

impl NullSummary {
    pub fn new(metric: NullMetric, seed: u64, values: Vec<f64>) -> Self {
        Self {
            metric,
            shuffles: values.len(),
            seed,
            mean: mean(&values),
            std: std_dev(&values),
            values,
        }
    }
}

/// Test-set predictions of one movie.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalInput {
    pub movie_id: String,
    pub v_true: Tensor,
    pub v_hat: Option<Tensor>,
    pub f_true: Option<Tensor>,
    pub f_hat: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScopeEval {
    pub n_samples: usize,
    pub encoder: Option<EncoderEval>,
    pub decoder: Option<DecoderEval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEval {
    pub name: String,
    pub per_movie: BTreeMap<String, ScopeEval>,
    pub pooled: ScopeEval,
    pub null_pearson: Option<NullSummary>,
    pub null_ssim: Option<NullSummary>,
}

fn scope_eval(
    v_true: &Tensor,
    v_hat: Option<&Tensor>,
    f_true: Option<&Tensor>,
    f_hat: Option<&Tensor>,
) -> Result<ScopeEval> {
    Ok(ScopeEval {
        n_samples: v_true.dim(0),
        encoder: v_hat.map(|p| evaluate_encoder(v_true, p)).transpose()?,
        decoder: match (f_true, f_hat) {
            (Some(t), Some(h)) => Some(evaluate_decoder(t, h)?),
            _ => None,
        },
    })
}

fn concat_opt(parts: Vec<Option<&Tensor>>) -> Result<Option<Tensor>> {
    if parts.iter().any(Option::is_none) {
        return Ok(None);
    }
    let refs: Vec<&Tensor> = parts.into_iter().flatten().collect();
    Tensor::concat_rows(&refs).map(Some)
}

/// Per-movie and pooled metrics plus shuffle nulls on the pooled set.
pub fn evaluate_run(
    name: &str,
    inputs: &[EvalInput],
    shuffles: usize,
    seed: u64,
) -> Result<RunEval> {
    if inputs.is_empty() {
        return Err(arg_err("no evaluation inputs"));
    }
    let mut per_movie = BTreeMap::new();
    for m in inputs {
        per_movie.insert(
            m.movie_id.clone(),
            scope_eval(
                &m.v_true,
                m.v_hat.as_ref(),
                m.f_true.as_ref(),
                m.f_hat.as_ref(),
            )?,
        );
    }
    let v_true = Tensor::concat_rows(&inputs.iter().map(|m| &m.v_true).collect::<Vec<_>>())?;
    let v_hat = concat_opt(inputs.iter().map(|m| m.v_hat.as_ref()).collect())?;
    let f_true = concat_opt(inputs.iter().map(|m| m.f_true.as_ref()).collect())?;
    let f_hat = concat_opt(inputs.iter().map(|m| m.f_hat.as_ref()).collect())?;
    let pooled = scope_eval(&v_true, v_hat.as_ref(), f_true.as_ref(), f_hat.as_ref())?;
    let null_pearson = match (&v_hat, shuffles) {
        (Some(p), s) if s > 0 => Some(NullSummary::new(
            NullMetric::Pearson,
            seed,
            null_distribution(NullMetric::Pearson, &v_true, p, s, seed)?,
        )),
        _ => None,
    };
    let null_ssim = match (&f_true, &f_hat, shuffles) {
        (Some(t), Some(h), s) if s > 0 => Some(NullSummary::new(
            NullMetric::Ssim,
            seed,
            null_distribution(NullMetric::Ssim, t, h, s, seed)?,
        )),
        _ => None,
    };
    Ok(RunEval {
        name: name.to_string(),
        per_movie,
        pooled,
        null_pearson,
        null_ssim,
    })
}

/// Medians of the pooled distributions; `None` when the run lacks that part.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Medians {
    pub e_corr: Option<f64>,
    pub e_mse: Option<f64>,
    pub d_ssim: Option<f64>,
    pub d_mse: Option<f64>,
}

impl RunEval {
    pub fn medians(&self) -> Medians {
        let e = self.pooled.encoder.as_ref();
        let d = self.pooled.decoder.as_ref();
        Medians {
            e_corr: e.map(|e| median(&e.per_voxel_pearson)),
            e_mse: e.map(|e| median(&e.per_voxel_mse)),
            d_ssim: d.map(|d| median(&d.per_frame_ssim)),
            d_mse: d.map(|d| median(&d.per_frame_mse)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub pair: String,
    pub metric: String,
    pub u: f64,
    pub p: f64,
    pub cliffs_delta: f64,
    pub n1: usize,
    pub n2: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub runs: Vec<RunEval>,
    pub comparisons: Vec<Comparison>,
}

fn compare(pair: &str, metric: &str, a: &[f64], b: &[f64]) -> Result<Comparison> {
    let mw = mann_whitney_u(a, b)?;
    Ok(Comparison {
        pair: pair.to_string(),
        metric: metric.to_string(),
        u: mw.u,
        p: mw.p,
        cliffs_delta: cliffs_delta(a, b)?,
        n1: a.len(),
        n2: b.len(),
    })
}

/// Pairwise comparisons (every unordered pair, in run order) on per-voxel
/// correlations and per-frame SSIM wherever both runs have them.
pub fn build_report(runs: Vec<RunEval>) -> Result<EvalReport> {
    if runs.is_empty() {
        return Err(arg_err("report needs at least one run"));
    }
    let mut comparisons = Vec::new();
    for i in 0..runs.len() {
        for j in i + 1..runs.len() {
            let pair = format!("{} vs {}", runs[i].name, runs[j].name);
            if let (Some(a), Some(b)) = (&runs[i].pooled.encoder, &runs[j].pooled.encoder) {
                comparisons.push(compare(
                    &pair,
                    "E_corr",
                    &a.per_voxel_pearson,
                    &b.per_voxel_pearson,
                )?);
            }
            if let (Some(a), Some(b)) = (&runs[i].pooled.decoder, &runs[j].pooled.decoder) {
                comparisons.push(compare(
                    &pair,
                    "D_ssim",
                    &a.per_frame_ssim,
                    &b.per_frame_ssim,
                )?);
            }
        }
    }
    Ok(EvalReport { runs, comparisons })
}

fn fmt3(x: Option<f64>) -> String {
    match x {
        Some(v) => format!("{v:.3}"),
        None => "/".to_string(),
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl EvalReport {
    /// One row per run, scope and metric.
    pub fn report_csv(&self) -> String {
        let mut out = String::from("run,scope,metric,mean,median,n\n");
        for r in &self.runs {
            let scopes = r
                .per_movie
                .iter()
                .map(|(k, v)| (k.as_str(), v))
                .chain(std::iter::once(("pooled", &r.pooled)));
            for (scope, s) in scopes {
                let name = csv_field(&r.name);
                if let Some(e) = &s.encoder {
                    let _ = writeln!(
                        out,
                        "{name},{scope},pearson,{},{},{}",
                        e.mean_pearson,
                        e.median_pearson,
                        e.per_voxel_pearson.len()
                    );
                    let _ = writeln!(
                        out,
                        "{name},{scope},voxel_mse,{},{},{}",
                        e.mse,
                        median(&e.per_voxel_mse),
                        e.per_voxel_mse.len()
                    );
                }
                if let Some(d) = &s.decoder {
                    let _ = writeln!(
                        out,
                        "{name},{scope},ssim,{},{},{}",
                        d.mean_ssim,
                        d.median_ssim,
                        d.per_frame_ssim.len()
                    );
                    let _ = writeln!(
                        out,
                        "{name},{scope},frame_mse,{},{},{}",
                        d.mse,
                        median(&d.per_frame_mse),
                        d.per_frame_mse.len()
                    );
                }
            }
            for n in [&r.null_pearson, &r.null_ssim].into_iter().flatten() {
                let metric = match n.metric {
                    NullMetric::Pearson => "null_pearson",
                    NullMetric::Ssim => "null_ssim",
                };
                let _ = writeln!(
                    out,
                    "{},pooled,{metric},{},{},{}",
                    csv_field(&r.name),
                    n.mean,
                    median(&n.values),
                    n.shuffles
                );
            }
        }
        out
    }

    pub fn comparisons_csv(&self) -> String {
        let mut out = String::from("pair,metric,u,p,cliffs_delta,n1,n2\n");
        for c in &self.comparisons {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                csv_field(&c.pair),
                c.metric,
                c.u,
                c.p,
                c.cliffs_delta,
                c.n1,
                c.n2
            );
        }
        out
    }

    /// Metrics as rows, runs as columns, medians to three decimals; `/` marks
    /// a metric the run does not have.
    pub fn table_csv(&self) -> String {
        let mut out = String::from("metric");
        for r in &self.runs {
            out.push(',');
            out.push_str(&csv_field(&r.name));
        }
        out.push('\n');
        let meds: Vec<Medians> = self.runs.iter().map(RunEval::medians).collect();
        let rows: [(&str, fn(&Medians) -> Option<f64>); 4] = [
            ("E_corr", |m| m.e_corr),
            ("E_mse", |m| m.e_mse),
            ("D_ssim", |m| m.d_ssim),
            ("D_mse", |m| m.d_mse),
        ];
        for (label, get) in rows {
            out.push_str(label);
            for m in &meds {
                out.push(',');
                out.push_str(&fmt3(get(m)));
            }
            out.push('\n');
        }
        out
    }

    /// Writes report.csv, comparisons.csv, table.csv, report.json and one
    /// scatter plot per metric family into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        io::write_text(&dir.join("report.csv"), &self.report_csv())?;
        io::write_text(&dir.join("comparisons.csv"), &self.comparisons_csv())?;
        io::write_text(&dir.join("table.csv"), &self.table_csv())?;
        io::write_json(&dir.join("report.json"), self)?;
        for r in &self.runs {
            let stem = sanitize(&r.name);
            if r.pooled.encoder.is_some() {
                io::write_text(
                    &dir.join(format!("{stem}_pearson.svg")),
                    &scatter_svg(r, NullMetric::Pearson),
                )?;
            }
            if r.pooled.decoder.is_some() {
                io::write_text(
                    &dir.join(format!("{stem}_ssim.svg")),
                    &scatter_svg(r, NullMetric::Ssim),
                )?;
            }
        }
        Ok(())
    }
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Per-movie points, the pooled point, null points and the null mean line.
pub fn scatter_svg(run: &RunEval, metric: NullMetric) -> String {
    let pick = |s: &ScopeEval| match metric {
        NullMetric::Pearson => s.encoder.as_ref().map(|e| e.mean_pearson),
        NullMetric::Ssim => s.decoder.as_ref().map(|d| d.mean_ssim),
    };
    let null = match metric {
        NullMetric::Pearson => run.null_pearson.as_ref(),
        NullMetric::Ssim => run.null_ssim.as_ref(),
    };
    let movies: Vec<(&String, f64)> = run
        .per_movie
        .iter()
        .filter_map(|(k, s)| pick(s).map(|v| (k, v)))
        .collect();
    let pooled = pick(&run.pooled);
    let mut values: Vec<f64> = movies.iter().map(|m| m.1).chain(pooled).collect();
    if let Some(n) = null {
        values.extend(&n.values);
    }
    let lo = values
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
        .min(0.0);
    let hi = values
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
        .max(lo + 1e-6);
    let (w, h, pad) = (60.0 * (movies.len() + 2) as f64 + 80.0, 320.0, 40.0);
    let y = |v: f64| h - pad - (v - lo) / (hi - lo) * (h - 2.0 * pad);
    let x = |i: usize| pad + 40.0 + 60.0 * i as f64;
    let label = match metric {
        NullMetric::Pearson => "mean pearson",
        NullMetric::Ssim => "mean ssim",
    };
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{pad}" y="16">{} ({label})</text>"#,
        xml_escape(&run.name)
    );
    let _ = writeln!(
        s,
        r#"<line x1="{pad}" y1="{:.2}" x2="{pad}" y2="{:.2}" stroke="black"/>"#,
        y(lo),
        y(hi)
    );
    for (v, t) in [(lo, lo), (hi, hi)] {
        let _ = writeln!(s, r#"<text x="2" y="{:.2}">{t:.3}</text>"#, y(v));
    }
    let mut col = 0;
    for (id, v) in &movies {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="steelblue"/>"#,
            x(col),
            y(*v)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            x(col),
            h - 12.0,
            xml_escape(id)
        );
        col += 1;
    }
    if let Some(p) = pooled {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="5" fill="darkred"/>"#,
            x(col),
            y(p)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">pooled</text>"#,
            x(col),
            h - 12.0
        );
        col += 1;
    }
    if let Some(n) = null {
        for v in &n.values {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="gray" fill-opacity="0.5"/>"#,
                x(col),
                y(*v)
            );
        }
        let _ = writeln!(
            s,
            r#"<line x1="{pad}" y1="{0:.2}" x2="{1:.2}" y2="{0:.2}" stroke="gray" stroke-dasharray="4 3"/>"#,
            y(n.mean),
            x(col) + 20.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">null</text>"#,
            x(col),
            h - 12.0
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pearson_examples() {
        let x: Vec<f64> = (0..10).map(|i| i as f64 * 0.7 - 1.0).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!((pearson(&x, &y).unwrap() - 1.0).abs() < 1e-15);
        let z: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &z).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(pearson_flagged(&x, &[3.0; 10]).unwrap(), (0.0, true));
        assert!(pearson(&x, &y[..5]).is_err());
        assert!(pearson(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn pearson_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..1000).map(|_| rng.random_range(-5.0..5.0)).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|v| v * 0.3 + rng.random_range(-5.0..5.0))
            .collect();
        // Oracle via z-scores.
        let z = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let s = (v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
            v.iter().map(|a| (a - m) / s).collect::<Vec<_>>()
        };
        let oracle = z(&x).iter().zip(z(&y)).map(|(a, b)| a * b).sum::<f64>() / 1000.0;
        assert!((pearson(&x, &y).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn encoder_eval_identity_and_shuffle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = Tensor::from_fn(&[300, 20], |_| rng.random_range(-1.0..1.0));
        let e = evaluate_encoder(&v, &v).unwrap();
        assert!((e.mean_pearson - 1.0).abs() < 1e-12 && e.mse == 0.0);
        let mut perm: Vec<usize> = (0..300).collect();
        perm.shuffle(&mut rng);
        let s = evaluate_encoder(&v, &v.select_rows(&perm)).unwrap();
        assert!(s.mean_pearson.abs() < 0.05);
        assert!(evaluate_encoder(&v.select_rows(&[0]), &v.select_rows(&[1])).is_err());
    }

    #[test]
    fn decoder_eval_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = Tensor::from_fn(&[4, 3, 16, 16], |_| rng.random::<f64>());
        let d = evaluate_decoder(&f, &f).unwrap();
        assert_eq!(d.mean_ssim, 1.0);
        assert_eq!(d.mse, 0.0);
        let nulls = null_distribution(NullMetric::Ssim, &f, &f, 5, 1).unwrap();
        assert!(nulls.iter().all(|&x| x <= 1.0));
    }

    #[test]
    fn null_is_seed_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = Tensor::from_fn(&[50, 6], |_| rng.random_range(-1.0..1.0));
        let p = Tensor::from_fn(&[50, 6], |_| rng.random_range(-1.0..1.0));
        let a = null_distribution(NullMetric::Pearson, &v, &p, 10, 9).unwrap();
        assert_eq!(
            a,
            null_distribution(NullMetric::Pearson, &v, &p, 10, 9).unwrap()
        );
        assert_ne!(
            a,
            null_distribution(NullMetric::Pearson, &v, &p, 10, 10).unwrap()
        );
        assert!(null_distribution(NullMetric::Pearson, &v, &p, 0, 9).is_err());
    }

    #[test]
    fn mann_whitney_examples() {
        let r = mann_whitney_u(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(r.u, 0.0);
        assert!(r.exact);
        // All 6 assignments of ranks to a size-2 group; sums 3 and 7 are most extreme.
        assert!((r.p - 2.0 / 6.0).abs() < 1e-15);
        assert!(mann_whitney_u(&[], &[1.0]).is_err());
    }

    /// Brute force over every size-n1 subset of the pooled positions.
    fn brute_exact_p(a: &[f64], b: &[f64]) -> f64 {
        let (ranks, _) = doubled_ranks(a, b);
        let n = ranks.len();
        let n1 = a.len();
        let center = (n1 * (n + 1)) as i64;
        let obs: i64 = ranks[..n1].iter().map(|&r| r as i64).sum();
        let (mut hit, mut total) = (0u64, 0u64);
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != n1 {
                continue;
            }
            let s: i64 = (0..n)
                .filter(|i| mask & (1 << i) != 0)
                .map(|i| ranks[i] as i64)
                .sum();
            total += 1;
            if (s - center).abs() >= (obs - center).abs() {
                hit += 1;
            }
        }
        hit as f64 / total as f64
    }

    #[test]
    fn exact_p_equals_enumeration_for_small_designs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n1 in 1..=16usize {
            for n2 in 1..=16usize {
                if n1 * n2 > 16 {
                    continue;
                }
                for trial in 0..4 {
                    // Half the trials draw from a small integer set to force ties.
                    let draw = |rng: &mut ChaCha8Rng| {
                        if trial % 2 == 0 {
                            rng.random_range(0..4) as f64
                        } else {
                            rng.random::<f64>()
                        }
                    };
                    let a: Vec<f64> = (0..n1).map(|_| draw(&mut rng)).collect();
                    let b: Vec<f64> = (0..n2).map(|_| draw(&mut rng)).collect();
                    let got = mann_whitney_u(&a, &b).unwrap();
                    assert!(got.exact);
                    assert_eq!(got.p, brute_exact_p(&a, &b), "{a:?} {b:?}");
                }
            }
        }
    }

    #[test]
    fn identical_samples() {
        let a = [0.3, 0.1, 0.9, 0.5, 0.7, 0.2, 0.8, 0.4, 0.6];
        let r = mann_whitney_u(&a, &a).unwrap();
        assert_eq!(r.p, 1.0);
        assert_eq!(cliffs_delta(&a, &a).unwrap(), 0.0);
        let big: Vec<f64> = (0..100).map(|i| (i * 37 % 101) as f64).collect();
        let r = mann_whitney_u(&big, &big).unwrap();
        assert!(!r.exact);
        assert!(r.p > 0.99);
    }

    #[test]
    fn cliffs_examples() {
        assert_eq!(cliffs_delta(&[5.0, 6.0], &[1.0, 2.0]).unwrap(), 1.0);
        let d = cliffs_delta(&[1.0, 2.0, 3.0], &[2.0, 3.0, 4.0]).unwrap();
        assert!((d - (-5.0 / 9.0)).abs() < 1e-15);
        assert!(cliffs_delta(&[1.0], &[]).is_err());
    }

    fn brute_cliffs(a: &[f64], b: &[f64]) -> f64 {
        let mut s = 0i64;
        for x in a {
            for y in b {
                s += (x > y) as i64 - (x < y) as i64;
            }
        }
        s as f64 / (a.len() * b.len()) as f64
    }

    proptest! {
        #[test]
        fn cliffs_matches_brute_force(
            a in prop::collection::vec(0u8..6, 1..50),
            b in prop::collection::vec(0u8..6, 1..50),
            dense in any::<bool>(),
        ) {
            let conv = |v: &[u8]| v.iter().map(|&x| if dense { x as f64 } else { x as f64 * 1.37 + 0.1 }).collect::<Vec<_>>();
            let (a, b) = (conv(&a), conv(&b));
            prop_assert_eq!(cliffs_delta(&a, &b).unwrap(), brute_cliffs(&a, &b));
        }

        #[test]
        fn pearson_affine_invariance(
            xs in prop::collection::vec(-10.0f64..10.0, 3..40),
            scale in 0.1f64..10.0,
            shift in -5.0f64..5.0,
        ) {
            let ys: Vec<f64> = xs.iter().enumerate().map(|(i, x)| x.sin() + i as f64 * 0.1).collect();
            let (r, flag) = pearson_flagged(&xs, &ys).unwrap();
            prop_assume!(!flag);
            let xt: Vec<f64> = xs.iter().map(|x| scale * x + shift).collect();
            prop_assert!((pearson(&xt, &ys).unwrap() - r).abs() < 1e-12);
            prop_assert!((pearson(&ys, &xt).unwrap() - r).abs() < 1e-12);
        }

        #[test]
        fn median_matches_sort_oracle(xs in prop::collection::vec(-1e3f64..1e3, 1..60)) {
            let mut s = xs.clone();
            s.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = s.len();
            let want = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
            prop_assert_eq!(median(&xs), want);
        }
    }

    fn perfect_input(id: &str, seed: u64, decoder: bool) -> EvalInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = Tensor::from_fn(&[20, 8], |_| rng.random_range(-1.0..1.0));
        let f = Tensor::from_fn(&[20, 3, 12, 12], |_| rng.random::<f64>());
        EvalInput {
            movie_id: id.into(),
            v_hat: Some(v.clone()),
            v_true: v,
            f_true: decoder.then(|| f.clone()),
            f_hat: decoder.then_some(f),
        }
    }

    #[test]
    fn perfect_run_medians() {
        let run = evaluate_run(
            "E-D",
            &[perfect_input("a", 1, true), perfect_input("b", 2, true)],
            3,
            0,
        )
        .unwrap();
        let m = run.medians();
        assert_eq!(
            (m.e_corr, m.e_mse, m.d_ssim, m.d_mse),
            (Some(1.0), Some(0.0), Some(1.0), Some(0.0))
        );
        assert_eq!(
            run.pooled.n_samples,
            run.per_movie.values().map(|s| s.n_samples).sum::<usize>()
        );
        assert_eq!(run.null_pearson.as_ref().unwrap().shuffles, 3);
    }

    #[test]
    fn identical_runs_compare_neutral() {
        let a = evaluate_run("A", &[perfect_input("m", 5, true)], 0, 0).unwrap();
        let mut b = a.clone();
        b.name = "B".into();
        let rep = build_report(vec![a, b]).unwrap();
        assert_eq!(rep.comparisons.len(), 2);
        for c in &rep.comparisons {
            assert_eq!(c.cliffs_delta, 0.0);
            assert!(c.p > 0.99);
        }
    }

    fn noisy_input(id: &str, seed: u64, noise: f64, decoder: bool) -> EvalInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = Tensor::from_fn(&[30, 10], |_| rng.random_range(-1.0..1.0));
        let vh = v.map(|x| x + noise * (x * 7.3).sin());
        let f = Tensor::from_fn(&[30, 3, 12, 12], |i| ((i % 17) as f64) / 17.0);
        let fh = f.map(|x| (x * (1.0 - noise) + 0.5 * noise).clamp(0.0, 1.0));
        EvalInput {
            movie_id: id.into(),
            v_true: v,
            v_hat: Some(vh),
            f_true: decoder.then(|| f.clone()),
            f_hat: decoder.then_some(fh),
        }
    }

    #[test]
    fn four_run_table_layout() {
        let runs = vec![
            evaluate_run("E-D (38)", &[noisy_input("m0", 1, 0.1, true)], 0, 0).unwrap(),
            evaluate_run("E-D (128)", &[noisy_input("m0", 1, 0.3, true)], 0, 0).unwrap(),
            evaluate_run("E (38)", &[noisy_input("m0", 1, 0.5, false)], 0, 0).unwrap(),
            evaluate_run("E (128)", &[noisy_input("m0", 1, 0.7, false)], 0, 0).unwrap(),
        ];
        let rep = build_report(runs).unwrap();
        let table = rep.table_csv();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines[0], "metric,E-D (38),E-D (128),E (38),E (128)");
        let labels: Vec<&str> = lines[1..]
            .iter()
            .map(|l| l.split(',').next().unwrap())
            .collect();
        assert_eq!(labels, ["E_corr", "E_mse", "D_ssim", "D_mse"]);
        for l in &lines[1..] {
            assert_eq!(l.split(',').count(), 5);
        }
        for l in &lines[3..] {
            let cells: Vec<&str> = l.split(',').collect();
            assert_eq!(&cells[3..], ["/", "/"]);
            assert_ne!(cells[1], "/");
        }
        // 6 encoder pairs, 1 decoder pair.
        assert_eq!(rep.comparisons.len(), 7);
        let csv = rep.comparisons_csv();
        assert!(csv.starts_with("pair,metric,u,p,cliffs_delta,n1,n2\n"));
        assert_eq!(csv.lines().count(), 8);
    }

    #[test]
    fn report_files_written() {
        let dir = tempfile::tempdir().unwrap();
        let rep = build_report(vec![evaluate_run(
            "E",
            &[perfect_input("m", 3, false)],
            4,
            1,
        )
        .unwrap()])
        .unwrap();
        rep.write(dir.path()).unwrap();
        for f in [
            "report.csv",
            "comparisons.csv",
            "table.csv",
            "report.json",
            "E_pearson.svg",
        ] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let table = std::fs::read_to_string(dir.path().join("table.csv")).unwrap();
        assert_eq!(
            table,
            "metric,E\nE_corr,1.000\nE_mse,0.000\nD_ssim,/\nD_mse,/\n"
        );
    }
}
