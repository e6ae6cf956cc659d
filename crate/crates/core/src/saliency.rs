//! SSIM-gradient saliency of decoder inputs and per-region aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Result};
use crate::fmri::top_k_indices;
use crate::io;
use crate::nn::{Decoder, ModelParams};
use crate::objectives::ssim_with_grad;
use crate::tensor::Tensor;

pub const DEFAULT_TOP_FRACTION: f64 = 0.20;
const BATCH: usize = 32;

/// Signed `∂ SSIM(target_n, decoder(v_n)) / ∂ v_n`, `[N, V]`, eval-mode decoder.
pub fn ssim_input_gradients(
    decoder: &Decoder,
    params: &ModelParams,
    voxel_inputs: &Tensor,
    targets: &Tensor,
) -> Result<Tensor> {
    if voxel_inputs.ndim() != 2 || voxel_inputs.dim(1) != decoder.spec.voxels {
        return Err(shape_err(format!(
            "voxel inputs {:?} do not match decoder width {}",
            voxel_inputs.shape(),
            decoder.spec.voxels
        )));
    }
    let n = voxel_inputs.dim(0);
    let (h, w) = decoder.spec.output_size();
    if targets.shape() != [n, 3, h, w] {
        return Err(shape_err(format!(
            "targets {:?} do not match [{n}, 3, {h}, {w}]",
            targets.shape()
        )));
    }
    let mut parts = Vec::new();
    for start in (0..n).step_by(BATCH) {
        let idx: Vec<usize> = (start..(start + BATCH).min(n)).collect();
        let v = voxel_inputs.select_rows(&idx);
        let (f_hat, tape) = decoder.forward(params, &v, false, None)?;
        let grads: Vec<Tensor> = idx
            .par_iter()
            .enumerate()
            .map(|(k, &i)| {
                let t = Tensor::new(vec![3, h, w], targets.row(i).to_vec())?;
                let g = Tensor::new(vec![3, h, w], f_hat.row(k).to_vec())?;
                Ok(ssim_with_grad(&t, &g)?.1)
            })
            .collect::<Result<_>>()?;
        let g = Tensor::stack_rows(&[3, h, w], grads.iter().map(Tensor::data))?;
        parts.push(decoder.backward(params, &tape, g, false)?.0);
    }
    Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
}

/// Pairwise sum over ascending values: independent of input order, and a
/// duplicated multiset sums to exactly twice the original.
fn sorted_pairwise_sum(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    while xs.len() > 1 {
        xs = xs
            .chunks(2)
            .map(|c| if c.len() == 2 { c[0] + c[1] } else { c[0] })
            .collect();
    }
    xs.first().copied().unwrap_or(0.0)
}

/// `score_j = Σ_n |∂ SSIM_n / ∂ v_n[j]|`.
pub fn compute_saliency(
    decoder: &Decoder,
    params: &ModelParams,
    voxel_inputs: &Tensor,
    targets: &Tensor,
) -> Result<Vec<f64>> {
    let g = ssim_input_gradients(decoder, params, voxel_inputs, targets)?;
    let (n, v) = (g.dim(0), g.dim(1));
    Ok((0..v)
        .into_par_iter()
        .map(|j| sorted_pairwise_sum((0..n).map(|i| g.data()[i * v + j].abs()).collect()))
        .collect())
}

/// The `ceil(fraction * V)` largest scores, ties to the lower voxel id.
pub fn top_fraction_mask(scores: &[f64], fraction: f64) -> Result<Vec<bool>> {
    if scores.is_empty() {
        return Err(arg_err("empty saliency scores"));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(arg_err(format!("top fraction {fraction} outside (0, 1]")));
    }
    let k = ((fraction * scores.len() as f64 - 1e-9).ceil() as usize).clamp(1, scores.len());
    let mut mask = vec![false; scores.len()];
    for i in top_k_indices(scores, k) {
        mask[i] = true;
    }
    Ok(mask)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRow {
    pub region: String,
    pub a: usize,
    pub b: usize,
    /// Percentages.
    pub a_ratio: f64,
    pub b_ratio: f64,
    pub b_over_a: f64,
}

/// Rows in order of first appearance of each label.
pub fn region_contributions(top_mask: &[bool], region_labels: &[String]) -> Result<Vec<RegionRow>> {
    if top_mask.len() != region_labels.len() {
        return Err(shape_err(format!(
            "{} voxels but {} region labels",
            top_mask.len(),
            region_labels.len()
        )));
    }
    if let Some(i) = region_labels.iter().position(|l| l.is_empty()) {
        return Err(arg_err(format!("voxel {i} has no region label")));
    }
    let mut order: Vec<&str> = Vec::new();
    let mut counts: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (sel, label) in top_mask.iter().zip(region_labels) {
        let e = counts.entry(label).or_insert_with(|| {
            order.push(label);
            (0, 0)
        });
        e.0 += 1;
        e.1 += *sel as usize;
    }
    let total_a = top_mask.len() as f64;
    let total_b = top_mask.iter().filter(|&&s| s).count() as f64;
    Ok(order
        .into_iter()
        .map(|r| {
            let (a, b) = counts[r];
            RegionRow {
                region: r.to_string(),
                a,
                b,
                a_ratio: 100.0 * a as f64 / total_a,
                b_ratio: if total_b > 0.0 {
                    100.0 * b as f64 / total_b
                } else {
                    0.0
                },
                b_over_a: 100.0 * b as f64 / a as f64,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyResult {
    pub per_voxel_score: Vec<f64>,
    pub top_fraction: f64,
    pub top_mask: Vec<bool>,
    pub region_rows: Vec<RegionRow>,
}

pub fn analyze(
    decoder: &Decoder,
    params: &ModelParams,
    voxel_inputs: &Tensor,
    targets: &Tensor,
    region_labels: &[String],
    top_fraction: f64,
) -> Result<SaliencyResult> {
    let scores = compute_saliency(decoder, params, voxel_inputs, targets)?;
    let top_mask = top_fraction_mask(&scores, top_fraction)?;
    let region_rows = region_contributions(&top_mask, region_labels)?;
    Ok(SaliencyResult {
        per_voxel_score: scores,
        top_fraction,
        top_mask,
        region_rows,
    })
}

impl SaliencyResult {
    pub fn saliency_csv(&self, voxel_ids: &[usize], region_labels: &[String]) -> String {
        let mut out = String::from("voxel_id,region,score,selected\n");
        for (i, s) in self.per_voxel_score.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                voxel_ids[i], region_labels[i], s, self.top_mask[i]
            );
        }
        out
    }

    pub fn regions_csv(&self) -> String {
        let mut out = String::from("region,A,B,A_ratio,B_ratio,B_over_A\n");
        for r in &self.region_rows {
            let _ = writeln!(
                out,
                "{},{},{},{:.1},{:.1},{:.1}",
                r.region, r.a, r.b, r.a_ratio, r.b_ratio, r.b_over_a
            );
        }
        out
    }

    /// saliency.csv, regions.csv and a voxel_id → score JSON map.
    pub fn write(&self, dir: &Path, voxel_ids: &[usize], region_labels: &[String]) -> Result<()> {
        if voxel_ids.len() != self.per_voxel_score.len() || region_labels.len() != voxel_ids.len() {
            return Err(shape_err("voxel ids and labels must cover every score"));
        }
        io::write_text(
            &dir.join("saliency.csv"),
            &self.saliency_csv(voxel_ids, region_labels),
        )?;
        io::write_text(&dir.join("regions.csv"), &self.regions_csv())?;
        let map: BTreeMap<String, f64> = voxel_ids
            .iter()
            .zip(&self.per_voxel_score)
            .map(|(id, s)| (id.to_string(), *s))
            .collect();
        io::write_json(&dir.join("saliency.json"), &map)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{DecoderSpec, UpsampleBlock};
    use crate::objectives::ssim;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_linear(voxels: usize) -> Decoder {
        Decoder::new(DecoderSpec {
            voxels,
            entry_channels: 1,
            entry_height: 12,
            entry_width: 12,
            upsample_blocks: vec![],
            output_kernel: 3,
            use_batch_norm: false,
        })
        .unwrap()
    }

    fn small_decoder(voxels: usize) -> Decoder {
        Decoder::new(DecoderSpec {
            voxels,
            entry_channels: 2,
            entry_height: 8,
            entry_width: 8,
            upsample_blocks: vec![UpsampleBlock {
                scale: 2,
                out_channels: 3,
                kernel: 3,
            }],
            output_kernel: 3,
            use_batch_norm: true,
        })
        .unwrap()
    }

    fn inputs(n: usize, v: usize, hw: usize, seed: u64) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            Tensor::from_fn(&[n, v], |_| rng.random_range(-1.0..1.0)),
            Tensor::from_fn(&[n, 3, hw, hw], |_| rng.random::<f64>()),
        )
    }

    #[test]
    fn dead_input_scores_zero() {
        let dec = small_decoder(5);
        let mut p = dec.init_params(1);
        let w = p.get_mut("entry.weight").unwrap();
        let cols = w.dim(1);
        assert_eq!(cols, 5);
        for r in 0..w.dim(0) {
            w.data_mut()[r * cols + 2] = 0.0;
        }
        let (v, f) = inputs(6, 5, 16, 2);
        let s = compute_saliency(&dec, &p, &v, &f).unwrap();
        assert_eq!(s[2], 0.0);
        assert!(s.iter().enumerate().all(|(j, &x)| j == 2 || x > 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let dec = tiny_linear(4);
        let p = dec.init_params(3);
        let (v, f) = inputs(1, 4, 12, 4);
        let s = compute_saliency(&dec, &p, &v, &f).unwrap();
        let target = Tensor::new(vec![3, 12, 12], f.data().to_vec()).unwrap();
        let score = |x: &Tensor| {
            let out = dec.infer(&p, x).unwrap();
            ssim(
                &target,
                &Tensor::new(vec![3, 12, 12], out.into_data()).unwrap(),
            )
            .unwrap()
        };
        let h = 1e-5;
        for j in 0..4 {
            let mut a = v.clone();
            a.data_mut()[j] += h;
            let mut b = v.clone();
            b.data_mut()[j] -= h;
            let fd = ((score(&a) - score(&b)) / (2.0 * h)).abs();
            assert!(
                (fd - s[j]).abs() <= 1e-4 * fd.max(1e-10),
                "voxel {j}: fd {fd} vs {}",
                s[j]
            );
        }
    }

    #[test]
    fn duplicated_samples_double_exactly() {
        let dec = small_decoder(7);
        let p = dec.init_params(5);
        let (v, f) = inputs(9, 7, 16, 6);
        let s1 = compute_saliency(&dec, &p, &v, &f).unwrap();
        let idx: Vec<usize> = (0..9).chain(0..9).collect();
        let s2 = compute_saliency(&dec, &p, &v.select_rows(&idx), &f.select_rows(&idx)).unwrap();
        for (a, b) in s1.iter().zip(&s2) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn voxel_permutation_equivariance() {
        let dec = small_decoder(6);
        let p = dec.init_params(7);
        let (v, f) = inputs(5, 6, 16, 8);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let mut pp = p.clone();
        let w = p.get("entry.weight").unwrap();
        let wp = pp.get_mut("entry.weight").unwrap();
        for r in 0..w.dim(0) {
            for (new, &old) in perm.iter().enumerate() {
                wp.data_mut()[r * 6 + new] = w.data()[r * 6 + old];
            }
        }
        let vp = v.select_cols(&perm).unwrap();
        let s = compute_saliency(&dec, &p, &v, &f).unwrap();
        let sp = compute_saliency(&dec, &pp, &vp, &f).unwrap();
        // The first layer sums in a different order, so equal up to rounding.
        for (new, &old) in perm.iter().enumerate() {
            assert!((sp[new] - s[old]).abs() <= 1e-12 * s[old].abs());
        }
        assert!(s.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn top_mask_examples() {
        let scores: Vec<f64> = (1..=10).map(f64::from).collect();
        let m = top_fraction_mask(&scores, 0.2).unwrap();
        let picked: Vec<f64> = scores
            .iter()
            .zip(&m)
            .filter(|(_, &s)| s)
            .map(|(x, _)| *x)
            .collect();
        assert_eq!(picked, vec![9.0, 10.0]);
        assert!(top_fraction_mask(&scores, 1.0).unwrap().iter().all(|&x| x));
        assert!(top_fraction_mask(&[], 0.2).is_err());
        assert!(top_fraction_mask(&scores, 0.0).is_err());
        // ceil: 3 of 11
        assert_eq!(
            top_fraction_mask(&[1.0; 11], 0.2).unwrap(),
            [vec![true; 3], vec![false; 8]].concat()
        );
    }

    #[test]
    fn top_mask_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let scores: Vec<f64> = (0..1000)
            .map(|_| (rng.random_range(0..200) as f64) * 0.5)
            .collect();
        let m = top_fraction_mask(&scores, 0.2).unwrap();
        let mut order: Vec<usize> = (0..1000).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        let mut want = vec![false; 1000];
        for &i in &order[..200] {
            want[i] = true;
        }
        assert_eq!(m, want);
    }

    #[test]
    fn region_rows_forced_arithmetic() {
        let labels: Vec<String> = ["r1"; 3]
            .iter()
            .chain(["r2"; 7].iter())
            .map(|s| s.to_string())
            .collect();
        let mut mask = vec![true, true, true];
        mask.extend([true, false, false, false, false, false, false]);
        let rows = region_contributions(&mask, &labels).unwrap();
        assert_eq!((rows[0].a, rows[0].b, rows[1].a, rows[1].b), (3, 3, 7, 1));
        assert!((rows[0].a_ratio - 30.0).abs() < 1e-12 && (rows[1].a_ratio - 70.0).abs() < 1e-12);
        assert!((rows[0].b_ratio - 75.0).abs() < 1e-12 && (rows[1].b_ratio - 25.0).abs() < 1e-12);
        assert!((rows[0].b_over_a - 100.0).abs() < 1e-12);
        assert!((rows[1].b_over_a - 100.0 / 7.0).abs() < 1e-12);
        assert!(region_contributions(&mask[..9], &labels).is_err());
    }

    #[test]
    fn ratio_columns_sum_to_hundred() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let names = ["Calc", "Fusi", "Ling", "Oc.M", "Other"];
        for _ in 0..50 {
            let v = rng.random_range(5..300);
            let labels: Vec<String> = (0..v)
                .map(|_| names[rng.random_range(0..5)].to_string())
                .collect();
            let scores: Vec<f64> = (0..v).map(|_| rng.random::<f64>()).collect();
            let mask = top_fraction_mask(&scores, 0.2).unwrap();
            let rows = region_contributions(&mask, &labels).unwrap();
            let sa: f64 = rows.iter().map(|r| r.a_ratio).sum();
            let sb: f64 = rows.iter().map(|r| r.b_ratio).sum();
            assert!((sa - 100.0).abs() < 1e-9 && (sb - 100.0).abs() < 1e-9);
            assert_eq!(rows.iter().map(|r| r.a).sum::<usize>(), v);
            assert_eq!(
                rows.iter().map(|r| r.b).sum::<usize>(),
                mask.iter().filter(|&&m| m).count()
            );
        }
    }

    #[test]
    fn shape_mismatch_errors() {
        let dec = small_decoder(4);
        let p = dec.init_params(0);
        let (v, f) = inputs(3, 4, 16, 1);
        assert!(compute_saliency(&dec, &p, &v.select_rows(&[0, 1]), &f).is_err());
        assert!(compute_saliency(&dec, &p, &Tensor::zeros(&[3, 5]), &f).is_err());
    }
}
