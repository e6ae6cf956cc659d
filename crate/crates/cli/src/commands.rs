use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use filmvox::eval::{build_report, evaluate_run, EvalInput, RunEval};
use filmvox::fmri::{
    align_delay, average_subjects, compute_snr, make_split, read_mask, read_series,
    read_subject_stack, write_mask, write_series, zscore_voxels, FmriHeader, SplitPlan,
    SubjectStack, VoxelMask, VoxelSeries,
};
use filmvox::io::{pair_paths, read_json, write_json};
use filmvox::nn::{Decoder, DecoderSpec, EncoderSpec};
use filmvox::saliency;
use filmvox::stimulus::{
    chunk_movie_with_target, read_chunks, read_movie_dir, resample_movie, write_chunks,
    MovieSidecar, FRAMES_DIR, SIDECAR_NAME,
};
use filmvox::synth::{make_synth_dataset, write_synth_dataset, RegionLabels, LABELS_FILE};
use filmvox::trainer::{
    load_model, predict, train_in_dir, MovieData, Predictions, SampleRef, TrainConfig, TrainData,
};
use filmvox::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::{Architecture, MaskPolicy, PipelineConfig, SaliencyInput};
use crate::manifest::{write_manifest, Manifest, RunLock, INPUTS_FILE};
use crate::{CliError, Result};

pub const CONFIG_FILE: &str = "config.json";
pub const EVAL_DIR: &str = "eval";
pub const SALIENCY_DIR: &str = "saliency";
pub const RUN_EVAL_FILE: &str = "run_eval.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Inputs {
    data_dir: PathBuf,
}

fn require_file(p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(CliError::Missing(format!("{} not found", p.display())))
    }
}

/// Shape summary of a raw dataset directory.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSummary {
    pub movies: Vec<String>,
    pub subjects: usize,
    pub voxels: usize,
    pub tr_seconds: f64,
    pub trs: BTreeMap<String, usize>,
}

/// Check the raw layout (`movies/<id>/`, `fmri/<id>.{bin,json}`,
/// `labels.json`) for consistency without loading payloads.
pub fn validate_raw_dataset(dir: &Path) -> Result<RawSummary> {
    let fdir = dir.join("fmri");
    if !fdir.is_dir() {
        return Err(CliError::Missing(format!("{} not found", fdir.display())));
    }
    let mut movies: Vec<String> = fs::read_dir(&fdir)
        .map_err(|e| filmvox::Error::io(&fdir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    movies.sort();
    if movies.is_empty() {
        return Err(filmvox::Error::InsufficientData(format!(
            "no fMRI headers in {}",
            fdir.display()
        ))
        .into());
    }
    let labels_path = dir.join(LABELS_FILE);
    require_file(&labels_path)?;
    let labels: RegionLabels = read_json(&labels_path)?;
    let mut summary: Option<RawSummary> = None;
    for id in &movies {
        let (bin, json) = pair_paths(&fdir, id);
        require_file(&bin)?;
        let h: FmriHeader = read_json(&json)?;
        let fmt = |m: String| CliError::Core(filmvox::Error::Format(m));
        if &h.movie_id != id {
            return Err(fmt(format!(
                "{}: header names movie {:?}",
                json.display(),
                h.movie_id
            )));
        }
        let expect = (h.subjects * h.trs * h.voxels * 4) as u64;
        let got = fs::metadata(&bin)
            .map_err(|e| filmvox::Error::io(&bin, e))?
            .len();
        if got != expect {
            return Err(fmt(format!(
                "{}: {got} bytes, header implies {expect}",
                bin.display()
            )));
        }
        let side_path = dir.join("movies").join(id).join(SIDECAR_NAME);
        require_file(&side_path)?;
        let side: MovieSidecar = read_json(&side_path)?;
        if &side.movie_id != id {
            return Err(fmt(format!(
                "{}: sidecar names movie {:?}",
                side_path.display(),
                side.movie_id
            )));
        }
        let frames_dir = dir.join("movies").join(id).join(FRAMES_DIR);
        let n_frames = fs::read_dir(&frames_dir)
            .map_err(|e| filmvox::Error::io(&frames_dir, e))?
            .count();
        if n_frames != side.frame_count || n_frames == 0 {
            return Err(fmt(format!(
                "{}: {n_frames} frames on disk, sidecar lists {}",
                frames_dir.display(),
                side.frame_count
            )));
        }
        let s = summary.get_or_insert_with(|| RawSummary {
            movies: movies.clone(),
            subjects: h.subjects,
            voxels: h.voxels,
            tr_seconds: h.tr_seconds,
            trs: BTreeMap::new(),
        });
        if h.voxels != s.voxels || h.subjects != s.subjects || h.tr_seconds != s.tr_seconds {
            return Err(fmt(format!(
                "{}: subjects/voxels/TR differ from other movies",
                json.display()
            )));
        }
        s.trs.insert(id.clone(), h.trs);
    }
    let s = summary.expect("at least one movie");
    if labels.region_labels.len() != s.voxels {
        return Err(CliError::Core(filmvox::Error::Shape(format!(
            "{} region labels for {} voxels",
            labels.region_labels.len(),
            s.voxels
        ))));
    }
    Ok(s)
}

/// Write a synthetic raw dataset with its ground truth.
pub fn cmd_synth(cfg: &PipelineConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let _lock = RunLock::acquire(out)?;
    let ds = make_synth_dataset(&cfg.synth)?;
    write_synth_dataset(out, &ds)?;
    write_json(&out.join(CONFIG_FILE), cfg)?;
    validate_raw_dataset(out)?;
    write_manifest(out, "synth", cfg, &[])
}

/// Chunk stimuli, normalize and align fMRI, build the voxel mask and split.
pub fn cmd_preprocess(raw: &Path, out: &Path, cfg: &PipelineConfig) -> Result<Manifest> {
    cfg.validate()?;
    let p = &cfg.preprocess;
    let summary = validate_raw_dataset(raw)?;
    let _lock = RunLock::acquire(out)?;
    let labels: RegionLabels = read_json(&raw.join(LABELS_FILE))?;

    let mut stacks: Vec<SubjectStack> = Vec::new();
    for id in &summary.movies {
        stacks.push(read_subject_stack(&raw.join("fmri"), id)?.1);
    }
    let mask = match p.mask {
        MaskPolicy::Full => VoxelMask::all(labels.region_labels.clone()),
        MaskPolicy::SnrTop => {
            let all = SubjectStack::concat_time(&stacks.iter().collect::<Vec<_>>())?;
            let snr = compute_snr(&all)?;
            VoxelMask::from_snr(labels.region_labels.clone(), snr, p.snr_fraction)?
        }
    };
    let selected = mask.selected_indices();
    let ids: Vec<usize> = selected.iter().map(|&i| mask.voxel_ids[i]).collect();

    let mut counts = BTreeMap::new();
    for (id, stack) in summary.movies.iter().zip(&stacks) {
        let (side, frames) = read_movie_dir(&raw.join("movies").join(id))?;
        let resampled = resample_movie(&frames, side.fps, stack.tr_seconds, p.frame_size)?;
        let mut chunks = chunk_movie_with_target(&resampled, id, p.target_frame_index)?;
        let z = zscore_voxels(&average_subjects(stack))?.select_cols(&ids)?;
        let t = z.dim(0);
        if t <= p.delay_tr {
            return Err(filmvox::Error::InsufficientData(format!(
                "movie {id}: {t} TRs cannot absorb a {}-TR delay",
                p.delay_tr
            ))
            .into());
        }
        let n = chunks.len().min(t - p.delay_tr);
        chunks.truncate(n);
        let aligned = align_delay(&z, n, p.delay_tr)?;
        write_chunks(&out.join("stimulus"), id, &chunks)?;
        write_series(
            &out.join("fmri"),
            &VoxelSeries {
                data: aligned,
                movie_id: id.clone(),
                delay_applied_tr: p.delay_tr,
            },
        )?;
        counts.insert(id.clone(), n);
    }
    write_mask(&out.join("mask.json"), &mask)?;
    let ratio = (p.train_val_ratio[0], p.train_val_ratio[1]);
    let split = make_split(
        &counts,
        &p.held_out_movie,
        p.train_fraction,
        ratio,
        p.split_seed,
    )?;
    write_json(&out.join("split.json"), &split)?;
    write_json(&out.join(CONFIG_FILE), cfg)?;
    write_manifest(out, "preprocess", cfg, &[])
}

/// Processed dataset: paired chunks and aligned fMRI, split and mask.
pub fn load_processed(dir: &Path) -> Result<(TrainData, SplitPlan, VoxelMask)> {
    for f in ["split.json", "mask.json"] {
        require_file(&dir.join(f))?;
    }
    let split: SplitPlan = read_json(&dir.join("split.json"))?;
    let mask = read_mask(&dir.join("mask.json"))?;
    let mut movies = Vec::new();
    for id in split.movies.keys() {
        let chunks = read_chunks(&dir.join("stimulus"), id)?;
        let series = read_series(&dir.join("fmri"), id)?;
        movies.push(MovieData {
            movie_id: id.clone(),
            chunks,
            fmri: series.data,
        });
    }
    let data = TrainData { movies };
    data.validate()?;
    if data.voxels() != mask.selected_indices().len() {
        return Err(filmvox::Error::Shape(format!(
            "fMRI has {} voxels, mask selects {}",
            data.voxels(),
            mask.selected_indices().len()
        ))
        .into());
    }
    Ok((data, split, mask))
}

/// Model and optimizer settings for `voxels` voxels and `size × size` frames.
pub fn train_config(cfg: &PipelineConfig, voxels: usize, size: usize) -> Result<TrainConfig> {
    let t = &cfg.train;
    let mut tc = match t.architecture {
        Architecture::Desk => TrainConfig::desk(t.mode, voxels, size),
        Architecture::Reference => {
            if size != 112 {
                return Err(CliError::Config(format!(
                    "reference architecture needs 112x112 frames, preprocess.frame_size is {size}"
                )));
            }
            TrainConfig {
                encoder: EncoderSpec::reference(voxels),
                decoder: DecoderSpec::reference(voxels),
                ..TrainConfig::desk(t.mode, voxels, size)
            }
        }
    };
    tc.hyper = t.hyper.clone();
    tc.batch_size = t.batch_size;
    tc.weight_decay = t.weight_decay;
    tc.perceptual = t.perceptual.clone();
    Ok(tc)
}

pub fn cmd_train(data_dir: &Path, out: &Path, cfg: &PipelineConfig) -> Result<Manifest> {
    cfg.validate()?;
    let (data, split, _mask) = load_processed(data_dir)?;
    let size = data.movies[0].chunks.first().map(|c| c.height).unwrap_or(0);
    let tc = train_config(cfg, data.voxels(), size)?;
    let _lock = RunLock::acquire(out)?;
    let abs = fs::canonicalize(data_dir).map_err(|e| filmvox::Error::io(data_dir, e))?;
    write_json(&out.join(INPUTS_FILE), &Inputs { data_dir: abs })?;
    write_json(&out.join(CONFIG_FILE), cfg)?;
    write_json(&out.join("train_config.json"), &tc)?;
    write_json(&out.join("split.json"), &split)?;
    train_in_dir(&data, &split, &tc, out)?;
    write_manifest(out, "train", cfg, &[EVAL_DIR, SALIENCY_DIR])
}

struct LoadedRun {
    data: TrainData,
    split: SplitPlan,
    mask: VoxelMask,
    train: TrainConfig,
    model: filmvox::trainer::TrainedModel,
}

fn load_run(run: &Path) -> Result<LoadedRun> {
    let inputs_path = run.join(INPUTS_FILE);
    require_file(&inputs_path)?;
    let best = run.join("best.bin");
    require_file(&best)?;
    let inputs: Inputs = read_json(&inputs_path)?;
    let (data, split, mask) = load_processed(&inputs.data_dir)?;
    let (man, model) = load_model(&best)?;
    Ok(LoadedRun {
        data,
        split,
        mask,
        train: man.config,
        model,
    })
}

/// Group prediction rows by movie, in `refs` order.
pub fn eval_inputs(data: &TrainData, refs: &[SampleRef], preds: &Predictions) -> Vec<EvalInput> {
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for (row, r) in refs.iter().enumerate() {
        match groups.last_mut() {
            Some((m, rows)) if *m == r.movie => rows.push(row),
            _ => groups.push((r.movie, vec![row])),
        }
    }
    let pick = |t: &Option<Tensor>, rows: &[usize]| t.as_ref().map(|t| t.select_rows(rows));
    groups
        .into_iter()
        .map(|(m, rows)| EvalInput {
            movie_id: data.movies[m].movie_id.clone(),
            v_true: preds.v_true.select_rows(&rows),
            v_hat: pick(&preds.v_hat, &rows),
            f_true: pick(&preds.f_true, &rows),
            f_hat: pick(&preds.f_hat, &rows),
        })
        .collect()
}

fn test_predictions(run: &LoadedRun) -> Result<(Vec<SampleRef>, Predictions)> {
    let refs = run.data.refs(&run.split, |s| &s.test)?;
    let preds = predict(&run.train, &run.model, &run.data, &refs)?;
    Ok((refs, preds))
}

/// Held-out metrics and shuffle nulls into `<run>/eval/`.
pub fn cmd_eval(run_dir: &Path, cfg: &PipelineConfig, name: &str) -> Result<Manifest> {
    cfg.validate()?;
    let run = load_run(run_dir)?;
    let _lock = RunLock::acquire(run_dir)?;
    let (refs, preds) = test_predictions(&run)?;
    let inputs = eval_inputs(&run.data, &refs, &preds);
    let result = evaluate_run(name, &inputs, cfg.eval.shuffles, cfg.eval.seed)?;
    let dir = run_dir.join(EVAL_DIR);
    write_json(&dir.join(RUN_EVAL_FILE), &result)?;
    build_report(vec![result])?.write(&dir)?;
    write_json(&dir.join(CONFIG_FILE), cfg)?;
    write_manifest(&dir, "eval", cfg, &[])
}

/// Decoder saliency over the test set into `<run>/saliency/`.
pub fn cmd_saliency(run_dir: &Path, cfg: &PipelineConfig) -> Result<Manifest> {
    cfg.validate()?;
    let run = load_run(run_dir)?;
    let Some(dec_params) = run.model.decoder.as_ref() else {
        return Err(CliError::Missing(format!(
            "run {} was trained as {} and has no decoder",
            run_dir.display(),
            run.model.mode.as_str()
        )));
    };
    let _lock = RunLock::acquire(run_dir)?;
    let (_, preds) = test_predictions(&run)?;
    let v = match cfg.saliency.input {
        SaliencyInput::Measured => preds.v_true,
        SaliencyInput::Predicted => preds.v_hat.ok_or_else(|| {
            CliError::Config(
                "saliency.input is predicted but the run has no encoder; use --input measured"
                    .into(),
            )
        })?,
    };
    let targets = preds.f_true.expect("decoder runs carry target frames");
    let selected = run.mask.selected_indices();
    let ids: Vec<usize> = selected.iter().map(|&i| run.mask.voxel_ids[i]).collect();
    let labels: Vec<String> = selected
        .iter()
        .map(|&i| run.mask.region_labels[i].clone())
        .collect();
    let decoder = Decoder::new(run.train.decoder.clone())?;
    let result = saliency::analyze(
        &decoder,
        dec_params,
        &v,
        &targets,
        &labels,
        cfg.saliency.top_fraction,
    )?;
    let dir = run_dir.join(SALIENCY_DIR);
    result.write(&dir, &ids, &labels)?;
    write_json(&dir.join(CONFIG_FILE), cfg)?;
    write_manifest(&dir, "saliency", cfg, &[])
}

/// Combine evaluated runs into one comparison report.
pub fn cmd_report(runs: &[PathBuf], out: &Path, cfg: &PipelineConfig) -> Result<Manifest> {
    if runs.is_empty() {
        return Err(CliError::Config(
            "report needs at least one run directory".into(),
        ));
    }
    let mut evals: Vec<RunEval> = Vec::new();
    for r in runs {
        let p = r.join(EVAL_DIR).join(RUN_EVAL_FILE);
        require_file(&p)?;
        evals.push(read_json(&p)?);
    }
    let mut seen = std::collections::BTreeSet::new();
    for e in &evals {
        if !seen.insert(e.name.clone()) {
            return Err(CliError::Config(format!(
                "two runs are named {:?}; re-run eval with --name",
                e.name
            )));
        }
    }
    let _lock = RunLock::acquire(out)?;
    build_report(evals)?.write(out)?;
    write_json(&out.join(CONFIG_FILE), cfg)?;
    write_manifest(out, "report", cfg, &[])
}

#[cfg(test)]
mod tests {
    use super::*;
    use filmvox::fmri::MovieSplit;

    fn tiny_data() -> (TrainData, SplitPlan) {
        let mk = |id: &str, n: usize, off: f64| MovieData {
            movie_id: id.into(),
            chunks: vec![],
            fmri: Tensor::from_fn(&[n, 3], |i| (i as f64 * 0.37 + off).sin()),
        };
        let data = TrainData {
            movies: vec![mk("a", 10, 0.0), mk("b", 6, 1.0)],
        };
        let mut movies = BTreeMap::new();
        movies.insert(
            "a".to_string(),
            MovieSplit {
                train: (0..6).collect(),
                val: vec![6, 7],
                test: vec![8, 9],
            },
        );
        movies.insert(
            "b".to_string(),
            MovieSplit {
                train: vec![],
                val: vec![],
                test: (0..6).collect(),
            },
        );
        (
            data,
            SplitPlan {
                held_out_movie_id: "b".into(),
                movies,
            },
        )
    }

    #[test]
    fn perfect_predictions_give_unit_pooled_pearson() {
        let (data, split) = tiny_data();
        let refs: Vec<SampleRef> = data
            .movies
            .iter()
            .enumerate()
            .flat_map(|(movie, m)| {
                split.movies[&m.movie_id]
                    .test
                    .iter()
                    .map(move |&index| SampleRef { movie, index })
            })
            .collect();
        let v = data.fmri_batch(&refs).unwrap();
        let preds = Predictions {
            v_true: v.clone(),
            v_hat: Some(v),
            f_true: None,
            f_hat: None,
        };
        let inputs = eval_inputs(&data, &refs, &preds);
        assert_eq!(inputs.len(), 2);
        assert_eq!(inputs[0].v_true.dim(0), 2);
        assert_eq!(inputs[1].v_true.dim(0), 6);
        let r = evaluate_run("oracle", &inputs, 5, 0).unwrap();
        let enc = r.pooled.encoder.unwrap();
        assert!((enc.mean_pearson - 1.0).abs() < 1e-12);
        assert_eq!(enc.mse, 0.0);
        assert!(r.pooled.decoder.is_none());
    }
}
