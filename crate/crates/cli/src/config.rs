use std::path::Path;

use filmvox::fmri::{
    DEFAULT_DELAY_TR, DEFAULT_SNR_FRACTION, DEFAULT_TRAIN_FRACTION, DEFAULT_TRAIN_VAL_RATIO,
};
use filmvox::objectives::{HyperConfig, PerceptualConfig};
use filmvox::saliency::DEFAULT_TOP_FRACTION;
use filmvox::stimulus::DEFAULT_TARGET_INDEX;
use filmvox::synth::{movie_id, SynthConfig};
use filmvox::trainer::{TrainMode, DEFAULT_BATCH_SIZE};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum MaskPolicy {
    Full,
    SnrTop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// 32×32-scale models for synthetic runs.
    Desk,
    /// Full-size 112×112 models.
    Reference,
}

/// Which voxel activity feeds the decoder during saliency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SaliencyInput {
    Predicted,
    Measured,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    pub frame_size: usize,
    pub target_frame_index: usize,
    pub delay_tr: usize,
    pub mask: MaskPolicy,
    pub snr_fraction: f64,
    pub train_fraction: f64,
    pub train_val_ratio: [usize; 2],
    pub held_out_movie: String,
    pub split_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub mode: TrainMode,
    pub architecture: Architecture,
    pub hyper: HyperConfig,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub perceptual: PerceptualConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub shuffles: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaliencyConfig {
    pub top_fraction: f64,
    pub input: SaliencyInput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub schema_version: u32,
    pub synth: SynthConfig,
    pub preprocess: PreprocessConfig,
    pub train: TrainSection,
    pub eval: EvalConfig,
    pub saliency: SaliencyConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let held_out = movie_id(synth.n_movies.saturating_sub(1));
        Self {
            schema_version: SCHEMA_VERSION,
            preprocess: PreprocessConfig {
                frame_size: synth.size,
                target_frame_index: DEFAULT_TARGET_INDEX,
                delay_tr: DEFAULT_DELAY_TR,
                mask: MaskPolicy::SnrTop,
                snr_fraction: DEFAULT_SNR_FRACTION,
                train_fraction: DEFAULT_TRAIN_FRACTION,
                train_val_ratio: [DEFAULT_TRAIN_VAL_RATIO.0, DEFAULT_TRAIN_VAL_RATIO.1],
                held_out_movie: held_out,
                split_seed: 0,
            },
            synth,
            train: TrainSection {
                mode: TrainMode::EndToEnd,
                architecture: Architecture::Desk,
                hyper: HyperConfig::default(),
                batch_size: DEFAULT_BATCH_SIZE,
                weight_decay: 0.0,
                perceptual: PerceptualConfig::default(),
            },
            eval: EvalConfig {
                shuffles: 100,
                seed: 0,
            },
            saliency: SaliencyConfig {
                top_fraction: DEFAULT_TOP_FRACTION,
                input: SaliencyInput::Predicted,
            },
        }
    }
}

/// Command-line and environment overrides; `None` keeps the config value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<TrainMode>,
    pub mask: Option<MaskPolicy>,
    pub epsilon: Option<f64>,
    pub epochs: Option<usize>,
    pub delay_tr: Option<usize>,
    pub top_fraction: Option<f64>,
    pub shuffles: Option<usize>,
    pub saliency_input: Option<SaliencyInput>,
}

/// Which section `--seed` targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedTarget {
    Synth,
    Split,
    Train,
    Eval,
    None,
}

impl PipelineConfig {
    pub fn apply(&mut self, ov: &Overrides, seed_target: SeedTarget) {
        if let Some(s) = ov.seed {
            match seed_target {
                SeedTarget::Synth => self.synth.seed = s,
                SeedTarget::Split => self.preprocess.split_seed = s,
                SeedTarget::Train => self.train.hyper.seed = s,
                SeedTarget::Eval => self.eval.seed = s,
                SeedTarget::None => {}
            }
        }
        if let Some(m) = ov.mode {
            self.train.mode = m;
        }
        if let Some(m) = ov.mask {
            self.preprocess.mask = m;
        }
        if let Some(e) = ov.epsilon {
            self.train.hyper.epsilon = e;
        }
        if let Some(e) = ov.epochs {
            self.train.hyper.epochs = e;
        }
        if let Some(d) = ov.delay_tr {
            self.preprocess.delay_tr = d;
        }
        if let Some(f) = ov.top_fraction {
            self.saliency.top_fraction = f;
        }
        if let Some(n) = ov.shuffles {
            self.eval.shuffles = n;
        }
        if let Some(i) = ov.saliency_input {
            self.saliency.input = i;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        self.synth
            .validate()
            .map_err(|e| CliError::Config(format!("synth: {e}")))?;
        self.train
            .hyper
            .validate()
            .map_err(|e| CliError::Config(format!("train.hyper: {e}")))?;
        let p = &self.preprocess;
        if p.frame_size == 0 || p.frame_size % 8 != 0 {
            return bad(format!(
                "preprocess.frame_size {} must be a positive multiple of 8",
                p.frame_size
            ));
        }
        if p.target_frame_index >= filmvox::stimulus::FRAMES_PER_TR {
            return bad(format!(
                "preprocess.target_frame_index {} out of range",
                p.target_frame_index
            ));
        }
        if !(p.snr_fraction > 0.0 && p.snr_fraction <= 1.0) {
            return bad(format!(
                "preprocess.snr_fraction {} outside (0, 1]",
                p.snr_fraction
            ));
        }
        if self.train.batch_size == 0 {
            return bad("train.batch_size must be positive".into());
        }
        if !(self.train.weight_decay >= 0.0) {
            return bad("train.weight_decay must be nonnegative".into());
        }
        if self.eval.shuffles == 0 {
            return bad("eval.shuffles must be at least 1".into());
        }
        let f = self.saliency.top_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return bad(format!("saliency.top_fraction {f} outside (0, 1]"));
        }
        Ok(())
    }
}

/// Parse a complete config file. Every key of the default config must be
/// present; unknown keys are rejected.
pub fn parse_config(text: &str) -> Result<PipelineConfig, CliError> {
    let value: Value =
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid JSON: {e}")))?;
    let reference =
        serde_json::to_value(PipelineConfig::default()).expect("default config serializes");
    if let Some(key) = first_missing_key(&reference, &value, "") {
        return Err(CliError::Config(format!("missing required key `{key}`")));
    }
    let cfg: PipelineConfig =
        serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<PipelineConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text).map_err(|e| match e {
        CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

// Tagged enums may legitimately carry a different key set, so only recurse
// when the tags agree.
fn first_missing_key(reference: &Value, given: &Value, prefix: &str) -> Option<String> {
    let (Value::Object(r), Value::Object(g)) = (reference, given) else {
        return None;
    };
    if let (Some(a), Some(b)) = (r.get("kind"), g.get("kind")) {
        if a != b {
            return None;
        }
    }
    for (k, rv) in r {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match g.get(k) {
            None => return Some(path),
            Some(gv) => {
                if let Some(m) = first_missing_key(rv, gv, &path) {
                    return Some(m);
                }
            }
        }
    }
    None
}
