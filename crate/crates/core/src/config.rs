//! Run configuration and its flat `key = value` text form.
//!
//! ```text
//! # comment
//! seed = 3
//! train.steps = 5000
//! model.widths = 8,16,32,64,128
//! ```
//!
//! Unknown keys are errors. [`Config::to_text`] emits every key, so a
//! written config reproduces the run it came from.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::losses::{DistillMode, PhotometricReduce, ReprojectionOptions};
use crate::model::ModelConfig;
use crate::synthdata::DatasetParams;
use crate::types::{DepthRange, LossWeights};

/// Which networks are trained and with which objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Both branches with their own likelihoods plus mutual distillation.
    #[default]
    Semi,
    /// Supervised branch alone.
    Supervised,
    /// Unsupervised branch alone.
    Unsupervised,
    /// One depth-only network on the combined L1 + photometric objective.
    Baseline,
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "semi" => Ok(Self::Semi),
            "supervised" => Ok(Self::Supervised),
            "unsupervised" => Ok(Self::Unsupervised),
            "baseline" => Ok(Self::Baseline),
            other => Err(Error::Config(format!(
                "train.mode must be semi|supervised|unsupervised|baseline, got `{other}`"
            ))),
        }
    }
}

impl Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Semi => "semi",
            Self::Supervised => "supervised",
            Self::Unsupervised => "unsupervised",
            Self::Baseline => "baseline",
        })
    }
}

/// Identifies one trained network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchTag {
    Supervised,
    Unsupervised,
    Baseline,
}

impl BranchTag {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Supervised => "supervised",
            Self::Unsupervised => "unsupervised",
            Self::Baseline => "baseline",
        }
    }

    pub(crate) fn code(&self) -> u8 {
        match self {
            Self::Supervised => 0,
            Self::Unsupervised => 1,
            Self::Baseline => 2,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        [Self::Supervised, Self::Unsupervised, Self::Baseline].into_iter().find(|t| t.code() == c)
    }
}

impl FromStr for BranchTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised" | "s" => Ok(Self::Supervised),
            "unsupervised" | "u" => Ok(Self::Unsupervised),
            "baseline" => Ok(Self::Baseline),
            other => Err(Error::Config(format!(
                "branch must be supervised|unsupervised|baseline, got `{other}`"
            ))),
        }
    }
}

impl Display for BranchTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    /// Distillation is off for steps `< warmup`.
    pub warmup: usize,
    pub mode: TrainMode,
    /// Validation period in steps; 0 validates only at the end.
    pub eval_every: usize,
    /// Checkpoint period in steps; 0 checkpoints only at the end.
    pub checkpoint_every: usize,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch: 1,
            lr: 1e-4,
            warmup: 500,
            mode: TrainMode::Semi,
            eval_every: 0,
            checkpoint_every: 1000,
        }
    }
}

/// Loss switches that are not weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    /// Pseudo-residual term on pixels without ground truth.
    pub filtering: bool,
    pub reduce: PhotometricReduce,
    pub automask: bool,
    /// Smooth mean-normalized inverse depth instead of raw depth.
    pub smooth_normalized: bool,
    pub distill_mode: DistillMode,
    pub tau: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            filtering: true,
            reduce: PhotometricReduce::Min,
            automask: false,
            smooth_normalized: true,
            distill_mode: DistillMode::Uw,
            tau: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub median_scale: bool,
    /// Branch reported as the final prediction.
    pub branch: BranchTag,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            median_scale: false,
            branch: BranchTag::Unsupervised,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub seed: u64,
    /// Load training data from here instead of generating it.
    pub dataset_root: Option<PathBuf>,
    /// Validation data; defaults to a generated split when absent.
    pub val_root: Option<PathBuf>,
    pub data: DatasetParams,
    /// Frames of the generated validation split.
    pub val_frames: usize,
    pub model: ModelConfig,
    pub train: TrainParams,
    pub loss: LossWeights,
    pub objective: ObjectiveConfig,
    pub augment: AugmentConfig,
    pub eval: EvalConfig,
}

impl Default for Config {
    /// Desk-scale defaults: 32 x 96 frames, a slim network, 4 scanlines.
    ///
    /// Two values differ from the library defaults. Depth starts at 10 m:
    /// the neutral disparity of 0.5 maps to 0.2 m, far below the scene, and
    /// the photometric branch does not recover from there. `M` is 6 m: the
    /// pseudo-residual on unlabelled pixels must clearly exceed the residuals
    /// a small network leaves on labelled ones (about 2 m here), or the
    /// filtering term pulls unlabelled uncertainty down, not up.
    fn default() -> Self {
        let mut data = DatasetParams::default();
        data.scene.height = 32;
        data.scene.width = 96;
        data.lidar.scanlines = 4;
        let loss = LossWeights {
            m: 6.0,
            ..LossWeights::default()
        };
        Self {
            seed: 0,
            dataset_root: None,
            val_root: None,
            data,
            val_frames: 50,
            model: ModelConfig {
                widths: [8, 16, 32, 64, 128],
                range: DepthRange::default(),
                init_depth: Some(10.0),
            },
            train: TrainParams::default(),
            loss,
            objective: ObjectiveConfig::default(),
            augment: AugmentConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("bad value `{value}` for `{key}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        other => Err(Error::Config(format!("`{key}` expects true|false, got `{other}`"))),
    }
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: Display,
{
    match value.trim() {
        "" | "none" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

fn opt_text<T: Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), |v| v.to_string())
}

impl Config {
    /// Every recognised key, in the order [`Config::to_text`] writes them.
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "dataset.root",
        "dataset.val_root",
        "data.frames",
        "data.sequence_frames",
        "data.val_frames",
        "data.height",
        "data.width",
        "data.focal",
        "data.speed",
        "data.sway",
        "data.yaw",
        "data.block_density",
        "data.poles",
        "data.supersample",
        "lidar.scanlines",
        "lidar.dropout",
        "lidar.horizon",
        "lidar.max_range",
        "model.widths",
        "model.min_depth",
        "model.max_depth",
        "model.init_depth",
        "train.steps",
        "train.batch",
        "train.lr",
        "train.warmup",
        "train.mode",
        "train.eval_every",
        "train.checkpoint_every",
        "loss.lambda_s",
        "loss.lambda_u",
        "loss.lambda_smooth",
        "loss.mu_s",
        "loss.mu_u",
        "loss.m",
        "loss.alpha",
        "loss.filtering",
        "photometric.reduce",
        "photometric.automask",
        "smoothness.normalized",
        "distill.mode",
        "distill.tau",
        "augment.flip",
        "augment.jitter",
        "augment.noise",
        "eval.median_scale",
        "eval.branch",
    ];

    /// Applies one assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let k = key.trim();
        match k {
            "seed" => self.seed = parse(k, v)?,
            "dataset.root" => self.dataset_root = parse_opt::<String>(k, v)?.map(PathBuf::from),
            "dataset.val_root" => self.val_root = parse_opt::<String>(k, v)?.map(PathBuf::from),
            "data.frames" => self.data.frames = parse(k, v)?,
            "data.sequence_frames" => self.data.scene.frames = parse(k, v)?,
            "data.val_frames" => self.val_frames = parse(k, v)?,
            "data.height" => self.data.scene.height = parse(k, v)?,
            "data.width" => self.data.scene.width = parse(k, v)?,
            "data.focal" => self.data.scene.focal = parse(k, v)?,
            "data.speed" => self.data.scene.speed = parse(k, v)?,
            "data.sway" => self.data.scene.sway = parse(k, v)?,
            "data.yaw" => self.data.scene.yaw = parse(k, v)?,
            "data.block_density" => self.data.scene.block_density = parse(k, v)?,
            "data.poles" => self.data.scene.poles = parse(k, v)?,
            "data.supersample" => self.data.scene.supersample = parse(k, v)?,
            "lidar.scanlines" => self.data.lidar.scanlines = parse(k, v)?,
            "lidar.dropout" => self.data.lidar.dropout = parse(k, v)?,
            "lidar.horizon" => self.data.lidar.horizon = parse(k, v)?,
            "lidar.max_range" => self.data.lidar.max_range = parse_opt(k, v)?,
            "model.widths" => {
                let w: Vec<usize> = v.split(',').map(|p| parse(k, p)).collect::<Result<_>>()?;
                self.model.widths = w.as_slice().try_into().map_err(|_| {
                    Error::Config(format!("`{k}` needs {} comma-separated widths, got `{v}`", self.model.widths.len()))
                })?;
            }
            "model.min_depth" => self.model.range.min = parse(k, v)?,
            "model.max_depth" => self.model.range.max = parse(k, v)?,
            "model.init_depth" => self.model.init_depth = parse_opt(k, v)?,
            "train.steps" => self.train.steps = parse(k, v)?,
            "train.batch" => self.train.batch = parse(k, v)?,
            "train.lr" => self.train.lr = parse(k, v)?,
            "train.warmup" => self.train.warmup = parse(k, v)?,
            "train.mode" => self.train.mode = parse(k, v)?,
            "train.eval_every" => self.train.eval_every = parse(k, v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = parse(k, v)?,
            "loss.lambda_s" => self.loss.lambda_s = parse(k, v)?,
            "loss.lambda_u" => self.loss.lambda_u = parse(k, v)?,
            "loss.lambda_smooth" => self.loss.lambda_smooth = parse(k, v)?,
            "loss.mu_s" => self.loss.mu_s = parse(k, v)?,
            "loss.mu_u" => self.loss.mu_u = parse(k, v)?,
            "loss.m" => self.loss.m = parse(k, v)?,
            "loss.alpha" => self.loss.alpha = parse(k, v)?,
            "loss.filtering" => self.objective.filtering = parse_bool(k, v)?,
            "photometric.reduce" => self.objective.reduce = parse(k, v)?,
            "photometric.automask" => self.objective.automask = parse_bool(k, v)?,
            "smoothness.normalized" => self.objective.smooth_normalized = parse_bool(k, v)?,
            "distill.mode" => self.objective.distill_mode = parse(k, v)?,
            "distill.tau" => self.objective.tau = parse(k, v)?,
            "augment.flip" => self.augment.flip_prob = parse(k, v)?,
            "augment.jitter" => self.augment.jitter_prob = parse(k, v)?,
            "augment.noise" => self.augment.background_noise = parse_bool(k, v)?,
            "eval.median_scale" => self.eval.median_scale = parse_bool(k, v)?,
            "eval.branch" => self.eval.branch = parse(k, v)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown key `{other}`; known keys: {}",
                    Self::KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Current value of `key` in text form.
    pub fn get(&self, key: &str) -> Result<String> {
        let s = &self.data.scene;
        let l = &self.data.lidar;
        Ok(match key {
            "seed" => self.seed.to_string(),
            "dataset.root" => opt_text(&self.dataset_root.as_ref().map(|p| p.display())),
            "dataset.val_root" => opt_text(&self.val_root.as_ref().map(|p| p.display())),
            "data.frames" => self.data.frames.to_string(),
            "data.sequence_frames" => s.frames.to_string(),
            "data.val_frames" => self.val_frames.to_string(),
            "data.height" => s.height.to_string(),
            "data.width" => s.width.to_string(),
            "data.focal" => s.focal.to_string(),
            "data.speed" => s.speed.to_string(),
            "data.sway" => s.sway.to_string(),
            "data.yaw" => s.yaw.to_string(),
            "data.block_density" => s.block_density.to_string(),
            "data.poles" => s.poles.to_string(),
            "data.supersample" => s.supersample.to_string(),
            "lidar.scanlines" => l.scanlines.to_string(),
            "lidar.dropout" => l.dropout.to_string(),
            "lidar.horizon" => l.horizon.to_string(),
            "lidar.max_range" => opt_text(&l.max_range),
            "model.widths" => self.model.widths.map(|w| w.to_string()).join(","),
            "model.min_depth" => self.model.range.min.to_string(),
            "model.max_depth" => self.model.range.max.to_string(),
            "model.init_depth" => opt_text(&self.model.init_depth),
            "train.steps" => self.train.steps.to_string(),
            "train.batch" => self.train.batch.to_string(),
            "train.lr" => self.train.lr.to_string(),
            "train.warmup" => self.train.warmup.to_string(),
            "train.mode" => self.train.mode.to_string(),
            "train.eval_every" => self.train.eval_every.to_string(),
            "train.checkpoint_every" => self.train.checkpoint_every.to_string(),
            "loss.lambda_s" => self.loss.lambda_s.to_string(),
            "loss.lambda_u" => self.loss.lambda_u.to_string(),
            "loss.lambda_smooth" => self.loss.lambda_smooth.to_string(),
            "loss.mu_s" => self.loss.mu_s.to_string(),
            "loss.mu_u" => self.loss.mu_u.to_string(),
            "loss.m" => self.loss.m.to_string(),
            "loss.alpha" => self.loss.alpha.to_string(),
            "loss.filtering" => self.objective.filtering.to_string(),
            "photometric.reduce" => self.objective.reduce.to_string(),
            "photometric.automask" => self.objective.automask.to_string(),
            "smoothness.normalized" => self.objective.smooth_normalized.to_string(),
            "distill.mode" => self.objective.distill_mode.to_string(),
            "distill.tau" => self.objective.tau.to_string(),
            "augment.flip" => self.augment.flip_prob.to_string(),
            "augment.jitter" => self.augment.jitter_prob.to_string(),
            "augment.noise" => self.augment.background_noise.to_string(),
            "eval.median_scale" => self.eval.median_scale.to_string(),
            "eval.branch" => self.eval.branch.to_string(),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        })
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{raw}`", n + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, e.to_string().trim_start_matches("config error: "))))?;
        }
        Ok(())
    }

    /// Applies a single `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
        self.set(k, v)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Every key with its current value.
    pub fn to_text(&self) -> String {
        Self::KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.data.lidar.validate()?;
        let s = &self.data.scene;
        if s.height % crate::model::INPUT_MULTIPLE != 0 || s.width % crate::model::INPUT_MULTIPLE != 0 {
            return Err(Error::Config(format!(
                "data.height and data.width must be multiples of {}, got {} x {}",
                crate::model::INPUT_MULTIPLE,
                s.height,
                s.width
            )));
        }
        if self.train.batch == 0 {
            return Err(Error::Config("train.batch must be at least 1".into()));
        }
        if !(self.train.lr > 0.0 && self.train.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be positive, got {}", self.train.lr)));
        }
        if !(self.objective.tau > 0.0) {
            return Err(Error::Config(format!("distill.tau must be positive, got {}", self.objective.tau)));
        }
        for (k, p) in [("augment.flip", self.augment.flip_prob), ("augment.jitter", self.augment.jitter_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{k} must be a probability, got {p}")));
            }
        }
        Ok(())
    }

    pub fn reprojection(&self) -> ReprojectionOptions {
        ReprojectionOptions {
            alpha: self.loss.alpha,
            reduce: self.objective.reduce,
            automask: self.objective.automask,
        }
    }
}
