//! Run configuration, read from TOML.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::detector::{CollabMode, LossOptions, TrainOptions};
use crate::distributions::Variant;
use crate::doublem::{DoubleMConfig, InferOptions, UqMethod};
use crate::error::{Error, Result};
use crate::rng::substream_seed;
use crate::scenegen::SceneConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Usage(format!("unknown split '{s}' (train|val|test)")))
    }
}

/// Scene parameters shared by every split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub world_width: f64,
    pub world_length: f64,
    pub grid_width: usize,
    pub grid_length: usize,
    pub n_agents: usize,
    pub max_objects: usize,
    pub sensing_radius: f64,
    pub occlusion: bool,
    pub motion_noise: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        let s = SceneConfig::default();
        Self {
            world_width: s.world_width,
            world_length: s.world_length,
            grid_width: s.grid_width,
            grid_length: s.grid_length,
            n_agents: s.n_agents,
            max_objects: s.max_objects,
            sensing_radius: s.sensing_radius,
            occlusion: s.occlusion,
            motion_noise: s.motion_noise,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSize {
    pub scenes: usize,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitsConfig {
    pub train: SplitSize,
    pub val: SplitSize,
    pub test: SplitSize,
}

impl Default for SplitsConfig {
    fn default() -> Self {
        Self {
            train: SplitSize { scenes: 8, frames: 100 },
            val: SplitSize { scenes: 2, frames: 50 },
            test: SplitSize { scenes: 2, frames: 50 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub variant: Variant,
    pub mode: CollabMode,
    pub lr: f64,
    pub epochs: usize,
    pub momentum: f64,
    pub batch_size: usize,
    /// Zero disables gradient clipping.
    pub clip_norm: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Meters; one raster cell by default.
    pub smooth_l1_beta: f64,
    pub ego: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        let t = TrainOptions::default();
        Self {
            variant: Variant::Img,
            mode: CollabMode::Intermediate,
            lr: t.lr,
            epochs: t.epochs,
            momentum: t.momentum,
            batch_size: t.batch_size,
            clip_norm: t.clip_norm.unwrap_or(0.0),
            focal_alpha: t.loss.focal_alpha,
            focal_gamma: t.loss.focal_gamma,
            smooth_l1_beta: t.loss.smooth_l1_beta,
            ego: t.ego,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub score_threshold: f64,
    pub nms_iou: f64,
    /// Grid rows evaluated by `eval`.
    pub modes: Vec<CollabMode>,
    pub methods: Vec<UqMethod>,
    /// Record wall-clock seconds in reports (makes them non-reproducible).
    pub timing: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: vec![0.5, 0.7],
            score_threshold: InferOptions::default().score_threshold,
            nms_iou: InferOptions::default().nms_iou,
            modes: CollabMode::ALL.to_vec(),
            methods: UqMethod::ALL.to_vec(),
            timing: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data: PathBuf,
    pub artifacts: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { data: "data".into(), artifacts: "artifacts".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub scene: WorldConfig,
    #[serde(default)]
    pub splits: SplitsConfig,
    #[serde(default)]
    pub detector: DetectorConfig,
    #[serde(default)]
    pub doublem: DoubleMConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            scene: WorldConfig::default(),
            splits: SplitsConfig::default(),
            detector: DetectorConfig::default(),
            doublem: DoubleMConfig::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl FromStr for RunConfig {
    type Err = Error;
    fn from_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = text.parse()?;
        // relative paths are taken from the config file's directory
        if let Some(dir) = path.parent() {
            for p in [&mut cfg.paths.data, &mut cfg.paths.artifacts] {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        for s in Split::ALL {
            self.scene_config(s).validate()?;
        }
        self.doublem.validate()?;
        let d = &self.detector;
        if !(d.lr >= 0.0) || !(0.0..1.0).contains(&d.momentum) || d.batch_size == 0 || !(d.clip_norm >= 0.0) {
            return Err(Error::Config(
                "detector: need lr >= 0, momentum in [0,1), batch_size >= 1, clip_norm >= 0".into(),
            ));
        }
        if d.ego >= self.scene.n_agents {
            return Err(Error::Config(format!("ego agent {} but only {} agents", d.ego, self.scene.n_agents)));
        }
        let e = &self.eval;
        if e.iou_thresholds.is_empty() || e.iou_thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Config("eval.iou_thresholds must be non-empty values in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&e.score_threshold) || !(0.0..=1.0).contains(&e.nms_iou) {
            return Err(Error::Config("eval thresholds must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Scene generator settings of one split; each split draws from its own seed stream.
    pub fn scene_config(&self, split: Split) -> SceneConfig {
        let w = &self.scene;
        let size = match split {
            Split::Train => self.splits.train,
            Split::Val => self.splits.val,
            Split::Test => self.splits.test,
        };
        SceneConfig {
            world_width: w.world_width,
            world_length: w.world_length,
            grid_width: w.grid_width,
            grid_length: w.grid_length,
            n_agents: w.n_agents,
            max_objects: w.max_objects,
            n_scenes: size.scenes,
            frames_per_scene: size.frames,
            sensing_radius: w.sensing_radius,
            occlusion: w.occlusion,
            motion_noise: w.motion_noise,
            seed: substream_seed(self.seed, &format!("scenegen/{split}")),
        }
    }

    pub fn train_options(&self, mode: CollabMode) -> TrainOptions {
        let d = &self.detector;
        TrainOptions {
            epochs: d.epochs,
            lr: d.lr,
            momentum: d.momentum,
            batch_size: d.batch_size,
            clip_norm: (d.clip_norm > 0.0).then_some(d.clip_norm),
            loss: LossOptions {
                focal_alpha: d.focal_alpha,
                focal_gamma: d.focal_gamma,
                smooth_l1_beta: d.smooth_l1_beta,
            },
            mode,
            ego: d.ego,
        }
    }

    pub fn infer_options(&self) -> InferOptions {
        InferOptions { score_threshold: self.eval.score_threshold, nms_iou: self.eval.nms_iou, ego: self.detector.ego }
    }
}
