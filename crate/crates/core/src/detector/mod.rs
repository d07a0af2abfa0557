//! Grid detector with encoder, agent aggregation, decoder and per-cell heads.

mod checkpoint;
mod decode;
mod loss;
mod model;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::distributions::Variant;
use crate::error::{Error, Result};
use crate::scenegen::{SceneConfig, DOWNSAMPLE};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use decode::{decode_cells, detect, nms, Detection};
pub use loss::{assign_targets, detection_loss, LossOptions};
pub use model::{
    aggregate, decode_and_head, encode, forward, FeatureMap, HeadOutputs, Layer, ModelParams, RawOutputs, FEATURE_DIM,
};
pub use train::{train, TrainOptions, TrainOutcome};

/// What agents share before decoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CollabMode {
    /// Ego view only.
    #[serde(rename = "lb")]
    LowerBound,
    /// Encoded feature maps, fused by elementwise max.
    #[serde(rename = "inter")]
    Intermediate,
    /// Raw occupancy, OR-fused before encoding.
    #[serde(rename = "early")]
    EarlyUpperBound,
}

impl CollabMode {
    pub const ALL: [CollabMode; 3] = [CollabMode::LowerBound, CollabMode::Intermediate, CollabMode::EarlyUpperBound];

    pub fn as_str(self) -> &'static str {
        match self {
            CollabMode::LowerBound => "lb",
            CollabMode::Intermediate => "inter",
            CollabMode::EarlyUpperBound => "early",
        }
    }
}

impl fmt::Display for CollabMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CollabMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        CollabMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown collaboration mode {s:?} (lb|inter|early)")))
    }
}

/// Regression head flavour: plain corners, or corners plus a covariance head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HeadKind {
    Point,
    Gaussian(Variant),
}

impl HeadKind {
    pub fn cov_width(self) -> usize {
        match self {
            HeadKind::Point => 0,
            HeadKind::Gaussian(v) => v.head_width(),
        }
    }

    pub fn variant(self) -> Option<Variant> {
        match self {
            HeadKind::Point => None,
            HeadKind::Gaussian(v) => Some(v),
        }
    }

    pub(crate) fn tag(self) -> u32 {
        match self {
            HeadKind::Point => 0,
            HeadKind::Gaussian(Variant::Img) => 1,
            HeadKind::Gaussian(Variant::Isg) => 2,
            HeadKind::Gaussian(Variant::Dmg) => 3,
        }
    }

    pub(crate) fn from_tag(tag: u32) -> Result<Self> {
        Ok(match tag {
            0 => HeadKind::Point,
            1 => HeadKind::Gaussian(Variant::Img),
            2 => HeadKind::Gaussian(Variant::Isg),
            3 => HeadKind::Gaussian(Variant::Dmg),
            t => return Err(Error::Format(format!("unknown head tag {t}"))),
        })
    }
}

/// Raster and output-cell geometry shared by training and decoding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridGeometry {
    pub width: usize,
    pub length: usize,
    /// Output-cell edge lengths in meters.
    pub cell_w: f64,
    pub cell_l: f64,
}

impl GridGeometry {
    pub fn new(cfg: &SceneConfig) -> Result<Self> {
        if cfg.grid_width % DOWNSAMPLE != 0 || cfg.grid_length % DOWNSAMPLE != 0 {
            return Err(Error::Usage(format!(
                "grid {}x{} not divisible by {DOWNSAMPLE}",
                cfg.grid_width, cfg.grid_length
            )));
        }
        let (cw, cl) = cfg.cell_size();
        Ok(Self {
            width: cfg.grid_width,
            length: cfg.grid_length,
            cell_w: cw * DOWNSAMPLE as f64,
            cell_l: cl * DOWNSAMPLE as f64,
        })
    }

    pub fn out_cols(&self) -> usize {
        self.width / DOWNSAMPLE
    }

    pub fn out_rows(&self) -> usize {
        self.length / DOWNSAMPLE
    }

    pub fn out_cells(&self) -> usize {
        self.out_cols() * self.out_rows()
    }

    pub fn cell_center(&self, cell: usize) -> [f64; 2] {
        let (ix, iy) = (cell % self.out_cols(), cell / self.out_cols());
        [(ix as f64 + 0.5) * self.cell_w, (iy as f64 + 0.5) * self.cell_l]
    }

    /// Output cell holding world point `p`, if inside the world.
    pub fn cell_of(&self, p: [f64; 2]) -> Option<usize> {
        let ix = (p[0] / self.cell_w).floor();
        let iy = (p[1] / self.cell_l).floor();
        let inside = ix >= 0.0 && iy >= 0.0 && (ix as usize) < self.out_cols() && (iy as usize) < self.out_rows();
        inside.then(|| iy as usize * self.out_cols() + ix as usize)
    }

    /// Largest corner offset the regression head can express, per axis.
    pub fn offset_scale(&self) -> [f64; 2] {
        [2.0 * self.cell_w, 2.0 * self.cell_l]
    }
}
