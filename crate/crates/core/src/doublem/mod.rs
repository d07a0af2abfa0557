//! Moving-block bootstrap training with residual harvesting, covariance
//! combination at inference, and the single-source baselines.

mod blocks;
mod stats;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::detector::{detect, train, Detection, GridGeometry, HeadKind, ModelParams, TrainOptions};
use crate::distributions::{estimate_sigma_a, BoxUncertainty, Variant, CORNERS};
use crate::error::{Error, Result};
use crate::math::linalg::CovMatrix;
use crate::rng::substream;
use crate::scenegen::{Dataset, Frame};

pub use crate::eval::{match_detections, MatchPair};
pub use blocks::{build_blocks, sample_bootstrap, BlockCollection, Resample};
pub use stats::{
    decode_uqstats, encode_uqstats, read_uqstats, write_uqstats, Residual, ResidualSet, UqStats, UQSTATS_MAGIC,
};

/// Uncertainty quantification method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UqMethod {
    /// Deterministic detector, no uncertainty.
    None,
    /// Direct modeling: predicted covariance only.
    Dm,
    /// Moving-block bootstrap only: residual covariance.
    Mbb,
    /// Both, combined.
    #[serde(rename = "doublem")]
    DoubleM,
}

impl UqMethod {
    pub const ALL: [UqMethod; 4] = [UqMethod::None, UqMethod::Dm, UqMethod::Mbb, UqMethod::DoubleM];

    pub fn as_str(self) -> &'static str {
        match self {
            UqMethod::None => "none",
            UqMethod::Dm => "dm",
            UqMethod::Mbb => "mbb",
            UqMethod::DoubleM => "doublem",
        }
    }

    /// Regression head the method trains.
    pub fn head(self, variant: Variant) -> HeadKind {
        match self {
            UqMethod::None | UqMethod::Mbb => HeadKind::Point,
            UqMethod::Dm | UqMethod::DoubleM => HeadKind::Gaussian(variant),
        }
    }

    pub fn uses_stats(self) -> bool {
        matches!(self, UqMethod::Mbb | UqMethod::DoubleM)
    }
}

impl fmt::Display for UqMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for UqMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        UqMethod::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?} (none|dm|mbb|doublem)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DoubleMConfig {
    pub block_length: usize,
    pub n_bootstraps: usize,
    pub refine_epochs: usize,
    /// Refinement learning rate as a fraction of the pretraining rate.
    pub refine_lr_scale: f64,
    pub match_iou: f64,
}

impl Default for DoubleMConfig {
    fn default() -> Self {
        Self { block_length: 10, n_bootstraps: 4, refine_epochs: 5, refine_lr_scale: 0.1, match_iou: 0.5 }
    }
}

impl DoubleMConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_length == 0 || self.n_bootstraps == 0 {
            return Err(Error::Config("block_length and n_bootstraps must be at least 1".into()));
        }
        if !(self.refine_lr_scale >= 0.0) || !(0.0..=1.0).contains(&self.match_iou) {
            return Err(Error::Config("refine_lr_scale must be >= 0 and match_iou in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Inference settings shared by validation harvesting and evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferOptions {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub ego: usize,
}

impl Default for InferOptions {
    fn default() -> Self {
        Self { score_threshold: 0.05, nms_iou: 0.3, ego: 0 }
    }
}

/// Everything a bootstrap training run produces.
#[derive(Debug, Clone)]
pub struct DoubleMOutcome {
    /// Pretrained model.
    pub theta0: ModelParams,
    /// Model after the last refinement.
    pub params: ModelParams,
    pub stats: UqStats,
    pub residuals: ResidualSet,
    /// Predicted covariances harvested alongside the residuals.
    pub sigma_hats: Vec<CovMatrix>,
    pub pretrain_trace: Vec<f64>,
    /// Mean loss per refinement epoch, all iterations concatenated.
    pub refine_trace: Vec<f64>,
}

fn detect_split(
    params: &ModelParams,
    data: &Dataset,
    geom: &GridGeometry,
    mode: crate::detector::CollabMode,
    inf: &InferOptions,
) -> Result<Vec<Vec<Detection>>> {
    data.frames
        .iter()
        .map(|f| detect(params, &f.grids, mode, inf.ego, geom, inf.score_threshold, inf.nms_iou))
        .collect()
}

/// Pretrains a model with the given head on the whole training split.
pub fn pretrain(
    train_set: &Dataset,
    head: HeadKind,
    opts: &TrainOptions,
    seed: u64,
) -> Result<(ModelParams, Vec<f64>)> {
    let geom = GridGeometry::new(&train_set.config)?;
    let frames: Vec<&Frame> = train_set.frames.iter().collect();
    let mut order = substream(seed, "batch-order");
    let out = train(&frames, ModelParams::init(head, seed), &geom, opts, &mut order)?;
    Ok((out.params, out.trace))
}

/// Bootstrap loop: pretrain, then `N` times resample blocks, refine,
/// and harvest validation residuals and predicted covariances.
pub fn double_m_train(
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &DoubleMConfig,
    head: HeadKind,
    opts: &TrainOptions,
    inf: &InferOptions,
    seed: u64,
) -> Result<DoubleMOutcome> {
    cfg.validate()?;
    if val_set.is_empty() {
        return Err(Error::InsufficientData("validation split is empty".into()));
    }
    let geom = GridGeometry::new(&train_set.config)?;
    let blocks = build_blocks(train_set, cfg.block_length)?;
    let frames: Vec<&Frame> = train_set.frames.iter().collect();
    let mut order = substream(seed, "batch-order");
    let mut boot = substream(seed, "bootstrap");
    let pre = train(&frames, ModelParams::init(head, seed), &geom, opts, &mut order)?;
    let theta0 = pre.params.clone();
    let refine = TrainOptions { epochs: cfg.refine_epochs, lr: opts.lr * cfg.refine_lr_scale, ..opts.clone() };
    let mut params = pre.params;
    let mut residuals = ResidualSet::default();
    let mut sigma_hats = Vec::new();
    let mut refine_trace = Vec::new();
    for n in 1..=cfg.n_bootstraps {
        let sample = sample_bootstrap(&blocks, &mut boot)?;
        let picked: Vec<&Frame> = sample.frames.iter().map(|&k| &train_set.frames[k]).collect();
        let out = train(&picked, params, &geom, &refine, &mut order)?;
        params = out.params;
        refine_trace.extend(out.trace);
        let dets = detect_split(&params, val_set, &geom, opts.mode, inf)?;
        harvest(n, &dets, val_set, cfg.match_iou, &mut residuals, &mut sigma_hats)?;
        log::info!("bootstrap {n}/{}: {} residuals so far", cfg.n_bootstraps, residuals.len());
    }
    let sigma_e = residuals.sigma_e(head)?;
    let sigma_a = match head {
        HeadKind::Point => CovMatrix::zeros(UqStats::dim_for(head)),
        HeadKind::Gaussian(_) => estimate_sigma_a(&sigma_hats)?,
    };
    let stats = UqStats {
        head,
        sigma_a,
        sigma_e,
        n_bootstraps: cfg.n_bootstraps,
        n_residuals: residuals.len(),
        block_length: cfg.block_length,
    };
    stats.validate()?;
    Ok(DoubleMOutcome { theta0, params, stats, residuals, sigma_hats, pretrain_trace: pre.trace, refine_trace })
}

fn harvest(
    iteration: usize,
    dets: &[Vec<Detection>],
    val_set: &Dataset,
    iou: f64,
    residuals: &mut ResidualSet,
    sigma_hats: &mut Vec<CovMatrix>,
) -> Result<()> {
    for (k, (d, f)) in dets.iter().zip(&val_set.frames).enumerate() {
        for m in match_detections(d, &f.boxes, iou) {
            let gt = &f.boxes[m.gt];
            let det = &d[m.det];
            for i in 0..CORNERS {
                residuals.residuals.push(Residual {
                    iteration,
                    frame: k,
                    object: gt.object_id,
                    corner: i,
                    e: [gt.corners[i][0] - det.corners[i][0], gt.corners[i][1] - det.corners[i][1]],
                });
            }
            if let Some(u) = &det.uncertainty {
                sigma_hats.extend(u.covariances());
            }
        }
    }
    Ok(())
}

/// Attaches the method's inference-time covariance to plain detections.
pub fn apply_method(dets: Vec<Detection>, method: UqMethod, stats: Option<&UqStats>) -> Result<Vec<Detection>> {
    let need = |m: UqMethod| stats.ok_or_else(|| Error::Usage(format!("method {m} needs UQ statistics")));
    match method {
        UqMethod::None => Ok(dets.into_iter().map(|d| Detection { uncertainty: None, ..d }).collect()),
        UqMethod::Dm => {
            if dets.iter().any(|d| d.uncertainty.is_none()) {
                return Err(Error::Usage("dm needs a covariance head".into()));
            }
            Ok(dets)
        }
        UqMethod::Mbb => {
            let s = need(method)?;
            if s.sigma_e.dim() != 2 {
                return Err(Error::Usage(format!("mbb needs 2x2 statistics, got {}", s.sigma_e.dim())));
            }
            dets.into_iter()
                .map(|d| {
                    let u = BoxUncertainty::isotropic_img(&d.corners, &s.sigma_e)?;
                    Ok(Detection { uncertainty: Some(u), ..d })
                })
                .collect()
        }
        UqMethod::DoubleM => {
            let s = need(method)?;
            dets.into_iter()
                .map(|d| {
                    let u =
                        d.uncertainty.as_ref().ok_or_else(|| Error::Usage("doublem needs a covariance head".into()))?;
                    if HeadKind::Gaussian(u.variant()) != s.head {
                        return Err(Error::Usage(format!(
                            "statistics for {:?} applied to a {} model",
                            s.head,
                            u.variant()
                        )));
                    }
                    let combined = u.combined(&s.sigma_e, &s.sigma_a)?;
                    Ok(Detection { uncertainty: Some(combined), ..d })
                })
                .collect()
        }
    }
}

/// One inference pass, then `Σ̄ = Σ_e + ½Σ_a + ½Σ̂` on every corner.
pub fn double_m_infer(
    params: &ModelParams,
    stats: &UqStats,
    frame: &Frame,
    geom: &GridGeometry,
    mode: crate::detector::CollabMode,
    inf: &InferOptions,
) -> Result<Vec<Detection>> {
    if params.head() != stats.head {
        return Err(Error::Usage(format!(
            "model head {:?} does not match statistics head {:?}",
            params.head(),
            stats.head
        )));
    }
    let dets = detect(params, &frame.grids, mode, inf.ego, geom, inf.score_threshold, inf.nms_iou)?;
    apply_method(dets, UqMethod::DoubleM, Some(stats))
}

/// Direct modeling: one KL-trained model, `Σ̄ = Σ̂`.
pub fn run_dm(train_set: &Dataset, variant: Variant, opts: &TrainOptions, seed: u64) -> Result<ModelParams> {
    pretrain(train_set, HeadKind::Gaussian(variant), opts, seed).map(|(p, _)| p)
}

/// Bootstrap-only baseline: smooth-L1 regression, `Σ̄ = Σ_e`.
pub fn run_mbb(
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &DoubleMConfig,
    opts: &TrainOptions,
    inf: &InferOptions,
    seed: u64,
) -> Result<DoubleMOutcome> {
    double_m_train(train_set, val_set, cfg, HeadKind::Point, opts, inf, seed)
}
