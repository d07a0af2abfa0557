use serde::{Deserialize, Serialize};

use super::{CollabMode, GridGeometry, HeadKind, ModelParams, RawOutputs};
use crate::distributions::{BoxUncertainty, CornerGaussian, Variant, CORNERS, DIM};
use crate::error::Result;
use crate::eval::{quad_iou_or_zero, Quad};
use crate::math::autodiff::sigmoid;
use crate::math::linalg::{cholesky_reconstruct, CholParams, RAW_DIAG_CLAMP};
use crate::scenegen::BevGrid;

/// One predicted box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub score: f64,
    /// Absolute corners, same order as ground truth.
    pub corners: Quad,
    /// Corner distribution; `None` for deterministic heads.
    pub uncertainty: Option<BoxUncertainty>,
    /// Output cell that produced the box.
    pub cell: usize,
}

/// Every output cell as a candidate detection, in cell order.
pub fn decode_cells(raw: &RawOutputs, head: HeadKind, geom: &GridGeometry) -> Result<Vec<Detection>> {
    let plane = geom.out_cells();
    let scale = geom.offset_scale();
    let (cls, reg) = (raw.cls.data(), raw.reg.data());
    (0..plane)
        .map(|c| {
            let center = geom.cell_center(c);
            let mut corners = [[0.0; DIM]; CORNERS];
            for (i, corner) in corners.iter_mut().enumerate() {
                for d in 0..DIM {
                    let ch = i * DIM + d;
                    corner[d] = center[d] + scale[d] * reg[ch * plane + c].tanh();
                }
            }
            let uncertainty = match head {
                HeadKind::Point => None,
                HeadKind::Gaussian(v) => {
                    let cov = raw.cov.as_ref().expect("gaussian head has covariance outputs").data();
                    let r: Vec<f64> = (0..v.head_width()).map(|ch| cov[ch * plane + c]).collect();
                    Some(uncertainty_from_raw(v, &corners, &r)?)
                }
            };
            Ok(Detection { score: sigmoid(cls[c]), corners, uncertainty, cell: c })
        })
        .collect()
}

fn uncertainty_from_raw(v: Variant, corners: &Quad, raw: &[f64]) -> Result<BoxUncertainty> {
    Ok(match v {
        Variant::Img => BoxUncertainty::Img(
            corners
                .iter()
                .zip(raw.chunks(3))
                .map(|(m, r)| {
                    let cov = cholesky_reconstruct(&CholParams::new(DIM, r.to_vec())?);
                    CornerGaussian::new(m.to_vec(), cov)
                })
                .collect::<Result<_>>()?,
        ),
        Variant::Isg => BoxUncertainty::Isg(
            corners
                .iter()
                .flatten()
                .zip(raw)
                .map(|(m, r)| (*m, (2.0 * r.clamp(-RAW_DIAG_CLAMP, RAW_DIAG_CLAMP)).exp()))
                .collect(),
        ),
        Variant::Dmg => BoxUncertainty::Dmg {
            mean: corners.iter().flatten().copied().collect(),
            cov: cholesky_reconstruct(&CholParams::new(CORNERS * DIM, raw.to_vec())?),
        },
    })
}

/// Greedy suppression in descending score order; ties keep the earlier entry.
pub fn nms(mut candidates: Vec<Detection>, iou: f64) -> Vec<Detection> {
    candidates.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<Detection> = Vec::new();
    for c in candidates {
        if kept.iter().all(|k| quad_iou_or_zero(&k.corners, &c.corners) <= iou) {
            kept.push(c);
        }
    }
    kept
}

/// Thresholded, NMS-filtered detections for one frame.
pub fn detect(
    params: &ModelParams,
    grids: &[BevGrid],
    mode: CollabMode,
    ego: usize,
    geom: &GridGeometry,
    score_threshold: f64,
    nms_iou: f64,
) -> Result<Vec<Detection>> {
    let raw = params.raw_outputs(grids, mode, ego)?;
    let cands = decode_cells(&raw, params.head(), geom)?.into_iter().filter(|d| d.score >= score_threshold).collect();
    Ok(nms(cands, nms_iou))
}
