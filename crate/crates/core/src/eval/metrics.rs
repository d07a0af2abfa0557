use crate::detector::Detection;
use crate::error::{Error, Result};
use crate::scenegen::GroundTruthBox;

use super::quad_iou_or_zero;

/// One detection paired with the ground truth it explains.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchPair {
    pub det: usize,
    pub gt: usize,
    pub iou: f64,
}

/// Greedy matching: detections in descending score order each claim the
/// unused ground truth of highest IoU, if that IoU reaches `threshold`.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruthBox], threshold: f64) -> Vec<MatchPair> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut used = vec![false; gts.len()];
    let mut out = Vec::new();
    for d in order {
        let best = gts
            .iter()
            .enumerate()
            .filter(|(j, _)| !used[*j])
            .map(|(j, g)| (j, quad_iou_or_zero(&dets[d].corners, &g.corners)))
            .fold(None::<(usize, f64)>, |acc, (j, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((j, v)),
            });
        if let Some((j, v)) = best {
            if v >= threshold {
                used[j] = true;
                out.push(MatchPair { det: d, gt: j, iou: v });
            }
        }
    }
    out
}

/// All-point interpolated average precision over a whole split.
///
/// `dets[k]` and `gts[k]` belong to frame `k`. Detections are matched per
/// frame, then ranked globally by score.
pub fn average_precision(dets: &[Vec<Detection>], gts: &[Vec<GroundTruthBox>], threshold: f64) -> Result<f64> {
    if dets.len() != gts.len() {
        return Err(Error::Usage(format!("{} detection frames vs {} truth frames", dets.len(), gts.len())));
    }
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return Err(Error::UndefinedMetric("average precision needs at least one ground truth".into()));
    }
    let mut ranked: Vec<(f64, bool)> = Vec::new();
    for (d, g) in dets.iter().zip(gts) {
        let mut tp = vec![false; d.len()];
        for m in match_detections(d, g, threshold) {
            tp[m.det] = true;
        }
        ranked.extend(d.iter().zip(tp).map(|(x, t)| (x.score, t)));
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut precision = Vec::with_capacity(ranked.len());
    let mut recall = Vec::with_capacity(ranked.len());
    let mut hits = 0usize;
    for (k, (_, t)) in ranked.iter().enumerate() {
        hits += *t as usize;
        precision.push(hits as f64 / (k + 1) as f64);
        recall.push(hits as f64 / n_gt as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    Ok(ap)
}

/// Matched-corner statistics behind an NLL value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NllSummary {
    pub nll: f64,
    pub corners: usize,
    pub matches: usize,
}

/// Mean negative log density of matched ground-truth corners.
pub fn nll_score(dets: &[Vec<Detection>], gts: &[Vec<GroundTruthBox>], threshold: f64) -> Result<NllSummary> {
    if dets.len() != gts.len() {
        return Err(Error::Usage(format!("{} detection frames vs {} truth frames", dets.len(), gts.len())));
    }
    let mut total = 0.0;
    let mut corners = 0usize;
    let mut matches = 0usize;
    for (d, g) in dets.iter().zip(gts) {
        for m in match_detections(d, g, threshold) {
            let u = d[m.det]
                .uncertainty
                .as_ref()
                .ok_or_else(|| Error::UndefinedMetric("NLL needs detections with a corner distribution".into()))?;
            let per = u.corner_nlls(&g[m.gt].corners)?;
            total += per.iter().sum::<f64>();
            corners += per.len();
            matches += 1;
        }
    }
    if matches == 0 {
        return Err(Error::UndefinedMetric(format!("no detections matched at IoU {threshold}")));
    }
    Ok(NllSummary { nll: total / corners as f64, corners, matches })
}
