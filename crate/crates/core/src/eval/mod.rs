//! Rotated-box overlap, average precision, NLL and the benchmark report.

mod geometry;
mod metrics;
mod report;

pub use geometry::{clip_convex, convex_hull, polygon_area, quad_iou, quad_iou_or_zero, Quad};
pub use metrics::{average_precision, match_detections, nll_score, MatchPair, NllSummary};
pub use report::{MetricReport, ReportRow};
