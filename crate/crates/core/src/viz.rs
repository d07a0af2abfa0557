//! SVG rendering of one frame: ground truth in green, predictions in red,
//! 95% corner ellipses in orange.

use std::fmt::Write as _;

use crate::detector::Detection;
use crate::distributions::{BoxUncertainty, CORNERS, DIM};
use crate::error::Result;
use crate::math::linalg::{eig2_sym, CovMatrix};
use crate::scenegen::{Frame, SceneConfig};

/// Chi-square 95% quantile with two degrees of freedom.
pub const CHI2_95_2D: f64 = 5.991;

/// Pixels per meter in the rendered image.
const SCALE: f64 = 12.0;

/// Confidence ellipse of a 2×2 covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub center: [f64; 2],
    /// Semi-axis along the major eigenvector.
    pub rx: f64,
    pub ry: f64,
    /// Angle of the major axis from +x, radians.
    pub angle: f64,
}

impl Ellipse {
    /// 95% region: semi-axes `√(5.991·λ)` along the eigenvectors.
    pub fn confidence_95(center: [f64; 2], cov: &CovMatrix) -> Self {
        let (a, b, c) = (cov.get(0, 0), cov.get(0, 1), cov.get(1, 1));
        let (lo, hi) = eig2_sym(a, b, c);
        let angle = 0.5 * (2.0 * b).atan2(a - c);
        Self { center, rx: (CHI2_95_2D * hi.max(0.0)).sqrt(), ry: (CHI2_95_2D * lo.max(0.0)).sqrt(), angle }
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        let (s, c) = self.angle.sin_cos();
        let d = [p[0] - self.center[0], p[1] - self.center[1]];
        let u = c * d[0] + s * d[1];
        let v = -s * d[0] + c * d[1];
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

/// Per-corner 2×2 covariances; the joint variant contributes its diagonal blocks.
pub fn corner_covariances(u: &BoxUncertainty) -> Vec<CovMatrix> {
    match u {
        BoxUncertainty::Dmg { cov, .. } => (0..CORNERS)
            .map(|i| {
                let e = (0..DIM * DIM).map(|k| cov.get(i * DIM + k / DIM, i * DIM + k % DIM)).collect();
                CovMatrix::new(DIM, e).expect("diagonal block of a symmetric matrix")
            })
            .collect(),
        other => other.covariances(),
    }
}

/// Ellipses for every corner of a detection.
pub fn detection_ellipses(det: &Detection) -> Vec<Ellipse> {
    let Some(u) = &det.uncertainty else { return vec![] };
    let means = u.corner_means();
    corner_covariances(u).iter().zip(means).map(|(c, m)| Ellipse::confidence_95(m, c)).collect()
}

fn polygon(s: &mut String, pts: &[[f64; 2]], h: f64, stroke: &str) {
    let p: Vec<String> = pts.iter().map(|q| format!("{:.2},{:.2}", q[0] * SCALE, h - q[1] * SCALE)).collect();
    writeln!(s, r#"<polygon points="{}" fill="none" stroke="{stroke}" stroke-width="2"/>"#, p.join(" "))
        .expect("write to string");
}

/// SVG document for a frame and its detections (y axis points up).
pub fn render_svg(frame: &Frame, dets: &[Detection], cfg: &SceneConfig) -> Result<String> {
    let (w, h) = (cfg.world_width * SCALE, cfg.world_length * SCALE);
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}">"#
    )
    .expect("write to string");
    writeln!(s, r#"<rect width="{w:.0}" height="{h:.0}" fill="white" stroke="black"/>"#).expect("write to string");
    for (a, p) in frame.poses.iter().enumerate() {
        writeln!(
            s,
            r#"<circle class="agent" cx="{:.2}" cy="{:.2}" r="4" fill="black"><title>agent {a}</title></circle>"#,
            p[0] * SCALE,
            h - p[1] * SCALE
        )
        .expect("write to string");
    }
    for b in &frame.boxes {
        polygon(&mut s, &b.corners, h, "green");
    }
    for d in dets {
        polygon(&mut s, &d.corners, h, "red");
        for e in detection_ellipses(d) {
            writeln!(
                s,
                r#"<ellipse cx="{:.3}" cy="{:.3}" rx="{:.3}" ry="{:.3}" transform="rotate({:.3} {:.3} {:.3})" fill="none" stroke="orange"/>"#,
                e.center[0] * SCALE,
                h - e.center[1] * SCALE,
                e.rx * SCALE,
                e.ry * SCALE,
                -e.angle.to_degrees(),
                e.center[0] * SCALE,
                h - e.center[1] * SCALE
            )
            .expect("write to string");
        }
    }
    s.push_str("</svg>\n");
    Ok(s)
}
