use crate::error::{Error, Result};

pub type Quad = [[f64; 2]; 4];

const AREA_EPS: f64 = 1e-12;

/// Signed shoelace area; positive for counterclockwise vertex order.
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|k| {
            let (a, b) = (poly[k], poly[(k + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
        * 0.5
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Convex hull, counterclockwise, collinear points dropped (monotone chain).
pub fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> =
            if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Clips `subject` against convex counterclockwise `clip` (Sutherland-Hodgman).
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = subject.to_vec();
    let n = clip.len();
    for k in 0..n {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[k], clip[(k + 1) % n]);
        let input = std::mem::take(&mut out);
        let m = input.len();
        for i in 0..m {
            let cur = input[i];
            let prev = input[(i + m - 1) % m];
            let dc = cross(a, b, cur);
            let dp = cross(a, b, prev);
            if dc >= 0.0 {
                if dp < 0.0 {
                    out.push(intersect(prev, cur, dp, dc));
                }
                out.push(cur);
            } else if dp >= 0.0 {
                out.push(intersect(prev, cur, dp, dc));
            }
        }
    }
    out
}

fn intersect(p: [f64; 2], q: [f64; 2], dp: f64, dq: f64) -> [f64; 2] {
    let t = dp / (dp - dq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

fn ccw(q: &Quad) -> Result<Vec<[f64; 2]>> {
    let hull = convex_hull(q);
    if hull.len() < 3 || polygon_area(&hull) <= AREA_EPS || q.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Geometry(format!("degenerate quadrilateral {q:?}")));
    }
    Ok(hull)
}

/// Intersection over union of two quadrilaterals.
///
/// Inputs are replaced by their convex hulls, so vertex order does not matter.
pub fn quad_iou(a: &Quad, b: &Quad) -> Result<f64> {
    let (pa, pb) = (ccw(a)?, ccw(b)?);
    let (area_a, area_b) = (polygon_area(&pa), polygon_area(&pb));
    let inter = clip_convex(&pa, &pb);
    let i = if inter.len() < 3 { 0.0 } else { polygon_area(&inter).max(0.0) };
    let union = area_a + area_b - i;
    Ok((i / union).clamp(0.0, 1.0))
}

/// Like [`quad_iou`] but degenerate boxes score zero overlap.
pub fn quad_iou_or_zero(a: &Quad, b: &Quad) -> f64 {
    quad_iou(a, b).unwrap_or(0.0)
}
