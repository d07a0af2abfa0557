//! Brute-force references for the evaluation code.

use dmuq::detector::Detection;
use dmuq::distributions::BoxUncertainty;
use dmuq::eval::{average_precision, quad_iou, quad_iou_or_zero, Quad};
use dmuq::scenegen::{box_corners, GroundTruthBox};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_quad(rng: &mut ChaCha8Rng, around: [f64; 2], spread: f64) -> Quad {
    let mut jitter = || rng.random_range(-1.0..1.0) * spread;
    let center = [around[0] + jitter(), around[1] + jitter()];
    box_corners(center, rng.random_range(1.0..5.0), rng.random_range(0.5..2.5), rng.random_range(-3.2..3.2))
}

pub fn inside(q: &Quad, p: [f64; 2]) -> bool {
    let mut pos = 0;
    let mut neg = 0;
    for i in 0..4 {
        let (a, b) = (q[i], q[(i + 1) % 4]);
        let cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        if cross >= 0.0 {
            pos += 1;
        }
        if cross <= 0.0 {
            neg += 1;
        }
    }
    pos == 4 || neg == 4
}

/// IoU by uniform sampling over the joint bounding rectangle.
pub fn mc_iou(rng: &mut ChaCha8Rng, a: &Quad, b: &Quad, samples: usize) -> f64 {
    let pts = a.iter().chain(b);
    let (x0, x1) = pts.clone().fold((f64::MAX, f64::MIN), |(lo, hi), p| (lo.min(p[0]), hi.max(p[0])));
    let (y0, y1) = pts.fold((f64::MAX, f64::MIN), |(lo, hi), p| (lo.min(p[1]), hi.max(p[1])));
    let (mut both, mut either) = (0u64, 0u64);
    for _ in 0..samples {
        let p = [rng.random_range(x0..x1), rng.random_range(y0..y1)];
        let (ia, ib) = (inside(a, p), inside(b, p));
        both += (ia && ib) as u64;
        either += (ia || ib) as u64;
    }
    both as f64 / either as f64
}

/// Largest |quad_iou - rasterised| over `pairs` random overlapping pairs.
pub fn iou_max_error(seed: u64, pairs: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..pairs)
        .map(|_| {
            let a = random_quad(&mut rng, [0.0, 0.0], 0.0);
            let b = random_quad(&mut rng, [0.0, 0.0], 1.5);
            let mc = mc_iou(&mut rng, &a, &b, 1_000_000);
            (quad_iou(&a, &b).unwrap() - mc).abs()
        })
        .fold(0.0, f64::max)
}

pub fn gt(j: u32, corners: Quad) -> GroundTruthBox {
    GroundTruthBox { object_id: j, class: 1, corners }
}

pub fn det(score: f64, corners: Quad, uncertainty: Option<BoxUncertainty>) -> Detection {
    Detection { score, corners, uncertainty, cell: 0 }
}

/// A frame of up to `n` objects and noisy detections plus false alarms.
pub fn random_frame(rng: &mut ChaCha8Rng, n: usize) -> (Vec<Detection>, Vec<GroundTruthBox>) {
    let gts: Vec<GroundTruthBox> = (0..rng.random_range(0..=n))
        .map(|j| {
            let c = [rng.random_range(0.0..40.0), rng.random_range(0.0..40.0)];
            gt(j as u32, random_quad(rng, c, 0.0))
        })
        .collect();
    let mut dets = Vec::new();
    for g in &gts {
        for _ in 0..rng.random_range(0..3) {
            let jitter = rng.random_range(0.0..1.0);
            let corners =
                g.corners.map(|p| [p[0] + rng.random_range(-jitter..jitter), p[1] + rng.random_range(-jitter..jitter)]);
            dets.push(det(rng.random::<f64>(), corners, None));
        }
    }
    for _ in 0..rng.random_range(0..5) {
        let c = [rng.random_range(0.0..40.0), rng.random_range(0.0..40.0)];
        dets.push(det(rng.random::<f64>(), random_quad(rng, c, 0.0), None));
    }
    (dets, gts)
}

/// Greedy matching by explicit search: highest score first, best unused truth.
pub fn oracle_matches(dets: &[Detection], gts: &[GroundTruthBox], thr: f64) -> Vec<(usize, usize, f64)> {
    let mut remaining: Vec<usize> = (0..dets.len()).collect();
    let mut used = vec![false; gts.len()];
    let mut out = Vec::new();
    while !remaining.is_empty() {
        let mut top = 0;
        for k in 1..remaining.len() {
            if dets[remaining[k]].score > dets[remaining[top]].score {
                top = k;
            }
        }
        let d = remaining.remove(top);
        let mut best: Option<(usize, f64)> = None;
        for j in 0..gts.len() {
            if used[j] {
                continue;
            }
            let v = quad_iou_or_zero(&dets[d].corners, &gts[j].corners);
            if v >= thr && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, v)) = best {
            used[j] = true;
            out.push((d, j, v));
        }
    }
    out
}

/// Precision envelope integrated over every distinct recall step.
pub fn oracle_ap(dets: &[Vec<Detection>], gts: &[Vec<GroundTruthBox>], thr: f64) -> f64 {
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    let mut ranked: Vec<(f64, bool)> = Vec::new();
    for (d, g) in dets.iter().zip(gts) {
        let tp: Vec<usize> = oracle_matches(d, g, thr).iter().map(|m| m.0).collect();
        for (k, x) in d.iter().enumerate() {
            ranked.push((x.score, tp.contains(&k)));
        }
    }
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let n = ranked.len();
    let prec: Vec<f64> = (0..n).map(|k| ranked[..=k].iter().filter(|r| r.1).count() as f64 / (k + 1) as f64).collect();
    let rec: Vec<f64> = (0..n).map(|k| ranked[..=k].iter().filter(|r| r.1).count() as f64 / n_gt as f64).collect();
    let mut ap = 0.0;
    for k in 0..n {
        let prev = if k == 0 { 0.0 } else { rec[k - 1] };
        let envelope = prec[k..].iter().cloned().fold(0.0, f64::max);
        ap += (rec[k] - prev) * envelope;
    }
    ap
}

/// Largest |AP - oracle| over `instances` non-empty four-frame sets and
/// thresholds 0.3/0.5/0.7.
pub fn ap_max_error(seed: u64, instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    let mut done = 0;
    while done < instances {
        let frames: Vec<_> = (0..4).map(|_| random_frame(&mut rng, 5)).collect();
        let (dets, gts): (Vec<_>, Vec<_>) = frames.into_iter().unzip();
        if gts.iter().all(Vec::is_empty) {
            continue;
        }
        done += 1;
        for thr in [0.3, 0.5, 0.7] {
            let got = average_precision(&dets, &gts, thr).unwrap();
            worst = worst.max((got - oracle_ap(&dets, &gts, thr)).abs());
        }
    }
    worst
}
