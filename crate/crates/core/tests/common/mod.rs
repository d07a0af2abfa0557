#![allow(dead_code)]
pub mod oracles;

use dmuq::math::{Graph, Tensor, Var};
use dmuq::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-4;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> f64
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&g, &vars).unwrap();
    g.value(out).item()
}

/// Norm-wise relative error between the reverse-mode gradient and central
/// differences, over all inputs, or over `coords` sampled (input, index) pairs.
pub fn grad_error<F>(inputs: &[Tensor], f: F, coords: Option<&[(usize, usize)]>) -> f64
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    grad_check(inputs, f, coords, false).expect("no kink test requested")
}

/// Like [`grad_error`], but with `reject_kinks` returns `None` when some
/// coordinate's probe window crosses a point where the function is not
/// differentiable (the one-sided slopes disagree).
pub fn grad_check<F>(inputs: &[Tensor], f: F, coords: Option<&[(usize, usize)]>, reject_kinks: bool) -> Option<f64>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&g, &vars).unwrap();
    let f0 = g.value(out).item();
    let grads = g.backward(out).unwrap();
    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = inputs.iter().enumerate().flat_map(|(i, t)| (0..t.numel()).map(move |k| (i, k))).collect();
            &all
        }
    };
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nn = 0.0;
    for &(i, k) in coords {
        let analytic = grads.get(vars[i]).map_or(0.0, |v| v[k]);
        let mut plus = inputs.to_vec();
        plus[i].data_mut()[k] += FD_STEP;
        let mut minus = inputs.to_vec();
        minus[i].data_mut()[k] -= FD_STEP;
        let (fp, fm) = (eval(&f, &plus), eval(&f, &minus));
        if reject_kinks {
            let (fwd, bwd) = ((fp - f0) / FD_STEP, (f0 - fm) / FD_STEP);
            if (fwd - bwd).abs() > 0.05 * fwd.abs().max(bwd.abs()).max(1e-3) {
                return None;
            }
        }
        let numeric = (fp - fm) / (2.0 * FD_STEP);
        diff += (analytic - numeric).powi(2);
        na += analytic * analytic;
        nn += numeric * numeric;
    }
    let scale = na.sqrt().max(nn.sqrt());
    Some(if scale < 1e-12 { diff.sqrt() } else { diff.sqrt() / scale })
}

use dmuq::detector::{detection_loss, forward, CollabMode, GridGeometry, HeadKind, LossOptions, ModelParams};
use dmuq::distributions::{kl_regression_loss_var, Variant};
use dmuq::scenegen::{box_corners, rasterize_view, Frame, GroundTruthBox, SceneConfig};
use rand::SeedableRng;

type Case = Box<dyn Fn(&Graph, &[Var]) -> Result<Var>>;

/// `sum(x ⊙ w)` with a fixed random weight, so every output element matters.
fn weighted_sum(g: &Graph, x: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    let w = g.constant(rand_tensor(rng, &shape, -1.0, 1.0));
    Ok(g.sum(g.mul(x, w)?))
}

/// Values bounded away from zero, for kinked ops.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor {
    let mut t = rand_tensor(rng, shape, margin, 2.0);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

fn elementwise_case(name: &str, seed: u64) -> (Vec<Tensor>, Case) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = rand_tensor(&mut rng, &[3, 4], -1.5, 1.5);
    let b = rand_tensor(&mut rng, &[3, 4], -1.5, 1.5);
    let w_seed = rng.random::<u64>();
    let ws = move || ChaCha8Rng::seed_from_u64(w_seed);
    let case: Case = match name {
        "add" => Box::new(move |g, v| weighted_sum(g, g.mul(g.add(v[0], v[1])?, v[0])?, &mut ws())),
        "sub" => Box::new(move |g, v| weighted_sum(g, g.mul(g.sub(v[0], v[1])?, v[1])?, &mut ws())),
        "mul" => Box::new(move |g, v| weighted_sum(g, g.mul(v[0], v[1])?, &mut ws())),
        "scale" => Box::new(move |g, v| weighted_sum(g, g.mul(g.scale(v[0], -1.7), v[1])?, &mut ws())),
        "sigmoid" => Box::new(move |g, v| weighted_sum(g, g.sigmoid(v[0]), &mut ws())),
        "exp" => Box::new(move |g, v| weighted_sum(g, g.exp(v[0]), &mut ws())),
        "tanh" => Box::new(move |g, v| weighted_sum(g, g.tanh(v[0]), &mut ws())),
        "sum" => Box::new(move |g, v| Ok(g.scale(g.sum(g.mul(v[0], v[0])?), 0.5))),
        "max_stack" => Box::new(move |g, v| weighted_sum(g, g.max_stack(&[v[0], v[1]])?, &mut ws())),
        "reshape" => Box::new(move |g, v| {
            let r = g.reshape(g.mul(v[0], v[1])?, vec![4, 3])?;
            weighted_sum(g, r, &mut ws())
        }),
        "gather" => Box::new(move |g, v| {
            let r = g.gather(g.tanh(v[0]), vec![0, 5, 5, 11, 2, 7])?;
            weighted_sum(g, r, &mut ws())
        }),
        other => panic!("unknown case {other}"),
    };
    (vec![a, b], case)
}

pub const ELEMENTWISE: [&str; 11] =
    ["add", "sub", "mul", "scale", "sigmoid", "exp", "tanh", "sum", "max_stack", "reshape", "gather"];

fn kinked_case(name: &str, seed: u64) -> (Vec<Tensor>, Case) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w_seed = rng.random::<u64>();
    let ws = move || ChaCha8Rng::seed_from_u64(w_seed);
    match name {
        "relu" => {
            let x = away_from_zero(&mut rng, &[10], 0.05);
            (vec![x], Box::new(move |g, v| weighted_sum(g, g.relu(v[0]), &mut ws())))
        }
        "smooth_l1" => {
            // stay clear of the |x| = beta transition
            let mut x = away_from_zero(&mut rng, &[10], 0.05);
            for v in x.data_mut() {
                if (v.abs() - 1.0).abs() < 0.05 {
                    *v *= 1.2;
                }
            }
            (vec![x], Box::new(move |g, v| Ok(g.smooth_l1(g.scale(v[0], 1.0), 1.0))))
        }
        other => panic!("unknown case {other}"),
    }
}

fn layer_case(name: &str, seed: u64) -> (Vec<Tensor>, Case) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w_seed = rng.random::<u64>();
    let ws = move || ChaCha8Rng::seed_from_u64(w_seed);
    match name {
        "linear" => {
            let ins = vec![
                rand_tensor(&mut rng, &[3, 5], -1.0, 1.0),
                rand_tensor(&mut rng, &[4, 5], -1.0, 1.0),
                rand_tensor(&mut rng, &[4], -1.0, 1.0),
            ];
            (ins, Box::new(move |g, v| weighted_sum(g, g.linear(v[0], v[1], v[2])?, &mut ws())))
        }
        "conv2d" | "conv2d_strided" => {
            let (stride, pad) = if name == "conv2d" { (1, 1) } else { (2, 1) };
            let ins = vec![
                rand_tensor(&mut rng, &[2, 7, 6], -1.0, 1.0),
                rand_tensor(&mut rng, &[3, 2, 3, 3], -1.0, 1.0),
                rand_tensor(&mut rng, &[3], -1.0, 1.0),
            ];
            (ins, Box::new(move |g, v| weighted_sum(g, g.conv2d(v[0], v[1], v[2], stride, pad)?, &mut ws())))
        }
        other => panic!("unknown case {other}"),
    }
}

fn covariance_case(name: &str, seed: u64) -> (Vec<Tensor>, Case) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w_seed = rng.random::<u64>();
    let ws = move || ChaCha8Rng::seed_from_u64(w_seed);
    match name {
        "chol_cov" => (
            vec![rand_tensor(&mut rng, &[3, 3], -1.0, 1.0)],
            Box::new(move |g, v| weighted_sum(g, g.chol_cov(v[0], 2)?, &mut ws())),
        ),
        "chol_cov_8" => (
            vec![rand_tensor(&mut rng, &[2, 36], -0.7, 0.7)],
            Box::new(move |g, v| weighted_sum(g, g.chol_cov(v[0], 8)?, &mut ws())),
        ),
        "diag_cov" => (
            vec![rand_tensor(&mut rng, &[3, 2], -1.0, 1.0)],
            Box::new(move |g, v| weighted_sum(g, g.diag_cov(v[0])?, &mut ws())),
        ),
        "logdet" => (
            vec![rand_tensor(&mut rng, &[4, 3], -1.0, 1.0)],
            Box::new(move |g, v| weighted_sum(g, g.logdet(g.chol_cov(v[0], 2)?)?, &mut ws())),
        ),
        "quad_form" => (
            vec![rand_tensor(&mut rng, &[4, 2], -2.0, 2.0), rand_tensor(&mut rng, &[4, 3], -1.0, 1.0)],
            Box::new(move |g, v| weighted_sum(g, g.quad_form(v[0], g.chol_cov(v[1], 2)?)?, &mut ws())),
        ),
        "focal" => {
            let targets: Vec<f64> = (0..12).map(|_| rng.random_bool(0.3) as u8 as f64).collect();
            (
                vec![rand_tensor(&mut rng, &[12], -4.0, 4.0)],
                Box::new(move |g, v| g.focal_loss(v[0], targets.clone(), 0.25, 2.0)),
            )
        }
        "kl_loss" => (
            vec![rand_tensor(&mut rng, &[4, 2], -2.0, 2.0), rand_tensor(&mut rng, &[4, 3], -1.0, 1.0)],
            Box::new(move |g, v| kl_regression_loss_var(g, v[0], g.chol_cov(v[1], 2)?)),
        ),
        "mlp_kl" => {
            // three dense layers predicting corner offsets and Cholesky raws
            let x = rand_tensor(&mut rng, &[5, 4], -1.0, 1.0);
            let y = rand_tensor(&mut rng, &[5, 2], -1.0, 1.0);
            let ins = vec![
                rand_tensor(&mut rng, &[8, 4], -0.8, 0.8),
                rand_tensor(&mut rng, &[8], -0.5, 0.5),
                rand_tensor(&mut rng, &[8, 8], -0.5, 0.5),
                rand_tensor(&mut rng, &[8], -0.5, 0.5),
                rand_tensor(&mut rng, &[5, 8], -0.5, 0.5),
                rand_tensor(&mut rng, &[5], -0.5, 0.5),
            ];
            let case: Case = Box::new(move |g, v| {
                let xv = g.constant(x.clone());
                let h1 = g.tanh(g.linear(xv, v[0], v[1])?);
                let h2 = g.sigmoid(g.linear(h1, v[2], v[3])?);
                let out = g.linear(h2, v[4], v[5])?;
                let mean = g.gather(out, (0..5).flat_map(|r| [r * 5, r * 5 + 1]).collect())?;
                let raw = g.gather(out, (0..5).flat_map(|r| [r * 5 + 2, r * 5 + 3, r * 5 + 4]).collect())?;
                let e = g.sub(g.constant(Tensor::from_vec(y.data().to_vec())), mean)?;
                let e = g.reshape(e, vec![5, 2])?;
                let cov = g.chol_cov(g.reshape(raw, vec![5, 3])?, 2)?;
                kl_regression_loss_var(g, e, cov)
            });
            (ins, case)
        }
        other => panic!("unknown case {other}"),
    }
}

pub const KINKED: [&str; 2] = ["relu", "smooth_l1"];
pub const LAYERS: [&str; 3] = ["linear", "conv2d", "conv2d_strided"];
pub const COVARIANCE: [&str; 8] =
    ["chol_cov", "chol_cov_8", "diag_cov", "logdet", "quad_form", "focal", "kl_loss", "mlp_kl"];

/// Two-vehicle frame seen by three agents.
pub fn two_object_frame(seed: u64) -> (Frame, SceneConfig) {
    let cfg = SceneConfig { n_scenes: 1, frames_per_scene: 1, ..SceneConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let boxes = (0..2)
        .map(|j| GroundTruthBox {
            object_id: j,
            class: 1,
            corners: box_corners(
                [rng.random_range(8.0..40.0), 10.0 + 20.0 * j as f64 + rng.random_range(-2.0..2.0)],
                rng.random_range(3.8..5.0),
                rng.random_range(1.7..2.2),
                rng.random_range(-0.3..0.3),
            ),
        })
        .collect();
    let mut frame =
        Frame { scene: 0, index: 0, poses: vec![[14.0, 20.0], [34.0, 20.0], [24.0, 38.0]], grids: vec![], boxes };
    frame.grids = (0..3).map(|a| rasterize_view(&frame, a, &cfg).unwrap()).collect();
    (frame, cfg)
}

/// Parameters of a randomly initialised model with biases moved off zero.
pub fn jittered_params(head: HeadKind, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    ModelParams::init(head, seed)
        .layers()
        .iter()
        .map(|l| {
            let mut t = l.tensor.clone();
            let jitter = if l.name.ends_with(".b") { 0.3 } else { 0.05 };
            t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-jitter..jitter));
            t
        })
        .collect()
}

fn detection_case(head: HeadKind, mode: CollabMode, seed: u64) -> (Vec<Tensor>, Case, Vec<(usize, usize)>) {
    let (frame, cfg) = two_object_frame(seed);
    let geom = GridGeometry::new(&cfg).unwrap();
    let ins = jittered_params(head, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc00d);
    // every layer contributes coordinates to the check
    let coords: Vec<(usize, usize)> = ins
        .iter()
        .enumerate()
        .flat_map(|(i, t)| {
            let n = t.numel();
            (0..4.min(n)).map(|_| (i, rng.random_range(0..n))).collect::<Vec<_>>()
        })
        .collect();
    let case: Case = Box::new(move |g, v| {
        let out = forward(g, v, head, &frame.grids, mode, 0)?;
        detection_loss(g, &out, head, &frame.boxes, &geom, &LossOptions::default())
    });
    (ins, case, coords)
}

pub fn detection_heads() -> Vec<(String, HeadKind)> {
    vec![
        ("img".into(), HeadKind::Gaussian(Variant::Img)),
        ("isg".into(), HeadKind::Gaussian(Variant::Isg)),
        ("dmg".into(), HeadKind::Gaussian(Variant::Dmg)),
        ("point".into(), HeadKind::Point),
    ]
}

/// Worst relative gradient error per case over `instances` random draws.
pub fn gradient_suite(instances: usize) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let mut run = |name: String, f: &dyn Fn(u64) -> f64| {
        let worst = (0..instances as u64).map(f).fold(0.0_f64, f64::max);
        out.push((name, worst));
    };
    for name in ELEMENTWISE {
        run(name.into(), &|s| {
            let (ins, c) = elementwise_case(name, s);
            grad_error(&ins, c, None)
        });
    }
    for name in KINKED {
        run(name.into(), &|s| {
            let (ins, c) = kinked_case(name, s);
            grad_error(&ins, c, None)
        });
    }
    for name in LAYERS {
        run(name.into(), &|s| {
            let (ins, c) = layer_case(name, s);
            grad_error(&ins, c, None)
        });
    }
    for name in COVARIANCE {
        run(name.into(), &|s| {
            let (ins, c) = covariance_case(name, s);
            grad_error(&ins, c, None)
        });
    }
    for (label, head) in detection_heads() {
        for mode in [CollabMode::LowerBound, CollabMode::Intermediate, CollabMode::EarlyUpperBound] {
            // instances whose probe window straddles a ReLU kink are redrawn
            let mut seed = 1000;
            let mut worst = 0.0_f64;
            let mut accepted = 0;
            while accepted < instances {
                let (ins, c, coords) = detection_case(head, mode, seed);
                seed += 1;
                if let Some(e) = grad_check(&ins, c, Some(&coords), true) {
                    worst = worst.max(e);
                    accepted += 1;
                }
                assert!(seed < 1000 + 4 * instances as u64 + 10, "too many non-smooth draws");
            }
            out.push((format!("detection_loss/{label}/{mode}"), worst));
        }
    }
    out
}
