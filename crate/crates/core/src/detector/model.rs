use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{CollabMode, HeadKind};
use crate::distributions::{CORNERS, DIM};
use crate::error::{Error, Result};
use crate::math::{Graph, Tensor, Var};
use crate::rng::substream_seed;
use crate::scenegen::{fuse_early, BevGrid};

/// Channels after the first encoder layer.
const ENC_HIDDEN: usize = 8;
/// Encoder output channels.
pub const FEATURE_DIM: usize = 16;
const KERNEL: usize = 3;
const CLS_PRIOR_BIAS: f64 = -2.0;
const HEAD_INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub tensor: Tensor,
}

/// All detector weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    head: HeadKind,
    layers: Vec<Layer>,
}

fn layout(head: HeadKind) -> Vec<(&'static str, Vec<usize>)> {
    let mut v = vec![
        ("enc1.w", vec![ENC_HIDDEN, 1, KERNEL, KERNEL]),
        ("enc1.b", vec![ENC_HIDDEN]),
        ("enc2.w", vec![FEATURE_DIM, ENC_HIDDEN, KERNEL, KERNEL]),
        ("enc2.b", vec![FEATURE_DIM]),
        ("dec.w", vec![FEATURE_DIM, FEATURE_DIM, KERNEL, KERNEL]),
        ("dec.b", vec![FEATURE_DIM]),
        ("cls.w", vec![1, FEATURE_DIM, 1, 1]),
        ("cls.b", vec![1]),
        ("reg.w", vec![CORNERS * DIM, FEATURE_DIM, 1, 1]),
        ("reg.b", vec![CORNERS * DIM]),
    ];
    if head.cov_width() > 0 {
        v.push(("cov.w", vec![head.cov_width(), FEATURE_DIM, 1, 1]));
        v.push(("cov.b", vec![head.cov_width()]));
    }
    v
}

impl ModelParams {
    /// He-normal hidden layers, small head weights, classification bias at a low prior.
    pub fn init(head: HeadKind, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(seed, "init"));
        let layers = layout(head)
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = if name.ends_with(".b") {
                    let b = if name == "cls.b" { CLS_PRIOR_BIAS } else { 0.0 };
                    vec![b; n]
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let std = if name.starts_with("enc") || name.starts_with("dec") {
                        (2.0 / fan_in as f64).sqrt()
                    } else {
                        HEAD_INIT_STD
                    };
                    let normal = Normal::new(0.0, std).expect("positive std");
                    (0..n).map(|_| normal.sample(&mut rng)).collect()
                };
                Layer { name: name.to_string(), tensor: Tensor::new(shape, data).expect("layout shape") }
            })
            .collect();
        Self { head, layers }
    }

    /// Rebuilds parameters from named tensors, checking them against the layout of `head`.
    pub fn from_layers(head: HeadKind, layers: Vec<Layer>) -> Result<Self> {
        let expected = layout(head);
        if expected.len() != layers.len() {
            return Err(Error::Format(format!(
                "{} layers for head {head:?}, expected {}",
                layers.len(),
                expected.len()
            )));
        }
        for ((name, shape), l) in expected.iter().zip(&layers) {
            if l.name != *name || l.tensor.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "layer {} {:?}, expected {name} {shape:?}",
                    l.name,
                    l.tensor.shape()
                )));
            }
            if l.tensor.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter(format!("non-finite weight in {}", l.name)));
            }
        }
        Ok(Self { head, layers })
    }

    pub fn head(&self) -> HeadKind {
        self.head
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.tensor.numel()).sum()
    }

    /// Copies the current weights into `g`, as trainable leaves or constants.
    pub fn bind(&self, g: &Graph, trainable: bool) -> Vec<Var> {
        self.layers
            .iter()
            .map(|l| if trainable { g.param(l.tensor.clone()) } else { g.constant(l.tensor.clone()) })
            .collect()
    }

    /// Forward pass without gradient tracking.
    pub fn raw_outputs(&self, grids: &[BevGrid], mode: CollabMode, ego: usize) -> Result<RawOutputs> {
        let g = Graph::new();
        let bound = self.bind(&g, false);
        let out = forward(&g, &bound, self.head, grids, mode, ego)?;
        Ok(RawOutputs { cls: g.value(out.cls), reg: g.value(out.reg), cov: out.cov.map(|c| g.value(c)) })
    }

    /// Encoder output for one raster.
    pub fn encode_grid(&self, grid: &BevGrid) -> Result<FeatureMap> {
        let g = Graph::new();
        let bound = self.bind(&g, false);
        let f = encode(&g, &bound, grid)?;
        Ok(FeatureMap { agent: grid.agent, tensor: g.value(f) })
    }
}

/// Encoded features of one agent: `[F_m, L_m/K_m, W_m/K_m]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub agent: u32,
    pub tensor: Tensor,
}

/// Graph handles of the per-cell head outputs, each `[C, rows, cols]`.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutputs {
    pub cls: Var,
    pub reg: Var,
    pub cov: Option<Var>,
}

/// Detached head outputs, each `[C, rows, cols]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawOutputs {
    pub cls: Tensor,
    pub reg: Tensor,
    pub cov: Option<Tensor>,
}

/// Two stride-2 convolutions with relu: `[1, L, W] -> [F_m, L/4, W/4]`.
pub fn encode(g: &Graph, p: &[Var], grid: &BevGrid) -> Result<Var> {
    let x = g.constant(Tensor::new(vec![1, grid.length, grid.width], grid.to_f64())?);
    let h = g.relu(g.conv2d(x, p[0], p[1], 2, 1)?);
    Ok(g.relu(g.conv2d(h, p[2], p[3], 2, 1)?))
}

/// Combines per-agent feature maps for the ego agent.
///
/// Early collaboration fuses before encoding, so here it passes the single
/// fused map through like the lower bound does.
pub fn aggregate(g: &Graph, features: &[(u32, Var)], mode: CollabMode, ego: u32) -> Result<Var> {
    let own = features
        .iter()
        .find(|(a, _)| *a == ego)
        .map(|(_, v)| *v)
        .ok_or_else(|| Error::Usage(format!("no feature map for ego agent {ego}")));
    match mode {
        CollabMode::LowerBound => own,
        CollabMode::Intermediate => {
            own?;
            let vars: Vec<Var> = features.iter().map(|(_, v)| *v).collect();
            g.max_stack(&vars)
        }
        CollabMode::EarlyUpperBound => match features {
            [(_, v)] => Ok(*v),
            _ => Err(Error::Usage("early collaboration expects one fused map".into())),
        },
    }
}

/// Shared 3x3 decoder conv followed by 1x1 classification, corner and covariance heads.
pub fn decode_and_head(g: &Graph, p: &[Var], head: HeadKind, feature: Var) -> Result<HeadOutputs> {
    let h = g.relu(g.conv2d(feature, p[4], p[5], 1, 1)?);
    let cls = g.conv2d(h, p[6], p[7], 1, 0)?;
    let reg = g.conv2d(h, p[8], p[9], 1, 0)?;
    let cov = match head {
        HeadKind::Point => None,
        HeadKind::Gaussian(_) => Some(g.conv2d(h, p[10], p[11], 1, 0)?),
    };
    Ok(HeadOutputs { cls, reg, cov })
}

/// Full forward pass for one frame's agent rasters.
pub fn forward(
    g: &Graph,
    p: &[Var],
    head: HeadKind,
    grids: &[BevGrid],
    mode: CollabMode,
    ego: usize,
) -> Result<HeadOutputs> {
    let ego_grid = grids.get(ego).ok_or_else(|| Error::Usage(format!("ego agent {ego} has no grid")))?;
    let feature = match mode {
        CollabMode::LowerBound => encode(g, p, ego_grid)?,
        CollabMode::Intermediate => {
            let feats = grids.iter().map(|gr| Ok((gr.agent, encode(g, p, gr)?))).collect::<Result<Vec<_>>>()?;
            aggregate(g, &feats, mode, ego_grid.agent)?
        }
        CollabMode::EarlyUpperBound => {
            let fused = fuse_early(grids)?;
            let f = encode(g, p, &fused)?;
            aggregate(g, &[(fused.agent, f)], mode, fused.agent)?
        }
    };
    decode_and_head(g, p, head, feature)
}
