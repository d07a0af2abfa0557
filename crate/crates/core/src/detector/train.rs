use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::{detection_loss, forward, CollabMode, GridGeometry, LossOptions, ModelParams};
use crate::error::{Error, Result};
use crate::math::Graph;
use crate::scenegen::Frame;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Frames per SGD step.
    pub batch_size: usize,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub loss: LossOptions,
    pub mode: CollabMode,
    /// Index of the ego agent.
    pub ego: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-2,
            momentum: 0.9,
            batch_size: 1,
            clip_norm: Some(1.0),
            loss: LossOptions::default(),
            mode: CollabMode::Intermediate,
            ego: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Mean per-frame loss of each epoch.
    pub trace: Vec<f64>,
}

/// Loss and flat gradient (layer order) for one frame.
pub(crate) fn frame_gradient(
    params: &ModelParams,
    frame: &Frame,
    geom: &GridGeometry,
    opts: &TrainOptions,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let g = Graph::new();
    let bound = params.bind(&g, true);
    let out = forward(&g, &bound, params.head(), &frame.grids, opts.mode, opts.ego)?;
    let loss = detection_loss(&g, &out, params.head(), &frame.boxes, geom, &opts.loss)?;
    let value = g.value(loss).item();
    let grads = g.backward(loss)?;
    let flat = params
        .layers()
        .iter()
        .zip(&bound)
        .map(|(l, v)| grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; l.tensor.numel()]))
        .collect();
    Ok((value, flat))
}

/// SGD with momentum over `frames`, visiting them in an order shuffled by `rng` each epoch.
pub fn train(
    frames: &[&Frame],
    params: ModelParams,
    geom: &GridGeometry,
    opts: &TrainOptions,
    rng: &mut ChaCha8Rng,
) -> Result<TrainOutcome> {
    if frames.is_empty() {
        return Err(Error::InsufficientData("empty training set".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut params = params;
    let mut velocity: Vec<Vec<f64>> = params.layers().iter().map(|l| vec![0.0; l.tensor.numel()]).collect();
    let mut trace = Vec::with_capacity(opts.epochs);
    let mut order: Vec<usize> = (0..frames.len()).collect();
    for epoch in 0..opts.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for (step, batch) in order.chunks(opts.batch_size).enumerate() {
            let mut acc: Option<Vec<Vec<f64>>> = None;
            for &k in batch {
                let (loss, grads) = frame_gradient(&params, frames[k], geom, opts)
                    .map_err(|e| Error::Training(format!("epoch {epoch} step {step}: {e}")))?;
                if !loss.is_finite() {
                    return Err(Error::Training(format!(
                        "loss diverged to {loss} at epoch {epoch} step {step} (lr {})",
                        opts.lr
                    )));
                }
                total += loss;
                match &mut acc {
                    None => acc = Some(grads),
                    Some(a) => a.iter_mut().flatten().zip(grads.iter().flatten()).for_each(|(x, y)| *x += y),
                }
            }
            let mut grads = acc.expect("non-empty batch");
            let inv = 1.0 / batch.len() as f64;
            grads.iter_mut().flatten().for_each(|x| *x *= inv);
            if let Some(cap) = opts.clip_norm {
                let norm = grads.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
                if !norm.is_finite() {
                    return Err(Error::Training(format!("non-finite gradient at epoch {epoch} step {step}")));
                }
                if norm > cap {
                    let s = cap / norm;
                    grads.iter_mut().flatten().for_each(|x| *x *= s);
                }
            }
            for ((layer, v), gr) in params.layers_mut().iter_mut().zip(&mut velocity).zip(&grads) {
                for ((w, vi), gi) in layer.tensor.data_mut().iter_mut().zip(v.iter_mut()).zip(gr) {
                    *vi = opts.momentum * *vi + gi;
                    *w -= opts.lr * *vi;
                }
            }
        }
        let mean = total / frames.len() as f64;
        log::debug!("epoch {epoch}: mean loss {mean:.4}");
        trace.push(mean);
    }
    Ok(TrainOutcome { params, trace })
}
