use super::{GridGeometry, HeadKind, HeadOutputs};
use crate::distributions::{kl_regression_loss_var, Variant, CORNERS, DIM};
use crate::error::Result;
use crate::math::{Graph, Tensor, Var};
use crate::scenegen::GroundTruthBox;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOptions {
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Smooth-L1 transition point for point regression, meters.
    pub smooth_l1_beta: f64,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self { focal_alpha: 0.25, focal_gamma: 2.0, smooth_l1_beta: 1.5 }
    }
}

/// Box index owning each output cell: the cell holding the box center,
/// ties broken toward the larger box.
pub fn assign_targets(boxes: &[GroundTruthBox], geom: &GridGeometry) -> Vec<Option<usize>> {
    let mut owner: Vec<Option<usize>> = vec![None; geom.out_cells()];
    for (j, b) in boxes.iter().enumerate() {
        let Some(cell) = geom.cell_of(b.center()) else { continue };
        let replace = match owner[cell] {
            None => true,
            Some(k) => b.area() > boxes[k].area(),
        };
        if replace {
            owner[cell] = Some(j);
        }
    }
    owner
}

/// Flat indices of channels `0..channels` at each cell, cell-major.
fn cell_major(cells: &[usize], channels: usize, plane: usize) -> Vec<usize> {
    cells.iter().flat_map(|&c| (0..channels).map(move |ch| ch * plane + c)).collect()
}

/// Focal classification over every cell plus the regression loss over
/// positive cells (KL for Gaussian heads, smooth-L1 for point heads).
pub fn detection_loss(
    g: &Graph,
    out: &HeadOutputs,
    head: HeadKind,
    boxes: &[GroundTruthBox],
    geom: &GridGeometry,
    opts: &LossOptions,
) -> Result<Var> {
    let owner = assign_targets(boxes, geom);
    let targets: Vec<f64> = owner.iter().map(|o| o.is_some() as u8 as f64).collect();
    let focal = g.focal_loss(out.cls, targets, opts.focal_alpha, opts.focal_gamma)?;
    let positives: Vec<(usize, usize)> = owner.iter().enumerate().filter_map(|(c, o)| o.map(|j| (c, j))).collect();
    if positives.is_empty() {
        return Ok(focal);
    }
    let n = positives.len();
    let plane = geom.out_cells();
    let cells: Vec<usize> = positives.iter().map(|p| p.0).collect();
    let scale = geom.offset_scale();
    let mut target_off = Vec::with_capacity(n * CORNERS * DIM);
    for &(c, j) in &positives {
        let center = geom.cell_center(c);
        for corner in &boxes[j].corners {
            target_off.extend([corner[0] - center[0], corner[1] - center[1]]);
        }
    }
    let scales: Vec<f64> = (0..n * CORNERS).flat_map(|_| scale).collect();
    let raw = g.gather(out.reg, cell_major(&cells, CORNERS * DIM, plane))?;
    let pred = g.mul(g.tanh(raw), g.constant(Tensor::from_vec(scales)))?;
    let e = g.sub(g.constant(Tensor::from_vec(target_off)), pred)?;
    let reg = match head {
        HeadKind::Point => g.smooth_l1(e, opts.smooth_l1_beta),
        HeadKind::Gaussian(v) => {
            let cov_out = out.cov.expect("gaussian head has covariance outputs");
            let craw = g.gather(cov_out, cell_major(&cells, v.head_width(), plane))?;
            let (e, cov) = match v {
                Variant::Img => {
                    let r = g.reshape(craw, vec![n * CORNERS, DIM * (DIM + 1) / 2])?;
                    (g.reshape(e, vec![n * CORNERS, DIM])?, g.chol_cov(r, DIM)?)
                }
                Variant::Isg => {
                    let r = g.reshape(craw, vec![n * CORNERS, DIM])?;
                    (g.reshape(e, vec![n * CORNERS, DIM])?, g.diag_cov(r)?)
                }
                Variant::Dmg => {
                    let r = g.reshape(craw, vec![n, v.head_width()])?;
                    (g.reshape(e, vec![n, CORNERS * DIM])?, g.chol_cov(r, CORNERS * DIM)?)
                }
            };
            kl_regression_loss_var(g, e, cov)?
        }
    };
    g.add(focal, reg)
}
