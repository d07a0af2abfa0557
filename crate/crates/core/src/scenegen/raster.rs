use serde::{Deserialize, Serialize};

use super::{Frame, GroundTruthBox, SceneConfig};
use crate::error::{Error, Result};

/// Binary occupancy raster, row-major with rows along y.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BevGrid {
    /// Originating agent; `BevGrid::FUSED` for early-fused rasters.
    pub agent: u32,
    pub width: usize,
    pub length: usize,
    cells: Vec<u8>,
}

impl BevGrid {
    pub const FUSED: u32 = u32::MAX;

    pub fn empty(agent: u32, width: usize, length: usize) -> Self {
        Self { agent, width, length, cells: vec![0; width * length] }
    }

    pub fn from_cells(agent: u32, width: usize, length: usize, cells: Vec<u8>) -> Result<Self> {
        if cells.len() != width * length {
            return Err(Error::Usage(format!(
                "grid {width}x{length} needs {} cells, got {}",
                width * length,
                cells.len()
            )));
        }
        if cells.iter().any(|&c| c > 1) {
            return Err(Error::Usage("occupancy cells must be 0 or 1".into()));
        }
        Ok(Self { agent, width, length, cells })
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    /// `(ix, iy)` with ix along x.
    pub fn get(&self, ix: usize, iy: usize) -> bool {
        self.cells[iy * self.width + ix] == 1
    }

    pub fn set(&mut self, ix: usize, iy: usize, v: bool) {
        self.cells[iy * self.width + ix] = v as u8;
    }

    pub fn count(&self) -> usize {
        self.cells.iter().map(|&c| c as usize).sum()
    }

    pub fn occupied(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.cells.iter().enumerate().filter(|(_, &c)| c == 1).map(|(k, _)| (k % self.width, k / self.width))
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.cells.iter().map(|&c| c as f64).collect()
    }
}

/// Rectangle in its own frame: center, unit axis, half extents.
struct Rect {
    c: [f64; 2],
    u: [f64; 2],
    hl: f64,
    hw: f64,
}

impl Rect {
    fn of(b: &GroundTruthBox) -> Self {
        let k = &b.corners;
        let c = b.center();
        let ax = [k[2][0] - k[1][0], k[2][1] - k[1][1]];
        let len = ax[0].hypot(ax[1]);
        let side = (k[0][0] - k[1][0]).hypot(k[0][1] - k[1][1]);
        Rect { c, u: [ax[0] / len, ax[1] / len], hl: 0.5 * len, hw: 0.5 * side }
    }

    fn local(&self, p: [f64; 2]) -> [f64; 2] {
        let d = [p[0] - self.c[0], p[1] - self.c[1]];
        [d[0] * self.u[0] + d[1] * self.u[1], -d[0] * self.u[1] + d[1] * self.u[0]]
    }

    fn contains(&self, p: [f64; 2]) -> bool {
        let q = self.local(p);
        q[0].abs() <= self.hl && q[1].abs() <= self.hw
    }

    /// Whether segment `a -> b` passes through the rectangle (slab test).
    fn hits_segment(&self, a: [f64; 2], b: [f64; 2]) -> bool {
        let p = self.local(a);
        let q = self.local(b);
        let d = [q[0] - p[0], q[1] - p[1]];
        let (mut t0, mut t1) = (0.0_f64, 1.0_f64);
        for (k, half) in [self.hl, self.hw].into_iter().enumerate() {
            if d[k].abs() < 1e-12 {
                if p[k].abs() > half {
                    return false;
                }
            } else {
                let ta = (-half - p[k]) / d[k];
                let tb = (half - p[k]) / d[k];
                t0 = t0.max(ta.min(tb));
                t1 = t1.min(ta.max(tb));
                if t0 > t1 {
                    return false;
                }
            }
        }
        true
    }
}

/// Occupancy raster seen by one agent.
///
/// A cell is marked for an object when its center lies on the object or it
/// holds the object's center, it is within sensing range, and the line of
/// sight to the cell center does not cross any other object.
pub fn rasterize_view(frame: &Frame, agent: usize, cfg: &SceneConfig) -> Result<BevGrid> {
    let pose = *frame.poses.get(agent).ok_or_else(|| Error::Usage(format!("agent {agent} out of range")))?;
    let (cw, cl) = cfg.cell_size();
    let rects: Vec<Rect> = frame.boxes.iter().map(Rect::of).collect();
    // Boxes sitting on top of the sensor cannot block its view.
    let blocks: Vec<bool> = rects.iter().map(|r| !r.contains(pose)).collect();
    let mut grid = BevGrid::empty(agent as u32, cfg.grid_width, cfg.grid_length);
    let cell_of = |p: [f64; 2]| {
        let ix = ((p[0] / cw).floor() as isize).clamp(0, cfg.grid_width as isize - 1) as usize;
        let iy = ((p[1] / cl).floor() as isize).clamp(0, cfg.grid_length as isize - 1) as usize;
        (ix, iy)
    };
    let center_cells: Vec<(usize, usize)> = rects.iter().map(|r| cell_of(r.c)).collect();
    for iy in 0..cfg.grid_length {
        for ix in 0..cfg.grid_width {
            let p = [(ix as f64 + 0.5) * cw, (iy as f64 + 0.5) * cl];
            if (p[0] - pose[0]).hypot(p[1] - pose[1]) > cfg.sensing_radius {
                continue;
            }
            let owner =
                rects.iter().enumerate().find(|(j, r)| r.contains(p) || center_cells[*j] == (ix, iy)).map(|(j, _)| j);
            let Some(owner) = owner else { continue };
            let occluded = cfg.occlusion
                && rects
                    .iter()
                    .enumerate()
                    .any(|(j, r)| j != owner && blocks[j] && !r.contains(p) && r.hits_segment(pose, p));
            if !occluded {
                grid.set(ix, iy, true);
            }
        }
    }
    Ok(grid)
}

/// Cellwise OR of agent rasters.
pub fn fuse_early(grids: &[BevGrid]) -> Result<BevGrid> {
    let first = grids.first().ok_or_else(|| Error::Usage("no grids to fuse".into()))?;
    let mut out = BevGrid::empty(BevGrid::FUSED, first.width, first.length);
    for g in grids {
        if (g.width, g.length) != (first.width, first.length) {
            return Err(Error::Usage(format!(
                "grid {}x{} does not match {}x{}",
                g.width, g.length, first.width, first.length
            )));
        }
        for (o, &c) in out.cells.iter_mut().zip(&g.cells) {
            *o |= c;
        }
    }
    Ok(out)
}
