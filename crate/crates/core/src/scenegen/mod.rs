//! Synthetic multi-agent driving scenes.
//!
//! Rectangular vehicles drive along horizontal lanes of a planar world with
//! autocorrelated heading and speed perturbations. Stationary roadside agents
//! observe them with a limited sensing radius and ray occlusion, each
//! producing a binary BEV occupancy raster per frame.

mod io;
mod raster;

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::distributions::{CORNERS, DIM};
use crate::error::{Error, Result};
use crate::rng::substream;

pub use io::{read_dataset, write_dataset, DATASET_MAGIC};
pub use raster::{fuse_early, rasterize_view, BevGrid};

/// Seconds between frames (5 Hz).
pub const FRAME_DT: f64 = 0.2;
/// Spatial downsampling of the detector encoder; grid dims must be multiples of it.
pub const DOWNSAMPLE: usize = 4;

const MIN_LENGTH: f64 = 3.8;
const MAX_LENGTH: f64 = 5.0;
const MIN_WIDTH: f64 = 1.7;
const MAX_WIDTH: f64 = 2.2;
const MAX_DRIFT_ANGLE: f64 = 0.4;
/// Lanes must leave at least this much room around the widest vehicle.
const LANE_CLEARANCE: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    /// World extent along x, meters.
    pub world_width: f64,
    /// World extent along y, meters.
    pub world_length: f64,
    /// Raster cells along x.
    pub grid_width: usize,
    /// Raster cells along y.
    pub grid_length: usize,
    pub n_agents: usize,
    pub max_objects: usize,
    pub n_scenes: usize,
    pub frames_per_scene: usize,
    /// Meters.
    pub sensing_radius: f64,
    pub occlusion: bool,
    /// Standard deviation of per-frame heading (rad) and speed (m/s) perturbations.
    pub motion_noise: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            world_width: 48.0,
            world_length: 48.0,
            grid_width: 32,
            grid_length: 32,
            n_agents: 3,
            max_objects: 6,
            n_scenes: 8,
            frames_per_scene: 100,
            sensing_radius: 20.0,
            occlusion: true,
            motion_noise: 0.05,
            seed: 42,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_agents == 0 {
            return bad("n_agents must be at least 1".into());
        }
        if self.n_scenes == 0 || self.frames_per_scene == 0 {
            return bad("n_scenes and frames_per_scene must be positive".into());
        }
        if !(self.sensing_radius > 0.0) {
            return bad(format!("sensing_radius {} must be positive", self.sensing_radius));
        }
        if !(self.world_width > 0.0 && self.world_length > 0.0) {
            return bad("world size must be positive".into());
        }
        if self.grid_width == 0
            || self.grid_length == 0
            || self.grid_width % DOWNSAMPLE != 0
            || self.grid_length % DOWNSAMPLE != 0
        {
            return bad(format!(
                "grid {}x{} must be non-empty and divisible by {DOWNSAMPLE}",
                self.grid_width, self.grid_length
            ));
        }
        if !(self.motion_noise >= 0.0) {
            return bad("motion_noise must be non-negative".into());
        }
        if self.max_objects == 0 {
            return bad("max_objects must be at least 1".into());
        }
        if self.lane_spacing() < MAX_WIDTH + 2.0 * LANE_CLEARANCE {
            return bad(format!(
                "cannot pack {} objects into a {} m world (lane spacing {:.2} m)",
                self.max_objects,
                self.world_length,
                self.lane_spacing()
            ));
        }
        if self.world_width < 2.0 * MAX_LENGTH + 2.0 {
            return bad(format!("world width {} too small for a vehicle", self.world_width));
        }
        Ok(())
    }

    /// Raster cells per meter along x and y.
    pub fn cells_per_meter(&self) -> (f64, f64) {
        (self.grid_width as f64 / self.world_width, self.grid_length as f64 / self.world_length)
    }

    /// Cell edge lengths in meters along x and y.
    pub fn cell_size(&self) -> (f64, f64) {
        (self.world_width / self.grid_width as f64, self.world_length / self.grid_length as f64)
    }

    fn lane_spacing(&self) -> f64 {
        self.world_length / self.max_objects as f64
    }
}

/// A labelled vehicle: four corners counterclockwise from rear-left.
///
/// "Rear" is taken along the box axis folded into `[-π/2, π/2)`, so the
/// corner order depends only on the footprint, not the travel direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub object_id: u32,
    pub class: u32,
    pub corners: [[f64; DIM]; CORNERS],
}

impl GroundTruthBox {
    pub fn center(&self) -> [f64; DIM] {
        let mut c = [0.0; DIM];
        for corner in &self.corners {
            c[0] += corner[0] / CORNERS as f64;
            c[1] += corner[1] / CORNERS as f64;
        }
        c
    }

    pub fn area(&self) -> f64 {
        crate::eval::polygon_area(&self.corners).abs()
    }
}

/// One synchronized time step of one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub scene: u32,
    /// Index within the scene.
    pub index: u32,
    pub poses: Vec<[f64; 2]>,
    pub grids: Vec<BevGrid>,
    pub boxes: Vec<GroundTruthBox>,
}

/// Frames of one split, ordered by scene then time.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: SceneConfig,
    pub frames: Vec<Frame>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Half-open frame ranges of each scene, in order.
    pub fn scene_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        for k in 1..=self.frames.len() {
            if k == self.frames.len() || self.frames[k].scene != self.frames[start].scene {
                out.push(start..k);
                start = k;
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
struct Vehicle {
    id: u32,
    x: f64,
    y: f64,
    lane_y: f64,
    /// +1 drives toward +x, -1 toward -x.
    dir: f64,
    /// Deviation of travel from the lane axis, radians.
    drift: f64,
    speed: f64,
    length: f64,
    width: f64,
}

impl Vehicle {
    /// Box axis angle folded into `[-π/2, π/2)`.
    fn axis_angle(&self) -> f64 {
        self.dir * self.drift
    }

    fn corners(&self) -> [[f64; DIM]; CORNERS] {
        box_corners([self.x, self.y], self.length, self.width, self.axis_angle())
    }
}

/// Corners of a `length × width` rectangle, counterclockwise from rear-left.
pub fn box_corners(center: [f64; 2], length: f64, width: f64, angle: f64) -> [[f64; DIM]; CORNERS] {
    let (s, c) = angle.sin_cos();
    let u = [c, s];
    let v = [-s, c];
    let (hl, hw) = (0.5 * length, 0.5 * width);
    let at = |a: f64, b: f64| [center[0] + a * u[0] + b * v[0], center[1] + a * u[1] + b * v[1]];
    [at(-hl, hw), at(-hl, -hw), at(hl, -hw), at(hl, hw)]
}

/// Generates `cfg.n_scenes` scenes of `cfg.frames_per_scene` frames each.
pub fn generate_dataset(cfg: &SceneConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut frames = Vec::with_capacity(cfg.n_scenes * cfg.frames_per_scene);
    for scene in 0..cfg.n_scenes {
        let mut rng = substream(cfg.seed, &format!("scenegen/scene{scene}"));
        generate_scene(cfg, scene as u32, &mut rng, &mut frames)?;
    }
    Ok(Dataset { config: cfg.clone(), frames })
}

fn generate_scene(cfg: &SceneConfig, scene: u32, rng: &mut ChaCha8Rng, out: &mut Vec<Frame>) -> Result<()> {
    let poses = place_agents(cfg, rng);
    let mut vehicles = spawn_vehicles(cfg, rng);
    let noise = Normal::new(0.0, cfg.motion_noise.max(0.0)).map_err(|e| Error::Config(format!("motion noise: {e}")))?;
    for index in 0..cfg.frames_per_scene {
        if index > 0 {
            for v in &mut vehicles {
                step_vehicle(cfg, v, rng, &noise);
            }
        }
        let boxes: Vec<GroundTruthBox> =
            vehicles.iter().map(|v| GroundTruthBox { object_id: v.id, class: 1, corners: v.corners() }).collect();
        let mut frame = Frame { scene, index: index as u32, poses: poses.clone(), grids: vec![], boxes };
        frame.grids = (0..cfg.n_agents).map(|a| rasterize_view(&frame, a, cfg)).collect::<Result<_>>()?;
        out.push(frame);
    }
    Ok(())
}

fn place_agents(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let center = [0.5 * cfg.world_width, 0.5 * cfg.world_length];
    let radius = 0.3 * cfg.world_width.min(cfg.world_length);
    let phase = rng.random_range(0.0..2.0 * PI);
    (0..cfg.n_agents)
        .map(|a| {
            let ang = phase + 2.0 * PI * a as f64 / cfg.n_agents as f64;
            let jitter = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            [
                (center[0] + radius * ang.cos() + jitter[0]).clamp(0.0, cfg.world_width),
                (center[1] + radius * ang.sin() + jitter[1]).clamp(0.0, cfg.world_length),
            ]
        })
        .collect()
}

fn spawn_vehicles(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<Vehicle> {
    let lanes = cfg.max_objects;
    let spacing = cfg.lane_spacing();
    let n = rng.random_range(lanes.div_ceil(2)..=lanes);
    let mut lane_ids: Vec<usize> = (0..lanes).collect();
    // partial Fisher-Yates for the first n lanes
    for i in 0..n {
        let j = rng.random_range(i..lanes);
        lane_ids.swap(i, j);
    }
    let mut lane_ids = lane_ids[..n].to_vec();
    lane_ids.sort_unstable();
    lane_ids
        .into_iter()
        .enumerate()
        .map(|(id, lane)| {
            let length = rng.random_range(MIN_LENGTH..MAX_LENGTH);
            let width = rng.random_range(MIN_WIDTH..MAX_WIDTH);
            let margin = 0.5 * length + 1.0;
            let lane_y = (lane as f64 + 0.5) * spacing;
            Vehicle {
                id: id as u32,
                x: rng.random_range(margin..cfg.world_width - margin),
                y: lane_y + rng.random_range(-0.5..0.5),
                lane_y,
                dir: if rng.random_bool(0.5) { 1.0 } else { -1.0 },
                drift: rng.random_range(-0.1..0.1),
                speed: rng.random_range(1.0..3.0),
                length,
                width,
            }
        })
        .collect()
}

fn step_vehicle(cfg: &SceneConfig, v: &mut Vehicle, rng: &mut ChaCha8Rng, noise: &Normal<f64>) {
    // Ornstein-Uhlenbeck drift with a weak pull back to the lane center.
    let drift = (0.9 * v.drift - 0.05 * (v.y - v.lane_y) + noise.sample(rng)).clamp(-MAX_DRIFT_ANGLE, MAX_DRIFT_ANGLE);
    v.speed = (v.speed + noise.sample(rng)).clamp(0.5, 4.0);
    let trial = Vehicle {
        x: v.x + v.dir * v.speed * drift.cos() * FRAME_DT,
        y: v.y + v.speed * drift.sin() * FRAME_DT,
        drift,
        ..v.clone()
    };
    let inside = trial
        .corners()
        .iter()
        .all(|c| c[0] >= 0.0 && c[0] <= cfg.world_width && c[1] >= 0.0 && c[1] <= cfg.world_length);
    if inside {
        *v = trial;
    } else {
        // bounce: reverse direction and keep the footprint for this frame
        v.dir = -v.dir;
        v.drift = -v.drift;
    }
}
