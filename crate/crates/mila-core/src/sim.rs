//! Deterministic planar tabletop: a kinematic end-effector, a graspable
//! object, a pushable basket, and a marker, observed as coarse-grid blob
//! images. Provides task sampling, scripted dynamics, occlusion and
//! displacement injection, success scoring, and dataset persistence.

use crate::dmp::Trajectory;
use crate::math::vec2::{self, Vec2};
use crate::rng::rng_stream;
use crate::{Error, Result};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

/// Observation channel order.
pub const CH_OBJECT: usize = 0;
pub const CH_BASKET: usize = 1;
pub const CH_MARKER: usize = 2;
pub const CH_EE: usize = 3;
pub const N_CHANNELS: usize = 4;

/// Fixed geometry and thresholds of the world.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldParams {
    /// Observation grid side length.
    pub grid: usize,
    /// Control and rendering period (s).
    pub delta: f64,
    /// Wall margin for sampled entity positions (m).
    pub margin: f64,
    /// Minimum pairwise separation between sampled entities (m).
    pub min_separation: f64,
    /// Clearance the basket keeps from the reach corridor (m), so the
    /// end-effector's approach to the object cannot shove it early.
    pub corridor_clearance: f64,
    /// End-effector rest position at episode start (m).
    pub ee_home: Vec2,
    /// End-effector speed limit (m/s).
    pub rate_limit: f64,
    /// Contact distance at which the end-effector pushes the basket (m).
    pub r_push: f64,
    /// Grasp succeeds within this distance of the object (m).
    pub r_grasp: f64,
    /// Release within this distance of the basket center counts as a
    /// proper placement; also the basket's capture radius (m).
    pub r_basket: f64,
    /// Final basket-to-marker distance that counts as pushed home (m).
    pub r_marker: f64,
    /// Gaussian blob sigma in the rendered channels (m).
    pub blob_radius: f64,
}

impl Default for WorldParams {
    fn default() -> Self {
        WorldParams {
            grid: 16,
            delta: 1.0 / 30.0,
            margin: 0.12,
            min_separation: 0.15,
            corridor_clearance: 0.12,
            ee_home: [0.1, 0.1],
            rate_limit: 2.0,
            r_push: 0.04,
            r_grasp: 0.03,
            r_basket: 0.05,
            r_marker: 0.05,
            blob_radius: 0.05,
        }
    }
}

/// Full kinematic state of the table at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub ee: Vec2,
    pub ee_vel: Vec2,
    pub object_pos: Vec2,
    pub basket_pos: Vec2,
    pub marker_pos: Vec2,
    pub holding: bool,
    pub object_in_basket: bool,
    pub t: f64,
}

/// One sampled manipulation task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    /// Appearance value in [0, 1]; scales the object channel.
    pub object_code: f64,
    pub object_pos: Vec2,
    pub basket_pos: Vec2,
    pub marker_pos: Vec2,
    pub seed: u64,
}

/// Range of appearance codes a task distribution draws from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskDistribution {
    pub code_lo: f64,
    pub code_hi: f64,
}

impl TaskDistribution {
    /// Meta-training appearance range.
    pub fn train() -> Self {
        TaskDistribution { code_lo: 0.0, code_hi: 0.6 }
    }

    /// Held-out appearance range for meta-test tasks.
    pub fn held_out() -> Self {
        TaskDistribution { code_lo: 0.7, code_hi: 1.0 }
    }
}

/// Grid observation: `grid x grid` cells over 4 channels (object, basket,
/// marker, end-effector), each value in [0, 1]. Cell (ix, iy) covers the
/// square centered at ((ix+0.5)/grid, (iy+0.5)/grid); the flat layout is
/// channel-major: `data[(ch * grid + ix) * grid + iy]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub grid: usize,
    pub data: Vec<f64>,
}

impl Observation {
    pub fn at(&self, ch: usize, ix: usize, iy: usize) -> f64 {
        self.data[(ch * self.grid + ix) * self.grid + iy]
    }

    /// Flattened length, the policy encoder's input width.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// World at the start of an episode for `spec`.
pub fn initial_state(spec: &TaskSpec, wp: &WorldParams) -> WorldState {
    WorldState {
        ee: wp.ee_home,
        ee_vel: [0.0, 0.0],
        object_pos: spec.object_pos,
        basket_pos: spec.basket_pos,
        marker_pos: spec.marker_pos,
        holding: false,
        object_in_basket: false,
        t: 0.0,
    }
}

fn clamp_box(p: Vec2) -> Vec2 {
    [p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0)]
}

/// Sample a task by rejection: entities land inside the wall margins with
/// pairwise separation, and the basket stays clear of the straight
/// home-to-object corridor. Deterministic in `seed`.
pub fn sample_task(dist: &TaskDistribution, wp: &WorldParams, seed: u64) -> Result<TaskSpec> {
    if !(dist.code_lo <= dist.code_hi && dist.code_lo >= 0.0 && dist.code_hi <= 1.0) {
        return Err(Error::domain(format!(
            "task codes [{}, {}] outside [0, 1]",
            dist.code_lo, dist.code_hi
        )));
    }
    let lo = wp.margin;
    let hi = 1.0 - wp.margin;
    if !(lo < hi) {
        return Err(Error::domain("margins leave no workspace"));
    }
    let mut rng = rng_stream(seed, &[0x7461736b]);
    for _ in 0..1000 {
        let mut draw = || -> Vec2 { [rng.random_range(lo..hi), rng.random_range(lo..hi)] };
        let object_pos = draw();
        let basket_pos = draw();
        let marker_pos = draw();
        let code = rng.random_range(dist.code_lo..=dist.code_hi);
        let sep_ok = vec2::dist(object_pos, basket_pos) >= wp.min_separation
            && vec2::dist(object_pos, marker_pos) >= wp.min_separation
            && vec2::dist(basket_pos, marker_pos) >= wp.min_separation;
        let corridor_ok =
            vec2::dist_to_segment(basket_pos, wp.ee_home, object_pos) >= wp.corridor_clearance;
        if sep_ok && corridor_ok {
            return Ok(TaskSpec { object_code: code, object_pos, basket_pos, marker_pos, seed });
        }
    }
    Err(Error::domain("task sampling failed 1000 times; separations overconstrained"))
}

/// Render the four-channel blob image of `state`.
///
/// The object channel is scaled by the appearance code; it is empty while
/// the object is held, and tracks the basket once the object is inside.
pub fn render_observation(state: &WorldState, spec: &TaskSpec, wp: &WorldParams) -> Observation {
    let g = wp.grid;
    let mut obs = Observation { grid: g, data: vec![0.0; N_CHANNELS * g * g] };
    let object_at = if state.holding {
        None
    } else if state.object_in_basket {
        Some(state.basket_pos)
    } else {
        Some(state.object_pos)
    };
    let channels: [(usize, Option<Vec2>, f64); 4] = [
        (CH_OBJECT, object_at, spec.object_code),
        (CH_BASKET, Some(state.basket_pos), 1.0),
        (CH_MARKER, Some(state.marker_pos), 1.0),
        (CH_EE, Some(state.ee), 1.0),
    ];
    let two_r2 = 2.0 * wp.blob_radius * wp.blob_radius;
    for (ch, pos, scale) in channels {
        let Some(p) = pos else { continue };
        for ix in 0..g {
            let cx = (ix as f64 + 0.5) / g as f64;
            for iy in 0..g {
                let cy = (iy as f64 + 0.5) / g as f64;
                let d2 = (cx - p[0]) * (cx - p[0]) + (cy - p[1]) * (cy - p[1]);
                let v = (scale * (-d2 / two_r2).exp()).clamp(0.0, 1.0);
                obs.data[(ch * g + ix) * g + iy] = v;
            }
        }
    }
    obs
}

/// Advance the world one control period toward a commanded end-effector
/// position. Returns the new state and whether the command had to be
/// clamped into the workspace.
///
/// The end-effector is rate-limited; a held object rides it rigidly. An
/// unheld basket is pushed by overlap resolution: whenever the moved
/// end-effector sits within the contact radius, the basket is placed just
/// outside contact along the line away from the end-effector, so advancing
/// pushes and retreating releases. A free object within the basket's
/// capture radius falls in and rides it from then on.
pub fn step_dynamics(
    state: &WorldState,
    commanded: Vec2,
    dt: f64,
    wp: &WorldParams,
) -> (WorldState, bool) {
    debug_assert!(dt > 0.0);
    let mut next = *state;
    let target = clamp_box(commanded);
    let clamped = target != commanded;

    let delta = vec2::sub(target, state.ee);
    let max_step = wp.rate_limit * dt;
    let step = vec2::norm(delta);
    next.ee = if step > max_step {
        vec2::add(state.ee, vec2::scale(delta, max_step / step))
    } else {
        target
    };
    next.ee_vel = vec2::scale(vec2::sub(next.ee, state.ee), 1.0 / dt);

    if next.holding {
        next.object_pos = next.ee;
    } else {
        // Swept contact: the whole motion segment is tested so a fast step
        // cannot tunnel through the basket. A basket left behind the moved
        // end-effector relative to its motion (including one it started
        // inside of) is swept ahead; otherwise it is pushed out along the
        // center line.
        let swept = vec2::dist_to_segment(next.basket_pos, state.ee, next.ee) < wp.r_push;
        if swept {
            let to_basket = vec2::sub(next.basket_pos, next.ee);
            let motion = vec2::sub(next.ee, state.ee);
            let dir = if vec2::dot(to_basket, motion) > 0.0 {
                vec2::unit(to_basket, 1e-12)
            } else {
                vec2::unit(motion, 1e-12).or_else(|| vec2::unit(to_basket, 1e-12))
            }
            .unwrap_or([1.0, 0.0]);
            next.basket_pos = clamp_box(vec2::add(next.ee, vec2::scale(dir, wp.r_push)));
        }
        if next.object_in_basket {
            next.object_pos = next.basket_pos;
        } else if vec2::dist(next.object_pos, next.basket_pos) <= wp.r_basket {
            next.object_in_basket = true;
            next.object_pos = next.basket_pos;
        }
    }
    next.t += dt;
    (next, clamped)
}

/// Close the gripper. Succeeds only within the grasp radius of a free
/// object; the flag reports whether the object attached.
pub fn try_grasp(state: &WorldState, wp: &WorldParams) -> (WorldState, bool) {
    let mut next = *state;
    if state.holding || state.object_in_basket {
        return (next, false);
    }
    if vec2::dist(state.ee, state.object_pos) <= wp.r_grasp {
        next.holding = true;
        next.object_pos = next.ee;
        (next, true)
    } else {
        (next, false)
    }
}

/// Open the gripper. A held object lands at the release point and falls
/// into the basket when released within the capture radius.
pub fn release(state: &WorldState, wp: &WorldParams) -> WorldState {
    let mut next = *state;
    if !state.holding {
        return next;
    }
    next.holding = false;
    if vec2::dist(next.object_pos, next.basket_pos) <= wp.r_basket {
        next.object_in_basket = true;
        next.object_pos = next.basket_pos;
    }
    next
}

/// Displace the end-effector in place (an external drag), clamped to the
/// workspace. A held object moves with it.
pub fn apply_displacement(state: &WorldState, delta: Vec2) -> WorldState {
    let mut next = *state;
    next.ee = clamp_box(vec2::add(next.ee, delta));
    if next.holding {
        next.object_pos = next.ee;
    }
    next
}

/// Episode outcome flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuccessMetrics {
    /// End-effector within the grasp radius of the object at reach end.
    pub grasped: bool,
    /// Object released within the capture radius of the basket center.
    pub placed_properly: bool,
    /// Overall success achieved without a proper placement.
    pub misplaced: bool,
    /// Basket within the marker radius at episode end.
    pub pushed_to_marker: bool,
    /// Grasped, object in basket at the end, and basket at the marker.
    pub overall: bool,
}

impl SuccessMetrics {
    pub fn all_proper(&self) -> bool {
        self.grasped && self.placed_properly && self.pushed_to_marker && self.overall
    }
}

/// Score a complete episode from its per-tick states and the subtask
/// boundary indices (each the index of the first state after its subtask;
/// the last equals the state count).
pub fn success_metrics(
    states: &[WorldState],
    boundaries: [usize; 3],
    wp: &WorldParams,
) -> Result<SuccessMetrics> {
    if boundaries[0] < 1 || boundaries[0] >= boundaries[1] || boundaries[1] >= boundaries[2] {
        return Err(Error::domain(format!("boundaries {boundaries:?} not increasing")));
    }
    if boundaries[2] != states.len() {
        return Err(Error::dim(format!(
            "boundaries end at {} but trace has {} states",
            boundaries[2],
            states.len()
        )));
    }
    let reach_end = &states[boundaries[0] - 1];
    let place_end = &states[boundaries[1] - 1];
    let last = &states[boundaries[2] - 1];
    let grasped = vec2::dist(reach_end.ee, reach_end.object_pos) <= wp.r_grasp;
    let placed_properly =
        place_end.holding && vec2::dist(place_end.ee, place_end.basket_pos) <= wp.r_basket;
    let pushed_to_marker = vec2::dist(last.basket_pos, last.marker_pos) <= wp.r_marker;
    let overall = grasped && last.object_in_basket && pushed_to_marker;
    Ok(SuccessMetrics {
        grasped,
        placed_properly,
        misplaced: overall && !placed_properly,
        pushed_to_marker,
        overall,
    })
}

/// How injected occlusion covers a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OcclusionMode {
    /// One rectangle of roughly 40% of the grid area, fixed across the
    /// interval, filled with fresh uniform noise per frame.
    Patch,
    /// Every cell of every affected frame replaced with uniform noise.
    Full,
}

/// Overwrite frames in `[start, end)` with occlusion noise. Deterministic
/// in `seed`; frames outside the interval are untouched.
pub fn inject_occlusion(
    frames: &mut [Observation],
    interval: (usize, usize),
    mode: OcclusionMode,
    seed: u64,
) -> Result<()> {
    let (start, end) = interval;
    if start > end || end > frames.len() {
        return Err(Error::dim(format!(
            "occlusion interval [{start}, {end}) outside {} frames",
            frames.len()
        )));
    }
    let mut rng = rng_stream(seed, &[0x6f63636c]);
    let rect = match mode {
        OcclusionMode::Full => None,
        OcclusionMode::Patch => {
            let g = frames.first().map_or(16, |f| f.grid);
            let target = (0.4 * (g * g) as f64).round();
            let w_lo = ((target / g as f64).ceil() as usize).max(1);
            let w = rng.random_range(w_lo..=g);
            let h = ((target / w as f64).round() as usize).clamp(1, g);
            let x0 = rng.random_range(0..=g - w);
            let y0 = rng.random_range(0..=g - h);
            Some((x0, y0, w, h))
        }
    };
    for frame in &mut frames[start..end] {
        let g = frame.grid;
        match rect {
            None => {
                for v in &mut frame.data {
                    *v = rng.random_range(0.0..1.0);
                }
            }
            Some((x0, y0, w, h)) => {
                for ch in 0..N_CHANNELS {
                    for ix in x0..x0 + w {
                        for iy in y0..y0 + h {
                            frame.data[(ch * g + ix) * g + iy] = rng.random_range(0.0..1.0);
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

static SEGMENTATION_READS: AtomicU64 = AtomicU64::new(0);

/// Times the privileged segmentation was read anywhere in the process;
/// used to audit that covariance-weighted training never touches it.
pub fn segmentation_read_count() -> u64 {
    SEGMENTATION_READS.load(Ordering::Relaxed)
}

/// One recorded episode: rendered frames, the executed end-effector
/// trajectory, and the task it came from. The true subtask boundaries are
/// privileged information for segmented baselines only, so they sit behind
/// an audited accessor.
#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub frames: Vec<Observation>,
    pub traj: Trajectory,
    pub spec: TaskSpec,
    segmentation: [usize; 3],
}

impl Demonstration {
    pub fn new(
        frames: Vec<Observation>,
        traj: Trajectory,
        spec: TaskSpec,
        segmentation: [usize; 3],
    ) -> Result<Self> {
        if frames.len() != traj.len() {
            return Err(Error::dim(format!(
                "demo: {} frames but {} trajectory samples",
                frames.len(),
                traj.len()
            )));
        }
        if segmentation[0] < 1
            || segmentation[0] >= segmentation[1]
            || segmentation[1] >= segmentation[2]
        {
            return Err(Error::domain(format!("demo: boundaries {segmentation:?} not increasing")));
        }
        if segmentation[2] != frames.len() {
            return Err(Error::dim(format!(
                "demo: boundaries end at {} with {} frames",
                segmentation[2],
                frames.len()
            )));
        }
        Ok(Demonstration { frames, traj, spec, segmentation })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Privileged subtask boundaries. Every call is counted process-wide so
    /// tests can prove the covariance-weighted path never reads them.
    pub fn hidden_segmentation(&self) -> [usize; 3] {
        SEGMENTATION_READS.fetch_add(1, Ordering::Relaxed);
        self.segmentation
    }
}

/// Manifest written next to the per-demo binary blocks.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetManifest {
    version: String,
    delta: f64,
    #[serde(rename = "G")]
    grid: usize,
    specs: Vec<TaskSpec>,
}

const DATASET_VERSION: &str = "sim-v1";

fn demo_file_name(i: usize) -> String {
    format!("demo_{i:04}.bin")
}

/// Write a dataset as `manifest.json` plus one little-endian binary block
/// per demo (header T, G, channel count as u64; frames, then trajectory
/// rows x,y,vx,vy, then the three boundary indices).
pub fn save_dataset(dir: &Path, demos: &[Demonstration]) -> Result<()> {
    let first = demos.first().ok_or_else(|| Error::domain("saving an empty dataset"))?;
    let manifest = DatasetManifest {
        version: DATASET_VERSION.into(),
        delta: first.traj.dt,
        grid: first.frames[0].grid,
        specs: demos.iter().map(|d| d.spec).collect(),
    };
    std::fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join("manifest.json"), json)?;

    for (i, demo) in demos.iter().enumerate() {
        let g = demo.frames[0].grid;
        let t_len = demo.len();
        let mut bytes: Vec<u8> = Vec::new();
        for v in [t_len as u64, g as u64, N_CHANNELS as u64] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for frame in &demo.frames {
            if frame.grid != g || frame.data.len() != N_CHANNELS * g * g {
                return Err(Error::dim(format!("demo {i}: inconsistent frame shape")));
            }
            for v in &frame.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        for (p, v) in demo.traj.positions.iter().zip(&demo.traj.velocities) {
            for c in [p[0], p[1], v[0], v[1]] {
                bytes.extend_from_slice(&c.to_le_bytes());
            }
        }
        for b in demo.segmentation {
            bytes.extend_from_slice(&(b as u64).to_le_bytes());
        }
        std::fs::write(dir.join(demo_file_name(i)), bytes)?;
    }
    Ok(())
}

fn take_u64(bytes: &[u8], cursor: &mut usize) -> Result<u64> {
    let end = *cursor + 8;
    if end > bytes.len() {
        return Err(Error::dim("demo block truncated"));
    }
    let v = u64::from_le_bytes(bytes[*cursor..end].try_into().unwrap());
    *cursor = end;
    Ok(v)
}

fn take_f64(bytes: &[u8], cursor: &mut usize) -> Result<f64> {
    Ok(f64::from_bits(take_u64(bytes, cursor)?))
}

/// Read back a dataset written by `save_dataset`.
pub fn load_dataset(dir: &Path) -> Result<Vec<Demonstration>> {
    let json = std::fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: DatasetManifest = serde_json::from_str(&json)?;
    if manifest.version != DATASET_VERSION {
        return Err(Error::domain(format!(
            "dataset version {} is not {DATASET_VERSION}",
            manifest.version
        )));
    }
    let mut demos = Vec::with_capacity(manifest.specs.len());
    for (i, spec) in manifest.specs.iter().enumerate() {
        let bytes = std::fs::read(dir.join(demo_file_name(i)))?;
        let mut cur = 0usize;
        let t_len = take_u64(&bytes, &mut cur)? as usize;
        let g = take_u64(&bytes, &mut cur)? as usize;
        let ch = take_u64(&bytes, &mut cur)? as usize;
        if g != manifest.grid || ch != N_CHANNELS {
            return Err(Error::dim(format!("demo {i}: header grid {g} channels {ch}")));
        }
        let mut frames = Vec::with_capacity(t_len);
        for _ in 0..t_len {
            let mut data = Vec::with_capacity(ch * g * g);
            for _ in 0..ch * g * g {
                data.push(take_f64(&bytes, &mut cur)?);
            }
            frames.push(Observation { grid: g, data });
        }
        let mut positions = Vec::with_capacity(t_len);
        let mut velocities = Vec::with_capacity(t_len);
        for _ in 0..t_len {
            let row = [
                take_f64(&bytes, &mut cur)?,
                take_f64(&bytes, &mut cur)?,
                take_f64(&bytes, &mut cur)?,
                take_f64(&bytes, &mut cur)?,
            ];
            positions.push([row[0], row[1]]);
            velocities.push([row[2], row[3]]);
        }
        let segmentation = [
            take_u64(&bytes, &mut cur)? as usize,
            take_u64(&bytes, &mut cur)? as usize,
            take_u64(&bytes, &mut cur)? as usize,
        ];
        if cur != bytes.len() {
            return Err(Error::dim(format!("demo {i}: {} trailing bytes", bytes.len() - cur)));
        }
        let traj = Trajectory { dt: manifest.delta, positions, velocities };
        demos.push(Demonstration::new(frames, traj, *spec, segmentation)?);
    }
    Ok(demos)
}
