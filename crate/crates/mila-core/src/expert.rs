//! Ground-truth skill repertoire and the scripted expert that records
//! unsegmented long-horizon demonstrations with it.
//!
//! The expert composes the three primitives with true world positions,
//! perturbs the commands with smooth noise that vanishes (value and slope)
//! at subtask boundaries, and keeps only episodes that score a clean
//! success, so every saved demonstration starts and ends each subtask at
//! rest exactly on its targets.

use crate::dmp::{
    fit_forcing_weights, rollout, DmpDynamics, SkillId, SkillPrimitive, TaskParams, Trajectory,
};
use crate::math::vec2::{self, Vec2};
use crate::rng::rng_stream;
use crate::sim::{
    initial_state, release, render_observation, step_dynamics, success_metrics, try_grasp,
    Demonstration, TaskSpec, WorldParams,
};
use crate::{Error, Result};
use rand::Rng as _;

/// Nominal subtask durations (s), indexed by `SkillId::index`.
pub const TAU_PRIORS: [f64; 3] = [2.0, 2.0, 1.5];

/// Basis count used for every fitted primitive.
pub const N_BASIS: usize = 20;

/// Ridge used for every forcing-weight fit.
pub const FIT_RIDGE: f64 = 1e-6;

/// Hand-designed canonical path of one skill: smooth point-to-point motion
/// with a mid-path bump that gives the skill its shape signature.
struct CanonicalShape {
    start: Vec2,
    goal: Vec2,
    tau: f64,
    /// Lateral bump as a fraction of the start-goal distance.
    bump_rel: Vec2,
}

fn canonical_shape(skill: SkillId) -> CanonicalShape {
    match skill {
        SkillId::Reach => CanonicalShape {
            start: [0.15, 0.50],
            goal: [0.55, 0.35],
            tau: 2.0,
            bump_rel: [-0.18, 0.12],
        },
        SkillId::Place => CanonicalShape {
            start: [0.55, 0.35],
            goal: [0.75, 0.70],
            tau: 2.0,
            bump_rel: [0.10, 0.22],
        },
        SkillId::Push => CanonicalShape {
            start: [0.75, 0.70],
            goal: [0.88, 0.76],
            tau: 1.5,
            bump_rel: [0.0, 0.0],
        },
    }
}

/// Minimum-jerk interpolant and its derivative.
fn minjerk(u: f64) -> (f64, f64) {
    let u2 = u * u;
    let u3 = u2 * u;
    (10.0 * u3 - 15.0 * u3 * u + 6.0 * u3 * u2, 30.0 * u2 - 60.0 * u3 + 30.0 * u2 * u2)
}

/// Mid-path bump, peaking at 1 for u = 1/2, zero value and slope at ends.
fn bump(u: f64) -> (f64, f64) {
    let w = u * (1.0 - u);
    (64.0 * w * w * w, 192.0 * w * w * (1.0 - 2.0 * u))
}

/// The canonical rest-to-rest demonstration a skill is fitted from.
pub fn canonical_demo(skill: SkillId, dt: f64) -> Trajectory {
    let shape = canonical_shape(skill);
    let span = vec2::sub(shape.goal, shape.start);
    let amp = vec2::scale(shape.bump_rel, vec2::norm(span));
    let n = (shape.tau / dt).round() as usize;
    let mut positions = Vec::with_capacity(n + 1);
    let mut velocities = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let u = i as f64 / n as f64;
        let (mj, mj_du) = minjerk(u);
        let (b, b_du) = bump(u);
        positions.push([
            shape.start[0] + mj * span[0] + b * amp[0],
            shape.start[1] + mj * span[1] + b * amp[1],
        ]);
        let scale = 1.0 / (n as f64 * dt);
        velocities.push([
            (mj_du * span[0] + b_du * amp[0]) * scale,
            (mj_du * span[1] + b_du * amp[1]) * scale,
        ]);
    }
    Trajectory { dt, positions, velocities }
}

/// Fit the three ground-truth primitives from their canonical paths.
pub fn canonical_repertoire(wp: &WorldParams) -> Result<[SkillPrimitive; 3]> {
    let mut prims = Vec::with_capacity(3);
    for skill in SkillId::ALL {
        let demo = canonical_demo(skill, wp.delta);
        prims.push(fit_forcing_weights(skill, &demo, N_BASIS, FIT_RIDGE, DmpDynamics::default())?);
    }
    Ok(prims.try_into().expect("three skills"))
}

/// RMS of the C1 end-vanishing envelope u^2 (1-u)^2 over [0, 1]:
/// sqrt(integral of u^4 (1-u)^4) = sqrt(1/630).
const ENVELOPE_RMS: f64 = 0.039840_953644_479787;

/// Smooth noise on one subtask: three enveloped sinusoids per dimension,
/// zero value and slope at both ends, unit expected path RMS before the
/// std scaling.
struct SubtaskNoise {
    amps: [[f64; 3]; 2],
    phases: [[f64; 3]; 2],
    std: f64,
    tau: f64,
}

impl SubtaskNoise {
    fn draw(rng: &mut crate::rng::Rng, std: f64, tau: f64) -> Self {
        let mut amps = [[0.0; 3]; 2];
        let mut phases = [[0.0; 3]; 2];
        for d in 0..2 {
            for k in 0..3 {
                amps[d][k] = rng.sample::<f64, _>(rand_distr::StandardNormal);
                phases[d][k] = rng.random_range(0.0..std::f64::consts::TAU);
            }
        }
        SubtaskNoise { amps, phases, std, tau }
    }

    /// Offset and its time derivative at phase u of the subtask.
    fn at(&self, u: f64) -> (Vec2, Vec2) {
        // E[(sum_k a_k sin)^2] = 3/2 for unit normal amplitudes and
        // uniform phases, hence the 1/sqrt(3/2) normalization.
        let gain = self.std / (ENVELOPE_RMS * (1.5f64).sqrt());
        let env = u * u * (1.0 - u) * (1.0 - u);
        let env_du = 2.0 * u * (1.0 - u) * (1.0 - 2.0 * u);
        let mut pos = [0.0; 2];
        let mut vel = [0.0; 2];
        for d in 0..2 {
            let mut s = 0.0;
            let mut s_du = 0.0;
            for k in 0..3 {
                let w = (k + 1) as f64 * std::f64::consts::PI;
                let arg = w * u + self.phases[d][k];
                s += self.amps[d][k] * arg.sin();
                s_du += self.amps[d][k] * w * arg.cos();
            }
            pos[d] = gain * env * s;
            vel[d] = gain * (env_du * s + env * s_du) / self.tau;
        }
        (pos, vel)
    }
}

/// Where the end-effector must finish to leave the basket on the marker:
/// one contact radius short of the marker along the push line.
pub fn push_goal(basket: Vec2, marker: Vec2, wp: &WorldParams) -> Vec2 {
    match vec2::unit(vec2::sub(marker, basket), 1e-9) {
        Some(dir) => vec2::sub(marker, vec2::scale(dir, wp.r_push)),
        None => basket,
    }
}

/// Record one unsegmented expert episode for `spec`.
///
/// Subtask durations are drawn within +/-15% of the priors, each primitive
/// is retargeted to the live world positions, and commands carry smooth
/// noise of the given standard deviation. Episodes that fail any success
/// check are regenerated with a fresh internal stream, a bounded number of
/// times.
pub fn scripted_expert_demo(
    spec: &TaskSpec,
    prims: &[SkillPrimitive; 3],
    noise_std: f64,
    seed: u64,
    wp: &WorldParams,
) -> Result<Demonstration> {
    let (frames, traj, boundaries) = expert_episode(spec, prims, noise_std, seed, wp)?;
    Demonstration::new(frames, traj, *spec, boundaries)
}

/// Record one expert episode and return it sliced into the three per-skill
/// clips (each clip includes its resting start sample).
///
/// This is the separate skill-by-skill collection used for repertoire
/// fitting only; the boundaries come from the expert's own plan, never from
/// a stored demonstration.
pub fn scripted_skill_clips(
    spec: &TaskSpec,
    prims: &[SkillPrimitive; 3],
    noise_std: f64,
    seed: u64,
    wp: &WorldParams,
) -> Result<[Trajectory; 3]> {
    let (_, traj, boundaries) = expert_episode(spec, prims, noise_std, seed, wp)?;
    let clip = |lo: usize, hi: usize| Trajectory {
        dt: traj.dt,
        positions: traj.positions[lo..hi].to_vec(),
        velocities: traj.velocities[lo..hi].to_vec(),
    };
    Ok([
        clip(0, boundaries[0]),
        clip(boundaries[0] - 1, boundaries[1]),
        clip(boundaries[1] - 1, boundaries[2]),
    ])
}

fn expert_episode(
    spec: &TaskSpec,
    prims: &[SkillPrimitive; 3],
    noise_std: f64,
    seed: u64,
    wp: &WorldParams,
) -> Result<(Vec<crate::sim::Observation>, Trajectory, [usize; 3])> {
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::domain(format!("noise std {noise_std}")));
    }
    const ATTEMPTS: u64 = 8;
    for attempt in 0..ATTEMPTS {
        let mut rng = rng_stream(seed, &[0x657870, spec.seed, attempt]);
        let taus: Vec<f64> =
            TAU_PRIORS.iter().map(|t| t * rng.random_range(0.85..1.15)).collect();
        let noises: Vec<SubtaskNoise> =
            taus.iter().map(|&tau| SubtaskNoise::draw(&mut rng, noise_std, tau)).collect();

        let mut state = initial_state(spec, wp);
        let mut states = vec![state];
        let mut frames = vec![render_observation(&state, spec, wp)];
        let mut positions = vec![state.ee];
        let mut velocities = vec![[0.0, 0.0]];
        let mut boundaries = [0usize; 3];

        for (c, skill) in SkillId::ALL.iter().enumerate() {
            let goal = match skill {
                SkillId::Reach => state.object_pos,
                SkillId::Place => state.basket_pos,
                SkillId::Push => push_goal(state.basket_pos, state.marker_pos, wp),
            };
            let tp = TaskParams { start: state.ee, goal, tau: taus[c] };
            let plan = rollout(&prims[c], &tp, wp.delta)?;
            let n = plan.len() - 1;
            for i in 1..=n {
                let u = i as f64 / n as f64;
                let (npos, nvel) = noises[c].at(u);
                let cmd = vec2::add(plan.positions[i], npos);
                let (next, _) = step_dynamics(&state, cmd, wp.delta, wp);
                state = next;
                states.push(state);
                frames.push(render_observation(&state, spec, wp));
                positions.push(state.ee);
                velocities.push(vec2::add(plan.velocities[i], nvel));
            }
            boundaries[c] = states.len();
            match skill {
                SkillId::Reach => state = try_grasp(&state, wp).0,
                SkillId::Place => state = release(&state, wp),
                SkillId::Push => {}
            }
        }

        let metrics = success_metrics(&states, boundaries, wp)?;
        if !metrics.all_proper() {
            continue;
        }
        let traj = Trajectory { dt: wp.delta, positions, velocities };
        return Ok((frames, traj, boundaries));
    }
    Err(Error::Fit(format!("expert episode failed {ATTEMPTS} attempts for seed {seed}")))
}
