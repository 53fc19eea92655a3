//! High-level policy: embed the observation at each subtask start, predict
//! per-subtask task parameters with one head per subtask, and compose the
//! full plan by concatenating primitive rollouts.
//!
//! The goal slot is either the embedding of a goal image or the learned
//! vector `z0` that stands in for it when no goal image exists (validation
//! passes during meta-training and all of execution).

use crate::dmp::{rollout, SkillPrimitive, TaskParams, Trajectory, TAU_MAX, TAU_MIN};
use crate::error::{Error, Result};
use crate::math::{Activation, Init, MlpGrads, MlpParams, MlpTape};
use crate::rng::rng_stream;
use crate::sim::Observation;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::io::{Read as _, Write as _};
use std::path::Path;

/// Fixed subtask count (reach, place, push).
pub const N_SUBTASKS: usize = 3;

/// Values per head output: start (2), goal (2), raw duration (1).
pub const HEAD_OUT: usize = 5;

pub const POLICY_VERSION: &str = "policy-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyConfig {
    /// Observation grid side length; input dim is `grid * grid * 4`.
    pub grid: usize,
    /// Embedding length E.
    pub embed_dim: usize,
    pub encoder_hidden: usize,
    pub head_hidden: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig { grid: 16, embed_dim: 32, encoder_hidden: 64, head_hidden: 32 }
    }
}

impl PolicyConfig {
    /// Small variant for gradient-oracle tests where finite differences over
    /// every parameter must stay affordable.
    pub fn tiny(grid: usize) -> Self {
        PolicyConfig { grid, embed_dim: 4, encoder_hidden: 8, head_hidden: 8 }
    }

    pub fn obs_dim(&self) -> usize {
        self.grid * self.grid * crate::sim::N_CHANNELS
    }
}

/// All learnable state: shared encoder, the goal-slot vector z0, and one
/// head per subtask mapping (obs embedding, goal slot) to task parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub config: PolicyConfig,
    pub init_seed: u64,
    encoder: MlpParams,
    z0: Vec<f64>,
    heads: Vec<MlpParams>,
}

/// Where the goal slot of a head input comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GoalMode {
    /// Embed the final frame of the demonstration (goal image available).
    FinalFrame,
    /// Use the learned z0 (no goal image: validation and execution).
    LearnedZ0,
}

/// Gradients shaped like `PolicyParams`; flatten order matches.
#[derive(Debug, Clone)]
pub struct PolicyGrads {
    pub encoder: MlpGrads,
    pub z0: Vec<f64>,
    pub heads: Vec<MlpGrads>,
}

impl PolicyGrads {
    pub fn zeros_like(params: &PolicyParams) -> Self {
        PolicyGrads {
            encoder: MlpGrads::zeros_like(&params.encoder),
            z0: vec![0.0; params.z0.len()],
            heads: params.heads.iter().map(MlpGrads::zeros_like).collect(),
        }
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        self.encoder.flatten_into(out);
        out.extend_from_slice(&self.z0);
        for h in &self.heads {
            h.flatten_into(out);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.flatten_into(&mut out);
        out
    }
}

/// Forward tape of one episode prediction, consumed by the loss backward.
pub struct EpisodeTape {
    pub params: [TaskParams; N_SUBTASKS],
    /// Raw duration head outputs before the sigmoid squash.
    pub raw_tau: [f64; N_SUBTASKS],
    /// 0-based frame index each subtask's observation was read from.
    pub start_frames: [usize; N_SUBTASKS],
    /// 1-based boundary sample index per subtask, `1 + round(sum tau / dt)`,
    /// clamped to `[1, T]`.
    pub boundaries: [usize; N_SUBTASKS],
    /// True when a boundary had to be clamped to the demo length.
    pub truncated: bool,
    goal_mode: GoalMode,
    obs_tapes: Vec<MlpTape>,
    goal_tape: Option<MlpTape>,
    head_tapes: Vec<MlpTape>,
}

/// Forward tape of a single-subtask prediction over a segmented clip.
pub struct SingleTape {
    pub params: TaskParams,
    raw_tau: f64,
    subtask: usize,
    goal_mode: GoalMode,
    obs_tape: MlpTape,
    goal_tape: Option<MlpTape>,
    head_tape: MlpTape,
}

/// Loss gradient w.r.t. one subtask's predicted task parameters.
#[derive(Debug, Clone, Copy, Default)]
pub struct TaskParamGrad {
    pub d_start: [f64; 2],
    pub d_goal: [f64; 2],
    pub d_tau: f64,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Duration decode keeping tau inside its legal band for any raw value.
pub fn decode_tau(raw: f64) -> f64 {
    TAU_MIN + (TAU_MAX - TAU_MIN) * sigmoid(raw)
}

fn decode_tau_derivative(raw: f64) -> f64 {
    let s = sigmoid(raw);
    (TAU_MAX - TAU_MIN) * s * (1.0 - s)
}

impl PolicyParams {
    pub fn new(config: PolicyConfig, seed: u64) -> Result<Self> {
        if config.grid == 0 || config.embed_dim == 0 {
            return Err(Error::Config("policy: zero grid or embedding size".into()));
        }
        let mut rng = rng_stream(seed, &[0x706f_6c69]);
        let encoder = MlpParams::new(
            &[config.obs_dim(), config.encoder_hidden, config.embed_dim],
            &[Activation::Tanh, Activation::Tanh],
            Init::Xavier,
            &mut rng,
        )?;
        let z0 = (0..config.embed_dim).map(|_| rng.random_range(-0.1..0.1)).collect();
        let mut heads = Vec::with_capacity(N_SUBTASKS);
        for _ in 0..N_SUBTASKS {
            heads.push(MlpParams::new(
                &[2 * config.embed_dim, config.head_hidden, HEAD_OUT],
                &[Activation::Tanh, Activation::Identity],
                Init::Xavier,
                &mut rng,
            )?);
        }
        Ok(PolicyParams { config, init_seed: seed, encoder, z0, heads })
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.encoder.in_dim() != self.config.obs_dim()
            || self.encoder.out_dim() != self.config.embed_dim
        {
            return Err(Error::Config("policy: encoder shape disagrees with config".into()));
        }
        if self.z0.len() != self.config.embed_dim || self.z0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("policy: bad z0".into()));
        }
        if self.heads.len() != N_SUBTASKS {
            return Err(Error::Config(format!("policy: {} heads", self.heads.len())));
        }
        for h in &self.heads {
            h.validate_regression_head()?;
            if h.in_dim() != 2 * self.config.embed_dim || h.out_dim() != HEAD_OUT {
                return Err(Error::Config("policy: head shape disagrees with config".into()));
            }
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.encoder.n_params()
            + self.z0.len()
            + self.heads.iter().map(MlpParams::n_params).sum::<usize>()
    }

    /// Canonical flatten order: encoder, z0, heads in subtask order.
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        self.encoder.flatten_into(out);
        out.extend_from_slice(&self.z0);
        for h in &self.heads {
            h.flatten_into(out);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        self.flatten_into(&mut out);
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::dim(format!(
                "policy assign: {} values for {} parameters",
                flat.len(),
                self.n_params()
            )));
        }
        let mut k = self.encoder.assign_flat(flat)?;
        let e = self.z0.len();
        self.z0.copy_from_slice(&flat[k..k + e]);
        k += e;
        for h in &mut self.heads {
            k += h.assign_flat(&flat[k..])?;
        }
        Ok(())
    }

    /// Segment labels in flatten order, for optimizer diagnostics.
    pub fn segments(&self) -> Vec<(String, usize)> {
        let mut segs = self.encoder.segments("encoder.");
        segs.push(("z0".into(), self.z0.len()));
        for (c, h) in self.heads.iter().enumerate() {
            segs.extend(h.segments(&format!("head{c}.")));
        }
        segs
    }

    fn check_obs(&self, obs: &Observation) -> Result<()> {
        if obs.grid != self.config.grid || obs.data.len() != self.config.obs_dim() {
            return Err(Error::dim(format!(
                "policy: observation grid {} for policy grid {}",
                obs.grid, self.config.grid
            )));
        }
        Ok(())
    }

    fn encode_tape(&self, obs: &Observation) -> Result<MlpTape> {
        self.check_obs(obs)?;
        self.encoder.forward(&obs.data)
    }

    /// Deterministic embedding of one observation.
    pub fn encode_obs(&self, obs: &Observation) -> Result<Vec<f64>> {
        Ok(self.encode_tape(obs)?.output().to_vec())
    }

    pub fn z0(&self) -> &[f64] {
        &self.z0
    }

    /// Head `c` applied to (embedded observation, goal slot). The duration
    /// lands in `[TAU_MIN, TAU_MAX]` by construction.
    pub fn predict_task_params(
        &self,
        obs: &Observation,
        goal_slot: Option<&[f64]>,
        c: usize,
    ) -> Result<TaskParams> {
        if c >= N_SUBTASKS {
            return Err(Error::domain(format!("policy: subtask index {c}")));
        }
        let emb = self.encode_obs(obs)?;
        let goal = goal_slot.unwrap_or(&self.z0);
        if goal.len() != self.config.embed_dim {
            return Err(Error::dim("policy: goal slot length"));
        }
        let mut input = emb;
        input.extend_from_slice(goal);
        let out = self.heads[c].forward(&input)?;
        let o = out.output();
        Ok(TaskParams {
            start: [o[0], o[1]],
            goal: [o[2], o[3]],
            tau: decode_tau(o[4]),
        })
    }

    /// Full open-loop forward pass over a demonstration's frame stream.
    ///
    /// Subtask c reads the frame at the boundary index accumulated from the
    /// PREDICTED durations of earlier subtasks, so only those frames (plus
    /// the final frame when `FinalFrame` is requested) are ever touched.
    pub fn predict_episode(
        &self,
        frames: &[Observation],
        dt: f64,
        goal_mode: GoalMode,
    ) -> Result<EpisodeTape> {
        self.validate()?;
        if frames.is_empty() {
            return Err(Error::domain("policy: empty frame stream"));
        }
        if !(dt > 0.0) {
            return Err(Error::domain(format!("policy: dt {dt}")));
        }
        let t_len = frames.len();
        let goal_tape = match goal_mode {
            GoalMode::FinalFrame => Some(self.encode_tape(frames.last().expect("nonempty"))?),
            GoalMode::LearnedZ0 => None,
        };
        let goal_emb: Vec<f64> = match &goal_tape {
            Some(tape) => tape.output().to_vec(),
            None => self.z0.clone(),
        };

        let mut obs_tapes = Vec::with_capacity(N_SUBTASKS);
        let mut head_tapes = Vec::with_capacity(N_SUBTASKS);
        let mut params = [TaskParams { start: [0.0; 2], goal: [0.0; 2], tau: TAU_MIN }; N_SUBTASKS];
        let mut raw_tau = [0.0; N_SUBTASKS];
        let mut start_frames = [0usize; N_SUBTASKS];
        let mut boundaries = [0usize; N_SUBTASKS];
        let mut truncated = false;
        let mut tau_sum = 0.0;
        let mut prev_boundary = 1usize;

        for c in 0..N_SUBTASKS {
            let idx = (prev_boundary - 1).min(t_len - 1);
            start_frames[c] = idx;
            let obs_tape = self.encode_tape(&frames[idx])?;
            let mut input = obs_tape.output().to_vec();
            input.extend_from_slice(&goal_emb);
            let head_tape = self.heads[c].forward(&input)?;
            let o = head_tape.output();
            raw_tau[c] = o[4];
            params[c] = TaskParams { start: [o[0], o[1]], goal: [o[2], o[3]], tau: decode_tau(o[4]) };
            tau_sum += params[c].tau;

            let raw_boundary = 1 + (tau_sum / dt).round() as i64;
            let clamped = raw_boundary.clamp(1, t_len as i64) as usize;
            if raw_boundary > t_len as i64 {
                truncated = true;
            }
            boundaries[c] = clamped;
            prev_boundary = clamped;

            obs_tapes.push(obs_tape);
            head_tapes.push(head_tape);
        }

        Ok(EpisodeTape {
            params,
            raw_tau,
            start_frames,
            boundaries,
            truncated,
            goal_mode,
            obs_tapes,
            goal_tape,
            head_tapes,
        })
    }

    /// Predict one subtask's parameters from a segmented clip: the first
    /// frame is the subtask-start observation, the last frame the goal
    /// image. Used by the segmented baseline, which owns one such predictor
    /// per subtask and only ever drives head `c`.
    pub fn predict_single(
        &self,
        frames: &[Observation],
        c: usize,
        goal_mode: GoalMode,
    ) -> Result<SingleTape> {
        self.validate()?;
        if c >= N_SUBTASKS {
            return Err(Error::domain(format!("policy: subtask index {c}")));
        }
        if frames.is_empty() {
            return Err(Error::domain("policy: empty frame stream"));
        }
        let goal_tape = match goal_mode {
            GoalMode::FinalFrame => Some(self.encode_tape(frames.last().expect("nonempty"))?),
            GoalMode::LearnedZ0 => None,
        };
        let goal_emb: Vec<f64> = match &goal_tape {
            Some(tape) => tape.output().to_vec(),
            None => self.z0.clone(),
        };
        let obs_tape = self.encode_tape(&frames[0])?;
        let mut input = obs_tape.output().to_vec();
        input.extend_from_slice(&goal_emb);
        let head_tape = self.heads[c].forward(&input)?;
        let o = head_tape.output();
        Ok(SingleTape {
            params: TaskParams { start: [o[0], o[1]], goal: [o[2], o[3]], tau: decode_tau(o[4]) },
            raw_tau: o[4],
            subtask: c,
            goal_mode,
            obs_tape,
            goal_tape,
            head_tape,
        })
    }

    /// Backward pass matching `predict_single`.
    pub fn backward_single(&self, tape: &SingleTape, d: &TaskParamGrad) -> Result<PolicyGrads> {
        let mut grads = PolicyGrads::zeros_like(self);
        let e = self.config.embed_dim;
        let c = tape.subtask;
        let dl_dout = [
            d.d_start[0],
            d.d_start[1],
            d.d_goal[0],
            d.d_goal[1],
            d.d_tau * decode_tau_derivative(tape.raw_tau),
        ];
        let d_input =
            self.heads[c].backward_into(&tape.head_tape, &dl_dout, &mut grads.heads[c])?;
        self.encoder.backward_into(&tape.obs_tape, &d_input[..e], &mut grads.encoder)?;
        match (tape.goal_mode, &tape.goal_tape) {
            (GoalMode::LearnedZ0, _) => {
                for (acc, dg) in grads.z0.iter_mut().zip(&d_input[e..]) {
                    *acc += dg;
                }
            }
            (GoalMode::FinalFrame, Some(goal_tape)) => {
                self.encoder.backward_into(goal_tape, &d_input[e..], &mut grads.encoder)?;
            }
            (GoalMode::FinalFrame, None) => {
                return Err(Error::domain("policy: goal tape missing"));
            }
        }
        Ok(grads)
    }

    /// Backpropagate per-subtask task-parameter gradients through the heads,
    /// the goal slot, and the shared encoder.
    pub fn backward_episode(
        &self,
        tape: &EpisodeTape,
        d_params: &[TaskParamGrad; N_SUBTASKS],
    ) -> Result<PolicyGrads> {
        let mut grads = PolicyGrads::zeros_like(self);
        let e = self.config.embed_dim;
        let mut d_goal_emb = vec![0.0; e];

        for c in 0..N_SUBTASKS {
            let g = &d_params[c];
            let dl_dout = [
                g.d_start[0],
                g.d_start[1],
                g.d_goal[0],
                g.d_goal[1],
                g.d_tau * decode_tau_derivative(tape.raw_tau[c]),
            ];
            let d_input =
                self.heads[c].backward_into(&tape.head_tapes[c], &dl_dout, &mut grads.heads[c])?;
            self.encoder.backward_into(&tape.obs_tapes[c], &d_input[..e], &mut grads.encoder)?;
            for (acc, d) in d_goal_emb.iter_mut().zip(&d_input[e..]) {
                *acc += d;
            }
        }

        match (tape.goal_mode, &tape.goal_tape) {
            (GoalMode::LearnedZ0, _) => {
                for (acc, d) in grads.z0.iter_mut().zip(&d_goal_emb) {
                    *acc += d;
                }
            }
            (GoalMode::FinalFrame, Some(goal_tape)) => {
                self.encoder.backward_into(goal_tape, &d_goal_emb, &mut grads.encoder)?;
            }
            (GoalMode::FinalFrame, None) => {
                return Err(Error::domain("policy: goal tape missing"));
            }
        }
        Ok(grads)
    }

    /// Take one plain gradient step, returning the stepped copy.
    pub fn stepped(&self, grads: &PolicyGrads, lr: f64) -> Result<PolicyParams> {
        let mut flat = self.flatten();
        let flat_g = grads.flatten();
        crate::math::sgd_step(&mut flat, &flat_g, lr)?;
        let mut out = self.clone();
        out.assign_flat(&flat)?;
        out
            .validate()
            .map_err(|_| Error::NonFinite("policy parameters after gradient step".into()))?;
        Ok(out)
    }
}

/// An open-loop plan: predicted task parameters, the rollout of each
/// primitive under them, and the boundary frame indices that were read.
#[derive(Debug, Clone)]
pub struct SubtaskPlan {
    pub params: [TaskParams; N_SUBTASKS],
    pub trajectories: [Trajectory; N_SUBTASKS],
    pub start_frames: [usize; N_SUBTASKS],
    pub boundaries: [usize; N_SUBTASKS],
    pub truncated: bool,
}

impl SubtaskPlan {
    /// Total sample count of the concatenated plan.
    pub fn concat_len(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }
}

/// Open-loop planning over a recorded frame stream: predict all task
/// parameters, then roll each primitive. Only the frames at predicted
/// subtask boundaries influence the result, which is what makes the plan
/// immune to corruption anywhere else.
pub fn plan_episode(
    policy: &PolicyParams,
    frames: &[Observation],
    dt: f64,
    prims: &[SkillPrimitive; N_SUBTASKS],
    goal_mode: GoalMode,
) -> Result<SubtaskPlan> {
    let tape = policy.predict_episode(frames, dt, goal_mode)?;
    let mut trajectories = Vec::with_capacity(N_SUBTASKS);
    for c in 0..N_SUBTASKS {
        trajectories.push(rollout(&prims[c], &tape.params[c], dt)?);
    }
    let trajectories: [Trajectory; N_SUBTASKS] =
        trajectories.try_into().map_err(|_| Error::domain("plan: subtask count"))?;
    Ok(SubtaskPlan {
        params: tape.params,
        trajectories,
        start_frames: tape.start_frames,
        boundaries: tape.boundaries,
        truncated: tape.truncated,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    version: String,
    grid: usize,
    embed_dim: usize,
    encoder_hidden: usize,
    head_hidden: usize,
    n_heads: usize,
    n_params: usize,
    init_seed: u64,
}

/// Write a checkpoint: one-line JSON header, newline, then the flattened
/// parameters as little-endian f64.
pub fn save_policy(policy: &PolicyParams, path: &Path) -> Result<()> {
    policy.validate()?;
    let header = CheckpointHeader {
        version: POLICY_VERSION.into(),
        grid: policy.config.grid,
        embed_dim: policy.config.embed_dim,
        encoder_hidden: policy.config.encoder_hidden,
        head_hidden: policy.config.head_hidden,
        n_heads: N_SUBTASKS,
        n_params: policy.n_params(),
        init_seed: policy.init_seed,
    };
    let mut bytes = serde_json::to_string(&header)?.into_bytes();
    bytes.push(b'\n');
    for v in policy.flatten() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_policy(path: &Path) -> Result<PolicyParams> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("checkpoint: missing header line".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])?;
    if header.version != POLICY_VERSION {
        return Err(Error::Format(format!(
            "checkpoint: version {} but this build reads {POLICY_VERSION}",
            header.version
        )));
    }
    if header.n_heads != N_SUBTASKS {
        return Err(Error::Format(format!("checkpoint: {} heads", header.n_heads)));
    }
    let config = PolicyConfig {
        grid: header.grid,
        embed_dim: header.embed_dim,
        encoder_hidden: header.encoder_hidden,
        head_hidden: header.head_hidden,
    };
    let mut policy = PolicyParams::new(config, header.init_seed)?;
    let body = &bytes[nl + 1..];
    if body.len() != header.n_params * 8 || header.n_params != policy.n_params() {
        return Err(Error::Format(format!(
            "checkpoint: {} bytes of weights for {} parameters",
            body.len(),
            policy.n_params()
        )));
    }
    let flat: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    policy.assign_flat(&flat)?;
    policy.validate()?;
    Ok(policy)
}
