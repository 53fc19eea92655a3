//! Comparison methods: goal-conditioned behaviour cloning and per-subtask
//! first-order meta-learned predictors.
//!
//! Both baselines read a demonstration's hidden segmentation on purpose;
//! that privilege is the point of the comparison. The main pipeline never
//! touches it, and the test suite audits the access counter to prove it.

use crate::dmp::{SkillId, SkillPrimitive, Trajectory};
use crate::error::{Error, Result};
use crate::gmm::CovarianceProfile;
use crate::loss::episode_quadratic_loss;
use crate::math::{Activation, Init, MlpGrads, MlpParams, OptState};
use crate::meta::{inner_adapt_with, MetaConfig, TrainRow};
use crate::policy::{GoalMode, PolicyConfig, PolicyGrads, PolicyParams, N_SUBTASKS};
use crate::rng::rng_stream;
use crate::sim::{Demonstration, Observation};
use rand::seq::SliceRandom as _;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::io::{Read as _, Write as _};
use std::path::Path;

/// One subtask's slice of an unsegmented demonstration. Keeps the resting
/// sample it starts from, mirroring the expert's own skill clips.
#[derive(Debug, Clone)]
pub struct SegmentedClip {
    pub frames: Vec<Observation>,
    pub traj: Trajectory,
}

/// Split a demonstration at its hidden boundaries (baseline privilege).
pub fn segment_demo(demo: &Demonstration) -> [SegmentedClip; 3] {
    let b = demo.hidden_segmentation();
    let clip = |lo: usize, hi: usize| SegmentedClip {
        frames: demo.frames[lo..hi].to_vec(),
        traj: Trajectory {
            dt: demo.traj.dt,
            positions: demo.traj.positions[lo..hi].to_vec(),
            velocities: demo.traj.velocities[lo..hi].to_vec(),
        },
    };
    [clip(0, b[0]), clip(b[0] - 1, b[1]), clip(b[1] - 1, b[2])]
}

/// One task-parameter predictor per subtask, each meta-trained on that
/// subtask's segmented clips with a plain unweighted trajectory loss. Each
/// predictor is a full policy parameter block of which only head `c` is
/// ever driven.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentedMaml {
    pub predictors: [PolicyParams; N_SUBTASKS],
}

impl SegmentedMaml {
    pub fn new(config: PolicyConfig, seed: u64) -> Result<Self> {
        let mut slots = Vec::with_capacity(N_SUBTASKS);
        for c in 0..N_SUBTASKS {
            slots.push(PolicyParams::new(config, seed.wrapping_add(1 + c as u64))?);
        }
        let predictors =
            slots.try_into().map_err(|_| Error::domain("segmented: predictor count"))?;
        Ok(SegmentedMaml { predictors })
    }
}

/// Plain quadratic loss of one predictor on one clip: a single-subtask
/// chain weighted by the identity, i.e. no covariance weighting.
pub fn segmented_clip_loss(
    policy: &PolicyParams,
    clip: &SegmentedClip,
    prim: &SkillPrimitive,
    c: usize,
    m_samples: usize,
    goal_mode: GoalMode,
) -> Result<(f64, PolicyGrads)> {
    let tape = policy.predict_single(&clip.frames, c, goal_mode)?;
    let identity = CovarianceProfile::identity(SkillId::ALL[c], 2)?;
    let (loss, grads) = episode_quadratic_loss(
        &[tape.params],
        &[prim],
        &[&identity],
        &[1.0],
        m_samples,
        &clip.traj,
    )?;
    let pg = policy.backward_single(&tape, &grads[0])?;
    Ok((loss.total, pg))
}

fn mean_clip_loss_grad(
    policy: &PolicyParams,
    clips: &[&SegmentedClip],
    prim: &SkillPrimitive,
    c: usize,
    m_samples: usize,
    goal_mode: GoalMode,
) -> Result<(f64, Vec<f64>)> {
    if clips.is_empty() {
        return Err(Error::domain("segmented: empty clip set"));
    }
    let mut value = 0.0;
    let mut flat = vec![0.0; policy.n_params()];
    for clip in clips {
        let (v, pg) = segmented_clip_loss(policy, clip, prim, c, m_samples, goal_mode)?;
        value += v;
        for (acc, g) in flat.iter_mut().zip(pg.flatten()) {
            *acc += g;
        }
    }
    let scale = 1.0 / clips.len() as f64;
    value *= scale;
    for g in &mut flat {
        *g *= scale;
    }
    if !value.is_finite() || flat.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("segmented inner loss or gradient".into()));
    }
    Ok((value, flat))
}

/// Adapt predictor `c` to a task with gradient steps on its training clips,
/// goal slot from each clip's final frame.
pub fn segmented_inner_adapt(
    policy: &PolicyParams,
    clips: &[&SegmentedClip],
    prim: &SkillPrimitive,
    c: usize,
    cfg: &MetaConfig,
) -> Result<PolicyParams> {
    cfg.validate()?;
    inner_adapt_with(policy, cfg.alpha_inner, cfg.inner_steps, |phi| {
        mean_clip_loss_grad(phi, clips, prim, c, cfg.m_samples, GoalMode::FinalFrame)
    })
}

/// One-shot adaptation of every predictor to a held-out task's single
/// demonstration, which the baseline is allowed to segment.
pub fn segmented_adapt_one_shot(
    model: &SegmentedMaml,
    demo: &Demonstration,
    prims: &[SkillPrimitive; N_SUBTASKS],
    cfg: &MetaConfig,
) -> Result<SegmentedMaml> {
    let clips = segment_demo(demo);
    let mut slots = Vec::with_capacity(N_SUBTASKS);
    for c in 0..N_SUBTASKS {
        slots.push(segmented_inner_adapt(
            &model.predictors[c],
            &[&clips[c]],
            &prims[c],
            c,
            cfg,
        )?);
    }
    let predictors =
        slots.try_into().map_err(|_| Error::domain("segmented: predictor count"))?;
    Ok(SegmentedMaml { predictors })
}

/// Meta-train the per-subtask predictors: same batch/partition/inner/outer
/// structure as the main trainer, but on segmented clips with the plain
/// loss. Returns one training log per subtask.
pub fn segmented_maml_train(
    model: &mut SegmentedMaml,
    task_pools: &[Vec<[SegmentedClip; N_SUBTASKS]>],
    prims: &[SkillPrimitive; N_SUBTASKS],
    cfg: &MetaConfig,
    steps: usize,
) -> Result<[Vec<TrainRow>; N_SUBTASKS]> {
    cfg.validate()?;
    if task_pools.is_empty() {
        return Err(Error::domain("segmented train: no tasks"));
    }
    if let Some(short) = task_pools.iter().position(|p| p.len() < 2) {
        return Err(Error::domain(format!(
            "segmented train: task {short} has {} demos, need at least 2 to partition",
            task_pools[short].len()
        )));
    }
    let mut logs: [Vec<TrainRow>; N_SUBTASKS] =
        [Vec::with_capacity(steps), Vec::with_capacity(steps), Vec::with_capacity(steps)];
    for c in 0..N_SUBTASKS {
        let policy = &mut model.predictors[c];
        let mut opt = OptState::new(cfg.outer_lr, policy.segments());
        for step in 0..steps {
            let started = std::time::Instant::now();
            let mut rng = rng_stream(cfg.seed, &[0x7365_676d, c as u64, step as u64]);
            let chosen: Vec<usize> = if cfg.meta_batch <= task_pools.len() {
                let mut idx: Vec<usize> = (0..task_pools.len()).collect();
                idx.shuffle(&mut rng);
                idx.truncate(cfg.meta_batch);
                idx
            } else {
                (0..cfg.meta_batch).map(|_| rng.random_range(0..task_pools.len())).collect()
            };

            let mut value = 0.0;
            let mut pre = 0.0;
            let mut grad = vec![0.0; policy.n_params()];
            let mut used = 0usize;
            let mut skipped = 0usize;
            for &t in &chosen {
                let pool = &task_pools[t];
                let mut order: Vec<usize> = (0..pool.len()).collect();
                order.shuffle(&mut rng);
                let n_train = pool.len() / 2;
                let train: Vec<&SegmentedClip> =
                    order[..n_train].iter().map(|&i| &pool[i][c]).collect();
                let val: Vec<&SegmentedClip> =
                    order[n_train..].iter().map(|&i| &pool[i][c]).collect();
                let outcome = segmented_inner_adapt(policy, &train, &prims[c], c, cfg)
                    .and_then(|phi| {
                        let post = mean_clip_loss_grad(
                            &phi,
                            &val,
                            &prims[c],
                            c,
                            cfg.m_samples,
                            GoalMode::LearnedZ0,
                        )?;
                        let (before, _) = mean_clip_loss_grad(
                            policy,
                            &val,
                            &prims[c],
                            c,
                            cfg.m_samples,
                            GoalMode::LearnedZ0,
                        )?;
                        Ok((post, before))
                    });
                match outcome {
                    Ok(((v, g), before)) => {
                        value += v;
                        pre += before;
                        for (acc, gi) in grad.iter_mut().zip(&g) {
                            *acc += gi;
                        }
                        used += 1;
                    }
                    Err(Error::NonFinite(_)) | Err(Error::Instability(_)) => skipped += 1,
                    Err(e) => return Err(e),
                }
            }
            if used == 0 {
                return Err(Error::NonFinite(format!(
                    "segmented train: every task skipped at subtask {c} step {step}"
                )));
            }
            let scale = 1.0 / used as f64;
            value *= scale;
            pre *= scale;
            for g in &mut grad {
                *g *= scale;
            }
            let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            let mut flat = policy.flatten();
            opt.apply(&mut flat, &grad)?;
            policy.assign_flat(&flat)?;
            logs[c].push(TrainRow {
                step,
                meta_loss: value,
                val_loss: pre,
                grad_norm,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
                skipped,
            });
        }
    }
    Ok(logs)
}

pub const GCBC_VERSION: &str = "gcbc-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GcbcConfig {
    pub grid: usize,
    pub embed_dim: usize,
    pub encoder_hidden: usize,
    pub hidden: usize,
}

impl Default for GcbcConfig {
    fn default() -> Self {
        GcbcConfig { grid: 16, embed_dim: 32, encoder_hidden: 64, hidden: 32 }
    }
}

impl GcbcConfig {
    pub fn tiny(grid: usize) -> Self {
        GcbcConfig { grid, embed_dim: 4, encoder_hidden: 8, hidden: 8 }
    }

    pub fn obs_dim(&self) -> usize {
        self.grid * self.grid * crate::sim::N_CHANNELS
    }
}

/// Goal-image conditioned behaviour cloning: a shared observation encoder
/// and one velocity net per subtask mapping (current obs embedding, ee
/// position, goal-frame embedding) to the next commanded velocity. Queried
/// every control tick at execution, so it sees every occluded frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GcbcPolicy {
    pub config: GcbcConfig,
    pub init_seed: u64,
    encoder: MlpParams,
    nets: Vec<MlpParams>,
}

impl GcbcPolicy {
    pub fn new(config: GcbcConfig, seed: u64) -> Result<Self> {
        if config.grid == 0 || config.embed_dim == 0 {
            return Err(Error::Config("gcbc: zero grid or embedding size".into()));
        }
        let mut rng = rng_stream(seed, &[0x6763_6263]);
        let encoder = MlpParams::new(
            &[config.obs_dim(), config.encoder_hidden, config.embed_dim],
            &[Activation::Tanh, Activation::Tanh],
            Init::Xavier,
            &mut rng,
        )?;
        let mut nets = Vec::with_capacity(N_SUBTASKS);
        for _ in 0..N_SUBTASKS {
            nets.push(MlpParams::new(
                &[2 * config.embed_dim + 2, config.hidden, config.hidden, 2],
                &[Activation::Relu, Activation::Relu, Activation::Identity],
                Init::Xavier,
                &mut rng,
            )?);
        }
        Ok(GcbcPolicy { config, init_seed: seed, encoder, nets })
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.encoder.in_dim() != self.config.obs_dim()
            || self.encoder.out_dim() != self.config.embed_dim
        {
            return Err(Error::Config("gcbc: encoder shape disagrees with config".into()));
        }
        if self.nets.len() != N_SUBTASKS {
            return Err(Error::Config(format!("gcbc: {} nets", self.nets.len())));
        }
        for n in &self.nets {
            n.validate_regression_head()?;
            if n.in_dim() != 2 * self.config.embed_dim + 2 || n.out_dim() != 2 {
                return Err(Error::Config("gcbc: net shape disagrees with config".into()));
            }
            if n.n_layers() != 3 {
                return Err(Error::Config("gcbc: velocity net layer count".into()));
            }
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.encoder.n_params() + self.nets.iter().map(MlpParams::n_params).sum::<usize>()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        self.encoder.flatten_into(&mut out);
        for n in &self.nets {
            n.flatten_into(&mut out);
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::dim(format!(
                "gcbc assign: {} values for {} parameters",
                flat.len(),
                self.n_params()
            )));
        }
        let mut k = self.encoder.assign_flat(flat)?;
        for n in &mut self.nets {
            k += n.assign_flat(&flat[k..])?;
        }
        Ok(())
    }

    pub fn segments(&self) -> Vec<(String, usize)> {
        let mut segs = self.encoder.segments("encoder.");
        for (c, n) in self.nets.iter().enumerate() {
            segs.extend(n.segments(&format!("net{c}.")));
        }
        segs
    }

    pub fn embed(&self, obs: &Observation) -> Result<Vec<f64>> {
        if obs.grid != self.config.grid || obs.data.len() != self.config.obs_dim() {
            return Err(Error::dim(format!(
                "gcbc: observation grid {} for policy grid {}",
                obs.grid, self.config.grid
            )));
        }
        Ok(self.encoder.forward(&obs.data)?.output().to_vec())
    }

    /// Velocity command for subtask `c` at the current tick.
    pub fn act(
        &self,
        obs: &Observation,
        ee: [f64; 2],
        goal_emb: &[f64],
        c: usize,
    ) -> Result<[f64; 2]> {
        if c >= N_SUBTASKS {
            return Err(Error::domain(format!("gcbc: subtask index {c}")));
        }
        if goal_emb.len() != self.config.embed_dim {
            return Err(Error::dim("gcbc: goal embedding length"));
        }
        let mut input = self.embed(obs)?;
        input.push(ee[0]);
        input.push(ee[1]);
        input.extend_from_slice(goal_emb);
        let out = self.nets[c].forward(&input)?;
        let o = out.output();
        Ok([o[0], o[1]])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GcbcTrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for GcbcTrainConfig {
    fn default() -> Self {
        GcbcTrainConfig { lr: 1e-3, batch: 64, steps: 2000, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GcbcRow {
    pub step: usize,
    /// Mean squared velocity-command error over the minibatch, (m/s)^2.
    pub loss: f64,
}

struct GcbcSampleRef {
    demo: usize,
    tick: usize,
    subtask: usize,
}

/// Behaviour-clone the velocity commands: target at tick t is the finite
/// difference of the demo positions over one control period. Goal frames
/// come from each demo's hidden segmentation (baseline privilege).
pub fn gcbc_train(
    policy: &mut GcbcPolicy,
    demos: &[Demonstration],
    cfg: &GcbcTrainConfig,
) -> Result<Vec<GcbcRow>> {
    policy.validate()?;
    if demos.is_empty() {
        return Err(Error::domain("gcbc train: no demos"));
    }
    if cfg.batch == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config(format!(
            "gcbc train: batch {} lr {}",
            cfg.batch, cfg.lr
        )));
    }
    let e = policy.config.embed_dim;

    let mut samples = Vec::new();
    let mut goal_frames = Vec::with_capacity(demos.len());
    for (d, demo) in demos.iter().enumerate() {
        let b = demo.hidden_segmentation();
        goal_frames.push([b[0] - 1, b[1] - 1, b[2] - 1]);
        let ranges = [(0, b[0]), (b[0] - 1, b[1]), (b[1] - 1, b[2])];
        for (c, &(lo, hi)) in ranges.iter().enumerate() {
            for t in lo..hi.saturating_sub(1) {
                samples.push(GcbcSampleRef { demo: d, tick: t, subtask: c });
            }
        }
    }
    if samples.is_empty() {
        return Err(Error::domain("gcbc train: demos too short to clone"));
    }

    let mut opt = OptState::new(cfg.lr, policy.segments());
    let mut rows = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut rng = rng_stream(cfg.seed, &[0x6763_6263, step as u64]);
        let mut enc_grads = MlpGrads::zeros_like(&policy.encoder);
        let mut net_grads: Vec<MlpGrads> =
            policy.nets.iter().map(MlpGrads::zeros_like).collect();
        let mut loss = 0.0;
        for _ in 0..cfg.batch {
            let s = &samples[rng.random_range(0..samples.len())];
            let demo = &demos[s.demo];
            let dt = demo.traj.dt;
            let pos = demo.traj.positions[s.tick];
            let next = demo.traj.positions[s.tick + 1];
            let target = [(next[0] - pos[0]) / dt, (next[1] - pos[1]) / dt];

            let obs_tape = policy.encoder.forward(&demo.frames[s.tick].data)?;
            let goal_tape = policy
                .encoder
                .forward(&demo.frames[goal_frames[s.demo][s.subtask]].data)?;
            let mut input = obs_tape.output().to_vec();
            input.push(pos[0]);
            input.push(pos[1]);
            input.extend_from_slice(goal_tape.output());
            let net_tape = policy.nets[s.subtask].forward(&input)?;
            let o = net_tape.output();
            let r = [o[0] - target[0], o[1] - target[1]];
            loss += r[0] * r[0] + r[1] * r[1];

            let scale = 2.0 / cfg.batch as f64;
            let dl_dout = [scale * r[0], scale * r[1]];
            let d_input = policy.nets[s.subtask].backward_into(
                &net_tape,
                &dl_dout,
                &mut net_grads[s.subtask],
            )?;
            policy.encoder.backward_into(&obs_tape, &d_input[..e], &mut enc_grads)?;
            policy.encoder.backward_into(&goal_tape, &d_input[e + 2..], &mut enc_grads)?;
        }
        loss /= cfg.batch as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("gcbc loss at step {step}")));
        }

        let mut flat_g = Vec::with_capacity(policy.n_params());
        enc_grads.flatten_into(&mut flat_g);
        for g in &net_grads {
            g.flatten_into(&mut flat_g);
        }
        let mut flat = policy.flatten();
        opt.apply(&mut flat, &flat_g)?;
        policy.assign_flat(&flat)?;
        rows.push(GcbcRow { step, loss });
    }
    Ok(rows)
}

/// Per-subtask goal-frame embeddings of a (held-out) demonstration, the
/// conditioning input GCBC receives at test time.
pub fn gcbc_goal_embeddings(
    policy: &GcbcPolicy,
    demo: &Demonstration,
) -> Result<[Vec<f64>; N_SUBTASKS]> {
    let b = demo.hidden_segmentation();
    Ok([
        policy.embed(&demo.frames[b[0] - 1])?,
        policy.embed(&demo.frames[b[1] - 1])?,
        policy.embed(&demo.frames[b[2] - 1])?,
    ])
}

#[derive(Debug, Serialize, Deserialize)]
struct GcbcHeader {
    version: String,
    grid: usize,
    embed_dim: usize,
    encoder_hidden: usize,
    hidden: usize,
    n_nets: usize,
    n_params: usize,
    init_seed: u64,
}

/// Same layout as the policy checkpoint: one-line JSON header, newline,
/// little-endian f64 weight block.
pub fn save_gcbc(policy: &GcbcPolicy, path: &Path) -> Result<()> {
    policy.validate()?;
    let header = GcbcHeader {
        version: GCBC_VERSION.into(),
        grid: policy.config.grid,
        embed_dim: policy.config.embed_dim,
        encoder_hidden: policy.config.encoder_hidden,
        hidden: policy.config.hidden,
        n_nets: N_SUBTASKS,
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

pub fn load_gcbc(path: &Path) -> Result<GcbcPolicy> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("gcbc checkpoint: missing header line".into()))?;
    let header: GcbcHeader = serde_json::from_slice(&bytes[..nl])?;
    if header.version != GCBC_VERSION {
        return Err(Error::Format(format!(
            "gcbc checkpoint: version {} but this build reads {GCBC_VERSION}",
            header.version
        )));
    }
    if header.n_nets != N_SUBTASKS {
        return Err(Error::Format(format!("gcbc checkpoint: {} nets", header.n_nets)));
    }
    let config = GcbcConfig {
        grid: header.grid,
        embed_dim: header.embed_dim,
        encoder_hidden: header.encoder_hidden,
        hidden: header.hidden,
    };
    let mut policy = GcbcPolicy::new(config, header.init_seed)?;
    let body = &bytes[nl + 1..];
    if body.len() != header.n_params * 8 || header.n_params != policy.n_params() {
        return Err(Error::Format(format!(
            "gcbc checkpoint: {} bytes of weights for {} parameters",
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
