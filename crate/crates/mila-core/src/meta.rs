//! Meta-learning over the task-parameter policy: per-task inner adaptation
//! by plain gradient steps, a first-order outer update through Adam, and a
//! finite-difference exact mode that tests measure the first-order
//! approximation against.
//!
//! Inner adaptation sees the training demo's goal image (its final frame);
//! the outer validation pass and everything after meta-training run with
//! the learned z0 in the goal slot, matching the conditions at meta-test.

use crate::error::{Error, Result};
use crate::gmm::CovarianceProfile;
use crate::loss::covariance_loss;
use crate::math::{fd_gradient, sgd_step, OptState};
use crate::policy::{GoalMode, PolicyParams, N_SUBTASKS};
use crate::repertoire::SkillRepertoire;
use crate::rng::rng_stream;
use crate::sim::Demonstration;
use rand::seq::SliceRandom as _;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GradMode {
    /// Apply the post-adaptation validation gradient at the pre-adaptation
    /// parameters (no second-order terms).
    FirstOrder,
    /// Central finite differences of the full objective. Test oracle only;
    /// cost scales with the parameter count.
    FdExact,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MetaConfig {
    /// Inner-loop step size. Zero is legal and makes adaptation the
    /// identity, which the mechanics tests rely on.
    pub alpha_inner: f64,
    pub inner_steps: usize,
    pub outer_lr: f64,
    pub meta_batch: usize,
    /// Subtask weights in the covariance loss.
    pub gamma: [f64; N_SUBTASKS],
    /// Phase samples per subtask in the loss.
    pub m_samples: usize,
    pub grad_mode: GradMode,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            alpha_inner: 0.01,
            inner_steps: 1,
            outer_lr: 1e-3,
            meta_batch: 8,
            gamma: [1.0; N_SUBTASKS],
            m_samples: 32,
            grad_mode: GradMode::FirstOrder,
            seed: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_inner >= 0.0) || !self.alpha_inner.is_finite() {
            return Err(Error::Config(format!("alpha_inner {}", self.alpha_inner)));
        }
        if !(self.outer_lr > 0.0) || !self.outer_lr.is_finite() {
            return Err(Error::Config(format!("outer_lr {}", self.outer_lr)));
        }
        if self.meta_batch == 0 {
            return Err(Error::Config("meta_batch 0".into()));
        }
        if self.gamma.iter().any(|&g| !(g > 0.0)) {
            return Err(Error::Config("gamma entries must be positive".into()));
        }
        if self.m_samples < 8 {
            return Err(Error::Config(format!("m_samples {} below 8", self.m_samples)));
        }
        Ok(())
    }
}

/// One task's episodes for a single meta-step, already partitioned.
pub struct TaskEpisodes<'a> {
    pub train: Vec<&'a Demonstration>,
    pub val: Vec<&'a Demonstration>,
}

/// Mean covariance loss and flattened gradient over a set of demos.
fn mean_loss_grad(
    policy: &PolicyParams,
    demos: &[&Demonstration],
    repertoire: &SkillRepertoire,
    profiles: &[CovarianceProfile; N_SUBTASKS],
    cfg: &MetaConfig,
    goal_mode: GoalMode,
) -> Result<(f64, Vec<f64>)> {
    if demos.is_empty() {
        return Err(Error::domain("meta: empty demo set"));
    }
    let mut value = 0.0;
    let mut flat = vec![0.0; policy.n_params()];
    for demo in demos {
        let (loss, grads) =
            covariance_loss(policy, demo, repertoire, profiles, cfg.gamma, cfg.m_samples, goal_mode)?;
        value += loss.total;
        let mut g = Vec::with_capacity(flat.len());
        grads.flatten_into(&mut g);
        for (acc, gi) in flat.iter_mut().zip(&g) {
            *acc += gi;
        }
    }
    let scale = 1.0 / demos.len() as f64;
    value *= scale;
    for g in &mut flat {
        *g *= scale;
    }
    if !value.is_finite() || flat.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("inner loss or gradient".into()));
    }
    Ok((value, flat))
}

/// Mean covariance loss value only (no policy gradient).
pub fn mean_loss_value(
    policy: &PolicyParams,
    demos: &[&Demonstration],
    repertoire: &SkillRepertoire,
    profiles: &[CovarianceProfile; N_SUBTASKS],
    cfg: &MetaConfig,
    goal_mode: GoalMode,
) -> Result<f64> {
    let (value, _) = mean_loss_grad(policy, demos, repertoire, profiles, cfg, goal_mode)?;
    Ok(value)
}

/// Gradient-step adaptation against an arbitrary loss closure returning
/// (value, flattened gradient). Exposed so tests can drive the exact update
/// rule with a surrogate loss.
pub fn inner_adapt_with<F>(
    policy: &PolicyParams,
    alpha: f64,
    steps: usize,
    mut loss_grad: F,
) -> Result<PolicyParams>
where
    F: FnMut(&PolicyParams) -> Result<(f64, Vec<f64>)>,
{
    let mut phi = policy.clone();
    for _ in 0..steps {
        let (value, grad) = loss_grad(&phi)?;
        if !value.is_finite() {
            return Err(Error::NonFinite("inner adaptation loss".into()));
        }
        let mut flat = phi.flatten();
        sgd_step(&mut flat, &grad, alpha)?;
        phi.assign_flat(&flat)?;
    }
    Ok(phi)
}

/// Adapt to one task: `inner_steps` gradient steps of size `alpha_inner` on
/// the mean covariance loss of the training demos, goal slot from each
/// demo's final frame.
pub fn inner_adapt(
    policy: &PolicyParams,
    train: &[&Demonstration],
    repertoire: &SkillRepertoire,
    profiles: &[CovarianceProfile; N_SUBTASKS],
    cfg: &MetaConfig,
) -> Result<PolicyParams> {
    cfg.validate()?;
    inner_adapt_with(policy, cfg.alpha_inner, cfg.inner_steps, |phi| {
        mean_loss_grad(phi, train, repertoire, profiles, cfg, GoalMode::FinalFrame)
    })
}

/// One-shot adaptation at meta-test: identical mechanics to `inner_adapt`
/// with a single demonstration. The returned parameters are meant to run
/// with the learned z0 goal slot.
pub fn adapt_one_shot(
    policy: &PolicyParams,
    demo: &Demonstration,
    repertoire: &SkillRepertoire,
    profiles: &[CovarianceProfile; N_SUBTASKS],
    cfg: &MetaConfig,
) -> Result<PolicyParams> {
    inner_adapt(policy, &[demo], repertoire, profiles, cfg)
}

/// Meta-objective value and gradient over a task batch at `policy`,
/// computed per `cfg.grad_mode`. Does not update anything.
///
/// Returns (objective, gradient, skipped tasks). In first-order mode a task
/// whose adaptation or validation turns non-finite is skipped; the
/// finite-difference mode is strict.
pub fn meta_gradient(
    policy: &PolicyParams,
    tasks: &[TaskEpisodes],
    repertoire: &SkillRepertoire,
    profiles: &[CovarianceProfile; N_SUBTASKS],
    cfg: &MetaConfig,
) -> Result<(f64, Vec<f64>, usize)> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::domain("meta: empty task batch"));
    }
    match cfg.grad_mode {
        GradMode::FirstOrder => {
            let mut value = 0.0;
            let mut grad = vec![0.0; policy.n_params()];
            let mut used = 0usize;
            let mut skipped = 0usize;
            for task in tasks {
                let outcome = inner_adapt(policy, &task.train, repertoire, profiles, cfg)
                    .and_then(|phi| {
                        mean_loss_grad(&phi, &task.val, repertoire, profiles, cfg, GoalMode::LearnedZ0)
                    });
                match outcome {
                    Ok((v, g)) => {
                        value += v;
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
                return Err(Error::NonFinite("meta step: every task was skipped".into()));
            }
            let scale = 1.0 / used as f64;
            value *= scale;
            for g in &mut grad {
                *g *= scale;
            }
            Ok((value, grad, skipped))
        }
        GradMode::FdExact => {
            let objective = |flat: &[f64]| -> Result<f64> {
                let mut probe = policy.clone();
                probe.assign_flat(flat)?;
                let mut value = 0.0;
                for task in tasks {
                    let phi = inner_adapt(&probe, &task.train, repertoire, profiles, cfg)?;
                    value +=
                        mean_loss_value(&phi, &task.val, repertoire, profiles, cfg, GoalMode::LearnedZ0)?;
                }
                Ok(value / tasks.len() as f64)
            };
            let point = policy.flatten();
            let value = objective(&point)?;
            let grad = fd_gradient(objective, &point, 1e-6)?;
            Ok((value, grad, 0))
        }
    }
}

/// Per-step metrics reported by `meta_step`.
#[derive(Debug, Clone, Copy)]
pub struct MetaMetrics {
    /// Mean post-adaptation validation loss (the optimized objective).
    pub meta_loss: f64,
    /// Mean pre-adaptation validation loss of the same batch.
    pub pre_loss: f64,
    pub grad_norm: f64,
    pub skipped: usize,
}

/// One outer update: adapt per task, average the validation gradient, apply
/// a single optimizer step in place.
pub fn meta_step(
    policy: &mut PolicyParams,
    tasks: &[TaskEpisodes],
    repertoire: &SkillRepertoire,
    profiles: &[CovarianceProfile; N_SUBTASKS],
    cfg: &MetaConfig,
    opt: &mut OptState,
) -> Result<MetaMetrics> {
    let (meta_loss, grad, skipped) = meta_gradient(policy, tasks, repertoire, profiles, cfg)?;
    let mut pre_loss = 0.0;
    for task in tasks {
        pre_loss +=
            mean_loss_value(policy, &task.val, repertoire, profiles, cfg, GoalMode::LearnedZ0)?;
    }
    pre_loss /= tasks.len() as f64;
    let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    let mut flat = policy.flatten();
    opt.apply(&mut flat, &grad)?;
    policy.assign_flat(&flat)?;
    Ok(MetaMetrics { meta_loss, pre_loss, grad_norm, skipped })
}

/// One row of the training log.
#[derive(Debug, Clone, Copy)]
pub struct TrainRow {
    pub step: usize,
    pub meta_loss: f64,
    pub val_loss: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
    pub skipped: usize,
}

/// Full meta-training driver: per step, draw a task batch, partition each
/// task's demos 50/50, and take one outer step. Task pools need at least
/// two demos each.
pub fn meta_train(
    policy: &mut PolicyParams,
    task_pools: &[Vec<Demonstration>],
    repertoire: &SkillRepertoire,
    profiles: &[CovarianceProfile; N_SUBTASKS],
    cfg: &MetaConfig,
    steps: usize,
) -> Result<Vec<TrainRow>> {
    cfg.validate()?;
    if task_pools.is_empty() {
        return Err(Error::domain("meta train: no tasks"));
    }
    if let Some(short) = task_pools.iter().position(|p| p.len() < 2) {
        return Err(Error::domain(format!(
            "meta train: task {short} has {} demos, need at least 2 to partition",
            task_pools[short].len()
        )));
    }
    let mut rows = Vec::with_capacity(steps);
    let mut opt = OptState::new(cfg.outer_lr, policy.segments());
    for step in 0..steps {
        let started = std::time::Instant::now();
        let mut rng = rng_stream(cfg.seed, &[0x6d65_7461, step as u64]);

        let chosen: Vec<usize> = if cfg.meta_batch <= task_pools.len() {
            let mut idx: Vec<usize> = (0..task_pools.len()).collect();
            idx.shuffle(&mut rng);
            idx.truncate(cfg.meta_batch);
            idx
        } else {
            (0..cfg.meta_batch).map(|_| rng.random_range(0..task_pools.len())).collect()
        };

        let mut tasks = Vec::with_capacity(chosen.len());
        for &t in &chosen {
            let pool = &task_pools[t];
            let mut order: Vec<usize> = (0..pool.len()).collect();
            order.shuffle(&mut rng);
            let n_train = pool.len() / 2;
            let train = order[..n_train].iter().map(|&i| &pool[i]).collect();
            let val = order[n_train..].iter().map(|&i| &pool[i]).collect();
            tasks.push(TaskEpisodes { train, val });
        }

        let metrics = meta_step(policy, &tasks, repertoire, profiles, cfg, &mut opt)?;
        rows.push(TrainRow {
            step,
            meta_loss: metrics.meta_loss,
            val_loss: metrics.pre_loss,
            grad_norm: metrics.grad_norm,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            skipped: metrics.skipped,
        });
    }
    Ok(rows)
}
