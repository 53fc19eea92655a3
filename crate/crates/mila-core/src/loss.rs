//! Covariance-weighted trajectory loss.
//!
//! Each subtask's primitive is rolled on a phase-uniform grid (a path that
//! does not depend on the predicted duration) and compared against the
//! demonstration linearly interpolated at `t_c + u_m * tau_c`, where `t_c`
//! accumulates the PREDICTED durations of earlier subtasks. Residuals are
//! weighted by the inverse covariance profile at the same phase. Durations
//! therefore receive gradient exclusively through the reference times; the
//! discrete frame indices used by the policy forward pass are not
//! differentiated.

use crate::dmp::{rollout_phase_grid, SkillPrimitive, TaskParams, Trajectory};
use crate::error::{Error, Result};
use crate::gmm::CovarianceProfile;
use crate::policy::{GoalMode, PolicyGrads, PolicyParams, TaskParamGrad, N_SUBTASKS};
use crate::repertoire::SkillRepertoire;
use crate::sim::Demonstration;

/// One episode's loss value, with the unweighted quadratic term of every
/// subtask. `total` is the gamma-weighted sum of the terms divided by the
/// demonstration's sample count.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLoss {
    pub total: f64,
    pub per_subtask: Vec<f64>,
    /// True when a reference time ran past the demonstration's end (the
    /// interpolation then holds the last sample).
    pub truncated: bool,
}

/// Quadratic trajectory loss of a chain of subtasks against one reference
/// trajectory, with gradients w.r.t. every subtask's task parameters.
///
/// This is the policy-free core shared by the full covariance loss and the
/// per-subtask baselines (which pass a single-element chain).
pub fn episode_quadratic_loss(
    params: &[TaskParams],
    prims: &[&SkillPrimitive],
    profiles: &[&CovarianceProfile],
    gamma: &[f64],
    m_samples: usize,
    reference: &Trajectory,
) -> Result<(EpisodeLoss, Vec<TaskParamGrad>)> {
    let n_sub = params.len();
    if n_sub == 0 || prims.len() != n_sub || profiles.len() != n_sub || gamma.len() != n_sub {
        return Err(Error::dim("loss: subtask chain lengths disagree"));
    }
    if m_samples < 2 {
        return Err(Error::domain(format!("loss: {m_samples} phase samples")));
    }
    if reference.len() < 2 {
        return Err(Error::domain("loss: reference shorter than 2 samples"));
    }
    if gamma.iter().any(|&g| !(g > 0.0) || !g.is_finite()) {
        return Err(Error::domain("loss: subtask weights must be positive"));
    }

    let t_total = reference.len() as f64;
    let duration = reference.duration();
    let mut per_subtask = Vec::with_capacity(n_sub);
    let mut grads = vec![TaskParamGrad::default(); n_sub];
    let mut truncated = false;
    let mut t_c = 0.0;

    for c in 0..n_sub {
        params[c].validate()?;
        let (pos, d_start, d_goal) =
            rollout_phase_grid(prims[c], params[c].start, params[c].goal, m_samples)?;
        let coeff = 2.0 * gamma[c] / t_total;
        let mut term = 0.0;
        for m in 0..m_samples {
            let u = m as f64 / (m_samples - 1) as f64;
            let t_ref = t_c + u * params[c].tau;
            if t_ref > duration {
                truncated = true;
            }
            let reference_pos = reference.position_at(t_ref);
            let r = [pos[m][0] - reference_pos[0], pos[m][1] - reference_pos[1]];
            let inv = profiles[c].inverse_at(u);
            let w = [
                inv.get(0, 0) * r[0] + inv.get(0, 1) * r[1],
                inv.get(1, 0) * r[0] + inv.get(1, 1) * r[1],
            ];
            term += r[0] * w[0] + r[1] * w[1];

            for d in 0..2 {
                grads[c].d_start[d] += coeff * w[d] * d_start[m][d];
                grads[c].d_goal[d] += coeff * w[d] * d_goal[m][d];
            }
            // The reference moves with the durations; outside the recording
            // the interpolant is constant, so no gradient flows there.
            if t_ref > 0.0 && t_ref < duration {
                let slope = reference.slope_at(t_ref);
                let g_t = -coeff * (w[0] * slope[0] + w[1] * slope[1]);
                for g in grads.iter_mut().take(c) {
                    g.d_tau += g_t;
                }
                grads[c].d_tau += g_t * u;
            }
        }
        per_subtask.push(term);
        t_c += params[c].tau;
    }

    let total = per_subtask
        .iter()
        .zip(gamma)
        .map(|(term, g)| g * term)
        .sum::<f64>()
        / t_total;
    Ok((EpisodeLoss { total, per_subtask, truncated }, grads))
}

/// Covariance-weighted loss of one policy forward pass over a recorded
/// demonstration, with the gradient pushed all the way to the policy
/// parameters.
///
/// `profiles` is passed separately from the repertoire so ablations can
/// substitute identity weighting without touching the primitives.
pub fn covariance_loss(
    policy: &PolicyParams,
    demo: &Demonstration,
    repertoire: &SkillRepertoire,
    profiles: &[CovarianceProfile; N_SUBTASKS],
    gamma: [f64; N_SUBTASKS],
    m_samples: usize,
    goal_mode: GoalMode,
) -> Result<(EpisodeLoss, PolicyGrads)> {
    let tape = policy.predict_episode(&demo.frames, demo.traj.dt, goal_mode)?;
    let prims: Vec<&SkillPrimitive> = repertoire.skills.iter().collect();
    let profs: Vec<&CovarianceProfile> = profiles.iter().collect();
    let (mut loss, grad_vec) =
        episode_quadratic_loss(&tape.params, &prims, &profs, &gamma, m_samples, &demo.traj)?;
    loss.truncated |= tape.truncated;
    let d_params: [TaskParamGrad; N_SUBTASKS] =
        grad_vec.try_into().map_err(|_| Error::domain("loss: subtask count"))?;
    let grads = policy.backward_episode(&tape, &d_params)?;
    Ok((loss, grads))
}
