//! Dynamical movement primitives (DMPs).
//!
//! A primitive stores a goal-directed second-order system plus a learned
//! forcing term expanded in Gaussian basis functions of an exponentially
//! decaying phase variable. Fitting recovers the forcing weights from one
//! demonstration by ridge regression; rollouts generalize the motion to new
//! start, goal, and duration.
//!
//! All integration happens in normalized time `u = t / tau` with phase
//! `s = exp(-alpha * u)`, so rescaling the duration leaves the path through
//! space identical sample for sample. Velocities are reported in real time
//! (divided by `tau`).

use crate::error::{Error, Result};
use crate::math::vec2;
use serde::{Deserialize, Serialize};

/// The three skills of the manipulation repertoire, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SkillId {
    Reach,
    Place,
    Push,
}

impl SkillId {
    pub const ALL: [SkillId; 3] = [SkillId::Reach, SkillId::Place, SkillId::Push];

    pub fn index(self) -> usize {
        match self {
            SkillId::Reach => 0,
            SkillId::Place => 1,
            SkillId::Push => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SkillId::Reach => "reach",
            SkillId::Place => "place",
            SkillId::Push => "push",
        }
    }
}

impl std::fmt::Display for SkillId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Shared dynamics constants for primitives.
///
/// `kp` and `kv = 2 sqrt(kp)` form a critically damped spring-damper. With
/// `kp = 156.25` the unforced system settles to within `4e-5` of the goal
/// span by `t = tau`, which leaves headroom under the crate-wide goal
/// tolerance of 1e-3 m.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DmpDynamics {
    /// Phase decay rate; default `ln(100)` so `s(tau) = 0.01`.
    pub alpha: f64,
    /// Proportional gain (per dimension, isotropic).
    pub kp: f64,
    /// Damping gain, critically damped when `2 sqrt(kp)`.
    pub kv: f64,
    /// Euler substeps between consecutive output samples.
    pub substeps: usize,
    /// State magnitude beyond which integration aborts as unstable.
    pub instability_limit: f64,
}

impl Default for DmpDynamics {
    fn default() -> Self {
        let kp = 156.25;
        DmpDynamics {
            alpha: 100.0f64.ln(),
            kp,
            kv: 2.0 * kp.sqrt(),
            substeps: 10,
            instability_limit: 1e6,
        }
    }
}

/// One learned movement primitive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillPrimitive {
    pub skill: SkillId,
    pub dims: usize,
    /// Forcing weights, `dims` rows of `n_basis` columns.
    pub weights: Vec<Vec<f64>>,
    /// Basis centers in phase space, strictly decreasing from 1.
    pub centers: Vec<f64>,
    /// Basis widths (Gaussian sigma per center).
    pub widths: Vec<f64>,
    pub dynamics: DmpDynamics,
    /// Duration of the demonstration the primitive was fitted from.
    pub fitted_tau: f64,
}

/// Start, goal, and duration for one rollout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskParams {
    pub start: [f64; 2],
    pub goal: [f64; 2],
    pub tau: f64,
}

/// Duration bounds accepted everywhere in the crate.
pub const TAU_MIN: f64 = 0.2;
pub const TAU_MAX: f64 = 10.0;

impl TaskParams {
    pub fn validate(&self) -> Result<()> {
        if !vec2::is_finite(self.start) || !vec2::is_finite(self.goal) || !self.tau.is_finite() {
            return Err(Error::NonFinite("task parameters".into()));
        }
        if self.tau < TAU_MIN || self.tau > TAU_MAX {
            return Err(Error::domain(format!(
                "tau {} outside [{TAU_MIN}, {TAU_MAX}]",
                self.tau
            )));
        }
        Ok(())
    }
}

/// Uniformly sampled trajectory in real time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// Seconds between samples.
    pub dt: f64,
    /// Sample positions, one `[x, y]` per step.
    pub positions: Vec<[f64; 2]>,
    /// Sample velocities in m/s.
    pub velocities: Vec<[f64; 2]>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.dt * (self.positions.len().saturating_sub(1)) as f64
    }

    /// Position at time `t` by linear interpolation, clamped to the ends.
    pub fn position_at(&self, t: f64) -> [f64; 2] {
        interp(&self.positions, self.dt, t)
    }

    /// Slope of the interpolant at `t` (piecewise constant, lower segment).
    pub fn slope_at(&self, t: f64) -> [f64; 2] {
        let n = self.positions.len();
        if n < 2 {
            return [0.0, 0.0];
        }
        let x = (t / self.dt).clamp(0.0, (n - 1) as f64);
        let k = (x.floor() as usize).min(n - 2);
        let a = self.positions[k];
        let b = self.positions[k + 1];
        [(b[0] - a[0]) / self.dt, (b[1] - a[1]) / self.dt]
    }
}

fn interp(points: &[[f64; 2]], dt: f64, t: f64) -> [f64; 2] {
    let n = points.len();
    if n == 1 {
        return points[0];
    }
    let x = (t / dt).clamp(0.0, (n - 1) as f64);
    let k = (x.floor() as usize).min(n - 2);
    let frac = x - k as f64;
    let a = points[k];
    let b = points[k + 1];
    [a[0] + frac * (b[0] - a[0]), a[1] + frac * (b[1] - a[1])]
}

/// Trajectory plus per-sample derivatives w.r.t. the task parameters.
#[derive(Debug, Clone)]
pub struct Sensitivity {
    pub trajectory: Trajectory,
    /// d position / d start, per sample per dimension (diagonal coupling).
    pub d_pos_d_start: Vec<[f64; 2]>,
    /// d position / d goal, per sample per dimension.
    pub d_pos_d_goal: Vec<[f64; 2]>,
    /// d position / d tau, per sample per dimension.
    pub d_pos_d_tau: Vec<[f64; 2]>,
}

/// Phase value at normalized time `u`.
pub fn phase(alpha: f64, u: f64) -> f64 {
    (-alpha * u).exp()
}

/// Basis centers and widths for `n_basis` Gaussians.
///
/// Centers sit at the phase values of equally spaced normalized times, so
/// they cluster where the phase moves fast. Adjacent Gaussians cross at
/// activation 0.5.
pub fn basis_layout(n_basis: usize, alpha: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if n_basis == 0 {
        return Err(Error::Config("basis: need at least one function".into()));
    }
    if !(alpha > 0.0) {
        return Err(Error::Config(format!("basis: alpha {alpha} not positive")));
    }
    if n_basis == 1 {
        return Ok((vec![1.0], vec![0.5]));
    }
    let centers: Vec<f64> = (0..n_basis)
        .map(|h| phase(alpha, h as f64 / (n_basis - 1) as f64))
        .collect();
    // Half width at half maximum equals half the gap to the neighbour, so
    // adjacent Gaussians cross at activation 0.5.
    let sigma_per_gap = 1.0 / (2.0 * (2.0 * 2.0f64.ln()).sqrt());
    let mut widths = Vec::with_capacity(n_basis);
    for h in 0..n_basis {
        let gap = if h + 1 < n_basis {
            centers[h] - centers[h + 1]
        } else {
            centers[n_basis - 2] - centers[n_basis - 1]
        };
        widths.push(gap * sigma_per_gap);
    }
    Ok((centers, widths))
}

/// Normalized Gaussian basis activations at phase `s`.
///
/// Sums to one. If every Gaussian underflows, the nearest center gets full
/// activation so the features stay well defined over all of `s in (0, 1]`.
pub fn basis_features(centers: &[f64], widths: &[f64], s: f64) -> Vec<f64> {
    let n = centers.len();
    let mut feats = vec![0.0; n];
    let mut total = 0.0;
    for h in 0..n {
        let z = (s - centers[h]) / widths[h];
        let a = (-0.5 * z * z).exp();
        feats[h] = a;
        total += a;
    }
    if total < 1e-290 {
        let nearest = (0..n)
            .min_by(|&a, &b| {
                let da = (s - centers[a]).abs();
                let db = (s - centers[b]).abs();
                da.partial_cmp(&db).expect("finite distances")
            })
            .expect("at least one basis function");
        feats.iter_mut().for_each(|f| *f = 0.0);
        feats[nearest] = 1.0;
        return feats;
    }
    for f in &mut feats {
        *f /= total;
    }
    feats
}

impl SkillPrimitive {
    pub fn n_basis(&self) -> usize {
        self.centers.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims == 0 || self.weights.len() != self.dims {
            return Err(Error::Config("primitive: weight rows must match dims".into()));
        }
        let h = self.centers.len();
        if h == 0 || self.widths.len() != h || self.weights.iter().any(|w| w.len() != h) {
            return Err(Error::Config("primitive: basis layout mismatch".into()));
        }
        if !self.centers.windows(2).all(|w| w[0] > w[1]) {
            return Err(Error::Config("primitive: centers must strictly decrease".into()));
        }
        if self.widths.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::Config("primitive: widths must be positive".into()));
        }
        Ok(())
    }

    /// Forcing vector at phase `s`: one weighted basis combination per dim.
    pub fn forcing(&self, s: f64) -> Vec<f64> {
        let feats = basis_features(&self.centers, &self.widths, s);
        self.weights
            .iter()
            .map(|w| w.iter().zip(&feats).map(|(wi, fi)| wi * fi).sum())
            .collect()
    }
}

/// Regression target per dimension and sample:
/// `F = xi'' - kp (g - xi) + kv xi'` in normalized time, with the
/// acceleration taken by central differences of the sampled velocities.
fn forcing_target(traj: &Trajectory, goal: [f64; 2], tau: f64, dynamics: &DmpDynamics, d: usize) -> Vec<f64> {
    let t_len = traj.len();
    let mut target = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let xi = traj.positions[t][d];
        let xi_u = traj.velocities[t][d] * tau;
        let acc = if t == 0 {
            (traj.velocities[1][d] - traj.velocities[0][d]) / traj.dt
        } else if t == t_len - 1 {
            (traj.velocities[t][d] - traj.velocities[t - 1][d]) / traj.dt
        } else {
            (traj.velocities[t + 1][d] - traj.velocities[t - 1][d]) / (2.0 * traj.dt)
        };
        let xi_uu = acc * tau * tau;
        target.push(xi_uu - dynamics.kp * (goal[d] - xi) + dynamics.kv * xi_u);
    }
    target
}

/// Fit forcing weights from one demonstration.
///
/// The demonstration must be uniformly sampled with at least `n_basis`
/// samples and move somewhere; start and goal are its first and last points.
/// Regression target per dimension: `F = xi'' - kp (g - xi) + kv xi'` in
/// normalized time, modelled as `s (g - xi0) w^T psi(s)` with ridge
/// regularization. A dimension with zero displacement gets zero weights and
/// rolls out constant.
///
/// After the direct regression, up to three refinement passes re-run the
/// same regression on the demo-minus-rollout residual. This cancels the
/// finite-difference bias of the acceleration estimate, which otherwise
/// leaves a relative goal gap around 1e-3 that multiplies up when the
/// primitive is rescaled to a larger displacement.
pub fn fit_forcing_weights(
    skill: SkillId,
    demo: &Trajectory,
    n_basis: usize,
    ridge: f64,
    dynamics: DmpDynamics,
) -> Result<SkillPrimitive> {
    let t_len = demo.len();
    if t_len < n_basis.max(4) {
        return Err(Error::Fit(format!(
            "fit: {t_len} samples, need at least {}",
            n_basis.max(4)
        )));
    }
    if demo.velocities.len() != t_len {
        return Err(Error::Fit("fit: velocity count differs from positions".into()));
    }
    if !(demo.dt > 0.0) {
        return Err(Error::Fit(format!("fit: sample period {} not positive", demo.dt)));
    }
    if demo.positions.iter().any(|p| !vec2::is_finite(*p))
        || demo.velocities.iter().any(|v| !vec2::is_finite(*v))
    {
        return Err(Error::Fit("fit: non-finite demonstration".into()));
    }
    let tau = demo.duration();
    if tau < TAU_MIN || tau > TAU_MAX {
        return Err(Error::Fit(format!("fit: duration {tau:.4} outside [{TAU_MIN}, {TAU_MAX}]")));
    }
    let start = demo.positions[0];
    let goal = demo.positions[t_len - 1];
    let moved = (0..2).any(|d| (goal[d] - start[d]).abs() > 1e-9);
    let spread = demo.positions.iter().any(|p| vec2::dist(*p, start) > 1e-9);
    if !moved && !spread {
        return Err(Error::Fit("fit: demonstration never leaves its start point".into()));
    }

    let (centers, widths) = basis_layout(n_basis, dynamics.alpha)?;

    // Design matrix per dimension is span * B with shared B, so factor the
    // Gram of B once and rescale right-hand sides.
    let b = crate::math::Mat::from_fn(t_len, n_basis, |t, h| {
        let u = t as f64 / (t_len - 1) as f64;
        let s = phase(dynamics.alpha, u);
        basis_features(&centers, &widths, s)[h] * s * late_window(u)
    });

    let mut weights = vec![vec![0.0; n_basis]; 2];
    let active: Vec<usize> = (0..2)
        .filter(|&d| (goal[d] - start[d]).abs() >= 1e-12)
        .collect();

    // `sample_w`: optional per-sample weights for the residual passes.
    let solve_dim = |target: &[f64], span: f64, sample_w: Option<&[f64]>| -> Result<Vec<f64>> {
        let design = match sample_w {
            None => b.clone(),
            Some(ws) => crate::math::Mat::from_fn(t_len, n_basis, |t, h| b.get(t, h) * ws[t]),
        };
        let mut gram = design.gram();
        for v in gram.data_mut() {
            *v *= span * span;
        }
        gram.add_diag(ridge);
        let scaled: Vec<f64> = match sample_w {
            None => target.to_vec(),
            Some(ws) => target.iter().zip(ws).map(|(t, w)| t * w).collect(),
        };
        let mut rhs = design.tr_matvec(&scaled)?;
        for v in &mut rhs {
            *v *= span;
        }
        let chol = crate::math::Cholesky::new(&gram)
            .map_err(|e| Error::Fit(format!("fit: normal equations not solvable ({e})")))?;
        let w = chol.solve(&rhs)?;
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Fit("fit: non-finite weights".into()));
        }
        Ok(w)
    };

    let demo_targets: Vec<Vec<f64>> = (0..2)
        .map(|d| forcing_target(demo, goal, tau, &dynamics, d))
        .collect();
    for &d in &active {
        weights[d] = solve_dim(&demo_targets[d], goal[d] - start[d], None)?;
    }

    let mut prim = SkillPrimitive {
        skill,
        dims: 2,
        weights,
        centers,
        widths,
        dynamics,
        fitted_tau: tau,
    };
    prim.validate()?;

    // Residual refinement: regress the difference between the demo target
    // and the rollout's own target, in the same basis, and correct. Samples
    // are weighted by 1/s so the goal approach converges, not just the bulk
    // of the path; the end state is what survives rescaling to new task
    // parameters.
    let tail_weights: Vec<f64> = (0..t_len)
        .map(|t| {
            let u = t as f64 / (t_len - 1) as f64;
            1.0 / phase(dynamics.alpha, u).sqrt()
        })
        .collect();
    let tp = TaskParams { start, goal, tau };
    let score_of = |rolled: &Trajectory| -> f64 {
        let n = rolled.len().min(t_len);
        let mut sq = 0.0;
        for i in 0..n {
            let dx = rolled.positions[i][0] - demo.positions[i][0];
            let dy = rolled.positions[i][1] - demo.positions[i][1];
            sq += dx * dx + dy * dy;
        }
        let rmse = (sq / n as f64).sqrt();
        let end = vec2::dist(rolled.positions[n - 1], demo.positions[t_len - 1]);
        rmse + 10.0 * end
    };
    let mut best_score = match rollout(&prim, &tp, demo.dt) {
        Ok(r) => score_of(&r),
        Err(_) => f64::INFINITY,
    };
    'passes: for pass in 0..12 {
        if best_score < 1e-9 {
            break;
        }
        let rolled = match rollout(&prim, &tp, demo.dt) {
            Ok(r) => r,
            Err(_) => break,
        };
        // Alternate plain and tail-weighted passes so both the bulk of the
        // path and the goal approach converge.
        let sample_w = if pass % 2 == 0 { None } else { Some(tail_weights.as_slice()) };
        let mut deltas = vec![vec![0.0; n_basis]; 2];
        for &d in &active {
            let roll_target = forcing_target(&rolled, goal, tau, &prim.dynamics, d);
            let residual: Vec<f64> = demo_targets[d]
                .iter()
                .zip(&roll_target)
                .map(|(a, b)| a - b)
                .collect();
            deltas[d] = solve_dim(&residual, goal[d] - start[d], sample_w)?;
        }
        // Backtracking keeps the iteration a monotone descent: wiggly paths
        // can make the full Gauss-Newton-style step overshoot.
        let mut step = 1.0;
        for _ in 0..5 {
            let mut cand = prim.clone();
            for &d in &active {
                for (w, dw) in cand.weights[d].iter_mut().zip(&deltas[d]) {
                    *w += step * dw;
                }
            }
            if let Ok(r) = rollout(&cand, &tp, demo.dt) {
                let sc = score_of(&r);
                if sc < best_score {
                    best_score = sc;
                    prim = cand;
                    continue 'passes;
                }
            }
            step *= 0.5;
        }
        break;
    }

    // End-state pinning. The Euler recursion is affine in the weights, so a
    // finite difference of probe rollouts gives each weight's exact influence
    // on the final state. The minimum-norm weight delta that lands the final
    // (position, velocity) exactly on the demonstration's removes the
    // residual end gap that regression on forcing targets cannot, because a
    // late forcing error has almost no leverage once the phase has decayed.
    // Goal convergence at rescaled task parameters follows from the same
    // affine structure: the u-space path is duration-free and the forcing
    // scales with the commanded displacement.
    let grid_end = |prim: &SkillPrimitive| -> Result<[DimState; 2]> {
        let mut st = [
            DimState { y: start[0], p: 0.0 },
            DimState { y: start[1], p: 0.0 },
        ];
        let span = [goal[0] - start[0], goal[1] - start[1]];
        let n = (t_len - 1) as f64;
        for i in 0..t_len - 1 {
            step_span(prim, goal, span, &mut st, i as f64 / n, (i + 1) as f64 / n)?;
        }
        Ok(st)
    };
    for _ in 0..2 {
        let base = grid_end(&prim)?;
        let gap_pos: Vec<f64> = (0..2).map(|d| goal[d] - base[d].y).collect();
        // Velocity pins to the demonstration's own end velocity (in u
        // units). For the at-rest demonstrations this library is built
        // around that value is zero, making (g, 0) the exact post-duration
        // fixed point; for refits of arbitrary rollouts it keeps the pin
        // from fighting the motion the weights actually encode.
        let gap_vel: Vec<f64> =
            (0..2).map(|d| demo.velocities[t_len - 1][d] * tau - base[d].p).collect();
        if active
            .iter()
            .all(|&d| gap_pos[d].abs() < 1e-10 && gap_vel[d].abs() < 1e-10)
        {
            break;
        }
        let mut beta_pos = vec![vec![0.0; n_basis]; 2];
        let mut beta_vel = vec![vec![0.0; n_basis]; 2];
        for h in 0..n_basis {
            let mut probe = prim.clone();
            for &d in &active {
                probe.weights[d][h] += 1.0;
            }
            let end = grid_end(&probe)?;
            for &d in &active {
                beta_pos[d][h] = end[d].y - base[d].y;
                beta_vel[d][h] = end[d].p - base[d].p;
            }
        }
        for &d in &active {
            let bp = &beta_pos[d];
            let bv = &beta_vel[d];
            let pp: f64 = bp.iter().map(|x| x * x).sum();
            if pp <= 0.0 {
                continue;
            }
            // Exact minimum-norm position pin.
            let c_pos = gap_pos[d] / pp;
            // Velocity pin restricted to the orthogonal complement of the
            // position direction, so it cannot disturb the position and its
            // amplification stays bounded. The two directions can be nearly
            // parallel (the end influence of every basis flows through the
            // same late dynamics); when they are, skip the velocity pin
            // rather than invert a near-singular 2x2 system.
            let pv: f64 = bp.iter().zip(bv).map(|(a, b)| a * b).sum();
            let vv: f64 = bv.iter().map(|x| x * x).sum();
            let orth: Vec<f64> = bv.iter().zip(bp).map(|(v, p)| v - (pv / pp) * p).collect();
            let oo: f64 = orth.iter().map(|x| x * x).sum();
            let residual_vel = gap_vel[d] - pv * c_pos;
            // The velocity pin is a refinement, not a contract: apply it
            // only when the gap is worth closing and the ill-conditioned
            // direction stays within a small weight budget. A partial pin
            // would distort the path without closing the gap.
            let orth_max = orth.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            // An end-velocity gap only harms through drift over the partial
            // sample past the nominal duration, bounded by 0.03 * |gap|
            // (max of du * exp(-w du) over du <= dt / tau_min). Pin only
            // when that drift threatens the goal tolerance and the fix fits
            // the weight budget; a partial pin would distort the path
            // without closing the gap.
            let mut c_vel = 0.0;
            if oo > 1e-6 * vv && 0.03 * residual_vel.abs() > 1e-4 {
                let full = residual_vel / oo;
                if full.abs() * orth_max <= 5.0 {
                    c_vel = full;
                }
            }
            for h in 0..n_basis {
                prim.weights[d][h] += c_pos * bp[h] + c_vel * orth[h];
            }
        }
    }
    if prim.weights.iter().flatten().any(|w| !w.is_finite()) {
        return Err(Error::Fit("fit: end-state correction produced non-finite weights".into()));
    }
    Ok(prim)
}

/// Integrator state for one dimension in normalized time.
#[derive(Clone, Copy)]
struct DimState {
    y: f64,
    /// dy/du
    p: f64,
}

/// Start of the forcing fade-out window.
const LATE_WINDOW_START: f64 = 0.9;

/// Smoothstep window taking the forcing to exactly zero at the nominal
/// duration. The normalized basis extrapolates to a constant as s -> 0, so
/// without the window the tail forcing keeps pushing the state off the goal
/// on the overshoot samples past u = 1, and a hard cutoff there would put a
/// kink into the duration dependence that breaks finite-difference checks.
/// C1 at both ends; weight fitting includes the same factor in its design
/// matrix, so windowed dynamics and regression model agree.
pub fn late_window(u: f64) -> f64 {
    if u <= LATE_WINDOW_START {
        1.0
    } else if u >= 1.0 {
        0.0
    } else {
        let x = (1.0 - u) / (1.0 - LATE_WINDOW_START);
        x * x * (3.0 - 2.0 * x)
    }
}

/// Windowed phase-scaled forcing `w(u) * s * f(s)` per dimension. Zero once
/// the nominal duration has elapsed: past it the system is a pure critically
/// damped goal attractor, so (g, 0) is an exact fixed point and overtime
/// never drifts off a converged end state.
fn forcing_drive(prim: &SkillPrimitive, u: f64) -> [f64; 2] {
    let w = late_window(u);
    if w == 0.0 {
        return [0.0, 0.0];
    }
    let s = phase(prim.dynamics.alpha, u);
    let f = prim.forcing(s);
    [w * s * f[0], w * s * f[1]]
}

/// Output sample count covering a duration: ceil(tau / dt), except that
/// ratios within one part in 1e6 of an integer snap to it. Without the snap,
/// tau = 2 at 30 Hz computes 60.000000000000014 and grows a spurious extra
/// sample, which would skew the inferred duration of fitted rollouts.
fn n_outer_steps(tau: f64, dt: f64) -> usize {
    let r = tau / dt;
    let snapped = r.round();
    let n = if (r - snapped).abs() < 1e-6 * r.max(1.0) { snapped } else { r.ceil() };
    (n as usize).max(1)
}

/// Largest u-space Euler step the integrator will take. Substep counts are
/// raised above `substeps` whenever an outer step exceeds this, so accuracy
/// does not degrade at short durations (dt/tau grows as tau shrinks). The
/// rule depends only on the u-step width, which keeps joint (tau, dt)
/// rescaling bit-identical.
const MAX_U_STEP: f64 = 1.0 / 2400.0;

fn n_substeps(substeps: usize, du: f64) -> usize {
    let by_width = (du.abs() / MAX_U_STEP).ceil() as usize;
    substeps.max(1).max(by_width)
}

/// Advance all dimensions from `u0` to `u1` with `substeps` Euler steps.
///
/// `scale[d] = goal[d] - start[d]` multiplies the forcing. Shared by batch
/// rollouts and online execution so both produce identical arithmetic.
fn step_span(
    prim: &SkillPrimitive,
    goal: [f64; 2],
    scale: [f64; 2],
    state: &mut [DimState; 2],
    u0: f64,
    u1: f64,
) -> Result<()> {
    let n = n_substeps(prim.dynamics.substeps, u1 - u0);
    let h = (u1 - u0) / n as f64;
    for k in 0..n {
        let u = u0 + k as f64 * h;
        let sf = forcing_drive(prim, u);
        for d in 0..2 {
            let acc = prim.dynamics.kp * (goal[d] - state[d].y) - prim.dynamics.kv * state[d].p
                + scale[d] * sf[d];
            state[d].y += h * state[d].p;
            state[d].p += h * acc;
            if state[d].y.abs() > prim.dynamics.instability_limit
                || !state[d].y.is_finite()
                || !state[d].p.is_finite()
            {
                return Err(Error::Instability(format!(
                    "rollout diverged at u = {u:.4}, dim {d}"
                )));
            }
        }
    }
    Ok(())
}

/// Roll a primitive over task parameters, sampled every `dt` seconds.
///
/// Produces `ceil(tau / dt) + 1` samples; the final sample lands at or just
/// past `tau` and sits within the goal tolerance of `goal` for fitted
/// primitives.
pub fn rollout(prim: &SkillPrimitive, tp: &TaskParams, dt: f64) -> Result<Trajectory> {
    tp.validate()?;
    prim.validate()?;
    if !(dt > 0.0) || dt > tp.tau {
        return Err(Error::domain(format!("rollout: dt {dt} invalid for tau {}", tp.tau)));
    }
    let n_steps = n_outer_steps(tp.tau, dt);
    let scale = [tp.goal[0] - tp.start[0], tp.goal[1] - tp.start[1]];
    let mut state = [
        DimState { y: tp.start[0], p: 0.0 },
        DimState { y: tp.start[1], p: 0.0 },
    ];
    let mut positions = Vec::with_capacity(n_steps + 1);
    let mut velocities = Vec::with_capacity(n_steps + 1);
    positions.push(tp.start);
    velocities.push([0.0, 0.0]);
    for i in 0..n_steps {
        let u0 = i as f64 * dt / tp.tau;
        let u1 = (i + 1) as f64 * dt / tp.tau;
        step_span(prim, tp.goal, scale, &mut state, u0, u1).map_err(|e| e.with_dt(dt))?;
        positions.push([state[0].y, state[1].y]);
        velocities.push([state[0].p / tp.tau, state[1].p / tp.tau]);
    }
    Ok(Trajectory { dt, positions, velocities })
}

/// Linearized state for one dimension: derivative of (y, p) w.r.t. one input.
#[derive(Clone, Copy, Default)]
struct TangentState {
    dy: f64,
    dp: f64,
}

/// Rollout plus analytic start/goal sensitivities and a central-difference
/// tau sensitivity.
///
/// Start and goal derivatives propagate through the same Euler recursion as
/// the state, so they match finite differences of `rollout` to the accuracy
/// of the difference itself. The tau derivative holds the sample times fixed
/// (`t_i = i dt`) while perturbing the duration by `1e-4 * tau`.
pub fn rollout_with_sensitivities(
    prim: &SkillPrimitive,
    tp: &TaskParams,
    dt: f64,
) -> Result<Sensitivity> {
    tp.validate()?;
    prim.validate()?;
    if !(dt > 0.0) || dt > tp.tau {
        return Err(Error::domain(format!(
            "sensitivities: dt {dt} invalid for tau {}",
            tp.tau
        )));
    }
    let n_steps = n_outer_steps(tp.tau, dt);
    let scale = [tp.goal[0] - tp.start[0], tp.goal[1] - tp.start[1]];

    let mut state = [
        DimState { y: tp.start[0], p: 0.0 },
        DimState { y: tp.start[1], p: 0.0 },
    ];
    // Tangents w.r.t. start_d and goal_d of the same dimension; cross terms
    // vanish because the dynamics are diagonal.
    let mut t_start = [TangentState { dy: 1.0, dp: 0.0 }; 2];
    let mut t_goal = [TangentState::default(); 2];

    let mut positions = vec![tp.start];
    let mut velocities = vec![[0.0, 0.0]];
    let mut d_start = vec![[1.0, 1.0]];
    let mut d_goal = vec![[0.0, 0.0]];

    for i in 0..n_steps {
        let u0 = i as f64 * dt / tp.tau;
        let u1 = (i + 1) as f64 * dt / tp.tau;
        let n_sub = n_substeps(prim.dynamics.substeps, u1 - u0);
        let h = (u1 - u0) / n_sub as f64;
        for k in 0..n_sub {
            let u = u0 + k as f64 * h;
            let sf = forcing_drive(prim, u);
            for d in 0..2 {
                let acc = prim.dynamics.kp * (tp.goal[d] - state[d].y)
                    - prim.dynamics.kv * state[d].p
                    + scale[d] * sf[d];
                // d acc / d start_d = -kp * dy - s f   (scale shrinks by 1)
                let acc_s = -prim.dynamics.kp * t_start[d].dy - prim.dynamics.kv * t_start[d].dp
                    - sf[d];
                // d acc / d goal_d = kp (1 - dy) + s f (scale grows by 1)
                let acc_g = prim.dynamics.kp * (1.0 - t_goal[d].dy)
                    - prim.dynamics.kv * t_goal[d].dp
                    + sf[d];
                state[d].y += h * state[d].p;
                state[d].p += h * acc;
                t_start[d].dy += h * t_start[d].dp;
                t_start[d].dp += h * acc_s;
                t_goal[d].dy += h * t_goal[d].dp;
                t_goal[d].dp += h * acc_g;
                if !state[d].y.is_finite() || state[d].y.abs() > prim.dynamics.instability_limit {
                    return Err(Error::Instability(format!(
                        "sensitivity rollout diverged at u = {u:.4}, dim {d}"
                    )));
                }
            }
        }
        positions.push([state[0].y, state[1].y]);
        velocities.push([state[0].p / tp.tau, state[1].p / tp.tau]);
        d_start.push([t_start[0].dy, t_start[1].dy]);
        d_goal.push([t_goal[0].dy, t_goal[1].dy]);
    }

    // Tau sensitivity at fixed sample times by central difference. The
    // perturbed rollouts keep the same number of steps so samples align.
    let d_tau_step = 1e-4 * tp.tau;
    let lo = rollout_fixed_samples(prim, tp.start, tp.goal, tp.tau - d_tau_step, dt, n_steps)?;
    let hi = rollout_fixed_samples(prim, tp.start, tp.goal, tp.tau + d_tau_step, dt, n_steps)?;
    let d_tau: Vec<[f64; 2]> = lo
        .iter()
        .zip(&hi)
        .map(|(l, h)| {
            [
                (h[0] - l[0]) / (2.0 * d_tau_step),
                (h[1] - l[1]) / (2.0 * d_tau_step),
            ]
        })
        .collect();

    Ok(Sensitivity {
        trajectory: Trajectory { dt, positions, velocities },
        d_pos_d_start: d_start,
        d_pos_d_goal: d_goal,
        d_pos_d_tau: d_tau,
    })
}

/// Positions at `t_i = i dt` for `n_steps + 1` samples regardless of tau.
/// Rollout sampled at exactly `n_steps + 1` fixed times `t_i = i * dt`,
/// regardless of whether `n_steps * dt` overshoots or undershoots `tau`.
/// This is the evaluation the duration sensitivity differentiates: the
/// sample count must not jump with tau.
pub fn rollout_fixed_samples(
    prim: &SkillPrimitive,
    start: [f64; 2],
    goal: [f64; 2],
    tau: f64,
    dt: f64,
    n_steps: usize,
) -> Result<Vec<[f64; 2]>> {
    let scale = [goal[0] - start[0], goal[1] - start[1]];
    let mut state = [DimState { y: start[0], p: 0.0 }, DimState { y: start[1], p: 0.0 }];
    let mut positions = vec![start];
    for i in 0..n_steps {
        let u0 = i as f64 * dt / tau;
        let u1 = (i + 1) as f64 * dt / tau;
        step_span(prim, goal, scale, &mut state, u0, u1)?;
        positions.push([state[0].y, state[1].y]);
    }
    Ok(positions)
}

/// Rollout on a phase-uniform grid of `m` samples (`u = 0 .. 1`), with
/// analytic start/goal sensitivities.
///
/// In normalized time the path is independent of tau, which is what makes
/// the subtask loss differentiable in the predicted duration through the
/// reference times alone.
pub fn rollout_phase_grid(
    prim: &SkillPrimitive,
    start: [f64; 2],
    goal: [f64; 2],
    m: usize,
) -> Result<(Vec<[f64; 2]>, Vec<[f64; 2]>, Vec<[f64; 2]>)> {
    prim.validate()?;
    if m < 2 {
        return Err(Error::domain(format!("phase grid: {m} samples, need at least 2")));
    }
    let scale = [goal[0] - start[0], goal[1] - start[1]];
    let mut state = [DimState { y: start[0], p: 0.0 }, DimState { y: start[1], p: 0.0 }];
    let mut t_start = [TangentState { dy: 1.0, dp: 0.0 }; 2];
    let mut t_goal = [TangentState::default(); 2];
    let mut positions = vec![start];
    let mut d_start = vec![[1.0, 1.0]];
    let mut d_goal = vec![[0.0, 0.0]];
    for i in 0..m - 1 {
        let u0 = i as f64 / (m - 1) as f64;
        let u1 = (i + 1) as f64 / (m - 1) as f64;
        let n_sub = n_substeps(prim.dynamics.substeps, u1 - u0);
        let h = (u1 - u0) / n_sub as f64;
        for k in 0..n_sub {
            let u = u0 + k as f64 * h;
            let sf = forcing_drive(prim, u);
            for d in 0..2 {
                let acc = prim.dynamics.kp * (goal[d] - state[d].y) - prim.dynamics.kv * state[d].p
                    + scale[d] * sf[d];
                let acc_s = -prim.dynamics.kp * t_start[d].dy - prim.dynamics.kv * t_start[d].dp
                    - sf[d];
                let acc_g = prim.dynamics.kp * (1.0 - t_goal[d].dy)
                    - prim.dynamics.kv * t_goal[d].dp
                    + sf[d];
                state[d].y += h * state[d].p;
                state[d].p += h * acc;
                t_start[d].dy += h * t_start[d].dp;
                t_start[d].dp += h * acc_s;
                t_goal[d].dy += h * t_goal[d].dp;
                t_goal[d].dp += h * acc_g;
                if !state[d].y.is_finite() || state[d].y.abs() > prim.dynamics.instability_limit {
                    return Err(Error::Instability(format!(
                        "phase rollout diverged at u = {u:.4}, dim {d}"
                    )));
                }
            }
        }
        positions.push([state[0].y, state[1].y]);
        d_start.push([t_start[0].dy, t_start[1].dy]);
        d_goal.push([t_goal[0].dy, t_goal[1].dy]);
    }
    Ok((positions, d_start, d_goal))
}

/// Measured robot state fed back into online execution each tick.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeasuredState {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
}

/// Closed-loop connection to a robot or simulator.
///
/// `tick` receives the commanded position and velocity for the next control
/// instant and returns the measured state after moving.
pub trait RobotLink {
    fn tick(&mut self, commanded_pos: [f64; 2], commanded_vel: [f64; 2], dt: f64) -> MeasuredState;
}

/// A link that follows commands exactly; `execute_online` through it equals
/// `rollout` sample for sample.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityLink;

impl RobotLink for IdentityLink {
    fn tick(&mut self, commanded_pos: [f64; 2], commanded_vel: [f64; 2], _dt: f64) -> MeasuredState {
        MeasuredState { position: commanded_pos, velocity: commanded_vel }
    }
}

/// Result of closed-loop execution.
#[derive(Debug, Clone)]
pub struct OnlineRun {
    /// Measured positions per tick, starting with the initial state.
    pub trajectory: Trajectory,
    /// True when execution stopped inside the goal tolerance.
    pub reached_goal: bool,
}

/// Execute a primitive tick by tick against a live system.
///
/// Each tick integrates one control period from the measured state and
/// commands the result. Execution stops when the measured position comes
/// within `goal_tol` of the goal or at `overtime * tau`, whichever is first.
/// Non-finite measurements abort with an error.
pub fn execute_online(
    prim: &SkillPrimitive,
    tp: &TaskParams,
    link: &mut dyn RobotLink,
    dt: f64,
    goal_tol: f64,
    overtime: f64,
) -> Result<OnlineRun> {
    tp.validate()?;
    prim.validate()?;
    if !(dt > 0.0) || dt > tp.tau {
        return Err(Error::domain(format!("execute: dt {dt} invalid for tau {}", tp.tau)));
    }
    if !(overtime >= 1.0) {
        return Err(Error::domain(format!("execute: overtime factor {overtime} below 1")));
    }
    let scale = [tp.goal[0] - tp.start[0], tp.goal[1] - tp.start[1]];
    let max_ticks = n_outer_steps(overtime * tp.tau, dt);

    let mut measured = link.tick(tp.start, [0.0, 0.0], 0.0);
    if !vec2::is_finite(measured.position) || !vec2::is_finite(measured.velocity) {
        return Err(Error::NonFinite("measured state before execution".into()));
    }
    let mut positions = vec![measured.position];
    let mut velocities = vec![measured.velocity];
    let mut reached = vec2::dist(measured.position, tp.goal) <= goal_tol;

    for i in 0..max_ticks {
        if reached {
            break;
        }
        let mut state = [
            DimState { y: measured.position[0], p: measured.velocity[0] * tp.tau },
            DimState { y: measured.position[1], p: measured.velocity[1] * tp.tau },
        ];
        let u0 = i as f64 * dt / tp.tau;
        let u1 = (i + 1) as f64 * dt / tp.tau;
        step_span(prim, tp.goal, scale, &mut state, u0, u1).map_err(|e| e.with_dt(dt))?;
        let cmd_pos = [state[0].y, state[1].y];
        let cmd_vel = [state[0].p / tp.tau, state[1].p / tp.tau];
        measured = link.tick(cmd_pos, cmd_vel, dt);
        if !vec2::is_finite(measured.position) || !vec2::is_finite(measured.velocity) {
            return Err(Error::NonFinite(format!("measured state at tick {}", i + 1)));
        }
        positions.push(measured.position);
        velocities.push(measured.velocity);
        reached = vec2::dist(measured.position, tp.goal) <= goal_tol;
    }

    Ok(OnlineRun {
        trajectory: Trajectory { dt, positions, velocities },
        reached_goal: reached,
    })
}
