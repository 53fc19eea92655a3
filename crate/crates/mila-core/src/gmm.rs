//! Gaussian mixture fitting over joint (time, position) samples and the
//! time-conditioned covariance profiles used to weight imitation losses.
//!
//! Demonstrations of one skill are time-normalized to [0,1], pooled, and a
//! mixture is fit by EM. Conditioning the mixture on time gives a smooth
//! covariance function describing where the skill is naturally variable.

use crate::dmp::{SkillId, Trajectory};
use crate::math::{sym_eigen_2x2, Cholesky, Mat};
use crate::rng::{rng_stream, Rng};
use crate::{Error, Result};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Ridge added to every covariance update; keeps EM matrices SPD without
/// visibly biasing data whose variances sit many orders above it.
const EM_RIDGE: f64 = 1e-9;

/// Joint Gaussian mixture over rows of dimension `dim()`; in this crate the
/// rows are (t, x, y) with t normalized to [0,1].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GmmModel {
    /// Mixing weights, a simplex.
    pub priors: Vec<f64>,
    /// Component means, K x D.
    pub means: Vec<Vec<f64>>,
    /// Component covariances, K matrices of D x D.
    pub covariances: Vec<Mat>,
}

impl GmmModel {
    pub fn n_components(&self) -> usize {
        self.priors.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.n_components();
        let d = self.dim();
        if k == 0 || d == 0 {
            return Err(Error::domain("mixture: empty model"));
        }
        if self.means.len() != k || self.covariances.len() != k {
            return Err(Error::dim("mixture: component count mismatch"));
        }
        let total: f64 = self.priors.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.priors.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::domain(format!("mixture: priors sum to {total}")));
        }
        for (k_i, (m, c)) in self.means.iter().zip(&self.covariances).enumerate() {
            if m.len() != d || c.rows() != d || c.cols() != d {
                return Err(Error::dim(format!("mixture: component {k_i} shape")));
            }
            if m.iter().any(|v| !v.is_finite()) || !c.is_finite() {
                return Err(Error::NonFinite(format!("mixture component {k_i}")));
            }
            Cholesky::new(c)
                .map_err(|_| Error::domain(format!("mixture: component {k_i} not SPD")))?;
        }
        Ok(())
    }

    /// Log density of one sample under the mixture.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        let logs = self.component_log_joint(x)?;
        Ok(log_sum_exp(&logs))
    }

    /// Posterior component responsibilities for one sample.
    pub fn responsibilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        let logs = self.component_log_joint(x)?;
        let lse = log_sum_exp(&logs);
        Ok(logs.iter().map(|l| (l - lse).exp()).collect())
    }

    /// log(prior_k) + log N(x; mu_k, Sigma_k) per component.
    fn component_log_joint(&self, x: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        if x.len() != d {
            return Err(Error::dim(format!("mixture: sample dim {} expected {d}", x.len())));
        }
        let mut logs = Vec::with_capacity(self.n_components());
        for k in 0..self.n_components() {
            let chol = Cholesky::new(&self.covariances[k])?;
            let diff: Vec<f64> = x.iter().zip(&self.means[k]).map(|(a, b)| a - b).collect();
            let solved = chol.solve(&diff)?;
            let q: f64 = diff.iter().zip(&solved).map(|(a, b)| a * b).sum();
            let log_norm = -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + chol.log_det());
            logs.push(self.priors[k].max(1e-300).ln() + log_norm - 0.5 * q);
        }
        Ok(logs)
    }
}

fn log_sum_exp(logs: &[f64]) -> f64 {
    let m = logs.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if !m.is_finite() {
        return m;
    }
    m + logs.iter().map(|l| (l - m).exp()).sum::<f64>().ln()
}

/// Fit a mixture by EM, seeded deterministically.
pub fn fit_gmm_em(samples: &[Vec<f64>], k: usize, seed: u64) -> Result<GmmModel> {
    fit_gmm_em_traced(samples, k, seed).map(|(m, _)| m)
}

/// As `fit_gmm_em`, also returning the mean log-likelihood after each
/// iteration (non-decreasing; exposed so tests can hold EM to that).
pub fn fit_gmm_em_traced(samples: &[Vec<f64>], k: usize, seed: u64) -> Result<(GmmModel, Vec<f64>)> {
    let n = samples.len();
    if k == 0 {
        return Err(Error::domain("em: k = 0"));
    }
    let d = samples.first().map_or(0, Vec::len);
    if d == 0 {
        return Err(Error::domain("em: empty samples"));
    }
    if samples.iter().any(|s| s.len() != d) {
        return Err(Error::dim("em: ragged samples"));
    }
    if samples.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("em: sample".into()));
    }
    if n < k * (d + 1) {
        return Err(Error::Fit(format!("em: {n} samples for k={k}, dim {d}")));
    }

    let mut rng = rng_stream(seed, &[0x6d6d, k as u64]);
    let pooled = pooled_covariance(samples, d);
    let mut model = GmmModel {
        priors: vec![1.0 / k as f64; k],
        means: kmeanspp_centers(samples, k, &mut rng),
        covariances: vec![pooled.clone(); k],
    };

    let mut trace = Vec::new();
    let mut prev = f64::NEG_INFINITY;
    let mut reseeds = 0usize;
    for _ in 0..300 {
        // E-step: responsibilities and the mean log-likelihood. Mean, not
        // total, so convergence does not depend on duplicating the data.
        let mut resp = vec![vec![0.0; n]; k];
        let mut loglik = 0.0;
        for (i, s) in samples.iter().enumerate() {
            let logs = model.component_log_joint(s)?;
            let lse = log_sum_exp(&logs);
            loglik += lse;
            for (ki, l) in logs.iter().enumerate() {
                resp[ki][i] = (l - lse).exp();
            }
        }
        loglik /= n as f64;
        trace.push(loglik);

        // M-step with empty-component rescue: a starved component restarts
        // from the sample the current model explains worst.
        let mut starved = None;
        for (ki, r) in resp.iter().enumerate() {
            let mass: f64 = r.iter().sum();
            if mass < 1e-9 * n as f64 {
                starved = Some(ki);
                break;
            }
        }
        if let Some(ki) = starved {
            reseeds += 1;
            if reseeds > 3 {
                return Err(Error::Fit("em: component starved after 3 reseeds".into()));
            }
            let worst = (0..n)
                .max_by(|&a, &b| {
                    let la = model.log_density(&samples[a]).unwrap_or(f64::INFINITY);
                    let lb = model.log_density(&samples[b]).unwrap_or(f64::INFINITY);
                    la.partial_cmp(&lb).unwrap().reverse()
                })
                .unwrap();
            model.means[ki] = samples[worst].clone();
            model.covariances[ki] = pooled.clone();
            for p in &mut model.priors {
                *p = 1.0 / k as f64;
            }
            prev = f64::NEG_INFINITY;
            continue;
        }

        for ki in 0..k {
            let mass: f64 = resp[ki].iter().sum();
            model.priors[ki] = mass / n as f64;
            let mut mean = vec![0.0; d];
            for (i, s) in samples.iter().enumerate() {
                for (m, v) in mean.iter_mut().zip(s) {
                    *m += resp[ki][i] * v;
                }
            }
            for m in &mut mean {
                *m /= mass;
            }
            let mut cov = Mat::zeros(d, d);
            for (i, s) in samples.iter().enumerate() {
                let w = resp[ki][i];
                for a in 0..d {
                    let da = s[a] - mean[a];
                    for b in 0..d {
                        cov.add_at(a, b, w * da * (s[b] - mean[b]));
                    }
                }
            }
            for v in cov.data_mut() {
                *v /= mass;
            }
            cov.add_diag(EM_RIDGE);
            model.means[ki] = mean;
            model.covariances[ki] = cov;
        }

        if (loglik - prev).abs() < 1e-8 {
            break;
        }
        prev = loglik;
    }
    model.validate()?;
    Ok((model, trace))
}

fn pooled_covariance(samples: &[Vec<f64>], d: usize) -> Mat {
    let n = samples.len() as f64;
    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v / n;
        }
    }
    let mut cov = Mat::zeros(d, d);
    for s in samples {
        for a in 0..d {
            for b in 0..d {
                cov.add_at(a, b, (s[a] - mean[a]) * (s[b] - mean[b]) / n);
            }
        }
    }
    cov.add_diag(EM_RIDGE.max(1e-12));
    cov
}

/// k-means++ seeding over the deduplicated sample set. Deduplication makes
/// the chosen centers, and with them the whole fit, invariant under exact
/// duplication of the data: only the empirical distribution matters.
fn kmeanspp_centers(samples: &[Vec<f64>], k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut unique: BTreeMap<Vec<u64>, (Vec<f64>, f64)> = BTreeMap::new();
    for s in samples {
        let key: Vec<u64> = s.iter().map(|v| v.to_bits()).collect();
        unique.entry(key).or_insert_with(|| (s.clone(), 0.0)).1 += 1.0;
    }
    let points: Vec<(Vec<f64>, f64)> = unique.into_values().collect();

    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    let total: f64 = points.iter().map(|(_, c)| c).sum();
    let r = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut first = points.len() - 1;
    for (i, (_, c)) in points.iter().enumerate() {
        acc += c;
        if r < acc {
            first = i;
            break;
        }
    }
    centers.push(points[first].0.clone());

    let mut min_sq: Vec<f64> = points.iter().map(|(p, _)| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total_w: f64 = points.iter().zip(&min_sq).map(|((_, c), d)| c * d).sum();
        let next = if total_w > 0.0 {
            let r = rng.random::<f64>() * total_w;
            let mut acc = 0.0;
            let mut pick = points.len() - 1;
            for (i, ((_, c), dsq)) in points.iter().zip(&min_sq).enumerate() {
                acc += c * dsq;
                if r < acc {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            // All mass already covered (fewer distinct points than k):
            // reuse points round-robin; EM's ridge keeps them apart.
            centers.len() % points.len()
        };
        centers.push(points[next].0.clone());
        for (i, (p, _)) in points.iter().enumerate() {
            min_sq[i] = min_sq[i].min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }
    centers
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Condition the mixture on its first coordinate (normalized time), giving
/// the mean and covariance of the remaining coordinates.
///
/// Standard mixture-of-conditionals moments: responsibilities come from the
/// t marginals, the mean is the responsibility-weighted conditional mean,
/// and the covariance adds the spread between component means.
pub fn gmr_condition(model: &GmmModel, t: f64) -> Result<(Vec<f64>, Mat)> {
    model.validate()?;
    let d = model.dim();
    if d < 2 {
        return Err(Error::domain("gmr: model has no output coordinates"));
    }
    let o = d - 1;
    let t = t.clamp(0.0, 1.0);
    let k = model.n_components();

    // Responsibilities from the scalar t marginal of each component.
    let mut logs = Vec::with_capacity(k);
    for ki in 0..k {
        let var_tt = model.covariances[ki].get(0, 0);
        let dt = t - model.means[ki][0];
        logs.push(
            model.priors[ki].max(1e-300).ln()
                - 0.5 * ((2.0 * std::f64::consts::PI * var_tt).ln() + dt * dt / var_tt),
        );
    }
    let lse = log_sum_exp(&logs);
    let h: Vec<f64> = logs.iter().map(|l| (l - lse).exp()).collect();

    let mut mean = vec![0.0; o];
    let mut second = Mat::zeros(o, o);
    for ki in 0..k {
        let cov = &model.covariances[ki];
        let var_tt = cov.get(0, 0);
        let gain: Vec<f64> = (0..o).map(|a| cov.get(a + 1, 0) / var_tt).collect();
        let dt = t - model.means[ki][0];
        let cmean: Vec<f64> = (0..o).map(|a| model.means[ki][a + 1] + gain[a] * dt).collect();
        for a in 0..o {
            mean[a] += h[ki] * cmean[a];
            for b in 0..o {
                let ccov = cov.get(a + 1, b + 1) - gain[a] * cov.get(0, b + 1);
                second.add_at(a, b, h[ki] * (ccov + cmean[a] * cmean[b]));
            }
        }
    }
    let mut out = Mat::zeros(o, o);
    for a in 0..o {
        for b in 0..o {
            // Symmetrize: the two quadratic-form paths differ by roundoff.
            let v = 0.5 * (second.get(a, b) + second.get(b, a)) - mean[a] * mean[b];
            out.set(a, b, v);
        }
    }
    Ok((mean, out))
}

/// Time-indexed covariance of one skill on a fixed grid over [0, 1].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CovarianceProfile {
    pub skill: SkillId,
    /// Increasing grid of normalized times covering [0, 1].
    pub grid_times: Vec<f64>,
    /// One SPD 2x2 covariance per grid time, floored.
    pub sigmas: Vec<Mat>,
    /// Cached inverses, same order.
    pub inverses: Vec<Mat>,
    /// True when fewer than 2 demos forced an identity fallback.
    pub degenerate: bool,
}

impl CovarianceProfile {
    /// All-identity profile, used by ablations that disable covariance
    /// weighting.
    pub fn identity(skill: SkillId, grid_size: usize) -> Result<Self> {
        if grid_size < 2 {
            return Err(Error::domain("profile: grid_size < 2"));
        }
        let grid_times =
            (0..grid_size).map(|i| i as f64 / (grid_size - 1) as f64).collect();
        let eye = Mat::identity(2);
        Ok(CovarianceProfile {
            skill,
            grid_times,
            sigmas: vec![eye.clone(); grid_size],
            inverses: vec![eye; grid_size],
            degenerate: false,
        })
    }

    /// Index of the grid point nearest to normalized time `u`.
    pub fn grid_index(&self, u: f64) -> usize {
        let u = u.clamp(0.0, 1.0);
        let g = self.grid_times.len();
        ((u * (g - 1) as f64).round() as usize).min(g - 1)
    }

    pub fn sigma_at(&self, u: f64) -> &Mat {
        &self.sigmas[self.grid_index(u)]
    }

    pub fn inverse_at(&self, u: f64) -> &Mat {
        &self.inverses[self.grid_index(u)]
    }

    pub fn validate(&self, cov_floor: f64) -> Result<()> {
        let g = self.grid_times.len();
        if g < 2 || self.sigmas.len() != g || self.inverses.len() != g {
            return Err(Error::dim("profile: grid shape"));
        }
        if self.grid_times[0] != 0.0 || *self.grid_times.last().unwrap() != 1.0 {
            return Err(Error::domain("profile: grid must cover [0, 1]"));
        }
        if self.grid_times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::domain("profile: grid not increasing"));
        }
        for (s, inv) in self.sigmas.iter().zip(&self.inverses) {
            let (eigs, _) = sym_eigen_2x2(s.get(0, 0), s.get(0, 1), s.get(1, 1));
            if eigs[0] < cov_floor * (1.0 - 1e-9) {
                return Err(Error::domain(format!("profile: eigenvalue {} under floor", eigs[0])));
            }
            let prod = s.matmul(inv)?;
            for a in 0..2 {
                for b in 0..2 {
                    let want = if a == b { 1.0 } else { 0.0 };
                    if (prod.get(a, b) - want).abs() > 1e-8 {
                        return Err(Error::domain("profile: inverse mismatch"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Clamp the eigenvalues of a symmetric 2x2 up to `floor` and rebuild.
pub fn floor_spd_2x2(m: &Mat, floor: f64) -> Mat {
    let (eigs, vecs) = sym_eigen_2x2(m.get(0, 0), 0.5 * (m.get(0, 1) + m.get(1, 0)), m.get(1, 1));
    let l = [eigs[0].max(floor), eigs[1].max(floor)];
    let mut out = Mat::zeros(2, 2);
    for a in 0..2 {
        for b in 0..2 {
            let v = l[0] * vecs[a][0] * vecs[b][0] + l[1] * vecs[a][1] * vecs[b][1];
            out.set(a, b, v);
        }
    }
    out
}

/// Closed-form 2x2 inverse; the caller guarantees invertibility (floored
/// SPD matrices here).
pub fn inverse_2x2(m: &Mat) -> Mat {
    let (a, b, c, d) = (m.get(0, 0), m.get(0, 1), m.get(1, 0), m.get(1, 1));
    let det = a * d - b * c;
    let mut out = Mat::zeros(2, 2);
    out.set(0, 0, d / det);
    out.set(0, 1, -b / det);
    out.set(1, 0, -c / det);
    out.set(1, 1, a / det);
    out
}

/// Pool time-normalized demos, fit a mixture, and tabulate the conditional
/// covariance on a uniform grid, floored for invertibility.
///
/// With fewer than 2 demos there is no variability to model; the profile
/// falls back to identity covariances and says so in `degenerate`.
pub fn build_covariance_profile(
    skill: SkillId,
    demos: &[Trajectory],
    k: usize,
    grid_size: usize,
    cov_floor: f64,
    seed: u64,
) -> Result<CovarianceProfile> {
    if grid_size < 2 {
        return Err(Error::domain("profile: grid_size < 2"));
    }
    if !(cov_floor > 0.0) {
        return Err(Error::domain("profile: cov_floor must be positive"));
    }
    let grid_times: Vec<f64> =
        (0..grid_size).map(|i| i as f64 / (grid_size - 1) as f64).collect();

    if demos.len() < 2 {
        let eye = Mat::identity(2);
        return Ok(CovarianceProfile {
            skill,
            grid_times,
            sigmas: vec![eye.clone(); grid_size],
            inverses: vec![eye; grid_size],
            degenerate: true,
        });
    }

    let mut samples = Vec::new();
    for demo in demos {
        let len = demo.len();
        if len < 2 {
            return Err(Error::Fit("profile: demo with fewer than 2 samples".into()));
        }
        for (i, p) in demo.positions.iter().enumerate() {
            samples.push(vec![i as f64 / (len - 1) as f64, p[0], p[1]]);
        }
    }
    let model = fit_gmm_em(&samples, k, seed)?;

    let mut sigmas = Vec::with_capacity(grid_size);
    let mut inverses = Vec::with_capacity(grid_size);
    for &t in &grid_times {
        let (_, cov) = gmr_condition(&model, t)?;
        let floored = floor_spd_2x2(&cov, cov_floor);
        inverses.push(inverse_2x2(&floored));
        sigmas.push(floored);
    }
    let profile = CovarianceProfile { skill, grid_times, sigmas, inverses, degenerate: false };
    profile.validate(cov_floor)?;
    Ok(profile)
}
