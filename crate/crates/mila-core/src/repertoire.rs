//! The skill repertoire: the three fitted primitives plus their covariance
//! profiles, persisted together as one JSON document.
//!
//! Integrator settings (substep counts, instability guard) are crate
//! constants and are not serialized; a loaded repertoire always runs with
//! the current defaults.

use crate::dmp::{fit_forcing_weights, rollout, DmpDynamics, SkillId, SkillPrimitive, TaskParams, Trajectory};
use crate::error::{Error, Result};
use crate::expert::{FIT_RIDGE, N_BASIS};
use crate::gmm::{build_covariance_profile, inverse_2x2, CovarianceProfile};
use crate::math::{vec2, Mat};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const REPERTOIRE_VERSION: &str = "dmp-v1";
pub const PROFILES_VERSION: &str = "gmr-v1";

/// Fitted primitives and covariance profiles, indexed by `SkillId::index`.
#[derive(Debug, Clone)]
pub struct SkillRepertoire {
    pub skills: [SkillPrimitive; 3],
    pub profiles: [CovarianceProfile; 3],
}

impl SkillRepertoire {
    pub fn primitive(&self, skill: SkillId) -> &SkillPrimitive {
        &self.skills[skill.index()]
    }

    pub fn profile(&self, skill: SkillId) -> &CovarianceProfile {
        &self.profiles[skill.index()]
    }

    /// Identity-weight copy of the profiles (the no-weighting ablation).
    pub fn identity_profiles(&self) -> Result<[CovarianceProfile; 3]> {
        let mut out = Vec::with_capacity(3);
        for skill in SkillId::ALL {
            out.push(CovarianceProfile::identity(
                skill,
                self.profiles[skill.index()].grid_times.len(),
            )?);
        }
        out.try_into().map_err(|_| Error::domain("profile count"))
    }

    pub fn validate(&self, cov_floor: f64) -> Result<()> {
        for skill in SkillId::ALL {
            let prim = &self.skills[skill.index()];
            if prim.skill != skill {
                return Err(Error::Config(format!(
                    "repertoire: slot {} holds {}",
                    skill,
                    prim.skill
                )));
            }
            prim.validate()?;
            let prof = &self.profiles[skill.index()];
            if prof.skill != skill {
                return Err(Error::Config(format!(
                    "repertoire: profile slot {} holds {}",
                    skill,
                    prof.skill
                )));
            }
            prof.validate(cov_floor)?;
        }
        Ok(())
    }
}

/// Fit the full repertoire from per-skill clips: the first episode's clips
/// fix the forcing weights, the remaining episodes feed the covariance
/// profiles.
pub fn fit_repertoire(
    clip_episodes: &[[Trajectory; 3]],
    gmm_components: usize,
    profile_grid: usize,
    cov_floor: f64,
    seed: u64,
) -> Result<SkillRepertoire> {
    if clip_episodes.len() < 3 {
        return Err(Error::Fit(format!(
            "repertoire fit: {} clip episodes, need one for fitting and at least two for variability",
            clip_episodes.len()
        )));
    }
    let mut skills = Vec::with_capacity(3);
    let mut profiles = Vec::with_capacity(3);
    for skill in SkillId::ALL {
        let c = skill.index();
        let prim = fit_forcing_weights(
            skill,
            &clip_episodes[0][c],
            N_BASIS,
            FIT_RIDGE,
            DmpDynamics::default(),
        )?;
        let variability: Vec<Trajectory> =
            clip_episodes[1..].iter().map(|ep| ep[c].clone()).collect();
        let profile = build_covariance_profile(
            skill,
            &variability,
            gmm_components,
            profile_grid,
            cov_floor,
            seed ^ (c as u64),
        )?;
        skills.push(prim);
        profiles.push(profile);
    }
    Ok(SkillRepertoire {
        skills: skills.try_into().map_err(|_| Error::domain("skill count"))?,
        profiles: profiles.try_into().map_err(|_| Error::domain("profile count"))?,
    })
}

/// RMSE between a clip and its primitive's rollout under the clip's own
/// start, goal, and duration; the reproduction quality number printed by
/// repertoire fitting.
pub fn reproduction_rmse(prim: &SkillPrimitive, clip: &Trajectory) -> Result<f64> {
    let tp = TaskParams {
        start: clip.positions[0],
        goal: *clip.positions.last().ok_or_else(|| Error::domain("empty clip"))?,
        tau: clip.duration(),
    };
    let reproduced = rollout(prim, &tp, clip.dt)?;
    let n = reproduced.len().min(clip.len());
    let mut acc = 0.0;
    for i in 0..n {
        let d = vec2::sub(reproduced.positions[i], clip.positions[i]);
        acc += d[0] * d[0] + d[1] * d[1];
    }
    Ok((acc / n as f64).sqrt())
}

#[derive(Serialize, Deserialize)]
struct SkillRecord {
    skill_id: String,
    dim: usize,
    n_basis: usize,
    alpha_decay: f64,
    kp: Vec<f64>,
    kv: Vec<f64>,
    centers: Vec<f64>,
    widths: Vec<f64>,
    weights: Vec<Vec<f64>>,
    fitted_tau: f64,
}

#[derive(Serialize, Deserialize)]
struct ProfileRecord {
    skill_id: String,
    grid_times: Vec<f64>,
    sigmas: Vec<[[f64; 2]; 2]>,
}

#[derive(Serialize, Deserialize)]
struct RepertoireDoc {
    version: String,
    profiles_version: String,
    skills: Vec<SkillRecord>,
    covariance_profiles: Vec<ProfileRecord>,
}

fn skill_from_name(name: &str) -> Result<SkillId> {
    SkillId::ALL
        .into_iter()
        .find(|s| s.name() == name)
        .ok_or_else(|| Error::Format(format!("unknown skill_id '{name}'")))
}

pub fn save_repertoire(rep: &SkillRepertoire, path: &Path) -> Result<()> {
    let skills = rep
        .skills
        .iter()
        .map(|p| SkillRecord {
            skill_id: p.skill.name().into(),
            dim: p.dims,
            n_basis: p.centers.len(),
            alpha_decay: p.dynamics.alpha,
            kp: vec![p.dynamics.kp; p.dims],
            kv: vec![p.dynamics.kv; p.dims],
            centers: p.centers.clone(),
            widths: p.widths.clone(),
            weights: p.weights.clone(),
            fitted_tau: p.fitted_tau,
        })
        .collect();
    let covariance_profiles = rep
        .profiles
        .iter()
        .map(|prof| ProfileRecord {
            skill_id: prof.skill.name().into(),
            grid_times: prof.grid_times.clone(),
            sigmas: prof
                .sigmas
                .iter()
                .map(|m| [[m.get(0, 0), m.get(0, 1)], [m.get(1, 0), m.get(1, 1)]])
                .collect(),
        })
        .collect();
    let doc = RepertoireDoc {
        version: REPERTOIRE_VERSION.into(),
        profiles_version: PROFILES_VERSION.into(),
        skills,
        covariance_profiles,
    };
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_repertoire(path: &Path, cov_floor: f64) -> Result<SkillRepertoire> {
    let text = std::fs::read_to_string(path)?;
    let doc: RepertoireDoc = serde_json::from_str(&text)?;
    if doc.version != REPERTOIRE_VERSION {
        return Err(Error::Format(format!(
            "repertoire: version {} but this build reads {REPERTOIRE_VERSION}",
            doc.version
        )));
    }
    if doc.profiles_version != PROFILES_VERSION {
        return Err(Error::Format(format!(
            "repertoire: profiles version {}",
            doc.profiles_version
        )));
    }
    if doc.skills.len() != 3 || doc.covariance_profiles.len() != 3 {
        return Err(Error::Format("repertoire: need exactly three skills and profiles".into()));
    }

    let mut skills: Vec<Option<SkillPrimitive>> = vec![None; 3];
    for rec in &doc.skills {
        let skill = skill_from_name(&rec.skill_id)?;
        let uniform = |vals: &[f64], label: &str| -> Result<f64> {
            match vals.split_first() {
                Some((&first, rest)) if rest.iter().all(|&v| v == first) => Ok(first),
                _ => Err(Error::Format(format!("repertoire: non-uniform {label} gains"))),
            }
        };
        if rec.kp.len() != rec.dim || rec.kv.len() != rec.dim {
            return Err(Error::Format("repertoire: gain vector length".into()));
        }
        let dynamics = DmpDynamics {
            alpha: rec.alpha_decay,
            kp: uniform(&rec.kp, "kp")?,
            kv: uniform(&rec.kv, "kv")?,
            ..DmpDynamics::default()
        };
        let prim = SkillPrimitive {
            skill,
            dims: rec.dim,
            weights: rec.weights.clone(),
            centers: rec.centers.clone(),
            widths: rec.widths.clone(),
            dynamics,
            fitted_tau: rec.fitted_tau,
        };
        if rec.n_basis != prim.centers.len() {
            return Err(Error::Format("repertoire: n_basis disagrees with centers".into()));
        }
        prim.validate()?;
        skills[skill.index()] = Some(prim);
    }

    let mut profiles: Vec<Option<CovarianceProfile>> = vec![None; 3];
    for rec in &doc.covariance_profiles {
        let skill = skill_from_name(&rec.skill_id)?;
        let sigmas: Vec<Mat> = rec
            .sigmas
            .iter()
            .map(|s| Mat::from_fn(2, 2, |i, j| s[i][j]))
            .collect();
        let inverses = sigmas.iter().map(inverse_2x2).collect();
        let prof = CovarianceProfile {
            skill,
            grid_times: rec.grid_times.clone(),
            sigmas,
            inverses,
            degenerate: false,
        };
        prof.validate(cov_floor)?;
        profiles[skill.index()] = Some(prof);
    }

    fn take<T>(slots: Vec<Option<T>>, what: &str) -> Result<Vec<T>> {
        slots
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                s.ok_or_else(|| {
                    Error::Format(format!("repertoire: missing {what} {}", SkillId::ALL[i]))
                })
            })
            .collect()
    }
    let rep = SkillRepertoire {
        skills: take(skills, "skill")?
            .try_into()
            .map_err(|_| Error::domain("skill count"))?,
        profiles: take(profiles, "profile")?
            .try_into()
            .map_err(|_| Error::domain("profile count"))?,
    };
    rep.validate(cov_floor)?;
    Ok(rep)
}
