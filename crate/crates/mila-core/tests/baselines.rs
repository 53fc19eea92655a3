//! Baseline methods: demonstration segmentation, the per-subtask
//! meta-learned predictors, and goal-conditioned behaviour cloning.

use mila_core::baselines::{
    gcbc_train, load_gcbc, save_gcbc, segment_demo, segmented_adapt_one_shot,
    segmented_clip_loss, segmented_maml_train, GcbcConfig, GcbcPolicy, GcbcTrainConfig,
    SegmentedClip, SegmentedMaml,
};
use mila_core::dmp::Trajectory;
use mila_core::expert::{canonical_repertoire, scripted_expert_demo, scripted_skill_clips};
use mila_core::loss::covariance_loss;
use mila_core::math::fd_gradient;
use mila_core::meta::{adapt_one_shot, meta_train, MetaConfig};
use mila_core::policy::{GoalMode, PolicyConfig, PolicyParams};
use mila_core::repertoire::{fit_repertoire, SkillRepertoire};
use mila_core::sim::{
    initial_state, render_observation, sample_task, Demonstration, TaskDistribution, WorldParams,
};
use std::sync::OnceLock;

const GRID: usize = 4;

fn world() -> WorldParams {
    WorldParams { grid: GRID, ..WorldParams::default() }
}

fn repertoire() -> &'static SkillRepertoire {
    static REP: OnceLock<SkillRepertoire> = OnceLock::new();
    REP.get_or_init(|| {
        let w = world();
        let canon = canonical_repertoire(&w).unwrap();
        let clips: Vec<[Trajectory; 3]> = (0..5)
            .map(|i| {
                let spec = sample_task(&TaskDistribution::train(), &w, 2300 + i).unwrap();
                scripted_skill_clips(&spec, &canon, 0.005, 8300 + i, &w).unwrap()
            })
            .collect();
        fit_repertoire(&clips, 5, 100, 1e-6, 23).unwrap()
    })
}

fn demo(task_seed: u64, noise_std: f64, noise_seed: u64) -> Demonstration {
    let w = world();
    let spec = sample_task(&TaskDistribution::train(), &w, task_seed).unwrap();
    scripted_expert_demo(&spec, &repertoire().skills, noise_std, noise_seed, &w).unwrap()
}

fn clip_pools(
    task_seeds: &[u64],
    demos_per_task: usize,
    noise_std: f64,
) -> Vec<Vec<[SegmentedClip; 3]>> {
    task_seeds
        .iter()
        .map(|&seed| {
            (0..demos_per_task)
                .map(|i| segment_demo(&demo(seed, noise_std, 100 * seed + i as u64)))
                .collect()
        })
        .collect()
}

#[test]
fn segmentation_splits_at_the_hidden_boundaries() {
    let d = demo(3001, 0.005, 3101);
    let b = d.hidden_segmentation();
    let clips = segment_demo(&d);

    assert_eq!(clips[0].frames.len(), b[0]);
    assert_eq!(clips[1].frames.len(), b[1] - b[0] + 1);
    assert_eq!(clips[2].frames.len(), b[2] - b[1] + 1);
    assert_eq!(b[2], d.frames.len());

    // Each later clip starts on the resting sample the previous one ended
    // with, exactly like the expert's own per-skill clips.
    assert_eq!(clips[1].traj.positions[0], d.traj.positions[b[0] - 1]);
    assert_eq!(clips[2].traj.positions[0], d.traj.positions[b[1] - 1]);
    for c in &clips {
        assert_eq!(c.frames.len(), c.traj.positions.len());
        assert_eq!(c.traj.dt, d.traj.dt);
    }
}

#[test]
fn single_head_gradients_match_finite_differences() {
    let rep = repertoire();
    let d = demo(3202, 0.005, 3302);
    let clips = segment_demo(&d);

    for (c, goal_mode) in [(0, GoalMode::FinalFrame), (2, GoalMode::LearnedZ0)] {
        let policy = PolicyParams::new(PolicyConfig::tiny(GRID), 77 + c as u64).unwrap();
        let (_, pg) =
            segmented_clip_loss(&policy, &clips[c], &rep.skills[c], c, 8, goal_mode).unwrap();
        let analytic = pg.flatten();

        let point = policy.flatten();
        let objective = |flat: &[f64]| {
            let mut p = policy.clone();
            p.assign_flat(flat)?;
            Ok(segmented_clip_loss(&p, &clips[c], &rep.skills[c], c, 8, goal_mode)?.0)
        };
        let fd = fd_gradient(objective, &point, 1e-6).unwrap();

        let diff: f64 = analytic
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let scale: f64 = fd.iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!(
            diff < 1e-3 * scale,
            "subtask {c}: |analytic - fd| = {diff:.3e} vs |fd| = {scale:.3e}"
        );
    }
}

#[test]
fn adapting_a_predictor_reduces_its_clip_error() {
    let rep = repertoire();
    let model = SegmentedMaml::new(PolicyConfig::tiny(GRID), 31).unwrap();
    let d = demo(3403, 0.005, 3503);
    let cfg = MetaConfig { inner_steps: 5, m_samples: 8, ..MetaConfig::default() };

    let adapted = segmented_adapt_one_shot(&model, &d, &rep.skills, &cfg).unwrap();
    let clips = segment_demo(&d);
    for c in 0..3 {
        let before = segmented_clip_loss(
            &model.predictors[c],
            &clips[c],
            &rep.skills[c],
            c,
            8,
            GoalMode::FinalFrame,
        )
        .unwrap()
        .0;
        let after = segmented_clip_loss(
            &adapted.predictors[c],
            &clips[c],
            &rep.skills[c],
            c,
            8,
            GoalMode::FinalFrame,
        )
        .unwrap()
        .0;
        assert!(
            after < before,
            "subtask {c}: loss went {before:.6} -> {after:.6}"
        );
    }
}

#[test]
fn segmented_training_is_deterministic() {
    let rep = repertoire();
    let pools = clip_pools(&[3604, 3605], 4, 0.005);
    let cfg = MetaConfig { meta_batch: 2, m_samples: 8, seed: 9, ..MetaConfig::default() };

    let mut run = || {
        let mut model = SegmentedMaml::new(PolicyConfig::tiny(GRID), 41).unwrap();
        let logs = segmented_maml_train(&mut model, &pools, &rep.skills, &cfg, 10).unwrap();
        (model, logs)
    };
    let (model_a, logs_a) = run();
    let (model_b, logs_b) = run();

    assert_eq!(model_a, model_b);
    for c in 0..3 {
        assert_eq!(logs_a[c].len(), 10);
        for (ra, rb) in logs_a[c].iter().zip(&logs_b[c]) {
            assert_eq!(ra.meta_loss, rb.meta_loss);
            assert_eq!(ra.val_loss, rb.val_loss);
            assert_eq!(ra.grad_norm, rb.grad_norm);
            assert_eq!(ra.skipped, rb.skipped);
            assert!(ra.meta_loss.is_finite() && ra.grad_norm.is_finite());
        }
    }
}

/// With zero observation noise, the plain per-subtask objective should sit
/// in the same loss regime as the unweighted pipeline's per-subtask terms:
/// compare the raw quadratic sums (same phase-sample count, before the
/// differing episode/clip length normalizations) after a paired short
/// training run and one-shot adaptation to the same held-out demo.
#[test]
fn plain_segmented_validation_tracks_the_unweighted_pipeline() {
    let rep = repertoire();
    let profiles = rep.identity_profiles().unwrap();
    let task_seeds = [3706u64, 3707, 3708];
    let cfg = MetaConfig { meta_batch: 3, m_samples: 8, seed: 3, ..MetaConfig::default() };
    let steps = 80;

    let demo_pools: Vec<Vec<Demonstration>> = task_seeds
        .iter()
        .map(|&s| (0..2).map(|i| demo(s, 0.0, 10 * s + i)).collect())
        .collect();
    let mut mila = PolicyParams::new(PolicyConfig::tiny(GRID), 51).unwrap();
    meta_train(&mut mila, &demo_pools, rep, &profiles, &cfg, steps).unwrap();

    let clip_pools: Vec<Vec<[SegmentedClip; 3]>> = demo_pools
        .iter()
        .map(|pool| pool.iter().map(segment_demo).collect())
        .collect();
    let mut seg = SegmentedMaml::new(PolicyConfig::tiny(GRID), 51).unwrap();
    segmented_maml_train(&mut seg, &clip_pools, &rep.skills, &cfg, steps).unwrap();

    let mut mila_raw = [0.0f64; 3];
    let mut seg_raw = [0.0f64; 3];
    for (k, &held_seed) in [3790u64, 3791, 3792].iter().enumerate() {
        let held_out = demo(held_seed, 0.0, 37900 + k as u64);
        let mila_phi = adapt_one_shot(&mila, &held_out, rep, &profiles, &cfg).unwrap();
        let (mila_loss, _) = covariance_loss(
            &mila_phi,
            &held_out,
            rep,
            &profiles,
            [1.0, 1.0, 1.0],
            8,
            GoalMode::LearnedZ0,
        )
        .unwrap();

        let seg_phi = segmented_adapt_one_shot(&seg, &held_out, &rep.skills, &cfg).unwrap();
        let clips = segment_demo(&held_out);
        for c in 0..3 {
            let seg_total = segmented_clip_loss(
                &seg_phi.predictors[c],
                &clips[c],
                &rep.skills[c],
                c,
                8,
                GoalMode::LearnedZ0,
            )
            .unwrap()
            .0;
            seg_raw[c] += seg_total * clips[c].traj.positions.len() as f64;
            mila_raw[c] += mila_loss.per_subtask[c];
        }
    }
    for c in 0..3 {
        assert!(
            seg_raw[c] <= 2.0 * mila_raw[c] && mila_raw[c] <= 2.0 * seg_raw[c],
            "subtask {c}: pipeline term {:.4} vs segmented term {:.4}",
            mila_raw[c],
            seg_raw[c]
        );
    }
}

#[test]
fn cloning_overfits_five_demos() {
    // Noiseless demos: finite-difference velocity targets of noisy
    // positions carry an irreducible variance of 2 sigma^2 / dt^2, which
    // no amount of fitting removes. The overfit oracle is about capacity
    // and optimization, so it gets clean targets.
    let demos: Vec<Demonstration> = (0..5).map(|i| demo(3801 + i, 0.0, 3901 + i)).collect();
    let mut policy = GcbcPolicy::new(GcbcConfig::tiny(GRID), 61).unwrap();
    let cfg = GcbcTrainConfig { steps: 2000, ..GcbcTrainConfig::default() };
    let rows = gcbc_train(&mut policy, &demos, &cfg).unwrap();
    assert_eq!(rows.len(), 2000);

    // Training loss over the full dataset, not the last minibatch.
    let mut sum = 0.0;
    let mut n = 0usize;
    for d in &demos {
        let b = d.hidden_segmentation();
        let goals = [
            policy.embed(&d.frames[b[0] - 1]).unwrap(),
            policy.embed(&d.frames[b[1] - 1]).unwrap(),
            policy.embed(&d.frames[b[2] - 1]).unwrap(),
        ];
        let ranges = [(0usize, b[0]), (b[0] - 1, b[1]), (b[1] - 1, b[2])];
        for (c, &(lo, hi)) in ranges.iter().enumerate() {
            for t in lo..hi - 1 {
                let pos = d.traj.positions[t];
                let next = d.traj.positions[t + 1];
                let target =
                    [(next[0] - pos[0]) / d.traj.dt, (next[1] - pos[1]) / d.traj.dt];
                let v = policy.act(&d.frames[t], pos, &goals[c], c).unwrap();
                sum += (v[0] - target[0]).powi(2) + (v[1] - target[1]).powi(2);
                n += 1;
            }
        }
    }
    let mse = sum / n as f64;
    assert!(mse < 1e-4, "overfit loss {mse:.3e} (m/s)^2 after 2000 steps");
}

#[test]
fn zero_velocity_demos_yield_near_zero_commands() {
    let w = world();
    let spec = sample_task(&TaskDistribution::train(), &w, 4002).unwrap();
    let state = initial_state(&spec, &w);
    let obs = render_observation(&state, &spec, &w);
    let n = 30usize;
    let traj = Trajectory {
        dt: 1.0 / 30.0,
        positions: vec![state.ee; n],
        velocities: vec![[0.0, 0.0]; n],
    };
    let d = Demonstration::new(vec![obs.clone(); n], traj, spec, [10, 20, n]).unwrap();

    let mut policy = GcbcPolicy::new(GcbcConfig::tiny(GRID), 71).unwrap();
    let cfg = GcbcTrainConfig { steps: 300, ..GcbcTrainConfig::default() };
    gcbc_train(&mut policy, &[d], &cfg).unwrap();

    for c in 0..3 {
        let goal = policy.embed(&obs).unwrap();
        let v = policy.act(&obs, state.ee, &goal, c).unwrap();
        let speed = (v[0] * v[0] + v[1] * v[1]).sqrt();
        assert!(speed < 1e-3, "subtask {c} still commands {speed:.2e} m/s");
    }
}

#[test]
fn gcbc_checkpoints_round_trip() {
    let demos: Vec<Demonstration> = (0..2).map(|i| demo(4103 + i, 0.005, 4203 + i)).collect();
    let mut policy = GcbcPolicy::new(GcbcConfig::tiny(GRID), 81).unwrap();
    let cfg = GcbcTrainConfig { steps: 20, ..GcbcTrainConfig::default() };
    gcbc_train(&mut policy, &demos, &cfg).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("policy.gcbc");
    save_gcbc(&policy, &path).unwrap();
    let loaded = load_gcbc(&path).unwrap();
    assert_eq!(policy, loaded);

    let goal = policy.embed(&demos[0].frames[10]).unwrap();
    let a = policy.act(&demos[0].frames[3], demos[0].traj.positions[3], &goal, 1).unwrap();
    let b = loaded.act(&demos[0].frames[3], demos[0].traj.positions[3], &goal, 1).unwrap();
    assert_eq!(a, b);
}
