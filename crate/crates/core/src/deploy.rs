//! Deployment-side pieces: multi-camera pose fusion, EMA smoothing, reset
//! checks and DAgger distillation into a velocity-free student.

use rand::Rng as _;
use rand_distr::{Distribution, Normal, UnitSphere};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{Episode, ObsLayout, ObsMode, SimConfig};
use crate::error::{Error, Result};
use crate::eval::CompletionThresholds;
use crate::geom::{mean_rotation, quat_angle, ObjectState, Rot, Vec3};
use crate::net::{adam_step, AdamConfig, AdamState, RunningNorm};
use crate::rl::{mean_completion, ActorCritic, Agent, EpisodeOpts, TaskSource};
use crate::rng::{rng_from, stream, Rng};
use crate::traj::sample_goal_window;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    /// meters
    pub translation_gate: f64,
    /// radians
    pub rotation_gate: f64,
    pub cameras: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            translation_gate: 0.05,
            rotation_gate: 0.5,
            cameras: 4,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.translation_gate > 0.0 && self.rotation_gate > 0.0 && self.cameras > 0 {
            Ok(())
        } else {
            Err(Error::Config(format!("bad fusion config {self:?}")))
        }
    }
}

/// Averages the estimates that lie inside both gates around `reference`;
/// returns `previous` when none survive.
pub fn fuse_poses(
    estimates: &[ObjectState],
    reference: &ObjectState,
    cfg: &FusionConfig,
    previous: &ObjectState,
) -> ObjectState {
    let kept: Vec<&ObjectState> = estimates
        .iter()
        .filter(|e| {
            (e.translation - reference.translation).norm() < cfg.translation_gate
                && quat_angle(&e.rotation, &reference.rotation) < cfg.rotation_gate
        })
        .collect();
    if kept.is_empty() {
        return *previous;
    }
    let n = kept.len() as f64;
    let t = kept.iter().fold(Vec3::zeros(), |a, e| a + e.translation) / n;
    let rots: Vec<Rot> = kept.iter().map(|e| e.rotation).collect();
    let r = mean_rotation(&rots).unwrap_or(kept[0].rotation);
    let joints: Vec<f64> = kept.iter().filter_map(|e| e.joint).collect();
    let joint = (!joints.is_empty()).then(|| joints.iter().sum::<f64>() / joints.len() as f64);
    ObjectState::new(t, r, joint)
}

/// True when `pose` is within 3 cm and 0.5 rad of `goal_init`.
pub fn check_reset(pose: &ObjectState, goal_init: &ObjectState) -> bool {
    (pose.translation - goal_init.translation).norm() <= 0.03 && quat_angle(&pose.rotation, &goal_init.rotation) <= 0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmaState {
    pub alpha: f64,
    pub prev: Option<Vec<f64>>,
}

impl EmaState {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::Config(format!("ema alpha must be in (0, 1], got {alpha}")));
        }
        Ok(EmaState { alpha, prev: None })
    }
}

pub const DEFAULT_EMA_ALPHA: f64 = 0.3;

pub fn ema_filter(state: &EmaState, raw: &[f64]) -> (EmaState, Vec<f64>) {
    let out: Vec<f64> = match &state.prev {
        Some(p) if p.len() == raw.len() => p
            .iter()
            .zip(raw)
            .map(|(p, r)| state.alpha * r + (1.0 - state.alpha) * p)
            .collect(),
        _ => raw.to_vec(),
    };
    (
        EmaState {
            alpha: state.alpha,
            prev: Some(out.clone()),
        },
        out,
    )
}

/// Simulated camera noise for the fusion demo.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraNoise {
    /// Per-axis translation noise (m).
    pub sigma: f64,
    /// Per-axis rotation-vector noise (rad).
    pub rot_sigma: f64,
    pub outlier_rate: f64,
    /// Outlier offsets are uniform in `[min, max]` meters.
    pub outlier_min: f64,
    pub outlier_max: f64,
}

impl Default for CameraNoise {
    fn default() -> Self {
        CameraNoise {
            sigma: 0.01,
            rot_sigma: 0.02,
            outlier_rate: 0.25,
            outlier_min: 0.06,
            outlier_max: 0.2,
        }
    }
}

/// One noisy estimate per camera; returns the estimates and which were
/// outliers.
pub fn simulate_cameras(truth: &ObjectState, cameras: usize, noise: &CameraNoise, rng: &mut Rng) -> (Vec<ObjectState>, Vec<bool>) {
    let n = Normal::new(0.0, noise.sigma.max(1e-300)).expect("finite sigma");
    let nr = Normal::new(0.0, noise.rot_sigma.max(1e-300)).expect("finite sigma");
    let mut est = Vec::with_capacity(cameras);
    let mut outl = Vec::with_capacity(cameras);
    for _ in 0..cameras {
        let mut t = truth.translation + Vec3::new(n.sample(rng), n.sample(rng), n.sample(rng));
        let out = rng.random_bool(noise.outlier_rate.clamp(0.0, 1.0));
        if out {
            let d: [f64; 3] = UnitSphere.sample(rng);
            t += Vec3::from(d) * rng.random_range(noise.outlier_min..=noise.outlier_max);
        }
        let dr = Vec3::new(nr.sample(rng), nr.sample(rng), nr.sample(rng));
        est.push(ObjectState::new(t, truth.rotation * Rot::from_rotvec(&dr), truth.joint));
        outl.push(out);
    }
    (est, outl)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionFrame {
    pub frame: usize,
    pub survivors: usize,
    pub fused_error: f64,
    pub camera_mean_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionStats {
    pub frames: Vec<FusionFrame>,
    pub fused_mean_error: f64,
    pub camera_mean_error: f64,
    pub fallback_frames: usize,
}

/// Tracks `truth` through noisy cameras, gating on the truth as the desired
/// pose. Translation errors in meters.
pub fn fusion_demo(truth: &[ObjectState], cfg: &FusionConfig, noise: &CameraNoise, seed: u64) -> Result<FusionStats> {
    cfg.validate()?;
    let first = truth.first().ok_or_else(|| Error::Invalid("empty truth sequence".into()))?;
    let mut rng = rng_from(seed, &[stream::FUSION]);
    let mut prev = *first;
    let mut frames = Vec::with_capacity(truth.len());
    let mut fallback = 0;
    for (i, t) in truth.iter().enumerate() {
        let (est, _) = simulate_cameras(t, cfg.cameras, noise, &mut rng);
        let fused = fuse_poses(&est, t, cfg, &prev);
        let survivors = est
            .iter()
            .filter(|e| (e.translation - t.translation).norm() < cfg.translation_gate && quat_angle(&e.rotation, &t.rotation) < cfg.rotation_gate)
            .count();
        if survivors == 0 {
            fallback += 1;
        }
        let cam = est.iter().map(|e| (e.translation - t.translation).norm()).sum::<f64>() / est.len() as f64;
        frames.push(FusionFrame {
            frame: i,
            survivors,
            fused_error: (fused.translation - t.translation).norm(),
            camera_mean_error: cam,
        });
        prev = fused;
    }
    let n = frames.len() as f64;
    Ok(FusionStats {
        fused_mean_error: frames.iter().map(|f| f.fused_error).sum::<f64>() / n,
        camera_mean_error: frames.iter().map(|f| f.camera_mean_error).sum::<f64>() / n,
        fallback_frames: fallback,
        frames,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DaggerConfig {
    pub iterations: usize,
    pub labels_per_iter: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub thresholds: CompletionThresholds,
}

impl Default for DaggerConfig {
    fn default() -> Self {
        DaggerConfig {
            iterations: 5,
            labels_per_iter: 2048,
            epochs: 20,
            batch_size: 256,
            lr: 1e-3,
            thresholds: CompletionThresholds::default(),
        }
    }
}

impl DaggerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.labels_per_iter == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("dagger sizes must be positive".into()));
        }
        Ok(())
    }

    /// Teacher mixing weight at iteration `i`, annealed linearly 1 -> 0.
    pub fn beta(&self, i: usize) -> f64 {
        if self.iterations <= 1 {
            1.0
        } else {
            1.0 - i as f64 / (self.iterations - 1) as f64
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DaggerRow {
    pub iter: usize,
    pub beta: f64,
    pub dataset_size: usize,
    pub mse_before: f64,
    pub mse_after: f64,
}

/// A student with the teacher's action space and the velocity-free
/// observation.
pub fn student_like(teacher: &ActorCritic, obs_mode: ObsMode, rng: &mut Rng) -> ActorCritic {
    let layout = ObsLayout {
        mode: obs_mode,
        ..teacher.layout()
    };
    let hidden = teacher.policy.mean.sizes()[1];
    let a = teacher.policy.mean.output_dim();
    let mean = crate::net::Mlp::new(&[layout.dim(), hidden, hidden, a], rng, 0.01);
    let value = crate::net::Mlp::new(&[layout.dim(), hidden, hidden, 1], rng, 1.0);
    ActorCritic {
        policy: crate::net::GaussianPolicy::new(mean, teacher.policy.log_std.clone()).expect("sizes agree"),
        value,
        norm: RunningNorm::new(layout.dim()),
        mode: teacher.mode,
        obs_mode,
        window: teacher.window,
        fingers: teacher.fingers,
        wrist_scale: teacher.wrist_scale,
    }
}

fn mse(student: &ActorCritic, xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<f64> {
    let parts: Vec<Result<f64>> = xs
        .par_chunks(64)
        .zip(ys.par_chunks(64))
        .map(|(xc, yc)| {
            let mut s = 0.0;
            for (x, y) in xc.iter().zip(yc) {
                let p = student.policy.mean.predict(&student.norm.normalize(x))?;
                s += p.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64;
            }
            Ok(s)
        })
        .collect();
    let mut tot = 0.0;
    for p in parts {
        tot += p?;
    }
    Ok(tot / xs.len().max(1) as f64)
}

/// Fits the student mean to `ys` on the normalized `xs` by minibatch Adam.
pub fn regress(student: &mut ActorCritic, xs: &[Vec<f64>], ys: &[Vec<f64>], cfg: &DaggerConfig, rng: &mut Rng) -> Result<()> {
    use rand::seq::SliceRandom;
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut opt = AdamState::new(student.policy.mean.n_params());
    let xn: Vec<Vec<f64>> = xs.iter().map(|x| student.norm.normalize(x)).collect();
    let mut order: Vec<usize> = (0..xs.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for batch in order.chunks(cfg.batch_size) {
            let n = batch.len() as f64;
            let net = &student.policy.mean;
            let parts: Vec<Result<Vec<f64>>> = batch
                .par_chunks(16)
                .map(|c| {
                    let mut g = vec![0.0; net.n_params()];
                    for &i in c {
                        let (p, cache) = net.forward(&xn[i])?;
                        let k = p.len() as f64;
                        let dy: Vec<f64> = p.iter().zip(&ys[i]).map(|(a, b)| 2.0 * (a - b) / (k * n)).collect();
                        net.accumulate_grad(&cache, &dy, &mut g);
                    }
                    Ok(g)
                })
                .collect();
            let mut g = vec![0.0; net.n_params()];
            for p in parts {
                for (a, b) in g.iter_mut().zip(p?) {
                    *a += b;
                }
            }
            adam_step(&mut student.policy.mean.params, &g, &mut opt, &adam)?;
        }
    }
    Ok(())
}

/// DAgger: roll out a beta-mixture of teacher and student, label every
/// visited student observation with the teacher's mean action, aggregate and
/// regress.
pub fn dagger_distill(
    teacher: &Agent,
    sim: &SimConfig,
    source: &TaskSource,
    obs_mode: ObsMode,
    cfg: &DaggerConfig,
    seed: u64,
) -> Result<(ActorCritic, Vec<DaggerRow>)> {
    cfg.validate()?;
    let mut rng = rng_from(seed, &[stream::DAGGER]);
    let mut student = student_like(teacher.ac, obs_mode, &mut rng);
    let t_layout = teacher.ac.layout();
    let s_layout = student.layout();
    let mut xs: Vec<Vec<f64>> = Vec::new();
    let mut ys: Vec<Vec<f64>> = Vec::new();
    let mut rows = Vec::new();
    const WORKERS: usize = 8;
    for iter in 0..cfg.iterations {
        let beta = cfg.beta(iter);
        let per = cfg.labels_per_iter.div_ceil(WORKERS);
        let st = &student;
        let parts: Vec<Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)>> = (0..WORKERS)
            .into_par_iter()
            .map(|w| {
                let mut rng = rng_from(seed, &[stream::DAGGER, iter as u64, w as u64]);
                let mut ep: Option<Episode> = None;
                let mut ox = Vec::with_capacity(per);
                let mut oy = Vec::with_capacity(per);
                let mut episodes = 0u64;
                while ox.len() < per {
                    if ep.as_ref().is_none_or(|e| e.is_done()) {
                        let mut er = rng_from(seed, &[stream::DAGGER, iter as u64, w as u64, episodes]);
                        episodes += 1;
                        let (task, init, _) = source.draw(&mut er)?;
                        let state = crate::env::reset_at(sim, &task.spec, init);
                        ep = Some(Episode::with_state(sim.clone(), task.spec, task.goal, er, state));
                    }
                    let e = ep.as_mut().expect("episode present");
                    let window = sample_goal_window(&e.goal, e.state.step, t_layout.window, &mut rng, false);
                    let wrists = match (t_layout.wrist_window, teacher.planner) {
                        (true, Some(p)) => p.forward(e.goal.category_id, &window, &e.state.object, teacher.force_category)?,
                        (true, None) => return Err(Error::MissingArtifact("planner for the teacher".into())),
                        _ => Vec::new(),
                    };
                    let to = e.observe(&window, &wrists, ObsMode::Teacher);
                    let so = e.observe(&window, &wrists, s_layout.mode);
                    assert_eq!(so.len(), s_layout.dim(), "student observation has the wrong width");
                    let ta = teacher.ac.policy.mean.predict(&teacher.ac.norm.normalize(&to))?;
                    let act = if rng.random_bool(beta.clamp(0.0, 1.0)) {
                        teacher.ac.policy.sample_from_mean(&ta, &mut rng).0
                    } else {
                        let mu = st.policy.mean.predict(&st.norm.normalize(&so))?;
                        st.policy.sample_from_mean(&mu, &mut rng).0
                    };
                    let (wc, fc) = teacher.ac.commands(&act, wrists.first(), &sim.home, &teacher.bounds)?;
                    e.step(&wc, &fc)?;
                    let i = e.state.step;
                    if cfg.thresholds.violates(&e.state.object, e.goal.state(i), e.spec.longest_dim()) {
                        e.terminate();
                    }
                    ox.push(so);
                    oy.push(ta);
                }
                Ok((ox, oy))
            })
            .collect();
        for p in parts {
            let (x, y) = p?;
            xs.extend(x);
            ys.extend(y);
        }
        student.norm = RunningNorm::new(s_layout.dim());
        student.norm.update(&xs);
        let before = mse(&student, &xs, &ys)?;
        regress(&mut student, &xs, &ys, cfg, &mut rng)?;
        let after = mse(&student, &xs, &ys)?;
        log::info!("dagger {iter}: beta {beta:.2} labels {} mse {before:.2e} -> {after:.2e}", xs.len());
        rows.push(DaggerRow {
            iter,
            beta,
            dataset_size: xs.len(),
            mse_before: before,
            mse_after: after,
        });
    }
    Ok((student, rows))
}

/// Mean sampled completion of `agent` on the first task of `source`.
pub fn reference_completion(
    agent: &Agent,
    sim: &SimConfig,
    source: &TaskSource,
    th: &CompletionThresholds,
    episodes: usize,
    seed: u64,
) -> Result<f64> {
    let task = source.tasks.first().ok_or_else(|| Error::Invalid("empty task source".into()))?;
    mean_completion(agent, sim, task, task.goal.states[0], th, EpisodeOpts::EVAL, episodes, seed)
}
