//! Low-level controller: reward, action composition, PPO and rollouts.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dal::{AugmentFlags, AugmentRanges, Augmentation};
use crate::env::{self, Episode, ObjectSpec, ObsLayout, ObsMode, SimConfig, WristAction};
use crate::error::{Error, Result};
use crate::eval::CompletionThresholds;
use crate::geom::{quat_angle, ObjectState, Pose, Rot, Vec3};
use crate::net::{adam_step, AdamConfig, AdamState, Checkpoint, GaussianPolicy, Mlp, RunningNorm};
use crate::planner::Planner;
use crate::rng::{rng_from, stream, Rng};
use crate::traj::{sample_goal_window, GoalTrajectory, WINDOW_LEN};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardWeights {
    pub rotation: f64,
    pub translation: f64,
    pub joint: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            rotation: 20.0,
            translation: 1.0,
            joint: 5.0,
        }
    }
}

/// `exp(-(l1 * angle + l2 * |dt| + l3 * |dj|))`; translation in meters. The
/// joint term is dropped when either state has no joint.
pub fn reward(goal: &ObjectState, current: &ObjectState, w: &RewardWeights) -> f64 {
    let rot = quat_angle(&goal.rotation, &current.rotation);
    let tr = (goal.translation - current.translation).norm();
    let j = match (goal.joint, current.joint) {
        (Some(a), Some(b)) => (a - b).abs(),
        _ => 0.0,
    };
    (-(w.rotation * rot + w.translation * tr + w.joint * j)).exp()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResidualBounds {
    /// Per-axis bound (m).
    pub max_translation: f64,
    /// Axis-angle norm bound (rad).
    pub max_rotation: f64,
}

impl Default for ResidualBounds {
    fn default() -> Self {
        ResidualBounds {
            max_translation: 0.04,
            max_rotation: 0.5,
        }
    }
}

/// Residual wrist correction for one hand.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Residual {
    pub translation: Vec3,
    /// Axis-angle, applied in the planner wrist frame.
    pub rotation: Vec3,
}

impl Residual {
    pub const ZERO: Residual = Residual {
        translation: Vec3::new(0.0, 0.0, 0.0),
        rotation: Vec3::new(0.0, 0.0, 0.0),
    };

    pub fn clamped(&self, b: &ResidualBounds) -> Residual {
        let t = self.translation.map(|v| v.clamp(-b.max_translation, b.max_translation));
        let n = self.rotation.norm();
        let r = if n > b.max_rotation {
            self.rotation * (b.max_rotation / n)
        } else {
            self.rotation
        };
        Residual {
            translation: t,
            rotation: r,
        }
    }
}

/// Final wrist and finger commands from planner wrists plus bounded
/// residuals.
pub fn compose_action(
    planner_wrist: &WristAction,
    residual: &[Residual; 2],
    fingers: &[Vec<f64>; 2],
    b: &ResidualBounds,
) -> (WristAction, [Vec<f64>; 2]) {
    let hands = planner_wrist.hands();
    let out: Vec<Pose> = hands
        .iter()
        .zip(residual)
        .map(|(p, r)| {
            let r = r.clamped(b);
            Pose::new(p.translation + r.translation, p.rotation * Rot::from_rotvec(&r.rotation))
        })
        .collect();
    let f = [
        fingers[0].iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        fingers[1].iter().map(|v| v.clamp(0.0, 1.0)).collect(),
    ];
    (WristAction::new(out[0], out[1]), f)
}

/// `exp(-mean distance)` between matching fingertips (m).
pub fn fingertip_reward(demo_tips: &[Vec<[f64; 3]>; 2], robot_tips: &[Vec<[f64; 3]>; 2]) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (d, r) in demo_tips.iter().zip(robot_tips) {
        if d.len() != r.len() {
            return Err(Error::Shape {
                expected: d.len(),
                got: r.len(),
                context: "fingertip count".into(),
            });
        }
        for (a, b) in d.iter().zip(r) {
            sum += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
            n += 1;
        }
    }
    Ok((-(sum / n.max(1) as f64)).exp())
}

/// Generalized advantage estimation over one stream. `dones[t]` marks the
/// last step of an episode; `last_value` bootstraps the step after the end.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = last_value;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    /// Planner wrists plus residuals and fingers.
    Hierarchical,
    /// Absolute wrists and fingers; no planner.
    Vanilla,
    /// Planner wrists as-is; fingers only.
    HierarchicalNoResidual,
}

impl ControlMode {
    pub fn name(&self) -> &'static str {
        match self {
            ControlMode::Hierarchical => "hierarchical",
            ControlMode::Vanilla => "vanilla",
            ControlMode::HierarchicalNoResidual => "hierarchical_no_residual",
        }
    }

    pub fn uses_planner(&self) -> bool {
        !matches!(self, ControlMode::Vanilla)
    }

    pub fn act_dim(&self, fingers: usize) -> usize {
        match self {
            ControlMode::HierarchicalNoResidual => 2 * fingers,
            _ => 12 + 2 * fingers,
        }
    }
}

/// Vanilla absolute-wrist action scales.
pub const VANILLA_TRANSLATION_SCALE: f64 = 0.3;
pub const VANILLA_ROTATION_SCALE: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub steps_per_update: usize,
    pub lr: f64,
    pub max_grad_norm: f64,
    pub mode: ControlMode,
    pub fingertip_reward_coef: f64,
    /// Parallel env instances; fixed so results never depend on threads.
    pub num_envs: usize,
    pub hidden: usize,
    pub init_log_std_wrist: f64,
    pub init_log_std_fingers: f64,
    pub wrist_action_scale: f64,
    /// Chance that a training window uses random gaps instead of unit gaps.
    pub random_gap_prob: f64,
    pub obs_mode: ObsMode,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            epochs: 4,
            minibatches: 4,
            value_coef: 0.5,
            entropy_coef: 0.01,
            steps_per_update: 2048,
            lr: 3e-4,
            max_grad_norm: 0.5,
            mode: ControlMode::Hierarchical,
            fingertip_reward_coef: 0.0,
            num_envs: 8,
            hidden: 128,
            init_log_std_wrist: -1.0,
            init_log_std_fingers: 0.5,
            wrist_action_scale: 0.1,
            random_gap_prob: 0.5,
            obs_mode: ObsMode::Teacher,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma must be in (0, 1], got {}", self.gamma)));
        }
        if !(self.clip > 0.0) {
            return Err(Error::Config("clip must be positive".into()));
        }
        if self.num_envs == 0 || self.steps_per_update < self.num_envs || self.minibatches == 0 {
            return Err(Error::Config("steps_per_update must cover every env".into()));
        }
        Ok(())
    }
}

/// Policy, value function and observation normalizer.
#[derive(Clone, Debug, PartialEq)]
pub struct ActorCritic {
    pub policy: GaussianPolicy,
    pub value: Mlp,
    pub norm: RunningNorm,
    pub mode: ControlMode,
    pub obs_mode: ObsMode,
    pub window: usize,
    pub fingers: usize,
    pub wrist_scale: f64,
}

#[derive(Serialize, Deserialize)]
struct AcMeta {
    mode: ControlMode,
    obs_mode: ObsMode,
    window: usize,
    fingers: usize,
    wrist_scale: f64,
    policy_sizes: Vec<usize>,
    value_sizes: Vec<usize>,
    norm_count: f64,
}

impl ActorCritic {
    pub fn new(cfg: &PpoConfig, fingers: usize, window: usize, rng: &mut Rng) -> ActorCritic {
        let layout = ObsLayout {
            fingers,
            window,
            wrist_window: cfg.mode.uses_planner(),
            mode: cfg.obs_mode,
        };
        let d = layout.dim();
        let a = cfg.mode.act_dim(fingers);
        let mean = Mlp::new(&[d, cfg.hidden, cfg.hidden, a], rng, 0.01);
        let value = Mlp::new(&[d, cfg.hidden, cfg.hidden, 1], rng, 1.0);
        let log_std = (0..a)
            .map(|i| {
                if a - i <= 2 * fingers {
                    cfg.init_log_std_fingers
                } else {
                    cfg.init_log_std_wrist
                }
            })
            .collect();
        ActorCritic {
            policy: GaussianPolicy::new(mean, log_std).expect("sizes agree"),
            value,
            norm: RunningNorm::new(d),
            mode: cfg.mode,
            obs_mode: cfg.obs_mode,
            window,
            fingers,
            wrist_scale: cfg.wrist_action_scale,
        }
    }

    /// Simulator commands for a raw action.
    pub fn commands(
        &self,
        raw: &[f64],
        planner_wrist: Option<&WristAction>,
        home: &[Pose; 2],
        b: &ResidualBounds,
    ) -> Result<(WristAction, [Vec<f64>; 2])> {
        action_to_commands(self.mode, raw, planner_wrist, home, self.fingers, self.wrist_scale, b)
    }

    pub fn layout(&self) -> ObsLayout {
        ObsLayout {
            fingers: self.fingers,
            window: self.window,
            wrist_window: self.mode.uses_planner(),
            mode: self.obs_mode,
        }
    }

    pub fn save(&self, path: &Path, config_hash: &str, seed: u64) -> Result<()> {
        let meta = AcMeta {
            mode: self.mode,
            obs_mode: self.obs_mode,
            window: self.window,
            fingers: self.fingers,
            wrist_scale: self.wrist_scale,
            policy_sizes: self.policy.mean.sizes().to_vec(),
            value_sizes: self.value.sizes().to_vec(),
            norm_count: self.norm.count,
        };
        let mut ck = Checkpoint::new("controller", config_hash, seed, serde_json::to_value(meta)?);
        ck.push("policy", &[self.policy.mean.n_params()], &self.policy.mean.params);
        ck.push("log_std", &[self.policy.log_std.len()], &self.policy.log_std);
        ck.push("value", &[self.value.n_params()], &self.value.params);
        ck.push("norm_mean", &[self.norm.mean.len()], &self.norm.mean);
        ck.push("norm_var", &[self.norm.var.len()], &self.norm.var);
        ck.save(path)
    }

    pub fn load(path: &Path) -> Result<ActorCritic> {
        let ck = Checkpoint::load(path)?;
        if ck.meta.kind != "controller" {
            return Err(Error::Invalid(format!("{} is not a controller checkpoint", path.display())));
        }
        let m: AcMeta = serde_json::from_value(ck.meta.extra.clone())?;
        let mean = Mlp::from_params(&m.policy_sizes, ck.get("policy")?.to_vec())?;
        Ok(ActorCritic {
            policy: GaussianPolicy::new(mean, ck.get("log_std")?.to_vec())?,
            value: Mlp::from_params(&m.value_sizes, ck.get("value")?.to_vec())?,
            norm: RunningNorm {
                mean: ck.get("norm_mean")?.to_vec(),
                var: ck.get("norm_var")?.to_vec(),
                count: m.norm_count,
            },
            mode: m.mode,
            obs_mode: m.obs_mode,
            window: m.window,
            fingers: m.fingers,
            wrist_scale: m.wrist_scale,
        })
    }
}

/// Maps a raw policy action to simulator commands. One raw wrist unit spans
/// `wrist_scale` of the wrist range (the residual bounds, or the vanilla
/// workspace); finger actions map `[-1, 1]` onto `[0, 1]`.
pub fn action_to_commands(
    mode: ControlMode,
    raw: &[f64],
    planner_wrist: Option<&WristAction>,
    home: &[Pose; 2],
    fingers: usize,
    wrist_scale: f64,
    b: &ResidualBounds,
) -> Result<(WristAction, [Vec<f64>; 2])> {
    let need = mode.act_dim(fingers);
    if raw.len() != need {
        return Err(Error::Shape {
            expected: need,
            got: raw.len(),
            context: "action".into(),
        });
    }
    let fstart = need - 2 * fingers;
    let finger = |h: usize| -> Vec<f64> {
        raw[fstart + h * fingers..fstart + (h + 1) * fingers]
            .iter()
            .map(|a| (a + 1.0) / 2.0)
            .collect()
    };
    let fingers_cmd = [finger(0), finger(1)];
    let v3 = |o: usize| Vec3::new(raw[o], raw[o + 1], raw[o + 2]) * wrist_scale;
    match mode {
        ControlMode::Vanilla => {
            let hand = |h: usize| {
                Pose::new(
                    home[h].translation + v3(6 * h) * VANILLA_TRANSLATION_SCALE,
                    home[h].rotation * Rot::from_rotvec(&(v3(6 * h + 3) * VANILLA_ROTATION_SCALE)),
                )
            };
            let f = [
                fingers_cmd[0].iter().map(|v| v.clamp(0.0, 1.0)).collect(),
                fingers_cmd[1].iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            ];
            Ok((WristAction::new(hand(0), hand(1)), f))
        }
        ControlMode::Hierarchical | ControlMode::HierarchicalNoResidual => {
            let pw = planner_wrist.ok_or_else(|| Error::Invalid("planner wrist required".into()))?;
            let residual = if mode == ControlMode::Hierarchical {
                let r = |h: usize| Residual {
                    translation: v3(6 * h) * b.max_translation,
                    rotation: v3(6 * h + 3) * b.max_rotation,
                };
                [r(0), r(1)]
            } else {
                [Residual::ZERO; 2]
            };
            Ok(compose_action(pw, &residual, &fingers_cmd, b))
        }
    }
}

/// A task instance: object, goal and optional demonstration fingertips.
#[derive(Clone, Debug)]
pub struct Task {
    pub spec: ObjectSpec,
    pub goal: GoalTrajectory,
    pub demo_tips: Option<Arc<Vec<[Vec<[f64; 3]>; 2]>>>,
}

impl Task {
    pub fn new(spec: ObjectSpec, goal: GoalTrajectory) -> Task {
        Task {
            spec,
            goal,
            demo_tips: None,
        }
    }
}

/// Episode distribution for training or evaluation.
#[derive(Clone, Debug)]
pub struct TaskSource {
    pub tasks: Vec<Task>,
    pub augment: AugmentFlags,
    pub ranges: AugmentRanges,
}

impl TaskSource {
    pub fn single(task: Task) -> Self {
        TaskSource {
            tasks: vec![task],
            augment: AugmentFlags::NONE,
            ranges: AugmentRanges::default(),
        }
    }

    /// Draws a task and its augmentation.
    pub fn draw(&self, rng: &mut Rng) -> Result<(Task, ObjectState, Augmentation)> {
        use rand::Rng as _;
        if self.tasks.is_empty() {
            return Err(Error::Invalid("empty task source".into()));
        }
        let base = &self.tasks[rng.random_range(0..self.tasks.len())];
        let aug = Augmentation::sample_in(rng, base.goal.len(), self.augment, &self.ranges);
        let (spec, goal, init) = aug.apply(&base.spec, &base.goal)?;
        Ok((
            Task {
                spec,
                goal,
                demo_tips: base.demo_tips.clone(),
            },
            init,
            aug,
        ))
    }
}

/// Everything needed to act in an episode.
#[derive(Clone, Copy)]
pub struct Agent<'a> {
    pub planner: Option<&'a Planner>,
    pub ac: &'a ActorCritic,
    pub bounds: ResidualBounds,
    pub force_category: bool,
}

/// Per-step context: raw observation plus the planner's first wrist.
pub struct StepInput {
    pub obs: Vec<f64>,
    pub planner_wrist: Option<WristAction>,
}

/// Builds the observation at the episode's current step.
pub fn prepare_step(
    ep: &mut Episode,
    planner: Option<&Planner>,
    layout: &ObsLayout,
    force_category: bool,
    random_gaps: bool,
    rng: &mut Rng,
) -> Result<StepInput> {
    let t = ep.state.step;
    let window = sample_goal_window(&ep.goal, t, layout.window, rng, random_gaps);
    let wrists = if layout.wrist_window {
        let p = planner.ok_or_else(|| Error::Invalid("hierarchical control needs a planner".into()))?;
        p.forward(ep.goal.category_id, &window, &ep.state.object, force_category)?
    } else {
        Vec::new()
    };
    let obs = ep.observe(&window, &wrists, layout.mode);
    debug_assert_eq!(obs.len(), layout.dim());
    Ok(StepInput {
        obs,
        planner_wrist: wrists.first().copied(),
    })
}

/// Reward after a step plus whether the new state breaks the thresholds.
pub fn score_state(ep: &Episode, weights: &RewardWeights, th: &CompletionThresholds, fr_coef: f64, tips: Option<&[[Vec<[f64; 3]>; 2]]>) -> Result<(f64, bool)> {
    let i = ep.state.step;
    let goal = ep.goal.state(i);
    let mut r = reward(goal, &ep.state.object, weights);
    if fr_coef != 0.0 {
        if let Some(t) = tips {
            let robot = [
                ep.state.hands[0].fingertips().iter().map(|v| [v.x, v.y, v.z]).collect(),
                ep.state.hands[1].fingertips().iter().map(|v| [v.x, v.y, v.z]).collect(),
            ];
            r += fr_coef * fingertip_reward(&t[i.min(t.len() - 1)], &robot)?;
        }
    }
    let bad = th.violates(&ep.state.object, goal, ep.spec.longest_dim());
    Ok((r, bad))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStat {
    pub ret: f64,
    pub len: usize,
    pub completion: f64,
}

#[derive(Clone, Debug, Default)]
pub struct RolloutBatch {
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    fn append(&mut self, o: RolloutBatch) {
        self.obs.extend(o.obs);
        self.actions.extend(o.actions);
        self.log_probs.extend(o.log_probs);
        self.rewards.extend(o.rewards);
        self.values.extend(o.values);
        self.dones.extend(o.dones);
        self.advantages.extend(o.advantages);
        self.returns.extend(o.returns);
    }

    /// Normalizes advantages to zero mean, unit std.
    pub fn normalize_advantages(&mut self) {
        let n = self.advantages.len() as f64;
        if n == 0.0 {
            return;
        }
        let m = self.advantages.iter().sum::<f64>() / n;
        let v = self.advantages.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / n;
        let s = v.sqrt() + 1e-8;
        self.advantages.iter_mut().for_each(|a| *a = (*a - m) / s);
    }
}

/// Rollout worker slot: one env instance with its own RNG streams.
#[derive(Clone, Debug)]
struct Slot {
    id: u64,
    episodes: u64,
    ep: Option<Episode>,
    tips: Option<Arc<Vec<[Vec<[f64; 3]>; 2]>>>,
    rng: Rng,
    ret: f64,
    len: usize,
    total_steps: usize,
    knobs: Option<(f64, f64, f64)>,
}

/// Training-loop settings shared by the rollout slots.
#[derive(Clone, Debug)]
pub struct RolloutEnv {
    pub sim: SimConfig,
    pub source: TaskSource,
    pub thresholds: CompletionThresholds,
    pub weights: RewardWeights,
    pub bounds: ResidualBounds,
    pub force_category: bool,
}

impl Slot {
    fn new(seed: u64, id: u64) -> Slot {
        Slot {
            id,
            episodes: 0,
            ep: None,
            tips: None,
            rng: rng_from(seed, &[stream::CONTROLLER, id]),
            ret: 0.0,
            len: 0,
            total_steps: 0,
            knobs: None,
        }
    }

    /// Starts a fresh episode; episodes that begin in violation count as
    /// completion 0 and are redrawn.
    fn start(&mut self, seed: u64, env: &RolloutEnv, stats: &mut Vec<EpisodeStat>) -> Result<()> {
        for _ in 0..1000 {
            let mut rng = rng_from(seed, &[stream::ROLLOUT, self.id, self.episodes]);
            self.episodes += 1;
            let (task, init, _) = env.source.draw(&mut rng)?;
            let mut spec = task.spec;
            let mut state = env::reset_at(&env.sim, &spec, init);
            if let Some((m, f, o)) = self.knobs {
                spec.mass_scale = m;
                spec.friction_scale = f;
                state.obs_noise_scale = o;
            }
            let mut ep = Episode::with_state(env.sim.clone(), spec, task.goal, rng, state);
            ep.sim_steps = self.total_steps;
            if env.thresholds.violates(&ep.state.object, &ep.goal.states[0], ep.spec.longest_dim()) {
                stats.push(EpisodeStat::default());
                continue;
            }
            self.tips = task.demo_tips;
            self.ep = Some(ep);
            self.ret = 0.0;
            self.len = 0;
            return Ok(());
        }
        Err(Error::Invalid("could not start an episode inside the thresholds".into()))
    }

    fn collect(
        &mut self,
        steps: usize,
        seed: u64,
        env: &RolloutEnv,
        ac: &ActorCritic,
        planner: Option<&Planner>,
        cfg: &PpoConfig,
    ) -> Result<(RolloutBatch, Vec<f64>, Vec<EpisodeStat>)> {
        let layout = ac.layout();
        let mut b = RolloutBatch::default();
        let mut raw_obs = Vec::with_capacity(steps);
        let mut stats = Vec::new();
        for _ in 0..steps {
            if self.ep.is_none() {
                self.start(seed, env, &mut stats)?;
            }
            let ep = self.ep.as_mut().expect("episode started");
            let gaps = self.rng.random_bool(cfg.random_gap_prob.clamp(0.0, 1.0));
            let input = prepare_step(ep, planner, &layout, env.force_category, gaps, &mut self.rng)?;
            let x = ac.norm.normalize(&input.obs);
            let mu = ac.policy.mean.predict(&x)?;
            let (a, lp) = ac.policy.sample_from_mean(&mu, &mut self.rng);
            let v = ac.value.predict(&x)?[0];
            let (wc, fc) = ac.commands(&a, input.planner_wrist.as_ref(), &env.sim.home, &env.bounds)?;
            ep.step(&wc, &fc)?;
            self.total_steps += 1;
            if ep.randomizations > 0 {
                self.knobs = Some((ep.spec.mass_scale, ep.spec.friction_scale, ep.state.obs_noise_scale));
            }
            let (r, bad) = score_state(ep, &env.weights, &env.thresholds, cfg.fingertip_reward_coef, self.tips.as_deref().map(|v| v.as_slice()))?;
            self.ret += r;
            self.len += 1;
            if bad {
                ep.terminate();
            }
            let done = ep.is_done();
            raw_obs.push(input.obs);
            b.obs.push(x);
            b.actions.push(a);
            b.log_probs.push(lp);
            b.rewards.push(r);
            b.values.push(v);
            b.dones.push(done);
            if done {
                let n = ep.goal.len() as f64;
                let completion = if bad { ep.state.step as f64 / n } else { 1.0 };
                stats.push(EpisodeStat {
                    ret: self.ret,
                    len: self.len,
                    completion,
                });
                self.ep = None;
            }
        }
        // bootstrap from the state after the last step
        let last_value = match self.ep.as_mut() {
            Some(ep) => {
                let mut probe = self.rng.clone();
                let input = prepare_step(ep, planner, &layout, env.force_category, false, &mut probe)?;
                ac.value.predict(&ac.norm.normalize(&input.obs))?[0]
            }
            None => 0.0,
        };
        let (adv, ret) = gae(&b.rewards, &b.values, &b.dones, last_value, cfg.gamma, cfg.gae_lambda);
        b.advantages = adv;
        b.returns = ret;
        Ok((b, raw_obs.into_iter().flatten().collect(), stats))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub kl: f64,
    pub clip_fraction: f64,
    pub mean_ratio_start: f64,
}

/// Adam state for an actor-critic.
#[derive(Clone, Debug)]
pub struct PpoOptim {
    policy: AdamState,
    log_std: AdamState,
    value: AdamState,
}

impl PpoOptim {
    pub fn new(ac: &ActorCritic) -> Self {
        PpoOptim {
            policy: AdamState::new(ac.policy.mean.n_params()),
            log_std: AdamState::new(ac.policy.log_std.len()),
            value: AdamState::new(ac.value.n_params()),
        }
    }
}

struct MbGrad {
    policy: Vec<f64>,
    log_std: Vec<f64>,
    value: Vec<f64>,
    pl: f64,
    vl: f64,
    kl: f64,
    clipped: f64,
    ratio: f64,
}

fn minibatch_grad(ac: &ActorCritic, batch: &RolloutBatch, idx: &[usize], cfg: &PpoConfig) -> Result<MbGrad> {
    let n = idx.len() as f64;
    let parts: Vec<Result<MbGrad>> = idx
        .par_chunks(16)
        .map(|chunk| {
            let mut g = MbGrad {
                policy: vec![0.0; ac.policy.mean.n_params()],
                log_std: vec![0.0; ac.policy.log_std.len()],
                value: vec![0.0; ac.value.n_params()],
                pl: 0.0,
                vl: 0.0,
                kl: 0.0,
                clipped: 0.0,
                ratio: 0.0,
            };
            for &i in chunk {
                let x = &batch.obs[i];
                let a = &batch.actions[i];
                let adv = batch.advantages[i];
                let (mu, cache) = ac.policy.mean.forward(x)?;
                let lp = ac.policy.log_prob_from_mean(&mu, a);
                let ratio = (lp - batch.log_probs[i]).exp();
                let clipped = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip);
                let (s1, s2) = (ratio * adv, clipped * adv);
                g.pl += -s1.min(s2) / n;
                g.kl += (batch.log_probs[i] - lp) / n;
                g.ratio += ratio / n;
                if (ratio - 1.0).abs() > cfg.clip {
                    g.clipped += 1.0 / n;
                }
                // d(-min)/d(logp): active only on the unclipped branch
                let dlp = if s1 <= s2 { -adv * ratio / n } else { 0.0 };
                if dlp != 0.0 {
                    let mut dmu = vec![0.0; mu.len()];
                    for k in 0..mu.len() {
                        let s = ac.policy.log_std[k].exp();
                        let z = (a[k] - mu[k]) / s;
                        dmu[k] = dlp * z / s;
                        g.log_std[k] += dlp * (z * z - 1.0);
                    }
                    ac.policy.mean.accumulate_grad(&cache, &dmu, &mut g.policy);
                }
                let (v, vcache) = ac.value.forward(x)?;
                let err = v[0] - batch.returns[i];
                g.vl += err * err / n;
                ac.value
                    .accumulate_grad(&vcache, &[2.0 * cfg.value_coef * err / n], &mut g.value);
            }
            Ok(g)
        })
        .collect();
    let mut tot: Option<MbGrad> = None;
    for p in parts {
        let p = p?;
        match tot.as_mut() {
            None => tot = Some(p),
            Some(t) => {
                for (a, b) in t.policy.iter_mut().zip(&p.policy) {
                    *a += b;
                }
                for (a, b) in t.log_std.iter_mut().zip(&p.log_std) {
                    *a += b;
                }
                for (a, b) in t.value.iter_mut().zip(&p.value) {
                    *a += b;
                }
                t.pl += p.pl;
                t.vl += p.vl;
                t.kl += p.kl;
                t.clipped += p.clipped;
                t.ratio += p.ratio;
            }
        }
    }
    let mut g = tot.ok_or_else(|| Error::Invalid("empty minibatch".into()))?;
    // entropy bonus: d(-c * sum(log_std))/d(log_std) = -c
    for v in &mut g.log_std {
        *v -= cfg.entropy_coef;
    }
    Ok(g)
}

/// PPO update over a batch whose advantages are already normalized.
pub fn ppo_update(
    ac: &mut ActorCritic,
    opt: &mut PpoOptim,
    batch: &RolloutBatch,
    cfg: &PpoConfig,
    rng: &mut Rng,
) -> Result<PpoStats> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty rollout batch".into()));
    }
    if batch.advantages.iter().any(|a| !a.is_finite()) {
        return Err(Error::NonFinite("advantages".into()));
    }
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut order: Vec<usize> = (0..batch.len()).collect();
    let mb = batch.len().div_ceil(cfg.minibatches);
    let mut stats = PpoStats::default();
    let mut count = 0.0;
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        for (k, idx) in order.chunks(mb).enumerate() {
            let mut g = minibatch_grad(ac, batch, idx, cfg)?;
            if !(g.pl.is_finite() && g.vl.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite PPO loss (policy {}, value {})",
                    g.pl, g.vl
                )));
            }
            if epoch == 0 && k == 0 {
                stats.mean_ratio_start = g.ratio;
            }
            let norm = g
                .policy
                .iter()
                .chain(&g.log_std)
                .chain(&g.value)
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if cfg.max_grad_norm > 0.0 && norm > cfg.max_grad_norm {
                let s = cfg.max_grad_norm / norm;
                for v in g.policy.iter_mut().chain(g.log_std.iter_mut()).chain(g.value.iter_mut()) {
                    *v *= s;
                }
            }
            adam_step(&mut ac.policy.mean.params, &g.policy, &mut opt.policy, &adam)?;
            adam_step(&mut ac.policy.log_std, &g.log_std, &mut opt.log_std, &adam)?;
            adam_step(&mut ac.value.params, &g.value, &mut opt.value, &adam)?;
            ac.policy.clamp_log_std();
            stats.policy_loss += g.pl;
            stats.value_loss += g.vl;
            stats.kl += g.kl;
            stats.clip_fraction += g.clipped;
            count += 1.0;
        }
    }
    stats.policy_loss /= count;
    stats.value_loss /= count;
    stats.kl /= count;
    stats.clip_fraction /= count;
    Ok(stats)
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateLog {
    pub update: usize,
    pub episodes: usize,
    pub mean_return: f64,
    pub mean_completion: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub kl: f64,
    pub clip_fraction: f64,
}

/// PPO trainer with a fixed set of rollout slots.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub ac: ActorCritic,
    pub opt: PpoOptim,
    pub cfg: PpoConfig,
    pub env: RolloutEnv,
    pub planner: Option<Planner>,
    pub seed: u64,
    pub log: Vec<UpdateLog>,
    slots: Vec<Slot>,
    rng: Rng,
}

impl Trainer {
    pub fn new(cfg: PpoConfig, env: RolloutEnv, planner: Option<Planner>, seed: u64) -> Result<Trainer> {
        cfg.validate()?;
        if cfg.mode.uses_planner() && planner.is_none() {
            return Err(Error::MissingArtifact(format!("planner for {} control", cfg.mode.name())));
        }
        let window = planner.as_ref().map(|p| p.window).unwrap_or(WINDOW_LEN);
        let mut init = rng_from(seed, &[stream::INIT]);
        let ac = ActorCritic::new(&cfg, env.sim.fingers, window, &mut init);
        let slots = (0..cfg.num_envs as u64).map(|i| Slot::new(seed, i)).collect();
        Ok(Trainer {
            opt: PpoOptim::new(&ac),
            ac,
            rng: rng_from(seed, &[stream::SHUFFLE]),
            cfg,
            env,
            planner,
            seed,
            log: Vec::new(),
            slots,
        })
    }

    /// Continues from a saved controller with fresh optimizer state.
    pub fn resume(&mut self, ac: ActorCritic) -> Result<()> {
        if ac.mode != self.cfg.mode || ac.obs_mode != self.cfg.obs_mode {
            return Err(Error::Invalid(format!(
                "controller is {} control, trainer expects {}",
                ac.mode.name(),
                self.cfg.mode.name()
            )));
        }
        self.opt = PpoOptim::new(&ac);
        self.ac = ac;
        Ok(())
    }

    /// Replaces the episode distribution; running episodes are dropped.
    pub fn set_source(&mut self, source: TaskSource) {
        self.env.source = source;
        for s in &mut self.slots {
            s.ep = None;
        }
    }

    /// Collects one update's worth of experience from every slot.
    pub fn collect(&mut self) -> Result<(RolloutBatch, Vec<EpisodeStat>)> {
        let per = self.cfg.steps_per_update / self.cfg.num_envs;
        let (ac, env, planner, cfg, seed) = (&self.ac, &self.env, self.planner.as_ref(), &self.cfg, self.seed);
        let parts: Vec<Result<(RolloutBatch, Vec<f64>, Vec<EpisodeStat>)>> = self
            .slots
            .par_iter_mut()
            .map(|s| s.collect(per, seed, env, ac, planner, cfg))
            .collect();
        let mut batch = RolloutBatch::default();
        let mut stats = Vec::new();
        let d = self.ac.norm.mean.len();
        let mut raw = Vec::new();
        for p in parts {
            let (b, r, s) = p?;
            batch.append(b);
            raw.extend(r.chunks_exact(d).map(|c| c.to_vec()));
            stats.extend(s);
        }
        self.ac.norm.update(&raw);
        Ok((batch, stats))
    }

    pub fn update(&mut self) -> Result<UpdateLog> {
        let (mut batch, stats) = self.collect()?;
        batch.normalize_advantages();
        let ps = ppo_update(&mut self.ac, &mut self.opt, &batch, &self.cfg, &mut self.rng)?;
        let n = stats.len();
        let mean = |f: &dyn Fn(&EpisodeStat) -> f64| {
            if n == 0 {
                f64::NAN
            } else {
                stats.iter().map(f).sum::<f64>() / n as f64
            }
        };
        let row = UpdateLog {
            update: self.log.len(),
            episodes: n,
            mean_return: mean(&|s| s.ret),
            mean_completion: mean(&|s| s.completion),
            policy_loss: ps.policy_loss,
            value_loss: ps.value_loss,
            kl: ps.kl,
            clip_fraction: ps.clip_fraction,
        };
        log::debug!(
            "update {} episodes {} completion {:.3} return {:.2}",
            row.update,
            row.episodes,
            row.mean_completion,
            row.mean_return
        );
        self.log.push(row.clone());
        Ok(row)
    }

    pub fn train(&mut self, updates: usize) -> Result<()> {
        for _ in 0..updates {
            self.update()?;
        }
        Ok(())
    }

    pub fn agent(&self) -> Agent<'_> {
        Agent {
            planner: self.planner.as_ref(),
            ac: &self.ac,
            bounds: self.env.bounds,
            force_category: self.env.force_category,
        }
    }
}

/// Complete record of one evaluation episode.
#[derive(Clone, Debug)]
pub struct EpisodeOutcome {
    pub completion: f64,
    pub breach: Option<usize>,
    pub ret: f64,
    pub states: Vec<ObjectState>,
    pub wrist_cmds: Vec<WristAction>,
    pub finger_cmds: Vec<[Vec<f64>; 2]>,
    pub fingertips: Vec<[Vec<[f64; 3]>; 2]>,
    pub spec: ObjectSpec,
    pub goal: GoalTrajectory,
}

/// Evaluation settings for [`run_episode`].
#[derive(Clone, Copy, Debug)]
pub struct EpisodeOpts {
    pub deterministic: bool,
    pub random_gaps: bool,
}

fn tips_of(ep: &Episode) -> [Vec<[f64; 3]>; 2] {
    [
        ep.state.hands[0].fingertips().iter().map(|v| [v.x, v.y, v.z]).collect(),
        ep.state.hands[1].fingertips().iter().map(|v| [v.x, v.y, v.z]).collect(),
    ]
}

/// Runs one episode to its end or first breach.
pub fn run_episode(
    agent: &Agent,
    sim: &SimConfig,
    task: &Task,
    init: ObjectState,
    th: &CompletionThresholds,
    weights: &RewardWeights,
    opts: EpisodeOpts,
    rng: &mut Rng,
) -> Result<EpisodeOutcome> {
    let state = env::reset_at(sim, &task.spec, init);
    let mut ep = Episode::with_state(sim.clone(), task.spec.clone(), task.goal.clone(), rng.clone(), state);
    let layout = agent.ac.layout();
    let longest = ep.spec.longest_dim();
    let mut out = EpisodeOutcome {
        completion: 0.0,
        breach: None,
        ret: 0.0,
        states: vec![ep.state.object],
        wrist_cmds: Vec::new(),
        finger_cmds: Vec::new(),
        fingertips: vec![tips_of(&ep)],
        spec: task.spec.clone(),
        goal: task.goal.clone(),
    };
    if th.violates(&ep.state.object, &ep.goal.states[0], longest) {
        out.breach = Some(0);
        return Ok(out);
    }
    while !ep.is_done() {
        let input = prepare_step(&mut ep, agent.planner, &layout, agent.force_category, opts.random_gaps, rng)?;
        let x = agent.ac.norm.normalize(&input.obs);
        let mu = agent.ac.policy.mean.predict(&x)?;
        let a = if opts.deterministic {
            mu
        } else {
            agent.ac.policy.sample_from_mean(&mu, rng).0
        };
        let (wc, fc) = agent.ac.commands(&a, input.planner_wrist.as_ref(), &sim.home, &agent.bounds)?;
        ep.step(&wc, &fc)?;
        out.wrist_cmds.push(wc);
        out.finger_cmds.push(fc);
        out.states.push(ep.state.object);
        out.fingertips.push(tips_of(&ep));
        let (r, bad) = score_state(&ep, weights, th, 0.0, None)?;
        out.ret += r;
        if bad {
            out.breach = Some(ep.state.step);
            ep.terminate();
        }
    }
    let n = task.goal.len() as f64;
    out.completion = match out.breach {
        Some(k) => k as f64 / n,
        None => 1.0,
    };
    Ok(out)
}

/// Mean completion over `episodes` sampled rollouts of `task` from `init`.
pub fn mean_completion(
    agent: &Agent,
    sim: &SimConfig,
    task: &Task,
    init: ObjectState,
    th: &CompletionThresholds,
    opts: EpisodeOpts,
    episodes: usize,
    seed: u64,
) -> Result<f64> {
    let n = episodes.max(1);
    let comps: Vec<Result<f64>> = (0..n as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = rng_from(seed, &[stream::EVAL, k]);
            Ok(run_episode(agent, sim, task, init, th, &RewardWeights::default(), opts, &mut rng)?.completion)
        })
        .collect();
    let mut s = 0.0;
    for c in comps {
        s += c?;
    }
    Ok(s / n as f64)
}

impl EpisodeOpts {
    /// Sampled actions, unit-gap windows.
    pub const SAMPLED: EpisodeOpts = EpisodeOpts {
        deterministic: false,
        random_gaps: false,
    };
    /// Policy mean, unit-gap windows.
    pub const GREEDY: EpisodeOpts = EpisodeOpts {
        deterministic: true,
        random_gaps: false,
    };
    /// Mode used by every evaluation and harvest in the crate.
    pub const EVAL: EpisodeOpts = EpisodeOpts::GREEDY;
}

/// Spec-shaped rollout: one episode on `g` with a sampled policy.
pub fn rollout(
    sim: &SimConfig,
    spec: &ObjectSpec,
    planner: Option<&Planner>,
    ac: &ActorCritic,
    g: &GoalTrajectory,
    cfg: &PpoConfig,
    seed: u64,
) -> Result<(RolloutBatch, EpisodeStat)> {
    let env = RolloutEnv {
        sim: sim.clone(),
        source: TaskSource::single(Task::new(spec.clone(), g.clone())),
        thresholds: CompletionThresholds::default(),
        weights: RewardWeights::default(),
        bounds: ResidualBounds::default(),
        force_category: false,
    };
    let mut slot = Slot::new(seed, 0);
    let mut pre = Vec::new();
    slot.start(seed, &env, &mut pre)?;
    let steps = g.len() - 1;
    let (mut b, _, stats) = slot.collect(steps, seed, &env, ac, planner, cfg)?;
    // keep only the first episode
    let end = b.dones.iter().position(|&d| d).map(|i| i + 1).unwrap_or(b.len());
    b.obs.truncate(end);
    b.actions.truncate(end);
    b.log_probs.truncate(end);
    b.rewards.truncate(end);
    b.values.truncate(end);
    b.dones.truncate(end);
    b.advantages.truncate(end);
    b.returns.truncate(end);
    let stat = stats.into_iter().next().unwrap_or_default();
    Ok((b, stat))
}
