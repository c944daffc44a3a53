//! Deterministic kinematic bimanual simulator.
//!
//! Contact is threshold-gated rigid attachment: a hand attaches to a part
//! when its wrist is within the grasp radius of that part's grasp site and
//! its mean finger closure exceeds the close threshold; it lets go below the
//! open threshold. Attached parts follow their hands rigidly. A fully free
//! object falls toward the table (z = 0).
//!
//! Frames: world is right-handed with z up. An object's frame sits at the
//! bottom center of its base part, x along width, y along length. Articulated
//! objects carry one revolute child (a lid) hinged about the base's x axis at
//! the top back edge.

use std::f64::consts::FRAC_PI_2;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{mean_rotation, quat_angle, slerp, ObjectState, Pose, Rot, Vec3};
use crate::rng::Rng;
use crate::traj::{relative_goal_window, GoalTrajectory, GoalWindow};

/// Appendix-style augmentation ranges for initial-pose perturbation.
pub const INIT_XY_RANGE: f64 = 0.02;
pub const INIT_YAW_MAX_DEG: f64 = 30.0;

/// Bimanual wrist command or pose pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WristAction {
    pub left: Pose,
    pub right: Pose,
}

impl WristAction {
    pub fn new(left: Pose, right: Pose) -> Self {
        WristAction { left, right }
    }

    pub fn hands(&self) -> [Pose; 2] {
        [self.left, self.right]
    }

    pub fn from_hands(h: [Pose; 2]) -> Self {
        WristAction::new(h[0], h[1])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Base,
    Child,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub category_id: usize,
    /// (width, length, height) in meters.
    pub dims: [f64; 3],
    pub articulated: bool,
    pub joint_limits: [f64; 2],
    /// Site 0 lives on the base part; site 1 on the child part when
    /// articulated, otherwise also on the base.
    pub grasp_sites: [Pose; 2],
    pub mass_scale: f64,
    pub friction_scale: f64,
}

fn side_rot(sign: f64) -> Rot {
    // site z axis points into the object
    Rot::from_axis_angle(&Vec3::y(), sign * FRAC_PI_2)
}

impl ObjectSpec {
    /// Rigid box grasped on its left and right faces.
    pub fn rigid(category_id: usize, dims: [f64; 3]) -> Self {
        let [w, _, h] = dims;
        ObjectSpec {
            category_id,
            dims,
            articulated: false,
            joint_limits: [0.0, 0.0],
            grasp_sites: [
                Pose::new(Vec3::new(-w / 2.0, 0.0, h / 2.0), side_rot(1.0)),
                Pose::new(Vec3::new(w / 2.0, 0.0, h / 2.0), side_rot(-1.0)),
            ],
            mass_scale: 1.0,
            friction_scale: 1.0,
        }
    }

    /// Box with a hinged lid: left hand holds the base, right hand the lid's
    /// front edge from above.
    pub fn lidded(category_id: usize, dims: [f64; 3], joint_limits: [f64; 2]) -> Self {
        let [w, l, h] = dims;
        ObjectSpec {
            category_id,
            dims,
            articulated: true,
            joint_limits,
            grasp_sites: [
                Pose::new(Vec3::new(-w / 2.0, 0.0, h / 2.0), side_rot(1.0)),
                Pose::new(
                    Vec3::new(0.0, 0.9 * l, 0.0),
                    Rot::from_axis_angle(&Vec3::y(), std::f64::consts::PI),
                ),
            ],
            mass_scale: 1.0,
            friction_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(Error::Invalid(format!("object dims must be positive: {:?}", self.dims)));
        }
        if self.articulated && !(self.joint_limits[0] < self.joint_limits[1]) {
            return Err(Error::Invalid(format!(
                "joint limits must satisfy lo < hi: {:?}",
                self.joint_limits
            )));
        }
        if !(self.mass_scale > 0.0 && self.friction_scale > 0.0) {
            return Err(Error::Invalid("mass/friction scales must be positive".into()));
        }
        Ok(())
    }

    pub fn longest_dim(&self) -> f64 {
        self.dims.iter().copied().fold(0.0, f64::max)
    }

    pub fn site_part(&self, site: usize) -> Part {
        if self.articulated && site == 1 {
            Part::Child
        } else {
            Part::Base
        }
    }

    /// Child frame relative to the base frame at joint angle `joint`.
    pub fn hinge(&self, joint: f64) -> Pose {
        let [_, l, h] = self.dims;
        Pose::new(
            Vec3::new(0.0, -l / 2.0, h),
            Rot::from_axis_angle(&Vec3::x(), joint),
        )
    }

    pub fn part_pose(&self, obj: &ObjectState, part: Part) -> Pose {
        match part {
            Part::Base => obj.pose(),
            Part::Child => obj.pose().compose(&self.hinge(obj.joint_or_zero())),
        }
    }

    pub fn site_world(&self, obj: &ObjectState, site: usize) -> Pose {
        self.part_pose(obj, self.site_part(site))
            .compose(&self.grasp_sites[site])
    }

    pub fn clamp_joint(&self, j: f64) -> f64 {
        j.clamp(self.joint_limits[0], self.joint_limits[1])
    }

    /// Joint angle for a resting object; `None` for rigid objects.
    pub fn rest_joint(&self) -> Option<f64> {
        self.articulated.then_some(self.joint_limits[0])
    }
}

/// Componentwise rescale of dims and grasp-site translations.
pub fn scale_object(spec: &ObjectSpec, sx: f64, sy: f64, sz: f64) -> Result<ObjectSpec> {
    if !(sx > 0.0 && sy > 0.0 && sz > 0.0) {
        return Err(Error::Invalid(format!(
            "object scales must be positive, got ({sx}, {sy}, {sz})"
        )));
    }
    let s = Vec3::new(sx, sy, sz);
    let mut out = spec.clone();
    for (d, k) in out.dims.iter_mut().zip([sx, sy, sz]) {
        *d *= k;
    }
    for site in out.grasp_sites.iter_mut() {
        site.translation = site.translation.component_mul(&s);
    }
    Ok(out)
}

/// Simulator constants. All thresholds are configurable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub fingers: usize,
    /// Max wrist translation per step (m).
    pub wrist_rate: f64,
    /// Max wrist rotation per step (rad).
    pub wrist_rot_rate: f64,
    pub finger_rate: f64,
    /// Attachment radius r_g around a grasp site (m).
    pub grasp_radius: f64,
    pub close_threshold: f64,
    pub open_threshold: f64,
    pub fall_rate: f64,
    pub process_noise: bool,
    pub noise_translation: f64,
    pub noise_rotation: f64,
    /// Base observation noise (m, rad), multiplied by the randomized scale.
    pub obs_noise_translation: f64,
    pub obs_noise_rotation: f64,
    pub domain_randomization: bool,
    pub randomize_every: usize,
    pub home: [Pose; 2],
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            fingers: 4,
            wrist_rate: 0.02,
            wrist_rot_rate: 0.1,
            finger_rate: 0.2,
            grasp_radius: 0.04,
            close_threshold: 0.7,
            open_threshold: 0.4,
            fall_rate: 0.05,
            process_noise: false,
            noise_translation: 0.001,
            noise_rotation: 0.005,
            obs_noise_translation: 0.002,
            obs_noise_rotation: 0.01,
            domain_randomization: false,
            randomize_every: 1000,
            home: [
                Pose::new(Vec3::new(-0.25, 0.0, 0.12), side_rot(1.0)),
                Pose::new(Vec3::new(0.25, 0.0, 0.12), side_rot(-1.0)),
            ],
        }
    }
}

impl SimConfig {
    pub fn effective_grasp_radius(&self, spec: &ObjectSpec) -> f64 {
        self.grasp_radius * (1.0 + (spec.friction_scale - 1.0) / 2.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandState {
    pub wrist: Pose,
    pub fingers: Vec<f64>,
}

impl HandState {
    pub fn closure(&self) -> f64 {
        self.fingers.iter().sum::<f64>() / self.fingers.len().max(1) as f64
    }

    pub fn fingertips(&self) -> Vec<Vec3> {
        fingertip_points(&self.wrist, &self.fingers)
    }
}

/// Fingertips on a parametric arc in the wrist frame; fingers curl from
/// pointing along the approach axis (open) toward the palm (closed).
pub fn fingertip_points(wrist: &Pose, fingers: &[f64]) -> Vec<Vec3> {
    let n = fingers.len();
    fingers
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let lateral = (i as f64 - (n as f64 - 1.0) / 2.0) * 0.02;
            let phi = c.clamp(0.0, 1.0) * FRAC_PI_2;
            let local = Vec3::new(lateral, -0.07 * phi.sin(), 0.03 + 0.07 * phi.cos());
            wrist.transform_point(&local)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attachment {
    pub part: Part,
    /// Part pose in the wrist frame, fixed while attached.
    pub grasp: Pose,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub object: ObjectState,
    pub prev_object: ObjectState,
    pub hands: [HandState; 2],
    pub prev_fingers: [Vec<f64>; 2],
    pub attach: [Option<Attachment>; 2],
    /// Last commands, `None` at reset.
    pub last_wrist_cmd: Option<WristAction>,
    pub last_finger_cmd: Option<[Vec<f64>; 2]>,
    pub step: usize,
    pub obs_noise_scale: f64,
}

impl WorldState {
    pub fn wrists(&self) -> WristAction {
        WristAction::new(self.hands[0].wrist, self.hands[1].wrist)
    }
}

/// Initial-pose perturbation draw.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitPerturbation {
    pub dx: f64,
    pub dy: f64,
    pub yaw: f64,
}

impl InitPerturbation {
    pub fn sample(rng: &mut Rng) -> Self {
        InitPerturbation {
            dx: rng.random_range(-INIT_XY_RANGE..=INIT_XY_RANGE),
            dy: rng.random_range(-INIT_XY_RANGE..=INIT_XY_RANGE),
            yaw: rng
                .random_range(0.0..=INIT_YAW_MAX_DEG)
                .to_radians(),
        }
    }

    pub fn apply(&self, s: &ObjectState) -> ObjectState {
        ObjectState {
            translation: s.translation + Vec3::new(self.dx, self.dy, 0.0),
            rotation: Rot::about_z(self.yaw) * s.rotation,
            joint: s.joint,
        }
    }
}

/// Places the object at `g[0]` (optionally perturbed) with hands at home.
pub fn reset(
    cfg: &SimConfig,
    spec: &ObjectSpec,
    g: &GoalTrajectory,
    rng: &mut Rng,
    perturb_init: bool,
) -> WorldState {
    let start = g.states[0];
    let object = if perturb_init {
        InitPerturbation::sample(rng).apply(&start)
    } else {
        start
    };
    reset_at(cfg, spec, object)
}

/// Reset with an explicit initial object state.
pub fn reset_at(cfg: &SimConfig, spec: &ObjectSpec, mut object: ObjectState) -> WorldState {
    if spec.articulated {
        object.joint = Some(spec.clamp_joint(object.joint_or_zero()));
    }
    let open = vec![0.0; cfg.fingers];
    WorldState {
        object,
        prev_object: object,
        hands: [
            HandState {
                wrist: cfg.home[0],
                fingers: open.clone(),
            },
            HandState {
                wrist: cfg.home[1],
                fingers: open.clone(),
            },
        ],
        prev_fingers: [open.clone(), open],
        attach: [None, None],
        last_wrist_cmd: None,
        last_finger_cmd: None,
        step: 0,
        obs_noise_scale: 0.0,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepInfo {
    pub attached: [bool; 2],
    pub attached_now: [bool; 2],
    pub detached_now: [bool; 2],
}

/// Rate-limited move of `cur` toward `target`.
pub fn move_toward(cur: &Pose, target: &Pose, max_trans: f64, max_rot: f64) -> Pose {
    let d = target.translation - cur.translation;
    let dist = d.norm();
    let translation = if dist <= max_trans {
        target.translation
    } else {
        cur.translation + d * (max_trans / dist)
    };
    let ang = quat_angle(&cur.rotation, &target.rotation);
    let rotation = if ang <= max_rot {
        target.rotation
    } else {
        slerp(&cur.rotation, &target.rotation, max_rot / ang)
    };
    Pose::new(translation, rotation)
}

fn mean_pose(poses: &[Pose]) -> Pose {
    let n = poses.len() as f64;
    let t = poses.iter().fold(Vec3::zeros(), |acc, p| acc + p.translation) / n;
    let rots: Vec<Rot> = poses.iter().map(|p| p.rotation).collect();
    Pose::new(t, mean_rotation(&rots).unwrap_or(Rot::IDENTITY))
}

fn check_finite_cmds(wrist: &WristAction, fingers: &[Vec<f64>; 2]) -> Result<()> {
    for p in wrist.hands() {
        if p.translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("wrist command".into()));
        }
    }
    if fingers.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("finger command".into()));
    }
    Ok(())
}

/// Advances the world by one tick.
pub fn step(
    cfg: &SimConfig,
    spec: &ObjectSpec,
    state: &WorldState,
    wrist_cmds: &WristAction,
    finger_cmds: &[Vec<f64>; 2],
    rng: &mut Rng,
) -> Result<(WorldState, StepInfo)> {
    check_finite_cmds(wrist_cmds, finger_cmds)?;
    for f in finger_cmds {
        if f.len() != cfg.fingers {
            return Err(Error::Shape {
                expected: cfg.fingers,
                got: f.len(),
                context: "finger command".into(),
            });
        }
    }
    let mut next = state.clone();
    next.prev_object = state.object;
    next.prev_fingers = [state.hands[0].fingers.clone(), state.hands[1].fingers.clone()];

    // (1) wrists, (2) fingers
    let cmds = wrist_cmds.hands();
    for (h, hand) in next.hands.iter_mut().enumerate() {
        let carry = if state.attach[h].is_some() {
            spec.mass_scale.max(1.0)
        } else {
            1.0
        };
        hand.wrist = move_toward(
            &hand.wrist,
            &cmds[h],
            cfg.wrist_rate / carry,
            cfg.wrist_rot_rate,
        );
        for (f, &c) in hand.fingers.iter_mut().zip(&finger_cmds[h]) {
            let c = c.clamp(0.0, 1.0);
            *f += (c - *f).clamp(-cfg.finger_rate, cfg.finger_rate);
        }
    }

    // (3) attachment hysteresis, evaluated against the pre-step object pose
    let radius = cfg.effective_grasp_radius(spec);
    let mut info = StepInfo {
        attached: [false; 2],
        attached_now: [false; 2],
        detached_now: [false; 2],
    };
    for h in 0..2 {
        let closure = next.hands[h].closure();
        match next.attach[h] {
            Some(_) if closure < cfg.open_threshold => {
                next.attach[h] = None;
                info.detached_now[h] = true;
            }
            None if closure > cfg.close_threshold => {
                let wrist = next.hands[h].wrist;
                let nearest = (0..2)
                    .map(|s| {
                        let site = spec.site_world(&state.object, s);
                        (s, (site.translation - wrist.translation).norm())
                    })
                    .filter(|&(_, d)| d <= radius)
                    .min_by(|a, b| a.1.total_cmp(&b.1));
                if let Some((s, _)) = nearest {
                    let part = spec.site_part(s);
                    let grasp = wrist
                        .inverse()
                        .compose(&spec.part_pose(&state.object, part));
                    next.attach[h] = Some(Attachment { part, grasp });
                    info.attached_now[h] = true;
                }
            }
            _ => {}
        }
        info.attached[h] = next.attach[h].is_some();
    }

    // (4) attached parts follow their hands
    let implied = |part: Part| -> Vec<Pose> {
        (0..2)
            .filter_map(|h| match next.attach[h] {
                Some(a) if a.part == part => Some(next.hands[h].wrist.compose(&a.grasp)),
                _ => None,
            })
            .collect()
    };
    let base_held = implied(Part::Base);
    let child_held = if spec.articulated {
        implied(Part::Child)
    } else {
        Vec::new()
    };
    let mut obj = state.object;
    if !base_held.is_empty() {
        let b = mean_pose(&base_held);
        obj.translation = b.translation;
        obj.rotation = b.rotation;
    }
    if !child_held.is_empty() {
        let c = mean_pose(&child_held);
        let hinge0 = obj.pose().compose(&spec.hinge(0.0));
        let rel = hinge0.rotation.inverse() * c.rotation;
        obj.joint = Some(spec.clamp_joint(rel.twist_angle(&Vec3::x())));
    }
    // (5) free fall
    if base_held.is_empty() && child_held.is_empty() && obj.translation.z > 0.0 {
        obj.translation.z = (obj.translation.z - cfg.fall_rate).max(0.0);
    }
    if let Some(j) = obj.joint {
        obj.joint = Some(spec.clamp_joint(j));
    }
    // (6) process noise
    if cfg.process_noise {
        let nt = cfg.noise_translation;
        let nr = cfg.noise_rotation;
        let dt = Vec3::new(
            rng.random_range(-nt..=nt),
            rng.random_range(-nt..=nt),
            rng.random_range(-nt..=nt),
        );
        let dr = Vec3::new(
            rng.random_range(-nr..=nr),
            rng.random_range(-nr..=nr),
            rng.random_range(-nr..=nr),
        );
        obj.translation += dt;
        obj.rotation = obj.rotation * Rot::from_rotvec(&dr);
    }
    next.object = obj;
    next.last_wrist_cmd = Some(*wrist_cmds);
    next.last_finger_cmd = Some(finger_cmds.clone());
    next.step += 1;
    Ok((next, info))
}

/// Resamples the domain-randomization knobs. Poses are untouched.
pub fn randomize_domain(
    state: &WorldState,
    spec: &ObjectSpec,
    rng: &mut Rng,
) -> (WorldState, ObjectSpec) {
    let mut s = spec.clone();
    s.mass_scale = rng.random_range(0.8..=1.2);
    s.friction_scale = rng.random_range(0.8..=1.2);
    let mut st = state.clone();
    st.obs_noise_scale = rng.random_range(0.0..=1.5);
    (st, s)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObsMode {
    /// Privileged: includes object and finger velocities.
    Teacher,
    /// Deployable: no velocity entries.
    Student,
}

/// Sizes of the observation blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ObsLayout {
    pub fingers: usize,
    pub window: usize,
    pub wrist_window: bool,
    pub mode: ObsMode,
}

impl ObsLayout {
    pub fn velocity_dim(&self) -> usize {
        match self.mode {
            ObsMode::Teacher => 6 + 2 * self.fingers,
            ObsMode::Student => 0,
        }
    }

    pub fn dim(&self) -> usize {
        let prop = 7 + 1 + 14 + 2 * self.fingers;
        let prev = 14 + 2 * self.fingers;
        let goal = self.window * crate::traj::REL_FEATURES;
        let ww = if self.wrist_window { self.window * 14 } else { 0 };
        prop + prev + goal + ww + self.velocity_dim()
    }
}

fn push_pose(out: &mut Vec<f64>, p: &Pose) {
    out.extend_from_slice(&p.to_array());
}

/// `target` expressed in the frame of `frame`, as 7 numbers.
pub fn relative_pose_features(frame: &Pose, target: &Pose) -> [f64; 7] {
    frame.inverse().compose(target).to_array()
}

/// Builds the observation vector. `wrist_window` may be empty (flat
/// controllers), in which case the block is omitted.
pub fn observe(
    state: &WorldState,
    window: &GoalWindow,
    wrist_window: &[WristAction],
    mode: ObsMode,
    obs_noise: Option<(&SimConfig, &mut Rng)>,
) -> Vec<f64> {
    let mut object = state.object;
    if let Some((cfg, rng)) = obs_noise {
        let s = state.obs_noise_scale;
        if s > 0.0 {
            let nt = cfg.obs_noise_translation * s;
            let nr = cfg.obs_noise_rotation * s;
            object.translation += Vec3::new(
                rng.random_range(-nt..=nt),
                rng.random_range(-nt..=nt),
                rng.random_range(-nt..=nt),
            );
            object.rotation = object.rotation
                * Rot::from_rotvec(&Vec3::new(
                    rng.random_range(-nr..=nr),
                    rng.random_range(-nr..=nr),
                    rng.random_range(-nr..=nr),
                ));
        }
    }
    let nf = state.hands[0].fingers.len();
    let mut out = Vec::with_capacity(256);
    push_pose(&mut out, &object.pose());
    out.push(object.joint_or_zero());
    for h in &state.hands {
        push_pose(&mut out, &h.wrist);
    }
    for h in &state.hands {
        out.extend_from_slice(&h.fingers);
    }
    match (&state.last_wrist_cmd, &state.last_finger_cmd) {
        (Some(w), Some(f)) => {
            for (hand, cmd) in state.hands.iter().zip(w.hands()) {
                out.extend_from_slice(&relative_pose_features(&hand.wrist, &cmd));
            }
            for fc in f {
                out.extend_from_slice(fc);
            }
        }
        _ => out.extend(std::iter::repeat_n(0.0, 14 + 2 * nf)),
    }
    out.extend(relative_goal_window(window, &object));
    for wa in wrist_window {
        for (hand, p) in state.hands.iter().zip(wa.hands()) {
            out.extend_from_slice(&relative_pose_features(&hand.wrist, &p));
        }
    }
    if mode == ObsMode::Teacher {
        let lin = state.object.translation - state.prev_object.translation;
        let ang = (state.prev_object.rotation.inverse() * state.object.rotation).to_rotvec();
        out.extend_from_slice(&[lin.x, lin.y, lin.z, ang.x, ang.y, ang.z]);
        for (h, prev) in state.hands.iter().zip(&state.prev_fingers) {
            out.extend(h.fingers.iter().zip(prev).map(|(a, b)| a - b));
        }
    }
    out
}

/// One line of an episode log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLogRecord {
    pub step: usize,
    pub object: ObjectState,
    pub hands: [HandState; 2],
    pub attach: [Option<Attachment>; 2],
}

/// Owned simulation episode: spec, goal, world state, and its RNG.
#[derive(Clone, Debug)]
pub struct Episode {
    pub cfg: SimConfig,
    pub spec: ObjectSpec,
    pub goal: GoalTrajectory,
    pub state: WorldState,
    pub rng: Rng,
    /// Total simulated steps by the owning worker, used for the periodic
    /// domain re-randomization.
    pub sim_steps: usize,
    pub randomizations: usize,
    done: bool,
}

impl Episode {
    pub fn new(
        cfg: SimConfig,
        spec: ObjectSpec,
        goal: GoalTrajectory,
        mut rng: Rng,
        perturb_init: bool,
    ) -> Result<Episode> {
        spec.validate()?;
        if goal.len() < 2 {
            return Err(Error::Invalid("goal trajectory shorter than 2".into()));
        }
        let state = reset(&cfg, &spec, &goal, &mut rng, perturb_init);
        Ok(Episode {
            cfg,
            spec,
            goal,
            state,
            rng,
            sim_steps: 0,
            randomizations: 0,
            done: false,
        })
    }

    pub fn with_state(cfg: SimConfig, spec: ObjectSpec, goal: GoalTrajectory, rng: Rng, state: WorldState) -> Episode {
        Episode {
            cfg,
            spec,
            goal,
            state,
            rng,
            sim_steps: 0,
            randomizations: 0,
            done: false,
        }
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Marks the episode finished (threshold breach).
    pub fn terminate(&mut self) {
        self.done = true;
    }

    pub fn step(&mut self, wrist: &WristAction, fingers: &[Vec<f64>; 2]) -> Result<StepInfo> {
        if self.done {
            return Err(Error::Terminated(self.state.step));
        }
        let (next, info) = step(&self.cfg, &self.spec, &self.state, wrist, fingers, &mut self.rng)?;
        self.state = next;
        self.sim_steps += 1;
        if self.cfg.domain_randomization
            && self.cfg.randomize_every > 0
            && self.sim_steps % self.cfg.randomize_every == 0
        {
            let (st, sp) = randomize_domain(&self.state, &self.spec, &mut self.rng);
            self.state = st;
            self.spec = sp;
            self.randomizations += 1;
        }
        if self.state.step + 1 >= self.goal.len() {
            self.done = true;
        }
        Ok(info)
    }

    pub fn observe(&mut self, window: &GoalWindow, wrist_window: &[WristAction], mode: ObsMode) -> Vec<f64> {
        let noise = self.cfg.domain_randomization;
        if noise {
            observe(&self.state, window, wrist_window, mode, Some((&self.cfg, &mut self.rng)))
        } else {
            observe(&self.state, window, wrist_window, mode, None)
        }
    }

    pub fn log_record(&self) -> EpisodeLogRecord {
        EpisodeLogRecord {
            step: self.state.step,
            object: self.state.object,
            hands: self.state.hands.clone(),
            attach: self.state.attach,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::translation_error;
    use crate::rng::rng_from;
    use crate::traj::{goal_window_with_gaps, WINDOW_LEN};

    fn boxy() -> ObjectSpec {
        ObjectSpec::rigid(0, [0.2, 0.14, 0.1])
    }

    fn still_goal() -> GoalTrajectory {
        GoalTrajectory::new(vec![ObjectState::new(Vec3::zeros(), Rot::IDENTITY, None); 50], 0).unwrap()
    }

    fn open_cmd(cfg: &SimConfig, v: f64) -> [Vec<f64>; 2] {
        [vec![v; cfg.fingers], vec![v; cfg.fingers]]
    }

    /// Pre-grasp wrist pose for site `i`: site frame backed off 2 cm.
    fn pregrasp(spec: &ObjectSpec, obj: &ObjectState, i: usize) -> Pose {
        spec.site_world(obj, i)
            .compose(&Pose::from_translation(Vec3::new(0.0, 0.0, -0.02)))
    }

    #[test]
    fn idle_step_leaves_object() {
        let cfg = SimConfig::default();
        let spec = boxy();
        let g = still_goal();
        let mut rng = rng_from(0, &[]);
        let s0 = reset(&cfg, &spec, &g, &mut rng, false);
        assert_eq!(s0.object, g.states[0]);
        let (s1, _) = step(&cfg, &spec, &s0, &s0.wrists(), &open_cmd(&cfg, 0.0), &mut rng).unwrap();
        assert_eq!(s1.object, s0.object);
        assert_eq!(s1.step, 1);
    }

    fn grasped(closure: f64) -> (SimConfig, ObjectSpec, WorldState, Rng) {
        let cfg = SimConfig::default();
        let spec = boxy();
        let mut rng = rng_from(0, &[]);
        let mut s = reset(&cfg, &spec, &still_goal(), &mut rng, false);
        s.hands[0].wrist = pregrasp(&spec, &s.object, 0);
        s.hands[0].fingers = vec![closure; cfg.fingers];
        s.hands[1].fingers = vec![0.0; cfg.fingers];
        (cfg, spec, s, rng)
    }

    #[test]
    fn rigid_attachment_carries_object() {
        let (cfg, spec, s, mut rng) = grasped(1.0);
        let mut cmd = s.wrists();
        let fingers = [vec![1.0; cfg.fingers], vec![0.0; cfg.fingers]];
        let (s, info) = step(&cfg, &spec, &s, &cmd, &fingers, &mut rng).unwrap();
        assert!(info.attached_now[0]);
        assert_eq!(s.object.translation, Vec3::zeros());
        cmd.left.translation += Vec3::new(0.01, 0.0, 0.0);
        let (s, _) = step(&cfg, &spec, &s, &cmd, &fingers, &mut rng).unwrap();
        assert!((s.object.translation - Vec3::new(0.01, 0.0, 0.0)).norm() < 1e-12);
        // attachment conservation
        let a = s.attach[0].unwrap();
        let implied = s.hands[0].wrist.compose(&a.grasp);
        assert!((implied.translation - s.object.translation).norm() < 1e-9);
    }

    #[test]
    fn weak_closure_does_not_attach() {
        let (cfg, spec, s, mut rng) = grasped(0.3);
        let mut cmd = s.wrists();
        cmd.left.translation += Vec3::new(0.01, 0.0, 0.0);
        let fingers = [vec![0.3; cfg.fingers], vec![0.0; cfg.fingers]];
        let (s, info) = step(&cfg, &spec, &s, &cmd, &fingers, &mut rng).unwrap();
        assert!(!info.attached[0]);
        assert_eq!(s.object.translation, Vec3::zeros());
    }

    #[test]
    fn hysteresis_release_and_fall() {
        let (cfg, spec, s, mut rng) = grasped(1.0);
        let mut cmd = s.wrists();
        let closed = [vec![1.0; cfg.fingers], vec![0.0; cfg.fingers]];
        let (mut s, _) = step(&cfg, &spec, &s, &cmd, &closed, &mut rng).unwrap();
        for _ in 0..5 {
            cmd.left.translation.z += 0.02;
            s = step(&cfg, &spec, &s, &cmd, &closed, &mut rng).unwrap().0;
        }
        assert!((s.object.translation.z - 0.1).abs() < 1e-12);
        // 0.5 closure sits inside the hysteresis band: still attached
        let mid = [vec![0.5; cfg.fingers], vec![0.0; cfg.fingers]];
        for _ in 0..3 {
            s = step(&cfg, &spec, &s, &cmd, &mid, &mut rng).unwrap().0;
        }
        assert!(s.attach[0].is_some());
        let open = [vec![0.0; cfg.fingers], vec![0.0; cfg.fingers]];
        let (s2, info) = step(&cfg, &spec, &s, &cmd, &open, &mut rng).unwrap();
        assert!(info.detached_now[0]);
        assert!((s2.object.translation.z - 0.05).abs() < 1e-12);
        let (s3, _) = step(&cfg, &spec, &s2, &cmd, &open, &mut rng).unwrap();
        assert_eq!(s3.object.translation.z, 0.0);
    }

    #[test]
    fn wrist_rate_limits() {
        let cfg = SimConfig::default();
        let spec = boxy();
        let mut rng = rng_from(0, &[]);
        let s = reset(&cfg, &spec, &still_goal(), &mut rng, false);
        let far = WristAction::new(
            Pose::new(Vec3::new(1.0, 1.0, 1.0), Rot::about_z(2.0)),
            Pose::IDENTITY,
        );
        let (s1, _) = step(&cfg, &spec, &s, &far, &open_cmd(&cfg, 1.0), &mut rng).unwrap();
        let moved = (s1.hands[0].wrist.translation - s.hands[0].wrist.translation).norm();
        assert!(moved <= 0.02 + 1e-12);
        assert!(quat_angle(&s1.hands[0].wrist.rotation, &s.hands[0].wrist.rotation) <= 0.1 + 1e-9);
        assert!(s1.hands[0].fingers.iter().all(|&f| (f - 0.2).abs() < 1e-12));
    }

    #[test]
    fn non_finite_commands_rejected() {
        let cfg = SimConfig::default();
        let spec = boxy();
        let mut rng = rng_from(0, &[]);
        let s = reset(&cfg, &spec, &still_goal(), &mut rng, false);
        let mut bad = open_cmd(&cfg, 0.0);
        bad[1][2] = f64::NAN;
        assert!(step(&cfg, &spec, &s, &s.wrists(), &bad, &mut rng).is_err());
    }

    #[test]
    fn perturbed_reset_bounds() {
        let cfg = SimConfig::default();
        let spec = boxy();
        let g = still_goal();
        for seed in 0..200 {
            let mut rng = rng_from(seed, &[]);
            let s = reset(&cfg, &spec, &g, &mut rng, true);
            assert!(translation_error(&s.object.translation, &g.states[0].translation) <= 2.0 * 2f64.sqrt() + 1e-9);
            assert!(quat_angle(&s.object.rotation, &g.states[0].rotation) <= 30f64.to_radians() + 1e-9);
            assert_eq!(s.object.translation.z, 0.0);
        }
    }

    #[test]
    fn scale_examples() {
        let spec = boxy();
        assert_eq!(scale_object(&spec, 1.0, 1.0, 1.0).unwrap(), spec);
        let s = scale_object(&spec, 1.1, 1.0, 1.0).unwrap();
        assert!((s.dims[0] - 0.22).abs() < 1e-12);
        assert!((s.grasp_sites[0].translation.x + 0.11).abs() < 1e-12);
        assert!(scale_object(&spec, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn randomization_ranges_and_determinism() {
        let cfg = SimConfig::default();
        let spec = boxy();
        let mut rng = rng_from(0, &[]);
        let s = reset(&cfg, &spec, &still_goal(), &mut rng, false);
        for seed in 0..100 {
            let (st, sp) = randomize_domain(&s, &spec, &mut rng_from(seed, &[]));
            let (st2, sp2) = randomize_domain(&s, &spec, &mut rng_from(seed, &[]));
            assert_eq!(sp, sp2);
            assert_eq!(st, st2);
            let r = cfg.effective_grasp_radius(&sp);
            assert!((0.036 - 1e-12..=0.044 + 1e-12).contains(&r));
            assert_eq!(st.object, s.object);
        }
    }

    #[test]
    fn one_rerandomization_per_thousand_steps() {
        let cfg = SimConfig {
            domain_randomization: true,
            ..SimConfig::default()
        };
        let g = GoalTrajectory::new(vec![ObjectState::new(Vec3::zeros(), Rot::IDENTITY, None); 1001], 0).unwrap();
        let mut ep = Episode::new(cfg.clone(), boxy(), g, rng_from(0, &[]), false).unwrap();
        let hold = ep.state.wrists();
        let f = open_cmd(&cfg, 0.0);
        for _ in 0..1000 {
            ep.step(&hold, &f).unwrap();
        }
        assert_eq!(ep.randomizations, 1);
        assert!(ep.is_done());
        assert!(matches!(ep.step(&hold, &f), Err(Error::Terminated(_))));
    }

    #[test]
    fn lid_joint_follows_hand() {
        let cfg = SimConfig::default();
        let spec = ObjectSpec::lidded(2, [0.16, 0.16, 0.1], [0.0, 1.5]);
        let obj = ObjectState::new(Vec3::zeros(), Rot::IDENTITY, Some(0.0));
        let mut rng = rng_from(0, &[]);
        let mut s = reset_at(&cfg, &spec, obj);
        s.hands[1].wrist = pregrasp(&spec, &s.object, 1);
        s.hands[1].fingers = vec![1.0; cfg.fingers];
        let fingers = [vec![0.0; cfg.fingers], vec![1.0; cfg.fingers]];
        let (mut s, info) = step(&cfg, &spec, &s, &s.wrists(), &fingers, &mut rng).unwrap();
        assert!(info.attached_now[1]);
        for k in 1..=5 {
            let target = ObjectState::new(Vec3::zeros(), Rot::IDENTITY, Some(0.05 * k as f64));
            let cmd = WristAction::new(s.hands[0].wrist, pregrasp(&spec, &target, 1));
            s = step(&cfg, &spec, &s, &cmd, &fingers, &mut rng).unwrap().0;
            assert!((s.object.joint.unwrap() - 0.05 * k as f64).abs() < 1e-9);
            assert_eq!(s.object.translation, Vec3::zeros());
        }
        // over-rotation clamps at the limit
        let target = ObjectState::new(Vec3::zeros(), Rot::IDENTITY, Some(2.5));
        let cmd = WristAction::new(s.hands[0].wrist, pregrasp(&spec, &target, 1));
        for _ in 0..40 {
            s = step(&cfg, &spec, &s, &cmd, &fingers, &mut rng).unwrap().0;
            let j = s.object.joint.unwrap();
            assert!((0.0..=1.5).contains(&j));
        }
    }

    #[test]
    fn observation_layout() {
        let cfg = SimConfig::default();
        let spec = boxy();
        let g = still_goal();
        let mut rng = rng_from(0, &[]);
        let s = reset(&cfg, &spec, &g, &mut rng, false);
        let w = goal_window_with_gaps(&g, 0, &[1; WINDOW_LEN]);
        let ww = vec![s.wrists(); WINDOW_LEN];
        let teacher = observe(&s, &w, &ww, ObsMode::Teacher, None);
        let student = observe(&s, &w, &ww, ObsMode::Student, None);
        let lt = ObsLayout { fingers: 4, window: WINDOW_LEN, wrist_window: true, mode: ObsMode::Teacher };
        let ls = ObsLayout { mode: ObsMode::Student, ..lt };
        assert_eq!(teacher.len(), lt.dim());
        assert_eq!(student.len(), ls.dim());
        assert_eq!(student.len(), teacher.len() - lt.velocity_dim());
        // previous-action block is zero at reset
        let start = 7 + 1 + 14 + 8;
        assert!(student[start..start + 22].iter().all(|&v| v == 0.0));
        // goal block equal to current → zeros / identity
        let gstart = start + 22;
        for c in student[gstart..gstart + 80].chunks(8) {
            assert_eq!(c, &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        }
    }
}
