//! Scripted expert and synthetic demonstration datasets.
//!
//! The expert carries each grasp site rigidly along the goal: the wrist
//! target at step `t` is the world grasp-site pose of `g[t]` backed off along
//! the approach axis by a fixed standoff. Fingers stay open while the wrists
//! travel from home, then close at 0.1 per step and hold.

use std::f64::consts::PI;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{self, move_toward, ObjectSpec, SimConfig, WristAction};
use crate::error::{Error, Result};
use crate::eval::{completion_rate, CompletionThresholds};
use crate::geom::{quat_angle, ObjectState, Pose, Rot, Vec3};
use crate::rng::{rng_from, stream, Rng};
use crate::traj::{interpolate_keyposes, GoalTrajectory};

/// Wrist offset from its grasp site, in the site frame (m).
pub const STANDOFF: f64 = 0.02;
/// Finger closure increment per step while grasping.
pub const CLOSE_RATE: f64 = 0.1;
/// Steps needed to close from open to fully closed.
pub const CLOSE_STEPS: usize = 10;
const MAX_ATTEMPTS: u64 = 10;

/// Wrist pose that carries `site` of `spec` when the object is at `s`.
pub fn carry_pose(spec: &ObjectSpec, s: &ObjectState, site: usize) -> Pose {
    spec.site_world(s, site)
        .compose(&Pose::from_translation(Vec3::new(0.0, 0.0, -STANDOFF)))
}

pub fn carry_action(spec: &ObjectSpec, s: &ObjectState) -> WristAction {
    WristAction::new(carry_pose(spec, s, 0), carry_pose(spec, s, 1))
}

fn tips_array(p: &[Vec3]) -> Vec<[f64; 3]> {
    p.iter().map(|v| [v.x, v.y, v.z]).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Demo {
    pub category_id: usize,
    pub spec: ObjectSpec,
    /// Conditioning goal. Equals `object_states` for expert demos; harvested
    /// demos keep their perturbed goal here.
    pub goal: GoalTrajectory,
    pub object_states: Vec<ObjectState>,
    /// `wrist_poses[i]` is the wrist target associated with goal index `i`;
    /// replay commands `wrist_poses[t + 1]` at step `t`.
    pub wrist_poses: Vec<WristAction>,
    pub finger_closures: Vec<[Vec<f64>; 2]>,
    pub fingertips: Vec<[Vec<[f64; 3]>; 2]>,
    pub length: usize,
}

impl Demo {
    pub fn validate(&self) -> Result<()> {
        let n = self.length;
        let lens = [
            self.object_states.len(),
            self.wrist_poses.len(),
            self.finger_closures.len(),
            self.fingertips.len(),
            self.goal.len(),
        ];
        if let Some(&bad) = lens.iter().find(|&&l| l != n) {
            return Err(Error::Shape {
                expected: n,
                got: bad,
                context: "demo sequence length".into(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Trained,
    UnseenTraj,
    UnseenObj,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Trained, Split::UnseenTraj, Split::UnseenObj];

    pub fn name(&self) -> &'static str {
        match self {
            Split::Trained => "trained",
            Split::UnseenTraj => "unseen_traj",
            Split::UnseenObj => "unseen_obj",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DemoSet {
    pub demos: Vec<Demo>,
    pub splits: Vec<Split>,
}

impl DemoSet {
    pub fn push(&mut self, d: Demo, s: Split) {
        self.demos.push(d);
        self.splits.push(s);
    }

    pub fn len(&self) -> usize {
        self.demos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demos.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn split(&self, split: Split) -> Vec<&Demo> {
        self.indices(split).into_iter().map(|i| &self.demos[i]).collect()
    }

    /// Trained-split category specs, indexed by category id.
    pub fn category_specs(&self) -> Vec<Option<ObjectSpec>> {
        let n = self.demos.iter().map(|d| d.category_id + 1).max().unwrap_or(0);
        let mut out = vec![None; n];
        for d in &self.demos {
            out[d.category_id].get_or_insert_with(|| d.spec.clone());
        }
        out
    }
}

/// Solves `g` with the scripted expert and verifies the result by replay.
pub fn plan_expert(cfg: &SimConfig, spec: &ObjectSpec, g: &GoalTrajectory) -> Result<Demo> {
    spec.validate()?;
    let n = g.len();
    let carry: Vec<WristAction> = g.states.iter().map(|s| carry_action(spec, s)).collect();
    let rate = cfg.wrist_rate / spec.mass_scale.max(1.0);
    for (i, w) in carry.windows(2).enumerate() {
        for (h, (a, b)) in w[0].hands().iter().zip(w[1].hands()).enumerate() {
            let dt = (b.translation - a.translation).norm();
            let dr = quat_angle(&a.rotation, &b.rotation);
            if dt > rate + 1e-12 || dr > cfg.wrist_rot_rate + 1e-12 {
                return Err(Error::Infeasible {
                    step: i + 1,
                    reason: format!(
                        "hand {h} must move {dt:.4} m / {dr:.4} rad in one step (limits {rate} m / {} rad)",
                        cfg.wrist_rot_rate
                    ),
                });
            }
        }
    }
    // approach from home toward the resting carry pose
    let first_motion = g.first_motion_index().unwrap_or(n);
    let mut arrive = 0;
    for (h, home) in cfg.home.iter().enumerate() {
        let target = carry[0].hands()[h];
        let mut p = *home;
        let mut steps = 0;
        while p != target {
            p = move_toward(&p, &target, cfg.wrist_rate, cfg.wrist_rot_rate);
            steps += 1;
            if steps > n {
                break;
            }
        }
        arrive = arrive.max(steps);
    }
    if arrive + CLOSE_STEPS >= first_motion {
        return Err(Error::Infeasible {
            step: first_motion,
            reason: format!(
                "object starts moving at step {first_motion} but the grasp needs {} steps",
                arrive + CLOSE_STEPS + 1
            ),
        });
    }
    let finger_closures: Vec<[Vec<f64>; 2]> = (0..n)
        .map(|i| {
            let c = (CLOSE_RATE * i.saturating_sub(arrive) as f64).min(1.0);
            [vec![c; cfg.fingers], vec![c; cfg.fingers]]
        })
        .collect();
    let mut demo = Demo {
        category_id: spec.category_id,
        spec: spec.clone(),
        goal: g.clone(),
        object_states: g.states.clone(),
        wrist_poses: carry,
        finger_closures,
        fingertips: Vec::new(),
        length: n,
    };
    let replay = replay_demo(cfg, &demo)?;
    if let Some(k) = replay.violation {
        return Err(Error::Infeasible {
            step: k,
            reason: "expert replay breaks the completion thresholds".into(),
        });
    }
    demo.fingertips = replay.fingertips;
    Ok(demo)
}

/// Result of an open-loop replay.
#[derive(Clone, Debug)]
pub struct Replay {
    pub states: Vec<ObjectState>,
    pub fingertips: Vec<[Vec<[f64; 3]>; 2]>,
    pub completion: f64,
    pub violation: Option<usize>,
}

/// Replays the demo's commands from its first object state (noise off)
/// and scores the visited states against its goal.
pub fn replay_demo(cfg: &SimConfig, demo: &Demo) -> Result<Replay> {
    replay_demo_with(cfg, demo, &CompletionThresholds::default())
}

/// [`replay_demo`] scored under `th`.
pub fn replay_demo_with(cfg: &SimConfig, demo: &Demo, th: &CompletionThresholds) -> Result<Replay> {
    let cfg = SimConfig {
        process_noise: false,
        domain_randomization: false,
        ..cfg.clone()
    };
    let mut state = env::reset_at(&cfg, &demo.spec, demo.object_states[0]);
    let mut rng = rng_from(0, &[]);
    let mut states = vec![state.object];
    let mut tips = vec![[tips_array(&state.hands[0].fingertips()), tips_array(&state.hands[1].fingertips())]];
    for t in 0..demo.length - 1 {
        state = env::step(
            &cfg,
            &demo.spec,
            &state,
            &demo.wrist_poses[t + 1],
            &demo.finger_closures[t + 1],
            &mut rng,
        )?
        .0;
        states.push(state.object);
        tips.push([tips_array(&state.hands[0].fingertips()), tips_array(&state.hands[1].fingertips())]);
    }
    let longest = demo.spec.longest_dim();
    let violation = crate::eval::first_violation(&states, &demo.goal, th, longest);
    let completion = completion_rate(&states, &demo.goal, th, longest)?;
    Ok(Replay {
        states,
        fingertips: tips,
        completion,
        violation,
    })
}

/// Parametric task families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    Lift,
    LiftAndPlace,
    LidOpen,
    LiftWhileArticulate,
}

/// Phase boundaries: rest until `hold`, move until `end`, then rest.
fn phases(steps: usize) -> (usize, usize) {
    let hold = steps / 4;
    let end = ((steps as f64) * 0.9) as usize;
    (hold.max(1), end.clamp(hold + 2, steps - 1))
}

fn start_state(spec: &ObjectSpec, rng: &mut Rng) -> ObjectState {
    ObjectState::new(
        Vec3::new(rng.random_range(-0.03..=0.03), rng.random_range(-0.03..=0.03), 0.0),
        Rot::about_z(rng.random_range(-0.3..=0.3)),
        spec.rest_joint(),
    )
}

fn keyframes(start: ObjectState, mids: &[ObjectState], steps: usize, cat: usize) -> Result<GoalTrajectory> {
    let (hold, end) = phases(steps);
    let mut keys = vec![(start, 0), (start, hold)];
    let span = end - hold;
    for (i, s) in mids.iter().enumerate() {
        keys.push((*s, hold + span * (i + 1) / mids.len()));
    }
    let last = *mids.last().unwrap_or(&start);
    if end < steps - 1 {
        keys.push((last, steps - 1));
    }
    interpolate_keyposes(&keys, steps, cat)
}

/// Lift-and-drop: start on the table, raise by 0.10-0.20 m, land at a
/// lateral offset of at most 0.15 m.
pub fn keypose_task(spec: &ObjectSpec, steps: usize, rng: &mut Rng) -> Result<GoalTrajectory> {
    let start = start_state(spec, rng);
    let raise = rng.random_range(0.10..=0.20);
    let dir = rng.random_range(-PI..PI);
    let dist = rng.random_range(0.0..=0.15);
    let yaw = rng.random_range(-0.3..=0.3);
    keypose_lift_and_place(spec, start, raise, Vec3::new(dist * dir.cos(), dist * dir.sin(), 0.0), yaw, steps)
}

/// Deterministic lift-and-place from explicit parameters.
pub fn keypose_lift_and_place(
    spec: &ObjectSpec,
    start: ObjectState,
    raise: f64,
    lateral: Vec3,
    yaw: f64,
    steps: usize,
) -> Result<GoalTrajectory> {
    let mut raised = start;
    raised.translation.z += raise;
    raised.translation += lateral * 0.5;
    raised.rotation = Rot::about_z(yaw * 0.5) * start.rotation;
    let mut land = start;
    land.translation += lateral;
    land.rotation = Rot::about_z(yaw) * start.rotation;
    keyframes(start, &[raised, land], steps, spec.category_id)
}

pub fn family_task(spec: &ObjectSpec, family: TaskFamily, steps: usize, rng: &mut Rng) -> Result<GoalTrajectory> {
    let start = start_state(spec, rng);
    let cat = spec.category_id;
    let [lo, hi] = spec.joint_limits;
    match family {
        TaskFamily::LiftAndPlace => keypose_task(spec, steps, rng),
        TaskFamily::Lift => {
            let mut up = start;
            up.translation.z += rng.random_range(0.10..=0.20);
            up.rotation = Rot::about_z(rng.random_range(-0.3..=0.3)) * start.rotation;
            keyframes(start, &[up], steps, cat)
        }
        TaskFamily::LidOpen => {
            let mut open = start;
            open.joint = Some(rng.random_range(lo + 0.6..=(lo + 1.3).min(hi - 0.1)));
            keyframes(start, &[open], steps, cat)
        }
        TaskFamily::LiftWhileArticulate => {
            let mut up = start;
            up.translation.z += rng.random_range(0.08..=0.15);
            up.joint = Some(rng.random_range(lo + 0.5..=(lo + 1.1).min(hi - 0.1)));
            keyframes(start, &[up], steps, cat)
        }
    }
}

/// Families applicable to `spec`.
pub fn families_for(spec: &ObjectSpec) -> &'static [TaskFamily] {
    if spec.articulated {
        &[TaskFamily::LidOpen, TaskFamily::LiftWhileArticulate]
    } else {
        &[TaskFamily::Lift, TaskFamily::LiftAndPlace]
    }
}

/// Default desk-scale categories: four trained, the last one unseen.
pub fn default_categories() -> Vec<ObjectSpec> {
    vec![
        ObjectSpec::rigid(0, [0.20, 0.14, 0.10]),
        ObjectSpec::rigid(1, [0.12, 0.12, 0.20]),
        ObjectSpec::lidded(2, [0.24, 0.18, 0.03], [0.0, 1.8]),
        ObjectSpec::lidded(3, [0.16, 0.16, 0.10], [0.0, 1.5]),
        ObjectSpec::rigid(4, [0.16, 0.20, 0.08]),
    ]
}

/// Reference lift-and-place task used by the controller experiments.
pub fn reference_task(steps: usize) -> Result<(ObjectSpec, GoalTrajectory)> {
    let spec = default_categories().remove(0);
    let start = ObjectState::new(Vec3::zeros(), Rot::IDENTITY, None);
    let g = keypose_lift_and_place(&spec, start, 0.15, Vec3::new(0.10, 0.05, 0.0), 0.25, steps)?;
    Ok((spec, g))
}

/// Generates `per_category` demos per category. The last category is held
/// out entirely; the last `ceil(per_category / 5)` demos of every other
/// category form the unseen-trajectory split.
pub fn gen_dataset(
    cfg: &SimConfig,
    categories: &[ObjectSpec],
    per_category: usize,
    steps: usize,
    seed: u64,
) -> Result<DemoSet> {
    if categories.len() < 2 {
        return Err(Error::Invalid("need at least 2 categories".into()));
    }
    let unseen_traj = per_category.div_ceil(5);
    let jobs: Vec<(usize, usize)> = (0..categories.len())
        .flat_map(|c| (0..per_category).map(move |i| (c, i)))
        .collect();
    let demos: Vec<Result<Demo>> = jobs
        .par_iter()
        .map(|&(c, i)| {
            let spec = &categories[c];
            let mut last_err = None;
            for attempt in 0..MAX_ATTEMPTS {
                let mut rng = rng_from(seed, &[stream::DATASET, c as u64, i as u64, attempt]);
                let fams = families_for(spec);
                let fam = fams[rng.random_range(0..fams.len())];
                let res = family_task(spec, fam, steps, &mut rng).and_then(|g| plan_expert(cfg, spec, &g));
                match res {
                    Ok(d) => return Ok(d),
                    Err(e) => last_err = Some(e),
                }
            }
            Err(last_err.expect("at least one attempt"))
        })
        .collect();
    let mut set = DemoSet::default();
    let last_cat = categories.len() - 1;
    for ((c, i), d) in jobs.into_iter().zip(demos) {
        let split = if c == last_cat {
            Split::UnseenObj
        } else if i + unseen_traj >= per_category {
            Split::UnseenTraj
        } else {
            Split::Trained
        };
        set.push(d?, split);
    }
    Ok(set)
}
