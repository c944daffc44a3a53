//! Data augmentation loop: augmented RL training, success harvesting and
//! planner fine-tuning, alternated for a fixed number of iterations.

use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{scale_object, InitPerturbation, ObjectSpec, SimConfig, INIT_XY_RANGE, INIT_YAW_MAX_DEG};
use crate::error::{Error, Result};
use crate::eval::{CompletionThresholds, RotationRule};
use crate::expert::Demo;
use crate::geom::{ObjectState, Vec3};
use crate::planner::{finetune, PlannerConfig};
use crate::rl::{run_episode, EpisodeOpts, EpisodeOutcome, Task, TaskSource, Trainer};
use crate::rng::{derive_seed, rng_from, stream, Rng};
use crate::traj::{perturb_goal_span, GoalTrajectory, GOAL_OFFSET_RANGE, MIN_PERTURB_SPAN};

pub const SCALE_RANGE: [f64; 2] = [0.9, 1.1];

/// Sampling intervals for each augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentRanges {
    pub scale: [f64; 2],
    /// meters, symmetric
    pub init_xy: f64,
    /// degrees, drawn from `[0, init_yaw_deg]`
    pub init_yaw_deg: f64,
    /// meters per axis, symmetric
    pub goal_offset: f64,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        AugmentRanges {
            scale: SCALE_RANGE,
            init_xy: INIT_XY_RANGE,
            init_yaw_deg: INIT_YAW_MAX_DEG,
            goal_offset: GOAL_OFFSET_RANGE,
        }
    }
}

impl AugmentRanges {
    pub fn validate(&self) -> Result<()> {
        let ok = self.scale[0] > 0.0
            && self.scale[0] <= self.scale[1]
            && self.init_xy >= 0.0
            && (0.0..=180.0).contains(&self.init_yaw_deg)
            && self.goal_offset >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("bad augmentation ranges {self:?}")))
        }
    }
}

/// Which augmentations are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentFlags {
    pub scale: bool,
    pub init: bool,
    pub goal: bool,
}

impl AugmentFlags {
    pub const NONE: AugmentFlags = AugmentFlags {
        scale: false,
        init: false,
        goal: false,
    };
    pub const ALL: AugmentFlags = AugmentFlags {
        scale: true,
        init: true,
        goal: true,
    };

    pub fn any(&self) -> bool {
        self.scale || self.init || self.goal
    }
}

/// One augmentation draw. Disabled components hold identity values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    pub scale: [f64; 3],
    pub init: InitPerturbation,
    pub goal_offset: Vec3,
    pub goal_span: (usize, usize),
}

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation {
        scale: [1.0; 3],
        init: InitPerturbation {
            dx: 0.0,
            dy: 0.0,
            yaw: 0.0,
        },
        goal_offset: Vec3::new(0.0, 0.0, 0.0),
        goal_span: (0, 0),
    };

    pub fn sample(rng: &mut Rng, goal_len: usize, flags: AugmentFlags) -> Augmentation {
        Self::sample_in(rng, goal_len, flags, &AugmentRanges::default())
    }

    pub fn sample_in(rng: &mut Rng, goal_len: usize, flags: AugmentFlags, r: &AugmentRanges) -> Augmentation {
        let mut a = Augmentation::IDENTITY;
        if flags.scale {
            for s in &mut a.scale {
                *s = rng.random_range(r.scale[0]..=r.scale[1]);
            }
        }
        if flags.init {
            a.init = InitPerturbation {
                dx: rng.random_range(-r.init_xy..=r.init_xy),
                dy: rng.random_range(-r.init_xy..=r.init_xy),
                yaw: rng.random_range(0.0..=r.init_yaw_deg).to_radians(),
            };
        }
        if flags.goal {
            let o = r.goal_offset;
            a.goal_offset = Vec3::new(
                rng.random_range(-o..=o),
                rng.random_range(-o..=o),
                rng.random_range(-o..=o),
            );
            let last = goal_len.saturating_sub(1);
            a.goal_span = if last <= MIN_PERTURB_SPAN {
                (0, last)
            } else {
                let start = rng.random_range(0..=last - MIN_PERTURB_SPAN);
                (start, rng.random_range(start + MIN_PERTURB_SPAN..=last))
            };
        }
        assert!(a.within(r), "augmentation draw left its ranges: {a:?}");
        a
    }

    /// True when every component lies inside the default ranges.
    pub fn within_ranges(&self) -> bool {
        self.within(&AugmentRanges::default())
    }

    pub fn within(&self, r: &AugmentRanges) -> bool {
        let s = self.scale.iter().all(|v| (r.scale[0]..=r.scale[1]).contains(v) || *v == 1.0);
        let xy = [self.init.dx, self.init.dy].iter().all(|v| v.abs() <= r.init_xy);
        let yaw = (0.0..=r.init_yaw_deg.to_radians()).contains(&self.init.yaw);
        let g = self.goal_offset.iter().all(|v| v.abs() <= r.goal_offset);
        s && xy && yaw && g
    }

    /// Applies the draw: scaled spec, perturbed goal, initial object state.
    pub fn apply(&self, spec: &ObjectSpec, goal: &GoalTrajectory) -> Result<(ObjectSpec, GoalTrajectory, ObjectState)> {
        let spec = scale_object(spec, self.scale[0], self.scale[1], self.scale[2])?;
        let goal = if self.goal_offset == Vec3::zeros() {
            goal.clone()
        } else {
            perturb_goal_span(goal, self.goal_offset, self.goal_span.0, self.goal_span.1)
        };
        let init = self.init.apply(&goal.states[0]);
        Ok((spec, goal, init))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DalConfig {
    pub iterations: usize,
    pub ranges: AugmentRanges,
    pub augment: AugmentFlags,
    pub rl_updates_per_iter: usize,
    /// Deterministic episodes scored per iteration; the complete ones are
    /// harvested.
    pub harvest_episodes: usize,
    /// Completion an episode needs to be harvested.
    pub harvest_completion: f64,
    pub thresholds: CompletionThresholds,
}

impl Default for DalConfig {
    fn default() -> Self {
        DalConfig {
            iterations: 4,
            ranges: AugmentRanges::default(),
            augment: AugmentFlags::ALL,
            rl_updates_per_iter: 50,
            harvest_episodes: 32,
            harvest_completion: 1.0,
            thresholds: CompletionThresholds::with_rule(RotationRule::Plain),
        }
    }
}

impl DalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("dal iterations must be at least 1".into()));
        }
        if self.harvest_episodes == 0 {
            return Err(Error::Config("dal harvest_episodes must be at least 1".into()));
        }
        self.ranges.validate()
    }
}

/// One row of the per-iteration report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DalRow {
    pub iter: usize,
    pub episodes: usize,
    pub harvested: usize,
    pub completion_mean: f64,
    pub completion_std: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DalReport {
    pub rows: Vec<DalRow>,
}

/// Converts a finished rollout into a replayable demo. Index 0 repeats the
/// first command so every goal index has a wrist target.
pub fn outcome_to_demo(out: &EpisodeOutcome) -> Result<Demo> {
    let n = out.states.len();
    if n != out.goal.len() || out.wrist_cmds.len() + 1 != n {
        return Err(Error::Invalid("only complete rollouts become demos".into()));
    }
    let mut wrist_poses = vec![out.wrist_cmds[0]];
    wrist_poses.extend(out.wrist_cmds.iter().copied());
    let mut finger_closures = vec![out.finger_cmds[0].clone()];
    finger_closures.extend(out.finger_cmds.iter().cloned());
    let d = Demo {
        category_id: out.goal.category_id,
        spec: out.spec.clone(),
        goal: out.goal.clone(),
        object_states: out.states.clone(),
        wrist_poses,
        finger_closures,
        fingertips: out.fingertips.clone(),
        length: n,
    };
    d.validate()?;
    Ok(d)
}

/// Scores `episodes` sampled augmented rollouts; returns the harvest
/// and every episode's completion.
pub fn harvest(
    trainer: &Trainer,
    tasks: &[Task],
    cfg: &DalConfig,
    seed: u64,
    iter: usize,
) -> Result<(Vec<Demo>, Vec<f64>)> {
    let agent = trainer.agent();
    let sim = SimConfig {
        process_noise: false,
        domain_randomization: false,
        ..trainer.env.sim.clone()
    };
    let results: Vec<Result<(Option<Demo>, f64)>> = (0..cfg.harvest_episodes)
        .into_par_iter()
        .map(|k| {
            let mut rng = rng_from(seed, &[stream::DAL, iter as u64, k as u64]);
            let base = &tasks[rng.random_range(0..tasks.len())];
            let aug = Augmentation::sample_in(&mut rng, base.goal.len(), cfg.augment, &cfg.ranges);
            let (spec, goal, init) = aug.apply(&base.spec, &base.goal)?;
            let task = Task {
                spec,
                goal,
                demo_tips: None,
            };
            let out = run_episode(
                &agent,
                &sim,
                &task,
                init,
                &cfg.thresholds,
                &trainer.env.weights,
                EpisodeOpts::EVAL,
                &mut rng,
            )?;
            let demo = if out.completion >= cfg.harvest_completion {
                Some(outcome_to_demo(&out)?)
            } else {
                None
            };
            Ok((demo, out.completion))
        })
        .collect();
    let mut demos = Vec::new();
    let mut comps = Vec::new();
    for r in results {
        let (d, c) = r?;
        demos.extend(d);
        comps.push(c);
    }
    Ok((demos, comps))
}

/// Augmented RL, harvest, planner fine-tune. The trainer keeps its policy
/// across iterations; `dataset` only grows.
pub fn dal_iteration(
    trainer: &mut Trainer,
    tasks: &[Task],
    original: &[&Demo],
    dataset: &mut Vec<Demo>,
    planner_cfg: &PlannerConfig,
    cfg: &DalConfig,
    seed: u64,
    iter: usize,
) -> Result<DalRow> {
    if trainer.planner.is_none() {
        return Err(Error::MissingArtifact("planner for the augmentation loop".into()));
    }
    if tasks.is_empty() {
        return Err(Error::Invalid("no tasks to augment".into()));
    }
    trainer.set_source(TaskSource {
        tasks: tasks.to_vec(),
        augment: cfg.augment,
        ranges: cfg.ranges,
    });
    trainer.env.thresholds = cfg.thresholds;
    trainer.train(cfg.rl_updates_per_iter)?;
    let (demos, comps) = harvest(trainer, tasks, cfg, seed, iter)?;
    if demos.is_empty() {
        log::warn!("dal iteration {iter}: nothing harvested, fine-tune skipped");
    }
    dataset.extend(demos.iter().cloned());
    let planner = trainer.planner.as_ref().expect("checked above");
    let tuned = finetune(planner, original, dataset, planner_cfg, derive_seed(seed, &[stream::DAL, iter as u64]))?;
    trainer.planner = Some(tuned);
    let n = comps.len() as f64;
    let mean = comps.iter().sum::<f64>() / n;
    let std = if comps.len() > 1 {
        (comps.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(DalRow {
        iter,
        episodes: comps.len(),
        harvested: demos.len(),
        completion_mean: mean,
        completion_std: std,
    })
}

/// Runs `cfg.iterations` loop iterations; returns the report and the
/// accumulated harvest.
pub fn dal_run(
    trainer: &mut Trainer,
    tasks: &[Task],
    original: &[&Demo],
    planner_cfg: &PlannerConfig,
    cfg: &DalConfig,
    seed: u64,
) -> Result<(DalReport, Vec<Demo>)> {
    cfg.validate()?;
    let mut report = DalReport::default();
    let mut dataset = Vec::new();
    for iter in 0..cfg.iterations {
        let row = dal_iteration(trainer, tasks, original, &mut dataset, planner_cfg, cfg, seed, iter)?;
        log::info!(
            "dal iteration {iter}: harvested {}/{} completion {:.3}",
            row.harvested,
            row.episodes,
            row.completion_mean
        );
        report.rows.push(row);
    }
    Ok((report, dataset))
}

/// Writes the per-iteration report as CSV.
pub fn write_report(report: &DalReport, path: &Path, header: &str) -> Result<()> {
    let mut w = crate::io::csv_writer(path, header)?;
    for r in &report.rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn disabled_augmentation_is_identity() {
        let mut rng = rng_from(0, &[]);
        assert_eq!(Augmentation::sample(&mut rng, 100, AugmentFlags::NONE), Augmentation::IDENTITY);
    }

    #[test]
    fn draws_stay_in_range() {
        let mut rng = rng_from(1, &[]);
        for _ in 0..2000 {
            let a = Augmentation::sample(&mut rng, 200, AugmentFlags::ALL);
            assert!(a.within_ranges());
            assert!(a.goal_span.1 >= a.goal_span.0 + MIN_PERTURB_SPAN);
        }
    }
}
