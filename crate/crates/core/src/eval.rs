//! Completion metrics, task suites, the sampling-MPC baseline and reports.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dal::{AugmentFlags, AugmentRanges, Augmentation};
use crate::env::{self, ObjectSpec, SimConfig};
use crate::error::{Error, Result};
use crate::expert::{plan_expert, replay_demo_with, Demo, DemoSet, Split};
use crate::geom::{quat_angle, ObjectState};
use crate::planner::Planner;
use crate::rl::{action_to_commands, reward, run_episode, ActorCritic, Agent, ControlMode, EpisodeOpts, ResidualBounds, RewardWeights, Task};
use crate::rng::{rng_from, stream};
use crate::traj::{resample_interp, resample_skip, GoalTrajectory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationRule {
    /// `longest_dim * angle <= 0.025 m`
    Dimscaled,
    /// `angle <= 0.5 rad`
    Plain,
}

impl RotationRule {
    pub fn name(&self) -> &'static str {
        match self {
            RotationRule::Dimscaled => "dimscaled",
            RotationRule::Plain => "plain",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompletionThresholds {
    /// meters
    pub translation: f64,
    pub rotation_rule: RotationRule,
    /// meters, compared against `longest_dim * angle`
    pub dimscaled: f64,
    /// radians
    pub plain: f64,
    /// radians
    pub joint: f64,
}

impl Default for CompletionThresholds {
    fn default() -> Self {
        CompletionThresholds {
            translation: 0.05,
            rotation_rule: RotationRule::Dimscaled,
            dimscaled: 0.025,
            plain: 0.5,
            joint: 0.5,
        }
    }
}

impl CompletionThresholds {
    pub fn with_rule(rule: RotationRule) -> Self {
        CompletionThresholds {
            rotation_rule: rule,
            ..Self::default()
        }
    }

    /// True when `actual` breaks any threshold against `goal`.
    pub fn violates(&self, actual: &ObjectState, goal: &ObjectState, longest_dim: f64) -> bool {
        if (actual.translation - goal.translation).norm() > self.translation {
            return true;
        }
        let ang = quat_angle(&actual.rotation, &goal.rotation);
        let rot_bad = match self.rotation_rule {
            RotationRule::Dimscaled => longest_dim * ang > self.dimscaled,
            RotationRule::Plain => ang > self.plain,
        };
        if rot_bad {
            return true;
        }
        match (actual.joint, goal.joint) {
            (Some(a), Some(b)) => (a - b).abs() > self.joint,
            _ => false,
        }
    }
}

/// Index of the first state that breaks a threshold.
pub fn first_violation(
    actual: &[ObjectState],
    g: &GoalTrajectory,
    th: &CompletionThresholds,
    longest_dim: f64,
) -> Option<usize> {
    actual
        .iter()
        .zip(&g.states)
        .position(|(a, b)| th.violates(a, b, longest_dim))
}

/// Fraction of `g` tracked before the first threshold breach.
pub fn completion_rate(
    actual: &[ObjectState],
    g: &GoalTrajectory,
    th: &CompletionThresholds,
    longest_dim: f64,
) -> Result<f64> {
    if actual.len() > g.len() {
        return Err(Error::Invalid(format!(
            "actual sequence ({}) longer than goal ({})",
            actual.len(),
            g.len()
        )));
    }
    let n = g.len() as f64;
    Ok(match first_violation(actual, g, th, longest_dim) {
        Some(k) => k as f64 / n,
        None if actual.len() == g.len() => 1.0,
        None => actual.len() as f64 / n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcConfig {
    pub horizon: usize,
    pub samples: usize,
    /// Raw-action noise, matching the controller's initial exploration.
    pub sigma_wrist: f64,
    pub sigma_fingers: f64,
    pub wrist_scale: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig {
            horizon: 10,
            samples: 64,
            sigma_wrist: (-1.0f64).exp(),
            sigma_fingers: 0.5f64.exp(),
            wrist_scale: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpcOutcome {
    pub completion: f64,
    pub ret: f64,
    pub states: Vec<ObjectState>,
}

/// Sampling MPC in the flat (absolute wrist + finger) action space. Each
/// step scores `samples` perturbations of the shifted previous plan on
/// cloned simulator states and executes the best first action. Candidate 0
/// is always the unperturbed plan.
pub fn mpc_baseline(
    sim: &SimConfig,
    spec: &ObjectSpec,
    g: &GoalTrajectory,
    init: ObjectState,
    cfg: &MpcConfig,
    w: &RewardWeights,
    th: &CompletionThresholds,
    seed: u64,
) -> Result<MpcOutcome> {
    if cfg.horizon < 1 || cfg.samples < 1 {
        return Err(Error::Config("mpc needs horizon >= 1 and samples >= 1".into()));
    }
    let f = sim.fingers;
    let dim = ControlMode::Vanilla.act_dim(f);
    let sim = SimConfig {
        process_noise: false,
        domain_randomization: false,
        ..sim.clone()
    };
    let nw = Normal::new(0.0, cfg.sigma_wrist.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let nf = Normal::new(0.0, cfg.sigma_fingers.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = rng_from(seed, &[stream::MPC]);
    let bounds = ResidualBounds::default();
    let cmd = |a: &[f64]| action_to_commands(ControlMode::Vanilla, a, None, &sim.home, f, cfg.wrist_scale, &bounds);
    let mut state = env::reset_at(&sim, spec, init);
    let mut plan = vec![vec![0.0; dim]; cfg.horizon];
    let mut out = MpcOutcome {
        completion: 0.0,
        ret: 0.0,
        states: vec![state.object],
    };
    let longest = spec.longest_dim();
    let n = g.len();
    let mut breach = th.violates(&state.object, &g.states[0], longest).then_some(0);
    let mut t = 0;
    while breach.is_none() && t + 1 < n {
        let cands: Vec<Vec<Vec<f64>>> = (0..cfg.samples)
            .map(|k| {
                plan.iter()
                    .map(|a| {
                        a.iter()
                            .enumerate()
                            .map(|(j, v)| {
                                if k == 0 {
                                    *v
                                } else if j < 12 {
                                    v + nw.sample(&mut rng)
                                } else {
                                    v + nf.sample(&mut rng)
                                }
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let scores: Vec<Result<f64>> = cands
            .par_iter()
            .map(|seq| {
                let mut s = state.clone();
                let mut r = rng_from(0, &[]);
                let mut total = 0.0;
                for (h, a) in seq.iter().enumerate() {
                    let (wc, fc) = cmd(a)?;
                    s = env::step(&sim, spec, &s, &wc, &fc, &mut r)?.0;
                    total += reward(g.state(t + 1 + h), &s.object, w);
                }
                Ok(total)
            })
            .collect();
        let mut best = (0, f64::NEG_INFINITY);
        for (k, sc) in scores.into_iter().enumerate() {
            let sc = sc?;
            if sc > best.1 {
                best = (k, sc);
            }
        }
        let chosen = &cands[best.0];
        let (wc, fc) = cmd(&chosen[0])?;
        state = env::step(&sim, spec, &state, &wc, &fc, &mut rng_from(0, &[]))?.0;
        t += 1;
        out.states.push(state.object);
        out.ret += reward(g.state(t), &state.object, w);
        if th.violates(&state.object, g.state(t), longest) {
            breach = Some(t);
        }
        plan = chosen[1..].to_vec();
        plan.push(chosen[cfg.horizon - 1].clone());
    }
    out.completion = match breach {
        Some(k) => k as f64 / n as f64,
        None => 1.0,
    };
    Ok(out)
}

/// Goal-trajectory resampling variants for the time-gap study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeVariant {
    Original,
    Skip1,
    Skip2,
    Interp1,
    Interp2,
    /// Original goal, windows built with random gaps.
    RandomGap,
}

impl TimeVariant {
    pub const ALL: [TimeVariant; 6] = [
        TimeVariant::Original,
        TimeVariant::Skip1,
        TimeVariant::Skip2,
        TimeVariant::Interp1,
        TimeVariant::Interp2,
        TimeVariant::RandomGap,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TimeVariant::Original => "original",
            TimeVariant::Skip1 => "skip1",
            TimeVariant::Skip2 => "skip2",
            TimeVariant::Interp1 => "interp1",
            TimeVariant::Interp2 => "interp2",
            TimeVariant::RandomGap => "random_gap",
        }
    }

    pub fn apply(&self, g: &GoalTrajectory) -> Result<GoalTrajectory> {
        match self {
            TimeVariant::Original | TimeVariant::RandomGap => Ok(g.clone()),
            TimeVariant::Skip1 => resample_skip(g, 1),
            TimeVariant::Skip2 => resample_skip(g, 2),
            TimeVariant::Interp1 => resample_interp(g, 1),
            TimeVariant::Interp2 => resample_interp(g, 2),
        }
    }
}

/// Completion of `agent` on `task` under each variant, averaged over
/// `episodes` sampled rollouts.
pub fn time_gap_study(
    agent: &Agent,
    sim: &SimConfig,
    task: &Task,
    th: &CompletionThresholds,
    episodes: usize,
    seed: u64,
) -> Result<Vec<(TimeVariant, f64)>> {
    TimeVariant::ALL
        .iter()
        .map(|v| {
            let goal = v.apply(&task.goal)?;
            let t = Task {
                goal,
                ..task.clone()
            };
            let reps = episodes.max(1);
            let mut sum = 0.0;
            for r in 0..reps {
                let mut rng = rng_from(seed, &[stream::EVAL, *v as u64, r as u64]);
                let out = run_episode(
                    agent,
                    sim,
                    &t,
                    t.goal.states[0],
                    th,
                    &RewardWeights::default(),
                    EpisodeOpts {
                        random_gaps: *v == TimeVariant::RandomGap,
                        ..EpisodeOpts::EVAL
                    },
                    &mut rng,
                )?;
                sum += out.completion;
            }
            Ok((*v, sum / reps as f64))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ours,
    OursNoDal,
    OursFr,
    VanillaRl,
    ExpertReplay,
    Mpc,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Ours,
        Method::OursNoDal,
        Method::OursFr,
        Method::VanillaRl,
        Method::ExpertReplay,
        Method::Mpc,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::OursNoDal => "ours_no_dal",
            Method::OursFr => "ours_fr",
            Method::VanillaRl => "vanilla_rl",
            Method::ExpertReplay => "expert_replay",
            Method::Mpc => "mpc",
        }
    }

    pub fn needs_controller(&self) -> bool {
        !matches!(self, Method::ExpertReplay | Method::Mpc)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteTask {
    SingleObjTrainedTraj,
    SingleObjUnseenTraj,
    MultiObjTrained,
    MultiObjUnseen,
}

impl SuiteTask {
    pub const ALL: [SuiteTask; 4] = [
        SuiteTask::SingleObjTrainedTraj,
        SuiteTask::SingleObjUnseenTraj,
        SuiteTask::MultiObjTrained,
        SuiteTask::MultiObjUnseen,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SuiteTask::SingleObjTrainedTraj => "single_obj_trained_traj",
            SuiteTask::SingleObjUnseenTraj => "single_obj_unseen_traj",
            SuiteTask::MultiObjTrained => "multi_obj_trained",
            SuiteTask::MultiObjUnseen => "multi_obj_unseen",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub seeds: usize,
    pub methods: Vec<Method>,
    pub tasks: Vec<SuiteTask>,
    /// Perturbations applied to every evaluation episode.
    pub perturb: AugmentFlags,
    pub thresholds: CompletionThresholds,
    pub mpc: MpcConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seeds: 10,
            methods: Method::ALL.to_vec(),
            tasks: SuiteTask::ALL.to_vec(),
            perturb: AugmentFlags::NONE,
            thresholds: CompletionThresholds::default(),
            mpc: MpcConfig::default(),
        }
    }
}

/// Trained artifacts for one learned method at one seed.
#[derive(Clone, Debug)]
pub struct MethodArtifacts {
    pub planner: Option<Planner>,
    pub controller: ActorCritic,
}

/// Inputs of [`run_task_suite`]. `artifacts[(method, seed)]` must exist for
/// every learned method and evaluated seed.
pub struct SuiteInputs<'a> {
    pub sim: &'a SimConfig,
    pub data: &'a DemoSet,
    /// The controller's training task (single object, trained trajectory).
    pub reference: &'a Task,
    pub artifacts: &'a BTreeMap<(Method, u64), MethodArtifacts>,
    pub config_hash: &'a str,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub task: SuiteTask,
    pub method: Method,
    pub seed: u64,
    pub completion: f64,
    pub rotation_rule: RotationRule,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalAggregate {
    pub task: SuiteTask,
    pub method: Method,
    pub mean: f64,
    /// Sample std; absent with fewer than 2 seeds.
    pub std: Option<f64>,
    pub seeds: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn aggregates(&self) -> Vec<EvalAggregate> {
        let mut cells: BTreeMap<(SuiteTask, Method), Vec<f64>> = BTreeMap::new();
        for r in &self.rows {
            cells.entry((r.task, r.method)).or_default().push(r.completion);
        }
        cells
            .into_iter()
            .map(|((task, method), v)| {
                let (mean, std) = mean_std(&v);
                EvalAggregate {
                    task,
                    method,
                    mean,
                    std,
                    seeds: v.len(),
                }
            })
            .collect()
    }

    pub fn seeds(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.rows.iter().map(|r| r.seed).collect();
        s.sort_unstable();
        s.dedup();
        s
    }
}

/// Mean and sample standard deviation (absent below 2 values).
pub fn mean_std(v: &[f64]) -> (f64, Option<f64>) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, None);
    }
    let m = v.iter().sum::<f64>() / n;
    let s = (v.len() >= 2).then(|| (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (m, s)
}

fn task_demos<'a>(data: &'a DemoSet, t: SuiteTask) -> Vec<&'a Demo> {
    let first_cat = data.demos.first().map(|d| d.category_id).unwrap_or(0);
    match t {
        SuiteTask::SingleObjTrainedTraj => Vec::new(),
        SuiteTask::SingleObjUnseenTraj => data
            .split(Split::UnseenTraj)
            .into_iter()
            .filter(|d| d.category_id == first_cat)
            .collect(),
        SuiteTask::MultiObjTrained => data.split(Split::Trained),
        SuiteTask::MultiObjUnseen => data.split(Split::UnseenObj),
    }
}

/// Runs the configured (task, method, seed) matrix. Each cell picks one
/// episode of its task per seed.
pub fn run_task_suite(inputs: &SuiteInputs, cfg: &EvalConfig) -> Result<EvalReport> {
    for m in &cfg.methods {
        if !m.needs_controller() {
            continue;
        }
        for s in 0..cfg.seeds as u64 {
            if !inputs.artifacts.contains_key(&(*m, s)) {
                return Err(Error::MissingArtifact(format!("controller for method {} seed {s}", m.name())));
            }
        }
    }
    let cells: Vec<(SuiteTask, Method, u64)> = cfg
        .tasks
        .iter()
        .flat_map(|t| cfg.methods.iter().flat_map(move |m| (0..cfg.seeds as u64).map(move |s| (*t, *m, s))))
        .collect();
    let rows: Vec<Result<EvalRow>> = cells
        .par_iter()
        .map(|&(t, m, seed)| {
            let completion = run_cell(inputs, cfg, t, m, seed)?;
            Ok(EvalRow {
                task: t,
                method: m,
                seed,
                completion,
                rotation_rule: cfg.thresholds.rotation_rule,
                config_hash: inputs.config_hash.to_string(),
            })
        })
        .collect();
    Ok(EvalReport {
        rows: rows.into_iter().collect::<Result<_>>()?,
    })
}

fn run_cell(inputs: &SuiteInputs, cfg: &EvalConfig, t: SuiteTask, m: Method, seed: u64) -> Result<f64> {
    let mut rng = rng_from(seed, &[stream::EVAL, t as u64]);
    let base: Task = if t == SuiteTask::SingleObjTrainedTraj {
        inputs.reference.clone()
    } else {
        let demos = task_demos(inputs.data, t);
        if demos.is_empty() {
            return Err(Error::MissingArtifact(format!("demos for task {}", t.name())));
        }
        let d = demos[rng.random_range(0..demos.len())];
        Task::new(d.spec.clone(), d.goal.clone())
    };
    let aug = Augmentation::sample_in(&mut rng, base.goal.len(), cfg.perturb, &AugmentRanges::default());
    let (spec, goal, init) = aug.apply(&base.spec, &base.goal)?;
    let task = Task {
        spec,
        goal,
        demo_tips: None,
    };
    match m {
        Method::ExpertReplay => {
            // open-loop replay of the unperturbed expert under the perturbed episode
            let mut demo = plan_expert(inputs.sim, &base.spec, &base.goal)?;
            demo.spec = task.spec.clone();
            demo.goal = task.goal.clone();
            demo.object_states[0] = init;
            Ok(replay_demo_with(inputs.sim, &demo, &cfg.thresholds)?.completion)
        }
        Method::Mpc => Ok(mpc_baseline(
            inputs.sim,
            &task.spec,
            &task.goal,
            init,
            &cfg.mpc,
            &RewardWeights::default(),
            &cfg.thresholds,
            seed,
        )?
        .completion),
        _ => {
            let a = &inputs.artifacts[&(m, seed)];
            let agent = Agent {
                planner: a.planner.as_ref(),
                ac: &a.controller,
                bounds: ResidualBounds::default(),
                force_category: t == SuiteTask::MultiObjUnseen,
            };
            let out = run_episode(
                &agent,
                inputs.sim,
                &task,
                init,
                &cfg.thresholds,
                &RewardWeights::default(),
                EpisodeOpts::EVAL,
                &mut rng,
            )?;
            Ok(out.completion)
        }
    }
}

/// Writes `{stem}.csv` (one row per cell and seed) and `{stem}.json`
/// (aggregates plus metadata).
pub fn emit_report(r: &EvalReport, dir: &Path, stem: &str, config_hash: &str) -> Result<()> {
    crate::io::write_csv(&dir.join(format!("{stem}.csv")), &format!("config_hash={config_hash}"), &r.rows)?;
    #[derive(Serialize)]
    struct Doc<'a> {
        config_hash: &'a str,
        seeds: Vec<u64>,
        rotation_rules: Vec<&'static str>,
        aggregates: Vec<EvalAggregate>,
    }
    let mut rules: Vec<&'static str> = r.rows.iter().map(|x| x.rotation_rule.name()).collect();
    rules.sort_unstable();
    rules.dedup();
    crate::io::write_json(
        &dir.join(format!("{stem}.json")),
        &Doc {
            config_hash,
            seeds: r.seeds(),
            rotation_rules: rules,
            aggregates: r.aggregates(),
        },
    )
}

pub fn read_report(csv_path: &Path) -> Result<EvalReport> {
    Ok(EvalReport {
        rows: crate::io::read_csv(csv_path)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{Rot, Vec3};

    fn still(n: usize) -> GoalTrajectory {
        GoalTrajectory::new(vec![ObjectState::new(Vec3::zeros(), Rot::IDENTITY, None); n], 0).unwrap()
    }

    #[test]
    fn completion_examples() {
        let g = still(500);
        let th = CompletionThresholds::default();
        assert_eq!(completion_rate(&g.states, &g, &th, 0.2).unwrap(), 1.0);
        let mut actual = g.states.clone();
        actual[250].translation.x = 0.06;
        assert_eq!(completion_rate(&actual, &g, &th, 0.2).unwrap(), 0.5);
        let rotated = ObjectState::new(Vec3::zeros(), Rot::about_z(0.11), None);
        assert!(th.violates(&rotated, &g.states[0], 0.25));
        assert!(!CompletionThresholds::with_rule(RotationRule::Plain).violates(&rotated, &g.states[0], 0.25));
    }
}
