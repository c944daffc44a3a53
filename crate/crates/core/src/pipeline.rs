//! Stage functions behind the command-line tool. Each stage reads its
//! inputs from, and writes its artifacts under, one output root.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dal::{dal_run, write_report, DalReport};
use crate::deploy::{dagger_distill, fusion_demo, reference_completion, DaggerRow, FusionStats};
use crate::env::ObsMode;
use crate::error::{Error, Result};
use crate::eval::{emit_report, run_task_suite, EvalReport, Method, MethodArtifacts, SuiteInputs};
use crate::expert::{default_categories, gen_dataset, plan_expert, reference_task, replay_demo_with, DemoSet, Split};
use crate::io::{read_jsonl, stamp, write_csv, write_json, write_jsonl};
use crate::planner::{eval_planner, train_bc, OeMetric, Planner, PlannerReport, TrainCurve};
use crate::rl::{ActorCritic, ControlMode, PpoConfig, RolloutEnv, Task, TaskSource, Trainer, UpdateLog};

/// Controller variants trained by `train-controller`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Ours,
    Vanilla,
    NoResidual,
    Fingertip,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Ours, Variant::Vanilla, Variant::NoResidual, Variant::Fingertip];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Ours => "ours",
            Variant::Vanilla => "vanilla",
            Variant::NoResidual => "no_residual",
            Variant::Fingertip => "fingertip",
        }
    }

    pub fn mode(&self) -> ControlMode {
        match self {
            Variant::Vanilla => ControlMode::Vanilla,
            Variant::NoResidual => ControlMode::HierarchicalNoResidual,
            Variant::Ours | Variant::Fingertip => ControlMode::Hierarchical,
        }
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.replace('-', "_");
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown controller variant `{s}` (ours, vanilla, no-residual, fingertip)"))
    }
}

#[derive(Serialize, Deserialize)]
struct DemoLine {
    split: Split,
    demo: crate::expert::Demo,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub file: String,
    pub trained: usize,
    pub unseen_traj: usize,
    pub unseen_obj: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannerEvalRow {
    pub split: Split,
    pub metric: OeMetric,
    pub sequences: usize,
    pub te_per_step_cm: f64,
    pub te_cum_cm: f64,
    pub oe_cum: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillSummary {
    pub config_hash: String,
    pub seed: u64,
    pub teacher_completion: f64,
    pub student_completion: f64,
    pub iterations: Vec<DaggerRow>,
}

#[derive(Serialize)]
struct CurveRow {
    epoch: usize,
    loss: f64,
}

pub struct Pipeline {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub hash: String,
}

impl Pipeline {
    /// Validates `cfg` before anything touches the filesystem.
    pub fn new(cfg: RunConfig, out: impl Into<PathBuf>) -> Result<Pipeline> {
        cfg.validate()?;
        Ok(Pipeline {
            hash: cfg.hash(),
            cfg,
            out: out.into(),
        })
    }

    fn stamp(&self) -> String {
        stamp(&self.hash, self.cfg.seed)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out.join(&self.cfg.paths.dataset)
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.out.join(&self.cfg.paths.checkpoints).join(name)
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.out.join(&self.cfg.paths.reports).join(name)
    }

    fn seeded(&self, stem: &str, seed: u64) -> String {
        format!("{stem}_s{seed}")
    }

    pub fn gen_data(&self) -> Result<DemoSet> {
        let c = &self.cfg;
        let data = gen_dataset(&c.sim, &default_categories(), c.dataset.per_category, c.dataset.steps, c.seed)?;
        let lines: Vec<DemoLine> = data
            .demos
            .iter()
            .zip(&data.splits)
            .map(|(d, s)| DemoLine {
                split: *s,
                demo: d.clone(),
            })
            .collect();
        let dir = self.data_dir();
        write_jsonl(&dir.join("demos.jsonl"), &lines)?;
        let count = |s: Split| data.splits.iter().filter(|x| **x == s).count();
        write_json(
            &dir.join("manifest.json"),
            &Manifest {
                config_hash: self.hash.clone(),
                seed: c.seed,
                file: "demos.jsonl".into(),
                trained: count(Split::Trained),
                unseen_traj: count(Split::UnseenTraj),
                unseen_obj: count(Split::UnseenObj),
            },
        )?;
        Ok(data)
    }

    pub fn load_data(&self) -> Result<DemoSet> {
        let path = self.data_dir().join("demos.jsonl");
        if !path.exists() {
            return Err(Error::MissingArtifact(format!("dataset {} (run gen-data)", path.display())));
        }
        let mut data = DemoSet::default();
        for line in read_jsonl::<DemoLine>(&path)? {
            line.demo.validate()?;
            data.push(line.demo, line.split);
        }
        Ok(data)
    }

    pub fn train_planner(&self) -> Result<(Planner, TrainCurve)> {
        let data = self.load_data()?;
        let (p, curve) = train_bc(&data, &self.cfg.planner, self.cfg.seed)?;
        p.save(&self.checkpoint("planner"), &self.hash, self.cfg.seed)?;
        let rows: Vec<CurveRow> = curve
            .epoch_loss
            .iter()
            .enumerate()
            .map(|(epoch, &loss)| CurveRow { epoch, loss })
            .collect();
        write_csv(
            &self.report("planner_curve.csv"),
            &format!(
                "{} holdout_initial={} holdout_final={}",
                self.stamp(),
                curve.holdout_initial,
                curve.holdout_final
            ),
            &rows,
        )?;
        Ok((p, curve))
    }

    fn load_checkpoint<T>(&self, name: &str, what: &str, load: impl Fn(&Path) -> Result<T>) -> Result<T> {
        let path = self.checkpoint(name);
        if !path.exists() {
            return Err(Error::MissingArtifact(format!("{what} checkpoint {}", path.display())));
        }
        load(&path)
    }

    pub fn load_planner(&self) -> Result<Planner> {
        self.load_checkpoint("planner", "planner", Planner::load)
    }

    pub fn eval_planner(&self, metric: OeMetric) -> Result<Vec<PlannerReport>> {
        let data = self.load_data()?;
        let p = self.load_planner()?;
        let reports = Split::ALL
            .iter()
            .map(|s| eval_planner(&p, &data, *s, metric))
            .collect::<Result<Vec<_>>>()?;
        let rows: Vec<PlannerEvalRow> = reports
            .iter()
            .map(|r| PlannerEvalRow {
                split: r.split,
                metric: r.metric,
                sequences: r.sequences.len(),
                te_per_step_cm: r.te_per_step_cm,
                te_cum_cm: r.te_cum_cm,
                oe_cum: r.oe_cum,
            })
            .collect();
        write_csv(&self.report(&format!("planner_eval_{}.csv", metric.name())), &self.stamp(), &rows)?;
        Ok(reports)
    }

    pub fn reference(&self) -> Result<Task> {
        let (spec, goal) = reference_task(self.cfg.controller.task_steps)?;
        Ok(Task::new(spec, goal))
    }

    fn env(&self, task: Task) -> RolloutEnv {
        RolloutEnv {
            sim: self.cfg.sim.clone(),
            source: TaskSource::single(task),
            thresholds: self.cfg.thresholds,
            weights: self.cfg.reward,
            bounds: self.cfg.bounds,
            force_category: false,
        }
    }

    fn ppo(&self, v: Variant) -> PpoConfig {
        PpoConfig {
            mode: v.mode(),
            fingertip_reward_coef: if v == Variant::Fingertip {
                self.cfg.controller.fingertip_coef
            } else {
                0.0
            },
            ..self.cfg.ppo.clone()
        }
    }

    pub fn controller_name(&self, v: Variant, seed: u64) -> String {
        self.seeded(&format!("controller_{}", v.name()), seed)
    }

    pub fn train_controller(&self, v: Variant) -> Result<(ActorCritic, Vec<UpdateLog>)> {
        let mut task = self.reference()?;
        if v == Variant::Fingertip {
            let demo = plan_expert(&self.cfg.sim, &task.spec, &task.goal)?;
            task.demo_tips = Some(Arc::new(demo.fingertips));
        }
        let planner = if v.mode().uses_planner() {
            Some(self.load_planner()?)
        } else {
            None
        };
        let mut tr = Trainer::new(self.ppo(v), self.env(task), planner, self.cfg.seed)?;
        tr.train(self.cfg.controller.updates)?;
        let name = self.controller_name(v, self.cfg.seed);
        tr.ac.save(&self.checkpoint(&name), &self.hash, self.cfg.seed)?;
        write_csv(&self.report(&format!("{name}.csv")), &self.stamp(), &tr.log)?;
        Ok((tr.ac, tr.log))
    }

    pub fn load_controller(&self, name: &str) -> Result<ActorCritic> {
        self.load_checkpoint(name, "controller", ActorCritic::load)
    }

    /// Continues the `ours` controller through the augmentation loop.
    pub fn dal(&self) -> Result<DalReport> {
        let seed = self.cfg.seed;
        let data = self.load_data()?;
        let planner = self.load_planner()?;
        let ac = self.load_controller(&self.controller_name(Variant::Ours, seed))?;
        let task = self.reference()?;
        let mut tr = Trainer::new(self.ppo(Variant::Ours), self.env(task.clone()), Some(planner), seed)?;
        tr.resume(ac)?;
        let original = data.split(Split::Trained);
        let (report, harvest) = dal_run(&mut tr, &[task], &original, &self.cfg.planner, &self.cfg.dal, seed)?;
        tr.ac
            .save(&self.checkpoint(&self.seeded("dal_controller", seed)), &self.hash, seed)?;
        tr.planner
            .as_ref()
            .expect("dal keeps a planner")
            .save(&self.checkpoint(&self.seeded("dal_planner", seed)), &self.hash, seed)?;
        write_report(&report, &self.report(&format!("{}.csv", self.seeded("dal", seed))), &self.stamp())?;
        write_jsonl(&self.data_dir().join(format!("{}.jsonl", self.seeded("harvest", seed))), &harvest)?;
        Ok(report)
    }

    /// Distills the `ours` controller into a velocity-free student.
    pub fn distill(&self) -> Result<DistillSummary> {
        let seed = self.cfg.seed;
        let planner = self.load_planner()?;
        let teacher = self.load_controller(&self.controller_name(Variant::Ours, seed))?;
        let source = TaskSource::single(self.reference()?);
        let agent = crate::rl::Agent {
            planner: Some(&planner),
            ac: &teacher,
            bounds: self.cfg.bounds,
            force_category: false,
        };
        let (student, rows) = dagger_distill(&agent, &self.cfg.sim, &source, ObsMode::Student, &self.cfg.dagger, seed)?;
        let episodes = self.cfg.eval.seeds;
        let th = &self.cfg.thresholds;
        let teacher_completion = reference_completion(&agent, &self.cfg.sim, &source, th, episodes, seed)?;
        let sa = crate::rl::Agent { ac: &student, ..agent };
        let student_completion = reference_completion(&sa, &self.cfg.sim, &source, th, episodes, seed)?;
        student.save(&self.checkpoint(&self.seeded("student", seed)), &self.hash, seed)?;
        write_csv(&self.report(&format!("{}.csv", self.seeded("dagger", seed))), &self.stamp(), &rows)?;
        let summary = DistillSummary {
            config_hash: self.hash.clone(),
            seed,
            teacher_completion,
            student_completion,
            iterations: rows,
        };
        write_json(&self.report(&format!("{}.json", self.seeded("distill", seed))), &summary)?;
        Ok(summary)
    }

    fn method_artifacts(&self, m: Method, seed: u64, base: &Planner) -> Result<MethodArtifacts> {
        let name = match m {
            Method::Ours => self.seeded("dal_controller", seed),
            Method::OursNoDal => self.controller_name(Variant::Ours, seed),
            Method::OursFr => self.controller_name(Variant::Fingertip, seed),
            Method::VanillaRl => self.controller_name(Variant::Vanilla, seed),
            Method::ExpertReplay | Method::Mpc => unreachable!("no learned artifacts"),
        };
        let controller = self.load_controller(&name)?;
        let planner = match m {
            Method::Ours => Some(self.load_checkpoint(&self.seeded("dal_planner", seed), "planner", Planner::load)?),
            Method::VanillaRl => None,
            _ => Some(base.clone()),
        };
        Ok(MethodArtifacts { planner, controller })
    }

    /// Runs the evaluation matrix over seeds `0..eval.seeds`.
    pub fn eval(&self) -> Result<EvalReport> {
        let e = &self.cfg.eval;
        let data = self.load_data()?;
        let learned: Vec<Method> = e.methods.iter().copied().filter(Method::needs_controller).collect();
        let mut artifacts = BTreeMap::new();
        if !learned.is_empty() {
            let base = self.load_planner()?;
            for &m in &learned {
                for s in 0..e.seeds as u64 {
                    artifacts.insert((m, s), self.method_artifacts(m, s, &base)?);
                }
            }
        }
        let reference = self.reference()?;
        let inputs = SuiteInputs {
            sim: &self.cfg.sim,
            data: &data,
            reference: &reference,
            artifacts: &artifacts,
            config_hash: &self.hash,
        };
        let report = run_task_suite(&inputs, e)?;
        emit_report(&report, &self.out.join(&self.cfg.paths.reports), "eval", &self.hash)?;
        Ok(report)
    }

    /// Tracks the reference goal through simulated cameras.
    pub fn fuse_demo(&self) -> Result<FusionStats> {
        let truth = self.reference()?.goal.states;
        let stats = fusion_demo(&truth, &self.cfg.fusion, &self.cfg.cameras, self.cfg.seed)?;
        write_csv(&self.report("fusion.csv"), &self.stamp(), &stats.frames)?;
        Ok(stats)
    }

    /// Open-loop replay of demo `index`; returns its completion.
    pub fn replay(&self, index: usize) -> Result<f64> {
        let data = self.load_data()?;
        let d = data
            .demos
            .get(index)
            .ok_or_else(|| Error::Invalid(format!("demo index {index} out of range (dataset has {})", data.len())))?;
        Ok(replay_demo_with(&self.cfg.sim, d, &self.cfg.thresholds)?.completion)
    }
}
