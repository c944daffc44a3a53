use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use hierdex::dal::AugmentFlags;
use hierdex::eval::RotationRule;
use hierdex::pipeline::{Pipeline, Variant};
use hierdex::planner::OeMetric;
use hierdex::RunConfig;

#[derive(Parser)]
#[command(name = "hierdex", version, about = "Hierarchical dexterous manipulation pipeline")]
struct Cli {
    /// JSON config; missing keys take defaults, unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root for data, checkpoints and reports.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic expert dataset.
    GenData,
    /// Behavior-clone the wrist planner.
    TrainPlanner,
    /// Planner TE/OE on every split.
    EvalPlanner {
        #[arg(long, default_value = "angle", value_parser = parse_metric)]
        metric: OeMetric,
    },
    /// PPO training of a controller variant on the reference task.
    TrainController {
        /// ours | vanilla | no-residual | fingertip
        #[arg(long, default_value = "ours")]
        mode: Variant,
    },
    /// Augmentation loop on top of the trained `ours` controller.
    Dal,
    /// DAgger distillation into a velocity-free student.
    Distill,
    /// Completion matrix over tasks, methods and seeds.
    Eval {
        /// Apply scale, init and goal perturbations to every episode.
        #[arg(long)]
        perturb: bool,
        /// Rotation rule: dimscaled | plain
        #[arg(long, value_parser = parse_rule)]
        rule: Option<RotationRule>,
    },
    /// Multi-camera pose fusion with injected outliers.
    FuseDemo,
    /// Open-loop replay of one generated demo.
    Replay {
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Print the effective config as JSON.
    PrintConfig,
}

fn parse_metric(s: &str) -> Result<OeMetric, String> {
    match s {
        "angle" => Ok(OeMetric::Angle),
        "frobenius" => Ok(OeMetric::Frobenius),
        _ => Err(format!("unknown metric `{s}` (angle, frobenius)")),
    }
}

fn parse_rule(s: &str) -> Result<RotationRule, String> {
    match s {
        "dimscaled" => Ok(RotationRule::Dimscaled),
        "plain" => Ok(RotationRule::Plain),
        _ => Err(format!("unknown rotation rule `{s}` (dimscaled, plain)")),
    }
}

fn workers(cfg: &RunConfig) -> anyhow::Result<Option<usize>> {
    match std::env::var("HIERDEX_WORKERS") {
        Ok(v) => {
            let n: usize = v.parse().with_context(|| format!("HIERDEX_WORKERS={v} is not a count"))?;
            if n == 0 {
                bail!("HIERDEX_WORKERS must be at least 1");
            }
            Ok(Some(n))
        }
        Err(_) => Ok(cfg.workers),
    }
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Cmd::Eval { perturb, rule } = &cli.cmd {
        if *perturb {
            cfg.eval.perturb = AugmentFlags::ALL;
        }
        if let Some(r) = rule {
            cfg.eval.thresholds.rotation_rule = *r;
        }
    }
    if let Some(n) = workers(&cfg)? {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let p = Pipeline::new(cfg, &cli.out)?;
    match cli.cmd {
        Cmd::PrintConfig => println!("{}", p.cfg.to_json()),
        Cmd::GenData => {
            let d = p.gen_data()?;
            println!("wrote {} demos to {}", d.len(), p.data_dir().display());
        }
        Cmd::TrainPlanner => {
            let (_, c) = p.train_planner()?;
            println!(
                "planner trained: loss {:.4e} -> {:.4e}, holdout {:.4e} -> {:.4e}",
                c.epoch_loss[0],
                c.epoch_loss.last().copied().unwrap_or(f64::NAN),
                c.holdout_initial,
                c.holdout_final
            );
        }
        Cmd::EvalPlanner { metric } => {
            for r in p.eval_planner(metric)? {
                println!(
                    "{:12} TE/step {:.3} cm  TE {:.2} cm  OE({}) {:.3}",
                    r.split.name(),
                    r.te_per_step_cm,
                    r.te_cum_cm,
                    metric.name(),
                    r.oe_cum
                );
            }
        }
        Cmd::TrainController { mode } => {
            let (_, log) = p.train_controller(mode)?;
            if let Some(last) = log.last() {
                println!(
                    "{} controller: {} updates, last completion {:.3} return {:.2}",
                    mode.name(),
                    log.len(),
                    last.mean_completion,
                    last.mean_return
                );
            }
        }
        Cmd::Dal => {
            for r in p.dal()?.rows {
                println!(
                    "iteration {}: harvested {}/{} completion {:.3}",
                    r.iter, r.harvested, r.episodes, r.completion_mean
                );
            }
        }
        Cmd::Distill => {
            let s = p.distill()?;
            println!(
                "teacher completion {:.3}, student completion {:.3}",
                s.teacher_completion, s.student_completion
            );
        }
        Cmd::Eval { .. } => {
            for a in p.eval()?.aggregates() {
                let std = a.std.map(|s| format!("{s:.3}")).unwrap_or_else(|| "n/a".into());
                println!("{:24} {:14} {:.3} ± {std} ({} seeds)", a.task.name(), a.method.name(), a.mean, a.seeds);
            }
        }
        Cmd::FuseDemo => {
            let s = p.fuse_demo()?;
            println!(
                "fused error {:.4} m vs per-camera {:.4} m over {} frames ({} fallback)",
                s.fused_mean_error,
                s.camera_mean_error,
                s.frames.len(),
                s.fallback_frames
            );
        }
        Cmd::Replay { index } => println!("completion {:.3}", p.replay(index)?),
    }
    Ok(())
}
