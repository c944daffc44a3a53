//! Shared setup for the controller examples.
#![allow(dead_code)]
use std::path::Path;

use hierdex::env::SimConfig;
use hierdex::eval::CompletionThresholds;
use hierdex::expert::{default_categories, gen_dataset, reference_task, DemoSet};
use hierdex::planner::{train_bc, Planner, PlannerConfig};
use hierdex::rl::{ControlMode, PpoConfig, ResidualBounds, RewardWeights, RolloutEnv, Task, TaskSource, Trainer};

pub fn env_or(name: &str, default: usize) -> usize {
    std::env::var(name).ok().and_then(|s| s.parse().ok()).unwrap_or(default)
}

pub fn dataset() -> hierdex::Result<DemoSet> {
    gen_dataset(&SimConfig::default(), &default_categories(), 20, 200, 0)
}

/// Planner trained on the default dataset, cached in the temp dir.
pub fn planner() -> hierdex::Result<Planner> {
    let cache = std::env::temp_dir().join("hierdex_example_planner");
    if cache.with_extension("json").exists() {
        return Planner::load(&cache);
    }
    let (p, _) = train_bc(&dataset()?, &PlannerConfig::default(), 0)?;
    p.save(Path::new(&cache), "example", 0)?;
    Ok(p)
}

pub fn reference() -> hierdex::Result<Task> {
    let (spec, g) = reference_task(200)?;
    Ok(Task::new(spec, g))
}

/// Desk-sized PPO: 512 steps per update, 64 hidden units.
pub fn trainer(mode: ControlMode, task: &Task, seed: u64) -> hierdex::Result<Trainer> {
    let cfg = PpoConfig {
        mode,
        steps_per_update: 512,
        hidden: 64,
        ..PpoConfig::default()
    };
    let env = RolloutEnv {
        sim: SimConfig::default(),
        source: TaskSource::single(task.clone()),
        thresholds: CompletionThresholds::default(),
        weights: RewardWeights::default(),
        bounds: ResidualBounds::default(),
        force_category: false,
    };
    let p = if mode.uses_planner() { Some(planner()?) } else { None };
    Trainer::new(cfg, env, p, seed)
}

/// Residual controller on the reference task after `updates` PPO updates.
pub fn trained_ours(updates: usize) -> hierdex::Result<(Trainer, Task)> {
    let task = reference()?;
    let mut tr = trainer(ControlMode::Hierarchical, &task, 0)?;
    tr.train(updates)?;
    Ok((tr, task))
}
