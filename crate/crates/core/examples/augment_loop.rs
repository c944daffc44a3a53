//! Augmentation loop: perturb scale, initial pose and goal, keep successful
//! rollouts, fine-tune planner and controller on them.
//!
//! UPDATES (default 120) sets the base training budget.
mod common;

use hierdex::dal::{dal_run, AugmentFlags, Augmentation, DalConfig};
use hierdex::env::SimConfig;
use hierdex::eval::{CompletionThresholds, RotationRule};
use hierdex::expert::Split;
use hierdex::planner::PlannerConfig;
use hierdex::rl::{run_episode, Agent, EpisodeOpts, RewardWeights, Task};
use hierdex::rng::{rng_from, stream};

fn randomized(agent: &Agent, task: &Task, episodes: u64) -> hierdex::Result<f64> {
    let th = CompletionThresholds::with_rule(RotationRule::Plain);
    let mut total = 0.0;
    for k in 0..episodes {
        let mut rng = rng_from(0, &[stream::EVAL, k]);
        let aug = Augmentation::sample(&mut rng, task.goal.len(), AugmentFlags::ALL);
        let (spec, goal, init) = aug.apply(&task.spec, &task.goal)?;
        let t = Task::new(spec, goal);
        total += run_episode(agent, &SimConfig::default(), &t, init, &th, &RewardWeights::default(), EpisodeOpts::EVAL, &mut rng)?
            .completion;
    }
    Ok(total / episodes as f64)
}

fn main() -> hierdex::Result<()> {
    let (mut tr, task) = common::trained_ours(common::env_or("UPDATES", 120))?;
    println!("before: randomized completion {:.3}", randomized(&tr.agent(), &task, 32)?);
    let data = common::dataset()?;
    let cfg = DalConfig::default();
    let (report, harvested) = dal_run(&mut tr, &[task.clone()], &data.split(Split::Trained), &PlannerConfig::default(), &cfg, 0)?;
    for r in &report.rows {
        println!(
            "iter {} episodes {} harvested {} completion {:.3} +- {:.3}",
            r.iter, r.episodes, r.harvested, r.completion_mean, r.completion_std
        );
    }
    println!("{} augmented demos kept", harvested.len());
    println!("after:  randomized completion {:.3}", randomized(&tr.agent(), &task, 32)?);
    Ok(())
}
