//! Train the residual controller and the flat baseline on the reference
//! lift-and-place task; print completion curves.
//!
//! UPDATES (default 120) sets the budget.
mod common;

use std::time::Instant;

use hierdex::env::SimConfig;
use hierdex::eval::CompletionThresholds;
use hierdex::rl::{mean_completion, ControlMode, EpisodeOpts};

fn main() -> hierdex::Result<()> {
    let updates = common::env_or("UPDATES", 120);
    let task = common::reference()?;
    for mode in [ControlMode::Hierarchical, ControlMode::Vanilla] {
        let mut tr = common::trainer(mode, &task, 0)?;
        let t0 = Instant::now();
        for u in 0..updates {
            let row = tr.update()?;
            if u % 10 == 0 || u + 1 == updates {
                println!(
                    "{:12} update {:3} completion {:.3} return {:7.2} kl {:.4} ({:.1?})",
                    mode.name(),
                    u,
                    row.mean_completion,
                    row.mean_return,
                    row.kl,
                    t0.elapsed()
                );
            }
        }
        let th = CompletionThresholds::default();
        let c = mean_completion(&tr.agent(), &SimConfig::default(), &task, task.goal.states[0], &th, EpisodeOpts::EVAL, 4, 0)?;
        println!("{:12} greedy completion {c:.3}", mode.name());
    }
    Ok(())
}
