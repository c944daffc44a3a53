//! Controller robustness to resampled goal trajectories.
//!
//! UPDATES (default 120) sets the training budget.
mod common;

use hierdex::env::SimConfig;
use hierdex::eval::{time_gap_study, CompletionThresholds};

fn main() -> hierdex::Result<()> {
    let (tr, task) = common::trained_ours(common::env_or("UPDATES", 120))?;
    let rows = time_gap_study(&tr.agent(), &SimConfig::default(), &task, &CompletionThresholds::default(), 8, 0)?;
    for (v, c) in rows {
        println!("{:10} {c:.3}", v.name());
    }
    Ok(())
}
