//! DAgger distillation into a student that never sees velocities.
//!
//! UPDATES (default 120) sets the teacher budget.
mod common;

use hierdex::deploy::{dagger_distill, reference_completion, DaggerConfig};
use hierdex::env::{ObsMode, SimConfig};
use hierdex::eval::CompletionThresholds;
use hierdex::rl::{Agent, TaskSource};

fn main() -> hierdex::Result<()> {
    let (tr, task) = common::trained_ours(common::env_or("UPDATES", 120))?;
    let sim = SimConfig::default();
    let source = TaskSource::single(task);
    let teacher = tr.agent();
    let (student, rows) = dagger_distill(&teacher, &sim, &source, ObsMode::Student, &DaggerConfig::default(), 0)?;
    for r in &rows {
        println!(
            "iter {} beta {:.2} labels {} mse {:.3e} -> {:.3e}",
            r.iter, r.beta, r.dataset_size, r.mse_before, r.mse_after
        );
    }
    let th = CompletionThresholds::default();
    let tc = reference_completion(&teacher, &sim, &source, &th, 8, 0)?;
    let sc = reference_completion(&Agent { ac: &student, ..teacher }, &sim, &source, &th, 8, 0)?;
    println!("teacher {tc:.3} student {sc:.3}");
    Ok(())
}
