//! Sampling MPC on the reference task, no learning involved.
use std::time::Instant;

use hierdex::env::SimConfig;
use hierdex::eval::{mpc_baseline, CompletionThresholds, MpcConfig};
use hierdex::expert::reference_task;
use hierdex::rl::RewardWeights;

fn main() -> hierdex::Result<()> {
    let (spec, g) = reference_task(200)?;
    let cfg = MpcConfig::default();
    let th = CompletionThresholds::default();
    for seed in 0..3 {
        let t0 = Instant::now();
        let m = mpc_baseline(&SimConfig::default(), &spec, &g, g.states[0], &cfg, &RewardWeights::default(), &th, seed)?;
        println!("seed {seed}: completion {:.3} return {:.2} ({:.1?})", m.completion, m.ret, t0.elapsed());
    }
    Ok(())
}
