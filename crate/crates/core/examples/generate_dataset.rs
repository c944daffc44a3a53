//! Scripted bimanual demos for every object category, replayed open loop.
use std::time::Instant;

use hierdex::env::SimConfig;
use hierdex::expert::{default_categories, gen_dataset, replay_demo, Split};

fn main() -> hierdex::Result<()> {
    let sim = SimConfig::default();
    let t0 = Instant::now();
    let data = gen_dataset(&sim, &default_categories(), 20, 200, 0)?;
    println!("{} demos in {:.1?}", data.len(), t0.elapsed());
    for s in Split::ALL {
        println!("  {:12} {}", s.name(), data.split(s).len());
    }
    let mut worst: f64 = 1.0;
    for d in &data.demos {
        worst = worst.min(replay_demo(&sim, d)?.completion);
    }
    println!("worst replay completion {worst:.3}");
    let d = &data.demos[0];
    println!(
        "demo 0: category {}, {} steps, object moves {:.3} m",
        d.spec.category_id,
        d.length,
        (d.object_states[d.length - 1].translation - d.object_states[0].translation).norm()
    );
    Ok(())
}
