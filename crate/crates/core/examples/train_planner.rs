//! Generate the default synthetic dataset, clone the planner, report errors.
use std::time::Instant;

use hierdex::env::SimConfig;
use hierdex::expert::{default_categories, gen_dataset, Split};
use hierdex::planner::{eval_planner, train_bc, OeMetric, PlannerConfig};

fn main() -> hierdex::Result<()> {
    let t0 = Instant::now();
    let data = gen_dataset(&SimConfig::default(), &default_categories(), 20, 200, 0)?;
    println!("dataset: {} demos in {:.1?}", data.len(), t0.elapsed());
    let cfg = PlannerConfig::default();
    let t1 = Instant::now();
    let (planner, curve) = train_bc(&data, &cfg, 0)?;
    println!("bc: {:.1?}, loss curve {:?}", t1.elapsed(), curve.epoch_loss);
    println!("holdout {:.3e} -> {:.3e}", curve.holdout_initial, curve.holdout_final);
    for split in Split::ALL {
        let r = eval_planner(&planner, &data, split, OeMetric::Angle)?;
        println!(
            "{:12} TE/step {:.3} cm  TE_cum {:.1} cm  OE_cum {:.2} rad",
            split.name(),
            r.te_per_step_cm,
            r.te_cum_cm,
            r.oe_cum
        );
    }
    Ok(())
}
