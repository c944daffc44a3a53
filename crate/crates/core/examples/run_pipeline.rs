//! Every CLI stage on a toy budget, writing into a temp directory.
use hierdex::pipeline::{Pipeline, Variant};
use hierdex::planner::OeMetric;
use hierdex::RunConfig;

fn main() -> hierdex::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.planner.epochs = 2;
    cfg.ppo.steps_per_update = 128;
    cfg.ppo.hidden = 32;
    cfg.controller.updates = 4;
    cfg.dal.iterations = 1;
    cfg.dal.rl_updates_per_iter = 2;
    cfg.dal.harvest_episodes = 4;
    cfg.dagger.iterations = 1;
    cfg.eval.seeds = 1;
    let dir = std::env::temp_dir().join("hierdex_pipeline_example");
    let p = Pipeline::new(cfg, &dir)?;
    println!("config hash {} -> {}", p.hash, dir.display());
    p.gen_data()?;
    p.train_planner()?;
    for r in p.eval_planner(OeMetric::Angle)? {
        println!("planner {:12} TE/step {:.3} cm", r.split.name(), r.te_per_step_cm);
    }
    for v in Variant::ALL {
        p.train_controller(v)?;
    }
    p.dal()?;
    let d = p.distill()?;
    println!("distill teacher {:.3} student {:.3}", d.teacher_completion, d.student_completion);
    for r in p.eval()?.rows {
        println!("{:14} {:?} seed {} completion {:.3}", r.method.name(), r.task, r.seed, r.completion);
    }
    Ok(())
}
