//! Multi-camera pose fusion with outlier gating, then EMA on the fused track.
use hierdex::deploy::{ema_filter, fusion_demo, CameraNoise, EmaState, FusionConfig};
use hierdex::expert::reference_task;

fn main() -> hierdex::Result<()> {
    let truth = reference_task(1000)?.1.states;
    for cameras in [2, 4, 8] {
        let cfg = FusionConfig { cameras, ..FusionConfig::default() };
        let s = fusion_demo(&truth, &cfg, &CameraNoise::default(), 0)?;
        println!(
            "{cameras} cameras: fused {:.2} mm, single camera {:.2} mm, {} fallback frames",
            1e3 * s.fused_mean_error,
            1e3 * s.camera_mean_error,
            s.fallback_frames
        );
    }
    let mut ema = EmaState::new(0.3)?;
    for t in truth.iter().step_by(250) {
        let raw = t.translation.as_slice().to_vec();
        let (next, out) = ema_filter(&ema, &raw);
        ema = next;
        println!("ema {:?}", out.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>());
    }
    Ok(())
}
