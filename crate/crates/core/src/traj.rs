//! Goal trajectories: keypose interpolation, time resampling, window
//! sampling, and waypoint perturbation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{slerp, ObjectState, Rot, Vec3};

/// Default planning window length.
pub const WINDOW_LEN: usize = 10;
/// Default continuity guard between consecutive goal translations (m).
pub const MAX_GOAL_STEP: f64 = 0.05;
/// Per-axis range of the waypoint offset applied by [`perturb_goal_trajectory`] (m).
pub const GOAL_OFFSET_RANGE: f64 = 0.02;
/// Minimum width, in steps, of the perturbed waypoint span.
pub const MIN_PERTURB_SPAN: usize = 20;
/// Largest extra gap drawn per window slot when random gaps are on.
pub const MAX_EXTRA_GAP: usize = 3;

/// Features per window entry in [`relative_goal_window`].
pub const REL_FEATURES: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoalTrajectory {
    pub states: Vec<ObjectState>,
    pub category_id: usize,
    pub dt_units: u32,
}

impl GoalTrajectory {
    pub fn new(states: Vec<ObjectState>, category_id: usize) -> Result<Self> {
        if states.len() < 2 {
            return Err(Error::Invalid(format!(
                "goal trajectory needs at least 2 states, got {}",
                states.len()
            )));
        }
        Ok(GoalTrajectory {
            states,
            category_id,
            dt_units: 1,
        })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// State at `i`, clamped to the final state.
    pub fn state(&self, i: usize) -> &ObjectState {
        &self.states[i.min(self.states.len() - 1)]
    }

    pub fn last(&self) -> &ObjectState {
        self.states.last().expect("non-empty trajectory")
    }

    /// Checks the continuity guard; returns the first offending step.
    pub fn validate(&self, max_step: f64) -> Result<()> {
        if self.states.len() < 2 {
            return Err(Error::Invalid("goal trajectory shorter than 2".into()));
        }
        for (i, w) in self.states.windows(2).enumerate() {
            let d = (w[1].translation - w[0].translation).norm();
            if !(d < max_step) {
                return Err(Error::Infeasible {
                    step: i + 1,
                    reason: format!("goal translation jumps {d:.4} m (guard {max_step} m)"),
                });
            }
        }
        Ok(())
    }

    /// Index of the first state that differs from its predecessor.
    pub fn first_motion_index(&self) -> Option<usize> {
        self.states
            .windows(2)
            .position(|w| w[0] != w[1])
            .map(|i| i + 1)
    }
}

fn lerp_joint(a: Option<f64>, b: Option<f64>, u: f64) -> Result<Option<f64>> {
    match (a, b) {
        (Some(a), Some(b)) => Ok(Some(a + (b - a) * u)),
        (None, None) => Ok(None),
        _ => Err(Error::Invalid(
            "joint angle present on only one side of an interpolation".into(),
        )),
    }
}

/// Linear (translation, joint) and geodesic (rotation) blend of two states.
pub fn interpolate_state(a: &ObjectState, b: &ObjectState, u: f64) -> Result<ObjectState> {
    Ok(ObjectState {
        translation: a.translation + (b.translation - a.translation) * u,
        rotation: slerp(&a.rotation, &b.rotation, u),
        joint: lerp_joint(a.joint, b.joint, u)?,
    })
}

/// Builds a trajectory of `total_steps` states from keyposes at strictly
/// increasing step indices (first 0, last `total_steps - 1`).
pub fn interpolate_keyposes(
    keyposes: &[(ObjectState, usize)],
    total_steps: usize,
    category_id: usize,
) -> Result<GoalTrajectory> {
    if keyposes.len() < 2 {
        return Err(Error::Invalid("need at least 2 keyposes".into()));
    }
    if keyposes[0].1 != 0 || keyposes[keyposes.len() - 1].1 + 1 != total_steps {
        return Err(Error::Invalid(format!(
            "keypose indices must span 0..{}",
            total_steps.saturating_sub(1)
        )));
    }
    if keyposes.windows(2).any(|w| w[1].1 <= w[0].1) {
        return Err(Error::Invalid("keypose indices not strictly increasing".into()));
    }
    let mut states = Vec::with_capacity(total_steps);
    for pair in keyposes.windows(2) {
        let ((a, ia), (b, ib)) = (pair[0], pair[1]);
        let span = (ib - ia) as f64;
        for i in ia..ib {
            if i == ia {
                states.push(a);
            } else {
                states.push(interpolate_state(&a, &b, (i - ia) as f64 / span)?);
            }
        }
    }
    states.push(keyposes[keyposes.len() - 1].0);
    GoalTrajectory::new(states, category_id)
}

fn check_k(k: usize) -> Result<()> {
    if k == 1 || k == 2 {
        Ok(())
    } else {
        Err(Error::Invalid(format!("resampling factor must be 1 or 2, got {k}")))
    }
}

/// Keeps every `(k+1)`-th state; the motion plays `k+1` times faster.
pub fn resample_skip(g: &GoalTrajectory, k: usize) -> Result<GoalTrajectory> {
    check_k(k)?;
    if g.len() <= k + 1 {
        return Err(Error::Invalid(format!(
            "trajectory of length {} too short to skip {k}",
            g.len()
        )));
    }
    let states: Vec<_> = g.states.iter().step_by(k + 1).copied().collect();
    Ok(GoalTrajectory {
        states,
        category_id: g.category_id,
        dt_units: g.dt_units * (k as u32 + 1),
    })
}

/// Inserts `k` interpolated states between every consecutive pair.
///
/// `dt_units` is left unchanged: integer time units cannot be subdivided.
pub fn resample_interp(g: &GoalTrajectory, k: usize) -> Result<GoalTrajectory> {
    check_k(k)?;
    let mut states = Vec::with_capacity(g.len() + (g.len() - 1) * k);
    for pair in g.states.windows(2) {
        states.push(pair[0]);
        for j in 1..=k {
            states.push(interpolate_state(
                &pair[0],
                &pair[1],
                j as f64 / (k + 1) as f64,
            )?);
        }
    }
    states.push(*g.last());
    Ok(GoalTrajectory {
        states,
        category_id: g.category_id,
        dt_units: g.dt_units,
    })
}

/// `T` future goal states with the step gap to each entry.
#[derive(Clone, Debug, PartialEq)]
pub struct GoalWindow {
    pub states: Vec<ObjectState>,
    pub indices: Vec<usize>,
    pub gaps: Vec<usize>,
}

impl GoalWindow {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Window starting after step `t` with explicit per-slot gaps (each >= 1).
/// Indices past the end clamp to the final state.
pub fn goal_window_with_gaps(g: &GoalTrajectory, t: usize, gaps: &[usize]) -> GoalWindow {
    let last = g.len() - 1;
    let mut idx = t;
    let mut indices = Vec::with_capacity(gaps.len());
    for &gap in gaps {
        idx += gap.max(1);
        indices.push(idx.min(last));
    }
    GoalWindow {
        states: indices.iter().map(|&i| g.states[i]).collect(),
        indices,
        gaps: gaps.iter().map(|&v| v.max(1)).collect(),
    }
}

/// Samples the `len`-entry window after step `t`. With `random_gaps`, each
/// slot advances by `1 + U{0..=3}`.
pub fn sample_goal_window<R: Rng + ?Sized>(
    g: &GoalTrajectory,
    t: usize,
    len: usize,
    rng: &mut R,
    random_gaps: bool,
) -> GoalWindow {
    let gaps: Vec<usize> = if random_gaps {
        (0..len)
            .map(|_| 1 + rng.random_range(0..=MAX_EXTRA_GAP))
            .collect()
    } else {
        vec![1; len]
    };
    goal_window_with_gaps(g, t, &gaps)
}

/// Applies `offset` to steps `[start, end]`, ramping linearly from zero at
/// both span edges. Rotations and joint angles are untouched.
pub fn perturb_goal_span(
    g: &GoalTrajectory,
    offset: Vec3,
    start: usize,
    end: usize,
) -> GoalTrajectory {
    let mut out = g.clone();
    if end <= start {
        return out;
    }
    let ramp = ((end - start) as f64 / 4.0).max(1.0);
    for i in start..=end.min(g.len() - 1) {
        let w = ((i - start) as f64 / ramp)
            .min((end - i) as f64 / ramp)
            .clamp(0.0, 1.0);
        out.states[i].translation += offset * w;
    }
    out
}

/// Random waypoint perturbation: one offset with components uniform in
/// `[-0.02, 0.02]` m, applied over a random span at least 20 steps wide.
pub fn perturb_goal_trajectory<R: Rng + ?Sized>(g: &GoalTrajectory, rng: &mut R) -> GoalTrajectory {
    let offset = Vec3::new(
        rng.random_range(-GOAL_OFFSET_RANGE..=GOAL_OFFSET_RANGE),
        rng.random_range(-GOAL_OFFSET_RANGE..=GOAL_OFFSET_RANGE),
        rng.random_range(-GOAL_OFFSET_RANGE..=GOAL_OFFSET_RANGE),
    );
    let last = g.len() - 1;
    let (start, end) = if last <= MIN_PERTURB_SPAN {
        (0, last)
    } else {
        let start = rng.random_range(0..=last - MIN_PERTURB_SPAN);
        let end = rng.random_range(start + MIN_PERTURB_SPAN..=last);
        (start, end)
    };
    perturb_goal_span(g, offset, start, end)
}

/// `s` expressed relative to `current`: translation delta in the current
/// frame (3), relative rotation quaternion (4), joint delta (1).
pub fn relative_state_features(s: &ObjectState, current: &ObjectState) -> [f64; REL_FEATURES] {
    let inv = current.rotation.inverse();
    let dt = inv.rotate(&(s.translation - current.translation));
    let q = (inv * s.rotation).to_array();
    let dj = match (s.joint, current.joint) {
        (Some(a), Some(b)) => a - b,
        _ => 0.0,
    };
    [dt.x, dt.y, dt.z, q[0], q[1], q[2], q[3], dj]
}

/// Inverse of [`relative_state_features`].
pub fn compose_relative(current: &ObjectState, f: &[f64]) -> Result<ObjectState> {
    let rel = Rot::new(f[3], f[4], f[5], f[6])?;
    Ok(ObjectState {
        translation: current.translation + current.rotation.rotate(&Vec3::new(f[0], f[1], f[2])),
        rotation: current.rotation * rel,
        joint: current.joint.map(|j| j + f[7]),
    })
}

/// Flattened window features, `len * 8` entries.
pub fn relative_goal_window(w: &GoalWindow, current: &ObjectState) -> Vec<f64> {
    w.states
        .iter()
        .flat_map(|s| relative_state_features(s, current))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::quat_angle;
    use crate::rng::rng_from;

    fn at(z: f64) -> ObjectState {
        ObjectState::new(Vec3::new(0.0, 0.0, z), Rot::IDENTITY, None)
    }

    fn ramp(n: usize) -> GoalTrajectory {
        interpolate_keyposes(&[(at(0.0), 0), (at(0.2), n - 1)], n, 0).unwrap()
    }

    #[test]
    fn keypose_examples() {
        let g = interpolate_keyposes(&[(at(0.1), 0), (at(0.1), 99)], 100, 0).unwrap();
        assert_eq!(g.len(), 100);
        assert!(g.states.iter().all(|s| *s == at(0.1)));

        let g = interpolate_keyposes(&[(at(0.0), 0), (at(0.2), 100)], 101, 0).unwrap();
        assert!((g.states[50].translation.z - 0.1).abs() < 1e-12);
        assert_eq!(g.states[100], at(0.2));
    }

    #[test]
    fn keypose_errors() {
        assert!(interpolate_keyposes(&[(at(0.0), 0)], 1, 0).is_err());
        assert!(interpolate_keyposes(&[(at(0.0), 0), (at(0.1), 5), (at(0.2), 5)], 6, 0).is_err());
        assert!(interpolate_keyposes(&[(at(0.0), 1), (at(0.1), 5)], 6, 0).is_err());
    }

    #[test]
    fn lift_and_drop_is_up_then_down() {
        let g = interpolate_keyposes(
            &[(at(0.0), 0), (at(0.15), 40), (at(0.0), 99)],
            100,
            0,
        )
        .unwrap();
        let z: Vec<f64> = g.states.iter().map(|s| s.translation.z).collect();
        assert!(z[..=40].windows(2).all(|w| w[1] >= w[0]));
        assert!(z[40..].windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn resample_lengths() {
        let g = ramp(500);
        assert_eq!(resample_skip(&g, 1).unwrap().len(), 250);
        let s2 = resample_skip(&g, 2).unwrap();
        assert_eq!(s2.len(), 167);
        assert_eq!(s2.dt_units, 3);
        assert_eq!(resample_interp(&g, 1).unwrap().len(), 999);
        assert_eq!(resample_interp(&g, 2).unwrap().len(), 1498);
        assert!(resample_skip(&g, 3).is_err());
    }

    #[test]
    fn interp_midpoint_is_average() {
        let g = GoalTrajectory::new(vec![at(0.0), at(0.04)], 0).unwrap();
        let i = resample_interp(&g, 1).unwrap();
        assert!((i.states[1].translation.z - 0.02).abs() < 1e-15);
    }

    #[test]
    fn constant_trajectory_stays_constant_under_skip() {
        let g = GoalTrajectory::new(vec![at(0.3); 10], 0).unwrap();
        assert!(resample_skip(&g, 2).unwrap().states.iter().all(|s| *s == at(0.3)));
    }

    #[test]
    fn interp_then_skip_recovers() {
        let g = ramp(37);
        for k in [1, 2] {
            let back = resample_skip(&resample_interp(&g, k).unwrap(), k).unwrap();
            assert_eq!(back.states, g.states);
        }
    }

    #[test]
    fn window_clamps_and_gaps() {
        let g = ramp(50);
        let mut rng = rng_from(1, &[]);
        let w = sample_goal_window(&g, 49, WINDOW_LEN, &mut rng, false);
        assert_eq!(w.len(), WINDOW_LEN);
        assert!(w.states.iter().all(|s| s == g.last()));
        let w = sample_goal_window(&g, 3, WINDOW_LEN, &mut rng, false);
        assert_eq!(w.indices, (4..14).collect::<Vec<_>>());
        let w = goal_window_with_gaps(&g, 0, &[4; WINDOW_LEN]);
        assert_eq!(w.indices[..3], [4, 8, 12]);
        for _ in 0..100 {
            let w = sample_goal_window(&g, 0, WINDOW_LEN, &mut rng, true);
            assert_eq!(w.len(), WINDOW_LEN);
            assert!(w.gaps.iter().all(|&v| (1..=4).contains(&v)));
        }
    }

    #[test]
    fn perturbation_bounds() {
        let g = ramp(200);
        assert_eq!(perturb_goal_span(&g, Vec3::new(0.02, 0.0, 0.0), 10, 10), g);
        let p = perturb_goal_span(&g, Vec3::new(0.02, 0.0, 0.0), 0, 199);
        for (a, b) in g.states.iter().zip(&p.states) {
            let dx = b.translation.x - a.translation.x;
            assert!((0.0..=0.02 + 1e-15).contains(&dx));
        }
        assert_eq!(p.states[0].translation.x, 0.0);
        let mut rng = rng_from(9, &[]);
        for _ in 0..200 {
            let p = perturb_goal_trajectory(&g, &mut rng);
            assert_eq!(p.len(), g.len());
            for (a, b) in g.states.iter().zip(&p.states) {
                assert_eq!(a.rotation, b.rotation);
                let d = b.translation - a.translation;
                assert!(d.iter().all(|c| c.abs() <= GOAL_OFFSET_RANGE));
            }
        }
    }

    #[test]
    fn relative_features_round_trip() {
        let cur = ObjectState::new(Vec3::new(0.1, -0.2, 0.05), Rot::about_z(0.7), Some(0.3));
        let w = GoalWindow {
            states: vec![cur; 3],
            indices: vec![1, 2, 3],
            gaps: vec![1; 3],
        };
        let f = relative_goal_window(&w, &cur);
        assert_eq!(f.len(), 3 * REL_FEATURES);
        for c in f.chunks(REL_FEATURES) {
            assert_eq!(c, &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        }
        let ident = ObjectState::new(Vec3::zeros(), Rot::IDENTITY, None);
        let ahead = ObjectState::new(Vec3::new(0.0, 0.05, 0.0), Rot::IDENTITY, None);
        let f = relative_state_features(&ahead, &ident);
        assert_eq!(&f[..3], &[0.0, 0.05, 0.0]);

        let target = ObjectState::new(Vec3::new(0.3, 0.1, 0.2), Rot::new(0.3, 0.1, 0.9, -0.2).unwrap(), Some(1.1));
        let f = relative_state_features(&target, &cur);
        let back = compose_relative(&cur, &f).unwrap();
        assert!((back.translation - target.translation).norm() < 1e-9);
        assert!(quat_angle(&back.rotation, &target.rotation) < 1e-9);
        assert!((back.joint.unwrap() - 1.1).abs() < 1e-9);
    }
}
