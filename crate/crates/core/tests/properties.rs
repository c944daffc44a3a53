use approx::assert_abs_diff_eq;
use hierdex::dal::{AugmentFlags, AugmentRanges, Augmentation};
use hierdex::deploy::{ema_filter, fuse_poses, EmaState, FusionConfig};
use hierdex::env::WristAction;
use hierdex::eval::{completion_rate, CompletionThresholds, RotationRule};
use hierdex::geom::{quat_angle, rot_frobenius_error, slerp};
use hierdex::rl::{compose_action, gae, reward, Residual, ResidualBounds, RewardWeights};
use hierdex::rng::rng_from;
use hierdex::traj::{compose_relative, relative_state_features, resample_interp, resample_skip};
use hierdex::{GoalTrajectory, ObjectState, Pose, Rot, Vec3};
use proptest::prelude::*;

fn rot() -> impl Strategy<Value = Rot> {
    (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
        .prop_filter("non-degenerate", |(w, x, y, z)| w * w + x * x + y * y + z * z > 1e-3)
        .prop_map(|(w, x, y, z)| Rot::new(w, x, y, z).unwrap())
}

fn vec3(r: f64) -> impl Strategy<Value = Vec3> {
    (-r..r, -r..r, -r..r).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn state() -> impl Strategy<Value = ObjectState> {
    (vec3(0.5), rot(), proptest::option::of(0.0..2.0f64)).prop_map(|(t, r, j)| ObjectState::new(t, r, j))
}

fn still(n: usize) -> GoalTrajectory {
    GoalTrajectory::new(vec![ObjectState::new(Vec3::zeros(), Rot::IDENTITY, None); n], 0).unwrap()
}

proptest! {
    #[test]
    fn rotations_are_unit_and_canonical(q in rot()) {
        let a = q.to_array();
        prop_assert!((a.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(a[0] >= 0.0);
    }

    #[test]
    fn angle_is_sign_blind_and_matches_frobenius(a in rot(), b in rot()) {
        let q = a.to_array();
        let neg = Rot::new(-q[0], -q[1], -q[2], -q[3]).unwrap();
        prop_assert!(quat_angle(&a, &neg) < 1e-6);
        let th = quat_angle(&a, &b);
        prop_assert!((0.0..=std::f64::consts::PI + 1e-12).contains(&th));
        let f = 2.0 * 2f64.sqrt() * (th / 2.0).sin();
        prop_assert!((rot_frobenius_error(&a, &b) - f).abs() < 1e-7);
    }

    #[test]
    fn pose_inverse_composes_to_identity(t in vec3(2.0), r in rot(), p in vec3(1.0)) {
        let x = Pose::new(t, r);
        let back = x.inverse().transform_point(&x.transform_point(&p));
        prop_assert!((back - p).norm() < 1e-9);
        let round = Pose::from_array(x.to_array()).unwrap();
        prop_assert!((round.translation - x.translation).norm() < 1e-12);
        prop_assert!(quat_angle(&round.rotation, &x.rotation) < 1e-6);
    }

    #[test]
    fn slerp_hits_endpoints_and_splits_the_angle(a in rot(), b in rot(), u in 0.0..1.0f64) {
        prop_assert!(quat_angle(&slerp(&a, &b, 0.0), &a) < 1e-6);
        prop_assert!(quat_angle(&slerp(&a, &b, 1.0), &b) < 1e-6);
        let m = slerp(&a, &b, u);
        let total = quat_angle(&a, &b);
        prop_assert!((quat_angle(&a, &m) + quat_angle(&m, &b) - total).abs() < 1e-6);
    }

    #[test]
    fn reward_in_unit_interval_and_monotone(g in state(), c in state(), extra in 1e-3..0.1f64) {
        let w = RewardWeights::default();
        let r = reward(&g, &c, &w);
        prop_assert!(r > 0.0 && r <= 1.0);
        prop_assert_eq!(reward(&g, &g, &w), 1.0);
        // pushing the object further along the error direction lowers the reward
        let d = c.translation - g.translation;
        let dir = if d.norm() > 1e-9 { d.normalize() } else { Vec3::x() };
        let further = ObjectState { translation: c.translation + dir * extra, ..c };
        prop_assert!(reward(&g, &further, &w) < r);
    }

    #[test]
    fn composed_wrists_respect_bounds(
        t0 in vec3(1.0), t1 in vec3(1.0), r0 in vec3(3.0), r1 in vec3(3.0),
        base in rot(), f in proptest::collection::vec(-2.0..3.0f64, 8),
    ) {
        let b = ResidualBounds::default();
        let pw = WristAction::new(Pose::new(Vec3::zeros(), base), Pose::new(Vec3::x(), base));
        let res = [Residual { translation: t0, rotation: r0 }, Residual { translation: t1, rotation: r1 }];
        let fingers = [f[..4].to_vec(), f[4..].to_vec()];
        let (cmd, fc) = compose_action(&pw, &res, &fingers, &b);
        for (p, q) in pw.hands().iter().zip(cmd.hands()) {
            let dt = q.translation - p.translation;
            prop_assert!(dt.iter().all(|v| v.abs() <= b.max_translation + 1e-12));
            prop_assert!(quat_angle(&p.rotation, &q.rotation) <= b.max_rotation + 1e-9);
        }
        prop_assert!(fc.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn augmentation_draws_stay_in_range(seed in any::<u64>()) {
        let mut rng = rng_from(seed, &[]);
        let a = Augmentation::sample(&mut rng, 200, AugmentFlags::ALL);
        prop_assert!(a.within(&AugmentRanges::default()));
        prop_assert!(a.scale.iter().all(|s| (0.9..=1.1).contains(s)));
        prop_assert!(a.init.dx.abs() <= 0.02 && a.init.dy.abs() <= 0.02);
        prop_assert!((0.0..=30f64.to_radians()).contains(&a.init.yaw));
        prop_assert!(a.goal_offset.iter().all(|v| v.abs() <= 0.02));
    }

    #[test]
    fn undiscounted_gae_is_reward_to_go_minus_value(
        rv in proptest::collection::vec((-1.0..1.0f64, -1.0..1.0f64), 1..40),
        last in -1.0..1.0f64,
    ) {
        let (r, v): (Vec<f64>, Vec<f64>) = rv.into_iter().unzip();
        let dones = vec![false; r.len()];
        let (adv, ret) = gae(&r, &v, &dones, last, 1.0, 1.0);
        for t in 0..r.len() {
            let togo: f64 = r[t..].iter().sum::<f64>() + last;
            prop_assert!((adv[t] - (togo - v[t])).abs() < 1e-9);
            prop_assert!((ret[t] - togo).abs() < 1e-9);
        }
    }

    #[test]
    fn planted_violation_gives_k_over_n(n in 2usize..300, k in 0usize..300, plain in any::<bool>()) {
        let k = k % n;
        let g = still(n);
        let mut actual = g.states.clone();
        actual[k].translation.x = 0.06;
        let rule = if plain { RotationRule::Plain } else { RotationRule::Dimscaled };
        let c = completion_rate(&actual, &g, &CompletionThresholds::with_rule(rule), 0.2).unwrap();
        prop_assert_eq!(c, k as f64 / n as f64);
    }

    #[test]
    fn ema_stays_between_previous_and_raw(a in proptest::collection::vec(-5.0..5.0f64, 6), b in proptest::collection::vec(-5.0..5.0f64, 6)) {
        let s = EmaState::new(0.3).unwrap();
        let (s, first) = ema_filter(&s, &a);
        prop_assert_eq!(&first, &a);
        let (_, out) = ema_filter(&s, &b);
        for ((o, p), r) in out.iter().zip(&a).zip(&b) {
            prop_assert!(*o >= p.min(*r) - 1e-12 && *o <= p.max(*r) + 1e-12);
        }
    }

    #[test]
    fn fusion_without_survivors_keeps_previous(truth in state(), prev in state(), off in 0.06..0.5f64) {
        let cfg = FusionConfig::default();
        let far: Vec<ObjectState> = (0..4)
            .map(|i| ObjectState { translation: truth.translation + Vec3::new(off, i as f64 * 0.01, 0.0), ..truth })
            .collect();
        prop_assert_eq!(fuse_poses(&far, &truth, &cfg, &prev), prev);
        let near = vec![truth; 4];
        let fused = fuse_poses(&near, &truth, &cfg, &prev);
        prop_assert!((fused.translation - truth.translation).norm() < 1e-12);
    }

    #[test]
    fn relative_features_invert(s in state(), c in state()) {
        let c = ObjectState { joint: s.joint.map(|_| c.joint.unwrap_or(0.3)), ..c };
        let back = compose_relative(&c, &relative_state_features(&s, &c)).unwrap();
        prop_assert!((back.translation - s.translation).norm() < 1e-9);
        prop_assert!(quat_angle(&back.rotation, &s.rotation) < 1e-6);
        if let (Some(a), Some(b)) = (back.joint, s.joint) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn resampling_keeps_endpoints(n in 4usize..80, k in 1usize..3) {
        let states: Vec<ObjectState> = (0..n)
            .map(|i| ObjectState::new(Vec3::new(0.001 * i as f64, 0.0, 0.0), Rot::about_z(0.002 * i as f64), None))
            .collect();
        let g = GoalTrajectory::new(states, 0).unwrap();
        let s = resample_skip(&g, k).unwrap();
        prop_assert_eq!(s.len(), (n - 1) / (k + 1) + 1);
        prop_assert_eq!(s.states[0], g.states[0]);
        let i = resample_interp(&g, k).unwrap();
        prop_assert_eq!(i.len(), (n - 1) * (k + 1) + 1);
        assert_abs_diff_eq!(i.last().translation.x, g.last().translation.x, epsilon = 1e-12);
    }
}
