//! Pose algebra and the two rotation error metrics.
use hierdex::geom::{quat_angle, rot_frobenius_error, slerp};
use hierdex::{Pose, Rot, Vec3};

fn main() {
    let a = Rot::about_z(0.3);
    let b = Rot::from_axis_angle(&Vec3::new(1.0, 1.0, 0.0), 1.2);
    let th = quat_angle(&a, &b);
    println!("angle {th:.4} rad, frobenius {:.4}", rot_frobenius_error(&a, &b));
    println!("2*sqrt(2)*sin(angle/2) = {:.4}", 2.0 * 2f64.sqrt() * (th / 2.0).sin());
    for u in [0.0, 0.25, 0.5, 1.0] {
        println!("slerp {u:.2}: {:.4} rad from a", quat_angle(&a, &slerp(&a, &b, u)));
    }
    let x = Pose::new(Vec3::new(0.1, 0.0, 0.2), b);
    let p = Vec3::new(0.05, -0.02, 0.0);
    let back = x.inverse().transform_point(&x.transform_point(&p));
    println!("round trip error {:.2e}", (back - p).norm());
}
