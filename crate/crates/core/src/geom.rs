//! Rotation, pose, and error arithmetic.
//!
//! Rotations are stored as unit quaternions in a canonical hemisphere
//! (`w >= 0`, ties broken by the first nonzero component being positive).
//! Matrices only appear inside [`rot_frobenius_error`].

use std::f64::consts::PI;
use std::ops::Mul;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Unit quaternion `(w, x, y, z)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rot {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl Default for Rot {
    fn default() -> Self {
        Rot::IDENTITY
    }
}

impl Rot {
    pub const IDENTITY: Rot = Rot {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Normalizes and canonicalizes `(w, x, y, z)`.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Rot> {
        if !(w.is_finite() && x.is_finite() && y.is_finite() && z.is_finite()) {
            return Err(Error::NonFinite("quaternion".into()));
        }
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if n < 1e-12 {
            return Err(Error::Invalid("zero-norm quaternion".into()));
        }
        if (n - 1.0).abs() <= 4.0 * f64::EPSILON {
            // already unit: keep bits so serialization round-trips exactly
            return Ok(Rot::canonical(w, x, y, z));
        }
        Ok(Rot::canonical(w / n, x / n, y / n, z / n))
    }

    /// Internal constructor for values that are finite by construction.
    fn normalized(w: f64, x: f64, y: f64, z: f64) -> Rot {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        Rot::canonical(w / n, x / n, y / n, z / n)
    }

    fn canonical(w: f64, x: f64, y: f64, z: f64) -> Rot {
        let flip = if w != 0.0 {
            w < 0.0
        } else if x != 0.0 {
            x < 0.0
        } else if y != 0.0 {
            y < 0.0
        } else {
            z < 0.0
        };
        if flip {
            Rot {
                w: -w,
                x: -x,
                y: -y,
                z: -z,
            }
        } else {
            Rot { w, x, y, z }
        }
    }

    pub fn from_array(q: [f64; 4]) -> Result<Rot> {
        Rot::new(q[0], q[1], q[2], q[3])
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn xyz(&self) -> Vec3 {
        Vec3::new(self.x, self.y, self.z)
    }

    /// Rotation of `angle` radians about `axis` (normalized internally).
    /// A zero axis yields the identity.
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Rot {
        let n = axis.norm();
        if n < 1e-15 || angle == 0.0 {
            return Rot::IDENTITY;
        }
        let (s, c) = (angle * 0.5).sin_cos();
        let a = axis / n;
        Rot::normalized(c, a.x * s, a.y * s, a.z * s)
    }

    /// Rotation about the world z axis (yaw).
    pub fn about_z(angle: f64) -> Rot {
        Rot::from_axis_angle(&Vec3::z(), angle)
    }

    /// Exponential map of a rotation vector (axis * angle).
    pub fn from_rotvec(v: &Vec3) -> Rot {
        let angle = v.norm();
        if angle < 1e-12 {
            // second-order accurate near zero
            return Rot::normalized(1.0, 0.5 * v.x, 0.5 * v.y, 0.5 * v.z);
        }
        Rot::from_axis_angle(v, angle)
    }

    /// Logarithm: rotation vector with norm in `[0, pi]`.
    pub fn to_rotvec(&self) -> Vec3 {
        let v = self.xyz();
        let s = v.norm();
        if s < 1e-15 {
            return 2.0 * v;
        }
        let angle = 2.0 * s.atan2(self.w);
        v * (angle / s)
    }

    /// Rotation angle of this rotation, in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        2.0 * self.xyz().norm().atan2(self.w.abs())
    }

    pub fn inverse(&self) -> Rot {
        Rot::canonical(self.w, -self.x, -self.y, -self.z)
    }

    pub fn dot(&self, other: &Rot) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        let u = self.xyz();
        let t = 2.0 * u.cross(v);
        v + self.w * t + u.cross(&t)
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Signed angle of the twist of this rotation about `axis` (unit).
    pub fn twist_angle(&self, axis: &Vec3) -> f64 {
        let p = self.xyz().dot(axis);
        let a = 2.0 * p.atan2(self.w);
        // wrap into (-pi, pi]
        if a > PI {
            a - 2.0 * PI
        } else if a <= -PI {
            a + 2.0 * PI
        } else {
            a
        }
    }
}

impl Mul for Rot {
    type Output = Rot;

    fn mul(self, o: Rot) -> Rot {
        let (a, b) = (self, o);
        Rot::normalized(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }
}

/// Angular distance `2·acos(|<a,b>|)`, evaluated in the equivalent
/// `atan2` form on the relative rotation so that `quat_angle(q, q) == 0`
/// exactly.
pub fn quat_angle(a: &Rot, b: &Rot) -> f64 {
    // unnormalized conj(a) * b
    let (va, vb) = (a.xyz(), b.xyz());
    let w = a.w * b.w + va.dot(&vb);
    let v = vb * a.w - va * b.w - va.cross(&vb);
    2.0 * v.norm().atan2(w.abs())
}

/// Frobenius norm of the difference of the two rotation matrices.
pub fn rot_frobenius_error(a: &Rot, b: &Rot) -> f64 {
    (a.to_matrix() - b.to_matrix()).norm()
}

/// Euclidean distance between two points in meters, reported in centimeters.
pub fn translation_error(a: &Vec3, b: &Vec3) -> f64 {
    100.0 * (a - b).norm()
}

/// Shortest-arc spherical interpolation; normalized lerp below 1e-6 rad.
pub fn slerp(a: &Rot, b: &Rot, u: f64) -> Rot {
    if a == b {
        return *a;
    }
    let mut d = a.dot(b);
    let mut bb = *b;
    if d < 0.0 {
        d = -d;
        bb = Rot {
            w: -b.w,
            x: -b.x,
            y: -b.y,
            z: -b.z,
        };
    }
    let lerp = |s: f64, t: f64| {
        Rot::normalized(
            s * a.w + t * bb.w,
            s * a.x + t * bb.x,
            s * a.y + t * bb.y,
            s * a.z + t * bb.z,
        )
    };
    if quat_angle(a, b) < 1e-6 {
        return lerp(1.0 - u, u);
    }
    let theta = d.min(1.0).acos();
    let sin_t = theta.sin();
    lerp(
        ((1.0 - u) * theta).sin() / sin_t,
        (u * theta).sin() / sin_t,
    )
}

/// Sign-aligned quaternion mean (aligned to the first entry), renormalized.
pub fn mean_rotation(rots: &[Rot]) -> Option<Rot> {
    let first = rots.first()?;
    let mut acc = [0.0; 4];
    for r in rots {
        let s = if r.dot(first) < 0.0 { -1.0 } else { 1.0 };
        for (a, c) in acc.iter_mut().zip(r.to_array()) {
            *a += s * c;
        }
    }
    Rot::from_array(acc).ok()
}

/// Rigid transform: rotation followed by translation.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(into = "[f64; 7]", try_from = "[f64; 7]")]
pub struct Pose {
    pub translation: Vec3,
    pub rotation: Rot,
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        translation: Vec3::new(0.0, 0.0, 0.0),
        rotation: Rot::IDENTITY,
    };

    pub fn new(translation: Vec3, rotation: Rot) -> Pose {
        Pose {
            translation,
            rotation,
        }
    }

    pub fn from_translation(t: Vec3) -> Pose {
        Pose::new(t, Rot::IDENTITY)
    }

    pub fn compose(&self, b: &Pose) -> Pose {
        Pose {
            translation: self.translation + self.rotation.rotate(&b.translation),
            rotation: self.rotation * b.rotation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let r = self.rotation.inverse();
        Pose {
            translation: -r.rotate(&self.translation),
            rotation: r,
        }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.rotate(p) + self.translation
    }

    /// `(tx, ty, tz, qw, qx, qy, qz)`.
    pub fn to_array(&self) -> [f64; 7] {
        let q = self.rotation.to_array();
        [
            self.translation.x,
            self.translation.y,
            self.translation.z,
            q[0],
            q[1],
            q[2],
            q[3],
        ]
    }

    pub fn from_array(a: [f64; 7]) -> Result<Pose> {
        if a[..3].iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("pose translation".into()));
        }
        Ok(Pose {
            translation: Vec3::new(a[0], a[1], a[2]),
            rotation: Rot::new(a[3], a[4], a[5], a[6])?,
        })
    }
}

impl Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl From<Pose> for [f64; 7] {
    fn from(p: Pose) -> Self {
        p.to_array()
    }
}

impl TryFrom<[f64; 7]> for Pose {
    type Error = Error;
    fn try_from(a: [f64; 7]) -> Result<Pose> {
        Pose::from_array(a)
    }
}

/// Desired or actual object state: rotation, translation, optional joint angle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "ObjectStateRepr", try_from = "ObjectStateRepr")]
pub struct ObjectState {
    pub rotation: Rot,
    pub translation: Vec3,
    pub joint: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct ObjectStateRepr {
    pose: [f64; 7],
    joint: Option<f64>,
}

impl From<ObjectState> for ObjectStateRepr {
    fn from(s: ObjectState) -> Self {
        ObjectStateRepr {
            pose: s.pose().to_array(),
            joint: s.joint,
        }
    }
}

impl TryFrom<ObjectStateRepr> for ObjectState {
    type Error = Error;
    fn try_from(r: ObjectStateRepr) -> Result<Self> {
        if r.joint.is_some_and(|j| !j.is_finite()) {
            return Err(Error::NonFinite("joint angle".into()));
        }
        Ok(ObjectState::from_pose(Pose::from_array(r.pose)?, r.joint))
    }
}

impl ObjectState {
    pub fn new(translation: Vec3, rotation: Rot, joint: Option<f64>) -> Self {
        ObjectState {
            rotation,
            translation,
            joint,
        }
    }

    pub fn from_pose(p: Pose, joint: Option<f64>) -> Self {
        ObjectState::new(p.translation, p.rotation, joint)
    }

    pub fn pose(&self) -> Pose {
        Pose::new(self.translation, self.rotation)
    }

    pub fn joint_or_zero(&self) -> f64 {
        self.joint.unwrap_or(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::{FRAC_PI_2, SQRT_2};

    #[test]
    fn quat_angle_examples() {
        let q = Rot::new(0.3, -0.2, 0.9, 0.1).unwrap();
        assert_eq!(quat_angle(&q, &q), 0.0);
        let neg = Rot {
            w: -q.w,
            x: -q.x,
            y: -q.y,
            z: -q.z,
        };
        assert_eq!(quat_angle(&q, &neg), 0.0);
        let qz = Rot::about_z(FRAC_PI_2);
        assert_abs_diff_eq!(quat_angle(&Rot::IDENTITY, &qz), FRAC_PI_2, epsilon = 1e-9);
    }

    #[test]
    fn frobenius_examples() {
        assert_eq!(rot_frobenius_error(&Rot::IDENTITY, &Rot::IDENTITY), 0.0);
        let half = Rot::about_z(PI);
        assert_abs_diff_eq!(
            rot_frobenius_error(&Rot::IDENTITY, &half),
            2.0 * SQRT_2,
            epsilon = 1e-12
        );
        let quarter = Rot::about_z(FRAC_PI_2);
        assert_abs_diff_eq!(
            rot_frobenius_error(&Rot::IDENTITY, &quarter),
            2.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn translation_error_examples() {
        let o = Vec3::zeros();
        assert_eq!(translation_error(&o, &o), 0.0);
        assert_abs_diff_eq!(
            translation_error(&o, &Vec3::new(0.03, 0.04, 0.0)),
            5.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            translation_error(&Vec3::new(1.0, 1.0, 1.0), &Vec3::new(1.0, 1.0, 1.10)),
            10.0,
            epsilon = 1e-9
        );
    }

    #[test]
    fn slerp_examples() {
        let q = Rot::new(0.5, 0.5, -0.5, 0.5).unwrap();
        assert_abs_diff_eq!(quat_angle(&slerp(&q, &q, 0.5), &q), 0.0, epsilon = 1e-12);
        let mid = slerp(&Rot::IDENTITY, &Rot::about_z(PI), 0.5);
        assert_abs_diff_eq!(quat_angle(&mid, &Rot::about_z(FRAC_PI_2)), 0.0, epsilon = 1e-9);
        let b = Rot::about_z(1.0);
        assert_eq!(slerp(&q, &b, 0.0), q);
        assert!(quat_angle(&slerp(&q, &b, 1.0), &b) < 1e-9);
    }

    #[test]
    fn canonical_hemisphere() {
        let r = Rot::new(-0.5, 0.5, 0.5, 0.5).unwrap();
        assert!(r.w() >= 0.0);
        let tie = Rot::new(0.0, -1.0, 0.0, 0.0).unwrap();
        assert_eq!(tie.to_array(), [0.0, 1.0, 0.0, 0.0]);
        assert!(Rot::new(f64::NAN, 0.0, 0.0, 1.0).is_err());
        assert!(Rot::new(0.0, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn pose_group_examples() {
        let x = Pose::new(Vec3::new(0.3, -1.0, 2.0), Rot::new(0.2, 0.4, -0.1, 0.9).unwrap());
        assert_eq!(Pose::IDENTITY.compose(&x).to_array(), x.to_array());
        let id = x.compose(&x.inverse());
        assert!(id.translation.norm() < 1e-9);
        assert!(id.rotation.angle() < 1e-9);
        let p = Pose::from_translation(Vec3::new(1.0, 0.0, 0.0));
        assert_eq!(p.transform_point(&Vec3::zeros()), Vec3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn rotvec_round_trip() {
        let v = Vec3::new(0.3, -0.2, 0.5);
        let r = Rot::from_rotvec(&v);
        assert!((r.to_rotvec() - v).norm() < 1e-12);
    }

    #[test]
    fn pose_serializes_as_seven_numbers() {
        let p = Pose::new(Vec3::new(1.0, 2.0, 3.0), Rot::about_z(0.5));
        let s = serde_json::to_string(&p).unwrap();
        let back: Pose = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
        let v: Vec<f64> = serde_json::from_str(&s).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(&v[..3], &[1.0, 2.0, 3.0]);
    }
}
