//! Rotation/pose algebra, state and calibration containers shared by every
//! other module.
//!
//! Conventions: Hamilton quaternions, scalar-first storage `[w, x, y, z]`;
//! right-handed world frame, z-up, local ENU anchored at the first GNSS fix.
//! Gravity pulls along -z; the vector `[0, 0, g]` is the specific-force term
//! an accelerometer at rest reads with identity attitude. Orientation updates
//! everywhere use the angle-axis retraction `q <- q * exp(delta)` (right
//! multiplication).

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Quat = UnitQuaternion<f64>;

/// Skew-symmetric matrix such that `skew(a) * b = a x b`.
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn quat_mul(a: &Quat, b: &Quat) -> Quat {
    a * b
}

/// Exponential map of SO(3): rotation vector (rad) to unit quaternion.
pub fn so3_exp(phi: &Vec3) -> Quat {
    let theta2 = phi.norm_squared();
    if theta2 < 1e-16 {
        // sin(t/2)/t ~ 1/2 - t^2/48
        let half = 0.5 - theta2 / 48.0;
        UnitQuaternion::from_quaternion(Quaternion::new(
            1.0 - theta2 / 8.0,
            half * phi.x,
            half * phi.y,
            half * phi.z,
        ))
    } else {
        let theta = theta2.sqrt();
        let half = (0.5 * theta).sin() / theta;
        UnitQuaternion::from_quaternion(Quaternion::new(
            (0.5 * theta).cos(),
            half * phi.x,
            half * phi.y,
            half * phi.z,
        ))
    }
}

/// Logarithm map of SO(3): unit quaternion to rotation vector with angle in
/// [0, pi]. At angle pi either antipode may be returned.
pub fn so3_log(q: &Quat) -> Vec3 {
    // Work on the w >= 0 sheet so the angle is minimal.
    let (w, v) = if q.w >= 0.0 {
        (q.w, Vec3::new(q.i, q.j, q.k))
    } else {
        (-q.w, -Vec3::new(q.i, q.j, q.k))
    };
    let vn = v.norm();
    if vn < 1e-12 {
        return v * 2.0;
    }
    let angle = 2.0 * vn.atan2(w);
    v * (angle / vn)
}

/// Left Jacobian of SO(3): integral of `exp(phi * s)` over s in [0,1].
pub fn so3_left_jacobian(phi: &Vec3) -> Mat3 {
    let theta2 = phi.norm_squared();
    let k = skew(phi);
    let k2 = k * k;
    let (a, b) = if theta2 < 1e-8 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        let theta = theta2.sqrt();
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Mat3::identity() + a * k + b * k2
}

/// Right Jacobian of SO(3); `exp(phi + d) ~ exp(phi) * exp(Jr(phi) d)`.
pub fn so3_right_jacobian(phi: &Vec3) -> Mat3 {
    so3_left_jacobian(&(-phi))
}

/// Inverse of the right Jacobian of SO(3).
pub fn so3_inv_right_jacobian(phi: &Vec3) -> Mat3 {
    let theta2 = phi.norm_squared();
    let k = skew(phi);
    let k2 = k * k;
    let b = if theta2 < 1e-8 {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        let theta = theta2.sqrt();
        1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Mat3::identity() + 0.5 * k + b * k2
}

/// Second integral matrix: `int_0^1 int_0^s exp(phi u) du ds`
/// (series sum_n [phi]^n / (n+2)!). Used for exact constant-rate position
/// increments.
pub fn so3_double_integral(phi: &Vec3) -> Mat3 {
    let theta2 = phi.norm_squared();
    let k = skew(phi);
    let k2 = k * k;
    let (a, b) = if theta2 < 1e-8 {
        (
            1.0 / 6.0 - theta2 / 120.0,
            1.0 / 24.0 - theta2 / 720.0,
        )
    } else {
        let theta = theta2.sqrt();
        let theta4 = theta2 * theta2;
        (
            (theta - theta.sin()) / (theta2 * theta),
            (theta.cos() - 1.0 + 0.5 * theta2) / theta4,
        )
    };
    0.5 * Mat3::identity() + a * k + b * k2
}

/// Canonical coefficients `[w, x, y, z]` with w >= 0 (double-cover pick used
/// by every serializer).
pub fn quat_canonical(q: &Quat) -> [f64; 4] {
    if q.w >= 0.0 {
        [q.w, q.i, q.j, q.k]
    } else {
        [-q.w, -q.i, -q.j, -q.k]
    }
}

pub fn quat_from_wxyz(c: [f64; 4]) -> Quat {
    UnitQuaternion::from_quaternion(Quaternion::new(c[0], c[1], c[2], c[3]))
}

/// Rigid transform: `x_world = rotation * x_local + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Quat,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Quat::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Quat, translation: Vec3) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    pub fn from_parts(q: Quat, t: [f64; 3]) -> Self {
        Pose::new(q, Vec3::new(t[0], t[1], t[2]))
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rinv = self.rotation.inverse();
        Pose {
            rotation: rinv,
            translation: -(rinv * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Inverse-transform: local coordinates of a world point.
    pub fn untransform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.inverse() * (p - self.translation)
    }

    /// Screw-free interpolation: translation lerp, rotation slerp, `s` in [0,1].
    pub fn interpolate(&self, other: &Pose, s: f64) -> Pose {
        Pose {
            rotation: self.rotation.slerp(&other.rotation, s),
            translation: self.translation.lerp(&other.translation, s),
        }
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        self.rotation.to_rotation_matrix().into_inner()
    }
}

/// Serialized pose form used in config files: translation + quaternion
/// `[w, x, y, z]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoseRepr {
    pub t: [f64; 3],
    pub q: [f64; 4],
}

impl From<Pose> for PoseRepr {
    fn from(p: Pose) -> Self {
        PoseRepr {
            t: [p.translation.x, p.translation.y, p.translation.z],
            q: quat_canonical(&p.rotation),
        }
    }
}

impl From<PoseRepr> for Pose {
    fn from(r: PoseRepr) -> Self {
        Pose::from_parts(quat_from_wxyz(r.q), r.t)
    }
}

/// Per-keyframe estimate: position, velocity, orientation, IMU biases and
/// odometer scale factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct State {
    pub p: Vec3,
    pub v: Vec3,
    pub q: Quat,
    pub ba: Vec3,
    pub bg: Vec3,
    pub c: f64,
}

/// Tangent-space dimension of [`State`] (p, v, theta, ba, bg, c).
pub const STATE_DIM: usize = 16;

impl Default for State {
    fn default() -> Self {
        State {
            p: Vec3::zeros(),
            v: Vec3::zeros(),
            q: Quat::identity(),
            ba: Vec3::zeros(),
            bg: Vec3::zeros(),
            c: 1.0,
        }
    }
}

impl State {
    pub fn pose(&self) -> Pose {
        Pose::new(self.q, self.p)
    }

    /// Retraction: additive on vector blocks, right exponential on rotation.
    /// `dx` layout: [dp, dv, dtheta, dba, dbg, dc].
    pub fn retract(&self, dx: &[f64]) -> State {
        debug_assert_eq!(dx.len(), STATE_DIM);
        let d = |i: usize| Vec3::new(dx[i], dx[i + 1], dx[i + 2]);
        State {
            p: self.p + d(0),
            v: self.v + d(3),
            q: self.q * so3_exp(&d(6)),
            ba: self.ba + d(9),
            bg: self.bg + d(12),
            c: self.c + dx[15],
        }
    }

    /// Local coordinates of `other` around `self`: inverse of [`State::retract`].
    pub fn local(&self, other: &State) -> [f64; STATE_DIM] {
        let dth = so3_log(&(self.q.inverse() * other.q));
        let mut out = [0.0; STATE_DIM];
        for i in 0..3 {
            out[i] = other.p[i] - self.p[i];
            out[3 + i] = other.v[i] - self.v[i];
            out[6 + i] = dth[i];
            out[9 + i] = other.ba[i] - self.ba[i];
            out[12 + i] = other.bg[i] - self.bg[i];
        }
        out[15] = other.c - self.c;
        out
    }
}

/// Rigid mounting geometry of all sensors relative to the body (IMU) frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Calibration {
    #[serde(with = "pose_repr")]
    pub t_lidar_in_body: Pose,
    #[serde(with = "pose_repr")]
    pub t_cam_in_body: Pose,
    /// Odometer frame orientation in body (forward axis = odometer +x).
    pub r_odo_in_body: [f64; 4],
    pub p_odo_in_body: [f64; 3],
    pub p_antenna_in_body: [f64; 3],
    pub lidar_mount_height: f64,
    pub lidar_mount_pitch: f64,
    pub camera_intrinsics: CameraIntrinsics,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

mod pose_repr {
    use super::{Pose, PoseRepr};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(p: &Pose, s: S) -> Result<S::Ok, S::Error> {
        PoseRepr::from(*p).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Pose, D::Error> {
        Ok(PoseRepr::deserialize(d)?.into())
    }
}

impl Calibration {
    pub fn r_odo(&self) -> Quat {
        quat_from_wxyz(self.r_odo_in_body)
    }

    pub fn odo_lever(&self) -> Vec3 {
        Vec3::from(self.p_odo_in_body)
    }

    pub fn antenna_lever(&self) -> Vec3 {
        Vec3::from(self.p_antenna_in_body)
    }
}

impl Default for Calibration {
    fn default() -> Self {
        Calibration {
            // LiDAR 2.2 m above the rail plane, pitched 10 deg down.
            t_lidar_in_body: Pose::new(
                so3_exp(&Vec3::new(0.0, 10f64.to_radians(), 0.0)),
                Vec3::new(0.5, 0.0, 2.2),
            ),
            t_cam_in_body: Pose::new(Quat::identity(), Vec3::new(0.6, 0.0, 2.0)),
            r_odo_in_body: [1.0, 0.0, 0.0, 0.0],
            p_odo_in_body: [-1.0, 0.0, -0.2],
            p_antenna_in_body: [0.0, 0.0, 3.0],
            lidar_mount_height: 2.2,
            lidar_mount_pitch: 10f64.to_radians(),
            camera_intrinsics: CameraIntrinsics {
                fx: 600.0,
                fy: 600.0,
                cx: 320.0,
                cy: 240.0,
            },
        }
    }
}

/// Continuous-time noise densities and random-walk intensities of the
/// inertial/odometer stack, plus per-sample sensor sigmas.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub sigma_a: f64,
    pub sigma_g: f64,
    pub sigma_ba: f64,
    pub sigma_bg: f64,
    pub sigma_odo_scale: f64,
    pub sigma_odo_vel: f64,
    pub sigma_gnss: f64,
    pub gravity_magnitude: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            sigma_a: 0.05,
            sigma_g: 0.002,
            sigma_ba: 1e-4,
            sigma_bg: 1e-5,
            sigma_odo_scale: 1e-4,
            sigma_odo_vel: 0.02,
            sigma_gnss: 0.1,
            gravity_magnitude: 9.81,
        }
    }
}

impl NoiseConfig {
    /// Specific-force offset read by a resting accelerometer at identity
    /// attitude; the same vector enters the propagation model with +1/2 dt^2.
    pub fn gravity_vec(&self) -> Vec3 {
        Vec3::new(0.0, 0.0, self.gravity_magnitude)
    }

    pub fn validate(&self) -> Result<(), String> {
        let fields = [
            ("sigma_a", self.sigma_a),
            ("sigma_g", self.sigma_g),
            ("sigma_ba", self.sigma_ba),
            ("sigma_bg", self.sigma_bg),
            ("sigma_odo_scale", self.sigma_odo_scale),
            ("sigma_odo_vel", self.sigma_odo_vel),
            ("sigma_gnss", self.sigma_gnss),
            ("gravity_magnitude", self.gravity_magnitude),
        ];
        for (name, v) in fields {
            if !(v > 0.0) {
                return Err(format!("noise config field {name} must be > 0, got {v}"));
            }
        }
        Ok(())
    }
}

/// One timestamped pose of a trajectory.
#[derive(Debug, Clone, Copy)]
pub struct StampedPose {
    pub t: f64,
    pub pose: Pose,
}

/// Write a trajectory in TUM text format: `t tx ty tz qx qy qz qw`, nine
/// significant digits per field.
pub fn write_tum<W: Write>(mut w: W, traj: &[StampedPose]) -> std::io::Result<()> {
    for sp in traj {
        let q = quat_canonical(&sp.pose.rotation);
        let t = sp.pose.translation;
        writeln!(
            w,
            "{:.8e} {:.8e} {:.8e} {:.8e} {:.8e} {:.8e} {:.8e} {:.8e}",
            sp.t, t.x, t.y, t.z, q[1], q[2], q[3], q[0]
        )?;
    }
    Ok(())
}

pub fn read_tum<R: BufRead>(r: R) -> std::io::Result<Vec<StampedPose>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<f64> = line
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        if f.len() != 8 {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("TUM line needs 8 fields, got {}", f.len()),
            ));
        }
        out.push(StampedPose {
            t: f[0],
            pose: Pose::from_parts(quat_from_wxyz([f[7], f[4], f[5], f[6]]), [f[1], f[2], f[3]]),
        });
    }
    Ok(out)
}
