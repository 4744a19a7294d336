//! Visual constraints from abstract tracked observations: point reprojection
//! with LiDAR-associated depth, line-segment reprojection, and vanishing-point
//! orientation locking. All image quantities live on the normalized plane;
//! intrinsics only enter pixel-threshold conversions.

use crate::geom::{skew, Calibration, Mat3, Pose, Vec3};
use nalgebra::{Matrix2x3, SMatrix, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

#[derive(Debug, Clone, Copy)]
pub struct PointObservation {
    pub feature_id: u64,
    /// Normalized image coordinates.
    pub uv: Vector2<f64>,
    /// Depth along the camera axis, metres; assigned, not measured.
    pub depth: Option<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct LineObservation {
    pub landmark_id: u64,
    /// Normalized 2D endpoints.
    pub endpoints: [Vector2<f64>; 2],
    /// Homogeneous line with ||(l1, l2)|| = 1; endpoints lie on it.
    pub l: Vec3,
}

impl LineObservation {
    /// Construct from endpoints; the line is their homogeneous join.
    pub fn from_endpoints(landmark_id: u64, a: Vector2<f64>, b: Vector2<f64>) -> Self {
        let ah = Vec3::new(a.x, a.y, 1.0);
        let bh = Vec3::new(b.x, b.y, 1.0);
        let l = ah.cross(&bh);
        let s = (l.x * l.x + l.y * l.y).sqrt().max(1e-12);
        LineObservation {
            landmark_id,
            endpoints: [a, b],
            l: l / s,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct VanishingPointObs {
    /// Unit direction of the vanishing point in the camera frame.
    pub n_c: Vec3,
    /// Matching world direction (track tangent).
    pub n_w: Vec3,
}

/// Assign each feature the depth of the nearest projected cloud point within
/// an angular radius (`radius` on the normalized plane, typically 3 px / fx).
/// Features with no neighbour keep `depth: None`.
pub fn associate_depth(
    points: &[PointObservation],
    cloud_cam: &[Vec3],
    radius: f64,
) -> Vec<PointObservation> {
    let projected: Vec<(Vector2<f64>, f64)> = cloud_cam
        .iter()
        .filter(|p| p.z > 0.1)
        .map(|p| (Vector2::new(p.x / p.z, p.y / p.z), p.z))
        .collect();
    points
        .iter()
        .map(|obs| {
            let mut best: Option<(f64, f64)> = None;
            for (uv, z) in &projected {
                let d = (uv - obs.uv).norm();
                if d <= radius && best.map_or(true, |(bd, _)| d < bd) {
                    best = Some((d, *z));
                }
            }
            PointObservation {
                depth: best.map(|(_, z)| z),
                ..*obs
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct VpConfig {
    /// Consensus distance on the normalized plane (2 px / fx equivalent).
    pub consensus_dist: f64,
    pub min_consensus: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for VpConfig {
    fn default() -> Self {
        VpConfig {
            consensus_dist: 2.0 / 600.0,
            min_consensus: 4,
            iterations: 200,
            seed: 11,
        }
    }
}

/// Algebraic distance between a normalized line and a unit homogeneous
/// point; for points near the principal axis this approximates the Euclidean
/// point-line distance on the normalized plane.
fn line_point_consensus_dist(l: &Vec3, v_unit: &Vec3) -> f64 {
    l.dot(v_unit).abs()
}

/// RANSAC over pairwise line intersections in homogeneous coordinates,
/// least-squares refit over the consensus set. Returns the unit direction of
/// the dominant vanishing point (z >= 0), or `None` below the consensus
/// floor.
pub fn estimate_vanishing_point(segments: &[LineObservation], cfg: &VpConfig) -> Option<Vec3> {
    if segments.len() < cfg.min_consensus {
        return None;
    }
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut best_count = 0usize;
    let mut best_set: Vec<usize> = Vec::new();
    for _ in 0..cfg.iterations {
        let i = rng.gen_range(0..segments.len());
        let j = rng.gen_range(0..segments.len());
        if i == j {
            continue;
        }
        let v = segments[i].l.cross(&segments[j].l);
        let n = v.norm();
        if n < 1e-12 {
            continue;
        }
        let v = v / n;
        let set: Vec<usize> = (0..segments.len())
            .filter(|&k| line_point_consensus_dist(&segments[k].l, &v) <= cfg.consensus_dist)
            .collect();
        if set.len() > best_count {
            best_count = set.len();
            best_set = set;
        }
    }
    if best_count < cfg.min_consensus {
        return None;
    }
    // Homogeneous least squares over the consensus lines.
    let mut m = Mat3::zeros();
    for &k in &best_set {
        let l = segments[k].l;
        m += l * l.transpose();
    }
    let eig = m.symmetric_eigen();
    let mut smallest = 0;
    for i in 1..3 {
        if eig.eigenvalues[i] < eig.eigenvalues[smallest] {
            smallest = i;
        }
    }
    let mut v = Vec3::from(eig.eigenvectors.column(smallest).into_owned()).normalize();
    if v.z < 0.0 || (v.z == 0.0 && v.x < 0.0) {
        v = -v;
    }
    Some(v)
}

/// Camera pose (camera-to-world) of a body pose under the mounting extrinsic.
pub fn camera_pose(body: &Pose, calib: &Calibration) -> Pose {
    body.compose(&calib.t_cam_in_body)
}

/// Normalized-plane reprojection residual `(projected - observed)` with
/// Jacobians against the body pose tangent [dp, dtheta] and the landmark.
/// `None` when the landmark falls behind the camera.
#[allow(clippy::type_complexity)]
pub fn point_reprojection_residual(
    obs: &PointObservation,
    landmark_w: &Vec3,
    body: &Pose,
    calib: &Calibration,
) -> Option<(Vector2<f64>, SMatrix<f64, 2, 6>, Matrix2x3<f64>)> {
    let c_rot = calib.t_cam_in_body.rotation_matrix();
    let c_rot_t = c_rot.transpose();
    let r_t = body.rotation_matrix().transpose();
    let x_b = r_t * (landmark_w - body.translation);
    let x_c = c_rot_t * (x_b - calib.t_cam_in_body.translation);
    if x_c.z <= 1e-6 {
        return None;
    }
    let (x, y, z) = (x_c.x, x_c.y, x_c.z);
    let r = Vector2::new(x / z - obs.uv.x, y / z - obs.uv.y);

    let mut d_proj = Matrix2x3::zeros();
    d_proj[(0, 0)] = 1.0 / z;
    d_proj[(0, 2)] = -x / (z * z);
    d_proj[(1, 1)] = 1.0 / z;
    d_proj[(1, 2)] = -y / (z * z);

    let d_xc_dp = -(c_rot_t * r_t);
    let d_xc_dth = c_rot_t * skew(&x_b);
    let d_xc_dlm = c_rot_t * r_t;

    let mut j_pose = SMatrix::<f64, 2, 6>::zeros();
    j_pose
        .fixed_view_mut::<2, 3>(0, 0)
        .copy_from(&(d_proj * d_xc_dp));
    j_pose
        .fixed_view_mut::<2, 3>(0, 3)
        .copy_from(&(d_proj * d_xc_dth));
    Some((r, j_pose, d_proj * d_xc_dlm))
}

/// Euclidean point-line distance on the normalized plane for a homogeneous
/// midpoint `m = (mx, my, 1)`.
pub fn line_point_distance(l: &Vec3, m: &Vec3) -> f64 {
    l.dot(m) / (l.x * l.x + l.y * l.y).sqrt()
}

/// Line reprojection residual: signed distance of the projected 3D segment
/// midpoint (clipped to the field of view) from the observed image line.
/// Jacobian against the body pose tangent. `None` when either endpoint is
/// behind the camera or the clipped segment is empty.
pub fn line_residual(
    obs_l: &Vec3,
    p1_w: &Vec3,
    p2_w: &Vec3,
    body: &Pose,
    calib: &Calibration,
) -> Option<(f64, SMatrix<f64, 1, 6>)> {
    let c_rot_t = calib.t_cam_in_body.rotation_matrix().transpose();
    let r_t = body.rotation_matrix().transpose();
    let to_cam = |pw: &Vec3| {
        let x_b = r_t * (pw - body.translation);
        c_rot_t * (x_b - calib.t_cam_in_body.translation)
    };
    let a_c = to_cam(p1_w);
    let b_c = to_cam(p2_w);
    if a_c.z <= 1e-6 || b_c.z <= 1e-6 {
        return None;
    }
    let a = Vector2::new(a_c.x / a_c.z, a_c.y / a_c.z);
    let b = Vector2::new(b_c.x / b_c.z, b_c.y / b_c.z);

    // Clip the projected segment to the field of view.
    let ki = &calib.camera_intrinsics;
    let (u_max, v_max) = (ki.cx / ki.fx, ki.cy / ki.fy);
    let mut t0 = 0.0f64;
    let mut t1 = 1.0f64;
    for (val_a, val_b, lim) in [
        (a.x, b.x, u_max),
        (a.y, b.y, v_max),
    ] {
        let d = val_b - val_a;
        for (lo, hi) in [(-lim, lim)] {
            if d.abs() < 1e-12 {
                if val_a < lo || val_a > hi {
                    return None;
                }
            } else {
                let ta = (lo - val_a) / d;
                let tb = (hi - val_a) / d;
                let (tmin, tmax) = if ta < tb { (ta, tb) } else { (tb, ta) };
                t0 = t0.max(tmin);
                t1 = t1.min(tmax);
            }
        }
    }
    if t0 >= t1 {
        return None;
    }
    // Midpoint of the clipped segment; the clip parameters are held fixed
    // for the Jacobian.
    let t_mid = 0.5 * (t0 + t1);
    let m = Vec3::new(
        a.x + t_mid * (b.x - a.x),
        a.y + t_mid * (b.y - a.y),
        1.0,
    );
    let denom = (obs_l.x * obs_l.x + obs_l.y * obs_l.y).sqrt();
    let r = obs_l.dot(&m) / denom;

    // d r / d m_xy.
    let dr_dm = Vector2::new(obs_l.x / denom, obs_l.y / denom);
    let d_proj = |x_c: &Vec3| {
        let mut d = Matrix2x3::zeros();
        d[(0, 0)] = 1.0 / x_c.z;
        d[(0, 2)] = -x_c.x / (x_c.z * x_c.z);
        d[(1, 1)] = 1.0 / x_c.z;
        d[(1, 2)] = -x_c.y / (x_c.z * x_c.z);
        d
    };
    let mut j = SMatrix::<f64, 1, 6>::zeros();
    for (pw, weight, x_c) in [(p1_w, 1.0 - t_mid, &a_c), (p2_w, t_mid, &b_c)] {
        let x_b = r_t * (pw - body.translation);
        let d_xc_dp = -(c_rot_t * r_t);
        let d_xc_dth = c_rot_t * skew(&x_b);
        let dm = d_proj(x_c);
        let row_p = dr_dm.transpose() * dm * d_xc_dp * weight;
        let row_th = dr_dm.transpose() * dm * d_xc_dth * weight;
        for c in 0..3 {
            j[(0, c)] += row_p[(0, c)];
            j[(0, 3 + c)] += row_th[(0, c)];
        }
    }
    Some((r, j))
}

/// Vanishing-point residual `n_c x (R_w_c n_w)` with Jacobian against the
/// body orientation tangent. Zero iff the directions are parallel.
pub fn vp_residual(
    obs: &VanishingPointObs,
    body: &Pose,
    calib: &Calibration,
) -> (Vec3, Mat3) {
    let c_rot_t = calib.t_cam_in_body.rotation_matrix().transpose();
    let r_t = body.rotation_matrix().transpose();
    let m = r_t * obs.n_w;
    let u = c_rot_t * m;
    let r = obs.n_c.cross(&u);
    let j_th = skew(&obs.n_c) * c_rot_t * skew(&m);
    (r, j_th)
}
