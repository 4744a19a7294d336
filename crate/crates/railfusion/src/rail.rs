//! Rail-track extraction and the ground-plane constraint.
//!
//! The track bed is detected from the LiDAR mounting geometry, the two rails
//! are found as local height maxima inside lateral candidate bands, fixed by
//! RANSAC lines, refined by region growing with the track-head width as the
//! distance threshold, and finally a plane is fitted through both rail point
//! sets. Consecutive keyframe planes constrain roll, pitch and height in the
//! window.

use crate::geom::{so3_exp, Calibration, Mat3, Pose, Vec3};
use nalgebra::Vector4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// Straight rail segment fitted in the leveled sensor frame.
#[derive(Debug, Clone)]
pub struct RailLine {
    pub point: Vec3,
    /// Unit direction, canonicalized to forward (x > 0).
    pub direction: Vec3,
    pub inliers: Vec<usize>,
}

/// Plane `n . p + d = 0` with unit normal and `n.z > 0`.
#[derive(Debug, Clone, Copy)]
pub struct RailPlane {
    pub n: Vec3,
    pub d: f64,
}

impl RailPlane {
    pub fn new(n: Vec3, d: f64) -> Self {
        let nn = n.norm();
        let (mut n, mut d) = (n / nn, d / nn);
        if n.z < 0.0 {
            n = -n;
            d = -d;
        }
        RailPlane { n, d }
    }

    pub fn coeffs(&self) -> Vector4<f64> {
        Vector4::new(self.n.x, self.n.y, self.n.z, self.d)
    }

    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        self.n.dot(p) + self.d
    }
}

/// Membership-preserving plane map under `x' = R x + t`:
/// `n' = R n`, `d' = d - n' . t`.
pub fn transform_plane(t: &Pose, m: &RailPlane) -> RailPlane {
    let n = t.rotation * m.n;
    let d = m.d - n.dot(&t.translation);
    // No re-normalization needed (rotation preserves the norm); keep the
    // sign convention of the source plane rather than flipping, so the
    // residual stays smooth across near-horizontal transforms.
    RailPlane { n, d }
}

/// Raw 4-vector residual between a measured plane and a transformed one.
pub fn plane_residual_raw(m_k1: &RailPlane, m_k_transformed: &RailPlane) -> Vector4<f64> {
    m_k1.coeffs() - m_k_transformed.coeffs()
}

#[derive(Debug, Clone)]
pub struct RailConfig {
    pub gauge: f64,
    /// Height window around the expected bed level.
    pub bed_height_tol: f64,
    pub lateral_corridor: f64,
    /// Candidate band half-width around each rail.
    pub band_halfwidth: f64,
    /// Longitudinal bin length for the local-maximum search.
    pub bin_len: f64,
    /// Keep candidates within this height of the bin maximum.
    pub local_max_tol: f64,
    pub ransac_iterations: usize,
    pub line_inlier_dist: f64,
    pub min_line_inliers: usize,
    /// Region-growing distance to the fitted line (track-head width).
    pub grow_threshold: f64,
    /// Seed region: points up to this far ahead of the sensor.
    pub seed_ahead: f64,
    pub plane_inlier_dist: f64,
    pub min_plane_points: usize,
    pub seed: u64,
}

impl Default for RailConfig {
    fn default() -> Self {
        RailConfig {
            gauge: 1.435,
            bed_height_tol: 0.3,
            lateral_corridor: 3.0,
            band_halfwidth: 0.2,
            bin_len: 0.5,
            local_max_tol: 0.03,
            ransac_iterations: 200,
            line_inlier_dist: 0.03,
            min_line_inliers: 10,
            grow_threshold: 0.07,
            seed_ahead: 5.0,
            plane_inlier_dist: 0.02,
            min_plane_points: 20,
            seed: 7,
        }
    }
}

/// Rotation leveling the sensor frame using the mounting pitch.
pub fn leveling_rotation(calib: &Calibration) -> Mat3 {
    so3_exp(&Vec3::new(0.0, calib.lidar_mount_pitch, 0.0))
        .to_rotation_matrix()
        .into_inner()
}

/// Select track-bed points: height within `bed_height_tol` of the negative
/// mounting height (in the gravity-aligned sensor frame) and inside the
/// lateral corridor. Returns (original index, leveled point).
pub fn detect_track_bed(
    points: &[Vec3],
    calib: &Calibration,
    cfg: &RailConfig,
) -> Vec<(usize, Vec3)> {
    let level = leveling_rotation(calib);
    let h = calib.lidar_mount_height;
    points
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let q = level * p;
            if (q.z + h).abs() <= cfg.bed_height_tol && q.y.abs() <= cfg.lateral_corridor {
                Some((i, q))
            } else {
                None
            }
        })
        .collect()
}

/// Locate rail-head candidates: inside each lateral band, keep points whose
/// height is within `local_max_tol` of the local (0.5 m longitudinal bin)
/// maximum. Returns (left, right) index lists into `bed`.
pub fn find_rail_candidates(
    bed: &[(usize, Vec3)],
    cfg: &RailConfig,
) -> (Vec<usize>, Vec<usize>) {
    let mut out = (Vec::new(), Vec::new());
    for (side, centre) in [(0usize, cfg.gauge / 2.0), (1usize, -cfg.gauge / 2.0)] {
        let band: Vec<usize> = bed
            .iter()
            .enumerate()
            .filter(|(_, (_, p))| (p.y - centre).abs() <= cfg.band_halfwidth)
            .map(|(j, _)| j)
            .collect();
        if band.is_empty() {
            continue;
        }
        // Local maxima over longitudinal bins.
        use std::collections::HashMap;
        let mut bin_max: HashMap<i64, f64> = HashMap::new();
        for &j in &band {
            let p = bed[j].1;
            let bin = (p.x / cfg.bin_len).floor() as i64;
            let e = bin_max.entry(bin).or_insert(f64::NEG_INFINITY);
            *e = e.max(p.z);
        }
        let keep: Vec<usize> = band
            .into_iter()
            .filter(|&j| {
                let p = bed[j].1;
                let bin = (p.x / cfg.bin_len).floor() as i64;
                p.z >= bin_max[&bin] - cfg.local_max_tol
            })
            .collect();
        if side == 0 {
            out.0 = keep;
        } else {
            out.1 = keep;
        }
    }
    out
}

fn line_distance(p: &Vec3, point: &Vec3, dir: &Vec3) -> f64 {
    (p - point).cross(dir).norm()
}

fn fit_line_ls(pts: &[Vec3]) -> (Vec3, Vec3) {
    let n = pts.len() as f64;
    let mean = pts.iter().sum::<Vec3>() / n;
    let mut cov = Mat3::zeros();
    for p in pts {
        let d = p - mean;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigen();
    let mut best = 0;
    for i in 1..3 {
        if eig.eigenvalues[i] > eig.eigenvalues[best] {
            best = i;
        }
    }
    let mut dir = Vec3::from(eig.eigenvectors.column(best).into_owned()).normalize();
    if dir.x < 0.0 {
        dir = -dir;
    }
    (mean, dir)
}

/// RANSAC 2-point line fit with least-squares refit on the inliers.
/// Deterministic under the config seed. `None` when the inlier floor is not
/// met.
pub fn fit_rail_line_ransac(
    bed: &[(usize, Vec3)],
    candidates: &[usize],
    cfg: &RailConfig,
    seed_offset: u64,
) -> Option<RailLine> {
    if candidates.len() < 2 {
        return None;
    }
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed.wrapping_add(seed_offset));
    let mut best_count = 0usize;
    let mut best: Option<(Vec3, Vec3)> = None;
    for _ in 0..cfg.ransac_iterations {
        let a = candidates[rng.gen_range(0..candidates.len())];
        let b = candidates[rng.gen_range(0..candidates.len())];
        if a == b {
            continue;
        }
        let pa = bed[a].1;
        let pb = bed[b].1;
        let dir = pb - pa;
        if dir.norm() < 0.3 {
            continue;
        }
        let dir = dir.normalize();
        let count = candidates
            .iter()
            .filter(|&&j| line_distance(&bed[j].1, &pa, &dir) <= cfg.line_inlier_dist)
            .count();
        if count > best_count {
            best_count = count;
            best = Some((pa, dir));
        }
    }
    let (pa, dir) = best?;
    let inliers: Vec<usize> = candidates
        .iter()
        .filter(|&&j| line_distance(&bed[j].1, &pa, &dir) <= cfg.line_inlier_dist)
        .cloned()
        .collect();
    if inliers.len() < cfg.min_line_inliers {
        return None;
    }
    let pts: Vec<Vec3> = inliers.iter().map(|&j| bed[j].1).collect();
    let (point, direction) = fit_line_ls(&pts);
    Some(RailLine {
        point,
        direction,
        inliers,
    })
}

/// Seeded region growing: starting from bed points within `seed_ahead`
/// metres ahead that sit on the fitted line, add neighbouring bed points
/// whose distance to the line stays below the track-head width.
pub fn region_grow_refine(line: &RailLine, bed: &[(usize, Vec3)], cfg: &RailConfig) -> Vec<usize> {
    let near_line: Vec<usize> = (0..bed.len())
        .filter(|&j| line_distance(&bed[j].1, &line.point, &line.direction) <= cfg.grow_threshold)
        .collect();
    if near_line.is_empty() {
        return Vec::new();
    }
    // Spatial index over the on-line points for neighbour expansion.
    let mut index = crate::lidar::VoxelIndex::new(0.5);
    for &j in &near_line {
        index.insert(bed[j].1);
    }
    let mut in_set = vec![false; near_line.len()];
    let mut queue: Vec<usize> = Vec::new();
    for (slot, &j) in near_line.iter().enumerate() {
        let p = bed[j].1;
        if p.x >= 0.0 && p.x <= cfg.seed_ahead {
            in_set[slot] = true;
            queue.push(slot);
        }
    }
    while let Some(slot) = queue.pop() {
        let p = bed[near_line[slot]].1;
        for (_, id) in index.knn(&p, 12, 0.45) {
            let nslot = id as usize;
            if !in_set[nslot] {
                in_set[nslot] = true;
                queue.push(nslot);
            }
        }
    }
    near_line
        .iter()
        .enumerate()
        .filter(|(slot, _)| in_set[*slot])
        .map(|(_, &j)| j)
        .collect()
}

/// RANSAC plane through the union of the two rail point sets, least-squares
/// refit, `n.z > 0`. `None` on degenerate (collinear) input or too few
/// points.
pub fn fit_plane_ransac(left: &[Vec3], right: &[Vec3], cfg: &RailConfig) -> Option<RailPlane> {
    let pts: Vec<Vec3> = left.iter().chain(right.iter()).cloned().collect();
    if pts.len() < cfg.min_plane_points {
        return None;
    }
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed.wrapping_add(17));
    let mut best_count = 0usize;
    let mut best: Option<(Vec3, Vec3)> = None;
    for _ in 0..cfg.ransac_iterations {
        let a = pts[rng.gen_range(0..pts.len())];
        let b = pts[rng.gen_range(0..pts.len())];
        let c = pts[rng.gen_range(0..pts.len())];
        let n = (a - b).cross(&(a - c));
        if n.norm() < 1e-6 {
            continue;
        }
        let n = n.normalize();
        let count = pts
            .iter()
            .filter(|p| (*p - a).dot(&n).abs() <= cfg.plane_inlier_dist)
            .count();
        if count > best_count {
            best_count = count;
            best = Some((a, n));
        }
    }
    let (anchor, n) = best?;
    if best_count < cfg.min_plane_points {
        return None;
    }
    let inliers: Vec<Vec3> = pts
        .iter()
        .filter(|p| (*p - anchor).dot(&n).abs() <= cfg.plane_inlier_dist)
        .cloned()
        .collect();
    // LS refit: smallest covariance eigenvector.
    let nn = inliers.len() as f64;
    let mean = inliers.iter().sum::<Vec3>() / nn;
    let mut cov = Mat3::zeros();
    for p in &inliers {
        let d = p - mean;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigen();
    let mut smallest = 0;
    for i in 1..3 {
        if eig.eigenvalues[i] < eig.eigenvalues[smallest] {
            smallest = i;
        }
    }
    // Degeneracy: collinear points leave two near-zero eigenvalues.
    let mut vals: Vec<f64> = eig.eigenvalues.iter().cloned().collect();
    vals.sort_by(f64::total_cmp);
    if vals[1] < 1e-8 * vals[2].max(1e-12) {
        return None;
    }
    let normal = Vec3::from(eig.eigenvectors.column(smallest).into_owned());
    Some(RailPlane::new(normal, -normal.dot(&mean)))
}

/// Everything the rail pipeline produces for one scan, in the (unleveled)
/// sensor frame.
#[derive(Debug, Clone, Default)]
pub struct RailExtraction {
    pub left: Option<RailLine>,
    pub right: Option<RailLine>,
    /// Refined rail points, original scan indices.
    pub left_indices: Vec<usize>,
    pub right_indices: Vec<usize>,
    pub plane: Option<RailPlane>,
    /// Mean rail direction in the sensor frame (unit), when any line fit.
    pub direction: Option<Vec3>,
}

/// Full per-scan pipeline: bed detection, candidate bands, RANSAC lines,
/// region growing, plane fit. Input points are in the raw sensor frame.
pub fn extract_rails(points: &[Vec3], calib: &Calibration, cfg: &RailConfig) -> RailExtraction {
    let bed = detect_track_bed(points, calib, cfg);
    let (left_cand, right_cand) = find_rail_candidates(&bed, cfg);
    let left_line = fit_rail_line_ransac(&bed, &left_cand, cfg, 1);
    let right_line = fit_rail_line_ransac(&bed, &right_cand, cfg, 2);

    let level = leveling_rotation(calib);
    let unlevel = level.transpose();

    let mut out = RailExtraction::default();
    let mut grown: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, line) in [&left_line, &right_line].iter().enumerate() {
        if let Some(line) = line {
            grown[i] = region_grow_refine(line, &bed, cfg);
        }
    }
    out.left_indices = grown[0].iter().map(|&j| bed[j].0).collect();
    out.right_indices = grown[1].iter().map(|&j| bed[j].0).collect();

    let left_pts: Vec<Vec3> = grown[0].iter().map(|&j| bed[j].1).collect();
    let right_pts: Vec<Vec3> = grown[1].iter().map(|&j| bed[j].1).collect();
    if let Some(plane_level) = fit_plane_ransac(&left_pts, &right_pts, cfg) {
        // Rotate the plane back into the raw sensor frame (rotation only).
        out.plane = Some(RailPlane::new(
            unlevel * plane_level.n,
            plane_level.d,
        ));
    }
    let dir_level = match (&left_line, &right_line) {
        (Some(l), Some(r)) => Some((l.direction + r.direction).normalize()),
        (Some(l), None) => Some(l.direction),
        (None, Some(r)) => Some(r.direction),
        (None, None) => None,
    };
    out.direction = dir_level.map(|d| unlevel * d);
    out.left = left_line;
    out.right = right_line;
    out
}
