//! LiDAR front end: motion compensation, edge/planar feature extraction and
//! scan-to-map geometric residuals.

pub mod index;
pub mod rlpc;

pub use index::VoxelIndex;

use crate::geom::{Pose, Vec3};
use thiserror::Error;

/// One return of a scan, in the sensor frame at its own sample time.
#[derive(Debug, Clone, Copy)]
pub struct ScanPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
    /// Seconds since scan start, in [0, scan_period).
    pub time_offset: f64,
    pub ring: u16,
}

impl ScanPoint {
    pub fn pos(&self) -> Vec3 {
        Vec3::new(self.x, self.y, self.z)
    }

    pub fn with_pos(&self, p: Vec3) -> ScanPoint {
        ScanPoint {
            x: p.x,
            y: p.y,
            z: p.z,
            ..*self
        }
    }

    pub fn range(&self) -> f64 {
        self.pos().norm()
    }
}

#[derive(Debug, Clone, Default)]
pub struct RawScan {
    pub t_start: f64,
    pub scan_period: f64,
    pub points: Vec<ScanPoint>,
}

/// Deskewed edge/planar feature sets of one keyframe, in the scan-start
/// sensor frame.
#[derive(Debug, Clone, Default)]
pub struct FeatureCloud {
    pub t: f64,
    pub edges: Vec<Vec3>,
    pub planars: Vec<Vec3>,
}

/// Extraction bookkeeping; rings too short to window are reported here
/// rather than as errors.
#[derive(Debug, Clone, Default)]
pub struct FeatureCounters {
    pub rings_skipped: usize,
    pub candidates: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrKind {
    Edge,
    Planar,
}

/// Scan feature associated with locally fitted map geometry, all in world.
#[derive(Debug, Clone)]
pub struct Correspondence {
    pub kind: CorrKind,
    /// Query point in the body frame (pre-multiplied by the extrinsic).
    pub point_body: Vec3,
    /// 2 anchors for an edge, 3 (non-collinear) for a planar patch.
    pub anchors: [Vec3; 3],
}

#[derive(Debug, Error)]
pub enum LidarError {
    #[error("degenerate anchors: {0}")]
    DegenerateAnchors(&'static str),
}

#[derive(Debug, Clone)]
pub struct FeatureConfig {
    pub curvature_edge_min: f64,
    pub curvature_planar_max: f64,
    pub sectors: usize,
    pub edges_per_sector: usize,
    pub planars_per_sector: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            curvature_edge_min: 1.0,
            curvature_planar_max: 0.1,
            sectors: 6,
            edges_per_sector: 2,
            planars_per_sector: 4,
        }
    }
}

/// Drop returns closer than `min_range` (short-range returns carry large
/// axial error).
pub fn remove_close_points(scan: &RawScan, min_range: f64) -> RawScan {
    RawScan {
        t_start: scan.t_start,
        scan_period: scan.scan_period,
        points: scan
            .points
            .iter()
            .filter(|p| p.range() >= min_range)
            .cloned()
            .collect(),
    }
}

/// Undo motion distortion: every point is re-expressed in the scan-start
/// sensor frame using the pose interpolated at its time offset (translation
/// lerp, rotation slerp between `pose_start` and `pose_end` one scan period
/// apart).
pub fn deskew(scan: &RawScan, pose_start: &Pose, pose_end: &Pose) -> RawScan {
    let start_inv = pose_start.inverse();
    let points = scan
        .points
        .iter()
        .map(|p| {
            let s = if scan.scan_period > 0.0 {
                (p.time_offset / scan.scan_period).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let pose_t = pose_start.interpolate(pose_end, s);
            let world = pose_t.transform_point(&p.pos());
            p.with_pos(start_inv.transform_point(&world))
        })
        .collect();
    RawScan {
        t_start: scan.t_start,
        scan_period: scan.scan_period,
        points,
    }
}

/// Ring-local curvature: squared norm of the sum of differences to the ten
/// ring neighbours, normalised by the accumulated difference span so flat
/// surfaces score near zero and sharp corners score near one and above.
fn curvature(ring: &[ScanPoint], i: usize) -> f64 {
    let mut sum = Vec3::zeros();
    let mut span = 0.0;
    let pi = ring[i].pos();
    for j in 1..=5 {
        let a = ring[i - j].pos() - pi;
        let b = ring[i + j].pos() - pi;
        sum += a + b;
        span += a.norm() + b.norm();
    }
    if span <= 0.0 {
        return 0.0;
    }
    // Mean-free scale: span/2 plays the role of the straight-line sum norm.
    let scale = span / 2.0;
    (sum.norm() / scale).powi(2)
}

/// LOAM-style feature extraction on a ring-organised scan. Points in each
/// ring must be stored in sweep order. Rings with fewer than 11 points yield
/// nothing (counted, not an error). Selection is deterministic.
pub fn extract_features(
    scan: &RawScan,
    cfg: &FeatureConfig,
) -> (FeatureCloud, FeatureCounters) {
    let mut counters = FeatureCounters::default();
    let mut cloud = FeatureCloud {
        t: scan.t_start,
        ..Default::default()
    };

    let max_ring = scan.points.iter().map(|p| p.ring).max().unwrap_or(0);
    for ring_id in 0..=max_ring {
        let ring: Vec<ScanPoint> = scan
            .points
            .iter()
            .filter(|p| p.ring == ring_id)
            .cloned()
            .collect();
        if ring.len() < 11 {
            if !ring.is_empty() {
                counters.rings_skipped += 1;
            }
            continue;
        }
        let valid = 5..ring.len() - 5;
        let curvs: Vec<(usize, f64)> = valid.clone().map(|i| (i, curvature(&ring, i))).collect();
        counters.candidates += curvs.len();

        let sector_len = curvs.len().div_ceil(cfg.sectors);
        let mut suppressed = vec![false; ring.len()];
        for sector in curvs.chunks(sector_len) {
            // Edges: highest curvature first.
            let mut by_curv: Vec<&(usize, f64)> = sector.iter().collect();
            by_curv.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let mut picked = 0;
            for &&(i, c) in &by_curv {
                if picked >= cfg.edges_per_sector || c < cfg.curvature_edge_min {
                    break;
                }
                if suppressed[i] {
                    continue;
                }
                cloud.edges.push(ring[i].pos());
                picked += 1;
                for k in i.saturating_sub(5)..=(i + 5).min(ring.len() - 1) {
                    suppressed[k] = true;
                }
            }
            // Planars: lowest curvature first.
            by_curv.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            let mut picked = 0;
            for &&(i, c) in &by_curv {
                if picked >= cfg.planars_per_sector || c > cfg.curvature_planar_max {
                    break;
                }
                if suppressed[i] {
                    continue;
                }
                cloud.planars.push(ring[i].pos());
                picked += 1;
                // Light suppression keeps planar picks spread out.
                for k in i.saturating_sub(2)..=(i + 2).min(ring.len() - 1) {
                    suppressed[k] = true;
                }
            }
        }
    }
    (cloud, counters)
}

/// Eq.-style point-to-line distance `|(p-e1) x (p-e2)| / |e1-e2|`.
pub fn point_to_line_distance(p: &Vec3, e1: &Vec3, e2: &Vec3) -> Result<f64, LidarError> {
    let l = e1 - e2;
    if l.norm() < 1e-12 {
        return Err(LidarError::DegenerateAnchors("edge anchors coincide"));
    }
    Ok((p - e1).cross(&(p - e2)).norm() / l.norm())
}

/// Signed point-to-plane distance through three anchor points.
pub fn point_to_plane_distance(
    p: &Vec3,
    r1: &Vec3,
    r2: &Vec3,
    r3: &Vec3,
) -> Result<f64, LidarError> {
    let n = (r1 - r2).cross(&(r1 - r3));
    let nn = n.norm();
    if nn < 1e-12 {
        return Err(LidarError::DegenerateAnchors("plane anchors collinear"));
    }
    Ok((p - r1).dot(&n) / nn)
}

/// Residual and gradient with respect to the world-frame query point for one
/// correspondence.
pub fn correspondence_residual(corr: &Correspondence, p_world: &Vec3) -> (f64, Vec3) {
    match corr.kind {
        CorrKind::Edge => {
            let e1 = corr.anchors[0];
            let e2 = corr.anchors[1];
            let u = (p_world - e1).cross(&(p_world - e2));
            let l = e1 - e2;
            let ln = l.norm();
            let un = u.norm();
            let d = un / ln;
            if un < 1e-12 {
                return (d, Vec3::zeros());
            }
            // d|u|/dp = (l x u) / (|u| |l|)
            (d, l.cross(&u) / (un * ln))
        }
        CorrKind::Planar => {
            let [r1, r2, r3] = corr.anchors;
            let n = (r1 - r2).cross(&(r1 - r3));
            let n_hat = n / n.norm();
            ((p_world - r1).dot(&n_hat), n_hat)
        }
    }
}

#[derive(Debug, Clone)]
pub struct CorrespondenceConfig {
    /// 5-NN search radius; features without neighbours inside it are dropped.
    pub max_search_dist: f64,
    /// Edge acceptance: largest PCA eigenvalue at least this multiple of the
    /// second.
    pub edge_eig_ratio: f64,
    /// Planar acceptance: max point-to-plane spread of the neighbours.
    pub planar_max_spread: f64,
}

impl Default for CorrespondenceConfig {
    fn default() -> Self {
        CorrespondenceConfig {
            max_search_dist: 1.0,
            edge_eig_ratio: 3.0,
            planar_max_spread: 0.05,
        }
    }
}

fn pca3(points: &[Vec3]) -> (Vec3, [f64; 3], [Vec3; 3]) {
    let n = points.len() as f64;
    let mean = points.iter().sum::<Vec3>() / n;
    let mut cov = crate::geom::Mat3::zeros();
    for p in points {
        let d = p - mean;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = cov.symmetric_eigen();
    // Sort descending.
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = [
        eig.eigenvalues[idx[0]],
        eig.eigenvalues[idx[1]],
        eig.eigenvalues[idx[2]],
    ];
    let vecs = [
        Vec3::from(eig.eigenvectors.column(idx[0]).into_owned()),
        Vec3::from(eig.eigenvectors.column(idx[1]).into_owned()),
        Vec3::from(eig.eigenvectors.column(idx[2]).into_owned()),
    ];
    (mean, vals, vecs)
}

/// Associate deskewed features (body frame) with locally fitted lines/planes
/// from the map. `pose_guess` maps body to world.
pub fn find_correspondences(
    features_body: &[(CorrKind, Vec3)],
    edge_map: &VoxelIndex,
    planar_map: &VoxelIndex,
    pose_guess: &Pose,
    cfg: &CorrespondenceConfig,
) -> Vec<Correspondence> {
    let mut out = Vec::new();
    for (kind, pb) in features_body {
        let pw = pose_guess.transform_point(pb);
        let map = match kind {
            CorrKind::Edge => edge_map,
            CorrKind::Planar => planar_map,
        };
        if map.is_empty() {
            continue;
        }
        let nn = map.knn(&pw, 5, cfg.max_search_dist);
        if nn.len() < 5 {
            continue;
        }
        let pts: Vec<Vec3> = nn.iter().map(|&(_, id)| *map.point(id)).collect();
        let (mean, vals, vecs) = pca3(&pts);
        match kind {
            CorrKind::Edge => {
                if vals[0] < cfg.edge_eig_ratio * vals[1].max(1e-12) {
                    continue;
                }
                let dir = vecs[0];
                out.push(Correspondence {
                    kind: CorrKind::Edge,
                    point_body: *pb,
                    anchors: [mean + dir * 0.1, mean - dir * 0.1, Vec3::zeros()],
                });
            }
            CorrKind::Planar => {
                let normal = vecs[2];
                let spread = pts
                    .iter()
                    .map(|p| (p - mean).dot(&normal).abs())
                    .fold(0.0, f64::max);
                if spread > cfg.planar_max_spread {
                    continue;
                }
                // Orthonormal in-plane anchors around the centroid.
                let u = vecs[0];
                let v = vecs[1];
                out.push(Correspondence {
                    kind: CorrKind::Planar,
                    point_body: *pb,
                    anchors: [mean, mean + u * 0.1, mean + v * 0.1],
                });
            }
        }
    }
    out
}
