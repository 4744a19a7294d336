//! Uniform voxel-hash spatial index for nearest-neighbour queries against the
//! accumulated feature map. Queries search the 3x3x3 cell neighbourhood, so
//! results are exact within one cell size of the query point.

use crate::geom::Vec3;
use std::collections::HashMap;

pub struct VoxelIndex {
    cell: f64,
    cells: HashMap<(i32, i32, i32), Vec<u32>>,
    points: Vec<Vec3>,
}

impl VoxelIndex {
    pub fn new(cell: f64) -> Self {
        VoxelIndex {
            cell,
            cells: HashMap::new(),
            points: Vec::new(),
        }
    }

    fn key(&self, p: &Vec3) -> (i32, i32, i32) {
        (
            (p.x / self.cell).floor() as i32,
            (p.y / self.cell).floor() as i32,
            (p.z / self.cell).floor() as i32,
        )
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn insert(&mut self, p: Vec3) {
        let k = self.key(&p);
        let idx = self.points.len() as u32;
        self.points.push(p);
        self.cells.entry(k).or_default().push(idx);
    }

    pub fn point(&self, idx: u32) -> &Vec3 {
        &self.points[idx as usize]
    }

    /// Insert only when the containing cell holds fewer than `cap` points;
    /// bounds map density.
    pub fn insert_capped(&mut self, p: Vec3, cap: usize) -> bool {
        let k = self.key(&p);
        let slot = self.cells.entry(k).or_default();
        if slot.len() >= cap {
            return false;
        }
        let idx = self.points.len() as u32;
        self.points.push(p);
        slot.push(idx);
        true
    }

    /// Up to `k` nearest points within `max_dist`, scanning the 3^3 cell
    /// neighbourhood; deterministic order (distance, insertion index).
    pub fn knn(&self, q: &Vec3, k: usize, max_dist: f64) -> Vec<(f64, u32)> {
        let center = self.key(q);
        let mut cand: Vec<(f64, u32)> = Vec::new();
        let max2 = max_dist * max_dist;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let key = (center.0 + dx, center.1 + dy, center.2 + dz);
                    if let Some(ids) = self.cells.get(&key) {
                        for &id in ids {
                            let d2 = (self.points[id as usize] - q).norm_squared();
                            if d2 <= max2 {
                                cand.push((d2, id));
                            }
                        }
                    }
                }
            }
        }
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        cand.truncate(k);
        for c in &mut cand {
            c.0 = c.0.sqrt();
        }
        cand
    }

    /// Drop all points farther than `radius` from `center` (map pruning).
    pub fn retain_near(&mut self, center: &Vec3, radius: f64) {
        let r2 = radius * radius;
        let old_points = std::mem::take(&mut self.points);
        self.cells.clear();
        for p in old_points {
            if (p - center).norm_squared() <= r2 {
                self.insert(p);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn knn_matches_brute_force() {
        let mut rng = ChaCha12Rng::seed_from_u64(55);
        let mut idx = VoxelIndex::new(0.5);
        let pts: Vec<Vec3> = (0..500)
            .map(|_| {
                Vec3::new(
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                )
            })
            .collect();
        for p in &pts {
            idx.insert(*p);
        }
        for _ in 0..50 {
            let q = Vec3::new(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            );
            let got = idx.knn(&q, 5, 0.45);
            let mut brute: Vec<(f64, usize)> = pts
                .iter()
                .enumerate()
                .map(|(i, p)| ((p - q).norm(), i))
                .filter(|(d, _)| *d <= 0.45)
                .collect();
            brute.sort_by(|a, b| a.0.total_cmp(&b.0));
            brute.truncate(5);
            assert_eq!(got.len(), brute.len());
            for (g, b) in got.iter().zip(brute.iter()) {
                assert!((g.0 - b.0).abs() < 1e-12);
            }
        }
    }
}
