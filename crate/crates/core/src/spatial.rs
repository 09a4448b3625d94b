//! Uniform-grid spatial index for fixed-radius neighbor queries.
//!
//! Points are bucketed by cell and stored in one index array sorted by cell
//! key, so construction is a sort (O(n log n)) and a radius query touches
//! only the cells overlapping the query ball.

use std::collections::HashMap;

type Key = (i64, i64, i64);

#[derive(Debug, Clone)]
pub struct SpatialGrid {
    cell: f64,
    planar: bool,
    points: Vec<[f64; 3]>,
    order: Vec<u32>,
    buckets: HashMap<Key, (u32, u32)>,
    key_min: Key,
    key_max: Key,
}

impl SpatialGrid {
    /// `planar` ignores z: cells are columns and distances are horizontal.
    pub fn new(points: &[[f64; 3]], cell: f64, planar: bool) -> Self {
        assert!(cell > 0.0 && cell.is_finite(), "grid cell must be positive");
        let key_of = |p: &[f64; 3]| -> Key {
            (
                (p[0] / cell).floor() as i64,
                (p[1] / cell).floor() as i64,
                if planar { 0 } else { (p[2] / cell).floor() as i64 },
            )
        };
        let keys: Vec<Key> = points.iter().map(key_of).collect();
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        order.sort_by_key(|&i| (keys[i as usize], i));

        let mut buckets = HashMap::new();
        let mut key_min = (i64::MAX, i64::MAX, i64::MAX);
        let mut key_max = (i64::MIN, i64::MIN, i64::MIN);
        let mut start = 0usize;
        while start < order.len() {
            let k = keys[order[start] as usize];
            let mut end = start + 1;
            while end < order.len() && keys[order[end] as usize] == k {
                end += 1;
            }
            buckets.insert(k, (start as u32, end as u32));
            key_min = (key_min.0.min(k.0), key_min.1.min(k.1), key_min.2.min(k.2));
            key_max = (key_max.0.max(k.0), key_max.1.max(k.1), key_max.2.max(k.2));
            start = end;
        }
        Self {
            cell,
            planar,
            points: points.to_vec(),
            order,
            buckets,
            key_min,
            key_max,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    #[inline]
    fn dist2(&self, a: &[f64; 3], b: &[f64; 3]) -> f64 {
        let dx = a[0] - b[0];
        let dy = a[1] - b[1];
        if self.planar {
            dx * dx + dy * dy
        } else {
            let dz = a[2] - b[2];
            dx * dx + dy * dy + dz * dz
        }
    }

    /// Appends to `out` the indices of all points within distance `radius`
    /// (closed ball) of `q`, in ascending index order.
    pub fn within(&self, q: [f64; 3], radius: f64, out: &mut Vec<usize>) {
        let start = out.len();
        let r2 = radius * radius;
        let lo = |v: f64| ((v - radius) / self.cell).floor() as i64;
        let hi = |v: f64| ((v + radius) / self.cell).floor() as i64;
        let (z0, z1) = if self.planar { (0, 0) } else { (lo(q[2]), hi(q[2])) };
        for ix in lo(q[0]).max(self.key_min.0)..=hi(q[0]).min(self.key_max.0) {
            for iy in lo(q[1]).max(self.key_min.1)..=hi(q[1]).min(self.key_max.1) {
                for iz in z0.max(self.key_min.2)..=z1.min(self.key_max.2) {
                    if let Some(&(s, e)) = self.buckets.get(&(ix, iy, iz)) {
                        for &i in &self.order[s as usize..e as usize] {
                            if self.dist2(&q, &self.points[i as usize]) <= r2 {
                                out.push(i as usize);
                            }
                        }
                    }
                }
            }
        }
        out[start..].sort_unstable();
    }

    /// Nearest indexed point to `q` and its distance; ties go to the lower index.
    pub fn nearest(&self, q: [f64; 3]) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let qk = (
            (q[0] / self.cell).floor() as i64,
            (q[1] / self.cell).floor() as i64,
            if self.planar { 0 } else { (q[2] / self.cell).floor() as i64 },
        );
        let span = [
            (self.key_max.0 - self.key_min.0).max((qk.0 - self.key_min.0).abs()).max((qk.0 - self.key_max.0).abs()),
            (self.key_max.1 - self.key_min.1).max((qk.1 - self.key_min.1).abs()).max((qk.1 - self.key_max.1).abs()),
            (self.key_max.2 - self.key_min.2).max((qk.2 - self.key_min.2).abs()).max((qk.2 - self.key_max.2).abs()),
        ];
        let max_ring = span.iter().copied().max().unwrap_or(0);
        let mut best: Option<(usize, f64)> = None;
        for ring in 0..=max_ring {
            // Every point in ring `ring` is at least (ring - 1) * cell away.
            if let Some((_, d2)) = best {
                let bound = (ring - 1).max(0) as f64 * self.cell;
                if bound * bound > d2 {
                    break;
                }
            }
            let zr = if self.planar { 0 } else { ring };
            for ix in qk.0 - ring..=qk.0 + ring {
                for iy in qk.1 - ring..=qk.1 + ring {
                    for iz in qk.2 - zr..=qk.2 + zr {
                        let on_shell = (ix - qk.0).abs() == ring
                            || (iy - qk.1).abs() == ring
                            || (iz - qk.2).abs() == ring;
                        if !on_shell {
                            continue;
                        }
                        if let Some(&(s, e)) = self.buckets.get(&(ix, iy, iz)) {
                            for &i in &self.order[s as usize..e as usize] {
                                let d2 = self.dist2(&q, &self.points[i as usize]);
                                let better = match best {
                                    None => true,
                                    Some((bi, bd)) => d2 < bd || (d2 == bd && (i as usize) < bi),
                                };
                                if better {
                                    best = Some((i as usize, d2));
                                }
                            }
                        }
                    }
                }
            }
        }
        best.map(|(i, d2)| (i, d2.sqrt()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, seed: u64) -> Vec<[f64; 3]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(0.0..3.0)])
            .collect()
    }

    #[test]
    fn radius_query_matches_brute_force() {
        let pts = cloud(500, 1);
        for planar in [false, true] {
            let grid = SpatialGrid::new(&pts, 0.7, planar);
            for (qi, q) in pts.iter().enumerate().step_by(17) {
                for r in [0.3, 0.7, 1.9] {
                    let mut got = Vec::new();
                    grid.within(*q, r, &mut got);
                    let want: Vec<usize> = (0..pts.len())
                        .filter(|&j| grid.dist2(q, &pts[j]) <= r * r)
                        .collect();
                    assert_eq!(got, want, "query {qi} r {r} planar {planar}");
                }
            }
        }
    }

    #[test]
    fn nearest_matches_brute_force() {
        let pts = cloud(300, 2);
        let grid = SpatialGrid::new(&pts, 0.5, false);
        for q in cloud(50, 3).into_iter().chain([[40.0, -30.0, 2.0]]) {
            let (i, d) = grid.nearest(q).unwrap();
            let best = (0..pts.len())
                .map(|j| grid.dist2(&q, &pts[j]))
                .fold(f64::INFINITY, f64::min);
            assert!((d * d - best).abs() < 1e-12, "{i}");
        }
    }
}
