//! Sparse d-neighborhood affinity graphs over LiDAR points.
//!
//! Edge weights are the product of Gaussian kernels on horizontal distance,
//! vertical distance and (when both endpoints have them) feature distance:
//!
//! `w_ij = exp(-|xy_i - xy_j|^2 / sxy^2) * exp(-(z_i - z_j)^2 / sz^2) * exp(-|f_i - f_j|^2 / sf^2)`
//!
//! and exist only for pairs within 3D distance `d`.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::pointcloud::PointCloud;
use crate::spatial::SpatialGrid;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphParams {
    /// Neighborhood radius, meters.
    pub d: f64,
    pub sigma_xy: f64,
    pub sigma_z: f64,
    /// Feature bandwidth; required when the cloud carries features.
    pub sigma_fts: Option<f64>,
}

impl Default for GraphParams {
    fn default() -> Self {
        Self {
            d: 1.0,
            sigma_xy: 1.0,
            sigma_z: 3.0,
            sigma_fts: None,
        }
    }
}

impl GraphParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.d > 0.0 && self.d.is_finite()) {
            return Err(Error::Config(format!("graph radius d must be > 0, got {}", self.d)));
        }
        let sigmas = [Some(self.sigma_xy), Some(self.sigma_z), self.sigma_fts];
        if sigmas.iter().flatten().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Config("graph bandwidths must be > 0".into()));
        }
        Ok(())
    }
}

/// Symmetric nonnegative sparse weight matrix in CSR form, no self-edges.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseAffinity {
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    weights: Vec<f64>,
    degrees: Vec<f64>,
}

impl SparseAffinity {
    /// Builds a graph from undirected weighted edges. Duplicate pairs are
    /// summed; self-edges and non-positive weights are rejected.
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut rows: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];
        for &(i, j, w) in edges {
            if i >= n || j >= n {
                return Err(Error::invalid(format!("edge ({i}, {j}) out of range for {n} vertices")));
            }
            if i == j {
                return Err(Error::invalid(format!("self-edge at {i}")));
            }
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::invalid(format!("edge ({i}, {j}) weight {w} is not positive")));
            }
            rows[i].push((j as u32, w));
            rows[j].push((i as u32, w));
        }
        for row in &mut rows {
            row.sort_by_key(|e| e.0);
            row.dedup_by(|b, a| {
                if a.0 == b.0 {
                    a.1 += b.1;
                    true
                } else {
                    false
                }
            });
        }
        Ok(Self::from_rows(rows))
    }

    /// Rows must be sorted by column and already symmetric.
    fn from_rows(rows: Vec<Vec<(u32, f64)>>) -> Self {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        row_ptr.push(0);
        let nnz: usize = rows.iter().map(Vec::len).sum();
        let mut cols = Vec::with_capacity(nnz);
        let mut weights = Vec::with_capacity(nnz);
        let mut degrees = Vec::with_capacity(rows.len());
        for row in rows {
            let mut d = 0.0;
            for (j, w) in row {
                cols.push(j);
                weights.push(w);
                d += w;
            }
            degrees.push(d);
            row_ptr.push(cols.len());
        }
        Self {
            row_ptr,
            cols,
            weights,
            degrees,
        }
    }

    pub fn n(&self) -> usize {
        self.degrees.len()
    }

    /// Number of undirected edges.
    pub fn edge_count(&self) -> usize {
        self.cols.len() / 2
    }

    pub fn degrees(&self) -> &[f64] {
        &self.degrees
    }

    pub fn degree(&self, i: usize) -> f64 {
        self.degrees[i]
    }

    /// Neighbors of `i` with weights, ascending by neighbor index.
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[span.clone()]
            .iter()
            .zip(&self.weights[span])
            .map(|(&j, &w)| (j as usize, w))
    }

    pub fn weight(&self, i: usize, j: usize) -> Option<f64> {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        let cols = &self.cols[span.clone()];
        cols.binary_search(&(j as u32))
            .ok()
            .map(|k| self.weights[span.start + k])
    }

    /// Undirected edges `(i, j, w)` with `i < j`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n()).flat_map(move |i| {
            self.neighbors(i)
                .filter(move |&(j, _)| j > i)
                .map(move |(j, w)| (i, j, w))
        })
    }

    pub fn isolated_vertices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.row_ptr[i] == self.row_ptr[i + 1]).collect()
    }

    pub fn max_row_len(&self) -> usize {
        (0..self.n())
            .map(|i| self.row_ptr[i + 1] - self.row_ptr[i])
            .max()
            .unwrap_or(0)
    }

    /// Copy with every weight multiplied by `c > 0`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut g = self.clone();
        g.weights.iter_mut().for_each(|w| *w *= c);
        g.degrees.iter_mut().for_each(|d| *d *= c);
        g
    }

    /// Connected components as sorted vertex lists, ordered by smallest vertex.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let n = self.n();
        let mut comp = vec![usize::MAX; n];
        let mut out = Vec::new();
        let mut stack = Vec::new();
        for s in 0..n {
            if comp[s] != usize::MAX {
                continue;
            }
            let id = out.len();
            let mut members = vec![s];
            comp[s] = id;
            stack.push(s);
            while let Some(i) = stack.pop() {
                for (j, _) in self.neighbors(i) {
                    if comp[j] == usize::MAX {
                        comp[j] = id;
                        members.push(j);
                        stack.push(j);
                    }
                }
            }
            members.sort_unstable();
            out.push(members);
        }
        out
    }

    /// Edge list CSV `i,j,w` (each undirected edge once).
    pub fn to_edge_csv(&self) -> String {
        let mut s = String::from("i,j,w\n");
        for (i, j, w) in self.edges() {
            let _ = writeln!(s, "{i},{j},{w}");
        }
        s
    }

    /// `y = x + D^{-1/2} W D^{-1/2} x`, given `inv_sqrt_deg[i] = d_i^{-1/2}`.
    pub(crate) fn shifted_normalized_apply(&self, inv_sqrt_deg: &[f64], x: &[f64], y: &mut [f64]) {
        y.par_iter_mut().enumerate().with_min_len(1024).for_each(|(i, yi)| {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let j = self.cols[k] as usize;
                acc += self.weights[k] * inv_sqrt_deg[j] * x[j];
            }
            *yi = x[i] + inv_sqrt_deg[i] * acc;
        });
    }
}

/// Induced subgraph with its vertices renumbered `0..indices.len()` in the
/// given order; `mapping[k]` is the original index of new vertex `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Subgraph {
    pub graph: SparseAffinity,
    pub mapping: Vec<usize>,
}

pub fn subgraph(g: &SparseAffinity, indices: &[usize]) -> Result<Subgraph> {
    let n = g.n();
    let mut local = vec![u32::MAX; n];
    for (k, &i) in indices.iter().enumerate() {
        if i >= n {
            return Err(Error::invalid(format!("subgraph index {i} out of range for {n} vertices")));
        }
        if local[i] != u32::MAX {
            return Err(Error::invalid(format!("subgraph index {i} repeated")));
        }
        local[i] = k as u32;
    }
    let rows = indices
        .iter()
        .map(|&i| {
            let mut row: Vec<(u32, f64)> = g
                .neighbors(i)
                .filter_map(|(j, w)| (local[j] != u32::MAX).then_some((local[j], w)))
                .collect();
            row.sort_by_key(|e| e.0);
            row
        })
        .collect();
    Ok(Subgraph {
        graph: SparseAffinity::from_rows(rows),
        mapping: indices.to_vec(),
    })
}

/// Gaussian affinity between two points (distance cutoff is the caller's job).
#[inline]
fn pair_weight(cloud: &PointCloud, params: &GraphParams, i: usize, j: usize) -> f64 {
    let (a, b) = (cloud.point(i), cloud.point(j));
    let dxy2 = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
    let dz2 = (a[2] - b[2]).powi(2);
    let mut e = dxy2 / (params.sigma_xy * params.sigma_xy) + dz2 / (params.sigma_z * params.sigma_z);
    if let (Some(fa), Some(fb), Some(s)) = (cloud.feature(i), cloud.feature(j), params.sigma_fts) {
        let df2: f64 = fa.iter().zip(fb).map(|(u, v)| (u - v) * (u - v)).sum();
        e += df2 / (s * s);
    }
    (-e).exp()
}

/// Builds the d-neighborhood affinity graph. Pairs whose weight underflows
/// to zero get no edge.
pub fn build_graph(cloud: &PointCloud, params: &GraphParams) -> Result<SparseAffinity> {
    params.validate()?;
    if cloud.is_empty() {
        return Err(Error::NoPoints);
    }
    if cloud.has_any_features() && params.sigma_fts.is_none() {
        return Err(Error::Config("sigma_fts is required when points carry features".into()));
    }
    let index = SpatialGrid::new(cloud.points(), params.d, false);
    let rows: Vec<Vec<(u32, f64)>> = (0..cloud.len())
        .into_par_iter()
        .with_min_len(256)
        .map_init(Vec::new, |buf, i| {
            buf.clear();
            index.within(cloud.point(i), params.d, buf);
            buf.iter()
                .filter(|&&j| j != i)
                .filter_map(|&j| {
                    // Same arithmetic in both directions, so w_ij == w_ji bitwise.
                    let w = pair_weight(cloud, params, i, j);
                    (w > 0.0).then_some((j as u32, w))
                })
                .collect()
        })
        .collect();
    Ok(SparseAffinity::from_rows(rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(d: f64, sxy: f64) -> GraphParams {
        GraphParams { d, sigma_xy: sxy, sigma_z: 2.0, sigma_fts: None }
    }

    #[test]
    fn coincident_points_weight_one() {
        let c = PointCloud::new(vec![[1.0, 1.0, 1.0], [1.0, 1.0, 1.0]]).unwrap();
        let g = build_graph(&c, &params(1.0, 1.0)).unwrap();
        assert_eq!(g.weight(0, 1), Some(1.0));
        assert_eq!(g.degrees(), &[1.0, 1.0]);
    }

    #[test]
    fn far_pair_has_no_edge() {
        let c = PointCloud::new(vec![[0.0, 0.0, 0.0], [0.8, 0.0, 0.61]]).unwrap();
        let g = build_graph(&c, &params(1.0, 1.0)).unwrap();
        assert_eq!(g.edge_count(), 0);
        assert_eq!(g.isolated_vertices(), vec![0, 1]);
    }

    #[test]
    fn weight_grows_with_sigma_xy() {
        let c = PointCloud::new(vec![[0.0, 0.0, 0.0], [0.4, 0.3, 0.2]]).unwrap();
        let mut last = 0.0;
        for s in [0.25, 0.5, 1.0, 2.0, 4.0] {
            let w = build_graph(&c, &params(1.0, s)).unwrap().weight(0, 1).unwrap();
            assert!(w > last, "sigma {s}: {w} <= {last}");
            assert!(w <= 1.0);
            last = w;
        }
    }

    #[test]
    fn missing_feature_factor_is_neutral() {
        let pts = vec![[0.0, 0.0, 0.0], [0.3, 0.0, 0.1], [0.0, 0.3, 0.2]];
        let fused = PointCloud::with_features(pts.clone(), 1, vec![Some(vec![0.0]), None, Some(vec![0.5])]).unwrap();
        let plain = PointCloud::new(pts).unwrap();
        let p = GraphParams { sigma_fts: Some(0.5), ..params(1.0, 1.0) };
        let gf = build_graph(&fused, &p).unwrap();
        let gp = build_graph(&plain, &p).unwrap();
        assert_eq!(gf.weight(0, 1), gp.weight(0, 1));
        assert_eq!(gf.weight(1, 2), gp.weight(1, 2));
        let expected = gp.weight(0, 2).unwrap() * (-1.0f64).exp();
        assert!((gf.weight(0, 2).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn features_require_sigma() {
        let c = PointCloud::with_features(vec![[0.0; 3]], 1, vec![Some(vec![1.0])]).unwrap();
        assert!(build_graph(&c, &params(1.0, 1.0)).is_err());
    }

    #[test]
    fn invalid_params_rejected() {
        let c = PointCloud::new(vec![[0.0; 3]]).unwrap();
        assert!(build_graph(&c, &params(0.0, 1.0)).is_err());
        assert!(build_graph(&c, &params(1.0, -1.0)).is_err());
    }

    fn random_graph(n: usize, p: f64, seed: u64) -> SparseAffinity {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if rng.random_bool(p) {
                    edges.push((i, j, rng.random_range(0.01..1.0)));
                }
            }
        }
        SparseAffinity::from_edges(n, &edges).unwrap()
    }

    #[test]
    fn subgraph_preserves_weights() {
        let g = random_graph(50, 0.2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let idx: Vec<usize> = (0..50).filter(|_| rng.random_bool(0.5)).collect();
        let sub = subgraph(&g, &idx).unwrap();
        for (a, b, w) in sub.graph.edges() {
            assert_eq!(g.weight(sub.mapping[a], sub.mapping[b]), Some(w));
        }
        for (a, &ia) in idx.iter().enumerate() {
            for (b, &ib) in idx.iter().enumerate() {
                assert_eq!(sub.graph.weight(a, b), g.weight(ia, ib));
            }
            let deg: f64 = idx.iter().filter_map(|&j| g.weight(ia, j)).sum();
            assert!((sub.graph.degree(a) - deg).abs() < 1e-12);
        }
    }

    #[test]
    fn subgraph_full_and_singleton() {
        let g = random_graph(20, 0.3, 1);
        let all: Vec<usize> = (0..20).collect();
        assert_eq!(subgraph(&g, &all).unwrap().graph, g);
        let one = subgraph(&g, &[7]).unwrap();
        assert_eq!((one.graph.n(), one.graph.edge_count()), (1, 0));
        assert!(subgraph(&g, &[20]).is_err());
    }

    #[test]
    fn components_are_found() {
        let g = SparseAffinity::from_edges(6, &[(0, 1, 1.0), (1, 2, 1.0), (4, 5, 0.5)]).unwrap();
        assert_eq!(g.components(), vec![vec![0, 1, 2], vec![3], vec![4, 5]]);
    }
}
