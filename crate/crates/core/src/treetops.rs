//! Tree-top candidates on the canopy height model and the point-cloud
//! priors derived from them.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use log::warn;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::pointcloud::PointCloud;
use crate::raster::{GridGeometry, RasterGrid};
use crate::spatial::SpatialGrid;
use crate::terrain::neighbors8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Apex {
    pub x: f64,
    pub y: f64,
    pub chm_height: f64,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ApexSet {
    pub apexes: Vec<Apex>,
}

impl ApexSet {
    pub fn len(&self) -> usize {
        self.apexes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.apexes.is_empty()
    }

    /// Apex CSV: `x,y,height`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,y,height\n");
        for a in &self.apexes {
            s.push_str(&format!("{},{},{}\n", a.x, a.y, a.chm_height));
        }
        s
    }
}

/// Disjoint seed clusters over point indices, one per (merged) tree top.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSet {
    /// Sorted point indices of each cluster.
    pub clusters: Vec<Vec<usize>>,
    /// Indices into the originating [`ApexSet`] of the apexes merged into each cluster.
    pub source_apex: Vec<Vec<usize>>,
}

impl PriorSet {
    /// Validates disjointness and non-emptiness against a vertex count `n`.
    pub fn new(clusters: Vec<Vec<usize>>, n: usize) -> Result<Self> {
        let mut seen = vec![false; n];
        for (c, members) in clusters.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::invalid(format!("prior cluster {c} is empty")));
            }
            for &i in members {
                if i >= n {
                    return Err(Error::invalid(format!("prior index {i} out of range")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::invalid(format!("prior clusters overlap at vertex {i}")));
                }
            }
        }
        let source_apex = (0..clusters.len()).map(|c| vec![c]).collect();
        let clusters = clusters
            .into_iter()
            .map(|mut m| {
                m.sort_unstable();
                m
            })
            .collect();
        Ok(Self {
            clusters,
            source_apex,
        })
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    /// Per-vertex prior label, `None` for unseeded vertices.
    pub fn vertex_labels(&self, n: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; n];
        for (c, members) in self.clusters.iter().enumerate() {
            for &i in members {
                out[i] = Some(c);
            }
        }
        out
    }
}

/// Moving-window local maxima. A cell is a tree top when it is at least
/// `min_height`, no cell in the `(2r+1)^2` window is higher, at least one is
/// strictly lower, and no equally high cell in the window precedes it in
/// `(row, col)` order.
pub fn local_maxima_mwf(chm: &RasterGrid, window_radius: usize, min_height: f64) -> Result<ApexSet> {
    if window_radius == 0 {
        return Err(Error::invalid("window radius must be >= 1 cell"));
    }
    let (w, h) = (chm.width(), chm.height());
    let r = window_radius as isize;
    let apexes: Vec<Apex> = (0..h)
        .into_par_iter()
        .flat_map_iter(|row| {
            (0..w).filter_map(move |col| {
                let v = chm.get(row, col)?;
                if v < min_height {
                    return None;
                }
                let mut any_lower = false;
                for dr in -r..=r {
                    let rr = row as isize + dr;
                    if rr < 0 || rr >= h as isize {
                        continue;
                    }
                    for dc in -r..=r {
                        let cc = col as isize + dc;
                        if cc < 0 || cc >= w as isize || (dr == 0 && dc == 0) {
                            continue;
                        }
                        let Some(u) = chm.get(rr as usize, cc as usize) else {
                            continue;
                        };
                        if u > v || (u == v && (rr, cc) < (row as isize, col as isize)) {
                            return None;
                        }
                        any_lower |= u < v;
                    }
                }
                if !any_lower {
                    return None;
                }
                let (x, y) = chm.cell_center(row, col);
                Some(Apex {
                    x,
                    y,
                    chm_height: v,
                    row,
                    col,
                })
            })
        })
        .collect();
    Ok(ApexSet { apexes })
}

/// Integer label raster sharing a CHM's geometry; `-1` is unlabelled.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelGrid {
    pub geometry: GridGeometry,
    pub labels: Vec<i32>,
}

impl LabelGrid {
    pub fn get(&self, row: usize, col: usize) -> Option<usize> {
        let l = self.labels[self.geometry.index(row, col)];
        (l >= 0).then_some(l as usize)
    }

    pub fn region_count(&self) -> usize {
        self.labels.iter().map(|&l| l + 1).max().unwrap_or(0).max(0) as usize
    }

    /// Label raster in the ASCII grid format, unlabelled cells as NODATA.
    pub fn to_raster(&self) -> RasterGrid {
        let values = self
            .labels
            .iter()
            .map(|&l| (l >= 0).then_some(l as f64))
            .collect();
        RasterGrid::from_values(self.geometry, values).expect("label raster geometry")
    }
}

#[derive(PartialEq)]
struct FloodItem {
    height: f64,
    seq: u64,
    cell: usize,
}

impl Eq for FloodItem {}

impl Ord for FloodItem {
    fn cmp(&self, other: &Self) -> Ordering {
        // Highest first; equal heights in insertion order.
        self.height
            .total_cmp(&other.height)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for FloodItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Marker-controlled watershed on the inverted CHM. Region `k` grows from
/// marker `k`; cells above `min_height` are claimed in descending height
/// order through 8-connected neighbors. Cells not reachable from a marker
/// through such cells stay unlabelled.
pub fn watershed_markers(chm: &RasterGrid, markers: &ApexSet, min_height: f64) -> Result<LabelGrid> {
    if markers.is_empty() {
        return Err(Error::invalid("watershed needs at least one marker"));
    }
    let geom = chm.geometry();
    let (w, h) = (geom.width, geom.height);
    let mut labels = vec![-1i32; geom.len()];
    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;
    for (k, m) in markers.apexes.iter().enumerate() {
        if m.row >= h || m.col >= w {
            return Err(Error::invalid(format!("marker {k} lies outside the CHM")));
        }
        let v = chm.get(m.row, m.col).unwrap_or(0.0);
        if v <= 0.0 {
            return Err(Error::ZeroHeightMarker {
                row: m.row,
                col: m.col,
            });
        }
        let cell = geom.index(m.row, m.col);
        if labels[cell] >= 0 {
            return Err(Error::invalid(format!("two markers share cell ({}, {})", m.row, m.col)));
        }
        labels[cell] = k as i32;
        heap.push(FloodItem { height: v, seq, cell });
        seq += 1;
    }
    while let Some(FloodItem { cell, .. }) = heap.pop() {
        let (r, c) = (cell / w, cell % w);
        let label = labels[cell];
        for (nr, nc) in neighbors8(r, c, h, w) {
            let ncell = geom.index(nr, nc);
            if labels[ncell] >= 0 {
                continue;
            }
            let Some(v) = chm.get(nr, nc) else { continue };
            if v > min_height {
                labels[ncell] = label;
                heap.push(FloodItem { height: v, seq, cell: ncell });
                seq += 1;
            }
        }
    }
    Ok(LabelGrid {
        geometry: geom,
        labels,
    })
}

/// Seeds one prior cluster per apex from all points within horizontal
/// distance `radius` (closed disc). Seed sets sharing a point are merged;
/// apexes with no nearby points are dropped.
pub fn build_priors(cloud: &PointCloud, apexes: &ApexSet, radius: f64) -> Result<PriorSet> {
    if apexes.is_empty() {
        return Err(Error::NoPriors);
    }
    if !(radius > 0.0) {
        return Err(Error::invalid("prior radius must be > 0"));
    }
    let index = SpatialGrid::new(cloud.points(), radius, true);
    let seeds: Vec<Vec<usize>> = apexes
        .apexes
        .iter()
        .map(|a| {
            let mut out = Vec::new();
            index.within([a.x, a.y, 0.0], radius, &mut out);
            out
        })
        .collect();

    // Union apexes that share a point.
    let mut parent: Vec<usize> = (0..seeds.len()).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    let mut owner = vec![usize::MAX; cloud.len()];
    for (a, pts) in seeds.iter().enumerate() {
        for &i in pts {
            if owner[i] == usize::MAX {
                owner[i] = a;
            } else {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, owner[i]));
                if ra != rb {
                    parent[ra.max(rb)] = ra.min(rb);
                }
            }
        }
    }

    let mut clusters: Vec<Vec<usize>> = Vec::new();
    let mut sources: Vec<Vec<usize>> = Vec::new();
    let mut slot = vec![usize::MAX; seeds.len()];
    for a in 0..seeds.len() {
        if seeds[a].is_empty() {
            warn!(
                "tree top at ({:.2}, {:.2}) has no points within {radius} m; dropped",
                apexes.apexes[a].x, apexes.apexes[a].y
            );
            continue;
        }
        let root = find(&mut parent, a);
        if slot[root] == usize::MAX {
            slot[root] = clusters.len();
            clusters.push(Vec::new());
            sources.push(Vec::new());
        }
        clusters[slot[root]].extend_from_slice(&seeds[a]);
        sources[slot[root]].push(a);
    }
    if clusters.is_empty() {
        return Err(Error::NoPriors);
    }
    for c in &mut clusters {
        c.sort_unstable();
        c.dedup();
    }
    Ok(PriorSet {
        clusters,
        source_apex: sources,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(w: usize, h: usize, f: impl Fn(usize, usize) -> f64) -> RasterGrid {
        let geom = GridGeometry::new((0.0, 0.0), 0.5, w, h).unwrap();
        let vals = (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).map(|(r, c)| Some(f(r, c))).collect();
        RasterGrid::from_values(geom, vals).unwrap()
    }

    fn cone(r0: f64, c0: f64, height: f64, radius_cells: f64) -> impl Fn(usize, usize) -> f64 {
        move |r, c| {
            let d = ((r as f64 - r0).powi(2) + (c as f64 - c0).powi(2)).sqrt();
            (height * (1.0 - d / radius_cells)).max(0.0)
        }
    }

    #[test]
    fn single_cone_has_one_apex() {
        let chm = grid(21, 21, cone(10.0, 10.0, 10.0, 8.0));
        let set = local_maxima_mwf(&chm, 2, 2.0).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!((set.apexes[0].row, set.apexes[0].col), (10, 10));
        assert_eq!(set.apexes[0].chm_height, 10.0);
    }

    #[test]
    fn two_cones_two_apexes() {
        // 10 m apart at 0.5 m cells.
        let a = cone(15.0, 10.0, 12.0, 10.0);
        let b = cone(15.0, 30.0, 9.0, 10.0);
        let chm = grid(41, 31, |r, c| a(r, c).max(b(r, c)));
        let set = local_maxima_mwf(&chm, 3, 2.0).unwrap();
        let cells: Vec<_> = set.apexes.iter().map(|a| (a.row, a.col)).collect();
        assert_eq!(cells, vec![(15, 10), (15, 30)]);
    }

    #[test]
    fn flat_grid_has_no_apex() {
        let chm = grid(10, 10, |_, _| 5.0);
        assert!(local_maxima_mwf(&chm, 1, 2.0).unwrap().is_empty());
    }

    #[test]
    fn plateau_tie_keeps_first_cell() {
        let chm = grid(7, 7, |r, c| if r == 3 && (c == 3 || c == 4) { 8.0 } else { 1.0 });
        let set = local_maxima_mwf(&chm, 1, 2.0).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!((set.apexes[0].row, set.apexes[0].col), (3, 3));
    }

    #[test]
    fn zero_window_rejected() {
        assert!(local_maxima_mwf(&grid(3, 3, |_, _| 1.0), 0, 0.0).is_err());
    }

    #[test]
    fn one_marker_floods_connected_canopy() {
        let chm = grid(21, 21, cone(10.0, 10.0, 10.0, 8.0));
        let markers = local_maxima_mwf(&chm, 2, 2.0).unwrap();
        let labels = watershed_markers(&chm, &markers, 0.0).unwrap();
        for r in 0..21 {
            for c in 0..21 {
                let v = chm.get(r, c).unwrap();
                assert_eq!(labels.get(r, c).is_some(), v > 0.0, "{r},{c}");
            }
        }
    }

    #[test]
    fn marker_on_bare_ground_is_error() {
        let chm = grid(5, 5, |_, _| 0.0);
        let markers = ApexSet {
            apexes: vec![Apex { x: 0.25, y: 0.25, chm_height: 0.0, row: 0, col: 0 }],
        };
        assert!(matches!(
            watershed_markers(&chm, &markers, 0.0),
            Err(Error::ZeroHeightMarker { row: 0, col: 0 })
        ));
    }

    /// Follow the steepest ascent from every cell to a peak.
    fn ascent_labels(chm: &RasterGrid, markers: &ApexSet) -> Vec<Option<usize>> {
        let (w, h) = (chm.width(), chm.height());
        let mut out = vec![None; w * h];
        for r0 in 0..h {
            for c0 in 0..w {
                if chm.get(r0, c0).unwrap() <= 0.0 {
                    continue;
                }
                let (mut r, mut c) = (r0, c0);
                loop {
                    let here = chm.get(r, c).unwrap();
                    let best = neighbors8(r, c, h, w)
                        .map(|(nr, nc)| (chm.get(nr, nc).unwrap(), nr, nc))
                        .filter(|&(v, _, _)| v > here)
                        .max_by(|a, b| a.0.total_cmp(&b.0));
                    match best {
                        Some((_, nr, nc)) => (r, c) = (nr, nc),
                        None => break,
                    }
                }
                out[r0 * w + c0] = markers.apexes.iter().position(|m| (m.row, m.col) == (r, c));
            }
        }
        out
    }

    #[test]
    fn two_cone_boundary_follows_saddle() {
        let a = cone(18.0, 12.0, 12.0, 14.0);
        let b = cone(20.0, 27.0, 10.0, 12.0);
        let chm = grid(40, 40, |r, c| a(r, c).max(b(r, c)));
        let markers = local_maxima_mwf(&chm, 3, 2.0).unwrap();
        assert_eq!(markers.len(), 2);
        let ws = watershed_markers(&chm, &markers, 0.0).unwrap();
        let oracle = ascent_labels(&chm, &markers);
        let (w, h) = (40, 40);
        let mut compared = 0;
        for r in 0..h {
            for c in 0..w {
                let Some(want) = oracle[r * w + c] else { continue };
                // Skip cells next to an oracle boundary, where both answers are defensible.
                let interior = neighbors8(r, c, h, w).all(|(nr, nc)| oracle[nr * w + nc].is_none_or(|o| o == want));
                if interior {
                    assert_eq!(ws.get(r, c), Some(want), "cell {r},{c}");
                    compared += 1;
                }
            }
        }
        assert!(compared > 500);
    }

    #[test]
    fn priors_use_closed_disc() {
        let pts = vec![
            [0.0, 0.0, 10.0],
            [0.7, 0.0, 9.0],
            [0.0, 0.71, 9.0],
            [0.3, 0.3, 9.5],
            [-0.5, 0.2, 9.7],
            [0.1, -0.2, 9.8],
        ];
        let cloud = PointCloud::new(pts).unwrap();
        let apexes = ApexSet {
            apexes: vec![Apex { x: 0.0, y: 0.0, chm_height: 10.0, row: 0, col: 0 }],
        };
        let p = build_priors(&cloud, &apexes, 0.7).unwrap();
        assert_eq!(p.clusters, vec![vec![0, 1, 3, 4, 5]]);
    }

    #[test]
    fn overlapping_seeds_merge() {
        let pts: Vec<[f64; 3]> = (0..20).map(|i| [i as f64 / 10.0, 0.0, 5.0]).collect();
        let cloud = PointCloud::new(pts).unwrap();
        let apex = |x: f64| Apex { x, y: 0.0, chm_height: 5.0, row: 0, col: 0 };
        let apexes = ApexSet { apexes: vec![apex(0.2), apex(0.7), apex(50.0)] };
        let p = build_priors(&cloud, &apexes, 0.7).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p.source_apex, vec![vec![0, 1]]);
        assert_eq!(p.clusters[0], (0..15).collect::<Vec<_>>());
    }

    #[test]
    fn no_usable_priors() {
        let cloud = PointCloud::new(vec![[0.0, 0.0, 1.0]]).unwrap();
        let apexes = ApexSet {
            apexes: vec![Apex { x: 9.0, y: 9.0, chm_height: 5.0, row: 0, col: 0 }],
        };
        assert!(matches!(build_priors(&cloud, &apexes, 0.7), Err(Error::NoPriors)));
        assert!(matches!(build_priors(&cloud, &ApexSet::default(), 0.7), Err(Error::NoPriors)));
    }
}
