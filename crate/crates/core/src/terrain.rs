//! Ground/object separation and terrain rasters (DTM, CHM).
//!
//! Ground filtering is a progressive morphological filter: a minimum-z
//! surface is opened with square windows that double in size, and a point
//! is an object return as soon as it rises above an opened surface by more
//! than the elevation threshold for that window.

use std::collections::VecDeque;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::pointcloud::{ClassLabel, PointCloud};
use crate::raster::{GridGeometry, RasterGrid};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TerrainParams {
    /// Grid resolution of the minimum surface and the DTM/CHM, meters.
    pub cell_size: f64,
    /// Largest opening window, meters.
    pub max_window: f64,
    /// Added to the elevation threshold at each window doubling, meters.
    pub slope_tolerance: f64,
    /// Height above the opened surface that marks an object return, meters.
    pub elevation_threshold: f64,
}

impl Default for TerrainParams {
    fn default() -> Self {
        Self {
            cell_size: 0.5,
            max_window: 10.0,
            slope_tolerance: 0.3,
            elevation_threshold: 0.5,
        }
    }
}

impl TerrainParams {
    pub fn validate(&self) -> Result<()> {
        let all_positive = [
            self.cell_size,
            self.max_window,
            self.slope_tolerance,
            self.elevation_threshold,
        ]
        .iter()
        .all(|v| v.is_finite() && *v > 0.0);
        if !all_positive {
            return Err(Error::Config("terrain parameters must be positive".into()));
        }
        if self.max_window < self.cell_size {
            return Err(Error::Config("terrain.max_window must be >= terrain.cell_size".into()));
        }
        Ok(())
    }
}

fn cloud_geometry(cloud: &PointCloud, cell_size: f64) -> Result<GridGeometry> {
    let (lo, hi) = cloud.bounds();
    GridGeometry::covering((lo[0], lo[1]), (hi[0], hi[1]), cell_size)
}

/// Per-cell minimum of `z` over the given points; cells without points are NODATA.
fn min_surface(cloud: &PointCloud, idx: &[usize], geom: GridGeometry) -> RasterGrid {
    let mut grid = RasterGrid::nodata(geom);
    for &i in idx {
        let [x, y, z] = cloud.point(i);
        if let Some((r, c)) = geom.cell_of(x, y) {
            match grid.get(r, c) {
                Some(v) if v <= z => {}
                _ => grid.set(r, c, Some(z)),
            }
        }
    }
    grid
}

/// Fills NODATA cells with the value of the nearest filled cell, where
/// "nearest" is breadth-first distance over 8-connected cells; ties go to
/// whichever filled cell is reached first in row-major seeding order.
pub fn fill_nearest(grid: &mut RasterGrid) -> Result<()> {
    let (w, h) = (grid.width(), grid.height());
    let mut queue = VecDeque::new();
    for r in 0..h {
        for c in 0..w {
            if !grid.is_nodata(r, c) {
                queue.push_back((r, c));
            }
        }
    }
    if queue.is_empty() {
        return Err(Error::invalid("cannot fill a raster with no data"));
    }
    while let Some((r, c)) = queue.pop_front() {
        let v = grid.get(r, c);
        for (nr, nc) in neighbors8(r, c, h, w) {
            if grid.is_nodata(nr, nc) {
                grid.set(nr, nc, v);
                queue.push_back((nr, nc));
            }
        }
    }
    Ok(())
}

pub(crate) fn neighbors8(r: usize, c: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    const OFFS: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];
    OFFS.iter().filter_map(move |&(dr, dc)| {
        let nr = r as isize + dr;
        let nc = c as isize + dc;
        (nr >= 0 && nc >= 0 && (nr as usize) < h && (nc as usize) < w).then_some((nr as usize, nc as usize))
    })
}

/// Square-window min (erosion) or max (dilation) filter, separable.
fn window_filter(values: &[f64], w: usize, h: usize, half: usize, take_max: bool) -> Vec<f64> {
    let pick = |a: f64, b: f64| if take_max { a.max(b) } else { a.min(b) };
    let mut tmp = vec![0.0; values.len()];
    tmp.par_chunks_mut(w).enumerate().for_each(|(r, row)| {
        for (c, out) in row.iter_mut().enumerate() {
            let lo = c.saturating_sub(half);
            let hi = (c + half).min(w - 1);
            *out = values[r * w + lo..=r * w + hi].iter().copied().reduce(pick).unwrap();
        }
    });
    let mut out = vec![0.0; values.len()];
    out.par_chunks_mut(w).enumerate().for_each(|(r, row)| {
        let lo = r.saturating_sub(half);
        let hi = (r + half).min(h - 1);
        for (c, o) in row.iter_mut().enumerate() {
            *o = (lo..=hi).map(|rr| tmp[rr * w + c]).reduce(pick).unwrap();
        }
    });
    out
}

fn opening(values: &[f64], w: usize, h: usize, half: usize) -> Vec<f64> {
    let eroded = window_filter(values, w, h, half, false);
    window_filter(&eroded, w, h, half, true)
}

/// Labels every point ground or object.
pub fn classify_ground(cloud: &PointCloud, params: &TerrainParams) -> Result<PointCloud> {
    params.validate()?;
    let geom = cloud_geometry(cloud, params.cell_size)?;
    let all: Vec<usize> = (0..cloud.len()).collect();
    let mut surface = min_surface(cloud, &all, geom);
    fill_nearest(&mut surface)?;
    let (w, h) = (geom.width, geom.height);
    let mut current: Vec<f64> = surface.iter().map(|v| v.unwrap()).collect();

    let cells: Vec<Option<usize>> = cloud
        .points()
        .iter()
        .map(|p| geom.cell_of(p[0], p[1]).map(|(r, c)| geom.index(r, c)))
        .collect();
    let mut is_object = vec![false; cloud.len()];

    // Windows of 2^k cells (odd-sized: half-width 2^(k-1)), k = 1, 2, ...
    let max_cells = (params.max_window / params.cell_size).floor().max(1.0) as usize;
    let mut size = 1usize;
    let mut step = 0usize;
    loop {
        size *= 2;
        if size > max_cells.max(2) {
            break;
        }
        step += 1;
        let half = size / 2;
        current = opening(&current, w, h, half);
        let threshold = params.elevation_threshold + params.slope_tolerance * (step - 1) as f64;
        for (i, p) in cloud.points().iter().enumerate() {
            if let Some(cell) = cells[i] {
                if p[2] - current[cell] > threshold {
                    is_object[i] = true;
                }
            }
        }
    }
    if step == 0 {
        // Window smaller than two cells: compare against the raw minimum surface.
        for (i, p) in cloud.points().iter().enumerate() {
            if let Some(cell) = cells[i] {
                if p[2] - current[cell] > params.elevation_threshold {
                    is_object[i] = true;
                }
            }
        }
    }

    let labels = is_object
        .into_iter()
        .map(|o| if o { ClassLabel::Object } else { ClassLabel::Ground })
        .collect();
    cloud.clone().with_labels(labels)
}

/// Per-cell minimum ground `z` over the extent of the whole cloud; empty
/// cells take the nearest filled value. Uses ground-labelled points, or every
/// point when the cloud is unlabelled.
pub fn rasterize_dtm(cloud: &PointCloud, cell_size: f64) -> Result<RasterGrid> {
    let ground: Vec<usize> = match cloud.labels() {
        Some(_) => cloud.indices_with(ClassLabel::Ground),
        None => (0..cloud.len()).collect(),
    };
    if ground.is_empty() {
        return Err(Error::NoGround);
    }
    let geom = cloud_geometry(cloud, cell_size)?;
    let mut dtm = min_surface(cloud, &ground, geom);
    fill_nearest(&mut dtm)?;
    Ok(dtm)
}

/// Terrain height under a point: the DTM value of its cell, falling back to
/// the nearest cell for points just outside the DTM extent.
pub fn ground_height(dtm: &RasterGrid, x: f64, y: f64) -> f64 {
    if let Some(v) = dtm.sample(x, y) {
        return v;
    }
    let o = dtm.origin();
    let c = dtm.cell_size();
    let col = (((x - o.0) / c).floor().max(0.0) as usize).min(dtm.width() - 1);
    let row = (((y - o.1) / c).floor().max(0.0) as usize).min(dtm.height() - 1);
    dtm.get(row, col).unwrap_or(0.0)
}

/// Per-cell maximum of `z - dtm` over object points (all points when the
/// cloud is unlabelled), clamped at 0; empty cells are 0. The grid shares the
/// DTM origin.
pub fn rasterize_chm(cloud: &PointCloud, dtm: &RasterGrid, cell_size: f64) -> Result<RasterGrid> {
    let (lo, hi) = cloud.bounds();
    let origin = dtm.origin();
    let min = (origin.0.min(lo[0]), origin.1.min(lo[1]));
    let geom = GridGeometry::covering(min, (hi[0], hi[1]), cell_size)?;
    let mut chm = RasterGrid::filled(geom, 0.0);
    let object = |i: usize| match cloud.labels() {
        Some(l) => l[i] == ClassLabel::Object,
        None => true,
    };
    for (i, p) in cloud.points().iter().enumerate() {
        if !object(i) {
            continue;
        }
        let Some((r, c)) = geom.cell_of(p[0], p[1]) else {
            continue;
        };
        let height = (p[2] - ground_height(dtm, p[0], p[1])).max(0.0);
        if height > chm.get(r, c).unwrap_or(0.0) {
            chm.set(r, c, Some(height));
        }
    }
    Ok(chm)
}

/// Gaussian smoothing, kernel truncated at 3 sigma (in cells). Each output
/// cell is the kernel-weighted mean over in-bounds, non-NODATA neighbors;
/// NODATA cells stay NODATA.
pub fn smooth_raster(grid: &RasterGrid, sigma: f64) -> Result<RasterGrid> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(grid.clone());
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let (w, h) = (grid.width() as isize, grid.height() as isize);
    let rows: Vec<Vec<Option<f64>>> = (0..h)
        .into_par_iter()
        .map(|r| {
            (0..w)
                .map(|c| {
                    grid.get(r as usize, c as usize)?;
                    let mut acc = 0.0;
                    let mut norm = 0.0;
                    for dr in -radius..=radius {
                        let rr = r + dr;
                        if rr < 0 || rr >= h {
                            continue;
                        }
                        let kr = kernel[(dr + radius) as usize];
                        for dc in -radius..=radius {
                            let cc = c + dc;
                            if cc < 0 || cc >= w {
                                continue;
                            }
                            if let Some(v) = grid.get(rr as usize, cc as usize) {
                                let k = kr * kernel[(dc + radius) as usize];
                                acc += k * v;
                                norm += k;
                            }
                        }
                    }
                    Some(acc / norm)
                })
                .collect()
        })
        .collect();
    RasterGrid::from_values(grid.geometry(), rows.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane(n: usize, spacing: f64, z: impl Fn(f64, f64) -> f64) -> Vec<[f64; 3]> {
        let mut pts = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let (x, y) = (i as f64 * spacing, j as f64 * spacing);
                pts.push([x, y, z(x, y)]);
            }
        }
        pts
    }

    #[test]
    fn flat_plane_is_all_ground() {
        let c = PointCloud::new(plane(40, 0.25, |_, _| 3.0)).unwrap();
        let out = classify_ground(&c, &TerrainParams::default()).unwrap();
        assert!(out.labels().unwrap().iter().all(|&l| l == ClassLabel::Ground));
    }

    #[test]
    fn elevated_point_is_object() {
        let mut pts = plane(40, 0.25, |_, _| 0.0);
        pts.push([5.1, 5.1, 10.0]);
        let c = PointCloud::new(pts).unwrap();
        let out = classify_ground(&c, &TerrainParams::default()).unwrap();
        let labels = out.labels().unwrap();
        assert_eq!(*labels.last().unwrap(), ClassLabel::Object);
        assert_eq!(labels.iter().filter(|&&l| l == ClassLabel::Object).count(), 1);
    }

    #[test]
    fn single_point_is_ground() {
        let c = PointCloud::new(vec![[1.0, 2.0, 3.0]]).unwrap();
        let out = classify_ground(&c, &TerrainParams::default()).unwrap();
        assert_eq!(out.label(0), ClassLabel::Ground);
    }

    #[test]
    fn dtm_single_point_and_minimum_rule() {
        let c = PointCloud::new(vec![[0.0, 0.0, 5.0]]).unwrap();
        let dtm = rasterize_dtm(&c, 0.5).unwrap();
        assert_eq!((dtm.width(), dtm.height()), (1, 1));
        assert_eq!(dtm.get(0, 0), Some(5.0));

        let c = PointCloud::new(vec![[0.1, 0.1, 4.0], [0.2, 0.2, 2.0], [3.0, 3.0, 5.0]]).unwrap();
        let dtm = rasterize_dtm(&c, 0.5).unwrap();
        assert_eq!(dtm.get(0, 0), Some(2.0));
        assert!(dtm.iter().all(|v| v.is_some()));
    }

    #[test]
    fn dtm_requires_ground() {
        let c = PointCloud::new(vec![[0.0, 0.0, 5.0]])
            .unwrap()
            .with_labels(vec![ClassLabel::Object])
            .unwrap();
        assert!(matches!(rasterize_dtm(&c, 0.5), Err(Error::NoGround)));
    }

    #[test]
    fn dtm_tracks_tilted_plane() {
        let slope = 0.2;
        let cell = 0.5;
        let c = PointCloud::new(plane(80, 0.1, |x, y| 0.5 * x + slope * y)).unwrap();
        let dtm = rasterize_dtm(&c, cell).unwrap();
        // Each cell's minimum lies at its lower-left sample; the plane varies
        // by at most cell * (0.5 + slope) across a cell.
        for r in 0..dtm.height() {
            for col in 0..dtm.width() {
                let (x, y) = dtm.cell_center(r, col);
                let v = dtm.get(r, col).unwrap();
                assert!((v - (0.5 * x + slope * y)).abs() <= cell * (0.5 + slope), "{r},{col}");
            }
        }
    }

    #[test]
    fn chm_takes_max_height_and_clamps() {
        let dtm = RasterGrid::filled(GridGeometry::new((0.0, 0.0), 1.0, 3, 1).unwrap(), 0.0);
        let c = PointCloud::new(vec![[0.5, 0.5, 10.0], [0.6, 0.5, 4.0], [1.5, 0.5, -0.2], [2.5, 0.5, 0.0]])
            .unwrap()
            .with_labels(vec![ClassLabel::Object, ClassLabel::Object, ClassLabel::Object, ClassLabel::Ground])
            .unwrap();
        let chm = rasterize_chm(&c, &dtm, 1.0).unwrap();
        assert_eq!(chm.get(0, 0), Some(10.0));
        assert_eq!(chm.get(0, 1), Some(0.0));
        assert_eq!(chm.get(0, 2), Some(0.0));
    }

    #[test]
    fn smoothing_identity_constant_and_mass() {
        let geom = GridGeometry::new((0.0, 0.0), 1.0, 21, 21).unwrap();
        let mut g = RasterGrid::filled(geom, 0.0);
        g.set(10, 10, Some(1.0));
        assert_eq!(smooth_raster(&g, 0.0).unwrap(), g);
        let s = smooth_raster(&g, 1.5).unwrap();
        let mass: f64 = s.iter().map(|v| v.unwrap()).sum();
        assert!((mass - 1.0).abs() < 1e-6, "{mass}");

        let c = RasterGrid::filled(geom, 7.25);
        let s = smooth_raster(&c, 2.0).unwrap();
        assert!(s.iter().all(|v| (v.unwrap() - 7.25).abs() < 1e-12));
    }

    #[test]
    fn smoothing_skips_nodata() {
        let geom = GridGeometry::new((0.0, 0.0), 1.0, 5, 5).unwrap();
        let mut g = RasterGrid::filled(geom, 2.0);
        g.set(2, 2, None);
        g.set(2, 3, Some(2.0));
        let s = smooth_raster(&g, 1.0).unwrap();
        assert_eq!(s.get(2, 2), None);
        assert!(s.iter().flatten().all(|v| (v - 2.0).abs() < 1e-12));
    }
}
