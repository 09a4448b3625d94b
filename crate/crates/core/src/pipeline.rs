//! End-to-end crown delineation: ground filtering, canopy rasters, tree-top
//! priors, multiclass cut with priors, and a recursive cut inside every
//! multiclass cluster.

use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{build_graph, subgraph, GraphParams};
use crate::hull::hull_area;
use crate::pointcloud::{ClassLabel, PointCloud};
use crate::raster::RasterGrid;
use crate::spectral::{
    multiclass_ncut_with_priors_diag, recursive_ncut_with, EigenOptions, MulticlassDiagnostics, RecursionNode,
    RecursiveParams,
};
use crate::terrain::{classify_ground, ground_height, rasterize_chm, rasterize_dtm, smooth_raster, TerrainParams};
use crate::treetops::{build_priors, local_maxima_mwf, watershed_markers, ApexSet, PriorSet};

#[derive(Debug, Clone, PartialEq)]
pub struct McrcConfig {
    pub terrain: TerrainParams,
    /// Keep ground/object labels already present on the input cloud.
    pub reuse_labels: bool,
    /// Gaussian sigma for CHM smoothing, cells.
    pub chm_smoothing_sigma: f64,
    /// Local-maximum window half-width, cells.
    pub mwf_window: usize,
    pub min_tree_height: f64,
    /// Horizontal radius of the point disc seeded around each tree top, meters.
    pub prior_radius: f64,
    pub graph_mc: GraphParams,
    pub graph_rc: GraphParams,
    pub tau_ncut: f64,
    pub min_points: usize,
    pub kappa: f64,
    pub use_features: bool,
    pub eigen_tol: f64,
    pub seed: u64,
}

impl McrcConfig {
    /// Bandwidths used for the dense conifer plots: a wide multiclass kernel
    /// and a tighter recursive one.
    pub fn italian() -> Self {
        Self {
            terrain: TerrainParams::default(),
            reuse_labels: false,
            chm_smoothing_sigma: 1.0,
            mwf_window: 3,
            min_tree_height: 2.0,
            prior_radius: 0.7,
            graph_mc: GraphParams {
                d: 1.0,
                sigma_xy: 1.0,
                sigma_z: 3.0,
                sigma_fts: Some(0.005),
            },
            graph_rc: GraphParams {
                d: 1.0,
                sigma_xy: 0.5,
                sigma_z: 2.0,
                sigma_fts: Some(0.005),
            },
            // Point-level crown graphs are elongated: halving a single isolated
            // crown already costs only 0.07-0.25, so 0.3 would shred every tree.
            tau_ncut: 0.05,
            min_points: 5,
            kappa: 0.8,
            use_features: false,
            eigen_tol: 1e-6,
            seed: 0x5eed,
        }
    }

    /// Benchmark-plot bandwidths: one kernel for both stages, no features.
    pub fn benchmark() -> Self {
        let g = GraphParams {
            d: 1.0,
            sigma_xy: 2.0,
            sigma_z: 5.0,
            sigma_fts: None,
        };
        Self {
            graph_mc: g,
            graph_rc: g,
            ..Self::italian()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.terrain.validate()?;
        self.graph_mc.validate()?;
        self.graph_rc.validate()?;
        if !(self.chm_smoothing_sigma >= 0.0) || self.mwf_window == 0 {
            return Err(Error::Config("chm_smoothing_sigma must be >= 0 and mwf_window >= 1".into()));
        }
        if !(self.min_tree_height >= 0.0) || !(self.prior_radius > 0.0) {
            return Err(Error::Config("min_tree_height must be >= 0 and prior_radius > 0".into()));
        }
        if !(self.tau_ncut > 0.0) || self.min_points < 2 {
            return Err(Error::Config("tau_ncut must be > 0 and min_points >= 2".into()));
        }
        if !(self.kappa > 0.0 && self.kappa <= 1.0) {
            return Err(Error::Config("kappa must lie in (0, 1]".into()));
        }
        if !(self.eigen_tol > 0.0) {
            return Err(Error::Config("eigen_tol must be > 0".into()));
        }
        Ok(())
    }

    fn stage_graph(&self, g: GraphParams) -> GraphParams {
        GraphParams {
            sigma_fts: if self.use_features { g.sigma_fts } else { None },
            ..g
        }
    }

    fn recursive_params(&self) -> RecursiveParams {
        RecursiveParams {
            tau: self.tau_ncut,
            min_points: self.min_points,
            eigen: self.eigen_options(),
        }
    }

    fn eigen_options(&self) -> EigenOptions {
        EigenOptions {
            seed: self.seed,
            ..EigenOptions::with_tol(self.eigen_tol)
        }
    }
}

impl Default for McrcConfig {
    fn default() -> Self {
        Self::italian()
    }
}

/// Per-point tree ids over the input cloud (`None` for ground returns) and
/// the per-tree metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub labels: Vec<Option<u32>>,
    pub trees: Vec<TreeRecord>,
}

impl Segmentation {
    pub fn tree_count(&self) -> usize {
        self.trees.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeRecord {
    pub tree_id: u32,
    /// Horizontal position of the highest return.
    pub apex: (f64, f64),
    /// Highest return above the terrain, meters.
    pub height: f64,
    /// Area of the horizontal convex hull, square meters.
    pub crown_area: f64,
    pub n_points: usize,
}

/// Everything a run produces, for reporting and tests.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub segmentation: Segmentation,
    pub classified: PointCloud,
    pub dtm: RasterGrid,
    pub chm: RasterGrid,
    pub smoothed_chm: RasterGrid,
    pub apexes: ApexSet,
    /// Priors over object-point indices (`object_indices` order).
    pub priors: Option<PriorSet>,
    pub object_indices: Vec<usize>,
    /// Number of clusters handed to the recursive stage.
    pub first_stage_clusters: usize,
    pub mc_diagnostics: Option<MulticlassDiagnostics>,
    /// Recursion nodes per first-stage cluster.
    pub rc_nodes: Vec<(usize, RecursionNode)>,
    /// Wall time per stage, seconds.
    pub timings: Vec<(String, f64)>,
}

struct Timer {
    stages: Vec<(String, f64)>,
    last: Instant,
}

impl Timer {
    fn new() -> Self {
        Self {
            stages: Vec::new(),
            last: Instant::now(),
        }
    }

    fn lap(&mut self, name: &str) {
        let now = Instant::now();
        self.stages.push((name.to_string(), (now - self.last).as_secs_f64()));
        self.last = now;
    }
}

struct Prepared {
    classified: PointCloud,
    dtm: RasterGrid,
    chm: RasterGrid,
    smoothed: RasterGrid,
    object_indices: Vec<usize>,
    objects: PointCloud,
}

fn prepare(cloud: &PointCloud, config: &McrcConfig, timer: &mut Timer) -> Result<Prepared> {
    config.validate()?;
    if cloud.is_empty() {
        return Err(Error::NoPoints);
    }
    let cloud = if config.use_features {
        cloud.clone()
    } else {
        cloud.without_features()
    };
    let classified = match cloud.labels() {
        Some(_) if config.reuse_labels => cloud,
        _ => classify_ground(&cloud, &config.terrain)?,
    };
    timer.lap("classify");
    let object_indices = classified.indices_with(ClassLabel::Object);
    if object_indices.is_empty() {
        return Err(Error::NoObjects);
    }
    let dtm = rasterize_dtm(&classified, config.terrain.cell_size)?;
    let chm = rasterize_chm(&classified, &dtm, config.terrain.cell_size)?;
    let smoothed = smooth_raster(&chm, config.chm_smoothing_sigma)?;
    let objects = classified.subset(&object_indices)?;
    timer.lap("rasters");
    Ok(Prepared {
        classified,
        dtm,
        chm,
        smoothed,
        object_indices,
        objects,
    })
}

/// Full MCRC segmentation.
pub fn mcrc(cloud: &PointCloud, config: &McrcConfig) -> Result<Segmentation> {
    mcrc_run(cloud, config).map(|r| r.segmentation)
}

pub fn mcrc_run(cloud: &PointCloud, config: &McrcConfig) -> Result<PipelineRun> {
    let mut timer = Timer::new();
    let prep = prepare(cloud, config, &mut timer)?;
    let apexes = local_maxima_mwf(&prep.smoothed, config.mwf_window, config.min_tree_height)?;
    let priors = if apexes.is_empty() {
        None
    } else {
        match build_priors(&prep.objects, &apexes, config.prior_radius) {
            Ok(p) => Some(p),
            Err(Error::NoPriors) => None,
            Err(e) => return Err(e),
        }
    };
    timer.lap("priors");
    let Some(priors) = priors else {
        warn!("no tree tops found; falling back to the recursive cut on all object returns");
        return finish_rc_only(prep, apexes, config, timer);
    };

    let graph = build_graph(&prep.objects, &config.stage_graph(config.graph_mc))?;
    timer.lap("graph_mc");

    // Components without a prior point cannot be reached by the multiclass
    // cut; each becomes its own first-stage cluster (isolated points included).
    let prior_of = priors.vertex_labels(prep.objects.len());
    let mut seeded = Vec::new();
    let mut unseeded: Vec<Vec<usize>> = Vec::new();
    for comp in graph.components() {
        if comp.iter().any(|&i| prior_of[i].is_some()) {
            seeded.extend(comp);
        } else {
            unseeded.push(comp);
        }
    }
    seeded.sort_unstable();
    let sub = subgraph(&graph, &seeded)?;
    let mut local = vec![usize::MAX; prep.objects.len()];
    for (k, &i) in seeded.iter().enumerate() {
        local[i] = k;
    }
    let local_priors = PriorSet {
        clusters: priors
            .clusters
            .iter()
            .map(|c| c.iter().map(|&i| local[i]).collect())
            .collect(),
        source_apex: priors.source_apex.clone(),
    };
    let (mut clusters, diag) = if local_priors.len() >= sub.graph.n() {
        // Degenerate: every seeded point is a prior point.
        let c: Vec<Vec<usize>> = local_priors
            .clusters
            .iter()
            .map(|members| members.iter().map(|&i| seeded[i]).collect())
            .collect();
        (c, None)
    } else {
        let (cut, diag) = multiclass_ncut_with_priors_diag(&sub.graph, &local_priors, config.kappa, &config.eigen_options())?;
        let mut c = vec![Vec::new(); cut.clusters];
        for (k, &l) in cut.labels.iter().enumerate() {
            c[l].push(seeded[k]);
        }
        (c, Some(diag))
    };
    timer.lap("mc");
    clusters.extend(unseeded);
    finish_clusters(prep, apexes, Some(priors), clusters, diag, config, timer)
}

/// Runs the recursive cut inside every first-stage cluster (in parallel) and
/// assembles the segmentation.
fn finish_clusters(
    prep: Prepared,
    apexes: ApexSet,
    priors: Option<PriorSet>,
    clusters: Vec<Vec<usize>>,
    diag: Option<MulticlassDiagnostics>,
    config: &McrcConfig,
    mut timer: Timer,
) -> Result<PipelineRun> {
    let rc_graph = config.stage_graph(config.graph_rc);
    let params = config.recursive_params();
    let results: Vec<(Vec<Vec<usize>>, Vec<RecursionNode>)> = clusters
        .par_iter()
        .map(|members| -> Result<_> {
            if members.len() < 2 * params.min_points {
                return Ok((vec![members.clone()], Vec::new()));
            }
            let pts = prep.objects.subset(members)?;
            let g = build_graph(&pts, &rc_graph)?;
            let (cut, nodes) = recursive_ncut_with(&g, &params)?;
            let leaves = cut
                .members()
                .into_iter()
                .map(|leaf| leaf.into_iter().map(|k| members[k]).collect())
                .collect();
            Ok((leaves, nodes))
        })
        .collect::<Result<_>>()?;
    timer.lap("rc");

    let first_stage_clusters = clusters.len();
    let mut object_labels = vec![0u32; prep.objects.len()];
    let mut tree = 0u32;
    let mut rc_nodes = Vec::new();
    for (c, (leaves, nodes)) in results.into_iter().enumerate() {
        for leaf in leaves {
            if leaf.is_empty() {
                continue;
            }
            leaf.iter().for_each(|&i| object_labels[i] = tree);
            tree += 1;
        }
        rc_nodes.extend(nodes.into_iter().map(|n| (c, n)));
    }
    let segmentation = assemble(&prep, &object_labels);
    timer.lap("metrics");
    info!(
        "{} first-stage clusters, {} trees from {} object returns",
        first_stage_clusters,
        segmentation.trees.len(),
        prep.objects.len()
    );
    Ok(PipelineRun {
        segmentation,
        classified: prep.classified,
        dtm: prep.dtm,
        chm: prep.chm,
        smoothed_chm: prep.smoothed,
        apexes,
        priors,
        object_indices: prep.object_indices,
        first_stage_clusters,
        mc_diagnostics: diag,
        rc_nodes,
        timings: timer.stages,
    })
}

fn assemble(prep: &Prepared, object_labels: &[u32]) -> Segmentation {
    let mut labels = vec![None; prep.classified.len()];
    for (k, &i) in prep.object_indices.iter().enumerate() {
        labels[i] = Some(object_labels[k]);
    }
    let trees = extract_tree_metrics(&labels, &prep.classified, &prep.dtm);
    Segmentation { labels, trees }
}

fn finish_rc_only(prep: Prepared, apexes: ApexSet, config: &McrcConfig, timer: Timer) -> Result<PipelineRun> {
    let all: Vec<usize> = (0..prep.objects.len()).collect();
    finish_clusters(prep, apexes, None, vec![all], None, config, timer)
}

/// Recursive cut on the whole object graph, no priors (the slow baseline).
pub fn rc_only(cloud: &PointCloud, config: &McrcConfig) -> Result<Segmentation> {
    rc_only_run(cloud, config).map(|r| r.segmentation)
}

pub fn rc_only_run(cloud: &PointCloud, config: &McrcConfig) -> Result<PipelineRun> {
    let mut timer = Timer::new();
    let prep = prepare(cloud, config, &mut timer)?;
    finish_rc_only(prep, ApexSet::default(), config, timer)
}

/// Per-tree metrics from point labels. Height and apex come from the highest
/// return above the terrain (lowest index on ties); crown area is the area of
/// the horizontal convex hull.
pub fn extract_tree_metrics(labels: &[Option<u32>], cloud: &PointCloud, dtm: &RasterGrid) -> Vec<TreeRecord> {
    let count = labels.iter().flatten().map(|&t| t as usize + 1).max().unwrap_or(0);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); count];
    for (i, l) in labels.iter().enumerate() {
        if let Some(t) = l {
            members[*t as usize].push(i);
        }
    }
    members
        .par_iter()
        .enumerate()
        .filter(|(_, m)| !m.is_empty())
        .map(|(t, m)| {
            let mut best = (f64::NEG_INFINITY, m[0]);
            for &i in m {
                let [x, y, z] = cloud.point(i);
                let h = z - ground_height(dtm, x, y);
                if h > best.0 {
                    best = (h, i);
                }
            }
            let apex = cloud.point(best.1);
            let xy: Vec<(f64, f64)> = m.iter().map(|&i| (cloud.point(i)[0], cloud.point(i)[1])).collect();
            TreeRecord {
                tree_id: t as u32,
                apex: (apex[0], apex[1]),
                height: best.0,
                crown_area: hull_area(&xy),
                n_points: m.len(),
            }
        })
        .collect()
}

/// Marker-controlled watershed on the smoothed CHM, the raster-only
/// baseline. Each region reports its highest raw-CHM cell as apex and its
/// cell area as crown area.
pub fn watershed_baseline(cloud: &PointCloud, config: &McrcConfig) -> Result<Vec<TreeRecord>> {
    let mut timer = Timer::new();
    let prep = prepare(cloud, config, &mut timer)?;
    let apexes = local_maxima_mwf(&prep.smoothed, config.mwf_window, config.min_tree_height)?;
    if apexes.is_empty() {
        return Ok(Vec::new());
    }
    let regions = watershed_markers(&prep.smoothed, &apexes, config.min_tree_height)?;
    let geom = regions.geometry;
    let n = apexes.len();
    let mut top: Vec<Option<(f64, usize, usize)>> = vec![None; n];
    let mut cells = vec![0usize; n];
    for row in 0..geom.height {
        for col in 0..geom.width {
            let Some(k) = regions.get(row, col) else { continue };
            cells[k] += 1;
            let v = prep.chm.get(row, col).unwrap_or(0.0);
            if top[k].is_none_or(|(b, _, _)| v > b) {
                top[k] = Some((v, row, col));
            }
        }
    }
    let mut points = vec![0usize; n];
    for &i in &prep.object_indices {
        let [x, y, _] = prep.classified.point(i);
        if let Some((r, c)) = geom.cell_of(x, y) {
            if let Some(k) = regions.get(r, c) {
                points[k] += 1;
            }
        }
    }
    let area = geom.cell_size * geom.cell_size;
    Ok((0..n)
        .map(|k| {
            let (h, r, c) = top[k].expect("marker cell belongs to its region");
            TreeRecord {
                tree_id: k as u32,
                apex: geom.cell_center(r, c),
                height: h,
                crown_area: cells[k] as f64 * area,
                n_points: points[k],
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::GridGeometry;

    fn flat_dtm(z: f64) -> RasterGrid {
        RasterGrid::filled(GridGeometry::new((-10.0, -10.0), 1.0, 20, 20).unwrap(), z)
    }

    #[test]
    fn single_point_metrics() {
        let cloud = PointCloud::new(vec![[1.0, 2.0, 12.0]]).unwrap();
        let t = extract_tree_metrics(&[Some(0)], &cloud, &flat_dtm(2.0));
        assert_eq!(t.len(), 1);
        assert_eq!((t[0].height, t[0].crown_area, t[0].n_points), (10.0, 0.0, 1));
        assert_eq!(t[0].apex, (1.0, 2.0));
    }

    #[test]
    fn unit_square_area() {
        let cloud = PointCloud::new(vec![[0.0, 0.0, 3.0], [1.0, 0.0, 3.0], [1.0, 1.0, 4.0], [0.0, 1.0, 3.0]]).unwrap();
        let t = extract_tree_metrics(&[Some(0); 4], &cloud, &flat_dtm(0.0));
        assert!((t[0].crown_area - 1.0).abs() < 1e-12);
        assert_eq!(t[0].apex, (1.0, 1.0));
    }

    #[test]
    fn ground_points_are_unlabelled() {
        let cloud = PointCloud::new(vec![[0.0, 0.0, 0.0], [0.0, 0.0, 5.0]]).unwrap();
        let t = extract_tree_metrics(&[None, Some(0)], &cloud, &flat_dtm(0.0));
        assert_eq!(t[0].n_points, 1);
    }

    #[test]
    fn presets_validate() {
        McrcConfig::italian().validate().unwrap();
        McrcConfig::benchmark().validate().unwrap();
        let mut bad = McrcConfig::default();
        bad.kappa = 0.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn flat_ground_has_no_objects() {
        let pts: Vec<[f64; 3]> = (0..400).map(|i| [(i % 20) as f64 * 0.5, (i / 20) as f64 * 0.5, 0.0]).collect();
        let cloud = PointCloud::new(pts).unwrap();
        assert!(matches!(mcrc(&cloud, &McrcConfig::default()), Err(Error::NoObjects)));
    }
}
