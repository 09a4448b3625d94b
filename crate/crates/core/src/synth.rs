//! Synthetic forest plots with exact truth.
//!
//! Crowns are cones or domes whose base sits at half the tree height. Every
//! tree disc is sampled at the plot density and a return is kept only where
//! that tree is the visible surface; understory crowns beneath the canopy
//! keep a fixed fraction of their returns (canopy penetration). The ground is
//! sampled at the full density everywhere. Each tree also gets one return at
//! its apex so truth heights are observable.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::pointcloud::{write_text, ClassLabel, PointCloud};
use crate::validation::GroundTruthTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrownModel {
    Cone,
    Hemisphere,
}

impl std::str::FromStr for CrownModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cone" => Ok(Self::Cone),
            "hemisphere" | "dome" => Ok(Self::Hemisphere),
            _ => Err(Error::Config(format!("unknown crown model `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestSpec {
    /// Plot size along x and y, meters; the plot starts at the origin.
    pub extent: (f64, f64),
    pub n_canopy: usize,
    pub n_understory: usize,
    pub crown_model: CrownModel,
    pub height_range: (f64, f64),
    pub radius_range: (f64, f64),
    pub understory_radius_range: (f64, f64),
    /// Returns per square meter.
    pub point_density: f64,
    /// Terrain rise per meter along x.
    pub ground_slope: f64,
    /// Standard deviation of the vertical noise, meters.
    pub noise_sigma: f64,
    /// Allowed crown overlap: centers keep at least `(1 - overlap)(r_i + r_j)` apart.
    pub overlap: f64,
    /// Share of understory returns that get through the canopy.
    pub penetration: f64,
    /// Feature channels per object return (0 for none).
    pub feature_dim: usize,
    pub feature_noise: f64,
    pub seed: u64,
}

impl Default for ForestSpec {
    fn default() -> Self {
        Self {
            extent: (35.0, 35.0),
            n_canopy: 30,
            n_understory: 0,
            crown_model: CrownModel::Cone,
            height_range: (10.0, 25.0),
            radius_range: (2.0, 3.5),
            understory_radius_range: (1.0, 1.6),
            point_density: 80.0,
            ground_slope: 0.0,
            noise_sigma: 0.05,
            overlap: 0.2,
            penetration: 0.3,
            feature_dim: 0,
            feature_noise: 0.001,
            seed: 7,
        }
    }
}

impl ForestSpec {
    pub fn validate(&self) -> Result<()> {
        let ordered = |(a, b): (f64, f64)| a > 0.0 && b >= a && b.is_finite();
        if !(self.extent.0 > 0.0 && self.extent.1 > 0.0) {
            return Err(Error::Config("extent must be positive".into()));
        }
        if !(ordered(self.height_range) && ordered(self.radius_range) && ordered(self.understory_radius_range)) {
            return Err(Error::Config("height and radius ranges must be positive and ordered".into()));
        }
        if !(self.point_density > 0.0 && self.point_density.is_finite()) {
            return Err(Error::Config("point density must be > 0".into()));
        }
        if !(self.noise_sigma >= 0.0) || !(0.0..1.0).contains(&self.overlap) || !(0.0..=1.0).contains(&self.penetration) {
            return Err(Error::Config("noise must be >= 0, overlap in [0, 1), penetration in [0, 1]".into()));
        }
        if !self.ground_slope.is_finite() || !(self.feature_noise >= 0.0) {
            return Err(Error::Config("ground slope and feature noise must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Canopy,
    Understory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthTree {
    pub x: f64,
    pub y: f64,
    /// Top above the ground at the stem, meters.
    pub height: f64,
    pub crown_radius: f64,
    pub layer: Layer,
    pub model: CrownModel,
}

impl SynthTree {
    pub fn crown_base(&self) -> f64 {
        0.5 * self.height
    }

    /// Crown surface height above the stem ground at horizontal offset `rho`.
    pub fn envelope(&self, rho: f64) -> Option<f64> {
        if rho > self.crown_radius {
            return None;
        }
        let t = rho / self.crown_radius;
        let b = self.crown_base();
        Some(match self.model {
            CrownModel::Cone => self.height - (self.height - b) * t,
            CrownModel::Hemisphere => b + (self.height - b) * (1.0 - t * t).sqrt(),
        })
    }

    fn envelope_at(&self, x: f64, y: f64) -> Option<f64> {
        self.envelope(((x - self.x).powi(2) + (y - self.y).powi(2)).sqrt())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticForest {
    /// Returns with their true ground/object labels.
    pub cloud: PointCloud,
    /// Canopy trees first, then understory.
    pub trees: Vec<SynthTree>,
    /// True tree of every return (`None` for ground).
    pub point_tree: Vec<Option<u32>>,
    pub slope: f64,
}

impl SyntheticForest {
    pub fn ground_z(&self, x: f64) -> f64 {
        self.slope * x
    }

    pub fn truth(&self) -> Vec<GroundTruthTree> {
        self.trees
            .iter()
            .map(|t| GroundTruthTree {
                x: t.x,
                y: t.y,
                height: t.height,
            })
            .collect()
    }

    pub fn layer_indices(&self, layer: Layer) -> Vec<usize> {
        (0..self.trees.len()).filter(|&i| self.trees[i].layer == layer).collect()
    }

    /// `tree_id,x,y,height,crown_radius,layer`.
    pub fn write_tree_truth(&self, path: &Path) -> Result<()> {
        write_text(path, |w| {
            use std::io::Write as _;
            writeln!(w, "tree_id,x,y,height,crown_radius,layer")?;
            for (i, t) in self.trees.iter().enumerate() {
                let layer = match t.layer {
                    Layer::Canopy => "canopy",
                    Layer::Understory => "understory",
                };
                writeln!(w, "{i},{},{},{},{},{layer}", t.x, t.y, t.height, t.crown_radius)?;
            }
            Ok(())
        })
    }

    /// `point_index,tree_id` for object returns.
    pub fn write_point_truth(&self, path: &Path) -> Result<()> {
        write_text(path, |w| {
            use std::io::Write as _;
            writeln!(w, "point_index,tree_id")?;
            for (i, t) in self.point_tree.iter().enumerate() {
                if let Some(t) = t {
                    writeln!(w, "{i},{t}")?;
                }
            }
            Ok(())
        })
    }
}

const MAX_PLACEMENT_TRIES: usize = 20_000;

fn place_canopy(spec: &ForestSpec, rng: &mut ChaCha8Rng) -> Result<Vec<SynthTree>> {
    let (w, h) = spec.extent;
    let mut trees: Vec<SynthTree> = Vec::with_capacity(spec.n_canopy);
    for _ in 0..spec.n_canopy {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let r = rng.random_range(spec.radius_range.0..=spec.radius_range.1);
            if 2.0 * r > w || 2.0 * r > h {
                break;
            }
            let x = rng.random_range(r..=w - r);
            let y = rng.random_range(r..=h - r);
            let clear = trees.iter().all(|t| {
                let d = ((t.x - x).powi(2) + (t.y - y).powi(2)).sqrt();
                d >= (1.0 - spec.overlap) * (t.crown_radius + r)
            });
            if clear {
                trees.push(SynthTree {
                    x,
                    y,
                    height: rng.random_range(spec.height_range.0..=spec.height_range.1),
                    crown_radius: r,
                    layer: Layer::Canopy,
                    model: spec.crown_model,
                });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Config(format!(
                "a {w} x {h} m plot cannot hold {} canopy crowns at the requested spacing",
                spec.n_canopy
            )));
        }
    }
    Ok(trees)
}

/// Lowest canopy surface over a disc, sampled on a ring pattern; `None` when
/// any sample is outside every canopy crown.
fn min_canopy_over(canopy: &[SynthTree], x: f64, y: f64, r: f64) -> Option<f64> {
    let mut lowest = f64::INFINITY;
    for ring in 0..=4 {
        let rho = r * ring as f64 / 4.0;
        let steps = if ring == 0 { 1 } else { 16 };
        for k in 0..steps {
            let a = 2.0 * PI * k as f64 / steps as f64;
            let (px, py) = (x + rho * a.cos(), y + rho * a.sin());
            let top = canopy.iter().filter_map(|t| t.envelope_at(px, py)).fold(f64::NEG_INFINITY, f64::max);
            if !top.is_finite() {
                return None;
            }
            lowest = lowest.min(top);
        }
    }
    Some(lowest)
}

fn place_understory(spec: &ForestSpec, canopy: &[SynthTree], rng: &mut ChaCha8Rng) -> Result<Vec<SynthTree>> {
    let mut out: Vec<SynthTree> = Vec::new();
    if spec.n_understory == 0 {
        return Ok(out);
    }
    if canopy.is_empty() {
        return Err(Error::Config("understory trees need a canopy to stand under".into()));
    }
    for _ in 0..spec.n_understory {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let host = &canopy[rng.random_range(0..canopy.len())];
            let r = rng.random_range(spec.understory_radius_range.0..=spec.understory_radius_range.1);
            let a = rng.random_range(0.0..2.0 * PI);
            let rho = rng.random_range(0.0..host.crown_radius);
            let (x, y) = (host.x + rho * a.cos(), host.y + rho * a.sin());
            if x < r || y < r || x > spec.extent.0 - r || y > spec.extent.1 - r {
                continue;
            }
            // Keep clear of every canopy stem and of the other understory crowns.
            if canopy.iter().any(|t| ((t.x - x).powi(2) + (t.y - y).powi(2)).sqrt() < r + 0.7) {
                continue;
            }
            if out.iter().any(|u| ((u.x - x).powi(2) + (u.y - y).powi(2)).sqrt() < u.crown_radius + r) {
                continue;
            }
            let Some(local) = min_canopy_over(canopy, x, y, r) else {
                continue;
            };
            let top = 0.6 * local;
            if top < 2.5 {
                continue;
            }
            out.push(SynthTree {
                x,
                y,
                height: rng.random_range(2.0..=top),
                crown_radius: r,
                layer: Layer::Understory,
                model: spec.crown_model,
            });
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Config(format!(
                "could not place {} understory trees under the canopy",
                spec.n_understory
            )));
        }
    }
    Ok(out)
}

fn disc_sample(rng: &mut ChaCha8Rng, cx: f64, cy: f64, r: f64) -> (f64, f64) {
    let rho = r * rng.random::<f64>().sqrt();
    let a = rng.random_range(0.0..2.0 * PI);
    (cx + rho * a.cos(), cy + rho * a.sin())
}

struct TreeReturns {
    points: Vec<[f64; 3]>,
    features: Vec<Option<Vec<f64>>>,
}

pub fn generate_forest(spec: &ForestSpec) -> Result<SyntheticForest> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let canopy = place_canopy(spec, &mut rng)?;
    let understory = place_understory(spec, &canopy, &mut rng)?;
    let trees: Vec<SynthTree> = canopy.iter().cloned().chain(understory).collect();
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let jitter = |rng: &mut ChaCha8Rng| if spec.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
    let slope = spec.ground_slope;
    let (w, h) = spec.extent;

    // Ground on stream 0, tree k on stream k + 1: each list is independent of the others.
    let sampling_seed = spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0xD1B5_4A32_D192_ED03;
    let mut ground_rng = ChaCha8Rng::seed_from_u64(sampling_seed);
    ground_rng.set_stream(0);
    let n_ground = (spec.point_density * w * h).round() as usize;
    let ground: Vec<[f64; 3]> = (0..n_ground)
        .map(|_| {
            let x = ground_rng.random_range(0.0..w);
            let y = ground_rng.random_range(0.0..h);
            [x, y, slope * x + jitter(&mut ground_rng)]
        })
        .collect();

    let per_tree: Vec<TreeReturns> = trees
        .par_iter()
        .enumerate()
        .map(|(k, t)| {
            let mut rng = ChaCha8Rng::seed_from_u64(sampling_seed);
            rng.set_stream(k as u64 + 1);
            let signature: Vec<f64> = (0..spec.feature_dim).map(|_| rng.random::<f64>()).collect();
            let feature_noise = Normal::new(0.0, spec.feature_noise.max(f64::MIN_POSITIVE)).expect("valid sigma");
            let feature = |rng: &mut ChaCha8Rng| -> Option<Vec<f64>> {
                (spec.feature_dim > 0).then(|| signature.iter().map(|s| s + feature_noise.sample(rng)).collect())
            };
            let stem_ground = slope * t.x;
            let n = (spec.point_density * PI * t.crown_radius * t.crown_radius).round() as usize;
            let mut points = Vec::with_capacity(n + 1);
            let mut features = Vec::with_capacity(n + 1);
            points.push([t.x, t.y, stem_ground + t.height + jitter(&mut rng)]);
            features.push(feature(&mut rng));
            for _ in 0..n {
                let (x, y) = disc_sample(&mut rng, t.x, t.y, t.crown_radius);
                let keep_draw: f64 = rng.random();
                let z_noise = jitter(&mut rng);
                let f = feature(&mut rng);
                if x < 0.0 || y < 0.0 || x >= w || y >= h {
                    continue;
                }
                let Some(own) = t.envelope_at(x, y) else { continue };
                let own_z = stem_ground + own;
                let higher = |o: &SynthTree| o.envelope_at(x, y).map(|e| slope * o.x + e) > Some(own_z);
                let visible = match t.layer {
                    Layer::Canopy => !canopy.iter().any(higher),
                    Layer::Understory => {
                        let covered = canopy.iter().any(|o| o.envelope_at(x, y).is_some());
                        let blocked_by_understory = trees
                            .iter()
                            .filter(|o| o.layer == Layer::Understory)
                            .any(higher);
                        !blocked_by_understory && (!covered || keep_draw < spec.penetration)
                    }
                };
                if visible {
                    points.push([x, y, own_z + z_noise]);
                    features.push(f);
                }
            }
            TreeReturns { points, features }
        })
        .collect();

    let mut points = ground;
    let mut features: Vec<Option<Vec<f64>>> = vec![None; points.len()];
    let mut labels = vec![ClassLabel::Ground; points.len()];
    let mut point_tree = vec![None; points.len()];
    for (k, tr) in per_tree.into_iter().enumerate() {
        labels.extend(std::iter::repeat_n(ClassLabel::Object, tr.points.len()));
        point_tree.extend(std::iter::repeat_n(Some(k as u32), tr.points.len()));
        points.extend(tr.points);
        features.extend(tr.features);
    }
    let cloud = if spec.feature_dim > 0 {
        PointCloud::with_features(points, spec.feature_dim, features)?
    } else {
        PointCloud::new(points)?
    }
    .with_labels(labels)?;
    Ok(SyntheticForest {
        cloud,
        trees,
        point_tree,
        slope,
    })
}
