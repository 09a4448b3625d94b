//! Individual tree crown delineation from airborne LiDAR point clouds.
//!
//! The pipeline separates ground from object returns, builds terrain and
//! canopy height rasters, seeds tree priors from canopy-height local maxima,
//! and partitions the object returns with a prior-constrained multiclass
//! normalized cut followed by a recursive binary normalized cut inside each
//! cluster (MCRC). Optical features (for example robust-PCA scores of a
//! hyperspectral cube) can be fused into the graph weights.

pub mod cli;
pub mod config;
pub mod error;
pub mod graph;
pub mod hull;
pub mod pipeline;
pub mod pointcloud;
pub mod raster;
pub mod rpca;
pub mod spatial;
pub mod spectral;
pub mod synth;
pub mod terrain;
pub mod treetops;
pub mod validation;

pub use error::{Error, Result};
pub use graph::{build_graph, GraphParams, SparseAffinity};
pub use pipeline::{mcrc, rc_only, McrcConfig, Segmentation, TreeRecord};
pub use pointcloud::{ClassLabel, PointCloud};
pub use raster::RasterGrid;
