//! Point clouds, their on-disk formats, and fusion with feature rasters.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::pipeline::{Segmentation, TreeRecord};
use crate::raster::RasterGrid;

/// Magic bytes at the start of the binary cloud format.
pub const BINARY_MAGIC: &[u8; 4] = b"PCLD";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ClassLabel {
    Ground,
    Object,
    Unclassified,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    XyzCsv,
    XyzBinary,
}

impl CloudFormat {
    /// Guesses the format from a file extension (`.csv`/`.txt`/`.xyz` vs anything else).
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv" | "txt" | "xyz") => CloudFormat::XyzCsv,
            _ => CloudFormat::XyzBinary,
        }
    }
}

/// 3D returns with optional class labels and per-point feature vectors.
///
/// Every point carries either a full feature vector of length
/// `feature_dim` or the "absent" marker (points outside the feature raster).
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
    labels: Option<Vec<ClassLabel>>,
    feature_dim: usize,
    // n * feature_dim values; rows of absent points are zero and ignored.
    features: Vec<f64>,
    has_features: Vec<bool>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::NoPoints);
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::invalid(format!("point {i} has a non-finite coordinate")));
        }
        let n = points.len();
        Ok(Self {
            points,
            labels: None,
            feature_dim: 0,
            features: Vec::new(),
            has_features: vec![false; n],
        })
    }

    /// Builds a cloud with per-point features; `None` marks an absent vector.
    pub fn with_features(
        points: Vec<[f64; 3]>,
        feature_dim: usize,
        features: Vec<Option<Vec<f64>>>,
    ) -> Result<Self> {
        let mut cloud = Self::new(points)?;
        if features.len() != cloud.len() {
            return Err(Error::invalid("one feature entry per point is required"));
        }
        cloud.feature_dim = feature_dim;
        cloud.features = vec![0.0; cloud.len() * feature_dim];
        for (i, f) in features.into_iter().enumerate() {
            if let Some(f) = f {
                if f.len() != feature_dim {
                    return Err(Error::invalid(format!(
                        "point {i} has {} features, expected {feature_dim}",
                        f.len()
                    )));
                }
                if f.iter().any(|v| !v.is_finite()) {
                    return Err(Error::invalid(format!("point {i} has a non-finite feature")));
                }
                cloud.features[i * feature_dim..(i + 1) * feature_dim].copy_from_slice(&f);
                cloud.has_features[i] = feature_dim > 0;
            }
        }
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn point(&self, i: usize) -> [f64; 3] {
        self.points[i]
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Feature vector of point `i`, or `None` when absent.
    pub fn feature(&self, i: usize) -> Option<&[f64]> {
        self.has_features[i].then(|| &self.features[i * self.feature_dim..(i + 1) * self.feature_dim])
    }

    pub fn has_any_features(&self) -> bool {
        self.feature_dim > 0 && self.has_features.iter().any(|&b| b)
    }

    pub fn labels(&self) -> Option<&[ClassLabel]> {
        self.labels.as_deref()
    }

    pub fn label(&self, i: usize) -> ClassLabel {
        self.labels
            .as_ref()
            .map_or(ClassLabel::Unclassified, |l| l[i])
    }

    pub fn set_labels(&mut self, labels: Vec<ClassLabel>) -> Result<()> {
        if labels.len() != self.len() {
            return Err(Error::invalid("one class label per point is required"));
        }
        self.labels = Some(labels);
        Ok(())
    }

    pub fn with_labels(mut self, labels: Vec<ClassLabel>) -> Result<Self> {
        self.set_labels(labels)?;
        Ok(self)
    }

    /// Indices of points carrying `label`.
    pub fn indices_with(&self, label: ClassLabel) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.label(i) == label).collect()
    }

    /// Drops all feature vectors.
    pub fn without_features(&self) -> Self {
        let mut out = self.clone();
        out.feature_dim = 0;
        out.features.clear();
        out.has_features.iter_mut().for_each(|b| *b = false);
        out
    }

    /// New cloud holding the given points in the given order, carrying their
    /// labels and features.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::NoPoints);
        }
        let k = self.feature_dim;
        let mut points = Vec::with_capacity(indices.len());
        let mut features = Vec::with_capacity(indices.len() * k);
        let mut has = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!("point index {i} out of range")));
            }
            points.push(self.points[i]);
            features.extend_from_slice(&self.features[i * k..(i + 1) * k]);
            has.push(self.has_features[i]);
        }
        Ok(Self {
            points,
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            feature_dim: k,
            features,
            has_features: has,
        })
    }

    /// Axis-aligned bounding box `(min, max)`.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (lo, hi)
    }
}

/// Reads a cloud. CSV rows are `x,y,z[,f1..fk]` with an optional header;
/// a feature vector written as all `nan` is read back as absent.
pub fn load_cloud(path: &Path, format: CloudFormat) -> Result<PointCloud> {
    match format {
        CloudFormat::XyzCsv => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            parse_csv_cloud(&text)
        }
        CloudFormat::XyzBinary => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            decode_binary_cloud(&bytes)
        }
    }
}

pub fn parse_csv_cloud(text: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    let mut features: Vec<Option<Vec<f64>>> = Vec::new();
    let mut arity: Option<usize> = None;
    let mut first_data = true;
    for (no, line) in text.lines().enumerate() {
        let line_no = no + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed: std::result::Result<Vec<f64>, _> =
            fields.iter().map(|f| f.parse::<f64>()).collect();
        let values = match parsed {
            Ok(v) => v,
            // A single non-numeric line before any data is the header.
            Err(_) if first_data && points.is_empty() && arity.is_none() => {
                first_data = false;
                continue;
            }
            Err(_) => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("non-numeric field in `{line}`"),
                })
            }
        };
        first_data = false;
        if values.len() < 3 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected at least 3 columns, found {}", values.len()),
            });
        }
        match arity {
            None => arity = Some(values.len()),
            Some(a) if a != values.len() => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("expected {a} columns, found {}", values.len()),
                })
            }
            _ => {}
        }
        let xyz = [values[0], values[1], values[2]];
        if xyz.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse {
                line: line_no,
                msg: "non-finite coordinate".into(),
            });
        }
        points.push(xyz);
        features.push(decode_feature_row(&values[3..]).map_err(|msg| Error::Parse {
            line: line_no,
            msg,
        })?);
    }
    if points.is_empty() {
        return Err(Error::NoPoints);
    }
    let k = arity.unwrap_or(3) - 3;
    PointCloud::with_features(points, k, features)
}

fn decode_feature_row(values: &[f64]) -> std::result::Result<Option<Vec<f64>>, String> {
    if values.is_empty() {
        return Ok(None);
    }
    if values.iter().all(|v| v.is_nan()) {
        return Ok(None);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err("non-finite feature value".into());
    }
    Ok(Some(values.to_vec()))
}

pub fn decode_binary_cloud(bytes: &[u8]) -> Result<PointCloud> {
    let bad = |msg: &str| Error::Parse {
        line: 0,
        msg: msg.to_string(),
    };
    if bytes.len() < 12 || &bytes[..4] != BINARY_MAGIC {
        return Err(bad("missing PCLD header"));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let k = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if n == 0 {
        return Err(Error::NoPoints);
    }
    let stride = (3 + k) * 8;
    if bytes.len() != 12 + n * stride {
        return Err(bad("payload length does not match point count"));
    }
    let mut points = Vec::with_capacity(n);
    let mut features = Vec::with_capacity(n);
    for (i, rec) in bytes[12..].chunks_exact(stride).enumerate() {
        let vals: Vec<f64> = rec
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let xyz = [vals[0], vals[1], vals[2]];
        if xyz.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse {
                line: i + 1,
                msg: "non-finite coordinate".into(),
            });
        }
        points.push(xyz);
        features.push(decode_feature_row(&vals[3..]).map_err(|msg| Error::Parse {
            line: i + 1,
            msg,
        })?);
    }
    PointCloud::with_features(points, k, features)
}

pub fn encode_binary_cloud(cloud: &PointCloud) -> Vec<u8> {
    let k = cloud.feature_dim();
    let mut out = Vec::with_capacity(12 + cloud.len() * (3 + k) * 8);
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    out.extend_from_slice(&(k as u32).to_le_bytes());
    for i in 0..cloud.len() {
        for v in cloud.point(i) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        match cloud.feature(i) {
            Some(f) => f.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            None => (0..k).for_each(|_| out.extend_from_slice(&f64::NAN.to_le_bytes())),
        }
    }
    out
}

pub fn csv_cloud(cloud: &PointCloud) -> String {
    let k = cloud.feature_dim();
    let mut out = String::from("x,y,z");
    for j in 0..k {
        out.push_str(&format!(",f{}", j + 1));
    }
    out.push('\n');
    for i in 0..cloud.len() {
        let [x, y, z] = cloud.point(i);
        out.push_str(&format!("{x},{y},{z}"));
        match cloud.feature(i) {
            Some(f) => f.iter().for_each(|v| out.push_str(&format!(",{v}"))),
            None => (0..k).for_each(|_| out.push_str(",nan")),
        }
        out.push('\n');
    }
    out
}

pub fn save_cloud(cloud: &PointCloud, path: &Path, format: CloudFormat) -> Result<()> {
    let bytes = match format {
        CloudFormat::XyzCsv => csv_cloud(cloud).into_bytes(),
        CloudFormat::XyzBinary => encode_binary_cloud(cloud),
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Gives every point the feature vector of the raster cell containing its
/// `(x, y)`, one feature per raster in the stack. Points outside the extent
/// or on a NODATA cell in any band get the absent marker.
pub fn attach_features(
    cloud: &PointCloud,
    rasters: &[RasterGrid],
    overwrite: bool,
) -> Result<PointCloud> {
    let first = rasters
        .first()
        .ok_or_else(|| Error::invalid("empty raster stack"))?;
    if let Some(r) = rasters.iter().find(|r| !r.same_geometry(first)) {
        return Err(Error::GeometryMismatch(format!(
            "{:?} vs {:?}",
            r.geometry(),
            first.geometry()
        )));
    }
    if cloud.has_any_features() && !overwrite {
        return Err(Error::invalid("cloud already has features"));
    }
    let geom = first.geometry();
    let features = cloud
        .points()
        .iter()
        .map(|p| {
            let (r, c) = geom.cell_of(p[0], p[1])?;
            rasters.iter().map(|band| band.get(r, c)).collect::<Option<Vec<f64>>>()
        })
        .collect();
    let mut out = PointCloud::with_features(cloud.points().to_vec(), rasters.len(), features)?;
    out.labels = cloud.labels.clone();
    Ok(out)
}

/// Writes the per-point segmentation (`point_index,tree_id`, labelled points
/// only) and the tree table.
pub fn write_segmentation(seg: &Segmentation, labels_path: &Path, trees_path: &Path) -> Result<()> {
    if seg.trees.is_empty() || seg.labels.iter().all(Option::is_none) {
        return Err(Error::invalid("empty segmentation"));
    }
    write_text(labels_path, |w| {
        writeln!(w, "point_index,tree_id")?;
        for (i, l) in seg.labels.iter().enumerate() {
            if let Some(t) = l {
                writeln!(w, "{i},{t}")?;
            }
        }
        Ok(())
    })?;
    write_tree_table(&seg.trees, trees_path)
}

pub fn write_tree_table(trees: &[TreeRecord], path: &Path) -> Result<()> {
    write_text(path, |w| {
        writeln!(w, "tree_id,apex_x,apex_y,height_m,crown_area_m2,n_points")?;
        for t in trees {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                t.tree_id, t.apex.0, t.apex.1, t.height, t.crown_area, t.n_points
            )?;
        }
        Ok(())
    })
}

/// Reads back what [`write_segmentation`] wrote. `n_points` is the size of
/// the cloud the labels refer to.
pub fn read_segmentation(labels_path: &Path, trees_path: &Path, n_points: usize) -> Result<Segmentation> {
    let text = fs::read_to_string(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let mut labels = vec![None; n_points];
    for (no, row) in data_rows(&text, "point_index,tree_id")? {
        let (i, t): (usize, u32) = match row.as_slice() {
            [i, t] => (parse_field(i, no)?, parse_field(t, no)?),
            _ => return Err(Error::Parse { line: no, msg: "expected 2 columns".into() }),
        };
        if i >= n_points {
            return Err(Error::Parse { line: no, msg: format!("point index {i} out of range") });
        }
        labels[i] = Some(t);
    }
    let trees = read_tree_table(trees_path)?;
    Ok(Segmentation { labels, trees })
}

pub fn read_tree_table(path: &Path) -> Result<Vec<TreeRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut trees = Vec::new();
    for (no, row) in data_rows(&text, "tree_id,apex_x,apex_y,height_m,crown_area_m2,n_points")? {
        if row.len() != 6 {
            return Err(Error::Parse { line: no, msg: "expected 6 columns".into() });
        }
        trees.push(TreeRecord {
            tree_id: parse_field(&row[0], no)?,
            apex: (parse_field(&row[1], no)?, parse_field(&row[2], no)?),
            height: parse_field(&row[3], no)?,
            crown_area: parse_field(&row[4], no)?,
            n_points: parse_field(&row[5], no)?,
        });
    }
    Ok(trees)
}

pub(crate) fn data_rows(text: &str, header: &str) -> Result<Vec<(usize, Vec<String>)>> {
    let mut rows = Vec::new();
    let mut seen_header = false;
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if !seen_header {
            seen_header = true;
            if line.replace(' ', "") == header {
                continue;
            }
            if line.split(',').next().is_some_and(|f| f.trim().parse::<f64>().is_err()) {
                return Err(Error::Parse {
                    line: no + 1,
                    msg: format!("expected header `{header}`"),
                });
            }
        }
        rows.push((no + 1, line.split(',').map(|s| s.trim().to_string()).collect()));
    }
    Ok(rows)
}

pub(crate) fn parse_field<T: std::str::FromStr>(s: &str, line: usize) -> Result<T> {
    s.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("bad field `{s}`"),
    })
}

pub(crate) fn write_text(
    path: &Path,
    body: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>,
) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    body(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}
