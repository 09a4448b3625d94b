//! Georeferenced 2D grids (DTM, CHM, feature bands, label rasters).
//!
//! Row 0 is the southernmost row. Cell `(row, col)` covers the half-open
//! extent `[x0 + col*c, x0 + (col+1)*c) x [y0 + row*c, y0 + (row+1)*c)`.
//! The ASCII grid format writes rows north to south, as the format expects.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Value written for NODATA cells in the ASCII grid format.
pub const ASCII_NODATA: f64 = -9999.0;

#[derive(Debug, Clone, PartialEq)]
pub struct RasterGrid {
    origin: (f64, f64),
    cell_size: f64,
    width: usize,
    height: usize,
    // NaN marks NODATA; accessors never hand it out as a number.
    values: Vec<f64>,
}

/// Origin, cell size and dimensions of a grid, without values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridGeometry {
    pub origin: (f64, f64),
    pub cell_size: f64,
    pub width: usize,
    pub height: usize,
}

impl GridGeometry {
    pub fn new(origin: (f64, f64), cell_size: f64, width: usize, height: usize) -> Result<Self> {
        if !(cell_size > 0.0 && cell_size.is_finite()) {
            return Err(Error::invalid(format!("cell size must be > 0, got {cell_size}")));
        }
        if !(origin.0.is_finite() && origin.1.is_finite()) {
            return Err(Error::invalid("raster origin must be finite"));
        }
        if width == 0 || height == 0 {
            return Err(Error::invalid("raster must have at least one cell"));
        }
        Ok(Self {
            origin,
            cell_size,
            width,
            height,
        })
    }

    /// Smallest grid with the given cell size whose half-open cells contain
    /// every `(x, y)` of the bounding box `[min, max]`.
    pub fn covering(min: (f64, f64), max: (f64, f64), cell_size: f64) -> Result<Self> {
        let width = ((max.0 - min.0) / cell_size).floor() as usize + 1;
        let height = ((max.1 - min.1) / cell_size).floor() as usize + 1;
        Self::new(min, cell_size, width, height)
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cell containing `(x, y)` under the half-open convention.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fc = ((x - self.origin.0) / self.cell_size).floor();
        let fr = ((y - self.origin.1) / self.cell_size).floor();
        if fc < 0.0 || fr < 0.0 || fc >= self.width as f64 || fr >= self.height as f64 {
            return None;
        }
        Some((fr as usize, fc as usize))
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.origin.0 + (col as f64 + 0.5) * self.cell_size,
            self.origin.1 + (row as f64 + 0.5) * self.cell_size,
        )
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }
}

impl RasterGrid {
    pub fn filled(geometry: GridGeometry, value: f64) -> Self {
        Self {
            origin: geometry.origin,
            cell_size: geometry.cell_size,
            width: geometry.width,
            height: geometry.height,
            values: vec![value; geometry.len()],
        }
    }

    pub fn nodata(geometry: GridGeometry) -> Self {
        Self::filled(geometry, f64::NAN)
    }

    /// Builds a grid from row-major values (row 0 south). `None` is NODATA.
    pub fn from_values(geometry: GridGeometry, values: Vec<Option<f64>>) -> Result<Self> {
        if values.len() != geometry.len() {
            return Err(Error::invalid(format!(
                "raster expects {} values, got {}",
                geometry.len(),
                values.len()
            )));
        }
        let mut raw = Vec::with_capacity(values.len());
        for v in values {
            match v {
                Some(v) if !v.is_finite() => {
                    return Err(Error::invalid("raster values must be finite or NODATA"))
                }
                Some(v) => raw.push(v),
                None => raw.push(f64::NAN),
            }
        }
        Ok(Self {
            origin: geometry.origin,
            cell_size: geometry.cell_size,
            width: geometry.width,
            height: geometry.height,
            values: raw,
        })
    }

    pub fn geometry(&self) -> GridGeometry {
        GridGeometry {
            origin: self.origin,
            cell_size: self.cell_size,
            width: self.width,
            height: self.height,
        }
    }

    pub fn origin(&self) -> (f64, f64) {
        self.origin
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        let v = self.values[row * self.width + col];
        (!v.is_nan()).then_some(v)
    }

    pub fn set(&mut self, row: usize, col: usize, value: Option<f64>) {
        let v = match value {
            Some(v) => {
                debug_assert!(v.is_finite());
                v
            }
            None => f64::NAN,
        };
        self.values[row * self.width + col] = v;
    }

    pub fn is_nodata(&self, row: usize, col: usize) -> bool {
        self.values[row * self.width + col].is_nan()
    }

    /// Value at the cell containing `(x, y)`, if inside and not NODATA.
    pub fn sample(&self, x: f64, y: f64) -> Option<f64> {
        let (r, c) = self.geometry().cell_of(x, y)?;
        self.get(r, c)
    }

    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        self.geometry().cell_of(x, y)
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        self.geometry().cell_center(row, col)
    }

    /// Row-major iterator over cell values (row 0 south), NODATA as `None`.
    pub fn iter(&self) -> impl Iterator<Item = Option<f64>> + '_ {
        self.values.iter().map(|&v| (!v.is_nan()).then_some(v))
    }

    pub fn same_geometry(&self, other: &RasterGrid) -> bool {
        self.geometry() == other.geometry()
    }

    /// Parses the ASCII grid format:
    /// `ncols nrows xllcorner yllcorner cellsize nodata_value` header lines,
    /// then `nrows` lines of values from north to south.
    pub fn read_ascii(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_ascii(&text)
    }

    pub fn parse_ascii(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let mut header = |key: &str| -> Result<f64> {
            let (no, line) = lines.next().ok_or(Error::Parse {
                line: 0,
                msg: format!("missing header `{key}`"),
            })?;
            let mut parts = line.split_whitespace();
            let name = parts.next().unwrap_or_default();
            if !name.eq_ignore_ascii_case(key) {
                return Err(Error::Parse {
                    line: no + 1,
                    msg: format!("expected `{key}`, found `{name}`"),
                });
            }
            parts
                .next()
                .and_then(|v| v.parse::<f64>().ok())
                .ok_or(Error::Parse {
                    line: no + 1,
                    msg: format!("bad value for `{key}`"),
                })
        };
        let ncols = header("ncols")? as usize;
        let nrows = header("nrows")? as usize;
        let xll = header("xllcorner")?;
        let yll = header("yllcorner")?;
        let cell = header("cellsize")?;
        let nodata = header("nodata_value")?;
        let geometry = GridGeometry::new((xll, yll), cell, ncols, nrows)?;

        let mut grid = RasterGrid::nodata(geometry);
        let mut row_from_top = 0usize;
        for (no, line) in lines {
            if row_from_top >= nrows {
                return Err(Error::Parse {
                    line: no + 1,
                    msg: "more rows than nrows".into(),
                });
            }
            let row = nrows - 1 - row_from_top;
            let mut count = 0;
            for (col, tok) in line.split_whitespace().enumerate() {
                if col >= ncols {
                    return Err(Error::Parse {
                        line: no + 1,
                        msg: format!("expected {ncols} values"),
                    });
                }
                let v: f64 = tok.parse().map_err(|_| Error::Parse {
                    line: no + 1,
                    msg: format!("bad number `{tok}`"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        line: no + 1,
                        msg: "non-finite value".into(),
                    });
                }
                grid.set(row, col, (v != nodata).then_some(v));
                count += 1;
            }
            if count != ncols {
                return Err(Error::Parse {
                    line: no + 1,
                    msg: format!("expected {ncols} values, found {count}"),
                });
            }
            row_from_top += 1;
        }
        if row_from_top != nrows {
            return Err(Error::Parse {
                line: 0,
                msg: format!("expected {nrows} rows, found {row_from_top}"),
            });
        }
        Ok(grid)
    }

    pub fn to_ascii(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "ncols {}", self.width);
        let _ = writeln!(out, "nrows {}", self.height);
        let _ = writeln!(out, "xllcorner {}", self.origin.0);
        let _ = writeln!(out, "yllcorner {}", self.origin.1);
        let _ = writeln!(out, "cellsize {}", self.cell_size);
        let _ = writeln!(out, "nodata_value {}", ASCII_NODATA);
        for row in (0..self.height).rev() {
            for col in 0..self.width {
                if col > 0 {
                    out.push(' ');
                }
                match self.get(row, col) {
                    Some(v) => {
                        let _ = write!(out, "{v}");
                    }
                    None => {
                        let _ = write!(out, "{ASCII_NODATA}");
                    }
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn write_ascii(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_ascii()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(w: usize, h: usize) -> GridGeometry {
        GridGeometry::new((10.0, 20.0), 0.5, w, h).unwrap()
    }

    #[test]
    fn half_open_cells() {
        let g = geom(4, 3);
        assert_eq!(g.cell_of(10.0, 20.0), Some((0, 0)));
        assert_eq!(g.cell_of(10.5, 20.0), Some((0, 1)));
        assert_eq!(g.cell_of(10.4999, 20.4999), Some((0, 0)));
        assert_eq!(g.cell_of(12.0, 20.0), None);
        assert_eq!(g.cell_of(9.999, 20.0), None);
        assert_eq!(g.cell_of(11.99, 21.49), Some((2, 3)));
    }

    #[test]
    fn covering_includes_max_corner() {
        let g = GridGeometry::covering((0.0, 0.0), (2.0, 1.0), 0.5).unwrap();
        assert_eq!((g.width, g.height), (5, 3));
        assert!(g.cell_of(2.0, 1.0).is_some());
    }

    #[test]
    fn ascii_round_trip_with_nodata() {
        let mut r = RasterGrid::filled(geom(3, 2), 1.25);
        r.set(0, 1, None);
        r.set(1, 2, Some(-3.5));
        let back = RasterGrid::parse_ascii(&r.to_ascii()).unwrap();
        assert!(back.same_geometry(&r));
        assert_eq!(back.get(0, 1), None);
        assert_eq!(back.get(1, 2), Some(-3.5));
        assert_eq!(back.get(0, 0), Some(1.25));
    }

    #[test]
    fn ascii_rejects_short_row() {
        let text = "ncols 2\nnrows 1\nxllcorner 0\nyllcorner 0\ncellsize 1\nnodata_value -9999\n1\n";
        assert!(matches!(
            RasterGrid::parse_ascii(text),
            Err(Error::Parse { line: 7, .. })
        ));
    }

    #[test]
    fn zero_cell_size_rejected() {
        assert!(GridGeometry::new((0.0, 0.0), 0.0, 1, 1).is_err());
    }
}
