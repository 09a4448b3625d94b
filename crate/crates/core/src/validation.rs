//! Matching delineated trees against field truth, and per-height-band tallies.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::pipeline::TreeRecord;
use crate::pointcloud::{data_rows, parse_field, write_text};

pub const MAX_XY: f64 = 5.0;
pub const MAX_DZ: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthTree {
    pub x: f64,
    pub y: f64,
    pub height: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchPair {
    /// Index into the candidate list.
    pub candidate: usize,
    /// Index into the truth list.
    pub truth: usize,
    pub d_xy: f64,
    /// Candidate height minus truth height.
    pub d_z: f64,
}

impl MatchPair {
    pub fn score(&self) -> f64 {
        (self.d_xy * self.d_xy + self.d_z * self.d_z).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchReport {
    pub pairs: Vec<MatchPair>,
    pub n_extracted: usize,
    pub n_truth: usize,
    pub n_matched: usize,
    pub bands: Vec<BandRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandRow {
    pub label: &'static str,
    /// Half-open `[lo, hi)` in meters.
    pub lo: f64,
    pub hi: f64,
    pub truth: usize,
    pub extracted: usize,
    pub matched: usize,
}

/// Height tiers, tallest first. The last tier catches anything under 2 m so
/// band totals always add up to the overall counts.
pub const BANDS: [(&str, f64, f64); 6] = [
    (">=20", 20.0, f64::INFINITY),
    ("15-20", 15.0, 20.0),
    ("10-15", 10.0, 15.0),
    ("5-10", 5.0, 10.0),
    ("2-5", 2.0, 5.0),
    ("<2", f64::NEG_INFINITY, 2.0),
];

pub fn band_of(height: f64) -> usize {
    BANDS
        .iter()
        .position(|&(_, lo, hi)| height >= lo && height < hi)
        .unwrap_or(BANDS.len() - 1)
}

/// Greedy one-to-one matching by `sqrt(d_xy^2 + d_z^2)` within both gates;
/// ties go to the lower truth index, then the lower candidate index.
pub fn match_trees(candidates: &[TreeRecord], truth: &[GroundTruthTree], max_xy: f64, max_dz: f64) -> MatchReport {
    let mut options = Vec::new();
    for (t, g) in truth.iter().enumerate() {
        for (c, cand) in candidates.iter().enumerate() {
            let d_xy = ((cand.apex.0 - g.x).powi(2) + (cand.apex.1 - g.y).powi(2)).sqrt();
            let d_z = cand.height - g.height;
            if d_xy <= max_xy && d_z.abs() <= max_dz {
                options.push(MatchPair {
                    candidate: c,
                    truth: t,
                    d_xy,
                    d_z,
                });
            }
        }
    }
    options.sort_by(|a, b| {
        a.score()
            .total_cmp(&b.score())
            .then(a.truth.cmp(&b.truth))
            .then(a.candidate.cmp(&b.candidate))
    });
    let mut used_c = vec![false; candidates.len()];
    let mut used_t = vec![false; truth.len()];
    let mut pairs = Vec::new();
    for p in options {
        if used_c[p.candidate] || used_t[p.truth] {
            continue;
        }
        used_c[p.candidate] = true;
        used_t[p.truth] = true;
        pairs.push(p);
    }
    pairs.sort_by_key(|p| (p.truth, p.candidate));
    let mut report = MatchReport {
        n_extracted: candidates.len(),
        n_truth: truth.len(),
        n_matched: pairs.len(),
        pairs,
        bands: Vec::new(),
    };
    report.bands = band_summary(&report, candidates, truth);
    report
}

/// Counts per height band: truth and matched rows by truth height,
/// extracted rows by candidate height.
pub fn band_summary(report: &MatchReport, candidates: &[TreeRecord], truth: &[GroundTruthTree]) -> Vec<BandRow> {
    let mut rows: Vec<BandRow> = BANDS
        .iter()
        .map(|&(label, lo, hi)| BandRow {
            label,
            lo,
            hi,
            truth: 0,
            extracted: 0,
            matched: 0,
        })
        .collect();
    for t in truth {
        rows[band_of(t.height)].truth += 1;
    }
    for c in candidates {
        rows[band_of(c.height)].extracted += 1;
    }
    for p in &report.pairs {
        rows[band_of(truth[p.truth].height)].matched += 1;
    }
    rows
}

impl MatchReport {
    /// Matched share of the truth trees (0 when there is no truth).
    pub fn detection_rate(&self) -> f64 {
        if self.n_truth == 0 {
            0.0
        } else {
            self.n_matched as f64 / self.n_truth as f64
        }
    }

    /// Pair rows, a blank line, then the band table with an `Overall` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("candidate,truth,d_xy,d_z\n");
        for p in &self.pairs {
            let _ = writeln!(s, "{},{},{},{}", p.candidate, p.truth, p.d_xy, p.d_z);
        }
        s.push_str("\nband,truth,extracted,matched\n");
        for b in &self.bands {
            let _ = writeln!(s, "{},{},{},{}", b.label, b.truth, b.extracted, b.matched);
        }
        let _ = writeln!(s, "Overall,{},{},{}", self.n_truth, self.n_extracted, self.n_matched);
        s
    }
}

pub fn parse_truth(text: &str) -> Result<Vec<GroundTruthTree>> {
    let mut out = Vec::new();
    for (no, row) in data_rows(text, "x,y,height")? {
        let [x, y, h] = row.as_slice() else {
            return Err(Error::Parse {
                line: no,
                msg: "expected 3 columns".into(),
            });
        };
        let t = GroundTruthTree {
            x: parse_field(x, no)?,
            y: parse_field(y, no)?,
            height: parse_field(h, no)?,
        };
        if !(t.height > 0.0) {
            return Err(Error::Parse {
                line: no,
                msg: format!("tree height {} must be > 0", t.height),
            });
        }
        out.push(t);
    }
    Ok(out)
}

pub fn read_truth(path: &Path) -> Result<Vec<GroundTruthTree>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_truth(&text)
}

pub fn write_truth(truth: &[GroundTruthTree], path: &Path) -> Result<()> {
    write_text(path, |w| {
        use std::io::Write as _;
        writeln!(w, "x,y,height")?;
        for t in truth {
            writeln!(w, "{},{},{}", t.x, t.y, t.height)?;
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(x: f64, y: f64, h: f64) -> TreeRecord {
        TreeRecord {
            tree_id: 0,
            apex: (x, y),
            height: h,
            crown_area: 1.0,
            n_points: 1,
        }
    }

    fn truth(x: f64, y: f64, h: f64) -> GroundTruthTree {
        GroundTruthTree { x, y, height: h }
    }

    #[test]
    fn identical_lists_match_fully() {
        let t = vec![truth(0.0, 0.0, 10.0), truth(8.0, 1.0, 22.0)];
        let c: Vec<_> = t.iter().map(|g| cand(g.x, g.y, g.height)).collect();
        let r = match_trees(&c, &t, MAX_XY, MAX_DZ);
        assert_eq!(r.n_matched, 2);
        assert!(r.pairs.iter().all(|p| p.d_xy == 0.0 && p.d_z == 0.0));
    }

    #[test]
    fn gate_rejects_far_candidate() {
        let r = match_trees(&[cand(6.0, 0.0, 10.0)], &[truth(0.0, 0.0, 10.0)], MAX_XY, MAX_DZ);
        assert_eq!(r.n_matched, 0);
        let r = match_trees(&[cand(0.0, 0.0, 15.5)], &[truth(0.0, 0.0, 10.0)], MAX_XY, MAX_DZ);
        assert_eq!(r.n_matched, 0);
    }

    #[test]
    fn closer_candidate_wins() {
        let t = [truth(0.0, 0.0, 10.0)];
        let c = [cand(2.0, 0.0, 10.0), cand(0.6, 0.0, 10.8)];
        let r = match_trees(&c, &t, MAX_XY, MAX_DZ);
        assert_eq!(r.pairs.len(), 1);
        assert_eq!(r.pairs[0].candidate, 1);
        assert!((r.pairs[0].score() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn band_boundaries() {
        assert_eq!(BANDS[band_of(20.0)].0, ">=20");
        assert_eq!(BANDS[band_of(19.999)].0, "15-20");
        assert_eq!(BANDS[band_of(2.0)].0, "2-5");
        assert_eq!(BANDS[band_of(1.0)].0, "<2");
        let t = vec![truth(0.0, 0.0, 25.0); 3];
        let r = match_trees(&[], &t, MAX_XY, MAX_DZ);
        let populated: Vec<_> = r.bands.iter().filter(|b| b.truth > 0).collect();
        assert_eq!(populated.len(), 1);
        assert_eq!(populated[0].label, ">=20");
    }

    #[test]
    fn csv_has_overall_row() {
        let r = match_trees(&[cand(0.0, 0.0, 9.0)], &[truth(0.0, 0.0, 10.0)], MAX_XY, MAX_DZ);
        let csv = r.to_csv();
        assert!(csv.lines().any(|l| l == "Overall,1,1,1"));
    }

    #[test]
    fn truth_parsing() {
        let t = parse_truth("x,y,height\n1,2,3\n4,5,6.5\n").unwrap();
        assert_eq!(t.len(), 2);
        assert!(parse_truth("x,y,height\n1,2,0\n").is_err());
        assert!(parse_truth("x,y,height\n1,2\n").is_err());
    }
}
