//! Normalized-cut partitioning: binary, multiclass with hard priors, and recursive.

mod eigen;
mod multiclass;
mod recursive;

use crate::error::{Error, Result};
use crate::graph::SparseAffinity;

pub use eigen::{smallest_eigenpairs, smallest_eigenpairs_with, solve_smallest, EigenOptions, EigenPairs, EigenSolve};
pub use multiclass::{multiclass_ncut_with_priors, multiclass_ncut_with_priors_diag, ComponentSolve, MulticlassDiagnostics};
pub use recursive::{nodes_csv, recursive_ncut, recursive_ncut_with, RecursionNode, RecursiveParams};

/// A hard partition of graph vertices into `clusters` non-empty groups.
#[derive(Debug, Clone, PartialEq)]
pub struct CutResult {
    pub labels: Vec<usize>,
    pub ncut_energy: f64,
    pub clusters: usize,
}

impl CutResult {
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.clusters];
        for &l in &self.labels {
            s[l] += 1;
        }
        s
    }

    /// Vertex lists per cluster, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); self.clusters];
        for (i, &l) in self.labels.iter().enumerate() {
            m[l].push(i);
        }
        m
    }
}

/// `sum_c cut(c, V \ c) / assoc(c, V)`. Clusters with zero volume contribute 0.
pub fn ncut_energy(g: &SparseAffinity, labels: &[usize], clusters: usize) -> f64 {
    let mut cut = vec![0.0; clusters];
    let mut assoc = vec![0.0; clusters];
    for (i, &li) in labels.iter().enumerate() {
        assoc[li] += g.degree(i);
        for (j, w) in g.neighbors(i) {
            if labels[j] != li {
                cut[li] += w;
            }
        }
    }
    cut.iter()
        .zip(&assoc)
        .map(|(c, a)| if *a > 0.0 { c / a } else { 0.0 })
        .sum()
}

/// Relabels so clusters are numbered by first appearance.
pub(crate) fn canonical_labels(labels: &mut [usize]) -> usize {
    let mut map = std::collections::HashMap::new();
    for l in labels.iter_mut() {
        let next = map.len();
        *l = *map.entry(*l).or_insert(next);
    }
    map.len()
}

/// Two-way split by the second eigenvector, thresholded at its mean and
/// then its median. Disconnected graphs split by components (Ncut 0): the
/// largest component against the rest.
pub fn binary_ncut(g: &SparseAffinity) -> Result<CutResult> {
    binary_ncut_with(g, &EigenOptions::default())
}

pub fn binary_ncut_with(g: &SparseAffinity, opts: &EigenOptions) -> Result<CutResult> {
    let (labels, solve) = split_labels(g, opts)?;
    if let Some(s) = solve {
        if !s.converged {
            return Err(Error::NonConvergence {
                matvecs: s.matvecs,
                max_residual: s.pairs.max_residual(),
            });
        }
    }
    Ok(CutResult {
        ncut_energy: ncut_energy(g, &labels, 2),
        labels,
        clusters: 2,
    })
}

/// Labels of a binary cut plus the eigensolve (absent for component splits).
pub(crate) fn split_labels(g: &SparseAffinity, opts: &EigenOptions) -> Result<(Vec<usize>, Option<EigenSolve>)> {
    let n = g.n();
    if n < 2 {
        return Err(Error::invalid(format!("binary cut needs at least 2 vertices, got {n}")));
    }
    let comps = g.components();
    if comps.len() > 1 {
        let big = largest(&comps);
        let mut labels = vec![1; n];
        comps[big].iter().for_each(|&i| labels[i] = 0);
        canonical_labels(&mut labels);
        return Ok((labels, None));
    }
    let solve = solve_smallest(g, 2, opts)?;
    let x = &solve.pairs.vectors[1];
    let labels = threshold(x).ok_or(Error::Indivisible)?;
    Ok((labels, Some(solve)))
}

/// Index of the largest list; the first one wins ties.
pub(crate) fn largest(comps: &[Vec<usize>]) -> usize {
    let mut best = 0;
    for (k, c) in comps.iter().enumerate() {
        if c.len() > comps[best].len() {
            best = k;
        }
    }
    best
}

fn threshold(x: &[f64]) -> Option<Vec<usize>> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[(sorted.len() - 1) / 2];
    for t in [mean, median] {
        let mut labels: Vec<usize> = x.iter().map(|&v| usize::from(v > t)).collect();
        let above = labels.iter().filter(|&&l| l == 1).count();
        if above > 0 && above < labels.len() {
            canonical_labels(&mut labels);
            return Some(labels);
        }
    }
    None
}
