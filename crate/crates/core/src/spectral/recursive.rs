//! Recursive two-way normalized cut with an Ncut stopping threshold.
//!
//! Nodes are processed breadth-first, each level in parallel, and leaves are
//! emitted in depth-first order of their split path, so the result does not
//! depend on scheduling.

use std::fmt::Write as _;

use log::warn;
use rayon::prelude::*;

use super::{canonical_labels, largest, ncut_energy, split_labels, CutResult, EigenOptions};
use crate::error::{Error, Result};
use crate::graph::{subgraph, SparseAffinity};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecursiveParams {
    /// Largest Ncut value at which a split is accepted.
    pub tau: f64,
    /// Smallest side a split may leave.
    pub min_points: usize,
    pub eigen: EigenOptions,
}

impl Default for RecursiveParams {
    fn default() -> Self {
        Self {
            tau: 0.3,
            min_points: 5,
            eigen: EigenOptions::with_tol(1e-6),
        }
    }
}

/// One visited node of the recursion.
#[derive(Debug, Clone, PartialEq)]
pub struct RecursionNode {
    /// Split path from the root: `false` is the side holding the lowest vertex.
    pub path: Vec<bool>,
    pub size: usize,
    /// Ncut of the attempted split, if one was computed.
    pub ncut: Option<f64>,
    pub split: bool,
}

impl RecursionNode {
    pub fn depth(&self) -> usize {
        self.path.len()
    }
}

pub fn nodes_csv(nodes: &[RecursionNode]) -> String {
    let mut s = String::from("path,depth,size,ncut,split\n");
    for nd in nodes {
        let path: String = nd.path.iter().map(|&b| if b { '1' } else { '0' }).collect();
        let ncut = nd.ncut.map_or(String::from("nan"), |v| v.to_string());
        let _ = writeln!(s, "r{path},{},{},{ncut},{}", nd.depth(), nd.size, nd.split);
    }
    s
}

pub fn recursive_ncut(g: &SparseAffinity, tau: f64, min_points: usize) -> Result<CutResult> {
    let params = RecursiveParams {
        tau,
        min_points,
        ..RecursiveParams::default()
    };
    recursive_ncut_with(g, &params).map(|(r, _)| r)
}

struct Pending {
    path: Vec<bool>,
    vertices: Vec<usize>,
}

enum Outcome {
    Leaf(RecursionNode, Vec<usize>),
    Split(RecursionNode, [Pending; 2]),
}

pub fn recursive_ncut_with(g: &SparseAffinity, params: &RecursiveParams) -> Result<(CutResult, Vec<RecursionNode>)> {
    if !(params.tau > 0.0) {
        return Err(Error::invalid(format!("tau must be > 0, got {}", params.tau)));
    }
    if params.min_points < 2 {
        return Err(Error::invalid(format!("min_points must be >= 2, got {}", params.min_points)));
    }
    let n = g.n();
    if n == 0 {
        return Err(Error::NoPoints);
    }
    let mut level = vec![Pending {
        path: Vec::new(),
        vertices: (0..n).collect(),
    }];
    let mut leaves: Vec<(Vec<bool>, Vec<usize>)> = Vec::new();
    let mut nodes = Vec::new();
    while !level.is_empty() {
        let outcomes: Vec<Outcome> = level
            .into_par_iter()
            .map(|p| visit(g, p, params))
            .collect::<Result<_>>()?;
        level = Vec::new();
        for o in outcomes {
            match o {
                Outcome::Leaf(node, vs) => {
                    leaves.push((node.path.clone(), vs));
                    nodes.push(node);
                }
                Outcome::Split(node, children) => {
                    nodes.push(node);
                    level.extend(children);
                }
            }
        }
    }
    leaves.sort_by(|a, b| a.0.cmp(&b.0));
    nodes.sort_by(|a, b| a.path.cmp(&b.path));
    let mut labels = vec![0; n];
    for (k, (_, vs)) in leaves.iter().enumerate() {
        vs.iter().for_each(|&i| labels[i] = k);
    }
    let clusters = leaves.len();
    Ok((
        CutResult {
            ncut_energy: ncut_energy(g, &labels, clusters),
            labels,
            clusters,
        },
        nodes,
    ))
}

fn visit(g: &SparseAffinity, p: Pending, params: &RecursiveParams) -> Result<Outcome> {
    let size = p.vertices.len();
    let leaf = |ncut: Option<f64>, p: Pending| {
        Outcome::Leaf(
            RecursionNode {
                path: p.path,
                size,
                ncut,
                split: false,
            },
            p.vertices,
        )
    };
    if size < 2 * params.min_points {
        return Ok(leaf(None, p));
    }
    let sub = subgraph(g, &p.vertices)?;
    let Some(labels) = node_split(&sub.graph, params)? else {
        return Ok(leaf(None, p));
    };
    let ncut = ncut_energy(&sub.graph, &labels, 2);
    let side_b = labels.iter().filter(|&&l| l == 1).count();
    if !(ncut <= params.tau) || side_b < params.min_points || size - side_b < params.min_points {
        return Ok(leaf(Some(ncut), p));
    }
    let mut halves = [Vec::new(), Vec::new()];
    for (k, &l) in labels.iter().enumerate() {
        halves[l].push(p.vertices[k]);
    }
    let [a, b] = halves;
    let child = |bit: bool, vertices: Vec<usize>| {
        let mut path = p.path.clone();
        path.push(bit);
        Pending { path, vertices }
    };
    Ok(Outcome::Split(
        RecursionNode {
            path: p.path.clone(),
            size,
            ncut: Some(ncut),
            split: true,
        },
        [child(false, a), child(true, b)],
    ))
}

/// Binary labels for a node graph, or `None` when it cannot be divided.
fn node_split(g: &SparseAffinity, params: &RecursiveParams) -> Result<Option<Vec<usize>>> {
    let comps = g.components();
    if comps.len() == 1 {
        return spectral_split(g, params);
    }
    let big: Vec<usize> = (0..comps.len())
        .filter(|&k| comps[k].len() >= params.min_points)
        .collect();
    let mut labels = vec![1usize; g.n()];
    match big.len() {
        0 => return Ok(None),
        1 => {
            // Cut the one substantial component; strays follow its larger side.
            let main = &comps[big[0]];
            let sub = subgraph(g, main)?;
            let Some(inner) = spectral_split(&sub.graph, params)? else {
                return Ok(None);
            };
            let ones = inner.iter().filter(|&&l| l == 1).count();
            let larger = usize::from(ones > inner.len() - ones);
            labels.iter_mut().for_each(|l| *l = larger);
            for (k, &i) in main.iter().enumerate() {
                labels[i] = inner[k];
            }
        }
        _ => {
            // Zero-cost split: the largest substantial component and the strays
            // against the remaining substantial components.
            let bigs: Vec<Vec<usize>> = big.iter().map(|&k| comps[k].clone()).collect();
            let keep = big[largest(&bigs)];
            for (k, comp) in comps.iter().enumerate() {
                if k == keep || comp.len() < params.min_points {
                    comp.iter().for_each(|&i| labels[i] = 0);
                }
            }
        }
    }
    canonical_labels(&mut labels);
    Ok(Some(labels))
}

fn spectral_split(g: &SparseAffinity, params: &RecursiveParams) -> Result<Option<Vec<usize>>> {
    if g.n() < 2 {
        return Ok(None);
    }
    match split_labels(g, &params.eigen) {
        Ok((labels, solve)) => {
            if let Some(s) = solve.filter(|s| !s.converged) {
                warn!(
                    "eigensolve on {} vertices stopped at residual {:.2e}; using the unconverged vector",
                    g.n(),
                    s.pairs.max_residual()
                );
            }
            Ok(Some(labels))
        }
        Err(Error::Indivisible) => Ok(None),
        Err(e) => Err(e),
    }
}
