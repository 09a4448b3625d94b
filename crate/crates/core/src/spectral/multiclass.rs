//! Multiclass cut with hard priors: spectral embedding plus k-means whose
//! seeds never move.
//!
//! Each connected component is handled on its own. A component touched by a
//! single prior cluster joins it wholesale; otherwise its vertices are embedded
//! with the component's `C_comp` smallest nontrivial eigenvectors (rows scaled
//! by `d_i^{-1/2}`) and clustered with centroids initialised from the prior rows.
//!
//! The prior/output agreement is measured in the spectral subspace: for
//! cluster `c` it is the cosine between the projections of `D^{1/2} 1_{X_c}`
//! (output) and `D^{1/2} 1_{P_c}` (prior) onto the span of the eigenvectors
//! used, summed over components.

use std::fmt::Write as _;

use log::warn;

use super::{ncut_energy, solve_smallest, CutResult, EigenOptions};
use crate::error::{Error, Result};
use crate::graph::{subgraph, SparseAffinity};
use crate::treetops::PriorSet;

const MAX_KMEANS_ITERS: usize = 300;
const DEGENERATE_GAP: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MulticlassDiagnostics {
    pub kappa: f64,
    /// Per-cluster prior/output correlation.
    pub correlations: Vec<f64>,
    /// Clusters whose correlation is below `kappa`.
    pub violations: Vec<usize>,
    /// Eigenvalues and residuals of each solved component, keyed by its smallest vertex.
    pub solves: Vec<ComponentSolve>,
    pub kmeans_iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentSolve {
    pub first_vertex: usize,
    pub size: usize,
    pub eigenvalues: Vec<f64>,
    pub residuals: Vec<f64>,
    pub converged: bool,
}

impl MulticlassDiagnostics {
    pub fn correlations_csv(&self) -> String {
        let mut s = String::from("cluster,correlation,kappa,satisfied\n");
        for (c, r) in self.correlations.iter().enumerate() {
            let _ = writeln!(s, "{c},{r},{},{}", self.kappa, *r >= self.kappa);
        }
        s
    }

    pub fn eigen_csv(&self) -> String {
        let mut s = String::from("component_first_vertex,component_size,index,eigenvalue,residual\n");
        for cs in &self.solves {
            for (k, (l, r)) in cs.eigenvalues.iter().zip(&cs.residuals).enumerate() {
                let _ = writeln!(s, "{},{},{k},{l},{r}", cs.first_vertex, cs.size);
            }
        }
        s
    }
}

pub fn multiclass_ncut_with_priors(g: &SparseAffinity, priors: &PriorSet, kappa: f64) -> Result<CutResult> {
    multiclass_ncut_with_priors_diag(g, priors, kappa, &EigenOptions::default()).map(|(r, _)| r)
}

struct Agreement {
    dot: Vec<f64>,
    out_sq: Vec<f64>,
    prior_sq: Vec<f64>,
}

impl Agreement {
    fn new(c: usize) -> Self {
        Self {
            dot: vec![0.0; c],
            out_sq: vec![0.0; c],
            prior_sq: vec![0.0; c],
        }
    }

    /// Adds one component's projections; `basis` rows are eigenvector rows.
    fn add_projected(&mut self, basis: &[Vec<f64>], sqrt_deg: &[f64], labels: &[usize], prior: &[Option<usize>], present: &[usize]) {
        let dims = basis.len();
        for &c in present {
            let mut a = vec![0.0; dims];
            let mut b = vec![0.0; dims];
            for (i, &l) in labels.iter().enumerate() {
                let is_out = l == c;
                let is_prior = prior[i] == Some(c);
                if !(is_out || is_prior) {
                    continue;
                }
                for (k, v) in basis.iter().enumerate() {
                    let t = sqrt_deg[i] * v[i];
                    if is_out {
                        a[k] += t;
                    }
                    if is_prior {
                        b[k] += t;
                    }
                }
            }
            self.dot[c] += a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>();
            self.out_sq[c] += a.iter().map(|x| x * x).sum::<f64>();
            self.prior_sq[c] += b.iter().map(|x| x * x).sum::<f64>();
        }
    }

    /// Unprojected contribution, for components solved without an eigenbasis.
    fn add_identity(&mut self, degrees: &[f64], labels: &[usize], prior: &[Option<usize>]) {
        for (i, &l) in labels.iter().enumerate() {
            let d = degrees[i];
            self.out_sq[l] += d;
            if let Some(p) = prior[i] {
                self.prior_sq[p] += d;
                if p == l {
                    self.dot[l] += d;
                }
            }
        }
    }

    fn finish(self) -> Vec<f64> {
        (0..self.dot.len())
            .map(|c| {
                let den = (self.out_sq[c] * self.prior_sq[c]).sqrt();
                if den > 0.0 {
                    (self.dot[c] / den).clamp(-1.0, 1.0)
                } else {
                    1.0
                }
            })
            .collect()
    }
}

pub fn multiclass_ncut_with_priors_diag(
    g: &SparseAffinity,
    priors: &PriorSet,
    kappa: f64,
    opts: &EigenOptions,
) -> Result<(CutResult, MulticlassDiagnostics)> {
    let n = g.n();
    let c_total = priors.len();
    if !(kappa > 0.0 && kappa <= 1.0) {
        return Err(Error::invalid(format!("kappa must lie in (0, 1], got {kappa}")));
    }
    if c_total == 0 {
        return Err(Error::invalid("at least one prior cluster is required"));
    }
    if c_total >= n {
        return Err(Error::invalid(format!("{c_total} prior clusters for {n} vertices")));
    }
    // Re-validate in case the set was built by hand.
    let priors = PriorSet::new(priors.clusters.clone(), n)?;
    let prior = priors.vertex_labels(n);

    let mut labels = vec![usize::MAX; n];
    let mut agreement = Agreement::new(c_total);
    let mut diag = MulticlassDiagnostics {
        kappa,
        ..Default::default()
    };

    for comp in g.components() {
        let mut present: Vec<usize> = comp.iter().filter_map(|&i| prior[i]).collect();
        present.sort_unstable();
        present.dedup();
        let local_prior: Vec<Option<usize>> = comp.iter().map(|&i| prior[i]).collect();
        let local_deg: Vec<f64> = comp.iter().map(|&i| g.degree(i)).collect();
        match present.len() {
            0 => {
                return Err(Error::invalid(format!(
                    "connected component containing vertex {} has no prior points",
                    comp[0]
                )))
            }
            1 => {
                let c = present[0];
                comp.iter().for_each(|&i| labels[i] = c);
                let local = vec![c; comp.len()];
                let vol: f64 = local_deg.iter().sum();
                if vol > 0.0 {
                    let basis = vec![local_deg.iter().map(|d| d.sqrt() / vol.sqrt()).collect::<Vec<_>>()];
                    let sqrt_deg: Vec<f64> = local_deg.iter().map(|d| d.sqrt()).collect();
                    agreement.add_projected(&basis, &sqrt_deg, &local, &local_prior, &present);
                }
            }
            _ if local_prior.iter().all(Option::is_some) => {
                let local: Vec<usize> = local_prior.iter().map(|p| p.unwrap()).collect();
                comp.iter().zip(&local).for_each(|(&i, &c)| labels[i] = c);
                agreement.add_identity(&local_deg, &local, &local_prior);
            }
            c_comp => {
                let sub = subgraph(g, &comp)?;
                let m = comp.len();
                // Trivial vector + c_comp embedding vectors + one to test the gap.
                let k = (c_comp + 2).min(m - 1);
                let solve = solve_smallest(&sub.graph, k, opts)?;
                if !solve.converged {
                    warn!(
                        "eigensolve on component of {m} vertices stopped after {} operator applications (residual {:.2e})",
                        solve.matvecs,
                        solve.pairs.max_residual()
                    );
                }
                let vals = &solve.pairs.values;
                let mut dims = c_comp.min(k - 1);
                if dims + 1 < k && vals[dims + 1] - vals[dims] < DEGENERATE_GAP {
                    dims += 1;
                }
                let basis = &solve.pairs.vectors[..=dims];
                let sqrt_deg: Vec<f64> = local_deg.iter().map(|d| d.sqrt()).collect();
                let rows: Vec<Vec<f64>> = (0..m)
                    .map(|i| basis[1..].iter().map(|v| v[i] / sqrt_deg[i]).collect())
                    .collect();
                let (local, iters) = seeded_kmeans(&rows, &local_prior, &present);
                diag.kmeans_iterations = diag.kmeans_iterations.max(iters);
                comp.iter().zip(&local).for_each(|(&i, &c)| labels[i] = c);
                agreement.add_projected(basis, &sqrt_deg, &local, &local_prior, &present);
                diag.solves.push(ComponentSolve {
                    first_vertex: comp[0],
                    size: m,
                    eigenvalues: solve.pairs.values.clone(),
                    residuals: solve.pairs.residuals.clone(),
                    converged: solve.converged,
                });
            }
        }
    }

    diag.correlations = agreement.finish();
    diag.violations = (0..c_total).filter(|&c| diag.correlations[c] < kappa).collect();
    if !diag.violations.is_empty() {
        warn!(
            "{} of {c_total} clusters fall below the prior correlation threshold {kappa}",
            diag.violations.len()
        );
    }
    let result = CutResult {
        ncut_energy: ncut_energy(g, &labels, c_total),
        labels,
        clusters: c_total,
    };
    Ok((result, diag))
}

/// Nearest-centroid iterations where seeded rows keep their label. Ties go to
/// the lower cluster id. Returns labels and the number of sweeps.
fn seeded_kmeans(rows: &[Vec<f64>], prior: &[Option<usize>], present: &[usize]) -> (Vec<usize>, usize) {
    let dims = rows.first().map_or(0, Vec::len);
    let centroid_of = |labels: &[Option<usize>], c: usize| -> Vec<f64> {
        let mut s = vec![0.0; dims];
        let mut count = 0usize;
        for (row, l) in rows.iter().zip(labels) {
            if *l == Some(c) {
                s.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                count += 1;
            }
        }
        s.iter_mut().for_each(|a| *a /= count as f64);
        s
    };
    let mut centroids: Vec<Vec<f64>> = present.iter().map(|&c| centroid_of(prior, c)).collect();
    let mut current: Vec<Option<usize>> = prior.to_vec();
    let mut sweeps = 0;
    for _ in 0..MAX_KMEANS_ITERS {
        sweeps += 1;
        let mut changed = false;
        for (i, row) in rows.iter().enumerate() {
            if prior[i].is_some() {
                continue;
            }
            let mut best = (f64::INFINITY, 0usize);
            for (k, mu) in centroids.iter().enumerate() {
                let d: f64 = row.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.0 {
                    best = (d, k);
                }
            }
            let label = Some(present[best.1]);
            if current[i] != label {
                current[i] = label;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        centroids = present.iter().map(|&c| centroid_of(&current, c)).collect();
    }
    (current.into_iter().map(|l| l.expect("every vertex assigned")).collect(), sweeps)
}
