//! Smallest eigenpairs of the normalized Laplacian `I - D^{-1/2} W D^{-1/2}`.
//!
//! The solver works on the shifted operator `B = I + D^{-1/2} W D^{-1/2} = 2I - L`,
//! whose largest eigenvalues are the smallest of `L`. It is a thick-restart
//! (Krylov-Schur) Lanczos iteration with full reorthogonalization:
//!
//! * the known null vector `D^{1/2} 1` is locked up front and every Krylov
//!   vector is kept orthogonal to it;
//! * on breakdown (an invariant subspace) the basis continues with a fresh
//!   random vector, so repeated eigenvalues are not lost;
//! * once the wanted pairs converge they are locked and a one-vector search
//!   in their complement checks for an eigenvalue the Krylov space missed.
//!
//! All reductions use fixed-size chunks, so results do not depend on the
//! number of worker threads.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::SparseAffinity;

const CHUNK: usize = 4096;
const BREAKDOWN: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenOptions {
    /// Convergence threshold on the residual norm `|Lx - lambda x|`.
    pub tol: f64,
    /// Budget of operator applications across the whole solve.
    pub max_matvecs: usize,
    /// Krylov basis size; `None` picks one from the number of wanted pairs.
    pub basis: Option<usize>,
    pub seed: u64,
    /// Run the missed-eigenvalue check when more than one nontrivial pair is wanted.
    pub verify: bool,
}

impl Default for EigenOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_matvecs: 200_000,
            basis: None,
            seed: 0x5eed,
            verify: true,
        }
    }
}

impl EigenOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            tol,
            ..Self::default()
        }
    }
}

/// Ascending eigenvalues of the normalized Laplacian with orthonormal
/// eigenvectors and their residual norms.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenPairs {
    pub values: Vec<f64>,
    pub vectors: Vec<Vec<f64>>,
    pub residuals: Vec<f64>,
}

impl EigenPairs {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().copied().fold(0.0, f64::max)
    }
}

/// Result of a solve that may have run out of budget.
#[derive(Debug, Clone)]
pub struct EigenSolve {
    pub pairs: EigenPairs,
    pub converged: bool,
    pub matvecs: usize,
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    if a.len() <= CHUNK {
        return a.iter().zip(b).map(|(x, y)| x * y).sum();
    }
    let partial: Vec<f64> = a
        .par_chunks(CHUNK)
        .zip(b.par_chunks(CHUNK))
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| u * v).sum::<f64>())
        .collect();
    partial.iter().sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn scale(a: &mut [f64], s: f64) {
    a.par_iter_mut().with_min_len(CHUNK).for_each(|v| *v *= s);
}

/// `w -= sum_i c_i basis_i` for the coefficients `c = basis^T w`; returns `c`.
fn project_out(basis: &[&[f64]], w: &mut [f64]) -> Vec<f64> {
    if basis.is_empty() {
        return Vec::new();
    }
    let coeffs: Vec<f64> = basis.iter().map(|b| dot(b, w)).collect();
    w.par_iter_mut()
        .with_min_len(CHUNK)
        .enumerate()
        .for_each(|(r, wr)| {
            let mut acc = 0.0;
            for (b, c) in basis.iter().zip(&coeffs) {
                acc += c * b[r];
            }
            *wr -= acc;
        });
    coeffs
}

/// Two rounds of classical Gram-Schmidt; returns the summed coefficients.
fn orthogonalize(locked: &[Vec<f64>], basis: &[Vec<f64>], w: &mut [f64]) -> Vec<f64> {
    let lk: Vec<&[f64]> = locked.iter().map(Vec::as_slice).collect();
    let bs: Vec<&[f64]> = basis.iter().map(Vec::as_slice).collect();
    let mut total = vec![0.0; basis.len()];
    for _ in 0..2 {
        project_out(&lk, w);
        let c = project_out(&bs, w);
        total.iter_mut().zip(c).for_each(|(t, c)| *t += c);
    }
    total
}

/// Lanczos step orthogonalization of `w = B v_j` against `basis[..=j]`.
///
/// The three-term part (`v_j`, and `v_{j-1}` inside the unrestarted stretch)
/// is removed first; one classical Gram-Schmidt sweep then cleans up rounding,
/// with a second sweep only if that sweep removed a noticeable share of `w`.
fn reorthogonalize_step(locked: &[Vec<f64>], basis: &[Vec<f64>], kept: usize, w: &mut [f64]) -> Vec<f64> {
    let j = basis.len() - 1;
    let mut total = vec![0.0; basis.len()];
    let local: Vec<usize> = if j > kept { vec![j - 1, j] } else { vec![j] };
    for &i in &local {
        let c = dot(&basis[i], w);
        axpy(-c, &basis[i], w);
        total[i] += c;
    }
    let lk: Vec<&[f64]> = locked.iter().map(Vec::as_slice).collect();
    let bs: Vec<&[f64]> = basis.iter().map(Vec::as_slice).collect();
    for _ in 0..2 {
        let before = norm(w);
        project_out(&lk, w);
        let c = project_out(&bs, w);
        total.iter_mut().zip(c).for_each(|(t, c)| *t += c);
        if norm(w) > std::f64::consts::FRAC_1_SQRT_2 * before {
            break;
        }
    }
    total
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    y.par_iter_mut()
        .with_min_len(CHUNK)
        .zip(x.par_iter())
        .for_each(|(y, x)| *y += a * x);
}

struct ShiftedOperator<'a> {
    graph: &'a SparseAffinity,
    inv_sqrt_deg: Vec<f64>,
}

impl ShiftedOperator<'_> {
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.graph.shifted_normalized_apply(&self.inv_sqrt_deg, x, y);
    }

    fn n(&self) -> usize {
        self.inv_sqrt_deg.len()
    }
}

fn random_unit_in_complement(
    rng: &mut ChaCha8Rng,
    n: usize,
    locked: &[Vec<f64>],
    basis: &[Vec<f64>],
) -> Option<Vec<f64>> {
    for _ in 0..8 {
        let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        orthogonalize(locked, basis, &mut v);
        let nv = norm(&v);
        if nv > 1e-8 {
            scale(&mut v, 1.0 / nv);
            return Some(v);
        }
    }
    None
}

struct KrylovOutcome {
    thetas: Vec<f64>,
    vectors: Vec<Vec<f64>>,
    converged: bool,
}

/// Largest `want` eigenpairs of `op` restricted to the orthogonal complement
/// of `locked` (orthonormal, invariant under `op`).
fn krylov_schur(
    op: &ShiftedOperator,
    locked: &[Vec<f64>],
    want: usize,
    opts: &EigenOptions,
    rng: &mut ChaCha8Rng,
    matvecs: &mut usize,
) -> KrylovOutcome {
    let n = op.n();
    let free = n - locked.len();
    let want = want.min(free);
    if want == 0 {
        return KrylovOutcome {
            thetas: Vec::new(),
            vectors: Vec::new(),
            converged: true,
        };
    }
    let m = opts
        .basis
        .unwrap_or_else(|| (2 * want + 20).max(want + 30))
        .max(want + 2)
        .min(free);

    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m + 1);
    let Some(start) = random_unit_in_complement(rng, n, locked, &basis) else {
        return KrylovOutcome {
            thetas: Vec::new(),
            vectors: Vec::new(),
            converged: true,
        };
    };
    basis.push(start);
    let mut h = DMatrix::<f64>::zeros(m, m);
    let mut kept = 0usize;
    let mut w = vec![0.0; n];

    loop {
        // Expand the basis to m vectors; basis[m] (if any) is the residual direction.
        let mut beta = 0.0;
        for j in kept..m {
            op.apply(&basis[j], &mut w);
            *matvecs += 1;
            let coeffs = reorthogonalize_step(locked, &basis[..=j], kept, &mut w);
            for (i, c) in coeffs.iter().enumerate() {
                h[(i, j)] = *c;
                h[(j, i)] = *c;
            }
            beta = norm(&w);
            if j + 1 == m {
                break;
            }
            if beta < BREAKDOWN {
                // Invariant subspace: continue with a fresh direction, zero coupling.
                beta = 0.0;
                match random_unit_in_complement(rng, n, locked, &basis) {
                    Some(v) => basis.push(v),
                    None => break,
                }
            } else {
                let mut v = w.clone();
                scale(&mut v, 1.0 / beta);
                basis.push(v);
            }
        }
        let size = basis.len().min(m);
        let hm = h.view((0, 0), (size, size)).into_owned();
        let eig = SymmetricEigen::new(hm);
        let mut order: Vec<usize> = (0..size).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

        let take = want.min(size);
        let residual_of = |col: usize| (beta * eig.eigenvectors[(size - 1, col)]).abs();
        let converged = order[..take].iter().all(|&col| residual_of(col) <= 0.5 * opts.tol) && take == want;
        let out_of_budget = *matvecs >= opts.max_matvecs;
        let full_space = size == free && beta < BREAKDOWN;

        if converged || out_of_budget || full_space || size < m {
            let vectors = combine(&basis[..size], &eig.eigenvectors, &order[..take]);
            return KrylovOutcome {
                thetas: order[..take].iter().map(|&col| eig.eigenvalues[col]).collect(),
                vectors,
                converged: converged || full_space || size < m,
            };
        }

        // Thick restart: keep the leading Ritz vectors plus the residual direction.
        let keep = (want + (m - want) / 2).min(m - 1).max(want);
        let mut next = combine(&basis[..size], &eig.eigenvectors, &order[..keep]);
        h.fill(0.0);
        for (i, &col) in order[..keep].iter().enumerate() {
            h[(i, i)] = eig.eigenvalues[col];
        }
        let mut residual = w.clone();
        scale(&mut residual, 1.0 / beta);
        // Re-orthogonalize against the rotated basis to absorb rounding drift.
        orthogonalize(locked, &next, &mut residual);
        let rn = norm(&residual);
        scale(&mut residual, 1.0 / rn);
        next.push(residual);
        basis = next;
        kept = keep;
    }
}

/// Normalized Ritz vectors `basis * y[:, col]` for each listed column, built
/// in one sweep over row blocks so the basis is streamed from memory once.
fn combine(basis: &[Vec<f64>], y: &DMatrix<f64>, cols: &[usize]) -> Vec<Vec<f64>> {
    const ROWS: usize = 512;
    let n = basis[0].len();
    let mut out: Vec<Vec<f64>> = vec![vec![0.0; n]; cols.len()];
    let blocks: Vec<(usize, Vec<Vec<f64>>)> = (0..n.div_ceil(ROWS))
        .into_par_iter()
        .map(|b| {
            let lo = b * ROWS;
            let hi = (lo + ROWS).min(n);
            let mut acc = vec![vec![0.0; hi - lo]; cols.len()];
            for (i, v) in basis.iter().enumerate() {
                let seg = &v[lo..hi];
                for (a, &col) in acc.iter_mut().zip(cols) {
                    let c = y[(i, col)];
                    a.iter_mut().zip(seg).for_each(|(a, s)| *a += c * s);
                }
            }
            (lo, acc)
        })
        .collect();
    for (lo, acc) in blocks {
        for (o, a) in out.iter_mut().zip(acc) {
            o[lo..lo + a.len()].copy_from_slice(&a);
        }
    }
    for o in &mut out {
        let nv = norm(o);
        scale(o, 1.0 / nv);
    }
    out
}

/// Makes the largest-magnitude entry positive (first index on ties).
fn canonical_sign(v: &mut [f64]) {
    let mut best = 0usize;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// The `k` smallest eigenpairs, without failing on an exhausted budget.
pub fn solve_smallest(g: &SparseAffinity, k: usize, opts: &EigenOptions) -> Result<EigenSolve> {
    let n = g.n();
    if k == 0 || k >= n {
        return Err(Error::invalid(format!("need 0 < k < n, got k = {k}, n = {n}")));
    }
    if let Some(i) = g.degrees().iter().position(|&d| !(d > 0.0)) {
        return Err(Error::invalid(format!("vertex {i} is isolated (degree 0)")));
    }
    let op = ShiftedOperator {
        graph: g,
        inv_sqrt_deg: g.degrees().iter().map(|d| 1.0 / d.sqrt()).collect(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut matvecs = 0usize;
    let started = std::time::Instant::now();

    let mut trivial: Vec<f64> = g.degrees().iter().map(|d| d.sqrt()).collect();
    let tn = norm(&trivial);
    scale(&mut trivial, 1.0 / tn);
    let mut locked = vec![trivial];
    let mut thetas = vec![2.0];

    let mut converged = true;
    if k > 1 {
        let out = krylov_schur(&op, &locked, k - 1, opts, &mut rng, &mut matvecs);
        converged &= out.converged;
        locked.extend(out.vectors);
        thetas.extend(out.thetas);

        if opts.verify && k > 2 && converged && locked.len() < n {
            // A Krylov space built from one start vector sees a single copy of a
            // repeated eigenvalue; look for anything better in the complement.
            for _ in 0..k {
                let probe = krylov_schur(&op, &locked, 1, opts, &mut rng, &mut matvecs);
                let (Some(&theta), Some(vec)) = (probe.thetas.first(), probe.vectors.into_iter().next()) else {
                    break;
                };
                let (worst, &worst_theta) = thetas
                    .iter()
                    .enumerate()
                    .skip(1)
                    .min_by(|a, b| a.1.total_cmp(b.1))
                    .unwrap();
                if theta <= worst_theta + opts.tol.max(1e-12) {
                    break;
                }
                thetas[worst] = theta;
                locked[worst] = vec;
                converged &= probe.converged;
                // The replaced vector is no longer orthogonal-complement-safe; re-run cleanly.
                reorthonormalize(&mut locked);
            }
        }
    }

    let mut w = vec![0.0; n];
    let mut pairs: Vec<(f64, Vec<f64>, f64)> = locked
        .into_iter()
        .zip(&thetas)
        .map(|(mut v, &theta)| {
            canonical_sign(&mut v);
            op.apply(&v, &mut w);
            let rq = 2.0 - dot(&v, &w);
            // L v - lambda v = 2v - Bv - lambda v
            let res = v
                .iter()
                .zip(&w)
                .map(|(vi, bi)| {
                    let r = 2.0 * vi - bi - rq * vi;
                    r * r
                })
                .sum::<f64>()
                .sqrt();
            let _ = theta;
            (rq.max(0.0), v, res)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // The trivial pair has eigenvalue exactly 0.
    if let Some(first) = pairs.first_mut() {
        if first.0.abs() < 1e-12 {
            first.0 = first.0.abs();
        }
    }
    let max_res = pairs.iter().map(|p| p.2).fold(0.0, f64::max);
    converged &= max_res <= opts.tol;
    log::debug!(
        "eigensolve n={n} k={k} matvecs={matvecs} max_residual={max_res:.2e} converged={converged} secs={:.3}",
        started.elapsed().as_secs_f64()
    );
    let (values, rest): (Vec<f64>, Vec<(Vec<f64>, f64)>) = pairs.into_iter().map(|(l, v, r)| (l, (v, r))).unzip();
    let (vectors, residuals) = rest.into_iter().unzip();
    Ok(EigenSolve {
        pairs: EigenPairs {
            values,
            vectors,
            residuals,
        },
        converged,
        matvecs,
    })
}

fn reorthonormalize(vs: &mut [Vec<f64>]) {
    for i in 0..vs.len() {
        let (done, rest) = vs.split_at_mut(i);
        let v = &mut rest[0];
        for _ in 0..2 {
            let refs: Vec<&[f64]> = done.iter().map(Vec::as_slice).collect();
            project_out(&refs, v);
        }
        let nv = norm(v);
        scale(v, 1.0 / nv);
    }
}

/// The `k` smallest eigenpairs of the normalized Laplacian, residual at most `tol`.
pub fn smallest_eigenpairs(g: &SparseAffinity, k: usize, tol: f64) -> Result<EigenPairs> {
    smallest_eigenpairs_with(g, k, &EigenOptions::with_tol(tol))
}

pub fn smallest_eigenpairs_with(g: &SparseAffinity, k: usize, opts: &EigenOptions) -> Result<EigenPairs> {
    let solve = solve_smallest(g, k, opts)?;
    if !solve.converged {
        return Err(Error::NonConvergence {
            matvecs: solve.matvecs,
            max_residual: solve.pairs.max_residual(),
        });
    }
    Ok(solve.pairs)
}
