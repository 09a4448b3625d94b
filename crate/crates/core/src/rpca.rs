//! Robust PCA: `M = L + S` with `L` low rank and `S` sparse, by ADMM on
//! `min |L|_* + lambda |S|_1  s.t.  L + S = M` with a fixed penalty.
//!
//! Principal-component score rasters are then taken from the SVD of the
//! (uncentered) low-rank part.

use std::ops::RangeInclusive;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::raster::{GridGeometry, RasterGrid};

/// Matrices with both dimensions at least this large use the Gram route for SVDs.
const DENSE_SVD_LIMIT: usize = 1000;

#[derive(Debug, Clone)]
pub struct RpcaResult {
    pub low_rank: DMatrix<f64>,
    pub sparse: DMatrix<f64>,
    pub iterations: usize,
    /// `|M - L - S|_F` at exit.
    pub primal_residual: f64,
    pub converged: bool,
    /// `|L|_* + lambda |S|_1` after each iteration.
    pub objective: Vec<f64>,
    /// `rho |S_k+1 - S_k|_F^2 + |Y_k+1 - Y_k|_F^2 / rho` after each iteration;
    /// non-increasing for fixed-penalty two-block ADMM.
    pub merit: Vec<f64>,
}

pub fn default_lambda(rows: usize, cols: usize) -> f64 {
    1.0 / (rows.max(cols) as f64).sqrt()
}

fn soft(x: f64, t: f64) -> f64 {
    x.signum() * (x.abs() - t).max(0.0)
}

/// Thin SVD `(U, sigma, V)` with singular values descending.
pub(crate) fn thin_svd(a: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let (m, n) = a.shape();
    if m.min(n) == 0 {
        return (DMatrix::zeros(m, 0), Vec::new(), DMatrix::zeros(n, 0));
    }
    if m.max(n) < DENSE_SVD_LIMIT {
        let svd = a.clone().svd(true, true);
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]).then(i.cmp(&j)));
        let u = svd.u.expect("requested U");
        let vt = svd.v_t.expect("requested V^T");
        let us = DMatrix::from_fn(m, order.len(), |r, k| u[(r, order[k])]);
        let vs = DMatrix::from_fn(n, order.len(), |r, k| vt[(order[k], r)]);
        let s = order.iter().map(|&k| svd.singular_values[k]).collect();
        return (us, s, vs);
    }
    // Eigen-decompose the small Gram matrix and recover the other factor.
    let tall = m >= n;
    let gram = if tall { a.tr_mul(a) } else { a * a.transpose() };
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let top = eig.eigenvalues[order[0]].max(0.0).sqrt();
    let floor = top * 1e-7;
    let keep: Vec<usize> = order.into_iter().filter(|&k| eig.eigenvalues[k].max(0.0).sqrt() > floor).collect();
    let s: Vec<f64> = keep.iter().map(|&k| eig.eigenvalues[k].sqrt()).collect();
    let small = DMatrix::from_fn(eig.eigenvectors.nrows(), keep.len(), |r, k| eig.eigenvectors[(r, keep[k])]);
    let mut other = if tall { a * &small } else { a.tr_mul(&small) };
    for (k, sk) in s.iter().enumerate() {
        other.column_mut(k).scale_mut(1.0 / sk);
    }
    if tall {
        (other, s, small)
    } else {
        (small, s, other)
    }
}

/// Singular-value thresholding; returns the result and its nuclear norm.
fn svt(a: &DMatrix<f64>, t: f64) -> (DMatrix<f64>, f64) {
    let (u, s, v) = thin_svd(a);
    let kept: Vec<(usize, f64)> = s
        .iter()
        .enumerate()
        .map(|(k, &sk)| (k, sk - t))
        .filter(|&(_, sk)| sk > 0.0)
        .collect();
    let mut out = DMatrix::zeros(a.nrows(), a.ncols());
    for &(k, sk) in &kept {
        out.ger(sk, &u.column(k), &v.column(k), 1.0);
    }
    (out, kept.iter().map(|p| p.1).sum())
}

pub fn rpca(m: &DMatrix<f64>, lambda: f64, tol: f64, max_iter: usize) -> Result<RpcaResult> {
    if let Some(k) = m.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!(
            "matrix entry ({}, {}) is not finite",
            k % m.nrows(),
            k / m.nrows()
        )));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!("lambda must be > 0, got {lambda}")));
    }
    if !(tol > 0.0) || max_iter == 0 {
        return Err(Error::invalid("tol must be > 0 and max_iter >= 1"));
    }
    let (rows, cols) = m.shape();
    let l1: f64 = m.iter().map(|v| v.abs()).sum();
    if l1 == 0.0 {
        return Ok(RpcaResult {
            low_rank: DMatrix::zeros(rows, cols),
            sparse: DMatrix::zeros(rows, cols),
            iterations: 1,
            primal_residual: 0.0,
            converged: true,
            objective: vec![0.0],
            merit: vec![0.0],
        });
    }
    let rho = 0.25 * (rows * cols) as f64 / l1;
    let m_norm = m.norm();
    let mut s = DMatrix::<f64>::zeros(rows, cols);
    let mut y = DMatrix::<f64>::zeros(rows, cols);
    let mut l = DMatrix::<f64>::zeros(rows, cols);
    let mut objective = Vec::new();
    let mut merit = Vec::new();
    let mut residual = m_norm;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        iterations += 1;
        let (l_next, nuclear) = svt(&(m - &s + &y / rho), 1.0 / rho);
        l = l_next;
        let mut s_next = m - &l + &y / rho;
        s_next
            .as_mut_slice()
            .par_iter_mut()
            .with_min_len(4096)
            .for_each(|v| *v = soft(*v, lambda / rho));
        let r = m - &l - &s_next;
        let dy = &r * rho;
        let ds = &s_next - &s;
        merit.push(rho * ds.norm_squared() + dy.norm_squared() / rho);
        y += dy;
        s = s_next;
        residual = r.norm();
        objective.push(nuclear + lambda * s.iter().map(|v| v.abs()).sum::<f64>());
        if residual <= tol * m_norm {
            converged = true;
            break;
        }
    }
    Ok(RpcaResult {
        low_rank: l,
        sparse: s,
        iterations,
        primal_residual: residual,
        converged,
        objective,
        merit,
    })
}

/// Numerical rank: singular values above `max(m, n) * eps * sigma_max`.
pub fn numerical_rank(singular_values: &[f64], rows: usize, cols: usize) -> usize {
    let Some(&top) = singular_values.first() else {
        return 0;
    };
    let floor = rows.max(cols) as f64 * f64::EPSILON * top;
    singular_values.iter().filter(|&&s| s > floor && s > 0.0).count()
}

/// Score rasters (`U_k sigma_k`) of the requested 1-based components of `l`,
/// whose rows are pixels in `geometry` index order.
pub fn pc_score_rasters(l: &DMatrix<f64>, components: RangeInclusive<usize>, geometry: &GridGeometry) -> Result<Vec<RasterGrid>> {
    if l.nrows() != geometry.len() {
        return Err(Error::GeometryMismatch(format!(
            "{} pixel rows for a {}x{} grid",
            l.nrows(),
            geometry.width,
            geometry.height
        )));
    }
    let (first, last) = (*components.start(), *components.end());
    if first == 0 || first > last {
        return Err(Error::invalid(format!("invalid component range {first}..={last}")));
    }
    let (u, s, _) = thin_svd(l);
    let rank = numerical_rank(&s, l.nrows(), l.ncols());
    if last > rank {
        return Err(Error::RankDeficient { rank, component: last });
    }
    (first..=last)
        .map(|c| {
            let k = c - 1;
            let mut col: Vec<f64> = u.column(k).iter().map(|v| v * s[k]).collect();
            // Fix the sign so the largest-magnitude score is positive.
            let pivot = col
                .iter()
                .enumerate()
                .fold(0, |b, (i, v)| if v.abs() > col[b].abs() { i } else { b });
            if col[pivot] < 0.0 {
                col.iter_mut().for_each(|v| *v = -*v);
            }
            RasterGrid::from_values(*geometry, col.into_iter().map(Some).collect())
        })
        .collect()
}

/// Pixels x bands matrix from co-registered band rasters (row-major cells).
pub fn stack_to_matrix(bands: &[RasterGrid]) -> Result<DMatrix<f64>> {
    let Some(first) = bands.first() else {
        return Err(Error::invalid("no bands given"));
    };
    if let Some(b) = bands.iter().position(|b| !b.same_geometry(first)) {
        return Err(Error::GeometryMismatch(format!("band {b} differs from band 0")));
    }
    let mut m = DMatrix::zeros(first.len(), bands.len());
    for (j, band) in bands.iter().enumerate() {
        for (p, v) in band.iter().enumerate() {
            let v = v.ok_or_else(|| Error::invalid(format!("band {j} has no data at cell {p}")))?;
            m[(p, j)] = v;
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn low_rank(rows: usize, cols: usize, rank: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(rows, rank, |_, _| rng.sample::<f64, _>(StandardNormal));
        let b = DMatrix::from_fn(rank, cols, |_, _| rng.sample::<f64, _>(StandardNormal));
        a * b
    }

    #[test]
    fn zero_matrix() {
        let r = rpca(&DMatrix::zeros(5, 4), 0.5, 1e-7, 100).unwrap();
        assert_eq!(r.iterations, 1);
        assert_eq!(r.low_rank, DMatrix::zeros(5, 4));
        assert_eq!(r.sparse, DMatrix::zeros(5, 4));
    }

    #[test]
    fn clean_rank_one_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = low_rank(40, 25, 1, &mut rng);
        let r = rpca(&m, default_lambda(40, 25), 1e-9, 1000).unwrap();
        assert!(r.converged);
        assert!((&r.low_rank - &m).norm() / m.norm() < 1e-6);
        assert!(r.sparse.norm() / m.norm() < 1e-6);
    }

    #[test]
    fn corrupted_low_rank_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let l0 = low_rank(100, 40, 2, &mut rng);
        let mut m = l0.clone();
        for v in m.iter_mut() {
            if rng.random_bool(0.05) {
                *v += if rng.random_bool(0.5) { 10.0 } else { -10.0 };
            }
        }
        let r = rpca(&m, default_lambda(100, 40), 1e-8, 500).unwrap();
        assert!(r.converged);
        assert!((&r.low_rank - &l0).norm() / l0.norm() < 1e-3);
        assert!(r.primal_residual <= 1e-8 * m.norm());
    }

    #[test]
    fn merit_sequence_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let mut m = low_rank(60, 20, 2, &mut rng);
            for v in m.iter_mut() {
                if rng.random_bool(0.05) {
                    *v += rng.random_range(-10.0..10.0);
                }
            }
            let r = rpca(&m, default_lambda(60, 20), 1e-9, 500).unwrap();
            for w in r.merit.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-9) + 1e-12, "{} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn scaling_is_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = low_rank(30, 12, 2, &mut rng) + DMatrix::from_fn(30, 12, |_, _| rng.random_range(-0.1..0.1));
        let a = rpca(&m, 0.2, 1e-8, 300).unwrap();
        let b = rpca(&(&m * 7.5), 0.2, 1e-8, 300).unwrap();
        assert_eq!(a.iterations, b.iterations);
        assert!((&a.low_rank * 7.5 - &b.low_rank).norm() <= 1e-9 * b.low_rank.norm());
        assert!((&a.sparse * 7.5 - &b.sparse).norm() <= 1e-9 * b.low_rank.norm());
    }

    #[test]
    fn rejects_bad_input() {
        let mut m = DMatrix::zeros(2, 2);
        m[(1, 0)] = f64::NAN;
        assert!(rpca(&m, 0.5, 1e-7, 10).is_err());
        assert!(rpca(&DMatrix::zeros(2, 2), 0.0, 1e-7, 10).is_err());
    }

    #[test]
    fn gram_svd_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = low_rank(1200, 6, 3, &mut rng);
        let (u, s, v) = thin_svd(&a);
        assert_eq!(s.len(), 3);
        let dense = a.clone().svd(false, false).singular_values;
        let mut dense: Vec<f64> = dense.iter().copied().collect();
        dense.sort_by(|x, y| y.total_cmp(x));
        for (x, y) in s.iter().zip(&dense) {
            assert!((x - y).abs() < 1e-8 * dense[0]);
        }
        let mut rebuilt = DMatrix::zeros(1200, 6);
        for k in 0..3 {
            rebuilt.ger(s[k], &u.column(k), &v.column(k), 1.0);
        }
        assert!((&rebuilt - &a).norm() < 1e-8 * a.norm());
    }

    #[test]
    fn score_rasters() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let geo = GridGeometry::new((0.0, 0.0), 1.0, 6, 5).unwrap();
        let l = low_rank(30, 8, 3, &mut rng);
        let r = pc_score_rasters(&l, 2..=3, &geo).unwrap();
        assert_eq!(r.len(), 2);
        let a: Vec<f64> = r[0].iter().map(Option::unwrap).collect();
        let b: Vec<f64> = r[1].iter().map(Option::unwrap).collect();
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(dot.abs() <= 1e-8 * na * nb);
        assert_eq!(pc_score_rasters(&l, 1..=1, &geo).unwrap().len(), 1);
        let rank2 = low_rank(30, 8, 2, &mut rng);
        let err = pc_score_rasters(&rank2, 2..=5, &geo).unwrap_err();
        assert_eq!(err.to_string(), "rank 2 < component 5");
    }

    #[test]
    fn stack_round_trip() {
        let geo = GridGeometry::new((0.0, 0.0), 1.0, 3, 2).unwrap();
        let a = RasterGrid::filled(geo, 1.0);
        let b = RasterGrid::filled(geo, 2.0);
        let m = stack_to_matrix(&[a, b]).unwrap();
        assert_eq!(m.shape(), (6, 2));
        assert_eq!(m[(4, 1)], 2.0);
    }
}
