//! Small dense factorizations: Householder QR, Jacobi eigen, one-sided Jacobi SVD.

use super::matrix::DenseMatrix;
use crate::error::{Error, Result};

const JACOBI_MAX_SWEEPS: usize = 100;

/// Thin Householder QR of a tall matrix, normalized so that `diag(r) ≥ 0`.
///
/// Columns whose sub-diagonal part is already zero are left unreflected, so
/// rank-deficient input simply produces zero diagonal entries in `r`.
pub fn qr_householder(m: &DenseMatrix) -> Result<(DenseMatrix, DenseMatrix)> {
    let (rows, cols) = (m.rows(), m.cols());
    if rows < cols {
        return Err(Error::InvalidArgument(format!(
            "thin QR needs rows >= cols, got {rows}x{cols}"
        )));
    }
    let mut a = m.clone();
    let mut reflectors: Vec<Option<Vec<f64>>> = Vec::with_capacity(cols);
    for j in 0..cols {
        let x: Vec<f64> = (j..rows).map(|i| a.get(i, j)).collect();
        let sub: f64 = x[1..].iter().map(|v| v * v).sum();
        if sub == 0.0 {
            reflectors.push(None);
            continue;
        }
        let norm = (x[0] * x[0] + sub).sqrt();
        let alpha = if x[0] >= 0.0 { -norm } else { norm };
        let mut v = x;
        v[0] -= alpha;
        let vv: f64 = v.iter().map(|t| t * t).sum();
        let tau = 2.0 / vv;
        for k in j..cols {
            let s: f64 = v.iter().enumerate().map(|(i, vi)| vi * a.get(j + i, k)).sum();
            let f = tau * s;
            for (i, vi) in v.iter().enumerate() {
                let cur = a.get(j + i, k);
                a.set(j + i, k, cur - f * vi);
            }
        }
        // Exact zeros below the pivot.
        a.set(j, j, alpha);
        for i in j + 1..rows {
            a.set(i, j, 0.0);
        }
        reflectors.push(Some(v));
    }

    let mut r = DenseMatrix::zeros(cols, cols);
    for i in 0..cols {
        for k in i..cols {
            r.set(i, k, a.get(i, k));
        }
    }

    // Q = H_0 ... H_{n-1} [I; 0]
    let mut q = DenseMatrix::zeros(rows, cols);
    for i in 0..cols {
        q.set(i, i, 1.0);
    }
    for (j, refl) in reflectors.iter().enumerate().rev() {
        let Some(v) = refl else { continue };
        let vv: f64 = v.iter().map(|t| t * t).sum();
        let tau = 2.0 / vv;
        for k in 0..cols {
            let s: f64 = v.iter().enumerate().map(|(i, vi)| vi * q.get(j + i, k)).sum();
            let f = tau * s;
            for (i, vi) in v.iter().enumerate() {
                let cur = q.get(j + i, k);
                q.set(j + i, k, cur - f * vi);
            }
        }
    }

    for j in 0..cols {
        if r.get(j, j) < 0.0 {
            for k in j..cols {
                r.set(j, k, -r.get(j, k));
            }
            for i in 0..rows {
                q.set(i, j, -q.get(i, j));
            }
        }
    }
    Ok((q, r))
}

/// Flop count of a Householder QR of a `rows × cols` matrix (`2dn² − 2n³/3`).
pub fn householder_qr_flops(rows: usize, cols: usize) -> f64 {
    let (d, n) = (rows as f64, cols as f64);
    2.0 * d * n * n - 2.0 * n * n * n / 3.0
}

fn rotation(app: f64, aqq: f64, apq: f64) -> (f64, f64) {
    let tau = (aqq - app) / (2.0 * apq);
    let t = if tau >= 0.0 {
        1.0 / (tau + (1.0 + tau * tau).sqrt())
    } else {
        -1.0 / (-tau + (1.0 + tau * tau).sqrt())
    };
    let c = 1.0 / (1.0 + t * t).sqrt();
    (c, t * c)
}

fn rotate_columns(m: &mut DenseMatrix, p: usize, q: usize, c: f64, s: f64) {
    for k in 0..m.rows() {
        let (mp, mq) = (m.get(k, p), m.get(k, q));
        m.set(k, p, c * mp - s * mq);
        m.set(k, q, s * mp + c * mq);
    }
}

/// Eigenpairs of a symmetric matrix by cyclic Jacobi rotations.
///
/// Eigenvalues come back in descending order; each eigenvector is signed so
/// its largest-magnitude entry is positive.
pub fn dense_eig_symmetric(m: &DenseMatrix) -> Result<(Vec<f64>, DenseMatrix)> {
    let n = m.rows();
    if m.cols() != n {
        return Err(Error::InvalidArgument(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    let scale = m.max_abs().max(1.0);
    let mut asym = 0.0f64;
    for i in 0..n {
        for j in i + 1..n {
            asym = asym.max((m.get(i, j) - m.get(j, i)).abs());
        }
    }
    if asym > 1e-12 * scale {
        return Err(Error::NotSymmetric(asym));
    }

    let mut a = m.clone();
    let mut v = DenseMatrix::identity(n);
    let fro = m.frobenius_norm();
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a.get(i, j) * a.get(i, j))
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * fro {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let (c, s) = rotation(a.get(p, p), a.get(q, q), apq);
                rotate_columns(&mut a, p, q, c, s);
                // Row update (Jᵀ A) mirrors the column update.
                for k in 0..n {
                    let (ap, aq) = (a.get(p, k), a.get(q, k));
                    a.set(p, k, c * ap - s * aq);
                    a.set(q, k, s * ap + c * aq);
                }
                a.set(p, q, 0.0);
                a.set(q, p, 0.0);
                rotate_columns(&mut v, p, q, c, s);
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.get(j, j).total_cmp(&a.get(i, i)));
    let values: Vec<f64> = order.iter().map(|&i| a.get(i, i)).collect();
    let mut vectors = DenseMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = v.column(src);
        canonical_sign(&mut col);
        vectors.set_column(dst, &col);
    }
    Ok((values, vectors))
}

fn canonical_sign(col: &mut [f64]) {
    let lead = col
        .iter()
        .copied()
        .fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
    if lead < 0.0 {
        col.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Singular value decomposition by one-sided (Hestenes) Jacobi rotations.
///
/// Returns `(u, sigma, v)` with `u: m×r`, `v: n×r`, `r = min(m, n)` and
/// `sigma` descending. Columns of `u` for zero singular values are zero.
pub fn dense_svd(m: &DenseMatrix) -> Result<(DenseMatrix, Vec<f64>, DenseMatrix)> {
    if m.rows() < m.cols() {
        let (u, s, v) = dense_svd(&m.transpose())?;
        return Ok((v, s, u));
    }
    let n = m.cols();
    let mut u = m.clone();
    let mut v = DenseMatrix::identity(n);
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for k in 0..u.rows() {
                    let (up, uq) = (u.get(k, p), u.get(k, q));
                    alpha += up * up;
                    beta += uq * uq;
                    gamma += up * uq;
                }
                if alpha == 0.0 || beta == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let (c, s) = rotation(alpha, beta, gamma);
                rotate_columns(&mut u, p, q, c, s);
                rotate_columns(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let sigma: Vec<f64> = (0..n)
        .map(|j| (0..u.rows()).map(|k| u.get(k, j) * u.get(k, j)).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]));
    let mut uo = DenseMatrix::zeros(u.rows(), n);
    let mut vo = DenseMatrix::zeros(n, n);
    let mut so = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        let s = sigma[src];
        so.push(s);
        let ucol: Vec<f64> = u
            .column(src)
            .into_iter()
            .map(|x| if s > 0.0 { x / s } else { 0.0 })
            .collect();
        uo.set_column(dst, &ucol);
        vo.set_column(dst, &v.column(src));
    }
    Ok((uo, so, vo))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::matrix::matmul;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DenseMatrix {
        DenseMatrix::new(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn inf_norm(m: &DenseMatrix) -> f64 {
        m.max_abs()
    }

    #[test]
    fn qr_identity() {
        let (q, r) = qr_householder(&DenseMatrix::identity(4)).unwrap();
        assert_eq!(q, DenseMatrix::identity(4));
        assert_eq!(r, DenseMatrix::identity(4));
    }

    #[test]
    fn qr_single_column() {
        let m = DenseMatrix::new(2, 1, vec![3.0, 4.0]).unwrap();
        let (q, r) = qr_householder(&m).unwrap();
        assert!((q.get(0, 0) - 0.6).abs() < 1e-15);
        assert!((q.get(1, 0) - 0.8).abs() < 1e-15);
        assert!((r.get(0, 0) - 5.0).abs() < 1e-15);
    }

    #[test]
    fn qr_random_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let m = random(&mut rng, 12, 4);
            let (q, r) = qr_householder(&m).unwrap();
            let qtq = matmul(&q.transpose(), &q).unwrap();
            assert!(inf_norm(&qtq.sub(&DenseMatrix::identity(4)).unwrap()) <= 1e-12);
            let qr = matmul(&q, &r).unwrap();
            assert!(inf_norm(&qr.sub(&m).unwrap()) <= 1e-12 * inf_norm(&m));
            for i in 0..4 {
                assert!(r.get(i, i) >= 0.0);
                for j in 0..i {
                    assert_eq!(r.get(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn qr_rank_deficient() {
        let m = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0]]).unwrap();
        let (q, r) = qr_householder(&m).unwrap();
        assert!(r.get(1, 1).abs() < 1e-14);
        let qr = matmul(&q, &r).unwrap();
        assert!(inf_norm(&qr.sub(&m).unwrap()) < 1e-14);
    }

    #[test]
    fn qr_rejects_wide() {
        assert!(qr_householder(&DenseMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn flop_model() {
        assert_eq!(householder_qr_flops(3, 3), 2.0 * 27.0 - 18.0);
    }

    #[test]
    fn eig_diagonal_and_identity() {
        let (vals, vecs) = dense_eig_symmetric(&DenseMatrix::from_diag(&[3.0, 1.0])).unwrap();
        assert_eq!(vals, vec![3.0, 1.0]);
        assert_eq!(vecs, DenseMatrix::identity(2));
        let (vals, _) = dense_eig_symmetric(&DenseMatrix::identity(5)).unwrap();
        assert!(vals.iter().all(|&v| v == 1.0));
        let (vals, vecs) = dense_eig_symmetric(&DenseMatrix::from_diag(&[1.0, 3.0])).unwrap();
        assert_eq!(vals, vec![3.0, 1.0]);
        assert_eq!(vecs.column(0), vec![0.0, 1.0]);
    }

    #[test]
    fn eig_random_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let b = random(&mut rng, 8, 8);
        let m = matmul(&b, &b.transpose())
            .unwrap()
            .sub(&DenseMatrix::from_diag(&[2.0; 8]))
            .unwrap();
        let (vals, vecs) = dense_eig_symmetric(&m).unwrap();
        let mv = matmul(&m, &vecs).unwrap();
        let vl = matmul(&vecs, &DenseMatrix::from_diag(&vals)).unwrap();
        assert!(mv.sub(&vl).unwrap().frobenius_norm() <= 1e-10 * m.frobenius_norm());
        assert!(vals.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn eig_rejects_asymmetric() {
        let m = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(dense_eig_symmetric(&m), Err(Error::NotSymmetric(_))));
    }

    #[test]
    fn svd_small_cases() {
        let (_, s, _) = dense_svd(&DenseMatrix::from_diag(&[2.0, -1.0])).unwrap();
        assert_eq!(s, vec![2.0, 1.0]);
        let (_, s, _) = dense_svd(&DenseMatrix::zeros(3, 2)).unwrap();
        assert_eq!(s, vec![0.0, 0.0]);
    }

    #[test]
    fn svd_random_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for &(r, c) in &[(10, 6), (6, 10), (5, 5)] {
            let m = random(&mut rng, r, c);
            let (u, s, v) = dense_svd(&m).unwrap();
            let us = matmul(&u, &DenseMatrix::from_diag(&s)).unwrap();
            let rec = matmul(&us, &v.transpose()).unwrap();
            assert!(rec.sub(&m).unwrap().frobenius_norm() <= 1e-10 * m.frobenius_norm());
            assert!(s.windows(2).all(|w| w[0] >= w[1]));
            assert!(s.iter().all(|&x| x >= 0.0));
        }
    }
}
