//! Dense small-matrix primitives shared by the point rules, filters and
//! bound recursions: Cholesky square roots with a jitter schedule, a
//! symmetric tridiagonal eigensolver, PSD repair and finite-difference
//! Jacobians.
//!
//! Everything here is a pure function of its inputs; matrices are tiny
//! (state dimensions below ten), so plain dense algorithms are used
//! throughout.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative jitter base for Cholesky of covariances that picked up
/// roundoff-scale negative eigenvalues. The schedule starts at
/// `jitter * trace(A) / n` and doubles at most twenty times.
pub const DEFAULT_CHOLESKY_JITTER: f64 = 1e-12;

/// Base relative step for [`numeric_jacobian`]; the per-coordinate step is
/// `step * max(1, |x_j|)`.
pub const DEFAULT_JACOBIAN_STEP: f64 = 1e-6;

const SYMMETRY_TOL: f64 = 1e-12;

/// Full spectrum of a symmetric matrix, eigenvalues ascending and
/// eigenvectors stored as orthonormal columns in matching order.
#[derive(Debug, Clone)]
pub struct SymmetricEigenResult {
    pub eigenvalues: DVector<f64>,
    pub eigenvectors: DMatrix<f64>,
}

/// Checks symmetry of `a` within `1e-12` relative to its largest entry.
pub fn check_symmetric(a: &DMatrix<f64>) -> Result<()> {
    let n = a.nrows();
    assert_eq!(a.ncols(), n, "symmetry check needs a square matrix");
    let scale = a.iter().fold(1.0_f64, |m, x| m.max(x.abs()));
    for i in 0..n {
        for j in (i + 1)..n {
            if (a[(i, j)] - a[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return Err(Error::NotSymmetric);
            }
        }
    }
    Ok(())
}

/// Lower-triangular `L` with `L Lᵀ = A` for a symmetric PSD `A`.
///
/// Exactly-zero pivots with a structurally zero column are admitted, so
/// singular covariances such as `Q = 0` factor cleanly. If the strict
/// factorization fails and `jitter > 0`, retries on `A + δI` with `δ`
/// starting at `jitter·trace(A)/n` and doubling at most twenty times.
pub fn cholesky_sqrt(a: &DMatrix<f64>, jitter: f64) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    assert_eq!(a.ncols(), n, "cholesky_sqrt needs a square matrix");
    assert!(jitter >= 0.0, "jitter must be non-negative");
    check_symmetric(a)?;
    if let Some(l) = try_cholesky(a) {
        return Ok(l);
    }
    if jitter > 0.0 {
        let trace: f64 = a.diagonal().iter().sum();
        let mut delta = jitter * trace.abs().max(f64::MIN_POSITIVE) / n as f64;
        for _ in 0..=20 {
            let mut shifted = a.clone();
            for i in 0..n {
                shifted[(i, i)] += delta;
            }
            if let Some(l) = try_cholesky(&shifted) {
                return Ok(l);
            }
            delta *= 2.0;
        }
    }
    Err(Error::NotPositiveSemidefinite)
}

fn try_cholesky(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d > 0.0 {
            let pivot = d.sqrt();
            l[(j, j)] = pivot;
            for i in (j + 1)..n {
                let mut v = a[(i, j)];
                for k in 0..j {
                    v -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = v / pivot;
            }
        } else if d == 0.0 {
            // Semidefinite pivot: valid only when the remaining column is
            // exactly zero too (block-diagonal zero structure).
            for i in (j + 1)..n {
                let mut v = a[(i, j)];
                for k in 0..j {
                    v -= l[(i, k)] * l[(j, k)];
                }
                if v != 0.0 {
                    return None;
                }
            }
        } else {
            return None;
        }
    }
    if l.iter().all(|x| x.is_finite()) {
        Some(l)
    } else {
        None
    }
}

/// Solves `L Lᵀ X = B` by forward/backward substitution.
///
/// Exactly-zero pivots (from semidefinite factors) get the minimum-norm
/// completion `x_j = 0`, which keeps degenerate zero-noise setups working.
pub fn chol_solve(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    assert_eq!(b.nrows(), n, "dimension mismatch in chol_solve");
    let m = b.ncols();
    let mut x = b.clone();
    for col in 0..m {
        for i in 0..n {
            let mut v = x[(i, col)];
            for k in 0..i {
                v -= l[(i, k)] * x[(k, col)];
            }
            x[(i, col)] = if l[(i, i)] == 0.0 { 0.0 } else { v / l[(i, i)] };
        }
        for i in (0..n).rev() {
            let mut v = x[(i, col)];
            for k in (i + 1)..n {
                v -= l[(k, i)] * x[(k, col)];
            }
            x[(i, col)] = if l[(i, i)] == 0.0 { 0.0 } else { v / l[(i, i)] };
        }
    }
    x
}

/// Inverse of a symmetric positive definite matrix through its Cholesky
/// factor.
pub fn spd_inverse(a: &DMatrix<f64>, jitter: f64) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let l = cholesky_sqrt(a, jitter)?;
    Ok(chol_solve(&l, &DMatrix::identity(n, n)))
}

/// Eigendecomposition of the symmetric tridiagonal matrix with the given
/// diagonal and off-diagonal, by QL iteration with implicit shifts.
///
/// The sweep budget is `30·n`; these matrices have a handful of rows, so
/// the cap is never approached in practice.
pub fn symm_tridiag_eigen(diag: &[f64], offdiag: &[f64]) -> Result<SymmetricEigenResult> {
    let n = diag.len();
    assert!(n >= 1, "empty tridiagonal matrix");
    assert_eq!(offdiag.len(), n - 1, "off-diagonal length must be n - 1");
    let mut d = diag.to_vec();
    let mut e = vec![0.0_f64; n];
    e[..n - 1].copy_from_slice(offdiag);
    let mut z = DMatrix::<f64>::identity(n, n);

    let max_sweeps = 30 * n;
    let mut sweeps = 0usize;
    for l in 0..n {
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            sweeps += 1;
            if sweeps > max_sweeps {
                return Err(Error::DidNotConverge);
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c) = (1.0_f64, 1.0_f64);
            let mut p = 0.0_f64;
            let mut underflow = false;
            for i in (l..m).rev() {
                let mut f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    underflow = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                for k in 0..n {
                    f = z[(k, i + 1)];
                    z[(k, i + 1)] = s * z[(k, i)] + c * f;
                    z[(k, i)] = c * z[(k, i)] - s * f;
                }
            }
            if underflow {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[i].partial_cmp(&d[j]).expect("non-finite eigenvalue"));
    let eigenvalues = DVector::from_iterator(n, order.iter().map(|&i| d[i]));
    let mut eigenvectors = DMatrix::<f64>::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        eigenvectors.set_column(dst, &z.column(src));
    }
    Ok(SymmetricEigenResult {
        eigenvalues,
        eigenvectors,
    })
}

/// `(A + Aᵀ)/2`, with any eigenvalue below `floor` raised to `floor` via
/// spectral clipping. Used after covariance updates whose outer-product
/// subtractions lose symmetry and can go slightly indefinite.
pub fn symmetrize_psd(a: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let n = a.nrows();
    assert_eq!(a.ncols(), n, "symmetrize_psd needs a square matrix");
    let mut sym = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            sym[(i, j)] = 0.5 * (a[(i, j)] + a[(j, i)]);
        }
    }
    // Gershgorin lower bound: if provably at or above the floor, the clip
    // is the identity and the symmetrized matrix is returned as-is.
    let mut gershgorin = f64::INFINITY;
    for i in 0..n {
        let mut radius = 0.0;
        for j in 0..n {
            if j != i {
                radius += sym[(i, j)].abs();
            }
        }
        gershgorin = gershgorin.min(sym[(i, i)] - radius);
    }
    if gershgorin >= floor {
        return sym;
    }
    let eig = nalgebra::SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.iter().all(|&lambda| lambda >= floor) {
        return sym;
    }
    let clipped = eig.eigenvalues.map(|lambda| lambda.max(floor));
    let rebuilt =
        &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    // reconstruction itself is symmetric only up to roundoff
    let mut out = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            out[(i, j)] = 0.5 * (rebuilt[(i, j)] + rebuilt[(j, i)]);
        }
    }
    out
}

/// Central-difference Jacobian of `map` at `point`.
///
/// The per-coordinate step is `step·max(1, |x_j|)`, entry `(i, j)` is
/// `(map(x + h e_j)_i − map(x − h e_j)_i) / 2h`.
pub fn numeric_jacobian<F>(map: F, point: &DVector<f64>, step: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    assert!(step > 0.0, "jacobian step must be positive");
    let n = point.len();
    assert!(n > 0, "jacobian of a zero-dimensional map");
    let mut columns: Vec<DVector<f64>> = Vec::with_capacity(n);
    for j in 0..n {
        let h = step * point[j].abs().max(1.0);
        let mut plus = point.clone();
        plus[j] += h;
        let mut minus = point.clone();
        minus[j] -= h;
        let fp = map(&plus);
        let fm = map(&minus);
        if fp.iter().chain(fm.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteOutput);
        }
        columns.push((fp - fm) / (2.0 * h));
    }
    Ok(DMatrix::from_columns(&columns))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    #[test]
    fn cholesky_identity() {
        let id = DMatrix::<f64>::identity(3, 3);
        let l = cholesky_sqrt(&id, 0.0).unwrap();
        assert_eq!(l, id);
    }

    #[test]
    fn cholesky_diagonal() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        let l = cholesky_sqrt(&a, 0.0).unwrap();
        assert_eq!(
            l,
            DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]))
        );
    }

    #[test]
    fn cholesky_random_psd_reconstructs() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(42);
        let b = DMatrix::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0));
        let a = b.transpose() * &b;
        let l = cholesky_sqrt(&a, 0.0).unwrap();
        let norm = a.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        assert!(max_abs_diff(&(&l * l.transpose()), &a) <= 1e-10 * norm.max(1.0));
    }

    #[test]
    fn cholesky_zero_matrix() {
        let a = DMatrix::<f64>::zeros(3, 3);
        let l = cholesky_sqrt(&a, DEFAULT_CHOLESKY_JITTER).unwrap();
        assert_eq!(l, a);
    }

    #[test]
    fn cholesky_zero_block() {
        // diag(0, 0, c) must factor without jitter
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 0.0, 2.5e-5]));
        let l = cholesky_sqrt(&a, 0.0).unwrap();
        assert_eq!(l[(2, 2)], 2.5e-5_f64.sqrt());
        assert_eq!(l[(0, 0)], 0.0);
    }

    #[test]
    fn cholesky_rejects_asymmetric() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.1, 1.0]);
        assert_eq!(cholesky_sqrt(&a, 0.0), Err(Error::NotSymmetric));
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(
            cholesky_sqrt(&a, DEFAULT_CHOLESKY_JITTER),
            Err(Error::NotPositiveSemidefinite)
        );
    }

    #[test]
    fn cholesky_jitter_rescues_tiny_negative() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1e-14]));
        let l = cholesky_sqrt(&a, DEFAULT_CHOLESKY_JITTER).unwrap();
        assert!(max_abs_diff(&(&l * l.transpose()), &a) <= 1e-10);
    }

    #[test]
    fn chol_solve_roundtrip() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let l = cholesky_sqrt(&a, 0.0).unwrap();
        let b = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let x = chol_solve(&l, &b);
        assert!(max_abs_diff(&(&a * &x), &b) <= 1e-12);
    }

    #[test]
    fn tridiag_1x1() {
        let r = symm_tridiag_eigen(&[0.0], &[]).unwrap();
        assert_eq!(r.eigenvalues[0], 0.0);
        assert_eq!(r.eigenvectors[(0, 0)].abs(), 1.0);
    }

    #[test]
    fn tridiag_2x2_hand_solved() {
        // char poly lambda^2 - 1/2 = 0
        let half_sqrt = 0.5_f64.sqrt();
        let r = symm_tridiag_eigen(&[0.0, 0.0], &[half_sqrt]).unwrap();
        assert!((r.eigenvalues[0] + half_sqrt).abs() <= 1e-14);
        assert!((r.eigenvalues[1] - half_sqrt).abs() <= 1e-14);
    }

    #[test]
    fn tridiag_3x3_hand_solved() {
        // char poly lambda^3 - (3/2) lambda = 0
        let r = symm_tridiag_eigen(&[0.0; 3], &[0.5_f64.sqrt(), 1.0]).unwrap();
        let root = (1.5_f64).sqrt();
        assert!((r.eigenvalues[0] + root).abs() <= 1e-14);
        assert!(r.eigenvalues[1].abs() <= 1e-14);
        assert!((r.eigenvalues[2] - root).abs() <= 1e-14);
    }

    #[test]
    fn tridiag_eigenpairs_satisfy_definition() {
        let diag = [0.7, -0.3, 1.1, 0.2, -0.9];
        let off = [0.4, 0.6, -0.2, 0.8];
        let r = symm_tridiag_eigen(&diag, &off).unwrap();
        let n = diag.len();
        let mut a = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            a[(i, i)] = diag[i];
        }
        for i in 0..n - 1 {
            a[(i, i + 1)] = off[i];
            a[(i + 1, i)] = off[i];
        }
        let norm = a.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        for i in 0..n {
            let v = r.eigenvectors.column(i);
            let residual = &a * v - r.eigenvalues[i] * v;
            assert!(residual.amax() <= 1e-10 * norm);
        }
        let gram = r.eigenvectors.transpose() * &r.eigenvectors;
        assert!(max_abs_diff(&gram, &DMatrix::identity(n, n)) <= 1e-10);
    }

    #[test]
    fn tridiag_zero_diagonal_spectrum_is_symmetric() {
        let off = [0.5_f64.sqrt(), 1.0, (1.5_f64).sqrt(), 2.0_f64.sqrt()];
        let r = symm_tridiag_eigen(&[0.0; 5], &off).unwrap();
        let n = r.eigenvalues.len();
        for i in 0..n {
            assert!((r.eigenvalues[i] + r.eigenvalues[n - 1 - i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn symmetrize_psd_fixed_point() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        assert_eq!(symmetrize_psd(&a, 0.0), a);
    }

    #[test]
    fn symmetrize_psd_averages() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1e-13, 0.0, 1.0]);
        let out = symmetrize_psd(&a, 0.0);
        assert_eq!(out[(0, 1)], 5e-14);
        assert_eq!(out[(1, 0)], 5e-14);
    }

    #[test]
    fn symmetrize_psd_clips() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1e-9]));
        let out = symmetrize_psd(&a, 0.0);
        assert!((out[(0, 0)] - 1.0).abs() <= 1e-15);
        assert!(out[(1, 1)].abs() <= 1e-15);
        assert!(out[(1, 1)] >= 0.0 || out[(1, 1)].abs() <= 1e-24);
    }

    #[test]
    fn jacobian_exact_for_linear_maps() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, -2.0, 0.5, 3.0, 0.0, -1.5]);
        let a2 = a.clone();
        let point = DVector::from_vec(vec![0.3, -0.7, 1.9]);
        let jac = numeric_jacobian(move |x| &a2 * x, &point, DEFAULT_JACOBIAN_STEP).unwrap();
        assert!(max_abs_diff(&jac, &a) <= 1e-8);
    }

    #[test]
    fn jacobian_scalar_square() {
        let point = DVector::from_vec(vec![3.0]);
        let jac = numeric_jacobian(
            |x: &DVector<f64>| DVector::from_vec(vec![x[0] * x[0]]),
            &point,
            1e-5,
        )
        .unwrap();
        assert!((jac[(0, 0)] - 6.0).abs() <= 1e-7);
    }

    #[test]
    fn jacobian_flags_non_finite() {
        let point = DVector::from_vec(vec![0.0]);
        let out = numeric_jacobian(
            |x: &DVector<f64>| DVector::from_vec(vec![x[0].sqrt()]),
            &point,
            1e-6,
        );
        assert_eq!(out, Err(Error::NonFiniteOutput));
    }

    proptest! {
        #[test]
        fn cholesky_reconstructs_random_psd(seed in 0u64..512) {
            let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
            let n = rng.gen_range(1..6usize);
            let b = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-2.0..2.0));
            let a = b.transpose() * &b;
            let l = cholesky_sqrt(&a, DEFAULT_CHOLESKY_JITTER).unwrap();
            let norm = a.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
            prop_assert!(max_abs_diff(&(&l * l.transpose()), &a) <= 1e-10 * norm.max(1.0));
        }

        #[test]
        fn tridiag_matches_dense_eigenvalues(seed in 0u64..256) {
            let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
            let n = rng.gen_range(2..7usize);
            let diag: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let off: Vec<f64> = (0..n - 1).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let r = symm_tridiag_eigen(&diag, &off).unwrap();
            let mut a = DMatrix::<f64>::zeros(n, n);
            for i in 0..n { a[(i, i)] = diag[i]; }
            for i in 0..n - 1 { a[(i, i + 1)] = off[i]; a[(i + 1, i)] = off[i]; }
            let mut dense: Vec<f64> = a.symmetric_eigenvalues().iter().copied().collect();
            dense.sort_by(|x, y| x.partial_cmp(y).unwrap());
            for (ours, reference) in r.eigenvalues.iter().zip(&dense) {
                prop_assert!((ours - reference).abs() <= 1e-9);
            }
        }
    }
}
