//! Hermitian eigendecomposition and complex SVD.
//!
//! Both factorizations use Jacobi-type iterations: cyclic two-sided Jacobi
//! with complex rotations for Hermitian matrices, and one-sided Jacobi
//! (column orthogonalization) for the general square SVD. For the matrix
//! sizes this crate handles (≤ 16) Jacobi methods are competitive with
//! anything fancier, are simple enough to audit, and deliver the high
//! relative accuracy the reconstruction contracts demand.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::numlin::matrix::{cdot, CMatrix};

/// Result of a Hermitian eigendecomposition `X = U diag(λ) U^H`.
#[derive(Debug, Clone)]
pub struct Eigh {
    /// Real eigenvalues in ascending order.
    pub eigenvalues: Vec<f64>,
    /// Unitary matrix whose columns are the matching eigenvectors.
    pub eigenvectors: CMatrix,
}

/// Result of a singular value decomposition `X = U diag(σ) V^H`.
#[derive(Debug, Clone)]
pub struct Svd {
    /// Left singular vectors (unitary).
    pub u: CMatrix,
    /// Singular values, non-negative, in descending order.
    pub sigma: Vec<f64>,
    /// Right singular vectors (unitary).
    pub v: CMatrix,
}

/// Relative Hermiticity tolerance accepted by [`eigh`].
const HERMITICITY_TOL: f64 = 1e-8;
/// Hard cap on Jacobi sweeps; convergence is quadratic and 16x16 inputs
/// need fewer than ten in practice.
const MAX_SWEEPS: usize = 64;

/// One complex Jacobi rotation for the pair `(p, q)`.
///
/// The 2x2 Hermitian block `[[app, a], [conj(a), aqq]]` is reduced to the
/// real symmetric block `[[app, |a|], [|a|, aqq]]` with the phase
/// `u = a/|a|`, then annihilated with the classic small-angle rotation.
/// Returns `(c, s, u, t)` with `c^2 + s^2 = 1` and `t = tan θ`.
#[inline]
fn jacobi_angles(app: f64, aqq: f64, a: Complex64) -> (f64, f64, Complex64, f64) {
    let r = a.norm();
    let u = a / r;
    let zeta = (aqq - app) / (2.0 * r);
    let t = if zeta == 0.0 {
        1.0
    } else {
        zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt())
    };
    let c = 1.0 / (1.0 + t * t).sqrt();
    let s = t * c;
    (c, s, u, t)
}

/// Hermitian eigendecomposition by cyclic complex Jacobi rotations.
///
/// Requires a square matrix with `‖X − X^H‖_F ≤ 1e-8 · max(1, ‖X‖_F)`;
/// the iteration itself runs on the Hermitian part, so the returned
/// factors satisfy `‖hermitize(X) − U diag(λ) U^H‖_F ≤ 1e-10 ·
/// max(1, ‖X‖_F)` and `‖U^H U − I‖_F ≤ 1e-10 · dim`. Eigenvalues are
/// ascending.
pub fn eigh(x: &CMatrix) -> Result<Eigh> {
    if !x.is_square() {
        return Err(Error::dim("eigh", x.rows(), x.cols()));
    }
    if !x.all_finite() {
        return Err(Error::Argument("eigh: non-finite entries".to_string()));
    }
    let scale = x.frobenius_norm().max(1.0);
    if !x.is_hermitian(HERMITICITY_TOL * scale) {
        return Err(Error::Contract(format!(
            "eigh: input is not Hermitian within {:.1e} * max(1, ‖X‖)",
            HERMITICITY_TOL
        )));
    }

    let n = x.rows();
    let mut a = x.hermitize();
    let mut u = CMatrix::identity(n);
    // Off-diagonal mass below this level leaves a reconstruction residual
    // two orders of magnitude inside the 1e-10 contract.
    let off_tol = 1e-13 * scale;
    // Rotations on entries this small cannot push the off-norm above the
    // target, so they are skipped.
    let skip_tol = off_tol / (n.max(2) as f64);

    let mut converged = false;
    for _sweep in 0..MAX_SWEEPS {
        if off_diag_norm(&a) <= off_tol {
            converged = true;
            break;
        }
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq.norm() <= skip_tol {
                    continue;
                }
                let app = a[(p, p)].re;
                let aqq = a[(q, q)].re;
                let (c, s, phase, t) = jacobi_angles(app, aqq, apq);

                // A <- J^H A J with J = [[c, s], [-conj(u)s, conj(u)c]]
                // acting on columns/rows p and q.
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * phase.conj() * akq;
                    a[(k, q)] = s * akp + c * phase.conj() * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * phase * aqk;
                    a[(q, k)] = s * apk + c * phase * aqk;
                }
                // Re-impose what the rotation guarantees analytically;
                // this keeps rounding from accumulating off the diagonal.
                let r = apq.norm();
                a[(p, p)] = Complex64::new(app - t * r, 0.0);
                a[(q, q)] = Complex64::new(aqq + t * r, 0.0);
                a[(p, q)] = Complex64::new(0.0, 0.0);
                a[(q, p)] = Complex64::new(0.0, 0.0);

                // U <- U J (columns p, q).
                for k in 0..n {
                    let ukp = u[(k, p)];
                    let ukq = u[(k, q)];
                    u[(k, p)] = c * ukp - s * phase.conj() * ukq;
                    u[(k, q)] = s * ukp + c * phase.conj() * ukq;
                }
            }
        }
    }
    if !converged && off_diag_norm(&a) > off_tol {
        return Err(Error::Decomposition(format!(
            "eigh: Jacobi sweeps did not reach tolerance within {MAX_SWEEPS} sweeps"
        )));
    }

    // Sort eigenpairs ascending.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].re.partial_cmp(&a[(j, j)].re).unwrap());
    let eigenvalues: Vec<f64> = order.iter().map(|&i| a[(i, i)].re).collect();
    let mut vecs = CMatrix::zeros(n, n);
    for (new_col, &old_col) in order.iter().enumerate() {
        for k in 0..n {
            vecs[(k, new_col)] = u[(k, old_col)];
        }
    }
    Ok(Eigh {
        eigenvalues,
        eigenvectors: vecs,
    })
}

/// Sum of squared off-diagonal magnitudes, square-rooted.
fn off_diag_norm(a: &CMatrix) -> f64 {
    let n = a.rows();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                acc += a[(i, j)].norm_sqr();
            }
        }
    }
    acc.sqrt()
}

/// Singular value decomposition of a square complex matrix by one-sided
/// Jacobi column orthogonalization.
///
/// Returns `X = U diag(σ) V^H` with `σ` non-negative and descending.
/// Contracts: `‖X − U diag(σ) V^H‖_F ≤ 1e-10 · max(1, ‖X‖_F)` and both
/// factors unitary to `1e-10 · dim`; a zero matrix yields all-zero `σ`.
pub fn svd(x: &CMatrix) -> Result<Svd> {
    if !x.is_square() {
        return Err(Error::dim("svd", x.rows(), x.cols()));
    }
    if !x.all_finite() {
        return Err(Error::Argument("svd: non-finite entries".to_string()));
    }
    let n = x.rows();
    if n == 0 {
        return Err(Error::Argument("svd: empty matrix".to_string()));
    }

    // B starts as X and is rotated until its columns are orthogonal;
    // the accumulated rotations form V, so B = X V throughout.
    let mut b = transpose_to_columns(x);
    let mut v = transpose_to_columns(&CMatrix::identity(n));
    // Pairwise relative orthogonality target. |b_p^H b_q| below
    // eps * ‖b_p‖ ‖b_q‖ bounds |u_p^H u_q| by eps independent of the
    // conditioning, comfortably inside the unitarity contract.
    let orth_eps = 1e-14;

    let mut converged = false;
    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        // Column squared norms, refreshed each sweep to avoid drift and
        // updated incrementally inside it.
        let mut norms2: Vec<f64> = (0..n).map(|p| col_norm_sqr(&b, p)).collect();
        for p in 0..n - 1 {
            for q in p + 1..n {
                let gpq = cdot(col(&b, p), col(&b, q));
                let bound = orth_eps * (norms2[p] * norms2[q]).sqrt();
                if gpq.norm() <= bound {
                    continue;
                }
                rotated = true;
                let (c, s, phase, t) = jacobi_angles(norms2[p], norms2[q], gpq);
                rotate_columns(&mut b, p, q, c, s, phase);
                rotate_columns(&mut v, p, q, c, s, phase);
                let r = gpq.norm();
                norms2[p] -= t * r;
                norms2[q] += t * r;
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Decomposition(format!(
            "svd: one-sided Jacobi did not converge within {MAX_SWEEPS} sweeps"
        )));
    }

    // Singular values are the column norms of the rotated B.
    let mut pairs: Vec<(f64, usize)> = (0..n).map(|p| (col_norm_sqr(&b, p).sqrt(), p)).collect();
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());

    let sigma: Vec<f64> = pairs.iter().map(|&(s, _)| s).collect();
    let sigma_max = sigma[0];
    // Columns whose norm is at rounding level cannot be normalized
    // reliably; their left vectors are completed to an orthonormal basis.
    let cutoff = sigma_max * (n as f64) * f64::EPSILON;

    let mut u_cols: Vec<Vec<Complex64>> = Vec::with_capacity(n);
    let mut deficient: Vec<usize> = Vec::new();
    for (slot, &(s, p)) in pairs.iter().enumerate() {
        if s > cutoff && s > 0.0 {
            let col: Vec<Complex64> = col(&b, p).iter().map(|z| z / s).collect();
            u_cols.push(col);
        } else {
            u_cols.push(vec![Complex64::new(0.0, 0.0); n]);
            deficient.push(slot);
        }
    }
    complete_basis(&mut u_cols, &deficient);

    let mut u = CMatrix::zeros(n, n);
    for (j, colv) in u_cols.iter().enumerate() {
        for i in 0..n {
            u[(i, j)] = colv[i];
        }
    }
    let mut vmat = CMatrix::zeros(n, n);
    for (j, &(_, p)) in pairs.iter().enumerate() {
        for i in 0..n {
            vmat[(i, j)] = col(&v, p)[i];
        }
    }
    Ok(Svd { u, sigma, v: vmat })
}

/// Store the matrix column-major so column operations are contiguous.
/// The "matrix" returned indexes as (col, row) internally; only the
/// helpers below touch it.
fn transpose_to_columns(x: &CMatrix) -> CMatrix {
    let n = x.rows();
    CMatrix::from_fn(n, n, |c_idx, r_idx| x[(r_idx, c_idx)])
}

#[inline]
fn col(b: &CMatrix, p: usize) -> &[Complex64] {
    b.row(p)
}

#[inline]
fn col_norm_sqr(b: &CMatrix, p: usize) -> f64 {
    b.row(p).iter().map(|z| z.norm_sqr()).sum()
}

/// Apply the Jacobi rotation to columns `p`, `q` of the column-major
/// working storage.
#[inline]
fn rotate_columns(b: &mut CMatrix, p: usize, q: usize, c: f64, s: f64, phase: Complex64) {
    let n = b.cols();
    let pc = phase.conj();
    for k in 0..n {
        let bp = b[(p, k)];
        let bq = b[(q, k)];
        b[(p, k)] = c * bp - s * pc * bq;
        b[(q, k)] = s * bp + c * pc * bq;
    }
}

/// Fill the listed slots of `u_cols` with unit vectors orthogonal to all
/// other columns (modified Gram-Schmidt against the standard basis,
/// picking the candidate with the largest residual).
fn complete_basis(u_cols: &mut [Vec<Complex64>], deficient: &[usize]) {
    if deficient.is_empty() {
        return;
    }
    let n = u_cols[0].len();
    let good: Vec<usize> = (0..u_cols.len())
        .filter(|i| !deficient.contains(i))
        .collect();
    let mut filled: Vec<usize> = good;
    for &slot in deficient {
        let mut best: Option<(f64, Vec<Complex64>)> = None;
        for cand in 0..n {
            let mut vcol = vec![Complex64::new(0.0, 0.0); n];
            vcol[cand] = Complex64::new(1.0, 0.0);
            // Two rounds of orthogonalization for numerical safety.
            for _ in 0..2 {
                for &j in &filled {
                    let proj = cdot(&u_cols[j], &vcol);
                    for (vv, uu) in vcol.iter_mut().zip(&u_cols[j]) {
                        *vv -= proj * uu;
                    }
                }
            }
            let nrm = vcol.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            if best.as_ref().map_or(true, |(bn, _)| nrm > *bn) {
                best = Some((nrm, vcol));
            }
        }
        let (nrm, mut vcol) = best.expect("basis completion candidates exhausted");
        debug_assert!(nrm > 0.1, "degenerate basis completion");
        for z in vcol.iter_mut() {
            *z /= nrm;
        }
        u_cols[slot] = vcol;
        filled.push(slot);
    }
}
