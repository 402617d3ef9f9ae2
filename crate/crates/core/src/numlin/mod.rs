//! Complex linear algebra for small Hilbert spaces.
//!
//! Everything operates on dense [`CMatrix`] values. The two
//! factorizations ([`eigh`], [`svd`]) carry explicit accuracy contracts
//! (reconstruction residual within `1e-10 · max(1, ‖X‖_F)`, factors
//! unitary to `1e-10 · dim`) that the spectral operations below build on.

mod decomp;
mod matrix;

pub use decomp::{eigh, svd, Eigh, Svd};
pub use matrix::CMatrix;

pub(crate) use matrix::cdot;

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Hermitian part `(X + X^H) / 2`.
///
/// Identity on Hermitian inputs; the result is always exactly Hermitian
/// up to floating-point conjugation symmetry.
pub fn hermitize(x: &CMatrix) -> CMatrix {
    x.hermitize()
}

/// Singular value shrinkage `D_τ(X) = U diag(max(σ_i − τ, 0)) V^H`.
///
/// This is the proximity operator of `τ‖·‖_*`: it minimizes
/// `τ‖Z‖_* + ½‖Z − X‖_F²` over all `Z`. Requires `τ ≥ 0` and finite.
/// A numerically Hermitian input takes the eigendecomposition route
/// (`Σ sign(λ_i) max(|λ_i| − τ, 0) u_i u_i^H`), which is the same
/// operator; the dispatch depends only on the input entries, so repeated
/// calls are bit-for-bit reproducible.
pub fn shrink(x: &CMatrix, tau: f64) -> Result<CMatrix> {
    if !tau.is_finite() || tau < 0.0 {
        return Err(Error::Argument(format!(
            "shrink: threshold must be finite and non-negative, got {tau}"
        )));
    }
    if !x.is_square() {
        return Err(Error::dim("shrink", x.rows(), x.cols()));
    }
    let scale = x.frobenius_norm().max(1.0);
    if x.is_hermitian(1e-12 * scale) {
        let e = eigh(x)?;
        let shrunk: Vec<f64> = e
            .eigenvalues
            .iter()
            .map(|&l| l.signum() * (l.abs() - tau).max(0.0))
            .collect();
        return Ok(reconstruct(&e.eigenvectors, &shrunk, &e.eigenvectors));
    }
    let f = svd(x)?;
    let shrunk: Vec<f64> = f.sigma.iter().map(|&s| (s - tau).max(0.0)).collect();
    Ok(reconstruct(&f.u, &shrunk, &f.v))
}

/// A singular value decomposition `X = U diag(σ) V^H` of a shrinkage
/// input, kept for the reverse-mode pass. The σ are not necessarily
/// sorted — the eigendecomposition route produces them in eigenvalue
/// order with signs folded into `v`.
#[derive(Debug, Clone)]
pub struct SpectralFactors {
    /// Left singular vectors (columns).
    pub u: CMatrix,
    /// Singular values (non-negative, not necessarily sorted).
    pub sigma: Vec<f64>,
    /// Right singular vectors (columns).
    pub v: CMatrix,
}

/// [`shrink`] that also returns the factorization of the *input*, for
/// callers that differentiate through the shrinkage. The returned matrix
/// is computed exactly like [`shrink`]'s (same route dispatch, same
/// reconstruction), and the factors always satisfy
/// `X = U diag(σ) V^H` regardless of which route produced them.
pub fn shrink_with_factors(x: &CMatrix, tau: f64) -> Result<(CMatrix, SpectralFactors)> {
    if !tau.is_finite() || tau < 0.0 {
        return Err(Error::Argument(format!(
            "shrink: threshold must be finite and non-negative, got {tau}"
        )));
    }
    if !x.is_square() {
        return Err(Error::dim("shrink", x.rows(), x.cols()));
    }
    let n = x.rows();
    let scale = x.frobenius_norm().max(1.0);
    if x.is_hermitian(1e-12 * scale) {
        let e = eigh(x)?;
        let shrunk_signed: Vec<f64> = e
            .eigenvalues
            .iter()
            .map(|&l| l.signum() * (l.abs() - tau).max(0.0))
            .collect();
        let s = reconstruct(&e.eigenvectors, &shrunk_signed, &e.eigenvectors);
        let sigma: Vec<f64> = e.eigenvalues.iter().map(|l| l.abs()).collect();
        let mut v = e.eigenvectors.clone();
        for (k, &l) in e.eigenvalues.iter().enumerate() {
            if l < 0.0 {
                for i in 0..n {
                    v[(i, k)] = -v[(i, k)];
                }
            }
        }
        return Ok((
            s,
            SpectralFactors {
                u: e.eigenvectors,
                sigma,
                v,
            },
        ));
    }
    let f = svd(x)?;
    let shrunk: Vec<f64> = f.sigma.iter().map(|&s| (s - tau).max(0.0)).collect();
    let s = reconstruct(&f.u, &shrunk, &f.v);
    Ok((
        s,
        SpectralFactors {
            u: f.u,
            sigma: f.sigma,
            v: f.v,
        },
    ))
}

/// `U diag(vals) V^H` without materializing the diagonal matrix.
pub(crate) fn reconstruct(u: &CMatrix, vals: &[f64], v: &CMatrix) -> CMatrix {
    let n = u.rows();
    let mut out = CMatrix::zeros(n, n);
    for (k, &val) in vals.iter().enumerate() {
        if val == 0.0 {
            continue;
        }
        for i in 0..n {
            let ui = u[(i, k)] * val;
            if ui.re == 0.0 && ui.im == 0.0 {
                continue;
            }
            let orow = out.row_mut(i);
            for j in 0..n {
                orow[j] += ui * v[(j, k)].conj();
            }
        }
    }
    out
}

/// Principal square root of a Hermitian PSD matrix.
///
/// Eigenvalues in `[-1e-8, 0)` are treated as rounding noise and clamped
/// to zero; anything more negative violates the PSD precondition and is
/// an error.
pub fn psd_sqrt(x: &CMatrix) -> Result<CMatrix> {
    let e = eigh(x)?;
    if let Some(&low) = e.eigenvalues.iter().find(|&&l| l < -1e-8) {
        return Err(Error::Contract(format!(
            "psd_sqrt: eigenvalue {low:.3e} below the -1e-8 PSD tolerance"
        )));
    }
    let roots: Vec<f64> = e.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).collect();
    Ok(reconstruct(&e.eigenvectors, &roots, &e.eigenvectors))
}

/// Trace norm (nuclear norm) `‖X‖_* = Σ σ_i(X)`.
pub fn trace_norm(x: &CMatrix) -> Result<f64> {
    Ok(svd(x)?.sigma.iter().sum())
}

/// Frobenius norm `‖X‖_F`.
pub fn fro_norm(x: &CMatrix) -> f64 {
    x.frobenius_norm()
}

/// Entry-wise absolute value of a Hermitian matrix in the spectral sense:
/// `|X| = U diag(|λ|) U^H`.
pub fn abs_matrix(x: &CMatrix) -> Result<CMatrix> {
    let e = eigh(x)?;
    let mags: Vec<f64> = e.eigenvalues.iter().map(|l| l.abs()).collect();
    Ok(reconstruct(&e.eigenvectors, &mags, &e.eigenvectors))
}

/// Nearest PSD matrix to a Hermitian input: negative eigenvalues are
/// clamped to zero (no trace renormalization). Used to make approximately
/// physical solver outputs safe for square-root based metrics.
pub fn psd_clamp(x: &CMatrix) -> Result<CMatrix> {
    let e = eigh(x)?;
    let clamped: Vec<f64> = e.eigenvalues.iter().map(|l| l.max(0.0)).collect();
    Ok(reconstruct(&e.eigenvectors, &clamped, &e.eigenvectors))
}

/// Complex Gaussian matrix with iid standard-normal real and imaginary
/// parts — the sampling building block for random low-rank states and the
/// randomized decomposition tests.
pub fn gaussian_matrix(rows: usize, cols: usize, rng: &mut impl rand::Rng) -> CMatrix {
    use rand_distr::{Distribution, StandardNormal};
    let mut m = CMatrix::zeros(rows, cols);
    for z in m.data_mut() {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        *z = Complex64::new(re, im);
    }
    m
}
