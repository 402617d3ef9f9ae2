//! Quantum states, measurement ensembles and distance metrics.
//!
//! Conventions used throughout:
//!
//! * single-qubit basis observables are labelled 1..=4:
//!   `1 ↦ [[0,1],[1,0]]`, `2 ↦ [[0,-i],[i,0]]`, `3 ↦ diag(1,-1)`,
//!   `4 ↦ I`;
//! * an n-qubit observable is the Kronecker product of its single-qubit
//!   factors, encoded by a flat base-4 code with the first qubit as the
//!   most significant digit, so the all-identity observable has the
//!   largest code `4^n - 1`;
//! * the sampling map is `A_i(X) = tr[A_i X]` and its adjoint is
//!   `A*(y) = Σ_i y_i A_i` (all ensemble matrices are Hermitian).

use num_complex::Complex64;
use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numlin::{cdot, eigh, gaussian_matrix, svd, CMatrix};

/// Default singular-value threshold that separates "numerically zero"
/// from meaningful spectral weight when estimating the rank of an
/// estimate.
pub const RANK_THRESHOLD: f64 = 1e-7;

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

/// Single-qubit basis observable for a label in 1..=4.
fn single_qubit_observable(label: u8) -> Result<CMatrix> {
    let m = match label {
        1 => CMatrix::from_rows(&[
            vec![c(0.0, 0.0), c(1.0, 0.0)],
            vec![c(1.0, 0.0), c(0.0, 0.0)],
        ]),
        2 => CMatrix::from_rows(&[
            vec![c(0.0, 0.0), c(0.0, -1.0)],
            vec![c(0.0, 1.0), c(0.0, 0.0)],
        ]),
        3 => CMatrix::from_rows(&[
            vec![c(1.0, 0.0), c(0.0, 0.0)],
            vec![c(0.0, 0.0), c(-1.0, 0.0)],
        ]),
        4 => CMatrix::identity(2),
        _ => {
            return Err(Error::Argument(format!(
                "observable label must be in 1..=4, got {label}"
            )))
        }
    };
    Ok(m)
}

/// n-qubit product observable from per-qubit labels (each in 1..=4).
///
/// The first label is the most significant tensor factor.
pub fn pauli_observable(labels: &[u8]) -> Result<CMatrix> {
    if labels.is_empty() {
        return Err(Error::Argument(
            "observable needs at least one qubit".into(),
        ));
    }
    let mut m = single_qubit_observable(labels[0])?;
    for &l in &labels[1..] {
        m = m.kron(&single_qubit_observable(l)?);
    }
    Ok(m)
}

/// Decode a flat base-4 observable code into per-qubit labels (1..=4).
pub fn observable_labels(code: usize, n_qubits: usize) -> Vec<u8> {
    let mut labels = vec![0u8; n_qubits];
    let mut rest = code;
    for j in (0..n_qubits).rev() {
        labels[j] = (rest % 4) as u8 + 1;
        rest /= 4;
    }
    labels
}

/// Sample `m` distinct non-identity observable codes uniformly at random.
///
/// Codes range over `0..4^n - 1`; the all-identity code `4^n - 1` is
/// excluded. The result is sorted ascending (a canonical order for
/// reproducible ensembles).
pub fn select_observables(n_qubits: usize, m: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let total = 4usize.pow(n_qubits as u32) - 1; // non-identity codes
    if m == 0 || m > total {
        return Err(Error::Argument(format!(
            "cannot choose {m} distinct non-identity observables on {n_qubits} qubit(s) (max {total})"
        )));
    }
    // Floyd's algorithm: m distinct draws without building the full range.
    let mut chosen = std::collections::BTreeSet::new();
    for top in (total - m)..total {
        let r = rng.gen_range(0..=top);
        if !chosen.insert(r) {
            chosen.insert(top);
        }
    }
    Ok(chosen.into_iter().collect())
}

/// What the rows of an ensemble physically are.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EnsembleKind {
    /// Expectation values of traceless product observables.
    #[serde(rename = "pauli")]
    PauliExpectation,
    /// Outcome probabilities of the product Pauli-4 POVM.
    #[serde(rename = "povm")]
    Povm,
}

/// A fixed list of Hermitian sampling matrices together with the flat
/// codes that generated them.
#[derive(Debug, Clone)]
pub struct MeasurementEnsemble {
    kind: EnsembleKind,
    n_qubits: usize,
    dim: usize,
    codes: Vec<usize>,
    matrices: Vec<CMatrix>,
}

impl MeasurementEnsemble {
    /// Ensemble of product observables with the given flat codes.
    ///
    /// The all-identity code (`4^n - 1`) is accepted — its expectation is
    /// the trace — but [`select_observables`] never draws it.
    pub fn pauli(n_qubits: usize, codes: Vec<usize>) -> Result<Self> {
        if n_qubits == 0 {
            return Err(Error::Argument("ensemble needs at least one qubit".into()));
        }
        let code_count = 4usize.pow(n_qubits as u32);
        let mut matrices = Vec::with_capacity(codes.len());
        for &code in &codes {
            if code >= code_count {
                return Err(Error::Argument(format!(
                    "observable code {code} out of range for {n_qubits} qubit(s)"
                )));
            }
            matrices.push(pauli_observable(&observable_labels(code, n_qubits))?);
        }
        if matrices.is_empty() {
            return Err(Error::Argument("ensemble must not be empty".into()));
        }
        Ok(MeasurementEnsemble {
            kind: EnsembleKind::PauliExpectation,
            n_qubits,
            dim: 1 << n_qubits,
            codes,
            matrices,
        })
    }

    /// Random ensemble of `m` distinct non-identity product observables.
    pub fn pauli_random(n_qubits: usize, m: usize, rng: &mut impl Rng) -> Result<Self> {
        let codes = select_observables(n_qubits, m, rng)?;
        Self::pauli(n_qubits, codes)
    }

    /// Random ensemble of `m - 1` distinct non-identity product observables
    /// plus the all-identity observable.
    ///
    /// Non-identity product observables are traceless, so an ensemble built
    /// from them alone leaves the trace component of a state unobserved and
    /// recovery algorithms have no data pinning it. Including the identity
    /// row (whose expectation is exactly the trace) makes the incomplete
    /// measurement record trace-aware; the randomized recovery experiments
    /// use this constructor.
    pub fn pauli_random_with_trace(n_qubits: usize, m: usize, rng: &mut impl Rng) -> Result<Self> {
        if m < 2 {
            return Err(Error::Argument(format!(
                "trace-aware ensemble needs m >= 2, got {m}"
            )));
        }
        let mut codes = select_observables(n_qubits, m - 1, rng)?;
        // The identity code is the largest, so the list stays sorted.
        codes.push(4usize.pow(n_qubits as u32) - 1);
        Self::pauli(n_qubits, codes)
    }

    /// Ensemble made of product POVM elements with the given outcome codes.
    pub fn povm(n_qubits: usize, codes: Vec<usize>) -> Result<Self> {
        let all = pauli4_povm(n_qubits)?;
        let mut matrices = Vec::with_capacity(codes.len());
        for &code in &codes {
            let m = all
                .get(code)
                .ok_or_else(|| Error::Argument(format!("POVM outcome code {code} out of range")))?;
            matrices.push(m.clone());
        }
        if matrices.is_empty() {
            return Err(Error::Argument("ensemble must not be empty".into()));
        }
        Ok(MeasurementEnsemble {
            kind: EnsembleKind::Povm,
            n_qubits,
            dim: 1 << n_qubits,
            codes,
            matrices,
        })
    }

    /// POVM ensemble restricted to a measurement budget of `m` outcomes.
    ///
    /// With `m` equal to the full outcome count the natural order is
    /// kept; otherwise the first `m` entries of a seeded random
    /// permutation of the outcome codes are used.
    pub fn povm_restricted(n_qubits: usize, m: usize, rng: &mut impl Rng) -> Result<Self> {
        let total = 4usize.pow(n_qubits as u32);
        if m == 0 || m > total {
            return Err(Error::Argument(format!(
                "POVM budget {m} out of range 1..={total}"
            )));
        }
        let codes: Vec<usize> = if m == total {
            (0..total).collect()
        } else {
            let mut perm: Vec<usize> = (0..total).collect();
            // Fisher-Yates, driven by the caller's seeded stream.
            for i in (1..total).rev() {
                let j = rng.gen_range(0..=i);
                perm.swap(i, j);
            }
            perm.truncate(m);
            perm
        };
        Self::povm(n_qubits, codes)
    }

    /// Number of sampling matrices.
    pub fn count(&self) -> usize {
        self.matrices.len()
    }

    /// Hilbert-space dimension `d = 2^n`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Qubit count.
    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    /// Ensemble kind.
    pub fn kind(&self) -> EnsembleKind {
        self.kind
    }

    /// Flat codes of the sampling matrices.
    pub fn codes(&self) -> &[usize] {
        &self.codes
    }

    /// The sampling matrices themselves.
    pub fn matrices(&self) -> &[CMatrix] {
        &self.matrices
    }

    /// Sampling map `A(X)_i = tr[A_i X]`.
    ///
    /// Since every `A_i` is Hermitian, `tr[A_i X] = Σ_pq conj(A_i)_pq
    /// X_pq`, a flat dot product.
    pub fn apply_map(&self, x: &CMatrix) -> Vec<Complex64> {
        assert_eq!(x.rows(), self.dim, "sampling map input dimension mismatch");
        assert_eq!(x.cols(), self.dim, "sampling map input dimension mismatch");
        self.matrices
            .iter()
            .map(|a| cdot(a.data(), x.data()))
            .collect()
    }

    /// Adjoint of the sampling map, `A*(y) = Σ_i y_i A_i`.
    pub fn apply_adjoint(&self, y: &[Complex64]) -> CMatrix {
        assert_eq!(y.len(), self.count(), "adjoint input length mismatch");
        let mut out = CMatrix::zeros(self.dim, self.dim);
        let od = out.data_mut();
        for (yi, a) in y.iter().zip(&self.matrices) {
            if yi.re == 0.0 && yi.im == 0.0 {
                continue;
            }
            for (o, &aij) in od.iter_mut().zip(a.data()) {
                *o += yi * aij;
            }
        }
        out
    }

    /// Real measurement record of a state: `b_i = Re tr[A_i ρ]`.
    pub fn measure(&self, rho: &DensityMatrix) -> Vec<f64> {
        self.apply_map(rho.matrix()).iter().map(|z| z.re).collect()
    }
}

/// The four single-qubit Pauli-4 POVM elements.
///
/// `M_1 = |0><0|/3`, `M_2 = |+><+|/3`, `M_3 = |r><r|/3` with
/// `|r> = (|0> + i|1>)/√2`, and `M_4 = I - M_1 - M_2 - M_3`.
fn single_qubit_povm() -> [CMatrix; 4] {
    let third = 1.0 / 3.0;
    let sixth = 1.0 / 6.0;
    let m1 = CMatrix::from_rows(&[
        vec![c(third, 0.0), c(0.0, 0.0)],
        vec![c(0.0, 0.0), c(0.0, 0.0)],
    ]);
    let m2 = CMatrix::from_rows(&[
        vec![c(sixth, 0.0), c(sixth, 0.0)],
        vec![c(sixth, 0.0), c(sixth, 0.0)],
    ]);
    let m3 = CMatrix::from_rows(&[
        vec![c(sixth, 0.0), c(0.0, -sixth)],
        vec![c(0.0, sixth), c(sixth, 0.0)],
    ]);
    let mut m4 = CMatrix::identity(2);
    for m in [&m1, &m2, &m3] {
        m4 = m4.sub(m);
    }
    [m1, m2, m3, m4]
}

/// All `4^n` product Pauli-4 POVM elements in flat base-4 outcome order
/// (first qubit most significant).
pub fn pauli4_povm(n_qubits: usize) -> Result<Vec<CMatrix>> {
    if n_qubits == 0 {
        return Err(Error::Argument("POVM needs at least one qubit".into()));
    }
    let single = single_qubit_povm();
    let mut elements: Vec<CMatrix> = single.to_vec();
    for _ in 1..n_qubits {
        let mut next = Vec::with_capacity(elements.len() * 4);
        for e in &elements {
            for s in &single {
                next.push(e.kron(s));
            }
        }
        elements = next;
    }
    Ok(elements)
}

/// A physical quantum state: Hermitian, positive semidefinite, unit trace.
#[derive(Debug, Clone)]
pub struct DensityMatrix {
    mat: CMatrix,
}

impl DensityMatrix {
    /// Validate and wrap a candidate matrix.
    ///
    /// Requires Hermiticity within `1e-10 · max(1, ‖X‖)`, trace within
    /// `1e-10` of one, and smallest eigenvalue at least `-1e-10`.
    pub fn new(mat: CMatrix) -> Result<Self> {
        if !mat.is_square() {
            return Err(Error::dim("DensityMatrix::new", mat.rows(), mat.cols()));
        }
        let scale = mat.frobenius_norm().max(1.0);
        if !mat.is_hermitian(1e-10 * scale) {
            return Err(Error::Contract("density matrix must be Hermitian".into()));
        }
        let tr = mat.trace();
        if (tr.re - 1.0).abs() > 1e-10 || tr.im.abs() > 1e-10 {
            return Err(Error::Contract(format!(
                "density matrix must have unit trace, got {tr}"
            )));
        }
        let e = eigh(&mat)?;
        if e.eigenvalues[0] < -1e-10 {
            return Err(Error::Contract(format!(
                "density matrix must be PSD, smallest eigenvalue {:.3e}",
                e.eigenvalues[0]
            )));
        }
        Ok(DensityMatrix { mat })
    }

    /// Wrap a matrix that is valid by construction.
    pub(crate) fn from_trusted(mat: CMatrix) -> Self {
        DensityMatrix { mat }
    }

    /// Random rank-`r` state: `ρ = G G^H / tr[G G^H]` with `G` a `d x r`
    /// complex Gaussian matrix.
    pub fn random_rank(d: usize, r: usize, rng: &mut impl Rng) -> Result<Self> {
        if d == 0 || r == 0 || r > d {
            return Err(Error::Argument(format!(
                "invalid rank-{r} state in dimension {d}"
            )));
        }
        let g = gaussian_matrix(d, r, rng);
        let gram = g.mul(&g.adjoint());
        let tr = gram.trace().re;
        if tr <= 0.0 {
            return Err(Error::Argument("degenerate Gaussian draw".into()));
        }
        Ok(DensityMatrix::from_trusted(gram.scaled(1.0 / tr)))
    }

    /// The two-qubit maximally entangled state
    /// `|Φ+><Φ+|` with `|Φ+> = (|00> + |11>)/√2`.
    pub fn bell() -> Self {
        let mut m = CMatrix::zeros(4, 4);
        for &(i, j) in &[(0usize, 0usize), (0, 3), (3, 0), (3, 3)] {
            m[(i, j)] = c(0.5, 0.0);
        }
        DensityMatrix::from_trusted(m)
    }

    /// Maximally mixed state `I/d`.
    pub fn maximally_mixed(d: usize) -> Self {
        DensityMatrix::from_trusted(CMatrix::identity(d).scaled(1.0 / d as f64))
    }

    /// Pure state `|ψ><ψ|` from a normalized amplitude vector.
    pub fn from_pure(amplitudes: &[Complex64]) -> Result<Self> {
        let norm2: f64 = amplitudes.iter().map(|z| z.norm_sqr()).sum();
        if (norm2 - 1.0).abs() > 1e-10 {
            return Err(Error::Argument(format!(
                "state vector must be normalized, got ‖ψ‖² = {norm2}"
            )));
        }
        let d = amplitudes.len();
        let m = CMatrix::from_fn(d, d, |i, j| amplitudes[i] * amplitudes[j].conj());
        Ok(DensityMatrix::from_trusted(m))
    }

    /// Hilbert-space dimension.
    pub fn dim(&self) -> usize {
        self.mat.rows()
    }

    /// Underlying matrix.
    pub fn matrix(&self) -> &CMatrix {
        &self.mat
    }
}

/// POVM outcome probabilities `p_a = Re tr[M_a ρ]`.
///
/// Probabilities are clamped at zero from below (values under `-1e-10`
/// are a contract violation) and must sum to one within `1e-10`.
pub fn povm_probabilities(rho: &DensityMatrix, elements: &[CMatrix]) -> Result<Vec<f64>> {
    let mut p = Vec::with_capacity(elements.len());
    for m in elements {
        if m.rows() != rho.dim() {
            return Err(Error::dim("povm_probabilities", rho.dim(), m.rows()));
        }
        let prob = cdot(m.data(), rho.matrix().data()).re;
        if prob < -1e-10 {
            return Err(Error::Contract(format!(
                "POVM probability {prob:.3e} below zero beyond tolerance"
            )));
        }
        p.push(prob.max(0.0));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-10 {
        return Err(Error::Contract(format!(
            "POVM probabilities sum to {total}, expected 1"
        )));
    }
    Ok(p)
}

/// Empirical outcome frequencies from `n_avg` independent shots of the
/// distribution `p` (an exact multinomial draw via the binomial chain).
///
/// The result sums to one exactly; `n_avg` must be positive and `p` a
/// probability vector within `1e-9`.
pub fn sample_povm(p: &[f64], n_avg: u64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if n_avg == 0 {
        return Err(Error::Argument("n_avg must be positive".into()));
    }
    if p.is_empty() {
        return Err(Error::Argument("empty probability vector".into()));
    }
    if p.iter().any(|&x| !x.is_finite() || x < -1e-12) {
        return Err(Error::Argument(
            "probabilities must be finite and non-negative".into(),
        ));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Argument(format!(
            "probabilities sum to {total}, expected 1 within 1e-9"
        )));
    }
    let k = p.len();
    let mut counts = vec![0u64; k];
    let mut remaining = n_avg;
    let mut rem_p = 1.0f64;
    for a in 0..k {
        if a == k - 1 {
            counts[a] = remaining;
            break;
        }
        if remaining == 0 {
            break;
        }
        let pr = if rem_p > 0.0 {
            (p[a].max(0.0) / rem_p).clamp(0.0, 1.0)
        } else {
            1.0
        };
        let draw = rand_distr::Binomial::new(remaining, pr)
            .map_err(|e| Error::Argument(format!("binomial parameters: {e}")))?
            .sample(rng);
        counts[a] = draw;
        remaining -= draw;
        rem_p = (rem_p - p[a].max(0.0)).max(0.0);
    }
    Ok(counts
        .into_iter()
        .map(|n| n as f64 / n_avg as f64)
        .collect())
}

/// Eigenvalue floor accepted by [`fidelity`]; anything below is a
/// contract violation rather than rounding noise.
const FIDELITY_EIG_FLOOR: f64 = -1e-6;

/// Uhlmann fidelity `F(ρ, σ) = tr √(√ρ σ √ρ)`.
///
/// Both arguments must be Hermitian with eigenvalues no lower than
/// `-1e-6`; small negative eigenvalues (rounding from reconstruction
/// pipelines) are clamped to zero before the square roots.
pub fn fidelity(rho: &CMatrix, sigma: &CMatrix) -> Result<f64> {
    let sqrt_rho = clamped_sqrt(rho, "fidelity(ρ)")?;
    // Validate σ's spectrum against the same floor.
    let es = eigh(sigma).map_err(|e| wrap_hermitian_err(e, "fidelity(σ)"))?;
    if es.eigenvalues[0] < FIDELITY_EIG_FLOOR {
        return Err(Error::Contract(format!(
            "fidelity(σ): eigenvalue {:.3e} below the -1e-6 clamping floor",
            es.eigenvalues[0]
        )));
    }
    let inner = sqrt_rho.mul(sigma).mul(&sqrt_rho).hermitize();
    let ei = eigh(&inner)?;
    Ok(ei.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).sum())
}

/// `√ρ` with eigenvalues clamped to `[0, ∞)`; errors below the fidelity
/// floor or on non-Hermitian input.
fn clamped_sqrt(x: &CMatrix, what: &str) -> Result<CMatrix> {
    let e = eigh(x).map_err(|err| wrap_hermitian_err(err, what))?;
    if e.eigenvalues[0] < FIDELITY_EIG_FLOOR {
        return Err(Error::Contract(format!(
            "{what}: eigenvalue {:.3e} below the -1e-6 clamping floor",
            e.eigenvalues[0]
        )));
    }
    let roots: Vec<f64> = e.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).collect();
    Ok(crate::numlin::reconstruct(
        &e.eigenvectors,
        &roots,
        &e.eigenvectors,
    ))
}

fn wrap_hermitian_err(e: Error, what: &str) -> Error {
    match e {
        Error::Contract(msg) => Error::Contract(format!("{what}: {msg}")),
        other => other,
    }
}

/// Trace distance `T(ρ, σ) = ½ tr|ρ - σ|`.
pub fn trace_distance(rho: &CMatrix, sigma: &CMatrix) -> Result<f64> {
    if rho.rows() != sigma.rows() || rho.cols() != sigma.cols() {
        return Err(Error::dim("trace_distance", rho.rows(), sigma.rows()));
    }
    let diff = rho.sub(sigma);
    let scale = diff.frobenius_norm().max(1.0);
    if !diff.is_hermitian(1e-8 * scale) {
        return Err(Error::Contract(
            "trace_distance: arguments must be Hermitian".into(),
        ));
    }
    let e = eigh(&diff.hermitize())?;
    Ok(0.5 * e.eigenvalues.iter().map(|l| l.abs()).sum::<f64>())
}

/// Classical (Bhattacharyya) fidelity between two probability vectors:
/// `Σ_a √(p_a q_a)`.
pub fn classic_fidelity(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::dim("classic_fidelity", p.len(), q.len()));
    }
    for (name, v) in [("p", p), ("q", q)] {
        if v.iter().any(|&x| !x.is_finite() || x < -1e-10) {
            return Err(Error::Argument(format!(
                "classic_fidelity: {name} has negative or non-finite entries"
            )));
        }
        let s: f64 = v.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Argument(format!(
                "classic_fidelity: {name} sums to {s}, expected 1 within 1e-9"
            )));
        }
    }
    Ok(p.iter()
        .zip(q)
        .map(|(&a, &b)| (a.max(0.0) * b.max(0.0)).sqrt())
        .sum())
}

/// Number of singular values above `threshold` — the effective rank of a
/// reconstruction.
pub fn rank_estimate(x: &CMatrix, threshold: f64) -> Result<usize> {
    if !threshold.is_finite() || threshold < 0.0 {
        return Err(Error::Argument(format!(
            "rank threshold must be finite and non-negative, got {threshold}"
        )));
    }
    Ok(svd(x)?.sigma.iter().filter(|&&s| s > threshold).count())
}

/// Purity `tr[ρ²]` — 1 exactly for pure states.
pub fn purity(rho: &DensityMatrix) -> f64 {
    let m = rho.matrix();
    m.inner_re(m)
}

pub use crate::numlin::psd_clamp;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn zz_observable_is_diag_1_m1_m1_1() {
        let zz = pauli_observable(&[3, 3]).unwrap();
        let expected = [1.0, -1.0, -1.0, 1.0];
        for (i, &e) in expected.iter().enumerate() {
            assert!((zz[(i, i)] - c(e, 0.0)).norm() < 1e-15);
            for j in 0..4 {
                if i != j {
                    assert!(zz[(i, j)].norm() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn two_qubit_observables_are_orthogonal_under_trace() {
        // tr[A_i A_j] = d δ_ij over all 16 two-qubit product observables.
        let all: Vec<CMatrix> = (0..16)
            .map(|code| pauli_observable(&observable_labels(code, 2)).unwrap())
            .collect();
        for (i, a) in all.iter().enumerate() {
            for (j, b) in all.iter().enumerate() {
                let tr = a.mul(b).trace();
                let expected = if i == j { 4.0 } else { 0.0 };
                assert!(
                    (tr.re - expected).abs() < 1e-12 && tr.im.abs() < 1e-12,
                    "tr[A_{i} A_{j}] = {tr}"
                );
            }
        }
    }

    #[test]
    fn observable_codes_roundtrip_and_identity_is_last() {
        for code in 0..64 {
            let labels = observable_labels(code, 3);
            let back: usize = labels
                .iter()
                .fold(0usize, |acc, &l| acc * 4 + (l as usize - 1));
            assert_eq!(back, code);
        }
        assert_eq!(observable_labels(255, 4), vec![4, 4, 4, 4]);
    }

    #[test]
    fn select_observables_distinct_in_range_never_identity() {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let codes = select_observables(4, 103, &mut rng).unwrap();
        assert_eq!(codes.len(), 103);
        let identity_code = 255;
        let mut seen = std::collections::HashSet::new();
        for &c in &codes {
            assert!(c < identity_code);
            assert!(seen.insert(c), "duplicate code {c}");
        }
        // Determinism: same seed, same selection.
        let mut rng2 = ChaCha12Rng::seed_from_u64(42);
        assert_eq!(codes, select_observables(4, 103, &mut rng2).unwrap());
    }

    #[test]
    fn trace_aware_ensemble_includes_identity_and_reads_trace() {
        let mut rng = ChaCha12Rng::seed_from_u64(43);
        let ens = MeasurementEnsemble::pauli_random_with_trace(4, 103, &mut rng).unwrap();
        assert_eq!(ens.count(), 103);
        let identity_code = 255;
        assert_eq!(
            ens.codes().iter().filter(|&&c| c == identity_code).count(),
            1
        );
        // The identity row reads off the trace of any state exactly.
        let rho = DensityMatrix::random_rank(16, 3, &mut rng).unwrap();
        let b = ens.measure(&rho);
        let id_pos = ens
            .codes()
            .iter()
            .position(|&c| c == identity_code)
            .unwrap();
        assert!((b[id_pos] - 1.0).abs() < 1e-12);
        // Too small a budget for the mandatory identity row is rejected.
        assert!(MeasurementEnsemble::pauli_random_with_trace(4, 1, &mut rng).is_err());
    }

    #[test]
    fn map_of_bell_state_under_zz_is_one() {
        let ens = MeasurementEnsemble::pauli(2, vec![10]).unwrap(); // labels (3,3)
        assert_eq!(observable_labels(10, 2), vec![3, 3]);
        let b = ens.measure(&DensityMatrix::bell());
        assert!((b[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adjoint_matches_map_in_inner_products() {
        // <A*(y), X> = <y, A(X)> for complex y and arbitrary X.
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let ens = MeasurementEnsemble::pauli_random(2, 7, &mut rng).unwrap();
        for _ in 0..50 {
            let x = gaussian_matrix(4, 4, &mut rng);
            let y: Vec<Complex64> = (0..7)
                .map(|_| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect();
            let lhs = {
                // tr[(A*(y))^H X]
                let ay = ens.apply_adjoint(&y);
                cdot(ay.data(), x.data())
            };
            let rhs: Complex64 = ens
                .apply_map(&x)
                .iter()
                .zip(&y)
                .map(|(ax, yi)| yi.conj() * ax)
                .sum();
            assert!((lhs - rhs).norm() < 1e-12);
        }
    }

    #[test]
    fn random_rank_one_states_are_pure() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        for _ in 0..20 {
            let rho = DensityMatrix::random_rank(16, 1, &mut rng).unwrap();
            assert!((purity(&rho) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn random_rank_three_states_have_rank_three() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..100 {
            let rho = DensityMatrix::random_rank(16, 3, &mut rng).unwrap();
            assert_eq!(rank_estimate(rho.matrix(), RANK_THRESHOLD).unwrap(), 3);
            // And they validate as physical states.
            assert!(DensityMatrix::new(rho.matrix().clone()).is_ok());
        }
    }

    #[test]
    fn bell_state_entries() {
        let rho = DensityMatrix::bell();
        for i in 0..4 {
            for j in 0..4 {
                let expected = if (i == 0 || i == 3) && (j == 0 || j == 3) {
                    0.5
                } else {
                    0.0
                };
                assert!((rho.matrix()[(i, j)] - c(expected, 0.0)).norm() < 1e-15);
            }
        }
    }

    #[test]
    fn povm_is_complete_and_psd() {
        let povm = pauli4_povm(2).unwrap();
        assert_eq!(povm.len(), 16);
        let mut sum = CMatrix::zeros(4, 4);
        for m in &povm {
            sum = sum.add(m);
            let e = eigh(m).unwrap();
            assert!(e.eigenvalues[0] >= -1e-12, "POVM element not PSD");
        }
        assert!(sum.sub(&CMatrix::identity(4)).frobenius_norm() < 1e-12);
    }

    #[test]
    fn fourth_single_qubit_povm_element() {
        // M4 = I - M1 - M2 - M3 = [[1/3, (-1+i)/6], [(-1-i)/6, 2/3]].
        let povm = pauli4_povm(1).unwrap();
        let m4 = &povm[3];
        assert!((m4[(0, 0)] - c(1.0 / 3.0, 0.0)).norm() < 1e-15);
        assert!((m4[(0, 1)] - c(-1.0 / 6.0, 1.0 / 6.0)).norm() < 1e-15);
        assert!((m4[(1, 0)] - c(-1.0 / 6.0, -1.0 / 6.0)).norm() < 1e-15);
        assert!((m4[(1, 1)] - c(2.0 / 3.0, 0.0)).norm() < 1e-15);
        // det M4 = 1/6.
        let det = m4[(0, 0)] * m4[(1, 1)] - m4[(0, 1)] * m4[(1, 0)];
        assert!((det - c(1.0 / 6.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn povm_probabilities_of_maximally_mixed_state() {
        let povm = pauli4_povm(2).unwrap();
        let rho = DensityMatrix::maximally_mixed(4);
        let p = povm_probabilities(&rho, &povm).unwrap();
        for (prob, m) in p.iter().zip(&povm) {
            let expected = m.trace().re / 4.0;
            assert!((prob - expected).abs() < 1e-13);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn povm_probabilities_of_bell_state_match_brute_force() {
        let povm = pauli4_povm(2).unwrap();
        let rho = DensityMatrix::bell();
        let p = povm_probabilities(&rho, &povm).unwrap();
        for (a, m) in povm.iter().enumerate() {
            // Brute-force trace of M_a ρ, entry by entry.
            let mut tr = c(0.0, 0.0);
            for i in 0..4 {
                for j in 0..4 {
                    tr += m[(i, j)] * rho.matrix()[(j, i)];
                }
            }
            assert!(tr.im.abs() < 1e-13);
            assert!((p[a] - tr.re).abs() < 1e-13, "outcome {a}");
        }
    }

    #[test]
    fn sampling_a_point_mass_returns_it_exactly() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let mut p = vec![0.0; 8];
        p[5] = 1.0;
        let f = sample_povm(&p, 1000, &mut rng).unwrap();
        assert_eq!(f[5], 1.0);
        assert!(f.iter().sum::<f64>() == 1.0);
    }

    #[test]
    fn sampled_frequencies_concentrate_around_probabilities() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let povm = pauli4_povm(2).unwrap();
        let p = povm_probabilities(&DensityMatrix::bell(), &povm).unwrap();
        let n = 1_000_000u64;
        let f = sample_povm(&p, n, &mut rng).unwrap();
        assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (a, (&fa, &pa)) in f.iter().zip(&p).enumerate() {
            let sd = (pa * (1.0 - pa) / n as f64).sqrt();
            assert!(
                (fa - pa).abs() <= 5.0 * sd + 1e-9,
                "outcome {a}: |{fa} - {pa}| > 5σ"
            );
        }
    }

    #[test]
    fn fidelity_of_identical_states_is_one() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let rho = DensityMatrix::random_rank(4, 2, &mut rng).unwrap();
        let f = fidelity(rho.matrix(), rho.matrix()).unwrap();
        assert!((f - 1.0).abs() < 1e-10);
    }

    #[test]
    fn fidelity_bell_vs_maximally_mixed_is_half() {
        let f = fidelity(
            DensityMatrix::bell().matrix(),
            DensityMatrix::maximally_mixed(4).matrix(),
        )
        .unwrap();
        assert!((f - 0.5).abs() < 1e-10);
    }

    #[test]
    fn fidelity_is_symmetric() {
        // Symmetry holds to 1e-8: square roots of near-zero eigenvalues
        // of rank-deficient states amplify rounding to the 1e-8 scale.
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..20 {
            let a = DensityMatrix::random_rank(4, 2, &mut rng).unwrap();
            let b = DensityMatrix::random_rank(4, 3, &mut rng).unwrap();
            let f1 = fidelity(a.matrix(), b.matrix()).unwrap();
            let f2 = fidelity(b.matrix(), a.matrix()).unwrap();
            assert!((f1 - f2).abs() < 1e-8);
        }
    }

    #[test]
    fn fidelity_one_iff_trace_distance_zero() {
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        for _ in 0..20 {
            let a = DensityMatrix::random_rank(4, 2, &mut rng).unwrap();
            let b = DensityMatrix::random_rank(4, 2, &mut rng).unwrap();
            let f_ab = fidelity(a.matrix(), b.matrix()).unwrap();
            let t_ab = trace_distance(a.matrix(), b.matrix()).unwrap();
            // Distinct random states: fidelity < 1 and distance > 0.
            assert!(f_ab < 1.0 - 1e-6 && t_ab > 1e-6);
            // Identical states: fidelity 1 and distance 0.
            let f_aa = fidelity(a.matrix(), a.matrix()).unwrap();
            let t_aa = trace_distance(a.matrix(), a.matrix()).unwrap();
            assert!((f_aa - 1.0).abs() < 1e-6 && t_aa < 1e-6);
        }
    }

    #[test]
    fn fidelity_rejects_clearly_negative_spectra() {
        let bad = CMatrix::from_rows(&[
            vec![c(1.5, 0.0), c(0.0, 0.0)],
            vec![c(0.0, 0.0), c(-0.5, 0.0)],
        ]);
        let id = CMatrix::identity(2).scaled(0.5);
        assert!(matches!(fidelity(&bad, &id), Err(Error::Contract(_))));
    }

    #[test]
    fn trace_distance_bell_vs_maximally_mixed() {
        // ρ_Bell - I/4 has eigenvalues {3/4, -1/4, -1/4, -1/4}·... scaled:
        // actually {0.5 - 0.25 doubled into the Bell subspace}; the half
        // sum of absolute values is exactly 0.75.
        let t = trace_distance(
            DensityMatrix::bell().matrix(),
            DensityMatrix::maximally_mixed(4).matrix(),
        )
        .unwrap();
        assert!((t - 0.75).abs() < 1e-10);
    }

    #[test]
    fn trace_distance_of_equal_states_is_zero() {
        let rho = DensityMatrix::bell();
        assert!(trace_distance(rho.matrix(), rho.matrix()).unwrap() < 1e-14);
    }

    #[test]
    fn classic_fidelity_extremes() {
        assert!((classic_fidelity(&[0.5, 0.5], &[0.5, 0.5]).unwrap() - 1.0).abs() < 1e-14);
        assert!(classic_fidelity(&[1.0, 0.0], &[0.0, 1.0]).unwrap() < 1e-14);
    }

    #[test]
    fn classic_fidelity_of_sampled_distribution_is_near_one() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let povm = pauli4_povm(2).unwrap();
        let p = povm_probabilities(&DensityMatrix::bell(), &povm).unwrap();
        let f = sample_povm(&p, 100_000, &mut rng).unwrap();
        let cf = classic_fidelity(&p, &f).unwrap();
        assert!(cf > 0.999, "classical fidelity {cf} unexpectedly low");
    }

    #[test]
    fn rank_estimate_counts_large_singular_values() {
        let m = CMatrix::from_rows(&[
            vec![c(0.5, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)],
            vec![c(0.0, 0.0), c(0.5, 0.0), c(0.0, 0.0), c(0.0, 0.0)],
            vec![c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)],
            vec![c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)],
        ]);
        assert_eq!(rank_estimate(&m, RANK_THRESHOLD).unwrap(), 2);
    }

    #[test]
    fn density_matrix_validation_rejects_bad_inputs() {
        // Not unit trace.
        assert!(DensityMatrix::new(CMatrix::identity(2)).is_err());
        // Not PSD.
        let m = CMatrix::from_rows(&[
            vec![c(1.5, 0.0), c(0.0, 0.0)],
            vec![c(0.0, 0.0), c(-0.5, 0.0)],
        ]);
        assert!(DensityMatrix::new(m).is_err());
        // Valid.
        assert!(DensityMatrix::new(CMatrix::identity(2).scaled(0.5)).is_ok());
    }

    #[test]
    fn povm_restricted_full_budget_keeps_natural_order() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let ens = MeasurementEnsemble::povm_restricted(2, 16, &mut rng).unwrap();
        assert_eq!(ens.codes(), (0..16).collect::<Vec<_>>().as_slice());
        let mut rng2 = ChaCha12Rng::seed_from_u64(10);
        let partial = MeasurementEnsemble::povm_restricted(2, 10, &mut rng2).unwrap();
        assert_eq!(partial.count(), 10);
        let mut sorted = partial.codes().to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 10);
    }

    #[test]
    fn pure_state_constructor_checks_normalization() {
        assert!(DensityMatrix::from_pure(&[c(1.0, 0.0), c(1.0, 0.0)]).is_err());
        let s = 1.0 / 2.0f64.sqrt();
        let rho = DensityMatrix::from_pure(&[c(s, 0.0), c(0.0, s)]).unwrap();
        assert!((purity(&rho) - 1.0).abs() < 1e-12);
    }
}
