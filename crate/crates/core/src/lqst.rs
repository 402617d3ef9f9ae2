//! Unrolled reconstruction network with learnable measurement maps.
//!
//! The network unrolls `T` solver iterations into layers. The input
//! `y_0 = δ_0 b` feeds `T - 1` hidden layers, each performing
//! `y_t = y_{t-1} + δ_t (b - A(shrink(A*(y_{t-1}; W_t), τ_t); W_t))`
//! with its own learnable weight matrix `W_t`, step size `δ_t` and
//! threshold `τ_t`. A final shrinkage layer produces the matrix
//! `X_temp`, and an output layer enforces the density-matrix
//! constraints: hermitize, shift by `μ·diag(1..d)` (a degeneracy
//! breaker for the spectral backward pass), eigendecompose, clamp the
//! eigenvalues at zero and normalize them to unit sum with an `ε`
//! regularizer.
//!
//! [`backward`] computes exact reverse-mode gradients of the NMSE loss
//! for every learnable parameter — the weight matrices get realified
//! complex gradients (`∂L/∂Re + i·∂L/∂Im`), the scalars real ones — by
//! differentiating through the shrinkage (an SVD-based spectral rule)
//! and through the output layer's eigendecomposition.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numlin::{eigh, hermitize, reconstruct, shrink_with_factors, CMatrix, SpectralFactors};
use crate::quantum::{DensityMatrix, MeasurementEnsemble};

/// Smallest pairwise eigenvalue gap the output-layer backward will
/// divide by: the spectral rule couples eigenvector rotations through
/// `1/(λ_q - λ_p)`, and below this separation the decomposition cannot
/// resolve the pair reliably.
const EIGENGAP_TOL: f64 = 1e-12;

/// How many samples each worker processes sequentially when a batch is
/// differentiated in parallel. Fixed so the reduction order (and thus
/// every bit of the result) is independent of thread count.
const BATCH_CHUNK: usize = 32;

/// Learnable parameters of a `T`-layer network, plus the two fixed
/// output-layer constants.
#[derive(Debug, Clone)]
pub struct NetworkParams {
    /// Hilbert-space dimension `d`.
    pub dim: usize,
    /// Measurement count `m` (rows of every weight matrix).
    pub meas_count: usize,
    /// `W_1..W_T`, each `m × d²`; row `i` reshapes row-major to a `d×d`
    /// measurement matrix.
    pub weights: Vec<CMatrix>,
    /// Step sizes `δ_0..δ_{T-1}` (input scaling plus one per hidden layer).
    pub step_sizes: Vec<f64>,
    /// Shrinkage thresholds `τ_1..τ_T`; applied as `max(τ_t, 0)`.
    pub thresholds: Vec<f64>,
    /// Output-layer diagonal shift strength (degeneracy breaker), ≥ 0.
    pub mu: f64,
    /// Output-layer eigenvalue regularizer, > 0.
    pub epsilon: f64,
}

impl NetworkParams {
    /// Validating constructor.
    pub fn new(
        dim: usize,
        meas_count: usize,
        weights: Vec<CMatrix>,
        step_sizes: Vec<f64>,
        thresholds: Vec<f64>,
        mu: f64,
        epsilon: f64,
    ) -> Result<Self> {
        let p = NetworkParams {
            dim,
            meas_count,
            weights,
            step_sizes,
            thresholds,
            mu,
            epsilon,
        };
        p.validate()?;
        Ok(p)
    }

    /// Number of layers `T`.
    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    /// Check every structural invariant; useful after deserialization.
    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() {
            return Err(Error::Argument("network needs at least one layer".into()));
        }
        if self.dim == 0 || self.meas_count == 0 {
            return Err(Error::Argument(
                "network dimensions must be positive".into(),
            ));
        }
        let t = self.weights.len();
        if self.step_sizes.len() != t {
            return Err(Error::dim(
                "step sizes (one per layer, starting at δ_0)",
                t,
                self.step_sizes.len(),
            ));
        }
        if self.thresholds.len() != t {
            return Err(Error::dim(
                "thresholds (one per layer)",
                t,
                self.thresholds.len(),
            ));
        }
        for (i, w) in self.weights.iter().enumerate() {
            if w.rows() != self.meas_count {
                return Err(Error::dim(
                    format!("weight {} rows", i + 1),
                    self.meas_count,
                    w.rows(),
                ));
            }
            if w.cols() != self.dim * self.dim {
                return Err(Error::dim(
                    format!("weight {} cols", i + 1),
                    self.dim * self.dim,
                    w.cols(),
                ));
            }
            if !w.all_finite() {
                return Err(Error::Argument(format!(
                    "weight {} has non-finite entries",
                    i + 1
                )));
            }
        }
        if self
            .step_sizes
            .iter()
            .chain(&self.thresholds)
            .any(|v| !v.is_finite())
        {
            return Err(Error::Argument(
                "step sizes and thresholds must be finite".into(),
            ));
        }
        if !self.mu.is_finite() || self.mu < 0.0 {
            return Err(Error::Argument(format!(
                "mu must be finite and non-negative, got {}",
                self.mu
            )));
        }
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 {
            return Err(Error::Argument(format!(
                "epsilon must be finite and positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Fresh parameters for an ensemble: every `W_t` row `i` is the
/// vectorized `i`-th sampling matrix, and all step sizes and
/// thresholds start at 0.01. Conventional `(mu, epsilon)` pairs are
/// `(0, 1e-8)` for expectation-valued data and `(1e-8, 1e-4)` for
/// sampled-frequency data.
pub fn init_params(
    ensemble: &MeasurementEnsemble,
    depth: usize,
    mu: f64,
    epsilon: f64,
) -> Result<NetworkParams> {
    if depth == 0 {
        return Err(Error::Argument("network depth must be at least 1".into()));
    }
    let d = ensemble.dim();
    let m = ensemble.count();
    let mut w = CMatrix::zeros(m, d * d);
    for (i, a) in ensemble.matrices().iter().enumerate() {
        w.row_mut(i).copy_from_slice(a.data());
    }
    NetworkParams::new(
        d,
        m,
        vec![w; depth],
        vec![0.01; depth],
        vec![0.01; depth],
        mu,
        epsilon,
    )
}

/// Per-hidden-layer intermediates kept for the backward pass.
#[derive(Debug, Clone)]
struct HiddenTrace {
    /// Factorization of the shrinkage input `A*(y_{t-1}; W_t)`.
    factors: SpectralFactors,
    /// Shrinkage output `S_t`.
    s: CMatrix,
    /// Re-measurement `z_t = A(S_t; W_t)`.
    z: Vec<Complex64>,
}

/// Everything the forward pass computed, layer by layer.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Layer activations `y_0..y_{T-1}`.
    pub y: Vec<Vec<Complex64>>,
    hidden: Vec<HiddenTrace>,
    final_factors: SpectralFactors,
    /// Output of the final shrinkage layer.
    pub x_temp: CMatrix,
    /// Hermitized `X_temp`.
    pub x_temp1: CMatrix,
    /// `X_temp1 + μ·diag(1..d)` — the matrix actually decomposed.
    pub x_temp2: CMatrix,
    /// Eigenvalues of `X_temp2`, ascending.
    pub eigenvalues: Vec<f64>,
    /// Matching eigenvectors (columns).
    pub eigenvectors: CMatrix,
    /// Eigenvalues clamped at zero.
    pub clamped: Vec<f64>,
    /// Clamped eigenvalues regularized and normalized to unit sum.
    pub normalized: Vec<f64>,
    /// The network output `U diag(normalized) U^H`.
    pub x_out: CMatrix,
}

/// Realified gradients, shaped like [`NetworkParams`]' learnable fields.
///
/// Complex entries follow the `∂L/∂Re + i·∂L/∂Im` convention, which is
/// what treating real and imaginary parts as independent real
/// parameters produces.
#[derive(Debug, Clone)]
pub struct Gradients {
    /// One `m × d²` gradient per weight matrix.
    pub weights: Vec<CMatrix>,
    /// Gradients of `δ_0..δ_{T-1}`.
    pub step_sizes: Vec<f64>,
    /// Gradients of `τ_1..τ_T`.
    pub thresholds: Vec<f64>,
}

impl Gradients {
    /// All-zero gradients matching `params`' shapes.
    pub fn zeros_like(params: &NetworkParams) -> Self {
        let t = params.depth();
        Gradients {
            weights: vec![CMatrix::zeros(params.meas_count, params.dim * params.dim); t],
            step_sizes: vec![0.0; t],
            thresholds: vec![0.0; t],
        }
    }

    fn add_assign(&mut self, other: &Gradients) {
        let one = Complex64::new(1.0, 0.0);
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.add_assign_scaled(one, b);
        }
        for (a, b) in self.step_sizes.iter_mut().zip(&other.step_sizes) {
            *a += b;
        }
        for (a, b) in self.thresholds.iter_mut().zip(&other.thresholds) {
            *a += b;
        }
    }
}

/// `vec(X^T)` — row-major flattening of the transpose.
fn flat_transpose(x: &CMatrix) -> Vec<Complex64> {
    let (r, c) = (x.rows(), x.cols());
    let mut out = vec![Complex64::new(0.0, 0.0); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[(i, j)];
        }
    }
    out
}

/// `vec(X^H)` — row-major flattening of the conjugate transpose.
fn flat_adjoint(x: &CMatrix) -> Vec<Complex64> {
    let (r, c) = (x.rows(), x.cols());
    let mut out = vec![Complex64::new(0.0, 0.0); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[(i, j)].conj();
        }
    }
    out
}

/// Layer measurement map: `z_i = tr[B_i X]` where `B_i` is row `i` of
/// `w` reshaped to `d×d`. Coincides with the ensemble map while the
/// rows hold Hermitian matrices.
fn w_map(w: &CMatrix, x: &CMatrix) -> Vec<Complex64> {
    // tr[B X] = Σ_pq B[p,q] X[q,p] = <row, vec(X^T)> without conjugation.
    let xt = flat_transpose(x);
    (0..w.rows())
        .map(|i| {
            w.row(i)
                .iter()
                .zip(&xt)
                .map(|(a, b)| a * b)
                .sum::<Complex64>()
        })
        .collect()
}

/// Adjoint of [`w_map`] under the Frobenius/ℓ² inner products:
/// `M = Σ_i y_i B_i^H`.
fn w_adjoint(w: &CMatrix, y: &[Complex64]) -> CMatrix {
    let d2 = w.cols();
    let d = (d2 as f64).sqrt().round() as usize;
    // Accumulate N[p,q] = Σ_i y_i conj(B_i[p,q]), then M = N^T.
    let mut n = vec![Complex64::new(0.0, 0.0); d2];
    for (i, &yi) in y.iter().enumerate() {
        if yi.re == 0.0 && yi.im == 0.0 {
            continue;
        }
        for (acc, b) in n.iter_mut().zip(w.row(i)) {
            *acc += yi * b.conj();
        }
    }
    let mut m = CMatrix::zeros(d, d);
    for p in 0..d {
        for q in 0..d {
            m[(q, p)] = n[p * d + q];
        }
    }
    m
}

/// `rows[i] += coeffs_i · vec(mat^H)` — the shared shape of both
/// weight-gradient contributions.
fn accumulate_weight_outer(gw: &mut CMatrix, coeffs: &[Complex64], mat: &CMatrix) {
    let flat = flat_adjoint(mat);
    for (i, &c) in coeffs.iter().enumerate() {
        if c.re == 0.0 && c.im == 0.0 {
            continue;
        }
        for (g, f) in gw.row_mut(i).iter_mut().zip(&flat) {
            *g += c * f;
        }
    }
}

fn check_finite_vec(y: &[Complex64], context: &str, layer: usize) -> Result<()> {
    if y.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        Ok(())
    } else {
        Err(Error::Overflow {
            context: context.into(),
            layer,
        })
    }
}

/// Entrywise finite and representable norm: a matrix whose norm
/// overflows would poison every decomposition downstream.
fn check_finite_mat(x: &CMatrix, context: &str, layer: usize) -> Result<()> {
    if x.all_finite() && x.frobenius_norm().is_finite() {
        Ok(())
    } else {
        Err(Error::Overflow {
            context: context.into(),
            layer,
        })
    }
}

/// Intermediates of [`output_layer`].
#[derive(Debug, Clone)]
pub struct OutputArtifacts {
    /// Hermitized input.
    pub x_temp1: CMatrix,
    /// Shifted matrix that was decomposed.
    pub x_temp2: CMatrix,
    /// Its eigenvalues, ascending.
    pub eigenvalues: Vec<f64>,
    /// Its eigenvectors (columns).
    pub eigenvectors: CMatrix,
    /// Eigenvalues clamped at zero.
    pub clamped: Vec<f64>,
    /// Clamped eigenvalues normalized to unit sum with the ε floor.
    pub normalized: Vec<f64>,
    /// Final projected matrix.
    pub x_out: CMatrix,
}

/// The constraint-enforcing output layer applied to a raw matrix:
/// hermitize, shift the diagonal by `μ·(1..d)`, eigendecompose, clamp
/// the spectrum at zero and normalize it (with an `ε` floor) to unit
/// sum. Returns every intermediate so callers can inspect or
/// differentiate the projection.
pub fn output_layer(x_temp: &CMatrix, mu: f64, epsilon: f64) -> Result<OutputArtifacts> {
    if !x_temp.is_square() {
        return Err(Error::dim(
            "output layer input",
            x_temp.rows(),
            x_temp.cols(),
        ));
    }
    if !epsilon.is_finite() || epsilon <= 0.0 {
        return Err(Error::Argument(format!(
            "epsilon must be finite and positive, got {epsilon}"
        )));
    }
    if !mu.is_finite() || mu < 0.0 {
        return Err(Error::Argument(format!(
            "mu must be finite and non-negative, got {mu}"
        )));
    }
    let d = x_temp.rows();
    let x_temp1 = hermitize(x_temp);
    let mut x_temp2 = x_temp1.clone();
    if mu != 0.0 {
        for i in 0..d {
            x_temp2[(i, i)] += Complex64::new(mu * (i + 1) as f64, 0.0);
        }
    }
    let e = eigh(&x_temp2)?;
    let clamped: Vec<f64> = e.eigenvalues.iter().map(|&l| l.max(0.0)).collect();
    let sum: f64 = clamped.iter().map(|c| c + epsilon).sum();
    let normalized: Vec<f64> = clamped.iter().map(|c| (c + epsilon) / sum).collect();
    let x_out = reconstruct(&e.eigenvectors, &normalized, &e.eigenvectors);
    Ok(OutputArtifacts {
        x_temp1,
        x_temp2,
        eigenvalues: e.eigenvalues,
        eigenvectors: e.eigenvectors,
        clamped,
        normalized,
        x_out,
    })
}

/// Run the network on one measurement record.
///
/// Returns the physical estimate and the full trace of intermediates
/// (the latter feeds [`backward`]). Errors if any intermediate turns
/// non-finite, naming the layer where it happened.
pub fn forward(params: &NetworkParams, b: &[f64]) -> Result<(DensityMatrix, ForwardTrace)> {
    params.validate()?;
    forward_validated(params, b)
}

/// [`forward`] minus the parameter validation, for batch drivers that
/// validate once up front.
fn forward_validated(params: &NetworkParams, b: &[f64]) -> Result<(DensityMatrix, ForwardTrace)> {
    if b.len() != params.meas_count {
        return Err(Error::dim(
            "forward measurement record",
            params.meas_count,
            b.len(),
        ));
    }
    if b.iter().any(|x| !x.is_finite()) {
        return Err(Error::Argument(
            "forward: measurement record has non-finite entries".into(),
        ));
    }
    let t_layers = params.depth();

    let y0: Vec<Complex64> = b
        .iter()
        .map(|&bi| Complex64::new(params.step_sizes[0] * bi, 0.0))
        .collect();
    check_finite_vec(&y0, "input scaling", 0)?;
    let mut y = Vec::with_capacity(t_layers);
    y.push(y0);

    let mut hidden = Vec::with_capacity(t_layers - 1);
    for t in 1..t_layers {
        let w = &params.weights[t - 1];
        let tau = params.thresholds[t - 1].max(0.0);
        let delta = params.step_sizes[t];
        let m_t = w_adjoint(w, &y[t - 1]);
        check_finite_mat(&m_t, "hidden-layer adjoint", t)?;
        let (s_t, factors) = shrink_with_factors(&m_t, tau)?;
        let z_t = w_map(w, &s_t);
        let y_t: Vec<Complex64> = y[t - 1]
            .iter()
            .zip(b.iter().zip(&z_t))
            .map(|(yi, (&bi, zi))| yi + delta * (Complex64::new(bi, 0.0) - zi))
            .collect();
        check_finite_vec(&y_t, "hidden-layer update", t)?;
        hidden.push(HiddenTrace {
            factors,
            s: s_t,
            z: z_t,
        });
        y.push(y_t);
    }

    let w_last = &params.weights[t_layers - 1];
    let tau_last = params.thresholds[t_layers - 1].max(0.0);
    let m_last = w_adjoint(w_last, &y[t_layers - 1]);
    check_finite_mat(&m_last, "final shrinkage input", t_layers)?;
    let (x_temp, final_factors) = shrink_with_factors(&m_last, tau_last)?;
    check_finite_mat(&x_temp, "final shrinkage output", t_layers)?;

    let out = output_layer(&x_temp, params.mu, params.epsilon)?;
    check_finite_mat(&out.x_out, "output layer", t_layers)?;

    let trace = ForwardTrace {
        y,
        hidden,
        final_factors,
        x_temp,
        x_temp1: out.x_temp1,
        x_temp2: out.x_temp2,
        eigenvalues: out.eigenvalues,
        eigenvectors: out.eigenvectors,
        clamped: out.clamped,
        normalized: out.normalized,
        x_out: out.x_out.clone(),
    };
    // The construction guarantees the density-matrix invariants: the
    // spectrum is (c+ε)/Σ(c+ε) > 0 with unit sum, in an orthonormal
    // basis; constructor-grade validation is for foreign data.
    Ok((DensityMatrix::from_trusted(out.x_out), trace))
}

/// NMSE over a batch: `(1/(M·d²)) Σ_i ‖X^(i) − forward(b^(i))‖²_F`.
pub fn nmse_loss(params: &NetworkParams, batch: &[(&CMatrix, &[f64])]) -> Result<f64> {
    params.validate()?;
    if batch.is_empty() {
        return Err(Error::Argument("nmse_loss: empty batch".into()));
    }
    let d = params.dim;
    let scale = 1.0 / (batch.len() as f64 * (d * d) as f64);
    let losses: Vec<Result<f64>> = batch
        .par_iter()
        .map(|(x, b)| {
            check_target_dims(x, d)?;
            let (_, tr) = forward_validated(params, b)?;
            Ok(tr.x_out.sub(x).frobenius_norm().powi(2))
        })
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(scale * total)
}

fn check_target_dims(x: &CMatrix, d: usize) -> Result<()> {
    if x.rows() != d || x.cols() != d {
        return Err(Error::dim(
            "batch target",
            d,
            if x.rows() != d { x.rows() } else { x.cols() },
        ));
    }
    Ok(())
}

/// Reverse-mode differentiation of the batch NMSE.
///
/// Returns the loss together with exact gradients for every learnable
/// parameter. Requires the output-layer spectrum of every sample to be
/// resolvable at the clamp kink: if two eigenvalues of some `X_temp2`
/// lie closer than `1e-12` on opposite sides of zero while the loss
/// couples the pair, a degeneracy error is returned advising a larger
/// `μ` (the diagonal shift separates the spectrum). Close pairs on the
/// same side of the kink are exact and never error.
pub fn backward(params: &NetworkParams, batch: &[(&CMatrix, &[f64])]) -> Result<(f64, Gradients)> {
    params.validate()?;
    if batch.is_empty() {
        return Err(Error::Argument("backward: empty batch".into()));
    }
    let d = params.dim;
    let scale = 1.0 / (batch.len() as f64 * (d * d) as f64);

    // Fixed-size chunks, each reduced sequentially, then combined in
    // chunk order: bit-reproducible regardless of thread count.
    let partials: Vec<Result<(f64, Gradients)>> = batch
        .par_chunks(BATCH_CHUNK)
        .map(|chunk| {
            let mut grads = Gradients::zeros_like(params);
            let mut loss = 0.0;
            for (x_target, b) in chunk {
                check_target_dims(x_target, d)?;
                let (_, tr) = forward_validated(params, b)?;
                let diff = tr.x_out.sub(x_target);
                loss += scale * diff.frobenius_norm().powi(2);
                let g_out = diff.scaled(2.0 * scale);
                backward_sample(params, &tr, &g_out, b, &mut grads)?;
            }
            Ok((loss, grads))
        })
        .collect();

    let mut loss = 0.0;
    let mut grads = Gradients::zeros_like(params);
    for p in partials {
        let (l, g) = p?;
        loss += l;
        grads.add_assign(&g);
    }

    for t in 0..params.depth() {
        if !grads.weights[t].all_finite() {
            return Err(Error::Overflow {
                context: "weight gradient".into(),
                layer: t + 1,
            });
        }
        if !grads.step_sizes[t].is_finite() {
            return Err(Error::Overflow {
                context: "step-size gradient".into(),
                layer: t,
            });
        }
        if !grads.thresholds[t].is_finite() {
            return Err(Error::Overflow {
                context: "threshold gradient".into(),
                layer: t + 1,
            });
        }
    }
    Ok((loss, grads))
}

/// Gradients of one sample accumulated into `grads`. `g_out` is
/// `∂L/∂X_out` in the realified-pair convention.
fn backward_sample(
    params: &NetworkParams,
    tr: &ForwardTrace,
    g_out: &CMatrix,
    b: &[f64],
    grads: &mut Gradients,
) -> Result<()> {
    let t_layers = params.depth();

    // ---- Output layer: X_out = U diag(λ') U^H with λ' = (max(λ,0)+ε)/Σ.
    let g_x_temp = output_layer_backward(
        g_out,
        &tr.eigenvectors,
        &tr.eigenvalues,
        &tr.clamped,
        &tr.normalized,
        params.mu,
        params.epsilon,
    )?;

    // ---- Final shrinkage layer (through W_T, τ_T, into y_{T-1}).
    let tau_last = params.thresholds[t_layers - 1];
    let (g_m, dtau) = shrink_backward(&tr.final_factors, tau_last.max(0.0), &g_x_temp);
    if tau_last > 0.0 {
        grads.thresholds[t_layers - 1] += dtau;
    }
    accumulate_weight_outer(&mut grads.weights[t_layers - 1], &tr.y[t_layers - 1], &g_m);
    let mut g_y = w_map(&params.weights[t_layers - 1], &g_m);

    // ---- Hidden layers, reversed.
    for t in (1..t_layers).rev() {
        let ht = &tr.hidden[t - 1];
        let delta = params.step_sizes[t];
        // y_t = y_{t-1} + δ_t (b - z_t)
        grads.step_sizes[t] += g_y
            .iter()
            .zip(b.iter().zip(&ht.z))
            .map(|(gy, (&bi, zi))| (gy.conj() * (Complex64::new(bi, 0.0) - zi)).re)
            .sum::<f64>();
        let g_z: Vec<Complex64> = g_y.iter().map(|gy| -delta * gy).collect();
        // Through the re-measurement z_t = A(S_t; W_t).
        accumulate_weight_outer(&mut grads.weights[t - 1], &g_z, &ht.s);
        let g_s = w_adjoint(&params.weights[t - 1], &g_z);
        // Through the shrinkage S_t = shrink(M_t, τ_t).
        let tau_t = params.thresholds[t - 1];
        let (g_m, dtau) = shrink_backward(&ht.factors, tau_t.max(0.0), &g_s);
        if tau_t > 0.0 {
            grads.thresholds[t - 1] += dtau;
        }
        // Through the adjoint M_t = A*(y_{t-1}; W_t), plus the skip path.
        accumulate_weight_outer(&mut grads.weights[t - 1], &tr.y[t - 1], &g_m);
        let through = w_map(&params.weights[t - 1], &g_m);
        for (gy, th) in g_y.iter_mut().zip(through) {
            *gy += th;
        }
    }

    // ---- Input scaling y_0 = δ_0 b.
    grads.step_sizes[0] += g_y
        .iter()
        .zip(b)
        .map(|(gy, &bi)| (gy.conj() * bi).re)
        .sum::<f64>();
    Ok(())
}

/// Adjoint of the output layer: maps `∂L/∂X_out` back to `∂L/∂X_temp`.
///
/// With `g = U^H G U`, eigenvector rotations contribute couplings
/// `(c_q - c_p)/((λ_q - λ_p)·S)` (clamping is 1-Lipschitz, so these are
/// bounded by `1/S`), and the eigenvalue path contributes a diagonal
/// term through the clamp indicator and the normalization. The result
/// is hermitized because the layer only ever sees the Hermitian part of
/// its input.
fn output_layer_backward(
    g_out: &CMatrix,
    u: &CMatrix,
    lambda: &[f64],
    clamped: &[f64],
    normalized: &[f64],
    mu: f64,
    epsilon: f64,
) -> Result<CMatrix> {
    let d = lambda.len();
    let sum: f64 = clamped.iter().map(|c| c + epsilon).sum();
    let g = u.adjoint().mul(g_out).mul(u);

    // Weighted mean of the diagonal upstream under the output spectrum —
    // the normalization couples every eigenvalue to every other.
    let mean: f64 = (0..d).map(|k| g[(k, k)].re * normalized[k]).sum();

    let mut h = CMatrix::zeros(d, d);
    for p in 0..d {
        for q in 0..d {
            if p == q {
                if lambda[p] > 0.0 {
                    h[(p, p)] = Complex64::new((g[(p, p)].re - mean) / sum, 0.0);
                }
                continue;
            }
            let num = clamped[q] - clamped[p];
            let den = lambda[q] - lambda[p];
            let coeff = if den == 0.0 {
                // An exact tie sits on the same side of the clamp kink by
                // construction: kept pairs rotate with the pure
                // normalization factor, clamped pairs not at all.
                if lambda[p] > 0.0 {
                    1.0 / sum
                } else {
                    0.0
                }
            } else {
                // A close pair is still well-conditioned when both sides
                // clamp identically: num is 0 (both clamped) or bitwise
                // equal to den (both kept), making the ratio exact. Only
                // pairs straddling the clamp kink amplify rounding noise.
                let coupled = g[(p, q)].re != 0.0 || g[(p, q)].im != 0.0;
                if den.abs() < EIGENGAP_TOL && num != 0.0 && num != den && coupled {
                    return Err(Error::Degeneracy(format!(
                        "output-layer eigenvalues {:.6e} and {:.6e} are separated by less \
                         than {EIGENGAP_TOL:.0e}; {}",
                        lambda[p],
                        lambda[q],
                        if mu == 0.0 {
                            "set mu > 0 to break the degeneracy"
                        } else {
                            "increase mu to break the degeneracy"
                        }
                    )));
                }
                num / (den * sum)
            };
            if coeff != 0.0 {
                h[(p, q)] = coeff * g[(p, q)];
            }
        }
    }
    let g_a = u.mul(&h).mul(&u.adjoint());
    Ok(hermitize(&g_a))
}

/// Adjoint of `S = U max(Σ − τ, 0) V^H` given the input's factors:
/// returns `∂L/∂M` and the scalar `∂L/∂τ` contribution.
///
/// Uses the spectral-function rule with couplings
/// `P = (σ_i f_i − σ_j f_j)/(σ_i² − σ_j²)` and
/// `Q = (σ_j f_i − σ_i f_j)/(σ_i² − σ_j²)` for `f(σ) = max(σ − τ, 0)`;
/// an active pair reduces them to `1 ∓ τ/(σ_i + σ_j)`, an inactive
/// pair to zero, and the kink `σ = τ` takes the zero subgradient. No
/// denominator can degenerate: active pairs divide by `σ_i + σ_j > 0`
/// and mixed pairs are strictly separated by the threshold between
/// them.
fn shrink_backward(f: &SpectralFactors, tau: f64, g_s: &CMatrix) -> (CMatrix, f64) {
    let d = f.sigma.len();
    let g = f.u.adjoint().mul(g_s).mul(&f.v);
    let mut h = CMatrix::zeros(d, d);
    let mut dtau = 0.0;
    for i in 0..d {
        let si = f.sigma[i];
        let active_i = si > tau;
        if active_i {
            dtau -= g[(i, i)].re;
        }
        for j in 0..d {
            let sj = f.sigma[j];
            let active_j = sj > tau;
            let (p, q) = if active_i && active_j {
                let denom = si + sj;
                (1.0 - tau / denom, tau / denom)
            } else if active_i {
                // σ_i > τ ≥ σ_j keeps both factors strictly positive.
                let fi = si - tau;
                let denom = si * si - sj * sj;
                (si * fi / denom, sj * fi / denom)
            } else if active_j {
                let fj = sj - tau;
                let denom = sj * sj - si * si;
                (sj * fj / denom, si * fj / denom)
            } else {
                continue;
            };
            h[(i, j)] = p * g[(i, j)] + q * g[(j, i)].conj();
        }
    }
    (f.u.mul(&h).mul(&f.v.adjoint()), dtau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numlin::gaussian_matrix;
    use crate::quantum::fidelity;
    use crate::svt::{run_svt, SvtConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    /// A small random network plus a compatible measurement record.
    fn random_setup(
        n_qubits: usize,
        m: usize,
        depth: usize,
        mu: f64,
        seed: u64,
    ) -> (NetworkParams, Vec<f64>, CMatrix) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let ens = MeasurementEnsemble::pauli_random(n_qubits, m, &mut rng).unwrap();
        let d = ens.dim();
        let rho = DensityMatrix::random_rank(d, 2.min(d), &mut rng).unwrap();
        let b = ens.measure(&rho);
        let mut params = init_params(&ens, depth, mu, 1e-8).unwrap();
        // Perturb every parameter so nothing sits at a symmetric point.
        for w in &mut params.weights {
            let noise = gaussian_matrix(w.rows(), w.cols(), &mut rng);
            w.add_assign_scaled(c(0.05, 0.0), &noise);
        }
        for s in &mut params.step_sizes {
            *s += rng.gen_range(-0.004..0.02);
        }
        for t in &mut params.thresholds {
            *t += rng.gen_range(0.0..0.02);
        }
        (params, b, rho.matrix().clone())
    }

    #[test]
    fn zero_input_scaling_outputs_maximally_mixed() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let ens = MeasurementEnsemble::pauli_random(2, 6, &mut rng).unwrap();
        let mut params = init_params(&ens, 1, 0.0, 1e-8).unwrap();
        params.step_sizes[0] = 0.0;
        let b = vec![0.3; 6];
        let (rho, tr) = forward(&params, &b).unwrap();
        assert!(tr.x_temp.frobenius_norm() == 0.0);
        let expected = CMatrix::identity(4).scaled(0.25);
        assert!(rho.matrix().sub(&expected).frobenius_norm() < 1e-14);
    }

    #[test]
    fn output_layer_clamps_then_normalizes() {
        // diag(0.6, -0.1) with vanishing ε projects to diag(1, 0).
        let x = CMatrix::from_rows(&[
            vec![c(0.6, 0.0), c(0.0, 0.0)],
            vec![c(0.0, 0.0), c(-0.1, 0.0)],
        ]);
        let out = output_layer(&x, 0.0, 1e-12).unwrap();
        let target = CMatrix::from_rows(&[
            vec![c(1.0, 0.0), c(0.0, 0.0)],
            vec![c(0.0, 0.0), c(0.0, 0.0)],
        ]);
        assert!(out.x_out.sub(&target).frobenius_norm() < 1e-10);
    }

    #[test]
    fn output_layer_is_nearly_idempotent_on_valid_states() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        for _ in 0..25 {
            let rho = DensityMatrix::random_rank(4, 2, &mut rng).unwrap();
            let eps = 1e-8;
            let out = output_layer(rho.matrix(), 0.0, eps).unwrap();
            let drift = out.x_out.sub(rho.matrix()).frobenius_norm();
            assert!(
                drift <= 4.0 * eps + 1e-8,
                "projection moved a valid state by {drift}"
            );
        }
    }

    #[test]
    fn forward_outputs_are_physical_across_scales() {
        let mut checked = 0usize;
        for &(n_qubits, m) in &[(2usize, 8usize), (4, 40)] {
            let runs = if n_qubits == 4 { 40 } else { 150 };
            for run in 0..runs {
                let (params, mut b, _) =
                    random_setup(n_qubits, m, 1 + run % 3, 1e-9, 1000 + run as u64);
                let norm: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                let target = [1e-6, 1.0, 1e3][run % 3];
                for bi in &mut b {
                    *bi *= target / norm.max(1e-300);
                }
                let (rho, _) = forward(&params, &b).unwrap();
                // Constructor-grade validation of the output.
                assert!(DensityMatrix::new(rho.matrix().clone()).is_ok());
                checked += 1;
            }
        }
        assert!(checked >= 190);
    }

    #[test]
    fn tied_parameters_reproduce_solver_iterates() {
        // With W_t = ensemble matrices, δ_t = δ, τ_t = τ, the network's
        // pre-projection X_temp after T layers equals the solver state
        // reached from y = δb — the (T+1)-th iterate in the solver's own
        // count, whose first step is the trivial X¹ = shrink(0) = 0.
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        for &(n_qubits, m) in &[(2usize, 10usize), (4, 103)] {
            let ens = if n_qubits == 4 {
                MeasurementEnsemble::pauli_random_with_trace(n_qubits, m, &mut rng).unwrap()
            } else {
                MeasurementEnsemble::pauli_random(n_qubits, m, &mut rng).unwrap()
            };
            let d = ens.dim();
            let rho = DensityMatrix::random_rank(d, 3.min(d), &mut rng).unwrap();
            let b = ens.measure(&rho);
            let (tau, delta) = (0.15, 0.04);
            for &t_layers in &[1usize, 2, 5] {
                let mut params = init_params(&ens, t_layers, 0.0, 1e-8).unwrap();
                for s in &mut params.step_sizes {
                    *s = delta;
                }
                for t in &mut params.thresholds {
                    *t = tau;
                }
                let (_, tr) = forward(&params, &b).unwrap();

                let cfg = SvtConfig {
                    tau,
                    delta,
                    max_iters: t_layers + 1,
                    rel_tol: 1e-30,
                    divergence_bound: 1e12,
                };
                let solver = run_svt(&ens, &b, &cfg).unwrap();
                assert_eq!(solver.iterations, t_layers + 1);
                let gap = tr.x_temp.sub(&solver.estimate).frobenius_norm();
                assert!(
                    gap <= 1e-10,
                    "unrolled network diverged from solver: d={d} T={t_layers} gap={gap:.3e}"
                );
            }
        }
    }

    #[test]
    fn nmse_of_exact_match_is_zero_and_single_pair_oracle() {
        // Forced X_temp = 0 → X_out = I/2; target diag(1,0) at d=2 gives
        // (1/4)·‖diag(1/2,−1/2)‖² = 1/8 exactly.
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let ens = MeasurementEnsemble::pauli(1, vec![0, 1, 2]).unwrap();
        let mut params = init_params(&ens, 1, 0.0, 1e-8).unwrap();
        params.step_sizes[0] = 0.0;
        let b = {
            let rho = DensityMatrix::random_rank(2, 1, &mut rng).unwrap();
            ens.measure(&rho)
        };
        let target = CMatrix::from_rows(&[
            vec![c(1.0, 0.0), c(0.0, 0.0)],
            vec![c(0.0, 0.0), c(0.0, 0.0)],
        ]);
        let loss = nmse_loss(&params, &[(&target, &b)]).unwrap();
        assert!((loss - 0.125).abs() < 1e-14);

        // A batch whose targets equal the outputs has zero loss; the
        // loss is also invariant under batch permutation.
        let (params2, b2, _) = random_setup(2, 8, 2, 0.0, 42);
        let (rho_out, _) = forward(&params2, &b2).unwrap();
        let out = rho_out.matrix().clone();
        let zero = nmse_loss(&params2, &[(&out, &b2)]).unwrap();
        assert!(zero < 1e-24);

        let (params3, b3, x3) = random_setup(2, 8, 2, 0.0, 43);
        let pair_a = nmse_loss(&params3, &[(&x3, &b3), (&out, &b2)]);
        let pair_b = nmse_loss(&params3, &[(&out, &b2), (&x3, &b3)]);
        assert_eq!(pair_a.unwrap(), pair_b.unwrap());
    }

    #[test]
    fn perfect_fit_has_vanishing_gradients() {
        let (params, b, _) = random_setup(2, 8, 3, 0.0, 6);
        let (rho, _) = forward(&params, &b).unwrap();
        let target = rho.matrix().clone();
        let (loss, grads) = backward(&params, &[(&target, &b)]).unwrap();
        assert!(loss < 1e-24);
        for gw in &grads.weights {
            assert!(gw.max_abs() < 1e-12);
        }
        for g in grads.step_sizes.iter().chain(&grads.thresholds) {
            assert!(g.abs() < 1e-12);
        }
    }

    /// Central finite difference of the batch NMSE along one scalar
    /// perturbation of the parameters.
    fn fd_loss(
        params: &NetworkParams,
        batch: &[(&CMatrix, &[f64])],
        perturb: &dyn Fn(&mut NetworkParams, f64),
        step: f64,
    ) -> f64 {
        let mut plus = params.clone();
        perturb(&mut plus, step);
        let mut minus = params.clone();
        perturb(&mut minus, -step);
        (nmse_loss(&plus, batch).unwrap() - nmse_loss(&minus, batch).unwrap()) / (2.0 * step)
    }

    fn assert_close(analytic: f64, numeric: f64, what: &str) {
        let tol = 1e-4 * analytic.abs().max(numeric.abs()) + 1e-8;
        assert!(
            (analytic - numeric).abs() <= tol,
            "{what}: analytic {analytic:.9e} vs finite difference {numeric:.9e}"
        );
    }

    #[test]
    fn gradients_match_finite_differences() {
        let step = 1e-5;
        for seed in 0..5u64 {
            // μ > 0 keeps the output spectrum simple even when the
            // random thresholds truncate; μ = 0 cases are covered below.
            let (params, _, _) = random_setup(2, 10, 3, 1e-6, 100 + seed);
            let mut rng = ChaCha12Rng::seed_from_u64(200 + seed);
            let mut batch_data = Vec::new();
            for _ in 0..4 {
                let rho = DensityMatrix::random_rank(4, 2, &mut rng).unwrap();
                let ens = MeasurementEnsemble::pauli_random(2, 10, &mut rng).unwrap();
                let b = ens.measure(&rho);
                batch_data.push((rho.matrix().clone(), b));
            }
            let batch: Vec<(&CMatrix, &[f64])> =
                batch_data.iter().map(|(x, b)| (x, b.as_slice())).collect();

            let (_, grads) = backward(&params, &batch).unwrap();

            for t in 0..params.depth() {
                // Sampled entries of W_t: a fixed stride covers every
                // region of the matrix without 160 FD pairs per layer.
                for k in (t % 3..params.meas_count * 16).step_by(7) {
                    let (i, j) = (k / 16, k % 16);
                    let re = fd_loss(
                        &params,
                        &batch,
                        &|p: &mut NetworkParams, h: f64| {
                            p.weights[t][(i, j)] += c(h, 0.0);
                        },
                        step,
                    );
                    assert_close(grads.weights[t][(i, j)].re, re, "W re");
                    let im = fd_loss(
                        &params,
                        &batch,
                        &|p: &mut NetworkParams, h: f64| {
                            p.weights[t][(i, j)] += c(0.0, h);
                        },
                        step,
                    );
                    assert_close(grads.weights[t][(i, j)].im, im, "W im");
                }
                let ds = fd_loss(
                    &params,
                    &batch,
                    &|p: &mut NetworkParams, h: f64| p.step_sizes[t] += h,
                    step,
                );
                assert_close(grads.step_sizes[t], ds, "delta");
                let dt = fd_loss(
                    &params,
                    &batch,
                    &|p: &mut NetworkParams, h: f64| p.thresholds[t] += h,
                    step,
                );
                assert_close(grads.thresholds[t], dt, "tau");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_without_mu() {
        // Same check at μ = 0 with thresholds small enough that the
        // shrinkage keeps full rank, so the spectrum stays simple.
        let step = 1e-5;
        for seed in 0..3u64 {
            let (mut params, _, _) = random_setup(2, 10, 2, 0.0, 300 + seed);
            for t in &mut params.thresholds {
                *t = 1e-4;
            }
            let mut rng = ChaCha12Rng::seed_from_u64(400 + seed);
            let rho = DensityMatrix::random_rank(4, 2, &mut rng).unwrap();
            let ens = MeasurementEnsemble::pauli_random(2, 10, &mut rng).unwrap();
            let b = ens.measure(&rho);
            let x = rho.matrix().clone();
            let batch: Vec<(&CMatrix, &[f64])> = vec![(&x, b.as_slice())];

            let (_, grads) = backward(&params, &batch).unwrap();
            for t in 0..params.depth() {
                let ds = fd_loss(
                    &params,
                    &batch,
                    &|p: &mut NetworkParams, h: f64| p.step_sizes[t] += h,
                    step,
                );
                assert_close(grads.step_sizes[t], ds, "delta (mu = 0)");
                for &(i, j) in &[(0usize, 0usize), (3, 7), (9, 15)] {
                    let re = fd_loss(
                        &params,
                        &batch,
                        &|p: &mut NetworkParams, h: f64| {
                            p.weights[t][(i, j)] += c(h, 0.0);
                        },
                        step,
                    );
                    assert_close(grads.weights[t][(i, j)].re, re, "W re (mu = 0)");
                }
            }
        }
    }

    #[test]
    fn input_scaling_gradient_matches_directional_derivative() {
        let (params, b, x) = random_setup(2, 9, 2, 1e-7, 7);
        let batch: Vec<(&CMatrix, &[f64])> = vec![(&x, b.as_slice())];
        let (_, grads) = backward(&params, &batch).unwrap();
        let fd = fd_loss(
            &params,
            &batch,
            &|p: &mut NetworkParams, h: f64| p.step_sizes[0] += h,
            1e-5,
        );
        assert_close(grads.step_sizes[0], fd, "delta_0");
    }

    #[test]
    fn init_rows_are_the_ensemble_matrices() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let ens = MeasurementEnsemble::pauli_random(2, 7, &mut rng).unwrap();
        let params = init_params(&ens, 3, 0.0, 1e-8).unwrap();
        assert_eq!(params.depth(), 3);
        for t in 0..3 {
            for (i, a) in ens.matrices().iter().enumerate() {
                assert_eq!(params.weights[t].row(i), a.data(), "W_{t} row {i}");
            }
        }
        assert!(params.step_sizes.iter().all(|&s| s == 0.01));
        assert!(params.thresholds.iter().all(|&t| t == 0.01));
    }

    #[test]
    fn trained_shapes_are_validated() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let ens = MeasurementEnsemble::pauli_random(2, 5, &mut rng).unwrap();
        let good = init_params(&ens, 2, 0.0, 1e-8).unwrap();
        let mut bad = good.clone();
        bad.step_sizes.pop();
        assert!(bad.validate().is_err());
        let mut bad = good.clone();
        bad.epsilon = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = good;
        bad.mu = -1.0;
        assert!(bad.validate().is_err());
        assert!(init_params(&ens, 0, 0.0, 1e-8).is_err());
    }

    #[test]
    fn degenerate_output_spectrum_is_reported() {
        // A final-layer output with two eigenvalues closer than the
        // resolvable gap on OPPOSITE sides of the clamp: backward must
        // refuse at μ = 0 and advise the fix.
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let ens = MeasurementEnsemble::pauli(1, vec![0, 1, 2]).unwrap();
        let mut params = init_params(&ens, 1, 0.0, 1e-8).unwrap();
        params.thresholds[0] = 0.0;
        params.step_sizes[0] = 1.0;
        // Row 0 reshapes to diag(-1e-13, 2e-13); rows 1, 2 to zero:
        // X_temp = A*(b) then has a near-tied kink-straddling spectrum.
        let mut w = CMatrix::zeros(3, 4);
        w[(0, 0)] = c(-1e-13, 0.0);
        w[(0, 3)] = c(2e-13, 0.0);
        params.weights[0] = w;
        let b = vec![1.0, 0.0, 0.0];
        let rho = DensityMatrix::random_rank(2, 1, &mut rng).unwrap();
        let target = rho.matrix().clone();
        let err = backward(&params, &[(&target, b.as_slice())]).unwrap_err();
        assert!(matches!(err, Error::Degeneracy(_)), "got {err:?}");
        assert!(
            err.to_string().contains("mu"),
            "degeneracy error should advise mu"
        );

        // The documented fix — μ > 0 — makes the same batch differentiable.
        params.mu = 1e-8;
        assert!(backward(&params, &[(&target, b.as_slice())]).is_ok());

        // A near-tied pair on the SAME side of the clamp is exact (the
        // coupling ratio collapses to 1/sum bitwise) and must not error.
        params.mu = 0.0;
        let mut w = CMatrix::zeros(3, 4);
        w[(0, 0)] = c(0.5, 0.0);
        w[(0, 3)] = c(0.5 + 3e-13, 0.0);
        params.weights[0] = w;
        assert!(backward(&params, &[(&target, b.as_slice())]).is_ok());
    }

    #[test]
    fn forward_rejects_bad_records_and_names_overflow_layers() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let ens = MeasurementEnsemble::pauli_random(2, 6, &mut rng).unwrap();
        let params = init_params(&ens, 2, 0.0, 1e-8).unwrap();
        assert!(matches!(
            forward(&params, &[1.0; 5]),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(
            forward(&params, &[f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0]),
            Err(Error::Argument(_))
        ));
        // A gigantic step size explodes the hidden update.
        let mut hot = params.clone();
        hot.step_sizes = vec![1e300, 1e300];
        let err = forward(&hot, &[1.0; 6]).unwrap_err();
        match err {
            Error::Overflow { layer, .. } => assert!(layer <= 2),
            other => panic!("expected overflow, got {other:?}"),
        }
    }

    #[test]
    fn network_estimate_beats_raw_truncation_on_easy_case() {
        // Smoke test that the projection produces sensible physics: an
        // untrained identity-initialized network at solver-like
        // parameters still lands near the truth on an easy instance.
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let ens = MeasurementEnsemble::pauli_random(2, 15, &mut rng).unwrap();
        let rho = DensityMatrix::random_rank(4, 1, &mut rng).unwrap();
        let b = ens.measure(&rho);
        let mut params = init_params(&ens, 5, 0.0, 1e-8).unwrap();
        for s in &mut params.step_sizes {
            *s = 0.3;
        }
        for t in &mut params.thresholds {
            *t = 0.05;
        }
        let (est, _) = forward(&params, &b).unwrap();
        let fid = fidelity(est.matrix(), rho.matrix()).unwrap();
        assert!(
            fid > 0.5,
            "projected estimate unreasonably far: fidelity {fid}"
        );
    }
}
