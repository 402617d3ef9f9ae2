//! Dataset generation, ADAM optimization with validation-based early
//! stopping, evaluation statistics, and persistence of datasets and
//! checkpoints.
//!
//! A [`Dataset`] holds (state, measurement record) pairs split into
//! train/validation/test sections, together with the ensemble that
//! produced the records. [`train_loop`] runs seeded mini-batch ADAM over
//! a network's parameters, validating on a fixed cadence and returning
//! the best-validation snapshot. [`evaluate`] reduces a split to the
//! summary statistics (fidelity, trace distance, rank, and — for
//! frequency data — classical fidelity). Datasets persist to a binary
//! container, checkpoints to a self-describing JSON document; both carry
//! version tags and content checksums.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lqst::{backward, forward, nmse_loss, Gradients, NetworkParams};
use crate::numlin::CMatrix;
use crate::quantum::{
    classic_fidelity, fidelity, pauli4_povm, povm_probabilities, rank_estimate, sample_povm,
    trace_distance, DensityMatrix, EnsembleKind, MeasurementEnsemble, RANK_THRESHOLD,
};

/// Magic bytes opening every dataset file.
const DATASET_MAGIC: &[u8; 8] = b"LQSTDATA";
/// Dataset container version this build reads and writes.
const DATASET_VERSION: u32 = 1;
/// Format tag of checkpoint documents.
const CHECKPOINT_FORMAT: &str = "lqst-checkpoint";
/// Checkpoint version this build reads and writes.
const CHECKPOINT_VERSION: u32 = 1;
/// RNG stream reserved for ensemble selection; samples use streams
/// `0..count`, which never collide with this.
const ENSEMBLE_STREAM: u64 = u64::MAX;

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

/// Recipe for [`gen_dataset`].
#[derive(Debug, Clone)]
pub struct DatasetConfig {
    /// Number of qubits (dimension is `2^n_qubits`).
    pub n_qubits: usize,
    /// Rank of the random target states.
    pub rank: usize,
    /// Expectation-value or frequency data.
    pub kind: EnsembleKind,
    /// Number of measurement rows `m`.
    pub meas_count: usize,
    /// Explicit observable/outcome codes. `None` draws them from the
    /// master seed: a random Pauli selection augmented with the identity
    /// row (so the trace is observed), or a random POVM outcome subset.
    pub codes: Option<Vec<usize>>,
    /// Split sizes (train, validation, test).
    pub sizes: (usize, usize, usize),
    /// Shots per sample; required for frequency data, rejected otherwise.
    pub n_avg: Option<u64>,
    /// Master seed; everything below derives from it.
    pub seed: u64,
}

/// Collection of (state, measurement record) pairs with split bookkeeping
/// and the generating ensemble.
#[derive(Debug, Clone)]
pub struct Dataset {
    kind: EnsembleKind,
    n_qubits: usize,
    rank: usize,
    n_avg: Option<u64>,
    seed: u64,
    ensemble: MeasurementEnsemble,
    samples: Vec<(DensityMatrix, Vec<f64>)>,
    sizes: (usize, usize, usize),
}

impl Dataset {
    /// Data kind.
    pub fn kind(&self) -> EnsembleKind {
        self.kind
    }

    /// Number of qubits.
    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    /// Hilbert-space dimension.
    pub fn dim(&self) -> usize {
        self.ensemble.dim()
    }

    /// Measurement rows per sample.
    pub fn meas_count(&self) -> usize {
        self.ensemble.count()
    }

    /// Rank of the generated states.
    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Shots per sample (frequency data only).
    pub fn n_avg(&self) -> Option<u64> {
        self.n_avg
    }

    /// Master seed the dataset was generated from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// The measurement ensemble behind every record.
    pub fn ensemble(&self) -> &MeasurementEnsemble {
        &self.ensemble
    }

    /// All samples, ordered train, then validation, then test.
    pub fn samples(&self) -> &[(DensityMatrix, Vec<f64>)] {
        &self.samples
    }

    /// Split sizes (train, validation, test).
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        self.sizes
    }

    /// Training split.
    pub fn train(&self) -> &[(DensityMatrix, Vec<f64>)] {
        &self.samples[..self.sizes.0]
    }

    /// Validation split.
    pub fn validation(&self) -> &[(DensityMatrix, Vec<f64>)] {
        &self.samples[self.sizes.0..self.sizes.0 + self.sizes.1]
    }

    /// Test split.
    pub fn test(&self) -> &[(DensityMatrix, Vec<f64>)] {
        &self.samples[self.sizes.0 + self.sizes.1..]
    }
}

/// Generates a dataset of random rank-`r` states and their measurement
/// records, fully determined by the config's master seed.
///
/// States come from the Hilbert–Schmidt rank-`r` construction; records
/// are exact expectation values for Pauli data and empirical `n_avg`-shot
/// outcome frequencies for POVM data. Each sample draws from its own RNG
/// stream derived from the master seed, so generation parallelizes
/// without affecting the result.
pub fn gen_dataset(config: &DatasetConfig) -> Result<Dataset> {
    if config.n_qubits == 0 {
        return Err(Error::Argument(
            "gen_dataset: n_qubits must be positive".into(),
        ));
    }
    let d = 1usize << config.n_qubits;
    if config.rank == 0 || config.rank > d {
        return Err(Error::Argument(format!(
            "gen_dataset: rank {} invalid for dimension {d}",
            config.rank
        )));
    }
    let (n_train, n_val, n_test) = config.sizes;
    let total = n_train + n_val + n_test;
    if total == 0 {
        return Err(Error::Argument("gen_dataset: no samples requested".into()));
    }
    let n_avg = match (config.kind, config.n_avg) {
        (EnsembleKind::Povm, Some(n)) if n > 0 => Some(n),
        (EnsembleKind::Povm, _) => {
            return Err(Error::Argument(
                "gen_dataset: POVM data requires a positive n_avg".into(),
            ))
        }
        (EnsembleKind::PauliExpectation, None) => None,
        (EnsembleKind::PauliExpectation, Some(_)) => {
            return Err(Error::Argument(
                "gen_dataset: n_avg applies only to POVM data".into(),
            ))
        }
    };
    if let Some(codes) = &config.codes {
        if codes.len() != config.meas_count {
            return Err(Error::dim(
                "gen_dataset codes",
                config.meas_count,
                codes.len(),
            ));
        }
    }

    let mut erng = ChaCha12Rng::seed_from_u64(config.seed);
    erng.set_stream(ENSEMBLE_STREAM);
    let ensemble = match (config.kind, &config.codes) {
        (EnsembleKind::PauliExpectation, Some(codes)) => {
            MeasurementEnsemble::pauli(config.n_qubits, codes.clone())?
        }
        (EnsembleKind::PauliExpectation, None) => MeasurementEnsemble::pauli_random_with_trace(
            config.n_qubits,
            config.meas_count,
            &mut erng,
        )?,
        (EnsembleKind::Povm, Some(codes)) => {
            MeasurementEnsemble::povm(config.n_qubits, codes.clone())?
        }
        (EnsembleKind::Povm, None) => {
            MeasurementEnsemble::povm_restricted(config.n_qubits, config.meas_count, &mut erng)?
        }
    };

    // Frequencies are sampled from the full outcome distribution and then
    // restricted to the ensemble's outcomes, mirroring an experiment that
    // records every shot but uses only part of the histogram.
    let full_povm = match config.kind {
        EnsembleKind::Povm => Some(pauli4_povm(config.n_qubits)?),
        EnsembleKind::PauliExpectation => None,
    };

    let samples: Vec<(DensityMatrix, Vec<f64>)> = (0..total)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
            rng.set_stream(i as u64);
            let state = DensityMatrix::random_rank(d, config.rank, &mut rng)?;
            let b = match (&full_povm, n_avg) {
                (Some(elements), Some(shots)) => {
                    let p = povm_probabilities(&state, elements)?;
                    let freqs = sample_povm(&p, shots, &mut rng)?;
                    ensemble.codes().iter().map(|&c| freqs[c]).collect()
                }
                _ => ensemble.measure(&state),
            };
            Ok((state, b))
        })
        .collect::<Result<_>>()?;

    Ok(Dataset {
        kind: config.kind,
        n_qubits: config.n_qubits,
        rank: config.rank,
        n_avg,
        seed: config.seed,
        ensemble,
        samples,
        sizes: config.sizes,
    })
}

// ---------------------------------------------------------------------------
// Dataset persistence
// ---------------------------------------------------------------------------

/// Byte count of one stored sample.
fn sample_bytes(d: usize, m: usize) -> usize {
    (2 * d * d + m) * 8
}

/// Writer that feeds every byte to both the file and a running SHA-256.
struct HashingWriter<W: Write> {
    inner: W,
    hasher: Sha256,
}

impl<W: Write> HashingWriter<W> {
    fn new(inner: W) -> Self {
        HashingWriter {
            inner,
            hasher: Sha256::new(),
        }
    }

    fn put(&mut self, bytes: &[u8]) -> Result<()> {
        self.hasher.update(bytes);
        self.inner.write_all(bytes)?;
        Ok(())
    }

    fn put_f64s(&mut self, values: impl Iterator<Item = f64>) -> Result<()> {
        let mut buf = Vec::with_capacity(4096);
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
            if buf.len() >= 4096 {
                self.put(&std::mem::take(&mut buf))?;
                buf.reserve(4096);
            }
        }
        self.put(&buf)
    }
}

/// Serializes a dataset to the binary container: magic, version, header,
/// contiguous little-endian doubles per sample (state real parts, state
/// imaginary parts, record values), and a trailing SHA-256 of everything
/// before it.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut w = HashingWriter::new(BufWriter::new(file));
    w.put(DATASET_MAGIC)?;
    w.put(&DATASET_VERSION.to_le_bytes())?;
    let kind_byte: u8 = match dataset.kind {
        EnsembleKind::PauliExpectation => 0,
        EnsembleKind::Povm => 1,
    };
    w.put(&[kind_byte])?;
    w.put(&(dataset.n_qubits as u32).to_le_bytes())?;
    w.put(&(dataset.meas_count() as u32).to_le_bytes())?;
    w.put(&(dataset.rank as u32).to_le_bytes())?;
    let (n_train, n_val, n_test) = dataset.sizes;
    w.put(&(n_train as u64).to_le_bytes())?;
    w.put(&(n_val as u64).to_le_bytes())?;
    w.put(&(n_test as u64).to_le_bytes())?;
    w.put(&dataset.n_avg.unwrap_or(0).to_le_bytes())?;
    w.put(&dataset.seed.to_le_bytes())?;
    for &code in dataset.ensemble.codes() {
        w.put(&(code as u64).to_le_bytes())?;
    }
    for (state, b) in &dataset.samples {
        let data = state.matrix().data();
        w.put_f64s(data.iter().map(|z| z.re))?;
        w.put_f64s(data.iter().map(|z| z.im))?;
        w.put_f64s(b.iter().copied())?;
    }
    let digest = w.hasher.finalize();
    let mut inner = w.inner;
    inner.write_all(&digest)?;
    inner.flush()?;
    Ok(())
}

/// Little-endian cursor over a byte buffer; overruns become malformed-file
/// errors rather than panics.
struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Malformed("dataset file truncated".into()));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, count: usize) -> Result<Vec<f64>> {
        let bytes = self.take(count * 8)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Reads a dataset written by [`save_dataset`], verifying the version tag
/// and the trailing checksum before trusting any payload.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    if bytes.len() < DATASET_MAGIC.len() + 4 + 32 {
        return Err(Error::Malformed("dataset file truncated".into()));
    }
    if &bytes[..8] != DATASET_MAGIC {
        return Err(Error::Malformed("dataset magic bytes missing".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != DATASET_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let payload_len = bytes.len() - 32;
    let digest = Sha256::digest(&bytes[..payload_len]);
    if digest.as_slice() != &bytes[payload_len..] {
        return Err(Error::Malformed("dataset checksum mismatch".into()));
    }

    let mut cur = Cursor {
        buf: &bytes[..payload_len],
        pos: 12,
    };
    let kind = match cur.u8()? {
        0 => EnsembleKind::PauliExpectation,
        1 => EnsembleKind::Povm,
        other => {
            return Err(Error::Malformed(format!(
                "unknown ensemble kind tag {other}"
            )))
        }
    };
    let n_qubits = cur.u32()? as usize;
    let m = cur.u32()? as usize;
    let rank = cur.u32()? as usize;
    let n_train = cur.u64()? as usize;
    let n_val = cur.u64()? as usize;
    let n_test = cur.u64()? as usize;
    let n_avg_raw = cur.u64()?;
    let seed = cur.u64()?;
    let mut codes = Vec::with_capacity(m);
    for _ in 0..m {
        codes.push(cur.u64()? as usize);
    }
    let n_avg = match (kind, n_avg_raw) {
        (EnsembleKind::Povm, n) if n > 0 => Some(n),
        (EnsembleKind::PauliExpectation, 0) => None,
        _ => {
            return Err(Error::Malformed(
                "shot count inconsistent with data kind".into(),
            ))
        }
    };
    if n_qubits == 0 || n_qubits > 16 {
        return Err(Error::Malformed(format!(
            "implausible qubit count {n_qubits}"
        )));
    }
    let d = 1usize << n_qubits;

    let ensemble = match kind {
        EnsembleKind::PauliExpectation => MeasurementEnsemble::pauli(n_qubits, codes),
        EnsembleKind::Povm => MeasurementEnsemble::povm(n_qubits, codes),
    }
    .map_err(|e| Error::Malformed(format!("stored ensemble invalid: {e}")))?;

    let total = n_train + n_val + n_test;
    let expected = cur.pos + total * sample_bytes(d, m);
    if expected != payload_len {
        return Err(Error::Malformed(format!(
            "dataset payload is {payload_len} bytes, header implies {expected}"
        )));
    }
    let mut samples = Vec::with_capacity(total);
    for _ in 0..total {
        let re = cur.f64s(d * d)?;
        let im = cur.f64s(d * d)?;
        let b = cur.f64s(m)?;
        let mut mat = CMatrix::zeros(d, d);
        for (k, entry) in mat.data_mut().iter_mut().enumerate() {
            *entry = Complex64::new(re[k], im[k]);
        }
        let state = DensityMatrix::new(mat)
            .map_err(|e| Error::Malformed(format!("stored state invalid: {e}")))?;
        samples.push((state, b));
    }

    Ok(Dataset {
        kind,
        n_qubits,
        rank,
        n_avg,
        seed,
        ensemble,
        samples,
        sizes: (n_train, n_val, n_test),
    })
}

// ---------------------------------------------------------------------------
// ADAM
// ---------------------------------------------------------------------------

/// ADAM moment accumulators shaped like a network's parameters.
///
/// Complex weight entries are treated as two independent real parameters;
/// their first moments live in the real/imaginary parts of `m_weights`
/// and the squared-gradient accumulators likewise in `v_weights`.
#[derive(Debug, Clone)]
pub struct AdamState {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m_weights: Vec<CMatrix>,
    v_weights: Vec<CMatrix>,
    m_steps: Vec<f64>,
    v_steps: Vec<f64>,
    m_thresholds: Vec<f64>,
    v_thresholds: Vec<f64>,
}

impl AdamState {
    /// Fresh optimizer state for `params` with the standard defaults
    /// β₁ = 0.9, β₂ = 0.999, eps = 1e-8.
    pub fn new(params: &NetworkParams, lr: f64) -> Result<Self> {
        if !lr.is_finite() || lr <= 0.0 {
            return Err(Error::Argument(format!(
                "learning rate must be positive and finite, got {lr}"
            )));
        }
        let zeros = |w: &CMatrix| CMatrix::zeros(w.rows(), w.cols());
        Ok(AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m_weights: params.weights.iter().map(zeros).collect(),
            v_weights: params.weights.iter().map(zeros).collect(),
            m_steps: vec![0.0; params.step_sizes.len()],
            v_steps: vec![0.0; params.step_sizes.len()],
            m_thresholds: vec![0.0; params.thresholds.len()],
            v_thresholds: vec![0.0; params.thresholds.len()],
        })
    }

    /// Number of updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Learning rate.
    pub fn lr(&self) -> f64 {
        self.lr
    }
}

/// One bias-corrected ADAM update of a scalar; returns the decrement to
/// subtract from the parameter.
fn adam_scalar(
    m: &mut f64,
    v: &mut f64,
    g: f64,
    (lr, beta1, beta2, eps): (f64, f64, f64, f64),
    (corr1, corr2): (f64, f64),
) -> f64 {
    *m = beta1 * *m + (1.0 - beta1) * g;
    *v = beta2 * *v + (1.0 - beta2) * g * g;
    let m_hat = *m / corr1;
    let v_hat = *v / corr2;
    lr * m_hat / (v_hat.sqrt() + eps)
}

/// Applies one bias-corrected ADAM update to every parameter in place.
///
/// A zero gradient leaves the parameters bitwise unchanged while still
/// advancing the step counter.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut NetworkParams,
    grads: &Gradients,
) -> Result<()> {
    if grads.weights.len() != params.weights.len()
        || grads.step_sizes.len() != params.step_sizes.len()
        || grads.thresholds.len() != params.thresholds.len()
        || state.m_weights.len() != params.weights.len()
        || state.m_steps.len() != params.step_sizes.len()
    {
        return Err(Error::dim(
            "adam_step parameter groups",
            params.weights.len(),
            grads.weights.len(),
        ));
    }
    for (i, g) in grads.weights.iter().enumerate() {
        let w = &params.weights[i];
        if g.rows() != w.rows() || g.cols() != w.cols() {
            return Err(Error::dim(
                "adam_step weight gradient",
                w.rows() * w.cols(),
                g.rows() * g.cols(),
            ));
        }
    }

    state.step += 1;
    let t = state.step as f64;
    let hyper = (state.lr, state.beta1, state.beta2, state.eps);
    let corr = (1.0 - state.beta1.powf(t), 1.0 - state.beta2.powf(t));

    for (i, g) in grads.weights.iter().enumerate() {
        let w = params.weights[i].data_mut();
        let m = state.m_weights[i].data_mut();
        let v = state.v_weights[i].data_mut();
        for k in 0..w.len() {
            let gk = g.data()[k];
            w[k].re -= adam_scalar(&mut m[k].re, &mut v[k].re, gk.re, hyper, corr);
            w[k].im -= adam_scalar(&mut m[k].im, &mut v[k].im, gk.im, hyper, corr);
        }
    }
    for (k, &g) in grads.step_sizes.iter().enumerate() {
        params.step_sizes[k] -=
            adam_scalar(&mut state.m_steps[k], &mut state.v_steps[k], g, hyper, corr);
    }
    for (k, &g) in grads.thresholds.iter().enumerate() {
        params.thresholds[k] -= adam_scalar(
            &mut state.m_thresholds[k],
            &mut state.v_thresholds[k],
            g,
            hyper,
            corr,
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Knobs for [`train_loop`].
#[derive(Debug, Clone)]
pub struct TrainOptions {
    /// Samples per mini-batch (the final batch of an epoch may be smaller).
    pub batch_size: usize,
    /// ADAM learning rate.
    pub lr: f64,
    /// Upper bound on epochs; `0` returns the initial parameters.
    pub max_epochs: usize,
    /// Validation evaluations without strict improvement before stopping;
    /// `None` disables early stopping.
    pub patience: Option<u64>,
    /// Seed for the per-epoch shuffles.
    pub seed: u64,
    /// Validate every `val_stride`-th mini-batch. Epoch boundaries always
    /// validate, so every epoch records a validation loss.
    pub val_stride: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            batch_size: 1000,
            lr: 1e-4,
            max_epochs: 100,
            patience: Some(50),
            seed: 0,
            val_stride: 1,
        }
    }
}

/// Why [`train_loop`] stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StoppingReason {
    /// Ran out of the epoch budget.
    #[serde(rename = "max_epochs")]
    MaxEpochs,
    /// Validation loss stopped improving for the patience window.
    #[serde(rename = "patience")]
    Patience,
}

/// One row of the loss curve. `val_loss` is the best validation loss
/// observed during the epoch; the final row covers a partial epoch when
/// patience stops training mid-epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Zero-based epoch index.
    pub epoch: usize,
    /// Mean mini-batch training loss over the epoch.
    pub train_loss: f64,
    /// Minimum validation loss observed during the epoch.
    pub val_loss: f64,
}

/// Training outcome: loss curve, best-validation bookkeeping, and (once
/// filled by the caller) final test metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    /// Per-epoch losses.
    pub curve: Vec<EpochRecord>,
    /// Lowest validation loss seen, `None` if nothing was evaluated.
    pub best_val_loss: Option<f64>,
    /// Epoch of the best validation loss.
    pub best_epoch: Option<usize>,
    /// Total validation evaluations performed.
    pub evaluations: u64,
    /// Why training ended.
    pub stopping: StoppingReason,
    /// Test metrics, filled in by the caller after evaluation.
    pub final_metrics: Option<EvalMetrics>,
}

/// Mini-batch ADAM with validation-based early stopping.
///
/// Shuffles the training split each epoch with a seeded RNG, applies one
/// [`adam_step`] per mini-batch, and evaluates the validation loss every
/// `val_stride` batches (plus at every epoch end). The parameters with
/// the lowest validation loss are returned, not the final iterate, so
/// the returned network never validates worse than any recorded epoch.
/// Identical dataset, seed, and options reproduce the report bit-for-bit.
pub fn train_loop(
    params: &NetworkParams,
    dataset: &Dataset,
    options: &TrainOptions,
) -> Result<(NetworkParams, TrainReport)> {
    params.validate()?;
    if options.batch_size == 0 {
        return Err(Error::Argument(
            "train_loop: batch_size must be positive".into(),
        ));
    }
    if options.val_stride == 0 {
        return Err(Error::Argument(
            "train_loop: val_stride must be positive".into(),
        ));
    }
    let train = dataset.train();
    let val = dataset.validation();
    if train.is_empty() || val.is_empty() {
        return Err(Error::Argument(
            "train_loop: training and validation splits must be non-empty".into(),
        ));
    }
    if dataset.dim() != params.dim {
        return Err(Error::dim(
            "train_loop dataset dimension",
            params.dim,
            dataset.dim(),
        ));
    }
    if dataset.meas_count() != params.meas_count {
        return Err(Error::dim(
            "train_loop measurement count",
            params.meas_count,
            dataset.meas_count(),
        ));
    }

    let val_batch: Vec<(&CMatrix, &[f64])> = val
        .iter()
        .map(|(s, b)| (s.matrix(), b.as_slice()))
        .collect();

    let mut current = params.clone();
    let mut best = params.clone();
    let mut best_val: Option<f64> = None;
    let mut best_epoch: Option<usize> = None;
    let mut optimizer = AdamState::new(&current, options.lr)?;
    let mut rng = ChaCha12Rng::seed_from_u64(options.seed);
    let mut indices: Vec<usize> = (0..train.len()).collect();
    let mut curve = Vec::new();
    let mut stale: u64 = 0;
    let mut evaluations: u64 = 0;
    let mut global_batch: u64 = 0;
    let mut stopping = StoppingReason::MaxEpochs;

    'training: for epoch in 0..options.max_epochs {
        indices.shuffle(&mut rng);
        let n_batches = indices.chunks(options.batch_size).len();
        let mut loss_sum = 0.0;
        let mut batches_done = 0usize;
        let mut epoch_val: Option<f64> = None;

        for (bi, chunk) in indices.chunks(options.batch_size).enumerate() {
            let batch: Vec<(&CMatrix, &[f64])> = chunk
                .iter()
                .map(|&i| (train[i].0.matrix(), train[i].1.as_slice()))
                .collect();
            let (loss, grads) = backward(&current, &batch)?;
            adam_step(&mut optimizer, &mut current, &grads)?;
            loss_sum += loss;
            batches_done += 1;
            global_batch += 1;

            if global_batch.is_multiple_of(options.val_stride as u64) || bi + 1 == n_batches {
                let v = nmse_loss(&current, &val_batch)?;
                evaluations += 1;
                epoch_val = Some(epoch_val.map_or(v, |e: f64| e.min(v)));
                if best_val.is_none_or(|b| v < b) {
                    best_val = Some(v);
                    best_epoch = Some(epoch);
                    best = current.clone();
                    stale = 0;
                } else {
                    stale += 1;
                    if options.patience.is_some_and(|p| stale >= p) {
                        stopping = StoppingReason::Patience;
                        curve.push(EpochRecord {
                            epoch,
                            train_loss: loss_sum / batches_done as f64,
                            val_loss: epoch_val.expect("patience fired after an evaluation"),
                        });
                        break 'training;
                    }
                }
            }
        }

        curve.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches_done as f64,
            val_loss: epoch_val.expect("every epoch ends with a validation pass"),
        });
    }

    let report = TrainReport {
        curve,
        best_val_loss: best_val,
        best_epoch,
        evaluations,
        stopping,
        final_metrics: None,
    };
    Ok((best, report))
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Which section of a dataset to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    /// Training samples.
    Train,
    /// Validation samples.
    Validation,
    /// Test samples.
    Test,
}

/// Summary statistics over a set of (target, estimate) pairs. Standard
/// deviations are population deviations over the split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Mean Uhlmann fidelity between targets and estimates.
    pub mean_fidelity: f64,
    /// Population standard deviation of the fidelity.
    pub std_fidelity: f64,
    /// Mean trace distance.
    pub mean_trace_distance: f64,
    /// Population standard deviation of the trace distance.
    pub std_trace_distance: f64,
    /// Mean effective rank of the estimates (singular values above 1e-7).
    pub mean_rank: f64,
    /// Mean classical fidelity between full-outcome distributions of
    /// estimate and target; present for frequency data only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_classic_fidelity: Option<f64>,
}

fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Reduces (target, estimate) pairs to the summary metrics. When
/// `full_povm` is given, each pair also contributes the classical
/// fidelity between the full outcome distributions of estimate and
/// target.
pub fn summarize_estimates(
    pairs: &[(&DensityMatrix, &DensityMatrix)],
    full_povm: Option<&[CMatrix]>,
) -> Result<EvalMetrics> {
    if pairs.is_empty() {
        return Err(Error::Argument("summarize_estimates: no pairs".into()));
    }
    let rows: Vec<(f64, f64, usize, Option<f64>)> = pairs
        .par_iter()
        .map(|(target, estimate)| {
            let f = fidelity(target.matrix(), estimate.matrix())?;
            let td = trace_distance(target.matrix(), estimate.matrix())?;
            let rank = rank_estimate(estimate.matrix(), RANK_THRESHOLD)?;
            let cf = match full_povm {
                Some(elements) => {
                    let p = povm_probabilities(estimate, elements)?;
                    let q = povm_probabilities(target, elements)?;
                    Some(classic_fidelity(&p, &q)?)
                }
                None => None,
            };
            Ok((f, td, rank, cf))
        })
        .collect::<Result<_>>()?;

    let fids: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let tds: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let (mean_fidelity, std_fidelity) = mean_and_std(&fids);
    let (mean_trace_distance, std_trace_distance) = mean_and_std(&tds);
    let mean_rank = rows.iter().map(|r| r.2 as f64).sum::<f64>() / rows.len() as f64;
    let mean_classic_fidelity = if full_povm.is_some() {
        Some(rows.iter().filter_map(|r| r.3).sum::<f64>() / rows.len() as f64)
    } else {
        None
    };
    Ok(EvalMetrics {
        mean_fidelity,
        std_fidelity,
        mean_trace_distance,
        std_trace_distance,
        mean_rank,
        mean_classic_fidelity,
    })
}

/// Runs the network over a dataset split and reduces the estimates to
/// summary statistics. Frequency datasets additionally report the mean
/// classical fidelity against the exact outcome distributions.
pub fn evaluate(params: &NetworkParams, dataset: &Dataset, split: Split) -> Result<EvalMetrics> {
    params.validate()?;
    let samples = match split {
        Split::Train => dataset.train(),
        Split::Validation => dataset.validation(),
        Split::Test => dataset.test(),
    };
    if samples.is_empty() {
        return Err(Error::Argument("evaluate: split is empty".into()));
    }
    if dataset.dim() != params.dim {
        return Err(Error::dim(
            "evaluate dataset dimension",
            params.dim,
            dataset.dim(),
        ));
    }
    if dataset.meas_count() != params.meas_count {
        return Err(Error::dim(
            "evaluate measurement count",
            params.meas_count,
            dataset.meas_count(),
        ));
    }
    let estimates: Vec<DensityMatrix> = samples
        .par_iter()
        .map(|(_, b)| forward(params, b).map(|(dm, _)| dm))
        .collect::<Result<_>>()?;
    let pairs: Vec<(&DensityMatrix, &DensityMatrix)> = samples
        .iter()
        .map(|(target, _)| target)
        .zip(estimates.iter())
        .collect();
    let full_povm = match dataset.kind {
        EnsembleKind::Povm => Some(pauli4_povm(dataset.n_qubits)?),
        EnsembleKind::PauliExpectation => None,
    };
    summarize_estimates(&pairs, full_povm.as_deref())
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Ensemble reference stored alongside checkpointed parameters, enough to
/// rebuild the measurement matrices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Data kind of the generating ensemble.
    pub kind: EnsembleKind,
    /// Number of qubits.
    pub n_qubits: usize,
    /// Observable/outcome codes, in ensemble order.
    pub codes: Vec<usize>,
}

/// On-disk checkpoint document.
#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    format: String,
    version: u32,
    dim: usize,
    meas_count: usize,
    depth: usize,
    mu: f64,
    epsilon: f64,
    ensemble: CheckpointMeta,
    /// Base64 little-endian doubles.
    step_sizes: String,
    /// Base64 little-endian doubles.
    thresholds: String,
    /// One base64 string per layer: row-major entries, real and imaginary
    /// parts interleaved.
    weights: Vec<String>,
    /// Hex SHA-256 of the document serialized with this field empty.
    checksum: String,
}

fn doubles_to_b64(values: impl Iterator<Item = f64>) -> String {
    let mut bytes = Vec::new();
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    BASE64.encode(bytes)
}

fn b64_to_doubles(s: &str, what: &str) -> Result<Vec<f64>> {
    let bytes = BASE64
        .decode(s)
        .map_err(|e| Error::Malformed(format!("{what}: invalid base64: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Malformed(format!(
            "{what}: byte count {} is not a multiple of 8",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn doc_checksum(doc: &CheckpointDoc) -> Result<String> {
    let body = serde_json::to_string(doc)
        .map_err(|e| Error::Malformed(format!("checkpoint serialization failed: {e}")))?;
    Ok(format!("{:x}", Sha256::digest(body.as_bytes())))
}

/// Writes parameters and their ensemble reference as a self-describing
/// JSON checkpoint with a content checksum. The round trip through
/// [`load_checkpoint`] is bitwise lossless.
pub fn save_checkpoint(params: &NetworkParams, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    params.validate()?;
    if meta.n_qubits == 0 || (1usize << meta.n_qubits) != params.dim {
        return Err(Error::dim(
            "checkpoint ensemble dimension",
            params.dim,
            1usize << meta.n_qubits,
        ));
    }
    if meta.codes.len() != params.meas_count {
        return Err(Error::dim(
            "checkpoint ensemble codes",
            params.meas_count,
            meta.codes.len(),
        ));
    }
    let mut doc = CheckpointDoc {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        dim: params.dim,
        meas_count: params.meas_count,
        depth: params.depth(),
        mu: params.mu,
        epsilon: params.epsilon,
        ensemble: meta.clone(),
        step_sizes: doubles_to_b64(params.step_sizes.iter().copied()),
        thresholds: doubles_to_b64(params.thresholds.iter().copied()),
        weights: params
            .weights
            .iter()
            .map(|w| doubles_to_b64(w.data().iter().flat_map(|z| [z.re, z.im])))
            .collect(),
        checksum: String::new(),
    };
    doc.checksum = doc_checksum(&doc)?;
    let text = serde_json::to_string_pretty(&doc)
        .map_err(|e| Error::Malformed(format!("checkpoint serialization failed: {e}")))?;
    fs::write(path, text)?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`], verifying format
/// tag, version, and checksum before decoding. When `expected_dim` is
/// given, a checkpoint for a different dimension is rejected with a
/// dimension error.
pub fn load_checkpoint(
    path: &Path,
    expected_dim: Option<usize>,
) -> Result<(NetworkParams, CheckpointMeta)> {
    let text = fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Malformed(format!("checkpoint is not valid JSON: {e}")))?;
    match value.get("format").and_then(|v| v.as_str()) {
        Some(CHECKPOINT_FORMAT) => {}
        _ => {
            return Err(Error::Malformed(
                "missing or unknown checkpoint format tag".into(),
            ))
        }
    }
    let version = value
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Malformed("missing checkpoint version".into()))?;
    if version != u64::from(CHECKPOINT_VERSION) {
        return Err(Error::VersionMismatch {
            found: version.min(u64::from(u32::MAX)) as u32,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut doc: CheckpointDoc = serde_json::from_value(value)
        .map_err(|e| Error::Malformed(format!("checkpoint structure invalid: {e}")))?;
    let claimed = std::mem::take(&mut doc.checksum);
    if doc_checksum(&doc)? != claimed {
        return Err(Error::Malformed("checkpoint checksum mismatch".into()));
    }

    if let Some(expected) = expected_dim {
        if doc.dim != expected {
            return Err(Error::dim("checkpoint dimension", expected, doc.dim));
        }
    }
    if doc.weights.len() != doc.depth {
        return Err(Error::Malformed(format!(
            "checkpoint declares depth {} but stores {} weight layers",
            doc.depth,
            doc.weights.len()
        )));
    }
    let d2 = doc.dim * doc.dim;
    let step_sizes = b64_to_doubles(&doc.step_sizes, "checkpoint step sizes")?;
    let thresholds = b64_to_doubles(&doc.thresholds, "checkpoint thresholds")?;
    let mut weights = Vec::with_capacity(doc.weights.len());
    for (layer, encoded) in doc.weights.iter().enumerate() {
        let flat = b64_to_doubles(encoded, "checkpoint weights")?;
        if flat.len() != doc.meas_count * d2 * 2 {
            return Err(Error::Malformed(format!(
                "weight layer {} holds {} doubles, expected {}",
                layer + 1,
                flat.len(),
                doc.meas_count * d2 * 2
            )));
        }
        let mut w = CMatrix::zeros(doc.meas_count, d2);
        for (k, entry) in w.data_mut().iter_mut().enumerate() {
            *entry = Complex64::new(flat[2 * k], flat[2 * k + 1]);
        }
        weights.push(w);
    }
    if doc.ensemble.codes.len() != doc.meas_count
        || doc.ensemble.n_qubits == 0
        || (1usize << doc.ensemble.n_qubits) != doc.dim
    {
        return Err(Error::Malformed(
            "checkpoint ensemble metadata inconsistent with parameters".into(),
        ));
    }
    let params = NetworkParams::new(
        doc.dim,
        doc.meas_count,
        weights,
        step_sizes,
        thresholds,
        doc.mu,
        doc.epsilon,
    )?;
    Ok((params, doc.ensemble))
}
