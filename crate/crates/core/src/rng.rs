//! Seeded randomness.
//!
//! All randomness comes from ChaCha8 generators. A run is identified by a
//! master seed and a run index (grid search hands out consecutive indices);
//! each consumer inside the run draws from its own ChaCha stream so adding
//! draws in one place never shifts the numbers seen by another.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type SrwganRng = ChaCha8Rng;

/// Consumers that get an independent stream within a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Batches = 2,
    Heads = 3,
    Mapping = 4,
    Interpolation = 5,
    Shots = 6,
    Synthesis = 7,
    Classifier = 8,
    Synthetic = 9,
    Lemma = 10,
    Noise = 11,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for `(master_seed, run_index, stream)`.
pub fn stream_rng(master_seed: u64, run_index: u64, stream: Stream) -> SrwganRng {
    let mut state = master_seed ^ run_index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Derives the master seed of the `index`-th child run.
pub fn derive_seed(master_seed: u64, index: u64) -> u64 {
    let mut state = master_seed ^ 0xA076_1D64_78BD_642F;
    state = state.wrapping_add(index);
    splitmix64(&mut state)
}

pub fn standard_normal(rng: &mut SrwganRng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut SrwganRng) -> Tensor {
    let mut t = Tensor::zeros(rows, cols);
    for v in t.data_mut() {
        *v = std * standard_normal(rng);
    }
    t
}

pub fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut SrwganRng) -> Tensor {
    let mut t = Tensor::zeros(rows, cols);
    for v in t.data_mut() {
        *v = lo + (hi - lo) * rng.random::<f64>();
    }
    t
}

/// Uniform index in `0..n`.
pub fn index(rng: &mut SrwganRng, n: usize) -> usize {
    rng.random_range(0..n)
}

/// Lower clamp applied to log-variances before exponentiation.
pub const LOG_VAR_MIN: f64 = -10.0;
/// Upper clamp applied to log-variances before exponentiation.
pub const LOG_VAR_MAX: f64 = 10.0;

/// `mu + exp(0.5 · log_var) ⊙ ε` with `ε ~ N(0, I)`.
///
/// Finite log-variances are clamped to `[LOG_VAR_MIN, LOG_VAR_MAX]`. A
/// log-variance of exactly `-∞` requests zero variance and returns `mu`
/// unchanged at that coordinate. One normal draw is consumed per element
/// either way, so the stream position does not depend on the values.
pub fn gaussian_reparam_sample(mu: &Tensor, log_var: &Tensor, rng: &mut SrwganRng) -> Result<Tensor> {
    if mu.shape() != log_var.shape() {
        return Err(Error::Shape { context: "gaussian_reparam_sample", expected: mu.shape(), found: log_var.shape() });
    }
    let mut out = mu.clone();
    for (o, &lv) in out.data_mut().iter_mut().zip(log_var.data()) {
        let eps = standard_normal(rng);
        let std = if lv == f64::NEG_INFINITY { 0.0 } else { libm::exp(0.5 * lv.clamp(LOG_VAR_MIN, LOG_VAR_MAX)) };
        *o += std * eps;
    }
    Ok(out)
}
