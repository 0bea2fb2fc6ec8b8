//! Multihead Gaussian semantic representation.
//!
//! Each head maps a raw attribute vector `a` to a conditional Gaussian
//! `N(μ(a), diag exp(log_var(a)))` with
//!
//! ```text
//! μ(a)       = LeakyReLU(a·W_μ + b_μ)
//! log_var(a) = clamp(LeakyReLU(a·W_v + b_v), -10, 10)
//! ```
//!
//! and draws one reparameterized sample. The refined description fed to the
//! generator is the head samples followed by the raw attributes, in head
//! order (`[a‡, a†, a′, a]` for the full model).

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, SrwganRng, LOG_VAR_MAX, LOG_VAR_MIN};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticHead {
    /// `d × d_out`
    pub w_mean: Tensor,
    pub b_mean: Tensor,
    /// `d × d_out`
    pub w_logvar: Tensor,
    pub b_logvar: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub w_mean: Var,
    pub b_mean: Var,
    pub w_logvar: Var,
    pub b_logvar: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    pub sample: Var,
    pub mean: Var,
    pub log_var: Var,
}

impl SemanticHead {
    pub fn init(attribute_dim: usize, out_dim: usize, std: f64, rng: &mut SrwganRng) -> Self {
        Self {
            w_mean: rng::gaussian(attribute_dim, out_dim, std, rng),
            b_mean: rng::gaussian(1, out_dim, std, rng),
            w_logvar: rng::gaussian(attribute_dim, out_dim, std, rng),
            b_logvar: rng::gaussian(1, out_dim, std, rng),
        }
    }

    pub fn zeros(attribute_dim: usize, out_dim: usize) -> Self {
        Self {
            w_mean: Tensor::zeros(attribute_dim, out_dim),
            b_mean: Tensor::zeros(1, out_dim),
            w_logvar: Tensor::zeros(attribute_dim, out_dim),
            b_logvar: Tensor::zeros(1, out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w_mean.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.w_mean.cols()
    }

    pub fn params(&self) -> [&Tensor; 4] {
        [&self.w_mean, &self.b_mean, &self.w_logvar, &self.b_logvar]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w_mean, &mut self.b_mean, &mut self.w_logvar, &mut self.b_logvar]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> HeadVars {
        let mut leaf = |t: &Tensor| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        HeadVars {
            w_mean: leaf(&self.w_mean),
            b_mean: leaf(&self.b_mean),
            w_logvar: leaf(&self.w_logvar),
            b_logvar: leaf(&self.b_logvar),
        }
    }
}

impl HeadVars {
    pub fn vars(&self) -> [Var; 4] {
        [self.w_mean, self.b_mean, self.w_logvar, self.b_logvar]
    }
}

/// Forward pass of one head over a batch of attribute rows. `eps` holds the
/// standard-normal draws, one per output element.
pub fn head_forward_tape(tape: &mut Tape, head: &HeadVars, attrs: Var, eps: &Tensor) -> HeadOutput {
    let m = tape.matmul(attrs, head.w_mean);
    let m = tape.add_row(m, head.b_mean);
    let mean = tape.leaky_relu(m, LEAKY_SLOPE);
    let v = tape.matmul(attrs, head.w_logvar);
    let v = tape.add_row(v, head.b_logvar);
    let v = tape.leaky_relu(v, LEAKY_SLOPE);
    let log_var = tape.clamp(v, LOG_VAR_MIN, LOG_VAR_MAX);
    let half = tape.scale(log_var, 0.5);
    let std = tape.exp(half);
    let e = tape.constant(eps.clone());
    let noise = tape.mul(std, e);
    let sample = tape.add(mean, noise);
    HeadOutput { sample, mean, log_var }
}

/// Draws the noise for `rows` samples of a head with `out_dim` outputs.
pub fn head_noise(rows: usize, out_dim: usize, rng: &mut SrwganRng) -> Tensor {
    rng::gaussian(rows, out_dim, 1.0, rng)
}

/// Batched refinement on a tape: one sample per head per row, concatenated
/// with the raw attributes. `noise[i]` feeds head `i`.
pub fn refine_tape(tape: &mut Tape, heads: &[HeadVars], attrs: Var, noise: &[Tensor]) -> (Var, Vec<HeadOutput>) {
    assert_eq!(heads.len(), noise.len(), "one noise matrix per head");
    let outs: Vec<HeadOutput> = heads.iter().zip(noise).map(|(h, e)| head_forward_tape(tape, h, attrs, e)).collect();
    let mut parts: Vec<Var> = outs.iter().map(|o| o.sample).collect();
    parts.push(attrs);
    (tape.concat_cols(&parts), outs)
}

/// Output of one head for a single attribute vector.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadSample {
    pub sample: Tensor,
    pub mean: Tensor,
    pub log_var: Tensor,
}

pub fn head_forward(head: &SemanticHead, a: &[f64], rng: &mut SrwganRng) -> Result<HeadSample> {
    if a.len() != head.in_dim() {
        return Err(Error::Shape { context: "head_forward", expected: [1, head.in_dim()], found: [1, a.len()] });
    }
    let eps = head_noise(1, head.out_dim(), rng);
    let mut tape = Tape::new();
    let vars = head.bind(&mut tape, false);
    let attrs = tape.constant(Tensor::row_vector(a));
    let out = head_forward_tape(&mut tape, &vars, attrs, &eps);
    Ok(HeadSample {
        sample: tape.value(out.sample).clone(),
        mean: tape.value(out.mean).clone(),
        log_var: tape.value(out.log_var).clone(),
    })
}

/// Refined description of one class instance.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedDescription {
    /// Head samples in head order: `a‡`, then `a†`, then `a′`.
    pub samples: Vec<Tensor>,
    pub raw: Tensor,
    pub concat: Tensor,
}

impl RefinedDescription {
    pub fn sharp(&self) -> Option<&Tensor> {
        self.samples.first()
    }

    pub fn dagger(&self) -> Option<&Tensor> {
        self.samples.get(1)
    }

    pub fn prime(&self) -> Option<&Tensor> {
        self.samples.get(2)
    }
}

pub fn refine(heads: &[SemanticHead], a: &[f64], rng: &mut SrwganRng) -> Result<RefinedDescription> {
    if let Some(h) = heads.first() {
        if heads.iter().any(|o| o.out_dim() != h.out_dim()) {
            return Err(Error::InvalidConfig("semantic heads must share an output dimension".into()));
        }
    }
    let samples = heads
        .iter()
        .map(|h| head_forward(h, a, rng).map(|s| s.sample))
        .collect::<Result<Vec<_>>>()?;
    let raw = Tensor::row_vector(a);
    let mut parts: Vec<&Tensor> = samples.iter().collect();
    parts.push(&raw);
    let concat = Tensor::concat_cols(&parts);
    Ok(RefinedDescription { samples, raw, concat })
}
