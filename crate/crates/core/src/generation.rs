//! Generator, critic and redundancy-free mapping, with their losses.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, SrwganRng, LOG_VAR_MAX, LOG_VAR_MIN};
use crate::semantic::LEAKY_SLOPE;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Two-layer generator: leaky hidden layer, rectified output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct GeneratorVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

fn leaf(tape: &mut Tape, t: &Tensor, trainable: bool) -> Var {
    if trainable {
        tape.param(t.clone())
    } else {
        tape.constant(t.clone())
    }
}

impl Generator {
    pub fn init(input_dim: usize, hidden: usize, output_dim: usize, std: f64, rng: &mut SrwganRng) -> Self {
        Self {
            w1: rng::gaussian(input_dim, hidden, std, rng),
            b1: rng::gaussian(1, hidden, std, rng),
            w2: rng::gaussian(hidden, output_dim, std, rng),
            b2: rng::gaussian(1, output_dim, std, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.cols()
    }

    pub fn params(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> GeneratorVars {
        GeneratorVars {
            w1: leaf(tape, &self.w1, trainable),
            b1: leaf(tape, &self.b1, trainable),
            w2: leaf(tape, &self.w2, trainable),
            b2: leaf(tape, &self.b2, trainable),
        }
    }
}

impl GeneratorVars {
    pub fn vars(&self) -> [Var; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

pub fn generator_tape(tape: &mut Tape, g: &GeneratorVars, input: Var) -> Var {
    let h = tape.matmul(input, g.w1);
    let h = tape.add_row(h, g.b1);
    let h = tape.leaky_relu(h, LEAKY_SLOPE);
    let o = tape.matmul(h, g.w2);
    let o = tape.add_row(o, g.b2);
    tape.relu(o)
}

/// Fake features for a batch of refined descriptions, one per row.
pub fn generator_forward(g: &Generator, a_star: &Tensor) -> Result<Tensor> {
    if a_star.cols() != g.input_dim() {
        return Err(Error::Shape { context: "generator_forward", expected: [a_star.rows(), g.input_dim()], found: a_star.shape() });
    }
    let mut tape = Tape::new();
    let vars = g.bind(&mut tape, false);
    let x = tape.constant(a_star.clone());
    let out = generator_tape(&mut tape, &vars, x);
    Ok(tape.value(out).clone())
}

/// Affine critic `D(z) = z·w + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Critic {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct CriticVars {
    pub w: Var,
    pub b: Var,
}

impl Critic {
    pub fn init(z_dim: usize, std: f64, rng: &mut SrwganRng) -> Self {
        Self { w: rng::gaussian(z_dim, 1, std, rng), b: rng::gaussian(1, 1, std, rng) }
    }

    pub fn params(&self) -> [&Tensor; 2] {
        [&self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.w, &mut self.b]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> CriticVars {
        CriticVars { w: leaf(tape, &self.w, trainable), b: leaf(tape, &self.b, trainable) }
    }
}

impl CriticVars {
    pub fn vars(&self) -> [Var; 2] {
        [self.w, self.b]
    }
}

pub fn critic_tape(tape: &mut Tape, d: &CriticVars, z: Var) -> Var {
    let s = tape.matmul(z, d.w);
    tape.add_row(s, d.b)
}

/// Stochastic projection `x → z` with trainable class centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedundancyFreeMap {
    pub w_mean: Tensor,
    pub b_mean: Tensor,
    pub w_logvar: Tensor,
    pub b_logvar: Tensor,
    /// One row per labeled class.
    pub centers: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct MapVars {
    pub w_mean: Var,
    pub b_mean: Var,
    pub w_logvar: Var,
    pub b_logvar: Var,
    pub centers: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct MapOutput {
    pub z: Var,
    pub mean: Var,
    pub log_var: Var,
}

impl RedundancyFreeMap {
    pub fn init(input_dim: usize, z_dim: usize, classes: usize, std: f64, rng: &mut SrwganRng) -> Self {
        Self {
            w_mean: rng::gaussian(input_dim, z_dim, std, rng),
            b_mean: rng::gaussian(1, z_dim, std, rng),
            w_logvar: rng::gaussian(input_dim, z_dim, std, rng),
            b_logvar: rng::gaussian(1, z_dim, std, rng),
            centers: rng::gaussian(classes, z_dim, std, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_mean.rows()
    }

    pub fn z_dim(&self) -> usize {
        self.w_mean.cols()
    }

    pub fn params(&self) -> [&Tensor; 5] {
        [&self.w_mean, &self.b_mean, &self.w_logvar, &self.b_logvar, &self.centers]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 5] {
        [&mut self.w_mean, &mut self.b_mean, &mut self.w_logvar, &mut self.b_logvar, &mut self.centers]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> MapVars {
        MapVars {
            w_mean: leaf(tape, &self.w_mean, trainable),
            b_mean: leaf(tape, &self.b_mean, trainable),
            w_logvar: leaf(tape, &self.w_logvar, trainable),
            b_logvar: leaf(tape, &self.b_logvar, trainable),
            centers: leaf(tape, &self.centers, trainable),
        }
    }
}

impl MapVars {
    pub fn vars(&self) -> [Var; 5] {
        [self.w_mean, self.b_mean, self.w_logvar, self.b_logvar, self.centers]
    }
}

/// Mean path is leaky, log-variance path is affine and clamped.
pub fn map_tape(tape: &mut Tape, m: &MapVars, x: Var, eps: &Tensor) -> MapOutput {
    let mu = tape.matmul(x, m.w_mean);
    let mu = tape.add_row(mu, m.b_mean);
    let mean = tape.leaky_relu(mu, LEAKY_SLOPE);
    let lv = tape.matmul(x, m.w_logvar);
    let lv = tape.add_row(lv, m.b_logvar);
    let log_var = tape.clamp(lv, LOG_VAR_MIN, LOG_VAR_MAX);
    let half = tape.scale(log_var, 0.5);
    let std = tape.exp(half);
    let e = tape.constant(eps.clone());
    let noise = tape.mul(std, e);
    let z = tape.add(mean, noise);
    MapOutput { z, mean, log_var }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapSample {
    pub z: Tensor,
    pub mean: Tensor,
    pub log_var: Tensor,
}

pub fn map_forward(m: &RedundancyFreeMap, x: &Tensor, rng: &mut SrwganRng) -> Result<MapSample> {
    if x.cols() != m.input_dim() {
        return Err(Error::Shape { context: "map_forward", expected: [x.rows(), m.input_dim()], found: x.shape() });
    }
    let eps = rng::gaussian(x.rows(), m.z_dim(), 1.0, rng);
    let mut tape = Tape::new();
    let vars = m.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let out = map_tape(&mut tape, &vars, xv, &eps);
    Ok(MapSample { z: tape.value(out.z).clone(), mean: tape.value(out.mean).clone(), log_var: tape.value(out.log_var).clone() })
}

/// Mean over rows of `KL(N(μ, diag e^{lv}) ‖ N(0, I))`.
pub fn kl_tape(tape: &mut Tape, mean: Var, log_var: Var) -> Var {
    let rows = tape.shape(mean)[0].max(1) as f64;
    let var = tape.exp(log_var);
    let m2 = tape.square(mean);
    let a = tape.add(var, m2);
    let a = tape.sub(a, log_var);
    let a = tape.add_scalar(a, -1.0);
    let s = tape.sum(a);
    tape.scale(s, 0.5 / rows)
}

pub fn kl_standard_normal(mean: &Tensor, log_var: &Tensor) -> Result<f64> {
    if mean.shape() != log_var.shape() {
        return Err(Error::Shape { context: "kl_standard_normal", expected: mean.shape(), found: log_var.shape() });
    }
    let mut tape = Tape::new();
    let m = tape.constant(mean.clone());
    let l = tape.constant(log_var.clone());
    let v = kl_tape(&mut tape, m, l);
    Ok(tape.value(v).item())
}

// ---------------------------------------------------------------------------
// Adversarial loss

/// `(‖w‖ − 1)²`, exact for an affine critic.
pub fn gradient_penalty_tape(tape: &mut Tape, d: &CriticVars) -> Var {
    let n = tape.norm(d.w);
    let c = tape.add_scalar(n, -1.0);
    tape.square(c)
}

pub fn gradient_penalty_analytic(critic: &Critic) -> f64 {
    let n = critic.w.frobenius();
    (n - 1.0) * (n - 1.0)
}

/// Penalty measured the generic way: differentiate the critic with respect
/// to the interpolated codes and average `(‖∇_ẑ D‖ − 1)²` over rows.
pub fn gradient_penalty_autodiff(critic: &Critic, z_hat: &Tensor) -> Result<f64> {
    if z_hat.cols() != critic.w.rows() {
        return Err(Error::Shape { context: "gradient_penalty", expected: [z_hat.rows(), critic.w.rows()], found: z_hat.shape() });
    }
    let mut tape = Tape::new();
    let z = tape.param(z_hat.clone());
    let vars = critic.bind(&mut tape, false);
    let s = critic_tape(&mut tape, &vars, z);
    let total = tape.sum(s);
    let g = tape.backward(total)?;
    let grad = g.get_or_zeros(z, z_hat.shape());
    let rows = z_hat.rows().max(1) as f64;
    let mut acc = 0.0;
    for r in 0..grad.rows() {
        let n = libm::sqrt(grad.row(r).iter().map(|v| v * v).sum::<f64>());
        acc += (n - 1.0) * (n - 1.0);
    }
    Ok(acc / rows)
}

/// Per-row interpolation `ε·x + (1 − ε)·x̃` with `ε ~ U(0, 1)`.
pub fn interpolate(real: &Tensor, fake: &Tensor, rng: &mut SrwganRng) -> Result<Tensor> {
    if real.shape() != fake.shape() {
        return Err(Error::Shape { context: "interpolate", expected: real.shape(), found: fake.shape() });
    }
    let mut out = real.clone();
    for r in 0..out.rows() {
        let e = rng::uniform(1, 1, 0.0, 1.0, rng).item();
        for (o, &f) in out.row_mut(r).iter_mut().zip(fake.row(r)) {
            *o = e * *o + (1.0 - e) * f;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub struct WganVars {
    pub critic_loss: Var,
    pub generator_loss: Var,
    pub gp: Var,
    pub real_score: Var,
    pub fake_score: Var,
}

/// Critic loss `E[D(z̃)] − E[D(z)] + γ·GP` and generator loss `−E[D(z̃)]`.
pub fn wgan_tape(tape: &mut Tape, d: &CriticVars, z_real: Var, z_fake: Var, gp_weight: f64) -> WganVars {
    let sr = critic_tape(tape, d, z_real);
    let real_score = tape.mean(sr);
    let sf = critic_tape(tape, d, z_fake);
    let fake_score = tape.mean(sf);
    let gp = gradient_penalty_tape(tape, d);
    let diff = tape.sub(fake_score, real_score);
    let wgp = tape.scale(gp, gp_weight);
    let critic_loss = tape.add(diff, wgp);
    let generator_loss = tape.scale(fake_score, -1.0);
    WganVars { critic_loss, generator_loss, gp, real_score, fake_score }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WganLosses {
    pub critic: f64,
    pub generator: f64,
    pub gp_analytic: f64,
    pub gp_autodiff: f64,
}

/// Both adversarial losses for one batch of real and fake features. Codes are
/// sampled through `M` for real, fake and interpolated features alike.
pub fn loss_wgan_z(
    critic: &Critic,
    map: &RedundancyFreeMap,
    real: &Tensor,
    fake: &Tensor,
    gp_weight: f64,
    rng: &mut SrwganRng,
) -> Result<WganLosses> {
    if real.shape() != fake.shape() {
        return Err(Error::Shape { context: "loss_wgan_z batch", expected: real.shape(), found: fake.shape() });
    }
    let zr = map_forward(map, real, rng)?;
    let zf = map_forward(map, fake, rng)?;
    let x_hat = interpolate(real, fake, rng)?;
    let zh = map_forward(map, &x_hat, rng)?;
    let mut tape = Tape::new();
    let d = critic.bind(&mut tape, false);
    let a = tape.constant(zr.z);
    let b = tape.constant(zf.z);
    let w = wgan_tape(&mut tape, &d, a, b, gp_weight);
    Ok(WganLosses {
        critic: tape.value(w.critic_loss).item(),
        generator: tape.value(w.generator_loss).item(),
        gp_analytic: tape.value(w.gp).item(),
        gp_autodiff: gradient_penalty_autodiff(critic, &zh.z)?,
    })
}

// ---------------------------------------------------------------------------
// Regularizers

/// Cross-entropy of `softmax(x̃ · U_xsᵀ)`; prototypes enter as constants.
pub fn cls_tape(tape: &mut Tape, fake: Var, prototypes: &Tensor, labels: &[usize]) -> Var {
    let u = tape.constant(prototypes.clone());
    let logits = tape.matmul_nt(fake, u);
    tape.cross_entropy(logits, labels)
}

pub fn loss_cls(fake: &Tensor, prototypes: &Tensor, labels: &[usize]) -> Result<f64> {
    if fake.cols() != prototypes.cols() {
        return Err(Error::Shape { context: "loss_cls", expected: [prototypes.rows(), fake.cols()], found: prototypes.shape() });
    }
    if labels.len() != fake.rows() {
        return Err(Error::Shape { context: "loss_cls labels", expected: [fake.rows(), 1], found: [labels.len(), 1] });
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= prototypes.rows()) {
        return Err(Error::LabelOutOfRange { context: "loss_cls", label: l, classes: prototypes.rows() });
    }
    let mut tape = Tape::new();
    let x = tape.constant(fake.clone());
    let v = cls_tape(&mut tape, x, prototypes, labels);
    Ok(tape.value(v).item())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginConfig {
    pub margin: f64,
    pub kl_bound: f64,
    pub kl_multiplier: f64,
}

impl Default for MarginConfig {
    fn default() -> Self {
        Self { margin: 190.0, kl_bound: 0.1, kl_multiplier: 1.0 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MarginVars {
    pub hinge: Var,
    pub kl: Var,
    pub penalty: Var,
    pub total: Var,
}

/// Index of the nearest center other than `own` for each row of `z`.
pub fn nearest_negative(z: &Tensor, centers: &Tensor, own: &[usize]) -> Vec<usize> {
    (0..z.rows())
        .map(|r| {
            let mut best = (f64::INFINITY, usize::MAX);
            for c in 0..centers.rows() {
                if c == own[r] {
                    continue;
                }
                let d: f64 = z.row(r).iter().zip(centers.row(c)).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.0 {
                    best = (d, c);
                }
            }
            best.1
        })
        .collect()
}

fn one_hot(idx: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(idx.len(), classes);
    for (r, &c) in idx.iter().enumerate() {
        t.set(r, c, 1.0);
    }
    t
}

/// Margin hinge on the labeled codes `z` plus the KL-bound penalty on the
/// batch-mean divergence `kl` (see [`kl_tape`]).
///
/// Panics if fewer than two centers exist or a label has no center; use
/// [`loss_m`] for checked inputs.
pub fn margin_tape(
    tape: &mut Tape,
    z: Var,
    centers: Var,
    labels: &[usize],
    kl: Var,
    cfg: &MarginConfig,
) -> MarginVars {
    let k = tape.shape(centers)[0];
    let negatives = nearest_negative(tape.value(z), tape.value(centers), labels);
    let sel_own = tape.constant(one_hot(labels, k));
    let sel_neg = tape.constant(one_hot(&negatives, k));
    let c_own = tape.matmul(sel_own, centers);
    let c_neg = tape.matmul(sel_neg, centers);
    let d_own = tape.sub(z, c_own);
    let d_own = tape.square(d_own);
    let d_own = tape.row_sums(d_own);
    let d_neg = tape.sub(z, c_neg);
    let d_neg = tape.square(d_neg);
    let d_neg = tape.row_sums(d_neg);
    let gap = tape.sub(d_own, d_neg);
    let gap = tape.add_scalar(gap, cfg.margin);
    let h = tape.relu(gap);
    let hinge = tape.mean(h);
    let over = tape.add_scalar(kl, -cfg.kl_bound);
    let over = tape.relu(over);
    let penalty = tape.scale(over, cfg.kl_multiplier);
    let total = tape.add(hinge, penalty);
    MarginVars { hinge, kl, penalty, total }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginLoss {
    pub hinge: f64,
    pub kl: f64,
    pub penalty: f64,
    pub total: f64,
}

pub fn loss_m(z: &Tensor, mean: &Tensor, log_var: &Tensor, centers: &Tensor, labels: &[usize], cfg: &MarginConfig) -> Result<MarginLoss> {
    if centers.rows() < 2 {
        return Err(Error::InvalidConfig("margin loss needs at least two centers".into()));
    }
    if z.cols() != centers.cols() || labels.len() != z.rows() {
        return Err(Error::Shape { context: "loss_m", expected: [labels.len(), centers.cols()], found: z.shape() });
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= centers.rows()) {
        return Err(Error::LabelOutOfRange { context: "loss_m center", label: l, classes: centers.rows() });
    }
    if mean.shape() != log_var.shape() {
        return Err(Error::Shape { context: "loss_m posterior", expected: mean.shape(), found: log_var.shape() });
    }
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let c = tape.constant(centers.clone());
    let m = tape.constant(mean.clone());
    let l = tape.constant(log_var.clone());
    let kl = kl_tape(&mut tape, m, l);
    let v = margin_tape(&mut tape, zv, c, labels, kl, cfg);
    Ok(MarginLoss {
        hinge: tape.value(v.hinge).item(),
        kl: tape.value(v.kl).item(),
        penalty: tape.value(v.penalty).item(),
        total: tape.value(v.total).item(),
    })
}

/// Weights of the three regularizers in the full objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegWeights {
    pub lambda_a: f64,
    pub lambda_c: f64,
    pub lambda_m: f64,
}

impl RegWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_a", self.lambda_a), ("lambda_c", self.lambda_c), ("lambda_m", self.lambda_m)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(alloc::format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian, stream_rng, Stream};
    use alloc::vec;

    #[test]
    fn generator_shapes_and_nonnegativity() {
        let mut r = stream_rng(1, 0, Stream::Init);
        let g = Generator::init(7, 11, 5, 0.5, &mut r);
        let a = gaussian(4, 7, 2.0, &mut r);
        let x = generator_forward(&g, &a).unwrap();
        assert_eq!(x.shape(), [4, 5]);
        assert!(x.data().iter().all(|&v| v >= 0.0));
        assert_eq!(generator_forward(&g, &a).unwrap(), x);
        assert!(generator_forward(&g, &gaussian(1, 6, 1.0, &mut r)).is_err());
    }

    #[test]
    fn zero_generator_outputs_zero() {
        let g = Generator {
            w1: Tensor::zeros(4, 3),
            b1: Tensor::zeros(1, 3),
            w2: Tensor::zeros(3, 2),
            b2: Tensor::zeros(1, 2),
        };
        assert_eq!(generator_forward(&g, &Tensor::filled(2, 4, 1.0)).unwrap(), Tensor::zeros(2, 2));
    }

    #[test]
    fn map_floor_gives_mean_and_kl_zero_at_prior() {
        let mut r = stream_rng(2, 0, Stream::Init);
        let mut m = RedundancyFreeMap::init(4, 3, 2, 0.5, &mut r);
        m.w_logvar = Tensor::zeros(4, 3);
        m.b_logvar = Tensor::filled(1, 3, -1e9);
        let x = gaussian(5, 4, 1.0, &mut r);
        let s = map_forward(&m, &x, &mut r).unwrap();
        let bound = libm::exp(0.5 * LOG_VAR_MIN) * 6.0;
        assert!(s.z.zip_map(&s.mean, |a, b| (a - b).abs()).data().iter().all(|&d| d < bound));
        assert_eq!(kl_standard_normal(&Tensor::zeros(3, 4), &Tensor::zeros(3, 4)).unwrap(), 0.0);
        // One coordinate with μ = 1, σ² = 1 contributes 1/2.
        assert!((kl_standard_normal(&Tensor::row_vector(&[1.0]), &Tensor::row_vector(&[0.0])).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn gp_examples() {
        let unit = Critic { w: Tensor::from_vec(2, 1, vec![0.6, 0.8]).unwrap(), b: Tensor::scalar(0.3) };
        assert!(gradient_penalty_analytic(&unit) < 1e-15);
        let zero = Critic { w: Tensor::zeros(3, 1), b: Tensor::scalar(0.0) };
        assert_eq!(gradient_penalty_analytic(&zero), 1.0);
        let mut r = stream_rng(3, 0, Stream::Init);
        for _ in 0..10 {
            let c = Critic::init(6, 1.0, &mut r);
            let zh = gaussian(9, 6, 3.0, &mut r);
            let a = gradient_penalty_analytic(&c);
            let b = gradient_penalty_autodiff(&c, &zh).unwrap();
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn wgan_batch_mismatch() {
        let mut r = stream_rng(4, 0, Stream::Init);
        let c = Critic::init(3, 0.1, &mut r);
        let m = RedundancyFreeMap::init(5, 3, 2, 0.1, &mut r);
        assert!(loss_wgan_z(&c, &m, &Tensor::zeros(4, 5), &Tensor::zeros(3, 5), 1.0, &mut r).is_err());
        let w = loss_wgan_z(&c, &m, &gaussian(4, 5, 1.0, &mut r), &gaussian(4, 5, 1.0, &mut r), 1.0, &mut r).unwrap();
        assert!((w.gp_analytic - w.gp_autodiff).abs() < 1e-10);
    }

    #[test]
    fn cls_examples() {
        let u = Tensor::from_vec(2, 2, vec![10.0, 0.0, 0.0, 10.0]).unwrap();
        assert!(loss_cls(&Tensor::row_vector(&[10.0, 0.0]), &u, &[0]).unwrap() < 1e-40);
        let u3 = Tensor::from_vec(3, 3, vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 2.0, 2.0]).unwrap();
        let x = Tensor::row_vector(&[5.0, 0.0, 0.0]);
        assert!((loss_cls(&x, &u3, &[1]).unwrap() - 3f64.ln()).abs() < 1e-12);
        assert!(loss_cls(&x, &u3, &[3]).is_err());
    }

    fn z_at(v: &[f64]) -> Tensor {
        Tensor::row_vector(v)
    }

    #[test]
    fn margin_examples() {
        let cfg = MarginConfig::default();
        let centers = Tensor::from_vec(2, 2, vec![0.0, 0.0, 200f64.sqrt(), 0.0]).unwrap();
        let zero = Tensor::zeros(1, 2);
        let h = loss_m(&z_at(&[0.0, 0.0]), &zero, &zero, &centers, &[0], &cfg).unwrap();
        assert_eq!(h.hinge, 0.0);
        let mid = z_at(&[200f64.sqrt() / 2.0, 0.0]);
        let h = loss_m(&mid, &zero, &zero, &centers, &[0], &cfg).unwrap();
        assert!((h.hinge - 190.0).abs() < 1e-9);
        // KL exactly at the bound: μ² = 0.2 on one coordinate.
        let m = Tensor::row_vector(&[0.2f64.sqrt(), 0.0]);
        let h = loss_m(&z_at(&[0.0, 0.0]), &m, &zero, &centers, &[0], &cfg).unwrap();
        assert!((h.kl - 0.1).abs() < 1e-15);
        assert!(h.penalty < 1e-15);
        assert!(loss_m(&z_at(&[0.0, 0.0]), &zero, &zero, &centers, &[2], &cfg).is_err());
    }

    #[test]
    fn nearest_negative_skips_own_center() {
        let c = Tensor::from_vec(3, 1, vec![0.0, 1.0, 5.0]).unwrap();
        let z = Tensor::from_vec(2, 1, vec![0.1, 4.0]).unwrap();
        assert_eq!(nearest_negative(&z, &c, &[0, 2]), vec![1, 1]);
    }
}
