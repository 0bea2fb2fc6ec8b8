//! Central finite-difference checks of tape gradients.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::alignment::{cbc_tape, entropy_tape, loss_sr_tape, match_logits, AlignmentPlan, AlignmentVars, AlignmentWeights, HeadTerms};
use crate::error::Result;
use crate::generation::{
    cls_tape, critic_tape, generator_tape, gradient_penalty_tape, kl_tape, map_tape, margin_tape, wgan_tape, CriticVars,
    GeneratorVars, MapVars, MarginConfig,
};
use crate::rng::{gaussian, stream_rng, Stream};
use crate::semantic::{head_forward_tape, HeadVars};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Relative error `‖g − ĝ‖ / (‖g‖ + ‖ĝ‖)` per input, where `ĝ` is the
/// central difference. Inputs whose gradients are both below `1e-10` count
/// as exact.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut vals = inputs.to_vec();
    let mut errors = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let analytic = grads.get_or_zeros(vars[i], inputs[i].shape());
        let mut numeric = Tensor::zeros(inputs[i].rows(), inputs[i].cols());
        for j in 0..inputs[i].len() {
            let x = inputs[i].data()[j];
            vals[i].data_mut()[j] = x + h;
            let up = eval(&vals)?;
            vals[i].data_mut()[j] = x - h;
            let down = eval(&vals)?;
            vals[i].data_mut()[j] = x;
            numeric.data_mut()[j] = (up - down) / (2.0 * h);
        }
        let (na, nn) = (analytic.frobenius(), numeric.frobenius());
        let diff = analytic.zip_map(&numeric, |a, b| a - b).frobenius();
        errors.push(if na < 1e-10 && nn < 1e-10 { 0.0 } else { diff / (na + nn) });
    }
    Ok(errors)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub name: &'static str,
    /// Largest relative error over the differentiated inputs.
    pub max_rel_error: f64,
}

fn max_of(v: Vec<f64>) -> f64 {
    v.into_iter().fold(0.0, f64::max)
}

fn head_vars(v: &[Var]) -> HeadVars {
    HeadVars { w_mean: v[0], b_mean: v[1], w_logvar: v[2], b_logvar: v[3] }
}

fn map_vars(v: &[Var]) -> MapVars {
    MapVars { w_mean: v[0], b_mean: v[1], w_logvar: v[2], b_logvar: v[3], centers: v[4] }
}

fn weighted(tape: &mut Tape, v: Var, r: &Tensor) -> Var {
    let r = tape.constant(r.clone());
    let p = tape.mul(v, r);
    tape.sum(p)
}

/// Checks every differentiable loss and network block on random inputs
/// drawn from `seed`. Dimensions are small so one call takes milliseconds.
pub fn loss_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = stream_rng(seed, 0, Stream::Noise);
    let mut g = |r: usize, c: usize, s: f64| gaussian(r, c, s, &mut rng);
    let (rows, d, k, n, zd, classes) = (6, 4, 3, 5, 3, 3);
    let labels: Vec<usize> = (0..rows).map(|i| i % classes).collect();
    let mut out = Vec::new();
    let mut push = |name, e: Vec<f64>| out.push(GradCheck { name, max_rel_error: max_of(e) });

    // semantic head: mean, clamped log-variance and reparameterized sample
    let attrs = g(rows, d, 1.0);
    let eps = g(rows, k, 1.0);
    let r = g(rows, k, 1.0);
    let head = [g(d, k, 0.5), g(1, k, 0.5), g(d, k, 0.5), g(1, k, 0.5), attrs.clone()];
    push(
        "semantic_head",
        check(&head, STEP, |t, v| {
            let o = head_forward_tape(t, &head_vars(v), v[4], &eps);
            let s = weighted(t, o.sample, &r);
            let kl = kl_tape(t, o.mean, o.log_var);
            Ok(t.add(s, kl))
        })?,
    );

    let x_in = g(rows, d + k, 1.0);
    let r_gen = g(rows, n, 1.0);
    let gen = [g(d + k, 7, 0.5), g(1, 7, 0.5), g(7, n, 0.5), g(1, n, 0.5), x_in];
    push(
        "generator",
        check(&gen, STEP, |t, v| {
            let gv = GeneratorVars { w1: v[0], b1: v[1], w2: v[2], b2: v[3] };
            let x = generator_tape(t, &gv, v[4]);
            Ok(weighted(t, x, &r_gen))
        })?,
    );

    let x = g(rows, n, 1.0);
    let eps_z = g(rows, zd, 1.0);
    let r_z = g(rows, zd, 1.0);
    let map = [g(n, zd, 0.5), g(1, zd, 0.5), g(n, zd, 0.5), g(1, zd, 0.5), g(classes, zd, 1.0), x.clone()];
    push(
        "mapping",
        check(&map, STEP, |t, v| {
            let o = map_tape(t, &map_vars(v), v[5], &eps_z);
            let s = weighted(t, o.z, &r_z);
            let kl = kl_tape(t, o.mean, o.log_var);
            Ok(t.add(s, kl))
        })?,
    );

    let mean = g(rows, zd, 1.0);
    let log_var = g(rows, zd, 1.0);
    push("kl", check(&[mean, log_var], STEP, |t, v| Ok(kl_tape(t, v[0], v[1])))?);

    let critic = [g(zd, 1, 0.7), g(1, 1, 0.7), g(rows, zd, 1.0), g(rows, zd, 1.0)];
    push(
        "critic",
        check(&critic, STEP, |t, v| {
            let s = critic_tape(t, &CriticVars { w: v[0], b: v[1] }, v[2]);
            Ok(t.mean(s))
        })?,
    );
    push(
        "wgan_critic_loss",
        check(&critic, STEP, |t, v| Ok(wgan_tape(t, &CriticVars { w: v[0], b: v[1] }, v[2], v[3], 1.0).critic_loss))?,
    );
    push(
        "wgan_generator_loss",
        check(&critic, STEP, |t, v| Ok(wgan_tape(t, &CriticVars { w: v[0], b: v[1] }, v[2], v[3], 1.0).generator_loss))?,
    );
    push(
        "gradient_penalty",
        check(&critic[..2], STEP, |t, v| Ok(gradient_penalty_tape(t, &CriticVars { w: v[0], b: v[1] })))?,
    );

    // margin with a small margin so that some hinges are active and some not
    let cfg = MarginConfig { margin: 1.0, kl_bound: 0.1, kl_multiplier: 1.0 };
    let margin_in = [g(rows, zd, 1.0), g(classes, zd, 1.0), g(rows, zd, 0.5), g(rows, zd, 0.5)];
    push(
        "margin",
        check(&margin_in, STEP, |t, v| {
            let kl = kl_tape(t, v[2], v[3]);
            Ok(margin_tape(t, v[0], v[1], &labels, kl, &cfg).total)
        })?,
    );

    let protos = g(classes, n, 1.0);
    push("cls", check(&[g(rows, n, 1.0)], STEP, |t, v| Ok(cls_tape(t, v[0], &protos, &labels)))?);

    let match_in = [g(rows, n, 1.0), g(n, k, 0.5), g(classes, k, 1.0)];
    push(
        "sbc_cross_entropy",
        check(&match_in, STEP, |t, v| {
            let l = match_logits(t, v[0], v[1], v[2]);
            Ok(t.cross_entropy(l, &labels))
        })?,
    );
    push(
        "entropy",
        check(&match_in, STEP, |t, v| {
            let l = match_logits(t, v[0], v[1], v[2]);
            Ok(entropy_tape(t, l))
        })?,
    );
    push("cbc", check(&[g(classes, k, 1.0), g(2, k, 1.0)], STEP, |t, v| Ok(cbc_tape(t, v[0], v[1])))?);

    // full alignment loss, transductive, all three heads
    let q = 2;
    let weights = AlignmentWeights { alpha: 0.7, beta: 1.3, delta: 0.4 };
    let seen_labels: Vec<usize> = (0..rows).map(|i| i % classes).collect();
    let sr_in = [
        g(rows, n, 1.0),
        g(4, n, 1.0),
        g(5, n, 1.0),
        g(n, k, 0.5),
        g(n, k, 0.5),
        g(classes, k, 1.0),
        g(q, k, 1.0),
        g(classes, k, 1.0),
        g(q, k, 1.0),
        g(classes, k, 1.0),
        g(q, k, 1.0),
    ];
    for (name, plan, transductive) in [
        ("loss_sr_inductive", AlignmentPlan::FULL, false),
        ("loss_sr_transductive", AlignmentPlan::FULL, true),
    ] {
        push(
            name,
            check(&sr_in, STEP, |t, v| {
                let ctx = AlignmentVars {
                    real_seen: v[0],
                    seen_labels: &seen_labels,
                    fake_unseen: Some(v[1]),
                    unlabeled: Some(v[2]),
                    sharp: Some(HeadTerms { w: Some(v[3]), proto_seen: v[5], proto_unseen: v[6] }),
                    dagger: Some(HeadTerms { w: Some(v[4]), proto_seen: v[7], proto_unseen: v[8] }),
                    prime: Some(HeadTerms { w: None, proto_seen: v[9], proto_unseen: v[10] }),
                };
                Ok(loss_sr_tape(t, &ctx, &weights, &plan, transductive)?.total)
            })?,
        );
    }
    Ok(out)
}
