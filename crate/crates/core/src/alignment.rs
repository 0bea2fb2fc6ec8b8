//! Matching scores and the hierarchical semantic alignment losses.
//!
//! Each loss exists in two forms: a tape form used inside training, where
//! any input may carry gradients, and a value form over plain tensors that
//! checks shapes and returns `f64`. The value form is a thin wrapper that
//! records the tape form on a constant-only tape, so both always agree.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignmentWeights {
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
}

impl AlignmentWeights {
    pub fn new(alpha: f64, beta: f64, delta: f64) -> Self {
        Self { alpha, beta, delta }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("delta", self.delta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(alloc::format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Matching matrix `W` (`n × d_out`) of one semantic head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchingHead {
    pub w: Tensor,
}

impl MatchingHead {
    pub fn visual_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn semantic_dim(&self) -> usize {
        self.w.cols()
    }
}

/// Which alignment components an objective switches on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentPlan {
    pub sbc: bool,
    pub ubc: bool,
    pub cbc: bool,
    pub auxiliary: bool,
    pub random: bool,
}

impl AlignmentPlan {
    pub const FULL: Self = Self { sbc: true, ubc: true, cbc: true, auxiliary: true, random: true };
    pub const NONE: Self = Self { sbc: false, ubc: false, cbc: false, auxiliary: false, random: false };

    pub fn is_empty(&self) -> bool {
        *self == Self::NONE
    }
}

// ---------------------------------------------------------------------------
// Tape forms

/// `x · W · U_aᵀ`.
pub fn match_logits(tape: &mut Tape, x: Var, w: Var, protos: Var) -> Var {
    let xw = tape.matmul(x, w);
    tape.matmul_nt(xw, protos)
}

/// Mean over rows of `-Σ q log q` with `q = softmax(row)`.
pub fn entropy_tape(tape: &mut Tape, logits: Var) -> Var {
    let rows = tape.shape(logits)[0].max(1) as f64;
    let ls = tape.log_softmax(logits);
    let q = tape.exp(ls);
    let qls = tape.mul(q, ls);
    let s = tape.sum(qls);
    tape.scale(s, -1.0 / rows)
}

/// `(1/d) · ‖U_sᵀU_s − U_uᵀU_u‖²_F`.
pub fn cbc_tape(tape: &mut Tape, us: Var, uu: Var) -> Var {
    let d = tape.shape(us)[1].max(1) as f64;
    let ust = tape.transpose(us);
    let gs = tape.matmul(ust, us);
    let uut = tape.transpose(uu);
    let gu = tape.matmul(uut, uu);
    let diff = tape.sub(gs, gu);
    let sq = tape.square(diff);
    let s = tape.sum(sq);
    tape.scale(s, 1.0 / d)
}

/// Matching matrix and class prototypes of one head's sampled descriptions.
#[derive(Debug, Clone, Copy)]
pub struct HeadTerms {
    pub w: Option<Var>,
    pub proto_seen: Var,
    pub proto_unseen: Var,
}

/// Everything the alignment losses of one batch read.
#[derive(Debug, Clone)]
pub struct AlignmentVars<'a> {
    pub real_seen: Var,
    pub seen_labels: &'a [usize],
    pub fake_unseen: Option<Var>,
    pub unlabeled: Option<Var>,
    pub sharp: Option<HeadTerms>,
    pub dagger: Option<HeadTerms>,
    pub prime: Option<HeadTerms>,
}

/// Individual terms of the semantic alignment loss, unweighted.
#[derive(Debug, Clone, Copy, Default)]
pub struct SrTerms {
    pub sbc: Option<Var>,
    pub ubc: Option<Var>,
    pub cbc_sharp: Option<Var>,
    pub aux_seen_entropy: Option<Var>,
    pub aux_cbc: Option<Var>,
    pub aux_unlabeled_entropy: Option<Var>,
    pub cbc_prime: Option<Var>,
}

/// Weighted sub-losses and their sum.
#[derive(Debug, Clone, Copy)]
pub struct SrVars {
    pub bl: Var,
    pub al: Var,
    pub rl: Var,
    pub total: Var,
    pub terms: SrTerms,
}

fn need<T>(v: Option<T>, what: &'static str) -> Result<T> {
    v.ok_or(Error::MissingComponent(what))
}

fn weighted_sum(tape: &mut Tape, parts: &[(f64, Var)]) -> Var {
    let mut acc = tape.constant(Tensor::scalar(0.0));
    for &(k, v) in parts {
        let s = tape.scale(v, k);
        acc = tape.add(acc, s);
    }
    acc
}

/// `α·SBC + β·UBC + δ·CBC` on head `a‡`, restricted to the components in
/// `plan`.
pub fn loss_bl_tape(
    tape: &mut Tape,
    ctx: &AlignmentVars<'_>,
    weights: &AlignmentWeights,
    plan: &AlignmentPlan,
    terms: &mut SrTerms,
) -> Result<Var> {
    let mut parts = Vec::new();
    if plan.sbc || plan.ubc || plan.cbc {
        let h = need(ctx.sharp, "a‡ head")?;
        if plan.sbc {
            let w = need(h.w, "a‡ matching matrix")?;
            let logits = match_logits(tape, ctx.real_seen, w, h.proto_seen);
            let v = tape.cross_entropy(logits, ctx.seen_labels);
            terms.sbc = Some(v);
            parts.push((weights.alpha, v));
        }
        if plan.ubc {
            let w = need(h.w, "a‡ matching matrix")?;
            let fake = need(ctx.fake_unseen, "generated unseen features")?;
            let logits = match_logits(tape, fake, w, h.proto_unseen);
            let v = entropy_tape(tape, logits);
            terms.ubc = Some(v);
            parts.push((weights.beta, v));
        }
        if plan.cbc {
            let v = cbc_tape(tape, h.proto_seen, h.proto_unseen);
            terms.cbc_sharp = Some(v);
            parts.push((weights.delta, v));
        }
    }
    Ok(weighted_sum(tape, &parts))
}

/// Auxiliary loss on head `a†`: `α·entropy(real seen) + δ·CBC`, plus
/// `β·entropy(unlabeled)` when transductive.
pub fn loss_al_tape(
    tape: &mut Tape,
    ctx: &AlignmentVars<'_>,
    weights: &AlignmentWeights,
    transductive: bool,
    terms: &mut SrTerms,
) -> Result<Var> {
    let h = need(ctx.dagger, "a† head")?;
    let w = need(h.w, "a† matching matrix")?;
    let logits = match_logits(tape, ctx.real_seen, w, h.proto_seen);
    let seen_entropy = entropy_tape(tape, logits);
    let cbc = cbc_tape(tape, h.proto_seen, h.proto_unseen);
    terms.aux_seen_entropy = Some(seen_entropy);
    terms.aux_cbc = Some(cbc);
    let mut parts = alloc::vec![(weights.alpha, seen_entropy), (weights.delta, cbc)];
    if transductive {
        let x = need(ctx.unlabeled, "unlabeled features")?;
        let logits = match_logits(tape, x, w, h.proto_unseen);
        let v = entropy_tape(tape, logits);
        terms.aux_unlabeled_entropy = Some(v);
        parts.push((weights.beta, v));
    }
    Ok(weighted_sum(tape, &parts))
}

/// `δ·CBC` on head `a′`.
pub fn loss_rl_tape(tape: &mut Tape, ctx: &AlignmentVars<'_>, weights: &AlignmentWeights, terms: &mut SrTerms) -> Result<Var> {
    let h = need(ctx.prime, "a′ head")?;
    let v = cbc_tape(tape, h.proto_seen, h.proto_unseen);
    terms.cbc_prime = Some(v);
    Ok(tape.scale(v, weights.delta))
}

/// `L_bl + L_al + L_rl` with components gated by `plan`.
pub fn loss_sr_tape(
    tape: &mut Tape,
    ctx: &AlignmentVars<'_>,
    weights: &AlignmentWeights,
    plan: &AlignmentPlan,
    transductive: bool,
) -> Result<SrVars> {
    let mut terms = SrTerms::default();
    let bl = loss_bl_tape(tape, ctx, weights, plan, &mut terms)?;
    let al = if plan.auxiliary {
        loss_al_tape(tape, ctx, weights, transductive, &mut terms)?
    } else {
        tape.constant(Tensor::scalar(0.0))
    };
    let rl = if plan.random { loss_rl_tape(tape, ctx, weights, &mut terms)? } else { tape.constant(Tensor::scalar(0.0)) };
    let t = tape.add(bl, al);
    let total = tape.add(t, rl);
    Ok(SrVars { bl, al, rl, total, terms })
}

// ---------------------------------------------------------------------------
// Value forms

fn check_labels(labels: &[usize], rows: usize, classes: usize, context: &'static str) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Shape { context, expected: [rows, 1], found: [labels.len(), 1] });
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { context, label: l, classes });
    }
    Ok(())
}

pub fn match_scores(w: &MatchingHead, x: &Tensor, protos: &Tensor) -> Result<Tensor> {
    if x.cols() != w.visual_dim() {
        return Err(Error::Shape { context: "match_scores features", expected: [x.rows(), w.visual_dim()], found: x.shape() });
    }
    if protos.cols() != w.semantic_dim() {
        return Err(Error::Shape {
            context: "match_scores prototypes",
            expected: [protos.rows(), w.semantic_dim()],
            found: protos.shape(),
        });
    }
    Ok(x.matmul(&w.w).matmul_nt(protos))
}

pub fn loss_sbc(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    check_labels(labels, logits.rows(), logits.cols(), "loss_sbc")?;
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let v = tape.cross_entropy(l, labels);
    Ok(tape.value(v).item())
}

pub fn loss_entropy(logits: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let v = entropy_tape(&mut tape, l);
    tape.value(v).item()
}

pub fn loss_cbc(us: &Tensor, uu: &Tensor) -> Result<f64> {
    if us.cols() != uu.cols() {
        return Err(Error::Shape { context: "loss_cbc", expected: [uu.rows(), us.cols()], found: uu.shape() });
    }
    let mut tape = Tape::new();
    let a = tape.constant(us.clone());
    let b = tape.constant(uu.clone());
    let v = cbc_tape(&mut tape, a, b);
    Ok(tape.value(v).item())
}

/// Prototypes of one head's descriptions plus its matching matrix.
#[derive(Debug, Clone, Copy)]
pub struct HeadBatch<'a> {
    pub w: Option<&'a MatchingHead>,
    pub proto_seen: &'a Tensor,
    pub proto_unseen: &'a Tensor,
}

/// Plain-tensor inputs to the alignment losses.
#[derive(Debug, Clone, Default)]
pub struct AlignmentBatch<'a> {
    pub real_seen: Option<&'a Tensor>,
    pub seen_labels: &'a [usize],
    pub fake_unseen: Option<&'a Tensor>,
    pub unlabeled: Option<&'a Tensor>,
    pub sharp: Option<HeadBatch<'a>>,
    pub dagger: Option<HeadBatch<'a>>,
    pub prime: Option<HeadBatch<'a>>,
}

/// Values of the weighted sub-losses and of every unweighted term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SrBreakdown {
    pub bl: f64,
    pub al: f64,
    pub rl: f64,
    pub total: f64,
    pub sbc: Option<f64>,
    pub ubc: Option<f64>,
    pub cbc_sharp: Option<f64>,
    pub aux_seen_entropy: Option<f64>,
    pub aux_cbc: Option<f64>,
    pub aux_unlabeled_entropy: Option<f64>,
    pub cbc_prime: Option<f64>,
}

impl SrBreakdown {
    pub fn from_tape(tape: &Tape, v: &SrVars) -> Self {
        let get = |o: Option<Var>| o.map(|x| tape.value(x).item());
        Self {
            bl: tape.value(v.bl).item(),
            al: tape.value(v.al).item(),
            rl: tape.value(v.rl).item(),
            total: tape.value(v.total).item(),
            sbc: get(v.terms.sbc),
            ubc: get(v.terms.ubc),
            cbc_sharp: get(v.terms.cbc_sharp),
            aux_seen_entropy: get(v.terms.aux_seen_entropy),
            aux_cbc: get(v.terms.aux_cbc),
            aux_unlabeled_entropy: get(v.terms.aux_unlabeled_entropy),
            cbc_prime: get(v.terms.cbc_prime),
        }
    }
}

fn bind_head(tape: &mut Tape, h: &HeadBatch<'_>, visual_dim: usize) -> Result<HeadTerms> {
    if h.proto_seen.cols() != h.proto_unseen.cols() {
        return Err(Error::Shape {
            context: "head prototypes",
            expected: [h.proto_unseen.rows(), h.proto_seen.cols()],
            found: h.proto_unseen.shape(),
        });
    }
    let w = match h.w {
        Some(m) => {
            if m.w.shape() != [visual_dim, h.proto_seen.cols()] {
                return Err(Error::Shape {
                    context: "matching matrix",
                    expected: [visual_dim, h.proto_seen.cols()],
                    found: m.w.shape(),
                });
            }
            Some(tape.constant(m.w.clone()))
        }
        None => None,
    };
    Ok(HeadTerms { w, proto_seen: tape.constant(h.proto_seen.clone()), proto_unseen: tape.constant(h.proto_unseen.clone()) })
}

fn bind_batch<'a>(tape: &mut Tape, b: &AlignmentBatch<'a>) -> Result<AlignmentVars<'a>> {
    let real = need(b.real_seen, "real seen features")?;
    let n = real.cols();
    for (name, t) in [("generated unseen features", b.fake_unseen), ("unlabeled features", b.unlabeled)] {
        if let Some(t) = t {
            if t.cols() != n {
                return Err(Error::Shape { context: name, expected: [t.rows(), n], found: t.shape() });
            }
        }
    }
    if let Some(h) = &b.sharp {
        check_labels(b.seen_labels, real.rows(), h.proto_seen.rows(), "seen labels")?;
    }
    let mut head = |h: &Option<HeadBatch<'_>>| h.as_ref().map(|h| bind_head(tape, h, n)).transpose();
    let sharp = head(&b.sharp)?;
    let dagger = head(&b.dagger)?;
    let prime = head(&b.prime)?;
    Ok(AlignmentVars {
        real_seen: tape.constant(real.clone()),
        seen_labels: b.seen_labels,
        fake_unseen: b.fake_unseen.map(|t| tape.constant(t.clone())),
        unlabeled: b.unlabeled.map(|t| tape.constant(t.clone())),
        sharp,
        dagger,
        prime,
    })
}

pub fn loss_bl(b: &AlignmentBatch<'_>, weights: &AlignmentWeights) -> Result<f64> {
    let mut tape = Tape::new();
    let ctx = bind_batch(&mut tape, b)?;
    let v = loss_bl_tape(&mut tape, &ctx, weights, &AlignmentPlan::FULL, &mut SrTerms::default())?;
    Ok(tape.value(v).item())
}

pub fn loss_al(b: &AlignmentBatch<'_>, weights: &AlignmentWeights, transductive: bool) -> Result<f64> {
    let mut tape = Tape::new();
    let ctx = bind_batch(&mut tape, b)?;
    let v = loss_al_tape(&mut tape, &ctx, weights, transductive, &mut SrTerms::default())?;
    Ok(tape.value(v).item())
}

pub fn loss_rl(us: &Tensor, uu: &Tensor, weights: &AlignmentWeights) -> Result<f64> {
    Ok(weights.delta * loss_cbc(us, uu)?)
}

pub fn loss_sr(b: &AlignmentBatch<'_>, weights: &AlignmentWeights, transductive: bool) -> Result<SrBreakdown> {
    let mut tape = Tape::new();
    let ctx = bind_batch(&mut tape, b)?;
    let v = loss_sr_tape(&mut tape, &ctx, weights, &AlignmentPlan::FULL, transductive)?;
    Ok(SrBreakdown::from_tape(&tape, &v))
}
