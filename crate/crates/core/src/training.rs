//! The adversarial training loop.
//!
//! Each round runs `critic_steps` joint updates of the critic and the
//! mapping, then one update of the generator and semantic heads, then (after
//! the warm-up epochs) one update of the matching matrices. Four Adam
//! optimizers own disjoint parameter groups.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::adam::AdamState;
use crate::alignment::{loss_sr_tape, AlignmentVars, HeadTerms, SrBreakdown, SrVars};
use crate::data::{averaging_matrix, class_prototypes, gather_rows, Batch, BatchSampler, FeatureDataset, RowSource, TaskMode};
use crate::error::{Error, Result};
use crate::evaluation::{self, fit_softmax, ClassifierConfig, EvalSettings};
use crate::generation::{
    cls_tape, critic_tape, generator_tape, gradient_penalty_autodiff, interpolate, kl_tape, map_forward, map_tape,
    margin_tape, wgan_tape, CriticVars, GeneratorVars, MapVars,
};
use crate::model::{Architecture, FrozenClassifier, Group, HyperParams, ModelState, Variant};
use crate::rng::{self, derive_seed, stream_rng, SrwganRng, Stream};
use crate::semantic::{head_forward_tape, head_noise, HeadOutput, HeadVars};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

fn default_critic_steps() -> usize {
    5
}

fn default_fn_samples() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Epochs before the semantic alignment loss switches on.
    pub warmup: usize,
    pub batch_size: usize,
    pub mode: TaskMode,
    /// Labeled samples per unseen class (few-shot mode only).
    #[serde(default)]
    pub shots: usize,
    #[serde(default = "variant_a")]
    pub variant: Variant,
    pub hyper: HyperParams,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub run_index: u64,
    /// Defaults to `ceil(|train_seen| / batch_size)`.
    #[serde(default)]
    pub rounds_per_epoch: Option<usize>,
    #[serde(default = "default_critic_steps")]
    pub critic_steps: usize,
    /// Synthetic samples per seen class for the per-epoch compactness
    /// record; 0 disables it.
    #[serde(default = "default_fn_samples")]
    pub fn_samples: usize,
    /// Also record unseen compactness against real unseen test features.
    /// Reads test data, so it is refused in inductive modes.
    #[serde(default)]
    pub track_unseen_compactness: bool,
    /// Run the full evaluation every this many epochs (0 = never). Reads
    /// test data, so it is refused in inductive modes.
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default)]
    pub eval: Option<EvalSettings>,
}

fn variant_a() -> Variant {
    Variant::A
}

impl TrainConfig {
    pub fn new(hyper: HyperParams, mode: TaskMode, epochs: usize, warmup: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            epochs,
            warmup,
            batch_size,
            mode,
            shots: 0,
            variant: Variant::A,
            hyper,
            seed,
            run_index: 0,
            rounds_per_epoch: None,
            critic_steps: default_critic_steps(),
            fn_samples: default_fn_samples(),
            track_unseen_compactness: false,
            eval_every: 0,
            eval: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.epochs > 0 && self.warmup >= self.epochs {
            return bad("warm-up must be shorter than training");
        }
        if self.batch_size == 0 || self.critic_steps == 0 {
            return bad("batch size and critic steps must be positive");
        }
        if self.mode.uses_shots() && self.shots == 0 {
            return bad("few-shot mode needs shots > 0");
        }
        if !self.mode.uses_shots() && self.shots != 0 {
            return bad("shots are only used in few-shot mode");
        }
        if self.rounds_per_epoch == Some(0) {
            return bad("rounds_per_epoch must be positive");
        }
        let reads_test = self.track_unseen_compactness || self.eval_every > 0;
        if reads_test && !self.mode.is_transductive() {
            return bad("test-split monitoring is only allowed in transductive modes");
        }
        if self.eval_every > 0 && self.eval.is_none() {
            return bad("eval_every needs eval settings");
        }
        Ok(())
    }

    pub fn architecture(&self, ds: &FeatureDataset) -> Architecture {
        let labeled = ds.seen_classes.len() + if self.mode.uses_shots() { ds.unseen_classes.len() } else { 0 };
        Architecture {
            feature_dim: ds.feature_dim,
            attribute_dim: ds.attribute_dim,
            head_dim: self.hyper.head_dim,
            generator_hidden: self.hyper.generator_hidden,
            map_dim: self.hyper.map_dim,
            labeled_classes: labeled,
            variant: self.variant,
        }
    }
}

/// Losses averaged over the steps of one epoch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub critic_loss: f64,
    /// `E[D(z)] − E[D(z̃)]` on the critic batches.
    pub wasserstein: f64,
    pub gp: f64,
    pub gp_autodiff: f64,
    pub loss_m: f64,
    pub hinge: f64,
    pub kl: f64,
    pub generator_loss: f64,
    pub loss_cls: f64,
    pub sr_active: bool,
    pub sr: Option<SrBreakdown>,
    pub fn_seen: Option<f64>,
    pub fn_unseen: Option<f64>,
    pub unseen: Option<f64>,
    pub seen: Option<f64>,
    pub harmonic: Option<f64>,
}

impl EpochRecord {
    /// Column order of [`EpochRecord::csv_row`].
    pub const CSV_HEADER: &'static str = "epoch,critic_loss,wasserstein,gp,gp_autodiff,loss_m,hinge,kl,generator_loss,loss_cls,sr_active,loss_sr,loss_bl,loss_al,loss_rl,fn_seen,fn_unseen,unseen,seen,harmonic";

    pub fn csv_row(&self) -> alloc::string::String {
        let o = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let sr = self.sr.as_ref();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.critic_loss,
            self.wasserstein,
            self.gp,
            self.gp_autodiff,
            self.loss_m,
            self.hinge,
            self.kl,
            self.generator_loss,
            self.loss_cls,
            self.sr_active as u8,
            o(sr.map(|s| s.total)),
            o(sr.map(|s| s.bl)),
            o(sr.map(|s| s.al)),
            o(sr.map(|s| s.rl)),
            o(self.fn_seen),
            o(self.fn_unseen),
            o(self.unseen),
            o(self.seen),
            o(self.harmonic),
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub records: Vec<EpochRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepKind {
    Critic,
    Generator,
    Matching,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepEvent {
    pub epoch: usize,
    pub round: usize,
    pub kind: StepKind,
    /// Whether the semantic alignment loss contributed to this step.
    pub sr_active: bool,
}

/// Hooks called after every optimizer step and every epoch.
pub trait TrainObserver {
    fn on_step(&mut self, _event: &StepEvent, _model: &ModelState) {}
    fn on_epoch(&mut self, _record: &EpochRecord, _model: &ModelState) {}
}

impl TrainObserver for () {}

/// Adam states of the four parameter groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizers {
    pub generator: AdamState,
    pub critic: AdamState,
    pub mapping: AdamState,
    pub matching: AdamState,
}

impl Optimizers {
    pub fn new(model: &ModelState, hyper: &HyperParams) -> Self {
        let mk = |g| AdamState::new(hyper.adam, &model.group_shapes(g));
        Self {
            generator: mk(Group::Generator),
            critic: mk(Group::Critic),
            mapping: mk(Group::Mapping),
            matching: mk(Group::Matching),
        }
    }
}

#[derive(Clone)]
struct EpochRngs {
    batches: SrwganRng,
    heads: SrwganRng,
    mapping: SrwganRng,
    interpolation: SrwganRng,
    monitor: SrwganRng,
}

impl EpochRngs {
    fn new(seed: u64, run: u64, epoch: usize) -> Self {
        let s = derive_seed(seed, epoch as u64);
        Self {
            batches: stream_rng(s, run, Stream::Batches),
            heads: stream_rng(s, run, Stream::Heads),
            mapping: stream_rng(s, run, Stream::Mapping),
            interpolation: stream_rng(s, run, Stream::Interpolation),
            monitor: stream_rng(s, run, Stream::Synthesis),
        }
    }
}

/// Parameters bound to one tape.
struct Bound {
    heads: Vec<HeadVars>,
    generator: GeneratorVars,
    critic: CriticVars,
    mapping: MapVars,
    matching: Vec<Var>,
}

impl Bound {
    fn new(tape: &mut Tape, m: &ModelState, trainable: &[Group]) -> Self {
        let t = |g| trainable.contains(&g);
        let heads = m.heads.iter().map(|h| h.bind(tape, t(Group::Generator))).collect();
        let generator = m.generator.bind(tape, t(Group::Generator));
        let critic = m.critic.bind(tape, t(Group::Critic));
        let mapping = m.mapping.bind(tape, t(Group::Mapping));
        let matching = m
            .matching
            .iter()
            .map(|w| if t(Group::Matching) { tape.param(w.w.clone()) } else { tape.constant(w.w.clone()) })
            .collect();
        Self { heads, generator, critic, mapping, matching }
    }

    fn vars(&self, g: Group) -> Vec<Var> {
        match g {
            Group::Generator => self.heads.iter().flat_map(|h| h.vars()).chain(self.generator.vars()).collect(),
            Group::Critic => self.critic.vars().to_vec(),
            Group::Mapping => self.mapping.vars().to_vec(),
            Group::Matching => self.matching.clone(),
        }
    }
}

/// Generator input and head outputs for a block of attribute rows. Noise is
/// drawn in the same order as [`evaluation::generator_input`].
fn describe(tape: &mut Tape, b: &Bound, m: &ModelState, attrs: &Tensor, rng: &mut SrwganRng) -> (Var, Vec<HeadOutput>) {
    let rows = attrs.rows();
    let a = tape.constant(attrs.clone());
    let mut parts = Vec::new();
    if m.arch.variant.uses_noise() {
        parts.push(tape.constant(head_noise(rows, m.arch.head_dim, rng)));
    }
    let mut outs = Vec::with_capacity(b.heads.len());
    for h in &b.heads {
        let eps = head_noise(rows, m.arch.head_dim, rng);
        let o = head_forward_tape(tape, h, a, &eps);
        parts.push(o.sample);
        outs.push(o);
    }
    parts.push(a);
    (tape.concat_cols(&parts), outs)
}

fn apply(opt: &mut AdamState, model: &mut ModelState, g: Group, vars: &[Var], grads: &Gradients) -> Result<()> {
    let gs: Vec<Tensor> = {
        let shapes = model.group_shapes(g);
        vars.iter().zip(shapes).map(|(&v, s)| grads.get_or_zeros(v, s)).collect()
    };
    let mut params = model.group_mut(g);
    opt.step(&mut params, &gs)
}

#[derive(Default)]
struct Accum {
    critic: [f64; 8],
    critic_n: usize,
    generator: [f64; 2],
    generator_n: usize,
    sr: Option<SrBreakdown>,
    sr_n: usize,
}

fn add_sr(acc: &mut Option<SrBreakdown>, s: &SrBreakdown) {
    let a = acc.get_or_insert_with(SrBreakdown::default);
    a.bl += s.bl;
    a.al += s.al;
    a.rl += s.rl;
    a.total += s.total;
    let add = |x: &mut Option<f64>, y: Option<f64>| {
        if let Some(y) = y {
            *x = Some(x.unwrap_or(0.0) + y);
        }
    };
    add(&mut a.sbc, s.sbc);
    add(&mut a.ubc, s.ubc);
    add(&mut a.cbc_sharp, s.cbc_sharp);
    add(&mut a.aux_seen_entropy, s.aux_seen_entropy);
    add(&mut a.aux_cbc, s.aux_cbc);
    add(&mut a.aux_unlabeled_entropy, s.aux_unlabeled_entropy);
    add(&mut a.cbc_prime, s.cbc_prime);
}

fn scale_sr(s: &mut SrBreakdown, k: f64) {
    s.bl *= k;
    s.al *= k;
    s.rl *= k;
    s.total *= k;
    for v in [
        &mut s.sbc,
        &mut s.ubc,
        &mut s.cbc_sharp,
        &mut s.aux_seen_entropy,
        &mut s.aux_cbc,
        &mut s.aux_unlabeled_entropy,
        &mut s.cbc_prime,
    ] {
        if let Some(x) = v {
            *x *= k;
        }
    }
}

fn check_finite(v: f64, what: &str, epoch: usize, round: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} = {v} at epoch {epoch}, round {round}")))
    }
}

/// Everything a training run owns between epochs.
pub struct Trainer<'a, S: RowSource + ?Sized> {
    cfg: TrainConfig,
    ds: &'a FeatureDataset,
    source: &'a S,
    sampler: BatchSampler<'a, S>,
    model: ModelState,
    opts: Optimizers,
    history: RunHistory,
    rounds: usize,
    labeled_classes: Vec<u32>,
    real_seen_protos: Option<Tensor>,
}

impl<'a, S: RowSource + ?Sized> Trainer<'a, S> {
    /// Fresh run: weights drawn from `N(0, init_std²)`.
    pub fn new(cfg: TrainConfig, ds: &'a FeatureDataset, source: &'a S) -> Result<Self> {
        cfg.validate()?;
        let arch = cfg.architecture(ds);
        let model = ModelState::init(arch, cfg.hyper.init_std, &mut stream_rng(cfg.seed, cfg.run_index, Stream::Init));
        let opts = Optimizers::new(&model, &cfg.hyper);
        Self::assemble(cfg, ds, source, model, opts, RunHistory::default(), true)
    }

    /// Continues a run from saved parameters, optimizer state and history.
    pub fn resume(
        cfg: TrainConfig,
        ds: &'a FeatureDataset,
        source: &'a S,
        model: ModelState,
        opts: Optimizers,
        history: RunHistory,
    ) -> Result<Self> {
        cfg.validate()?;
        if model.arch != cfg.architecture(ds) {
            return Err(Error::InvalidConfig("checkpoint architecture does not match the config and dataset".into()));
        }
        for (g, st) in [
            (Group::Generator, &opts.generator),
            (Group::Critic, &opts.critic),
            (Group::Mapping, &opts.mapping),
            (Group::Matching, &opts.matching),
        ] {
            let shapes = model.group_shapes(g);
            if st.first_moments().iter().map(|t| t.shape()).ne(shapes.iter().copied()) {
                return Err(Error::InvalidConfig("optimizer state does not match the model".into()));
            }
        }
        Self::assemble(cfg, ds, source, model, opts, history, false)
    }

    fn assemble(
        cfg: TrainConfig,
        ds: &'a FeatureDataset,
        source: &'a S,
        mut model: ModelState,
        opts: Optimizers,
        history: RunHistory,
        fresh: bool,
    ) -> Result<Self> {
        ds.validate()?;
        let sampler = BatchSampler::new(
            ds,
            source,
            cfg.mode,
            cfg.batch_size,
            cfg.shots,
            &mut stream_rng(cfg.seed, cfg.run_index, Stream::Shots),
        )?;
        let mut labeled_classes = ds.seen_classes.clone();
        if cfg.mode.uses_shots() {
            labeled_classes.extend_from_slice(&ds.unseen_classes);
        }
        let labeled_idx: Vec<u32> = ds.splits.train_seen.iter().chain(sampler.shots()).copied().collect();
        if fresh && cfg.variant.uses_pretrained_classifier() {
            let x = gather_rows(source, ds.feature_dim, &labeled_idx);
            let clf = fit_softmax(
                &x,
                &ds.labels_of(&labeled_idx),
                &labeled_classes,
                &ClassifierConfig::default(),
                &mut stream_rng(cfg.seed, cfg.run_index, Stream::Classifier),
            )?;
            model.pretrained = Some(FrozenClassifier { weights: clf.weights, bias: clf.bias });
        }
        if cfg.variant.uses_pretrained_classifier() && model.pretrained.is_none() {
            return Err(Error::MissingComponent("pretrained classifier"));
        }
        let real_seen_protos = if cfg.fn_samples > 0 {
            let x = gather_rows(source, ds.feature_dim, &ds.splits.train_seen);
            Some(class_prototypes(&x, &ds.labels_of(&ds.splits.train_seen), &ds.seen_classes)?.rows)
        } else {
            None
        };
        let rounds = cfg.rounds_per_epoch.unwrap_or_else(|| ds.splits.train_seen.len().div_ceil(cfg.batch_size).max(1));
        Ok(Self { cfg, ds, source, sampler, model, opts, history, rounds, labeled_classes, real_seen_protos })
    }

    pub fn model(&self) -> &ModelState {
        &self.model
    }

    pub fn optimizers(&self) -> &Optimizers {
        &self.opts
    }

    pub fn history(&self) -> &RunHistory {
        &self.history
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn rounds_per_epoch(&self) -> usize {
        self.rounds
    }

    /// Indices of the few-shot samples in use.
    pub fn shots(&self) -> &[u32] {
        self.sampler.shots()
    }

    /// Number of completed epochs.
    pub fn epoch(&self) -> usize {
        self.history.records.len()
    }

    pub fn into_parts(self) -> (ModelState, Optimizers, RunHistory) {
        (self.model, self.opts, self.history)
    }

    /// Runs until `cfg.epochs` epochs are complete.
    pub fn run(&mut self, observer: &mut dyn TrainObserver) -> Result<()> {
        while self.epoch() < self.cfg.epochs {
            self.run_epoch(observer)?;
        }
        Ok(())
    }

    fn labeled_local(&self, batch: &Batch) -> Vec<usize> {
        let p = self.ds.seen_classes.len();
        let mut out = batch.seen_local.clone();
        for &c in &batch.labeled_classes[batch.seen_rows..] {
            out.push(p + self.ds.unseen_index(c).expect("shot classes are unseen"));
        }
        out
    }

    fn labeled_attrs(&self, batch: &Batch) -> Tensor {
        self.ds.attribute_matrix(&batch.labeled_classes)
    }

    fn unseen_attrs(&self, batch: &Batch) -> Tensor {
        let ids: Vec<u32> = batch.unseen_local.iter().map(|&l| self.ds.unseen_classes[l]).collect();
        self.ds.attribute_matrix(&ids)
    }

    /// Runs one epoch (1-based index `self.epoch() + 1`).
    pub fn run_epoch(&mut self, observer: &mut dyn TrainObserver) -> Result<EpochRecord> {
        let epoch = self.epoch() + 1;
        let sr_active = epoch > self.cfg.warmup && !self.cfg.variant.plan().is_empty();
        let mut r = EpochRngs::new(self.cfg.seed, self.cfg.run_index, epoch);
        let mut acc = Accum::default();
        for round in 0..self.rounds {
            for _ in 0..self.cfg.critic_steps {
                let batch = self.sampler.sample(&mut r.batches);
                let s = self.critic_step(&batch, &mut r, epoch, round)?;
                for (a, v) in acc.critic.iter_mut().zip(s) {
                    *a += v;
                }
                acc.critic_n += 1;
                observer.on_step(&StepEvent { epoch, round, kind: StepKind::Critic, sr_active: false }, &self.model);
            }
            let batch = self.sampler.sample(&mut r.batches);
            let (g, sr) = self.generator_step(&batch, &mut r, sr_active, epoch, round)?;
            acc.generator[0] += g[0];
            acc.generator[1] += g[1];
            acc.generator_n += 1;
            observer.on_step(&StepEvent { epoch, round, kind: StepKind::Generator, sr_active }, &self.model);
            if sr_active {
                let sr_w = self.matching_step(&batch, &mut r, epoch, round)?;
                add_sr(&mut acc.sr, &sr_w);
                acc.sr_n += 1;
                observer.on_step(&StepEvent { epoch, round, kind: StepKind::Matching, sr_active }, &self.model);
            }
            debug_assert!(sr.is_some() == sr_active);
        }

        let kc = 1.0 / acc.critic_n.max(1) as f64;
        let kg = 1.0 / acc.generator_n.max(1) as f64;
        let c = acc.critic;
        let mut sr = acc.sr.take();
        if let Some(s) = sr.as_mut() {
            scale_sr(s, 1.0 / acc.sr_n.max(1) as f64);
        }
        let mut record = EpochRecord {
            epoch,
            critic_loss: c[0] * kc,
            wasserstein: c[1] * kc,
            gp: c[2] * kc,
            gp_autodiff: c[3] * kc,
            loss_m: c[4] * kc,
            hinge: c[5] * kc,
            kl: c[6] * kc,
            generator_loss: acc.generator[0] * kg,
            loss_cls: acc.generator[1] * kg,
            sr_active,
            sr,
            ..EpochRecord::default()
        };
        self.monitor(&mut record, &mut r.monitor)?;
        if !self.model.is_finite() {
            return Err(Error::NonFinite(format!("parameters after epoch {epoch}")));
        }
        observer.on_epoch(&record, &self.model);
        self.history.records.push(record.clone());
        Ok(record)
    }

    fn monitor(&self, record: &mut EpochRecord, rng: &mut SrwganRng) -> Result<()> {
        let ds = self.ds;
        if let Some(real) = &self.real_seen_protos {
            let (fake, labels) = evaluation::synthesize(&self.model, ds, &ds.seen_classes, self.cfg.fn_samples, rng)?;
            let fake_p = class_prototypes(&fake, &labels, &ds.seen_classes)?;
            record.fn_seen = evaluation::feature_compactness(real, &fake_p.rows).ok();
        }
        if self.cfg.track_unseen_compactness {
            let n = self.cfg.fn_samples.max(1);
            record.fn_unseen = evaluation::compactness_against(
                &self.model,
                ds,
                self.source,
                &ds.splits.test_unseen,
                &ds.unseen_classes,
                n,
                rng,
            )
            .ok();
        }
        if self.cfg.eval_every > 0 && record.epoch % self.cfg.eval_every == 0 {
            let settings = self.cfg.eval.expect("validated");
            let rep = evaluation::evaluate(&self.model, ds, self.cfg.mode, self.sampler.shots(), &settings)?;
            record.unseen = Some(rep.unseen);
            record.seen = rep.seen;
            record.harmonic = rep.harmonic;
        }
        Ok(())
    }

    /// Joint update of critic and mapping. Returns
    /// `[critic loss, wasserstein, gp, gp autodiff, L_m, hinge, kl, total]`.
    fn critic_step(&mut self, batch: &Batch, r: &mut EpochRngs, epoch: usize, round: usize) -> Result<[f64; 8]> {
        let h = self.cfg.hyper;
        let m = &self.model;
        let x_real = &batch.labeled_x;
        let x_fake = evaluation::generate(m, &self.labeled_attrs(batch), &mut r.heads)?;
        let rows = x_real.rows();
        let zd = m.arch.map_dim;

        let mut tape = Tape::new();
        let b = Bound::new(&mut tape, m, &[Group::Critic, Group::Mapping]);
        let xr = tape.constant(x_real.clone());
        let xf = tape.constant(x_fake.clone());
        let eps_r = rng::gaussian(rows, zd, 1.0, &mut r.mapping);
        let eps_f = rng::gaussian(rows, zd, 1.0, &mut r.mapping);
        let or = map_tape(&mut tape, &b.mapping, xr, &eps_r);
        let of = map_tape(&mut tape, &b.mapping, xf, &eps_f);
        let w = wgan_tape(&mut tape, &b.critic, or.z, of.z, h.gp_weight);

        let local = self.labeled_local(batch);
        let kl_r = kl_tape(&mut tape, or.mean, or.log_var);
        let kl_f = kl_tape(&mut tape, of.mean, of.log_var);
        let kl = tape.add(kl_r, kl_f);
        let kl = tape.scale(kl, 0.5);
        let mv = margin_tape(&mut tape, or.z, b.mapping.centers, &local, kl, &h.margin);
        let lm = tape.scale(mv.total, h.reg.lambda_m);
        let total = tape.add(w.critic_loss, lm);
        let tv = tape.value(total).item();
        check_finite(tv, "critic objective", epoch, round)?;
        let grads = tape.backward(total)?;

        let x_hat = interpolate(x_real, &x_fake, &mut r.interpolation)?;
        let z_hat = map_forward(&m.mapping, &x_hat, &mut r.mapping)?;
        let gp_auto = gradient_penalty_autodiff(&m.critic, &z_hat.z)?;

        let critic_vars = b.vars(Group::Critic);
        let map_vars = b.vars(Group::Mapping);
        apply(&mut self.opts.critic, &mut self.model, Group::Critic, &critic_vars, &grads)?;
        apply(&mut self.opts.mapping, &mut self.model, Group::Mapping, &map_vars, &grads)?;

        let v = |x: Var| tape.value(x).item();
        Ok([
            v(w.critic_loss),
            v(w.real_score) - v(w.fake_score),
            v(w.gp),
            gp_auto,
            v(mv.total),
            v(mv.hinge),
            v(mv.kl),
            tv,
        ])
    }

    /// Records the semantic alignment loss for `batch` on `tape`.
    #[allow(clippy::too_many_arguments)]
    fn sr_on_tape<'b>(
        &self,
        tape: &mut Tape,
        b: &Bound,
        batch: &'b Batch,
        labeled_heads: &[HeadOutput],
        unseen_input: Var,
        unseen_heads: &[HeadOutput],
        seen_labels: &'b [usize],
    ) -> Result<SrVars> {
        let ds = self.ds;
        let (p, q) = (ds.seen_classes.len(), ds.unseen_classes.len());
        let labeled_rows = batch.labeled_x.rows();
        // Averaging over the seen rows only; shot rows get zero weight.
        let mut a_seen = averaging_matrix(&batch.seen_local, p)?;
        if labeled_rows > batch.seen_rows {
            let pad = Tensor::zeros(p, labeled_rows - batch.seen_rows);
            a_seen = Tensor::concat_cols(&[&a_seen, &pad]);
        }
        let a_unseen = averaging_matrix(&batch.unseen_local, q)?;
        let a_seen = tape.constant(a_seen);
        let a_unseen = tape.constant(a_unseen);
        let mut heads = Vec::with_capacity(labeled_heads.len());
        for (i, (l, u)) in labeled_heads.iter().zip(unseen_heads).enumerate() {
            let proto_seen = tape.matmul(a_seen, l.sample);
            let proto_unseen = tape.matmul(a_unseen, u.sample);
            heads.push(HeadTerms { w: b.matching.get(i).copied(), proto_seen, proto_unseen });
        }
        let fake_unseen = generator_tape(tape, &b.generator, unseen_input);
        let real_seen = tape.constant(batch.seen_x());
        let unlabeled = batch.unlabeled_x.as_ref().map(|u| tape.constant(u.clone()));
        let ctx = AlignmentVars {
            real_seen,
            seen_labels,
            fake_unseen: Some(fake_unseen),
            unlabeled,
            sharp: heads.first().copied(),
            dagger: heads.get(1).copied(),
            prime: heads.get(2).copied(),
        };
        loss_sr_tape(tape, &ctx, &self.cfg.hyper.alignment, &self.cfg.variant.plan(), self.cfg.mode.is_transductive())
    }

    /// Generator-step objective `−E[D(M(x̃))] + λ_c·L_cls (+ λ_a·L_sr)` on
    /// `tape`. Returns `(total, wgan, cls, sr)`.
    fn generator_objective(
        &self,
        tape: &mut Tape,
        b: &Bound,
        batch: &Batch,
        r: &mut EpochRngs,
        sr_active: bool,
    ) -> Result<(Var, Var, Var, Option<SrVars>)> {
        let h = self.cfg.hyper;
        let m = &self.model;
        let (input, heads_l) = describe(tape, b, m, &self.labeled_attrs(batch), &mut r.heads);
        let x_fake = generator_tape(tape, &b.generator, input);
        let eps = rng::gaussian(batch.labeled_x.rows(), m.arch.map_dim, 1.0, &mut r.mapping);
        let zf = map_tape(tape, &b.mapping, x_fake, &eps);
        let score = critic_tape(tape, &b.critic, zf.z);
        let mean_score = tape.mean(score);
        let gen_loss = tape.scale(mean_score, -1.0);

        let local = self.labeled_local(batch);
        let cls = match &m.pretrained {
            Some(pc) if m.arch.variant.uses_pretrained_classifier() => {
                let w = tape.constant(pc.weights.clone());
                let bias = tape.constant(pc.bias.clone());
                let logits = tape.matmul(x_fake, w);
                let logits = tape.add_row(logits, bias);
                tape.cross_entropy(logits, &local)
            }
            _ => {
                let protos = averaging_matrix(&local, self.labeled_classes.len())?.matmul(&batch.labeled_x);
                cls_tape(tape, x_fake, &protos, &local)
            }
        };
        let lc = tape.scale(cls, h.reg.lambda_c);
        let mut total = tape.add(gen_loss, lc);

        let mut sr_out = None;
        if sr_active {
            let (input_u, heads_u) = describe(tape, b, m, &self.unseen_attrs(batch), &mut r.heads);
            let sr = self.sr_on_tape(tape, b, batch, &heads_l, input_u, &heads_u, &batch.seen_local)?;
            let la = tape.scale(sr.total, h.reg.lambda_a);
            total = tape.add(total, la);
            sr_out = Some(sr);
        }
        Ok((total, gen_loss, cls, sr_out))
    }

    /// Update of generator and heads. Returns `([wgan, cls], sr)`.
    fn generator_step(
        &mut self,
        batch: &Batch,
        r: &mut EpochRngs,
        sr_active: bool,
        epoch: usize,
        round: usize,
    ) -> Result<([f64; 2], Option<SrBreakdown>)> {
        let mut tape = Tape::new();
        let b = Bound::new(&mut tape, &self.model, &[Group::Generator]);
        let (total, gen_loss, cls, sr) = self.generator_objective(&mut tape, &b, batch, r, sr_active)?;
        check_finite(tape.value(total).item(), "generator objective", epoch, round)?;
        let grads = tape.backward(total)?;
        let vars = b.vars(Group::Generator);
        let out = [tape.value(gen_loss).item(), tape.value(cls).item()];
        let sr_out = sr.map(|s| SrBreakdown::from_tape(&tape, &s));
        apply(&mut self.opts.generator, &mut self.model, Group::Generator, &vars, &grads)?;
        Ok((out, sr_out))
    }

    /// Update of the matching matrices with `λ_a · L_sr`.
    fn matching_step(&mut self, batch: &Batch, r: &mut EpochRngs, epoch: usize, round: usize) -> Result<SrBreakdown> {
        let h = self.cfg.hyper;
        let m = &self.model;
        let mut tape = Tape::new();
        let b = Bound::new(&mut tape, m, &[Group::Matching]);
        let (_, heads_l) = describe(&mut tape, &b, m, &self.labeled_attrs(batch), &mut r.heads);
        let (input_u, heads_u) = describe(&mut tape, &b, m, &self.unseen_attrs(batch), &mut r.heads);
        let sr = self.sr_on_tape(&mut tape, &b, batch, &heads_l, input_u, &heads_u, &batch.seen_local)?;
        let total = tape.scale(sr.total, h.reg.lambda_a);
        check_finite(tape.value(total).item(), "alignment objective", epoch, round)?;
        let out = SrBreakdown::from_tape(&tape, &sr);
        if m.matching.is_empty() {
            return Ok(out);
        }
        let grads = tape.backward(total)?;
        let vars = b.vars(Group::Matching);
        apply(&mut self.opts.matching, &mut self.model, Group::Matching, &vars, &grads)?;
        Ok(out)
    }
}

/// Trains from scratch on `ds` and returns the final model and history.
pub fn train(cfg: &TrainConfig, ds: &FeatureDataset) -> Result<(ModelState, RunHistory)> {
    train_with(cfg, ds, ds, &mut ())
}

pub fn train_with<S: RowSource + ?Sized>(
    cfg: &TrainConfig,
    ds: &FeatureDataset,
    source: &S,
    observer: &mut dyn TrainObserver,
) -> Result<(ModelState, RunHistory)> {
    let mut t = Trainer::new(cfg.clone(), ds, source)?;
    t.run(observer)?;
    let (m, _, h) = t.into_parts();
    Ok((m, h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, SyntheticSpec};

    fn world(seed: u64) -> FeatureDataset {
        make_synthetic(&SyntheticSpec::new(4, 3, 6, 4, 12, 0.05, seed)).unwrap().dataset
    }

    fn cfg(mode: TaskMode, epochs: usize, warmup: usize) -> TrainConfig {
        let hyper = HyperParams { head_dim: 3, generator_hidden: 8, map_dim: 4, ..HyperParams::default() };
        let mut c = TrainConfig::new(hyper, mode, epochs, warmup, 8, 11);
        c.rounds_per_epoch = Some(2);
        c.fn_samples = 4;
        if mode.uses_shots() {
            c.shots = 2;
        }
        c
    }

    #[derive(Default)]
    struct Log {
        steps: Vec<StepEvent>,
        before: Option<[u64; 4]>,
        changed: Vec<(StepKind, [bool; 4])>,
    }

    fn prints(m: &ModelState) -> [u64; 4] {
        [Group::Generator, Group::Critic, Group::Mapping, Group::Matching].map(|g| m.group_fingerprint(g))
    }

    impl TrainObserver for Log {
        fn on_step(&mut self, e: &StepEvent, m: &ModelState) {
            let now = prints(m);
            if let Some(b) = self.before {
                let mut c = [false; 4];
                for i in 0..4 {
                    c[i] = b[i] != now[i];
                }
                self.changed.push((e.kind, c));
            }
            self.before = Some(now);
            self.steps.push(*e);
        }
    }

    #[test]
    fn config_validation() {
        assert!(cfg(TaskMode::Gzsl, 3, 3).validate().is_err());
        assert!(cfg(TaskMode::Gzsl, 3, 1).validate().is_ok());
        let mut c = cfg(TaskMode::Gzsl, 3, 1);
        c.track_unseen_compactness = true;
        assert!(c.validate().is_err());
        c.mode = TaskMode::Tgzsl;
        assert!(c.validate().is_ok());
        let mut c = cfg(TaskMode::Fsl, 3, 1);
        c.shots = 0;
        assert!(c.validate().is_err());
        let mut c = cfg(TaskMode::Zsl, 3, 1);
        c.shots = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn step_schedule_and_group_isolation() {
        let ds = world(1);
        let c = cfg(TaskMode::Gzsl, 3, 1);
        let mut t = Trainer::new(c, &ds, &ds).unwrap();
        let mut log = Log::default();
        t.run(&mut log).unwrap();
        // epoch 1: 2 rounds of (5 critic + 1 generator); epochs 2, 3 add a matching step
        assert_eq!(log.steps.len(), 2 * 6 + 2 * 2 * 7);
        assert!(log.steps.iter().filter(|s| s.kind == StepKind::Matching).all(|s| s.epoch > 1));
        assert!(log.steps.iter().filter(|s| s.kind == StepKind::Generator).all(|s| s.sr_active == (s.epoch > 1)));
        for (kind, c) in &log.changed {
            match kind {
                StepKind::Critic => assert!(!c[0] && c[1] && c[2] && !c[3]),
                StepKind::Generator => assert!(c[0] && !c[1] && !c[2] && !c[3]),
                StepKind::Matching => assert!(!c[0] && !c[1] && !c[2] && c[3]),
            }
        }
        let h = t.history();
        assert_eq!(h.records.len(), 3);
        assert!(h.records[0].sr.is_none() && !h.records[0].sr_active);
        assert!(h.records[1].sr.is_some() && h.records[2].sr_active);
        for r in &h.records {
            assert!(r.critic_loss.is_finite() && r.gp >= 0.0 && r.kl >= 0.0 && r.hinge >= 0.0);
            assert!((r.gp - r.gp_autodiff).abs() < 1e-9);
            assert!(r.fn_seen.is_some());
        }
    }

    #[test]
    fn matching_frozen_during_warmup() {
        let ds = world(2);
        let mut t = Trainer::new(cfg(TaskMode::Gzsl, 3, 2), &ds, &ds).unwrap();
        let w0 = t.model().group_fingerprint(Group::Matching);
        t.run_epoch(&mut ()).unwrap();
        t.run_epoch(&mut ()).unwrap();
        assert_eq!(t.model().group_fingerprint(Group::Matching), w0);
        t.run_epoch(&mut ()).unwrap();
        assert_ne!(t.model().group_fingerprint(Group::Matching), w0);
    }

    #[test]
    fn deterministic_and_resume_exact() {
        let ds = world(3);
        let c = cfg(TaskMode::Gzsl, 3, 1);
        let (a, ha) = train(&c, &ds).unwrap();
        let (b, hb) = train(&c, &ds).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha, hb);

        let mut t = Trainer::new(c.clone(), &ds, &ds).unwrap();
        t.run_epoch(&mut ()).unwrap();
        t.run_epoch(&mut ()).unwrap();
        let (m, o, h) = t.into_parts();
        let mut r = Trainer::resume(c.clone(), &ds, &ds, m, o, h).unwrap();
        r.run(&mut ()).unwrap();
        let (m, _, h) = r.into_parts();
        assert_eq!(m, a);
        assert_eq!(h, ha);

        let mut other = c;
        other.seed = 12;
        assert_ne!(train(&other, &ds).unwrap().0, a);
    }

    #[test]
    fn resume_rejects_mismatched_state() {
        let ds = world(4);
        let c = cfg(TaskMode::Gzsl, 2, 1);
        let t = Trainer::new(c.clone(), &ds, &ds).unwrap();
        let (m, o, h) = t.into_parts();
        let mut c2 = c.clone();
        c2.hyper.map_dim = 5;
        assert!(Trainer::resume(c2, &ds, &ds, m.clone(), o.clone(), h.clone()).is_err());
        let mut o2 = o;
        core::mem::swap(&mut o2.critic, &mut o2.mapping);
        assert!(Trainer::resume(c, &ds, &ds, m, o2, h).is_err());
    }

    #[test]
    fn every_mode_and_variant_runs() {
        let ds = world(5);
        for mode in [TaskMode::Zsl, TaskMode::Gzsl, TaskMode::Tzsl, TaskMode::Tgzsl, TaskMode::Fsl] {
            let (m, h) = train(&cfg(mode, 2, 1), &ds).unwrap();
            assert!(m.is_finite(), "{mode:?}");
            assert!(h.records[1].sr.is_some());
            if mode == TaskMode::Fsl {
                assert_eq!(m.mapping.centers.rows(), 7);
            }
        }
        for v in Variant::ALL {
            let mut c = cfg(TaskMode::Gzsl, 2, 1);
            c.variant = v;
            let (m, h) = train(&c, &ds).unwrap();
            assert!(m.is_finite(), "{v:?}");
            assert_eq!(h.records[1].sr.is_some(), !v.plan().is_empty());
            assert_eq!(m.pretrained.is_some(), v.uses_pretrained_classifier());
        }
    }

    #[test]
    fn nan_aborts_with_diagnostic() {
        let ds = world(6);
        let mut t = Trainer::new(cfg(TaskMode::Gzsl, 2, 1), &ds, &ds).unwrap();
        t.model.critic.w.data_mut()[0] = f64::NAN;
        match t.run_epoch(&mut ()) {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("epoch 1"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn csv_row_matches_header() {
        let r = EpochRecord { epoch: 2, sr: Some(SrBreakdown::default()), ..EpochRecord::default() };
        let cols = EpochRecord::CSV_HEADER.split(',').count();
        assert_eq!(r.csv_row().split(',').count(), cols);
        assert_eq!(EpochRecord::default().csv_row().split(',').count(), cols);
    }

    #[test]
    fn generator_objective_gradients_match_differences() {
        let ds = world(7);
        for (variant, mode) in [(Variant::A, TaskMode::Tgzsl), (Variant::B, TaskMode::Fsl), (Variant::G, TaskMode::Gzsl)] {
            let mut c = cfg(mode, 3, 1);
            c.variant = variant;
            c.hyper.margin.margin = 1.0;
            let mut t = Trainer::new(c, &ds, &ds).unwrap();
            t.run_epoch(&mut ()).unwrap();
            let r0 = EpochRngs::new(5, 0, 2);
            let batch = t.sampler.sample(&mut r0.batches.clone());
            let value = |t: &Trainer<'_, FeatureDataset>| {
                let mut tape = Tape::new();
                let b = Bound::new(&mut tape, &t.model, &[]);
                let out = t.generator_objective(&mut tape, &b, &batch, &mut r0.clone(), true).unwrap().0;
                tape.value(out).item()
            };
            let mut tape = Tape::new();
            let b = Bound::new(&mut tape, &t.model, &[Group::Generator]);
            let out = t.generator_objective(&mut tape, &b, &batch, &mut r0.clone(), true).unwrap().0;
            let grads = tape.backward(out).unwrap();
            let vars = b.vars(Group::Generator);
            let shapes = t.model.group_shapes(Group::Generator);
            let h = 1e-5;
            for (i, (&v, s)) in vars.iter().zip(shapes).enumerate() {
                let analytic = grads.get_or_zeros(v, s);
                let mut numeric = Tensor::zeros(s[0], s[1]);
                for j in 0..analytic.len() {
                    let x = t.model.group(Group::Generator)[i].data()[j];
                    t.model.group_mut(Group::Generator)[i].data_mut()[j] = x + h;
                    let up = value(&t);
                    t.model.group_mut(Group::Generator)[i].data_mut()[j] = x - h;
                    let down = value(&t);
                    t.model.group_mut(Group::Generator)[i].data_mut()[j] = x;
                    numeric.data_mut()[j] = (up - down) / (2.0 * h);
                }
                let diff = analytic.zip_map(&numeric, |a, b| a - b).frobenius();
                let scale = analytic.frobenius() + numeric.frobenius();
                assert!(scale < 1e-10 || diff / scale < 1e-4, "{variant:?} param {i}: {}", diff / scale);
            }
        }
    }
}
