//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if a gating criterion fails.
//!
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test -p srwgan --test acceptance -- 1 4`.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::Instant;

use nalgebra::DMatrix;
use srwgan::core::alignment::{loss_bl, loss_al, loss_cbc, loss_entropy, loss_rl, loss_sr, match_scores};
use srwgan::core::alignment::{AlignmentBatch, AlignmentWeights, HeadBatch, MatchingHead};
use srwgan::core::data::{make_synthetic, AccessLog, FeatureDataset, SyntheticSpec, SyntheticWorld, TaskMode};
use srwgan::core::evaluation::{evaluate, harmonic, relative_improvement, EvalSettings};
use srwgan::core::generation::{gradient_penalty_analytic, gradient_penalty_autodiff, Critic};
use srwgan::core::gradcheck::{loss_suite, TOLERANCE};
use srwgan::core::lemma::lemma_sweep;
use srwgan::core::linalg::random_orthogonal;
use srwgan::core::model::{BenchmarkPreset, Group, ModelState, Variant};
use srwgan::core::rng::{gaussian, stream_rng, Stream};
use srwgan::core::tensor::Tensor;
use srwgan::core::training::{StepEvent, StepKind, TrainConfig, TrainObserver, Trainer};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---------------------------------------------------------------------------
// 1. linear worlds

fn lemma() -> Outcome {
    let t0 = Instant::now();
    let sweep = lemma_sweep(2024, 100, &[3, 4, 5, 6, 7, 8]).expect("lemma sweep");
    let secs = t0.elapsed().as_secs_f64();
    let pass = sweep.max_gap < 1e-8 && sweep.violated_detected >= 95 && secs < 10.0;
    outcome(
        pass,
        format!(
            "max gap {:.2e} (< 1e-8), violated worlds detected {}/100 (>= 95), {secs:.2}s (< 10s)",
            sweep.max_gap, sweep.violated_detected
        ),
    )
}

// ---------------------------------------------------------------------------
// 2. gradients

fn gradients() -> Outcome {
    let t0 = Instant::now();
    let mut worst = (0.0f64, "");
    for seed in 0..20 {
        for c in loss_suite(seed).expect("gradient suite") {
            if c.max_rel_error > worst.0 || !c.max_rel_error.is_finite() {
                worst = (c.max_rel_error, c.name);
            }
        }
    }
    let mut gp_gap = 0.0f64;
    for seed in 0..20 {
        let mut r = stream_rng(seed, 0, Stream::Init);
        let critic = Critic::init(6, 1.0, &mut r);
        let z_hat = gaussian(16, 6, 2.0, &mut r);
        let a = gradient_penalty_analytic(&critic);
        let b = gradient_penalty_autodiff(&critic, &z_hat).expect("gp");
        gp_gap = gp_gap.max((a - b).abs());
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = worst.0 < TOLERANCE && gp_gap < 1e-10 && secs < 60.0;
    outcome(
        pass,
        format!(
            "worst rel error {:.2e} ({}) (< 1e-4), gp analytic vs autodiff {gp_gap:.2e} (< 1e-10), {secs:.2}s (< 60s)",
            worst.0, worst.1
        ),
    )
}

// ---------------------------------------------------------------------------
// 3. loss identities

struct Fixture {
    real: Tensor,
    labels: Vec<usize>,
    fake: Tensor,
    unl: Tensor,
    w_sharp: MatchingHead,
    w_dagger: MatchingHead,
    protos: Vec<Tensor>,
}

fn fixture(seed: u64) -> Fixture {
    let mut r = stream_rng(seed, 1, Stream::Noise);
    let (n, k, p, q) = (7, 4, 5, 3);
    Fixture {
        real: gaussian(10, n, 1.0, &mut r),
        labels: (0..10).map(|i| i % p).collect(),
        fake: gaussian(6, n, 1.0, &mut r),
        unl: gaussian(8, n, 1.0, &mut r),
        w_sharp: MatchingHead { w: gaussian(n, k, 0.5, &mut r) },
        w_dagger: MatchingHead { w: gaussian(n, k, 0.5, &mut r) },
        protos: (0..6).map(|i| gaussian(if i % 2 == 0 { p } else { q }, k, 1.0, &mut r)).collect(),
    }
}

fn alignment_batch(f: &Fixture, unlabeled: bool) -> AlignmentBatch<'_> {
    AlignmentBatch {
        real_seen: Some(&f.real),
        seen_labels: &f.labels,
        fake_unseen: Some(&f.fake),
        unlabeled: unlabeled.then_some(&f.unl),
        sharp: Some(HeadBatch { w: Some(&f.w_sharp), proto_seen: &f.protos[0], proto_unseen: &f.protos[1] }),
        dagger: Some(HeadBatch { w: Some(&f.w_dagger), proto_seen: &f.protos[2], proto_unseen: &f.protos[3] }),
        prime: Some(HeadBatch { w: None, proto_seen: &f.protos[4], proto_unseen: &f.protos[5] }),
    }
}

fn identities() -> Outcome {
    let (mut decomposition, mut transduction, mut invariance) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..20 {
        let f = fixture(seed);
        let w = AlignmentWeights::new(0.1 + 0.05 * seed as f64, 0.3 + 0.1 * seed as f64, 0.7);
        let ind = alignment_batch(&f, false);
        let sr = loss_sr(&ind, &w, false).expect("sr");
        let parts = loss_bl(&ind, &w).unwrap() + loss_al(&ind, &w, false).unwrap() + loss_rl(&f.protos[4], &f.protos[5], &w).unwrap();
        decomposition = decomposition.max((sr.total - parts).abs());

        let tr = loss_sr(&alignment_batch(&f, true), &w, true).expect("sr");
        let unl = loss_entropy(&match_scores(&f.w_dagger, &f.unl, &f.protos[3]).unwrap());
        transduction = transduction.max(((tr.total - sr.total) - w.beta * unl).abs());

        let mut r = stream_rng(seed, 2, Stream::Noise);
        let rot = random_orthogonal(4, &mut r);
        let (us, uu) = (&f.protos[0], &f.protos[1]);
        let base = loss_cbc(us, uu).unwrap();
        let turned = loss_cbc(&us.matmul(&rot), &uu.matmul(&rot)).unwrap();
        invariance = invariance.max((base - turned).abs());
    }
    let pass = decomposition < 1e-12 && transduction < 1e-12 && invariance < 1e-10;
    outcome(
        pass,
        format!(
            "sr - (bl + al + rl) {decomposition:.1e} (< 1e-12), transductive - inductive - beta*entropy {transduction:.1e} (< 1e-12), cbc under rotation {invariance:.1e} (< 1e-10)"
        ),
    )
}

// ---------------------------------------------------------------------------
// 4. metrics

fn metrics() -> Outcome {
    let h1 = harmonic(71.7, 96.3);
    let h2 = harmonic(75.0, 91.9);
    let ri = relative_improvement(82.2, 81.4);
    let round1 = |x: f64| (x * 10.0).round() / 10.0;
    let pass = (round1(h1) - 82.2).abs() <= 0.05 && (round1(h2) - 82.6).abs() <= 0.05 && (ri - -0.97).abs() <= 0.01;
    outcome(pass, format!("H(71.7, 96.3) = {h1:.3}, H(75.0, 91.9) = {h2:.3}, RI(82.2 -> 81.4) = {ri:.3}%"))
}

// ---------------------------------------------------------------------------
// 5 and 6. synthetic world

const TOY_SEEDS: u64 = 10;

fn toy_world(seed: u64) -> SyntheticWorld {
    make_synthetic(&SyntheticSpec::new(7, 3, 32, 8, 100, 0.05, seed)).expect("synthetic world")
}

fn toy_config(variant: Variant, seed: u64) -> (TrainConfig, EvalSettings) {
    let preset = BenchmarkPreset::synthetic();
    let mut cfg = TrainConfig::new(preset.hyper, TaskMode::Gzsl, 200, preset.warmup, preset.batch_size, seed);
    cfg.variant = variant;
    cfg.fn_samples = 0;
    let mut eval = EvalSettings::new(preset.n_synth, seed);
    eval.classifier.epochs = 500;
    (cfg, eval)
}

struct ToyRun {
    unseen: f64,
    harmonic: f64,
}

fn toy_run(ds: &FeatureDataset, variant: Variant, seed: u64) -> ToyRun {
    let (cfg, eval) = toy_config(variant, seed);
    let mut t = Trainer::new(cfg, ds, ds).expect("trainer");
    t.run(&mut ()).expect("training");
    let (model, _, _) = t.into_parts();
    let rep = evaluate(&model, ds, TaskMode::Gzsl, &[], &eval).expect("evaluation");
    ToyRun { unseen: rep.unseen, harmonic: rep.harmonic.expect("generalized mode") }
}

fn to_na(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

const RCOND: f64 = 1e-2;

/// Least-squares generator from seen training data, then nearest unseen
/// prototype `U_au Z` for each unseen test sample. Mean per-class top-1.
/// Singular values below `RCOND` times the largest are dropped.
fn least_squares_oracle(ds: &FeatureDataset) -> f64 {
    let idx = &ds.splits.train_seen;
    let a = to_na(&ds.attribute_matrix(&ds.labels_of(idx)));
    let x = to_na(&ds.gather(idx));
    // Directions the seen attributes barely span carry mostly noise.
    let svd = a.svd(true, true);
    let cutoff = RCOND * svd.singular_values.max();
    let z = svd.solve(&x, cutoff).expect("svd solve");
    let protos = to_na(&ds.attribute_matrix(&ds.unseen_classes)) * z;

    let test = &ds.splits.test_unseen;
    let xt = to_na(&ds.gather(test));
    let truth = ds.labels_of(test);
    let mut hits = vec![(0usize, 0usize); ds.unseen_classes.len()];
    for (i, &y) in truth.iter().enumerate() {
        let dist = |c: usize| (xt.row(i) - protos.row(c)).norm_squared();
        let best = (0..protos.nrows()).min_by(|&a, &b| dist(a).total_cmp(&dist(b))).unwrap();
        let slot = ds.unseen_classes.iter().position(|&c| c == y).unwrap();
        hits[slot].1 += 1;
        hits[slot].0 += (ds.unseen_classes[best] == y) as usize;
    }
    100.0 * hits.iter().map(|&(h, n)| h as f64 / n as f64).sum::<f64>() / hits.len() as f64
}

fn end_to_end(full: &mut Vec<ToyRun>) -> Outcome {
    let t0 = Instant::now();
    let mut good = 0;
    let mut oracle_min = f64::INFINITY;
    let mut per_seed = Vec::new();
    for seed in 0..TOY_SEEDS {
        let ds = toy_world(seed).dataset;
        oracle_min = oracle_min.min(least_squares_oracle(&ds));
        let run = toy_run(&ds, Variant::A, seed);
        good += (run.unseen >= 80.0 && run.harmonic >= 75.0) as usize;
        per_seed.push(format!("{:.0}/{:.0}", run.unseen, run.harmonic));
        full.push(run);
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = good >= 8 && oracle_min >= 95.0 && secs < 300.0;
    outcome(
        pass,
        format!(
            "{good}/{TOY_SEEDS} seeds with U >= 80 and H >= 75 (need 8) [U/H {}], least-squares oracle min {oracle_min:.1}% (>= 95), {secs:.0}s (< 300s)",
            per_seed.join(" ")
        ),
    )
}

fn ablation(full: &[ToyRun]) -> Outcome {
    let mean_h = |runs: &[ToyRun]| runs.iter().map(|r| r.harmonic).sum::<f64>() / runs.len() as f64;
    let runs = |v: Variant| (0..TOY_SEEDS).map(|s| toy_run(&toy_world(s).dataset, v, s)).collect::<Vec<_>>();
    let a = if full.len() == TOY_SEEDS as usize { mean_h(full) } else { mean_h(&runs(Variant::A)) };
    let d = mean_h(&runs(Variant::D));
    let g = mean_h(&runs(Variant::G));
    let pass = a + 1.0 >= d && d + 1.0 >= g;
    outcome(pass, format!("mean H: A {a:.2}, D {d:.2}, G {g:.2} (A >= D >= G, 1-point slack)"))
}

// ---------------------------------------------------------------------------
// 7. warm-up and schedule

#[derive(Default)]
struct Steps {
    events: Vec<StepEvent>,
    matching_moved_early: bool,
    last_matching: Option<u64>,
}

impl TrainObserver for Steps {
    fn on_step(&mut self, e: &StepEvent, m: &ModelState) {
        let fp = m.group_fingerprint(Group::Matching);
        if let Some(prev) = self.last_matching {
            if prev != fp && e.epoch <= WARMUP {
                self.matching_moved_early = true;
            }
        }
        self.last_matching = Some(fp);
        self.events.push(*e);
    }
}

const WARMUP: usize = 2;

fn compliance() -> Outcome {
    let world = make_synthetic(&SyntheticSpec::new(7, 3, 32, 8, 20, 0.05, 5)).expect("world");
    let ds = world.dataset;
    let preset = BenchmarkPreset::synthetic();
    let s = &ds.splits;
    let mut leaks = Vec::new();
    for mode in [TaskMode::Zsl, TaskMode::Gzsl, TaskMode::Fsl] {
        let log = AccessLog::new(&ds);
        let mut cfg = TrainConfig::new(preset.hyper, mode, 3, 1, preset.batch_size, 9);
        if mode.uses_shots() {
            cfg.shots = 2;
        }
        let mut t = Trainer::new(cfg, &ds, &log).expect("trainer");
        t.run(&mut ()).expect("training");
        let shots: BTreeSet<u32> = t.shots().iter().copied().collect();
        let unlabeled: Vec<u32> = s.train_unseen.iter().copied().filter(|i| !shots.contains(i)).collect();
        let test_reads = log.reads_of(&s.test_seen) + log.reads_of(&s.test_unseen) + log.reads_of(&unlabeled);
        if test_reads > 0 || log.total_reads() == 0 {
            leaks.push(format!("{}: {test_reads}", mode.as_str()));
        }
    }

    let mut cfg = TrainConfig::new(preset.hyper, TaskMode::Gzsl, WARMUP + 2, WARMUP, preset.batch_size, 3);
    cfg.rounds_per_epoch = Some(3);
    let mut t = Trainer::new(cfg, &ds, &ds).expect("trainer");
    let mut steps = Steps::default();
    t.run(&mut steps).expect("training");

    let early_sr = steps.events.iter().filter(|e| e.epoch <= WARMUP && (e.sr_active || e.kind == StepKind::Matching)).count();
    let late_off = steps.events.iter().filter(|e| e.epoch > WARMUP && e.kind == StepKind::Generator && !e.sr_active).count();
    let mut bad_rounds = 0;
    let mut rounds = 0;
    for epoch in 1..=WARMUP + 2 {
        for round in 0..3 {
            let of = |k| steps.events.iter().filter(|e| e.epoch == epoch && e.round == round && e.kind == k).count();
            rounds += 1;
            bad_rounds += (of(StepKind::Critic) != 5 || of(StepKind::Generator) != 1) as usize;
        }
    }
    let pass = leaks.is_empty() && early_sr == 0 && late_off == 0 && !steps.matching_moved_early && bad_rounds == 0;
    outcome(
        pass,
        format!(
            "test-split reads in inductive modes: {}; alignment steps before epoch {}: {early_sr}, matching moved early: {}; rounds without exactly 5 critic + 1 generator steps: {bad_rounds}/{rounds}",
            if leaks.is_empty() { "none".to_string() } else { leaks.join(", ") },
            WARMUP + 1,
            steps.matching_moved_early
        ),
    )
}

fn main() -> ExitCode {
    let wanted: BTreeSet<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |n: u32| wanted.is_empty() || wanted.contains(&n);
    let mut failed = 0;
    let mut report = |n: u32, name: &str, o: Outcome| {
        println!("{} {n} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += (!o.pass) as usize;
    };

    if run(1) {
        report(1, "lemma certificate", lemma());
    }
    if run(2) {
        report(2, "gradient suite", gradients());
    }
    if run(3) {
        report(3, "loss identities", identities());
    }
    if run(4) {
        report(4, "metric reproduction", metrics());
    }
    let mut full = Vec::new();
    if run(5) {
        report(5, "synthetic end-to-end", end_to_end(&mut full));
    }
    if run(6) {
        report(6, "ablation ordering", ablation(&full));
    }
    if run(7) {
        report(7, "warm-up and schedule compliance", compliance());
    }
    if run(8) {
        println!("SKIP 8 benchmark-scale results: non-gating, needs converted benchmark feature files");
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
