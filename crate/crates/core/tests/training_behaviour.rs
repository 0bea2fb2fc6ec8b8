use srwgan_core::data::{class_prototypes, make_synthetic, FeatureDataset, SyntheticSpec, TaskMode};
use srwgan_core::evaluation::{feature_compactness, synthesize};
use srwgan_core::model::{BenchmarkPreset, Group, ModelState};
use srwgan_core::rng::{stream_rng, Stream};
use srwgan_core::semantic::{head_forward, refine, SemanticHead};
use srwgan_core::generation::loss_cls;
use srwgan_core::tensor::Tensor;
use srwgan_core::training::{StepEvent, StepKind, TrainConfig, TrainObserver, Trainer};

fn toy(p: usize, q: usize, seed: u64) -> FeatureDataset {
    make_synthetic(&SyntheticSpec::new(p, q, 32, 8, 100, 0.05, seed)).unwrap().dataset
}

fn toy_config(mode: TaskMode, epochs: usize, seed: u64) -> TrainConfig {
    let preset = BenchmarkPreset::synthetic();
    let mut c = TrainConfig::new(preset.hyper, mode, epochs, preset.warmup, preset.batch_size, seed);
    c.fn_samples = 0;
    c
}

#[test]
fn head_sample_mean_converges_to_mu() {
    let mut r = stream_rng(1, 0, Stream::Init);
    let head = SemanticHead::init(5, 4, 0.5, &mut r);
    let a = [0.3, -0.2, 0.9, 0.1, 0.4];
    let n = 100_000;
    let mut sum = [0.0; 4];
    let mut first = None;
    for _ in 0..n {
        let s = head_forward(&head, &a, &mut r).unwrap();
        for (acc, v) in sum.iter_mut().zip(s.sample.data()) {
            *acc += v;
        }
        first.get_or_insert(s);
    }
    let s = first.unwrap();
    for j in 0..4 {
        let mu = s.mean.data()[j];
        let sigma = (s.log_var.data()[j] / 2.0).exp();
        let band = 3.0 * sigma / (n as f64).sqrt();
        assert!((sum[j] / n as f64 - mu).abs() < band, "coordinate {j}");
    }
}

#[test]
fn refined_description_layout_is_stable() {
    // Heads with the smallest variance the clamp allows and distinct
    // constant means make every block of the concatenation recognizable.
    let heads: Vec<SemanticHead> = (0..3)
        .map(|i| {
            let mut h = SemanticHead::zeros(2, 2);
            h.b_mean.data_mut().fill(10.0 * (i + 1) as f64);
            h.b_logvar.data_mut().fill(-1e6);
            h
        })
        .collect();
    let d = refine(&heads, &[0.25, 0.75], &mut stream_rng(0, 0, Stream::Heads)).unwrap();
    let rounded: Vec<f64> = d.concat.data().iter().map(|v| v.round()).collect();
    assert_eq!(rounded[..6], [10.0, 10.0, 20.0, 20.0, 30.0, 30.0]);
    assert_eq!(d.concat.data()[6..], [0.25, 0.75]);
    assert_eq!(d.sharp().unwrap().data(), &d.concat.data()[0..2]);
    assert_eq!(d.dagger().unwrap().data(), &d.concat.data()[2..4]);
    assert_eq!(d.prime().unwrap().data(), &d.concat.data()[4..6]);
}

#[derive(Default)]
struct Trajectory(Vec<[u64; 4]>);

impl TrainObserver for Trajectory {
    fn on_step(&mut self, _e: &StepEvent, m: &ModelState) {
        self.0.push([Group::Generator, Group::Critic, Group::Mapping, Group::Matching].map(|g| m.group_fingerprint(g)));
    }
}

#[test]
fn identical_seeds_give_identical_trajectories() {
    let ds = toy(7, 3, 2);
    let mut cfg = toy_config(TaskMode::Gzsl, 3, 4);
    cfg.warmup = 1;
    let run = || {
        let mut t = Trainer::new(cfg.clone(), &ds, &ds).unwrap();
        let mut tr = Trajectory::default();
        t.run(&mut tr).unwrap();
        (tr.0, t.into_parts().0)
    };
    let (a, ma) = run();
    let (b, mb) = run();
    assert!(a.len() >= 100, "only {} steps", a.len());
    assert_eq!(a, b);
    assert_eq!(ma, mb);
}

/// `loss_cls` after every generator step, measured on a fixed set of
/// synthetic seen features (same noise every time) against the real seen
/// prototypes.
struct ClsTrace<'a> {
    ds: &'a FeatureDataset,
    protos: Tensor,
    values: Vec<f64>,
}

impl ClsTrace<'_> {
    fn measure(&mut self, m: &ModelState) {
        let (fake, labels) = synthesize(m, self.ds, &self.ds.seen_classes, 50, &mut stream_rng(5, 0, Stream::Synthesis)).unwrap();
        let local: Vec<usize> = labels.iter().map(|l| self.ds.seen_classes.iter().position(|c| c == l).unwrap()).collect();
        self.values.push(loss_cls(&fake, &self.protos, &local).unwrap());
    }
}

impl TrainObserver for ClsTrace<'_> {
    fn on_step(&mut self, e: &StepEvent, m: &ModelState) {
        if e.kind == StepKind::Generator && self.values.len() <= 50 {
            self.measure(m);
        }
    }
}

#[test]
fn classification_loss_falls_over_the_first_generator_steps() {
    let mut monotone = 0;
    let mut traces = Vec::new();
    for seed in 0..10 {
        let ds = toy(2, 1, seed);
        let protos = class_prototypes(&ds.gather(&ds.splits.train_seen), &ds.labels_of(&ds.splits.train_seen), &ds.seen_classes)
            .unwrap()
            .rows;
        let mut cfg = toy_config(TaskMode::Gzsl, 200, seed);
        cfg.rounds_per_epoch = Some(1);
        cfg.warmup = 60;
        // At the toy weight the adversarial term dominates the first steps.
        cfg.hyper.reg.lambda_c = 30.0;
        let mut t = Trainer::new(cfg, &ds, &ds).unwrap();
        let mut trace = ClsTrace { ds: &ds, protos, values: Vec::new() };
        trace.measure(t.model());
        for _ in 0..50 {
            t.run_epoch(&mut trace).unwrap();
        }
        let v = &trace.values;
        monotone += v.windows(2).all(|w| w[1] <= w[0]) as usize;
        traces.push(format!("{:.3}->{:.3}", v[0], v[v.len() - 1]));
    }
    assert!(monotone >= 8, "monotone in {monotone}/10 seeds: {traces:?}");
}

#[test]
fn seen_compactness_grows_during_training() {
    let ds = toy(7, 3, 3);
    let cfg = toy_config(TaskMode::Gzsl, 50, 3);
    let real = class_prototypes(&ds.gather(&ds.splits.train_seen), &ds.labels_of(&ds.splits.train_seen), &ds.seen_classes)
        .unwrap()
        .rows;
    let fn_of = |m: &ModelState| {
        let (fake, labels) = synthesize(m, &ds, &ds.seen_classes, 100, &mut stream_rng(9, 0, Stream::Synthesis)).unwrap();
        feature_compactness(&real, &class_prototypes(&fake, &labels, &ds.seen_classes).unwrap().rows).unwrap()
    };
    let mut t = Trainer::new(cfg, &ds, &ds).unwrap();
    let before = fn_of(t.model());
    t.run(&mut ()).unwrap();
    let after = fn_of(t.model());
    assert!(after > before, "compactness {before:.3} -> {after:.3}");
    assert!(after > 0.9, "compactness after 50 epochs {after:.3}");
}
