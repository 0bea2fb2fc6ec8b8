//! Feature synthesis, softmax classification and metrics.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::data::{class_prototypes, gather_rows, FeatureDataset, RowSource, TaskMode};
use crate::error::{Error, Result};
use crate::generation::generator_forward;
use crate::model::ModelState;
use crate::rng::{self, stream_rng, SrwganRng, Stream};
use crate::semantic::{head_noise, LEAKY_SLOPE};
use crate::tensor::{leaky_relu, Tensor};

/// Generator input for a batch of attribute rows: one fresh sample per head
/// (or a noise block for the noise variant), then the raw attributes.
pub fn generator_input(model: &ModelState, attrs: &Tensor, rng: &mut SrwganRng) -> Result<Tensor> {
    let arch = &model.arch;
    if attrs.cols() != arch.attribute_dim {
        return Err(Error::Shape { context: "generator_input", expected: [attrs.rows(), arch.attribute_dim], found: attrs.shape() });
    }
    let rows = attrs.rows();
    let mut blocks = Vec::new();
    if arch.variant.uses_noise() {
        blocks.push(head_noise(rows, arch.head_dim, rng));
    }
    for h in &model.heads {
        let eps = head_noise(rows, h.out_dim(), rng);
        let mean = leaky_relu(&add_row(&attrs.matmul(&h.w_mean), &h.b_mean), LEAKY_SLOPE);
        let lv = leaky_relu(&add_row(&attrs.matmul(&h.w_logvar), &h.b_logvar), LEAKY_SLOPE);
        let lv = lv.map(|v| v.clamp(rng::LOG_VAR_MIN, rng::LOG_VAR_MAX));
        let mut s = mean;
        for ((o, &l), &e) in s.data_mut().iter_mut().zip(lv.data()).zip(eps.data()) {
            *o += libm::exp(0.5 * l) * e;
        }
        blocks.push(s);
    }
    blocks.push(attrs.clone());
    let refs: Vec<&Tensor> = blocks.iter().collect();
    Ok(Tensor::concat_cols(&refs))
}

fn add_row(t: &Tensor, row: &Tensor) -> Tensor {
    let mut out = t.clone();
    for r in 0..out.rows() {
        for (o, b) in out.row_mut(r).iter_mut().zip(row.data()) {
            *o += b;
        }
    }
    out
}

/// Fake features for a batch of attribute rows.
pub fn generate(model: &ModelState, attrs: &Tensor, rng: &mut SrwganRng) -> Result<Tensor> {
    let input = generator_input(model, attrs, rng)?;
    generator_forward(&model.generator, &input)
}

/// `n_per_class` fake features for each class, class-major.
pub fn synthesize(
    model: &ModelState,
    ds: &FeatureDataset,
    classes: &[u32],
    n_per_class: usize,
    rng: &mut SrwganRng,
) -> Result<(Tensor, Vec<u32>)> {
    if n_per_class == 0 {
        return Err(Error::InvalidConfig("n_per_class must be >= 1".into()));
    }
    let mut parts = Vec::with_capacity(classes.len());
    let mut labels = Vec::with_capacity(classes.len() * n_per_class);
    for &c in classes {
        if c as usize >= ds.num_classes {
            return Err(Error::UnknownClass(c));
        }
        let idx = vec![c; n_per_class];
        let attrs = ds.attribute_matrix(&idx);
        parts.push(generate(model, &attrs, rng)?);
        labels.extend_from_slice(&idx);
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    Ok((Tensor::concat_rows(&refs), labels))
}

// ---------------------------------------------------------------------------
// Softmax classifier

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// L2 penalty on the weights.
    #[serde(default)]
    pub weight_decay: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, epochs: 50, batch_size: 512, weight_decay: 0.0 }
    }
}

/// Multinomial logistic regression over raw features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    /// `n × C`
    pub weights: Tensor,
    pub bias: Tensor,
    pub classes: Vec<u32>,
}

impl LinearClassifier {
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.weights.rows() {
            return Err(Error::Shape { context: "classifier logits", expected: [x.rows(), self.weights.rows()], found: x.shape() });
        }
        Ok(add_row(&x.matmul(&self.weights), &self.bias))
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<u32>> {
        Ok(self.logits(x)?.argmax_rows().into_iter().map(|i| self.classes[i]).collect())
    }
}

pub fn fit_softmax(
    x: &Tensor,
    labels: &[u32],
    classes: &[u32],
    cfg: &ClassifierConfig,
    rng: &mut SrwganRng,
) -> Result<LinearClassifier> {
    if labels.len() != x.rows() {
        return Err(Error::Shape { context: "fit_softmax labels", expected: [x.rows(), 1], found: [labels.len(), 1] });
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::InvalidConfig("classifier needs a positive batch size and learning rate".into()));
    }
    let index: BTreeMap<u32, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    if index.len() != classes.len() {
        return Err(Error::InvalidConfig("duplicate classifier classes".into()));
    }
    let mut counts = vec![0usize; classes.len()];
    let mut local = Vec::with_capacity(labels.len());
    for &l in labels {
        let i = *index.get(&l).ok_or(Error::UnknownClass(l))?;
        counts[i] += 1;
        local.push(i);
    }
    if let Some(i) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass { class: classes[i] });
    }

    let (n, c) = (x.cols(), classes.len());
    let mut w = Tensor::zeros(n, c);
    let mut b = Tensor::zeros(1, c);
    let adam = AdamConfig { learning_rate: cfg.learning_rate, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 };
    let mut opt = AdamState::new(adam, &[[n, c], [1, c]]);
    let mut order: Vec<usize> = (0..x.rows()).collect();
    for _ in 0..cfg.epochs {
        for i in (1..order.len()).rev() {
            let j = rng::index(rng, i + 1);
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.batch_size) {
            let xb = x.select_rows(chunk);
            let mut p = add_row(&xb.matmul(&w), &b).softmax_rows();
            let inv = 1.0 / chunk.len() as f64;
            for (r, &i) in chunk.iter().enumerate() {
                let row = p.row_mut(r);
                row[local[i]] -= 1.0;
                for v in row.iter_mut() {
                    *v *= inv;
                }
            }
            let mut gw = xb.matmul_tn(&p);
            if cfg.weight_decay > 0.0 {
                gw = gw.zip_map(&w, |g, wv| g + cfg.weight_decay * wv);
            }
            let gb = p.col_sums();
            opt.step(&mut [&mut w, &mut b], &[gw, gb])?;
        }
    }
    if !w.is_finite() || !b.is_finite() {
        return Err(Error::NonFinite("classifier weights".into()));
    }
    Ok(LinearClassifier { weights: w, bias: b, classes: classes.to_vec() })
}

// ---------------------------------------------------------------------------
// Metrics

/// Per-class top-1 accuracy (percent) and its unweighted mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClassAccuracy {
    pub per_class: BTreeMap<u32, f64>,
    pub mean: f64,
}

pub fn per_class_accuracy(predicted: &[u32], truth: &[u32]) -> Result<PerClassAccuracy> {
    if predicted.len() != truth.len() {
        return Err(Error::Shape { context: "per_class_accuracy", expected: [truth.len(), 1], found: [predicted.len(), 1] });
    }
    let mut hits: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for (&p, &t) in predicted.iter().zip(truth) {
        let e = hits.entry(t).or_insert((0, 0));
        e.0 += (p == t) as usize;
        e.1 += 1;
    }
    let per_class: BTreeMap<u32, f64> = hits.into_iter().map(|(c, (h, n))| (c, 100.0 * h as f64 / n as f64)).collect();
    let mean = if per_class.is_empty() { 0.0 } else { per_class.values().sum::<f64>() / per_class.len() as f64 };
    Ok(PerClassAccuracy { per_class, mean })
}

pub fn per_class_top1(clf: &LinearClassifier, x: &Tensor, labels: &[u32]) -> Result<PerClassAccuracy> {
    if let Some(&l) = labels.iter().find(|l| !clf.classes.contains(l)) {
        return Err(Error::UnknownClass(l));
    }
    per_class_accuracy(&clf.predict(x)?, labels)
}

pub fn harmonic(u: f64, s: f64) -> f64 {
    if u + s > 0.0 {
        2.0 * s * u / (s + u)
    } else {
        0.0
    }
}

/// Percentage change of `h_other` relative to `h_a`.
pub fn relative_improvement(h_a: f64, h_other: f64) -> f64 {
    (h_other - h_a) / h_a * 100.0
}

/// Mean cosine similarity between matching rows of two prototype sets.
pub fn feature_compactness(real: &Tensor, fake: &Tensor) -> Result<f64> {
    if real.shape() != fake.shape() {
        return Err(Error::Shape { context: "feature_compactness", expected: real.shape(), found: fake.shape() });
    }
    if real.rows() == 0 {
        return Err(Error::InvalidConfig("no prototypes".into()));
    }
    let mut acc = 0.0;
    for r in 0..real.rows() {
        let (a, b) = (real.row(r), fake.row(r));
        let na = libm::sqrt(a.iter().map(|v| v * v).sum::<f64>());
        let nb = libm::sqrt(b.iter().map(|v| v * v).sum::<f64>());
        if na == 0.0 || nb == 0.0 {
            return Err(Error::ZeroNorm(r));
        }
        acc += crate::tensor::dot(a, b) / (na * nb);
    }
    Ok(acc / real.rows() as f64)
}

// ---------------------------------------------------------------------------
// Protocol

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    /// Synthetic features per unseen class.
    pub n_synth: usize,
    #[serde(default)]
    pub classifier: ClassifierConfig,
    /// Synthetic features per class used for compactness.
    #[serde(default = "default_fn_samples")]
    pub fn_samples: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_fn_samples() -> usize {
    100
}

impl EvalSettings {
    pub fn new(n_synth: usize, seed: u64) -> Self {
        Self { n_synth, classifier: ClassifierConfig::default(), fn_samples: default_fn_samples(), seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: TaskMode,
    pub n_synth: usize,
    /// Unseen per-class accuracy mean (percent).
    pub unseen: f64,
    /// Seen per-class accuracy mean; generalized modes only.
    pub seen: Option<f64>,
    pub harmonic: Option<f64>,
    pub per_class: BTreeMap<u32, f64>,
    pub fn_seen: Option<f64>,
    pub fn_unseen: Option<f64>,
    #[serde(default)]
    pub ri: Option<f64>,
}

impl EvalReport {
    /// Fills `ri` relative to a baseline report's `H`.
    pub fn with_baseline(mut self, baseline: &EvalReport) -> Self {
        if let (Some(a), Some(b)) = (baseline.harmonic, self.harmonic) {
            if a > 0.0 {
                self.ri = Some(relative_improvement(a, b));
            }
        }
        self
    }
}

/// Mean cosine similarity between per-class prototypes of real rows and of
/// freshly synthesized rows.
pub fn compactness_against<S: RowSource + ?Sized>(
    model: &ModelState,
    ds: &FeatureDataset,
    source: &S,
    real_indices: &[u32],
    classes: &[u32],
    n_per_class: usize,
    rng: &mut SrwganRng,
) -> Result<f64> {
    let real = gather_rows(source, ds.feature_dim, real_indices);
    let real_p = class_prototypes(&real, &ds.labels_of(real_indices), classes)?;
    let (fake, fake_labels) = synthesize(model, ds, classes, n_per_class, rng)?;
    let fake_p = class_prototypes(&fake, &fake_labels, classes)?;
    feature_compactness(&real_p.rows, &fake_p.rows)
}

/// Synthesizes unseen features, trains the softmax classifier for `mode` and
/// scores the test splits. `shots` are the labeled unseen indices a few-shot
/// run trained with.
pub fn evaluate(model: &ModelState, ds: &FeatureDataset, mode: TaskMode, shots: &[u32], settings: &EvalSettings) -> Result<EvalReport> {
    let mut synth_rng = stream_rng(settings.seed, 0, Stream::Synthesis);
    let mut clf_rng = stream_rng(settings.seed, 0, Stream::Classifier);
    let (fake_u, fake_u_labels) = synthesize(model, ds, &ds.unseen_classes, settings.n_synth, &mut synth_rng)?;

    let generalized = mode.is_generalized();
    let (train_x, train_y, classes) = if generalized {
        let mut real_idx = ds.splits.train_seen.clone();
        if mode.uses_shots() {
            real_idx.extend_from_slice(shots);
        }
        let real = ds.gather(&real_idx);
        let mut y = ds.labels_of(&real_idx);
        y.extend_from_slice(&fake_u_labels);
        let mut classes: Vec<u32> = ds.seen_classes.iter().chain(&ds.unseen_classes).copied().collect();
        classes.sort_unstable();
        (Tensor::concat_rows(&[&real, &fake_u]), y, classes)
    } else {
        (fake_u.clone(), fake_u_labels.clone(), ds.unseen_classes.clone())
    };
    let clf = fit_softmax(&train_x, &train_y, &classes, &settings.classifier, &mut clf_rng)?;

    let test_u = ds.gather(&ds.splits.test_unseen);
    let acc_u = per_class_top1(&clf, &test_u, &ds.labels_of(&ds.splits.test_unseen))?;
    let mut per_class = acc_u.per_class.clone();
    let (seen, h) = if generalized && !ds.splits.test_seen.is_empty() {
        let test_s = ds.gather(&ds.splits.test_seen);
        let acc_s = per_class_top1(&clf, &test_s, &ds.labels_of(&ds.splits.test_seen))?;
        per_class.extend(acc_s.per_class);
        (Some(acc_s.mean), Some(harmonic(acc_u.mean, acc_s.mean)))
    } else {
        (None, None)
    };

    let fn_unseen = {
        let real = ds.gather(&ds.splits.test_unseen);
        let real_p = class_prototypes(&real, &ds.labels_of(&ds.splits.test_unseen), &ds.unseen_classes)?;
        let fake_p = class_prototypes(&fake_u, &fake_u_labels, &ds.unseen_classes)?;
        feature_compactness(&real_p.rows, &fake_p.rows).ok()
    };
    let fn_seen = if settings.fn_samples > 0 {
        compactness_against(model, ds, ds, &ds.splits.train_seen, &ds.seen_classes, settings.fn_samples, &mut synth_rng).ok()
    } else {
        None
    };

    Ok(EvalReport {
        mode,
        n_synth: settings.n_synth,
        unseen: acc_u.mean,
        seen,
        harmonic: h,
        per_class,
        fn_seen,
        fn_unseen,
        ri: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::vec::Vec;

    #[test]
    fn harmonic_examples() {
        assert_eq!(harmonic(50.0, 50.0), 50.0);
        assert_eq!(harmonic(0.0, 80.0), 0.0);
        assert_eq!(harmonic(0.0, 0.0), 0.0);
        assert!((harmonic(71.7, 96.3) - 82.2).abs() < 0.05);
        assert!((harmonic(75.0, 91.9) - 82.6).abs() < 0.05);
    }

    #[test]
    fn relative_improvement_examples() {
        assert!((relative_improvement(82.2, 81.4) - -0.97).abs() < 0.01);
        assert!((relative_improvement(70.2, 69.0) - -1.71).abs() < 0.01);
        assert_eq!(relative_improvement(60.0, 60.0), 0.0);
    }

    #[test]
    fn per_class_is_not_pooled() {
        let mut truth = vec![0u32; 10];
        truth.extend(vec![1u32; 1000]);
        let mut pred = vec![0u32; 10];
        pred.extend(vec![0u32; 1000]);
        let acc = per_class_accuracy(&pred, &truth).unwrap();
        assert_eq!(acc.mean, 50.0);
        assert_eq!(acc.per_class[&0], 100.0);
        assert_eq!(acc.per_class[&1], 0.0);
    }

    #[test]
    fn confusion_matrix_oracle() {
        let mut r = stream_rng(4, 0, Stream::Noise);
        let truth: Vec<u32> = (0..300).map(|_| rng::index(&mut r, 3) as u32).collect();
        let pred: Vec<u32> = (0..300).map(|_| rng::index(&mut r, 3) as u32).collect();
        let mut cm = [[0usize; 3]; 3];
        for (&t, &p) in truth.iter().zip(&pred) {
            cm[t as usize][p as usize] += 1;
        }
        let expected: f64 = (0..3).map(|c| 100.0 * cm[c][c] as f64 / cm[c].iter().sum::<usize>() as f64).sum::<f64>() / 3.0;
        assert!((per_class_accuracy(&pred, &truth).unwrap().mean - expected).abs() < 1e-12);
    }

    #[test]
    fn separable_toy_is_fit_exactly() {
        let x = Tensor::from_vec(6, 2, vec![2.0, 0.1, 1.5, -0.2, 3.0, 0.0, -2.0, 0.3, -1.0, 0.0, -2.5, -0.1]).unwrap();
        let y = [7, 7, 7, 3, 3, 3];
        let cfg = ClassifierConfig { learning_rate: 0.05, epochs: 200, batch_size: 4, weight_decay: 0.0 };
        let clf = fit_softmax(&x, &y, &[3, 7], &cfg, &mut stream_rng(1, 0, Stream::Classifier)).unwrap();
        assert_eq!(clf.logits(&x).unwrap().shape(), [6, 2]);
        assert_eq!(per_class_top1(&clf, &x, &y).unwrap().mean, 100.0);
        assert!(matches!(per_class_top1(&clf, &x, &[1, 7, 7, 3, 3, 3]), Err(Error::UnknownClass(1))));
        assert!(matches!(fit_softmax(&x, &y, &[3, 7, 9], &cfg, &mut stream_rng(1, 0, Stream::Classifier)), Err(Error::EmptyClass { class: 9 })));
    }

    #[test]
    fn compactness_examples() {
        let a = Tensor::from_vec(2, 2, vec![1.0, 2.0, -3.0, 0.5]).unwrap();
        assert!((feature_compactness(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        let b = Tensor::from_vec(2, 2, vec![-2.0, 1.0, 0.5, 3.0]).unwrap();
        assert!(feature_compactness(&a, &b).unwrap().abs() < 1e-15);
        let z = Tensor::zeros(2, 2);
        assert_eq!(feature_compactness(&a, &z), Err(Error::ZeroNorm(0)));
        let mut r = stream_rng(6, 0, Stream::Noise);
        let p = rng::gaussian(5, 4, 1.0, &mut r);
        let q = rng::gaussian(5, 4, 1.0, &mut r);
        let mut acc = 0.0;
        for i in 0..5 {
            let (mut d, mut na, mut nb) = (0.0, 0.0, 0.0);
            for j in 0..4 {
                d += p.get(i, j) * q.get(i, j);
                na += p.get(i, j) * p.get(i, j);
                nb += q.get(i, j) * q.get(i, j);
            }
            acc += d / (na.sqrt() * nb.sqrt());
        }
        assert!((feature_compactness(&p, &q).unwrap() - acc / 5.0).abs() < 1e-12);
    }

    /// Model whose generator reproduces the ground-truth linear map: the
    /// hidden layer copies the raw attributes and the output layer is `Z`.
    pub(crate) fn planted_model(world: &crate::data::SyntheticWorld, variant: crate::model::Variant) -> ModelState {
        use crate::model::Architecture;
        let ds = &world.dataset;
        let d = ds.attribute_dim;
        let arch = Architecture {
            feature_dim: ds.feature_dim,
            attribute_dim: d,
            head_dim: 2,
            generator_hidden: d,
            map_dim: 3,
            labeled_classes: ds.seen_classes.len(),
            variant,
        };
        let mut m = ModelState::init(arch, 0.02, &mut stream_rng(0, 0, Stream::Init));
        let skip = arch.generator_input() - d;
        let mut w1 = Tensor::zeros(arch.generator_input(), d);
        for i in 0..d {
            w1.set(skip + i, i, 1.0);
        }
        m.generator.w1 = w1;
        m.generator.b1 = Tensor::zeros(1, d);
        m.generator.w2 = world.generator.clone();
        m.generator.b2 = Tensor::zeros(1, ds.feature_dim);
        m
    }

    #[test]
    fn planted_generator_is_near_perfect() {
        use crate::data::{make_synthetic, SyntheticSpec};
        let world = make_synthetic(&SyntheticSpec::new(7, 3, 32, 8, 100, 0.05, 0)).unwrap();
        let m = planted_model(&world, crate::model::Variant::A);
        let mut s = EvalSettings::new(50, 1);
        s.classifier.epochs = 500;
        let rep = evaluate(&m, &world.dataset, TaskMode::Gzsl, &[], &s).unwrap();
        assert!(rep.unseen > 95.0 && rep.seen.unwrap() > 95.0, "{rep:?}");
        assert!(rep.fn_unseen.unwrap() > 0.999);
        let rep = evaluate(&m, &world.dataset, TaskMode::Zsl, &[], &s).unwrap();
        assert!(rep.unseen > 95.0 && rep.seen.is_none() && rep.harmonic.is_none());
    }
}

