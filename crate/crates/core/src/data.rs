//! Feature datasets, class prototypes and batch composition.

use alloc::collections::{BTreeMap, BTreeSet};
use core::cell::RefCell;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::random_orthogonal;
use crate::rng::{self, stream_rng, SrwganRng, Stream};
use crate::tensor::Tensor;

/// The five any-shot task formulations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskMode {
    Zsl,
    Gzsl,
    Fsl,
    Tzsl,
    Tgzsl,
}

impl TaskMode {
    pub fn is_transductive(self) -> bool {
        matches!(self, TaskMode::Tzsl | TaskMode::Tgzsl)
    }

    /// Seen classes compete with unseen ones at test time.
    pub fn is_generalized(self) -> bool {
        matches!(self, TaskMode::Gzsl | TaskMode::Fsl | TaskMode::Tgzsl)
    }

    pub fn uses_shots(self) -> bool {
        matches!(self, TaskMode::Fsl)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskMode::Zsl => "zsl",
            TaskMode::Gzsl => "gzsl",
            TaskMode::Fsl => "fsl",
            TaskMode::Tzsl => "tzsl",
            TaskMode::Tgzsl => "tgzsl",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "zsl" => TaskMode::Zsl,
            "gzsl" => TaskMode::Gzsl,
            "fsl" => TaskMode::Fsl,
            "tzsl" => TaskMode::Tzsl,
            "tgzsl" => TaskMode::Tgzsl,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train_seen: Vec<u32>,
    pub test_seen: Vec<u32>,
    /// Labeled unseen samples available to few-shot runs.
    pub train_unseen: Vec<u32>,
    pub test_unseen: Vec<u32>,
}

/// Visual features, labels, per-class attributes and split indices of one
/// benchmark. Features and attributes are kept in `f32`, the on-disk type.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    pub name: String,
    pub feature_dim: usize,
    pub attribute_dim: usize,
    pub num_classes: usize,
    pub features: Vec<f32>,
    pub labels: Vec<u32>,
    pub attributes: Vec<f32>,
    pub seen_classes: Vec<u32>,
    pub unseen_classes: Vec<u32>,
    pub splits: Splits,
}

/// Read access to feature rows. Training and sampling go through this trait
/// so tests can observe exactly which rows a run touches.
pub trait RowSource {
    fn feature_row(&self, index: usize) -> &[f32];
}

impl RowSource for FeatureDataset {
    fn feature_row(&self, index: usize) -> &[f32] {
        &self.features[index * self.feature_dim..(index + 1) * self.feature_dim]
    }
}

/// Wraps a source and counts reads per row.
pub struct AccessLog<'a, S: RowSource + ?Sized> {
    inner: &'a S,
    reads: RefCell<BTreeMap<usize, usize>>,
}

impl<'a, S: RowSource + ?Sized> AccessLog<'a, S> {
    pub fn new(inner: &'a S) -> Self {
        Self { inner, reads: RefCell::new(BTreeMap::new()) }
    }

    /// Row index -> number of reads so far.
    pub fn reads(&self) -> BTreeMap<usize, usize> {
        self.reads.borrow().clone()
    }

    pub fn total_reads(&self) -> usize {
        self.reads.borrow().values().sum()
    }

    /// Reads of any of `indices`.
    pub fn reads_of(&self, indices: &[u32]) -> usize {
        let r = self.reads.borrow();
        indices.iter().filter_map(|&i| r.get(&(i as usize))).sum()
    }

    pub fn clear(&self) {
        self.reads.borrow_mut().clear();
    }
}

impl<S: RowSource + ?Sized> RowSource for AccessLog<'_, S> {
    fn feature_row(&self, index: usize) -> &[f32] {
        *self.reads.borrow_mut().entry(index).or_insert(0) += 1;
        self.inner.feature_row(index)
    }
}

impl FeatureDataset {
    /// Seen classes are the labels found in the seen splits, unseen classes
    /// the labels found in the unseen splits.
    pub fn class_sets_from_splits(labels: &[u32], splits: &Splits) -> Result<(Vec<u32>, Vec<u32>)> {
        let lookup = |idx: &u32| {
            labels
                .get(*idx as usize)
                .copied()
                .ok_or_else(|| Error::InvalidDataset(format!("split index {idx} out of range")))
        };
        let seen = splits
            .train_seen
            .iter()
            .chain(&splits.test_seen)
            .map(lookup)
            .collect::<Result<BTreeSet<_>>>()?;
        let unseen = splits
            .train_unseen
            .iter()
            .chain(&splits.test_unseen)
            .map(lookup)
            .collect::<Result<BTreeSet<_>>>()?;
        Ok((seen.into_iter().collect(), unseen.into_iter().collect()))
    }

    pub fn num_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn attribute_row(&self, class: u32) -> &[f32] {
        let c = class as usize;
        &self.attributes[c * self.attribute_dim..(c + 1) * self.attribute_dim]
    }

    /// Attribute rows of `classes` as an `f64` matrix.
    pub fn attribute_matrix(&self, classes: &[u32]) -> Tensor {
        let mut t = Tensor::zeros(classes.len(), self.attribute_dim);
        for (r, &c) in classes.iter().enumerate() {
            for (o, &v) in t.row_mut(r).iter_mut().zip(self.attribute_row(c)) {
                *o = v as f64;
            }
        }
        t
    }

    pub fn seen_index(&self, class: u32) -> Option<usize> {
        self.seen_classes.binary_search(&class).ok()
    }

    pub fn unseen_index(&self, class: u32) -> Option<usize> {
        self.unseen_classes.binary_search(&class).ok()
    }

    /// Checks every structural invariant.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidDataset(m));
        let n = self.num_samples();
        if self.feature_dim == 0 || self.attribute_dim == 0 {
            return bad("feature and attribute dimensions must be positive".into());
        }
        if self.features.len() != n * self.feature_dim {
            return Err(Error::Shape {
                context: "features",
                expected: [n, self.feature_dim],
                found: [self.features.len() / self.feature_dim, self.features.len() % self.feature_dim],
            });
        }
        if self.attributes.len() != self.num_classes * self.attribute_dim {
            return Err(Error::Shape {
                context: "attributes",
                expected: [self.num_classes, self.attribute_dim],
                found: [self.attributes.len() / self.attribute_dim, self.attributes.len() % self.attribute_dim],
            });
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l as usize >= self.num_classes) {
            return Err(Error::LabelOutOfRange { context: "labels", label: l as usize, classes: self.num_classes });
        }
        if !self.features.iter().chain(&self.attributes).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("dataset values".into()));
        }
        let seen: BTreeSet<u32> = self.seen_classes.iter().copied().collect();
        let unseen: BTreeSet<u32> = self.unseen_classes.iter().copied().collect();
        if seen.len() != self.seen_classes.len() || unseen.len() != self.unseen_classes.len() {
            return bad("duplicate class ids".into());
        }
        if self.seen_classes.windows(2).any(|w| w[0] > w[1]) || self.unseen_classes.windows(2).any(|w| w[0] > w[1]) {
            return bad("class id lists must be sorted".into());
        }
        if seen.iter().chain(&unseen).any(|&c| c as usize >= self.num_classes) {
            return bad("class id exceeds class count".into());
        }
        if let Some(c) = seen.intersection(&unseen).next() {
            return bad(format!("class {c} is both seen and unseen"));
        }
        if let Some(l) = self.labels.iter().find(|l| !seen.contains(l) && !unseen.contains(l)) {
            return bad(format!("label {l} is neither seen nor unseen"));
        }
        let check_split = |name: &str, idx: &[u32], allowed: &BTreeSet<u32>| -> Result<BTreeSet<u32>> {
            let mut set = BTreeSet::new();
            for &i in idx {
                let Some(&label) = self.labels.get(i as usize) else {
                    return Err(Error::InvalidDataset(format!("{name}: index {i} out of range")));
                };
                if !allowed.contains(&label) {
                    return Err(Error::InvalidDataset(format!("{name}: sample {i} has class {label} outside the split's scope")));
                }
                set.insert(i);
            }
            Ok(set)
        };
        let train_seen = check_split("train_seen", &self.splits.train_seen, &seen)?;
        let test_seen = check_split("test_seen", &self.splits.test_seen, &seen)?;
        let train_unseen = check_split("train_unseen", &self.splits.train_unseen, &unseen)?;
        let test_unseen = check_split("test_unseen", &self.splits.test_unseen, &unseen)?;
        if train_seen.intersection(&test_seen).next().is_some() {
            return bad("train_seen and test_seen overlap".into());
        }
        if train_unseen.intersection(&test_unseen).next().is_some() {
            return bad("train_unseen and test_unseen overlap".into());
        }
        Ok(())
    }

    /// Features of the given sample indices as an `f64` matrix.
    pub fn gather(&self, indices: &[u32]) -> Tensor {
        gather_rows(self, self.feature_dim, indices)
    }

    pub fn labels_of(&self, indices: &[u32]) -> Vec<u32> {
        indices.iter().map(|&i| self.labels[i as usize]).collect()
    }
}

pub fn gather_rows<S: RowSource + ?Sized>(source: &S, dim: usize, indices: &[u32]) -> Tensor {
    let mut t = Tensor::zeros(indices.len(), dim);
    for (r, &i) in indices.iter().enumerate() {
        for (o, &v) in t.row_mut(r).iter_mut().zip(source.feature_row(i as usize)) {
            *o = v as f64;
        }
    }
    t
}

/// Per-class mean vectors, one row per entry of `class_ids`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeMatrix {
    pub rows: Tensor,
    pub class_ids: Vec<u32>,
}

pub fn class_prototypes(vectors: &Tensor, labels: &[u32], classes: &[u32]) -> Result<PrototypeMatrix> {
    if vectors.rows() != labels.len() {
        return Err(Error::Shape { context: "class_prototypes", expected: [labels.len(), vectors.cols()], found: vectors.shape() });
    }
    let mut rows = Tensor::zeros(classes.len(), vectors.cols());
    for (ci, &class) in classes.iter().enumerate() {
        let mut count = 0usize;
        for (r, _) in labels.iter().enumerate().filter(|(_, &l)| l == class) {
            for (o, v) in rows.row_mut(ci).iter_mut().zip(vectors.row(r)) {
                *o += v;
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::EmptyClass { class });
        }
        for o in rows.row_mut(ci) {
            *o /= count as f64;
        }
    }
    Ok(PrototypeMatrix { rows, class_ids: classes.to_vec() })
}

/// `C × N` matrix whose product with an `N × k` matrix yields the per-class
/// means. `local` holds each row's class position in `0..classes`.
pub fn averaging_matrix(local: &[usize], classes: usize) -> Result<Tensor> {
    let mut counts = vec![0usize; classes];
    for &l in local {
        if l >= classes {
            return Err(Error::LabelOutOfRange { context: "averaging_matrix", label: l, classes });
        }
        counts[l] += 1;
    }
    if let Some(c) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass { class: c as u32 });
    }
    let mut m = Tensor::zeros(classes, local.len());
    for (i, &l) in local.iter().enumerate() {
        m.set(l, i, 1.0 / counts[l] as f64);
    }
    Ok(m)
}

/// One training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Real labeled features: seen samples followed by any few-shot samples.
    pub labeled_x: Tensor,
    pub labeled_classes: Vec<u32>,
    /// Number of leading rows of `labeled_x` that come from seen classes.
    pub seen_rows: usize,
    /// Seen class position (into `seen_classes`) of each seen row.
    pub seen_local: Vec<usize>,
    /// Unseen class position (into `unseen_classes`) of each description row.
    pub unseen_local: Vec<usize>,
    /// Unlabeled test features, transductive modes only.
    pub unlabeled_x: Option<Tensor>,
}

impl Batch {
    pub fn seen_x(&self) -> Tensor {
        let idx: Vec<usize> = (0..self.seen_rows).collect();
        self.labeled_x.select_rows(&idx)
    }
}

/// Draws batches that contain every seen class and a description row for
/// every unseen class.
pub struct BatchSampler<'a, S: RowSource + ?Sized> {
    ds: &'a FeatureDataset,
    source: &'a S,
    mode: TaskMode,
    batch_size: usize,
    per_class: Vec<Vec<u32>>,
    shots: Vec<u32>,
    unlabeled_pool: Vec<u32>,
}

impl<'a, S: RowSource + ?Sized> BatchSampler<'a, S> {
    /// `shots_per_class` is only read in few-shot mode; the shot set is drawn
    /// once from `train_unseen` with `shot_rng` and reused in every batch.
    pub fn new(
        ds: &'a FeatureDataset,
        source: &'a S,
        mode: TaskMode,
        batch_size: usize,
        shots_per_class: usize,
        shot_rng: &mut SrwganRng,
    ) -> Result<Self> {
        let p = ds.seen_classes.len();
        let q = ds.unseen_classes.len();
        if p == 0 || q == 0 {
            return Err(Error::InvalidDataset("need at least one seen and one unseen class".into()));
        }
        if batch_size < p.max(q) {
            return Err(Error::BatchTooSmall { batch: batch_size, classes: p.max(q) });
        }
        let mut per_class = vec![Vec::new(); p];
        for &i in &ds.splits.train_seen {
            let c = ds.labels[i as usize];
            let local = ds.seen_index(c).ok_or(Error::UnknownClass(c))?;
            per_class[local].push(i);
        }
        if let Some(c) = per_class.iter().position(|v| v.is_empty()) {
            return Err(Error::EmptyClass { class: ds.seen_classes[c] });
        }

        let mut shots = Vec::new();
        if mode.uses_shots() {
            if shots_per_class == 0 {
                return Err(Error::InvalidConfig("few-shot mode needs shots > 0".into()));
            }
            for &class in &ds.unseen_classes {
                let mut pool: Vec<u32> =
                    ds.splits.train_unseen.iter().copied().filter(|&i| ds.labels[i as usize] == class).collect();
                if pool.len() < shots_per_class {
                    return Err(Error::InvalidDataset(format!(
                        "class {class} has {} train_unseen samples, {shots_per_class} shots requested",
                        pool.len()
                    )));
                }
                partial_shuffle(&mut pool, shots_per_class, shot_rng);
                shots.extend_from_slice(&pool[..shots_per_class]);
            }
        }

        let unlabeled_pool = match mode {
            TaskMode::Tzsl => ds.splits.test_unseen.clone(),
            TaskMode::Tgzsl => ds.splits.test_unseen.iter().chain(&ds.splits.test_seen).copied().collect(),
            _ => Vec::new(),
        };
        if mode.is_transductive() && ds.splits.test_unseen.is_empty() {
            return Err(Error::InvalidDataset("transductive mode needs unlabeled unseen-class test features".into()));
        }

        Ok(Self { ds, source, mode, batch_size, per_class, shots, unlabeled_pool })
    }

    pub fn shots(&self) -> &[u32] {
        &self.shots
    }

    pub fn per_seen_class(&self) -> usize {
        (self.batch_size / self.ds.seen_classes.len()).max(1)
    }

    pub fn per_unseen_class(&self) -> usize {
        (self.batch_size / self.ds.unseen_classes.len()).max(1)
    }

    pub fn sample(&self, rng: &mut SrwganRng) -> Batch {
        let ds = self.ds;
        let p = ds.seen_classes.len();
        let k = self.per_seen_class();
        let mut indices = Vec::with_capacity(self.batch_size);
        let mut seen_local = Vec::with_capacity(self.batch_size);
        for (local, members) in self.per_class.iter().enumerate() {
            if members.len() >= k {
                let mut pool = members.clone();
                partial_shuffle(&mut pool, k, rng);
                indices.extend_from_slice(&pool[..k]);
            } else {
                for _ in 0..k {
                    indices.push(members[rng::index(rng, members.len())]);
                }
            }
            seen_local.extend(core::iter::repeat(local).take(k));
        }
        let train = &ds.splits.train_seen;
        for _ in (k * p)..self.batch_size {
            let i = train[rng::index(rng, train.len())];
            indices.push(i);
            seen_local.push(ds.seen_index(ds.labels[i as usize]).expect("validated"));
        }
        let seen_rows = indices.len();
        indices.extend_from_slice(&self.shots);

        let ku = self.per_unseen_class();
        let unseen_local: Vec<usize> =
            (0..ds.unseen_classes.len()).flat_map(|c| core::iter::repeat(c).take(ku)).collect();

        let unlabeled_x = if self.mode.is_transductive() {
            let take = self.batch_size.min(self.unlabeled_pool.len());
            let mut pool = self.unlabeled_pool.clone();
            partial_shuffle(&mut pool, take, rng);
            Some(gather_rows(self.source, ds.feature_dim, &pool[..take]))
        } else {
            None
        };

        Batch {
            labeled_x: gather_rows(self.source, ds.feature_dim, &indices),
            labeled_classes: ds.labels_of(&indices),
            seen_rows,
            seen_local,
            unseen_local,
            unlabeled_x,
        }
    }
}

/// Moves a uniform random `k`-subset to the front of `v`.
fn partial_shuffle(v: &mut [u32], k: usize, rng: &mut SrwganRng) {
    let n = v.len();
    for i in 0..k.min(n) {
        let j = i + rng::index(rng, n - i);
        v.swap(i, j);
    }
}

/// Parameters of a linear toy world `x = a·Z + ε`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seen: usize,
    pub unseen: usize,
    pub feature_dim: usize,
    pub attribute_dim: usize,
    pub samples_per_class: usize,
    pub noise_std: f64,
    pub seed: u64,
    /// Unseen attributes are an orthogonal transform of the seen ones
    /// (requires `seen == unseen`).
    #[serde(default)]
    pub gram_matched: bool,
    /// Uses `Z = I` (requires `feature_dim == attribute_dim`).
    #[serde(default)]
    pub identity_generator: bool,
    #[serde(default = "default_test_fraction")]
    pub test_seen_fraction: f64,
    /// Labeled unseen samples per class set aside for few-shot runs.
    #[serde(default = "default_unseen_train")]
    pub unseen_train_per_class: usize,
}

fn default_test_fraction() -> f64 {
    0.2
}

fn default_unseen_train() -> usize {
    5
}

impl SyntheticSpec {
    pub fn new(seen: usize, unseen: usize, feature_dim: usize, attribute_dim: usize, samples_per_class: usize, noise_std: f64, seed: u64) -> Self {
        Self {
            seen,
            unseen,
            feature_dim,
            attribute_dim,
            samples_per_class,
            noise_std,
            seed,
            gram_matched: false,
            identity_generator: false,
            test_seen_fraction: default_test_fraction(),
            unseen_train_per_class: default_unseen_train(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub dataset: FeatureDataset,
    /// Ground-truth `d × n` generator.
    pub generator: Tensor,
}

fn unit_rows(mut t: Tensor) -> Tensor {
    for r in 0..t.rows() {
        let row = t.row_mut(r);
        let norm = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>());
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    t
}

/// `d × n` generator whose columns each have one nonzero entry; the owners
/// are spread evenly over the attributes.
fn block_generator(d: usize, n: usize, rng: &mut SrwganRng) -> Tensor {
    let mut owner: Vec<u32> = (0..n).map(|j| (j % d) as u32).collect();
    partial_shuffle(&mut owner, n, rng);
    let mut z = Tensor::zeros(d, n);
    for (j, &i) in owner.iter().enumerate() {
        z.set(i as usize, j, 0.5 + rng::uniform(1, 1, 0.0, 1.0, rng).item());
    }
    z
}

/// Builds a toy dataset. Attribute rows are nonnegative with unit norm, and
/// every feature dimension is driven by exactly one attribute with a weight
/// in `[0.5, 1.5)`, so the clean features are nonnegative like rectified CNN
/// features and each class is closest (by dot product) to its own prototype.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<SyntheticWorld> {
    let &SyntheticSpec { seen: p, unseen: q, feature_dim: n, attribute_dim: d, samples_per_class, noise_std, seed, .. } = spec;
    if p == 0 || q == 0 || d == 0 || n < d || samples_per_class == 0 || !(noise_std >= 0.0) {
        return Err(Error::InvalidConfig(format!("invalid synthetic dims p={p} q={q} n={n} d={d}")));
    }
    if spec.gram_matched && p != q {
        return Err(Error::InvalidConfig("gram-matched worlds need seen == unseen".into()));
    }
    if spec.identity_generator && n != d {
        return Err(Error::InvalidConfig("identity generator needs feature_dim == attribute_dim".into()));
    }
    if !(0.0..1.0).contains(&spec.test_seen_fraction) || spec.unseen_train_per_class >= samples_per_class {
        return Err(Error::InvalidConfig("split sizes leave no test samples".into()));
    }
    let mut rng = stream_rng(seed, 0, Stream::Synthetic);
    let seen_attr = unit_rows(rng::uniform(p, d, 0.0, 1.0, &mut rng));
    let unseen_attr = if spec.gram_matched {
        random_orthogonal(q, &mut rng).matmul(&seen_attr)
    } else {
        unit_rows(rng::uniform(q, d, 0.0, 1.0, &mut rng))
    };
    let z = if spec.identity_generator { Tensor::identity(d) } else { block_generator(d, n, &mut rng) };
    let attributes = Tensor::concat_rows(&[&seen_attr, &unseen_attr]);
    let clean = attributes.matmul(&z);

    let c = p + q;
    let mut features = Vec::with_capacity(c * samples_per_class * n);
    let mut labels = Vec::with_capacity(c * samples_per_class);
    let mut splits = Splits::default();
    let n_test_seen = libm::round((samples_per_class as f64) * spec.test_seen_fraction) as usize;
    for class in 0..c {
        for s in 0..samples_per_class {
            let idx = labels.len() as u32;
            for &v in clean.row(class) {
                features.push((v + noise_std * rng::standard_normal(&mut rng)) as f32);
            }
            labels.push(class as u32);
            match (class < p, s) {
                (true, s) if s < n_test_seen => splits.test_seen.push(idx),
                (true, _) => splits.train_seen.push(idx),
                (false, s) if s < spec.unseen_train_per_class => splits.train_unseen.push(idx),
                (false, _) => splits.test_unseen.push(idx),
            }
        }
    }
    let dataset = FeatureDataset {
        name: String::from("synthetic"),
        feature_dim: n,
        attribute_dim: d,
        num_classes: c,
        features,
        labels,
        attributes: attributes.data().iter().map(|&v| v as f32).collect(),
        seen_classes: (0..p as u32).collect(),
        unseen_classes: (p as u32..c as u32).collect(),
        splits,
    };
    dataset.validate()?;
    Ok(SyntheticWorld { dataset, generator: z })
}
