//! Model checkpoints.
//!
//! A checkpoint directory holds `checkpoint.json` (architecture, training
//! config, epoch, tensor table and blob digests), `params.bin` with every
//! parameter, `optimizer.bin` with the Adam moments and `history.json`.
//! Blobs are little-endian f64 so a restore is bitwise exact.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use srwgan_core::adam::{AdamConfig, AdamState};
use srwgan_core::model::{Architecture, FrozenClassifier, Group, ModelState};
use srwgan_core::rng::{stream_rng, Stream};
use srwgan_core::tensor::Tensor;
use srwgan_core::training::{Optimizers, RunHistory, TrainConfig};

use crate::blob::{f64_bytes, f64_from, read_checked, read_json, sha256_hex, to_json, write_bytes, write_json};
use crate::error::{Error, Result};

pub const MANIFEST: &str = "checkpoint.json";
const PARAMS: &str = "params.bin";
const OPTIMIZER: &str = "optimizer.bin";
const HISTORY: &str = "history.json";
const GROUPS: [(Group, &str); 4] =
    [(Group::Generator, "generator"), (Group::Critic, "critic"), (Group::Mapping, "mapping"), (Group::Matching, "matching")];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerEntry {
    pub group: String,
    pub config: AdamConfig,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub dtype: String,
    pub arch: Architecture,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub tensors: Vec<TensorEntry>,
    pub optimizers: Vec<OptimizerEntry>,
    pub sha256: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: ModelState,
    pub optimizers: Optimizers,
    pub history: RunHistory,
}

fn state_of(opts: &Optimizers, g: Group) -> &AdamState {
    match g {
        Group::Generator => &opts.generator,
        Group::Critic => &opts.critic,
        Group::Mapping => &opts.mapping,
        Group::Matching => &opts.matching,
    }
}

pub fn save_checkpoint(ck: &Checkpoint, dir: &Path) -> Result<CheckpointManifest> {
    let named = ck.model.named_tensors();
    let tensors = named.iter().map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape() }).collect();
    let params: Vec<f64> = named.iter().flat_map(|(_, t)| t.data().iter().copied()).collect();

    let mut moments = Vec::new();
    let mut optimizers = Vec::new();
    for (g, name) in GROUPS {
        let st = state_of(&ck.optimizers, g);
        for t in st.first_moments().iter().chain(st.second_moments()) {
            moments.extend_from_slice(t.data());
        }
        optimizers.push(OptimizerEntry { group: name.into(), config: st.config, step: st.step });
    }

    let files = [(PARAMS, f64_bytes(&params)), (OPTIMIZER, f64_bytes(&moments)), (HISTORY, to_json(&ck.history).into_bytes())];
    let mut sha256 = BTreeMap::new();
    for (rel, bytes) in &files {
        write_bytes(&dir.join(rel), bytes)?;
        sha256.insert(rel.to_string(), sha256_hex(bytes));
    }
    let manifest = CheckpointManifest {
        dtype: "f64".into(),
        arch: ck.model.arch,
        config: ck.config.clone(),
        epoch: ck.history.records.len(),
        tensors,
        optimizers,
        sha256,
    };
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

fn take(values: &mut std::slice::Iter<'_, f64>, shape: [usize; 2], what: &str) -> Result<Tensor> {
    let data: Vec<f64> = values.by_ref().take(shape[0] * shape[1]).copied().collect();
    if data.len() != shape[0] * shape[1] {
        return Err(Error::Manifest(format!("{what}: blob is shorter than the tensor table")));
    }
    Ok(Tensor::from_vec(shape[0], shape[1], data)?)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let m: CheckpointManifest = read_json(&dir.join(MANIFEST))?;
    if m.dtype != "f64" {
        return Err(Error::Manifest(format!("unsupported dtype {}", m.dtype)));
    }
    let blob = |rel: &str| -> Result<Vec<u8>> {
        let digest = m.sha256.get(rel).ok_or_else(|| Error::Manifest(format!("no sha256 for {rel}")))?;
        read_checked(&dir.join(rel), digest)
    };

    // The initializer only fixes the layout; every value is overwritten.
    let mut model = ModelState::init(m.arch, 0.0, &mut stream_rng(0, 0, Stream::Init));
    if let Some(w) = m.tensors.iter().find(|e| e.name == "pretrained.weights") {
        let b = m.tensors.iter().find(|e| e.name == "pretrained.bias").map(|e| e.shape).unwrap_or([1, w.shape[1]]);
        model.pretrained =
            Some(FrozenClassifier { weights: Tensor::zeros(w.shape[0], w.shape[1]), bias: Tensor::zeros(b[0], b[1]) });
    }
    let params = f64_from(&blob(PARAMS)?, PARAMS)?;
    let mut it = params.iter();
    {
        let mut named = model.named_tensors_mut();
        if named.len() != m.tensors.len() {
            return Err(Error::Manifest(format!("expected {} tensors, table lists {}", named.len(), m.tensors.len())));
        }
        for ((name, t), e) in named.iter_mut().zip(&m.tensors) {
            if *name != e.name || t.shape() != e.shape {
                return Err(Error::Manifest(format!(
                    "tensor {} {:?} does not match the architecture ({name} {:?})",
                    e.name,
                    e.shape,
                    t.shape()
                )));
            }
            **t = take(&mut it, e.shape, PARAMS)?;
        }
    }
    if it.next().is_some() {
        return Err(Error::Manifest(format!("{PARAMS} is longer than the tensor table")));
    }

    let moments = f64_from(&blob(OPTIMIZER)?, OPTIMIZER)?;
    let mut it = moments.iter();
    let mut states = Vec::new();
    for (g, name) in GROUPS {
        let e = m
            .optimizers
            .iter()
            .find(|e| e.group == name)
            .ok_or_else(|| Error::Manifest(format!("no optimizer entry for {name}")))?;
        let shapes = model.group_shapes(g);
        let mv = |it: &mut std::slice::Iter<'_, f64>| shapes.iter().map(|&s| take(it, s, OPTIMIZER)).collect::<Result<Vec<_>>>();
        let first = mv(&mut it)?;
        let second = mv(&mut it)?;
        states.push(AdamState::from_parts(e.config, e.step, first, second)?);
    }
    if it.next().is_some() {
        return Err(Error::Manifest(format!("{OPTIMIZER} is longer than the model's optimizer state")));
    }
    let mut states = states.into_iter();
    let mut next = || states.next().expect("four groups");
    let optimizers = Optimizers { generator: next(), critic: next(), mapping: next(), matching: next() };

    let history: RunHistory = serde_json::from_slice(&blob(HISTORY)?)
        .map_err(|source| Error::Json { path: dir.join(HISTORY), source })?;
    if history.records.len() != m.epoch {
        return Err(Error::Manifest(format!("epoch {} but history has {} records", m.epoch, history.records.len())));
    }
    Ok(Checkpoint { config: m.config, model, optimizers, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use srwgan_core::data::{make_synthetic, SyntheticSpec, TaskMode};
    use srwgan_core::model::{HyperParams, Variant};
    use srwgan_core::training::Trainer;
    use std::fs;

    fn hyper() -> HyperParams {
        let mut h = HyperParams::default();
        h.head_dim = 3;
        h.generator_hidden = 8;
        h.map_dim = 4;
        h
    }

    fn trained(variant: Variant) -> (Checkpoint, srwgan_core::data::FeatureDataset) {
        let ds = make_synthetic(&SyntheticSpec::new(3, 2, 6, 4, 10, 0.05, 3)).unwrap().dataset;
        let mut cfg = TrainConfig::new(hyper(), TaskMode::Gzsl, 3, 1, 12, 5);
        cfg.variant = variant;
        let mut tr = Trainer::new(cfg.clone(), &ds, &ds).unwrap();
        tr.run_epoch(&mut ()).unwrap();
        tr.run_epoch(&mut ()).unwrap();
        let (model, optimizers, history) = tr.into_parts();
        (Checkpoint { config: cfg, model, optimizers, history }, ds)
    }

    #[test]
    fn round_trip_is_bitwise() {
        for v in [Variant::A, Variant::B, Variant::G] {
            let (ck, _) = trained(v);
            let dir = tempfile::tempdir().unwrap();
            save_checkpoint(&ck, dir.path()).unwrap();
            let back = load_checkpoint(dir.path()).unwrap();
            assert_eq!(back, ck);
            for ((_, a), (_, b)) in back.model.named_tensors().iter().zip(ck.model.named_tensors()) {
                assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }

    #[test]
    fn resume_continues_at_next_epoch() {
        let (ck, ds) = trained(Variant::A);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&ck, dir.path()).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        let mut tr = Trainer::resume(back.config, &ds, &ds, back.model, back.optimizers, back.history).unwrap();
        assert_eq!(tr.run_epoch(&mut ()).unwrap().epoch, 3);

        let mut fresh = Trainer::new(ck.config.clone(), &ds, &ds).unwrap();
        fresh.run(&mut ()).unwrap();
        assert_eq!(fresh.history(), tr.history());
        assert_eq!(fresh.model(), tr.model());
    }

    #[test]
    fn restored_model_evaluates_identically() {
        let (ck, ds) = trained(Variant::A);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&ck, dir.path()).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        let mut settings = srwgan_core::evaluation::EvalSettings::new(20, 4);
        settings.classifier.epochs = 5;
        let a = srwgan_core::evaluation::evaluate(&ck.model, &ds, TaskMode::Gzsl, &[], &settings).unwrap();
        let b = srwgan_core::evaluation::evaluate(&back.model, &ds, TaskMode::Gzsl, &[], &settings).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn truncated_params_are_rejected() {
        let (ck, _) = trained(Variant::A);
        let dir = tempfile::tempdir().unwrap();
        let mut m = save_checkpoint(&ck, dir.path()).unwrap();
        let path = dir.path().join(PARAMS);
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 8);
        m.sha256.insert(PARAMS.into(), sha256_hex(&bytes));
        fs::write(&path, bytes).unwrap();
        write_json(&dir.path().join(MANIFEST), &m).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Manifest(_))));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let (ck, _) = trained(Variant::A);
        let dir = tempfile::tempdir().unwrap();
        let mut m = save_checkpoint(&ck, dir.path()).unwrap();
        m.arch.generator_hidden += 1;
        write_json(&dir.path().join(MANIFEST), &m).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Manifest(_))));
    }

    #[test]
    fn corrupt_manifest_is_rejected() {
        let (ck, _) = trained(Variant::A);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&ck, dir.path()).unwrap();
        fs::write(dir.path().join(MANIFEST), "{ not json").unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Json { .. })));
    }
}
