//! Dataset directories.
//!
//! ```text
//! manifest.json
//! features.bin            f32 LE, N x n row-major
//! labels.bin              u32 LE, N
//! attributes.bin          f32 LE, C x d row-major
//! splits/<split>.bin      u32 LE sample indices
//! ```
//!
//! The manifest records the dimensions, the split sizes and the sha256 of
//! every blob. Loading checks all of them.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use srwgan_core::data::{FeatureDataset, Splits};

use crate::blob::{f32_bytes, f32_from, read_checked, read_json, sha256_hex, u32_bytes, u32_from, write_bytes, write_json};
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const SPLIT_NAMES: [&str; 4] = ["train_seen", "test_seen", "train_unseen", "test_unseen"];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train_seen: usize,
    pub test_seen: usize,
    pub train_unseen: usize,
    pub test_unseen: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    /// Feature dimension.
    pub n: usize,
    /// Attribute dimension.
    pub d: usize,
    #[serde(rename = "C")]
    pub classes: usize,
    pub p: usize,
    pub q: usize,
    pub samples: usize,
    pub counts: SplitCounts,
    /// Blob path relative to the dataset directory -> hex digest.
    pub sha256: BTreeMap<String, String>,
}

fn split_path(name: &str) -> String {
    format!("splits/{name}.bin")
}

fn split_of<'a>(s: &'a Splits, name: &str) -> &'a [u32] {
    match name {
        "train_seen" => &s.train_seen,
        "test_seen" => &s.test_seen,
        "train_unseen" => &s.train_unseen,
        _ => &s.test_unseen,
    }
}

fn blobs(ds: &FeatureDataset) -> Vec<(String, Vec<u8>)> {
    let mut out = vec![
        ("features.bin".to_string(), f32_bytes(&ds.features)),
        ("labels.bin".to_string(), u32_bytes(&ds.labels)),
        ("attributes.bin".to_string(), f32_bytes(&ds.attributes)),
    ];
    for name in SPLIT_NAMES {
        out.push((split_path(name), u32_bytes(split_of(&ds.splits, name))));
    }
    out
}

/// Writes `ds` under `dir` and returns the manifest.
pub fn save_dataset(ds: &FeatureDataset, dir: &Path) -> Result<DatasetManifest> {
    ds.validate()?;
    let mut sha256 = BTreeMap::new();
    for (rel, bytes) in blobs(ds) {
        write_bytes(&dir.join(&rel), &bytes)?;
        sha256.insert(rel, sha256_hex(&bytes));
    }
    let s = &ds.splits;
    let manifest = DatasetManifest {
        name: ds.name.clone(),
        n: ds.feature_dim,
        d: ds.attribute_dim,
        classes: ds.num_classes,
        p: ds.seen_classes.len(),
        q: ds.unseen_classes.len(),
        samples: ds.num_samples(),
        counts: SplitCounts {
            train_seen: s.train_seen.len(),
            test_seen: s.test_seen.len(),
            train_unseen: s.train_unseen.len(),
            test_unseen: s.test_unseen.len(),
        },
        sha256,
    };
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

fn expect_len(what: &str, found: usize, expected: usize) -> Result<()> {
    if found != expected {
        return Err(Error::Manifest(format!("{what}: manifest says {expected} values, blob holds {found}")));
    }
    Ok(())
}

/// Loads and fully validates a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<FeatureDataset> {
    let m: DatasetManifest = read_json(&dir.join(MANIFEST))?;
    let blob = |rel: &str| -> Result<Vec<u8>> {
        let digest = m.sha256.get(rel).ok_or_else(|| Error::Manifest(format!("no sha256 for {rel}")))?;
        read_checked(&dir.join(rel), digest)
    };
    let features = f32_from(&blob("features.bin")?, "features.bin")?;
    let labels = u32_from(&blob("labels.bin")?, "labels.bin")?;
    let attributes = f32_from(&blob("attributes.bin")?, "attributes.bin")?;
    expect_len("features.bin", features.len(), m.samples * m.n)?;
    expect_len("labels.bin", labels.len(), m.samples)?;
    expect_len("attributes.bin", attributes.len(), m.classes * m.d)?;

    let mut splits = Splits::default();
    let c = &m.counts;
    for (name, count) in SPLIT_NAMES.iter().zip([c.train_seen, c.test_seen, c.train_unseen, c.test_unseen]) {
        let rel = split_path(name);
        let idx = u32_from(&blob(&rel)?, &rel)?;
        expect_len(&rel, idx.len(), count)?;
        match *name {
            "train_seen" => splits.train_seen = idx,
            "test_seen" => splits.test_seen = idx,
            "train_unseen" => splits.train_unseen = idx,
            _ => splits.test_unseen = idx,
        }
    }
    let (seen_classes, unseen_classes) = FeatureDataset::class_sets_from_splits(&labels, &splits)?;
    if seen_classes.len() != m.p || unseen_classes.len() != m.q {
        return Err(Error::Manifest(format!(
            "manifest declares p={} q={}, splits contain {} seen and {} unseen classes",
            m.p,
            m.q,
            seen_classes.len(),
            unseen_classes.len()
        )));
    }
    let ds = FeatureDataset {
        name: m.name,
        feature_dim: m.n,
        attribute_dim: m.d,
        num_classes: m.classes,
        features,
        labels,
        attributes,
        seen_classes,
        unseen_classes,
        splits,
    };
    ds.validate()?;
    Ok(ds)
}

/// Summary printed by `convert-check`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub name: String,
    pub n: usize,
    pub d: usize,
    #[serde(rename = "C")]
    pub classes: usize,
    pub p: usize,
    pub q: usize,
    pub samples: usize,
    pub counts: SplitCounts,
    /// Samples per class over all splits.
    pub per_class: BTreeMap<u32, usize>,
    pub has_unlabeled_split: bool,
}

pub fn summarize(ds: &FeatureDataset) -> DatasetSummary {
    let mut per_class = BTreeMap::new();
    for &l in &ds.labels {
        *per_class.entry(l).or_insert(0) += 1;
    }
    let s = &ds.splits;
    DatasetSummary {
        name: ds.name.clone(),
        n: ds.feature_dim,
        d: ds.attribute_dim,
        classes: ds.num_classes,
        p: ds.seen_classes.len(),
        q: ds.unseen_classes.len(),
        samples: ds.num_samples(),
        counts: SplitCounts {
            train_seen: s.train_seen.len(),
            test_seen: s.test_seen.len(),
            train_unseen: s.train_unseen.len(),
            test_unseen: s.test_unseen.len(),
        },
        per_class,
        has_unlabeled_split: !s.test_unseen.is_empty(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use srwgan_core::data::{make_synthetic, SyntheticSpec};
    use std::fs;

    fn tiny() -> FeatureDataset {
        make_synthetic(&SyntheticSpec::new(3, 2, 6, 4, 10, 0.1, 11)).unwrap().dataset
    }

    #[test]
    fn save_load_is_bitwise() {
        let ds = tiny();
        let dir = tempfile::tempdir().unwrap();
        let m = save_dataset(&ds, dir.path()).unwrap();
        assert_eq!(m.sha256.len(), 7);
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.features), bits(&ds.features));
    }

    #[test]
    fn corrupted_blob_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&tiny(), dir.path()).unwrap();
        let path = dir.path().join("features.bin");
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] ^= 1;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Checksum { .. })));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = save_dataset(&tiny(), dir.path()).unwrap();
        m.n += 1;
        write_json(&dir.path().join(MANIFEST), &m).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Manifest(_))));
    }

    #[test]
    fn unknown_manifest_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&tiny(), dir.path()).unwrap();
        let path = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&path).unwrap().replacen('{', "{\"extra\": 1,", 1);
        fs::write(&path, text).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Json { .. })));
    }

    #[test]
    fn missing_directory_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(&dir.path().join("nope")), Err(Error::Io { .. })));
    }

    #[test]
    fn summary_counts() {
        let ds = tiny();
        let s = summarize(&ds);
        assert_eq!(s.per_class.values().sum::<usize>(), ds.num_samples());
        assert_eq!((s.p, s.q), (3, 2));
    }
}
