//! Little-endian blobs, checksums and JSON files.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{io_err, json_err, Error, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn f32_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub fn u32_bytes(v: &[u32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub fn f64_bytes(v: &[f64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn chunks<'a, const N: usize>(bytes: &'a [u8], what: &str) -> Result<impl Iterator<Item = [u8; N]> + 'a> {
    if bytes.len() % N != 0 {
        return Err(Error::Manifest(format!("{what}: {} bytes is not a multiple of {N}", bytes.len())));
    }
    Ok(bytes.chunks_exact(N).map(|c| c.try_into().expect("exact chunk")))
}

pub fn f32_from(bytes: &[u8], what: &str) -> Result<Vec<f32>> {
    Ok(chunks::<4>(bytes, what)?.map(f32::from_le_bytes).collect())
}

pub fn u32_from(bytes: &[u8], what: &str) -> Result<Vec<u32>> {
    Ok(chunks::<4>(bytes, what)?.map(u32::from_le_bytes).collect())
}

pub fn f64_from(bytes: &[u8], what: &str) -> Result<Vec<f64>> {
    Ok(chunks::<8>(bytes, what)?.map(f64::from_le_bytes).collect())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(io_err(path))
}

/// Reads a blob and checks it against the expected hex digest.
pub fn read_checked(path: &Path, expected: &str) -> Result<Vec<u8>> {
    let bytes = read_bytes(path)?;
    let found = sha256_hex(&bytes);
    if !found.eq_ignore_ascii_case(expected) {
        return Err(Error::Checksum { path: path.to_path_buf(), expected: expected.into(), found });
    }
    Ok(bytes)
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable value");
    s.push('\n');
    s
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_bytes(path, to_json(value).as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(json_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_are_bitwise() {
        let f = [0.0f32, -0.0, 1.5, f32::MIN_POSITIVE, f32::NAN];
        let back = f32_from(&f32_bytes(&f), "f").unwrap();
        assert!(f.iter().zip(&back).all(|(a, b)| a.to_bits() == b.to_bits()));
        let d = [1e-300, -2.5, f64::INFINITY];
        assert_eq!(f64_from(&f64_bytes(&d), "d").unwrap(), d);
        assert_eq!(u32_from(&u32_bytes(&[7, u32::MAX]), "u").unwrap(), [7, u32::MAX]);
    }

    #[test]
    fn ragged_blob_is_rejected() {
        assert!(f32_from(&[0, 0, 0], "f").is_err());
        assert!(f64_from(&[0; 12], "d").is_err());
    }

    #[test]
    fn known_digest() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
