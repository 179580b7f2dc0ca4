//! Checkpoint container: named f32 blobs plus a JSON manifest.
//!
//! Layout on disk: an ASCII magic line, a little-endian `u64` manifest
//! length, the JSON manifest, then the raw blob data (f32 little-endian)
//! in manifest order. The manifest records every blob's name and shape,
//! the training epoch, an opaque config document, named scalars
//! (optimizer step counters and the like), and an FNV-1a checksum of the
//! data section so silent corruption is caught at load time.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::ArrayD;

use crate::error::{Error, Result};

const MAGIC: &[u8] = b"petsgan-ckpt-1\n";
const MAX_MANIFEST: u64 = 64 << 20;

/// In-memory checkpoint: everything needed to rebuild a training run.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub epoch: u64,
    /// Opaque run configuration (the trainer knows its schema).
    pub config: serde_json::Value,
    /// Small named numbers (optimizer step counts, schedule state, ...).
    pub scalars: BTreeMap<String, f64>,
    /// Named tensors: parameters, optimizer moments, stored images.
    pub blobs: BTreeMap<String, ArrayD<f32>>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct BlobEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Manifest {
    epoch: u64,
    config: serde_json::Value,
    scalars: BTreeMap<String, f64>,
    blobs: Vec<BlobEntry>,
    data_fnv1a: String,
}

fn fnv1a64(bytes: &[u8], mut hash: u64) -> u64 {
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100_0000_01b3);
    }
    hash
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

/// Order-sensitive fingerprint of a named parameter set: names, shapes
/// and exact f32 bit patterns all contribute. Two parameter sets hash
/// equal iff they are bit-identical in the same order.
pub fn param_fingerprint(refs: &[(String, &ArrayD<f32>)]) -> u64 {
    let mut h = FNV_OFFSET;
    for (name, arr) in refs {
        h = fnv1a64(name.as_bytes(), h);
        for &d in arr.shape() {
            h = fnv1a64(&(d as u64).to_le_bytes(), h);
        }
        for v in arr.iter() {
            h = fnv1a64(&v.to_le_bytes(), h);
        }
    }
    h
}

pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut data = Vec::new();
    let mut entries = Vec::with_capacity(ckpt.blobs.len());
    for (name, arr) in &ckpt.blobs {
        entries.push(BlobEntry {
            name: name.clone(),
            shape: arr.shape().to_vec(),
        });
        for v in arr.iter() {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        epoch: ckpt.epoch,
        config: ckpt.config.clone(),
        scalars: ckpt.scalars.clone(),
        blobs: entries,
        data_fnv1a: format!("{:016x}", fnv1a64(&data, FNV_OFFSET)),
    };
    let mjson = serde_json::to_vec(&manifest)
        .map_err(|e| Error::InvalidArgument(format!("unserializable manifest: {e}")))?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_u64::<LittleEndian>(mjson.len() as u64).map_err(io)?;
    w.write_all(&mjson).map_err(io)?;
    w.write_all(&data).map_err(io)?;
    w.flush().map_err(io)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = vec![0u8; MAGIC.len()];
    r.read_exact(&mut magic)
        .map_err(|_| Error::CorruptCheckpoint("file shorter than the magic header".into()))?;
    if magic != MAGIC {
        return Err(Error::CheckpointVersion {
            found: String::from_utf8_lossy(&magic).trim_end().to_string(),
            expected: String::from_utf8_lossy(MAGIC).trim_end().to_string(),
        });
    }
    let mlen = r
        .read_u64::<LittleEndian>()
        .map_err(|_| Error::CorruptCheckpoint("missing manifest length".into()))?;
    if mlen == 0 || mlen > MAX_MANIFEST {
        return Err(Error::CorruptCheckpoint(format!(
            "implausible manifest length {mlen}"
        )));
    }
    let mut mjson = vec![0u8; mlen as usize];
    r.read_exact(&mut mjson)
        .map_err(|_| Error::CorruptCheckpoint("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(&mjson)
        .map_err(|e| Error::CorruptCheckpoint(format!("manifest is not valid JSON: {e}")))?;

    let total: usize = manifest
        .blobs
        .iter()
        .map(|b| b.shape.iter().product::<usize>())
        .sum();
    let mut data = vec![0u8; total * 4];
    r.read_exact(&mut data)
        .map_err(|_| Error::CorruptCheckpoint("truncated blob data".into()))?;
    let mut trailing = [0u8; 1];
    match r.read(&mut trailing) {
        Ok(0) => {}
        Ok(_) => return Err(Error::CorruptCheckpoint("trailing bytes after blob data".into())),
        Err(e) => return Err(Error::io(path, e)),
    }
    let sum = format!("{:016x}", fnv1a64(&data, FNV_OFFSET));
    if sum != manifest.data_fnv1a {
        return Err(Error::CorruptCheckpoint(format!(
            "data checksum mismatch: stored {}, computed {sum}",
            manifest.data_fnv1a
        )));
    }

    let mut blobs = BTreeMap::new();
    let mut off = 0usize;
    for entry in &manifest.blobs {
        let n: usize = entry.shape.iter().product();
        let mut vals = Vec::with_capacity(n);
        for i in 0..n {
            let b = &data[(off + i) * 4..(off + i) * 4 + 4];
            let v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            if !v.is_finite() {
                return Err(Error::CorruptCheckpoint(format!(
                    "non-finite value in blob {:?}",
                    entry.name
                )));
            }
            vals.push(v);
        }
        off += n;
        let arr = ArrayD::from_shape_vec(ndarray::IxDyn(&entry.shape), vals)
            .map_err(|e| Error::CorruptCheckpoint(format!("blob {:?}: {e}", entry.name)))?;
        if blobs.insert(entry.name.clone(), arr).is_some() {
            return Err(Error::CorruptCheckpoint(format!(
                "duplicate blob name {:?}",
                entry.name
            )));
        }
    }
    Ok(Checkpoint {
        epoch: manifest.epoch,
        config: manifest.config,
        scalars: manifest.scalars,
        blobs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use ndarray::IxDyn;

    fn sample_checkpoint() -> Checkpoint {
        let mut rng = Rng::new(61, "ckpt-test");
        let mut blobs = BTreeMap::new();
        for (name, shape) in [
            ("param/g.w", vec![4usize, 3, 3, 3]),
            ("param/g.b", vec![4]),
            ("adam/g/m/0", vec![4, 3, 3, 3]),
            ("image/low", vec![3, 8, 8]),
        ] {
            let n: usize = shape.iter().product();
            let vals: Vec<f32> = (0..n).map(|_| rng.normal_f32()).collect();
            blobs.insert(name.to_string(), ArrayD::from_shape_vec(IxDyn(&shape), vals).unwrap());
        }
        let mut scalars = BTreeMap::new();
        scalars.insert("adam/g/t".to_string(), 17.0);
        Checkpoint {
            epoch: 42,
            config: serde_json::json!({"epochs": 100, "seed": 7}),
            scalars,
            blobs,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pkc");
        let ckpt = sample_checkpoint();
        save(&ckpt, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.epoch, ckpt.epoch);
        assert_eq!(back.config, ckpt.config);
        assert_eq!(back.scalars, ckpt.scalars);
        assert_eq!(back.blobs.len(), ckpt.blobs.len());
        for (name, arr) in &ckpt.blobs {
            let b = &back.blobs[name];
            assert_eq!(b.shape(), arr.shape());
            for (x, y) in arr.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "bit drift in {name}");
            }
        }
    }

    #[test]
    fn wrong_magic_is_a_version_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("old.pkc");
        std::fs::write(&path, b"petsgan-ckpt-0\nxxxxxxxxxxxxxxxx").unwrap();
        match load(&path) {
            Err(Error::CheckpointVersion { found, expected }) => {
                assert_eq!(found, "petsgan-ckpt-0");
                assert_eq!(expected, "petsgan-ckpt-1");
            }
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn truncation_and_bit_flips_are_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pkc");
        save(&sample_checkpoint(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let cut = dir.path().join("cut.pkc");
        std::fs::write(&cut, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(load(&cut), Err(Error::CorruptCheckpoint(_))));

        let mut flipped = bytes.clone();
        let last = flipped.len() - 2;
        flipped[last] ^= 0x40;
        let bad = dir.path().join("bad.pkc");
        std::fs::write(&bad, &flipped).unwrap();
        assert!(matches!(load(&bad), Err(Error::CorruptCheckpoint(_))));

        let long = dir.path().join("long.pkc");
        let mut extended = bytes;
        extended.push(0);
        std::fs::write(&long, &extended).unwrap();
        assert!(matches!(load(&long), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn fingerprint_tracks_content_and_order() {
        let a = ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let b = ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![1.0f32, 2.0, 3.0, 5.0]).unwrap();
        let fp = |pairs: &[(&str, &ArrayD<f32>)]| {
            let owned: Vec<(String, &ArrayD<f32>)> =
                pairs.iter().map(|(n, p)| (n.to_string(), *p)).collect();
            param_fingerprint(&owned)
        };
        let h1 = fp(&[("x", &a), ("y", &b)]);
        let h2 = fp(&[("x", &a), ("y", &b)]);
        assert_eq!(h1, h2, "deterministic");
        assert_ne!(h1, fp(&[("x", &b), ("y", &a)]), "content sensitive");
        assert_ne!(h1, fp(&[("y", &a), ("x", &b)]), "order/name sensitive");
    }
}
