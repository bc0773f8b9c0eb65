//! Versioned binary checkpoints.
//!
//! Layout (little-endian):
//! `b"SFDACKPT"`, `u32` format version, `u8` kind, `u32` + JSON architecture
//! config, `u8` frozen flag, `u32` tensor count, then per tensor: `u16` + UTF-8
//! name, `u8` rank, `u32` per dimension, `f32` values.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};

use super::{ClassifierConfig, Generator, GeneratorConfig, SourceClassifier};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SFDACKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
enum Kind {
    Classifier = 1,
    Generator = 2,
}

struct Decoded {
    config_json: String,
    frozen: bool,
    tensors: BTreeMap<String, ArrayD<f32>>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn encode(
    kind: Kind,
    config_json: &str,
    frozen: bool,
    tensors: Vec<(String, std::borrow::Cow<'_, ArrayD<f32>>)>,
) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.write_u32::<LittleEndian>(FORMAT_VERSION).unwrap();
    buf.write_u8(kind as u8).unwrap();
    buf.write_u32::<LittleEndian>(config_json.len() as u32)
        .unwrap();
    buf.extend_from_slice(config_json.as_bytes());
    buf.write_u8(frozen as u8).unwrap();
    buf.write_u32::<LittleEndian>(tensors.len() as u32).unwrap();
    for (name, t) in tensors {
        buf.write_u16::<LittleEndian>(name.len() as u16).unwrap();
        buf.extend_from_slice(name.as_bytes());
        buf.write_u8(t.ndim() as u8).unwrap();
        for &d in t.shape() {
            buf.write_u32::<LittleEndian>(d as u32).unwrap();
        }
        for &v in t.iter() {
            buf.write_f32::<LittleEndian>(v).unwrap();
        }
    }
    buf
}

fn decode(bytes: &[u8], expected: Kind) -> Result<Decoded> {
    let mut r = Cursor::new(bytes);
    let io = |e: std::io::Error| bad(format!("truncated checkpoint: {e}"));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io)?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let kind = r.read_u8().map_err(io)?;
    if kind != expected as u8 {
        return Err(bad(format!(
            "checkpoint holds kind {kind}, expected {expected:?}"
        )));
    }
    let n = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let mut cfg = vec![0u8; n];
    r.read_exact(&mut cfg).map_err(io)?;
    let config_json = String::from_utf8(cfg).map_err(|_| bad("config is not UTF-8"))?;
    let frozen = r.read_u8().map_err(io)? != 0;
    let count = r.read_u32::<LittleEndian>().map_err(io)?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let len = r.read_u16::<LittleEndian>().map_err(io)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
        let rank = r.read_u8().map_err(io)? as usize;
        let shape = (0..rank)
            .map(|_| r.read_u32::<LittleEndian>().map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(io)?;
        let numel: usize = shape.iter().product();
        if numel > bytes.len() {
            return Err(bad(format!("tensor {name} claims {numel} values")));
        }
        let mut data = vec![0f32; numel];
        r.read_f32_into::<LittleEndian>(&mut data).map_err(io)?;
        let t = ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|e| bad(e.to_string()))?;
        tensors.insert(name, t);
    }
    if (r.position() as usize) != bytes.len() {
        return Err(bad("trailing bytes after last tensor"));
    }
    Ok(Decoded {
        config_json,
        frozen,
        tensors,
    })
}

/// Moves decoded tensors into `slots`, checking names and shapes against the architecture.
fn restore(
    mut tensors: BTreeMap<String, ArrayD<f32>>,
    slots: Vec<(String, &mut ArrayD<f32>)>,
) -> Result<()> {
    for (name, slot) in slots {
        let t = tensors
            .remove(&name)
            .ok_or_else(|| bad(format!("missing tensor {name}")))?;
        if t.shape() != slot.shape() {
            return Err(bad(format!(
                "tensor {name} has shape {:?} but the architecture expects {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(bad(format!("unexpected tensor {extra}")));
    }
    Ok(())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<String> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_hash(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(read(path)?)))
}

fn classifier_tensors(model: &SourceClassifier<f32>) -> Vec<(String, Cow<'_, ArrayD<f32>>)> {
    let mut out: Vec<_> = model
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, Cow::Borrowed(t)))
        .collect();
    for (i, bn) in model.batch_norms().iter().enumerate() {
        out.push((
            format!("bn{i}.running_mean"),
            Cow::Owned(bn.running_mean.clone().into_dyn()),
        ));
        out.push((
            format!("bn{i}.running_var"),
            Cow::Owned(bn.running_var.clone().into_dyn()),
        ));
    }
    out
}

pub fn classifier_to_bytes(model: &SourceClassifier<f32>) -> Vec<u8> {
    let cfg = serde_json::to_string(model.config()).expect("config serializes");
    encode(
        Kind::Classifier,
        &cfg,
        model.is_frozen(),
        classifier_tensors(model),
    )
}

pub fn classifier_from_bytes(bytes: &[u8]) -> Result<SourceClassifier<f32>> {
    let d = decode(bytes, Kind::Classifier)?;
    let config: ClassifierConfig =
        serde_json::from_str(&d.config_json).map_err(|e| bad(format!("bad config: {e}")))?;
    let mut model = SourceClassifier::new(config, 0)?;
    let mut stats: Vec<(ArrayD<f32>, ArrayD<f32>)> = model
        .batch_norms()
        .iter()
        .map(|bn| {
            (
                bn.running_mean.clone().into_dyn(),
                bn.running_var.clone().into_dyn(),
            )
        })
        .collect();
    {
        let mut slots = model.named_tensors_mut();
        for (i, (m, v)) in stats.iter_mut().enumerate() {
            slots.push((format!("bn{i}.running_mean"), m));
            slots.push((format!("bn{i}.running_var"), v));
        }
        restore(d.tensors, slots)?;
    }
    for (bn, (m, v)) in model.batch_norms_mut()?.iter_mut().zip(stats) {
        bn.running_mean = m.into_dimensionality().map_err(|e| bad(e.to_string()))?;
        bn.running_var = v.into_dimensionality().map_err(|e| bad(e.to_string()))?;
    }
    model.set_frozen(d.frozen);
    Ok(model)
}

pub fn save_classifier(model: &SourceClassifier<f32>, path: &Path) -> Result<String> {
    write_atomic(path, &classifier_to_bytes(model))
}

pub fn load_classifier(path: &Path) -> Result<SourceClassifier<f32>> {
    classifier_from_bytes(&read(path)?).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn generator_to_bytes(g: &Generator<f32>) -> Vec<u8> {
    let cfg = serde_json::to_string(g.config()).expect("config serializes");
    let tensors = g
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, Cow::Borrowed(t)))
        .collect();
    encode(Kind::Generator, &cfg, false, tensors)
}

pub fn generator_from_bytes(bytes: &[u8]) -> Result<Generator<f32>> {
    let d = decode(bytes, Kind::Generator)?;
    let config: GeneratorConfig =
        serde_json::from_str(&d.config_json).map_err(|e| bad(format!("bad config: {e}")))?;
    let mut g = Generator::new(config, 0)?;
    restore(d.tensors, g.named_tensors_mut())?;
    Ok(g)
}

pub fn save_generator(g: &Generator<f32>, path: &Path) -> Result<String> {
    write_atomic(path, &generator_to_bytes(g))
}

pub fn load_generator(path: &Path) -> Result<Generator<f32>> {
    generator_from_bytes(&read(path)?).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ClassifierConfig {
        ClassifierConfig {
            widths: [4, 6, 8],
            kernel: 3,
            image_size: 8,
            ..ClassifierConfig::default()
        }
    }

    #[test]
    fn classifier_round_trip_preserves_state() {
        let mut m = SourceClassifier::<f32>::new(tiny(), 5).unwrap();
        m.batch_norms_mut().unwrap()[1].running_mean.fill(0.25);
        m.freeze();
        let back = classifier_from_bytes(&classifier_to_bytes(&m)).unwrap();
        assert_eq!(back.state_hash(), m.state_hash());
        assert!(back.is_frozen());
        assert_eq!(back.config(), m.config());
    }

    #[test]
    fn generator_round_trip() {
        let g = Generator::<f32>::new(GeneratorConfig::small(), 3).unwrap();
        let back = generator_from_bytes(&generator_to_bytes(&g)).unwrap();
        assert_eq!(generator_to_bytes(&back), generator_to_bytes(&g));
    }

    #[test]
    fn rejects_mismatched_channel_counts() {
        let m = SourceClassifier::<f32>::new(tiny(), 5).unwrap();
        let mut bytes = classifier_to_bytes(&m);
        // Rewrite the config so widths no longer match the stored tensors.
        let cfg = serde_json::to_string(m.config()).unwrap();
        let patched = cfg.replace("[4,6,8]", "[4,7,8]");
        assert_eq!(cfg.len(), patched.len());
        let at = bytes
            .windows(cfg.len())
            .position(|w| w == cfg.as_bytes())
            .unwrap();
        bytes[at..at + cfg.len()].copy_from_slice(patched.as_bytes());
        let err = classifier_from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("shape"), "{err}");
    }

    #[test]
    fn rejects_wrong_kind_and_garbage() {
        let g = Generator::<f32>::new(GeneratorConfig::small(), 3).unwrap();
        assert!(classifier_from_bytes(&generator_to_bytes(&g)).is_err());
        assert!(classifier_from_bytes(b"not a checkpoint").is_err());
        let m = SourceClassifier::<f32>::new(tiny(), 5).unwrap();
        let bytes = classifier_to_bytes(&m);
        assert!(classifier_from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
