//! Binary weight files.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "MZW1"
//! arch name           (len + utf-8 bytes)
//! num_classes
//! tensor count
//! per tensor: name (len + bytes), rank, dims[rank], f32 LE data
//! ```
//!
//! Normalisation constants travel as the tensors `norm.mean` and `norm.std`.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use super::{Arch, Model};
use crate::codec::Reader;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"MZW1";

const MEAN: &str = "norm.mean";
const STD: &str = "norm.std";
const MAX_NAME: usize = 256;
const MAX_RANK: usize = 8;

pub fn encode_weights(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    put_str(&mut out, model.arch().as_str());
    put_u32(&mut out, model.num_classes());
    put_u32(&mut out, model.params().len() + 2);
    let (mean, std) = model.normalization();
    put_tensor(&mut out, MEAN, &[mean.len()], mean);
    put_tensor(&mut out, STD, &[std.len()], std);
    for (name, t) in model.params() {
        put_tensor(&mut out, name, t.shape(), t.data());
    }
    out
}

pub fn decode_weights(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader::new(bytes, "weights");
    if r.take(4)? != WEIGHTS_MAGIC {
        return Err(Error::format("weights", "bad magic, not a weight file"));
    }
    let arch: Arch = read_name(&mut r)?
        .parse()
        .map_err(|e: Error| Error::format("weights", e.to_string()))?;
    let num_classes = r.u32()?;
    if !(2..=65536).contains(&num_classes) {
        return Err(Error::format("weights", format!("invalid class count {num_classes}")));
    }
    let count = r.u32()?;
    let mut tensors = IndexMap::new();
    for _ in 0..count {
        let name = read_name(&mut r)?;
        let rank = r.u32()?;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::format("weights", format!("{name}: invalid rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::format("weights", format!("{name}: invalid shape {shape:?}")))?;
        let data = r.f32s(n)?;
        let t = Tensor::new(&shape, data)?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::format("weights", format!("duplicate tensor {name}")));
        }
    }
    if r.remaining() != 0 {
        return Err(Error::format("weights", format!("{} trailing bytes", r.remaining())));
    }
    let mean = tensors
        .shift_remove(MEAN)
        .ok_or_else(|| Error::format("weights", "missing norm.mean"))?;
    let std = tensors
        .shift_remove(STD)
        .ok_or_else(|| Error::format("weights", "missing norm.std"))?;
    if mean.rank() != 1 || std.rank() != 1 {
        return Err(Error::format("weights", "normalisation constants must be vectors"));
    }
    Model::from_parts(arch, num_classes, tensors, mean.into_data(), std.into_data())
}

pub fn save_weights(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, encode_weights(model)).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes).map_err(|e| match e {
        Error::Format { message, .. } => Error::format(path.display().to_string(), message),
        other => other,
    })
}

/// Load a weight file into an existing model, requiring the same
/// architecture and class count.
pub fn load_weights_into(model: &mut Model, path: impl AsRef<Path>) -> Result<()> {
    let loaded = load_weights(path)?;
    if loaded.arch() != model.arch() || loaded.num_classes() != model.num_classes() {
        return Err(Error::usage(format!(
            "weight file holds {} with {} classes, model is {} with {} classes",
            loaded.arch(),
            loaded.num_classes(),
            model.arch(),
            model.num_classes()
        )));
    }
    *model = loaded;
    Ok(())
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    put_str(out, name);
    put_u32(out, shape.len());
    for &d in shape {
        put_u32(out, d);
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_name(r: &mut Reader<'_>) -> Result<String> {
    r.string(MAX_NAME)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::build_model;

    #[test]
    fn roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        for arch in Arch::ALL {
            let m = build_model(arch, 10, 7).unwrap();
            let path = dir.path().join(format!("{arch}.mzw"));
            save_weights(&m, &path).unwrap();
            let back = load_weights(&path).unwrap();
            assert_eq!(back, m);
            let x = Tensor::full(&[1, 3, 32, 32], 0.4);
            assert_eq!(m.predict_logits(&x).unwrap(), back.predict_logits(&x).unwrap());
        }
    }

    #[test]
    fn arch_mismatch_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("res.mzw");
        save_weights(&build_model(Arch::MiniRes, 10, 0).unwrap(), &path).unwrap();
        let mut vgg = build_model(Arch::MiniVgg, 10, 0).unwrap();
        assert!(matches!(load_weights_into(&mut vgg, &path), Err(Error::Usage(_))));
        let mut res = build_model(Arch::MiniRes, 10, 1).unwrap();
        load_weights_into(&mut res, &path).unwrap();
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode_weights(&build_model(Arch::MiniVgg, 10, 0).unwrap());
        assert!(decode_weights(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_weights(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(decode_weights(&magic), Err(Error::Format { .. })));
        assert!(decode_weights(&[]).is_err());
    }

    #[test]
    fn huge_declared_shape_does_not_allocate() {
        let mut b = Vec::new();
        b.extend_from_slice(WEIGHTS_MAGIC);
        put_str(&mut b, "mini_vgg");
        put_u32(&mut b, 10);
        put_u32(&mut b, 1);
        put_str(&mut b, "x");
        put_u32(&mut b, 2);
        put_u32(&mut b, u32::MAX as usize);
        put_u32(&mut b, u32::MAX as usize);
        assert!(decode_weights(&b).is_err());
    }
}
