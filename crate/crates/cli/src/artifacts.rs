//! Adversarial image dumps and per-iteration trajectory tables.
//!
//! Tensor file layout, little-endian:
//!
//! ```text
//! "TNS1"
//! rank (u32), dims[rank] (u32)
//! f32 data
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use transfer_lab::attack::AttackResult;
use transfer_lab::eval::Sample;
use transfer_lab::losses::LossKind;
use transfer_lab::{Error, Tensor};

use crate::error::Result;

pub const TENSOR_MAGIC: &[u8; 4] = b"TNS1";
pub const TRAJECTORY_HEADER: &str = "loss,index,iteration,value,grad_l1,target_logit,target_prob,target_rank,zero_grad";
pub const SAMPLES_HEADER: &str = "index,original,target";

const MAX_RANK: usize = 8;

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * (t.rank() + t.len()));
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn bad(message: impl Into<String>) -> Error {
    Error::Format {
        context: "tensor".into(),
        message: message.into(),
    }
}

pub fn decode_tensor(bytes: &[u8]) -> std::result::Result<Tensor, Error> {
    let mut words = bytes.get(4..).unwrap_or_default().chunks_exact(4);
    if bytes.get(..4) != Some(TENSOR_MAGIC.as_slice()) {
        return Err(bad("bad magic, not a tensor file"));
    }
    let mut next = || {
        words
            .next()
            .map(|w| [w[0], w[1], w[2], w[3]])
            .ok_or_else(|| bad("truncated"))
    };
    let rank = u32::from_le_bytes(next()?) as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(bad(format!("invalid rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u32::from_le_bytes(next()?) as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| bad(format!("shape {shape:?} overflows")))?;
    let body = bytes.len() - 4 * (2 + rank);
    if n.checked_mul(4) != Some(body) {
        return Err(bad(format!(
            "shape {shape:?} needs {n} values, file holds {body} bytes"
        )));
    }
    let data: Vec<f32> = bytes[4 * (2 + rank)..]
        .chunks_exact(4)
        .map(|w| f32::from_le_bytes([w[0], w[1], w[2], w[3]]))
        .collect();
    Tensor::new(&shape, data)
}

pub fn save_tensor(t: &Tensor, path: &Path) -> Result<()> {
    write_bytes(path, &encode_tensor(t))
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(decode_tensor(&bytes)?)
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, bytes).map_err(|e| {
        Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

/// One row per (image, iteration) of every run.
pub fn trajectory_csv(runs: &[(LossKind, &[Sample], &[AttackResult])]) -> String {
    let mut s = String::from(TRAJECTORY_HEADER);
    s.push('\n');
    for (loss, samples, results) in runs {
        for (sample, result) in samples.iter().zip(*results) {
            for (i, r) in result.trajectory.iter().enumerate() {
                writeln!(
                    s,
                    "{loss},{},{},{:.6e},{:.6e},{:.6},{:.6},{},{}",
                    sample.index,
                    i + 1,
                    r.loss,
                    r.grad_l1,
                    r.target_logit,
                    r.target_prob,
                    r.target_rank,
                    r.zero_grad as u8
                )
                .expect("writing to a string");
            }
        }
    }
    s
}

pub fn samples_csv(samples: &[Sample]) -> String {
    let mut s = String::from(SAMPLES_HEADER);
    s.push('\n');
    for x in samples {
        writeln!(s, "{},{},{}", x.index, x.original, x.target).expect("writing to a string");
    }
    s
}
