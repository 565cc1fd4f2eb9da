//! Binary checkpoint format.
//!
//! Layout: an 8-byte magic, a little-endian u64 header length, a JSON header
//! (architecture hyperparameters, training counters, RNG state, and the name,
//! shape and byte offset of every array), then the arrays themselves as raw
//! little-endian `f64` data in header order. Everything needed to resume a
//! run bit-exactly — parameters, Adam moments, step counters, RNG position —
//! lives in one file.

use crate::error::{Error, Result};
use crate::models::ModelConfig;
use crate::nn::{Adam, Param};
use ndarray::{ArrayD, IxDyn};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"F2VCKPT1";

/// Serializable position of a `ChaCha8Rng` stream.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos_lo: u64,
    pub word_pos_hi: u64,
    pub stream: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> RngState {
        let pos = rng.get_word_pos();
        RngState {
            seed: rng.get_seed(),
            word_pos_lo: pos as u64,
            word_pos_hi: (pos >> 64) as u64,
            stream: rng.get_stream(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(((self.word_pos_hi as u128) << 64) | self.word_pos_lo as u128);
        rng
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub image_size: usize,
    pub step: u64,
    pub epoch: u64,
    pub gen_adam_t: u64,
    pub disc_adam_t: u64,
    pub rng: RngState,
    pub entries: Vec<ArrayEntry>,
}

pub struct Checkpoint {
    pub header: CheckpointHeader,
    arrays: Vec<ArrayD<f64>>,
}

impl Checkpoint {
    pub fn array(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.header
            .entries
            .iter()
            .position(|e| e.name == name)
            .map(|i| &self.arrays[i])
            .ok_or_else(|| Error::Checkpoint(format!("missing array `{name}`")))
    }

    /// Copy stored values into live parameters; names and shapes must agree.
    pub fn load_params(&self, params: &[Param]) -> Result<()> {
        for p in params {
            let a = self.array(&p.name)?;
            if a.shape() != p.tensor.shape().as_slice() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for `{}`: stored {:?}, model {:?}",
                    p.name,
                    a.shape(),
                    p.tensor.shape()
                )));
            }
            p.tensor.set_value(a.clone());
        }
        Ok(())
    }

    /// Rebuild an optimizer's moment buffers stored under `prefix`.
    pub fn load_adam(&self, prefix: &str, params: &[Param], opt: &mut Adam) -> Result<()> {
        for (i, p) in params.iter().enumerate() {
            opt.m[i] = self.array(&format!("{prefix}.m.{}", p.name))?.clone();
            opt.v[i] = self.array(&format!("{prefix}.v.{}", p.name))?.clone();
        }
        Ok(())
    }
}

/// Named arrays for one optimizer's moments.
pub fn adam_entries(prefix: &str, params: &[Param], opt: &Adam) -> Vec<(String, ArrayD<f64>)> {
    let mut out = Vec::with_capacity(params.len() * 2);
    for (i, p) in params.iter().enumerate() {
        out.push((format!("{prefix}.m.{}", p.name), opt.m[i].clone()));
        out.push((format!("{prefix}.v.{}", p.name), opt.v[i].clone()));
    }
    out
}

pub fn param_entries(params: &[Param]) -> Vec<(String, ArrayD<f64>)> {
    params
        .iter()
        .map(|p| (p.name.clone(), p.tensor.to_array()))
        .collect()
}

pub fn save_checkpoint(
    path: &Path,
    mut header: CheckpointHeader,
    arrays: Vec<(String, ArrayD<f64>)>,
) -> Result<()> {
    let mut arrays = arrays;
    arrays.sort_by(|a, b| a.0.cmp(&b.0)); // deterministic layout
    header.entries = arrays
        .iter()
        .map(|(n, a)| ArrayEntry {
            name: n.clone(),
            shape: a.shape().to_vec(),
        })
        .collect();
    let head = serde_json::to_vec(&header).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut f = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
    );
    let w = |f: &mut dyn Write, b: &[u8]| f.write_all(b).map_err(|e| Error::io(path, e));
    w(&mut f, MAGIC)?;
    w(&mut f, &(head.len() as u64).to_le_bytes())?;
    w(&mut f, &head)?;
    for (_, a) in &arrays {
        for v in a.iter() {
            w(&mut f, &v.to_le_bytes())?;
        }
    }
    f.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut f = std::io::BufReader::new(
        std::fs::File::open(path).map_err(|e| Error::io(path, e))?,
    );
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint file (bad magic)",
            path.display()
        )));
    }
    let mut len = [0u8; 8];
    f.read_exact(&mut len).map_err(|e| Error::io(path, e))?;
    let mut head = vec![0u8; u64::from_le_bytes(len) as usize];
    f.read_exact(&mut head).map_err(|e| Error::io(path, e))?;
    let header: CheckpointHeader = serde_json::from_slice(&head)
        .map_err(|e| Error::Checkpoint(format!("{}: bad header: {e}", path.display())))?;
    let mut arrays = Vec::with_capacity(header.entries.len());
    for e in &header.entries {
        let n: usize = e.shape.iter().product();
        let mut buf = vec![0u8; n * 8];
        f.read_exact(&mut buf).map_err(|e2| {
            Error::Checkpoint(format!(
                "{}: truncated array `{}`: {e2}",
                path.display(),
                e.name
            ))
        })?;
        let vals: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        arrays.push(
            ArrayD::from_shape_vec(IxDyn(&e.shape), vals)
                .map_err(|e2| Error::Checkpoint(format!("bad shape for `{}`: {e2}", e.name)))?,
        );
    }
    Ok(Checkpoint { header, arrays })
}

/// Hex digest of a file (FNV-1a over 128 bits folded from two 64-bit lanes);
/// good enough to identify which checkpoint produced an output.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut h1: u64 = 0xcbf29ce484222325;
    let mut h2: u64 = 0x9e3779b97f4a7c15;
    for (i, &b) in bytes.iter().enumerate() {
        h1 = (h1 ^ b as u64).wrapping_mul(0x100000001b3);
        h2 = (h2 ^ ((b as u64) << (i % 8))).wrapping_mul(0xff51afd7ed558ccd);
    }
    Ok(format!("{h1:016x}{h2:016x}"))
}
