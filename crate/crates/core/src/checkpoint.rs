//! Versioned binary checkpoints.
//!
//! Layout:
//!
//! ```text
//! magic   b"MSTCKPT\0"
//! version u32 LE
//! hlen    u64 LE
//! header  hlen bytes of JSON (CheckpointHeader)
//! body    for each parameter: values, then Adam m, then Adam v (LE floats
//!         of the header's precision); then for each mask: active bitset
//!         words, then ever-active words (u64 LE, LSB first)
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{Precision, RunConfig};
use crate::data::Tokenizer;
use crate::model::{ModelConfig, ModelError, ModelState};
use crate::rng::RngState;
use crate::tensor::{Moments, Scalar};
use crate::topology::LayerMask;

pub const MAGIC: &[u8; 8] = b"MSTCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access checkpoint {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0} is not a checkpoint")]
    Magic(PathBuf),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint holds {found} values, expected {expected}")]
    Precision { found: Precision, expected: Precision },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Trainer state carried alongside the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    /// Number of completed optimizer steps.
    pub step: u64,
    pub run: RunConfig,
    pub tokenizer: Tokenizer,
    pub data_rng: RngState,
    pub topology_rng: RngState,
    pub cum_flops: f64,
    /// Training-loss sum and count since the last metrics row.
    pub loss_sum: f64,
    pub loss_count: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    mask: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    precision: Precision,
    model: ModelConfig,
    meta: TrainingMeta,
    params: Vec<TensorEntry>,
    masks: Vec<(usize, usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub meta: TrainingMeta,
    pub state: ModelState<T>,
}

/// A checkpoint of either precision.
#[derive(Debug, Clone)]
pub enum AnyCheckpoint {
    F32(Checkpoint<f32>),
    F64(Checkpoint<f64>),
}

impl AnyCheckpoint {
    pub fn meta(&self) -> &TrainingMeta {
        match self {
            AnyCheckpoint::F32(c) => &c.meta,
            AnyCheckpoint::F64(c) => &c.meta,
        }
    }
}

fn precision_of<T: Scalar>() -> Precision {
    if T::BYTES == 4 {
        Precision::F32
    } else {
        Precision::F64
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.to_path_buf(), source }
}

pub fn encode<T: Scalar>(meta: &TrainingMeta, state: &ModelState<T>) -> Vec<u8> {
    let header = CheckpointHeader {
        precision: precision_of::<T>(),
        model: state.config,
        meta: meta.clone(),
        params: state
            .params
            .iter()
            .map(|p| TensorEntry { name: p.name.clone(), rows: p.rows, cols: p.cols, mask: p.mask })
            .collect(),
        masks: state.masks.iter().map(|m| (m.layer(), m.rows(), m.cols())).collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (p, mom) in state.params.iter().zip(&state.moments) {
        for vals in [&p.data, &mom.m, &mom.v] {
            for &x in vals.iter() {
                x.write_le(&mut out);
            }
        }
    }
    for m in &state.masks {
        let (bits, ever) = m.to_words();
        for w in bits.iter().chain(&ever) {
            out.extend_from_slice(&w.to_le_bytes());
        }
    }
    out
}

/// Writes to a temporary sibling and renames, so an interrupted save never
/// clobbers the previous checkpoint.
pub fn save<T: Scalar>(path: &Path, meta: &TrainingMeta, state: &ModelState<T>) -> Result<(), CheckpointError> {
    let bytes = encode(meta, state);
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(&bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CheckpointError::Corrupt("truncated body".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn floats<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>, CheckpointError> {
        let raw = self.take(n * T::BYTES)?;
        Ok(raw.chunks_exact(T::BYTES).map(T::read_le).collect())
    }

    fn words(&mut self, n: usize) -> Result<Vec<u64>, CheckpointError> {
        let raw = self.take(n * 8)?;
        Ok(raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

fn decode_body<T: Scalar>(header: CheckpointHeader, body: &[u8]) -> Result<Checkpoint<T>, CheckpointError> {
    let mut cur = Cursor { bytes: body, pos: 0 };
    let mut datas = Vec::with_capacity(header.params.len());
    let mut moments = Vec::with_capacity(header.params.len());
    for e in &header.params {
        let n = e.rows * e.cols;
        datas.push(cur.floats::<T>(n)?);
        let m = cur.floats::<T>(n)?;
        let v = cur.floats::<T>(n)?;
        moments.push(Moments { m, v });
    }
    let mut masks = Vec::with_capacity(header.masks.len());
    for &(layer, rows, cols) in &header.masks {
        let words = (rows * cols).div_ceil(64);
        let bits = cur.words(words)?;
        let ever = cur.words(words)?;
        let mask = LayerMask::from_words(layer, rows, cols, bits, ever)
            .ok_or_else(|| CheckpointError::Corrupt(format!("mask {layer}")))?;
        masks.push(mask);
    }
    if cur.pos != body.len() {
        return Err(CheckpointError::Corrupt(format!("{} trailing bytes", body.len() - cur.pos)));
    }
    let state = ModelState::from_parts(header.model, datas, masks, moments)?;
    for (p, e) in state.params.iter().zip(&header.params) {
        if p.name != e.name || p.mask != e.mask {
            return Err(CheckpointError::Corrupt(format!("parameter `{}` out of order", e.name)));
        }
    }
    Ok(Checkpoint { meta: header.meta, state })
}

fn parse_header<'a>(bytes: &'a [u8], origin: &Path) -> Result<(CheckpointHeader, &'a [u8]), CheckpointError> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::Magic(origin.to_path_buf()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let body_start = usize::try_from(hlen)
        .ok()
        .and_then(|h| h.checked_add(20))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| CheckpointError::Corrupt("header length".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[20..body_start]).map_err(|e| CheckpointError::Corrupt(format!("header: {e}")))?;
    Ok((header, &bytes[body_start..]))
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<AnyCheckpoint, CheckpointError> {
    let (header, body) = parse_header(bytes, origin)?;
    Ok(match header.precision {
        Precision::F32 => AnyCheckpoint::F32(decode_body(header, body)?),
        Precision::F64 => AnyCheckpoint::F64(decode_body(header, body)?),
    })
}

pub fn load(path: &Path) -> Result<AnyCheckpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode(&bytes, path)
}

/// Loads a checkpoint that must hold `T` values.
pub fn load_as<T: Scalar>(path: &Path) -> Result<Checkpoint<T>, CheckpointError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (header, body) = parse_header(&bytes, path)?;
    let expected = precision_of::<T>();
    if header.precision != expected {
        return Err(CheckpointError::Precision { found: header.precision, expected });
    }
    decode_body(header, body)
}
