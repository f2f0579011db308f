//! Binary checkpoint format.
//!
//! ```text
//! "ETB1"  u32 version  u32 header_len  header (UTF-8 JSON)
//! per tensor: u32 name_len, name, u32 rank, u64 dims[rank], f32 LE values
//! ```
//!
//! Model parameters come first in layout order. Checkpoints written during
//! training append the optimizer moments as `adam.m.*` and `adam.v.*`.

use std::io::{self, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::optim::AdamW;
use super::TrainState;
use crate::model::{Encoder, HeadConfig, ModelConfig};

pub const MAGIC: &[u8; 4] = b"ETB1";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {0} is not supported")]
    VersionUnsupported(u32),
    #[error("checkpoint shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    head: Option<HeadConfig>,
    #[serde(default)]
    labels: Vec<String>,
    #[serde(default)]
    train: Option<TrainState>,
}

/// Training state needed to continue a run exactly where it stopped.
#[derive(Debug, Clone)]
pub struct Resume {
    pub state: TrainState,
    pub optimizer: AdamW,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Encoder<f32>,
    /// Class names of the classification head, if any.
    pub labels: Vec<String>,
    pub resume: Option<Resume>,
}

fn write_tensor<W: Write>(w: &mut W, name: &str, value: &ArrayD<f32>) -> io::Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(value.ndim() as u32).to_le_bytes())?;
    for &d in value.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in value.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_checkpoint<W: Write>(
    w: &mut W,
    model: &Encoder<f32>,
    labels: &[String],
    resume: Option<(&TrainState, &AdamW)>,
) -> Result<(), CheckpointError> {
    let header = Header {
        model: model.config().clone(),
        head: model.head().cloned(),
        labels: labels.to_vec(),
        train: resume.map(|(s, _)| s.clone()),
    };
    let json = serde_json::to_vec(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for p in model.params().iter() {
        write_tensor(w, &p.name, &p.value)?;
    }
    if let Some((_, opt)) = resume {
        for (p, m) in model.params().iter().zip(&opt.m) {
            write_tensor(w, &format!("adam.m.{}", p.name), m)?;
        }
        for (p, v) in model.params().iter().zip(&opt.v) {
            write_tensor(w, &format!("adam.v.{}", p.name), v)?;
        }
    }
    Ok(())
}

/// Writes atomically (temporary file, then rename).
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &Encoder<f32>,
    labels: &[String],
    resume: Option<(&TrainState, &AdamW)>,
) -> Result<(), CheckpointError> {
    let mut err = None;
    crate::io::write_atomic(path.as_ref(), |w| {
        write_checkpoint(w, model, labels, resume).map_err(|e| match e {
            CheckpointError::Io(e) => e,
            other => {
                err = Some(other);
                io::Error::other("header")
            }
        })
    })
    .map_err(|e| err.take().unwrap_or(CheckpointError::Io(e)))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CheckpointError::ShapeMismatch(format!("file truncated in {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

struct RawTensor<'a> {
    name: String,
    dims: Vec<usize>,
    data: &'a [u8],
}

fn read_tensor<'a>(c: &mut Cursor<'a>) -> Result<RawTensor<'a>, CheckpointError> {
    let len = c.u32("tensor name")? as usize;
    let name = String::from_utf8(c.take(len, "tensor name")?.to_vec())
        .map_err(|_| CheckpointError::ShapeMismatch("tensor name is not UTF-8".into()))?;
    let rank = c.u32("tensor rank")? as usize;
    if rank > 8 {
        return Err(CheckpointError::ShapeMismatch(format!("{name}: rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    let mut count: usize = 1;
    for _ in 0..rank {
        let d = usize::try_from(c.u64("tensor dims")?)
            .map_err(|_| CheckpointError::ShapeMismatch(format!("{name}: dimension overflow")))?;
        count = count
            .checked_mul(d)
            .ok_or_else(|| CheckpointError::ShapeMismatch(format!("{name}: dimension overflow")))?;
        dims.push(d);
    }
    let bytes = count
        .checked_mul(4)
        .ok_or_else(|| CheckpointError::ShapeMismatch(format!("{name}: dimension overflow")))?;
    let data = c.take(bytes, &name)?;
    Ok(RawTensor { name, dims, data })
}

fn to_array(t: &RawTensor<'_>) -> ArrayD<f32> {
    let values = t
        .data
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    ArrayD::from_shape_vec(IxDyn(&t.dims), values).expect("length checked")
}

pub fn read_checkpoint(buf: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if buf.len() < 4 || &buf[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut c = Cursor { buf, pos: 4 };
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::VersionUnsupported(version));
    }
    let hlen = c.u32("header length")? as usize;
    let header: Header =
        serde_json::from_slice(c.take(hlen, "header")?).map_err(|e| CheckpointError::Header(e.to_string()))?;
    header
        .model
        .validate()
        .map_err(|e| CheckpointError::Header(e.to_string()))?;

    let mut tensors = Vec::new();
    while c.pos < buf.len() {
        tensors.push(read_tensor(&mut c)?);
    }
    // Validate sizes before allocating a model of the declared shape.
    let expected = expected_elements(&header.model, header.head.as_ref());
    let model_elems: u128 = tensors
        .iter()
        .filter(|t| !t.name.starts_with("adam."))
        .map(|t| t.dims.iter().map(|&d| d as u128).product::<u128>())
        .sum();
    if model_elems != expected {
        return Err(CheckpointError::ShapeMismatch(format!(
            "header declares {expected} parameters, file holds {model_elems}"
        )));
    }
    let mut model = Encoder::<f32>::zeroed(header.model.clone(), header.head.clone())
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    let n = model.params().len();
    let has_state = header.train.is_some();
    let want = if has_state { 3 * n } else { n };
    if tensors.len() != want {
        return Err(CheckpointError::ShapeMismatch(format!("expected {want} tensors, found {}", tensors.len())));
    }
    let mut optimizer = has_state.then(|| AdamW::new(model.params(), Default::default()));
    for (i, p) in model.params_mut().iter_mut().enumerate() {
        let names = [p.name.clone(), format!("adam.m.{}", p.name), format!("adam.v.{}", p.name)];
        for (k, name) in names.iter().enumerate().take(if has_state { 3 } else { 1 }) {
            let t = &tensors[i + k * n];
            if &t.name != name || t.dims != p.value.shape() {
                return Err(CheckpointError::ShapeMismatch(format!(
                    "tensor {} {:?}, expected {} {:?}",
                    t.name,
                    t.dims,
                    name,
                    p.value.shape()
                )));
            }
            let arr = to_array(t);
            match (k, optimizer.as_mut()) {
                (0, _) => p.value = arr,
                (1, Some(o)) => o.m[i] = arr,
                (_, Some(o)) => o.v[i] = arr,
                _ => unreachable!(),
            }
        }
    }
    let resume = match (header.train, optimizer) {
        (Some(state), Some(mut optimizer)) => {
            optimizer.cfg = state.config.adamw();
            optimizer.t = state.optimizer_steps;
            Some(Resume { state, optimizer })
        }
        _ => None,
    };
    Ok(Checkpoint {
        model,
        labels: header.labels,
        resume,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    read_checkpoint(&std::fs::read(path)?)
}

/// Loads a checkpoint and checks that its architecture matches `expected`
/// (seed and dropout may differ).
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Checkpoint, CheckpointError> {
    let ck = load_checkpoint(path)?;
    let got = ck.model.config();
    let arch = |c: &ModelConfig| {
        (
            c.layers,
            c.hidden,
            c.heads,
            c.ffn_dim,
            c.vocab_size,
            c.max_positions,
            c.tie_mbm_weights,
        )
    };
    if arch(got) != arch(expected) {
        return Err(CheckpointError::ShapeMismatch(format!(
            "checkpoint has L={} H={} A={} F={} V={} P={}, run expects L={} H={} A={} F={} V={} P={}",
            got.layers,
            got.hidden,
            got.heads,
            got.ffn_dim,
            got.vocab_size,
            got.max_positions,
            expected.layers,
            expected.hidden,
            expected.heads,
            expected.ffn_dim,
            expected.vocab_size,
            expected.max_positions
        )));
    }
    Ok(ck)
}

fn expected_elements(c: &ModelConfig, head: Option<&HeadConfig>) -> u128 {
    let (h, v, p, l, f) = (
        c.hidden as u128,
        c.vocab_size as u128,
        c.max_positions as u128,
        c.layers as u128,
        c.ffn_dim as u128,
    );
    let embeddings = v * h + p * h + 2 * h + 2 * h;
    let layer = 4 * (h * h + h) + 2 * h + (h * f + f) + (f * h + h) + 2 * h;
    let pooler = h * h + h;
    let mbm = if c.tie_mbm_weights { v } else { h * v + v };
    let sbp = 2 * h + 2;
    let cls = head.map_or(0, |hd| hd.segments as u128 * h * hd.num_classes as u128 + hd.num_classes as u128);
    embeddings + l * layer + pooler + mbm + sbp + cls
}
