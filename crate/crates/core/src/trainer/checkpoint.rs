//! Binary checkpoints.
//!
//! Layout: 8-byte magic, u32 LE format version, u64 LE header length, a JSON
//! header (config echo, counters, normalization, queue metadata and a named
//! tensor manifest), then every tensor as little-endian floats in manifest
//! order. Values use the run's precision so 64-bit runs resume exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainState;
use crate::config::TrainConfig;
use crate::error::{CheckpointError, Error, Result};
use crate::image::ChannelNorm;
use crate::memory::NegativeQueue;
use crate::model::EncoderSpec;
use crate::numcore::{DType, Scalar, Tensor};
use crate::rng::SeededRng;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MSVQCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const PREAMBLE: usize = 8 + 4 + 8;

#[derive(Debug, Serialize, Deserialize)]
struct RngState {
    algorithm: String,
    seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct QueueMeta {
    capacity: usize,
    dim: usize,
    head: usize,
    labels: Option<Vec<u32>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: DType,
    config: TrainConfig,
    encoder: EncoderSpec,
    rng: RngState,
    step: u64,
    epoch: u64,
    steps_per_epoch: u64,
    norm: ChannelNorm,
    queues: Vec<QueueMeta>,
    tensors: Vec<TensorEntry>,
}

fn queue_meta<T: Scalar>(q: &NegativeQueue<T>) -> QueueMeta {
    let (_, head, labels) = q.raw_parts();
    QueueMeta {
        capacity: q.capacity(),
        dim: q.dim(),
        head,
        labels: labels.map(<[u32]>::to_vec),
    }
}

/// Named tensors in manifest order.
fn manifest<T: Scalar>(state: &TrainState<T>) -> Vec<(String, Vec<usize>, Vec<T>)> {
    let mut out = Vec::new();
    let nets = [
        ("student", &state.nets.student),
        ("teacher1", &state.nets.teacher1),
        ("teacher2", &state.nets.teacher2),
    ];
    for (prefix, net) in nets {
        for (name, p) in net.param_names().iter().zip(net.params()) {
            out.push((format!("{prefix}.{name}"), p.value.shape().to_vec(), p.value.data().to_vec()));
        }
    }
    for (name, v) in state.nets.student.param_names().iter().zip(&state.velocity) {
        out.push((format!("optimizer.velocity.{name}"), v.shape().to_vec(), v.data().to_vec()));
    }
    for (prefix, q) in [("queue1", &state.queue1), ("queue2", &state.queue2)] {
        let (slots, _, _) = q.raw_parts();
        out.push((format!("{prefix}.slots"), vec![q.capacity(), q.dim()], slots.to_vec()));
    }
    out
}

/// Serializes `state` to bytes.
pub fn encode<T: Scalar>(state: &TrainState<T>) -> Vec<u8> {
    let tensors = manifest(state);
    let header = Header {
        dtype: T::DTYPE,
        config: state.config.clone(),
        encoder: state.encoder.clone(),
        rng: RngState {
            algorithm: SeededRng::ALGORITHM.to_string(),
            seed: state.config.pretraining.seed,
        },
        step: state.step,
        epoch: state.epoch,
        steps_per_epoch: state.steps_per_epoch,
        norm: state.norm.clone(),
        queues: vec![queue_meta(&state.queue1), queue_meta(&state.queue2)],
        tensors: tensors
            .iter()
            .map(|(name, shape, _)| TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(PREAMBLE + json.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, data) in &tensors {
        for &v in data {
            v.write_le(&mut out);
        }
    }
    out
}

pub fn save_checkpoint<T: Scalar>(state: &TrainState<T>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, encode(state)).map_err(|e| Error::io(path, e))
}

fn read_header(bytes: &[u8]) -> Result<(Header, usize), CheckpointError> {
    if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(8)]).into_owned();
        return Err(CheckpointError::Version {
            found: format!("magic {found:?}"),
            expected: format!("magic {:?}", String::from_utf8_lossy(CHECKPOINT_MAGIC)),
        });
    }
    if bytes.len() < PREAMBLE {
        return Err(CheckpointError::Truncated {
            needed: PREAMBLE,
            available: bytes.len(),
        });
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found: version.to_string(),
            expected: CHECKPOINT_VERSION.to_string(),
        });
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let end = PREAMBLE.checked_add(len).ok_or_else(|| CheckpointError::Header("header length overflows".into()))?;
    if bytes.len() < end {
        return Err(CheckpointError::Truncated {
            needed: end,
            available: bytes.len(),
        });
    }
    let header = serde_json::from_slice(&bytes[PREAMBLE..end]).map_err(|e| CheckpointError::Header(e.to_string()))?;
    Ok((header, end))
}

/// Precision recorded in a checkpoint, so callers can pick the matching type.
pub fn checkpoint_dtype(path: &Path) -> Result<DType> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(read_header(&bytes)?.0.dtype)
}

/// Rebuilds a state from bytes produced by [`encode`].
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<TrainState<T>> {
    let (header, mut offset) = read_header(bytes)?;
    if header.dtype != T::DTYPE {
        return Err(CheckpointError::Dtype {
            found: header.dtype.name().to_string(),
            expected: T::DTYPE.name().to_string(),
        }
        .into());
    }
    let mut config = header.config.clone();
    config.pretraining.analysis_mode = header.queues.iter().any(|q| q.labels.is_some());
    let mut state = TrainState::<T>::initial(&config, header.norm.clone(), header.steps_per_epoch)?;
    if state.encoder != header.encoder {
        return Err(CheckpointError::Header("encoder spec disagrees with config".into()).into());
    }
    state.config = header.config;
    state.step = header.step;
    state.epoch = header.epoch;

    let expected = manifest(&state);
    if header.tensors.len() != expected.len() {
        return Err(CheckpointError::ShapeMismatch {
            name: "<manifest>".into(),
            found: vec![header.tensors.len()],
            expected: vec![expected.len()],
        }
        .into());
    }
    let width = T::DTYPE.size();
    let mut values = Vec::with_capacity(expected.len());
    for (entry, (name, shape, _)) in header.tensors.iter().zip(&expected) {
        if &entry.name != name || &entry.shape != shape {
            return Err(CheckpointError::ShapeMismatch {
                name: entry.name.clone(),
                found: entry.shape.clone(),
                expected: shape.clone(),
            }
            .into());
        }
        let count: usize = shape.iter().product();
        let end = offset + count * width;
        if bytes.len() < end {
            return Err(CheckpointError::Truncated {
                needed: end,
                available: bytes.len(),
            }
            .into());
        }
        let data: Vec<T> = bytes[offset..end].chunks_exact(width).map(T::read_le).collect();
        values.push((shape.clone(), data));
        offset = end;
    }
    if offset != bytes.len() {
        return Err(CheckpointError::Header(format!("{} trailing bytes", bytes.len() - offset)).into());
    }

    let mut it = values.into_iter();
    let params = state.nets.student.params().len();
    let mut take = |n: usize| -> Result<Vec<Tensor<T>>> {
        it.by_ref().take(n).map(|(shape, data)| Tensor::new(&shape, data)).collect()
    };
    let student = take(params)?;
    let teacher1 = take(params)?;
    let teacher2 = take(params)?;
    state.velocity = take(params)?;
    state.nets.student.load_values(student)?;
    state.nets.teacher1.load_values(teacher1)?;
    state.nets.teacher2.load_values(teacher2)?;
    let queues = take(2)?;
    for ((queue, slots), meta) in [&mut state.queue1, &mut state.queue2].into_iter().zip(queues).zip(header.queues) {
        *queue = NegativeQueue::from_raw_parts(meta.capacity, meta.dim, slots.into_data(), meta.head, meta.labels)?;
    }
    Ok(state)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<TrainState<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
