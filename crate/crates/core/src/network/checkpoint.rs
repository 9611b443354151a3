use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::model::{Dims, FeatureNorm, Model, Tensor};
use super::train::TrainConfig;
use crate::binio::{read_file, Reader, Writer};
use crate::diffusion::{NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::pose::ChainFile;

const MAGIC: &[u8; 4] = b"MDAM";
const VERSION: u32 = 1;

/// Everything needed to use or resume a trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub schedule: NoiseSchedule,
    pub config: TrainConfig,
    pub step: usize,
    /// Chain the features were computed with (without distances).
    pub chain: Option<ChainFile>,
    /// Default substep count for encode/decode.
    pub decode_steps: usize,
    /// Optimizer moments; empty when not saved.
    pub moments: Vec<Tensor>,
}

#[derive(Serialize, Deserialize)]
struct ScheduleHeader {
    kind: ScheduleKind,
    steps: usize,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    /// Offset in scalars from the start of the tensor block.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dims: Dims,
    norm: FeatureNorm,
    schedule: ScheduleHeader,
    config: TrainConfig,
    step: usize,
    chain: Option<ChainFile>,
    decode_steps: usize,
    params: usize,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let all: Vec<&Tensor> = ckpt.model.params().iter().chain(&ckpt.moments).collect();
    let mut offset = 0;
    let tensors = all
        .iter()
        .map(|t| {
            let e = TensorEntry {
                name: t.name.clone(),
                rows: t.value.nrows(),
                cols: t.value.ncols(),
                offset,
            };
            offset += t.value.len();
            e
        })
        .collect();
    let header = Header {
        dims: *ckpt.model.dims(),
        norm: ckpt.model.norm().clone(),
        schedule: ScheduleHeader {
            kind: ckpt.schedule.kind(),
            steps: ckpt.schedule.len(),
        },
        config: ckpt.config.clone(),
        step: ckpt.step,
        chain: ckpt.chain.clone(),
        decode_steps: ckpt.decode_steps,
        params: ckpt.model.params().len(),
        tensors,
    };
    let mut w = Writer::new(MAGIC, VERSION);
    w.blob(serde_json::to_string(&header)?.as_bytes());
    for t in all {
        w.f64s(t.value.as_standard_layout().as_slice().expect("standard layout"));
    }
    w.write_to(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = read_file(path)?;
    let mut r = Reader::open(&buf, MAGIC, VERSION)?;
    let header: Header = serde_json::from_slice(r.blob()?)
        .map_err(|e| Error::Corrupt(format!("checkpoint header: {e}")))?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut offset = 0;
    for e in &header.tensors {
        if e.offset != offset {
            return Err(Error::Corrupt(format!("tensor `{}` has offset {} (expected {offset})", e.name, e.offset)));
        }
        let n = e.rows.checked_mul(e.cols).ok_or_else(|| Error::Corrupt("tensor size overflow".into()))?;
        let data = r.f64s(n)?;
        offset += n;
        tensors.push(Tensor {
            name: e.name.clone(),
            value: Array2::from_shape_vec((e.rows, e.cols), data).expect("sized above"),
        });
    }
    r.finish()?;
    if header.params > tensors.len() {
        return Err(Error::Corrupt("fewer tensors than parameters".into()));
    }
    let moments = tensors.split_off(header.params);
    Ok(Checkpoint {
        model: Model::from_tensors(header.dims, header.norm, tensors)?,
        schedule: NoiseSchedule::new(header.schedule.kind, header.schedule.steps)?,
        config: header.config,
        step: header.step,
        chain: header.chain,
        decode_steps: header.decode_steps,
        moments,
    })
}
