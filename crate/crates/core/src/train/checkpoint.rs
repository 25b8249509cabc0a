//! Self-describing checkpoint container:
//!
//! ```text
//! "CKPT1" | header length u32 LE | JSON header | f32 LE payloads in header order
//! ```
//!
//! The header carries the configs, mode, data geometry, epoch, history, optimizer scalars,
//! the frozen/trainable partition and the name and shape of every tensor.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EpochRecord, Madgrad, Slot, TrainConfig, TrainMode, Trainer};
use crate::error::{Error, FormatError, Result};
use crate::model::{Model, ModelConfig, Partition};
use crate::preprocess::{AugmentConfig, DataConfig};
use crate::tensor::Tensor;

pub const CKPT_MAGIC: &[u8; 5] = b"CKPT1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    augment: AugmentConfig,
    mode: TrainMode,
    data: DataConfig,
    input_dims: Option<[usize; 3]>,
    epoch: usize,
    history: Vec<EpochRecord>,
    optimizer_step: u64,
    partition: Partition,
    tensors: Vec<TensorEntry>,
}

/// A resumable snapshot of a [`Trainer`].
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub trainer: Trainer,
}

const OPT_KINDS: [&str; 3] = ["grad_sum", "sq_sum", "x0"];

impl Checkpoint {
    pub fn from_trainer(trainer: &Trainer) -> Self {
        Self { trainer: trainer.clone() }
    }

    pub fn into_trainer(self) -> Trainer {
        self.trainer
    }

    pub fn model(&self) -> &Model<f32> {
        &self.trainer.model
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let t = &self.trainer;
        let mut tensors = Vec::new();
        let mut payload: Vec<&[f32]> = Vec::new();
        for p in t.model.params.iter() {
            tensors.push(TensorEntry { name: format!("param/{}", p.name), shape: p.value.shape().to_vec() });
            payload.push(p.value.data());
        }
        for slot in &t.optimizer.slots {
            for (kind, data) in OPT_KINDS.iter().zip([&slot.grad_sum, &slot.sq_sum, &slot.x0]) {
                tensors.push(TensorEntry { name: format!("opt/{kind}/{}", slot.name), shape: vec![data.len()] });
                payload.push(data);
            }
        }
        let header = Header {
            model: t.model.config.clone(),
            train: t.config.clone(),
            augment: t.augment.clone(),
            mode: t.mode,
            data: t.data.clone(),
            input_dims: t.input_dims,
            epoch: t.epoch,
            history: t.history.clone(),
            optimizer_step: t.optimizer.step,
            partition: t.model.partition(),
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(CKPT_MAGIC.len() + 4 + json.len() + payload.iter().map(|p| p.len() * 4).sum::<usize>());
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for data in payload {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        if bytes.len() < CKPT_MAGIC.len() || &bytes[..CKPT_MAGIC.len()] != CKPT_MAGIC {
            return Err(FormatError::BadMagic);
        }
        let mut pos = CKPT_MAGIC.len();
        let need = |pos: usize, n: usize, field: &'static str| {
            let available = bytes.len() - pos;
            if n > available {
                Err(FormatError::Truncated { field, needed: n, available })
            } else {
                Ok(())
            }
        };
        need(pos, 4, "header length")?;
        let hlen = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        pos += 4;
        need(pos, hlen, "header")?;
        let header: Header = serde_json::from_slice(&bytes[pos..pos + hlen])
            .map_err(|e| FormatError::InvalidField { field: "header", value: e.to_string() })?;
        pos += hlen;

        let mut tensors: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        for entry in &header.tensors {
            let n = entry
                .shape
                .iter()
                .try_fold(1usize, |acc, d| acc.checked_mul(*d))
                .and_then(|n| n.checked_mul(4))
                .ok_or(FormatError::DimensionOverflow("tensor payload"))?;
            need(pos, n, "tensor payload")?;
            let data = bytes[pos..pos + n].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            pos += n;
            tensors.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data));
        }
        if pos != bytes.len() {
            return Err(FormatError::Trailing(bytes.len() - pos));
        }

        let invalid = |field: &'static str, value: String| FormatError::InvalidField { field, value };
        let mut model = Model::<f32>::build(header.model.clone(), 0).map_err(|e| invalid("model", e.to_string()))?;
        if model.partition() != header.partition {
            return Err(invalid("partition", "does not match the model configuration".into()));
        }
        let params: BTreeMap<String, Tensor<f32>> = tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("param/").map(|n| (n.to_string(), v.clone())))
            .collect();
        if params.len() != model.params.len() {
            return Err(invalid("tensors", format!("{} parameters, model has {}", params.len(), model.params.len())));
        }
        model.params.load(&params).map_err(|e| invalid("tensors", e.to_string()))?;

        let mut slots = Vec::new();
        for p in model.params.iter().filter(|p| !p.frozen) {
            let get = |kind: &str| {
                tensors
                    .get(&format!("opt/{kind}/{}", p.name))
                    .filter(|t| t.numel() == p.value.numel())
                    .map(|t| t.data().to_vec())
                    .ok_or_else(|| invalid("tensors", format!("optimizer state {kind} of {} missing or mis-sized", p.name)))
            };
            slots.push(Slot { name: p.name.clone(), grad_sum: get("grad_sum")?, sq_sum: get("sq_sum")?, x0: get("x0")? });
        }
        let optimizer = Madgrad {
            momentum: header.train.momentum as f32,
            eps: header.train.optimizer_eps as f32,
            step: header.optimizer_step,
            slots,
        };
        Ok(Self {
            trainer: Trainer {
                model,
                optimizer,
                config: header.train,
                augment: header.augment,
                mode: header.mode,
                data: header.data,
                input_dims: header.input_dims,
                epoch: header.epoch,
                history: header.history,
            },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|kind| Error::Format { path: path.to_path_buf(), kind })
    }
}
