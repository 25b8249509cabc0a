use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Real, Tensor};

/// Coarse parameter families, used for reporting and gradient-check coverage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Encoder,
    TemporalAttention,
    TemporalPosition,
    SpatialAttention,
    FeedForward,
    Adapter,
    Norm,
    DecoderTokens,
    DecoderAttention,
    DecoderConv,
    SkipAttention,
    Head,
}

impl Group {
    pub fn name(self) -> &'static str {
        match self {
            Group::Encoder => "encoder",
            Group::TemporalAttention => "temporal_attention",
            Group::TemporalPosition => "temporal_position",
            Group::SpatialAttention => "spatial_attention",
            Group::FeedForward => "feed_forward",
            Group::Adapter => "adapter",
            Group::Norm => "norm",
            Group::DecoderTokens => "decoder_tokens",
            Group::DecoderAttention => "decoder_attention",
            Group::DecoderConv => "decoder_conv",
            Group::SkipAttention => "skip_attention",
            Group::Head => "head",
        }
    }
}

/// How a parameter tensor is filled at construction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given standard deviation.
    Normal(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub group: Group,
    pub frozen: bool,
    pub value: Tensor<T>,
}

/// Named parameters in registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self { params: Vec::new(), index: BTreeMap::new() }
    }
}

impl<T: Real> ParamStore<T> {
    /// Registers a parameter. Values come from a per-name stream; frozen
    /// parameters draw from a separate family of streams.
    pub fn register(&mut self, seed: u64, name: &str, shape: &[usize], group: Group, frozen: bool, init: Init) {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Normal(std) => {
                let family = if frozen { "frozen" } else { "trainable" };
                let mut r = rng::stream(seed, &[rng::tag(family), rng::tag(name)]);
                (0..n)
                    .map(|_| {
                        let z: f64 = r.sample(StandardNormal);
                        // round through f32 so f32 and f64 builds start from equal values
                        T::of((z * std) as f32 as f64)
                    })
                    .collect()
            }
        };
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param { name: name.to_string(), group, frozen, value: Tensor::new(shape.to_vec(), data) });
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn at(&self, i: usize) -> &Param<T> {
        &self.params[i]
    }

    pub fn at_mut(&mut self, i: usize) -> &mut Param<T> {
        &mut self.params[i]
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), group: p.group, frozen: p.frozen, value: p.value.cast() })
                .collect(),
            index: self.index.clone(),
        }
    }

    pub fn partition(&self) -> Partition {
        let mut part = Partition::default();
        for p in &self.params {
            if p.frozen {
                part.frozen.push(p.name.clone());
            } else {
                part.trainable.push(p.name.clone());
            }
        }
        part
    }

    /// `(frozen, trainable)` scalar counts.
    pub fn count(&self) -> (usize, usize) {
        self.params.iter().fold((0, 0), |(f, t), p| {
            if p.frozen {
                (f + p.value.numel(), t)
            } else {
                (f, t + p.value.numel())
            }
        })
    }

    /// Replaces values from `(name, shape, data)` triples; every parameter must be covered.
    pub fn load(&mut self, tensors: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        for p in &mut self.params {
            let t = tensors
                .get(&p.name)
                .ok_or_else(|| Error::InvalidParams(format!("missing parameter {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Shape(format!(
                    "parameter {}: stored {:?}, model expects {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }
}

/// Disjoint frozen/trainable name lists covering every parameter.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub frozen: Vec<String>,
    pub trainable: Vec<String>,
}

impl Partition {
    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|n| n == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registration_is_name_seeded() {
        let mut a = ParamStore::<f32>::default();
        a.register(3, "x", &[4], Group::Head, false, Init::Normal(1.0));
        a.register(3, "y", &[4], Group::Head, true, Init::Normal(1.0));
        let mut b = ParamStore::<f32>::default();
        b.register(3, "y", &[4], Group::Head, true, Init::Normal(1.0));
        b.register(3, "x", &[4], Group::Head, false, Init::Normal(1.0));
        assert_eq!(a.get("x").unwrap().value, b.get("x").unwrap().value);
        assert_ne!(a.get("x").unwrap().value, a.get("y").unwrap().value);
        assert_eq!(a.count(), (4, 4));
        let part = a.partition();
        assert_eq!((part.frozen, part.trainable), (vec!["y".to_string()], vec!["x".to_string()]));
    }

    #[test]
    fn casting_preserves_values() {
        let mut a = ParamStore::<f32>::default();
        a.register(1, "w", &[2, 3], Group::Encoder, false, Init::Normal(0.5));
        let b: ParamStore<f64> = a.cast();
        let back: ParamStore<f32> = b.cast();
        assert_eq!(a, back);
    }
}
