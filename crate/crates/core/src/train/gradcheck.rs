//! Central-difference verification of the analytic gradients.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use serde::Serialize;

use super::{combined_loss_var, TrainConfig};
use crate::dataset::View;
use crate::error::{Error, Result};
use crate::model::{BatchDims, Graph, Group, Model, ModelConfig, ParamStore};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupError {
    pub group: Group,
    pub coordinates: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub coordinates: usize,
    pub max_rel_error: f64,
    /// Trainable groups only; frozen parameters are never sampled.
    pub groups: Vec<GroupError>,
}

/// The smallest architecture that still exercises every component.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        in_channels: 1,
        embed_dim: 8,
        num_blocks: 2,
        num_heads: 2,
        encoder_channels: vec![4, 8],
        adapter_bottleneck: 4,
        adapter_scale: 0.5,
        use_temporal_pos_embed: true,
        max_phases: 4,
        num_prompt_tokens: 1,
        decoder_heads: 2,
        decoder_depth: 2,
        mlp_ratio: 2,
        mhca_kv_grid: 2,
    }
}

/// Model, images, masks and batch geometry of [`micro_fixture`].
pub type MicroFixture = (Model<f64>, Vec<f64>, Vec<u8>, BatchDims);

type Grads = BTreeMap<String, Vec<f64>>;

/// A double-precision micro model with its zero-initialized tensors
/// randomized (so no branch is inert), one 8x8x2 clip and its target.
pub fn micro_fixture(seed: u64) -> Result<MicroFixture> {
    let mut model = Model::<f64>::build(micro_config(), seed)?;
    let mut r = rng::stream(seed, &[rng::tag("gradcheck-fixture")]);
    for p in model.params.iter_mut() {
        if p.value.data().iter().all(|v| *v == 0.0) {
            for v in p.value.data_mut() {
                *v = r.random_range(-0.3..0.3);
            }
        }
    }
    let dims = BatchDims { batch: 1, height: 8, width: 8, phases: 2 };
    let mut images = Vec::with_capacity(128);
    let mut mask = Vec::with_capacity(128);
    for row in 0..8 {
        for col in 0..8 {
            for t in 0..2 {
                let d = ((row as f64 - 3.5).powi(2) + (col as f64 - 3.5).powi(2)).sqrt();
                let inside = d > 1.0 + 0.5 * t as f64 && d <= 3.0;
                mask.push(inside as u8);
                images.push(if inside { 0.5 } else { 0.1 } + r.random_range(-0.05..0.05));
            }
        }
    }
    Ok((model, images, mask, dims))
}

#[allow(clippy::too_many_arguments)]
fn loss_of(
    model: &Model<f64>,
    store: &ParamStore<f64>,
    images: &[f64],
    target: &[f64],
    dims: BatchDims,
    views: Option<&[View]>,
    cfg: &TrainConfig,
    train: bool,
) -> Result<(f64, Option<Grads>)> {
    let mut g = Graph::bind(store, train);
    let shape = vec![dims.batch, model.config.in_channels, dims.height, dims.width, dims.phases];
    let x = g.tape.constant(Tensor::new(shape, images.to_vec()));
    let logits = model.forward(&mut g, x, views)?;
    let loss = combined_loss_var(&mut g.tape, logits, target, dims.batch, cfg.w_bce, cfg.w_dice, cfg.dice_smooth);
    let value = g.tape.value(loss).data()[0];
    if !train {
        return Ok((value, None));
    }
    let mut grads = g.tape.backward(loss);
    let mut out = BTreeMap::new();
    for (name, v) in g.params() {
        if let Some(gr) = grads.take(*v) {
            out.insert(name.clone(), gr);
        }
    }
    Ok((value, Some(out)))
}

/// Compares analytic gradients of the combined loss with central differences
/// at `per_tensor` sampled coordinates of every trainable tensor.
/// Relative error is `|a - n| / max(|a|, |n|, 1e-6)`.
#[allow(clippy::too_many_arguments)]
pub fn gradient_check(
    model: &Model<f64>,
    images: &[f64],
    masks: &[u8],
    dims: BatchDims,
    views: Option<&[View]>,
    cfg: &TrainConfig,
    per_tensor: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if masks.len() != dims.batch * dims.height * dims.width * dims.phases {
        return Err(Error::Shape(format!("{} mask voxels for {dims:?}", masks.len())));
    }
    let target: Vec<f64> = masks.iter().map(|v| *v as f64).collect();
    let (_, grads) = loss_of(model, &model.params, images, &target, dims, views, cfg, true)?;
    let grads = grads.expect("training graph returns gradients");
    let mut r = rng::stream(seed, &[rng::tag("gradcheck")]);
    let mut store = model.params.clone();
    let mut groups: BTreeMap<Group, (usize, f64)> = BTreeMap::new();
    for pi in 0..store.len() {
        let (name, group, frozen, numel) = {
            let p = store.at(pi);
            (p.name.clone(), p.group, p.frozen, p.value.numel())
        };
        if frozen {
            continue;
        }
        let analytic = grads.get(&name).cloned().unwrap_or_else(|| vec![0.0; numel]);
        for i in index::sample(&mut r, numel, per_tensor.min(numel)) {
            let orig = store.at(pi).value.data()[i];
            store.at_mut(pi).value.data_mut()[i] = orig + h;
            let (plus, _) = loss_of(model, &store, images, &target, dims, views, cfg, false)?;
            store.at_mut(pi).value.data_mut()[i] = orig - h;
            let (minus, _) = loss_of(model, &store, images, &target, dims, views, cfg, false)?;
            store.at_mut(pi).value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            let e = groups.entry(group).or_insert((0, 0.0));
            e.0 += 1;
            e.1 = e.1.max(rel);
        }
    }
    let groups: Vec<GroupError> = groups
        .into_iter()
        .map(|(group, (coordinates, max_rel_error))| GroupError { group, coordinates, max_rel_error })
        .collect();
    Ok(GradCheckReport {
        coordinates: groups.iter().map(|g| g.coordinates).sum(),
        max_rel_error: groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max),
        groups,
    })
}
