use std::path::Path;

use rand::seq::SliceRandom;

use super::{CineClip, ClipMeta, Dims, Manifest, MaskClip, Split};
use crate::error::{Error, Result};
use crate::rng;

/// A stack of equally sized clips laid out `B x 1 x H x W x T`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub dims: Dims,
    pub images: Vec<f32>,
    pub masks: Vec<u8>,
    pub metas: Vec<ClipMeta>,
    /// Position of each member in the source clip list.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.metas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.metas.is_empty()
    }

    pub fn stack(members: &[(&CineClip, &MaskClip)], indices: Vec<usize>) -> Result<Self> {
        let first = members.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
        let dims = first.0.dims;
        let mut images = Vec::with_capacity(members.len() * dims.voxels());
        let mut masks = Vec::with_capacity(members.len() * dims.voxels());
        let mut metas = Vec::with_capacity(members.len());
        for (clip, mask) in members {
            if clip.dims != dims || mask.dims != dims {
                return Err(Error::DimensionMismatch(format!(
                    "clip {:?} is {} / mask {}, batch expects {dims}",
                    clip.meta.scan_id, clip.dims, mask.dims
                )));
            }
            images.extend_from_slice(&clip.data);
            masks.extend_from_slice(&mask.data);
            metas.push(clip.meta.clone());
        }
        Ok(Self { dims, images, masks, metas, indices })
    }
}

/// Visiting order of `n` clips in `epoch`; a pure function of `(n, seed, epoch)`.
pub fn batch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[rng::tag("epoch-order"), epoch as u64]));
    order
}

/// Iterates one epoch over in-memory clips.
pub struct BatchIter {
    clips: Vec<(CineClip, MaskClip)>,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

impl BatchIter {
    pub fn new(clips: Vec<(CineClip, MaskClip)>, batch_size: usize, shuffle_seed: u64, epoch: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidParams("batch size must be positive".into()));
        }
        if let Some((first, _)) = clips.first() {
            let offenders: Vec<String> = clips
                .iter()
                .filter(|(c, m)| c.dims != first.dims || m.dims != first.dims)
                .map(|(c, _)| format!("{} ({})", c.meta.scan_id, c.dims))
                .collect();
            if !offenders.is_empty() {
                return Err(Error::DimensionMismatch(format!(
                    "clips differ from {}: {}",
                    first.dims,
                    offenders.join(", ")
                )));
            }
        }
        let order = batch_order(clips.len(), shuffle_seed, epoch);
        Ok(Self { clips, order, batch_size, cursor: 0 })
    }
}

impl Iterator for BatchIter {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let idx = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        let members: Vec<(&CineClip, &MaskClip)> = idx.iter().map(|&i| (&self.clips[i].0, &self.clips[i].1)).collect();
        // dimensions were checked up front
        Some(Batch::stack(&members, idx).expect("homogeneous clips"))
    }
}

/// Loads every clip of `split` and iterates them in batches for `epoch`.
pub fn iterate_batches(
    manifest: &Manifest,
    root: &Path,
    split: Split,
    batch_size: usize,
    shuffle_seed: u64,
    epoch: usize,
) -> Result<BatchIter> {
    let clips = manifest
        .select(split)
        .into_iter()
        .map(|e| Manifest::load_entry(root, e))
        .collect::<Result<Vec<_>>>()?;
    BatchIter::new(clips, batch_size, shuffle_seed, epoch)
}
