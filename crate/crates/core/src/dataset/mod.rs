//! Clip types, the binary clip container, manifests and batching.

mod batch;
mod container;
mod manifest;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use batch::{batch_order, iterate_batches, Batch, BatchIter};
pub use container::{decode_clip, encode_clip, load_clip, save_clip, HEADER_LEN, MAGIC, VERSION};
pub use manifest::{split_manifest, Manifest, ManifestEntry, Split, MANIFEST_FILE};

/// Imaging plane of a clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum View {
    #[serde(rename = "SAX")]
    Sax,
    #[serde(rename = "LAX")]
    Lax,
}

impl View {
    pub const ALL: [View; 2] = [View::Sax, View::Lax];

    pub fn code(self) -> u8 {
        match self {
            View::Sax => 0,
            View::Lax => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(View::Sax),
            1 => Some(View::Lax),
            _ => None,
        }
    }

    pub fn keyword(self) -> &'static str {
        match self {
            View::Sax => "SAX",
            View::Lax => "LAX",
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.keyword())
    }
}

impl FromStr for View {
    type Err = Error;

    /// Accepts the exact prompt keywords `SAX` and `LAX`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "SAX" => Ok(View::Sax),
            "LAX" => Ok(View::Lax),
            other => Err(Error::UnknownView(other.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlicePosition {
    Basal,
    Mid,
    Apical,
    NotApplicable,
}

impl SlicePosition {
    pub const LEVELS: [SlicePosition; 3] = [SlicePosition::Basal, SlicePosition::Mid, SlicePosition::Apical];

    pub fn code(self) -> u8 {
        match self {
            SlicePosition::Basal => 0,
            SlicePosition::Mid => 1,
            SlicePosition::Apical => 2,
            SlicePosition::NotApplicable => 255,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(SlicePosition::Basal),
            1 => Some(SlicePosition::Mid),
            2 => Some(SlicePosition::Apical),
            255 => Some(SlicePosition::NotApplicable),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SlicePosition::Basal => "basal",
            SlicePosition::Mid => "mid",
            SlicePosition::Apical => "apical",
            SlicePosition::NotApplicable => "n/a",
        }
    }
}

impl fmt::Display for SlicePosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SlicePosition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "basal" => Ok(SlicePosition::Basal),
            "mid" => Ok(SlicePosition::Mid),
            "apical" => Ok(SlicePosition::Apical),
            "n/a" | "na" => Ok(SlicePosition::NotApplicable),
            other => Err(Error::InvalidParams(format!("unknown slice position {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipMeta {
    pub scan_id: String,
    pub view: View,
    pub slice_position: SlicePosition,
    pub ed_index: usize,
    pub es_index: usize,
}

impl ClipMeta {
    pub fn validate(&self, phases: usize) -> Result<()> {
        if self.ed_index == self.es_index {
            return Err(Error::InvalidParams(format!("ed index equals es index ({})", self.ed_index)));
        }
        if self.ed_index >= phases || self.es_index >= phases {
            return Err(Error::InvalidParams(format!(
                "ed/es indices ({}, {}) out of range for {phases} phases",
                self.ed_index, self.es_index
            )));
        }
        Ok(())
    }
}

/// Spatial and temporal extent of a clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub height: usize,
    pub width: usize,
    pub phases: usize,
}

impl Dims {
    pub fn new(height: usize, width: usize, phases: usize) -> Self {
        Self { height, width, phases }
    }

    pub fn voxels(&self) -> usize {
        self.height * self.width * self.phases
    }

    /// Offset of voxel `(row, col, phase)` in `(H, W, T)` row-major order.
    #[inline]
    pub fn index(&self, row: usize, col: usize, phase: usize) -> usize {
        (row * self.width + col) * self.phases + phase
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.phases)
    }
}

/// `H x W x T` intensities, stored row-major in `(H, W, T)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct CineClip {
    pub dims: Dims,
    pub data: Vec<f32>,
    pub meta: ClipMeta,
}

/// `H x W x T` myocardium labels aligned to a [`CineClip`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskClip {
    pub dims: Dims,
    pub data: Vec<u8>,
}

impl CineClip {
    pub fn new(dims: Dims, data: Vec<f32>, meta: ClipMeta) -> Result<Self> {
        if dims.height == 0 || dims.width == 0 || dims.phases == 0 {
            return Err(Error::InvalidParams(format!("empty clip dimensions {dims}")));
        }
        if data.len() != dims.voxels() {
            return Err(Error::Shape(format!("{} values for clip {dims}", data.len())));
        }
        meta.validate(dims.phases)?;
        Ok(Self { dims, data, meta })
    }

    pub fn at(&self, row: usize, col: usize, phase: usize) -> f32 {
        self.data[self.dims.index(row, col, phase)]
    }

    /// One phase as a row-major `H x W` image.
    pub fn frame(&self, phase: usize) -> Vec<f32> {
        (0..self.dims.height * self.dims.width).map(|p| self.data[p * self.dims.phases + phase]).collect()
    }
}

impl MaskClip {
    pub fn new(dims: Dims, data: Vec<u8>) -> Result<Self> {
        if data.len() != dims.voxels() {
            return Err(Error::Shape(format!("{} labels for mask {dims}", data.len())));
        }
        if let Some(v) = data.iter().find(|v| **v > 1) {
            return Err(Error::InvalidParams(format!("mask value {v} is not binary")));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self { dims, data: vec![0; dims.voxels()] }
    }

    pub fn at(&self, row: usize, col: usize, phase: usize) -> u8 {
        self.data[self.dims.index(row, col, phase)]
    }

    pub fn frame(&self, phase: usize) -> Vec<u8> {
        (0..self.dims.height * self.dims.width).map(|p| self.data[p * self.dims.phases + phase]).collect()
    }

    pub fn area(&self, phase: usize) -> usize {
        (0..self.dims.height * self.dims.width)
            .filter(|p| self.data[p * self.dims.phases + phase] == 1)
            .count()
    }
}
