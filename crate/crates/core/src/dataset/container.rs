//! Little-endian clip container:
//!
//! ```text
//! "CMRC" | version u32 | H u32 | W u32 | T u32 | view u8 | slice u8 | ed u16 | es u16
//! H*W*T f32 image values, (H, W, T) row-major
//! H*W*T u8 mask values, same order
//! ```
//!
//! The scan id is not part of the container; it lives in the manifest.

use std::fs;
use std::path::Path;

use super::{CineClip, ClipMeta, Dims, MaskClip, SlicePosition, View};
use crate::error::{Error, FormatError, Result};

pub const MAGIC: &[u8; 4] = b"CMRC";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 4 + 4 + 12 + 1 + 1 + 2 + 2;

pub fn encode_clip(clip: &CineClip, mask: &MaskClip) -> Result<Vec<u8>> {
    if clip.dims != mask.dims {
        return Err(Error::Shape(format!("clip {} vs mask {}", clip.dims, mask.dims)));
    }
    let d = clip.dims;
    let dim = |v: usize, name: &str| {
        u32::try_from(v).map_err(|_| Error::Shape(format!("{name}={v} does not fit the container")))
    };
    let phase = |v: usize, name: &str| {
        u16::try_from(v).map_err(|_| Error::Shape(format!("{name}={v} does not fit the container")))
    };
    let mut out = Vec::with_capacity(HEADER_LEN + d.voxels() * 5);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&dim(d.height, "H")?.to_le_bytes());
    out.extend_from_slice(&dim(d.width, "W")?.to_le_bytes());
    out.extend_from_slice(&dim(d.phases, "T")?.to_le_bytes());
    out.push(clip.meta.view.code());
    out.push(clip.meta.slice_position.code());
    out.extend_from_slice(&phase(clip.meta.ed_index, "ed")?.to_le_bytes());
    out.extend_from_slice(&phase(clip.meta.es_index, "es")?.to_le_bytes());
    for v in &clip.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&mask.data);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8], FormatError> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(FormatError::Truncated { field, needed: n, available });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &'static str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u16(&mut self, field: &'static str) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().unwrap()))
    }

    fn u8(&mut self, field: &'static str) -> Result<u8, FormatError> {
        Ok(self.take(1, field)?[0])
    }
}

fn invalid(field: &'static str, value: impl ToString) -> FormatError {
    FormatError::InvalidField { field, value: value.to_string() }
}

/// Parses a container. The returned metadata carries an empty scan id.
pub fn decode_clip(bytes: &[u8]) -> Result<(CineClip, MaskClip), FormatError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, "magic").map_err(|_| FormatError::BadMagic)?;
    if magic != MAGIC {
        return Err(FormatError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(FormatError::Version(version));
    }
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    let t = r.u32("phases")? as usize;
    for (name, v) in [("height", h), ("width", w), ("phases", t)] {
        if v == 0 {
            return Err(invalid(name, v));
        }
    }
    let view_code = r.u8("view")?;
    let view = View::from_code(view_code).ok_or_else(|| invalid("view", view_code))?;
    let slice_code = r.u8("slice_position")?;
    let slice_position = SlicePosition::from_code(slice_code).ok_or_else(|| invalid("slice_position", slice_code))?;
    let ed = r.u16("ed")? as usize;
    let es = r.u16("es")? as usize;
    if ed >= t || ed == es {
        return Err(invalid("ed", ed));
    }
    if es >= t {
        return Err(invalid("es", es));
    }
    let voxels = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(t))
        .ok_or(FormatError::DimensionOverflow("H*W*T"))?;
    let image_bytes = voxels.checked_mul(4).ok_or(FormatError::DimensionOverflow("image payload"))?;
    let image = r.take(image_bytes, "image payload")?;
    let labels = r.take(voxels, "mask payload")?;
    let trailing = bytes.len() - r.pos;
    if trailing != 0 {
        return Err(FormatError::Trailing(trailing));
    }
    if let Some(v) = labels.iter().find(|v| **v > 1) {
        return Err(invalid("mask payload", v));
    }
    let data = image.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let dims = Dims::new(h, w, t);
    let meta = ClipMeta { scan_id: String::new(), view, slice_position, ed_index: ed, es_index: es };
    Ok((CineClip { dims, data, meta }, MaskClip { dims, data: labels.to_vec() }))
}

pub fn save_clip(clip: &CineClip, mask: &MaskClip, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_clip(clip, mask)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_clip(path: impl AsRef<Path>) -> Result<(CineClip, MaskClip)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_clip(&bytes).map_err(|kind| Error::Format { path: path.to_path_buf(), kind })
}
