//! C ABI over `cmrsam`: load a checkpoint, build or load clips, segment them
//! and score masks.
//!
//! Every fallible function returns a [`CmrStatus`]. On failure the message is
//! kept per thread and can be read with [`cmr_last_error`]. Objects are opaque
//! handles released by their `*_free` function; passing NULL to a free
//! function is a no-op.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use cmrsam::cli::segment;
use cmrsam::dataset::{load_clip, CineClip, ClipMeta, Dims, MaskClip, SlicePosition, View};
use cmrsam::metrics;
use cmrsam::phantom::{Grid, ScanSpec};
use cmrsam::train::{Checkpoint, Trainer};
use cmrsam::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CmrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    DimensionMismatch = 5,
    NonFinite = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CmrView {
    /// Prompted models use the clip's own view.
    Auto = 0,
    Sax = 1,
    Lax = 2,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CmrSlice {
    NotApplicable = 0,
    Basal = 1,
    Mid = 2,
    Apical = 3,
}

/// A trained model restored from a checkpoint.
pub struct CmrModel {
    trainer: Trainer,
}

/// An image clip with its ground-truth mask.
pub struct CmrClip {
    clip: CineClip,
    mask: MaskClip,
}

/// A predicted mask.
pub struct CmrMask {
    mask: MaskClip,
    prompt_ignored: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(err: &Error) -> CmrStatus {
    match err {
        Error::Io { .. } => CmrStatus::Io,
        Error::Format { .. } => CmrStatus::Format,
        Error::DimensionMismatch(_) => CmrStatus::DimensionMismatch,
        Error::NonFinite(_) => CmrStatus::NonFinite,
        _ => CmrStatus::InvalidArgument,
    }
}

fn fail(status: CmrStatus, msg: impl Into<String>) -> CmrStatus {
    set_error(msg);
    status
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), CmrStatus>) -> CmrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CmrStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(CmrStatus::Panic, "internal panic"),
    }
}

fn lift<T>(r: cmrsam::Result<T>) -> Result<T, CmrStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

unsafe fn non_null<'a, T>(p: *const T, what: &str) -> Result<&'a T, CmrStatus> {
    p.as_ref().ok_or_else(|| fail(CmrStatus::NullPointer, format!("{what} is NULL")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, CmrStatus> {
    p.as_mut().ok_or_else(|| fail(CmrStatus::NullPointer, format!("{what} is NULL")))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, CmrStatus> {
    if p.is_null() {
        return Err(fail(CmrStatus::NullPointer, "path is NULL"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| fail(CmrStatus::InvalidArgument, "path is not valid UTF-8"))
}

fn view_arg(v: CmrView) -> Option<View> {
    match v {
        CmrView::Auto => None,
        CmrView::Sax => Some(View::Sax),
        CmrView::Lax => Some(View::Lax),
    }
}

fn slice_arg(s: CmrSlice) -> SlicePosition {
    match s {
        CmrSlice::NotApplicable => SlicePosition::NotApplicable,
        CmrSlice::Basal => SlicePosition::Basal,
        CmrSlice::Mid => SlicePosition::Mid,
        CmrSlice::Apical => SlicePosition::Apical,
    }
}

fn copy_out<T: Copy>(src: &[T], buf: *mut T, len: usize) -> Result<(), CmrStatus> {
    if buf.is_null() {
        return Err(fail(CmrStatus::NullPointer, "buffer is NULL"));
    }
    if len < src.len() {
        return Err(fail(CmrStatus::BufferTooSmall, format!("buffer holds {len}, need {}", src.len())));
    }
    unsafe { ptr::copy_nonoverlapping(src.as_ptr(), buf, src.len()) };
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cmr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Static description of a status code.
#[no_mangle]
pub extern "C" fn cmr_status_message(status: CmrStatus) -> *const c_char {
    let s: &'static str = match status {
        CmrStatus::Ok => "ok\0",
        CmrStatus::NullPointer => "null pointer argument\0",
        CmrStatus::InvalidArgument => "invalid argument\0",
        CmrStatus::Io => "i/o error\0",
        CmrStatus::Format => "malformed file\0",
        CmrStatus::DimensionMismatch => "dimension mismatch\0",
        CmrStatus::NonFinite => "non-finite value\0",
        CmrStatus::BufferTooSmall => "buffer too small\0",
        CmrStatus::Panic => "internal panic\0",
    };
    s.as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated and
/// NUL-terminated when `len > 0`). Returns the full message length in bytes,
/// excluding the terminator.
#[no_mangle]
pub unsafe extern "C" fn cmr_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

#[no_mangle]
pub unsafe extern "C" fn cmr_model_load(path: *const c_char, out: *mut *mut CmrModel) -> CmrStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let path = path_arg(path)?;
        let trainer = lift(Checkpoint::load(&path))?.into_trainer();
        *out = Box::into_raw(Box::new(CmrModel { trainer }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cmr_model_free(model: *mut CmrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Whether the model was trained with view prompts.
#[no_mangle]
pub unsafe extern "C" fn cmr_model_is_prompted(model: *const CmrModel, out: *mut bool) -> CmrStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        *out_ptr(out, "out")? = m.trainer.mode.prompted();
        Ok(())
    })
}

/// Frozen and trainable scalar parameter counts.
#[no_mangle]
pub unsafe extern "C" fn cmr_model_parameter_counts(
    model: *const CmrModel,
    frozen: *mut usize,
    trainable: *mut usize,
) -> CmrStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        let (f, t) = m.trainer.model.count_parameters();
        *out_ptr(frozen, "frozen")? = f;
        *out_ptr(trainable, "trainable")? = t;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cmr_clip_load(path: *const c_char, out: *mut *mut CmrClip) -> CmrStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let path = path_arg(path)?;
        let (clip, mask) = lift(load_clip(&path))?;
        *out = Box::into_raw(Box::new(CmrClip { clip, mask }));
        Ok(())
    })
}

/// Builds a clip from `height * width * phases` intensities in row-major
/// `(row, col, phase)` order. The ground-truth mask is all zeros.
#[no_mangle]
pub unsafe extern "C" fn cmr_clip_new(
    height: usize,
    width: usize,
    phases: usize,
    data: *const f32,
    ed_index: usize,
    es_index: usize,
    view: CmrView,
    out: *mut *mut CmrClip,
) -> CmrStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        if data.is_null() {
            return Err(fail(CmrStatus::NullPointer, "data is NULL"));
        }
        let view = view_arg(view).ok_or_else(|| fail(CmrStatus::InvalidArgument, "a clip needs a concrete view"))?;
        let dims = Dims::new(height, width, phases);
        let n = height
            .checked_mul(width)
            .and_then(|v| v.checked_mul(phases))
            .ok_or_else(|| fail(CmrStatus::InvalidArgument, "clip size overflows"))?;
        let values = std::slice::from_raw_parts(data, n).to_vec();
        let slice_position = if view == View::Lax { SlicePosition::NotApplicable } else { SlicePosition::Mid };
        let meta = ClipMeta { scan_id: "external".into(), view, slice_position, ed_index, es_index };
        let clip = lift(CineClip::new(dims, values, meta))?;
        *out = Box::into_raw(Box::new(CmrClip { clip, mask: MaskClip::zeros(dims) }));
        Ok(())
    })
}

/// A seeded synthetic clip with its exact mask.
#[no_mangle]
pub unsafe extern "C" fn cmr_clip_phantom(
    view: CmrView,
    slice: CmrSlice,
    height: usize,
    width: usize,
    phases: usize,
    seed: u64,
    out: *mut *mut CmrClip,
) -> CmrStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let view = view_arg(view).ok_or_else(|| fail(CmrStatus::InvalidArgument, "a phantom needs a concrete view"))?;
        let mut spec = ScanSpec::new("phantom", seed, vec![]);
        spec.grid = Grid { height, width, num_phases: phases };
        let (clip, mask) = lift(spec.generate(view, slice_arg(slice)))?;
        *out = Box::into_raw(Box::new(CmrClip { clip, mask }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cmr_clip_free(clip: *mut CmrClip) {
    if !clip.is_null() {
        drop(Box::from_raw(clip));
    }
}

#[no_mangle]
pub unsafe extern "C" fn cmr_clip_dims(
    clip: *const CmrClip,
    height: *mut usize,
    width: *mut usize,
    phases: *mut usize,
) -> CmrStatus {
    guard(|| {
        let d = non_null(clip, "clip")?.clip.dims;
        *out_ptr(height, "height")? = d.height;
        *out_ptr(width, "width")? = d.width;
        *out_ptr(phases, "phases")? = d.phases;
        Ok(())
    })
}

/// Copies the clip's ground-truth mask (`height * width * phases` bytes).
#[no_mangle]
pub unsafe extern "C" fn cmr_clip_mask(clip: *const CmrClip, buf: *mut u8, len: usize) -> CmrStatus {
    guard(|| copy_out(&non_null(clip, "clip")?.mask.data, buf, len))
}

/// Segments `clip`. The result has the clip's geometry.
#[no_mangle]
pub unsafe extern "C" fn cmr_segment(
    model: *const CmrModel,
    clip: *const CmrClip,
    view: CmrView,
    out: *mut *mut CmrMask,
) -> CmrStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let m = non_null(model, "model")?;
        let c = non_null(clip, "clip")?;
        let seg = lift(segment(&m.trainer, &c.clip, view_arg(view)))?;
        *out = Box::into_raw(Box::new(CmrMask { mask: seg.mask, prompt_ignored: seg.warning.is_some() }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cmr_mask_free(mask: *mut CmrMask) {
    if !mask.is_null() {
        drop(Box::from_raw(mask));
    }
}

/// Number of voxels (`height * width * phases`) in a predicted mask.
#[no_mangle]
pub unsafe extern "C" fn cmr_mask_len(mask: *const CmrMask, out: *mut usize) -> CmrStatus {
    guard(|| {
        *out_ptr(out, "out")? = non_null(mask, "mask")?.mask.data.len();
        Ok(())
    })
}

/// True when a view was requested from a model trained without prompts.
#[no_mangle]
pub unsafe extern "C" fn cmr_mask_prompt_ignored(mask: *const CmrMask, out: *mut bool) -> CmrStatus {
    guard(|| {
        *out_ptr(out, "out")? = non_null(mask, "mask")?.prompt_ignored;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cmr_mask_copy(mask: *const CmrMask, buf: *mut u8, len: usize) -> CmrStatus {
    guard(|| copy_out(&non_null(mask, "mask")?.mask.data, buf, len))
}

unsafe fn mask_pair<'a>(pred: *const u8, gt: *const u8, n: usize) -> Result<(&'a [u8], &'a [u8]), CmrStatus> {
    if pred.is_null() || gt.is_null() {
        return Err(fail(CmrStatus::NullPointer, "mask is NULL"));
    }
    Ok((std::slice::from_raw_parts(pred, n), std::slice::from_raw_parts(gt, n)))
}

/// Dice overlap of two binary masks of `n` voxels; two empty masks score 1.
#[no_mangle]
pub unsafe extern "C" fn cmr_dice(pred: *const u8, gt: *const u8, n: usize, out: *mut f64) -> CmrStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let (p, g) = mask_pair(pred, gt, n)?;
        *out = lift(metrics::dice_score(p, g))?;
        Ok(())
    })
}

/// Boundary Hausdorff distance in pixels between two `height x width`
/// frames. NaN when either frame is empty.
#[no_mangle]
pub unsafe extern "C" fn cmr_hausdorff(
    pred: *const u8,
    gt: *const u8,
    height: usize,
    width: usize,
    out: *mut f64,
) -> CmrStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let n = height.checked_mul(width).ok_or_else(|| fail(CmrStatus::InvalidArgument, "frame size overflows"))?;
        let (p, g) = mask_pair(pred, gt, n)?;
        *out = lift(metrics::hausdorff_distance(p, g, height, width))?.unwrap_or(f64::NAN);
        Ok(())
    })
}
