//! Cropping, phase resampling, intensity normalization and augmentation.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{CineClip, Dims, MaskClip};
use crate::error::{Error, Result};
use crate::rng;

/// Crops a centered `target.0 x target.1` window from every phase.
pub fn center_crop(clip: &CineClip, mask: Option<&MaskClip>, target: (usize, usize)) -> Result<(CineClip, Option<MaskClip>)> {
    let d = clip.dims;
    let (th, tw) = target;
    if th == 0 || tw == 0 || th > d.height || tw > d.width {
        return Err(Error::DimensionMismatch(format!(
            "cannot crop {}x{} to {th}x{tw}",
            d.height, d.width
        )));
    }
    if let Some(m) = mask {
        if m.dims != d {
            return Err(Error::Shape(format!("clip {} vs mask {}", d, m.dims)));
        }
    }
    let (r0, c0) = crop_offsets(d, target);
    let out = Dims::new(th, tw, d.phases);
    let window = |src_len: usize| -> Vec<usize> {
        debug_assert_eq!(src_len, d.voxels());
        let mut idx = Vec::with_capacity(out.voxels());
        for r in 0..th {
            for c in 0..tw {
                for t in 0..d.phases {
                    idx.push(d.index(r0 + r, c0 + c, t));
                }
            }
        }
        idx
    };
    let idx = window(clip.data.len());
    let data = idx.iter().map(|&i| clip.data[i]).collect();
    let cropped = CineClip { dims: out, data, meta: clip.meta.clone() };
    let cropped_mask = mask.map(|m| MaskClip { dims: out, data: idx.iter().map(|&i| m.data[i]).collect() });
    Ok((cropped, cropped_mask))
}

/// Top-left corner of the centered crop window.
pub fn crop_offsets(dims: Dims, target: (usize, usize)) -> (usize, usize) {
    ((dims.height - target.0) / 2, (dims.width - target.1) / 2)
}

/// Source phases kept by [`resample_phases`], in increasing order, together
/// with the output positions of `ed` and `es`.
pub fn phase_selection(t_in: usize, t_out: usize, ed: usize, es: usize) -> Result<(Vec<usize>, usize, usize)> {
    if t_in < 2 || t_out < 2 {
        return Err(Error::InvalidParams(format!("need at least 2 phases (in {t_in}, out {t_out})")));
    }
    if t_out > t_in {
        return Err(Error::InvalidParams(format!("cannot resample {t_in} phases up to {t_out}")));
    }
    if ed == es || ed >= t_in || es >= t_in {
        return Err(Error::InvalidParams(format!("invalid ed/es ({ed}, {es}) for {t_in} phases")));
    }
    // round(i * t_in / t_out), halves rounded up, in exact integer arithmetic
    let mut sel: Vec<usize> = (0..t_out).map(|i| (2 * i * t_in + t_out) / (2 * t_out)).collect();
    for i in 1..t_out {
        if sel[i] <= sel[i - 1] {
            sel[i] = sel[i - 1] + 1;
        }
    }
    for i in (0..t_out).rev() {
        sel[i] = sel[i].min(t_in - t_out + i);
        if i + 1 < t_out && sel[i] >= sel[i + 1] {
            sel[i] = sel[i + 1] - 1;
        }
    }
    for (key, other) in [(ed, es), (es, ed)] {
        if sel.contains(&key) {
            continue;
        }
        let slot = (0..t_out)
            .filter(|&j| sel[j] != other)
            .min_by_key(|&j| (sel[j].abs_diff(key), sel[j]))
            .expect("at least two slots");
        sel[slot] = key;
    }
    sel.sort_unstable();
    let ed_out = sel.iter().position(|&s| s == ed).expect("ed kept");
    let es_out = sel.iter().position(|&s| s == es).expect("es kept");
    Ok((sel, ed_out, es_out))
}

/// Keeps `t_out` source phases (see [`phase_selection`]); never synthesizes frames.
pub fn resample_phases(clip: &CineClip, mask: &MaskClip, t_out: usize) -> Result<(CineClip, MaskClip)> {
    let d = clip.dims;
    if mask.dims != d {
        return Err(Error::Shape(format!("clip {} vs mask {}", d, mask.dims)));
    }
    let (sel, ed, es) = phase_selection(d.phases, t_out, clip.meta.ed_index, clip.meta.es_index)?;
    let out = Dims::new(d.height, d.width, t_out);
    let mut data = Vec::with_capacity(out.voxels());
    let mut labels = Vec::with_capacity(out.voxels());
    for p in 0..d.height * d.width {
        for &s in &sel {
            data.push(clip.data[p * d.phases + s]);
            labels.push(mask.data[p * d.phases + s]);
        }
    }
    let mut meta = clip.meta.clone();
    meta.ed_index = ed;
    meta.es_index = es;
    Ok((CineClip { dims: out, data, meta }, MaskClip { dims: out, data: labels }))
}

/// Min-max scaling over the whole `H x W x T` volume; a constant volume maps to zeros.
pub fn minmax_normalize(clip: &CineClip) -> Result<CineClip> {
    if let Some(i) = clip.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("clip {:?} voxel {i}", clip.meta.scan_id)));
    }
    let (lo, hi) = clip
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v as f64), hi.max(*v as f64)));
    let range = hi - lo;
    let data = if range > 0.0 {
        clip.data.iter().map(|v| ((*v as f64 - lo) / range) as f32).collect()
    } else {
        vec![0.0; clip.data.len()]
    };
    Ok(CineClip { data, ..clip.clone() })
}

/// Deterministic preparation shared by training, evaluation and prediction.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Center crop `[height, width]`; absent keeps the stored size.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub crop: Option<[usize; 2]>,
    /// Phase count after resampling; absent keeps every phase.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phases: Option<usize>,
}

/// Crop, phase resampling and min-max scaling, in that order.
pub fn prepare_clip(clip: &CineClip, mask: &MaskClip, config: &DataConfig) -> Result<(CineClip, MaskClip)> {
    let (mut c, mut m) = (clip.clone(), mask.clone());
    if let Some([h, w]) = config.crop {
        let (cc, mm) = center_crop(&c, Some(&m), (h, w))?;
        c = cc;
        m = mm.expect("mask was supplied");
    }
    if let Some(t) = config.phases {
        (c, m) = resample_phases(&c, &m, t)?;
    }
    Ok((minmax_normalize(&c)?, m))
}

/// Probabilities and ranges of the random transforms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub p_flip_horizontal: f64,
    pub p_flip_vertical: f64,
    pub p_rotate: f64,
    pub rotation_degrees: (f64, f64),
    pub p_translate: f64,
    pub translation_pixels: (i32, i32),
    pub p_noise: f64,
    pub noise_sigma: (f64, f64),
    pub p_contrast: f64,
    pub contrast: (f64, f64),
    pub p_brightness: f64,
    pub brightness: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p_flip_horizontal: 0.5,
            p_flip_vertical: 0.5,
            p_rotate: 0.5,
            rotation_degrees: (-15.0, 15.0),
            p_translate: 0.5,
            translation_pixels: (-8, 8),
            p_noise: 0.5,
            noise_sigma: (0.0, 0.05),
            p_contrast: 0.5,
            contrast: (0.8, 1.2),
            p_brightness: 0.5,
            brightness: (-0.1, 0.1),
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            p_flip_horizontal: 0.0,
            p_flip_vertical: 0.0,
            p_rotate: 0.0,
            p_translate: 0.0,
            p_noise: 0.0,
            p_contrast: 0.0,
            p_brightness: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("p_flip_horizontal", self.p_flip_horizontal),
            ("p_flip_vertical", self.p_flip_vertical),
            ("p_rotate", self.p_rotate),
            ("p_translate", self.p_translate),
            ("p_noise", self.p_noise),
            ("p_contrast", self.p_contrast),
            ("p_brightness", self.p_brightness),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("augment.{name}={p} outside [0, 1]")));
            }
        }
        let ranges = [
            ("rotation_degrees", self.rotation_degrees),
            ("translation_pixels", (self.translation_pixels.0 as f64, self.translation_pixels.1 as f64)),
            ("noise_sigma", self.noise_sigma),
            ("contrast", self.contrast),
            ("brightness", self.brightness),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo <= hi) {
                return Err(Error::Config(format!("augment.{name}: lower bound {lo} exceeds upper bound {hi}")));
            }
        }
        if self.noise_sigma.0 < 0.0 {
            return Err(Error::Config("augment.noise_sigma must be non-negative".into()));
        }
        Ok(())
    }
}

/// One clip's realized transform parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AugmentDraw {
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    pub rotation_degrees: Option<f64>,
    pub translation: Option<(i32, i32)>,
    pub noise_sigma: Option<f64>,
    pub contrast: Option<f64>,
    pub brightness: Option<f64>,
}

impl AugmentDraw {
    /// Draws every transform's parameter whether or not it fires, so the
    /// draws of later transforms do not depend on earlier probabilities.
    pub fn sample(config: &AugmentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, &[rng::tag("augment")]);
        let fire = |p: f64, rng: &mut rand_chacha::ChaCha8Rng| rng.random::<f64>() < p;
        let uniform = |(lo, hi): (f64, f64), rng: &mut rand_chacha::ChaCha8Rng| if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let flip_horizontal = fire(config.p_flip_horizontal, &mut rng);
        let flip_vertical = fire(config.p_flip_vertical, &mut rng);
        let rot_on = fire(config.p_rotate, &mut rng);
        let rot = uniform(config.rotation_degrees, &mut rng);
        let tr_on = fire(config.p_translate, &mut rng);
        let (tlo, thi) = config.translation_pixels;
        let dy = rng.random_range(tlo..=thi);
        let dx = rng.random_range(tlo..=thi);
        let noise_on = fire(config.p_noise, &mut rng);
        let sigma = uniform(config.noise_sigma, &mut rng);
        let contrast_on = fire(config.p_contrast, &mut rng);
        let contrast = uniform(config.contrast, &mut rng);
        let bright_on = fire(config.p_brightness, &mut rng);
        let brightness = uniform(config.brightness, &mut rng);
        Ok(Self {
            flip_horizontal,
            flip_vertical,
            rotation_degrees: rot_on.then_some(rot),
            translation: tr_on.then_some((dy, dx)),
            noise_sigma: noise_on.then_some(sigma),
            contrast: contrast_on.then_some(contrast),
            brightness: bright_on.then_some(brightness),
        })
    }
}

/// Source pixel of every output pixel under the composed geometric transform,
/// `None` where the source falls outside the frame.
fn source_map(dims: Dims, draw: &AugmentDraw) -> Vec<Option<(usize, usize)>> {
    let (h, w) = (dims.height as i64, dims.width as i64);
    let (cy, cx) = ((h - 1) as f64 / 2.0, (w - 1) as f64 / 2.0);
    let (dy, dx) = draw.translation.unwrap_or((0, 0));
    let rot = draw.rotation_degrees.map(|deg| deg.to_radians());
    let mut map = Vec::with_capacity((h * w) as usize);
    for r in 0..h {
        for c in 0..w {
            // undo in reverse order: translation, rotation, flips
            let (mut sr, mut sc) = (r - dy as i64, c - dx as i64);
            if let Some(theta) = rot {
                let (y, x) = (sr as f64 - cy, sc as f64 - cx);
                let (s, co) = theta.sin_cos();
                sr = (co * y + s * x + cy).round() as i64;
                sc = (-s * y + co * x + cx).round() as i64;
            }
            if draw.flip_vertical {
                sr = h - 1 - sr;
            }
            if draw.flip_horizontal {
                sc = w - 1 - sc;
            }
            map.push((sr >= 0 && sr < h && sc >= 0 && sc < w).then_some((sr as usize, sc as usize)));
        }
    }
    map
}

/// Applies a realized draw. Geometry hits image and mask alike, identically
/// for every phase; photometric changes touch the image only.
pub fn apply_draw(clip: &CineClip, mask: &MaskClip, draw: &AugmentDraw, seed: u64) -> Result<(CineClip, MaskClip)> {
    let d = clip.dims;
    if mask.dims != d {
        return Err(Error::Shape(format!("clip {} vs mask {}", d, mask.dims)));
    }
    let geometric = draw.flip_horizontal || draw.flip_vertical || draw.rotation_degrees.is_some() || draw.translation.is_some();
    let (mut data, labels) = if geometric {
        let map = source_map(d, draw);
        let mut data = vec![0f32; d.voxels()];
        let mut labels = vec![0u8; d.voxels()];
        for (p, src) in map.iter().enumerate() {
            if let Some((sr, sc)) = *src {
                let s = (sr * d.width + sc) * d.phases;
                data[p * d.phases..(p + 1) * d.phases].copy_from_slice(&clip.data[s..s + d.phases]);
                labels[p * d.phases..(p + 1) * d.phases].copy_from_slice(&mask.data[s..s + d.phases]);
            }
        }
        (data, labels)
    } else {
        (clip.data.clone(), mask.data.clone())
    };
    if let Some(k) = draw.contrast {
        let mean = data.iter().map(|v| *v as f64).sum::<f64>() / data.len() as f64;
        for v in data.iter_mut() {
            *v = (mean + k * (*v as f64 - mean)).clamp(0.0, 1.0) as f32;
        }
    }
    if let Some(b) = draw.brightness {
        for v in data.iter_mut() {
            *v = (*v as f64 + b).clamp(0.0, 1.0) as f32;
        }
    }
    if let Some(sigma) = draw.noise_sigma {
        let mut rng = rng::stream(seed, &[rng::tag("augment-noise")]);
        for v in data.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = (*v as f64 + sigma * z).clamp(0.0, 1.0) as f32;
        }
    }
    Ok((CineClip { dims: d, data, meta: clip.meta.clone() }, MaskClip { dims: d, data: labels }))
}

pub fn augment(clip: &CineClip, mask: &MaskClip, seed: u64, config: &AugmentConfig) -> Result<(CineClip, MaskClip)> {
    let draw = AugmentDraw::sample(config, seed)?;
    apply_draw(clip, mask, &draw, seed)
}
