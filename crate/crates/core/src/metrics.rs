//! Dice, boundary Hausdorff distance and slice-stratified reports.

use std::fmt::Write as _;

use serde::Serialize;

use crate::dataset::{ClipMeta, MaskClip, SlicePosition, View};
use crate::error::{Error, Result};

pub fn binarize(probabilities: &[f32], threshold: f32) -> Vec<u8> {
    probabilities.iter().map(|p| (*p >= threshold) as u8).collect()
}

/// `2|P∩G| / (|P|+|G|)`, with two empty masks scoring 1.
pub fn dice_score(pred: &[u8], gt: &[u8]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("dice: {} vs {} voxels", pred.len(), gt.len())));
    }
    let (mut inter, mut total) = (0usize, 0usize);
    for (p, g) in pred.iter().zip(gt) {
        let (p, g) = ((*p != 0) as usize, (*g != 0) as usize);
        inter += p & g;
        total += p + g;
    }
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// Foreground pixels with at least one background 4-neighbour; outside the
/// frame counts as background.
pub fn boundary(mask: &[u8], height: usize, width: usize) -> Vec<(usize, usize)> {
    let fg = |r: isize, c: isize| {
        r >= 0 && c >= 0 && (r as usize) < height && (c as usize) < width && mask[r as usize * width + c as usize] != 0
    };
    let mut out = Vec::new();
    for r in 0..height as isize {
        for c in 0..width as isize {
            if fg(r, c) && !(fg(r - 1, c) && fg(r + 1, c) && fg(r, c - 1) && fg(r, c + 1)) {
                out.push((r as usize, c as usize));
            }
        }
    }
    out
}

/// Exact squared Euclidean distance to the nearest site, by separable lower
/// envelopes of parabolas. Cells are `None` when there are no sites at all.
pub fn squared_distance_transform(sites: &[(usize, usize)], height: usize, width: usize) -> Vec<Option<u64>> {
    if sites.is_empty() {
        return vec![None; height * width];
    }
    // columns: distance along each column to the nearest site in that column
    let mut col = vec![None::<u64>; height * width];
    let mut in_col = vec![Vec::new(); width];
    for &(r, c) in sites {
        in_col[c].push(r as i64);
    }
    for (c, rows) in in_col.iter_mut().enumerate() {
        rows.sort_unstable();
        rows.dedup();
        let f: Vec<(i64, i64)> = rows.iter().map(|&r| (r, 0)).collect();
        for (r, d) in envelope(&f, height).into_iter().enumerate() {
            col[r * width + c] = d;
        }
    }
    let mut out = vec![None; height * width];
    for r in 0..height {
        let f: Vec<(i64, i64)> =
            (0..width).filter_map(|c| col[r * width + c].map(|d| (c as i64, d as i64))).collect();
        for (c, d) in envelope(&f, width).into_iter().enumerate() {
            out[r * width + c] = d;
        }
    }
    out
}

/// `min_i (q - x_i)^2 + f_i` for `q` in `0..n`, given finite samples `(x_i, f_i)`
/// with strictly increasing positions.
fn envelope(samples: &[(i64, i64)], n: usize) -> Vec<Option<u64>> {
    if samples.is_empty() {
        return vec![None; n];
    }
    let mut sites: Vec<(i64, i64)> = Vec::with_capacity(samples.len());
    let mut bounds: Vec<f64> = Vec::with_capacity(samples.len());
    let meet = |a: (i64, i64), b: (i64, i64)| -> f64 {
        ((b.1 + b.0 * b.0) - (a.1 + a.0 * a.0)) as f64 / (2 * (b.0 - a.0)) as f64
    };
    for &s in samples {
        loop {
            match sites.last() {
                Some(&top) if bounds.last().is_some_and(|&b| meet(top, s) <= b) => {
                    sites.pop();
                    bounds.pop();
                }
                Some(&top) => {
                    bounds.push(meet(top, s));
                    break;
                }
                None => break,
            }
        }
        sites.push(s);
    }
    // bounds[k] separates sites[k] and sites[k + 1]
    let mut out = Vec::with_capacity(n);
    let mut k = 0;
    for q in 0..n as i64 {
        while k < bounds.len() && bounds[k] < q as f64 {
            k += 1;
        }
        let (x, f) = sites[k];
        let mut best = (q - x) * (q - x) + f;
        if k + 1 < sites.len() {
            let (x2, f2) = sites[k + 1];
            best = best.min((q - x2) * (q - x2) + f2);
        }
        out.push(Some(best as u64));
    }
    out
}

/// Symmetric boundary Hausdorff distance in pixels for one 2-D frame, or
/// `None` when either mask is empty.
pub fn hausdorff_distance(pred: &[u8], gt: &[u8], height: usize, width: usize) -> Result<Option<f64>> {
    if pred.len() != height * width || gt.len() != height * width {
        return Err(Error::Shape(format!(
            "hausdorff: {} and {} pixels for a {height}x{width} frame",
            pred.len(),
            gt.len()
        )));
    }
    let a = boundary(pred, height, width);
    let b = boundary(gt, height, width);
    if a.is_empty() || b.is_empty() {
        return Ok(None);
    }
    let directed = |from: &[(usize, usize)], to: &[(usize, usize)]| -> u64 {
        let dt = squared_distance_transform(to, height, width);
        from.iter().map(|&(r, c)| dt[r * width + c].expect("non-empty sites")).max().unwrap_or(0)
    };
    Ok(Some((directed(&a, &b).max(directed(&b, &a)) as f64).sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClipMetrics {
    pub scan_id: String,
    pub view: View,
    pub slice_position: SlicePosition,
    pub phases: usize,
    /// Phases with a defined Hausdorff distance.
    pub hd_phases: usize,
    /// Dice over the whole `H x W x T` volume.
    pub dice: f64,
    /// Mean of the per-phase Hausdorff distances, if any phase was defined.
    pub hd_pixels: Option<f64>,
}

pub fn evaluate_clip(pred: &MaskClip, gt: &MaskClip, meta: &ClipMeta) -> Result<ClipMetrics> {
    if pred.dims != gt.dims {
        return Err(Error::Shape(format!("prediction {} vs ground truth {}", pred.dims, gt.dims)));
    }
    let d = gt.dims;
    let dice = dice_score(&pred.data, &gt.data)?;
    let mut hds = Vec::new();
    for t in 0..d.phases {
        if let Some(hd) = hausdorff_distance(&pred.frame(t), &gt.frame(t), d.height, d.width)? {
            hds.push(hd);
        }
    }
    Ok(ClipMetrics {
        scan_id: meta.scan_id.clone(),
        view: meta.view,
        slice_position: meta.slice_position,
        phases: d.phases,
        hd_phases: hds.len(),
        dice,
        hd_pixels: (!hds.is_empty()).then(|| hds.iter().sum::<f64>() / hds.len() as f64),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupSummary {
    pub group: String,
    pub count: usize,
    pub mean_dice: f64,
    /// Rows contributing to `mean_hd` (rows without any defined phase are left out).
    pub hd_count: usize,
    pub mean_hd: Option<f64>,
    pub excluded_phases: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub rows: Vec<ClipMetrics>,
    pub groups: Vec<GroupSummary>,
}

fn summarize(group: &str, rows: &[&ClipMetrics]) -> Option<GroupSummary> {
    if rows.is_empty() {
        return None;
    }
    let hd: Vec<f64> = rows.iter().filter_map(|r| r.hd_pixels).collect();
    Some(GroupSummary {
        group: group.to_string(),
        count: rows.len(),
        mean_dice: rows.iter().map(|r| r.dice).sum::<f64>() / rows.len() as f64,
        hd_count: hd.len(),
        mean_hd: (!hd.is_empty()).then(|| hd.iter().sum::<f64>() / hd.len() as f64),
        excluded_phases: rows.iter().map(|r| r.phases - r.hd_phases).sum(),
    })
}

/// Groups: `all`, each slice level present, then each view present. Groups
/// without members are omitted.
pub fn stratified_report(mut rows: Vec<ClipMetrics>) -> MetricsReport {
    rows.sort_by(|a, b| {
        (&a.scan_id, a.view, a.slice_position.code()).cmp(&(&b.scan_id, b.view, b.slice_position.code()))
    });
    let mut groups = Vec::new();
    let all: Vec<&ClipMetrics> = rows.iter().collect();
    groups.extend(summarize("all", &all));
    for level in SlicePosition::LEVELS {
        let members: Vec<&ClipMetrics> = rows.iter().filter(|r| r.slice_position == level).collect();
        groups.extend(summarize(level.name(), &members));
    }
    for view in [View::Sax, View::Lax] {
        let members: Vec<&ClipMetrics> = rows.iter().filter(|r| r.view == view).collect();
        groups.extend(summarize(view.keyword(), &members));
    }
    MetricsReport { rows, groups }
}

impl MetricsReport {
    pub fn group(&self, name: &str) -> Option<&GroupSummary> {
        self.groups.iter().find(|g| g.group == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("scan_id,view,slice_position,phases,hd_phases,dice,hd_pixels\n");
        for r in &self.rows {
            let hd = r.hd_pixels.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.scan_id, r.view, r.slice_position, r.phases, r.hd_phases, r.dice, hd
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Summary<'a> {
            clips: usize,
            groups: &'a [GroupSummary],
        }
        serde_json::to_string_pretty(&Summary { clips: self.rows.len(), groups: &self.groups })
            .expect("report serializes")
    }
}
