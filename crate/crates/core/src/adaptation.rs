//! Pseudo ground-truth interest points from a window of consecutive frames.
//!
//! Each reference frame `I_i` is paired with a random subset of the next
//! `window_len - 1` frames. Detections in those frames are re-projected onto
//! `I_i` with depth, a small patch of the source heatmap is stamped at the
//! landing pixel, and everything is merged with `I_i`'s own heatmap before a
//! final non-maximum suppression.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use image::RgbImage;
use nalgebra::Point2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{reproject, PosedDepth, PrPParams};

/// Row-major detector scores in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Heatmap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "heatmap of {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(Error::InvalidParam(format!("heatmap value {v} outside [0, 1]")));
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub x: usize,
    pub y: usize,
    pub score: f64,
}

/// Greedy non-maximum suppression. Candidates are pixels with a positive
/// score of at least `threshold`, visited by descending score (row-major on
/// ties); a kept point suppresses every candidate within Chebyshev distance
/// `radius`.
pub fn nms(h: &Heatmap, radius: usize, threshold: f64) -> Vec<Peak> {
    let mut order: Vec<usize> = (0..h.data.len())
        .filter(|&i| h.data[i] > 0.0 && h.data[i] >= threshold)
        .collect();
    order.sort_by(|&a, &b| h.data[b].total_cmp(&h.data[a]).then(a.cmp(&b)));
    let mut blocked = vec![false; h.data.len()];
    let mut kept = Vec::new();
    let r = radius as isize;
    for i in order {
        if blocked[i] {
            continue;
        }
        let (x, y) = (i % h.width, i / h.width);
        kept.push(Peak {
            x,
            y,
            score: h.data[i],
        });
        let y0 = (y as isize - r).max(0) as usize;
        let y1 = (y as isize + r).min(h.height as isize - 1) as usize;
        let x0 = (x as isize - r).max(0) as usize;
        let x1 = (x as isize + r).min(h.width as isize - 1) as usize;
        for yy in y0..=y1 {
            blocked[yy * h.width + x0..=yy * h.width + x1].fill(true);
        }
    }
    kept
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    #[default]
    Max,
    Mean,
    /// Clamped to 1.
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptationParams {
    pub window_len: usize,
    pub n_sampled: usize,
    pub nms_radius: usize,
    pub patch: usize,
    pub threshold: f64,
    pub seed: u64,
    pub aggregation: Aggregation,
}

impl Default for AdaptationParams {
    fn default() -> Self {
        Self {
            window_len: 20,
            n_sampled: 14,
            nms_radius: 4,
            patch: 3,
            threshold: 0.015,
            seed: 0,
            aggregation: Aggregation::Max,
        }
    }
}

impl AdaptationParams {
    pub fn validate(&self) -> Result<()> {
        if self.window_len == 0 {
            return Err(Error::InvalidParam("window_len must be positive".into()));
        }
        if self.n_sampled >= self.window_len {
            return Err(Error::InvalidParam(format!(
                "n_sampled ({}) must be below window_len ({})",
                self.n_sampled, self.window_len
            )));
        }
        if self.patch % 2 == 0 {
            return Err(Error::InvalidParam(format!("patch side {} must be odd", self.patch)));
        }
        if self.nms_radius == 0 {
            return Err(Error::InvalidParam("nms_radius must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::InvalidParam(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLabels {
    pub frame: usize,
    pub points: Vec<(u32, u32)>,
}

/// A stamped patch mask: only touched pixels carry a value.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferredMask {
    pub width: usize,
    pub height: usize,
    pub values: Vec<Option<f64>>,
    pub transferred: usize,
}

impl TransferredMask {
    pub fn to_heatmap(&self) -> Heatmap {
        Heatmap {
            width: self.width,
            height: self.height,
            data: self.values.iter().map(|v| v.unwrap_or(0.0)).collect(),
        }
    }
}

/// Re-projects `points` of `src` into `dst` and copies the `patch`×`patch`
/// neighbourhood of each point in `src_heat` around the rounded landing
/// pixel. Overlapping stamps keep the larger value; rejected points and
/// off-image patch pixels are skipped.
pub fn transfer_mask<S, D>(
    src_heat: &Heatmap,
    points: &[Peak],
    src: &S,
    dst: &D,
    patch: usize,
    prp: &PrPParams,
) -> TransferredMask
where
    S: PosedDepth + ?Sized,
    D: PosedDepth + ?Sized,
{
    let cam = dst.camera();
    let (w, h) = (cam.width, cam.height);
    let mut values = vec![None; w * h];
    let mut transferred = 0;
    let half = (patch / 2) as isize;
    for p in points {
        let Ok(q) = reproject(&Point2::new(p.x as f64, p.y as f64), src, dst, prp) else {
            continue;
        };
        transferred += 1;
        let (qx, qy) = (q.x.round() as isize, q.y.round() as isize);
        for dy in -half..=half {
            for dx in -half..=half {
                let (sx, sy) = (p.x as isize + dx, p.y as isize + dy);
                let (tx, ty) = (qx + dx, qy + dy);
                if sx < 0 || sy < 0 || sx >= src_heat.width as isize || sy >= src_heat.height as isize {
                    continue;
                }
                if tx < 0 || ty < 0 || tx >= w as isize || ty >= h as isize {
                    continue;
                }
                let v = src_heat.get(sx as usize, sy as usize);
                let slot = &mut values[ty as usize * w + tx as usize];
                *slot = Some(slot.map_or(v, |old: f64| old.max(v)));
            }
        }
    }
    TransferredMask {
        width: w,
        height: h,
        values,
        transferred,
    }
}

/// Merges the reference heatmap with the masks. Pixels that no mask touched
/// keep the reference value exactly.
pub fn aggregate(base: &Heatmap, masks: &[TransferredMask], how: Aggregation) -> Heatmap {
    let mut out = base.clone();
    for (i, v) in out.data.iter_mut().enumerate() {
        let stamped = masks.iter().filter_map(|m| m.values[i]);
        match how {
            Aggregation::Max => {
                for s in stamped {
                    *v = v.max(s);
                }
            }
            Aggregation::Mean => {
                let (mut sum, mut n) = (0.0, 0usize);
                for s in stamped {
                    sum += s;
                    n += 1;
                }
                if n > 0 {
                    *v = (*v + sum) / (n + 1) as f64;
                }
            }
            Aggregation::Sum => {
                for s in stamped {
                    *v += s;
                }
                *v = v.min(1.0);
            }
        }
    }
    out
}

/// The frames sampled for reference frame `i`: `n_sampled` distinct frames
/// from `i+1 ..= i+window_len-1`, in ascending order.
pub fn sampled_frames(i: usize, params: &AdaptationParams) -> Vec<usize> {
    let pool = params.window_len.saturating_sub(1);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, pool, params.n_sampled.min(pool))
        .into_iter()
        .map(|o| i + 1 + o)
        .collect();
    picked.sort_unstable();
    picked
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationResult {
    pub labels: PseudoLabels,
    pub sampled: Vec<usize>,
    pub transferred: usize,
    pub aggregate: Heatmap,
}

/// Runs the procedure for reference frame `i` using precomputed heatmaps
/// (one per view).
pub fn adapt_frame<V: PosedDepth + Sync>(
    views: &[V],
    heatmaps: &[Heatmap],
    i: usize,
    params: &AdaptationParams,
    prp: &PrPParams,
) -> Result<AdaptationResult> {
    params.validate()?;
    if views.len() != heatmaps.len() {
        return Err(Error::Shape(format!("{} views but {} heatmaps", views.len(), heatmaps.len())));
    }
    if i + params.window_len > views.len() {
        return Err(Error::EmptyScene(format!(
            "window of {} frames starting at {i} exceeds a scene of {} frames",
            params.window_len,
            views.len()
        )));
    }
    let sampled = sampled_frames(i, params);
    let masks: Vec<TransferredMask> = sampled
        .iter()
        .map(|&r| {
            let peaks = nms(&heatmaps[r], params.nms_radius, params.threshold);
            transfer_mask(&heatmaps[r], &peaks, &views[r], &views[i], params.patch, prp)
        })
        .collect();
    let transferred = masks.iter().map(|m| m.transferred).sum();
    let agg = aggregate(&heatmaps[i], &masks, params.aggregation);
    let points = nms(&agg, params.nms_radius, params.threshold)
        .into_iter()
        .map(|p| (p.x as u32, p.y as u32))
        .collect();
    Ok(AdaptationResult {
        labels: PseudoLabels { frame: i, points },
        sampled,
        transferred,
        aggregate: agg,
    })
}

/// Labels for every reference frame in `refs` (all valid starts when `None`).
/// Heatmaps are computed once per frame; reference frames run in parallel.
pub fn projective_adaptation<V, F>(
    views: &[V],
    images: &[&RgbImage],
    detector: F,
    params: &AdaptationParams,
    prp: &PrPParams,
    refs: Option<&[usize]>,
) -> Result<Vec<PseudoLabels>>
where
    V: PosedDepth + Sync,
    F: Fn(&RgbImage) -> Result<Heatmap> + Sync,
{
    params.validate()?;
    prp.validate()?;
    if views.len() < params.window_len {
        return Err(Error::EmptyScene(format!(
            "scene has {} frames, window needs {}",
            views.len(),
            params.window_len
        )));
    }
    if images.len() != views.len() {
        return Err(Error::Shape(format!("{} views but {} images", views.len(), images.len())));
    }
    let all: Vec<usize> = (0..=views.len() - params.window_len).collect();
    let refs = refs.unwrap_or(&all);
    let heatmaps = images
        .par_iter()
        .map(|img| detector(img))
        .collect::<Result<Vec<_>>>()?;
    refs.par_iter()
        .map(|&i| adapt_frame(views, &heatmaps, i, params, prp).map(|r| r.labels))
        .collect()
}

/// `frame_idx x y` per line.
pub fn labels_to_text(labels: &[PseudoLabels]) -> String {
    let mut s = String::new();
    for l in labels {
        for (x, y) in &l.points {
            writeln!(s, "{} {x} {y}", l.frame).expect("write to string");
        }
    }
    s
}

/// Inverse of [`labels_to_text`]. Frames appear in ascending order; a frame
/// without points is not represented in the text.
pub fn labels_from_text(text: &str) -> std::result::Result<Vec<PseudoLabels>, String> {
    let mut by_frame: BTreeMap<usize, Vec<(u32, u32)>> = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 {
            return Err(format!("line {}: expected `frame x y`", n + 1));
        }
        let bad = |e: std::num::ParseIntError| format!("line {}: {e}", n + 1);
        let frame: usize = f[0].parse().map_err(bad)?;
        let x: u32 = f[1].parse().map_err(bad)?;
        let y: u32 = f[2].parse().map_err(bad)?;
        by_frame.entry(frame).or_default().push((x, y));
    }
    Ok(by_frame
        .into_iter()
        .map(|(frame, points)| PseudoLabels { frame, points })
        .collect())
}
