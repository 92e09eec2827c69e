//! Classical stand-in for a learned keypoint network: a min-eigenvalue
//! corner scorer, a gradient-histogram patch descriptor and mutual
//! nearest-neighbour matching.

use std::fmt::Write as _;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptation::{nms, Heatmap};
use crate::error::{Error, Result};

/// Row-major grayscale intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayF {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GrayF {
    pub fn from_rgb(img: &RgbImage) -> Self {
        let data = img
            .pixels()
            .map(|p| (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0)
            .collect();
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data,
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

pub const MIN_DETECT_SIZE: usize = 7;

/// Sobel gradients; zero on the one-pixel border.
fn sobel(g: &GrayF) -> (Vec<f64>, Vec<f64>) {
    let (w, h) = (g.width, g.height);
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let p = |dx: isize, dy: isize| g.at((x as isize + dx) as usize, (y as isize + dy) as usize);
            gx[y * w + x] = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
            gy[y * w + x] = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
        }
    }
    (gx, gy)
}

/// Corner response: smallest eigenvalue of the structure tensor (Sobel
/// gradients, 3×3 binomial window), divided by the image maximum.
pub fn detect(image: &RgbImage) -> Result<Heatmap> {
    detect_gray(&GrayF::from_rgb(image))
}

pub fn detect_gray(g: &GrayF) -> Result<Heatmap> {
    let (w, h) = (g.width, g.height);
    if w < MIN_DETECT_SIZE || h < MIN_DETECT_SIZE {
        return Err(Error::TooSmall {
            width: w,
            height: h,
            min: MIN_DETECT_SIZE,
        });
    }
    let (gx, gy) = sobel(g);
    let kernel = [1.0, 2.0, 1.0];
    let mut response = vec![0.0; w * h];
    response
        .par_chunks_mut(w)
        .enumerate()
        .filter(|(y, _)| *y >= 2 && *y < h - 2)
        .for_each(|(y, row)| {
            for (x, out) in row.iter_mut().enumerate().take(w - 2).skip(2) {
                let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
                for (j, ky) in kernel.iter().enumerate() {
                    for (i, kx) in kernel.iter().enumerate() {
                        let idx = (y + j - 1) * w + (x + i - 1);
                        let k = kx * ky / 16.0;
                        a += k * gx[idx] * gx[idx];
                        b += k * gx[idx] * gy[idx];
                        c += k * gy[idx] * gy[idx];
                    }
                }
                let mean = 0.5 * (a + c);
                let dev = (0.25 * (a - c) * (a - c) + b * b).sqrt();
                *out = (mean - dev).max(0.0);
            }
        });
    let max = response.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        for v in &mut response {
            *v = (*v / max).clamp(0.0, 1.0);
        }
    }
    Heatmap::new(w, h, response)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    pub points: Vec<Keypoint>,
}

impl KeypointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            points: idx.iter().map(|&i| self.points[i]).collect(),
        }
    }
}

/// Non-maximum suppression, then the `k` best by score.
pub fn top_k(heatmap: &Heatmap, k: usize, nms_radius: usize) -> KeypointSet {
    let mut peaks = nms(heatmap, nms_radius.max(1), 0.0);
    peaks.truncate(k);
    KeypointSet {
        points: peaks
            .into_iter()
            .map(|p| Keypoint {
                x: p.x as f64,
                y: p.y as f64,
                score: p.score,
            })
            .collect(),
    }
}

/// Detection, top-`k` selection and description in one call.
pub fn extract(image: &RgbImage, k: usize, nms_radius: usize, dim: usize) -> Result<Described> {
    let g = GrayF::from_rgb(image);
    let heat = detect_gray(&g)?;
    describe_gray(&g, &top_k(&heat, k, nms_radius), dim)
}

/// Every `stride`-th pixel at least `margin` pixels from the border.
pub fn dense_grid(width: usize, height: usize, stride: usize, margin: usize) -> KeypointSet {
    let stride = stride.max(1);
    let mut points = Vec::new();
    let mut y = margin;
    while y + margin < height {
        let mut x = margin;
        while x + margin < width {
            points.push(Keypoint {
                x: x as f64,
                y: y as f64,
                score: 1.0,
            });
            x += stride;
        }
        y += stride;
    }
    KeypointSet { points }
}

/// Unit-norm descriptors, one row of `dim` values per kept keypoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptorSet {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl DescriptorSet {
    pub fn len(&self) -> usize {
        self.data.len() / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn dot(&self, i: usize, other: &DescriptorSet, j: usize) -> f64 {
        dot(self.get(i), other.get(j))
    }
}

/// Dot product with four independent accumulators, so the loop vectorizes.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub const PATCH: usize = 16;
const SPATIAL: usize = 4;
const ORIENT: usize = 8;
const RAW_DIM: usize = SPATIAL * SPATIAL * ORIENT;

/// Output of [`describe`]: descriptors for the keypoints that had a full
/// patch, plus the indices of the ones that did not.
#[derive(Debug, Clone, PartialEq)]
pub struct Described {
    pub keypoints: KeypointSet,
    pub descriptors: DescriptorSet,
    pub dropped: Vec<usize>,
}

/// Gradient-orientation histogram over a 16×16 patch: 4×4 spatial cells ×
/// 8 orientation bins, resampled to `dim`, mean-centered, L2-normalized,
/// clipped and renormalized. The clip level is 0.2 at 128 dimensions and
/// scales with `sqrt(128 / dim)` otherwise.
pub fn describe(image: &RgbImage, keypoints: &KeypointSet, dim: usize) -> Result<Described> {
    describe_gray(&GrayF::from_rgb(image), keypoints, dim)
}

pub fn describe_gray(g: &GrayF, keypoints: &KeypointSet, dim: usize) -> Result<Described> {
    if dim == 0 {
        return Err(Error::InvalidParam("descriptor dimension must be positive".into()));
    }
    let half = (PATCH / 2) as isize;
    let (w, h) = (g.width as isize, g.height as isize);
    let fits = |kp: &Keypoint| {
        let cx = kp.x.round() as isize;
        let cy = kp.y.round() as isize;
        cx - half - 1 >= 0 && cy - half - 1 >= 0 && cx + half <= w - 1 && cy + half <= h - 1
    };
    let (mut kept, mut dropped) = (Vec::new(), Vec::new());
    for (i, kp) in keypoints.points.iter().enumerate() {
        if fits(kp) {
            kept.push(i);
        } else {
            dropped.push(i);
        }
    }
    let rows: Vec<Vec<f64>> = kept
        .par_iter()
        .map(|&i| {
            let kp = &keypoints.points[i];
            let raw = raw_histogram(g, kp.x.round() as usize, kp.y.round() as usize);
            finalize(&resample(&raw, dim))
        })
        .collect();
    Ok(Described {
        keypoints: keypoints.subset(&kept),
        descriptors: DescriptorSet {
            dim,
            data: rows.concat(),
        },
        dropped,
    })
}

fn raw_histogram(g: &GrayF, cx: usize, cy: usize) -> [f64; RAW_DIM] {
    let mut hist = [0.0; RAW_DIM];
    let half = PATCH / 2;
    let sigma = 0.5 * PATCH as f64;
    let cell = PATCH / SPATIAL;
    for py in 0..PATCH {
        for px in 0..PATCH {
            let x = cx + px - half;
            let y = cy + py - half;
            let dx = g.at(x + 1, y) - g.at(x - 1, y);
            let dy = g.at(x, y + 1) - g.at(x, y - 1);
            let mag = (dx * dx + dy * dy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let ox = px as f64 - half as f64 + 0.5;
            let oy = py as f64 - half as f64 + 0.5;
            let weight = mag * (-(ox * ox + oy * oy) / (2.0 * sigma * sigma)).exp();
            let angle = dy.atan2(dx).rem_euclid(std::f64::consts::TAU);
            let bin = angle / std::f64::consts::TAU * ORIENT as f64;
            let b0 = (bin.floor() as usize) % ORIENT;
            let b1 = (b0 + 1) % ORIENT;
            let frac = bin - bin.floor();
            let base = ((py / cell) * SPATIAL + px / cell) * ORIENT;
            hist[base + b0] += weight * (1.0 - frac);
            hist[base + b1] += weight * frac;
        }
    }
    hist
}

/// Area-weighted resampling of a piecewise-constant vector to `dim` bins.
fn resample(raw: &[f64], dim: usize) -> Vec<f64> {
    let n = raw.len();
    if dim == n {
        return raw.to_vec();
    }
    let ratio = n as f64 / dim as f64;
    (0..dim)
        .map(|k| {
            let lo = k as f64 * ratio;
            let hi = lo + ratio;
            let mut sum = 0.0;
            let mut i = lo.floor() as usize;
            while (i as f64) < hi && i < n {
                let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                sum += raw[i] * overlap;
                i += 1;
            }
            sum
        })
        .collect()
}

fn finalize(v: &[f64]) -> Vec<f64> {
    let dim = v.len();
    let mean = v.iter().sum::<f64>() / dim as f64;
    let mut out: Vec<f64> = v.iter().map(|x| x - mean).collect();
    if !normalize(&mut out) {
        // textureless patch
        let mut e = vec![0.0; dim];
        e[0] = 1.0;
        return e;
    }
    let clip = (0.2 * (RAW_DIM as f64 / dim as f64).sqrt()).min(1.0);
    if clip < 1.0 {
        for x in &mut out {
            *x = x.clamp(-clip, clip);
        }
        normalize(&mut out);
    }
    out
}

fn normalize(v: &mut [f64]) -> bool {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n <= 1e-12 {
        return false;
    }
    for x in v.iter_mut() {
        *x /= n;
    }
    true
}

/// Index pair from descriptor matching.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndexMatch {
    pub i: usize,
    pub j: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, Default)]
struct Best {
    idx: usize,
    first: f64,
    second: f64,
}

impl Best {
    fn new() -> Self {
        Self {
            idx: usize::MAX,
            first: f64::NEG_INFINITY,
            second: f64::NEG_INFINITY,
        }
    }

    fn push(&mut self, idx: usize, s: f64) {
        if s > self.first {
            self.second = self.first;
            self.first = s;
            self.idx = idx;
        } else if s > self.second {
            self.second = s;
        }
    }

    /// Combines with bests over later indices.
    fn merge(&mut self, later: &Best) {
        if later.idx != usize::MAX {
            self.push(later.idx, later.first);
            self.push(usize::MAX, later.second);
        }
    }

    fn passes_ratio(&self, ratio: f64) -> bool {
        if self.second == f64::NEG_INFINITY {
            return true;
        }
        let d1 = (2.0 - 2.0 * self.first).max(0.0).sqrt();
        let d2 = (2.0 - 2.0 * self.second).max(0.0).sqrt();
        d2 > 0.0 && d1 / d2 < ratio
    }
}

/// Mutual nearest neighbours by cosine similarity. With `ratio`, a pair also
/// needs nearest/second-nearest Euclidean distance below `ratio` in both
/// directions, which keeps the result symmetric. Ties go to the lower index.
pub fn match_mnn(a: &DescriptorSet, b: &DescriptorSet, ratio: Option<f64>) -> Vec<IndexMatch> {
    let (n, m) = (a.len(), b.len());
    if n == 0 || m == 0 {
        return Vec::new();
    }
    // One pass over the similarity matrix in row blocks; each block keeps its
    // own column bests, merged in block order so ties still favour low rows.
    const BLOCK: usize = 256;
    let blocks: Vec<(Vec<Best>, Vec<Best>)> = (0..n.div_ceil(BLOCK))
        .into_par_iter()
        .map(|k| {
            let rows = k * BLOCK..((k + 1) * BLOCK).min(n);
            let mut cols = vec![Best::new(); m];
            let rows = rows
                .map(|i| {
                    let mut best = Best::new();
                    let ai = a.get(i);
                    for (j, col) in cols.iter_mut().enumerate() {
                        let s = dot(ai, b.get(j));
                        best.push(j, s);
                        col.push(i, s);
                    }
                    best
                })
                .collect();
            (rows, cols)
        })
        .collect();
    let mut rows = Vec::with_capacity(n);
    let mut cols = vec![Best::new(); m];
    for (r, c) in blocks {
        rows.extend(r);
        for (acc, other) in cols.iter_mut().zip(&c) {
            acc.merge(other);
        }
    }
    rows.iter()
        .enumerate()
        .filter_map(|(i, r)| {
            let j = r.idx;
            if cols[j].idx != i {
                return None;
            }
            if let Some(t) = ratio {
                if !(r.passes_ratio(t) && cols[j].passes_ratio(t)) {
                    return None;
                }
            }
            Some(IndexMatch {
                i,
                j,
                score: r.first,
            })
        })
        .collect()
}

/// `x y score d_1 ... d_D` per line.
pub fn keypoints_to_text(kps: &KeypointSet, desc: Option<&DescriptorSet>) -> String {
    let mut s = String::new();
    for (i, k) in kps.points.iter().enumerate() {
        write!(s, "{} {} {}", k.x, k.y, k.score).expect("write to string");
        if let Some(d) = desc {
            for v in d.get(i) {
                write!(s, " {v}").expect("write to string");
            }
        }
        s.push('\n');
    }
    s
}

pub fn keypoints_from_text(text: &str) -> std::result::Result<(KeypointSet, Option<DescriptorSet>), String> {
    let mut points = Vec::new();
    let mut data = Vec::new();
    let mut dim: Option<usize> = None;
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals: std::result::Result<Vec<f64>, _> = line.split_whitespace().map(str::parse).collect();
        let vals = vals.map_err(|e| format!("line {}: {e}", n + 1))?;
        if vals.len() < 3 {
            return Err(format!("line {}: expected at least x y score", n + 1));
        }
        let d = vals.len() - 3;
        match dim {
            None => dim = Some(d),
            Some(prev) if prev != d => {
                return Err(format!("line {}: descriptor length {d} differs from {prev}", n + 1))
            }
            _ => {}
        }
        points.push(Keypoint {
            x: vals[0],
            y: vals[1],
            score: vals[2],
        });
        data.extend_from_slice(&vals[3..]);
    }
    let desc = match dim {
        Some(d) if d > 0 => Some(DescriptorSet { dim: d, data }),
        _ => None,
    };
    Ok((KeypointSet { points }, desc))
}
