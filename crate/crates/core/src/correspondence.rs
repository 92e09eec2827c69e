//! Ground-truth correspondences between rendered views: training-pair
//! sampling, dense per-pixel maps, and cell-level positive indicators for
//! the descriptor loss (homography- or re-projection-induced).

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use image::{GrayImage, RgbImage};
use nalgebra::{Matrix3, Point2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{reproject, CameraIntrinsics, PoseSE3, PosedDepth, PrPParams, Rejection};
use crate::io;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairSamplingParams {
    pub lambda_l: usize,
    pub lambda_u: usize,
    pub seed: u64,
}

impl Default for PairSamplingParams {
    fn default() -> Self {
        Self {
            lambda_l: 70,
            lambda_u: 150,
            seed: 0,
        }
    }
}

impl PairSamplingParams {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_l == 0 || self.lambda_l > self.lambda_u {
            return Err(Error::InvalidParam(format!(
                "pair offsets need 0 < lambda_l <= lambda_u, got {} and {}",
                self.lambda_l, self.lambda_u
            )));
        }
        Ok(())
    }
}

/// Draws `(src, dst)` frame pairs with `dst - src` in `[lambda_l, lambda_u]`,
/// uniformly over all admissible pairs of a scene with `frames` frames.
#[derive(Debug, Clone)]
pub struct PairSampler {
    frames: usize,
    lambda_l: usize,
    lambda_u: usize,
    total: u64,
    rng: ChaCha8Rng,
}

impl PairSampler {
    pub fn new(frames: usize, params: &PairSamplingParams) -> Result<Self> {
        params.validate()?;
        let upper = params.lambda_u.min(frames.saturating_sub(1));
        if params.lambda_l > upper {
            return Err(Error::EmptyScene(format!(
                "{frames} frames admit no pair with offset in [{}, {}]",
                params.lambda_l, params.lambda_u
            )));
        }
        let total = (params.lambda_l..=upper).map(|o| (frames - o) as u64).sum();
        Ok(Self {
            frames,
            lambda_l: params.lambda_l,
            lambda_u: upper,
            total,
            rng: ChaCha8Rng::seed_from_u64(params.seed),
        })
    }

    /// Number of admissible pairs.
    pub fn admissible(&self) -> u64 {
        self.total
    }

    pub fn sample(&mut self) -> (usize, usize) {
        let mut k = self.rng.random_range(0..self.total);
        for offset in self.lambda_l..=self.lambda_u {
            let count = (self.frames - offset) as u64;
            if k < count {
                let src = k as usize;
                return (src, src + offset);
            }
            k -= count;
        }
        unreachable!("index below admissible pair count")
    }
}

/// Convenience wrapper: one pair from a fresh sampler.
pub fn sample_pair(frames: usize, params: &PairSamplingParams) -> Result<(usize, usize)> {
    Ok(PairSampler::new(frames, params)?.sample())
}

/// Per-pixel re-projection of every source pixel center.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceMap {
    pub width: usize,
    pub height: usize,
    pub src_idx: usize,
    pub dst_idx: usize,
    pub targets: Vec<std::result::Result<Point2<f64>, Rejection>>,
}

impl CorrespondenceMap {
    pub fn get(&self, x: usize, y: usize) -> std::result::Result<Point2<f64>, Rejection> {
        self.targets[y * self.width + x]
    }

    pub fn valid_count(&self) -> usize {
        self.targets.iter().filter(|t| t.is_ok()).count()
    }

    pub fn count(&self, reason: Rejection) -> usize {
        self.targets.iter().filter(|t| **t == Err(reason)).count()
    }

    /// Writes `<prefix>.x.pfm`, `<prefix>.y.pfm` (NaN where invalid) and
    /// `<prefix>.mask.pgm` (see [`mask_code`]).
    pub fn write(&self, dir: &Path, prefix: &str) -> Result<()> {
        let mut xs = Vec::with_capacity(self.targets.len());
        let mut ys = Vec::with_capacity(self.targets.len());
        let mut mask = GrayImage::new(self.width as u32, self.height as u32);
        for (i, t) in self.targets.iter().enumerate() {
            let (x, y) = match t {
                Ok(p) => (p.x as f32, p.y as f32),
                Err(_) => (f32::NAN, f32::NAN),
            };
            xs.push(x);
            ys.push(y);
            mask.as_mut()[i] = mask_code(t);
        }
        io::write_pfm(&dir.join(format!("{prefix}.x.pfm")), self.width, self.height, &xs)?;
        io::write_pfm(&dir.join(format!("{prefix}.y.pfm")), self.width, self.height, &ys)?;
        io::write_pgm(&dir.join(format!("{prefix}.mask.pgm")), &mask)
    }

    /// Reads a map written by [`CorrespondenceMap::write`]. Targets come back
    /// at `f32` precision.
    pub fn read(dir: &Path, prefix: &str, src_idx: usize, dst_idx: usize) -> Result<Self> {
        let (w, h, xs) = io::read_pfm(&dir.join(format!("{prefix}.x.pfm")))?;
        let (w2, h2, ys) = io::read_pfm(&dir.join(format!("{prefix}.y.pfm")))?;
        let mask_path = dir.join(format!("{prefix}.mask.pgm"));
        let mask = io::read_pgm(&mask_path)?;
        if (w, h) != (w2, h2) || (w as u32, h as u32) != mask.dimensions() {
            return Err(Error::format(mask_path, "x, y and mask dimensions differ"));
        }
        let targets = mask
            .as_raw()
            .iter()
            .enumerate()
            .map(|(i, &code)| match code {
                255 => Ok(Point2::new(xs[i] as f64, ys[i] as f64)),
                c => Err(rejection_from_code(c).unwrap_or(Rejection::InvalidDepth)),
            })
            .collect();
        Ok(Self {
            width: w,
            height: h,
            src_idx,
            dst_idx,
            targets,
        })
    }
}

/// Mask byte: 255 valid, 1 out-of-bounds, 2 behind-camera, 3 occluded,
/// 4 invalid-depth.
pub fn mask_code(t: &std::result::Result<Point2<f64>, Rejection>) -> u8 {
    match t {
        Ok(_) => 255,
        Err(Rejection::OutOfBounds) => 1,
        Err(Rejection::BehindCamera) => 2,
        Err(Rejection::Occluded) => 3,
        Err(Rejection::InvalidDepth) => 4,
    }
}

fn rejection_from_code(code: u8) -> Option<Rejection> {
    match code {
        1 => Some(Rejection::OutOfBounds),
        2 => Some(Rejection::BehindCamera),
        3 => Some(Rejection::Occluded),
        4 => Some(Rejection::InvalidDepth),
        _ => None,
    }
}

/// Re-projects every pixel center of `src` into `dst`.
pub fn dense_correspondences<S, D>(
    src: &S,
    dst: &D,
    src_idx: usize,
    dst_idx: usize,
    params: &PrPParams,
) -> CorrespondenceMap
where
    S: PosedDepth + Sync,
    D: PosedDepth + Sync,
{
    let (w, h) = (src.camera().width, src.camera().height);
    let targets = (0..h)
        .into_par_iter()
        .flat_map_iter(|y| {
            (0..w).map(move |x| reproject(&Point2::new(x as f64, y as f64), src, dst, params))
        })
        .collect();
    CorrespondenceMap {
        width: w,
        height: h,
        src_idx,
        dst_idx,
        targets,
    }
}

/// Sparse cell-pair indicator: `(h, w, h', w')` is listed iff the transfer of
/// source cell center `(h, w)` lies within `eps_s` pixels of destination
/// cell center `(h', w')`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellCorrespondence {
    /// Source grid rows and columns.
    pub hc: usize,
    pub wc: usize,
    /// Destination grid rows and columns.
    pub hc_dst: usize,
    pub wc_dst: usize,
    pub cell: usize,
    pub eps_s: f64,
    /// Source image region actually used (dims cropped to a cell multiple).
    pub crop: (usize, usize),
    /// Sorted, unique.
    pub positives: Vec<[u32; 4]>,
}

/// Geometric center of cell `(h, w)` in pixel coordinates.
pub fn cell_center(h: usize, w: usize, cell: usize) -> Point2<f64> {
    let half = (cell as f64 - 1.0) * 0.5;
    Point2::new((cell * w) as f64 + half, (cell * h) as f64 + half)
}

/// The distance test shared by the sparse builder and any brute-force check.
#[inline]
pub fn within(target: &Point2<f64>, center: &Point2<f64>, eps_s: f64) -> bool {
    let dx = target.x - center.x;
    let dy = target.y - center.y;
    (dx * dx + dy * dy).sqrt() <= eps_s
}

impl CellCorrespondence {
    pub fn src_cells(&self) -> usize {
        self.hc * self.wc
    }

    pub fn dst_cells(&self) -> usize {
        self.hc_dst * self.wc_dst
    }

    pub fn len(&self) -> usize {
        self.positives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty()
    }

    /// Row-major dense indicator, `src_cells × dst_cells`.
    pub fn to_dense(&self) -> Vec<bool> {
        let n_dst = self.dst_cells();
        let mut dense = vec![false; self.src_cells() * n_dst];
        for &[h, w, h2, w2] in &self.positives {
            let a = h as usize * self.wc + w as usize;
            let b = h2 as usize * self.wc_dst + w2 as usize;
            dense[a * n_dst + b] = true;
        }
        dense
    }

    pub fn contains(&self, q: [u32; 4]) -> bool {
        self.positives.binary_search(&q).is_ok()
    }

    pub fn as_set(&self) -> HashSet<[u32; 4]> {
        self.positives.iter().copied().collect()
    }

    /// Indicator with source and destination roles swapped.
    pub fn transpose(&self) -> Self {
        let mut positives: Vec<[u32; 4]> = self
            .positives
            .iter()
            .map(|&[h, w, h2, w2]| [h2, w2, h, w])
            .collect();
        positives.sort_unstable();
        Self {
            hc: self.hc_dst,
            wc: self.wc_dst,
            hc_dst: self.hc,
            wc_dst: self.wc,
            cell: self.cell,
            eps_s: self.eps_s,
            crop: (self.wc_dst * self.cell, self.hc_dst * self.cell),
            positives,
        }
    }

    /// One `h w h' w'` line per positive.
    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(self.positives.len() * 16);
        for [h, w, h2, w2] in &self.positives {
            writeln!(s, "{h} {w} {h2} {w2}").expect("write to string");
        }
        s
    }

    pub fn write_text(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Parses the text form; grid metadata must be supplied by the caller.
    pub fn parse_positives(text: &str) -> std::result::Result<Vec<[u32; 4]>, String> {
        let mut out = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let nums: std::result::Result<Vec<u32>, _> =
                line.split_whitespace().map(str::parse).collect();
            match nums {
                Ok(v) if v.len() == 4 => out.push([v[0], v[1], v[2], v[3]]),
                _ => return Err(format!("line {}: expected four integers", n + 1)),
            }
        }
        out.sort_unstable();
        out.dedup();
        Ok(out)
    }
}

/// Builds the indicator from an arbitrary transfer function. `None` from the
/// transfer leaves that source row empty.
pub fn cell_correspondence_from_transfer<F>(
    src_dims: (usize, usize),
    dst_dims: (usize, usize),
    cell: usize,
    eps_s: f64,
    transfer: F,
) -> Result<CellCorrespondence>
where
    F: Fn(&Point2<f64>) -> Option<Point2<f64>> + Sync,
{
    if cell == 0 {
        return Err(Error::InvalidParam("cell size must be positive".into()));
    }
    if !(eps_s >= 0.0) {
        return Err(Error::InvalidParam(format!("eps_s must be non-negative, got {eps_s}")));
    }
    let (wc, hc) = (src_dims.0 / cell, src_dims.1 / cell);
    let (wc_dst, hc_dst) = (dst_dims.0 / cell, dst_dims.1 / cell);
    if wc == 0 || hc == 0 || wc_dst == 0 || hc_dst == 0 {
        return Err(Error::InvalidParam(format!(
            "images {src_dims:?} / {dst_dims:?} are smaller than one {cell}px cell"
        )));
    }
    let half = (cell as f64 - 1.0) * 0.5;
    let span = |t: f64, n: usize| -> (usize, usize) {
        let lo = ((t - eps_s - half) / cell as f64).floor() - 1.0;
        let hi = ((t + eps_s - half) / cell as f64).ceil() + 1.0;
        let lo = lo.max(0.0) as usize;
        let hi = hi.min(n as f64 - 1.0);
        if hi < 0.0 {
            (1, 0)
        } else {
            (lo, hi as usize)
        }
    };
    let positives: Vec<[u32; 4]> = (0..hc * wc)
        .into_par_iter()
        .flat_map_iter(|a| {
            let (h, w) = (a / wc, a % wc);
            let mut row = Vec::new();
            if let Some(t) = transfer(&cell_center(h, w, cell)).filter(|t| t.x.is_finite() && t.y.is_finite()) {
                let (x0, x1) = span(t.x, wc_dst);
                let (y0, y1) = span(t.y, hc_dst);
                for h2 in y0..=y1.min(hc_dst.saturating_sub(1)) {
                    for w2 in x0..=x1.min(wc_dst.saturating_sub(1)) {
                        if y0 <= y1 && x0 <= x1 && within(&t, &cell_center(h2, w2, cell), eps_s) {
                            row.push([h as u32, w as u32, h2 as u32, w2 as u32]);
                        }
                    }
                }
            }
            row
        })
        .collect();
    Ok(CellCorrespondence {
        hc,
        wc,
        hc_dst,
        wc_dst,
        cell,
        eps_s,
        crop: (wc * cell, hc * cell),
        positives,
    })
}

/// Cell indicator induced by re-projecting each source cell center.
pub fn cell_correspondence_prp<S, D>(
    src: &S,
    dst: &D,
    cell: usize,
    eps_s: f64,
    params: &PrPParams,
) -> Result<CellCorrespondence>
where
    S: PosedDepth + Sync,
    D: PosedDepth + Sync,
{
    let sc = src.camera();
    let dc = dst.camera();
    cell_correspondence_from_transfer(
        (sc.width, sc.height),
        (dc.width, dc.height),
        cell,
        eps_s,
        |p| reproject(p, src, dst, params).ok(),
    )
}

/// Applies a homography with projective normalization.
pub fn apply_homography(h: &Matrix3<f64>, p: &Point2<f64>) -> Option<Point2<f64>> {
    let q = h * Vector3::new(p.x, p.y, 1.0);
    (q.z.abs() > 1e-12).then(|| Point2::new(q.x / q.z, q.y / q.z))
}

/// Cell indicator induced by a homography on an image of size `dims`.
pub fn cell_correspondence_homography(
    h: &Matrix3<f64>,
    dims: (usize, usize),
    cell: usize,
    eps_s: f64,
) -> Result<CellCorrespondence> {
    if h.try_inverse().is_none() || h.determinant().abs() < 1e-15 {
        return Err(Error::InvalidParam("homography is not invertible".into()));
    }
    cell_correspondence_from_transfer(dims, dims, cell, eps_s, |p| apply_homography(h, p))
}

/// Homography mapping pixels of camera 1 to camera 2 when both share a
/// center (rotation-only motion): `K₂ R₂ᵀ R₁ K₁⁻¹`.
pub fn rotation_homography(
    cam1: &CameraIntrinsics,
    pose1: &PoseSE3,
    cam2: &CameraIntrinsics,
    pose2: &PoseSE3,
) -> Matrix3<f64> {
    cam2.matrix() * pose2.rotation.transpose() * pose1.rotation * cam1.inverse_matrix()
}

/// Homography induced by the world plane `n·X = offset` between two views.
pub fn plane_homography(
    cam1: &CameraIntrinsics,
    pose1: &PoseSE3,
    cam2: &CameraIntrinsics,
    pose2: &PoseSE3,
    normal: &Vector3<f64>,
    offset: f64,
) -> Matrix3<f64> {
    // Express the plane in camera-1 coordinates: n₁·X₁ = d₁.
    let n1 = pose1.rotation.transpose() * normal;
    let d1 = offset - normal.dot(&pose1.translation);
    let rel = pose1.relative_to(pose2);
    let m = rel.rotation + rel.translation * n1.transpose() / d1;
    cam2.matrix() * m * cam1.inverse_matrix()
}

/// A random homography near the identity, for tests and synthetic warps.
pub fn random_homography(rng: &mut impl Rng, dims: (usize, usize), strength: f64) -> Matrix3<f64> {
    let (w, h) = (dims.0 as f64, dims.1 as f64);
    let corners = [[0.0, 0.0], [w - 1.0, 0.0], [w - 1.0, h - 1.0], [0.0, h - 1.0]];
    let jitter = strength * w.min(h);
    let moved: Vec<[f64; 2]> = corners
        .iter()
        .map(|c| {
            [
                c[0] + rng.random_range(-jitter..=jitter),
                c[1] + rng.random_range(-jitter..=jitter),
            ]
        })
        .collect();
    homography_from_four(&corners, &moved).unwrap_or_else(Matrix3::identity)
}

/// Exact homography through four correspondences (8×8 linear solve).
pub fn homography_from_four(src: &[[f64; 2]], dst: &[[f64; 2]]) -> Option<Matrix3<f64>> {
    let mut a = nalgebra::SMatrix::<f64, 8, 8>::zeros();
    let mut b = nalgebra::SVector::<f64, 8>::zeros();
    for i in 0..4 {
        let (x, y) = (src[i][0], src[i][1]);
        let (u, v) = (dst[i][0], dst[i][1]);
        let r = 2 * i;
        a.row_mut(r).copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
        a.row_mut(r + 1).copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
        b[r] = u;
        b[r + 1] = v;
    }
    let sol = a.lu().solve(&b)?;
    Some(Matrix3::new(sol[0], sol[1], sol[2], sol[3], sol[4], sol[5], sol[6], sol[7], 1.0))
}

/// Resamples `img` so that output pixel `q` shows input pixel `H⁻¹ q`
/// (bilinear; black outside the source).
pub fn warp_image(img: &RgbImage, h: &Matrix3<f64>) -> Result<RgbImage> {
    let inv = h
        .try_inverse()
        .ok_or_else(|| Error::InvalidParam("homography is not invertible".into()))?;
    let (w, hh) = (img.width() as usize, img.height() as usize);
    let rows: Vec<Vec<u8>> = (0..hh)
        .into_par_iter()
        .map(|y| {
            let mut row = vec![0u8; 3 * w];
            for x in 0..w {
                let Some(p) = apply_homography(&inv, &Point2::new(x as f64, y as f64)) else {
                    continue;
                };
                if p.x < 0.0 || p.y < 0.0 || p.x > (w - 1) as f64 || p.y > (hh - 1) as f64 {
                    continue;
                }
                let (x0, y0) = (p.x.floor() as u32, p.y.floor() as u32);
                let (x1, y1) = ((x0 + 1).min(w as u32 - 1), (y0 + 1).min(hh as u32 - 1));
                let (fx, fy) = (p.x - x0 as f64, p.y - y0 as f64);
                for c in 0..3 {
                    let v = (1.0 - fx) * (1.0 - fy) * img.get_pixel(x0, y0)[c] as f64
                        + fx * (1.0 - fy) * img.get_pixel(x1, y0)[c] as f64
                        + (1.0 - fx) * fy * img.get_pixel(x0, y1)[c] as f64
                        + fx * fy * img.get_pixel(x1, y1)[c] as f64;
                    row[3 * x + c] = v.round().clamp(0.0, 255.0) as u8;
                }
            }
            row
        })
        .collect();
    Ok(RgbImage::from_raw(w as u32, hh as u32, rows.concat()).expect("buffer size matches"))
}
