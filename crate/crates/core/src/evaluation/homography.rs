//! RANSAC homography fitting with the normalized DLT.

use nalgebra::{DMatrix, Matrix3, Point2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{normalize_points, null_vector, MatchSet};
use crate::correspondence::apply_homography;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacParams {
    pub iterations: usize,
    /// Reprojection threshold in pixels.
    pub threshold: f64,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            iterations: 1000,
            threshold: 3.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HomographyEstimate {
    pub h: Matrix3<f64>,
    /// Inlier flags of the refit model.
    pub inliers: Vec<bool>,
    /// Inlier count of the best minimal-sample hypothesis.
    pub hypothesis_inliers: usize,
}

/// Direct linear transform with Hartley normalization on both sides.
pub fn dlt(src: &[Point2<f64>], dst: &[Point2<f64>]) -> Option<Matrix3<f64>> {
    if src.len() < 4 || src.len() != dst.len() {
        return None;
    }
    let (t1, a) = normalize_points(src);
    let (t2, b) = normalize_points(dst);
    let mut m = DMatrix::zeros(2 * a.len(), 9);
    for (i, (p, q)) in a.iter().zip(&b).enumerate() {
        let (x, y, u, v) = (p.x, p.y, q.x, q.y);
        m.row_mut(2 * i)
            .copy_from_slice(&[-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u]);
        m.row_mut(2 * i + 1)
            .copy_from_slice(&[0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v]);
    }
    let h = null_vector(&m);
    let hn = Matrix3::from_row_slice(h.as_slice());
    let full = t2.try_inverse()? * hn * t1;
    let s = full[(2, 2)];
    let full = if s.abs() > 1e-12 { full / s } else { full / full.norm() };
    full.iter().all(|v| v.is_finite()).then_some(full)
}

fn collinear(a: &Point2<f64>, b: &Point2<f64>, c: &Point2<f64>) -> bool {
    let area = (b - a).perp(&(c - a)).abs();
    let scale = (b - a).norm_squared().max((c - a).norm_squared()).max(1e-300);
    area <= 1e-9 * scale
}

fn degenerate_sample(p: &[Point2<f64>; 4]) -> bool {
    (0..4).any(|skip| {
        let r: Vec<&Point2<f64>> = (0..4).filter(|&k| k != skip).map(|k| &p[k]).collect();
        collinear(r[0], r[1], r[2])
    })
}

fn reprojection_error(h: &Matrix3<f64>, p: &Point2<f64>, q: &Point2<f64>) -> f64 {
    apply_homography(h, p).map_or(f64::INFINITY, |r| (r - q).norm())
}

fn inlier_flags(h: &Matrix3<f64>, src: &[Point2<f64>], dst: &[Point2<f64>], t: f64) -> Vec<bool> {
    src.iter()
        .zip(dst)
        .map(|(p, q)| reprojection_error(h, p, q) <= t)
        .collect()
}

/// RANSAC over 4-point samples for a fixed number of iterations, keeping
/// the hypothesis with most inliers (earliest on ties), then a
/// least-squares refit on its inliers.
pub fn estimate_homography(matches: &MatchSet, params: &RansacParams) -> Result<HomographyEstimate> {
    let n = matches.len();
    if n < 4 {
        return Err(Error::EstimationFailed(format!("homography needs 4 matches, got {n}")));
    }
    let src: Vec<Point2<f64>> = matches.matches.iter().map(|m| m.p1()).collect();
    let dst: Vec<Point2<f64>> = matches.matches.iter().map(|m| m.p2()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(usize, Matrix3<f64>)> = None;
    for _ in 0..params.iterations.max(1) {
        let idx = rand::seq::index::sample(&mut rng, n, 4);
        let s = [src[idx.index(0)], src[idx.index(1)], src[idx.index(2)], src[idx.index(3)]];
        let d = [dst[idx.index(0)], dst[idx.index(1)], dst[idx.index(2)], dst[idx.index(3)]];
        if degenerate_sample(&s) || degenerate_sample(&d) {
            continue;
        }
        let Some(h) = dlt(&s, &d) else { continue };
        let count = inlier_flags(&h, &src, &dst, params.threshold)
            .iter()
            .filter(|&&b| b)
            .count();
        if best.as_ref().is_none_or(|b| count > b.0) {
            best = Some((count, h));
        }
    }
    let (hyp_count, hyp) = best.ok_or_else(|| Error::EstimationFailed("every sample was degenerate".into()))?;
    if hyp_count < 4 {
        return Err(Error::EstimationFailed(format!("best consensus has {hyp_count} inliers")));
    }
    let flags = inlier_flags(&hyp, &src, &dst, params.threshold);
    let (s_in, d_in): (Vec<Point2<f64>>, Vec<Point2<f64>>) = src
        .iter()
        .zip(&dst)
        .zip(&flags)
        .filter(|(_, &f)| f)
        .map(|((p, q), _)| (*p, *q))
        .unzip();
    let h = dlt(&s_in, &d_in).ok_or_else(|| Error::EstimationFailed("refit failed".into()))?;
    let inliers = inlier_flags(&h, &src, &dst, params.threshold);
    Ok(HomographyEstimate {
        h,
        inliers,
        hypothesis_inliers: hyp_count,
    })
}

pub fn image_corners(width: usize, height: usize) -> [Point2<f64>; 4] {
    let (w, h) = (width as f64 - 1.0, height as f64 - 1.0);
    [
        Point2::new(0.0, 0.0),
        Point2::new(w, 0.0),
        Point2::new(0.0, h),
        Point2::new(w, h),
    ]
}

/// Mean displacement of the four image corners under `h_est` versus `h_gt`.
pub fn corner_error(h_est: &Matrix3<f64>, h_gt: &Matrix3<f64>, dims: (usize, usize)) -> f64 {
    image_corners(dims.0, dims.1)
        .iter()
        .map(|c| match (apply_homography(h_est, c), apply_homography(h_gt, c)) {
            (Some(a), Some(b)) => (a - b).norm(),
            _ => f64::INFINITY,
        })
        .sum::<f64>()
        / 4.0
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HomographyMetrics {
    pub corner_error: f64,
    /// `(threshold, corner_error <= threshold)`.
    pub correct: Vec<(f64, bool)>,
}

pub fn homography_metrics(
    h_est: &Matrix3<f64>,
    h_gt: &Matrix3<f64>,
    dims: (usize, usize),
    thresholds: &[f64],
) -> HomographyMetrics {
    let e = corner_error(h_est, h_gt, dims);
    HomographyMetrics {
        corner_error: e,
        correct: thresholds.iter().map(|&t| (t, e <= t)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correspondence::random_homography;
    use crate::evaluation::PointMatch;
    use rand::Rng;

    fn matches_from(h: &Matrix3<f64>, rng: &mut ChaCha8Rng, n: usize, outlier_frac: f64) -> MatchSet {
        let mut matches = Vec::new();
        while matches.len() < n {
            let p = Point2::new(rng.random_range(0.0..320.0), rng.random_range(0.0..240.0));
            let q = if rng.random_bool(outlier_frac) {
                Point2::new(rng.random_range(0.0..320.0), rng.random_range(0.0..240.0))
            } else {
                match apply_homography(h, &p) {
                    Some(q) => q,
                    None => continue,
                }
            };
            matches.push(PointMatch { p1: [p.x, p.y], p2: [q.x, q.y], score: 1.0 });
        }
        MatchSet { matches }
    }

    #[test]
    fn exact_matches_recover_h() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let h = random_homography(&mut rng, (320, 240), 0.3);
            let m = matches_from(&h, &mut rng, 60, 0.0);
            let est = estimate_homography(&m, &RansacParams::default()).unwrap();
            assert!(corner_error(&est.h, &h, (320, 240)) < 1e-6);
            assert!(est.inliers.iter().all(|&b| b));
        }
    }

    #[test]
    fn half_outliers_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut good = 0;
        for trial in 0..30 {
            let h = random_homography(&mut rng, (320, 240), 0.3);
            let m = matches_from(&h, &mut rng, 200, 0.5);
            let est = estimate_homography(&m, &RansacParams { seed: trial, ..Default::default() }).unwrap();
            if corner_error(&est.h, &h, (320, 240)) < 0.5 {
                good += 1;
            }
        }
        assert!(good >= 29, "{good}");
    }

    #[test]
    fn too_few_matches_fail() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = matches_from(&Matrix3::identity(), &mut rng, 3, 0.0);
        assert!(matches!(estimate_homography(&m, &RansacParams::default()), Err(Error::EstimationFailed(_))));
    }

    #[test]
    fn collinear_matches_fail() {
        let matches = (0..10)
            .map(|i| PointMatch { p1: [i as f64, 2.0 * i as f64], p2: [i as f64, 2.0 * i as f64], score: 1.0 })
            .collect();
        let r = estimate_homography(&MatchSet { matches }, &RansacParams::default());
        assert!(matches!(r, Err(Error::EstimationFailed(_))));
    }

    #[test]
    fn ransac_is_deterministic_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = random_homography(&mut rng, (320, 240), 0.3);
        let m = matches_from(&h, &mut rng, 100, 0.7);
        let mut prev = 0;
        for it in [5, 10, 20, 40, 80] {
            let p = RansacParams { iterations: it, seed: 9, ..Default::default() };
            let a = estimate_homography(&m, &p).unwrap();
            assert_eq!(a, estimate_homography(&m, &p).unwrap());
            assert!(a.hypothesis_inliers >= prev);
            prev = a.hypothesis_inliers;
        }
    }

    #[test]
    fn corner_error_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let id = Matrix3::identity();
        assert_eq!(corner_error(&id, &id, (64, 48)), 0.0);
        let t = Matrix3::new(1.0, 0.0, 4.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!((corner_error(&t, &id, (64, 48)) - 4.0).abs() < 1e-12);
        for _ in 0..20 {
            let a = random_homography(&mut rng, (64, 48), 0.3);
            let b = random_homography(&mut rng, (64, 48), 0.3);
            let mut sum = 0.0;
            for (x, y) in [(0.0, 0.0), (63.0, 0.0), (0.0, 47.0), (63.0, 47.0)] {
                let pa = a * nalgebra::Vector3::new(x, y, 1.0);
                let pb = b * nalgebra::Vector3::new(x, y, 1.0);
                sum += ((pa.x / pa.z - pb.x / pb.z).powi(2) + (pa.y / pa.z - pb.y / pb.z).powi(2)).sqrt();
            }
            assert!((corner_error(&a, &b, (64, 48)) - sum / 4.0).abs() < 1e-9);
        }
        let m = homography_metrics(&t, &id, (64, 48), &[3.0, 5.0]);
        assert_eq!(m.correct, vec![(3.0, false), (5.0, true)]);
    }
}
