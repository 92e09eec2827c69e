//! Essential-matrix RANSAC with the normalized eight-point solver.
//!
//! Convention: for a point `X1` in camera-1 coordinates, `X2 = R X1 + t`,
//! and normalized image points satisfy `x2ᵀ E x1 = 0` with `E = [t]× R`.

use nalgebra::{DMatrix, Matrix3, Point2, Vector3, SVD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{median, normalize_points, null_vector, MatchSet};
use crate::error::{Error, Result};
use crate::geometry::CameraIntrinsics;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EssentialParams {
    pub iterations: usize,
    /// Inlier threshold in pixels; divided by the mean focal length.
    pub threshold_px: f64,
    /// Points per minimal sample (at least 8).
    pub sample_size: usize,
    /// Median ray parallax below which the translation is flagged unreliable.
    pub min_parallax_deg: f64,
    pub seed: u64,
}

impl Default for EssentialParams {
    fn default() -> Self {
        Self {
            iterations: 2000,
            threshold_px: 0.5,
            sample_size: 8,
            min_parallax_deg: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativePose {
    pub rotation: Matrix3<f64>,
    /// Unit length.
    pub translation: Vector3<f64>,
    pub inliers: Vec<bool>,
    /// Inlier count of the best minimal-sample hypothesis.
    pub hypothesis_inliers: usize,
    pub translation_reliable: bool,
}

impl RelativePose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let n = translation.norm();
        Self {
            rotation,
            translation: if n > 0.0 { translation / n } else { translation },
            inliers: Vec::new(),
            hypothesis_inliers: 0,
            translation_reliable: true,
        }
    }

    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

fn skew(t: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0)
}

pub fn essential_from_pose(r: &Matrix3<f64>, t: &Vector3<f64>) -> Matrix3<f64> {
    skew(t) * r
}

/// Projects onto the essential manifold: singular values `(1, 1, 0)`.
fn project_essential(e: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = SVD::new(*e, true, true);
    let (u, v_t) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut d = Matrix3::zeros();
    d[(order[0], order[0])] = 1.0;
    d[(order[1], order[1])] = 1.0;
    u * d * v_t
}

/// Eight-point estimate from normalized image points.
pub fn eight_point(x1: &[Point2<f64>], x2: &[Point2<f64>]) -> Option<Matrix3<f64>> {
    if x1.len() < 8 || x1.len() != x2.len() {
        return None;
    }
    let (t1, a) = normalize_points(x1);
    let (t2, b) = normalize_points(x2);
    let mut m = DMatrix::zeros(a.len(), 9);
    for (i, (p, q)) in a.iter().zip(&b).enumerate() {
        m.row_mut(i).copy_from_slice(&[
            q.x * p.x,
            q.x * p.y,
            q.x,
            q.y * p.x,
            q.y * p.y,
            q.y,
            p.x,
            p.y,
            1.0,
        ]);
    }
    let f = null_vector(&m);
    let fn_ = Matrix3::from_row_slice(f.as_slice());
    let e = t2.transpose() * fn_ * t1;
    let n = e.norm();
    if !(n.is_finite() && n > 0.0) {
        return None;
    }
    Some(project_essential(&(e / n)))
}

/// Square root of the Sampson distance, in normalized image units.
pub fn sampson_error(e: &Matrix3<f64>, x1: &Point2<f64>, x2: &Point2<f64>) -> f64 {
    let a = Vector3::new(x1.x, x1.y, 1.0);
    let b = Vector3::new(x2.x, x2.y, 1.0);
    let ea = e * a;
    let eb = e.transpose() * b;
    let num = b.dot(&ea);
    let den = ea.x * ea.x + ea.y * ea.y + eb.x * eb.x + eb.y * eb.y;
    if den <= 0.0 {
        return f64::INFINITY;
    }
    (num * num / den).sqrt()
}

/// The four `(R, t)` factorizations of `E`.
pub fn decompose(e: &Matrix3<f64>) -> [(Matrix3<f64>, Vector3<f64>); 4] {
    let svd = SVD::new(*e, true, true);
    let mut u = svd.u.expect("u");
    let mut v_t = svd.v_t.expect("v_t");
    // put the null direction last
    let k = (0..3)
        .min_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]))
        .expect("three values");
    if k != 2 {
        u.swap_columns(k, 2);
        v_t.swap_rows(k, 2);
    }
    if u.determinant() < 0.0 {
        u = -u;
    }
    if v_t.determinant() < 0.0 {
        v_t = -v_t;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * v_t;
    let r2 = u * w.transpose() * v_t;
    let t = u.column(2).into_owned();
    [(r1, t), (r1, -t), (r2, t), (r2, -t)]
}

/// Whether the point seen along rays `x1`, `x2` lies in front of both
/// cameras. Parallel rays count as in front when they point the same way.
fn in_front(r: &Matrix3<f64>, t: &Vector3<f64>, x1: &Point2<f64>, x2: &Point2<f64>) -> bool {
    let a = r * Vector3::new(x1.x, x1.y, 1.0);
    let b = Vector3::new(x2.x, x2.y, 1.0);
    let bxa = b.cross(&a);
    let denom = bxa.norm_squared();
    if denom <= 1e-18 * a.norm_squared() * b.norm_squared() {
        return a.dot(&b) > 0.0;
    }
    // z1 along x1 such that z1·a + t is parallel to b
    let z1 = -b.cross(t).dot(&bxa) / denom;
    let z2 = (a * z1 + t).z;
    z1 > 0.0 && z2 > 0.0
}

/// Parallax between the two rays of a correspondence after rotating ray 1
/// into camera 2.
fn parallax_deg(r: &Matrix3<f64>, x1: &Point2<f64>, x2: &Point2<f64>) -> f64 {
    let a = (r * Vector3::new(x1.x, x1.y, 1.0)).normalize();
    let b = Vector3::new(x2.x, x2.y, 1.0).normalize();
    a.dot(&b).clamp(-1.0, 1.0).acos().to_degrees()
}

fn to_normalized(cam: &CameraIntrinsics, p: &Point2<f64>) -> Point2<f64> {
    Point2::new((p.x - cam.cx) / cam.fx, (p.y - cam.cy) / cam.fy)
}

pub fn essential_threshold(k1: &CameraIntrinsics, k2: &CameraIntrinsics, px: f64) -> f64 {
    px / ((k1.fx + k1.fy + k2.fx + k2.fy) / 4.0)
}

pub fn estimate_essential(
    matches: &MatchSet,
    k1: &CameraIntrinsics,
    k2: &CameraIntrinsics,
    params: &EssentialParams,
) -> Result<RelativePose> {
    let n = matches.len();
    let sample = params.sample_size.max(8);
    if n < sample {
        return Err(Error::EstimationFailed(format!("essential matrix needs {sample} matches, got {n}")));
    }
    let x1: Vec<Point2<f64>> = matches.matches.iter().map(|m| to_normalized(k1, &m.p1())).collect();
    let x2: Vec<Point2<f64>> = matches.matches.iter().map(|m| to_normalized(k2, &m.p2())).collect();
    let thr = essential_threshold(k1, k2, params.threshold_px);
    let flags = |e: &Matrix3<f64>| -> Vec<bool> {
        x1.iter().zip(&x2).map(|(a, b)| sampson_error(e, a, b) <= thr).collect()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(usize, Matrix3<f64>)> = None;
    for _ in 0..params.iterations.max(1) {
        let idx = rand::seq::index::sample(&mut rng, n, sample);
        let s1: Vec<Point2<f64>> = idx.iter().map(|i| x1[i]).collect();
        let s2: Vec<Point2<f64>> = idx.iter().map(|i| x2[i]).collect();
        let Some(e) = eight_point(&s1, &s2) else { continue };
        let count = flags(&e).iter().filter(|&&b| b).count();
        if best.as_ref().is_none_or(|b| count > b.0) {
            best = Some((count, e));
        }
    }
    let (count, e_hyp) = best.ok_or_else(|| Error::EstimationFailed("no valid eight-point sample".into()))?;
    if count < 8 {
        return Err(Error::EstimationFailed(format!("best consensus has {count} inliers")));
    }
    let hyp_flags = flags(&e_hyp);
    let (i1, i2): (Vec<Point2<f64>>, Vec<Point2<f64>>) = x1
        .iter()
        .zip(&x2)
        .zip(&hyp_flags)
        .filter(|(_, &f)| f)
        .map(|((a, b), _)| (*a, *b))
        .unzip();
    let refit = eight_point(&i1, &i2).unwrap_or(e_hyp);
    let refit_flags = flags(&refit);
    let (e, inliers) = if refit_flags.iter().filter(|&&b| b).count() >= count {
        (refit, refit_flags)
    } else {
        (e_hyp, hyp_flags)
    };

    let mut best_pose: Option<(usize, Matrix3<f64>, Vector3<f64>)> = None;
    for (r, t) in decompose(&e) {
        let front = (0..n)
            .filter(|&i| inliers[i] && in_front(&r, &t, &x1[i], &x2[i]))
            .count();
        if best_pose.as_ref().is_none_or(|b| front > b.0) {
            best_pose = Some((front, r, t));
        }
    }
    let (front, r, t) = best_pose.expect("four candidates");
    if front == 0 {
        return Err(Error::EstimationFailed("no decomposition passes cheirality".into()));
    }
    let parallax: Vec<f64> = (0..n)
        .filter(|&i| inliers[i])
        .map(|i| parallax_deg(&r, &x1[i], &x2[i]))
        .collect();
    let reliable = median(&parallax).is_some_and(|m| m >= params.min_parallax_deg);
    Ok(RelativePose {
        rotation: r,
        translation: t.normalize(),
        inliers,
        hypothesis_inliers: count,
        translation_reliable: reliable,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::{rotation_error_deg, translation_angle_deg, PointMatch};
    use nalgebra::{Rotation3, Unit};
    use rand::Rng;

    fn cam(scale: f64) -> CameraIntrinsics {
        CameraIntrinsics::new(500.0 * scale, 520.0 * scale, 320.0 * scale, 240.0 * scale, (640.0 * scale) as usize, (480.0 * scale) as usize)
            .unwrap()
    }

    fn scene(rng: &mut ChaCha8Rng, r: &Matrix3<f64>, t: &Vector3<f64>, n: usize, k: &CameraIntrinsics) -> MatchSet {
        let mut matches = Vec::new();
        while matches.len() < n {
            let p = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-1.5..1.5), rng.random_range(3.0..8.0));
            let q = r * p + t;
            if q.z <= 0.1 {
                continue;
            }
            let a = [k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy];
            let b = [k.fx * q.x / q.z + k.cx, k.fy * q.y / q.z + k.cy];
            matches.push(PointMatch { p1: a, p2: b, score: 1.0 });
        }
        MatchSet { matches }
    }

    fn random_pose(rng: &mut ChaCha8Rng, deg: f64, t_norm: f64) -> (Matrix3<f64>, Vector3<f64>) {
        let axis = Unit::new_normalize(Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let r = *Rotation3::from_axis_angle(&axis, deg.to_radians()).matrix();
        let t = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.3..0.3)).normalize() * t_norm;
        (r, t)
    }

    #[test]
    fn decomposition_contains_the_true_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let (r, t) = random_pose(&mut rng, 20.0, 1.0);
            let e = essential_from_pose(&r, &t);
            let found = decompose(&e)
                .iter()
                .any(|(rc, tc)| rotation_error_deg(rc, &r) < 1e-6 && (tc - t.normalize()).norm() < 1e-6);
            assert!(found);
        }
    }

    #[test]
    fn exact_correspondences_recover_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let k = cam(1.0);
        for _ in 0..10 {
            let (r, t) = random_pose(&mut rng, 15.0, 0.8);
            let m = scene(&mut rng, &r, &t, 100, &k);
            let est = estimate_essential(&m, &k, &k, &EssentialParams::default()).unwrap();
            assert!(rotation_error_deg(&est.rotation, &r) < 0.1);
            assert!(translation_angle_deg(&est.translation, &t) < 0.5);
            assert!(est.translation.dot(&t) > 0.0, "cheirality picks the sign");
            assert!(est.translation_reliable);
        }
    }

    #[test]
    fn pure_rotation_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = cam(1.0);
        let (r, _) = random_pose(&mut rng, 10.0, 1.0);
        // tiny baseline so the eight-point system stays well posed
        let t = Vector3::new(1e-7, 0.0, 0.0);
        let m = scene(&mut rng, &r, &t, 100, &k);
        let est = estimate_essential(&m, &k, &k, &EssentialParams::default()).unwrap();
        assert!(rotation_error_deg(&est.rotation, &r) < 0.5);
        assert!(!est.translation_reliable);
    }

    #[test]
    fn too_few_matches_fail() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let k = cam(1.0);
        let (r, t) = random_pose(&mut rng, 5.0, 1.0);
        let m = scene(&mut rng, &r, &t, 7, &k);
        assert!(matches!(estimate_essential(&m, &k, &k, &EssentialParams::default()), Err(Error::EstimationFailed(_))));
    }

    #[test]
    fn outliers_are_rejected_and_scaling_is_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = cam(1.0);
        let (r, t) = random_pose(&mut rng, 12.0, 1.0);
        let mut m = scene(&mut rng, &r, &t, 120, &k);
        for i in 0..30 {
            m.matches[i * 4].p2 = [rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)];
        }
        let p = EssentialParams { seed: 11, ..Default::default() };
        let a = estimate_essential(&m, &k, &k, &p).unwrap();
        assert!(rotation_error_deg(&a.rotation, &r) < 0.1);
        assert!(a.inlier_count() >= 90);

        let s = 2.0;
        let ks = cam(s);
        let scaled = MatchSet {
            matches: m
                .matches
                .iter()
                .map(|x| PointMatch { p1: [x.p1[0] * s, x.p1[1] * s], p2: [x.p2[0] * s, x.p2[1] * s], score: x.score })
                .collect(),
        };
        let b = estimate_essential(&scaled, &ks, &ks, &p).unwrap();
        assert_eq!(a.inliers, b.inliers);
        assert!(rotation_error_deg(&a.rotation, &b.rotation) < 1e-6);
    }

    #[test]
    fn deterministic_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let k = cam(1.0);
        let (r, t) = random_pose(&mut rng, 12.0, 1.0);
        let mut m = scene(&mut rng, &r, &t, 80, &k);
        for i in 0..40 {
            m.matches[i * 2].p2 = [rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)];
        }
        let run = |it| estimate_essential(&m, &k, &k, &EssentialParams { iterations: it, seed: 3, ..Default::default() });
        assert_eq!(run(300).unwrap(), run(300).unwrap());
        let mut prev = 0;
        for it in [300, 600, 1200, 2400] {
            let c = run(it).unwrap().hypothesis_inliers;
            assert!(c >= prev);
            prev = c;
        }
    }
}
