//! Matching metrics, robust two-view estimation and point-cloud
//! registration.

pub mod essential;
pub mod homography;
pub mod registration;
pub mod report;

use nalgebra::{DMatrix, DVector, Matrix3, Point2, Vector3};
use serde::{Deserialize, Serialize};

use crate::frontend::{IndexMatch, KeypointSet};

pub use essential::{estimate_essential, EssentialParams, RelativePose};
pub use homography::{estimate_homography, homography_metrics, HomographyEstimate, RansacParams};
pub use registration::{kabsch_weighted, register_pair, RegistrationParams, RegistrationResult};
pub use report::{config_hash, Metric, MetricsReport};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointMatch {
    pub p1: [f64; 2],
    pub p2: [f64; 2],
    pub score: f64,
}

impl PointMatch {
    pub fn p1(&self) -> Point2<f64> {
        Point2::new(self.p1[0], self.p1[1])
    }

    pub fn p2(&self) -> Point2<f64> {
        Point2::new(self.p2[0], self.p2[1])
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchSet {
    pub matches: Vec<PointMatch>,
}

impl MatchSet {
    pub fn from_indices(kps1: &KeypointSet, kps2: &KeypointSet, idx: &[IndexMatch]) -> Self {
        Self {
            matches: idx
                .iter()
                .map(|m| {
                    let a = kps1.points[m.i];
                    let b = kps2.points[m.j];
                    PointMatch {
                        p1: [a.x, a.y],
                        p2: [b.x, b.y],
                        score: m.score,
                    }
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }
}

/// A ground-truth transfer from one image to the other; `None` when the
/// point has no valid in-bounds image.
pub type Transfer<'a> = &'a (dyn Fn(&Point2<f64>) -> Option<Point2<f64>> + Sync);

fn near_any(p: &Point2<f64>, set: &KeypointSet, eps: f64) -> bool {
    set.points
        .iter()
        .any(|k| (k.x - p.x).powi(2) + (k.y - p.y).powi(2) <= eps * eps)
}

/// Repeated points over transferable points, pooled over both directions:
/// `(c1 + c2) / (n1 + n2)`. `None` when nothing transfers in-bounds.
pub fn repeatability(
    kps1: &KeypointSet,
    kps2: &KeypointSet,
    fwd: Transfer,
    bwd: Transfer,
    eps: f64,
) -> Option<f64> {
    let count = |from: &KeypointSet, to: &KeypointSet, map: Transfer| {
        let mut n = 0usize;
        let mut c = 0usize;
        for k in &from.points {
            if let Some(q) = map(&Point2::new(k.x, k.y)) {
                n += 1;
                if near_any(&q, to, eps) {
                    c += 1;
                }
            }
        }
        (c, n)
    };
    let (c1, n1) = count(kps1, kps2, fwd);
    let (c2, n2) = count(kps2, kps1, bwd);
    (n1 + n2 > 0).then(|| (c1 + c2) as f64 / (n1 + n2) as f64)
}

fn is_correct(m: &PointMatch, gt: Transfer, eps: f64) -> bool {
    gt(&m.p1()).is_some_and(|q| (q - m.p2()).norm() <= eps)
}

/// Matches whose second point lies within `eps` of the ground-truth transfer
/// of the first, over all matches. `None` for an empty set.
pub fn mma(matches: &MatchSet, gt: Transfer, eps: f64) -> Option<f64> {
    if matches.is_empty() {
        return None;
    }
    let c = matches.matches.iter().filter(|m| is_correct(m, gt, eps)).count();
    Some(c as f64 / matches.len() as f64)
}

/// Correct matches over the detections of image 1 that transfer in-bounds.
pub fn matching_score(matches: &MatchSet, kps1: &KeypointSet, gt: Transfer, eps: f64) -> Option<f64> {
    let total = kps1
        .points
        .iter()
        .filter(|k| gt(&Point2::new(k.x, k.y)).is_some())
        .count();
    if total == 0 {
        return None;
    }
    let c = matches.matches.iter().filter(|m| is_correct(m, gt, eps)).count();
    Some((c as f64 / total as f64).min(1.0))
}

/// Normalized area under the cumulative error curve up to `t`:
/// `(1/t) ∫₀ᵗ F(e) de`, which for a step curve is `Σ max(0, t - e_i) / (n t)`.
/// Non-finite errors (failed estimates) contribute zero.
pub fn auc(errors: &[f64], t: f64) -> f64 {
    if errors.is_empty() || t <= 0.0 {
        return 0.0;
    }
    let sum: f64 = errors
        .iter()
        .filter(|e| e.is_finite())
        .map(|&e| (t - e.max(0.0)).max(0.0))
        .sum();
    sum / (t * errors.len() as f64)
}

/// Fraction of errors at or below `t`.
pub fn accuracy(errors: &[f64], t: f64) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    errors.iter().filter(|&&e| e <= t).count() as f64 / errors.len() as f64
}

pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

pub fn rotation_error_deg(r_est: &Matrix3<f64>, r_gt: &Matrix3<f64>) -> f64 {
    let c = (((r_est.transpose() * r_gt).trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    c.acos().to_degrees()
}

/// Angle between translation directions, ignoring sign.
pub fn translation_angle_deg(t_est: &Vector3<f64>, t_gt: &Vector3<f64>) -> f64 {
    let (a, b) = (t_est.norm(), t_gt.norm());
    if a == 0.0 || b == 0.0 {
        return 90.0;
    }
    (t_est.dot(t_gt).abs() / (a * b)).clamp(0.0, 1.0).acos().to_degrees()
}

/// Maximum of rotation and translation-direction error, or the rotation
/// error alone when `rotation_only`.
pub fn pose_error(est: &RelativePose, r_gt: &Matrix3<f64>, t_gt: &Vector3<f64>, rotation_only: bool) -> f64 {
    let r = rotation_error_deg(&est.rotation, r_gt);
    if rotation_only {
        r
    } else {
        r.max(translation_angle_deg(&est.translation, t_gt))
    }
}

/// One evaluated pair for the split protocol; `estimate` is `None` when
/// estimation failed.
#[derive(Debug, Clone)]
pub struct PoseSample {
    pub estimate: Option<RelativePose>,
    pub r_gt: Matrix3<f64>,
    pub t_gt: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PosePartition {
    pub count: usize,
    pub failures: usize,
    pub rotation_only: bool,
    pub errors: Vec<f64>,
    /// `(threshold, auc)`.
    pub auc: Vec<(f64, f64)>,
}

impl PosePartition {
    fn build(samples: &[&PoseSample], rotation_only: bool, thresholds: &[f64]) -> Self {
        let errors: Vec<f64> = samples
            .iter()
            .map(|s| match &s.estimate {
                Some(e) => pose_error(e, &s.r_gt, &s.t_gt, rotation_only),
                None => f64::INFINITY,
            })
            .collect();
        Self {
            count: samples.len(),
            failures: samples.iter().filter(|s| s.estimate.is_none()).count(),
            rotation_only,
            auc: thresholds.iter().map(|&t| (t, auc(&errors, t))).collect(),
            errors,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PoseSplit {
    /// `‖t_gt‖ <= split`, scored by rotation error only.
    pub low: PosePartition,
    pub high: PosePartition,
    pub split: f64,
}

pub fn pose_split_eval(samples: &[PoseSample], split: f64, thresholds: &[f64]) -> PoseSplit {
    let (low, high): (Vec<&PoseSample>, Vec<&PoseSample>) = samples.iter().partition(|s| s.t_gt.norm() <= split);
    PoseSplit {
        low: PosePartition::build(&low, true, thresholds),
        high: PosePartition::build(&high, false, thresholds),
        split,
    }
}

/// Hartley normalization: translate to the centroid and scale to mean
/// distance √2. Returns the transform and the mapped points.
pub(crate) fn normalize_points(pts: &[Point2<f64>]) -> (Matrix3<f64>, Vec<Point2<f64>>) {
    let n = pts.len().max(1) as f64;
    let cx = pts.iter().map(|p| p.x).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p.y).sum::<f64>() / n;
    let mean_dist = pts.iter().map(|p| ((p.x - cx).powi(2) + (p.y - cy).powi(2)).sqrt()).sum::<f64>() / n;
    let s = if mean_dist > 0.0 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    let t = Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0);
    let mapped = pts.iter().map(|p| Point2::new(s * (p.x - cx), s * (p.y - cy))).collect();
    (t, mapped)
}

/// Unit vector minimizing `‖A x‖`, via SVD (rows zero-padded up to the
/// column count so the full right singular basis is available).
pub(crate) fn null_vector(a: &DMatrix<f64>) -> DVector<f64> {
    let cols = a.ncols();
    let padded;
    let a = if a.nrows() < cols {
        padded = {
            let mut m = DMatrix::zeros(cols, cols);
            m.view_mut((0, 0), (a.nrows(), cols)).copy_from(a);
            m
        };
        &padded
    } else {
        a
    };
    let svd = a.clone().svd(false, true);
    let v_t = svd.v_t.expect("v requested");
    let (k, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |best, (i, &s)| if s < best.1 { (i, s) } else { best });
    v_t.row(k).transpose()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::Keypoint;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn kp(x: f64, y: f64) -> Keypoint {
        Keypoint { x, y, score: 1.0 }
    }

    fn shift(dx: f64, w: f64, h: f64) -> impl Fn(&Point2<f64>) -> Option<Point2<f64>> + Sync {
        move |p: &Point2<f64>| {
            let q = Point2::new(p.x + dx, p.y);
            (q.x >= -0.5 && q.x < w - 0.5 && q.y >= -0.5 && q.y < h - 0.5).then_some(q)
        }
    }

    #[test]
    fn repeatability_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts1: Vec<Keypoint> = (0..40).map(|_| kp(rng.random_range(10.0..80.0), rng.random_range(0.0..60.0))).collect();
        let k1 = KeypointSet { points: pts1.clone() };
        let fwd = shift(5.0, 100.0, 64.0);
        let bwd = shift(-5.0, 100.0, 64.0);
        let exact = KeypointSet { points: pts1.iter().map(|k| kp(k.x + 5.0, k.y)).collect() };
        assert_eq!(repeatability(&k1, &exact, &fwd, &bwd, 3.0), Some(1.0));
        assert_eq!(repeatability(&k1, &KeypointSet::default(), &fwd, &bwd, 3.0), Some(0.0));

        // half jittered by at most eps/2, the other half displaced far away
        let eps = 3.0;
        let half: Vec<Keypoint> = pts1
            .iter()
            .enumerate()
            .map(|(i, k)| {
                if i % 2 == 0 {
                    let a = rng.random_range(0.0..std::f64::consts::TAU);
                    let r = rng.random_range(0.0..eps / 2.0);
                    kp(k.x + 5.0 + r * a.cos(), k.y + r * a.sin())
                } else {
                    kp(k.x + 5.0, k.y + 100.0)
                }
            })
            .collect();
        let half = KeypointSet { points: half };
        let far = shift(-5.0, 1e9, 1e9);
        let r = repeatability(&k1, &half, &fwd, &far, eps).unwrap();
        assert!((r - 0.5).abs() <= 1.0 / 40.0, "{r}");
    }

    #[test]
    fn repeatability_without_transfers_is_undefined() {
        let k = KeypointSet { points: vec![kp(1.0, 1.0)] };
        let none = |_: &Point2<f64>| None;
        assert_eq!(repeatability(&k, &k, &none, &none, 3.0), None);
    }

    #[test]
    fn mma_and_matching_score() {
        let gt = shift(2.0, 100.0, 100.0);
        let good = PointMatch { p1: [10.0, 10.0], p2: [12.0, 10.0], score: 1.0 };
        let bad = PointMatch { p1: [20.0, 10.0], p2: [40.0, 10.0], score: 1.0 };
        let all_good = MatchSet { matches: vec![good; 4] };
        assert_eq!(mma(&all_good, &gt, 3.0), Some(1.0));
        assert_eq!(mma(&MatchSet { matches: vec![bad; 3] }, &gt, 3.0), Some(0.0));
        let mixed = MatchSet { matches: vec![good, bad, good, bad] };
        assert_eq!(mma(&mixed, &gt, 3.0), Some(0.5));
        assert_eq!(mma(&MatchSet::default(), &gt, 3.0), None);
        let kps = KeypointSet { points: (0..8).map(|i| kp(10.0 * i as f64, 5.0)).collect() };
        assert_eq!(matching_score(&mixed, &kps, &gt, 3.0), Some(2.0 / 8.0));
    }

    /// Riemann-sum oracle for the area under the cumulative curve.
    fn auc_numeric(errors: &[f64], t: f64, step: f64) -> f64 {
        let n = (t / step).round() as usize;
        let mut area = 0.0;
        for k in 0..n {
            let e = (k as f64 + 0.5) * step;
            area += errors.iter().filter(|&&x| x <= e).count() as f64 / errors.len() as f64 * step;
        }
        area / t
    }

    #[test]
    fn auc_examples_and_oracle() {
        assert_eq!(auc(&[0.0, 0.0, 0.0], 5.0), 1.0);
        assert_eq!(auc(&[25.0, 30.0, f64::INFINITY], 20.0), 0.0);
        assert!((auc(&[0.0, 10.0], 10.0) - 0.5).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let errors: Vec<f64> = (0..200)
            .map(|i| if i % 17 == 0 { f64::INFINITY } else { rng.random_range(0.0..30.0) })
            .collect();
        for t in [5.0, 10.0, 20.0] {
            let exact = auc(&errors, t);
            assert!((exact - auc_numeric(&errors, t, 1e-4)).abs() < 1e-3);
            assert!(exact <= accuracy(&errors, t) + 1e-12);
        }
    }

    fn random_rotation(rng: &mut ChaCha8Rng, max_deg: f64) -> Matrix3<f64> {
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let angle = rng.random_range(0.0..max_deg).to_radians();
        *nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).matrix()
    }

    #[test]
    fn pose_error_examples_and_quaternion_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = random_rotation(&mut rng, 90.0);
        let t = Vector3::new(0.3, -0.1, 0.9);
        let est = RelativePose::new(r, t);
        assert!(pose_error(&est, &r, &t, false) < 1e-6);
        let extra = *nalgebra::Rotation3::from_axis_angle(&Vector3::y_axis(), 10f64.to_radians()).matrix();
        let rotated = RelativePose::new(extra * r, t);
        assert!((pose_error(&rotated, &r, &t, false) - 10.0).abs() < 1e-9);

        for _ in 0..200 {
            let a = random_rotation(&mut rng, 179.0);
            let b = random_rotation(&mut rng, 179.0);
            let qa = nalgebra::UnitQuaternion::from_matrix(&a);
            let qb = nalgebra::UnitQuaternion::from_matrix(&b);
            let oracle = 2.0 * qa.coords.dot(&qb.coords).abs().clamp(0.0, 1.0).acos().to_degrees();
            let got = rotation_error_deg(&a, &b);
            assert!((got - oracle).abs() < 1e-6, "{got} vs {oracle}");
        }
    }

    #[test]
    fn translation_error_is_sign_blind() {
        let t = Vector3::new(1.0, 2.0, 0.5);
        assert!(translation_angle_deg(&(-t), &t) < 1e-6);
        assert!((translation_angle_deg(&Vector3::x(), &Vector3::y()) - 90.0).abs() < 1e-12);
    }

    #[test]
    fn split_partitions_by_translation_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut samples = Vec::new();
        for i in 0..30 {
            let r = random_rotation(&mut rng, 30.0);
            let t = Vector3::new(0.0, 0.0, if i < 12 { 0.1 } else { 0.5 });
            let est = (i % 7 != 0).then(|| RelativePose::new(random_rotation(&mut rng, 5.0) * r, t + Vector3::new(0.01, 0.0, 0.0)));
            samples.push(PoseSample { estimate: est, r_gt: r, t_gt: t });
        }
        let thresholds = [5.0, 10.0, 20.0];
        let split = pose_split_eval(&samples, 0.15, &thresholds);
        assert_eq!(split.low.count, 12);
        assert_eq!(split.high.count, 18);
        let low: Vec<PoseSample> = samples[..12].to_vec();
        let whole_low = pose_split_eval(&low, 1e9, &thresholds);
        assert_eq!(whole_low.low.auc, split.low.auc);
        assert_eq!(whole_low.high.count, 0);

        let zero: Vec<PoseSample> = samples
            .iter()
            .map(|s| PoseSample { t_gt: Vector3::zeros(), ..s.clone() })
            .collect();
        let z = pose_split_eval(&zero, 0.15, &thresholds);
        assert_eq!((z.low.count, z.high.count), (30, 0));
        assert!(z.high.auc.iter().all(|&(_, a)| a == 0.0));
    }

    #[test]
    fn null_vector_of_rank_deficient_matrix() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let v = null_vector(&a);
        assert!((v[2].abs() - 1.0).abs() < 1e-12);
    }
}
