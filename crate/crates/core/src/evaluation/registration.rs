//! RGB-D pair registration: descriptor matches lifted to 3D and aligned by
//! weighted Kabsch.

use nalgebra::{Matrix3, Point2, Point3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{median, rotation_error_deg};
use crate::error::{Error, Result};
use crate::frontend::{dense_grid, describe_gray, dot, match_mnn, GrayF, Keypoint, KeypointSet, PATCH};
use crate::geometry::{backproject, PoseSE3};
use crate::scene::RenderedView;

/// Rigid transform minimizing `Σ w_i ‖R p_i + t − q_i‖²`.
pub fn kabsch_weighted(p: &[Point3<f64>], q: &[Point3<f64>], w: &[f64]) -> Result<PoseSE3> {
    if p.len() != q.len() || p.len() != w.len() {
        return Err(Error::Shape(format!("{} / {} / {} points and weights", p.len(), q.len(), w.len())));
    }
    if w.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
        return Err(Error::InvalidParam("weights must be finite and non-negative".into()));
    }
    let total: f64 = w.iter().sum();
    if p.len() < 3 || total <= 0.0 {
        return Err(Error::Degenerate("need at least three weighted points".into()));
    }
    let cp = p.iter().zip(w).fold(Vector3::zeros(), |a, (x, &k)| a + x.coords * k) / total;
    let cq = q.iter().zip(w).fold(Vector3::zeros(), |a, (x, &k)| a + x.coords * k) / total;
    let mut h = Matrix3::zeros();
    for ((a, b), &k) in p.iter().zip(q).zip(w) {
        h += (a.coords - cp) * (b.coords - cq).transpose() * k;
    }
    let svd = h.svd(true, true);
    let mut s: Vec<f64> = svd.singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    if s[0] <= 0.0 || s[1] <= 1e-12 * s[0] {
        return Err(Error::Degenerate("weighted points are collinear or coincident".into()));
    }
    let (u, v_t) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let r = v * fix * u.transpose();
    let t = cq - r * cp;
    Ok(PoseSE3 {
        rotation: r,
        translation: t,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationParams {
    /// Pixel step of the dense descriptor grid.
    pub stride: usize,
    pub descriptor_dim: usize,
    pub ratio: f64,
    /// Residual trimming rounds after the initial fit.
    pub refine_iterations: usize,
    /// Lower bound on the trimming radius, in scene units.
    pub min_inlier_distance: f64,
    /// Pixel step of the cloud used for the chamfer distance.
    pub chamfer_stride: usize,
    /// Refine each view-2 match location to the sub-pixel similarity peak.
    pub subpixel: bool,
}

impl Default for RegistrationParams {
    fn default() -> Self {
        Self {
            stride: 2,
            descriptor_dim: 128,
            ratio: 0.9,
            refine_iterations: 5,
            min_inlier_distance: 0.002,
            chamfer_stride: 8,
            subpixel: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegistrationResult {
    /// Maps camera-1 coordinates to camera-2 coordinates.
    pub transform: PoseSE3,
    pub rotation_error_deg: f64,
    /// In centimetres (scene units are metres).
    pub translation_error_cm: f64,
    pub chamfer_cm: f64,
    pub matches: usize,
    pub inliers: usize,
}

fn lift(view: &RenderedView, x: f64, y: f64) -> Option<Point3<f64>> {
    let d = view.depth.get(x as usize, y as usize)?;
    backproject(&Point2::new(x, y), d, &view.cam, &PoseSE3::identity()).ok()
}

/// Lift at a sub-pixel location with bilinear ray distance. Locations whose
/// four neighbours disagree by more than 1% in depth are dropped.
fn lift_bilinear(view: &RenderedView, x: f64, y: f64) -> Option<Point3<f64>> {
    let (x0, y0) = (x.floor(), y.floor());
    if x0 < 0.0 || y0 < 0.0 {
        return None;
    }
    let (ix, iy) = (x0 as usize, y0 as usize);
    if ix + 1 >= view.cam.width || iy + 1 >= view.cam.height {
        return lift(view, x.round(), y.round());
    }
    let (fx, fy) = (x - x0, y - y0);
    let d = [
        view.depth.get(ix, iy)?,
        view.depth.get(ix + 1, iy)?,
        view.depth.get(ix, iy + 1)?,
        view.depth.get(ix + 1, iy + 1)?,
    ];
    let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = d.iter().copied().fold(0.0, f64::max);
    if hi - lo > 0.01 * lo {
        return None;
    }
    let depth = (1.0 - fy) * ((1.0 - fx) * d[0] + fx * d[1]) + fy * ((1.0 - fx) * d[2] + fx * d[3]);
    backproject(&Point2::new(x, y), depth, &view.cam, &PoseSE3::identity()).ok()
}

/// Climbs from `start` to the integer location of locally maximal
/// similarity with `target`, then fits a parabola along each axis.
fn refine_location(g: &GrayF, target: &[f64], start: (usize, usize), dim: usize, max_steps: usize) -> Option<Point2<f64>> {
    let sim = |x: isize, y: isize| -> Option<f64> {
        if x < 0 || y < 0 {
            return None;
        }
        let kp = KeypointSet {
            points: vec![Keypoint { x: x as f64, y: y as f64, score: 0.0 }],
        };
        let d = describe_gray(g, &kp, dim).ok()?;
        (d.descriptors.len() == 1).then(|| dot(target, d.descriptors.get(0)))
    };
    let (mut x, mut y) = (start.0 as isize, start.1 as isize);
    let mut here = sim(x, y)?;
    let mut around;
    let mut steps = 0;
    loop {
        around = [sim(x - 1, y), sim(x + 1, y), sim(x, y - 1), sim(x, y + 1)];
        let best = (0..4)
            .filter_map(|k| around[k].map(|v| (k, v)))
            .fold(None, |acc: Option<(usize, f64)>, c| match acc {
                Some(a) if a.1 >= c.1 => Some(a),
                _ => Some(c),
            });
        match best {
            Some((k, v)) if v > here && steps < max_steps => {
                let (dx, dy) = [(-1, 0), (1, 0), (0, -1), (0, 1)][k];
                x += dx;
                y += dy;
                here = v;
                steps += 1;
            }
            _ => break,
        }
    }
    let vertex = |minus: Option<f64>, plus: Option<f64>| -> f64 {
        match (minus, plus) {
            (Some(m), Some(p)) => {
                let curv = m - 2.0 * here + p;
                if curv < 0.0 {
                    (0.5 * (m - p) / curv).clamp(-0.5, 0.5)
                } else {
                    0.0
                }
            }
            _ => 0.0,
        }
    };
    Some(Point2::new(
        x as f64 + vertex(around[0], around[1]),
        y as f64 + vertex(around[2], around[3]),
    ))
}

/// Symmetric mean nearest-neighbour distance.
pub fn chamfer(a: &[Point3<f64>], b: &[Point3<f64>]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return f64::INFINITY;
    }
    let one_way = |from: &[Point3<f64>], to: &[Point3<f64>]| {
        let d: Vec<f64> = from
            .par_iter()
            .map(|p| to.iter().map(|q| (p - q).norm_squared()).fold(f64::INFINITY, f64::min).sqrt())
            .collect();
        d.iter().sum::<f64>() / d.len() as f64
    };
    0.5 * (one_way(a, b) + one_way(b, a))
}

fn residuals(t: &PoseSE3, p: &[Point3<f64>], q: &[Point3<f64>]) -> Vec<f64> {
    p.iter().zip(q).map(|(a, b)| (t.transform_point(a) - b).norm()).collect()
}

/// Dense descriptor matching with a ratio test, lifting through depth,
/// weighted Kabsch, then a few rounds of refitting on points within a
/// residual radius. Errors are measured against the ground-truth poses.
pub fn register_pair(v1: &RenderedView, v2: &RenderedView, params: &RegistrationParams) -> Result<RegistrationResult> {
    let margin = PATCH / 2 + 1;
    let grid1 = dense_grid(v1.cam.width, v1.cam.height, params.stride, margin);
    let grid2 = dense_grid(v2.cam.width, v2.cam.height, params.stride, margin);
    let (g1, g2) = (GrayF::from_rgb(&v1.image), GrayF::from_rgb(&v2.image));
    let d1 = describe_gray(&g1, &grid1, params.descriptor_dim)?;
    let d2 = describe_gray(&g2, &grid2, params.descriptor_dim)?;
    let idx = match_mnn(&d1.descriptors, &d2.descriptors, Some(params.ratio));

    let lifted: Vec<Option<(Point3<f64>, Point3<f64>, f64)>> = idx
        .par_iter()
        .map(|m| {
            let a = d1.keypoints.points[m.i];
            let b = d2.keypoints.points[m.j];
            let x = lift(v1, a.x, a.y)?;
            let y = if params.subpixel {
                let target = d1.descriptors.get(m.i);
                let at = refine_location(&g2, target, (b.x as usize, b.y as usize), params.descriptor_dim, params.stride)?;
                lift_bilinear(v2, at.x, at.y)?
            } else {
                lift(v2, b.x, b.y)?
            };
            Some((x, y, m.score.max(0.0)))
        })
        .collect();
    let mut p = Vec::new();
    let mut q = Vec::new();
    let mut w = Vec::new();
    for (x, y, s) in lifted.into_iter().flatten() {
        p.push(x);
        q.push(y);
        w.push(s);
    }
    if p.len() < 3 {
        return Err(Error::EstimationFailed(format!("{} usable matches", p.len())));
    }
    let mut t = kabsch_weighted(&p, &q, &w).map_err(|e| Error::EstimationFailed(e.to_string()))?;
    let mut inliers = p.len();
    for _ in 0..params.refine_iterations {
        let r = residuals(&t, &p, &q);
        let radius = (2.5 * median(&r).unwrap_or(0.0)).max(params.min_inlier_distance);
        let keep: Vec<usize> = (0..p.len()).filter(|&i| r[i] <= radius).collect();
        if keep.len() < 3 {
            break;
        }
        let pick = |v: &[Point3<f64>]| keep.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let wk: Vec<f64> = keep.iter().map(|&i| w[i]).collect();
        match kabsch_weighted(&pick(&p), &pick(&q), &wk) {
            Ok(next) => {
                t = next;
                inliers = keep.len();
            }
            Err(_) => break,
        }
    }

    let gt = v1.pose.relative_to(&v2.pose);
    let cloud: Vec<Point3<f64>> = {
        let s = params.chamfer_stride.max(1);
        (0..v1.cam.height)
            .step_by(s)
            .flat_map(|y| (0..v1.cam.width).step_by(s).map(move |x| (x, y)))
            .filter_map(|(x, y)| lift(v1, x as f64, y as f64))
            .collect()
    };
    let a: Vec<Point3<f64>> = cloud.iter().map(|x| gt.transform_point(x)).collect();
    let b: Vec<Point3<f64>> = cloud.iter().map(|x| t.transform_point(x)).collect();
    Ok(RegistrationResult {
        rotation_error_deg: rotation_error_deg(&t.rotation, &gt.rotation),
        translation_error_cm: (t.translation - gt.translation).norm() * 100.0,
        chamfer_cm: chamfer(&a, &b) * 100.0,
        transform: t,
        matches: p.len(),
        inliers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, UnitQuaternion, Matrix4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rigid(rng: &mut ChaCha8Rng) -> PoseSE3 {
        let r = Rotation3::from_euler_angles(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        PoseSE3::from_parts(r, Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
    }

    fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point3<f64>> {
        (0..n)
            .map(|_| Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn exact_transform_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let t = random_rigid(&mut rng);
            let p = cloud(&mut rng, 30);
            let q: Vec<Point3<f64>> = p.iter().map(|x| t.transform_point(x)).collect();
            let est = kabsch_weighted(&p, &q, &vec![1.0; 30]).unwrap();
            assert!((est.rotation - t.rotation).abs().max() < 1e-9);
            assert!((est.translation - t.translation).abs().max() < 1e-9);
        }
    }

    #[test]
    fn zero_weight_outlier_is_ignored() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = random_rigid(&mut rng);
        let p = cloud(&mut rng, 10);
        let mut q: Vec<Point3<f64>> = p.iter().map(|x| t.transform_point(x)).collect();
        q[3] += Vector3::new(5.0, -3.0, 2.0);
        let mut w = vec![1.0; 10];
        w[3] = 0.0;
        let est = kabsch_weighted(&p, &q, &w).unwrap();
        assert!((est.rotation - t.rotation).abs().max() < 1e-9);
    }

    /// Horn's closed form: the optimal rotation quaternion is the top
    /// eigenvector of a 4×4 matrix built from the weighted covariance.
    fn horn(p: &[Point3<f64>], q: &[Point3<f64>], w: &[f64]) -> PoseSE3 {
        let tw: f64 = w.iter().sum();
        let cp = p.iter().zip(w).fold(Vector3::zeros(), |a, (x, &k)| a + x.coords * k) / tw;
        let cq = q.iter().zip(w).fold(Vector3::zeros(), |a, (x, &k)| a + x.coords * k) / tw;
        let mut s = Matrix3::zeros();
        for ((a, b), &k) in p.iter().zip(q).zip(w) {
            s += (a.coords - cp) * (b.coords - cq).transpose() * k;
        }
        let (sxx, sxy, sxz) = (s[(0, 0)], s[(0, 1)], s[(0, 2)]);
        let (syx, syy, syz) = (s[(1, 0)], s[(1, 1)], s[(1, 2)]);
        let (szx, szy, szz) = (s[(2, 0)], s[(2, 1)], s[(2, 2)]);
        let n = Matrix4::new(
            sxx + syy + szz, syz - szy, szx - sxz, sxy - syx,
            syz - szy, sxx - syy - szz, sxy + syx, szx + sxz,
            szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy,
            sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz,
        );
        let eig = n.symmetric_eigen();
        let k = eig.eigenvalues.imax();
        let v = eig.eigenvectors.column(k);
        let quat = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(v[0], v[1], v[2], v[3]));
        let r = *quat.to_rotation_matrix().matrix();
        PoseSE3 { rotation: r, translation: cq - r * cp }
    }

    #[test]
    fn noisy_fit_matches_horn_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let normal = rand_distr::Normal::new(0.0, 0.01).unwrap();
        for _ in 0..20 {
            let t = random_rigid(&mut rng);
            let p = cloud(&mut rng, 50);
            let q: Vec<Point3<f64>> = p
                .iter()
                .map(|x| t.transform_point(x) + Vector3::from_fn(|_, _| rng.sample(normal)))
                .collect();
            let w: Vec<f64> = (0..50).map(|_| rng.random_range(0.1..2.0)).collect();
            let a = kabsch_weighted(&p, &q, &w).unwrap();
            let b = horn(&p, &q, &w);
            assert!((a.rotation - b.rotation).abs().max() < 1e-9);
            assert!((a.translation - b.translation).abs().max() < 1e-9);
            let cost = |x: &PoseSE3| -> f64 { p.iter().zip(&q).zip(&w).map(|((a, b), k)| k * (x.transform_point(a) - b).norm_squared()).sum() };
            assert!((cost(&a) - cost(&b)).abs() < 1e-9);
        }
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let p: Vec<Point3<f64>> = (0..5).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
        assert!(matches!(kabsch_weighted(&p, &p, &[1.0; 5]), Err(Error::Degenerate(_))));
        assert!(matches!(kabsch_weighted(&p[..2], &p[..2], &[1.0; 2]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn chamfer_of_identical_clouds_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = cloud(&mut rng, 100);
        assert_eq!(chamfer(&a, &a), 0.0);
        let b: Vec<Point3<f64>> = a.iter().map(|x| x + Vector3::new(0.0, 0.0, 1e-3)).collect();
        assert!(chamfer(&a, &b) <= 1e-3 + 1e-12);
    }
}
