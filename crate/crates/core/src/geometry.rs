//! Pinhole cameras, rigid poses and point re-projection between depth views.
//!
//! Conventions used throughout the crate:
//!
//! * Pixel `(x, y)` has its center at integer coordinates; the image covers
//!   `[-0.5, width - 0.5) × [-0.5, height - 0.5)`.
//! * Camera frame is x right, y down, z forward.
//! * Poses are camera-to-world: `X_world = R · X_cam + t`.
//! * Depth maps store Euclidean ray distance from the camera center, not
//!   z-depth. [`ray_to_z_depth`] and [`z_to_ray_depth`] convert.

use nalgebra::{Matrix3, Point2, Point3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pinhole calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Square-pixel camera with the principal point at the image center and
    /// the given horizontal field of view.
    pub fn from_hfov(hfov_deg: f64, width: usize, height: usize) -> Result<Self> {
        if !(hfov_deg > 0.0 && hfov_deg < 180.0) {
            return Err(Error::InvalidParam(format!(
                "horizontal field of view must be in (0, 180) degrees, got {hfov_deg}"
            )));
        }
        let f = 0.5 * width as f64 / (0.5 * hfov_deg.to_radians()).tan();
        Self::new(
            f,
            f,
            0.5 * (width as f64 - 1.0),
            0.5 * (height as f64 - 1.0),
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.fx.is_finite()
            && self.fy.is_finite()
            && self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParam(format!("invalid camera intrinsics {self:?}")))
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// `K⁻¹ [p; 1]`, the un-normalized viewing ray of a pixel.
    pub fn pixel_ray(&self, p: &Point2<f64>) -> Vector3<f64> {
        Vector3::new((p.x - self.cx) / self.fx, (p.y - self.cy) / self.fy, 1.0)
    }

    pub fn contains(&self, p: &Point2<f64>) -> bool {
        p.x >= -0.5
            && p.y >= -0.5
            && p.x < self.width as f64 - 0.5
            && p.y < self.height as f64 - 0.5
    }

    /// Integer pixel containing `p`, if inside the image.
    pub fn pixel_of(&self, p: &Point2<f64>) -> Option<(usize, usize)> {
        if !self.contains(p) {
            return None;
        }
        let x = (p.x + 0.5).floor() as usize;
        let y = (p.y + 0.5).floor() as usize;
        Some((x.min(self.width - 1), y.min(self.height - 1)))
    }

    pub fn mean_focal(&self) -> f64 {
        0.5 * (self.fx + self.fy)
    }

    /// Same camera at a different resolution (intrinsics scaled per axis).
    pub fn scaled(&self, width: usize, height: usize) -> Result<Self> {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self::new(
            self.fx * sx,
            self.fy * sy,
            (self.cx + 0.5) * sx - 0.5,
            (self.cy + 0.5) * sy - 0.5,
            width,
            height,
        )
    }
}

/// Camera-to-world rigid transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseSE3 {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let pose = Self {
            rotation,
            translation,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn from_parts(rotation: Rotation3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: *rotation.matrix(),
            translation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let orth = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        let det = self.rotation.determinant();
        if orth <= 1e-9 && (det - 1.0).abs() <= 1e-9 && self.translation.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidParam(format!(
                "rotation is not a proper orthonormal matrix (|RᵀR - I| = {orth:e}, det = {det})"
            )))
        }
    }

    /// Camera at `eye` looking toward `target`, with image "up" as close as
    /// possible to `up` (image y axis points away from it).
    pub fn look_at(eye: Point3<f64>, target: Point3<f64>, up: Vector3<f64>) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() < 1e-12 {
            return Err(Error::InvalidSpec("look_at target coincides with eye".into()));
        }
        let forward = forward.normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-9 {
            return Err(Error::InvalidSpec("look_at direction is parallel to up vector".into()));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        Ok(Self {
            rotation: Matrix3::from_columns(&[right, down, forward]),
            translation: eye.coords,
        })
    }

    pub fn center(&self) -> Point3<f64> {
        Point3::from(self.translation)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &PoseSE3) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn transform_point(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t[0],
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t[1],
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t[2],
            0.0, 0.0, 0.0, 1.0,
        ]
    }

    pub fn from_row_major(m: &[f64; 16]) -> Self {
        Self {
            rotation: Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]),
            translation: Vector3::new(m[3], m[7], m[11]),
        }
    }

    /// Transform taking points from this camera's frame into `other`'s frame.
    pub fn relative_to(&self, other: &PoseSE3) -> PoseSE3 {
        other.inverse().compose(self)
    }
}

/// Angle of a rotation matrix in degrees.
pub fn rotation_angle_deg(r: &Matrix3<f64>) -> f64 {
    let c = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    c.acos().to_degrees()
}

/// Per-pixel ray distance, stored as `f32`. Non-finite or non-positive
/// entries are invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::Shape(format!(
                "depth map {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            values: vec![value; width * height],
        }
    }

    pub fn raw(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        let v = self.raw(x, y);
        v.is_finite() && v > 0.0
    }

    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        self.is_valid(x, y).then(|| self.raw(x, y) as f64)
    }

    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.values[y * self.width + x] = v;
    }

    pub fn validity_mask(&self) -> Vec<bool> {
        self.values.iter().map(|v| v.is_finite() && *v > 0.0).collect()
    }
}

/// Converts a ray distance at pixel `p` to z-depth.
pub fn ray_to_z_depth(p: &Point2<f64>, ray_distance: f64, cam: &CameraIntrinsics) -> f64 {
    let ray = cam.pixel_ray(p);
    ray_distance / ray.norm()
}

pub fn z_to_ray_depth(p: &Point2<f64>, z: f64, cam: &CameraIntrinsics) -> f64 {
    let ray = cam.pixel_ray(p);
    z * ray.norm()
}

/// Depth-window parameters for stabilizing re-projection at depth edges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrPParams {
    /// Maximum depth spread (meters) for a window to count as uniform.
    pub eps_d: f64,
    /// Odd window side in pixels.
    pub window: usize,
}

impl Default for PrPParams {
    fn default() -> Self {
        Self {
            eps_d: 3e-2,
            window: 5,
        }
    }
}

impl PrPParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_d > 0.0) || self.window == 0 || self.window % 2 == 0 {
            return Err(Error::InvalidParam(format!(
                "depth window needs eps_d > 0 and an odd window >= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    /// A window of 1 pixel: the depth rule reduces to a plain lookup.
    pub fn disabled(&self) -> Self {
        Self {
            eps_d: self.eps_d,
            window: 1,
        }
    }
}

/// Lifts pixel `p` with ray distance `depth` into world coordinates.
pub fn backproject(
    p: &Point2<f64>,
    depth: f64,
    cam: &CameraIntrinsics,
    pose: &PoseSE3,
) -> Result<Point3<f64>> {
    if !depth.is_finite() || depth <= 0.0 {
        return Err(Error::InvalidDepth(depth));
    }
    let ray = cam.pixel_ray(p);
    let local = ray / ray.norm() * depth;
    Ok(Point3::from(pose.rotation * local + pose.translation))
}

/// Projects a world point; returns the pixel and the camera-frame z.
pub fn project(
    point: &Point3<f64>,
    cam: &CameraIntrinsics,
    pose: &PoseSE3,
) -> Result<(Point2<f64>, f64)> {
    let local = pose.rotation.transpose() * (point.coords - pose.translation);
    project_local(&local, cam)
}

/// Projects a point already expressed in the camera frame.
pub fn project_local(local: &Vector3<f64>, cam: &CameraIntrinsics) -> Result<(Point2<f64>, f64)> {
    let z = local.z;
    if !(z > 1e-9) {
        return Err(Error::BehindCamera(z));
    }
    let px = Point2::new(cam.fx * local.x / z + cam.cx, cam.fy * local.y / z + cam.cy);
    Ok((px, z))
}

/// Ray distance at `p`, taking the window minimum when the window straddles
/// a depth discontinuity wider than `eps_d`.
///
/// The window is clipped at the image border. If the center pixel itself has
/// no valid depth the window minimum is used.
pub fn robust_depth(p: &Point2<f64>, depth: &DepthMap, params: &PrPParams) -> Result<f64> {
    let (px, py) = pixel_in(depth, p).ok_or(Error::InvalidDepth(f64::NAN))?;
    let half = params.window / 2;
    let x0 = px.saturating_sub(half);
    let y0 = py.saturating_sub(half);
    let x1 = (px + half).min(depth.width - 1);
    let y1 = (py + half).min(depth.height - 1);

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for y in y0..=y1 {
        for x in x0..=x1 {
            if let Some(d) = depth.get(x, y) {
                lo = lo.min(d);
                hi = hi.max(d);
            }
        }
    }
    if !lo.is_finite() {
        return Err(Error::InvalidDepth(f64::NAN));
    }
    match depth.get(px, py) {
        Some(center) if hi - lo <= params.eps_d => Ok(center),
        _ => Ok(lo),
    }
}

fn pixel_in(depth: &DepthMap, p: &Point2<f64>) -> Option<(usize, usize)> {
    let inside = p.x >= -0.5
        && p.y >= -0.5
        && p.x < depth.width as f64 - 0.5
        && p.y < depth.height as f64 - 0.5;
    inside.then(|| {
        (
            ((p.x + 0.5).floor() as usize).min(depth.width - 1),
            ((p.y + 0.5).floor() as usize).min(depth.height - 1),
        )
    })
}

/// Anything that carries a camera, a pose and a ray-distance depth map.
pub trait PosedDepth {
    fn camera(&self) -> &CameraIntrinsics;
    fn pose(&self) -> &PoseSE3;
    fn depth(&self) -> &DepthMap;
}

/// Borrowed camera, pose and depth, for callers without a full rendered view.
#[derive(Debug, Clone, Copy)]
pub struct DepthView<'a> {
    pub cam: &'a CameraIntrinsics,
    pub pose: &'a PoseSE3,
    pub depth: &'a DepthMap,
}

impl PosedDepth for DepthView<'_> {
    fn camera(&self) -> &CameraIntrinsics {
        self.cam
    }
    fn pose(&self) -> &PoseSE3 {
        self.pose
    }
    fn depth(&self) -> &DepthMap {
        self.depth
    }
}

/// Why a pixel has no re-projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rejection {
    OutOfBounds,
    BehindCamera,
    Occluded,
    InvalidDepth,
}

impl Rejection {
    pub fn as_str(&self) -> &'static str {
        match self {
            Rejection::OutOfBounds => "out-of-bounds",
            Rejection::BehindCamera => "behind-camera",
            Rejection::Occluded => "occluded",
            Rejection::InvalidDepth => "invalid-depth",
        }
    }
}

impl std::fmt::Display for Rejection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Re-projects pixel `p` of `src` into `dst`.
///
/// The landing is rejected when it leaves the destination image, falls
/// behind the destination camera, or sits more than `eps_d` behind the
/// destination's (window-stabilized) depth at the landing pixel.
pub fn reproject<S, D>(
    p: &Point2<f64>,
    src: &S,
    dst: &D,
    params: &PrPParams,
) -> std::result::Result<Point2<f64>, Rejection>
where
    S: PosedDepth + ?Sized,
    D: PosedDepth + ?Sized,
{
    let d = robust_depth(p, src.depth(), params).map_err(|_| Rejection::InvalidDepth)?;
    let world =
        backproject(p, d, src.camera(), src.pose()).map_err(|_| Rejection::InvalidDepth)?;
    let dst_pose = dst.pose();
    let local = dst_pose.rotation.transpose() * (world.coords - dst_pose.translation);
    let (q, _z) = project_local(&local, dst.camera()).map_err(|_| Rejection::BehindCamera)?;
    if !dst.camera().contains(&q) {
        return Err(Rejection::OutOfBounds);
    }
    let visible = match robust_depth(&q, dst.depth(), params) {
        Ok(dst_d) => local.norm() - dst_d <= params.eps_d,
        // Nothing was rendered at the landing site, so nothing can hide it.
        Err(_) => true,
    };
    if visible {
        Ok(q)
    } else {
        Err(Rejection::Occluded)
    }
}
