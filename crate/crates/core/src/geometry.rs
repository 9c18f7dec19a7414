//! Ground camera, ground plane and aerial image geometry.
//!
//! Conventions: world x points east, y north, z up. The ground camera looks
//! horizontally with image u to the right and v down; a pose's yaw is the
//! heading measured from +y, counter-clockwise positive. Aerial images are
//! orthographic and north-up, with v growing southward.
//!
//! Each ground pixel below the horizon intersects the plane z = 0 at a point
//! whose offset in the camera's planar frame (lateral `X`, forward `Z`) does
//! not depend on the pose. That makes the ground-to-aerial warp an affine
//! function of (x, y) composed with a rotation by yaw, which is what the
//! graph ops below differentiate.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{in_bounds, CustomOp, Graph, NodeId, Real, Tensor};

/// Rays closer than this (in pixels) to the horizon row are treated as not
/// hitting the ground.
pub const HORIZON_EPS_PX: f64 = 1e-3;

pub type Mat3 = [[f64; 3]; 3];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub height_m: f64,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.height_m > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "invalid intrinsics {self:?}"
            )));
        }
        Ok(())
    }

    /// Intrinsics of an image downsampled by `scale`. Pixel `i` of the
    /// downsampled image corresponds to pixel `scale * i` of the original.
    pub fn downscaled(&self, scale: u32) -> Self {
        let s = scale as f64;
        CameraIntrinsics {
            fx: self.fx / s,
            fy: self.fy / s,
            cx: self.cx / s,
            cy: self.cy / s,
            height_m: self.height_m,
        }
    }
}

/// Planar camera pose: position in meters and heading in radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x_m: f64,
    pub y_m: f64,
    pub yaw_rad: f64,
}

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

impl Pose {
    pub fn new(x_m: f64, y_m: f64, yaw_rad: f64) -> Self {
        Pose {
            x_m,
            y_m,
            yaw_rad: wrap_angle(yaw_rad),
        }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x_m, self.y_m, self.yaw_rad]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Pose::new(v[0], v[1], v[2])
    }

    pub fn to_tensor(self) -> Tensor {
        Tensor::from_vec(self.to_array().iter().map(|&v| v as Real).collect())
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let d = t.data();
        Pose::new(d[0] as f64, d[1] as f64, d[2] as f64)
    }

    pub fn is_finite(&self) -> bool {
        self.x_m.is_finite() && self.y_m.is_finite() && self.yaw_rad.is_finite()
    }

    /// Unit heading vector in the world plane.
    pub fn forward(&self) -> (f64, f64) {
        (-self.yaw_rad.sin(), self.yaw_rad.cos())
    }

    /// Unit vector to the camera's right in the world plane.
    pub fn right(&self) -> (f64, f64) {
        (self.yaw_rad.cos(), self.yaw_rad.sin())
    }
}

/// Georeferencing of a north-up orthographic aerial image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AerialGeoref {
    /// Meters per pixel.
    pub mpp: f64,
    pub center_x_m: f64,
    pub center_y_m: f64,
    pub width_px: usize,
    pub height_px: usize,
}

impl AerialGeoref {
    /// Georeference of the same footprint downsampled by `scale`.
    pub fn downscaled(&self, scale: u32) -> Self {
        AerialGeoref {
            mpp: self.mpp * scale as f64,
            width_px: self.width_px / scale as usize,
            height_px: self.height_px / scale as usize,
            ..*self
        }
    }
}

/// Camera-to-world rotation (columns: camera x, y, z axes in world
/// coordinates) and camera center.
pub fn pose_to_rt(pose: &Pose, intr: &CameraIntrinsics) -> (Mat3, [f64; 3]) {
    let (rx, ry) = pose.right();
    let (fx, fy) = pose.forward();
    let r = [[rx, 0.0, fx], [ry, 0.0, fy], [0.0, -1.0, 0.0]];
    (r, [pose.x_m, pose.y_m, intr.height_m])
}

/// Inverse of [`pose_to_rt`] for rotations about the vertical axis.
pub fn rt_to_pose(r: &Mat3, t: &[f64; 3]) -> Pose {
    let (fx, fy) = (r[0][2], r[1][2]);
    Pose::new(t[0], t[1], (-fx).atan2(fy))
}

/// Where a ground-image pixel ray meets the plane z = 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundHit {
    pub x_m: f64,
    pub y_m: f64,
    pub valid: bool,
}

/// Offset of a pixel's ground point in the camera's planar frame
/// `(lateral, forward)`, or `None` above the horizon.
pub fn pixel_ground_offset(u: f64, v: f64, intr: &CameraIntrinsics) -> Option<(f64, f64)> {
    if v <= intr.cy + HORIZON_EPS_PX {
        return None;
    }
    let a = (u - intr.cx) / intr.fx;
    let b = (v - intr.cy) / intr.fy;
    let forward = intr.height_m / b;
    Some((a * forward, forward))
}

#[inline]
fn offset_to_world(lateral: f64, forward: f64, pose: &Pose) -> (f64, f64) {
    let (c, s) = (pose.yaw_rad.cos(), pose.yaw_rad.sin());
    (
        pose.x_m + lateral * c - forward * s,
        pose.y_m + lateral * s + forward * c,
    )
}

pub fn ground_pixel_to_world(u: f64, v: f64, pose: &Pose, intr: &CameraIntrinsics) -> GroundHit {
    match pixel_ground_offset(u, v, intr) {
        Some((lat, fwd)) => {
            let (x, y) = offset_to_world(lat, fwd, pose);
            GroundHit {
                x_m: x,
                y_m: y,
                valid: true,
            }
        }
        None => GroundHit {
            x_m: 0.0,
            y_m: 0.0,
            valid: false,
        },
    }
}

pub fn world_to_aerial_pixel(x_m: f64, y_m: f64, geo: &AerialGeoref) -> (f64, f64) {
    (
        geo.width_px as f64 / 2.0 + (x_m - geo.center_x_m) / geo.mpp,
        geo.height_px as f64 / 2.0 - (y_m - geo.center_y_m) / geo.mpp,
    )
}

pub fn aerial_pixel_to_world(u: f64, v: f64, geo: &AerialGeoref) -> (f64, f64) {
    (
        geo.center_x_m + (u - geo.width_px as f64 / 2.0) * geo.mpp,
        geo.center_y_m - (v - geo.height_px as f64 / 2.0) * geo.mpp,
    )
}

/// Analytic `d(u_s, v_s) / d(x, y, yaw)` for one ground pixel.
pub fn jacobian_dps_dxi(
    u: f64,
    v: f64,
    pose: &Pose,
    intr: &CameraIntrinsics,
    geo: &AerialGeoref,
) -> Result<[[f64; 3]; 2]> {
    let (lat, fwd) = pixel_ground_offset(u, v, intr).ok_or(Error::InvalidPixel { u, v })?;
    Ok(jacobian_from_offset(lat, fwd, pose.yaw_rad, geo.mpp))
}

#[inline]
fn jacobian_from_offset(lat: f64, fwd: f64, yaw: f64, mpp: f64) -> [[f64; 3]; 2] {
    let (c, s) = (yaw.cos(), yaw.sin());
    let dwx = -lat * s - fwd * c;
    let dwy = lat * c - fwd * s;
    [[1.0 / mpp, 0.0, dwx / mpp], [0.0, -1.0 / mpp, -dwy / mpp]]
}

/// Pose-independent ground-plane offsets for every pixel of a ground image
/// (or pyramid level).
#[derive(Clone, Debug)]
pub struct GroundRays {
    pub height: usize,
    pub width: usize,
    pub lateral: Vec<f64>,
    pub forward: Vec<f64>,
    pub valid: Vec<bool>,
}

impl GroundRays {
    pub fn new(height: usize, width: usize, intr: &CameraIntrinsics) -> Self {
        let n = height * width;
        let mut lateral = vec![0.0; n];
        let mut forward = vec![0.0; n];
        let mut valid = vec![false; n];
        for v in 0..height {
            for u in 0..width {
                let i = v * width + u;
                if let Some((l, f)) = pixel_ground_offset(u as f64, v as f64, intr) {
                    lateral[i] = l;
                    forward[i] = f;
                    valid[i] = true;
                }
            }
        }
        GroundRays {
            height,
            width,
            lateral,
            forward,
            valid,
        }
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }
}

/// Aerial-pixel coordinates of every ground pixel's ground point.
#[derive(Clone, Debug)]
pub struct WarpGrid {
    /// `2 x H x W`: aerial u then v. Invalid pixels hold `-1`.
    pub coords: Tensor,
    /// Pixel hits the ground plane (does not check aerial bounds).
    pub valid: Vec<bool>,
}

/// Ground-to-aerial sampling grid for one pyramid level.
///
/// `ground_hw` are the level's ground-map dimensions; intrinsics and the
/// georeference are rescaled by `level_scale`.
pub fn build_warp_grid(
    pose: &Pose,
    intr: &CameraIntrinsics,
    geo: &AerialGeoref,
    level_scale: u32,
    ground_hw: (usize, usize),
) -> WarpGrid {
    let level = LevelGeometry::new(intr, geo, level_scale, ground_hw);
    WarpGrid {
        coords: level.coords(pose),
        valid: level.rays.valid.clone(),
    }
}

/// Everything needed to warp one pyramid level, independent of the pose.
#[derive(Clone, Debug)]
pub struct LevelGeometry {
    pub rays: Arc<GroundRays>,
    pub geo: AerialGeoref,
    pub scale: u32,
}

impl LevelGeometry {
    pub fn new(
        intr: &CameraIntrinsics,
        geo: &AerialGeoref,
        level_scale: u32,
        ground_hw: (usize, usize),
    ) -> Self {
        let li = intr.downscaled(level_scale);
        LevelGeometry {
            rays: Arc::new(GroundRays::new(ground_hw.0, ground_hw.1, &li)),
            geo: geo.downscaled(level_scale),
            scale: level_scale,
        }
    }

    pub fn coords(&self, pose: &Pose) -> Tensor {
        let r = &self.rays;
        let n = r.len();
        let mut out = vec![-1.0 as Real; 2 * n];
        for i in 0..n {
            if !r.valid[i] {
                continue;
            }
            let (x, y) = offset_to_world(r.lateral[i], r.forward[i], pose);
            let (us, vs) = world_to_aerial_pixel(x, y, &self.geo);
            out[i] = us as Real;
            out[n + i] = vs as Real;
        }
        Tensor::new(vec![2, r.height, r.width], out).expect("warp dims")
    }

    /// Fraction of ground pixels that hit the ground plane inside the
    /// aerial map at `pose`.
    pub fn valid_fraction(&self, pose: &Pose) -> f64 {
        let c = self.coords(pose);
        let n = self.rays.len();
        let (us, vs) = c.data().split_at(n);
        let (w, h) = (self.geo.width_px, self.geo.height_px);
        let hits = (0..n)
            .filter(|&i| self.rays.valid[i] && in_bounds(us[i], vs[i], w, h))
            .count();
        hits as f64 / n as f64
    }

    fn jacobian(&self, pose: &Pose) -> Tensor {
        let r = &self.rays;
        let n = r.len();
        let mut out = vec![0.0 as Real; 6 * n];
        for i in 0..n {
            if !r.valid[i] {
                continue;
            }
            let j = jacobian_from_offset(r.lateral[i], r.forward[i], pose.yaw_rad, self.geo.mpp);
            for row in 0..2 {
                for col in 0..3 {
                    out[(3 * row + col) * n + i] = j[row][col] as Real;
                }
            }
        }
        Tensor::new(vec![6, r.height, r.width], out).expect("jacobian dims")
    }

    /// Differentiable warp grid: `pose` is a 3-element node
    /// `(x, y, yaw)`; returns a `2 x H x W` coordinate node.
    pub fn warp_node(&self, g: &mut Graph, pose: NodeId) -> NodeId {
        let p = Pose::from_tensor(g.value(pose));
        let out = self.coords(&p);
        g.custom(
            &[pose],
            out,
            Box::new(WarpGridOp {
                level: self.clone(),
            }),
        )
    }

    /// Differentiable per-pixel Jacobian `6 x H x W`, rows
    /// `du/dx, du/dy, du/dyaw, dv/dx, dv/dy, dv/dyaw`.
    pub fn jacobian_node(&self, g: &mut Graph, pose: NodeId) -> NodeId {
        let p = Pose::from_tensor(g.value(pose));
        let out = self.jacobian(&p);
        g.custom(
            &[pose],
            out,
            Box::new(WarpJacobianOp {
                level: self.clone(),
            }),
        )
    }
}

struct WarpGridOp {
    level: LevelGeometry,
}

impl CustomOp for WarpGridOp {
    fn name(&self) -> &str {
        "warp_grid"
    }

    fn vjp(&self, inputs: &[&Tensor], _output: &Tensor, g: &[Real]) -> Vec<Option<Vec<Real>>> {
        let pose = Pose::from_tensor(inputs[0]);
        let r = &self.level.rays;
        let n = r.len();
        let mut acc = [0.0f64; 3];
        for i in 0..n {
            if !r.valid[i] {
                continue;
            }
            let j =
                jacobian_from_offset(r.lateral[i], r.forward[i], pose.yaw_rad, self.level.geo.mpp);
            let (gu, gv) = (g[i] as f64, g[n + i] as f64);
            for (k, a) in acc.iter_mut().enumerate() {
                *a += gu * j[0][k] + gv * j[1][k];
            }
        }
        vec![Some(acc.iter().map(|&v| v as Real).collect())]
    }
}

struct WarpJacobianOp {
    level: LevelGeometry,
}

impl CustomOp for WarpJacobianOp {
    fn name(&self) -> &str {
        "warp_jacobian"
    }

    fn vjp(&self, inputs: &[&Tensor], _output: &Tensor, g: &[Real]) -> Vec<Option<Vec<Real>>> {
        // Only the yaw columns depend on the pose, and only through yaw.
        let pose = Pose::from_tensor(inputs[0]);
        let (c, s) = (pose.yaw_rad.cos(), pose.yaw_rad.sin());
        let mpp = self.level.geo.mpp;
        let r = &self.level.rays;
        let n = r.len();
        let mut dyaw = 0.0f64;
        for i in 0..n {
            if !r.valid[i] {
                continue;
            }
            let (l, f) = (r.lateral[i], r.forward[i]);
            let d_du_dyaw = (-l * c + f * s) / mpp;
            let d_dv_dyaw = (l * s + f * c) / mpp;
            dyaw += g[2 * n + i] as f64 * d_du_dyaw + g[5 * n + i] as f64 * d_dv_dyaw;
        }
        vec![Some(vec![0.0, 0.0, dyaw as Real])]
    }
}
