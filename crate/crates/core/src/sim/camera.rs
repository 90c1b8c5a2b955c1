//! Pinhole depth camera with exact raycasting.
//!
//! The camera frame is the body frame: z forward, x right, y down.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::env::Environment;
use super::TruePose;
use crate::sfc::Aabb;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub min_range: f64,
    pub max_range: f64,
}

impl CameraModel {
    /// Centered pinhole model from a horizontal field of view in degrees and
    /// square pixels.
    pub fn from_fov(width: usize, height: usize, hfov_deg: f64, min_range: f64, max_range: f64) -> Self {
        let cx = (width as f64 - 1.0) * 0.5;
        let cy = (height as f64 - 1.0) * 0.5;
        let fx = cx / (hfov_deg.to_radians() * 0.5).tan();
        Self { fx, fy: fx, cx, cy, width, height, min_range, max_range }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err("fx and fy must be positive".into());
        }
        if !(self.max_range > self.min_range && self.min_range > 0.0) {
            return Err("require max_range > min_range > 0".into());
        }
        if self.width < 2 || self.height < 2 {
            return Err("image must be at least 2x2 pixels".into());
        }
        Ok(())
    }

    /// Unit ray through pixel center `(u, v)`.
    #[inline]
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0).normalize()
    }

    /// Continuous pixel coordinates of a camera-frame point with `z > 0`.
    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    /// Cosine of the widest ray angle to the optical axis.
    pub fn min_axis_cosine(&self) -> f64 {
        let corners = [(0.0, 0.0), (self.width as f64 - 1.0, 0.0), (0.0, self.height as f64 - 1.0), (self.width as f64 - 1.0, self.height as f64 - 1.0)];
        corners.iter().map(|&(u, v)| self.ray(u, v).z).fold(1.0, f64::min)
    }

    /// Inward side planes through the outermost pixel centers, as
    /// `(normal, offset)` with the frustum interior at `n^T p <= offset`.
    pub fn side_planes(&self) -> [(Vector3<f64>, f64); 4] {
        let (w, h) = (self.width as f64 - 1.0, self.height as f64 - 1.0);
        let tl = self.ray(0.0, 0.0);
        let tr = self.ray(w, 0.0);
        let bl = self.ray(0.0, h);
        let br = self.ray(w, h);
        let plane = |a: Vector3<f64>, b: Vector3<f64>| {
            let n = a.cross(&b).normalize();
            (n, 0.0)
        };
        // Orientation chosen so the optical axis is inside.
        let mut planes = [plane(tl, bl), plane(br, tr), plane(tr, tl), plane(bl, br)];
        for p in planes.iter_mut() {
            if p.0.z > 0.0 {
                p.0 = -p.0;
            }
        }
        planes
    }

    /// Halfspaces bounding the visible region: side planes plus a far plane at
    /// `max_range * min_axis_cosine`, inside which every point is in range.
    pub fn frustum_halfspaces(&self) -> Vec<(Vector3<f64>, f64)> {
        let mut hs = self.side_planes().to_vec();
        hs.push((Vector3::z(), self.max_range * self.min_axis_cosine()));
        hs
    }

    /// Box enclosing everything the camera can see, in the camera frame.
    pub fn view_bounds(&self) -> Aabb<f64> {
        Aabb::cube(Vector3::zeros(), self.max_range)
    }

    /// Signed distance to the frustum boundary (side planes and range shell),
    /// positive inside.
    pub fn view_clearance(&self, p: &Vector3<f64>) -> f64 {
        let side = self.side_planes().iter().map(|(n, o)| o - n.dot(p)).fold(f64::INFINITY, f64::min);
        side.min(self.max_range - p.norm())
    }
}

/// One depth image: per-pixel range (infinite on miss) and body-frame hits.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthFrame {
    pub width: usize,
    pub height: usize,
    pub ranges: Vec<f64>,
    pub points: Vec<Vector3<f64>>,
    /// Row-major pixel index of each point.
    pub pixels: Vec<u32>,
}

impl DepthFrame {
    /// Obstacle points of the range image dilated by one pixel, on every
    /// `stride`-th row and column.
    ///
    /// Each pixel gets a point along its own ray at the minimum range of its
    /// 3x3 neighbourhood, so an occluding edge that falls between two rays is
    /// still bounded by a point on the farther ray.
    pub fn dilated_points(&self, cam: &CameraModel, stride: usize) -> Vec<Vector3<f64>> {
        let stride = stride.max(1);
        let ranges = self.min_filtered();
        let mut out = Vec::new();
        for v in (0..self.height).step_by(stride) {
            for u in (0..self.width).step_by(stride) {
                let r = ranges[v * self.width + u];
                if r.is_finite() && r >= cam.min_range {
                    out.push(cam.ray(u as f64, v as f64) * r);
                }
            }
        }
        out
    }

    /// Range image with each pixel replaced by the minimum over its 3x3
    /// neighbourhood.
    pub fn min_filtered(&self) -> Vec<f64> {
        let (w, h) = (self.width, self.height);
        let mut out = vec![f64::INFINITY; w * h];
        for v in 0..h {
            for u in 0..w {
                let mut m = f64::INFINITY;
                for dv in v.saturating_sub(1)..=(v + 1).min(h - 1) {
                    for du in u.saturating_sub(1)..=(u + 1).min(w - 1) {
                        m = m.min(self.ranges[dv * w + du]);
                    }
                }
                out[v * w + u] = m;
            }
        }
        out
    }
}

/// Renders a depth frame from the true pose.
///
/// Hits closer than `min_range` occlude but produce no point; rays hitting
/// nothing within `max_range` report an infinite range.
pub fn raycast_depth(env: &Environment, pose: &TruePose, cam: &CameraModel) -> DepthFrame {
    let t = pose.0;
    let r = t.rotation.matrix();
    let rows: Vec<(Vec<f64>, Vec<Vector3<f64>>, Vec<u32>)> = (0..cam.height)
        .into_par_iter()
        .map(|v| {
            let mut ranges = Vec::with_capacity(cam.width);
            let mut pts = Vec::new();
            let mut pix = Vec::new();
            for u in 0..cam.width {
                let d_body = cam.ray(u as f64, v as f64);
                let d = r * d_body;
                match env.raycast(&t.translation, &d) {
                    Some(hit) if hit <= cam.max_range => {
                        ranges.push(hit);
                        if hit >= cam.min_range {
                            pts.push(d_body * hit);
                            pix.push((v * cam.width + u) as u32);
                        }
                    }
                    _ => ranges.push(f64::INFINITY),
                }
            }
            (ranges, pts, pix)
        })
        .collect();
    let mut ranges = Vec::with_capacity(cam.width * cam.height);
    let mut points = Vec::new();
    let mut pixels = Vec::new();
    for (r, p, px) in rows {
        ranges.extend(r);
        points.extend(p);
        pixels.extend(px);
    }
    DepthFrame { width: cam.width, height: cam.height, ranges, points, pixels }
}
