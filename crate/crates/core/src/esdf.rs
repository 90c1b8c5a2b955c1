//! Certified ESDFs: sparse signed-distance voxel grids in the mapping frame.
//!
//! Stored distances are only ever lowered by deflation, so a query through
//! the estimated pose underestimates the true obstacle distance with the
//! probability implied by `kappa`.

use std::io::{self, Read, Write};

use hashbrown::HashMap;
use rstar::RTree;
use nalgebra::{Matrix3, Matrix6, Vector3};
use rayon::prelude::*;
use rustc_hash::FxBuildHasher;
use serde::{Deserialize, Serialize};

use crate::liegroup::{hat3, Transform, UncertainTransform};
use crate::scalar::Real;
use crate::sim::{CameraModel, DepthFrame};

pub type VoxelIndex = [i32; 3];

/// Sparse grid of observed voxels. A voxel absent from `cells` is Unknown.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid<T: Real> {
    voxel_size: T,
    origin: Vector3<T>,
    cells: HashMap<VoxelIndex, T, FxBuildHasher>,
}

/// State of one voxel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoxelState<T> {
    pub distance: T,
    pub observed: bool,
}

impl<T: Real> VoxelGrid<T> {
    pub fn new(voxel_size: T, origin: Vector3<T>) -> Self {
        assert!(voxel_size > T::zero(), "voxel size must be positive");
        Self { voxel_size, origin, cells: HashMap::default() }
    }

    pub fn voxel_size(&self) -> T {
        self.voxel_size
    }

    pub fn origin(&self) -> &Vector3<T> {
        &self.origin
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    #[inline]
    pub fn center(&self, idx: &VoxelIndex) -> Vector3<T> {
        let h = T::lit(0.5);
        self.origin
            + Vector3::new(
                T::lit(idx[0] as f64) + h,
                T::lit(idx[1] as f64) + h,
                T::lit(idx[2] as f64) + h,
            ) * self.voxel_size
    }

    #[inline]
    pub fn index_of(&self, p: &Vector3<T>) -> VoxelIndex {
        let q = (p - self.origin) / self.voxel_size;
        [0, 1, 2].map(|i| q[i].floor().as_f64() as i32)
    }

    pub fn get(&self, idx: &VoxelIndex) -> Option<T> {
        self.cells.get(idx).copied()
    }

    pub fn state(&self, idx: &VoxelIndex) -> VoxelState<T> {
        match self.cells.get(idx) {
            Some(&d) => VoxelState { distance: d, observed: true },
            None => VoxelState { distance: T::zero(), observed: false },
        }
    }

    /// Sets a voxel's distance, marking it observed.
    pub fn set(&mut self, idx: VoxelIndex, d: T) {
        self.cells.insert(idx, d);
    }

    pub fn remove(&mut self, idx: &VoxelIndex) -> Option<T> {
        self.cells.remove(idx)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&VoxelIndex, &T)> {
        self.cells.iter()
    }

    /// Entries sorted by index.
    pub fn sorted(&self) -> Vec<(VoxelIndex, T)> {
        let mut v: Vec<_> = self.cells.iter().map(|(k, d)| (*k, *d)).collect();
        v.sort_unstable_by_key(|e| e.0);
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EsdfPolicy<T: Real> {
    Baseline,
    Heuristic { radius: T },
    Certified { kappa: T },
}

/// Result of a body-frame query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Query<T> {
    Free(T),
    Unknown,
}

impl<T: Real> Query<T> {
    pub fn is_free(&self) -> bool {
        matches!(self, Query::Free(_))
    }
}

/// Integration parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegrationParams {
    /// Distances are clamped to `[-truncation, truncation]`.
    pub truncation: f64,
    /// Also clamp each distance to the voxel's clearance from the view
    /// frustum, so obstacles outside the view cannot be overlooked.
    pub clamp_to_view: bool,
}

impl Default for IntegrationParams {
    fn default() -> Self {
        Self { truncation: 0.5, clamp_to_view: false }
    }
}

/// Which voxels a frame observed.
#[derive(Debug, Clone, Copy)]
pub enum Visibility<'a> {
    /// A depth camera: a voxel is observed when all eight of its corners lie
    /// inside the frustum, in range, and in front of the 3x3-min range image.
    Camera { camera: &'a CameraModel, frame: &'a DepthFrame },
    /// Every voxel within an axis-aligned box of the mapping frame.
    Region { min: [f64; 3], max: [f64; 3] },
}

/// Distances observed by one frame, in the mapping frame, ordered by z, then y, then x.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation<T> {
    pub entries: Vec<(VoxelIndex, T)>,
}

/// Computes the per-voxel distances seen by one frame.
///
/// `points_body` are obstacle points in the body frame and `pose_est` maps
/// body to mapping frame. Each observed voxel receives the distance from its
/// center to the nearest transformed point, clamped to the truncation band.
pub fn observe<T: Real>(
    voxel_size: T,
    origin: &Vector3<T>,
    points_body: &[Vector3<T>],
    vis: Visibility<'_>,
    pose_est: &Transform<T>,
    params: &IntegrationParams,
) -> Observation<T> {
    let vs = voxel_size.as_f64();
    let org = origin.map(|x| x.as_f64());
    let pose = pose_est.cast::<f64>();
    let pts: Vec<[f64; 3]> = points_body
        .iter()
        .map(|p| {
            let q = pose.act(&p.map(|x| x.as_f64()));
            [q.x, q.y, q.z]
        })
        .collect();
    let tree = (!pts.is_empty()).then(|| RTree::bulk_load(pts));
    let trunc = params.truncation;

    let (lo, hi, observed): (VoxelIndex, VoxelIndex, Vec<bool>) = match vis {
        Visibility::Camera { camera, frame } => camera_visibility(vs, &org, camera, frame, &pose),
        Visibility::Region { min, max } => {
            let lo = [0, 1, 2].map(|i| ((min[i] - org[i]) / vs).floor() as i32);
            let hi = [0, 1, 2].map(|i| ((max[i] - org[i]) / vs).ceil() as i32 - 1);
            let n = (0..3).map(|i| (hi[i] - lo[i] + 1).max(0) as usize).product();
            (lo, hi, vec![true; n])
        }
    };
    let dims = [0, 1, 2].map(|i| (hi[i] - lo[i] + 1).max(0) as usize);
    let inv = pose.inverse();
    let cam = match vis {
        Visibility::Camera { camera, .. } if params.clamp_to_view => Some(camera),
        _ => None,
    };
    let entries: Vec<(VoxelIndex, T)> = (0..dims[2])
        .into_par_iter()
        .flat_map_iter(|z| {
            let mut out = Vec::new();
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    if !observed[(z * dims[1] + y) * dims[0] + x] {
                        continue;
                    }
                    let idx = [lo[0] + x as i32, lo[1] + y as i32, lo[2] + z as i32];
                    let c = org + Vector3::new(idx[0] as f64 + 0.5, idx[1] as f64 + 0.5, idx[2] as f64 + 0.5) * vs;
                    let mut d = match &tree {
                        Some(t) => t.nearest_neighbor(&[c.x, c.y, c.z]).map_or(f64::INFINITY, |q| {
                            ((q[0] - c.x).powi(2) + (q[1] - c.y).powi(2) + (q[2] - c.z).powi(2)).sqrt()
                        }),
                        None => f64::INFINITY,
                    };
                    if let Some(cam) = cam {
                        d = d.min(cam.view_clearance(&inv.act(&c)).max(0.0));
                    }
                    out.push((idx, T::lit(d.clamp(-trunc, trunc))));
                }
            }
            out
        })
        .collect();
    Observation { entries }
}

/// Dense visibility mask over the voxel box enclosing the frustum.
fn camera_visibility(
    vs: f64,
    org: &Vector3<f64>,
    cam: &CameraModel,
    frame: &DepthFrame,
    pose: &Transform<f64>,
) -> (VoxelIndex, VoxelIndex, Vec<bool>) {
    let (w, h) = (cam.width as f64 - 1.0, cam.height as f64 - 1.0);
    let far = cam.max_range;
    let mut corners = vec![pose.translation];
    for (u, v) in [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h)] {
        let r = cam.ray(u, v);
        corners.push(pose.act(&(r * (far / r.z))));
    }
    let lo_p = corners.iter().fold(Vector3::repeat(f64::INFINITY), |a, p| a.inf(p));
    let hi_p = corners.iter().fold(Vector3::repeat(f64::NEG_INFINITY), |a, p| a.sup(p));
    let lo = [0, 1, 2].map(|i| ((lo_p[i] - org[i]) / vs).floor() as i32 - 1);
    let hi = [0, 1, 2].map(|i| ((hi_p[i] - org[i]) / vs).floor() as i32 + 1);
    let vd = [0, 1, 2].map(|i| (hi[i] - lo[i] + 1) as usize);
    let cd = vd.map(|n| n + 1);

    let ranges = frame.min_filtered();
    let inv = pose.inverse();
    let (wi, hi_px) = (cam.width as i64, cam.height as i64);
    // Visibility of voxel corners (grid vertices).
    let corner_ok: Vec<bool> = (0..cd[2])
        .into_par_iter()
        .flat_map_iter(|z| {
            let mut out = Vec::with_capacity(cd[0] * cd[1]);
            for y in 0..cd[1] {
                for x in 0..cd[0] {
                    let p = org
                        + Vector3::new((lo[0] + x as i32) as f64, (lo[1] + y as i32) as f64, (lo[2] + z as i32) as f64) * vs;
                    let q = inv.act(&p);
                    let r = q.norm();
                    let ok = q.z > 0.0 && r >= cam.min_range && r <= cam.max_range && {
                        let (u, v) = cam.project(&q);
                        u >= 0.0 && v >= 0.0 && u <= w && v <= h && {
                            let (ui, vi) = ((u.round() as i64).min(wi - 1), (v.round() as i64).min(hi_px - 1));
                            r < ranges[(vi * wi + ui) as usize]
                        }
                    };
                    out.push(ok);
                }
            }
            out
        })
        .collect();
    let cidx = |x: usize, y: usize, z: usize| (z * cd[1] + y) * cd[0] + x;
    let mut mask = vec![false; vd[0] * vd[1] * vd[2]];
    mask.par_chunks_mut(vd[0] * vd[1]).enumerate().for_each(|(z, slab)| {
        for y in 0..vd[1] {
            for x in 0..vd[0] {
                let mut all = true;
                'c: for dz in 0..2 {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            if !corner_ok[cidx(x + dx, y + dy, z + dz)] {
                                all = false;
                                break 'c;
                            }
                        }
                    }
                }
                slab[y * vd[0] + x] = all;
            }
        }
    });
    (lo, hi, mask)
}

/// Largest eigenvalue of a symmetric 3x3 matrix (trigonometric closed form).
pub fn sym3_lambda_max<T: Real>(m: &Matrix3<T>) -> T {
    let p1 = m[(0, 1)] * m[(0, 1)] + m[(0, 2)] * m[(0, 2)] + m[(1, 2)] * m[(1, 2)];
    let q = m.trace() / T::lit(3.0);
    let (a, b, c) = (m[(0, 0)] - q, m[(1, 1)] - q, m[(2, 2)] - q);
    let p2 = a * a + b * b + c * c + T::lit(2.0) * p1;
    if p1 == T::zero() || p2 == T::zero() {
        return m[(0, 0)].max(m[(1, 1)]).max(m[(2, 2)]);
    }
    let p = (p2 / T::lit(6.0)).sqrt();
    let bm = (m - Matrix3::identity() * q) / p;
    let r = (bm.determinant() * T::lit(0.5)).clamp(-T::one(), T::one());
    let phi = r.acos() / T::lit(3.0);
    q + T::lit(2.0) * p * phi.cos()
}

/// `sqrt(lambda_max(kappa J Sigma J^T))` for `J = [R, -R p^]`.
///
/// The rotation `R` does not change the spectrum, so only `p` and `Sigma` enter.
#[inline]
pub fn deflation_amount<T: Real>(sigma: &Matrix6<T>, p_body: &Vector3<T>, kappa: T) -> T {
    let a = sigma.fixed_view::<3, 3>(0, 0);
    let b = sigma.fixed_view::<3, 3>(0, 3);
    let c = sigma.fixed_view::<3, 3>(3, 3);
    let ph = hat3(p_body);
    // [I, -P] Sigma [I, -P]^T with P^T = -P.
    let m = a + b * ph - ph * b.transpose() - ph * c * ph;
    let m = (m + m.transpose()) * T::lit(0.5);
    (sym3_lambda_max(&m) * kappa).max(T::zero()).sqrt()
}

/// An ESDF carried across odometry steps under a policy.
#[derive(Debug, Clone, PartialEq)]
pub struct CertifiedEsdfMap<T: Real> {
    pub grid: VoxelGrid<T>,
    pub policy: EsdfPolicy<T>,
    /// Current body to mapping frame estimate.
    pub est_pose: Transform<T>,
}

impl<T: Real> CertifiedEsdfMap<T> {
    pub fn new(voxel_size: T, origin: Vector3<T>, policy: EsdfPolicy<T>) -> Self {
        Self { grid: VoxelGrid::new(voxel_size, origin), policy, est_pose: Transform::identity() }
    }

    /// Merges an observation: `d <- min(d_old, d_new)`.
    pub fn apply_observation(&mut self, obs: &Observation<T>) {
        for (idx, d) in &obs.entries {
            self.grid
                .cells
                .entry(*idx)
                .and_modify(|old| {
                    if *d < *old {
                        *old = *d;
                    }
                })
                .or_insert(*d);
        }
    }

    /// Integrates body-frame obstacle points seen from `camera_pose_est`.
    pub fn integrate_observation(
        &mut self,
        points_body: &[Vector3<T>],
        vis: Visibility<'_>,
        camera_pose_est: &Transform<T>,
        params: &IntegrationParams,
    ) {
        let obs = observe(self.grid.voxel_size, &self.grid.origin, points_body, vis, camera_pose_est, params);
        self.apply_observation(&obs);
    }

    /// Subtracts each voxel's deflation amount and drops voxels below zero.
    ///
    /// `ut` is the increment from the new body frame to the previous one, and
    /// `est_pose` must already hold the new body frame estimate.
    pub fn deflate_esdf(&mut self, ut: &UncertainTransform<T>, kappa: T) {
        if ut.covariance.iter().all(|x| *x == T::zero()) {
            return;
        }
        let inv = self.est_pose.inverse();
        let (vs, org) = (self.grid.voxel_size, self.grid.origin);
        let sigma = ut.covariance;
        self.grid.cells.par_iter_mut().for_each(|(idx, d)| {
            let h = T::lit(0.5);
            let c = org
                + Vector3::new(T::lit(idx[0] as f64) + h, T::lit(idx[1] as f64) + h, T::lit(idx[2] as f64) + h) * vs;
            *d -= deflation_amount(&sigma, &inv.act(&c), kappa);
        });
        self.grid.cells.retain(|_, d| *d >= T::zero());
    }

    /// Drops voxels whose center is farther than `radius` from the camera.
    pub fn forget_beyond(&mut self, radius: T) {
        let cam = self.est_pose.translation;
        let (vs, org) = (self.grid.voxel_size, self.grid.origin);
        let r2 = radius * radius;
        self.grid.cells.retain(|idx, _| {
            let h = T::lit(0.5);
            let c = org
                + Vector3::new(T::lit(idx[0] as f64) + h, T::lit(idx[1] as f64) + h, T::lit(idx[2] as f64) + h) * vs;
            (c - cam).norm_squared() <= r2
        });
    }

    /// One odometry step: set the pose, deflate (certified), integrate,
    /// forget (heuristic).
    pub fn step(&mut self, ut: &UncertainTransform<T>, obs: Option<&Observation<T>>, camera_pose_est: &Transform<T>) {
        self.est_pose = *camera_pose_est;
        if let EsdfPolicy::Certified { kappa } = self.policy {
            self.deflate_esdf(ut, kappa);
        }
        if let Some(o) = obs {
            self.apply_observation(o);
        }
        if let EsdfPolicy::Heuristic { radius } = self.policy {
            self.forget_beyond(radius);
        }
    }

    /// Certified distance at a body-frame point.
    #[inline]
    pub fn query_certified(&self, p_body: &Vector3<T>) -> Query<T> {
        let idx = self.grid.index_of(&self.est_pose.act(p_body));
        match self.grid.get(&idx) {
            Some(d) if d >= T::zero() => Query::Free(d),
            _ => Query::Unknown,
        }
    }

    /// Volume of observed voxels with non-negative distance.
    pub fn free_volume(&self) -> T {
        let n = self.grid.cells.values().filter(|d| **d >= T::zero()).count();
        T::lit(n as f64) * self.grid.voxel_size.powi(3)
    }

    /// Horizontal slice through the stored voxels at `height` (mapping frame).
    pub fn claimed_free_region_slice(&self, height: T) -> Slice {
        let k = self.grid.index_of(&Vector3::new(T::zero(), T::zero(), height))[2];
        let layer: Vec<_> = self.grid.cells.iter().filter(|(i, _)| i[2] == k).collect();
        let (mut lo, mut hi) = ([i32::MAX; 2], [i32::MIN; 2]);
        for (i, _) in &layer {
            for a in 0..2 {
                lo[a] = lo[a].min(i[a]);
                hi[a] = hi[a].max(i[a]);
            }
        }
        if layer.is_empty() {
            return Slice { origin: [0, 0], width: 0, height: 0, cells: Vec::new() };
        }
        let (w, h) = ((hi[0] - lo[0] + 1) as usize, (hi[1] - lo[1] + 1) as usize);
        let mut cells = vec![SliceClass::Unknown; w * h];
        for (i, d) in layer {
            let at = (i[1] - lo[1]) as usize * w + (i[0] - lo[0]) as usize;
            cells[at] = if *d > T::zero() { SliceClass::Free } else { SliceClass::Obstacle };
        }
        Slice { origin: lo, width: w, height: h, cells }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SliceClass {
    Free,
    Unknown,
    Obstacle,
}

/// Row-major 2D raster; `origin` is the voxel index of the first cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice {
    pub origin: [i32; 2],
    pub width: usize,
    pub height: usize,
    pub cells: Vec<SliceClass>,
}

impl Slice {
    /// CSV raster with `1` free, `0` unknown, `-1` obstacle.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.cells.chunks(self.width.max(1)) {
            let line: Vec<&str> = row
                .iter()
                .map(|c| match c {
                    SliceClass::Free => "1",
                    SliceClass::Unknown => "0",
                    SliceClass::Obstacle => "-1",
                })
                .collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }
}

/// Writes the little-endian binary snapshot of a grid, records sorted by index.
pub fn write_snapshot<T: Real, W: Write>(grid: &VoxelGrid<T>, mut w: W) -> io::Result<()> {
    w.write_all(&grid.voxel_size.as_f64().to_le_bytes())?;
    for i in 0..3 {
        w.write_all(&grid.origin[i].as_f64().to_le_bytes())?;
    }
    let entries = grid.sorted();
    w.write_all(&(entries.len() as u64).to_le_bytes())?;
    for (idx, d) in entries {
        for c in idx {
            w.write_all(&c.to_le_bytes())?;
        }
        w.write_all(&d.as_f64().to_le_bytes())?;
    }
    Ok(())
}

/// Reads a snapshot written by [`write_snapshot`].
pub fn read_snapshot<T: Real, R: Read>(mut r: R) -> io::Result<VoxelGrid<T>> {
    let mut b8 = [0u8; 8];
    let mut f = |r: &mut R| -> io::Result<f64> {
        r.read_exact(&mut b8)?;
        Ok(f64::from_le_bytes(b8))
    };
    let vs = f(&mut r)?;
    let org = Vector3::new(f(&mut r)?, f(&mut r)?, f(&mut r)?);
    if !(vs > 0.0) {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "voxel size must be positive"));
    }
    let mut n8 = [0u8; 8];
    r.read_exact(&mut n8)?;
    let n = u64::from_le_bytes(n8);
    let mut grid = VoxelGrid::new(T::lit(vs), org.map(T::lit));
    let mut b4 = [0u8; 4];
    for _ in 0..n {
        let mut idx = [0i32; 3];
        for c in idx.iter_mut() {
            r.read_exact(&mut b4)?;
            *c = i32::from_le_bytes(b4);
        }
        let d = f(&mut r)?;
        grid.set(idx, T::lit(d));
    }
    Ok(grid)
}
