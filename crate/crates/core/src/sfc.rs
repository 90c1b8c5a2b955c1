//! Safe flight corridors: convex polytopes that shrink under pose uncertainty.
//!
//! Polytopes live in the current body frame. Each odometry step moves them
//! into the next body frame, either exactly (baseline, heuristic) or deflated
//! by the uncertainty of the increment (certified).

use nalgebra::{Matrix6, Vector3, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::liegroup::{point_jacobian, Transform, UncertainTransform};
use crate::scalar::Real;

/// Minimum `|det|` for a face triple to define a vertex.
pub const DET_TOL: f64 = 1e-10;
/// Feasibility slack for vertex candidates.
pub const FEAS_TOL: f64 = 1e-7;
/// Seeds closer than this to an obstacle point are rejected.
pub const SEED_EPS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SfcError {
    #[error("polytope is unbounded")]
    Unbounded,
    #[error("polytope is empty")]
    Empty,
    #[error("face {0} has a zero normal")]
    ZeroNormal(usize),
    #[error("seed lies within {SEED_EPS} m of obstacle point {0}")]
    SeedInObstacle(usize),
    #[error("normals and offsets differ in length ({0} vs {1})")]
    Shape(usize, usize),
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb<T: Real> {
    pub min: Vector3<T>,
    pub max: Vector3<T>,
}

impl<T: Real> Aabb<T> {
    pub fn new(min: Vector3<T>, max: Vector3<T>) -> Self {
        Self { min, max }
    }

    pub fn cube(center: Vector3<T>, half: T) -> Self {
        let h = Vector3::repeat(half);
        Self::new(center - h, center + h)
    }

    pub fn from_points<'a>(pts: impl IntoIterator<Item = &'a Vector3<T>>) -> Option<Self> {
        let mut it = pts.into_iter();
        let first = *it.next()?;
        Some(it.fold(Self::new(first, first), |b, p| {
            Self::new(b.min.inf(p), b.max.sup(p))
        }))
    }

    pub fn union(&self, o: &Self) -> Self {
        Self::new(self.min.inf(&o.min), self.max.sup(&o.max))
    }

    #[inline]
    pub fn contains(&self, p: &Vector3<T>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn intersects(&self, o: &Self) -> bool {
        (0..3).all(|i| self.min[i] <= o.max[i] && o.min[i] <= self.max[i])
    }

    pub fn volume(&self) -> T {
        let e = (self.max - self.min).sup(&Vector3::zeros());
        e.x * e.y * e.z
    }

    /// The six outward faces as `(normal, offset)` pairs.
    pub fn halfspaces(&self) -> [(Vector3<T>, T); 6] {
        let (x, y, z) = (Vector3::x(), Vector3::y(), Vector3::z());
        [
            (x, self.max.x),
            (-x, -self.min.x),
            (y, self.max.y),
            (-y, -self.min.y),
            (z, self.max.z),
            (-z, -self.min.z),
        ]
    }
}

/// Convex polytope `{p : A p <= b}` with unit normals and cached vertices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(
    try_from = "PolytopeJson<T>",
    into = "PolytopeJson<T>",
    bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>")
)]
pub struct Polytope<T: Real> {
    normals: Vec<Vector3<T>>,
    offsets: Vec<T>,
    vertices: Vec<Vector3<T>>,
    face_vertices: Vec<Vec<u32>>,
    aabb: Aabb<T>,
    pub birth_frame: u64,
}

/// Wire format: `{"A": [[..]], "b": [..], "birth_frame": k}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolytopeJson<T> {
    #[serde(rename = "A")]
    pub a: Vec<[T; 3]>,
    pub b: Vec<T>,
    pub birth_frame: u64,
}

impl<T: Real> From<Polytope<T>> for PolytopeJson<T> {
    fn from(p: Polytope<T>) -> Self {
        Self {
            a: p.normals.iter().map(|n| [n.x, n.y, n.z]).collect(),
            b: p.offsets,
            birth_frame: p.birth_frame,
        }
    }
}

impl<T: Real> TryFrom<PolytopeJson<T>> for Polytope<T> {
    type Error = SfcError;
    fn try_from(j: PolytopeJson<T>) -> Result<Self, SfcError> {
        let normals = j.a.iter().map(|r| Vector3::new(r[0], r[1], r[2])).collect();
        Polytope::from_halfspaces(normals, j.b, j.birth_frame)
    }
}

fn activity_tol<T: Real>(b: T) -> T {
    T::lit(FEAS_TOL) * (T::one() + b.abs())
}

impl<T: Real> Polytope<T> {
    /// Builds a polytope from halfspaces `a_i^T p <= b_i`.
    ///
    /// Normals are rescaled to unit length. Faces that support no vertex are
    /// dropped. Fails if the set is unbounded or has fewer than four vertices.
    pub fn from_halfspaces(
        normals: Vec<Vector3<T>>,
        offsets: Vec<T>,
        birth_frame: u64,
    ) -> Result<Self, SfcError> {
        if normals.len() != offsets.len() {
            return Err(SfcError::Shape(normals.len(), offsets.len()));
        }
        let mut a = Vec::with_capacity(normals.len());
        let mut b = Vec::with_capacity(normals.len());
        for (i, (n, o)) in normals.iter().zip(&offsets).enumerate() {
            let len = n.norm();
            if !(len > T::zero()) {
                return Err(SfcError::ZeroNormal(i));
            }
            a.push(n / len);
            b.push(*o / len);
        }
        Self::from_unit_halfspaces(a, b, birth_frame)
    }

    fn from_unit_halfspaces(
        a: Vec<Vector3<T>>,
        b: Vec<T>,
        birth_frame: u64,
    ) -> Result<Self, SfcError> {
        check_bounded(&a)?;
        let vertices = enumerate_vertices(&a, &b);
        if vertices.len() < 4 {
            return Err(SfcError::Empty);
        }
        let mut normals = Vec::with_capacity(a.len());
        let mut offsets = Vec::with_capacity(a.len());
        let mut face_vertices = Vec::with_capacity(a.len());
        for (ai, &bi) in a.iter().zip(&b) {
            let tol = activity_tol(bi);
            let on: Vec<u32> = vertices
                .iter()
                .enumerate()
                .filter(|(_, v)| (ai.dot(v) - bi).abs() <= tol)
                .map(|(k, _)| k as u32)
                .collect();
            if !on.is_empty() {
                normals.push(*ai);
                offsets.push(bi);
                face_vertices.push(on);
            }
        }
        let aabb = Aabb::from_points(&vertices).expect("non-empty vertex set");
        Ok(Self { normals, offsets, vertices, face_vertices, aabb, birth_frame })
    }

    /// Axis-aligned box with the given birth frame.
    pub fn from_aabb(bounds: &Aabb<T>, birth_frame: u64) -> Result<Self, SfcError> {
        let (a, b): (Vec<_>, Vec<_>) = bounds.halfspaces().into_iter().unzip();
        Self::from_unit_halfspaces(a, b, birth_frame)
    }

    pub fn normals(&self) -> &[Vector3<T>] {
        &self.normals
    }

    pub fn offsets(&self) -> &[T] {
        &self.offsets
    }

    pub fn vertices(&self) -> &[Vector3<T>] {
        &self.vertices
    }

    pub fn num_faces(&self) -> usize {
        self.normals.len()
    }

    /// Vertices lying on face `i`.
    pub fn face_vertices(&self, i: usize) -> impl Iterator<Item = &Vector3<T>> + '_ {
        self.face_vertices[i].iter().map(move |&k| &self.vertices[k as usize])
    }

    pub fn aabb(&self) -> &Aabb<T> {
        &self.aabb
    }

    /// Signed clearance `min_i (b_i - a_i^T p)`; non-negative inside.
    #[inline]
    pub fn clearance(&self, p: &Vector3<T>) -> T {
        let mut m = T::max_value().unwrap_or_else(T::one);
        for (a, &b) in self.normals.iter().zip(&self.offsets) {
            let s = b - a.dot(p);
            if s < m {
                m = s;
            }
        }
        m
    }

    #[inline]
    pub fn contains(&self, p: &Vector3<T>) -> bool {
        self.aabb.contains(p) && self.clearance(p) >= T::zero()
    }

    pub fn centroid(&self) -> Vector3<T> {
        let n = T::lit(self.vertices.len() as f64);
        self.vertices.iter().fold(Vector3::zeros(), |s, v| s + v) / n
    }
}

/// Rejects normal sets whose recession cone `{d : A d <= 0}` is nontrivial.
fn check_bounded<T: Real>(a: &[Vector3<T>]) -> Result<(), SfcError> {
    let tol = T::lit(1e-9);
    let n = a.len();
    let mut has_rank3 = false;
    'outer: for i in 0..n {
        for j in i + 1..n {
            let c = a[i].cross(&a[j]);
            for k in j + 1..n {
                if c.dot(&a[k]).abs() > T::lit(DET_TOL) {
                    has_rank3 = true;
                    break 'outer;
                }
            }
        }
    }
    if !has_rank3 {
        return Err(SfcError::Unbounded);
    }
    // Extreme rays of a pointed cone lie on intersections of two face planes.
    for i in 0..n {
        for j in i + 1..n {
            let c = a[i].cross(&a[j]);
            let len = c.norm();
            if len <= T::lit(DET_TOL) {
                continue;
            }
            let d = c / len;
            for s in [d, -d] {
                if a.iter().all(|ak| ak.dot(&s) <= tol) {
                    return Err(SfcError::Unbounded);
                }
            }
        }
    }
    Ok(())
}

/// All feasible intersections of three face planes, deduplicated.
fn enumerate_vertices<T: Real>(a: &[Vector3<T>], b: &[T]) -> Vec<Vector3<T>> {
    let n = a.len();
    let det_tol = T::lit(DET_TOL);
    let mut out: Vec<Vector3<T>> = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let cij = a[i].cross(&a[j]);
            for k in j + 1..n {
                let det = cij.dot(&a[k]);
                if det.abs() <= det_tol {
                    continue;
                }
                let x = (a[j].cross(&a[k]) * b[i] + a[k].cross(&a[i]) * b[j] + cij * b[k]) / det;
                let feasible = a
                    .iter()
                    .zip(b)
                    .all(|(am, &bm)| am.dot(&x) <= bm + T::lit(FEAS_TOL));
                if !feasible {
                    continue;
                }
                let merge = T::lit(1e-9) * (T::one() + x.norm());
                if !out.iter().any(|v| (v - x).norm() <= merge) {
                    out.push(x);
                }
            }
        }
    }
    out
}

/// Nearest-point tangent-halfspace sweep around `seed`, clipped to `bounds`.
pub fn generate_polytope<T: Real>(
    seed: &Vector3<T>,
    obstacles: &[Vector3<T>],
    bounds: &Aabb<T>,
    birth_frame: u64,
) -> Result<Polytope<T>, SfcError> {
    generate_polytope_clipped(seed, obstacles, bounds, &[], birth_frame)
}

/// As [`generate_polytope`], with extra clipping halfspaces (e.g. a view frustum).
///
/// Obstacle points outside the clip region do not spawn faces.
pub fn generate_polytope_clipped<T: Real>(
    seed: &Vector3<T>,
    obstacles: &[Vector3<T>],
    bounds: &Aabb<T>,
    clip: &[(Vector3<T>, T)],
    birth_frame: u64,
) -> Result<Polytope<T>, SfcError> {
    let eps2 = T::lit(SEED_EPS * SEED_EPS);
    let mut fixed: Vec<(Vector3<T>, T)> = bounds.halfspaces().to_vec();
    for (n, o) in clip {
        let len = n.norm();
        if !(len > T::zero()) {
            return Err(SfcError::ZeroNormal(6 + fixed.len()));
        }
        fixed.push((n / len, *o / len));
    }
    let mut order: Vec<(T, usize)> = Vec::with_capacity(obstacles.len());
    for (i, q) in obstacles.iter().enumerate() {
        let d2 = (q - seed).norm_squared();
        if d2 <= eps2 {
            return Err(SfcError::SeedInObstacle(i));
        }
        if fixed.iter().all(|(n, o)| n.dot(q) < *o) {
            order.push((d2, i));
        }
    }
    order.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap().then(x.1.cmp(&y.1)));

    let mut a: Vec<Vector3<T>> = Vec::new();
    let mut b: Vec<T> = Vec::new();
    for &(d2, i) in &order {
        let q = &obstacles[i];
        if a.iter().zip(&b).all(|(n, o)| n.dot(q) < *o) {
            let n = (q - seed) / d2.sqrt();
            b.push(n.dot(q));
            a.push(n);
        }
    }
    for (n, o) in fixed {
        a.push(n);
        b.push(o);
    }
    Polytope::from_unit_halfspaces(a, b, birth_frame)
}

/// Exact rigid image of `p` under `t` (vertices are moved, not re-enumerated).
pub fn transform_polytope_exact<T: Real>(p: &Polytope<T>, t: &Transform<T>) -> Polytope<T> {
    let r = t.rotation.matrix();
    let normals: Vec<_> = p.normals.iter().map(|a| r * a).collect();
    let offsets = normals
        .iter()
        .zip(&p.offsets)
        .map(|(an, &b)| b + an.dot(&t.translation))
        .collect();
    let vertices: Vec<_> = p.vertices.iter().map(|v| t.act(v)).collect();
    let aabb = Aabb::from_points(&vertices).expect("non-empty vertex set");
    Polytope {
        normals,
        offsets,
        vertices,
        face_vertices: p.face_vertices.clone(),
        aabb,
        birth_frame: p.birth_frame,
    }
}

/// Per-face offset reductions `rho_i = max_j sqrt(kappa a_new^T J_j Sigma J_j^T a_new)`.
pub fn deflation_margins<T: Real>(p: &Polytope<T>, ut: &UncertainTransform<T>, kappa: T) -> Vec<T> {
    let sigma: &Matrix6<T> = &ut.covariance;
    (0..p.num_faces())
        .map(|i| {
            let a = &p.normals[i];
            p.face_vertices(i)
                .map(|v| {
                    // J^T (R a) = [a; v x a]
                    let c = v.cross(a);
                    let w = Vector6::new(a.x, a.y, a.z, c.x, c.y, c.z);
                    (kappa * w.dot(&(sigma * w))).max(T::zero()).sqrt()
                })
                .fold(T::zero(), |m, x| if x > m { x } else { m })
        })
        .collect()
}

/// Moves `p` into the next body frame and shrinks each face by its margin.
///
/// `ut` maps frame `k` to frame `k+1`. Returns `None` when nothing survives.
pub fn deflate_polytope<T: Real>(
    p: &Polytope<T>,
    ut: &UncertainTransform<T>,
    kappa: T,
) -> Option<Polytope<T>> {
    let rho = deflation_margins(p, ut, kappa);
    let moved = transform_polytope_exact(p, &ut.mean);
    if rho.iter().all(|&r| r == T::zero()) {
        return Some(moved);
    }
    let offsets = moved.offsets.iter().zip(&rho).map(|(&b, &r)| b - r).collect();
    Polytope::from_unit_halfspaces(moved.normals, offsets, p.birth_frame).ok()
}

/// Offset `r` with `{x : a^T x >= r}` containing the ellipsoid `(p_hat, sigma_p)`.
pub fn separating_offset<T: Real>(
    p_hat: &Vector3<T>,
    sigma_p: &nalgebra::Matrix3<T>,
    a: &Vector3<T>,
) -> Result<T, SfcError> {
    if a.norm_squared() == T::zero() {
        return Err(SfcError::ZeroNormal(0));
    }
    Ok(a.dot(p_hat) - a.dot(&(sigma_p * a)).max(T::zero()).sqrt())
}

/// Margin of face `i` recomputed through [`separating_offset`] at every vertex.
pub fn margin_via_separating_offset<T: Real>(
    p: &Polytope<T>,
    ut: &UncertainTransform<T>,
    kappa: T,
    i: usize,
) -> T {
    let a_new = ut.mean.rotation.matrix() * p.normals[i];
    p.face_vertices(i)
        .map(|v| {
            let j = point_jacobian(&ut.mean, v);
            let sp = j * ut.covariance * j.transpose() * kappa;
            let ph = ut.mean.act(v);
            a_new.dot(&ph) - separating_offset(&ph, &sp, &a_new).expect("unit normal")
        })
        .fold(T::zero(), |m, x| if x > m { x } else { m })
}

/// How a corridor map carries polytopes across odometry steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SfcPolicy<T: Real> {
    Baseline,
    Heuristic { window: u64 },
    Certified { kappa: T },
}

/// Input for the polytope generated at a step.
#[derive(Debug, Clone)]
pub struct GenerationInput<'a, T: Real> {
    pub seed: Vector3<T>,
    pub obstacles: &'a [Vector3<T>],
    pub bounds: Aabb<T>,
    pub clip: &'a [(Vector3<T>, T)],
}

/// Union of polytopes expressed in the current body frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct CorridorMap<T: Real> {
    pub polytopes: Vec<Polytope<T>>,
    pub frame: u64,
    pub policy: SfcPolicy<T>,
}

impl<T: Real> CorridorMap<T> {
    pub fn new(policy: SfcPolicy<T>) -> Self {
        Self { polytopes: Vec::new(), frame: 0, policy }
    }

    /// Carries the map from frame `k` into frame `frame` and adds a new polytope.
    ///
    /// `ut` maps the previous body frame to the new one. Generation failures
    /// leave the carried map in place and are returned.
    pub fn step(
        &mut self,
        ut: &UncertainTransform<T>,
        input: Option<GenerationInput<'_, T>>,
        frame: u64,
    ) -> Result<(), SfcError> {
        let old = std::mem::take(&mut self.polytopes);
        self.polytopes = match self.policy {
            SfcPolicy::Baseline => old.par_iter().map(|p| transform_polytope_exact(p, &ut.mean)).collect(),
            SfcPolicy::Heuristic { window } => old
                .par_iter()
                .filter(|p| frame.saturating_sub(p.birth_frame) < window)
                .map(|p| transform_polytope_exact(p, &ut.mean))
                .collect(),
            SfcPolicy::Certified { kappa } => old
                .par_iter()
                .filter_map(|p| deflate_polytope(p, ut, kappa))
                .collect(),
        };
        self.frame = frame;
        if let Some(g) = input {
            let p = generate_polytope_clipped(&g.seed, g.obstacles, &g.bounds, g.clip, frame)?;
            self.polytopes.push(p);
        }
        Ok(())
    }

    pub fn contains(&self, p: &Vector3<T>) -> bool {
        self.polytopes.iter().any(|q| q.contains(p))
    }

    /// Largest clearance over containing polytopes, zero if none contains `p`.
    pub fn penetration_depth(&self, p: &Vector3<T>) -> T {
        self.polytopes
            .iter()
            .filter(|q| q.aabb.contains(p))
            .map(|q| q.clearance(p))
            .filter(|&c| c >= T::zero())
            .fold(T::zero(), |m, c| if c > m { c } else { m })
    }

    pub fn bounding_box(&self) -> Option<Aabb<T>> {
        let mut it = self.polytopes.iter().map(|p| p.aabb);
        let first = it.next()?;
        Some(it.fold(first, |a, b| a.union(&b)))
    }
}

/// Uniform-grid bucket index over polytope bounding boxes.
#[derive(Debug, Clone)]
pub struct CorridorIndex {
    origin: Vector3<f64>,
    cell: f64,
    dims: [usize; 3],
    buckets: Vec<Vec<u32>>,
}

impl CorridorIndex {
    pub fn build<T: Real>(map: &CorridorMap<T>, cell: f64) -> Self {
        let Some(bb) = map.bounding_box() else {
            return Self { origin: Vector3::zeros(), cell, dims: [0; 3], buckets: Vec::new() };
        };
        let lo = bb.min.map(|x| x.as_f64());
        let hi = bb.max.map(|x| x.as_f64());
        let dims = [0, 1, 2].map(|i| (((hi[i] - lo[i]) / cell).floor() as usize + 1).min(4096));
        let mut buckets = vec![Vec::new(); dims[0] * dims[1] * dims[2]];
        let idx = Self { origin: lo, cell, dims, buckets: Vec::new() };
        for (k, p) in map.polytopes.iter().enumerate() {
            let a = idx.clamp_cell(&p.aabb.min.map(|x| x.as_f64()));
            let b = idx.clamp_cell(&p.aabb.max.map(|x| x.as_f64()));
            for z in a[2]..=b[2] {
                for y in a[1]..=b[1] {
                    for x in a[0]..=b[0] {
                        buckets[(z * dims[1] + y) * dims[0] + x].push(k as u32);
                    }
                }
            }
        }
        Self { buckets, ..idx }
    }

    fn clamp_cell(&self, p: &Vector3<f64>) -> [usize; 3] {
        [0, 1, 2].map(|i| {
            let c = ((p[i] - self.origin[i]) / self.cell).floor();
            c.clamp(0.0, (self.dims[i] - 1) as f64) as usize
        })
    }

    /// Indices of polytopes whose box may contain `p`.
    pub fn candidates(&self, p: &Vector3<f64>) -> &[u32] {
        if self.buckets.is_empty() {
            return &[];
        }
        for i in 0..3 {
            let c = ((p[i] - self.origin[i]) / self.cell).floor();
            if c < 0.0 || c >= self.dims[i] as f64 {
                return &[];
            }
        }
        let c = self.clamp_cell(p);
        &self.buckets[(c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]]
    }

    /// Penetration depth through the index; `None` when outside every polytope.
    pub fn depth<T: Real>(&self, map: &CorridorMap<T>, p: &Vector3<T>) -> Option<T> {
        let pf = p.map(|x| x.as_f64());
        let mut best: Option<T> = None;
        for &k in self.candidates(&pf) {
            let q = &map.polytopes[k as usize];
            if !q.aabb.contains(p) {
                continue;
            }
            let c = q.clearance(p);
            if c >= T::zero() && best.is_none_or(|b| c > b) {
                best = Some(c);
            }
        }
        best
    }
}

/// Integer hash of `x` for per-cell jitter; a fixed 64-bit mix.
fn mix64(mut x: u64) -> u64 {
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Jittered-lattice Monte-Carlo volume of the union.
///
/// One sample is drawn per lattice cell of side `cell` overlapping the union's
/// bounding box; each sample's offset depends only on `seed` and the cell
/// index, so runs that share a seed share their sample points.
pub fn union_volume<T: Real>(map: &CorridorMap<T>, cell: f64, seed: u64) -> f64 {
    let Some(bb) = map.bounding_box() else { return 0.0 };
    let index = CorridorIndex::build(map, 0.25_f64.max(cell));
    let lo = bb.min.map(|x| (x.as_f64() / cell).floor() as i64);
    let hi = bb.max.map(|x| (x.as_f64() / cell).floor() as i64);
    let hits: u64 = (lo[2]..=hi[2])
        .into_par_iter()
        .map(|z| {
            let mut n = 0u64;
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    let key = mix64(seed ^ mix64((x as u64) ^ mix64((y as u64) ^ mix64(z as u64))));
                    let u = |s: u32| ((mix64(key.wrapping_add(s as u64)) >> 11) as f64) / (1u64 << 53) as f64;
                    let p = Vector3::new((x as f64 + u(1)) * cell, (y as f64 + u(2)) * cell, (z as f64 + u(3)) * cell);
                    let pt = p.map(T::lit);
                    if index.depth(map, &pt).is_some() {
                        n += 1;
                    }
                }
            }
            n
        })
        .sum();
    hits as f64 * cell * cell * cell
}
