//! Static obstacle geometry with exact raycasting and signed distance.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::sfc::Aabb;

/// A solid obstacle primitive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Obstacle {
    /// Axis-aligned solid box.
    Box { min: [f64; 3], max: [f64; 3] },
    /// Solid half-space `{x : n^T x <= offset}`; `n` is normalized on load.
    Plane { normal: [f64; 3], offset: f64 },
}

impl Obstacle {
    fn normalized(self) -> Self {
        match self {
            Obstacle::Plane { normal, offset } => {
                let n = Vector3::from(normal);
                let len = n.norm();
                Obstacle::Plane { normal: (n / len).into(), offset: offset / len }
            }
            b => b,
        }
    }

    /// Signed distance, negative inside.
    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        match *self {
            Obstacle::Box { min, max } => {
                let (lo, hi) = (Vector3::from(min), Vector3::from(max));
                let c = (lo + hi) * 0.5;
                let h = (hi - lo) * 0.5;
                let q = (p - c).abs() - h;
                let outside = q.sup(&Vector3::zeros()).norm();
                outside + q.max().min(0.0)
            }
            Obstacle::Plane { normal, offset } => Vector3::from(normal).dot(p) - offset,
        }
    }

    /// First `t >= 0` with `o + t d` on or inside the obstacle.
    pub fn raycast(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        match *self {
            Obstacle::Box { min, max } => {
                let (mut t0, mut t1) = (0.0_f64, f64::INFINITY);
                for i in 0..3 {
                    if d[i].abs() < 1e-300 {
                        if o[i] < min[i] || o[i] > max[i] {
                            return None;
                        }
                        continue;
                    }
                    let inv = 1.0 / d[i];
                    let (mut a, mut b) = ((min[i] - o[i]) * inv, (max[i] - o[i]) * inv);
                    if a > b {
                        std::mem::swap(&mut a, &mut b);
                    }
                    t0 = t0.max(a);
                    t1 = t1.min(b);
                    if t0 > t1 {
                        return None;
                    }
                }
                Some(t0)
            }
            Obstacle::Plane { normal, offset } => {
                let n = Vector3::from(normal);
                let s = n.dot(o) - offset;
                if s <= 0.0 {
                    return Some(0.0);
                }
                let nd = n.dot(d);
                (nd < 0.0).then(|| -s / nd)
            }
        }
    }
}

/// Ground-truth world: obstacles, workspace bounds and dense boundary samples.
#[derive(Debug, Clone)]
pub struct Environment {
    pub obstacles: Vec<Obstacle>,
    pub bounds: Aabb<f64>,
    pub surface_samples: Vec<Vector3<f64>>,
}

impl Environment {
    /// Builds the environment and samples obstacle boundaries inside `bounds`
    /// on a grid of the given spacing. Samples buried inside another obstacle
    /// are skipped.
    pub fn new(obstacles: Vec<Obstacle>, bounds: Aabb<f64>, spacing: f64) -> Self {
        let obstacles: Vec<_> = obstacles.into_iter().map(Obstacle::normalized).collect();
        let mut env = Self { obstacles, bounds, surface_samples: Vec::new() };
        let mut samples = Vec::new();
        for ob in &env.obstacles {
            match *ob {
                Obstacle::Box { min, max } => {
                    let (lo, hi) = (Vector3::from(min), Vector3::from(max));
                    for axis in 0..3 {
                        for side in [lo[axis], hi[axis]] {
                            let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
                            grid_face(&mut samples, axis, side, (lo[u], hi[u]), (lo[v], hi[v]), u, v, spacing);
                        }
                    }
                }
                Obstacle::Plane { normal, offset } => {
                    sample_plane(&mut samples, &Vector3::from(normal), offset, &bounds, spacing);
                }
            }
        }
        samples.retain(|p| bounds.contains(p) && env.signed_distance(p) >= -1e-9);
        env.surface_samples = samples;
        env
    }

    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        self.obstacles.iter().map(|o| o.signed_distance(p)).fold(f64::INFINITY, f64::min)
    }

    /// Nearest hit distance along the unit direction `d`.
    pub fn raycast(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        self.obstacles
            .iter()
            .filter_map(|ob| ob.raycast(o, d))
            .fold(None, |best: Option<f64>, t| Some(best.map_or(t, |b| b.min(t))))
    }
}

#[allow(clippy::too_many_arguments)]
fn grid_face(
    out: &mut Vec<Vector3<f64>>,
    axis: usize,
    value: f64,
    ru: (f64, f64),
    rv: (f64, f64),
    u: usize,
    v: usize,
    spacing: f64,
) {
    let nu = ((ru.1 - ru.0) / spacing).ceil().max(1.0) as usize;
    let nv = ((rv.1 - rv.0) / spacing).ceil().max(1.0) as usize;
    for i in 0..=nu {
        for j in 0..=nv {
            let mut p = Vector3::zeros();
            p[axis] = value;
            p[u] = ru.0 + (ru.1 - ru.0) * i as f64 / nu as f64;
            p[v] = rv.0 + (rv.1 - rv.0) * j as f64 / nv as f64;
            out.push(p);
        }
    }
}

fn sample_plane(out: &mut Vec<Vector3<f64>>, n: &Vector3<f64>, offset: f64, bounds: &Aabb<f64>, spacing: f64) {
    let helper = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let e1 = n.cross(&helper).normalize();
    let e2 = n.cross(&e1);
    let center = (bounds.min + bounds.max) * 0.5;
    let base = center - n * (n.dot(&center) - offset);
    let r = (bounds.max - bounds.min).norm() * 0.5;
    let steps = (r / spacing).ceil() as i64;
    for i in -steps..=steps {
        for j in -steps..=steps {
            let p = base + e1 * (i as f64 * spacing) + e2 * (j as f64 * spacing);
            if bounds.contains(&p) {
                out.push(p);
            }
        }
    }
}
