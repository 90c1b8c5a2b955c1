//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{Matrix3, Vector3};

/// Chi-squared (3 dof) CDF by Simpson integration of `2 u^2 e^{-u^2/2} / sqrt(2 pi)`
/// over `u in [0, sqrt(x)]`.
pub fn chi2_3_cdf(x: f64) -> f64 {
    let b = x.sqrt();
    let n = 4000;
    let h = b / n as f64;
    let f = |u: f64| 2.0 * u * u * (-0.5 * u * u).exp();
    let mut s = f(0.0) + f(b);
    for i in 1..n {
        s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0 / (2.0 * std::f64::consts::PI).sqrt()
}

/// Inverts [`chi2_3_cdf`] by bisection.
pub fn chi2_3_quantile(p: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, 100.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if chi2_3_cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Largest eigenvalue of a symmetric PSD 3x3 matrix by power iteration.
pub fn power_iteration_lmax(m: &Matrix3<f64>) -> f64 {
    let mut v = Vector3::new(0.577, 0.5773, 0.5771);
    let mut lam = 0.0;
    for _ in 0..2000 {
        let w = m * v;
        let n = w.norm();
        if n == 0.0 {
            return 0.0;
        }
        v = w / n;
        lam = v.dot(&(m * v));
    }
    lam
}

/// Distance from `p` to the nearest of `points`.
pub fn brute_nearest(points: &[Vector3<f64>], p: &Vector3<f64>) -> f64 {
    points.iter().map(|q| (q - p).norm()).fold(f64::INFINITY, f64::min)
}

/// Hit-or-miss volume of `{x : a_i^T x <= b_i}` over the box spanned by
/// vertices found from every triple of planes.
pub fn mc_polytope_volume(rows: &[(Vector3<f64>, f64)], n: usize, seed: u64) -> f64 {
    use rand::{Rng, SeedableRng};
    let inside = |x: &Vector3<f64>, tol: f64| rows.iter().all(|(a, b)| a.dot(x) <= b + tol);
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            for k in j + 1..rows.len() {
                let m = Matrix3::from_rows(&[rows[i].0.transpose(), rows[j].0.transpose(), rows[k].0.transpose()]);
                let Some(inv) = m.try_inverse() else { continue };
                let x = inv * Vector3::new(rows[i].1, rows[j].1, rows[k].1);
                if inside(&x, 1e-9) {
                    lo = lo.inf(&x);
                    hi = hi.sup(&x);
                }
            }
        }
    }
    if !lo.x.is_finite() {
        return 0.0;
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let hits = (0..n)
        .filter(|_| inside(&Vector3::from_fn(|i, _| rng.gen_range(lo[i]..=hi[i])), 0.0))
        .count();
    (hi - lo).product() * hits as f64 / n as f64
}

/// First `t` with `sdf(o + t d) <= 1e-10`, marching by the distance bound.
pub fn sphere_trace(sdf: impl Fn(&Vector3<f64>) -> f64, o: &Vector3<f64>, d: &Vector3<f64>, max_range: f64) -> Option<f64> {
    let mut t = 0.0;
    for _ in 0..1_000_000 {
        let s = sdf(&(o + d * t));
        if s <= 1e-10 {
            return Some(t);
        }
        t += s;
        if t > max_range {
            return None;
        }
    }
    None
}
