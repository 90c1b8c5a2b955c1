//! Brute-force reference computations, independent of the library routines
//! they are meant to check.

use std::path::PathBuf;

use certimap::liegroup::{exp_se3, hat3, Twist};
use certimap::sim::scenario::{KappaSpec, Scenario};
use clap::Subcommand;
use nalgebra::{Matrix3, SMatrix, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Deserialize;

#[derive(Subcommand)]
pub enum OracleCmd {
    /// Chi-square quantile by bisection on a series CDF.
    Chi2 {
        #[arg(long)]
        dof: u32,
        #[arg(long)]
        p: f64,
    },
    /// Fraction of perturbed points `Exp(tau) p`, `tau ~ N(0, s I)`, inside
    /// the ellipsoid `kappa J (s I) J^T`.
    Containment {
        /// Covariance scale `s`.
        #[arg(long)]
        sigma: f64,
        #[arg(long, default_value = "auto97")]
        kappa: KappaSpec,
        #[arg(long, default_value_t = 100_000)]
        n: usize,
        #[arg(long, value_delimiter = ',', default_values_t = [0.5, -0.3, 1.0])]
        point: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Distances from voxel centers to the nearest point, by exhaustive search.
    /// Prints `i,j,k,distance` for a `grid^3` block.
    Esdf {
        #[arg(long)]
        grid: usize,
        /// JSON array of `[x, y, z]`.
        #[arg(long)]
        points: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        voxel_size: f64,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.0, 0.0])]
        origin: Vec<f64>,
    },
    /// First hit along a ray by sphere tracing the scenario's distance field.
    Raycast {
        #[arg(long)]
        scenario: String,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        origin: Vec<f64>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        direction: Vec<f64>,
        #[arg(long, default_value_t = 100.0)]
        max_range: f64,
    },
    /// Monte-Carlo volume of a polytope `{"A": [[..]], "b": [..]}`.
    Volume {
        #[arg(long)]
        polytope: PathBuf,
        #[arg(long, default_value_t = 1_000_000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn vec3(name: &str, v: &[f64]) -> Result<Vector3<f64>, String> {
    match v {
        [x, y, z] => Ok(Vector3::new(*x, *y, *z)),
        _ => Err(format!("--{name} needs 3 comma-separated values, got {}", v.len())),
    }
}

pub fn run(cmd: &OracleCmd) -> Result<bool, String> {
    match cmd {
        OracleCmd::Chi2 { dof, p } => {
            println!("{:.6}", chi2_quantile(*dof, *p)?);
        }
        OracleCmd::Containment { sigma, kappa, n, point, seed } => {
            let kappa = kappa.resolve()?;
            if !(*sigma >= 0.0 && sigma.is_finite()) {
                return Err(format!("sigma must be non-negative, got {sigma}"));
            }
            let frac = containment(*sigma, kappa, *n, &vec3("point", point)?, *seed);
            println!("kappa,contained\n{kappa},{frac}");
        }
        OracleCmd::Esdf { grid, points, voxel_size, origin } => {
            let text = std::fs::read_to_string(points).map_err(|e| format!("{}: {e}", points.display()))?;
            let pts: Vec<[f64; 3]> = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", points.display()))?;
            let pts: Vec<Vector3<f64>> = pts.into_iter().map(Vector3::from).collect();
            let org = vec3("origin", origin)?;
            println!("i,j,k,distance");
            for k in 0..*grid {
                for j in 0..*grid {
                    for i in 0..*grid {
                        let c = org + Vector3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) * *voxel_size;
                        let d = pts.iter().map(|q| (q - c).norm()).fold(f64::INFINITY, f64::min);
                        println!("{i},{j},{k},{d:?}");
                    }
                }
            }
        }
        OracleCmd::Raycast { scenario, origin, direction, max_range } => {
            let env = Scenario::load(scenario).map_err(|e| e.to_string())?.environment();
            let d = vec3("direction", direction)?;
            let o = vec3("origin", origin)?;
            if d.norm() == 0.0 {
                return Err("direction must be nonzero".into());
            }
            match sphere_trace(|p| env.signed_distance(p), &o, &d.normalize(), *max_range) {
                Some(t) => println!("{t:?}"),
                None => println!("miss"),
            }
        }
        OracleCmd::Volume { polytope, n, seed } => {
            #[derive(Deserialize)]
            struct Raw {
                #[serde(rename = "A")]
                a: Vec<[f64; 3]>,
                b: Vec<f64>,
            }
            let text = std::fs::read_to_string(polytope).map_err(|e| format!("{}: {e}", polytope.display()))?;
            let raw: Raw = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", polytope.display()))?;
            if raw.a.len() != raw.b.len() {
                return Err("A and b differ in length".into());
            }
            let rows: Vec<(Vector3<f64>, f64)> = raw.a.into_iter().map(Vector3::from).zip(raw.b).collect();
            let (vol, se) = mc_volume(&rows, *n, *seed)?;
            println!("volume,stderr\n{vol:?},{se:?}");
        }
    }
    Ok(true)
}

/// Regularized lower incomplete gamma `P(a, x)` by its power series.
fn lower_gamma_regularized(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let (mut term, mut sum, mut n) = (1.0 / a, 1.0 / a, 0.0);
    while term > sum * 1e-17 && n < 10_000.0 {
        n += 1.0;
        term *= x / (a + n);
        sum += term;
    }
    (a * x.ln() - x - ln_gamma_half(a)).exp() * sum
}

/// `ln Gamma(a)` for `a` a positive multiple of one half.
fn ln_gamma_half(a: f64) -> f64 {
    let (mut g, mut z) = if (a * 2.0).round() as i64 % 2 == 0 { (0.0, 1.0) } else { (0.5 * std::f64::consts::PI.ln(), 0.5) };
    while z < a - 0.25 {
        g += z.ln();
        z += 1.0;
    }
    g
}

pub fn chi2_quantile(dof: u32, p: f64) -> Result<f64, String> {
    if dof == 0 || !(p > 0.0 && p < 1.0) {
        return Err(format!("need dof >= 1 and p in (0, 1), got dof {dof}, p {p}"));
    }
    let k = dof as f64 / 2.0;
    let cdf = |x: f64| lower_gamma_regularized(k, x / 2.0);
    let (mut lo, mut hi) = (0.0, dof as f64 + 10.0);
    while cdf(hi) < p {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn containment(s: f64, kappa: f64, n: usize, p: &Vector3<f64>, seed: u64) -> f64 {
    let mut j = SMatrix::<f64, 3, 6>::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&-hat3(p));
    let shape = j * j.transpose() * (s * kappa);
    let Some(inv) = shape.try_inverse() else { return f64::NAN };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = s.sqrt();
    let inside = (0..n)
        .filter(|_| {
            let tau = Vector6::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal) * sd);
            let d = exp_se3(&Twist::from_vector(&tau)).act(p) - p;
            d.dot(&(inv * d)) <= 1.0
        })
        .count();
    inside as f64 / n.max(1) as f64
}

/// Marches along `d` by the distance bound until within `1e-10` of a surface.
pub fn sphere_trace(sdf: impl Fn(&Vector3<f64>) -> f64, o: &Vector3<f64>, d: &Vector3<f64>, max_range: f64) -> Option<f64> {
    let mut t = 0.0;
    for _ in 0..10_000_000 {
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

/// Hit-or-miss volume over the box spanned by the polytope's vertices, which
/// are found by testing every triple of planes.
pub fn mc_volume(rows: &[(Vector3<f64>, f64)], n: usize, seed: u64) -> Result<(f64, f64), String> {
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
    if !(lo.iter().all(|v| v.is_finite()) && hi.iter().all(|v| v.is_finite())) {
        return Err("polytope has no vertices".into());
    }
    let box_vol = (hi - lo).product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hits = (0..n)
        .filter(|_| {
            let x = Vector3::from_fn(|i, _| rng.gen_range(lo[i]..=hi[i]));
            inside(&x, 0.0)
        })
        .count();
    let f = hits as f64 / n.max(1) as f64;
    Ok((box_vol * f, box_vol * (f * (1.0 - f) / n.max(1) as f64).sqrt()))
}
