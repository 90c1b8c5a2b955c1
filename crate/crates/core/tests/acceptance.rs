//! Acceptance criteria 1-10. Each test prints one `PASS`/`FAIL` line.
//!
//! Run with `cargo test -p certimap --test acceptance -- --nocapture`.

mod common;

use std::io::Write;
use std::time::Instant;

use certimap::esdf::{CertifiedEsdfMap, EsdfPolicy, IntegrationParams, Visibility};
use certimap::eval::{report_json, run_experiment, run_experiment_with, run_rover_pair, sweep, PolicyMap};
use certimap::liegroup::*;
use certimap::sfc::{deflate_polytope, deflation_margins, margin_via_separating_offset, Polytope};
use certimap::sim::scenario::{KappaSpec, Policy, Scenario, SigmaSpec};
use certimap::sim::trajectory::from_true_poses;
use certimap::sim::{EstPose, TruePose, Waypoint};
use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

// Criterion 1
const ROUNDTRIP_TOL: f64 = 1e-9;
const ADJOINT_TOL: f64 = 1e-9;
const JACOBIAN_REL_TOL: f64 = 1e-5;
const LIE_SAMPLES: usize = 1000;
// Criterion 2
const CONTAINMENT_SAMPLES: usize = 100_000;
const CONTAINMENT_MIN: f64 = 0.95;
const SIGMA_NORM_MAX: f64 = 1e-4;
const CHI2_3_097: f64 = 8.947;
// Criterion 3
const ZERO_NOISE_B_TOL: f64 = 1e-12;
const ZERO_NOISE_D_TOL: f64 = 1e-12;
// Criterion 4
const SOUNDNESS_SAMPLES: usize = 10_000;
const RHO_CONSISTENCY_TOL: f64 = 1e-9;
// Criterion 5
const OVERESTIMATE_MAX_FRACTION: f64 = 0.05;
const ANALYTIC_DEFLATION_TOL: f64 = 1e-9;
// Criterion 6
const CERT_SFC_RATE_MAX_PCT: f64 = 0.1;
const CERT_ESDF_RATE_MAX_PCT: f64 = 1.0;
const BASELINE_RATIO_MIN: f64 = 10.0;
const CERT_SFC_MAX_MM: f64 = 2.0;
const CERT_ESDF_MAX_MM: f64 = 70.0;
// Criterion 7
const SWEEP_SIGMA2: [f64; 5] = [1e-12, 1e-10, 1e-8, 1e-6, 1e-4];
const SWEEP_CONVERGENCE: f64 = 0.05;
// Criterion 9
const EXTRACTION_REL_TOL: f64 = 0.2;

fn report(n: u32, name: &str, ok: bool, detail: &str, started: Instant) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    writeln!(err, "[criterion {n:>2}] {verdict} {name}: {detail} ({:.1} s)", started.elapsed().as_secs_f64()).unwrap();
}

fn random_rotvec(rng: &mut ChaCha8Rng, max_angle: f64) -> Vector3<f64> {
    loop {
        let v = Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
        let n: f64 = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n * rng.gen_range(0.0..max_angle);
        }
    }
}

fn random_transform(rng: &mut ChaCha8Rng) -> Transform<f64> {
    let t = Vector3::from_fn(|_, _| rng.gen_range(-5.0..5.0));
    Transform::new(exp_so3(&random_rotvec(rng, 3.0)), t)
}

fn random_spd(rng: &mut ChaCha8Rng, norm: f64) -> Matrix6<f64> {
    let b = Matrix6::from_fn(|_, _| rng.gen_range(-1.0..1.0));
    let s = b * b.transpose() + Matrix6::identity() * 0.05;
    s * (norm / s.norm())
}

/// Lower Cholesky factor computed by hand.
fn cholesky6(s: &Matrix6<f64>) -> Matrix6<f64> {
    let mut l = Matrix6::zeros();
    for i in 0..6 {
        for j in 0..=i {
            let sum: f64 = (0..j).map(|k| l[(i, k)] * l[(j, k)]).sum();
            if i == j {
                l[(i, i)] = (s[(i, i)] - sum).max(0.0).sqrt();
            } else if l[(j, j)] > 0.0 {
                l[(i, j)] = (s[(i, j)] - sum) / l[(j, j)];
            }
        }
    }
    l
}

fn gauss6(rng: &mut ChaCha8Rng) -> Vector6<f64> {
    Vector6::from_fn(|_, _| rng.sample(StandardNormal))
}

/// Mahalanobis radius of `d` under the 3x3 shape `s`, by explicit inverse.
fn mahalanobis_sq(s: &Matrix3<f64>, d: &Vector3<f64>) -> f64 {
    let inv = s.try_inverse().expect("invertible shape");
    d.dot(&(inv * d))
}

#[test]
fn criterion_01_lie_group_algebra() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut so3, mut se3, mut ad, mut jac) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..LIE_SAMPLES {
        let phi = random_rotvec(&mut rng, 3.0);
        let r = exp_so3(&phi);
        so3 = so3.max((log_so3(&r) - phi).norm()).max((exp_so3(&log_so3(&r)).matrix() - r.matrix()).norm());

        let xi = Twist::new(Vector3::from_fn(|_, _| rng.gen_range(-5.0..5.0)), random_rotvec(&mut rng, 3.0));
        let back = log_se3(&exp_se3(&xi));
        se3 = se3.max((back.to_vector() - xi.to_vector()).norm());

        // T Exp(xi) T^-1 = Exp(Ad_T xi)
        let t = random_transform(&mut rng);
        let small = Twist::new(Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0)), random_rotvec(&mut rng, 1.0));
        let lhs = t.compose(&exp_se3(&small)).compose(&t.inverse()).to_homogeneous();
        let rhs = exp_se3(&Twist::from_vector(&(adjoint(&t) * small.to_vector()))).to_homogeneous();
        ad = ad.max((lhs - rhs).norm());

        // Central differences of T Exp(tau) p.
        let p = Vector3::from_fn(|_, _| rng.gen_range(-3.0..3.0));
        let j = point_jacobian(&t, &p);
        let h = 1e-6;
        let mut fd = nalgebra::SMatrix::<f64, 3, 6>::zeros();
        for c in 0..6 {
            let mut e = Vector6::zeros();
            e[c] = h;
            let plus = t.compose(&exp_se3(&Twist::from_vector(&e))).act(&p);
            let minus = t.compose(&exp_se3(&Twist::from_vector(&-e))).act(&p);
            fd.set_column(c, &((plus - minus) / (2.0 * h)));
        }
        jac = jac.max((fd - j).norm() / j.norm());
    }
    let ok = so3 <= ROUNDTRIP_TOL && se3 <= ROUNDTRIP_TOL && ad <= ADJOINT_TOL && jac <= JACOBIAN_REL_TOL;
    let detail = format!("so3 {so3:.2e}, se3 {se3:.2e}, adjoint {ad:.2e}, jacobian rel {jac:.2e}");
    report(1, "Lie-group algebra", ok, &detail, t0);
    assert!(ok, "{detail}");
}

#[test]
fn criterion_02_containment_calibration() {
    let t0 = Instant::now();
    let kappa = common::chi2_3_quantile(0.97);
    let library = chi2_quantile(3, 0.97).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let sigma = random_spd(&mut rng, SIGMA_NORM_MAX);
    let l = cholesky6(&sigma);
    let t = random_transform(&mut rng);
    let p = Vector3::new(0.8, -0.4, 1.5);
    let e = point_covariance(&UncertainTransform::new(t, sigma), &p, kappa);
    let inside = (0..CONTAINMENT_SAMPLES)
        .filter(|_| {
            let tau = Twist::from_vector(&(l * gauss6(&mut rng)));
            let q = t.compose(&exp_se3(&tau)).act(&p);
            mahalanobis_sq(&e.shape, &(q - e.center)) <= 1.0
        })
        .count();
    let frac = inside as f64 / CONTAINMENT_SAMPLES as f64;
    let ok = (CONTAINMENT_MIN..=1.0).contains(&frac) && (kappa - CHI2_3_097).abs() <= 1e-3 && (library - kappa).abs() <= 1e-6;
    let detail = format!("kappa {kappa:.4} (library {library:.4}), contained {frac:.4}");
    report(2, "containment calibration", ok, &detail, t0);
    assert!(ok, "{detail}");
}

#[test]
fn criterion_03_zero_noise_equivalence() {
    let t0 = Instant::now();
    let mut scn = Scenario::preset("corridor").unwrap();
    scn.sigma = SigmaSpec::Scalar(0.0);
    scn.trajectory.frames = 200;
    let (mut b_err, mut d_err) = (0.0f64, 0.0f64);
    let mut structure_ok = true;
    let mut compare = |_: usize, _: &TruePose, _: &EstPose, maps: &[(Policy, PolicyMap)]| {
        let get = |p: Policy| &maps.iter().find(|m| m.0 == p).unwrap().1;
        if let (PolicyMap::Sfc(base), PolicyMap::Sfc(cert)) = (get(Policy::BaselineSfc), get(Policy::CertifiedSfc)) {
            structure_ok &= base.polytopes.len() == cert.polytopes.len();
            for (a, b) in base.polytopes.iter().zip(&cert.polytopes) {
                structure_ok &= a.normals() == b.normals();
                for (x, y) in a.offsets().iter().zip(b.offsets()) {
                    b_err = b_err.max((x - y).abs());
                }
            }
        }
        if let (PolicyMap::Esdf(base), PolicyMap::Esdf(cert)) = (get(Policy::BaselineEsdf), get(Policy::CertifiedEsdf)) {
            structure_ok &= base.grid.len() == cert.grid.len();
            for (idx, d) in base.grid.iter() {
                match cert.grid.get(idx) {
                    Some(c) => d_err = d_err.max((d - c).abs()),
                    None => structure_ok = false,
                }
            }
        }
    };
    let (rep, _) = run_experiment_with(&scn, Some(&mut compare)).unwrap();
    let rate = |p: Policy| rep.summary.iter().find(|r| r.policy == p).unwrap().violation_rate_pct;
    let ok = structure_ok && b_err <= ZERO_NOISE_B_TOL && d_err <= ZERO_NOISE_D_TOL;
    let detail = format!(
        "A identical {structure_ok}, max |db| {b_err:.1e}, max |dd| {d_err:.1e}, certified SFC/ESDF violation {:.4}% / {:.4}%",
        rate(Policy::CertifiedSfc),
        rate(Policy::CertifiedEsdf)
    );
    report(3, "zero-noise equivalence", ok, &detail, t0);
    assert!(ok, "{detail}");
}

#[test]
fn criterion_04_deflation_soundness() {
    let t0 = Instant::now();
    let kappa = common::chi2_3_quantile(0.97);
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    // A box in frame k with an obstacle point on its +x face.
    let normals = vec![Vector3::x(), -Vector3::x(), Vector3::y(), -Vector3::y(), Vector3::z(), -Vector3::z()];
    let offsets = vec![1.0, 0.5, 0.6, 0.4, 0.7, 0.3];
    let poly = Polytope::from_halfspaces(normals, offsets, 0).unwrap();
    let obstacle = Vector3::new(1.0, 0.2, -0.1);

    let mut excluded = 0usize;
    let mut accepted = 0usize;
    let mut rho_err = 0.0f64;
    while accepted < SOUNDNESS_SAMPLES {
        let mean = Transform::new(exp_so3(&random_rotvec(&mut rng, 0.5)), Vector3::from_fn(|_, _| rng.gen_range(-0.3..0.3)));
        let sigma = random_spd(&mut rng, 1e-4);
        let ut = UncertainTransform::new(mean, sigma);
        let rho = deflation_margins(&poly, &ut, kappa);
        for (i, r) in rho.iter().enumerate() {
            rho_err = rho_err.max((r - margin_via_separating_offset(&poly, &ut, kappa, i)).abs());
        }
        let Some(next) = deflate_polytope(&poly, &ut, kappa) else {
            accepted += 1;
            excluded += 1;
            continue;
        };
        let tau = Twist::from_vector(&(cholesky6(&sigma) * gauss6(&mut rng)));
        let moved = mean.compose(&exp_se3(&tau)).act(&obstacle);
        // Keep samples inside the containment ellipsoid that deflation covers.
        let e = point_covariance(&ut, &obstacle, kappa);
        if mahalanobis_sq(&e.shape, &(moved - e.center)) > 1.0 {
            continue;
        }
        accepted += 1;
        let strictly_inside = next.normals().iter().zip(next.offsets()).all(|(a, b)| a.dot(&moved) < *b);
        if !strictly_inside {
            excluded += 1;
        }
    }
    let ok = excluded == accepted && rho_err <= RHO_CONSISTENCY_TOL;
    let detail = format!("excluded {excluded}/{accepted}, max |rho - separating offset| {rho_err:.1e}");
    report(4, "polytope deflation soundness", ok, &detail, t0);
    assert!(ok, "{detail}");
}

#[test]
fn criterion_05_esdf_soundness() {
    let t0 = Instant::now();
    // Analytic deflation: translation-only and single-axis rotation.
    let kappa = common::chi2_3_quantile(0.97);
    let s: f64 = 2e-3;
    let vs = 0.1;
    let fill = |m: &mut CertifiedEsdfMap<f64>| {
        let vis = Visibility::Region { min: [-1.0; 3], max: [1.0; 3] };
        m.integrate_observation(&[], vis, &Transform::identity(), &IntegrationParams::default());
    };
    let mut analytic_err = 0.0f64;
    let mut trans = Matrix6::zeros();
    trans.fixed_view_mut::<3, 3>(0, 0).copy_from(&(Matrix3::identity() * s * s));
    let mut rot = Matrix6::zeros();
    rot[(5, 5)] = s * s;
    // Voxel centers sit on z = 0 of the body frame.
    let origin = Vector3::new(-1.0, -1.0, -1.0 - vs / 2.0);
    for (sigma, rotation_only) in [(trans, false), (rot, true)] {
        let mut m = CertifiedEsdfMap::new(vs, origin, EsdfPolicy::Certified { kappa });
        fill(&mut m);
        let before = m.grid.clone();
        m.deflate_esdf(&UncertainTransform::new(Transform::identity(), sigma), kappa);
        for (idx, d0) in before.iter() {
            let c = before.center(idx);
            if rotation_only && c.z.abs() > 1e-12 {
                continue;
            }
            let expect = if rotation_only { kappa.sqrt() * s * c.norm() } else { kappa.sqrt() * s };
            if let Some(d1) = m.grid.get(idx) {
                analytic_err = analytic_err.max((d0 - d1 - expect).abs());
            }
        }
    }

    // Room run: certified distances against the true geometry.
    let mut scn = Scenario::preset("room").unwrap();
    scn.trajectory.frames = 300;
    scn.mapping.voxel_size = 0.05;
    scn.sigma = SigmaSpec::Scalar(1e-6);
    scn.kappa = KappaSpec::Auto(0.97);
    scn.policies = vec![Policy::CertifiedEsdf];
    let env = scn.environment();
    let mut last = None;
    let mut grab = |_: usize, t: &TruePose, e: &EstPose, _: &[(Policy, PolicyMap)]| last = Some((*t, *e));
    let (_, maps) = run_experiment_with(&scn, Some(&mut grab)).unwrap();
    let (truth, est) = last.unwrap();
    let PolicyMap::Esdf(map) = &maps[0].1 else { unreachable!() };
    let to_true = truth.0.compose(&est.0.inverse());
    let slack = scn.mapping.voxel_size * 3f64.sqrt();
    let total = map.grid.len();
    let over = map
        .grid
        .iter()
        .filter(|(idx, d)| **d - env.signed_distance(&to_true.act(&map.grid.center(idx))) > slack)
        .count();
    let frac = over as f64 / total.max(1) as f64;
    let ok = analytic_err <= ANALYTIC_DEFLATION_TOL && frac <= OVERESTIMATE_MAX_FRACTION && total > 0;
    let detail = format!("analytic error {analytic_err:.1e}, overestimated {over}/{total} voxels ({:.3}%)", frac * 100.0);
    report(5, "certified ESDF soundness oracle", ok, &detail, t0);
    assert!(ok, "{detail}");
}

#[test]
fn criterion_06_ordering_room() {
    let t0 = Instant::now();
    let mut scn = Scenario::preset("room").unwrap();
    scn.trajectory.frames = 500;
    scn.sigma = SigmaSpec::Scalar(1e-6);
    scn.kappa = KappaSpec::Auto(0.97);
    let rep = run_experiment(&scn).unwrap();
    let row = |p: Policy| rep.summary.iter().find(|r| r.policy == p).copied().unwrap();
    let (bs, hs, cs) = (row(Policy::BaselineSfc), row(Policy::HeuristicSfc), row(Policy::CertifiedSfc));
    let (be, he, ce) = (row(Policy::BaselineEsdf), row(Policy::HeuristicEsdf), row(Policy::CertifiedEsdf));
    let gap = |b: f64, c: f64| b > 0.0 && b >= BASELINE_RATIO_MIN * c;
    let checks = [
        cs.violation_rate_pct <= CERT_SFC_RATE_MAX_PCT,
        ce.violation_rate_pct <= CERT_ESDF_RATE_MAX_PCT,
        gap(bs.violation_rate_pct, cs.violation_rate_pct),
        gap(be.violation_rate_pct, ce.violation_rate_pct),
        cs.max_violation_mm <= CERT_SFC_MAX_MM,
        ce.max_violation_mm <= CERT_ESDF_MAX_MM,
        cs.violation_rate_pct <= hs.violation_rate_pct && hs.violation_rate_pct <= bs.violation_rate_pct,
        ce.violation_rate_pct <= he.violation_rate_pct && he.violation_rate_pct <= be.violation_rate_pct,
    ];
    let ok = checks.iter().all(|c| *c);
    let detail = format!(
        "SFC b/h/c {:.3}/{:.3}/{:.4}% max c {:.2} mm; ESDF b/h/c {:.3}/{:.3}/{:.4}% max c {:.2} mm; checks {checks:?}",
        bs.violation_rate_pct,
        hs.violation_rate_pct,
        cs.violation_rate_pct,
        cs.max_violation_mm,
        be.violation_rate_pct,
        he.violation_rate_pct,
        ce.violation_rate_pct,
        ce.max_violation_mm
    );
    report(6, "ordering on the room scenario", ok, &detail, t0);
    assert!(ok, "{detail}");
}

#[test]
fn criterion_07_sweep_shape() {
    let t0 = Instant::now();
    let mut scn = Scenario::preset("room").unwrap();
    scn.policies = vec![Policy::BaselineSfc, Policy::CertifiedSfc, Policy::BaselineEsdf, Policy::CertifiedEsdf];
    // Only final-frame values enter the sweep.
    scn.eval.every = scn.trajectory.frames;
    let rows = sweep(&scn, &SWEEP_SIGMA2).unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    for (base, cert) in [(Policy::BaselineSfc, Policy::CertifiedSfc), (Policy::BaselineEsdf, Policy::CertifiedEsdf)] {
        let vols: Vec<f64> = SWEEP_SIGMA2
            .iter()
            .map(|s2| rows.iter().find(|r| r.policy == cert && r.sigma2 == *s2).unwrap().free_volume_m3)
            .collect();
        let base0 = rows.iter().find(|r| r.policy == base && r.sigma2 == SWEEP_SIGMA2[0]).unwrap().free_volume_m3;
        let monotone = vols.windows(2).all(|w| w[1] <= w[0]);
        let close = (vols[0] - base0).abs() <= SWEEP_CONVERGENCE * base0;
        ok &= monotone && close;
        parts.push(format!("{} volumes {vols:.4?} vs baseline {base0:.4} (monotone {monotone}, converged {close})", cert.name()));
    }
    let detail = parts.join("; ");
    report(7, "covariance sweep shape", ok, &detail, t0);
    assert!(ok, "{detail}");
}

#[test]
fn criterion_08_rover() {
    let t0 = Instant::now();
    let scn = Scenario::preset("corridor").unwrap();
    let sigma_ok = scn.sigma == SigmaSpec::Scalar(1e-5);
    let r = run_rover_pair(&scn).unwrap();
    let (b, c) = (&r.baseline, &r.certified);
    let ok = sigma_ok && b.incursions >= 1 && c.incursions == 0 && c.halted && c.min_clearance > 0.0;
    let detail = format!(
        "baseline incursions {} (first at frame {:?}); certified incursions {}, halted {}, min clearance {:.3} m",
        b.incursions, b.first_incursion_frame, c.incursions, c.halted, c.min_clearance
    );
    report(8, "rover out-and-reverse", ok, &detail, t0);
    assert!(ok, "{detail}");
}

#[test]
fn criterion_09_relative_covariance_extraction() {
    let t0 = Instant::now();
    // A slow handheld sweep: 0.3 m and 5 degrees over 100 frames.
    let wps = [
        Waypoint { position: [0.0, 0.0, 1.0], yaw_deg: 0.0, pitch_deg: 0.0 },
        Waypoint { position: [0.3, 0.1, 1.0], yaw_deg: 5.0, pitch_deg: -10.0 },
    ];
    let truth = certimap::sim::trajectory::interpolate(&wps, 100).unwrap();
    let anisotropic = Matrix6::from_diagonal(&Vector6::new(4.0, 2.0, 3.0, 0.5, 1.0, 0.8)) * 1e-8;
    let mut worst = 0.0f64;
    for sigma in [anisotropic, Matrix6::identity() * 1e-8] {
        let traj = from_true_poses(&truth, &sigma, 9);
        let odom = |k: usize| UncertainTransform::new(traj.steps[k].est_pose.0, traj.cumulative_covariance[k]);
        for k in 1..traj.steps.len() {
            let rel = extract_relative_covariance(&odom(k - 1), &odom(k), traj.correlation[k]).unwrap();
            worst = worst.max((rel.covariance - sigma).norm() / sigma.norm());
        }
    }
    let cov = from_true_poses(&truth, &anisotropic, 9).cumulative_covariance[40];
    let same = UncertainTransform::new(Transform::identity(), cov);
    let identity = extract_relative_covariance(&same, &same, 1.0).unwrap();
    let zero = identity.covariance.iter().all(|x| *x == 0.0);
    let ok = worst <= EXTRACTION_REL_TOL && zero;
    let detail = format!("worst relative Frobenius error {:.2}%, identity case exactly zero {zero}", worst * 100.0);
    report(9, "relative covariance extraction", ok, &detail, t0);
    assert!(ok, "{detail}");
}

#[test]
fn criterion_10_determinism() {
    let t0 = Instant::now();
    let mut scn = Scenario::preset("corridor").unwrap();
    scn.trajectory.frames = 120;
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let rep = report_json(&run_experiment(&scn).unwrap());
            let rover = serde_json::to_string(&run_rover_pair(&scn).unwrap()).unwrap();
            (rep, rover)
        })
    };
    let a = run(4);
    let b = run(4);
    let c = run(1);
    let ok = a == b && a == c;
    let detail = format!("repeat identical {}, 1 vs 4 threads identical {}", a == b, a == c);
    report(10, "determinism", ok, &detail, t0);
    assert!(ok, "{detail}");
}
