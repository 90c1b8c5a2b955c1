mod common;

use certimap::esdf::*;
use certimap::liegroup::{exp_se3, exp_so3, point_jacobian, Transform, Twist, UncertainTransform};
use certimap::sim::scenario::Scenario;
use certimap::sim::trajectory::{from_true_poses, interpolate};
use certimap::sim::{raycast_depth, TruePose};
use nalgebra::{Matrix6, Vector3, Vector6};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn vec3(r: f64) -> impl Strategy<Value = Vector3<f64>> {
    prop::array::uniform3(-r..r).prop_map(Vector3::from)
}

fn transform() -> impl Strategy<Value = Transform<f64>> {
    (vec3(0.5), vec3(1.5)).prop_map(|(t, phi)| Transform::new(exp_so3(&phi), t))
}

fn spd6() -> impl Strategy<Value = Matrix6<f64>> {
    prop::collection::vec(-1.0..1.0f64, 36).prop_map(|v| {
        let b = Matrix6::from_row_slice(&v);
        b * b.transpose() * 1e-4
    })
}

const REGION: Visibility<'static> = Visibility::Region { min: [-0.5, -0.5, -0.5], max: [0.5, 0.5, 0.5] };

fn params(truncation: f64) -> IntegrationParams {
    IntegrationParams { truncation, clamp_to_view: false }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn observe_matches_brute_force(pts in prop::collection::vec(vec3(0.6), 1..40), pose in transform()) {
        let vs = 0.1;
        let origin = Vector3::new(0.01, -0.02, 0.03);
        let obs = observe(vs, &origin, &pts, REGION, &pose, &params(0.3));
        let world: Vec<_> = pts.iter().map(|p| pose.act(p)).collect();
        prop_assert!(!obs.entries.is_empty());
        for (idx, d) in &obs.entries {
            let c = origin + Vector3::new(idx[0] as f64 + 0.5, idx[1] as f64 + 0.5, idx[2] as f64 + 0.5) * vs;
            let want = common::brute_nearest(&world, &c).min(0.3);
            prop_assert!((d - want).abs() <= 1e-12, "{idx:?}: {d} vs {want}");
        }
    }

    #[test]
    fn deflation_amount_matches_power_iteration(sigma in spd6(), p in vec3(3.0), t in transform(), kappa in 0.5..12.0f64) {
        // Any mean rotation gives the same spectrum.
        let j = point_jacobian(&t, &p);
        let m = j * sigma * j.transpose() * kappa;
        let want = common::power_iteration_lmax(&m).sqrt();
        prop_assert!((deflation_amount(&sigma, &p, kappa) - want).abs() <= 1e-9);
    }

    #[test]
    fn translation_only_deflation_is_uniform(s in 1e-8..1e-3f64, pts in prop::collection::vec(vec3(5.0), 2..50)) {
        let mut sigma = Matrix6::zeros();
        sigma.fixed_view_mut::<3, 3>(0, 0).fill_with_identity();
        sigma *= s;
        let d: Vec<f64> = pts.iter().map(|p| deflation_amount(&sigma, p, 8.947)).collect();
        let spread = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - d.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assert!(spread <= 1e-12);
    }

    #[test]
    fn fusion_is_order_independent(a in prop::collection::vec(vec3(0.6), 1..20), b in prop::collection::vec(vec3(0.6), 1..20), pose in transform()) {
        let oa = observe(0.1, &Vector3::zeros(), &a, REGION, &pose, &params(0.5));
        let ob = observe(0.1, &Vector3::zeros(), &b, REGION, &Transform::identity(), &params(0.5));
        let mut m1 = CertifiedEsdfMap::new(0.1, Vector3::zeros(), EsdfPolicy::Baseline);
        let mut m2 = m1.clone();
        m1.apply_observation(&oa);
        m1.apply_observation(&ob);
        m2.apply_observation(&ob);
        m2.apply_observation(&oa);
        m2.apply_observation(&oa);
        prop_assert_eq!(m1.grid.sorted(), m2.grid.sorted());
    }

    #[test]
    fn snapshot_roundtrip(pts in prop::collection::vec(vec3(0.6), 1..20), pose in transform()) {
        let mut m = CertifiedEsdfMap::new(0.1, Vector3::new(0.1, 0.2, -0.3), EsdfPolicy::Baseline);
        m.integrate_observation(&pts, REGION, &pose, &params(0.5));
        let mut buf = Vec::new();
        write_snapshot(&m.grid, &mut buf).unwrap();
        let back: VoxelGrid<f64> = read_snapshot(buf.as_slice()).unwrap();
        prop_assert_eq!(back, m.grid);
    }
}

#[test]
fn lipschitz_after_static_integration() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let vs = 0.05;
    let pts: Vec<_> = (0..200).map(|_| Vector3::from_fn(|_, _| rng.gen_range(-0.5..0.5))).collect();
    let mut m = CertifiedEsdfMap::new(vs, Vector3::zeros(), EsdfPolicy::Baseline);
    m.integrate_observation(&pts, REGION, &Transform::identity(), &params(10.0));
    let cells: std::collections::HashMap<[i32; 3], f64> = m.grid.sorted().into_iter().collect();
    let mut checked = 0;
    for (idx, d) in &cells {
        for axis in 0..3 {
            let mut n = *idx;
            n[axis] += 1;
            if let Some(e) = cells.get(&n) {
                assert!((d - e).abs() <= vs + 2.0 * vs);
                checked += 1;
            }
        }
    }
    assert!(checked > 1000);
}

/// Camera-observed voxels lie in free space, and their stored distance is
/// never below the analytic distance to the scene.
#[test]
fn camera_observation_against_scene_geometry() {
    let scn = Scenario::preset("room").unwrap();
    let env = scn.environment();
    let cam = scn.camera.model();
    let poses = interpolate(&scn.trajectory.waypoints, 20).unwrap();
    let vs = scn.mapping.voxel_size;
    for pose in poses.iter().step_by(5) {
        let frame = raycast_depth(&env, &TruePose(*pose), &cam);
        let vis = Visibility::Camera { camera: &cam, frame: &frame };
        let obs = observe(vs, &Vector3::zeros(), &frame.points, vis, pose, &params(0.5));
        assert!(obs.entries.len() > 100);
        for (idx, d) in &obs.entries {
            let c = Vector3::new(idx[0] as f64 + 0.5, idx[1] as f64 + 0.5, idx[2] as f64 + 0.5) * vs;
            let truth = env.signed_distance(&c);
            assert!(truth > 0.0, "observed voxel {idx:?} inside an obstacle ({truth})");
            assert!(*d >= truth.min(0.5) - 1e-9, "{idx:?}: stored {d} below true {truth}");
        }
    }
}

/// Same observations and increments: certified free voxels are always a
/// subset of baseline free voxels.
#[test]
fn certified_free_set_within_baseline() {
    let scn = Scenario::preset("room").unwrap();
    let env = scn.environment();
    let cam = scn.camera.model();
    let truth = interpolate(&scn.trajectory.waypoints, 40).unwrap();
    let traj = from_true_poses(&truth, &(Matrix6::identity() * 1e-6), 5);
    let vs = 0.1;
    let mut base = CertifiedEsdfMap::new(vs, Vector3::zeros(), EsdfPolicy::Baseline);
    let mut cert = CertifiedEsdfMap::new(vs, Vector3::zeros(), EsdfPolicy::Certified { kappa: 8.947 });
    for step in &traj.steps {
        let frame = raycast_depth(&env, &step.true_pose, &cam);
        let vis = Visibility::Camera { camera: &cam, frame: &frame };
        let est = step.est_pose.0;
        let obs = observe(vs, &Vector3::zeros(), &frame.points, vis, &est, &params(0.5));
        base.step(&step.est_incremental, Some(&obs), &est);
        cert.step(&step.est_incremental, Some(&obs), &est);
        let b: std::collections::HashMap<_, _> = base.grid.sorted().into_iter().collect();
        for (idx, d) in cert.grid.sorted() {
            if d >= 0.0 {
                assert!(b.get(&idx).is_some_and(|e| *e >= 0.0), "{idx:?}");
            }
        }
    }
    assert!(cert.free_volume() < base.free_volume());
}

#[test]
fn deflation_never_raises_distances() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let pts: Vec<_> = (0..50).map(|_| Vector3::from_fn(|_, _| rng.gen_range(-0.5..0.5))).collect();
    let mut m = CertifiedEsdfMap::new(0.05, Vector3::zeros(), EsdfPolicy::Certified { kappa: 8.947 });
    m.integrate_observation(&pts, REGION, &Transform::identity(), &params(0.5));
    let before: std::collections::HashMap<_, _> = m.grid.sorted().into_iter().collect();
    let inc = exp_se3(&Twist::from_vector(&(Vector6::from_fn(|_, _| rng.gen_range(-1.0..1.0)) * 0.01)));
    let sigma = Matrix6::identity() * 1e-5;
    m.step(&UncertainTransform::new(inc, sigma), None, &inc);
    assert!(!m.grid.is_empty());
    for (idx, d) in m.grid.sorted() {
        assert!(d >= 0.0);
        assert!(d <= before[&idx]);
    }
}

#[test]
fn heuristic_forgets_far_voxels() {
    let pts = vec![Vector3::new(0.3, 0.0, 0.0)];
    let mut m = CertifiedEsdfMap::new(0.05, Vector3::zeros(), EsdfPolicy::Heuristic { radius: 0.3 });
    let obs = observe(0.05, &Vector3::zeros(), &pts, REGION, &Transform::identity(), &params(0.5));
    m.step(&UncertainTransform::certain(Transform::identity()), Some(&obs), &Transform::identity());
    for (idx, _) in m.grid.sorted() {
        assert!(m.grid.center(&idx).norm() <= 0.3);
    }
}

#[test]
fn single_precision_map() {
    let pts: Vec<Vector3<f32>> = vec![Vector3::new(0.2, 0.1, 0.0)];
    let mut m = CertifiedEsdfMap::<f32>::new(0.1, Vector3::zeros(), EsdfPolicy::Certified { kappa: 8.947 });
    m.integrate_observation(&pts, REGION, &Transform::identity(), &params(0.5));
    let n = m.grid.len();
    m.step(&UncertainTransform::new(Transform::identity(), Matrix6::identity() * 1e-6), None, &Transform::identity());
    assert!(m.grid.len() <= n && !m.grid.is_empty());
    assert!(m.query_certified(&Vector3::new(-0.3, -0.3, -0.3)).is_free());
}
