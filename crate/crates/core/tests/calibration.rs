use mvgeo::box3d::project_to_box2d;
use mvgeo::camera::{reprojection_rms, rotation_angle_between};
use mvgeo::simulator::{build_rig, RigSpec};
use mvgeo::{solve_homography, solve_pnp, Camera, CameraExtrinsics, CameraId, CameraIntrinsics, PointCorrespondence, Pose7DoF};
use nalgebra::{Matrix3, Vector2, Vector3};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(1000.0, 1000.0, 960.0, 540.0, 1920, 1080).unwrap()
}

fn random_camera<R: Rng>(rng: &mut R) -> Camera {
    let az = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let r = rng.random_range(10.0..20.0);
    let eye = Vector3::new(r * az.cos(), r * az.sin(), rng.random_range(4.0..9.0));
    let target = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), 0.0);
    Camera::new(CameraId(0), intrinsics(), CameraExtrinsics::look_at(&eye, &target, &Vector3::z()))
}

/// World points in front of the camera that land inside the image.
fn visible_points<R: Rng>(cam: &Camera, rng: &mut R, n: usize, planar: bool) -> Vec<PointCorrespondence> {
    let mut out = Vec::new();
    while out.len() < n {
        let z = if planar { 0.0 } else { rng.random_range(0.0..3.0) };
        let w = Vector3::new(rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0), z);
        if let Ok(px) = cam.project_point(&w) {
            if cam.intrinsics.contains(&px) {
                out.push(PointCorrespondence::new(px, w));
            }
        }
    }
    out
}

#[test]
fn pnp_recovers_noiseless_cameras() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..100 {
        let cam = random_camera(&mut rng);
        let pts = visible_points(&cam, &mut rng, 8, trial % 2 == 0);
        let ext = solve_pnp(&pts, &cam.intrinsics).unwrap();
        let rms = reprojection_rms(&pts, &cam.intrinsics, &ext).unwrap();
        assert!(rms < 1e-6, "trial {trial}: {rms}");
        let r = &ext.rotation;
        assert!((r.transpose() * r - Matrix3::identity()).norm() < 1e-9);
        assert!((r.determinant() - 1.0).abs() < 1e-9);
    }
}

fn percentile(v: &mut [f64], q: f64) -> f64 {
    v.sort_by(f64::total_cmp);
    v[((v.len() - 1) as f64 * q).round() as usize]
}

#[test]
fn pnp_under_pixel_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let noise = Normal::new(0.0, 0.5).unwrap();
    let (mut rot, mut trans) = (Vec::new(), Vec::new());
    for _ in 0..100 {
        let cam = random_camera(&mut rng);
        let pts: Vec<_> = visible_points(&cam, &mut rng, 8, false)
            .into_iter()
            .map(|c| PointCorrespondence::new(c.pixel + Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng)), c.world))
            .collect();
        let ext = mvgeo::camera::solve_pnp_with(&pts, &cam.intrinsics, &mvgeo::camera::PnpOptions { tolerance: f64::INFINITY, ..Default::default() }).unwrap();
        rot.push(rotation_angle_between(&ext.rotation, &cam.extrinsics.rotation).to_degrees());
        let scale = (cam.center() - pts.iter().map(|c| c.world).sum::<Vector3<f64>>() / pts.len() as f64).norm();
        trans.push((ext.center() - cam.center()).norm() / scale);
    }
    let (r95, t95) = (percentile(&mut rot, 0.95), percentile(&mut trans, 0.95));
    println!("PnP with 0.5 px noise: p95 rotation {r95:.3} deg, p95 translation {:.3}%", 100.0 * t95);
    assert!(r95 < 0.5);
    assert!(t95 < 0.01);
}

#[test]
fn pnp_is_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let cam = random_camera(&mut rng);
        let mut pts = visible_points(&cam, &mut rng, 10, false);
        let a = solve_pnp(&pts, &cam.intrinsics).unwrap();
        pts.shuffle(&mut rng);
        let b = solve_pnp(&pts, &cam.intrinsics).unwrap();
        assert!((a.rotation - b.rotation).norm() < 1e-9);
        assert!((a.translation - b.translation).norm() < 1e-9);
    }
}

#[test]
fn homography_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let cam = random_camera(&mut rng);
        let truth = cam.ground_homography().unwrap();
        let pts = visible_points(&cam, &mut rng, 4, true);
        let solved = solve_homography(&pts).unwrap();
        let (m, n) = (solved.matrix() / solved.matrix()[(2, 2)], truth.matrix() / truth.matrix()[(2, 2)]);
        assert!((m - n).norm() < 1e-9 * n.norm());
        for c in &pts {
            let e = (solved.apply(&c.pixel).unwrap() - c.world.xy()).norm();
            assert!(e < 1e-9, "{e:e} at {:?}", c.world);
        }
    }
}

#[test]
fn camera_homography_agrees_with_ray_casting() {
    let rig = build_rig(&RigSpec::default()).unwrap();
    for cam in &rig.cameras {
        let h = cam.ground_homography().unwrap();
        for i in 0..10 {
            for j in 0..10 {
                let px = Vector2::new(96.0 + 192.0 * i as f64, 540.0 + 54.0 * j as f64);
                let Ok(g) = cam.cast_ray_to_ground(&px) else { continue };
                assert!((h.apply(&px).unwrap() - g.xy()).norm() < 1e-6);
            }
        }
    }
}

#[test]
fn shrinking_a_box_never_grows_its_image_box() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let rig = build_rig(&RigSpec::default()).unwrap();
    for _ in 0..500 {
        let cam = &rig.cameras[rng.random_range(0..rig.len())];
        let p = Pose7DoF::new(
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
            0.8,
            rng.random_range(3.0..6.0),
            rng.random_range(1.5..2.5),
            rng.random_range(1.2..2.0),
            rng.random_range(-3.0..3.0),
        )
        .unwrap();
        let s = rng.random_range(0.3..1.0);
        let q = Pose7DoF { l: p.l * s, w: p.w * rng.random_range(0.3..1.0), h: p.h * rng.random_range(0.3..1.0), ..p };
        let (Ok(big), Ok(small)) = (project_to_box2d(cam, &p, false), project_to_box2d(cam, &q, false)) else { continue };
        assert!(big.enclose(&small).area() <= big.area() * (1.0 + 1e-12));
    }
}

proptest! {
    #[test]
    fn ground_rays_round_trip(az in -3.1..3.1f64, r in 8.0..25.0f64, height in 3.0..12.0f64, u in 0.0..1920.0f64, v in 0.0..1080.0f64) {
        let eye = Vector3::new(r * az.cos(), r * az.sin(), height);
        let cam = Camera::new(CameraId(0), intrinsics(), CameraExtrinsics::look_at(&eye, &Vector3::zeros(), &Vector3::z()));
        let px = Vector2::new(u, v);
        if let Ok(g) = cam.cast_ray_to_ground(&px) {
            prop_assert!(g.z.abs() < 1e-12);
            prop_assert!((cam.project_point(&g).unwrap() - px).norm() < 1e-6);
        }
    }

    #[test]
    fn world_camera_round_trip(az in -3.1..3.1f64, x in -20.0..20.0f64, y in -20.0..20.0f64, z in 0.0..5.0f64) {
        let eye = Vector3::new(12.0 * az.cos(), 12.0 * az.sin(), 6.0);
        let ext = CameraExtrinsics::look_at(&eye, &Vector3::zeros(), &Vector3::z());
        let p = Vector3::new(x, y, z);
        prop_assert!((ext.to_world(&ext.to_camera(&p)) - p).norm() < 1e-12 * (1.0 + p.norm()).max(eye.norm()));
    }
}
