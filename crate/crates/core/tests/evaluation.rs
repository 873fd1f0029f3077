use std::f64::consts::PI;

use mvgeo::io::{PoseFrame, VehicleRecord};
use mvgeo::metrics::{aoe, ase, ate, BucketBy, BucketSpec, MetricSet};
use mvgeo::{evaluate, iou_3d, iou_bev, MatchingConfig, Pose7DoF};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn p(x: f64, y: f64, z: f64, l: f64, w: f64, yaw: f64) -> Pose7DoF {
    Pose7DoF::new(x, y, z, l, w, 1.5, yaw).unwrap()
}

#[test]
fn unit_values() {
    assert!((ate(&p(0.0, 0.0, 0.0, 4.0, 2.0, 0.0), &p(3.0, 4.0, 0.0, 4.0, 2.0, 0.0)) - 5.0).abs() < 1e-9);
    assert!((ase(&p(0.0, 0.0, 0.75, 4.0, 2.0, 0.0), &p(0.0, 0.0, 0.75, 5.0, 2.0, 0.0)) - 0.2).abs() < 1e-9);
    let d = aoe(&p(0.0, 0.0, 0.75, 4.0, 2.0, 3.1), &p(0.0, 0.0, 0.75, 4.0, 2.0, -3.1), true);
    assert!((d - (2.0 * PI - 6.2).to_degrees()).abs() < 1e-9);
    assert!((d - 4.767).abs() < 1e-3);
}

fn random_frames<R: Rng>(rng: &mut R, frames: usize) -> (Vec<PoseFrame>, Vec<PoseFrame>) {
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for f in 0..frames {
        let mut pv = Vec::new();
        let mut gv = Vec::new();
        for i in 0..rng.random_range(1..6) {
            // Vehicles on a 10 m grid so matches are unambiguous.
            let g = p(10.0 * i as f64, 10.0 * f as f64, 0.75, rng.random_range(3.5..5.5), rng.random_range(1.6..2.1), rng.random_range(-PI..PI));
            let q = Pose7DoF {
                x: g.x + rng.random_range(-0.8..0.8),
                y: g.y + rng.random_range(-0.8..0.8),
                z: g.z + rng.random_range(-0.2..0.2),
                l: g.l * rng.random_range(0.85..1.15),
                yaw: mvgeo::box3d::wrap_angle(g.yaw + rng.random_range(-0.3..0.3)),
                ..g
            };
            gv.push(VehicleRecord { id: i, pose: g, visibility: Some(rng.random_range(0.0..1.0)), score: None });
            pv.push(VehicleRecord { id: i, pose: q, visibility: None, score: Some(rng.random_range(0.5..1.0)) });
        }
        gts.push(PoseFrame { frame: f as i64, vehicles: gv });
        preds.push(PoseFrame { frame: f as i64, vehicles: pv });
    }
    (preds, gts)
}

fn close(a: &MetricSet, b: &MetricSet, tol: f64) -> bool {
    let s = |m: &MetricSet| [m.ate, m.ase, m.aoe, m.iou_3d, m.iou_bev];
    s(a).iter().zip(s(b)).all(|(x, y)| x.n == y.n && (x.mean - y.mean).abs() <= tol && (x.std - y.std).abs() <= tol)
}

#[test]
fn half_meter_shift_gives_half_meter_ate() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (_, gts) = random_frames(&mut rng, 10);
    let preds: Vec<PoseFrame> = gts
        .iter()
        .map(|f| PoseFrame {
            frame: f.frame,
            vehicles: f.vehicles.iter().map(|v| VehicleRecord { pose: Pose7DoF { x: v.pose.x + 0.3, y: v.pose.y - 0.4, ..v.pose }, ..v.clone() }).collect(),
        })
        .collect();
    let r = evaluate(&preds, &gts, &MatchingConfig::default(), None).unwrap();
    assert!((r.metrics.ate.mean - 0.5).abs() < 1e-12);
    assert!(r.metrics.ate.std < 1e-12);
    assert_eq!((r.misses, r.false_positives), (0, 0));
}

#[test]
fn evaluation_ignores_frame_and_vehicle_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let (preds, gts) = random_frames(&mut rng, 8);
        let base = evaluate(&preds, &gts, &MatchingConfig::default(), None).unwrap();
        let (mut p2, mut g2) = (preds.clone(), gts.clone());
        p2.shuffle(&mut rng);
        g2.shuffle(&mut rng);
        p2.iter_mut().for_each(|f| f.vehicles.shuffle(&mut rng));
        g2.iter_mut().for_each(|f| f.vehicles.shuffle(&mut rng));
        let other = evaluate(&p2, &g2, &MatchingConfig::default(), None).unwrap();
        assert_eq!((base.matches, base.misses, base.false_positives), (other.matches, other.misses, other.false_positives));
        assert!(close(&base.metrics, &other.metrics, 1e-12));
    }
}

#[test]
fn buckets_recombine_to_pooled_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (preds, gts) = random_frames(&mut rng, 20);
    let spec = BucketSpec { by: BucketBy::Visibility, edges: vec![0.0, 0.25, 0.5, 0.75, 1.0] };
    let r = evaluate(&preds, &gts, &MatchingConfig::default(), Some(&spec)).unwrap();
    let n: usize = r.buckets.iter().map(|b| b.metrics.ate.n).sum();
    assert_eq!(n, r.matches);
    let pick = |m: &MetricSet| [m.ate, m.ase, m.aoe, m.iou_3d, m.iou_bev];
    for k in 0..5 {
        let weighted: f64 = r.buckets.iter().map(|b| pick(&b.metrics)[k].mean * pick(&b.metrics)[k].n as f64).sum::<f64>() / n as f64;
        assert!((weighted - pick(&r.metrics)[k].mean).abs() < 1e-12);
    }
}

#[test]
fn nothing_matched_is_an_error() {
    let (preds, gts) = random_frames(&mut ChaCha8Rng::seed_from_u64(4), 2);
    let far: Vec<PoseFrame> = preds
        .iter()
        .map(|f| PoseFrame {
            frame: f.frame,
            vehicles: f.vehicles.iter().map(|v| VehicleRecord { pose: Pose7DoF { x: v.pose.x + 500.0, ..v.pose }, ..v.clone() }).collect(),
        })
        .collect();
    assert!(matches!(evaluate(&far, &gts, &MatchingConfig::default(), None), Err(mvgeo::metrics::MetricsError::EmptyEvaluation(_))));
}

fn arb_pose() -> impl Strategy<Value = Pose7DoF> {
    (-10.0..10.0f64, -10.0..10.0f64, 0.3..2.0f64, 2.0..6.0f64, 1.2..2.5f64, -PI..PI).prop_map(|(x, y, z, l, w, yaw)| p(x, y, z, l, w, yaw))
}

fn rigid(q: &Pose7DoF, dx: f64, dy: f64, dz: f64, rot: f64) -> Pose7DoF {
    let (s, c) = rot.sin_cos();
    Pose7DoF::new(c * q.x - s * q.y + dx, s * q.x + c * q.y + dy, q.z + dz, q.l, q.w, q.h, q.yaw + rot).unwrap()
}

proptest! {
    #[test]
    fn metrics_invariant_under_rigid_transform(
        a in arb_pose(), b in arb_pose(),
        dx in -100.0..100.0f64, dy in -100.0..100.0f64, dz in -1.0..1.0f64, rot in -PI..PI,
    ) {
        let (a2, b2) = (rigid(&a, dx, dy, dz, rot), rigid(&b, dx, dy, dz, rot));
        prop_assert!((ate(&a, &b) - ate(&a2, &b2)).abs() < 1e-9);
        prop_assert!((ase(&a, &b) - ase(&a2, &b2)).abs() < 1e-12);
        prop_assert!((aoe(&a, &b, true) - aoe(&a2, &b2, true)).abs() < 1e-7);
        prop_assert!((iou_3d(&a, &b) - iou_3d(&a2, &b2)).abs() < 1e-9);
        prop_assert!((iou_bev(&a, &b) - iou_bev(&a2, &b2)).abs() < 1e-9);
    }

    #[test]
    fn metrics_are_symmetric(a in arb_pose(), b in arb_pose()) {
        prop_assert_eq!(ate(&a, &b), ate(&b, &a));
        prop_assert!((ase(&a, &b) - ase(&b, &a)).abs() < 1e-15);
        prop_assert!((aoe(&a, &b, true) - aoe(&b, &a, true)).abs() < 1e-12);
        prop_assert!((aoe(&a, &b, false) - aoe(&b, &a, false)).abs() < 1e-12);
    }
}
