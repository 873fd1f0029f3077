use std::collections::BTreeMap;

use mvgeo::box3d::project_to_box2d;
use mvgeo::io::to_json_string;
use mvgeo::simulator::{generate_scene, render_detections, scene_file, NoiseSpec, RigSpec, SceneSpec};
use mvgeo::sync::{estimate_offsets, extract_events};
use mvgeo::{iou_bev, CameraId};

fn spec(seed: u64) -> SceneSpec {
    SceneSpec { vehicle_count: 8, frame_count: 10, seed, ..Default::default() }
}

#[test]
fn scene_files_are_byte_identical_under_a_seed() {
    let render = |seed| {
        let scene = generate_scene(&RigSpec::default(), &spec(seed)).unwrap();
        let noise = NoiseSpec { seed, pixel_sigma: 2.0, drop_probability: 0.1, occlusion: true, light_jitter: 1, ..Default::default() };
        to_json_string(&scene_file(&scene, &render_detections(&scene, &noise).unwrap())).unwrap()
    };
    assert_eq!(render(3), render(3));
    assert_ne!(render(3), render(4));
}

#[test]
fn noiseless_detections_are_clamped_tight_boxes() {
    for seed in 0..10 {
        let scene = generate_scene(&RigSpec::default(), &spec(seed)).unwrap();
        let rendered = render_detections(&scene, &NoiseSpec::default()).unwrap();
        assert!(!rendered.detections.is_empty());
        for d in &rendered.detections {
            let cam = scene.rig.get(d.camera_id).unwrap();
            let v = scene.frames[d.frame as usize].vehicles.iter().find(|v| Some(v.id) == d.gt_id).unwrap();
            assert_eq!(d.bbox, project_to_box2d(cam, &v.pose, true).unwrap());
        }
    }
}

#[test]
fn certain_drop_leaves_nothing() {
    let scene = generate_scene(&RigSpec::default(), &spec(1)).unwrap();
    let rendered = render_detections(&scene, &NoiseSpec { drop_probability: 1.0, ..Default::default() }).unwrap();
    assert!(rendered.detections.is_empty());
}

#[test]
fn empty_scene_has_only_cameras() {
    let scene = generate_scene(&RigSpec::default(), &SceneSpec { vehicle_count: 0, ..spec(2) }).unwrap();
    assert_eq!(scene.rig.len(), 4);
    assert!(scene.frames.iter().all(|f| f.vehicles.is_empty()));
}

#[test]
fn every_vehicle_is_seen_twice_within_the_elevation_range() {
    let rig_spec = RigSpec::default();
    for seed in 0..20 {
        let scene = generate_scene(&rig_spec, &spec(seed)).unwrap();
        for frame in &scene.frames {
            for v in &frame.vehicles {
                let mut views = 0;
                for cam in &scene.rig.cameras {
                    if scene.view_rule.tight_box(cam, &v.pose).is_none() {
                        continue;
                    }
                    assert!(project_to_box2d(cam, &v.pose, true).is_ok());
                    let c = cam.center();
                    let elevation = c.z.atan2((c.xy() - nalgebra::Vector2::new(v.pose.x, v.pose.y)).norm()).to_degrees();
                    assert!(elevation >= rig_spec.elevation_deg.0 && elevation <= rig_spec.elevation_deg.1);
                    views += 1;
                }
                assert!(views >= 2, "seed {seed} frame {} vehicle {}", frame.frame, v.id);
            }
        }
    }
}

#[test]
fn footprints_never_overlap() {
    for seed in 0..20 {
        let scene = generate_scene(&RigSpec::default(), &spec(seed)).unwrap();
        for f in &scene.frames {
            for (i, a) in f.vehicles.iter().enumerate() {
                for b in &f.vehicles[i + 1..] {
                    assert_eq!(iou_bev(&a.pose, &b.pose), 0.0);
                }
            }
        }
    }
}

#[test]
fn occlusion_shrinks_or_hides_boxes() {
    let mut shrunk = 0;
    for seed in 0..10 {
        let scene = generate_scene(&RigSpec::default(), &SceneSpec { vehicle_count: 8, region_radius: 9.0, min_separation: 0.5, frame_count: 1, ..spec(seed) })
            .unwrap();
        let full = render_detections(&scene, &NoiseSpec::default()).unwrap();
        let occ = render_detections(&scene, &NoiseSpec { occlusion: true, ..Default::default() }).unwrap();
        assert!(occ.detections.len() <= full.detections.len());
        for d in &occ.detections {
            let f = full.detections.iter().find(|e| e.camera_id == d.camera_id && e.frame == d.frame && e.gt_id == d.gt_id).unwrap();
            assert!(f.bbox.contains_box(&d.bbox));
            assert!(d.score <= 1.0 && d.score >= 0.6);
            shrunk += (d.bbox != f.bbox) as usize;
        }
        for v in scene.frames.iter().flat_map(|f| &f.vehicles) {
            assert!((0.0..=1.0).contains(&v.visibility.unwrap()));
        }
    }
    assert!(shrunk > 0);
}

#[test]
fn injected_offsets_close_the_loop_with_sync() {
    let scene = generate_scene(&RigSpec::default(), &spec(5)).unwrap();
    let offsets: BTreeMap<CameraId, i64> = [(CameraId(0), 0), (CameraId(1), 3), (CameraId(2), -2), (CameraId(3), 16)].into();
    let noise = NoiseSpec { frame_offsets: offsets.clone(), light_jitter: 1, ..Default::default() };
    let rendered = render_detections(&scene, &noise).unwrap();
    let events = rendered.timelines.iter().map(|t| (t.camera_id, extract_events(t))).collect();
    let est = estimate_offsets(&events, CameraId(0), 40).unwrap();
    for (cam, truth) in &offsets {
        assert!((est.offset(*cam).unwrap() - truth).abs() <= 1);
    }
    // Detections carry each camera's own counter.
    for d in &rendered.detections {
        assert!(d.frame - offsets[&d.camera_id] >= 0 && d.frame - offsets[&d.camera_id] < 10);
    }
    assert_eq!(rendered.detections_at(0).len(), rendered.detections.iter().filter(|d| d.frame == offsets[&d.camera_id]).count());
}
