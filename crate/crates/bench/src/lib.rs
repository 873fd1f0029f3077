//! Fixtures shared by the benchmarks.

use mvgeo::simulator::{generate_scene, oracle_annotations, perturb_pose, render_detections, NoiseSpec, RigSpec, SceneSpec};
use mvgeo::{Detection2D, MultiViewAnnotation, Pose7DoF, Rig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One vehicle, its annotation, and a start 1.5 m / 15° off.
pub fn refine_case(seed: u64) -> (Rig, MultiViewAnnotation, Pose7DoF) {
    let scene = generate_scene(&RigSpec::default(), &SceneSpec { seed, vehicle_count: 1, ..Default::default() }).unwrap();
    let rendered = render_detections(&scene, &NoiseSpec { seed, pixel_sigma: 1.0, ..Default::default() }).unwrap();
    let ann = oracle_annotations(&scene, &rendered, 0).remove(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = perturb_pose(&scene.frames[0].vehicles[0].pose, &mut rng, 1.5, 15f64.to_radians(), 0.0);
    (scene.rig, ann, init)
}

/// A frame with `vehicles` cars seen by the default four-camera rig.
pub fn detection_frame(seed: u64, vehicles: usize) -> (Rig, Vec<Detection2D>) {
    let spec = SceneSpec { seed, vehicle_count: vehicles, region_radius: 14.0, min_separation: 1.0, ..Default::default() };
    let scene = generate_scene(&RigSpec::default(), &spec).unwrap();
    let dets = render_detections(&scene, &NoiseSpec { seed, pixel_sigma: 1.0, ..Default::default() }).unwrap().detections_at(0);
    (scene.rig, dets)
}
