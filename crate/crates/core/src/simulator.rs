//! Synthetic intersections: a ring of pole-mounted cameras aimed at the
//! center, box-shaped vehicles on straight or turning paths, and the 2D
//! detections and traffic-light timelines each camera would record.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::association::{Detection2D, MultiViewAnnotation};
use crate::box3d::{polygon, project_corners, wrap_angle, Box2D, Pose7DoF};
use crate::camera::{Camera, CameraExtrinsics, CameraId, CameraIntrinsics, Rig, MIN_DEPTH};
use crate::io::{CalibrationFile, DetectionsFile, PoseFrame, SceneFile, TimelinesFile, VehicleRecord};
use crate::sync::{LightState, LightTimeline};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("could not place vehicle {vehicle} after {attempts} attempts")]
    PlacementFailure { vehicle: usize, attempts: usize },
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
}

pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RigSpec {
    pub camera_count: usize,
    /// Mounting height (m).
    pub height: f64,
    /// Horizontal distance from the intersection center (m).
    pub radius: f64,
    /// Elevation angles (deg) at which a camera still detects a vehicle.
    pub elevation_deg: (f64, f64),
    pub intrinsics: CameraIntrinsics,
    /// Camera azimuths (deg); evenly spaced from 45° when absent.
    pub azimuths_deg: Option<Vec<f64>>,
    /// Share of a vehicle's unclamped box that must fall inside the image.
    pub min_in_image: f64,
}

impl Default for RigSpec {
    fn default() -> Self {
        Self {
            camera_count: 4,
            height: 6.0,
            radius: 14.0,
            elevation_deg: (15.0, 50.0),
            intrinsics: CameraIntrinsics { fx: 1000.0, fy: 1000.0, cx: 960.0, cy: 540.0, width: 1920, height: 1080 },
            azimuths_deg: None,
            min_in_image: 0.5,
        }
    }
}

impl RigSpec {
    pub fn azimuths(&self) -> Vec<f64> {
        match &self.azimuths_deg {
            Some(a) => a.iter().map(|d| d.to_radians()).collect(),
            None => (0..self.camera_count).map(|k| PI / 4.0 + 2.0 * PI * k as f64 / self.camera_count as f64).collect(),
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        if !(self.height > 0.0 && self.radius > 0.0) {
            return Err(SimError::InvalidSpec("camera height and radius must be positive".into()));
        }
        if self.azimuths().is_empty() {
            return Err(SimError::InvalidSpec("at least one camera".into()));
        }
        let (lo, hi) = self.elevation_deg;
        if !(0.0 <= lo && lo < hi && hi < 90.0) {
            return Err(SimError::InvalidSpec("elevation range must satisfy 0 <= lo < hi < 90".into()));
        }
        self.intrinsics.validate().map_err(|e| SimError::InvalidSpec(e.to_string()))
    }
}

/// Cameras at `RigSpec` azimuths, ids from 0, all looking at the origin.
pub fn build_rig(spec: &RigSpec) -> Result<Rig, SimError> {
    spec.validate()?;
    let cameras = spec
        .azimuths()
        .iter()
        .enumerate()
        .map(|(k, a)| {
            let eye = Vector3::new(spec.radius * a.cos(), spec.radius * a.sin(), spec.height);
            let ext = CameraExtrinsics::look_at(&eye, &Vector3::zeros(), &Vector3::z());
            Camera::new(CameraId(k as u32), spec.intrinsics, ext)
        })
        .collect();
    Rig::new(cameras).map_err(|e| SimError::InvalidSpec(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub vehicle_count: usize,
    /// Initial footprint centers are uniform in a disc of this radius (m).
    pub region_radius: f64,
    /// Minimum footprint gap between vehicles, in every frame (m).
    pub min_separation: f64,
    pub length: (f64, f64),
    pub width: (f64, f64),
    pub height: (f64, f64),
    pub frame_count: usize,
    pub fps: f64,
    pub max_speed: f64,
    /// Turning vehicles draw |yaw rate| up to this (rad/s).
    pub max_yaw_rate: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            vehicle_count: 5,
            region_radius: 10.0,
            min_separation: 1.0,
            length: (3.5, 5.5),
            width: (1.6, 2.1),
            height: (1.4, 2.0),
            frame_count: 1,
            fps: 12.5,
            max_speed: 15.0,
            max_yaw_rate: 0.3,
            seed: 0,
        }
    }
}

/// When a camera counts a vehicle as seen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewRule {
    pub elevation_deg: (f64, f64),
    pub min_in_image: f64,
}

impl ViewRule {
    /// The pose's unclamped tight box when the camera sees it.
    pub fn tight_box(&self, camera: &Camera, pose: &Pose7DoF) -> Option<Box2D> {
        let c = camera.center();
        let dist = (c.xy() - Vector2::new(pose.x, pose.y)).norm();
        let elevation = c.z.atan2(dist).to_degrees();
        if elevation < self.elevation_deg.0 || elevation > self.elevation_deg.1 {
            return None;
        }
        if pose.corners().iter().any(|p| camera.depth(p) <= MIN_DEPTH) {
            return None;
        }
        let pts = project_corners(camera, pose).ok()?;
        let b = bounds(&pts);
        let inside = b.clamp_to_image(camera.intrinsics.width as f64, camera.intrinsics.height as f64);
        (inside.area() > 0.0 && inside.area() >= self.min_in_image * b.area()).then_some(b)
    }
}

fn bounds(pts: &[Vector2<f64>]) -> Box2D {
    let mut b = Box2D { x_min: f64::INFINITY, y_min: f64::INFINITY, x_max: f64::NEG_INFINITY, y_max: f64::NEG_INFINITY };
    for p in pts {
        b.x_min = b.x_min.min(p.x);
        b.y_min = b.y_min.min(p.y);
        b.x_max = b.x_max.max(p.x);
        b.y_max = b.y_max.max(p.y);
    }
    b
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub fps: f64,
    pub rig: Rig,
    pub view_rule: ViewRule,
    /// Ground truth, frames `0..frame_count`; `visibility` is the mean
    /// unoccluded share of the vehicle over the cameras that see it.
    pub frames: Vec<PoseFrame>,
}

impl Scene {
    pub fn frame(&self, frame: i64) -> Option<&PoseFrame> {
        self.frames.iter().find(|f| f.frame == frame)
    }
}

#[derive(Debug, Clone, Copy)]
struct Trajectory {
    start: Pose7DoF,
    speed: f64,
    yaw_rate: f64,
}

impl Trajectory {
    fn at(&self, t: f64) -> Pose7DoF {
        let (p, v, w) = (&self.start, self.speed, self.yaw_rate);
        let (dx, dy) = if w.abs() < 1e-12 {
            (v * t * p.yaw.cos(), v * t * p.yaw.sin())
        } else {
            let r = v / w;
            (r * ((p.yaw + w * t).sin() - p.yaw.sin()), r * (p.yaw.cos() - (p.yaw + w * t).cos()))
        };
        Pose7DoF { x: p.x + dx, y: p.y + dy, yaw: wrap_angle(p.yaw + w * t), ..*p }
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Samples vehicles one at a time by rejection: each must stay visible
/// from at least two cameras and clear of earlier vehicles in every frame.
pub fn generate_scene(rig_spec: &RigSpec, spec: &SceneSpec) -> Result<Scene, SimError> {
    let rig = build_rig(rig_spec)?;
    if !(spec.fps > 0.0 && spec.region_radius > 0.0 && spec.min_separation >= 0.0) {
        return Err(SimError::InvalidSpec("fps and region radius must be positive".into()));
    }
    let rule = ViewRule { elevation_deg: rig_spec.elevation_deg, min_in_image: rig_spec.min_in_image };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let times: Vec<f64> = (0..spec.frame_count).map(|k| k as f64 / spec.fps).collect();
    let mut placed: Vec<Vec<Pose7DoF>> = Vec::new();

    for vehicle in 0..spec.vehicle_count {
        let mut attempts = 0;
        let path = loop {
            if attempts == MAX_PLACEMENT_ATTEMPTS {
                return Err(SimError::PlacementFailure { vehicle, attempts });
            }
            attempts += 1;
            let r = spec.region_radius * rng.random::<f64>().sqrt();
            let phi = rng.random_range(-PI..PI);
            let h = uniform(&mut rng, spec.height);
            let start = Pose7DoF {
                x: r * phi.cos(),
                y: r * phi.sin(),
                z: h / 2.0,
                l: uniform(&mut rng, spec.length),
                w: uniform(&mut rng, spec.width),
                h,
                yaw: wrap_angle(rng.random_range(-PI..PI)),
            };
            let speed = uniform(&mut rng, (0.0, spec.max_speed));
            let yaw_rate = if rng.random_bool(0.5) { uniform(&mut rng, (-spec.max_yaw_rate, spec.max_yaw_rate)) } else { 0.0 };
            let traj = Trajectory { start, speed, yaw_rate };
            let path: Vec<Pose7DoF> = times.iter().map(|&t| traj.at(t)).collect();
            let ok = path.iter().enumerate().all(|(k, pose)| {
                let views = rig.cameras.iter().filter(|c| rule.tight_box(c, pose).is_some()).count();
                let fp = pose.footprint().corners();
                views >= 2
                    && placed.iter().all(|other| {
                        let of = other[k].footprint().corners();
                        polygon::intersection_area(&fp, &of) <= 0.0 && polygon::distance(&fp, &of) >= spec.min_separation
                    })
            });
            if ok {
                break path;
            }
        };
        placed.push(path);
    }

    let mut frames = Vec::with_capacity(times.len());
    for k in 0..times.len() {
        let poses: Vec<Pose7DoF> = placed.iter().map(|p| p[k]).collect();
        let mut vis_sum = vec![0.0; poses.len()];
        let mut vis_n = vec![0usize; poses.len()];
        for cam in &rig.cameras {
            for (i, v) in occlusion(cam, &poses, &rule).into_iter().enumerate() {
                if let Some(v) = v {
                    vis_sum[i] += v.fraction;
                    vis_n[i] += 1;
                }
            }
        }
        let vehicles = poses
            .iter()
            .enumerate()
            .map(|(i, p)| VehicleRecord {
                id: i as u32,
                pose: *p,
                visibility: Some(if vis_n[i] > 0 { vis_sum[i] / vis_n[i] as f64 } else { 0.0 }),
                score: None,
            })
            .collect();
        frames.push(PoseFrame { frame: k as i64, vehicles });
    }
    Ok(Scene { seed: spec.seed, fps: spec.fps, rig, view_rule: rule, frames })
}

/// What is left of a vehicle in one camera after nearer vehicles are drawn
/// over it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VisibleBox {
    /// Clamped tight box before occlusion.
    pub full: Box2D,
    /// Bounds of the unoccluded part.
    pub visible: Box2D,
    pub fraction: f64,
}

/// Raster step (px) of the occlusion test.
pub const OCCLUSION_STRIDE: f64 = 4.0;

/// Painter's-algorithm occlusion: each vehicle's silhouette (hull of its
/// projected corners) is sampled on a grid, and samples covered by the
/// silhouette of a nearer vehicle are hidden.
pub fn occlusion(camera: &Camera, poses: &[Pose7DoF], rule: &ViewRule) -> Vec<Option<VisibleBox>> {
    let (w, h) = (camera.intrinsics.width as f64, camera.intrinsics.height as f64);
    let hulls: Vec<Option<Vec<Vector2<f64>>>> = poses.iter().map(|p| project_corners(camera, p).ok().map(|c| polygon::convex_hull(&c))).collect();
    let depths: Vec<f64> = poses.iter().map(|p| camera.depth(&p.center())).collect();

    poses
        .iter()
        .enumerate()
        .map(|(i, pose)| {
            let full = rule.tight_box(camera, pose)?.clamp_to_image(w, h);
            let own = hulls[i].as_ref()?;
            let occluders: Vec<&Vec<Vector2<f64>>> = (0..poses.len())
                .filter(|&j| j != i && depths[j] < depths[i])
                .filter_map(|j| hulls[j].as_ref())
                .filter(|hull| {
                    let b = bounds(hull);
                    b.x_max > full.x_min && b.x_min < full.x_max && b.y_max > full.y_min && b.y_min < full.y_max
                })
                .collect();
            if occluders.is_empty() {
                return Some(VisibleBox { full, visible: full, fraction: 1.0 });
            }
            let nx = (full.width() / OCCLUSION_STRIDE).ceil().max(1.0) as usize;
            let ny = (full.height() / OCCLUSION_STRIDE).ceil().max(1.0) as usize;
            let (sx, sy) = (full.width() / nx as f64, full.height() / ny as f64);
            let (mut total, mut seen) = (0usize, 0usize);
            let mut vis = Box2D { x_min: f64::INFINITY, y_min: f64::INFINITY, x_max: f64::NEG_INFINITY, y_max: f64::NEG_INFINITY };
            for a in 0..nx {
                for b in 0..ny {
                    let p = Vector2::new(full.x_min + (a as f64 + 0.5) * sx, full.y_min + (b as f64 + 0.5) * sy);
                    if !polygon::contains(own, &p) {
                        continue;
                    }
                    total += 1;
                    if occluders.iter().any(|o| polygon::contains(o, &p)) {
                        continue;
                    }
                    seen += 1;
                    vis.x_min = vis.x_min.min(p.x - sx / 2.0);
                    vis.y_min = vis.y_min.min(p.y - sy / 2.0);
                    vis.x_max = vis.x_max.max(p.x + sx / 2.0);
                    vis.y_max = vis.y_max.max(p.y + sy / 2.0);
                }
            }
            if total == 0 || seen == total {
                return Some(VisibleBox { full, visible: full, fraction: 1.0 });
            }
            let fraction = seen as f64 / total as f64;
            let visible = if seen == 0 {
                Box2D { x_min: full.x_min, y_min: full.y_min, x_max: full.x_min, y_max: full.y_min }
            } else {
                Box2D { x_min: vis.x_min.max(full.x_min), y_min: vis.y_min.max(full.y_min), x_max: vis.x_max.min(full.x_max), y_max: vis.y_max.min(full.y_max) }
            };
            Some(VisibleBox { full, visible, fraction })
        })
        .collect()
}

/// Traffic-light cycle durations (s).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LightCycle {
    pub green: f64,
    pub yellow: f64,
    pub red: f64,
}

impl Default for LightCycle {
    fn default() -> Self {
        Self { green: 30.0, yellow: 3.0, red: 27.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    pub seed: u64,
    /// Gaussian σ (px) added to each box edge.
    pub pixel_sigma: f64,
    pub drop_probability: f64,
    pub occlusion: bool,
    /// Occluded detections below this visible share are not reported.
    pub min_visible: f64,
    /// Camera frame counter minus true frame; missing cameras are 0.
    pub frame_offsets: BTreeMap<CameraId, i64>,
    /// Each light change is observed up to this many frames early or late.
    pub light_jitter: i64,
    pub light_cycle: LightCycle,
    /// Length of the recorded light timelines (s).
    pub timeline_seconds: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            pixel_sigma: 0.0,
            drop_probability: 0.0,
            occlusion: false,
            min_visible: 0.2,
            frame_offsets: BTreeMap::new(),
            light_jitter: 0,
            light_cycle: LightCycle::default(),
            timeline_seconds: 900.0,
        }
    }
}

impl NoiseSpec {
    fn validate(&self) -> Result<(), SimError> {
        if !(self.pixel_sigma >= 0.0) {
            return Err(SimError::InvalidSpec("pixel sigma must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.drop_probability) || !(0.0..=1.0).contains(&self.min_visible) {
            return Err(SimError::InvalidSpec("probabilities must lie in [0, 1]".into()));
        }
        if self.light_jitter < 0 {
            return Err(SimError::InvalidSpec("light jitter must be non-negative".into()));
        }
        let c = &self.light_cycle;
        if !(c.green > 0.0 && c.yellow > 0.0 && c.red > 0.0) {
            return Err(SimError::InvalidSpec("light phases must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    /// Frame fields hold each camera's own frame counter.
    pub detections: Vec<Detection2D>,
    pub timelines: Vec<LightTimeline>,
    pub frame_offsets: BTreeMap<CameraId, i64>,
}

impl Rendered {
    /// Detections of one true frame with offsets removed.
    pub fn detections_at(&self, frame: i64) -> Vec<Detection2D> {
        self.detections
            .iter()
            .filter(|d| d.frame - self.frame_offsets.get(&d.camera_id).copied().unwrap_or(0) == frame)
            .map(|d| Detection2D { frame, ..d.clone() })
            .collect()
    }
}

fn class_of(pose: &Pose7DoF) -> &'static str {
    if pose.l >= 5.2 {
        "truck"
    } else {
        "car"
    }
}

pub fn render_detections(scene: &Scene, noise: &NoiseSpec) -> Result<Rendered, SimError> {
    noise.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let normal = Normal::new(0.0, noise.pixel_sigma.max(0.0)).map_err(|e| SimError::InvalidSpec(e.to_string()))?;
    let offset_of = |c: CameraId| noise.frame_offsets.get(&c).copied().unwrap_or(0);
    let mut detections = Vec::new();

    for frame in &scene.frames {
        let poses: Vec<Pose7DoF> = frame.vehicles.iter().map(|v| v.pose).collect();
        for cam in &scene.rig.cameras {
            let (w, h) = (cam.intrinsics.width as f64, cam.intrinsics.height as f64);
            let seen: Vec<Option<VisibleBox>> = if noise.occlusion {
                occlusion(cam, &poses, &scene.view_rule)
            } else {
                poses
                    .iter()
                    .map(|p| {
                        scene.view_rule.tight_box(cam, p).map(|b| {
                            let full = b.clamp_to_image(w, h);
                            VisibleBox { full, visible: full, fraction: 1.0 }
                        })
                    })
                    .collect()
            };
            for (vehicle, vb) in frame.vehicles.iter().zip(seen) {
                let Some(vb) = vb else { continue };
                if vb.fraction < noise.min_visible {
                    continue;
                }
                if noise.drop_probability > 0.0 && rng.random_bool(noise.drop_probability) {
                    continue;
                }
                let mut e = vb.visible.to_array();
                if noise.pixel_sigma > 0.0 {
                    e.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
                }
                let b = Box2D { x_min: e[0].min(e[2]), y_min: e[1].min(e[3]), x_max: e[0].max(e[2]), y_max: e[1].max(e[3]) }.clamp_to_image(w, h);
                if b.area() <= 0.0 {
                    continue;
                }
                detections.push(Detection2D {
                    camera_id: cam.id,
                    frame: frame.frame + offset_of(cam.id),
                    bbox: b,
                    score: 0.6 + 0.4 * vb.fraction,
                    class: class_of(&vehicle.pose).to_string(),
                    gt_id: Some(vehicle.id),
                });
            }
        }
    }

    let timelines = light_timelines(scene, noise, &mut rng);
    let frame_offsets = scene.rig.ids().map(|c| (c, offset_of(c))).collect();
    Ok(Rendered { detections, timelines, frame_offsets })
}

/// One shared light seen by every camera: change points in each camera's
/// own frame counter, each shifted by up to `light_jitter` frames.
fn light_timelines(scene: &Scene, noise: &NoiseSpec, rng: &mut ChaCha8Rng) -> Vec<LightTimeline> {
    let c = noise.light_cycle;
    let period = c.green + c.yellow + c.red;
    let phase = rng.random_range(0.0..period);
    let n_frames = (noise.timeline_seconds * scene.fps).round() as i64;
    // Changes in true time; cycle position 0 is the start of green.
    let mut changes: Vec<(f64, LightState)> = Vec::new();
    let mut start = -phase;
    while start < noise.timeline_seconds + period {
        changes.push((start, LightState::Green));
        changes.push((start + c.green, LightState::Yellow));
        changes.push((start + c.green + c.yellow, LightState::Red));
        start += period;
    }
    scene
        .rig
        .ids()
        .map(|cam| {
            let offset = noise.frame_offsets.get(&cam).copied().unwrap_or(0);
            let mut states: Vec<(i64, LightState)> = Vec::new();
            let mut initial = LightState::Red;
            for &(t, s) in &changes {
                let jitter = if noise.light_jitter > 0 { rng.random_range(-noise.light_jitter..=noise.light_jitter) } else { 0 };
                let f = (t * scene.fps).round() as i64 + offset + jitter;
                if f <= 0 {
                    initial = s;
                } else if f < n_frames {
                    states.push((f, s));
                }
            }
            states.insert(0, (0, initial));
            states.dedup_by(|b, a| a.1 == b.1);
            LightTimeline { camera_id: cam, states }
        })
        .collect()
}

/// Annotations grouped by ground-truth id rather than by association: one
/// per vehicle with a detection in `frame`, centered on the true footprint.
pub fn oracle_annotations(scene: &Scene, rendered: &Rendered, frame: i64) -> Vec<MultiViewAnnotation> {
    let Some(gt) = scene.frame(frame) else { return Vec::new() };
    let dets = rendered.detections_at(frame);
    gt.vehicles
        .iter()
        .filter_map(|v| {
            let members: BTreeMap<CameraId, Detection2D> = dets.iter().filter(|d| d.gt_id == Some(v.id)).map(|d| (d.camera_id, d.clone())).collect();
            (!members.is_empty()).then_some(MultiViewAnnotation {
                id: v.id as usize,
                frame,
                single_view: members.len() < 2,
                members,
                centroid: [v.pose.x, v.pose.y],
            })
        })
        .collect()
}

/// Uniform perturbation: a horizontal shift up to `max_translation` m in a
/// random direction, a yaw change up to `max_yaw` rad either way, and each
/// dimension scaled by up to `dim_fraction` either way.
pub fn perturb_pose<R: Rng>(pose: &Pose7DoF, rng: &mut R, max_translation: f64, max_yaw: f64, dim_fraction: f64) -> Pose7DoF {
    let dir = rng.random_range(-PI..PI);
    let dist = rng.random_range(0.0..=max_translation);
    let dyaw = if max_yaw > 0.0 { rng.random_range(-max_yaw..=max_yaw) } else { 0.0 };
    let mut scale = || if dim_fraction > 0.0 { 1.0 + rng.random_range(-dim_fraction..=dim_fraction) } else { 1.0 };
    let (sl, sw, sh) = (scale(), scale(), scale());
    Pose7DoF {
        x: pose.x + dist * dir.cos(),
        y: pose.y + dist * dir.sin(),
        z: pose.z * sh,
        l: pose.l * sl,
        w: pose.w * sw,
        h: pose.h * sh,
        yaw: wrap_angle(pose.yaw + dyaw),
    }
}

/// Bundles a scene and its rendering into the shared scene file.
pub fn scene_file(scene: &Scene, rendered: &Rendered) -> SceneFile {
    SceneFile {
        seed: scene.seed,
        fps: scene.fps,
        cameras: CalibrationFile::from_rig(&scene.rig, true).cameras,
        ground_truth: scene.frames.clone(),
        detections: DetectionsFile::from_detections(&rendered.detections).frames,
        timelines: TimelinesFile { fps: scene.fps, cameras: rendered.timelines.clone() },
        frame_offsets: rendered.frame_offsets.clone(),
    }
}
