//! JSON file formats shared by the CLI and the annotation service.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::association::{Detection2D, FrameAnnotations};
use crate::box3d::Pose7DoF;
use crate::camera::{Camera, CameraError, CameraExtrinsics, CameraId, CameraIntrinsics, Rig};
use crate::sync::LightTimeline;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub id: CameraId,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// Row-major world-to-camera rotation.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub homography: Option<[f64; 9]>,
}

impl CameraRecord {
    pub fn from_camera(camera: &Camera, with_homography: bool) -> Self {
        let r = &camera.extrinsics.rotation;
        let i = &camera.intrinsics;
        let homography = if with_homography {
            camera.ground_homography().ok().map(|h| {
                let m = h.matrix();
                std::array::from_fn(|k| m[(k / 3, k % 3)])
            })
        } else {
            None
        };
        Self {
            id: camera.id,
            fx: i.fx,
            fy: i.fy,
            cx: i.cx,
            cy: i.cy,
            width: i.width,
            height: i.height,
            rotation: std::array::from_fn(|k| r[(k / 3, k % 3)]),
            translation: camera.extrinsics.translation.into(),
            homography,
        }
    }

    pub fn to_camera(&self) -> Result<Camera, IoError> {
        let intrinsics = CameraIntrinsics::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height)?;
        let extrinsics = CameraExtrinsics::new(Matrix3::from_row_slice(&self.rotation), Vector3::from(self.translation))?;
        Ok(Camera::new(self.id, intrinsics, extrinsics))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub cameras: Vec<CameraRecord>,
}

impl CalibrationFile {
    pub fn from_rig(rig: &Rig, with_homography: bool) -> Self {
        Self { cameras: rig.cameras.iter().map(|c| CameraRecord::from_camera(c, with_homography)).collect() }
    }

    pub fn to_rig(&self) -> Result<Rig, IoError> {
        let cameras = self.cameras.iter().map(CameraRecord::to_camera).collect::<Result<Vec<_>, _>>()?;
        Ok(Rig::new(cameras)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleRecord {
    pub id: u32,
    #[serde(flatten)]
    pub pose: Pose7DoF,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visibility: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseFrame {
    pub frame: i64,
    pub vehicles: Vec<VehicleRecord>,
}

/// Accepts a single `{frame, vehicles}` object or an array of them.
pub fn parse_pose_frames(text: &str) -> Result<Vec<PoseFrame>, IoError> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        Many(Vec<PoseFrame>),
        One(PoseFrame),
    }
    let frames = match serde_json::from_str(text)? {
        OneOrMany::Many(v) => v,
        OneOrMany::One(f) => vec![f],
    };
    for f in &frames {
        for v in &f.vehicles {
            v.pose.validate().map_err(|e| IoError::Invalid(format!("frame {} vehicle {}: {e}", f.frame, v.id)))?;
        }
    }
    Ok(frames)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionFrame {
    pub frame: i64,
    pub detections: Vec<Detection2D>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionsFile {
    pub frames: Vec<DetectionFrame>,
}

impl DetectionsFile {
    /// Groups detections by their `frame` field, in frame order.
    pub fn from_detections(detections: &[Detection2D]) -> Self {
        let mut by_frame: BTreeMap<i64, Vec<Detection2D>> = BTreeMap::new();
        for d in detections {
            by_frame.entry(d.frame).or_default().push(d.clone());
        }
        Self { frames: by_frame.into_iter().map(|(frame, detections)| DetectionFrame { frame, detections }).collect() }
    }

    /// All detections with `frame` set from their enclosing frame.
    pub fn flatten(&self) -> Vec<Detection2D> {
        self.frames.iter().flat_map(|f| f.detections.iter().map(move |d| Detection2D { frame: f.frame, ..d.clone() })).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelinesFile {
    pub fps: f64,
    pub cameras: Vec<LightTimeline>,
}

/// Output of association over a detections file, one entry per frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationsFile {
    pub frames: Vec<FrameAnnotations>,
}

/// Everything one simulated recording produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub seed: u64,
    pub fps: f64,
    pub cameras: Vec<CameraRecord>,
    pub ground_truth: Vec<PoseFrame>,
    /// Detections indexed by each camera's own (unsynchronized) frame counter.
    pub detections: Vec<DetectionFrame>,
    pub timelines: TimelinesFile,
    /// Injected offsets, camera frame minus true frame.
    #[serde(default)]
    pub frame_offsets: BTreeMap<CameraId, i64>,
}

impl SceneFile {
    pub fn rig(&self) -> Result<Rig, IoError> {
        CalibrationFile { cameras: self.cameras.clone() }.to_rig()
    }
}

/// Significant digits kept for floating-point numbers in written JSON.
pub const SIGNIFICANT_DIGITS: usize = 9;

fn round_significant(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{:.*e}", SIGNIFICANT_DIGITS - 1, x).parse().unwrap_or(x)
}

fn round_value(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            if let Some(r) = n.as_f64().map(round_significant).and_then(serde_json::Number::from_f64) {
                *n = r;
            }
        }
        Value::Array(items) => items.iter_mut().for_each(round_value),
        Value::Object(map) => map.values_mut().for_each(round_value),
        _ => {}
    }
}

/// Pretty JSON with floats rounded to [`SIGNIFICANT_DIGITS`].
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String, IoError> {
    let mut v = serde_json::to_value(value)?;
    round_value(&mut v);
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}
