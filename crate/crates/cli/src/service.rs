//! HTTP backend for the labelling tool.
//!
//! Data directory layout:
//!
//! ```text
//! calib.json | scene.json        one of the two is required
//! detections.json                optional, overrides the scene's detections
//! images/{frame}/{camera}.png    also .jpg / .jpeg
//! annotations/{frame}.json       written by PUT
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use log::info;
use mvgeo::box3d::{project_corners, BoxError};
use mvgeo::io::{CalibrationFile, DetectionsFile, PoseFrame, SceneFile};
use mvgeo::sync::{apply_offsets, FrameOffsetMap};
use mvgeo::{project_to_box2d, Box2D, CameraId, Detection2D, Pose7DoF, Rig};
use nalgebra::Vector2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{input, internal, CliError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Visibility {
    Full,
    Partial,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub frame: i64,
    pub vehicle_id: u32,
    pub pose: Pose7DoF,
    /// Must name every rig camera and nothing else.
    pub visibility: BTreeMap<CameraId, Visibility>,
    #[serde(default)]
    pub note: String,
    /// Client-supplied; stored verbatim.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
}

/// Contents of `annotations/{frame}.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameAnnotationsDoc {
    pub frame: i64,
    /// 0 until the first PUT, then +1 per accepted PUT.
    pub revision: u64,
    pub records: Vec<AnnotationRecord>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PutBody {
    pub records: Vec<AnnotationRecord>,
    /// When set, the PUT is rejected with 409 unless it equals the stored revision.
    #[serde(default)]
    pub expected_revision: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CameraProjection {
    pub camera_id: CameraId,
    pub behind_camera: bool,
    pub corners: Option<[[f64; 2]; 8]>,
    /// Clamped to the image; absent when behind the camera or fully outside.
    #[serde(rename = "box")]
    pub bbox: Option<Box2D>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ProjectionResponse {
    pub cameras: Vec<CameraProjection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CastRequest {
    camera_id: CameraId,
    pixel: [f64; 2],
    /// Plane height in metres; the ground by default.
    #[serde(default)]
    height: f64,
}

#[derive(Debug, Serialize)]
struct FrameEntry {
    frame: i64,
    detections: usize,
    images: Vec<CameraId>,
    has_ground_truth: bool,
}

#[derive(Debug, Serialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

pub enum ApiError {
    NotFound(String),
    Conflict(String),
    Invalid(Vec<FieldError>),
    Internal(String),
}

impl ApiError {
    fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        ApiError::Invalid(vec![FieldError { field: field.into(), message: message.into() }])
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, body) = match self {
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, serde_json::json!({ "error": m })),
            ApiError::Conflict(m) => (StatusCode::CONFLICT, serde_json::json!({ "error": m })),
            ApiError::Invalid(errors) => (StatusCode::UNPROCESSABLE_ENTITY, serde_json::json!({ "errors": errors })),
            ApiError::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, serde_json::json!({ "error": m })),
        };
        (status, [(header::CONTENT_TYPE, "application/json")], body.to_string()).into_response()
    }
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    annotations_dir: PathBuf,
    rig: Rig,
    calib_json: String,
    detections: BTreeMap<i64, Vec<Detection2D>>,
    ground_truth: BTreeMap<i64, PoseFrame>,
    images: BTreeMap<(i64, CameraId), PathBuf>,
    frames: BTreeSet<i64>,
    locks: Mutex<HashMap<i64, Arc<tokio::sync::Mutex<()>>>>,
}

fn read_file<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn image_type(path: &Path) -> Option<&'static str> {
    match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
        "png" => Some("image/png"),
        "jpg" | "jpeg" => Some("image/jpeg"),
        _ => None,
    }
}

impl AppState {
    pub fn load(data_dir: &Path) -> Result<Self, CliError> {
        let calib_path = data_dir.join("calib.json");
        let scene_path = data_dir.join("scene.json");
        let (rig, scene) = if calib_path.is_file() {
            (read_file::<CalibrationFile>(&calib_path)?.to_rig().map_err(input)?, None)
        } else if scene_path.is_file() {
            let scene: SceneFile = read_file(&scene_path)?;
            (scene.rig().map_err(input)?, Some(scene))
        } else {
            return Err(CliError::Input(format!("{} has neither calib.json nor scene.json", data_dir.display())));
        };

        let det_path = data_dir.join("detections.json");
        let detections = if det_path.is_file() {
            read_file::<DetectionsFile>(&det_path)?.flatten()
        } else if let Some(s) = &scene {
            // Scene detections carry raw camera frames; index them like the reference camera.
            let map = FrameOffsetMap {
                reference: rig.cameras[0].id,
                offsets: rig.ids().map(|c| (c, s.frame_offsets.get(&c).copied().unwrap_or(0))).collect(),
                residuals: BTreeMap::new(),
            };
            DetectionsFile { frames: s.detections.clone() }
                .flatten()
                .into_iter()
                .filter_map(|d| apply_offsets(d.frame, &map, d.camera_id).map(|frame| Detection2D { frame, ..d }))
                .collect()
        } else {
            Vec::new()
        };
        let mut by_frame: BTreeMap<i64, Vec<Detection2D>> = BTreeMap::new();
        for d in detections {
            by_frame.entry(d.frame).or_default().push(d);
        }

        let ground_truth: BTreeMap<i64, PoseFrame> = scene.map(|s| s.ground_truth.into_iter().map(|f| (f.frame, f)).collect()).unwrap_or_default();

        let mut images = BTreeMap::new();
        if let Ok(entries) = std::fs::read_dir(data_dir.join("images")) {
            for frame_dir in entries.flatten() {
                let Some(frame) = frame_dir.file_name().to_str().and_then(|s| s.parse::<i64>().ok()) else { continue };
                for file in std::fs::read_dir(frame_dir.path()).map_err(input)?.flatten() {
                    let path = file.path();
                    let cam = path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse::<u32>().ok());
                    if let (Some(cam), Some(_)) = (cam, image_type(&path)) {
                        if rig.get(CameraId(cam)).is_some() {
                            images.insert((frame, CameraId(cam)), path);
                        }
                    }
                }
            }
        }

        let annotations_dir = data_dir.join("annotations");
        let mut frames: BTreeSet<i64> = by_frame.keys().chain(ground_truth.keys()).copied().collect();
        frames.extend(images.keys().map(|(f, _)| *f));
        if let Ok(entries) = std::fs::read_dir(&annotations_dir) {
            for e in entries.flatten() {
                let path = e.path();
                if path.extension().is_some_and(|x| x == "json") {
                    if let Some(f) = path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse::<i64>().ok()) {
                        frames.insert(f);
                    }
                }
            }
        }

        let calib_json = serde_json::to_string(&CalibrationFile::from_rig(&rig, false)).map_err(internal)?;
        info!("{} cameras, {} frames, {} images", rig.len(), frames.len(), images.len());
        Ok(Self {
            inner: Arc::new(Inner { annotations_dir, rig, calib_json, detections: by_frame, ground_truth, images, frames, locks: Mutex::new(HashMap::new()) }),
        })
    }

    fn known_frame(&self, frame: i64) -> Result<(), ApiError> {
        if self.inner.frames.contains(&frame) {
            Ok(())
        } else {
            Err(ApiError::NotFound(format!("unknown frame {frame}")))
        }
    }

    fn frame_lock(&self, frame: i64) -> Arc<tokio::sync::Mutex<()>> {
        self.inner.locks.lock().unwrap_or_else(|e| e.into_inner()).entry(frame).or_default().clone()
    }

    fn annotation_path(&self, frame: i64) -> PathBuf {
        self.inner.annotations_dir.join(format!("{frame}.json"))
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/calib", get(get_calib))
        .route("/frames", get(get_frames))
        .route("/frames/{frame}/images/{camera}", get(get_image))
        .route("/frames/{frame}/detections", get(get_detections))
        .route("/frames/{frame}/annotations", get(get_annotations).put(put_annotations))
        .route("/project", post(post_project))
        .route("/cast", post(post_cast))
        .with_state(state)
}

pub async fn serve(state: AppState, addr: SocketAddr) -> Result<(), CliError> {
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| CliError::Input(format!("cannot bind {addr}: {e}")))?;
    info!("listening on {addr}");
    axum::serve(listener, router(state)).await.map_err(internal)
}

fn json_response(body: String) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], body).into_response()
}

fn to_json<T: Serialize>(value: &T) -> Result<Response, ApiError> {
    serde_json::to_string(value).map(json_response).map_err(|e| ApiError::Internal(e.to_string()))
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::invalid("body", e.to_string()))
}

fn pose_errors(prefix: &str, pose: &Pose7DoF) -> Vec<FieldError> {
    pose.field_errors().into_iter().map(|e| FieldError { field: format!("{prefix}{}", e.field), message: e.message }).collect()
}

async fn get_calib(State(s): State<AppState>) -> Response {
    json_response(s.inner.calib_json.clone())
}

async fn get_frames(State(s): State<AppState>) -> Result<Response, ApiError> {
    let entries: Vec<FrameEntry> = s
        .inner
        .frames
        .iter()
        .map(|&frame| FrameEntry {
            frame,
            detections: s.inner.detections.get(&frame).map_or(0, Vec::len),
            images: s.inner.images.range((frame, CameraId(0))..=(frame, CameraId(u32::MAX))).map(|((_, c), _)| *c).collect(),
            has_ground_truth: s.inner.ground_truth.contains_key(&frame),
        })
        .collect();
    to_json(&serde_json::json!({ "frames": entries }))
}

async fn get_image(State(s): State<AppState>, UrlPath((frame, camera)): UrlPath<(i64, u32)>) -> Result<Response, ApiError> {
    s.known_frame(frame)?;
    if s.inner.rig.get(CameraId(camera)).is_none() {
        return Err(ApiError::NotFound(format!("unknown camera {camera}")));
    }
    let path = s.inner.images.get(&(frame, CameraId(camera))).ok_or_else(|| ApiError::NotFound(format!("no image for frame {frame} camera {camera}")))?;
    let bytes = tokio::fs::read(path).await.map_err(|e| ApiError::Internal(e.to_string()))?;
    let ty = image_type(path).unwrap_or("application/octet-stream");
    Ok(([(header::CONTENT_TYPE, ty)], bytes).into_response())
}

async fn get_detections(State(s): State<AppState>, UrlPath(frame): UrlPath<i64>) -> Result<Response, ApiError> {
    s.known_frame(frame)?;
    let dets = s.inner.detections.get(&frame).cloned().unwrap_or_default();
    to_json(&serde_json::json!({ "frame": frame, "detections": dets }))
}

/// Reprojection of `pose` into every rig camera.
pub fn project(rig: &Rig, pose: &Pose7DoF) -> ProjectionResponse {
    let cameras = rig
        .cameras
        .iter()
        .map(|cam| match project_corners(cam, pose) {
            Ok(pts) => CameraProjection {
                camera_id: cam.id,
                behind_camera: false,
                corners: Some(pts.map(|p: Vector2<f64>| [p.x, p.y])),
                bbox: project_to_box2d(cam, pose, true).ok(),
            },
            Err(BoxError::BehindCamera) | Err(_) => CameraProjection { camera_id: cam.id, behind_camera: true, corners: None, bbox: None },
        })
        .collect();
    ProjectionResponse { cameras }
}

async fn post_project(State(s): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let pose: Pose7DoF = parse_body(&body)?;
    let errors = pose_errors("", &pose);
    if !errors.is_empty() {
        return Err(ApiError::Invalid(errors));
    }
    to_json(&project(&s.inner.rig, &pose))
}

async fn post_cast(State(s): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let req: CastRequest = parse_body(&body)?;
    let cam = s.inner.rig.get(req.camera_id).ok_or_else(|| ApiError::NotFound(format!("unknown camera {}", req.camera_id)))?;
    if !req.pixel.iter().all(|v| v.is_finite()) || !req.height.is_finite() {
        return Err(ApiError::invalid("pixel", "pixel and height must be finite"));
    }
    let p = cam.cast_ray_to_plane(&Vector2::new(req.pixel[0], req.pixel[1]), req.height).map_err(|e| ApiError::invalid("pixel", e.to_string()))?;
    to_json(&serde_json::json!({ "point": [p.x, p.y, p.z] }))
}

fn empty_doc(frame: i64) -> FrameAnnotationsDoc {
    FrameAnnotationsDoc { frame, revision: 0, records: Vec::new() }
}

/// Stored documents keep full precision so a GET returns exactly what was PUT.
fn doc_text(doc: &FrameAnnotationsDoc) -> Result<String, ApiError> {
    let mut s = serde_json::to_string_pretty(doc).map_err(|e| ApiError::Internal(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn read_doc_text(s: &AppState, frame: i64) -> Result<Option<String>, ApiError> {
    match std::fs::read_to_string(s.annotation_path(frame)) {
        Ok(t) => Ok(Some(t)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(ApiError::Internal(e.to_string())),
    }
}

async fn get_annotations(State(s): State<AppState>, UrlPath(frame): UrlPath<i64>) -> Result<Response, ApiError> {
    s.known_frame(frame)?;
    match read_doc_text(&s, frame)? {
        Some(text) => Ok(json_response(text)),
        None => Ok(json_response(doc_text(&empty_doc(frame))?)),
    }
}

fn validate_records(rig: &Rig, frame: i64, records: &[AnnotationRecord]) -> Vec<FieldError> {
    let cameras: BTreeSet<CameraId> = rig.ids().collect();
    let mut errors = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, r) in records.iter().enumerate() {
        let at = |f: &str| format!("records[{i}].{f}");
        if r.frame != frame {
            errors.push(FieldError { field: at("frame"), message: format!("frame must be {frame}") });
        }
        if !seen.insert(r.vehicle_id) {
            errors.push(FieldError { field: at("vehicle_id"), message: format!("vehicle {} appears twice", r.vehicle_id) });
        }
        errors.extend(pose_errors(&at("pose."), &r.pose));
        let given: BTreeSet<CameraId> = r.visibility.keys().copied().collect();
        for c in cameras.difference(&given) {
            errors.push(FieldError { field: at("visibility"), message: format!("missing camera {c}") });
        }
        for c in given.difference(&cameras) {
            errors.push(FieldError { field: at("visibility"), message: format!("unknown camera {c}") });
        }
    }
    errors
}

fn write_atomically(dir: &Path, path: &Path, text: &str) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(text.as_bytes())?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

async fn put_annotations(State(s): State<AppState>, UrlPath(frame): UrlPath<i64>, body: Bytes) -> Result<Response, ApiError> {
    s.known_frame(frame)?;
    let body: PutBody = parse_body(&body)?;
    let errors = validate_records(&s.inner.rig, frame, &body.records);
    if !errors.is_empty() {
        return Err(ApiError::Invalid(errors));
    }

    let lock = s.frame_lock(frame);
    let _guard = lock.lock().await;
    let current = match read_doc_text(&s, frame)? {
        Some(t) => serde_json::from_str(&t).map_err(|e| ApiError::Internal(format!("stored annotations for frame {frame}: {e}")))?,
        None => empty_doc(frame),
    };
    if let Some(expected) = body.expected_revision {
        if expected != current.revision {
            return Err(ApiError::Conflict(format!("revision is {}, expected {expected}", current.revision)));
        }
    }
    let mut merged: BTreeMap<u32, AnnotationRecord> = current.records.into_iter().map(|r| (r.vehicle_id, r)).collect();
    for r in body.records {
        merged.insert(r.vehicle_id, r);
    }
    let doc = FrameAnnotationsDoc { frame, revision: current.revision + 1, records: merged.into_values().collect() };
    let text = doc_text(&doc)?;
    write_atomically(&s.inner.annotations_dir, &s.annotation_path(frame), &text).map_err(|e| ApiError::Internal(e.to_string()))?;
    Ok(json_response(text))
}
