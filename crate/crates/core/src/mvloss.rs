//! Multi-view reprojection loss.
//!
//! A pose predicted from one camera is projected into every other camera
//! of its matched annotation; the tight 2D box there is compared with that
//! camera's detection using GIoU. The loss for one image is
//!
//! ```text
//! L = (1/n) Σ (1 − GIoU_i) + L_focal
//! ```
//!
//! where the focal term compares predicted object centers with detected
//! ones on the predicting camera's heatmap grid.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::association::{Detection2D, MultiViewAnnotation};
use crate::box3d::{giou_2d, project_corners, wrap_angle, Box2D, BoxError, Pose7DoF};
use crate::camera::{Camera, CameraId, Rig};

/// Clamp applied to heatmap values inside logarithms.
pub const HEATMAP_EPS: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("heatmap dimensions differ: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),
    #[error("no view can score this pose")]
    NoUsableViews,
    #[error("loss is not differentiable here (parameter {param})")]
    NonDifferentiablePoint { param: &'static str },
    #[error("unknown camera {0}")]
    UnknownCamera(CameraId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub stride: u32,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn zeros(width: usize, height: usize, stride: u32) -> Self {
        Self { width, height, stride, values: vec![0.0; width * height] }
    }

    /// Heatmap grid covering an image at the given stride.
    pub fn for_image(camera: &Camera, stride: u32) -> Self {
        let s = stride.max(1);
        Self::zeros(camera.intrinsics.width.div_ceil(s) as usize, camera.intrinsics.height.div_ceil(s) as usize, s)
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    fn cell_of(&self, u: f64, v: f64) -> Option<(usize, usize)> {
        let s = self.stride as f64;
        let (cx, cy) = ((u / s).floor(), (v / s).floor());
        if !(cx.is_finite() && cy.is_finite()) {
            return None;
        }
        let cx = (cx.max(0.0) as usize).min(self.width.checked_sub(1)?);
        let cy = (cy.max(0.0) as usize).min(self.height.checked_sub(1)?);
        Some((cx, cy))
    }
}

/// An object center in pixels with the size of its 2D box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CenterSplat {
    pub u: f64,
    pub v: f64,
    pub box_w: f64,
    pub box_h: f64,
}

impl From<&Box2D> for CenterSplat {
    fn from(b: &Box2D) -> Self {
        let c = b.center();
        Self { u: c.x, v: c.y, box_w: b.width(), box_h: b.height() }
    }
}

/// Max-composited Gaussians, one per center, with
/// `σ = max(1, min(w, h) / (6·stride))` in cells and value 1 at the center cell.
pub fn render_center_heatmap(centers: &[CenterSplat], width: usize, height: usize, stride: u32) -> Heatmap {
    let mut map = Heatmap::zeros(width, height, stride.max(1));
    for c in centers {
        let Some((cx, cy)) = map.cell_of(c.u, c.v) else { continue };
        let sigma = (c.box_w.min(c.box_h) / (6.0 * map.stride as f64)).max(1.0);
        let radius = (3.0 * sigma).ceil() as isize;
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                let (x, y) = (cx as isize + dx, cy as isize + dy);
                if x < 0 || y < 0 || x >= width as isize || y >= height as isize {
                    continue;
                }
                let v = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
                let cell = &mut map.values[y as usize * width + x as usize];
                *cell = cell.max(v);
            }
        }
    }
    map
}

/// Map with 1 at each center cell and 0 elsewhere: the ideal detector output
/// for a set of predicted centers.
pub fn render_peak_map(centers: &[CenterSplat], width: usize, height: usize, stride: u32) -> Heatmap {
    let mut map = Heatmap::zeros(width, height, stride.max(1));
    for c in centers {
        if let Some((x, y)) = map.cell_of(c.u, c.v) {
            map.values[y * width + x] = 1.0;
        }
    }
    map
}

/// Penalty-reduced pixelwise focal loss: at target peaks
/// `−(1−p)^α log p`, elsewhere `−(1−t)^β p^α log(1−p)`, normalized by the
/// number of peaks (at least 1).
pub fn focal_loss(pred: &Heatmap, target: &Heatmap, alpha: f64, beta: f64) -> Result<f64, LossError> {
    if (pred.width, pred.height) != (target.width, target.height) {
        return Err(LossError::DimensionMismatch((pred.width, pred.height), (target.width, target.height)));
    }
    let mut total = 0.0;
    let mut peaks = 0usize;
    for (&p, &t) in pred.values.iter().zip(&target.values) {
        let p_log = p.clamp(HEATMAP_EPS, 1.0 - HEATMAP_EPS);
        if t >= 1.0 {
            peaks += 1;
            total -= (1.0 - p).powf(alpha) * p_log.ln();
        } else {
            total -= (1.0 - t).powf(beta) * p.powf(alpha) * (1.0 - p_log).ln();
        }
    }
    Ok(total / peaks.max(1) as f64)
}

/// Pose as the parameter vector `(x, y, z, l, w, h, yaw)`.
pub fn pose_params(p: &Pose7DoF) -> [f64; 7] {
    [p.x, p.y, p.z, p.l, p.w, p.h, p.yaw]
}

pub fn pose_from_params(v: &[f64; 7]) -> Pose7DoF {
    Pose7DoF { x: v[0], y: v[1], z: v[2], l: v[3], w: v[4], h: v[5], yaw: wrap_angle(v[6]) }
}

pub const PARAM_NAMES: [&str; 7] = ["x", "y", "z", "l", "w", "h", "yaw"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewGiou {
    pub camera_id: CameraId,
    pub giou: f64,
    pub projected: Box2D,
    /// Which of (x_min, y_min, x_max, y_max) were clamped to the image.
    pub clamped: [bool; 4],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SkipReason {
    BehindCamera,
    EmptyAfterClamp,
    ZeroEnclosingArea,
    UnknownCamera,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedView {
    pub camera_id: CameraId,
    pub reason: SkipReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReprojectionTerm {
    /// `(1/n) Σ (1 − GIoU)` over the usable views.
    pub value: f64,
    pub views: Vec<ViewGiou>,
    pub skipped: Vec<SkippedView>,
}

impl ReprojectionTerm {
    pub fn views_used(&self) -> usize {
        self.views.len()
    }

    /// Which views contribute and which box edges are clamped. The term is
    /// smooth only while this stays fixed.
    fn signature(&self) -> Vec<(CameraId, [bool; 4])> {
        self.views.iter().map(|v| (v.camera_id, v.clamped)).collect()
    }
}

fn clamped_projection(camera: &Camera, pose: &Pose7DoF) -> Result<(Box2D, [bool; 4]), SkipReason> {
    let pts = project_corners(camera, pose).map_err(|_| SkipReason::BehindCamera)?;
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in &pts {
        x0 = x0.min(p.x);
        y0 = y0.min(p.y);
        x1 = x1.max(p.x);
        y1 = y1.max(p.y);
    }
    let (w, h) = (camera.intrinsics.width as f64, camera.intrinsics.height as f64);
    let clamped = [x0 < 0.0 || x0 > w, y0 < 0.0 || y0 > h, x1 < 0.0 || x1 > w, y1 < 0.0 || y1 > h];
    let b = Box2D { x_min: x0, y_min: y0, x_max: x1, y_max: y1 }.clamp_to_image(w, h);
    if b.area() <= 0.0 {
        return Err(SkipReason::EmptyAfterClamp);
    }
    Ok((b, clamped))
}

/// GIoU reprojection term of one world-frame pose against the members of
/// its annotation, excluding the predicting camera. Views where the pose
/// cannot be projected are skipped and reduce `n`.
pub fn reprojection_giou_term(
    rig: &Rig,
    pose: &Pose7DoF,
    annotation: &MultiViewAnnotation,
    exclude_camera: Option<CameraId>,
) -> Result<ReprojectionTerm, LossError> {
    let mut views = Vec::new();
    let mut skipped = Vec::new();
    for (&camera_id, det) in &annotation.members {
        if Some(camera_id) == exclude_camera {
            continue;
        }
        let Some(camera) = rig.get(camera_id) else {
            skipped.push(SkippedView { camera_id, reason: SkipReason::UnknownCamera });
            continue;
        };
        let (projected, clamped) = match clamped_projection(camera, pose) {
            Ok(v) => v,
            Err(reason) => {
                skipped.push(SkippedView { camera_id, reason });
                continue;
            }
        };
        match giou_2d(&projected, &det.bbox) {
            Ok(giou) => views.push(ViewGiou { camera_id, giou, projected, clamped }),
            Err(_) => skipped.push(SkippedView { camera_id, reason: SkipReason::ZeroEnclosingArea }),
        }
    }
    if views.is_empty() {
        return Err(LossError::NoUsableViews);
    }
    let value = views.iter().map(|v| 1.0 - v.giou).sum::<f64>() / views.len() as f64;
    Ok(ReprojectionTerm { value, views, skipped })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub stride: u32,
    /// Pose-to-annotation matching radius (m).
    pub match_radius: f64,
    pub include_single_view: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 2.0, beta: 4.0, stride: 4, match_radius: 2.0, include_single_view: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum PoseOutcome {
    Scored { annotation: usize, term: ReprojectionTerm },
    Unmatched,
    NoUsableViews { annotation: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub giou_term: f64,
    pub focal_term: f64,
    /// GIoU of every scored view, pose by pose.
    pub per_view_giou: Vec<f64>,
    pub views_used: usize,
    pub poses_scored: usize,
    pub per_pose: Vec<PoseOutcome>,
}

impl LossBreakdown {
    /// Combines per-pose reprojection terms (averaged) with a focal term.
    pub fn compose(terms: &[ReprojectionTerm], focal_term: f64) -> Self {
        let giou_term = if terms.is_empty() { 0.0 } else { terms.iter().map(|t| t.value).sum::<f64>() / terms.len() as f64 };
        let per_view_giou: Vec<f64> = terms.iter().flat_map(|t| t.views.iter().map(|v| v.giou)).collect();
        Self {
            total: giou_term + focal_term,
            giou_term,
            focal_term,
            views_used: per_view_giou.len(),
            per_view_giou,
            poses_scored: terms.len(),
            per_pose: Vec::new(),
        }
    }
}

/// Greedy nearest-centroid matching of poses to annotations within
/// `radius`, closest pairs first.
pub fn match_poses_to_annotations(poses: &[Pose7DoF], annotations: &[MultiViewAnnotation], radius: f64) -> Vec<Option<usize>> {
    let mut pairs = Vec::new();
    for (i, p) in poses.iter().enumerate() {
        for (j, a) in annotations.iter().enumerate() {
            let d = (Vector2::new(p.x, p.y) - a.centroid()).norm();
            if d <= radius {
                pairs.push((d, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out = vec![None; poses.len()];
    let mut taken = vec![false; annotations.len()];
    for (_, i, j) in pairs {
        if out[i].is_none() && !taken[j] {
            out[i] = Some(j);
            taken[j] = true;
        }
    }
    out
}

/// Loss for the poses predicted from one camera image.
///
/// `detections` are the predicting camera's 2D detections; their box
/// centers form the focal target, while the centers of the poses' tight
/// boxes in that camera form the prediction.
pub fn multi_view_loss(
    rig: &Rig,
    detection_camera: CameraId,
    poses: &[Pose7DoF],
    annotations: &[MultiViewAnnotation],
    detections: &[Detection2D],
    cfg: &LossConfig,
) -> Result<LossBreakdown, LossError> {
    let camera = rig.get(detection_camera).ok_or(LossError::UnknownCamera(detection_camera))?;
    let eligible: Vec<usize> = (0..annotations.len()).filter(|&j| cfg.include_single_view || !annotations[j].single_view).collect();
    let candidates: Vec<MultiViewAnnotation> = eligible.iter().map(|&j| annotations[j].clone()).collect();
    let matches = match_poses_to_annotations(poses, &candidates, cfg.match_radius);

    let mut terms = Vec::new();
    let mut per_pose = Vec::with_capacity(poses.len());
    for (pose, m) in poses.iter().zip(&matches) {
        let Some(k) = m else {
            per_pose.push(PoseOutcome::Unmatched);
            continue;
        };
        let annotation = eligible[*k];
        match reprojection_giou_term(rig, pose, &annotations[annotation], Some(detection_camera)) {
            Ok(term) => {
                terms.push(term.clone());
                per_pose.push(PoseOutcome::Scored { annotation, term });
            }
            Err(_) => per_pose.push(PoseOutcome::NoUsableViews { annotation }),
        }
    }

    let target_centers: Vec<CenterSplat> = detections.iter().filter(|d| d.camera_id == detection_camera).map(|d| CenterSplat::from(&d.bbox)).collect();
    let pred_centers: Vec<CenterSplat> = poses.iter().filter_map(|p| clamped_projection(camera, p).ok()).map(|(b, _)| CenterSplat::from(&b)).collect();
    let grid = Heatmap::for_image(camera, cfg.stride);
    let target = render_center_heatmap(&target_centers, grid.width, grid.height, grid.stride);
    let pred = render_peak_map(&pred_centers, grid.width, grid.height, grid.stride);
    let focal = focal_loss(&pred, &target, cfg.alpha, cfg.beta)?;

    let mut breakdown = LossBreakdown::compose(&terms, focal);
    breakdown.per_pose = per_pose;
    Ok(breakdown)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientConfig {
    /// Central-difference step as a fraction of each parameter's scale.
    pub rel_step: f64,
    /// Parameter scales: meters for x..h, radians for yaw.
    pub scales: [f64; 7],
}

impl Default for GradientConfig {
    fn default() -> Self {
        Self { rel_step: 1e-4, scales: [1.0; 7] }
    }
}

/// Central-difference gradient of the reprojection term with respect to
/// `(x, y, z, l, w, h, yaw)`. Fails when a probe changes which views are
/// usable or which box edges are clamped, since the term has a kink there.
pub fn loss_gradient(
    rig: &Rig,
    pose: &Pose7DoF,
    annotation: &MultiViewAnnotation,
    exclude_camera: Option<CameraId>,
    cfg: &GradientConfig,
) -> Result<[f64; 7], LossError> {
    let base = reprojection_giou_term(rig, pose, annotation, exclude_camera)?;
    let signature = base.signature();
    let params = pose_params(pose);
    let mut grad = [0.0; 7];
    for i in 0..7 {
        let h = cfg.rel_step * cfg.scales[i];
        let probe = |sign: f64| -> Result<f64, LossError> {
            let mut q = params;
            q[i] += sign * h;
            let p = pose_from_params(&q);
            let nd = LossError::NonDifferentiablePoint { param: PARAM_NAMES[i] };
            if p.validate().is_err() {
                return Err(nd);
            }
            let t = reprojection_giou_term(rig, &p, annotation, exclude_camera).map_err(|_| nd.clone())?;
            if t.signature() != signature || !t.skipped.iter().map(|s| s.camera_id).eq(base.skipped.iter().map(|s| s.camera_id)) {
                return Err(nd);
            }
            Ok(t.value)
        };
        let (plus, minus) = (probe(1.0)?, probe(-1.0)?);
        grad[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

impl From<BoxError> for SkipReason {
    fn from(e: BoxError) -> Self {
        match e {
            BoxError::EmptyAfterClamp => SkipReason::EmptyAfterClamp,
            BoxError::ZeroEnclosingArea => SkipReason::ZeroEnclosingArea,
            _ => SkipReason::BehindCamera,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn single(v: f64) -> Heatmap {
        Heatmap { width: 1, height: 1, stride: 4, values: vec![v] }
    }

    #[test]
    fn focal_single_cell_values() {
        assert_eq!(focal_loss(&single(1.0), &single(1.0), 2.0, 4.0).unwrap(), 0.0);
        let ln2 = 2f64.ln();
        assert_abs_diff_eq!(focal_loss(&single(0.5), &single(1.0), 2.0, 4.0).unwrap(), 0.25 * ln2, epsilon = 1e-12);
        assert_abs_diff_eq!(focal_loss(&single(0.5), &single(0.0), 2.0, 4.0).unwrap(), 0.25 * ln2, epsilon = 1e-12);
        assert_eq!(focal_loss(&single(0.0), &single(0.0), 2.0, 4.0).unwrap(), 0.0);
    }

    #[test]
    fn focal_dimension_mismatch() {
        let a = Heatmap::zeros(2, 2, 4);
        let b = Heatmap::zeros(3, 2, 4);
        assert!(matches!(focal_loss(&a, &b, 2.0, 4.0), Err(LossError::DimensionMismatch(..))));
    }

    #[test]
    fn focal_zero_only_for_exact_peaks() {
        let c = [CenterSplat { u: 40.0, v: 40.0, box_w: 80.0, box_h: 60.0 }];
        let target = render_center_heatmap(&c, 32, 32, 4);
        let exact = render_peak_map(&c, 32, 32, 4);
        assert_eq!(focal_loss(&exact, &target, 2.0, 4.0).unwrap(), 0.0);
        // The Gaussian itself is not a perfect prediction.
        assert!(focal_loss(&target, &target, 2.0, 4.0).unwrap() > 0.0);
        let shifted = render_peak_map(&[CenterSplat { u: 48.0, ..c[0] }], 32, 32, 4);
        assert!(focal_loss(&shifted, &target, 2.0, 4.0).unwrap() > 0.0);
    }

    #[test]
    fn heatmap_peaks_and_max_composition() {
        let one = [CenterSplat { u: 21.0, v: 33.0, box_w: 100.0, box_h: 50.0 }];
        let m = render_center_heatmap(&one, 20, 20, 4);
        assert_eq!(m.get(5, 8), 1.0);
        assert_eq!(m.values.iter().filter(|&&v| v == 1.0).count(), 1);
        let empty = render_center_heatmap(&[], 20, 20, 4);
        assert!(empty.values.iter().all(|&v| v == 0.0));
        let two = [one[0], CenterSplat { u: 29.0, v: 33.0, box_w: 100.0, box_h: 50.0 }];
        let m2 = render_center_heatmap(&two, 20, 20, 4);
        assert!(m2.values.iter().all(|&v| v <= 1.0));
        assert_eq!(m2.get(5, 8), 1.0);
        assert_eq!(m2.get(7, 8), 1.0);
    }

    #[test]
    fn breakdown_composition() {
        let view = ViewGiou { camera_id: CameraId(1), giou: 0.6, projected: Box2D::new(0.0, 0.0, 1.0, 1.0).unwrap(), clamped: [false; 4] };
        let term = ReprojectionTerm { value: 1.0 - 0.6, views: vec![view], skipped: vec![] };
        let b = LossBreakdown::compose(&[term], 0.1);
        assert_abs_diff_eq!(b.total, 0.5, epsilon = 1e-12);
        assert_eq!(b.views_used, 1);
        let empty = LossBreakdown::compose(&[], 0.0);
        assert_eq!((empty.total, empty.views_used), (0.0, 0));
    }
}
