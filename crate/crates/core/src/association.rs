//! Cross-view association of 2D detections at one time instance.
//!
//! Each detection is anchored on the ground plane by casting a ray through
//! its box, and the ground points are clustered with DP-means under the
//! constraint that a cluster holds at most one detection per camera.

use std::collections::{BTreeMap, HashSet};

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::box3d::Box2D;
use crate::camera::{Camera, CameraError, CameraId, Rig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssocError {
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error("ground point {distance:.1} m from the rig exceeds the scene radius")]
    OutOfSceneRadius { distance: f64 },
    #[error("detection from frame {found} in a batch for frame {expected}")]
    MixedFrames { expected: i64, found: i64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection2D {
    pub camera_id: CameraId,
    #[serde(default)]
    pub frame: i64,
    #[serde(rename = "box")]
    pub bbox: Box2D,
    pub score: f64,
    #[serde(rename = "class")]
    pub class: String,
    /// Ground-truth vehicle, present only on simulator output.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_id: Option<u32>,
}

/// Which pixel of a detection box is cast to the ground.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Anchor {
    /// Box center cast onto the plane at [`ANCHOR_MID_HEIGHT`]: roughly
    /// where the ray meets the vehicle's vertical axis.
    #[default]
    BoxCenterMidHeight,
    /// Midpoint of the bottom edge, by ray casting. Lands on the near side
    /// of the footprint, about a half-diagonal short of the center.
    BottomCenter,
    /// Box center mapped through the ground homography. Overshoots the
    /// center by the half-height over the tangent of the elevation.
    BoxCenterHomography,
}

/// Half of a typical vehicle height (m).
pub const ANCHOR_MID_HEIGHT: f64 = 0.85;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssocConfig {
    pub lambda: f64,
    pub min_views: usize,
    pub min_score: f64,
    pub classes: Vec<String>,
    pub scene_radius: f64,
    pub anchor: Anchor,
}

impl Default for AssocConfig {
    fn default() -> Self {
        Self { lambda: 2.0, min_views: 2, min_score: 0.5, classes: vec!["car".into(), "truck".into()], scene_radius: 200.0, anchor: Anchor::BoxCenterMidHeight }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundPoint {
    pub camera_id: CameraId,
    /// Index of the detection in the input batch.
    pub detection: usize,
    pub point: Vector2<f64>,
}

pub fn anchor_point(camera: &Camera, det: &Detection2D, anchor: Anchor) -> Result<Vector2<f64>, CameraError> {
    match anchor {
        Anchor::BoxCenterMidHeight => camera.cast_ray_to_plane(&det.bbox.center(), ANCHOR_MID_HEIGHT).map(|p| p.xy()),
        Anchor::BottomCenter => camera.cast_ray_to_ground(&det.bbox.bottom_center()).map(|p| p.xy()),
        Anchor::BoxCenterHomography => {
            // The homography is defined for pixels whose ray reaches the ground.
            camera.cast_ray_to_ground(&det.bbox.center())?;
            camera.ground_homography()?.apply(&det.bbox.center())
        }
    }
}

/// Ground-plane anchor of one detection, rejecting points outside the scene
/// radius around the rig.
pub fn detection_ground_point(rig: &Rig, camera: &Camera, det: &Detection2D, cfg: &AssocConfig) -> Result<Vector2<f64>, AssocError> {
    let p = anchor_point(camera, det, cfg.anchor)?;
    let distance = (p - rig.ground_centroid()).norm();
    if distance > cfg.scene_radius {
        return Err(AssocError::OutOfSceneRadius { distance });
    }
    Ok(p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpMeansResult {
    /// Cluster label per input point, numbered by first appearance.
    pub assignments: Vec<usize>,
    pub means: Vec<Vector2<f64>>,
    pub iterations: usize,
    /// Objective after every accepted iteration; non-increasing.
    pub objective_trace: Vec<f64>,
    pub converged: bool,
}

impl DpMeansResult {
    pub fn cluster_count(&self) -> usize {
        self.means.len()
    }
}

pub const DP_MEANS_MAX_ITERS: usize = 100;

/// DP-means objective: squared distances to the assigned means plus
/// `λ²` per cluster.
pub fn dp_means_objective(points: &[Vector2<f64>], assignments: &[usize], means: &[Vector2<f64>], lambda: f64) -> f64 {
    let spread: f64 = points.iter().zip(assignments).map(|(p, &k)| (p - means[k]).norm_squared()).sum();
    spread + lambda * lambda * means.len() as f64
}

/// Relabels clusters by first appearance and recomputes their means.
fn compact(points: &[Vector2<f64>], raw: &[usize]) -> (Vec<usize>, Vec<Vector2<f64>>) {
    let mut remap = BTreeMap::new();
    let mut labels = Vec::with_capacity(raw.len());
    for &k in raw {
        let next = remap.len();
        labels.push(*remap.entry(k).or_insert(next));
    }
    let mut sums = vec![(Vector2::zeros(), 0usize); remap.len()];
    for (p, &k) in points.iter().zip(&labels) {
        sums[k].0 += p;
        sums[k].1 += 1;
    }
    let means = sums.into_iter().map(|(s, n)| s / n as f64).collect();
    (labels, means)
}

/// DP-means clustering from a single initial cluster at the global mean.
/// With `camera_ids`, a point whose nearest cluster already holds a point
/// from the same camera takes the nearest unblocked cluster, or opens a new
/// one.
///
/// Points are visited in lexicographic (x, y, camera) order rather than
/// input order, so the partition does not depend on how the input is
/// arranged. Iterates until assignments repeat or an iteration would raise
/// the objective, then merges the pair of clusters whose union lowers the
/// objective most and resumes; stops when no merge helps or after
/// [`DP_MEANS_MAX_ITERS`] passes.
pub fn dp_means(points: &[Vector2<f64>], lambda: f64, camera_ids: Option<&[CameraId]>) -> DpMeansResult {
    assert!(lambda > 0.0, "lambda must be positive");
    if let Some(ids) = camera_ids {
        assert_eq!(ids.len(), points.len(), "one camera id per point");
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        let (p, q) = (points[a], points[b]);
        p.x.total_cmp(&q.x).then(p.y.total_cmp(&q.y)).then_with(|| camera_ids.map_or(std::cmp::Ordering::Equal, |ids| ids[a].cmp(&ids[b])))
    });
    let sorted: Vec<_> = order.iter().map(|&i| points[i]).collect();
    let sorted_ids: Option<Vec<CameraId>> = camera_ids.map(|ids| order.iter().map(|&i| ids[i]).collect());
    let r = dp_means_sorted(&sorted, lambda, sorted_ids.as_deref());
    let mut raw = vec![0; points.len()];
    for (j, &i) in order.iter().enumerate() {
        raw[i] = r.assignments[j];
    }
    let (assignments, means) = compact(points, &raw);
    DpMeansResult { assignments, means, ..r }
}

fn dp_means_sorted(points: &[Vector2<f64>], lambda: f64, camera_ids: Option<&[CameraId]>) -> DpMeansResult {
    let n = points.len();
    if n == 0 {
        return DpMeansResult { assignments: vec![], means: vec![], iterations: 0, objective_trace: vec![], converged: true };
    }
    let lambda2 = lambda * lambda;
    let mut means = vec![points.iter().sum::<Vector2<f64>>() / n as f64];
    let mut current: Option<(Vec<usize>, Vec<Vector2<f64>>)> = None;
    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    loop {
        while iterations < DP_MEANS_MAX_ITERS {
            iterations += 1;
            let mut raw = Vec::with_capacity(n);
            let mut occupied: Vec<HashSet<CameraId>> = vec![HashSet::new(); means.len()];
            let mut centers = means.clone();
            for (i, p) in points.iter().enumerate() {
                let cam = camera_ids.map(|ids| ids[i]);
                let nearest = centers
                    .iter()
                    .enumerate()
                    .filter(|(k, _)| cam.is_none_or(|c| !occupied[*k].contains(&c)))
                    .map(|(k, m)| (k, (p - m).norm_squared()))
                    .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
                let k = match nearest {
                    Some((k, d2)) if d2 <= lambda2 => k,
                    _ => {
                        centers.push(*p);
                        occupied.push(HashSet::new());
                        centers.len() - 1
                    }
                };
                if let Some(c) = cam {
                    occupied[k].insert(c);
                }
                raw.push(k);
            }
            let (labels, new_means) = compact(points, &raw);
            let objective = dp_means_objective(points, &labels, &new_means, lambda);
            if let Some((prev_labels, _)) = &current {
                if *prev_labels == labels {
                    converged = true;
                    break;
                }
                if objective > *trace.last().expect("trace follows state") {
                    // The constrained pass found nothing better than the previous state.
                    converged = true;
                    break;
                }
            }
            trace.push(objective);
            means = new_means.clone();
            current = Some((labels, new_means));
        }
        // Assignment alone never joins two clusters that each sit on their
        // own points, so try the best objective-lowering merge and resume.
        if !converged {
            break;
        }
        let (labels, old_means) = current.as_ref().expect("at least one iteration");
        let Some((a, b)) = best_merge(labels, old_means, camera_ids, lambda2) else { break };
        let merged: Vec<usize> = labels.iter().map(|&k| if k == b { a } else { k }).collect();
        let (labels, new_means) = compact(points, &merged);
        trace.push(dp_means_objective(points, &labels, &new_means, lambda));
        means = new_means.clone();
        current = Some((labels, new_means));
        converged = false;
        if iterations >= DP_MEANS_MAX_ITERS {
            break;
        }
    }
    let (assignments, means) = current.expect("at least one iteration");
    DpMeansResult { assignments, means, iterations, objective_trace: trace, converged }
}

/// Cluster pair whose union lowers the objective the most, if any, among
/// pairs without a shared camera.
fn best_merge(labels: &[usize], means: &[Vector2<f64>], camera_ids: Option<&[CameraId]>, lambda2: f64) -> Option<(usize, usize)> {
    let k = means.len();
    let mut sizes = vec![0usize; k];
    let mut cams: Vec<HashSet<CameraId>> = vec![HashSet::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        sizes[l] += 1;
        if let Some(ids) = camera_ids {
            cams[l].insert(ids[i]);
        }
    }
    let mut best: Option<(f64, usize, usize)> = None;
    for a in 0..k {
        for b in a + 1..k {
            if !cams[a].is_disjoint(&cams[b]) {
                continue;
            }
            let (na, nb) = (sizes[a] as f64, sizes[b] as f64);
            let delta = na * nb / (na + nb) * (means[a] - means[b]).norm_squared() - lambda2;
            if delta < 0.0 && best.is_none_or(|(d, _, _)| delta < d) {
                best = Some((delta, a, b));
            }
        }
    }
    best.map(|(_, a, b)| (a, b))
}

/// A vehicle observed from one or more cameras at one instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiViewAnnotation {
    pub id: usize,
    pub frame: i64,
    pub members: BTreeMap<CameraId, Detection2D>,
    /// Mean of the members' ground points (m).
    pub centroid: [f64; 2],
    /// Fewer members than the configured minimum; skipped by the loss.
    #[serde(default)]
    pub single_view: bool,
}

impl MultiViewAnnotation {
    pub fn centroid(&self) -> Vector2<f64> {
        Vector2::new(self.centroid[0], self.centroid[1])
    }

    pub fn view_count(&self) -> usize {
        self.members.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssocDiagnostics {
    pub input_detections: usize,
    pub dropped_class: usize,
    pub dropped_low_score: usize,
    pub dropped_unknown_camera: usize,
    pub dropped_ray: usize,
    pub dropped_out_of_radius: usize,
    pub single_view_clusters: usize,
    pub dp_means_iterations: usize,
    pub dp_means_converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameAnnotations {
    pub frame: i64,
    pub annotations: Vec<MultiViewAnnotation>,
    pub diagnostics: AssocDiagnostics,
}

/// Builds the multi-view annotations of one frame. Detections that cannot
/// be anchored are dropped and counted rather than failing the frame.
pub fn build_annotations(rig: &Rig, frame: i64, detections: &[Detection2D], cfg: &AssocConfig) -> Result<FrameAnnotations, AssocError> {
    let mut diag = AssocDiagnostics { input_detections: detections.len(), ..Default::default() };
    let mut kept: Vec<(&Detection2D, Vector2<f64>)> = Vec::new();
    for det in detections {
        if det.frame != frame {
            return Err(AssocError::MixedFrames { expected: frame, found: det.frame });
        }
        if !cfg.classes.iter().any(|c| c.eq_ignore_ascii_case(&det.class)) {
            diag.dropped_class += 1;
            continue;
        }
        if !(det.score >= cfg.min_score) {
            diag.dropped_low_score += 1;
            continue;
        }
        let Some(camera) = rig.get(det.camera_id) else {
            diag.dropped_unknown_camera += 1;
            continue;
        };
        match detection_ground_point(rig, camera, det, cfg) {
            Ok(p) => kept.push((det, p)),
            Err(AssocError::OutOfSceneRadius { distance }) => {
                log::warn!("frame {frame}: camera {} detection {distance:.1} m out, dropped", det.camera_id);
                diag.dropped_out_of_radius += 1;
            }
            Err(_) => diag.dropped_ray += 1,
        }
    }

    let points: Vec<_> = kept.iter().map(|(_, p)| *p).collect();
    let cams: Vec<_> = kept.iter().map(|(d, _)| d.camera_id).collect();
    let clusters = dp_means(&points, cfg.lambda, Some(&cams));
    diag.dp_means_iterations = clusters.iterations;
    diag.dp_means_converged = clusters.converged;

    let mut annotations: Vec<MultiViewAnnotation> =
        (0..clusters.cluster_count()).map(|id| MultiViewAnnotation { id, frame, members: BTreeMap::new(), centroid: [0.0; 2], single_view: false }).collect();
    let mut sums = vec![Vector2::zeros(); annotations.len()];
    for ((det, p), &k) in kept.iter().zip(&clusters.assignments) {
        annotations[k].members.insert(det.camera_id, (*det).clone());
        sums[k] += p;
    }
    for (a, s) in annotations.iter_mut().zip(sums) {
        let c = s / a.members.len() as f64;
        a.centroid = [c.x, c.y];
        a.single_view = a.members.len() < cfg.min_views;
        if a.single_view {
            diag.single_view_clusters += 1;
        }
    }
    Ok(FrameAnnotations { frame, annotations, diagnostics: diag })
}
