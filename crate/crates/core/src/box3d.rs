//! 7DoF boxes, their tight image-space boxes, and the overlap measures used
//! for both the loss (2D IoU / GIoU) and evaluation (BEV and 3D IoU).

use std::f64::consts::PI;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{Camera, MIN_DEPTH};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoxError {
    #[error("box corner behind the camera")]
    BehindCamera,
    #[error("box has zero area after clamping to the image")]
    EmptyAfterClamp,
    #[error("enclosing box has zero area")]
    ZeroEnclosingArea,
    #[error("invalid pose: {0}")]
    InvalidPose(#[from] PoseError),
    #[error("invalid box: {0}")]
    InvalidBox(String),
}

/// A pose invariant violation, naming the offending field.
#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize)]
#[error("{message}")]
pub struct PoseError {
    pub field: &'static str,
    pub message: String,
}

/// Wraps an angle into (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// Signed smallest difference `a − b`, in (−π, π].
pub fn angle_diff(a: f64, b: f64) -> f64 {
    wrap_angle(a - b)
}

/// Vehicle pose with zero roll and pitch. `z` is the vertical center of the
/// box, so the bottom face sits at `z − h/2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose7DoF {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub yaw: f64,
}

impl Pose7DoF {
    pub fn new(x: f64, y: f64, z: f64, l: f64, w: f64, h: f64, yaw: f64) -> Result<Self, PoseError> {
        let p = Self { x, y, z, l, w, h, yaw: wrap_angle(yaw) };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), PoseError> {
        self.field_errors().into_iter().next().map_or(Ok(()), Err)
    }

    /// Every violated invariant, in field order.
    pub fn field_errors(&self) -> Vec<PoseError> {
        let mut out = Vec::new();
        for (field, v) in [("x", self.x), ("y", self.y), ("z", self.z), ("yaw", self.yaw)] {
            if !v.is_finite() {
                out.push(PoseError { field, message: format!("{field} must be finite") });
            }
        }
        for (field, v) in [("l", self.l), ("w", self.w), ("h", self.h)] {
            if !(v.is_finite() && v > 0.0) {
                out.push(PoseError { field, message: format!("{field} must be positive") });
            }
        }
        out
    }

    pub fn center(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn footprint(&self) -> BevRect {
        BevRect { cx: self.x, cy: self.y, l: self.l, w: self.w, yaw: self.yaw }
    }

    pub fn bottom(&self) -> f64 {
        self.z - self.h / 2.0
    }

    pub fn top(&self) -> f64 {
        self.z + self.h / 2.0
    }

    pub fn volume(&self) -> f64 {
        self.l * self.w * self.h
    }

    /// The eight corners: bottom face counterclockwise (seen from above)
    /// starting at front-left, then the top face in the same order.
    pub fn corners(&self) -> [Vector3<f64>; 8] {
        let bev = self.footprint().corners();
        let (b, t) = (self.bottom(), self.top());
        std::array::from_fn(|i| {
            let c = bev[i % 4];
            Vector3::new(c.x, c.y, if i < 4 { b } else { t })
        })
    }

    /// Equality with the yaw compared on the circle.
    pub fn approx_eq(&self, other: &Self, tol: f64) -> bool {
        (self.x - other.x).abs() <= tol
            && (self.y - other.y).abs() <= tol
            && (self.z - other.z).abs() <= tol
            && (self.l - other.l).abs() <= tol
            && (self.w - other.w).abs() <= tol
            && (self.h - other.h).abs() <= tol
            && angle_diff(self.yaw, other.yaw).abs() <= tol
    }
}

/// Axis-aligned pixel box. Serialized as `[x_min, y_min, x_max, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct Box2D {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Box2D {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, BoxError> {
        let b = Self { x_min, y_min, x_max, y_max };
        if ![x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite()) {
            return Err(BoxError::InvalidBox("coordinates must be finite".into()));
        }
        if x_min > x_max || y_min > y_max {
            return Err(BoxError::InvalidBox("min must not exceed max".into()));
        }
        Ok(b)
    }

    pub fn from_array(a: [f64; 4]) -> Result<Self, BoxError> {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn width(&self) -> f64 {
        (self.x_max - self.x_min).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y_max - self.y_min).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> Vector2<f64> {
        Vector2::new((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    pub fn bottom_center(&self) -> Vector2<f64> {
        Vector2::new((self.x_min + self.x_max) / 2.0, self.y_max)
    }

    pub fn contains_point(&self, p: &Vector2<f64>) -> bool {
        p.x >= self.x_min && p.x <= self.x_max && p.y >= self.y_min && p.y <= self.y_max
    }

    pub fn contains_box(&self, other: &Box2D) -> bool {
        self.x_min <= other.x_min && self.y_min <= other.y_min && self.x_max >= other.x_max && self.y_max >= other.y_max
    }

    /// Smallest box containing both.
    pub fn enclose(&self, other: &Box2D) -> Box2D {
        Box2D { x_min: self.x_min.min(other.x_min), y_min: self.y_min.min(other.y_min), x_max: self.x_max.max(other.x_max), y_max: self.y_max.max(other.y_max) }
    }

    pub fn intersection_area(&self, other: &Box2D) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        w.max(0.0) * h.max(0.0)
    }

    /// Intersection with `[0, width] × [0, height]`.
    pub fn clamp_to_image(&self, width: f64, height: f64) -> Box2D {
        Box2D {
            x_min: self.x_min.clamp(0.0, width),
            y_min: self.y_min.clamp(0.0, height),
            x_max: self.x_max.clamp(0.0, width),
            y_max: self.y_max.clamp(0.0, height),
        }
    }
}

impl TryFrom<[f64; 4]> for Box2D {
    type Error = BoxError;

    fn try_from(a: [f64; 4]) -> Result<Self, Self::Error> {
        Self::from_array(a)
    }
}

impl From<Box2D> for [f64; 4] {
    fn from(b: Box2D) -> Self {
        b.to_array()
    }
}

/// Rotated rectangle on the ground plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BevRect {
    pub cx: f64,
    pub cy: f64,
    pub l: f64,
    pub w: f64,
    pub yaw: f64,
}

impl BevRect {
    /// Corners counterclockwise from front-left.
    pub fn corners(&self) -> [Vector2<f64>; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.l / 2.0, self.w / 2.0);
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].map(|(a, b)| Vector2::new(self.cx + c * a - s * b, self.cy + s * a + c * b))
    }

    pub fn area(&self) -> f64 {
        self.l * self.w
    }

    pub fn contains(&self, p: &Vector2<f64>) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let d = p - Vector2::new(self.cx, self.cy);
        let a = c * d.x + s * d.y;
        let b = -s * d.x + c * d.y;
        a.abs() <= self.l / 2.0 && b.abs() <= self.w / 2.0
    }
}

/// Convex polygon helpers (vertices counterclockwise).
pub mod polygon {
    use nalgebra::Vector2;

    fn cross(a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
        a.x * b.y - a.y * b.x
    }

    /// Signed shoelace area; positive for counterclockwise polygons.
    pub fn signed_area(poly: &[Vector2<f64>]) -> f64 {
        let n = poly.len();
        if n < 3 {
            return 0.0;
        }
        (0..n).map(|i| cross(&poly[i], &poly[(i + 1) % n])).sum::<f64>() / 2.0
    }

    /// Sutherland–Hodgman clipping of `subject` against the convex,
    /// counterclockwise `clip` polygon.
    pub fn clip_convex(subject: &[Vector2<f64>], clip: &[Vector2<f64>]) -> Vec<Vector2<f64>> {
        let mut output = subject.to_vec();
        let m = clip.len();
        for i in 0..m {
            if output.is_empty() {
                break;
            }
            let a = clip[i];
            let b = clip[(i + 1) % m];
            let edge = b - a;
            let side = |p: &Vector2<f64>| cross(&edge, &(p - a));
            let input = std::mem::take(&mut output);
            let n = input.len();
            for j in 0..n {
                let cur = input[j];
                let prev = input[(j + n - 1) % n];
                let (sc, sp) = (side(&cur), side(&prev));
                if sc >= 0.0 {
                    if sp < 0.0 {
                        output.push(prev + (cur - prev) * (sp / (sp - sc)));
                    }
                    output.push(cur);
                } else if sp >= 0.0 {
                    output.push(prev + (cur - prev) * (sp / (sp - sc)));
                }
            }
        }
        output
    }

    pub fn intersection_area(a: &[Vector2<f64>], b: &[Vector2<f64>]) -> f64 {
        signed_area(&clip_convex(a, b)).max(0.0)
    }

    /// Minimum distance between two convex polygons; 0 when they overlap.
    pub fn distance(a: &[Vector2<f64>], b: &[Vector2<f64>]) -> f64 {
        if intersection_area(a, b) > 0.0 || a.iter().any(|p| contains(b, p)) || b.iter().any(|p| contains(a, p)) {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for (p, poly) in a.iter().map(|p| (p, b)).chain(b.iter().map(|p| (p, a))) {
            let n = poly.len();
            for i in 0..n {
                best = best.min(point_segment_distance(p, &poly[i], &poly[(i + 1) % n]));
            }
        }
        best
    }

    pub fn contains(poly: &[Vector2<f64>], p: &Vector2<f64>) -> bool {
        let n = poly.len();
        n >= 3 && (0..n).all(|i| cross(&(poly[(i + 1) % n] - poly[i]), &(p - poly[i])) >= 0.0)
    }

    fn point_segment_distance(p: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
        let ab = b - a;
        let len2 = ab.norm_squared();
        let t = if len2 > 0.0 { ((p - a).dot(&ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
        (a + ab * t - p).norm()
    }

    /// Convex hull (Andrew's monotone chain), counterclockwise.
    pub fn convex_hull(points: &[Vector2<f64>]) -> Vec<Vector2<f64>> {
        let mut pts = points.to_vec();
        pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
        pts.dedup();
        if pts.len() < 3 {
            return pts;
        }
        let mut hull: Vec<Vector2<f64>> = Vec::with_capacity(pts.len() * 2);
        for pass in 0..2 {
            let start = hull.len();
            let iter: Box<dyn Iterator<Item = &Vector2<f64>>> = if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
            for p in iter {
                while hull.len() >= start + 2 && cross(&(hull[hull.len() - 1] - hull[hull.len() - 2]), &(p - hull[hull.len() - 2])) <= 0.0 {
                    hull.pop();
                }
                hull.push(*p);
            }
            hull.pop();
        }
        hull
    }
}

/// Projected corners of `pose`, or `BehindCamera` if any has depth ≤ 1e-9.
pub fn project_corners(camera: &Camera, pose: &Pose7DoF) -> Result<[Vector2<f64>; 8], BoxError> {
    let corners = pose.corners();
    let mut out = [Vector2::zeros(); 8];
    for (o, c) in out.iter_mut().zip(&corners) {
        if camera.depth(c) <= MIN_DEPTH {
            return Err(BoxError::BehindCamera);
        }
        *o = camera.project_point(c).map_err(|_| BoxError::BehindCamera)?;
    }
    Ok(out)
}

/// Tight axis-aligned box around the eight projected corners, optionally
/// clamped to the image.
pub fn project_to_box2d(camera: &Camera, pose: &Pose7DoF, clamp: bool) -> Result<Box2D, BoxError> {
    let pts = project_corners(camera, pose)?;
    let mut b = Box2D { x_min: f64::INFINITY, y_min: f64::INFINITY, x_max: f64::NEG_INFINITY, y_max: f64::NEG_INFINITY };
    for p in &pts {
        b.x_min = b.x_min.min(p.x);
        b.y_min = b.y_min.min(p.y);
        b.x_max = b.x_max.max(p.x);
        b.y_max = b.y_max.max(p.y);
    }
    if clamp {
        let k = &camera.intrinsics;
        b = b.clamp_to_image(k.width as f64, k.height as f64);
        if b.area() <= 0.0 {
            return Err(BoxError::EmptyAfterClamp);
        }
    }
    Ok(b)
}

pub fn iou_2d(a: &Box2D, b: &Box2D) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `IoU − (|C| − |A ∪ B|) / |C|` with `C` the smallest
/// enclosing box.
pub fn giou_2d(a: &Box2D, b: &Box2D) -> Result<f64, BoxError> {
    let enclosing = a.enclose(b).area();
    if enclosing <= 0.0 {
        return Err(BoxError::ZeroEnclosingArea);
    }
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    Ok(iou - (enclosing - union) / enclosing)
}

fn footprint_intersection(a: &Pose7DoF, b: &Pose7DoF) -> f64 {
    polygon::intersection_area(&a.footprint().corners(), &b.footprint().corners())
}

/// Bird's-eye-view IoU of the rotated footprints.
pub fn iou_bev(a: &Pose7DoF, b: &Pose7DoF) -> f64 {
    let inter = footprint_intersection(a, b);
    let union = a.l * a.w + b.l * b.w - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

pub fn iou_3d(a: &Pose7DoF, b: &Pose7DoF) -> f64 {
    let overlap_h = (a.top().min(b.top()) - a.bottom().max(b.bottom())).max(0.0);
    if overlap_h <= 0.0 {
        return 0.0;
    }
    let inter = footprint_intersection(a, b) * overlap_h;
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}
