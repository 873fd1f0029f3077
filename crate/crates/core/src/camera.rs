//! Pinhole cameras, ground-plane ray casting and the two calibration solvers
//! (ground homography by DLT, extrinsics by perspective-n-point).
//!
//! Frames: the world is right-handed with z up and the ground at z = 0.
//! Camera frames follow the usual pinhole convention (z forward, x right,
//! y down). Lens distortion is not modelled; images are assumed rectified.

use nalgebra::{DMatrix, Matrix3, Rotation3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::box3d::{wrap_angle, Pose7DoF};

/// Minimum camera-frame depth for a point to count as in front of the camera.
pub const MIN_DEPTH: f64 = 1e-9;

const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CameraError {
    #[error("point is behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },
    #[error("ray is parallel to or ascending away from the ground plane")]
    RayParallelOrAscending,
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("refinement did not converge after {iterations} iterations (rms {rms} px)")]
    NoConvergence { iterations: usize, rms: f64 },
    #[error("need at least {needed} correspondences, got {got}")]
    NotEnoughPoints { needed: usize, got: usize },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("rotation is not a proper orthonormal matrix")]
    InvalidRotation,
    #[error("homography is singular")]
    SingularHomography,
    #[error("unknown camera {0}")]
    UnknownCamera(CameraId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct CameraId(pub u32);

impl std::fmt::Display for CameraId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, CameraError> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        let bad = |msg: &str| Err(CameraError::InvalidIntrinsics(msg.to_owned()));
        if !(self.fx.is_finite() && self.fx > 0.0) {
            return bad("fx must be positive");
        }
        if !(self.fy.is_finite() && self.fy > 0.0) {
            return bad("fy must be positive");
        }
        if self.width == 0 || self.height == 0 {
            return bad("image size must be positive");
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64) {
            return bad("cx must lie inside the image");
        }
        if !(self.cy > 0.0 && self.cy < self.height as f64) {
            return bad("cy must lie inside the image");
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0 && pixel.y >= 0.0 && pixel.x <= self.width as f64 && pixel.y <= self.height as f64
    }

    /// Pixel to normalized image coordinates.
    pub fn normalize(&self, pixel: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy)
    }
}

/// World-to-camera rigid transform: `X_c = R X_w + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraExtrinsics {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl CameraExtrinsics {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, CameraError> {
        if !is_rotation(&rotation, ROTATION_TOL) || !translation.iter().all(|v| v.is_finite()) {
            return Err(CameraError::InvalidRotation);
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Camera at `eye` with its optical axis through `target`. `up` is the
    /// world direction that should appear upward in the image.
    pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>, up: &Vector3<f64>) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(up).normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -rotation * eye;
        Self { rotation, translation }
    }

    /// Camera center in world coordinates, `C = -Rᵀ t`.
    pub fn center(&self) -> Vector3<f64> {
        -self.rotation.transpose() * self.translation
    }

    pub fn to_camera(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * world + self.translation
    }

    pub fn to_world(&self, cam: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (cam - self.translation)
    }

    /// Heading of the optical axis projected onto the ground, measured from
    /// world +x counterclockwise. A camera looking straight up or down has
    /// no horizontal axis component and reports 0.
    pub fn ground_heading(&self) -> f64 {
        let forward = self.rotation.row(2);
        forward[1].atan2(forward[0])
    }
}

pub fn is_rotation(r: &Matrix3<f64>, tol: f64) -> bool {
    let err = (r.transpose() * r - Matrix3::identity()).abs().max();
    err <= tol && (r.determinant() - 1.0).abs() <= tol
}

/// Closest rotation in the Frobenius sense.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * v_t
}

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub id: CameraId,
    pub intrinsics: CameraIntrinsics,
    pub extrinsics: CameraExtrinsics,
}

impl Camera {
    pub fn new(id: CameraId, intrinsics: CameraIntrinsics, extrinsics: CameraExtrinsics) -> Self {
        Self { id, intrinsics, extrinsics }
    }

    pub fn center(&self) -> Vector3<f64> {
        self.extrinsics.center()
    }

    pub fn depth(&self, world: &Vector3<f64>) -> f64 {
        self.extrinsics.to_camera(world).z
    }

    pub fn project_point(&self, world: &Vector3<f64>) -> Result<Vector2<f64>, CameraError> {
        let pc = self.extrinsics.to_camera(world);
        if pc.z <= MIN_DEPTH {
            return Err(CameraError::BehindCamera { depth: pc.z });
        }
        let k = &self.intrinsics;
        Ok(Vector2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy))
    }

    /// World-frame direction of the ray through `pixel` (not normalized).
    pub fn ray_direction(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        let n = self.intrinsics.normalize(pixel);
        self.extrinsics.rotation.transpose() * Vector3::new(n.x, n.y, 1.0)
    }

    /// Intersection of the ray through `pixel` with the ground plane z = 0.
    pub fn cast_ray_to_ground(&self, pixel: &Vector2<f64>) -> Result<Vector3<f64>, CameraError> {
        self.cast_ray_to_plane(pixel, 0.0)
    }

    /// Intersection of the ray through `pixel` with the plane z = `height`,
    /// which must lie below the camera.
    pub fn cast_ray_to_plane(&self, pixel: &Vector2<f64>, height: f64) -> Result<Vector3<f64>, CameraError> {
        let c = self.center();
        let d = self.ray_direction(pixel);
        if d.z.abs() < 1e-12 {
            return Err(CameraError::RayParallelOrAscending);
        }
        let s = (height - c.z) / d.z;
        if s <= 0.0 {
            return Err(CameraError::RayParallelOrAscending);
        }
        let mut p = c + d * s;
        p.z = height;
        Ok(p)
    }

    /// Exact image-to-ground homography implied by the calibration.
    pub fn ground_homography(&self) -> Result<GroundHomography, CameraError> {
        // pixel ~ K [r1 r2 t] (x, y, 1)
        let r = &self.extrinsics.rotation;
        let t = &self.extrinsics.translation;
        let mut ground_to_image = Matrix3::zeros();
        ground_to_image.set_column(0, &r.column(0));
        ground_to_image.set_column(1, &r.column(1));
        ground_to_image.set_column(2, t);
        let ground_to_image = self.intrinsics.matrix() * ground_to_image;
        let inv = ground_to_image.try_inverse().ok_or(CameraError::SingularHomography)?;
        GroundHomography::new(inv)
    }

    /// Converts a pose expressed in this camera's frame to the world frame.
    ///
    /// The camera-frame yaw is measured relative to the camera's ground
    /// heading, so the world yaw is `yaw_c + heading`.
    pub fn camera_to_world_pose(&self, pose_cam: &Pose7DoF) -> Pose7DoF {
        let pw = self.extrinsics.to_world(&pose_cam.center());
        Pose7DoF { x: pw.x, y: pw.y, z: pw.z, yaw: wrap_angle(pose_cam.yaw + self.extrinsics.ground_heading()), ..*pose_cam }
    }

    pub fn world_to_camera_pose(&self, pose_world: &Pose7DoF) -> Pose7DoF {
        let pc = self.extrinsics.to_camera(&pose_world.center());
        Pose7DoF { x: pc.x, y: pc.y, z: pc.z, yaw: wrap_angle(pose_world.yaw - self.extrinsics.ground_heading()), ..*pose_world }
    }
}

/// A set of cameras observing the same scene.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Rig {
    pub cameras: Vec<Camera>,
}

impl Rig {
    pub fn new(cameras: Vec<Camera>) -> Result<Self, CameraError> {
        for (i, a) in cameras.iter().enumerate() {
            if cameras[..i].iter().any(|b| b.id == a.id) {
                return Err(CameraError::DegenerateConfiguration(format!("duplicate camera id {}", a.id)));
            }
            a.intrinsics.validate()?;
        }
        Ok(Self { cameras })
    }

    pub fn get(&self, id: CameraId) -> Option<&Camera> {
        self.cameras.iter().find(|c| c.id == id)
    }

    pub fn ids(&self) -> impl Iterator<Item = CameraId> + '_ {
        self.cameras.iter().map(|c| c.id)
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    /// Mean of the camera centers on the ground plane.
    pub fn ground_centroid(&self) -> Vector2<f64> {
        if self.cameras.is_empty() {
            return Vector2::zeros();
        }
        let sum: Vector3<f64> = self.cameras.iter().map(|c| c.center()).sum();
        let m = sum / self.cameras.len() as f64;
        Vector2::new(m.x, m.y)
    }
}

/// Maps homogeneous image pixels to homogeneous ground-plane points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundHomography {
    h: Matrix3<f64>,
}

impl GroundHomography {
    /// Normalizes so that `h[2][2] = 1`.
    pub fn new(h: Matrix3<f64>) -> Result<Self, CameraError> {
        let s = h[(2, 2)];
        if !s.is_finite() || s.abs() < 1e-300 {
            return Err(CameraError::SingularHomography);
        }
        let h = h / s;
        if h.determinant().abs() <= 1e-12 || !h.iter().all(|v| v.is_finite()) {
            return Err(CameraError::SingularHomography);
        }
        Ok(Self { h })
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.h
    }

    pub fn apply(&self, pixel: &Vector2<f64>) -> Result<Vector2<f64>, CameraError> {
        let p = self.h * Vector3::new(pixel.x, pixel.y, 1.0);
        if p.z.abs() < 1e-15 {
            return Err(CameraError::RayParallelOrAscending);
        }
        Ok(Vector2::new(p.x / p.z, p.y / p.z))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointCorrespondence {
    pub pixel: Vector2<f64>,
    pub world: Vector3<f64>,
}

impl PointCorrespondence {
    pub fn new(pixel: Vector2<f64>, world: Vector3<f64>) -> Self {
        Self { pixel, world }
    }
}

/// Similarity that moves the centroid to the origin and scales the mean
/// distance from it to `target` (Hartley normalization).
fn hartley_2d(points: &[Vector2<f64>]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let c: Vector2<f64> = points.iter().sum::<Vector2<f64>>() / n;
    let mean_dist = points.iter().map(|p| (p - c).norm()).sum::<f64>() / n;
    let s = if mean_dist > 0.0 { 2f64.sqrt() / mean_dist } else { 1.0 };
    Matrix3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0)
}

fn hartley_3d(points: &[Vector3<f64>]) -> nalgebra::Matrix4<f64> {
    let n = points.len() as f64;
    let c: Vector3<f64> = points.iter().sum::<Vector3<f64>>() / n;
    let mean_dist = points.iter().map(|p| (p - c).norm()).sum::<f64>() / n;
    let s = if mean_dist > 0.0 { 3f64.sqrt() / mean_dist } else { 1.0 };
    let mut t = nalgebra::Matrix4::identity() * s;
    t[(3, 3)] = 1.0;
    t[(0, 3)] = -s * c.x;
    t[(1, 3)] = -s * c.y;
    t[(2, 3)] = -s * c.z;
    t
}

fn apply_h(h: &Matrix3<f64>, p: &Vector2<f64>) -> Vector2<f64> {
    let q = h * Vector3::new(p.x, p.y, 1.0);
    Vector2::new(q.x / q.z, q.y / q.z)
}

/// Null vector of `a` by SVD, with a rank check on the two smallest
/// singular values. Rows are zero-padded so the SVD is at least square.
fn null_vector(a: DMatrix<f64>, what: &str) -> Result<Vec<f64>, CameraError> {
    let cols = a.ncols();
    let a = if a.nrows() < cols {
        let mut padded = DMatrix::zeros(cols, cols);
        padded.rows_mut(0, a.nrows()).copy_from(&a);
        padded
    } else {
        a
    };
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| CameraError::DegenerateConfiguration("svd failed".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let largest = svd.singular_values[order[0]];
    let second_smallest = svd.singular_values[order[order.len() - 2]];
    if !(largest > 0.0) || second_smallest <= 1e-9 * largest {
        return Err(CameraError::DegenerateConfiguration(format!("{what} system is rank deficient")));
    }
    let smallest = order[order.len() - 1];
    Ok(v_t.row(smallest).iter().copied().collect())
}

/// DLT estimate of the homography taking `src` points to `dst` points.
fn dlt_homography(src: &[Vector2<f64>], dst: &[Vector2<f64>]) -> Result<Matrix3<f64>, CameraError> {
    if src.len() < 4 {
        return Err(CameraError::NotEnoughPoints { needed: 4, got: src.len() });
    }
    let ts = hartley_2d(src);
    let td = hartley_2d(dst);
    let mut a = DMatrix::zeros(2 * src.len(), 9);
    for (i, (s, d)) in src.iter().zip(dst).enumerate() {
        let s = apply_h(&ts, s);
        let d = apply_h(&td, d);
        let row0 = [s.x, s.y, 1.0, 0.0, 0.0, 0.0, -d.x * s.x, -d.x * s.y, -d.x];
        let row1 = [0.0, 0.0, 0.0, s.x, s.y, 1.0, -d.y * s.x, -d.y * s.y, -d.y];
        for j in 0..9 {
            a[(2 * i, j)] = row0[j];
            a[(2 * i + 1, j)] = row1[j];
        }
    }
    let h = null_vector(a, "homography")?;
    let hn = Matrix3::from_row_slice(&h);
    let td_inv = td.try_inverse().ok_or(CameraError::SingularHomography)?;
    Ok(td_inv * hn * ts)
}

/// Linear least-squares (DLT) fit of the pixel-to-ground homography from
/// correspondences whose world points lie on z = 0.
pub fn solve_homography(correspondences: &[PointCorrespondence]) -> Result<GroundHomography, CameraError> {
    if correspondences.len() < 4 {
        return Err(CameraError::NotEnoughPoints { needed: 4, got: correspondences.len() });
    }
    let src: Vec<_> = correspondences.iter().map(|c| c.pixel).collect();
    let dst: Vec<_> = correspondences.iter().map(|c| c.world.xy()).collect();
    let h = dlt_homography(&src, &dst)?;
    GroundHomography::new(h).map_err(|_| CameraError::DegenerateConfiguration("singular homography".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PnpInit {
    /// Planar initialization when the world points are coplanar, DLT otherwise.
    #[default]
    Auto,
    /// Six-or-more point DLT; fails on coplanar points.
    Dlt,
    /// Homography decomposition; needs four or more coplanar points.
    Planar,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PnpOptions {
    pub init: PnpInit,
    pub max_iters: usize,
    /// RMS reprojection error (px) accepted when the iteration cap is hit.
    pub tolerance: f64,
}

impl Default for PnpOptions {
    fn default() -> Self {
        Self { init: PnpInit::Auto, max_iters: 100, tolerance: 1e-6 }
    }
}

pub fn solve_pnp(correspondences: &[PointCorrespondence], intrinsics: &CameraIntrinsics) -> Result<CameraExtrinsics, CameraError> {
    solve_pnp_with(correspondences, intrinsics, &PnpOptions::default())
}

/// Perspective-n-point: linear initialization followed by Levenberg-Marquardt
/// on the squared reprojection error.
pub fn solve_pnp_with(correspondences: &[PointCorrespondence], intrinsics: &CameraIntrinsics, opts: &PnpOptions) -> Result<CameraExtrinsics, CameraError> {
    let n = correspondences.len();
    let planar = plane_frame(correspondences).is_some();
    let init = match opts.init {
        PnpInit::Auto if planar => PnpInit::Planar,
        PnpInit::Auto => PnpInit::Dlt,
        other => other,
    };
    let initial = match init {
        PnpInit::Planar => {
            if n < 4 {
                return Err(CameraError::NotEnoughPoints { needed: 4, got: n });
            }
            planar_init(correspondences, intrinsics)?
        }
        _ => {
            if n < 6 {
                return Err(CameraError::NotEnoughPoints { needed: 6, got: n });
            }
            dlt_init(correspondences, intrinsics)?
        }
    };
    refine_extrinsics(correspondences, intrinsics, initial, opts)
}

/// Orthonormal frame (columns e1, e2, normal) and centroid of the world points
/// when they are coplanar.
fn plane_frame(correspondences: &[PointCorrespondence]) -> Option<(Matrix3<f64>, Vector3<f64>)> {
    let n = correspondences.len();
    if n < 3 {
        return None;
    }
    let c: Vector3<f64> = correspondences.iter().map(|p| p.world).sum::<Vector3<f64>>() / n as f64;
    let mut scatter = Matrix3::zeros();
    for p in correspondences {
        let d = p.world - c;
        scatter += d * d.transpose();
    }
    let eig = scatter.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let largest = eig.eigenvalues[order[0]];
    let smallest = eig.eigenvalues[order[2]];
    if !(largest > 0.0) || smallest.max(0.0).sqrt() > 1e-6 * largest.sqrt() {
        return None;
    }
    let e1: Vector3<f64> = eig.eigenvectors.column(order[0]).into();
    let e2: Vector3<f64> = eig.eigenvectors.column(order[1]).into();
    let e3 = e1.cross(&e2);
    Some((Matrix3::from_columns(&[e1, e2, e3]), c))
}

fn planar_init(correspondences: &[PointCorrespondence], intrinsics: &CameraIntrinsics) -> Result<CameraExtrinsics, CameraError> {
    let (frame, centroid) = plane_frame(correspondences).ok_or_else(|| CameraError::DegenerateConfiguration("world points are not coplanar".into()))?;
    let local: Vec<Vector2<f64>> = correspondences
        .iter()
        .map(|p| {
            let d = frame.transpose() * (p.world - centroid);
            Vector2::new(d.x, d.y)
        })
        .collect();
    let normalized: Vec<Vector2<f64>> = correspondences.iter().map(|p| intrinsics.normalize(&p.pixel)).collect();
    let h = dlt_homography(&local, &normalized)?;
    let mut r1: Vector3<f64> = h.column(0).into();
    let mut r2: Vector3<f64> = h.column(1).into();
    let mut t: Vector3<f64> = h.column(2).into();
    let scale = 2.0 / (r1.norm() + r2.norm());
    r1 *= scale;
    r2 *= scale;
    t *= scale;
    if t.z < 0.0 {
        r1 = -r1;
        r2 = -r2;
        t = -t;
    }
    let r_local = nearest_rotation(&Matrix3::from_columns(&[r1, r2, r1.cross(&r2)]));
    let rotation = r_local * frame.transpose();
    let translation = t - rotation * centroid;
    Ok(CameraExtrinsics { rotation, translation })
}

fn dlt_init(correspondences: &[PointCorrespondence], intrinsics: &CameraIntrinsics) -> Result<CameraExtrinsics, CameraError> {
    let world: Vec<Vector3<f64>> = correspondences.iter().map(|c| c.world).collect();
    let pixels: Vec<Vector2<f64>> = correspondences.iter().map(|c| c.pixel).collect();
    let tw = hartley_3d(&world);
    let tp = hartley_2d(&pixels);
    let mut a = DMatrix::zeros(2 * world.len(), 12);
    for (i, (w, p)) in world.iter().zip(&pixels).enumerate() {
        let wh = tw * w.push(1.0);
        let p = apply_h(&tp, p);
        for j in 0..4 {
            a[(2 * i, j)] = wh[j];
            a[(2 * i, 8 + j)] = -p.x * wh[j];
            a[(2 * i + 1, 4 + j)] = wh[j];
            a[(2 * i + 1, 8 + j)] = -p.y * wh[j];
        }
    }
    let v = null_vector(a, "DLT")?;
    let pn = nalgebra::Matrix3x4::from_row_slice(&v);
    let tp_inv = tp.try_inverse().ok_or(CameraError::SingularHomography)?;
    let k_inv = intrinsics.matrix().try_inverse().ok_or(CameraError::SingularHomography)?;
    let mut m = k_inv * tp_inv * pn * tw;
    // Choose the sign that puts the points in front of the camera.
    let positive = world.iter().filter(|w| (m.row(2) * w.push(1.0))[0] > 0.0).count();
    if positive * 2 < world.len() {
        m = -m;
    }
    let a3 = m.fixed_view::<3, 3>(0, 0).into_owned();
    let svd = a3.svd(false, false);
    let scale = svd.singular_values.mean();
    if !(scale > 0.0) {
        return Err(CameraError::DegenerateConfiguration("DLT produced a zero camera matrix".into()));
    }
    let rotation = nearest_rotation(&(a3 / scale));
    let translation: Vector3<f64> = m.column(3).into_owned() / scale;
    Ok(CameraExtrinsics { rotation, translation })
}

fn reprojection_residuals(correspondences: &[PointCorrespondence], intrinsics: &CameraIntrinsics, ext: &CameraExtrinsics) -> Option<Vec<f64>> {
    let mut r = Vec::with_capacity(2 * correspondences.len());
    for c in correspondences {
        let pc = ext.to_camera(&c.world);
        if pc.z <= MIN_DEPTH {
            return None;
        }
        r.push(intrinsics.fx * pc.x / pc.z + intrinsics.cx - c.pixel.x);
        r.push(intrinsics.fy * pc.y / pc.z + intrinsics.cy - c.pixel.y);
    }
    Some(r)
}

fn refine_extrinsics(
    correspondences: &[PointCorrespondence],
    intrinsics: &CameraIntrinsics,
    initial: CameraExtrinsics,
    opts: &PnpOptions,
) -> Result<CameraExtrinsics, CameraError> {
    let n = correspondences.len();
    let cost_of = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>();
    let mut ext = initial;
    let mut residuals = reprojection_residuals(correspondences, intrinsics, &ext)
        .ok_or_else(|| CameraError::DegenerateConfiguration("initial estimate places points behind the camera".into()))?;
    let mut cost = cost_of(&residuals);
    let mut damping = 1e-3;
    let (fx, fy) = (intrinsics.fx, intrinsics.fy);

    for _ in 0..opts.max_iters {
        if cost <= 1e-30 {
            return Ok(ext);
        }
        // Left-multiplied rotation increment, then translation.
        let mut jtj = nalgebra::Matrix6::<f64>::zeros();
        let mut jtr = nalgebra::Vector6::<f64>::zeros();
        for (i, c) in correspondences.iter().enumerate() {
            let rx = ext.rotation * c.world;
            let pc = rx + ext.translation;
            let iz = 1.0 / pc.z;
            let du = Vector3::new(fx * iz, 0.0, -fx * pc.x * iz * iz);
            let dv = Vector3::new(0.0, fy * iz, -fy * pc.y * iz * iz);
            // d(pc)/d(omega) = -[rx]_x
            let skew = -rx.cross_matrix();
            for (row, d) in [(2 * i, du), (2 * i + 1, dv)] {
                let jr = d.transpose() * skew;
                let j = nalgebra::Vector6::new(jr[0], jr[1], jr[2], d.x, d.y, d.z);
                jtj += j * j.transpose();
                jtr += j * residuals[row];
            }
        }
        let mut accepted = false;
        while damping < 1e16 {
            let mut a = jtj;
            for k in 0..6 {
                a[(k, k)] += damping * jtj[(k, k)].max(1e-12);
            }
            let Some(step) = a.lu().solve(&(-jtr)) else {
                damping *= 10.0;
                continue;
            };
            let omega = Vector3::new(step[0], step[1], step[2]);
            let candidate = CameraExtrinsics {
                rotation: nearest_rotation(&(Rotation3::new(omega).into_inner() * ext.rotation)),
                translation: ext.translation + Vector3::new(step[3], step[4], step[5]),
            };
            match reprojection_residuals(correspondences, intrinsics, &candidate) {
                Some(r) if cost_of(&r) < cost => {
                    let new_cost = cost_of(&r);
                    let decrease = cost - new_cost;
                    ext = candidate;
                    residuals = r;
                    cost = new_cost;
                    damping = (damping * 0.1).max(1e-12);
                    accepted = true;
                    let scale = 1.0 + ext.translation.norm();
                    if decrease <= 1e-14 * cost || step.norm() <= 1e-13 * scale {
                        return Ok(ext);
                    }
                    break;
                }
                _ => damping *= 10.0,
            }
        }
        if !accepted {
            // No descent direction left: at a minimum to machine precision.
            return Ok(ext);
        }
    }
    let rms = (cost / n as f64).sqrt();
    if rms <= opts.tolerance {
        Ok(ext)
    } else {
        Err(CameraError::NoConvergence { iterations: opts.max_iters, rms })
    }
}

/// RMS reprojection error of `ext` over the correspondences, in pixels.
pub fn reprojection_rms(correspondences: &[PointCorrespondence], intrinsics: &CameraIntrinsics, ext: &CameraExtrinsics) -> Option<f64> {
    let r = reprojection_residuals(correspondences, intrinsics, ext)?;
    Some((r.iter().map(|v| v * v).sum::<f64>() / correspondences.len().max(1) as f64).sqrt())
}

/// Rotation angle (rad) between two rotations.
pub fn rotation_angle_between(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let c = ((a.transpose() * b).trace() - 1.0) / 2.0;
    c.clamp(-1.0, 1.0).acos()
}
