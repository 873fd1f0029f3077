//! Direct 7DoF pose refinement against multi-view detections.
//!
//! Minimizes the reprojection GIoU term of one pose over its annotation.
//! Nelder-Mead is the default since the term has kinks wherever a box edge
//! crosses an image border or a detection edge; gradient descent with
//! backtracking is available for smooth regions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::association::MultiViewAnnotation;
use crate::box3d::{angle_diff, wrap_angle, Pose7DoF};
use crate::camera::{CameraId, Rig};
use crate::mvloss::{pose_from_params, pose_params, reprojection_giou_term, LossError};

pub const DIM_BOUNDS: (f64, f64) = (0.5, 30.0);
pub const Z_BOUNDS: (f64, f64) = (0.0, 5.0);
/// Consecutive failed backtracking steps before gradient descent gives up.
pub const MAX_BACKTRACK_FAILURES: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RefineError {
    #[error("initial pose has no usable view")]
    NoUsableViews,
    #[error("invalid refine config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    NelderMead,
    GradientDescent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub max_iters: usize,
    /// Stop once the term falls to this value.
    pub term_tol: f64,
    /// Stop once steps (in parameter-scale units) fall below this.
    pub step_tol: f64,
    pub optimizer: Optimizer,
    /// Scales of (x, y, z, l, w, h, yaw); also the initial simplex steps.
    pub scales: [f64; 7],
    /// Nelder-Mead restarts from the best vertex after a simplex collapses.
    pub max_restarts: usize,
    /// Retry from the initial pose at several heading offsets when the
    /// first run ends with the term above `restart_above`.
    pub multi_start: bool,
    pub restart_above: f64,
    pub exclude_camera: Option<CameraId>,
    pub keep_trajectory: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            max_iters: 2000,
            term_tol: 1e-8,
            step_tol: 1e-6,
            optimizer: Optimizer::NelderMead,
            scales: [0.5, 0.5, 0.2, 0.2, 0.2, 0.2, 5f64.to_radians()],
            max_restarts: 8,
            multi_start: true,
            restart_above: 1e-3,
            exclude_camera: None,
            keep_trajectory: false,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<(), RefineError> {
        if self.max_iters == 0 {
            return Err(RefineError::InvalidConfig("max_iters must be at least 1".into()));
        }
        if !(self.term_tol > 0.0 && self.step_tol > 0.0) {
            return Err(RefineError::InvalidConfig("tolerances must be positive".into()));
        }
        if self.scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(RefineError::InvalidConfig("scales must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    TermTolerance,
    StepTolerance,
    MaxIterations,
    Stalled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineResult {
    pub pose: Pose7DoF,
    pub initial_term: f64,
    pub final_term: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub restarts: usize,
    pub converged: bool,
    pub stop_reason: StopReason,
    /// Best term after each iteration, when requested.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trajectory: Vec<f64>,
}

struct Objective<'a> {
    rig: &'a Rig,
    annotation: &'a MultiViewAnnotation,
    exclude: Option<CameraId>,
    evaluations: usize,
}

impl Objective<'_> {
    /// Unscorable poses count as +∞ so the optimizer never accepts them.
    fn eval(&mut self, v: &[f64; 7]) -> f64 {
        self.evaluations += 1;
        let pose = pose_from_params(v);
        if pose.validate().is_err() {
            return f64::INFINITY;
        }
        reprojection_giou_term(self.rig, &pose, self.annotation, self.exclude).map_or(f64::INFINITY, |t| t.value)
    }
}

fn project_bounds(v: &mut [f64; 7]) {
    v[2] = v[2].clamp(Z_BOUNDS.0, Z_BOUNDS.1);
    for d in &mut v[3..6] {
        *d = d.clamp(DIM_BOUNDS.0, DIM_BOUNDS.1);
    }
}

fn finish(mut v: [f64; 7]) -> Pose7DoF {
    v[6] = wrap_angle(v[6]);
    pose_from_params(&v)
}

/// Refines `init` against the detections of `annotation`.
pub fn refine_pose(rig: &Rig, init: &Pose7DoF, annotation: &MultiViewAnnotation, cfg: &RefineConfig) -> Result<RefineResult, RefineError> {
    cfg.validate()?;
    let mut obj = Objective { rig, annotation, exclude: cfg.exclude_camera, evaluations: 0 };
    let mut start = pose_params(init);
    project_bounds(&mut start);
    let initial_term = match reprojection_giou_term(rig, &pose_from_params(&start), annotation, cfg.exclude_camera) {
        Ok(t) => t.value,
        Err(LossError::NoUsableViews) | Err(_) => return Err(RefineError::NoUsableViews),
    };
    obj.evaluations = 1;
    if initial_term <= cfg.term_tol {
        return Ok(RefineResult {
            pose: finish(start),
            initial_term,
            final_term: initial_term,
            iterations: 0,
            evaluations: obj.evaluations,
            restarts: 0,
            converged: true,
            stop_reason: StopReason::TermTolerance,
            trajectory: Vec::new(),
        });
    }
    let mut res = match cfg.optimizer {
        Optimizer::NelderMead => nelder_mead(&mut obj, start, initial_term, cfg),
        Optimizer::GradientDescent => gradient_descent(&mut obj, start, initial_term, cfg),
    };
    res.initial_term = initial_term;
    res.evaluations = obj.evaluations;
    res.pose = equivalent_near(&res.pose, init);
    Ok(res)
}

/// Length, width and height of the box placed when no initial pose is given.
pub const DEFAULT_DIMS: [f64; 3] = [4.5, 1.8, 1.5];

/// A starting pose for an annotation with no prior: a default-sized box
/// resting on the ground at the cluster centroid, turned to whichever of
/// twelve headings over a half turn scores best.
pub fn initial_pose(rig: &Rig, annotation: &MultiViewAnnotation, exclude: Option<CameraId>) -> Option<Pose7DoF> {
    let [l, w, h] = DEFAULT_DIMS;
    let [x, y] = annotation.centroid;
    (0..12)
        .map(|k| Pose7DoF { x, y, z: h / 2.0, l, w, h, yaw: wrap_angle(k as f64 * std::f64::consts::PI / 12.0) })
        .filter_map(|p| reprojection_giou_term(rig, &p, annotation, exclude).ok().map(|t| (p, t.value)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(p, _)| p)
}

/// The same solid written with the heading closest to `reference`'s.
/// A box is unchanged by a half turn, and by a quarter turn that swaps
/// length and width; the quarter-turn forms are used only if `reference`
/// itself has length < width.
pub fn equivalent_near(pose: &Pose7DoF, reference: &Pose7DoF) -> Pose7DoF {
    let want_long = reference.l >= reference.w;
    (0..4)
        .map(|k| {
            let yaw = wrap_angle(pose.yaw + k as f64 * std::f64::consts::FRAC_PI_2);
            if k % 2 == 1 {
                Pose7DoF { l: pose.w, w: pose.l, yaw, ..*pose }
            } else {
                Pose7DoF { yaw, ..*pose }
            }
        })
        .filter(|p| (p.l >= p.w) == want_long || pose.l == pose.w)
        .min_by(|a, b| angle_diff(a.yaw, reference.yaw).abs().total_cmp(&angle_diff(b.yaw, reference.yaw).abs()))
        .unwrap_or(*pose)
}

struct Progress {
    iterations: usize,
    trajectory: Vec<f64>,
    keep: bool,
}

impl Progress {
    fn record(&mut self, best: f64) {
        self.iterations += 1;
        if self.keep {
            self.trajectory.push(best);
        }
    }
}

fn scaled_dist(a: &[f64; 7], b: &[f64; 7], scales: &[f64; 7]) -> f64 {
    (0..7).map(|i| ((a[i] - b[i]) / scales[i]).powi(2)).sum::<f64>().sqrt()
}

/// Parameter subsets optimized in turn: the footprint position first, then
/// position and heading, then everything. Starting with all seven lets
/// size and heading absorb a translation error and settle in a poor
/// local minimum.
const STAGES: [&[usize]; 3] = [&[0, 1], &[0, 1, 6], &[0, 1, 2, 3, 4, 5, 6]];

/// Heading offsets (deg) of the extra starts tried when the first run ends
/// above tolerance.
pub const YAW_STARTS_DEG: [f64; 6] = [15.0, -15.0, 30.0, -30.0, 45.0, -45.0];

fn nelder_mead(obj: &mut Objective, start: [f64; 7], f_start: f64, cfg: &RefineConfig) -> RefineResult {
    let mut progress = Progress { iterations: 0, trajectory: Vec::new(), keep: cfg.keep_trajectory };
    let (mut best, mut reason, mut restarts) = staged(obj, (start, f_start), cfg, &mut progress);
    if cfg.multi_start {
        for off in YAW_STARTS_DEG {
            if best.1 <= cfg.restart_above {
                break;
            }
            let mut s = start;
            s[6] += off.to_radians();
            let f = obj.eval(&s);
            if !f.is_finite() {
                continue;
            }
            // Each start has its own iteration budget.
            let mut local = Progress { iterations: 0, trajectory: Vec::new(), keep: false };
            let (b, r, k) = staged(obj, (s, f), cfg, &mut local);
            restarts += k + 1;
            for _ in 0..local.iterations {
                progress.record(best.1.min(b.1));
            }
            if b.1 < best.1 {
                best = b;
                reason = r;
            }
        }
    }
    RefineResult {
        pose: finish(best.0),
        initial_term: f_start,
        final_term: best.1,
        iterations: progress.iterations,
        evaluations: 0,
        restarts,
        converged: reason != StopReason::MaxIterations,
        stop_reason: reason,
        trajectory: progress.trajectory,
    }
}

fn staged(obj: &mut Objective, mut best: ([f64; 7], f64), cfg: &RefineConfig, progress: &mut Progress) -> (([f64; 7], f64), StopReason, usize) {
    let mut restarts = 0;
    let mut reason = StopReason::StepTolerance;
    for active in STAGES {
        let (b, r, k) = nm_stage(obj, best, active, cfg, progress);
        best = b;
        reason = r;
        restarts += k;
        if matches!(r, StopReason::TermTolerance | StopReason::MaxIterations) {
            break;
        }
    }
    (best, reason, restarts)
}

/// Restarted Nelder-Mead over the `active` parameters.
fn nm_stage(
    obj: &mut Objective,
    mut best: ([f64; 7], f64),
    active: &[usize],
    cfg: &RefineConfig,
    progress: &mut Progress,
) -> (([f64; 7], f64), StopReason, usize) {
    let m = active.len();
    let n = m as f64;
    // Dimension-adaptive coefficients; the classic ones stall beyond a few
    // dimensions.
    let (alpha, beta, gamma, delta) = (1.0, 1.0 + 2.0 / n, 0.75 - 1.0 / (2.0 * n), 1.0 - 1.0 / n);
    let mut restarts = 0;
    // Step size in scale units; each restart that fails to improve halves it.
    let mut step = 1.0;

    loop {
        let mut simplex: Vec<([f64; 7], f64)> = vec![best];
        for &i in active {
            let mut v = best.0;
            v[i] += step * cfg.scales[i];
            project_bounds(&mut v);
            if v == best.0 {
                v[i] -= step * cfg.scales[i];
                project_bounds(&mut v);
            }
            let f = obj.eval(&v);
            simplex.push((v, f));
        }
        let before = best.1;

        let reason = loop {
            simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
            if simplex[0].1 < best.1 {
                best = simplex[0];
            }
            if best.1 <= cfg.term_tol {
                break StopReason::TermTolerance;
            }
            let size = simplex[1..].iter().map(|(v, _)| scaled_dist(v, &simplex[0].0, &cfg.scales)).fold(0.0, f64::max);
            if size <= cfg.step_tol {
                break StopReason::StepTolerance;
            }
            if progress.iterations >= cfg.max_iters {
                break StopReason::MaxIterations;
            }

            let mut centroid = simplex[0].0;
            for &i in active {
                centroid[i] = simplex[..m].iter().map(|(v, _)| v[i]).sum::<f64>() / n;
            }
            let worst = simplex[m].0;
            let along = |t: f64| {
                let mut p = centroid;
                for &i in active {
                    p[i] = centroid[i] + t * (worst[i] - centroid[i]);
                }
                project_bounds(&mut p);
                p
            };
            let xr = along(-alpha);
            let fr = obj.eval(&xr);
            if fr < simplex[0].1 {
                let xe = along(-alpha * beta);
                let fe = obj.eval(&xe);
                simplex[m] = if fe < fr { (xe, fe) } else { (xr, fr) };
            } else if fr < simplex[m - 1].1 {
                simplex[m] = (xr, fr);
            } else {
                let xc = if fr < simplex[m].1 { along(-alpha * gamma) } else { along(gamma) };
                let fc = obj.eval(&xc);
                if fc < simplex[m].1.min(fr) {
                    simplex[m] = (xc, fc);
                } else {
                    let x0 = simplex[0].0;
                    for (v, f) in simplex.iter_mut().skip(1) {
                        for &i in active {
                            v[i] = x0[i] + delta * (v[i] - x0[i]);
                        }
                        project_bounds(v);
                        *f = obj.eval(v);
                    }
                }
            }
            let iter_best = simplex.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
            progress.record(iter_best.min(best.1));
        };

        if reason == StopReason::StepTolerance && restarts < cfg.max_restarts {
            if best.1 >= before - cfg.term_tol {
                step *= 0.5;
            }
            if step * 0.5 > cfg.step_tol {
                restarts += 1;
                continue;
            }
        }
        return (best, reason, restarts);
    }
}

/// Central differences without a smoothness guard; kinks only degrade the
/// search direction, and backtracking still enforces descent.
fn numeric_gradient(obj: &mut Objective, v: &[f64; 7], scales: &[f64; 7]) -> [f64; 7] {
    let mut g = [0.0; 7];
    for i in 0..7 {
        let h = 1e-4 * scales[i];
        let (mut a, mut b) = (*v, *v);
        a[i] += h;
        b[i] -= h;
        let (fa, fb) = (obj.eval(&a), obj.eval(&b));
        g[i] = if fa.is_finite() && fb.is_finite() { (fa - fb) / (2.0 * h) } else { 0.0 };
    }
    g
}

fn gradient_descent(obj: &mut Objective, start: [f64; 7], f_start: f64, cfg: &RefineConfig) -> RefineResult {
    let mut progress = Progress { iterations: 0, trajectory: Vec::new(), keep: cfg.keep_trajectory };
    let (mut x, mut fx) = (start, f_start);
    let mut lr = 1.0;
    let mut failures = 0;
    let reason = loop {
        if fx <= cfg.term_tol {
            break StopReason::TermTolerance;
        }
        if progress.iterations >= cfg.max_iters {
            break StopReason::MaxIterations;
        }
        let g = numeric_gradient(obj, &x, &cfg.scales);
        // Preconditioned by the squared scales so steps are in scale units.
        let dir: [f64; 7] = std::array::from_fn(|i| -g[i] * cfg.scales[i] * cfg.scales[i]);
        let slope: f64 = (0..7).map(|i| g[i] * dir[i]).sum();
        if slope >= 0.0 {
            break StopReason::StepTolerance;
        }
        let mut accepted = false;
        let mut step_norm = 0.0;
        while failures < MAX_BACKTRACK_FAILURES {
            let mut y: [f64; 7] = std::array::from_fn(|i| x[i] + lr * dir[i]);
            project_bounds(&mut y);
            let fy = obj.eval(&y);
            if fy <= fx + 1e-4 * lr * slope {
                step_norm = scaled_dist(&x, &y, &cfg.scales);
                x = y;
                fx = fy;
                accepted = true;
                failures = 0;
                lr *= 2.0;
                break;
            }
            failures += 1;
            lr *= 0.5;
        }
        progress.record(fx);
        if !accepted {
            break StopReason::Stalled;
        }
        if step_norm <= cfg.step_tol {
            break StopReason::StepTolerance;
        }
    };
    RefineResult {
        pose: finish(x),
        initial_term: f_start,
        final_term: fx,
        iterations: progress.iterations,
        evaluations: 0,
        restarts: 0,
        converged: matches!(reason, StopReason::TermTolerance | StopReason::StepTolerance),
        stop_reason: reason,
        trajectory: progress.trajectory,
    }
}
