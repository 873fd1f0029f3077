//! Geometry for weakly supervised multi-view 7DoF vehicle pose estimation.
//!
//! The crate covers the full chain from calibrated cameras to scored poses:
//!
//! - [`camera`]: pinhole projection, ground-plane ray casting, homography
//!   and perspective-n-point calibration.
//! - [`box3d`]: 7DoF boxes, tight 2D reprojections and IoU/GIoU measures.
//! - [`association`]: grouping per-camera detections into multi-view
//!   vehicles with constrained DP-means.
//! - [`sync`]: frame offsets from traffic-light change events.
//! - [`mvloss`]: the multi-view reprojection loss and its gradient.
//! - [`refine`]: direct pose optimization against that loss.
//! - [`metrics`]: ATE / ASE / AOE / IoU evaluation.
//! - [`simulator`]: synthetic rigs, vehicles and detections with ground truth.
//! - [`io`]: the JSON file formats shared with the command line tool.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod association;
pub mod box3d;
pub mod camera;
pub mod io;
pub mod metrics;
pub mod mvloss;
pub mod refine;
pub mod simulator;
pub mod sync;

pub use association::{build_annotations, dp_means, AssocConfig, Detection2D, MultiViewAnnotation};
pub use box3d::{giou_2d, iou_2d, iou_3d, iou_bev, project_to_box2d, BevRect, Box2D, Pose7DoF};
pub use camera::{solve_homography, solve_pnp, Camera, CameraExtrinsics, CameraId, CameraIntrinsics, GroundHomography, PointCorrespondence, Rig};
pub use metrics::{evaluate, EvalReport, MatchingConfig};
pub use mvloss::{multi_view_loss, reprojection_giou_term, LossBreakdown};
pub use refine::{refine_pose, RefineConfig, RefineResult};
pub use simulator::{generate_scene, render_detections, NoiseSpec, RigSpec, Scene, SceneSpec};
