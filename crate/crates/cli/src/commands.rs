use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use mvgeo::association::{build_annotations, Anchor, AssocConfig, Detection2D};
use mvgeo::io::{parse_pose_frames, to_json_string, AnnotationsFile, CalibrationFile, DetectionsFile, PoseFrame, SceneFile, TimelinesFile, VehicleRecord};
use mvgeo::metrics::{evaluate, BucketBy, BucketSpec, MatchingConfig, MetricsError};
use mvgeo::mvloss::match_poses_to_annotations;
use mvgeo::refine::{initial_pose, refine_pose, Optimizer, RefineConfig, RefineResult};
use mvgeo::simulator::{generate_scene, render_detections, scene_file, NoiseSpec, RigSpec, SceneSpec};
use mvgeo::sync::{apply_offsets, estimate_offsets, extract_events, FrameOffsetMap};
use mvgeo::{CameraId, Pose7DoF, Rig};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{input, internal, CliError};
use crate::service;

#[derive(Debug, Parser)]
#[command(name = "mvgeo", version, about = "Multi-view 7DoF vehicle pose tools")]
pub struct Cli {
    /// Worker threads for per-frame work; 0 uses one per logical core.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic rig, vehicles and detections.
    Simulate(SimulateArgs),
    /// Group per-camera detections into multi-view annotations.
    Annotate(AnnotateArgs),
    /// Estimate camera frame offsets from traffic-light changes.
    Sync(SyncArgs),
    /// Refine 7DoF poses against the annotations' detections.
    Refine(RefineArgs),
    /// Score predicted poses against ground truth.
    Eval(EvalArgs),
    /// Run the annotation service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 4)]
    pub cameras: usize,
    #[arg(long, default_value_t = 8)]
    pub vehicles: usize,
    #[arg(long, default_value_t = 1)]
    pub frames: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Radius of the disc vehicles start in (m).
    #[arg(long, default_value_t = 12.0)]
    pub radius: f64,
    /// Minimum footprint gap between vehicles (m).
    #[arg(long, default_value_t = 1.0)]
    pub min_separation: f64,
    #[arg(long, default_value_t = 12.5)]
    pub fps: f64,
    /// Upper bound of the uniform per-vehicle speed (m/s).
    #[arg(long, default_value_t = 5.0)]
    pub max_speed: f64,
    /// Gaussian σ added to every box edge (px).
    #[arg(long, default_value_t = 0.0)]
    pub pixel_noise: f64,
    #[arg(long, default_value_t = 0.0)]
    pub drop: f64,
    #[arg(long)]
    pub occlusion: bool,
    /// Per-camera frame offsets, one per camera, e.g. `0,3,-2,16`.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub offsets: Vec<i64>,
    /// Light changes are observed up to this many frames early or late.
    #[arg(long, default_value_t = 0)]
    pub light_jitter: i64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub calib_out: Option<PathBuf>,
    #[arg(long)]
    pub detections_out: Option<PathBuf>,
    #[arg(long)]
    pub gt_out: Option<PathBuf>,
    #[arg(long)]
    pub timelines_out: Option<PathBuf>,
}

/// Where camera calibration comes from.
#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct CalibSource {
    #[arg(long)]
    pub calib: Option<PathBuf>,
    /// A scene file written by `simulate`.
    #[arg(long)]
    pub scene: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AnchorArg {
    MidHeight,
    BottomCenter,
    Homography,
}

impl From<AnchorArg> for Anchor {
    fn from(a: AnchorArg) -> Self {
        match a {
            AnchorArg::MidHeight => Anchor::BoxCenterMidHeight,
            AnchorArg::BottomCenter => Anchor::BottomCenter,
            AnchorArg::Homography => Anchor::BoxCenterHomography,
        }
    }
}

#[derive(Debug, Args)]
pub struct AnnotateArgs {
    #[command(flatten)]
    pub source: CalibSource,
    /// Detections file; defaults to the scene's detections.
    #[arg(long)]
    pub detections: Option<PathBuf>,
    /// Offsets from `sync`, applied to detection frames first.
    #[arg(long)]
    pub offsets: Option<PathBuf>,
    #[arg(long, default_value_t = 2.0, allow_hyphen_values = true)]
    pub lambda: f64,
    #[arg(long, default_value_t = 2)]
    pub min_views: usize,
    #[arg(long, default_value_t = 0.5)]
    pub min_score: f64,
    #[arg(long, value_enum, default_value_t = AnchorArg::MidHeight)]
    pub anchor: AnchorArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SyncArgs {
    #[arg(long, conflicts_with = "scene", required_unless_present = "scene")]
    pub timelines: Option<PathBuf>,
    #[arg(long)]
    pub scene: Option<PathBuf>,
    /// Reference camera; defaults to the lowest id.
    #[arg(long)]
    pub reference: Option<u32>,
    /// Largest frame difference at which two light changes still match.
    #[arg(long, default_value_t = 40)]
    pub window: i64,
    #[arg(long)]
    pub out: PathBuf,
    /// Detections to re-index; defaults to the scene's detections.
    #[arg(long)]
    pub detections: Option<PathBuf>,
    /// Where to write the re-indexed detections.
    #[arg(long)]
    pub aligned_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OptimizerArg {
    NelderMead,
    GradientDescent,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    #[command(flatten)]
    pub source: CalibSource,
    #[arg(long)]
    pub annotations: PathBuf,
    /// Initial poses, matched to annotations by nearest centroid.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, default_value_t = 2.0)]
    pub match_radius: f64,
    #[arg(long, value_enum, default_value_t = OptimizerArg::NelderMead)]
    pub optimizer: OptimizerArg,
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Leave this camera's detection out of the objective.
    #[arg(long)]
    pub exclude_camera: Option<u32>,
    #[arg(long)]
    pub include_single_view: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-pose optimizer diagnostics.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BucketArg {
    Visibility,
    Depth,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    /// Pose frames or a scene file.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, default_value_t = 2.0)]
    pub threshold: f64,
    /// Orientation error modulo 180° instead of over the full circle.
    #[arg(long)]
    pub half_circle_aoe: bool,
    #[arg(long, value_enum, requires = "edges")]
    pub bucket: Option<BucketArg>,
    #[arg(long, value_delimiter = ',')]
    pub edges: Vec<f64>,
    /// Camera for depth buckets.
    #[arg(long)]
    pub camera: Option<u32>,
    /// Calibration for depth buckets.
    #[arg(long)]
    pub calib: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub data_dir: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: std::net::IpAddr,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build().map_err(internal)?;
    pool.install(|| match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Annotate(a) => annotate(a),
        Command::Sync(a) => sync(a),
        Command::Refine(a) => refine(a),
        Command::Eval(a) => eval(a),
        Command::Serve(a) => serve(a),
    })
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    serde_json::from_str(&read_text(path)?).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = to_json_string(value).map_err(internal)?;
    std::fs::write(path, text).map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))
}

fn load_rig(source: &CalibSource) -> Result<(Rig, Option<SceneFile>), CliError> {
    match (&source.calib, &source.scene) {
        (Some(path), _) => {
            let calib: CalibrationFile = read_json(path)?;
            Ok((calib.to_rig().map_err(input)?, None))
        }
        (None, Some(path)) => {
            let scene: SceneFile = read_json(path)?;
            Ok((scene.rig().map_err(input)?, Some(scene)))
        }
        (None, None) => Err(CliError::Input("one of --calib or --scene is required".into())),
    }
}

fn simulate(a: &SimulateArgs) -> Result<(), CliError> {
    let rig_spec = RigSpec { camera_count: a.cameras, ..Default::default() };
    let spec = SceneSpec {
        vehicle_count: a.vehicles,
        frame_count: a.frames,
        seed: a.seed,
        region_radius: a.radius,
        min_separation: a.min_separation,
        fps: a.fps,
        max_speed: a.max_speed,
        ..Default::default()
    };
    let scene = generate_scene(&rig_spec, &spec).map_err(input)?;
    if !a.offsets.is_empty() && a.offsets.len() != a.cameras {
        return Err(CliError::Input(format!("--offsets needs {} values, got {}", a.cameras, a.offsets.len())));
    }
    let noise = NoiseSpec {
        seed: a.seed,
        pixel_sigma: a.pixel_noise,
        drop_probability: a.drop,
        occlusion: a.occlusion,
        frame_offsets: a.offsets.iter().enumerate().map(|(i, &o)| (CameraId(i as u32), o)).collect(),
        light_jitter: a.light_jitter,
        ..Default::default()
    };
    let rendered = render_detections(&scene, &noise).map_err(input)?;
    let file = scene_file(&scene, &rendered);
    info!("{} cameras, {} frames, {} detections", scene.rig.len(), scene.frames.len(), rendered.detections.len());
    write_json(&a.out, &file)?;
    if let Some(p) = &a.calib_out {
        write_json(p, &CalibrationFile { cameras: file.cameras.clone() })?;
    }
    if let Some(p) = &a.detections_out {
        write_json(p, &DetectionsFile { frames: file.detections.clone() })?;
    }
    if let Some(p) = &a.gt_out {
        write_json(p, &file.ground_truth)?;
    }
    if let Some(p) = &a.timelines_out {
        write_json(p, &file.timelines)?;
    }
    Ok(())
}

/// Re-indexes detections to the reference camera's frames, dropping those
/// that fall before its first frame or come from cameras without an offset.
fn align(detections: Vec<Detection2D>, offsets: &FrameOffsetMap) -> Vec<Detection2D> {
    let n = detections.len();
    let out: Vec<_> = detections.into_iter().filter_map(|d| apply_offsets(d.frame, offsets, d.camera_id).map(|frame| Detection2D { frame, ..d })).collect();
    if out.len() < n {
        warn!("{} detections dropped by frame alignment", n - out.len());
    }
    out
}

fn annotate(a: &AnnotateArgs) -> Result<(), CliError> {
    if !(a.lambda > 0.0 && a.lambda.is_finite()) {
        return Err(CliError::Input("--lambda must be positive".into()));
    }
    let (rig, scene) = load_rig(&a.source)?;
    let mut detections = match (&a.detections, scene) {
        (Some(p), _) => read_json::<DetectionsFile>(p)?.flatten(),
        (None, Some(s)) => DetectionsFile { frames: s.detections }.flatten(),
        (None, None) => return Err(CliError::Input("--detections is required with --calib".into())),
    };
    if let Some(p) = &a.offsets {
        detections = align(detections, &read_json(p)?);
    }
    let mut by_frame: BTreeMap<i64, Vec<Detection2D>> = BTreeMap::new();
    for d in detections {
        by_frame.entry(d.frame).or_default().push(d);
    }
    let cfg = AssocConfig { lambda: a.lambda, min_views: a.min_views, min_score: a.min_score, anchor: a.anchor.into(), ..Default::default() };
    let frames: Vec<_> = by_frame.into_iter().collect();
    let frames = frames.par_iter().map(|(f, dets)| build_annotations(&rig, *f, dets, &cfg)).collect::<Result<Vec<_>, _>>().map_err(internal)?;
    info!("{} frames, {} annotations", frames.len(), frames.iter().map(|f| f.annotations.len()).sum::<usize>());
    write_json(&a.out, &AnnotationsFile { frames })
}

fn sync(a: &SyncArgs) -> Result<(), CliError> {
    let scene: Option<SceneFile> = a.scene.as_deref().map(read_json).transpose()?;
    let timelines: TimelinesFile = match (&a.timelines, &scene) {
        (Some(p), _) => read_json(p)?,
        (None, Some(s)) => s.timelines.clone(),
        (None, None) => return Err(CliError::Input("one of --timelines or --scene is required".into())),
    };
    for t in &timelines.cameras {
        for issue in t.check() {
            warn!("camera {}: {issue}", t.camera_id);
        }
    }
    let events: BTreeMap<CameraId, _> = timelines.cameras.iter().map(|t| (t.camera_id, extract_events(t))).collect();
    let reference = match a.reference {
        Some(r) => CameraId(r),
        None => *events.keys().next().ok_or_else(|| CliError::Input("no timelines".into()))?,
    };
    let offsets = estimate_offsets(&events, reference, a.window).map_err(input)?;
    write_json(&a.out, &offsets)?;
    if let Some(out) = &a.aligned_out {
        let detections = match (&a.detections, &scene) {
            (Some(p), _) => read_json::<DetectionsFile>(p)?.flatten(),
            (None, Some(s)) => DetectionsFile { frames: s.detections.clone() }.flatten(),
            (None, None) => return Err(CliError::Input("--aligned-out needs --detections or --scene".into())),
        };
        write_json(out, &DetectionsFile::from_detections(&align(detections, &offsets)))?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct RefineEntry {
    frame: i64,
    annotation: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    init: Option<Pose7DoF>,
    init_given: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    result: Option<RefineResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn refine(a: &RefineArgs) -> Result<(), CliError> {
    let (rig, _) = load_rig(&a.source)?;
    let annotations: AnnotationsFile = read_json(&a.annotations)?;
    let init_frames = match &a.init {
        Some(p) => parse_pose_frames(&read_text(p)?).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?,
        None => Vec::new(),
    };
    let mut cfg = RefineConfig {
        optimizer: match a.optimizer {
            OptimizerArg::NelderMead => Optimizer::NelderMead,
            OptimizerArg::GradientDescent => Optimizer::GradientDescent,
        },
        exclude_camera: a.exclude_camera.map(CameraId),
        ..Default::default()
    };
    if let Some(n) = a.max_iters {
        cfg.max_iters = n;
    }
    cfg.validate().map_err(input)?;

    let mut jobs = Vec::new();
    for fa in &annotations.frames {
        let anns: Vec<_> = fa.annotations.iter().filter(|x| a.include_single_view || !x.single_view).cloned().collect();
        let given: Vec<Pose7DoF> = init_frames.iter().filter(|f| f.frame == fa.frame).flat_map(|f| f.vehicles.iter().map(|v| v.pose)).collect();
        let mut init: Vec<Option<Pose7DoF>> = vec![None; anns.len()];
        for (pose, m) in given.iter().zip(match_poses_to_annotations(&given, &anns, a.match_radius)) {
            if let Some(j) = m {
                init[j] = Some(*pose);
            }
        }
        jobs.extend(anns.into_iter().zip(init).map(|(ann, init)| (fa.frame, ann, init)));
    }

    let entries: Vec<RefineEntry> = jobs
        .par_iter()
        .map(|(frame, ann, given)| {
            let init = given.or_else(|| initial_pose(&rig, ann, cfg.exclude_camera));
            let base = RefineEntry { frame: *frame, annotation: ann.id, init, init_given: given.is_some(), result: None, error: None };
            let Some(init) = init else {
                return RefineEntry { error: Some("no usable view for any starting heading".into()), ..base };
            };
            match refine_pose(&rig, &init, ann, &cfg) {
                Ok(r) => RefineEntry { result: Some(r), ..base },
                Err(e) => RefineEntry { error: Some(e.to_string()), ..base },
            }
        })
        .collect();

    let mut out: BTreeMap<i64, Vec<VehicleRecord>> = annotations.frames.iter().map(|f| (f.frame, Vec::new())).collect();
    for e in &entries {
        match &e.result {
            Some(r) => out.entry(e.frame).or_default().push(VehicleRecord {
                id: e.annotation as u32,
                pose: r.pose,
                visibility: None,
                score: Some((1.0 - 0.5 * r.final_term).clamp(0.0, 1.0)),
            }),
            None => warn!("frame {} annotation {}: {}", e.frame, e.annotation, e.error.as_deref().unwrap_or("failed")),
        }
    }
    let converged = entries.iter().filter(|e| e.result.as_ref().is_some_and(|r| r.converged)).count();
    info!("{} poses refined, {converged} converged", entries.len());
    let frames: Vec<PoseFrame> = out.into_iter().map(|(frame, vehicles)| PoseFrame { frame, vehicles }).collect();
    write_json(&a.out, &frames)?;
    if let Some(p) = &a.report {
        write_json(p, &entries)?;
    }
    Ok(())
}

fn read_ground_truth(path: &Path) -> Result<Vec<PoseFrame>, CliError> {
    let text = read_text(path)?;
    let bad = |e: &dyn std::fmt::Display| CliError::Input(format!("{}: {e}", path.display()));
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| bad(&e))?;
    if v.get("ground_truth").is_some() {
        let scene: SceneFile = serde_json::from_value(v).map_err(|e| bad(&e))?;
        return Ok(scene.ground_truth);
    }
    parse_pose_frames(&text).map_err(|e| bad(&e))
}

fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let preds = parse_pose_frames(&read_text(&a.pred)?).map_err(|e| CliError::Input(format!("{}: {e}", a.pred.display())))?;
    let gts = read_ground_truth(&a.gt)?;
    let buckets = match a.bucket {
        None => None,
        Some(BucketArg::Visibility) => Some(BucketSpec { by: BucketBy::Visibility, edges: a.edges.clone() }),
        Some(BucketArg::Depth) => {
            let (Some(cam), Some(calib)) = (a.camera, &a.calib) else {
                return Err(CliError::Input("depth buckets need --camera and --calib".into()));
            };
            let rig = read_json::<CalibrationFile>(calib)?.to_rig().map_err(input)?;
            let camera = rig.get(CameraId(cam)).ok_or_else(|| CliError::Input(format!("unknown camera {cam}")))?.clone();
            Some(BucketSpec { by: BucketBy::Depth(camera), edges: a.edges.clone() })
        }
    };
    if let Some(b) = &buckets {
        if b.edges.len() < 2 || b.edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(CliError::Input("--edges must hold at least two increasing values".into()));
        }
    }
    let cfg = MatchingConfig { threshold: a.threshold, full_circle_aoe: !a.half_circle_aoe };
    let (report, empty) = match evaluate(&preds, &gts, &cfg, buckets.as_ref()) {
        Ok(r) => (r, false),
        Err(MetricsError::EmptyEvaluation(r)) => (*r, true),
        Err(e) => return Err(input(e)),
    };
    print!("{}", report.table());
    if let Some(p) = &a.out {
        write_json(p, &report)?;
    }
    if empty {
        return Err(CliError::Input("no prediction matched any ground truth".into()));
    }
    Ok(())
}

fn serve(a: &ServeArgs) -> Result<(), CliError> {
    let state = service::AppState::load(&a.data_dir)?;
    let addr = SocketAddr::new(a.host, a.port);
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(internal)?;
    rt.block_on(service::serve(state, addr))
}
