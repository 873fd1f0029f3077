//! Pose evaluation: greedy BEV matching, ATE/ASE/AOE and 3D/BEV IoU with
//! mean and population standard deviation, optionally bucketed.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::box3d::{angle_diff, iou_3d, iou_bev, Pose7DoF};
use crate::camera::Camera;
use crate::io::PoseFrame;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no prediction matched any ground truth")]
    EmptyEvaluation(Box<EvalReport>),
    #[error("invalid matching config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchingConfig {
    /// BEV center distance threshold (m).
    pub threshold: f64,
    /// AOE over the full circle; otherwise modulo 180°.
    pub full_circle_aoe: bool,
}

impl Default for MatchingConfig {
    fn default() -> Self {
        Self { threshold: 2.0, full_circle_aoe: true }
    }
}

/// Absolute translation error: 3D distance between box centers.
pub fn ate(pred: &Pose7DoF, gt: &Pose7DoF) -> f64 {
    (pred.center() - gt.center()).norm()
}

/// Absolute scale error: 1 − IoU of the footprints once both are centered
/// and axis-aligned, without swapping length and width.
pub fn ase(pred: &Pose7DoF, gt: &Pose7DoF) -> f64 {
    let inter = pred.l.min(gt.l) * pred.w.min(gt.w);
    let union = pred.l * pred.w + gt.l * gt.w - inter;
    1.0 - inter / union
}

/// Absolute orientation error in degrees.
pub fn aoe(pred: &Pose7DoF, gt: &Pose7DoF, full_circle: bool) -> f64 {
    let d = angle_diff(pred.yaw, gt.yaw).abs();
    let d = if full_circle { d } else { d.min(std::f64::consts::PI - d) };
    d.to_degrees()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub pred: usize,
    pub gt: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchResult {
    pub pairs: Vec<Match>,
    pub unmatched_preds: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
}

fn bev_distance(a: &Pose7DoF, b: &Pose7DoF) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

/// Predictions in descending score order (missing scores last, then by
/// position) each take the nearest free ground truth within the threshold.
pub fn match_predictions(preds: &[Pose7DoF], scores: &[Option<f64>], gts: &[Pose7DoF], cfg: &MatchingConfig) -> MatchResult {
    let score = |i: usize| scores.get(i).copied().flatten().unwrap_or(f64::NEG_INFINITY);
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        score(b).total_cmp(&score(a)).then_with(|| {
            let (p, q) = (&preds[a], &preds[b]);
            [p.x, p.y, p.z, p.yaw].partial_cmp(&[q.x, q.y, q.z, q.yaw]).unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    let mut taken = vec![false; gts.len()];
    let mut res = MatchResult::default();
    for i in order {
        let best = gts
            .iter()
            .enumerate()
            .filter(|(j, _)| !taken[*j])
            .map(|(j, g)| (j, bev_distance(&preds[i], g)))
            .filter(|&(_, d)| d <= cfg.threshold)
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        match best {
            Some((j, distance)) => {
                taken[j] = true;
                res.pairs.push(Match { pred: i, gt: j, distance });
            }
            None => res.unmatched_preds.push(i),
        }
    }
    res.unmatched_preds.sort_unstable();
    res.unmatched_gts = (0..gts.len()).filter(|&j| !taken[j]).collect();
    res
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        Self { mean, std: var.sqrt(), n }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricSet {
    pub ate: Stat,
    pub ase: Stat,
    pub aoe: Stat,
    pub iou_3d: Stat,
    pub iou_bev: Stat,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct PairMetrics {
    ate: f64,
    ase: f64,
    aoe: f64,
    iou_3d: f64,
    iou_bev: f64,
}

impl MetricSet {
    fn of(pairs: &[PairMetrics]) -> Self {
        let col = |f: fn(&PairMetrics) -> f64| Stat::of(&pairs.iter().map(f).collect::<Vec<_>>());
        Self { ate: col(|p| p.ate), ase: col(|p| p.ase), aoe: col(|p| p.aoe), iou_3d: col(|p| p.iou_3d), iou_bev: col(|p| p.iou_bev) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BucketBy {
    /// The ground truth's `visibility` field.
    Visibility,
    /// Depth of the ground-truth center in this camera.
    Depth(Camera),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BucketSpec {
    pub by: BucketBy,
    /// Increasing edges; n edges give n − 1 buckets `[lo, hi)`, the last closed.
    pub edges: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub label: String,
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    pub metrics: MetricSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub std_convention: String,
    pub aoe_convention: String,
    pub frames: usize,
    pub matches: usize,
    pub misses: usize,
    pub false_positives: usize,
    pub metrics: MetricSet,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub buckets: Vec<Bucket>,
}

impl EvalReport {
    /// Plain-text table: metric, mean, s.
    pub fn table(&self) -> String {
        let m = &self.metrics;
        let mut s = format!("{:<8}{:>12}{:>12}\n", "metric", "mean", "s");
        for (name, st) in [("ATE", m.ate), ("ASE", m.ase), ("AOE", m.aoe), ("IoU3D", m.iou_3d), ("IoUBEV", m.iou_bev)] {
            s += &format!("{:<8}{:>12.4}{:>12.4}\n", name, st.mean, st.std);
        }
        s += &format!(
            "matches {}  misses {}  false positives {}  ({} std, AOE {})\n",
            self.matches, self.misses, self.false_positives, self.std_convention, self.aoe_convention
        );
        s
    }
}

fn bucket_index(key: Option<f64>, edges: &[f64]) -> Option<usize> {
    let k = key?;
    let last = edges.len().checked_sub(2)?;
    (0..=last).find(|&i| k >= edges[i] && (k < edges[i + 1] || (i == last && k <= edges[i + 1])))
}

/// Evaluates predicted frames against ground-truth frames, pairing frames
/// by index. Unpaired ground-truth frames count as misses and unpaired
/// prediction frames as false positives.
pub fn evaluate(preds: &[PoseFrame], gts: &[PoseFrame], cfg: &MatchingConfig, buckets: Option<&BucketSpec>) -> Result<EvalReport, MetricsError> {
    if !(cfg.threshold > 0.0) {
        return Err(MetricsError::InvalidConfig("threshold must be positive".into()));
    }
    let mut pred_by: BTreeMap<i64, Vec<&PoseFrame>> = BTreeMap::new();
    let mut gt_by: BTreeMap<i64, Vec<&PoseFrame>> = BTreeMap::new();
    preds.iter().for_each(|f| pred_by.entry(f.frame).or_default().push(f));
    gts.iter().for_each(|f| gt_by.entry(f.frame).or_default().push(f));
    let mut frame_ids: Vec<i64> = pred_by.keys().chain(gt_by.keys()).copied().collect();
    frame_ids.sort_unstable();
    frame_ids.dedup();

    let mut pairs = Vec::new();
    let mut keys = Vec::new();
    let (mut misses, mut fps) = (0, 0);
    for f in &frame_ids {
        let p: Vec<_> = pred_by.get(f).into_iter().flatten().flat_map(|fr| fr.vehicles.iter()).collect();
        let g: Vec<_> = gt_by.get(f).into_iter().flatten().flat_map(|fr| fr.vehicles.iter()).collect();
        let pp: Vec<Pose7DoF> = p.iter().map(|v| v.pose).collect();
        let ps: Vec<Option<f64>> = p.iter().map(|v| v.score).collect();
        let gp: Vec<Pose7DoF> = g.iter().map(|v| v.pose).collect();
        let m = match_predictions(&pp, &ps, &gp, cfg);
        misses += m.unmatched_gts.len();
        fps += m.unmatched_preds.len();
        let mut frame_pairs: Vec<_> = m.pairs.iter().collect();
        frame_pairs.sort_by_key(|m| m.gt);
        for mt in frame_pairs {
            let (a, b) = (&pp[mt.pred], &gp[mt.gt]);
            pairs.push(PairMetrics { ate: ate(a, b), ase: ase(a, b), aoe: aoe(a, b, cfg.full_circle_aoe), iou_3d: iou_3d(a, b), iou_bev: iou_bev(a, b) });
            keys.push(match buckets.map(|b| &b.by) {
                Some(BucketBy::Visibility) => g[mt.gt].visibility,
                Some(BucketBy::Depth(cam)) => Some(cam.depth(&b.center())),
                None => None,
            });
        }
    }

    let mut bucket_reports = Vec::new();
    if let Some(spec) = buckets {
        let n = spec.edges.len().saturating_sub(1);
        let mut groups: Vec<Vec<PairMetrics>> = vec![Vec::new(); n + 1];
        for (p, k) in pairs.iter().zip(&keys) {
            groups[bucket_index(*k, &spec.edges).unwrap_or(n)].push(*p);
        }
        for (i, g) in groups.iter().enumerate() {
            let (lo, hi, label) = if i < n {
                (Some(spec.edges[i]), Some(spec.edges[i + 1]), format!("[{}, {})", spec.edges[i], spec.edges[i + 1]))
            } else {
                (None, None, "unknown".to_string())
            };
            if i < n || !g.is_empty() {
                bucket_reports.push(Bucket { label, lo, hi, metrics: MetricSet::of(g) });
            }
        }
    }

    let report = EvalReport {
        std_convention: "population".into(),
        aoe_convention: if cfg.full_circle_aoe { "full-circle" } else { "half-circle" }.into(),
        frames: frame_ids.len(),
        matches: pairs.len(),
        misses,
        false_positives: fps,
        metrics: MetricSet::of(&pairs),
        buckets: bucket_reports,
    };
    if report.matches == 0 {
        return Err(MetricsError::EmptyEvaluation(Box::new(report)));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::VehicleRecord;
    use approx::assert_abs_diff_eq;

    fn pose(x: f64, y: f64, l: f64, w: f64, yaw: f64) -> Pose7DoF {
        Pose7DoF { x, y, z: 0.75, l, w, h: 1.5, yaw }
    }

    fn frame(frame: i64, poses: &[Pose7DoF]) -> PoseFrame {
        PoseFrame { frame, vehicles: poses.iter().enumerate().map(|(i, p)| VehicleRecord { id: i as u32, pose: *p, visibility: None, score: None }).collect() }
    }

    #[test]
    fn unit_values() {
        let a = Pose7DoF { x: 0.0, y: 0.0, z: 0.0, l: 4.0, w: 2.0, h: 1.5, yaw: 0.0 };
        let b = Pose7DoF { x: 3.0, y: 4.0, ..a };
        assert_abs_diff_eq!(ate(&a, &b), 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ase(&a, &pose(0.0, 0.0, 5.0, 2.0, 0.0)), 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(ase(&a, &pose(0.0, 0.0, 2.0, 4.0, 0.0)), 2.0 / 3.0, epsilon = 1e-12);
        assert_eq!(ase(&a, &a), 0.0);
        let y = |yaw| pose(0.0, 0.0, 4.0, 2.0, yaw);
        assert_abs_diff_eq!(aoe(&y(0.1), &y(-0.1), true), 0.2f64.to_degrees(), epsilon = 1e-9);
        assert_abs_diff_eq!(aoe(&y(3.1), &y(-3.1), true), (2.0 * std::f64::consts::PI - 6.2).to_degrees(), epsilon = 1e-9);
        assert_abs_diff_eq!(aoe(&y(3.1), &y(-3.1), true), 4.767, epsilon = 1e-3);
        assert_eq!(aoe(&y(0.5), &y(0.5), true), 0.0);
        assert_abs_diff_eq!(aoe(&y(0.0), &y(3.0), false), (std::f64::consts::PI - 3.0).to_degrees(), epsilon = 1e-9);
    }

    #[test]
    fn greedy_matching_examples() {
        let cfg = MatchingConfig::default();
        let g = [pose(1.0, 0.0, 4.0, 2.0, 0.0)];
        let m = match_predictions(&[pose(0.0, 0.0, 4.0, 2.0, 0.0)], &[None], &g, &cfg);
        assert_eq!(m.pairs.len(), 1);
        let far = match_predictions(&[pose(5.0, 0.0, 4.0, 2.0, 0.0)], &[None], &[pose(0.0, 0.0, 4.0, 2.0, 0.0)], &cfg);
        assert_eq!((far.unmatched_preds, far.unmatched_gts), (vec![0], vec![0]));
        let two = [pose(0.9, 0.0, 4.0, 2.0, 0.0), pose(1.1, 0.0, 4.0, 2.0, 0.0)];
        let m = match_predictions(&two, &[Some(0.3), Some(0.9)], &g, &cfg);
        assert_eq!(m.pairs[0].pred, 1);
        assert_eq!(m.unmatched_preds, vec![0]);
    }

    #[test]
    fn identical_sets_evaluate_perfectly() {
        let gts = vec![frame(0, &[pose(0.0, 0.0, 4.0, 2.0, 0.3), pose(8.0, 1.0, 5.0, 1.9, -2.0)])];
        let r = evaluate(&gts, &gts, &MatchingConfig::default(), None).unwrap();
        assert_eq!(r.matches, 2);
        assert_eq!(r.metrics.ate.mean, 0.0);
        assert_eq!(r.metrics.aoe.mean, 0.0);
        assert_abs_diff_eq!(r.metrics.iou_3d.mean, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.metrics.iou_bev.mean, 1.0, epsilon = 1e-12);
        assert_eq!(r.metrics.ate.std, 0.0);
    }

    #[test]
    fn population_std() {
        let s = Stat::of(&[1.0, 3.0]);
        assert_eq!((s.mean, s.std), (2.0, 1.0));
    }

    #[test]
    fn empty_evaluation_still_reports() {
        let gts = vec![frame(0, &[pose(0.0, 0.0, 4.0, 2.0, 0.0)])];
        let preds = vec![frame(0, &[pose(9.0, 0.0, 4.0, 2.0, 0.0)])];
        match evaluate(&preds, &gts, &MatchingConfig::default(), None) {
            Err(MetricsError::EmptyEvaluation(r)) => assert_eq!((r.misses, r.false_positives), (1, 1)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bucket_edges() {
        let e = [0.0, 0.5, 1.0];
        assert_eq!(bucket_index(Some(0.2), &e), Some(0));
        assert_eq!(bucket_index(Some(0.5), &e), Some(1));
        assert_eq!(bucket_index(Some(1.0), &e), Some(1));
        assert_eq!(bucket_index(Some(1.5), &e), None);
        assert_eq!(bucket_index(None, &e), None);
    }
}
