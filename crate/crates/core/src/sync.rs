//! Camera synchronization from traffic-light changes.
//!
//! Yellow→red changes set the per-camera frame offset; green→yellow changes
//! are matched the same way and only reported as residuals.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::CameraId;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SyncError {
    #[error("camera {0} has no yellow-to-red change within the window of a reference change")]
    NoMatchedEvents(CameraId),
    #[error("reference camera {0} has no timeline")]
    UnknownReference(CameraId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LightState {
    Green,
    Yellow,
    Red,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LightTimeline {
    pub camera_id: CameraId,
    pub states: Vec<(i64, LightState)>,
}

impl LightTimeline {
    /// Problems with the timeline: non-increasing frames and state changes
    /// that skip a phase of the green→yellow→red cycle.
    pub fn check(&self) -> Vec<String> {
        let mut issues = Vec::new();
        for w in self.states.windows(2) {
            if w[1].0 <= w[0].0 {
                issues.push(format!("frame {} does not increase after {}", w[1].0, w[0].0));
            }
        }
        let known: Vec<_> = self.states.iter().filter(|s| s.1 != LightState::Unknown).collect();
        for w in known.windows(2) {
            let expected = match w[0].1 {
                LightState::Green => LightState::Yellow,
                LightState::Yellow => LightState::Red,
                _ => LightState::Green,
            };
            if w[1].1 != w[0].1 && w[1].1 != expected {
                issues.push(format!("{:?} -> {:?} at frame {} breaks the light cycle", w[0].1, w[1].1, w[1].0));
            }
        }
        issues
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Transition {
    GreenToYellow,
    YellowToRed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangeEvent {
    pub camera_id: CameraId,
    pub frame: i64,
    pub transition: Transition,
}

const CHANNEL_RATIO: f64 = 1.5;
const MIN_BRIGHTNESS: f64 = 50.0;
/// Green/red ratio separating yellow from red.
const YELLOW_GREEN_RATIO: f64 = 0.5;

/// Classifies the mean color of a traffic-light region.
pub fn classify_light_state(mean_rgb: [f64; 3]) -> LightState {
    let [r, g, b] = mean_rgb;
    if !mean_rgb.iter().all(|v| v.is_finite()) || r.max(g).max(b) < MIN_BRIGHTNESS {
        return LightState::Unknown;
    }
    if g >= CHANNEL_RATIO * r && g >= CHANNEL_RATIO * b {
        LightState::Green
    } else if r >= CHANNEL_RATIO * b && g >= CHANNEL_RATIO * b && g >= YELLOW_GREEN_RATIO * r {
        LightState::Yellow
    } else if r >= CHANNEL_RATIO * g && r >= CHANNEL_RATIO * b {
        LightState::Red
    } else {
        LightState::Unknown
    }
}

/// Tracked changes of a timeline. Unknown states are bridged: a→unknown→b
/// reports a→b at b's frame.
pub fn extract_events(timeline: &LightTimeline) -> Vec<ChangeEvent> {
    let mut events = Vec::new();
    let mut last: Option<LightState> = None;
    for &(frame, state) in &timeline.states {
        if state == LightState::Unknown {
            continue;
        }
        let transition = match (last, state) {
            (Some(LightState::Green), LightState::Yellow) => Some(Transition::GreenToYellow),
            (Some(LightState::Yellow), LightState::Red) => Some(Transition::YellowToRed),
            _ => None,
        };
        if let Some(transition) = transition {
            events.push(ChangeEvent { camera_id: timeline.camera_id, frame, transition });
        }
        last = Some(state);
    }
    events
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    /// Matched yellow→red differences minus the offset, one per light cycle.
    pub yellow_red: Vec<i64>,
    /// Matched green→yellow differences minus the offset.
    pub green_yellow: Vec<i64>,
    pub max_abs: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameOffsetMap {
    pub reference: CameraId,
    /// Frame index of a camera minus that of the reference at the same
    /// instant; 0 for the reference.
    pub offsets: BTreeMap<CameraId, i64>,
    #[serde(default)]
    pub residuals: BTreeMap<CameraId, Residuals>,
}

impl FrameOffsetMap {
    pub fn offset(&self, camera: CameraId) -> Option<i64> {
        self.offsets.get(&camera).copied()
    }
}

fn frames_of(events: &[ChangeEvent], t: Transition) -> Vec<i64> {
    events.iter().filter(|e| e.transition == t).map(|e| e.frame).collect()
}

/// Differences `camera − nearest reference` for events within `window`.
fn matched_differences(camera: &[i64], reference: &[i64], window: i64) -> Vec<i64> {
    camera.iter().filter_map(|&f| reference.iter().map(|&r| f - r).min_by_key(|d| (d.abs(), *d)).filter(|d| d.abs() <= window)).collect()
}

fn median(values: &mut [i64]) -> f64 {
    values.sort_unstable();
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2] as f64
    } else {
        (values[n / 2 - 1] + values[n / 2]) as f64 / 2.0
    }
}

/// Per-camera frame offsets relative to `reference`: the rounded median
/// difference of matched yellow→red events (halves round away from zero).
pub fn estimate_offsets(events: &BTreeMap<CameraId, Vec<ChangeEvent>>, reference: CameraId, window: i64) -> Result<FrameOffsetMap, SyncError> {
    let ref_events = events.get(&reference).ok_or(SyncError::UnknownReference(reference))?;
    let ref_yr = frames_of(ref_events, Transition::YellowToRed);
    let ref_gy = frames_of(ref_events, Transition::GreenToYellow);
    let mut offsets = BTreeMap::new();
    let mut residuals = BTreeMap::new();
    for (&camera, evs) in events {
        if camera == reference {
            offsets.insert(camera, 0);
            residuals.insert(camera, Residuals::default());
            continue;
        }
        let mut diffs = matched_differences(&frames_of(evs, Transition::YellowToRed), &ref_yr, window);
        if diffs.is_empty() {
            return Err(SyncError::NoMatchedEvents(camera));
        }
        let yellow_red_raw = diffs.clone();
        let offset = median(&mut diffs).round() as i64;
        let gy = matched_differences(&frames_of(evs, Transition::GreenToYellow), &ref_gy, window);
        let res =
            Residuals { yellow_red: yellow_red_raw.iter().map(|d| d - offset).collect(), green_yellow: gy.iter().map(|d| d - offset).collect(), max_abs: 0 };
        let max_abs = res.yellow_red.iter().chain(&res.green_yellow).map(|d| d.abs()).max().unwrap_or(0);
        offsets.insert(camera, offset);
        residuals.insert(camera, Residuals { max_abs, ..res });
    }
    Ok(FrameOffsetMap { reference, offsets, residuals })
}

/// Reference-aligned frame index, or `None` when the frame falls before the
/// start of the aligned recording (dropped) or the camera has no offset.
pub fn apply_offsets(frame: i64, offsets: &FrameOffsetMap, camera: CameraId) -> Option<i64> {
    let aligned = frame - offsets.offset(camera)?;
    (aligned >= 0).then_some(aligned)
}
