//! Keyframe demonstrations, reference-frame features, and segmentation.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Schema version written into demonstration files.
pub const DEMO_SCHEMA_VERSION: u32 = 1;

/// Dimension of a relative keyframe feature: `(dx, dy, dtheta, gripper)`.
pub const KEYFRAME_DIM: usize = 4;

pub type FeaturePoint = [f64; KEYFRAME_DIM];

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut a = theta.sin().atan2(theta.cos());
    if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

/// Planar pose in the workspace frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Pose2 {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub fn origin() -> Self {
        Pose2::new(0.0, 0.0, 0.0)
    }

    /// `self ∘ other`: expresses `other` (given in this frame) in the parent frame.
    pub fn compose(&self, other: &Pose2) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        Pose2::new(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.theta + other.theta,
        )
    }

    pub fn inverse(&self) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        Pose2::new(
            -(c * self.x + s * self.y),
            s * self.x - c * self.y,
            -self.theta,
        )
    }

    /// `other` expressed in this pose's frame.
    pub fn relative(&self, other: &Pose2) -> Pose2 {
        self.inverse().compose(other)
    }

    pub fn distance(&self, other: &Pose2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Observed scene state `s`: per object the end-effector-relative offset
/// `(ox - ex, oy - ey, wrap(otheta - etheta))`, followed by the gripper scalar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub layout: Vec<String>,
    pub features: Vec<f64>,
    /// End-effector pose at capture time; object poses are recovered from it.
    pub ee: Pose2,
}

impl WorldState {
    /// Builds the feature vector from absolute object poses (ordered as `layout`).
    pub fn capture(layout: &[String], objects: &[Pose2], ee: Pose2, gripper: f64) -> Self {
        debug_assert_eq!(layout.len(), objects.len());
        let mut features = Vec::with_capacity(layout.len() * 3 + 1);
        for obj in objects {
            features.push(obj.x - ee.x);
            features.push(obj.y - ee.y);
            features.push(wrap_angle(obj.theta - ee.theta));
        }
        features.push(gripper);
        WorldState {
            layout: layout.to_vec(),
            features,
            ee,
        }
    }

    pub fn dim(&self) -> usize {
        self.features.len()
    }

    pub fn gripper(&self) -> f64 {
        self.features.last().copied().unwrap_or(0.0)
    }

    pub fn object_pose(&self, id: &str) -> Result<Pose2> {
        let slot = self
            .layout
            .iter()
            .position(|o| o == id)
            .ok_or_else(|| Error::MissingObject(id.to_string()))?;
        let f = &self.features[slot * 3..slot * 3 + 3];
        Ok(Pose2::new(
            self.ee.x + f[0],
            self.ee.y + f[1],
            self.ee.theta + f[2],
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    pub ee_pose: Pose2,
    pub gripper: f64,
    pub reference_object: String,
    /// Scene captured when the keyframe motion was commanded.
    pub world: WorldState,
    pub timestamp: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoKind {
    Full,
    Corrective,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub demo_id: String,
    pub kind: DemoKind,
    pub keyframes: Vec<Keyframe>,
}

impl Demonstration {
    pub fn validate(&self) -> Result<()> {
        let first = self
            .keyframes
            .first()
            .ok_or_else(|| Error::invalid(format!("demonstration `{}` is empty", self.demo_id)))?;
        for pair in self.keyframes.windows(2) {
            if pair[1].timestamp <= pair[0].timestamp {
                return Err(Error::invalid(format!(
                    "timestamps must increase within demonstration `{}`",
                    self.demo_id
                )));
            }
        }
        for kf in &self.keyframes {
            if kf.world.layout != first.world.layout {
                return Err(Error::invalid("keyframes disagree on feature layout"));
            }
            kf.world.object_pose(&kf.reference_object)?;
        }
        Ok(())
    }
}

/// A maximal run of keyframes sharing one reference object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoSegment {
    pub keyframes: Vec<Keyframe>,
    pub reference_object: String,
    pub start_state: WorldState,
    pub demo_id: String,
    pub position: usize,
}

impl DemoSegment {
    pub fn relative_points(&self) -> Result<Vec<FeaturePoint>> {
        self.keyframes.iter().map(relative_keyframe).collect()
    }

    pub fn trajectory(&self, step: f64) -> Result<Vec<FeaturePoint>> {
        interpolate_segment(self, step)
    }
}

/// Splits a demonstration wherever the annotated reference object changes.
pub fn segment_by_reference(demo: &Demonstration) -> Result<Vec<DemoSegment>> {
    if demo.keyframes.is_empty() {
        return Err(Error::invalid(format!(
            "demonstration `{}` has no keyframes",
            demo.demo_id
        )));
    }
    let mut segments: Vec<DemoSegment> = Vec::new();
    for kf in &demo.keyframes {
        match segments.last_mut() {
            Some(seg) if seg.reference_object == kf.reference_object => {
                seg.keyframes.push(kf.clone())
            }
            _ => {
                let position = segments.len();
                segments.push(DemoSegment {
                    keyframes: vec![kf.clone()],
                    reference_object: kf.reference_object.clone(),
                    start_state: kf.world.clone(),
                    demo_id: demo.demo_id.clone(),
                    position,
                });
            }
        }
    }
    Ok(segments)
}

/// End-effector pose and gripper expressed in the reference object's frame.
pub fn relative_keyframe(kf: &Keyframe) -> Result<FeaturePoint> {
    let object = kf.world.object_pose(&kf.reference_object)?;
    let rel = object.relative(&kf.ee_pose);
    Ok([rel.x, rel.y, rel.theta, kf.gripper])
}

/// Linear interpolation between consecutive points, shortest arc in the angle.
pub fn interpolate_points(points: &[FeaturePoint], step: f64) -> Vec<FeaturePoint> {
    assert!(step > 0.0, "interpolation step must be positive");
    let mut out = Vec::new();
    for pair in points.windows(2) {
        let (from, to) = (pair[0], pair[1]);
        let delta = [
            to[0] - from[0],
            to[1] - from[1],
            wrap_angle(to[2] - from[2]),
            to[3] - from[3],
        ];
        let dist = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
        let n = ((dist / step).ceil() as usize).max(1);
        out.push(from);
        for t in 1..n {
            let f = t as f64 / n as f64;
            out.push([
                from[0] + f * delta[0],
                from[1] + f * delta[1],
                wrap_angle(from[2] + f * delta[2]),
                from[3] + f * delta[3],
            ]);
        }
    }
    if let Some(last) = points.last() {
        out.push(*last);
    }
    out
}

pub fn interpolate_segment(seg: &DemoSegment, step: f64) -> Result<Vec<FeaturePoint>> {
    if !(step > 0.0) {
        return Err(Error::invalid("interpolation step must be positive"));
    }
    Ok(interpolate_points(&seg.relative_points()?, step))
}

/// On-disk demonstration document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoFile {
    pub schema_version: u32,
    pub scenario: String,
    pub demonstration: Demonstration,
}

impl DemoFile {
    pub fn new(scenario: impl Into<String>, demonstration: Demonstration) -> Self {
        DemoFile {
            schema_version: DEMO_SCHEMA_VERSION,
            scenario: scenario.into(),
            demonstration,
        }
    }

    pub fn to_text(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("demo serializes");
        text.push('\n');
        text
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::parse("demonstration file", e))?;
        check_version(&value, DEMO_SCHEMA_VERSION)?;
        let file: DemoFile =
            serde_json::from_str(text).map_err(|e| Error::parse("demonstration file", e))?;
        Ok(file)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

pub(crate) fn check_version(value: &serde_json::Value, expected: u32) -> Result<()> {
    let found = value
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::invalid("missing schema_version"))? as u32;
    if found != expected {
        return Err(Error::Version { found, expected });
    }
    Ok(())
}
