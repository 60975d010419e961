//! Waypoint, pose, and trajectory primitives shared by every other module.
//!
//! Poses carry a unit quaternion but all perturbation and interpolation act on
//! the translation only; rotations ride along unchanged.

use crate::runtime::TriggerStatus;
use crate::util::{fmt_f64, json_escape};
use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("quaternion norm {0} deviates from 1 by more than 1e-9")]
    NotUnitQuaternion(f64),
    #[error("gripper state must be 0 or 1, got {0}")]
    BadGripperBit(u8),
    #[error("trajectory requires at least 2 waypoints, got {0}")]
    TooFewWaypoints(usize),
    #[error("invalid subtask boundaries: {0}")]
    InvalidBoundaries(String),
    #[error("steps_per_segment must be at least 1")]
    ZeroSteps,
    #[error("malformed trajectory document: {0}")]
    Parse(String),
}

const UNIT_QUAT_TOL: f64 = 1e-9;

/// SE(3) end-effector pose: translation in meters plus a unit quaternion
/// stored as (w, x, y, z).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub translation: [f64; 3],
    pub rotation: [f64; 4],
}

impl Pose {
    pub fn new(translation: [f64; 3], rotation: [f64; 4]) -> Result<Self, GeometryError> {
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite("translation"));
        }
        if !rotation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite("rotation"));
        }
        let norm = rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_QUAT_TOL {
            return Err(GeometryError::NotUnitQuaternion(norm));
        }
        Ok(Self {
            translation,
            rotation,
        })
    }

    /// Pose at `translation` with the identity rotation.
    pub fn from_translation(translation: [f64; 3]) -> Result<Self, GeometryError> {
        Self::new(translation, [1.0, 0.0, 0.0, 0.0])
    }

    pub fn quaternion_norm(&self) -> f64 {
        self.rotation.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Translate a pose by `delta`, leaving the rotation untouched.
pub fn compose_pose(pose: &Pose, delta: [f64; 3]) -> Result<Pose, GeometryError> {
    if !delta.iter().all(|v| v.is_finite()) {
        return Err(GeometryError::NonFinite("delta"));
    }
    Pose::new(
        [
            pose.translation[0] + delta[0],
            pose.translation[1] + delta[1],
            pose.translation[2] + delta[2],
        ],
        pose.rotation,
    )
}

/// Binary gripper state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Gripper {
    Open,
    Closed,
}

impl Gripper {
    pub fn as_bit(self) -> u8 {
        match self {
            Gripper::Open => 0,
            Gripper::Closed => 1,
        }
    }

    pub fn from_bit(bit: u8) -> Result<Self, GeometryError> {
        match bit {
            0 => Ok(Gripper::Open),
            1 => Ok(Gripper::Closed),
            other => Err(GeometryError::BadGripperBit(other)),
        }
    }

    /// Command value fed to the world: above 0.5 closes.
    pub fn as_command(self) -> f64 {
        self.as_bit() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Waypoint {
    pub pose: Pose,
    pub gripper: Gripper,
}

impl Waypoint {
    pub fn new(pose: Pose, gripper: Gripper) -> Self {
        Self { pose, gripper }
    }

    pub fn translation(&self) -> [f64; 3] {
        self.pose.translation
    }
}

/// An ordered waypoint plan with subtask boundaries.
///
/// `subtask_boundaries[m]` is the index of the last waypoint of subtask `m`;
/// the final boundary always names the final waypoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub task_id: String,
    pub waypoints: Vec<Waypoint>,
    pub subtask_boundaries: Vec<usize>,
}

impl Trajectory {
    pub fn new(
        task_id: impl Into<String>,
        waypoints: Vec<Waypoint>,
        subtask_boundaries: Vec<usize>,
    ) -> Result<Self, GeometryError> {
        if waypoints.len() < 2 {
            return Err(GeometryError::TooFewWaypoints(waypoints.len()));
        }
        if subtask_boundaries.is_empty() {
            return Err(GeometryError::InvalidBoundaries("empty".into()));
        }
        for pair in subtask_boundaries.windows(2) {
            if pair[1] <= pair[0] {
                return Err(GeometryError::InvalidBoundaries(format!(
                    "not strictly increasing at {} -> {}",
                    pair[0], pair[1]
                )));
            }
        }
        let last = *subtask_boundaries.last().unwrap();
        if last != waypoints.len() - 1 {
            return Err(GeometryError::InvalidBoundaries(format!(
                "last boundary {} must equal last waypoint index {}",
                last,
                waypoints.len() - 1
            )));
        }
        Ok(Self {
            task_id: task_id.into(),
            waypoints,
            subtask_boundaries,
        })
    }

    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    pub fn subtask_count(&self) -> usize {
        self.subtask_boundaries.len()
    }

    /// Index of the subtask that waypoint `idx` belongs to.
    pub fn subtask_of_waypoint(&self, idx: usize) -> usize {
        self.subtask_boundaries
            .iter()
            .position(|&b| idx <= b)
            .expect("waypoint index within trajectory")
    }

    pub fn interpolate(&self, steps_per_segment: usize) -> Result<Vec<Waypoint>, GeometryError> {
        interpolate_waypoints(&self.waypoints, steps_per_segment)
    }

    /// Serialize with fixed field order and 17-significant-digit floats so
    /// that a parse reproduces the exact bit patterns.
    pub fn to_json(&self) -> String {
        let mut wps = String::new();
        for (i, w) in self.waypoints.iter().enumerate() {
            if i > 0 {
                wps.push(',');
            }
            let t = &w.pose.translation;
            let q = &w.pose.rotation;
            wps.push_str(&format!(
                "{{\"t\":[{},{},{}],\"q\":[{},{},{},{}],\"g\":{}}}",
                fmt_f64(t[0]),
                fmt_f64(t[1]),
                fmt_f64(t[2]),
                fmt_f64(q[0]),
                fmt_f64(q[1]),
                fmt_f64(q[2]),
                fmt_f64(q[3]),
                w.gripper.as_bit()
            ));
        }
        let bounds: Vec<String> = self
            .subtask_boundaries
            .iter()
            .map(|b| b.to_string())
            .collect();
        format!(
            "{{\"task_id\":\"{}\",\"waypoints\":[{}],\"subtask_boundaries\":[{}]}}",
            json_escape(&self.task_id),
            wps,
            bounds.join(",")
        )
    }

    pub fn from_json(text: &str) -> Result<Self, GeometryError> {
        #[derive(Deserialize)]
        struct RawWaypoint {
            t: [f64; 3],
            q: [f64; 4],
            g: u8,
        }
        #[derive(Deserialize)]
        struct RawTrajectory {
            task_id: String,
            waypoints: Vec<RawWaypoint>,
            subtask_boundaries: Vec<usize>,
        }
        let raw: RawTrajectory =
            serde_json::from_str(text).map_err(|e| GeometryError::Parse(e.to_string()))?;
        let mut waypoints = Vec::with_capacity(raw.waypoints.len());
        for w in raw.waypoints {
            waypoints.push(Waypoint::new(Pose::new(w.t, w.q)?, Gripper::from_bit(w.g)?));
        }
        Trajectory::new(raw.task_id, waypoints, raw.subtask_boundaries)
    }
}

/// Densify a waypoint list: piecewise-linear translation with
/// `steps_per_segment` steps per segment. The gripper switches at the
/// destination waypoint's step; segment endpoints are reproduced exactly.
///
/// Output length is `(N - 1) * steps_per_segment + 1`.
pub fn interpolate_waypoints(
    waypoints: &[Waypoint],
    steps_per_segment: usize,
) -> Result<Vec<Waypoint>, GeometryError> {
    if steps_per_segment < 1 {
        return Err(GeometryError::ZeroSteps);
    }
    if waypoints.len() < 2 {
        return Err(GeometryError::TooFewWaypoints(waypoints.len()));
    }
    let mut out = Vec::with_capacity((waypoints.len() - 1) * steps_per_segment + 1);
    out.push(waypoints[0]);
    for seg in waypoints.windows(2) {
        let (a, b) = (&seg[0], &seg[1]);
        for j in 1..=steps_per_segment {
            if j == steps_per_segment {
                // Copy the endpoint verbatim so it is reproduced bitwise.
                out.push(*b);
            } else {
                let t = j as f64 / steps_per_segment as f64;
                let ta = a.pose.translation;
                let tb = b.pose.translation;
                let translation = [
                    ta[0] + (tb[0] - ta[0]) * t,
                    ta[1] + (tb[1] - ta[1]) * t,
                    ta[2] + (tb[2] - ta[2]) * t,
                ];
                let pose = Pose::new(translation, a.pose.rotation)
                    .expect("interpolant of finite translations is finite");
                out.push(Waypoint::new(pose, a.gripper));
            }
        }
    }
    Ok(out)
}

/// One unit of the dense training dataset: the observation snapshot before
/// the action, the commanded action (delta translation plus gripper command),
/// and the labels attached by the annotation pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTransition {
    pub obs: Vec<f64>,
    pub action: [f64; 4],
    pub status: TriggerStatus,
    pub subtask_token: String,
    /// True when this transition was generated from an erroneous waypoint and
    /// must be excluded from the action loss.
    pub mask: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn wp(t: [f64; 3], g: Gripper) -> Waypoint {
        Waypoint::new(Pose::from_translation(t).unwrap(), g)
    }

    #[test]
    fn compose_identity_and_sum() {
        let e = Pose::from_translation([0.5, 0.0, 0.2]).unwrap();
        let same = compose_pose(&e, [0.0, 0.0, 0.0]).unwrap();
        assert_eq!(same.translation, [0.5, 0.0, 0.2]);

        let shifted = compose_pose(&e, [0.05, -0.03, 0.0]).unwrap();
        assert_eq!(shifted.translation, [0.55, -0.03, 0.2]);
        assert_eq!(shifted.rotation, e.rotation);

        let e2 = Pose::from_translation([0.1, 0.1, 0.1]).unwrap();
        let zeroed = compose_pose(&e2, [-0.1, -0.1, -0.1]).unwrap();
        assert_eq!(zeroed.translation, [0.0, 0.0, 0.0]);
    }

    #[test]
    fn compose_rejects_non_finite() {
        let e = Pose::from_translation([0.0, 0.0, 0.0]).unwrap();
        assert!(compose_pose(&e, [f64::NAN, 0.0, 0.0]).is_err());
        assert!(compose_pose(&e, [f64::INFINITY, 0.0, 0.0]).is_err());
    }

    #[test]
    fn pose_rejects_bad_quaternion() {
        assert!(Pose::new([0.0; 3], [0.9, 0.0, 0.0, 0.0]).is_err());
        assert!(Pose::new([0.0; 3], [1.0 + 2e-9, 0.0, 0.0, 0.0]).is_err());
        assert!(Pose::new([0.0; 3], [1.0 + 5e-10, 0.0, 0.0, 0.0]).is_ok());
    }

    #[test]
    fn interpolate_matches_hand_computed_lerp() {
        let wps = vec![wp([0.0; 3], Gripper::Open), wp([1.0, 0.0, 0.0], Gripper::Open)];
        let dense = interpolate_waypoints(&wps, 4).unwrap();
        let xs: Vec<f64> = dense.iter().map(|w| w.translation()[0]).collect();
        assert_eq!(xs, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn interpolate_steps_one_is_identity() {
        let wps = vec![
            wp([0.1, 0.2, 0.3], Gripper::Open),
            wp([0.4, 0.5, 0.6], Gripper::Closed),
            wp([0.7, 0.8, 0.9], Gripper::Closed),
        ];
        let dense = interpolate_waypoints(&wps, 1).unwrap();
        assert_eq!(dense, wps);
    }

    #[test]
    fn interpolate_constant_segment() {
        let wps = vec![wp([0.3, 0.3, 0.3], Gripper::Open), wp([0.3, 0.3, 0.3], Gripper::Open)];
        let dense = interpolate_waypoints(&wps, 5).unwrap();
        assert_eq!(dense.len(), 6);
        for w in &dense {
            assert_eq!(w.translation(), [0.3, 0.3, 0.3]);
        }
    }

    #[test]
    fn interpolate_rejects_short_input() {
        let wps = vec![wp([0.0; 3], Gripper::Open)];
        assert!(matches!(
            interpolate_waypoints(&wps, 4),
            Err(GeometryError::TooFewWaypoints(1))
        ));
    }

    #[test]
    fn gripper_switches_at_destination_step() {
        let wps = vec![wp([0.0; 3], Gripper::Open), wp([0.0; 3], Gripper::Closed)];
        let dense = interpolate_waypoints(&wps, 3).unwrap();
        let bits: Vec<u8> = dense.iter().map(|w| w.gripper.as_bit()).collect();
        assert_eq!(bits, vec![0, 0, 0, 1]);
    }

    #[test]
    fn trajectory_validates_boundaries() {
        let wps = vec![
            wp([0.0; 3], Gripper::Open),
            wp([0.1, 0.0, 0.0], Gripper::Open),
            wp([0.2, 0.0, 0.0], Gripper::Open),
        ];
        assert!(Trajectory::new("t", wps.clone(), vec![1, 2]).is_ok());
        assert!(Trajectory::new("t", wps.clone(), vec![2, 1]).is_err());
        assert!(Trajectory::new("t", wps.clone(), vec![1]).is_err());
        assert!(Trajectory::new("t", wps, vec![]).is_err());
    }

    proptest! {
        #[test]
        fn interpolate_reproduces_endpoints_bitwise(
            coords in proptest::collection::vec(-1.0f64..1.0, 3..8),
            steps in 1usize..7,
        ) {
            let wps: Vec<Waypoint> = coords
                .iter()
                .enumerate()
                .map(|(i, &c)| wp([c, c * 0.5, -c], if i % 2 == 0 { Gripper::Open } else { Gripper::Closed }))
                .collect();
            let dense = interpolate_waypoints(&wps, steps).unwrap();
            prop_assert_eq!(dense.len(), (wps.len() - 1) * steps + 1);
            for (i, w) in wps.iter().enumerate() {
                let got = &dense[i * steps];
                prop_assert_eq!(got.translation(), w.translation());
                prop_assert_eq!(got.gripper, w.gripper);
            }
        }

        #[test]
        fn compose_is_associative_within_tolerance(
            base in proptest::collection::vec(-1.0f64..1.0, 3),
            d1 in proptest::collection::vec(-0.5f64..0.5, 3),
            d2 in proptest::collection::vec(-0.5f64..0.5, 3),
        ) {
            let e = Pose::from_translation([base[0], base[1], base[2]]).unwrap();
            let a = compose_pose(&compose_pose(&e, [d1[0], d1[1], d1[2]]).unwrap(), [d2[0], d2[1], d2[2]]).unwrap();
            let summed = [d1[0] + d2[0], d1[1] + d2[1], d1[2] + d2[2]];
            let b = compose_pose(&e, summed).unwrap();
            for i in 0..3 {
                prop_assert!((a.translation[i] - b.translation[i]).abs() < 1e-12);
            }
        }

        #[test]
        fn trajectory_json_round_trips_bitwise(
            coords in proptest::collection::vec(-1.0f64..1.0, 2..6),
        ) {
            let wps: Vec<Waypoint> = coords
                .iter()
                .enumerate()
                .map(|(i, &c)| wp([c, c / 3.0, c * 0.7], if i % 2 == 0 { Gripper::Open } else { Gripper::Closed }))
                .collect();
            let n = wps.len();
            let traj = Trajectory::new("roundtrip", wps, vec![n - 1]).unwrap();
            let text = traj.to_json();
            let back = Trajectory::from_json(&text).unwrap();
            prop_assert_eq!(back, traj);
        }
    }
}
