//! EC-Gen: transforms expert trajectories into error-injected,
//! recovery-annotated, status-labeled, loss-masked datasets.
//!
//! Three failure modalities are injected at a target waypoint `w_j`:
//! suppressing a gripper change, perturbing the pose, or shifting toward a
//! distractor. Gripper and pose errors recover through an intermediate
//! retreat waypoint; semantic errors return directly to the correct waypoint.

mod dataset;
mod templates;

pub use dataset::{
    dense_subtask_spans, generate_dataset, synthesize_episode, AnnotatedDataset, AnnotatedEpisode,
    DatasetHeader, EpisodeArtifacts, ErrorMix, GenerateConfig,
};
pub use templates::{
    generate_reflection, global_template_index, parse_template_id, template_id, ReflectionRecord,
    TEMPLATES_PER_MODALITY, TEMPLATE_COUNT, TEMPLATE_VERSION,
};

use crate::geometry::{compose_pose, GeometryError, Trajectory, Waypoint};
use crate::runtime::TriggerStatus;
use crate::world::WorldError;
use std::ops::Range;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EcgenError {
    #[error("target waypoint index {j} out of range for trajectory of length {len}")]
    TargetIndexOutOfRange { j: usize, len: usize },
    #[error("no gripper change at waypoint {j}")]
    NoGripperChangeAtTarget { j: usize },
    #[error("perturbation norm {0} outside [{DELTA_MIN}, {DELTA_MAX}]")]
    InvalidPerturbation(f64),
    #[error("semantic shift is degenerate: target and distractor coincide")]
    DegenerateShift,
    #[error("malformed segmentation: {0}")]
    MalformedSegmentation(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed dataset document: {0}")]
    Parse(String),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Bounds on pose-perturbation magnitude: large enough to change the task
/// outcome, small enough that the inserted recovery stays executable.
pub const DELTA_MIN: f64 = 0.03;
pub const DELTA_MAX: f64 = 0.10;

/// Vertical retreat of the intermediate transition waypoint.
pub const H_RETREAT: f64 = 0.05;

/// Labeling windows: first steps of the episode / of each later subtask, and
/// last steps of the erroneous subsequence.
pub const INITIAL_WINDOW: usize = 5;
pub const NEW_SUBTASK_WINDOW: usize = 5;
pub const ERROR_WINDOW: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ErrorModality {
    Gripper,
    Pose,
    Semantic,
}

impl ErrorModality {
    pub const ALL: [ErrorModality; 3] = [
        ErrorModality::Gripper,
        ErrorModality::Pose,
        ErrorModality::Semantic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorModality::Gripper => "gripper",
            ErrorModality::Pose => "pose",
            ErrorModality::Semantic => "semantic",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|m| m.as_str() == s)
    }

    pub fn index(self) -> usize {
        match self {
            ErrorModality::Gripper => 0,
            ErrorModality::Pose => 1,
            ErrorModality::Semantic => 2,
        }
    }
}

/// Which error was injected where. Modality-specific parameters live in the
/// variant, so they are present exactly when required.
#[derive(Debug, Clone, PartialEq)]
pub enum ErrorSpec {
    Gripper {
        j: usize,
    },
    Pose {
        j: usize,
        delta: [f64; 3],
    },
    Semantic {
        j: usize,
        target: [f64; 3],
        distractor: [f64; 3],
    },
}

impl ErrorSpec {
    pub fn j(&self) -> usize {
        match self {
            ErrorSpec::Gripper { j } => *j,
            ErrorSpec::Pose { j, .. } => *j,
            ErrorSpec::Semantic { j, .. } => *j,
        }
    }

    pub fn modality(&self) -> ErrorModality {
        match self {
            ErrorSpec::Gripper { .. } => ErrorModality::Gripper,
            ErrorSpec::Pose { .. } => ErrorModality::Pose,
            ErrorSpec::Semantic { .. } => ErrorModality::Semantic,
        }
    }

    /// Gripper and pose recoveries insert the retreat waypoint; semantic
    /// recoveries return directly.
    pub fn inserted_waypoints(&self) -> usize {
        match self {
            ErrorSpec::Semantic { .. } => 1,
            _ => 2,
        }
    }
}

fn check_target_index(traj: &Trajectory, j: usize) -> Result<(), EcgenError> {
    // The first waypoint is never a target; the final one may be.
    if j == 0 || j >= traj.len() {
        return Err(EcgenError::TargetIndexOutOfRange { j, len: traj.len() });
    }
    Ok(())
}

/// Suppress the gripper change at `w_j`: the erroneous waypoint keeps the
/// pose of `w_j` but adopts the gripper state of `w_{j-1}`.
pub fn inject_gripper_error(traj: &Trajectory, j: usize) -> Result<Waypoint, EcgenError> {
    check_target_index(traj, j)?;
    let prev = traj.waypoints[j - 1];
    let target = traj.waypoints[j];
    if prev.gripper == target.gripper {
        return Err(EcgenError::NoGripperChangeAtTarget { j });
    }
    Ok(Waypoint::new(target.pose, prev.gripper))
}

/// Add a perturbation vector to the pose at `w_j`, keeping the gripper state.
pub fn inject_pose_error(
    traj: &Trajectory,
    j: usize,
    delta: [f64; 3],
) -> Result<Waypoint, EcgenError> {
    check_target_index(traj, j)?;
    if !delta.iter().all(|v| v.is_finite()) {
        return Err(EcgenError::InvalidPerturbation(f64::NAN));
    }
    let norm = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(DELTA_MIN..=DELTA_MAX).contains(&norm) {
        return Err(EcgenError::InvalidPerturbation(norm));
    }
    let target = traj.waypoints[j];
    Ok(Waypoint::new(
        compose_pose(&target.pose, delta)?,
        target.gripper,
    ))
}

/// Shift the pose at `w_j` by the displacement from the intended object to a
/// distractor, keeping the gripper state.
pub fn inject_semantic_error(
    traj: &Trajectory,
    j: usize,
    p_target: [f64; 3],
    p_distractor: [f64; 3],
) -> Result<Waypoint, EcgenError> {
    check_target_index(traj, j)?;
    if p_target == p_distractor {
        return Err(EcgenError::DegenerateShift);
    }
    let shift = [
        p_distractor[0] - p_target[0],
        p_distractor[1] - p_target[1],
        p_distractor[2] - p_target[2],
    ];
    let target = traj.waypoints[j];
    Ok(Waypoint::new(
        compose_pose(&target.pose, shift)?,
        target.gripper,
    ))
}

/// Apply whichever injection the spec describes.
pub fn apply_error(traj: &Trajectory, spec: &ErrorSpec) -> Result<Waypoint, EcgenError> {
    match spec {
        ErrorSpec::Gripper { j } => inject_gripper_error(traj, *j),
        ErrorSpec::Pose { j, delta } => inject_pose_error(traj, *j, *delta),
        ErrorSpec::Semantic {
            j,
            target,
            distractor,
        } => inject_semantic_error(traj, *j, *target, *distractor),
    }
}

/// Recovery construction output: the new trajectory plus where the erroneous
/// waypoint landed in it.
#[derive(Debug, Clone)]
pub struct RecoveryBuild {
    pub trajectory: Trajectory,
    /// Index of `w'_j` in the new waypoint list (equals the spec's `j`).
    pub error_index: usize,
    /// 2 for gripper/pose (retreat inserted), 1 for semantic.
    pub inserted: usize,
}

/// Build the recovery trajectory for an injected error.
///
/// Gripper/pose: `<..., w_{j-1}, w'_j, w_trans, w_j, ...>` where `w_trans`
/// retreats vertically by `H_RETREAT` keeping `w'_j`'s gripper state.
/// Semantic: `<..., w_{j-1}, w'_j, w_j, ...>`. The suffix after `w_j` is the
/// original waypoint list; subtask boundaries shift by the insertion count.
pub fn build_recovery(traj: &Trajectory, spec: &ErrorSpec) -> Result<RecoveryBuild, EcgenError> {
    let erroneous = apply_error(traj, spec)?;
    let j = spec.j();
    let inserted = spec.inserted_waypoints();

    let mut waypoints = Vec::with_capacity(traj.len() + inserted);
    waypoints.extend_from_slice(&traj.waypoints[..j]);
    waypoints.push(erroneous);
    if inserted == 2 {
        let trans = Waypoint::new(
            compose_pose(&erroneous.pose, [0.0, 0.0, H_RETREAT])?,
            erroneous.gripper,
        );
        waypoints.push(trans);
    }
    waypoints.extend_from_slice(&traj.waypoints[j..]);

    let boundaries = traj
        .subtask_boundaries
        .iter()
        .map(|&b| if b >= j { b + inserted } else { b })
        .collect();
    let trajectory = Trajectory::new(traj.task_id.clone(), waypoints, boundaries)?;
    Ok(RecoveryBuild {
        trajectory,
        error_index: j,
        inserted,
    })
}

/// Spec-facing wrapper returning just the recovery trajectory.
pub fn build_recovery_trajectory(
    traj: &Trajectory,
    spec: &ErrorSpec,
) -> Result<Trajectory, EcgenError> {
    build_recovery(traj, spec).map(|b| b.trajectory)
}

/// Assign a status to every transition of an episode.
///
/// The first `INITIAL_WINDOW` steps of the first subtask are Initial; the
/// first `NEW_SUBTASK_WINDOW` steps of each later subtask are New-subtask;
/// the last `ERROR_WINDOW` steps of the erroneous subsequence are Error;
/// everything else is Normal. Windows clip to their span, and overlaps
/// resolve by precedence Initial > Error > New-subtask > Normal.
pub fn annotate_statuses(
    n_transitions: usize,
    subtask_spans: &[Range<usize>],
    error_span: Option<Range<usize>>,
) -> Result<Vec<TriggerStatus>, EcgenError> {
    if subtask_spans.is_empty() {
        return Err(EcgenError::MalformedSegmentation("no spans".into()));
    }
    if subtask_spans[0].start != 0 {
        return Err(EcgenError::MalformedSegmentation(format!(
            "first span starts at {}, not 0",
            subtask_spans[0].start
        )));
    }
    for w in subtask_spans.windows(2) {
        if w[0].end != w[1].start {
            return Err(EcgenError::MalformedSegmentation(format!(
                "spans {:?} and {:?} do not abut",
                w[0], w[1]
            )));
        }
    }
    for span in subtask_spans {
        if span.is_empty() {
            return Err(EcgenError::MalformedSegmentation(format!(
                "empty span {:?}",
                span
            )));
        }
    }
    if subtask_spans.last().unwrap().end != n_transitions {
        return Err(EcgenError::MalformedSegmentation(format!(
            "spans cover up to {}, episode has {} transitions",
            subtask_spans.last().unwrap().end,
            n_transitions
        )));
    }
    if let Some(span) = &error_span {
        if span.is_empty() || span.end > n_transitions {
            return Err(EcgenError::MalformedSegmentation(format!(
                "error span {:?} outside episode of length {}",
                span, n_transitions
            )));
        }
    }

    let mut labels = vec![TriggerStatus::Normal; n_transitions];
    for span in subtask_spans.iter().skip(1) {
        let end = span.start + NEW_SUBTASK_WINDOW.min(span.len());
        for label in labels.iter_mut().take(end).skip(span.start) {
            *label = TriggerStatus::NewSubtask;
        }
    }
    if let Some(span) = error_span {
        let start = span.end - ERROR_WINDOW.min(span.len());
        for label in labels.iter_mut().take(span.end).skip(start) {
            *label = TriggerStatus::Error;
        }
    }
    let first = &subtask_spans[0];
    let end = first.start + INITIAL_WINDOW.min(first.len());
    for label in labels.iter_mut().take(end) {
        *label = TriggerStatus::Initial;
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Gripper, Pose};

    fn wp(t: [f64; 3], g: Gripper) -> Waypoint {
        Waypoint::new(Pose::from_translation(t).unwrap(), g)
    }

    /// Six-waypoint trajectory with a grasp at index 3 and boundaries at
    /// 3 and 5.
    fn base_traj() -> Trajectory {
        Trajectory::new(
            "test",
            vec![
                wp([0.5, 0.5, 0.4], Gripper::Open),
                wp([0.4, 0.4, 0.25], Gripper::Open),
                wp([0.3, 0.2, 0.1], Gripper::Open),
                wp([0.3, 0.2, 0.1], Gripper::Closed),
                wp([0.3, 0.2, 0.25], Gripper::Closed),
                wp([0.6, 0.6, 0.25], Gripper::Closed),
            ],
            vec![3, 5],
        )
        .unwrap()
    }

    #[test]
    fn gripper_injection_suppresses_change() {
        let traj = base_traj();
        let w = inject_gripper_error(&traj, 3).unwrap();
        assert_eq!(w.translation(), [0.3, 0.2, 0.1]);
        assert_eq!(w.gripper, Gripper::Open);
    }

    #[test]
    fn gripper_injection_symmetric_suppression() {
        let mut wps = base_traj().waypoints;
        wps[4] = wp([0.3, 0.2, 0.25], Gripper::Open); // closed -> open change at 4
        let traj = Trajectory::new("test", wps, vec![3, 5]).unwrap();
        let w = inject_gripper_error(&traj, 4).unwrap();
        assert_eq!(w.gripper, Gripper::Closed);
    }

    #[test]
    fn gripper_injection_requires_change() {
        let traj = base_traj();
        assert!(matches!(
            inject_gripper_error(&traj, 2),
            Err(EcgenError::NoGripperChangeAtTarget { j: 2 })
        ));
    }

    #[test]
    fn pose_injection_adds_delta_exactly() {
        let traj = base_traj();
        let w = inject_pose_error(&traj, 1, [0.05, -0.03, 0.0]).unwrap();
        assert_eq!(w.translation(), [0.4 + 0.05, 0.4 - 0.03, 0.25]);
        assert_eq!(w.gripper, Gripper::Open);
    }

    #[test]
    fn pose_injection_rejects_out_of_range_delta() {
        let traj = base_traj();
        assert!(matches!(
            inject_pose_error(&traj, 1, [0.0, 0.0, 0.0]),
            Err(EcgenError::InvalidPerturbation(_))
        ));
        assert!(matches!(
            inject_pose_error(&traj, 1, [0.2, 0.0, 0.0]),
            Err(EcgenError::InvalidPerturbation(_))
        ));
    }

    #[test]
    fn pose_injection_seeded_delta_recomputed_independently() {
        use rand::Rng;
        let traj = base_traj();
        let mut rng = crate::util::rng(42);
        let dir_z: f64 = rng.gen_range(-1.0..1.0);
        let phi: f64 = rng.gen::<f64>() * std::f64::consts::TAU;
        let planar = (1.0 - dir_z * dir_z).sqrt();
        let delta = [
            0.06 * planar * phi.cos(),
            0.06 * planar * phi.sin(),
            0.06 * dir_z,
        ];
        let w = inject_pose_error(&traj, 2, delta).unwrap();
        let base = traj.waypoints[2].translation();
        for c in 0..3 {
            // Independent recomputation of the defining sum.
            assert_eq!(w.translation()[c], base[c] + delta[c]);
        }
    }

    #[test]
    fn semantic_injection_applies_shift() {
        let traj = base_traj();
        // target (0.4,0.1,0), distractor (0.4,0.3,0): shift (0,0.2,0)
        let w = inject_semantic_error(&traj, 1, [0.4, 0.1, 0.0], [0.4, 0.3, 0.0]).unwrap();
        let base = traj.waypoints[1].translation();
        let shift = [0.4 - 0.4, 0.3 - 0.1, 0.0 - 0.0];
        assert_eq!(
            w.translation(),
            [base[0] + shift[0], base[1] + shift[1], base[2] + shift[2]]
        );
        assert!((w.translation()[1] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn semantic_injection_rejects_degenerate_shift() {
        let traj = base_traj();
        assert!(matches!(
            inject_semantic_error(&traj, 1, [0.4, 0.1, 0.0], [0.4, 0.1, 0.0]),
            Err(EcgenError::DegenerateShift)
        ));
    }

    #[test]
    fn semantic_shift_then_inverse_recovers_pose() {
        let traj = base_traj();
        let target = [0.4, 0.1, 0.0];
        let distractor = [0.5, 0.3, 0.0];
        let shifted = inject_semantic_error(&traj, 1, target, distractor).unwrap();
        let back = compose_pose(
            &shifted.pose,
            [
                target[0] - distractor[0],
                target[1] - distractor[1],
                target[2] - distractor[2],
            ],
        )
        .unwrap();
        assert_eq!(back.translation, traj.waypoints[1].translation());
    }

    #[test]
    fn recovery_shape_for_pose_error() {
        let traj = base_traj();
        let spec = ErrorSpec::Pose {
            j: 2,
            delta: [0.05, 0.0, 0.0],
        };
        let build = build_recovery(&traj, &spec).unwrap();
        let rec = &build.trajectory;
        assert_eq!(rec.len(), traj.len() + 2);
        assert_eq!(build.error_index, 2);
        // Prefix untouched.
        assert_eq!(&rec.waypoints[..2], &traj.waypoints[..2]);
        // w'_j, then the retreat, then the original target.
        assert_eq!(rec.waypoints[2].translation(), [0.35, 0.2, 0.1]);
        assert_eq!(rec.waypoints[3].translation(), [0.35, 0.2, 0.1 + H_RETREAT]);
        assert_eq!(rec.waypoints[3].gripper, rec.waypoints[2].gripper);
        assert_eq!(rec.waypoints[4], traj.waypoints[2]);
        // Suffix bitwise identical.
        assert_eq!(&rec.waypoints[5..], &traj.waypoints[3..]);
        // Boundaries shifted by 2.
        assert_eq!(rec.subtask_boundaries, vec![5, 7]);
    }

    #[test]
    fn recovery_shape_for_semantic_error() {
        let traj = base_traj();
        let spec = ErrorSpec::Semantic {
            j: 2,
            target: [0.3, 0.2, 0.1],
            distractor: [0.38, 0.2, 0.1],
        };
        let build = build_recovery(&traj, &spec).unwrap();
        let rec = &build.trajectory;
        assert_eq!(rec.len(), traj.len() + 1);
        assert_eq!(rec.waypoints[2].translation(), [0.3 + 0.08, 0.2, 0.1]);
        assert_eq!(rec.waypoints[3], traj.waypoints[2]);
        assert_eq!(&rec.waypoints[4..], &traj.waypoints[3..]);
        assert_eq!(rec.subtask_boundaries, vec![4, 6]);
    }

    #[test]
    fn statuses_on_clean_three_subtask_episode() {
        let labels = annotate_statuses(30, &[0..10, 10..20, 20..30], None).unwrap();
        use TriggerStatus::*;
        let expected: Vec<TriggerStatus> = (0..30)
            .map(|i| match i {
                0..=4 => Initial,
                10..=14 | 20..=24 => NewSubtask,
                _ => Normal,
            })
            .collect();
        assert_eq!(labels, expected);
    }

    #[test]
    fn statuses_with_error_span_overriding_window() {
        let labels = annotate_statuses(30, &[0..10, 10..20, 20..30], Some(12..20)).unwrap();
        use TriggerStatus::*;
        // Last 10 of an 8-step span is the whole span.
        let expected: Vec<TriggerStatus> = (0..30)
            .map(|i| match i {
                0..=4 => Initial,
                10 | 11 => NewSubtask,
                12..=19 => Error,
                20..=24 => NewSubtask,
                _ => Normal,
            })
            .collect();
        assert_eq!(labels, expected);
    }

    #[test]
    fn statuses_initial_window_clipped_to_short_first_span() {
        let labels = annotate_statuses(14, &[0..4, 4..14], None).unwrap();
        use TriggerStatus::*;
        assert_eq!(&labels[0..4], &[Initial, Initial, Initial, Initial]);
        assert_eq!(&labels[4..9], &[NewSubtask; 5]);
        assert_eq!(&labels[9..14], &[Normal; 5]);
    }

    #[test]
    fn statuses_reject_malformed_segmentation() {
        assert!(annotate_statuses(20, &[0..10, 11..20], None).is_err());
        assert!(annotate_statuses(20, &[0..10, 10..19], None).is_err());
        assert!(annotate_statuses(20, &[2..10, 10..20], None).is_err());
        assert!(annotate_statuses(20, &[0..10, 10..20], Some(15..25)).is_err());
        assert!(annotate_statuses(20, &[], None).is_err());
    }

    #[test]
    fn initial_takes_precedence_over_error() {
        // Error span overlapping the episode start: Initial wins on 0..5.
        let labels = annotate_statuses(20, &[0..20], Some(0..12)).unwrap();
        use TriggerStatus::*;
        assert_eq!(&labels[0..5], &[Initial; 5]);
        assert_eq!(&labels[5..12], &[Error; 7]);
        assert_eq!(&labels[12..20], &[Normal; 8]);
    }
}
