//! Scripted expert planner: approach, grasp, transport, and release each
//! object, then park at the start pose. Key waypoints (grasp, release, park)
//! split the plan into subtasks.

use super::{
    spawn_scene, Scene, TaskDef, TaskSet, WorldError, WorldParams, WorldSetting,
};
use crate::geometry::{Gripper, Pose, Trajectory, Waypoint};
use rand_chacha::ChaCha8Rng;

/// Expert output with the layout metadata dataset synthesis needs: which
/// waypoints approach which object (semantic-error targets) and the spawned
/// scene the plan was built for.
#[derive(Debug, Clone)]
pub struct ExpertEpisode {
    pub trajectory: Trajectory,
    /// Subtask token per boundary, same order as `subtask_boundaries`.
    pub plan_tokens: Vec<String>,
    /// (waypoint index, object index) pairs eligible for semantic errors:
    /// the approach waypoints directed at an object.
    pub semantic_targets: Vec<(usize, usize)>,
    pub scene: Scene,
}

struct PlannedWaypoint {
    waypoint: Waypoint,
    /// Token of the subtask this waypoint completes, if any.
    ends_subtask: Option<String>,
    /// Object this waypoint approaches, if any.
    approaches: Option<usize>,
}

fn planned(t: [f64; 3], g: Gripper) -> PlannedWaypoint {
    PlannedWaypoint {
        waypoint: Waypoint::new(
            Pose::from_translation(t).expect("expert waypoints are finite"),
            g,
        ),
        ends_subtask: None,
        approaches: None,
    }
}

/// Build the expert plan for an already-spawned scene.
pub fn plan_for_scene(
    params: &WorldParams,
    task: &TaskDef,
    scene: &Scene,
) -> Result<ExpertEpisode, WorldError> {
    let above = |p: &[f64; 3]| [p[0], p[1], p[2] + task.approach_height];
    let mut plan: Vec<PlannedWaypoint> = Vec::new();
    plan.push(planned(task.start_pose, Gripper::Open));

    for (k, obj) in scene.objects.iter().enumerate() {
        let goal = &scene.goals[k];
        let mut above_obj = planned(above(obj), Gripper::Open);
        above_obj.approaches = Some(k);
        plan.push(above_obj);
        let mut at_obj = planned(*obj, Gripper::Open);
        at_obj.approaches = Some(k);
        plan.push(at_obj);
        let mut grasp = planned(*obj, Gripper::Closed);
        grasp.ends_subtask = Some(format!("{}:pick_{}", task.task_id, k));
        plan.push(grasp);
        plan.push(planned(above(obj), Gripper::Closed));
        plan.push(planned(above(goal), Gripper::Closed));
        plan.push(planned(*goal, Gripper::Closed));
        let mut release = planned(*goal, Gripper::Open);
        release.ends_subtask = Some(format!("{}:place_{}", task.task_id, k));
        plan.push(release);
    }
    let mut park = planned(task.start_pose, Gripper::Open);
    park.ends_subtask = Some(format!("{}:park", task.task_id));
    plan.push(park);

    split_long_segments(&mut plan, params.max_segment_span);

    let mut waypoints = Vec::with_capacity(plan.len());
    let mut boundaries = Vec::new();
    let mut plan_tokens = Vec::new();
    let mut semantic_targets = Vec::new();
    for (i, p) in plan.iter().enumerate() {
        waypoints.push(p.waypoint);
        if let Some(token) = &p.ends_subtask {
            boundaries.push(i);
            plan_tokens.push(token.clone());
        }
        if let Some(obj) = p.approaches {
            semantic_targets.push((i, obj));
        }
    }
    let trajectory = Trajectory::new(task.task_id.clone(), waypoints, boundaries)
        .map_err(|e| WorldError::BadTaskDef(format!("expert plan invalid: {}", e)))?;
    Ok(ExpertEpisode {
        trajectory,
        plan_tokens,
        semantic_targets,
        scene: scene.clone(),
    })
}

/// Insert midpoints until every segment's per-component span is at most
/// `max_span`, keeping the interpolated step size well inside the world's
/// per-step clip even after error-injection offsets.
fn split_long_segments(plan: &mut Vec<PlannedWaypoint>, max_span: f64) {
    let mut i = 0;
    while i + 1 < plan.len() {
        let a = plan[i].waypoint.translation();
        let b = plan[i + 1].waypoint.translation();
        let span = (0..3).map(|c| (b[c] - a[c]).abs()).fold(0.0, f64::max);
        if span > max_span {
            let mid = [
                (a[0] + b[0]) / 2.0,
                (a[1] + b[1]) / 2.0,
                (a[2] + b[2]) / 2.0,
            ];
            // The midpoint carries the source gripper state; the change still
            // happens at the original destination waypoint.
            let g = plan[i].waypoint.gripper;
            plan.insert(i + 1, planned(mid, g));
            // Re-check the first half (no i increment).
        } else {
            i += 1;
        }
    }
}

/// Scripted expert for a setting: spawn the scene from the setting's seed and
/// plan over it. The returned plan, executed open-loop with disturbances off,
/// reaches success.
pub fn scripted_expert(
    params: &WorldParams,
    tasks: &TaskSet,
    setting: &WorldSetting,
) -> Result<Trajectory, WorldError> {
    let (_, task) = tasks
        .lookup(&setting.task_id)
        .ok_or_else(|| WorldError::UnknownTask(setting.task_id.clone()))?;
    let mut rng = crate::util::rng(crate::util::derive(
        setting.seed,
        crate::util::stream::SPAWN,
    ));
    let scene = spawn_scene(task, setting.spawn_noise_radius, &mut rng)?;
    Ok(plan_for_scene(params, task, &scene)?.trajectory)
}

/// Spawn + plan, exposing the layout metadata. Used by dataset synthesis.
pub fn expert_with_layout(
    params: &WorldParams,
    task: &TaskDef,
    rho: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ExpertEpisode, WorldError> {
    let scene = spawn_scene(task, rho, rng)?;
    plan_for_scene(params, task, &scene)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng;
    use crate::world::{
        self, actions_from_dense_path, initial_state, DisturbanceConfig, TaskSet,
    };

    fn replay_succeeds(tasks: &TaskSet, task_id: &str, rho: f64, seed: u64) -> bool {
        let params = WorldParams::default();
        let (idx, task) = tasks.lookup(task_id).unwrap();
        let mut r = rng(seed);
        let episode = expert_with_layout(&params, task, rho, &mut r).unwrap();
        let dense = episode
            .trajectory
            .interpolate(params.steps_per_segment)
            .unwrap();
        let actions = actions_from_dense_path(&dense);
        let state = initial_state(task, &episode.scene);
        let replay = world::replay_actions(
            &params,
            tasks,
            idx,
            state,
            &actions,
            &DisturbanceConfig::off(),
            &mut rng(0),
        );
        world::success(&params, &replay.final_state)
    }

    #[test]
    fn nominal_expert_replays_to_success() {
        let tasks = TaskSet::builtin();
        assert!(replay_succeeds(&tasks, "place_red", 0.0, 1));
        assert!(replay_succeeds(&tasks, "place_blue", 0.0, 1));
    }

    #[test]
    fn two_object_expert_replays_across_seeds() {
        let two = TaskDef {
            task_id: "pair".into(),
            object_nominals: vec![[0.35, 0.35, 0.10], [0.65, 0.35, 0.10]],
            goal_nominals: vec![[0.35, 0.70, 0.10], [0.65, 0.70, 0.10]],
            object_names: vec!["left block".into(), "right block".into()],
            start_pose: [0.5, 0.5, 0.4],
            approach_height: 0.15,
            decoy_offset: 0.08,
            spawn_noise_radius: 0.2,
        };
        let tasks = TaskSet::new(vec![two]).unwrap();
        for seed in 0..100 {
            assert!(
                replay_succeeds(&tasks, "pair", 0.2, seed),
                "seed {} failed",
                seed
            );
        }
    }

    #[test]
    fn expert_boundaries_sit_on_key_waypoints() {
        let params = WorldParams::default();
        let tasks = TaskSet::builtin();
        let (_, task) = tasks.lookup("place_red").unwrap();
        let episode = expert_with_layout(&params, task, 0.1, &mut rng(3)).unwrap();
        let traj = &episode.trajectory;
        assert_eq!(episode.plan_tokens.len(), traj.subtask_boundaries.len());
        assert_eq!(
            episode.plan_tokens,
            vec![
                "place_red:pick_0".to_string(),
                "place_red:place_0".to_string(),
                "place_red:park".to_string()
            ]
        );
        // Grasp boundary waypoint closes on the object position.
        let grasp_idx = traj.subtask_boundaries[0];
        assert_eq!(traj.waypoints[grasp_idx].gripper, Gripper::Closed);
        assert_eq!(
            traj.waypoints[grasp_idx].translation(),
            episode.scene.objects[0]
        );
        // Release boundary opens at the goal.
        let release_idx = traj.subtask_boundaries[1];
        assert_eq!(traj.waypoints[release_idx].gripper, Gripper::Open);
        assert_eq!(
            traj.waypoints[release_idx].translation(),
            episode.scene.goals[0]
        );
        assert_eq!(*traj.subtask_boundaries.last().unwrap(), traj.len() - 1);
    }

    #[test]
    fn split_keeps_segments_below_span() {
        let params = WorldParams::default();
        let tasks = TaskSet::builtin();
        let (_, task) = tasks.lookup("place_red").unwrap();
        for seed in 0..50 {
            let episode =
                expert_with_layout(&params, task, 0.5, &mut rng(1000 + seed)).unwrap();
            for pair in episode.trajectory.waypoints.windows(2) {
                let a = pair[0].translation();
                let b = pair[1].translation();
                for c in 0..3 {
                    assert!(
                        (b[c] - a[c]).abs() <= params.max_segment_span + 1e-12,
                        "segment span {} too large",
                        (b[c] - a[c]).abs()
                    );
                }
            }
        }
    }

    #[test]
    fn gripper_change_waypoints_survive_splitting() {
        let params = WorldParams::default();
        let tasks = TaskSet::builtin();
        let (_, task) = tasks.lookup("place_blue").unwrap();
        let episode = expert_with_layout(&params, task, 0.4, &mut rng(11)).unwrap();
        let wps = &episode.trajectory.waypoints;
        let changes: Vec<usize> = (1..wps.len())
            .filter(|&i| wps[i].gripper != wps[i - 1].gripper)
            .collect();
        // Exactly one grasp and one release for a single-object task.
        assert_eq!(changes.len(), 2);
        assert_eq!(wps[changes[0]].gripper, Gripper::Closed);
        assert_eq!(wps[changes[1]].gripper, Gripper::Open);
    }

    #[test]
    fn infeasible_spawn_surfaces_from_expert() {
        let params = WorldParams::default();
        let mut task = TaskSet::builtin().tasks()[0].clone();
        task.task_id = "edge".into();
        task.object_nominals[0] = [0.01, 0.01, 0.1];
        let tasks = TaskSet::new(vec![task]).unwrap();
        let setting = WorldSetting::quiet("edge", 40.0, 7);
        assert!(matches!(
            scripted_expert(&params, &tasks, &setting),
            Err(WorldError::InfeasibleSetting(_))
        ));
    }
}
