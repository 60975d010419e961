//! A deterministic kinematic pick-and-place world.
//!
//! Supplies expert trajectories for dataset synthesis, executes policies,
//! injects per-step runtime disturbances, and parameterizes difficulty via the
//! spawn-noise radius. Objects have no dynamics: a held object tracks the
//! gripper exactly and stays where it is released.

mod expert;

pub use expert::{expert_with_layout, plan_for_scene, scripted_expert, ExpertEpisode};

use crate::geometry::DenseTransition;
use crate::util::{json_f64_array, sha256_hex};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("infeasible setting: {0}")]
    InfeasibleSetting(String),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("invalid task definition: {0}")]
    BadTaskDef(String),
    #[error("malformed task file: {0}")]
    Parse(String),
}

/// World constants. Defaults keep expert episodes around 80-140 transitions
/// so the 5/10-step annotation windows stay meaningful fractions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldParams {
    pub t_max: u32,
    pub steps_per_segment: usize,
    pub eps_grasp: f64,
    pub eps_goal: f64,
    /// Per-component clip on the commanded delta translation.
    pub max_step: f64,
    /// Expert planning splits any segment whose per-component span exceeds
    /// this, leaving headroom for error-injection offsets below the clip.
    pub max_segment_span: f64,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            t_max: 400,
            steps_per_segment: 10,
            eps_grasp: 0.03,
            eps_goal: 0.05,
            max_step: 0.05,
            max_segment_span: 0.35,
        }
    }
}

pub const WORKSPACE_MIN: f64 = 0.0;
pub const WORKSPACE_MAX: f64 = 1.0;

fn in_workspace(p: &[f64; 3]) -> bool {
    p.iter().all(|&c| (WORKSPACE_MIN..=WORKSPACE_MAX).contains(&c))
}

fn clamp_workspace(p: &mut [f64; 3]) {
    for c in p.iter_mut() {
        *c = c.clamp(WORKSPACE_MIN, WORKSPACE_MAX);
    }
}

/// One manipulation task: objects to move to goals plus the scripted-expert
/// geometry knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDef {
    pub task_id: String,
    pub object_nominals: Vec<[f64; 3]>,
    pub goal_nominals: Vec<[f64; 3]>,
    pub object_names: Vec<String>,
    pub start_pose: [f64; 3],
    pub approach_height: f64,
    /// Distance of the synthetic distractor used for semantic error
    /// injection, measured from the object in the table plane.
    pub decoy_offset: f64,
    /// Default spawn-noise radius for dataset generation.
    pub spawn_noise_radius: f64,
}

impl TaskDef {
    pub fn object_count(&self) -> usize {
        self.object_nominals.len()
    }

    /// Ordered subtask tokens: pick/place per object, then park.
    pub fn plan_tokens(&self) -> Vec<String> {
        let mut tokens = Vec::with_capacity(2 * self.object_count() + 1);
        for k in 0..self.object_count() {
            tokens.push(format!("{}:pick_{}", self.task_id, k));
            tokens.push(format!("{}:place_{}", self.task_id, k));
        }
        tokens.push(format!("{}:park", self.task_id));
        tokens
    }

    fn validate(&self, max_plan_len: usize) -> Result<(), WorldError> {
        if self.task_id.is_empty() {
            return Err(WorldError::BadTaskDef("empty task_id".into()));
        }
        let g = self.object_count();
        if g == 0 {
            return Err(WorldError::BadTaskDef(format!(
                "{}: needs at least one object",
                self.task_id
            )));
        }
        if self.goal_nominals.len() != g || self.object_names.len() != g {
            return Err(WorldError::BadTaskDef(format!(
                "{}: objects, goals, and names must have equal length",
                self.task_id
            )));
        }
        if 2 * g + 1 > max_plan_len {
            return Err(WorldError::BadTaskDef(format!(
                "{}: plan would need {} subtasks, model supports {}",
                self.task_id,
                2 * g + 1,
                max_plan_len
            )));
        }
        for p in self
            .object_nominals
            .iter()
            .chain(self.goal_nominals.iter())
            .chain(std::iter::once(&self.start_pose))
        {
            if !in_workspace(p) {
                return Err(WorldError::BadTaskDef(format!(
                    "{}: position {:?} outside workspace",
                    self.task_id, p
                )));
            }
        }
        if self.approach_height <= 0.0 || self.decoy_offset <= 0.0 {
            return Err(WorldError::BadTaskDef(format!(
                "{}: approach_height and decoy_offset must be positive",
                self.task_id
            )));
        }
        if self.spawn_noise_radius < 0.0 {
            return Err(WorldError::BadTaskDef(format!(
                "{}: spawn_noise_radius must be non-negative",
                self.task_id
            )));
        }
        Ok(())
    }
}

/// Maximum plan length supported by the thought heads.
pub const MAX_PLAN_SLOTS: usize = 6;

/// The validated task collection. Task order in the file fixes the task
/// one-hot layout and the token vocabulary.
#[derive(Debug, Clone)]
pub struct TaskSet {
    tasks: Vec<TaskDef>,
    hash: String,
}

impl TaskSet {
    pub fn new(tasks: Vec<TaskDef>) -> Result<Self, WorldError> {
        if tasks.is_empty() {
            return Err(WorldError::BadTaskDef("task file defines no tasks".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for t in &tasks {
            t.validate(MAX_PLAN_SLOTS)?;
            if !seen.insert(t.task_id.clone()) {
                return Err(WorldError::BadTaskDef(format!(
                    "duplicate task_id `{}`",
                    t.task_id
                )));
            }
        }
        let canonical = serde_json::to_string(&tasks).expect("task defs serialize");
        let hash = sha256_hex(canonical.as_bytes());
        Ok(Self { tasks, hash })
    }

    /// The two built-in tasks: mirrored pick-and-place problems that share a
    /// workspace region so a policy trained on one transfers partially to the
    /// other.
    pub fn builtin() -> Self {
        let tasks = vec![
            TaskDef {
                task_id: "place_red".into(),
                object_nominals: vec![[0.40, 0.45, 0.10]],
                goal_nominals: vec![[0.60, 0.55, 0.10]],
                object_names: vec!["red block".into()],
                start_pose: [0.50, 0.50, 0.40],
                approach_height: 0.15,
                decoy_offset: 0.08,
                spawn_noise_radius: 0.15,
            },
            TaskDef {
                task_id: "place_blue".into(),
                object_nominals: vec![[0.60, 0.45, 0.10]],
                goal_nominals: vec![[0.40, 0.55, 0.10]],
                object_names: vec!["blue block".into()],
                start_pose: [0.50, 0.50, 0.40],
                approach_height: 0.15,
                decoy_offset: 0.08,
                spawn_noise_radius: 0.15,
            },
        ];
        Self::new(tasks).expect("built-in tasks are valid")
    }

    pub fn tasks(&self) -> &[TaskDef] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn lookup(&self, task_id: &str) -> Option<(usize, &TaskDef)> {
        self.tasks
            .iter()
            .enumerate()
            .find(|(_, t)| t.task_id == task_id)
    }

    pub fn max_objects(&self) -> usize {
        self.tasks.iter().map(|t| t.object_count()).max().unwrap_or(0)
    }

    /// Observation dimension for this task set (per-object blocks padded to
    /// the largest task).
    pub fn obs_dim(&self) -> usize {
        4 + 7 * self.max_objects() + self.len()
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct File<'a> {
            format_version: u32,
            tasks: &'a [TaskDef],
        }
        serde_json::to_string_pretty(&File {
            format_version: 1,
            tasks: &self.tasks,
        })
        .expect("task set serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, WorldError> {
        #[derive(Deserialize)]
        struct File {
            #[allow(dead_code)]
            format_version: u32,
            tasks: Vec<TaskDef>,
        }
        let file: File =
            serde_json::from_str(text).map_err(|e| WorldError::Parse(e.to_string()))?;
        Self::new(file.tasks)
    }
}

/// A parameterized environment difficulty: which task, how spread the spawns
/// are, and the runtime disturbance protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSetting {
    pub task_id: String,
    pub spawn_noise_radius: f64,
    pub disturbance_probability: f64,
    pub disturbance_magnitude: f64,
    pub seed: u64,
}

impl WorldSetting {
    pub fn validate(&self) -> Result<(), WorldError> {
        if self.spawn_noise_radius < 0.0 {
            return Err(WorldError::BadTaskDef(
                "spawn_noise_radius must be non-negative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.disturbance_probability) {
            return Err(WorldError::BadTaskDef(
                "disturbance_probability must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn id(&self) -> String {
        format!("{}:rho={:.2}", self.task_id, self.spawn_noise_radius)
    }

    /// Setting with disturbances off, used for data generation and replay.
    pub fn quiet(task_id: &str, rho: f64, seed: u64) -> Self {
        Self {
            task_id: task_id.into(),
            spawn_noise_radius: rho,
            disturbance_probability: 0.0,
            disturbance_magnitude: 0.0,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DisturbanceConfig {
    pub probability: f64,
    pub magnitude: f64,
}

impl DisturbanceConfig {
    pub fn off() -> Self {
        Self {
            probability: 0.0,
            magnitude: 0.0,
        }
    }

    /// The evaluation protocol: 5% per-step probability, offsets in
    /// [-0.1, 0.1] per component.
    pub fn protocol() -> Self {
        Self {
            probability: 0.05,
            magnitude: 0.1,
        }
    }
}

/// Spawned object and goal positions for one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub objects: Vec<[f64; 3]>,
    pub goals: Vec<[f64; 3]>,
}

const SPAWN_RETRY_CAP: usize = 64;

/// Spawn objects at their nominals plus uniform table-plane noise of radius
/// `rho`, rejection-sampled into the workspace. Goals sit at their nominals.
///
/// Fails with `InfeasibleSetting` when a nominal lies outside the workspace
/// or the retry budget is exhausted (radius far larger than the workspace).
pub fn spawn_scene(
    task: &TaskDef,
    rho: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Scene, WorldError> {
    if rho < 0.0 {
        return Err(WorldError::InfeasibleSetting(
            "negative spawn radius".into(),
        ));
    }
    let mut objects = Vec::with_capacity(task.object_count());
    for (k, nominal) in task.object_nominals.iter().enumerate() {
        if !in_workspace(nominal) {
            return Err(WorldError::InfeasibleSetting(format!(
                "object {} nominal {:?} outside workspace",
                k, nominal
            )));
        }
        let mut placed = None;
        for _ in 0..SPAWN_RETRY_CAP {
            let u: f64 = rng.gen();
            let theta: f64 = rng.gen::<f64>() * std::f64::consts::TAU;
            let r = rho * u.sqrt();
            let candidate = [
                nominal[0] + r * theta.cos(),
                nominal[1] + r * theta.sin(),
                nominal[2],
            ];
            if in_workspace(&candidate) {
                placed = Some(candidate);
                break;
            }
        }
        match placed {
            Some(p) => objects.push(p),
            None => {
                return Err(WorldError::InfeasibleSetting(format!(
                    "object {} spawn radius {} leaves the workspace",
                    k, rho
                )))
            }
        }
    }
    Ok(Scene {
        objects,
        goals: task.goal_nominals.clone(),
    })
}

/// Full kinematic state of the world.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub gripper_position: [f64; 3],
    pub gripper_closed: bool,
    pub object_positions: Vec<[f64; 3]>,
    pub held_object: Option<usize>,
    pub goal_positions: Vec<[f64; 3]>,
    pub step_count: u32,
}

pub fn initial_state(task: &TaskDef, scene: &Scene) -> WorldState {
    WorldState {
        gripper_position: task.start_pose,
        gripper_closed: false,
        object_positions: scene.objects.clone(),
        held_object: None,
        goal_positions: scene.goals.clone(),
        step_count: 0,
    }
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub state: WorldState,
    pub disturbed: bool,
}

/// Advance the world by one action: clip the commanded delta, possibly add a
/// disturbance offset, move, actuate the gripper, and keep a held object at
/// the gripper. Total on valid states; non-finite action components are
/// treated as zero.
pub fn step(
    params: &WorldParams,
    state: &WorldState,
    action: [f64; 4],
    disturb: &DisturbanceConfig,
    rng: &mut ChaCha8Rng,
) -> StepResult {
    let mut delta = [0.0; 3];
    for i in 0..3 {
        let a = if action[i].is_finite() { action[i] } else { 0.0 };
        delta[i] = a.clamp(-params.max_step, params.max_step);
    }

    // One probability draw per step so the stream shape is config-independent.
    let u: f64 = rng.gen();
    let disturbed = u < disturb.probability;
    if disturbed {
        for d in delta.iter_mut() {
            let off: f64 = rng.gen_range(-disturb.magnitude..=disturb.magnitude);
            *d += off;
        }
    }

    let mut next = state.clone();
    for i in 0..3 {
        next.gripper_position[i] += delta[i];
    }
    clamp_workspace(&mut next.gripper_position);

    let close_cmd = action[3].is_finite() && action[3] > 0.5;
    next.gripper_closed = close_cmd;
    if close_cmd {
        if next.held_object.is_none() {
            // Attach the nearest free object within grasp range.
            let mut best: Option<(usize, f64)> = None;
            for (k, pos) in next.object_positions.iter().enumerate() {
                let d2 = dist2(pos, &next.gripper_position);
                if d2.sqrt() <= params.eps_grasp
                    && best.map(|(_, bd)| d2 < bd).unwrap_or(true)
                {
                    best = Some((k, d2));
                }
            }
            next.held_object = best.map(|(k, _)| k);
        }
    } else {
        next.held_object = None;
    }

    if let Some(k) = next.held_object {
        next.object_positions[k] = next.gripper_position;
    }
    for p in next.object_positions.iter_mut() {
        clamp_workspace(p);
    }
    next.step_count = state.step_count.saturating_add(1);

    StepResult {
        state: next,
        disturbed,
    }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Success indicator: every object within `eps_goal` of its goal, gripper
/// open, and the step budget not exceeded.
pub fn success(params: &WorldParams, state: &WorldState) -> bool {
    if state.gripper_closed || state.step_count > params.t_max {
        return false;
    }
    state
        .object_positions
        .iter()
        .zip(state.goal_positions.iter())
        .all(|(obj, goal)| dist2(obj, goal).sqrt() <= params.eps_goal)
}

/// Observation feature vector, fixed layout shared with the learner:
/// `[gripper_position(3), gripper_closed(1), object positions(3*G),
/// held flags(G), goal positions(3*G), task one-hot]`, with per-object blocks
/// padded to the largest task in the set.
pub fn encode_observation(tasks: &TaskSet, task_index: usize, state: &WorldState) -> Vec<f64> {
    let g_max = tasks.max_objects();
    let mut obs = Vec::with_capacity(tasks.obs_dim());
    obs.extend_from_slice(&state.gripper_position);
    obs.push(if state.gripper_closed { 1.0 } else { 0.0 });
    for k in 0..g_max {
        match state.object_positions.get(k) {
            Some(p) => obs.extend_from_slice(p),
            None => obs.extend_from_slice(&[0.0; 3]),
        }
    }
    for k in 0..g_max {
        obs.push(if state.held_object == Some(k) { 1.0 } else { 0.0 });
    }
    for k in 0..g_max {
        match state.goal_positions.get(k) {
            Some(p) => obs.extend_from_slice(p),
            None => obs.extend_from_slice(&[0.0; 3]),
        }
    }
    for i in 0..tasks.len() {
        obs.push(if i == task_index { 1.0 } else { 0.0 });
    }
    obs
}

/// A rollout outcome: the executed transitions, the success indicator, and
/// how often the reasoner fired.
#[derive(Debug, Clone)]
pub struct RolloutRecord {
    pub setting: WorldSetting,
    pub transitions: Vec<DenseTransition>,
    pub success: bool,
    pub reasoning_invocation_count: u32,
}

/// Run the sentinel loop (`runtime::run_episode`) for one episode.
pub fn rollout(
    experts: &crate::runtime::Experts<'_>,
    params: &WorldParams,
    tasks: &TaskSet,
    setting: &WorldSetting,
    trial_seed: u64,
) -> Result<RolloutRecord, crate::runtime::RuntimeError> {
    crate::runtime::run_episode(experts, params, tasks, setting, trial_seed).map(|run| run.record)
}

/// Open-loop replay of an action sequence, recording the observation before
/// each action. Used to densify expert plans into labeled transitions.
pub struct Replay {
    pub observations: Vec<Vec<f64>>,
    pub disturbed: Vec<bool>,
    pub final_state: WorldState,
}

pub fn replay_actions(
    params: &WorldParams,
    tasks: &TaskSet,
    task_index: usize,
    start: WorldState,
    actions: &[[f64; 4]],
    disturb: &DisturbanceConfig,
    rng: &mut ChaCha8Rng,
) -> Replay {
    let mut state = start;
    let mut observations = Vec::with_capacity(actions.len());
    let mut disturbed = Vec::with_capacity(actions.len());
    for action in actions {
        observations.push(encode_observation(tasks, task_index, &state));
        let out = step(params, &state, *action, disturb, rng);
        disturbed.push(out.disturbed);
        state = out.state;
    }
    Replay {
        observations,
        disturbed,
        final_state: state,
    }
}

/// Convert a dense waypoint path into per-step actions: delta translation
/// toward the next point plus the next point's gripper command.
pub fn actions_from_dense_path(dense: &[crate::geometry::Waypoint]) -> Vec<[f64; 4]> {
    dense
        .windows(2)
        .map(|pair| {
            let a = pair[0].translation();
            let b = pair[1].translation();
            [
                b[0] - a[0],
                b[1] - a[1],
                b[2] - a[2],
                pair[1].gripper.as_command(),
            ]
        })
        .collect()
}

/// One row of the evaluation metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub setting_id: String,
    pub rho: f64,
    pub episodes: u32,
    pub successes: u32,
    pub success_rate: f64,
    pub mean_reasoning_count: f64,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str =
        "setting_id,rho,episodes,successes,success_rate,mean_reasoning_count";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.setting_id,
            self.rho,
            self.episodes,
            self.successes,
            self.success_rate,
            self.mean_reasoning_count
        )
    }
}

pub fn format_setting_json(setting: &WorldSetting) -> String {
    format!(
        "{{\"task_id\":\"{}\",\"spawn_noise_radius\":{},\"disturbance_probability\":{},\"disturbance_magnitude\":{},\"seed\":{}}}",
        crate::util::json_escape(&setting.task_id),
        crate::util::fmt_f64(setting.spawn_noise_radius),
        crate::util::fmt_f64(setting.disturbance_probability),
        crate::util::fmt_f64(setting.disturbance_magnitude),
        setting.seed
    )
}

pub fn parse_setting_json(text: &str) -> Result<WorldSetting, WorldError> {
    let setting: WorldSetting =
        serde_json::from_str(text).map_err(|e| WorldError::Parse(e.to_string()))?;
    setting.validate()?;
    Ok(setting)
}

pub fn format_observation(obs: &[f64]) -> String {
    json_f64_array(obs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng;

    fn single_task() -> TaskSet {
        TaskSet::builtin()
    }

    fn quiet_state(tasks: &TaskSet) -> WorldState {
        let (_, task) = tasks.lookup("place_red").unwrap();
        let scene = spawn_scene(task, 0.0, &mut rng(1)).unwrap();
        initial_state(task, &scene)
    }

    #[test]
    fn step_without_disturbance_is_exact() {
        let params = WorldParams::default();
        let tasks = single_task();
        let state = quiet_state(&tasks);
        let out = step(
            &params,
            &state,
            [0.01, -0.02, 0.03, 0.0],
            &DisturbanceConfig::off(),
            &mut rng(2),
        );
        assert!(!out.disturbed);
        assert_eq!(
            out.state.gripper_position,
            [
                state.gripper_position[0] + 0.01,
                state.gripper_position[1] - 0.02,
                state.gripper_position[2] + 0.03
            ]
        );
        assert_eq!(out.state.step_count, 1);
    }

    #[test]
    fn step_clips_delta_per_component() {
        let params = WorldParams::default();
        let tasks = single_task();
        let state = quiet_state(&tasks);
        let out = step(
            &params,
            &state,
            [0.2, -0.2, 0.0, 0.0],
            &DisturbanceConfig::off(),
            &mut rng(2),
        );
        assert_eq!(
            out.state.gripper_position[0],
            state.gripper_position[0] + 0.05
        );
        assert_eq!(
            out.state.gripper_position[1],
            state.gripper_position[1] - 0.05
        );
    }

    #[test]
    fn grasp_rule_uses_eps_threshold() {
        let params = WorldParams::default();
        let tasks = single_task();
        let mut state = quiet_state(&tasks);
        let obj = state.object_positions[0];

        // Close at 0.02 from the object: attaches.
        state.gripper_position = [obj[0] + 0.02, obj[1], obj[2]];
        let out = step(
            &params,
            &state,
            [0.0, 0.0, 0.0, 1.0],
            &DisturbanceConfig::off(),
            &mut rng(3),
        );
        assert_eq!(out.state.held_object, Some(0));
        assert_eq!(out.state.object_positions[0], out.state.gripper_position);

        // Close at 0.04: does not attach.
        state.gripper_position = [obj[0] + 0.04, obj[1], obj[2]];
        let out = step(
            &params,
            &state,
            [0.0, 0.0, 0.0, 1.0],
            &DisturbanceConfig::off(),
            &mut rng(3),
        );
        assert_eq!(out.state.held_object, None);
    }

    #[test]
    fn held_object_tracks_gripper_exactly() {
        let params = WorldParams::default();
        let tasks = single_task();
        let mut state = quiet_state(&tasks);
        state.gripper_position = state.object_positions[0];
        let grabbed = step(
            &params,
            &state,
            [0.0, 0.0, 0.0, 1.0],
            &DisturbanceConfig::off(),
            &mut rng(4),
        )
        .state;
        assert_eq!(grabbed.held_object, Some(0));
        let moved = step(
            &params,
            &grabbed,
            [0.03, 0.01, 0.02, 1.0],
            &DisturbanceConfig::off(),
            &mut rng(4),
        )
        .state;
        assert_eq!(moved.object_positions[0], moved.gripper_position);

        let released = step(
            &params,
            &moved,
            [0.0, 0.0, 0.0, 0.0],
            &DisturbanceConfig::off(),
            &mut rng(4),
        )
        .state;
        assert_eq!(released.held_object, None);
        assert!(!released.gripper_closed);
        assert_eq!(released.object_positions[0], moved.object_positions[0]);
    }

    #[test]
    fn disturbance_rate_within_binomial_bound() {
        let params = WorldParams::default();
        let tasks = single_task();
        let state = quiet_state(&tasks);
        let disturb = DisturbanceConfig::protocol();
        let mut r = rng(77);
        let n = 10_000;
        let mut disturbed = 0;
        for _ in 0..n {
            if step(&params, &state, [0.0; 4], &disturb, &mut r).disturbed {
                disturbed += 1;
            }
        }
        let frac = disturbed as f64 / n as f64;
        let sigma = (0.05 * 0.95 / n as f64).sqrt();
        assert!(
            (frac - 0.05).abs() <= 4.0 * sigma,
            "disturbed fraction {} outside 4 sigma of 0.05",
            frac
        );
    }

    #[test]
    fn success_predicate_cases() {
        let params = WorldParams::default();
        let tasks = single_task();
        let mut state = quiet_state(&tasks);

        // All objects at goals exactly, gripper open.
        state.object_positions = state.goal_positions.clone();
        assert!(success(&params, &state));

        // One object 0.06 m from its goal.
        state.object_positions[0][0] += 0.06;
        assert!(!success(&params, &state));
        state.object_positions[0][0] -= 0.06;

        // Timeout.
        state.step_count = params.t_max + 1;
        assert!(!success(&params, &state));
        state.step_count = 0;

        // Gripper closed.
        state.gripper_closed = true;
        assert!(!success(&params, &state));
    }

    #[test]
    fn spawn_rejects_nominal_outside_workspace() {
        let mut task = single_task().tasks()[0].clone();
        task.object_nominals[0] = [1.2, 0.5, 0.1];
        assert!(matches!(
            spawn_scene(&task, 0.1, &mut rng(5)),
            Err(WorldError::InfeasibleSetting(_))
        ));
    }

    #[test]
    fn spawn_rejects_radius_dwarfing_workspace() {
        let mut task = single_task().tasks()[0].clone();
        task.object_nominals[0] = [0.02, 0.02, 0.1];
        assert!(matches!(
            spawn_scene(&task, 50.0, &mut rng(6)),
            Err(WorldError::InfeasibleSetting(_))
        ));
    }

    #[test]
    fn spawn_stays_in_workspace_at_large_radius() {
        let tasks = single_task();
        let (_, task) = tasks.lookup("place_red").unwrap();
        for seed in 0..200 {
            let scene = spawn_scene(task, 0.5, &mut rng(seed)).unwrap();
            for p in &scene.objects {
                assert!(in_workspace(p), "{:?}", p);
            }
        }
    }

    #[test]
    fn spawn_is_deterministic() {
        let tasks = single_task();
        let (_, task) = tasks.lookup("place_red").unwrap();
        let a = spawn_scene(task, 0.3, &mut rng(9)).unwrap();
        let b = spawn_scene(task, 0.3, &mut rng(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn observation_layout_matches_contract() {
        let tasks = single_task();
        let state = quiet_state(&tasks);
        let obs = encode_observation(&tasks, 0, &state);
        assert_eq!(obs.len(), tasks.obs_dim());
        assert_eq!(&obs[0..3], &state.gripper_position);
        assert_eq!(obs[3], 0.0);
        assert_eq!(&obs[4..7], &state.object_positions[0]);
        assert_eq!(obs[7], 0.0); // held flag
        assert_eq!(&obs[8..11], &state.goal_positions[0]);
        assert_eq!(&obs[11..13], &[1.0, 0.0]); // task one-hot
    }

    #[test]
    fn task_set_round_trips_and_hashes() {
        let tasks = single_task();
        let text = tasks.to_json();
        let back = TaskSet::from_json(&text).unwrap();
        assert_eq!(back.hash(), tasks.hash());
    }

    #[test]
    fn task_set_rejects_oversized_plan() {
        let task = TaskDef {
            task_id: "too_big".into(),
            object_nominals: vec![[0.3, 0.3, 0.1], [0.5, 0.3, 0.1], [0.7, 0.3, 0.1]],
            goal_nominals: vec![[0.3, 0.7, 0.1], [0.5, 0.7, 0.1], [0.7, 0.7, 0.1]],
            object_names: vec!["a".into(), "b".into(), "c".into()],
            start_pose: [0.5, 0.5, 0.4],
            approach_height: 0.15,
            decoy_offset: 0.08,
            spawn_noise_radius: 0.1,
        };
        assert!(TaskSet::new(vec![task]).is_err());
    }
}
