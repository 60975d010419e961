//! Episode synthesis and the dataset container.
//!
//! Each episode derives its randomness from `(dataset_seed, episode_index)`
//! only, so generation order and worker count never change the output.

use super::templates::{generate_reflection, ReflectionRecord, TEMPLATE_VERSION};
use super::{
    annotate_statuses, build_recovery, EcgenError, ErrorModality, ErrorSpec, DELTA_MAX, DELTA_MIN,
};
use crate::geometry::{DenseTransition, Trajectory};
use crate::runtime::TriggerStatus;
use crate::util::{derive_n, json_escape, json_f64_array, rng, stream};
use crate::world::{
    self, expert_with_layout, DisturbanceConfig, ExpertEpisode, TaskSet, WorldParams,
    WORKSPACE_MAX, WORKSPACE_MIN,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use std::ops::Range;

/// Per-modality injection probabilities; the remainder of the unit mass
/// yields clean episodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorMix {
    pub gripper: f64,
    pub pose: f64,
    pub semantic: f64,
}

impl ErrorMix {
    pub fn clean() -> Self {
        Self {
            gripper: 0.0,
            pose: 0.0,
            semantic: 0.0,
        }
    }

    pub fn uniform(p: f64) -> Self {
        Self {
            gripper: p,
            pose: p,
            semantic: p,
        }
    }

    pub fn only(modality: ErrorModality) -> Self {
        let mut mix = Self::clean();
        match modality {
            ErrorModality::Gripper => mix.gripper = 1.0,
            ErrorModality::Pose => mix.pose = 1.0,
            ErrorModality::Semantic => mix.semantic = 1.0,
        }
        mix
    }

    pub fn validate(&self) -> Result<(), EcgenError> {
        let parts = [self.gripper, self.pose, self.semantic];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p) || !p.is_finite()) {
            return Err(EcgenError::InvalidArgument(
                "error mix probabilities must lie in [0, 1]".into(),
            ));
        }
        let sum: f64 = parts.iter().sum();
        if sum > 1.0 + 1e-9 {
            return Err(EcgenError::InvalidArgument(format!(
                "error mix probabilities sum to {}, must be at most 1",
                sum
            )));
        }
        Ok(())
    }

    fn draw(&self, u: f64) -> Option<ErrorModality> {
        if u < self.gripper {
            Some(ErrorModality::Gripper)
        } else if u < self.gripper + self.pose {
            Some(ErrorModality::Pose)
        } else if u < self.gripper + self.pose + self.semantic {
            Some(ErrorModality::Semantic)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone)]
pub struct GenerateConfig {
    pub n_episodes: usize,
    pub mix: ErrorMix,
    pub seed: u64,
    /// Run-configuration hash stamped into the header by the CLI.
    pub config_hash: Option<String>,
}

/// First line of the dataset file.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub seed: u64,
    pub task_defs_hash: String,
    pub template_version: String,
    pub config_hash: Option<String>,
}

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// One fully annotated episode.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedEpisode {
    pub task_id: String,
    pub plan: Vec<String>,
    pub error: Option<ErrorSpec>,
    pub reflection: Option<ReflectionRecord>,
    pub transitions: Vec<DenseTransition>,
}

impl AnnotatedEpisode {
    /// Contiguous runs of masked transitions.
    pub fn masked_blocks(&self) -> Vec<Range<usize>> {
        let mut blocks = Vec::new();
        let mut start = None;
        for (i, tr) in self.transitions.iter().enumerate() {
            match (tr.mask, start) {
                (true, None) => start = Some(i),
                (false, Some(s)) => {
                    blocks.push(s..i);
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            blocks.push(s..self.transitions.len());
        }
        blocks
    }

    /// Contiguous runs of equal subtask tokens, i.e. the dense subtask spans.
    pub fn subtask_spans(&self) -> Vec<(String, Range<usize>)> {
        let mut spans: Vec<(String, Range<usize>)> = Vec::new();
        for (i, tr) in self.transitions.iter().enumerate() {
            match spans.last_mut() {
                Some((token, range)) if *token == tr.subtask_token => range.end = i + 1,
                _ => spans.push((tr.subtask_token.clone(), i..i + 1)),
            }
        }
        spans
    }

    pub fn status_counts(&self) -> [usize; 4] {
        let mut counts = [0usize; 4];
        for tr in &self.transitions {
            counts[tr.status.index()] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone)]
pub struct AnnotatedDataset {
    pub header: DatasetHeader,
    pub episodes: Vec<AnnotatedEpisode>,
}

/// Everything produced while synthesizing one episode; tests and the
/// acceptance suite inspect the intermediate stages directly.
#[derive(Debug, Clone)]
pub struct EpisodeArtifacts {
    pub task_index: usize,
    pub expert: ExpertEpisode,
    pub spec: Option<ErrorSpec>,
    /// The executed trajectory: the recovery build for erroneous episodes,
    /// the expert plan itself for clean ones.
    pub executed: Trajectory,
    /// Index of `w'_j` in `executed`, when an error was injected.
    pub error_index: Option<usize>,
    /// Dense-transition range generated from the erroneous waypoint (the
    /// segments into and out of `w'_j`); also the loss-mask block.
    pub error_span: Option<Range<usize>>,
    pub replay_success: bool,
    pub episode: AnnotatedEpisode,
}

const INJECTION_RETRY_CAP: usize = 16;

/// Per-component segment span that interpolation plus the world's per-step
/// clip can execute exactly.
fn executable(params: &WorldParams, traj: &Trajectory) -> bool {
    let limit = params.steps_per_segment as f64 * params.max_step - 1e-9;
    traj.waypoints.windows(2).all(|pair| {
        let a = pair[0].translation();
        let b = pair[1].translation();
        (0..3).all(|c| (b[c] - a[c]).abs() <= limit)
    }) && traj.waypoints.iter().all(|w| {
        w.translation()
            .iter()
            .all(|&c| (WORKSPACE_MIN..=WORKSPACE_MAX).contains(&c))
    })
}

fn unit_sphere_direction(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let z: f64 = rng.gen_range(-1.0..1.0);
    let phi: f64 = rng.gen::<f64>() * std::f64::consts::TAU;
    let planar = (1.0 - z * z).sqrt();
    [planar * phi.cos(), planar * phi.sin(), z]
}

/// Waypoints where the gripper state changes (grasp/release), eligible for
/// gripper-error injection.
fn gripper_change_indices(traj: &Trajectory) -> Vec<usize> {
    (1..traj.len())
        .filter(|&i| traj.waypoints[i].gripper != traj.waypoints[i - 1].gripper)
        .collect()
}

/// Waypoints eligible for pose errors: interior or final targets where the
/// gripper does not change. Perturbing a release waypoint would drop the
/// object at the wrong spot, which the retreat-and-return recovery cannot
/// undo, so gripper-change waypoints belong to the gripper modality only.
fn pose_target_indices(traj: &Trajectory) -> Vec<usize> {
    (1..traj.len())
        .filter(|&i| traj.waypoints[i].gripper == traj.waypoints[i - 1].gripper)
        .collect()
}

fn draw_error_spec(
    params: &WorldParams,
    expert: &ExpertEpisode,
    task: &world::TaskDef,
    modality: ErrorModality,
    rng: &mut ChaCha8Rng,
) -> Option<(ErrorSpec, super::RecoveryBuild)> {
    let traj = &expert.trajectory;
    for _ in 0..INJECTION_RETRY_CAP {
        let candidate = match modality {
            ErrorModality::Gripper => {
                let eligible = gripper_change_indices(traj);
                if eligible.is_empty() {
                    return None;
                }
                let j = eligible[rng.gen_range(0..eligible.len())];
                ErrorSpec::Gripper { j }
            }
            ErrorModality::Pose => {
                let eligible = pose_target_indices(traj);
                if eligible.is_empty() {
                    return None;
                }
                let j = eligible[rng.gen_range(0..eligible.len())];
                let dir = unit_sphere_direction(rng);
                let magnitude = rng.gen_range(DELTA_MIN..=DELTA_MAX);
                ErrorSpec::Pose {
                    j,
                    delta: [dir[0] * magnitude, dir[1] * magnitude, dir[2] * magnitude],
                }
            }
            ErrorModality::Semantic => {
                if expert.semantic_targets.is_empty() {
                    return None;
                }
                let (j, obj) =
                    expert.semantic_targets[rng.gen_range(0..expert.semantic_targets.len())];
                let target = expert.scene.objects[obj];
                let theta: f64 = rng.gen::<f64>() * std::f64::consts::TAU;
                let distractor = [
                    target[0] + task.decoy_offset * theta.cos(),
                    target[1] + task.decoy_offset * theta.sin(),
                    target[2],
                ];
                ErrorSpec::Semantic {
                    j,
                    target,
                    distractor,
                }
            }
        };
        if let Ok(build) = build_recovery(traj, &candidate) {
            if executable(params, &build.trajectory) {
                return Some((candidate, build));
            }
        }
    }
    None
}

/// Dense subtask spans of a trajectory: segment `i` belongs to the subtask of
/// waypoint `i + 1`, so subtask `m` covers transitions
/// `[prev_boundary * s, boundary_m * s)`.
pub fn dense_subtask_spans(traj: &Trajectory, steps_per_segment: usize) -> Vec<Range<usize>> {
    let mut spans = Vec::with_capacity(traj.subtask_count());
    let mut start = 0usize;
    for &b in &traj.subtask_boundaries {
        let end = b * steps_per_segment;
        spans.push(start..end);
        start = end;
    }
    spans
}

/// Synthesize one fully annotated episode from `(dataset_seed, index)`.
pub fn synthesize_episode(
    params: &WorldParams,
    tasks: &TaskSet,
    mix: &ErrorMix,
    dataset_seed: u64,
    episode_index: u64,
) -> Result<EpisodeArtifacts, EcgenError> {
    mix.validate()?;
    let mut episode_rng = rng(derive_n(dataset_seed, &[stream::EPISODE, episode_index]));

    // Draw order is fixed: task, spawn, modality, injection, reflection.
    let task_index = episode_rng.gen_range(0..tasks.len());
    let task = &tasks.tasks()[task_index];
    let expert = expert_with_layout(params, task, task.spawn_noise_radius, &mut episode_rng)?;
    let plan_tokens = expert.plan_tokens.clone();

    let modality = mix.draw(episode_rng.gen::<f64>());
    let injection = match modality {
        Some(m) => draw_error_spec(params, &expert, task, m, &mut episode_rng),
        None => None,
    };

    let (executed, spec, error_index) = match injection {
        Some((spec, build)) => (build.trajectory, Some(spec), Some(build.error_index)),
        None => (expert.trajectory.clone(), None, None),
    };

    let steps = params.steps_per_segment;
    let dense = executed.interpolate(steps)?;
    let actions = world::actions_from_dense_path(&dense);
    let state = world::initial_state(task, &expert.scene);
    let mut replay_rng = rng(derive_n(dataset_seed, &[stream::EPISODE, episode_index, 1]));
    let replay = world::replay_actions(
        params,
        tasks,
        task_index,
        state,
        &actions,
        &DisturbanceConfig::off(),
        &mut replay_rng,
    );
    let replay_success = world::success(params, &replay.final_state);
    debug_assert!(replay_success, "expert/recovery replay must succeed");

    let spans = dense_subtask_spans(&executed, steps);
    let error_span = error_index.map(|j| (j - 1) * steps..(j + 1) * steps);
    let statuses = annotate_statuses(actions.len(), &spans, error_span.clone())?;

    let reflection = match (&spec, error_index) {
        (Some(spec), Some(j)) => {
            let subtask = executed.subtask_of_waypoint(j);
            let token = &plan_tokens[subtask];
            // pick_k/place_k map to object k; park reflects on the last one.
            let obj = (subtask / 2).min(task.object_count() - 1);
            let seed = episode_rng.gen::<u64>();
            Some(generate_reflection(
                spec.modality(),
                token,
                &task.object_names[obj],
                seed,
            )?)
        }
        _ => None,
    };

    let mut transitions = Vec::with_capacity(actions.len());
    for (k, action) in actions.iter().enumerate() {
        let span_idx = spans
            .iter()
            .position(|s| s.contains(&k))
            .expect("spans partition transitions");
        transitions.push(DenseTransition {
            obs: replay.observations[k].clone(),
            action: *action,
            status: statuses[k],
            subtask_token: plan_tokens[span_idx].clone(),
            mask: error_span.as_ref().map(|s| s.contains(&k)).unwrap_or(false),
        });
    }

    Ok(EpisodeArtifacts {
        task_index,
        expert,
        spec: spec.clone(),
        executed,
        error_index,
        error_span,
        replay_success,
        episode: AnnotatedEpisode {
            task_id: task.task_id.clone(),
            plan: plan_tokens,
            error: spec,
            reflection,
            transitions,
        },
    })
}

/// Generate a complete dataset. Deterministic given the seed; episode `i`
/// depends on `(seed, i)` only.
pub fn generate_dataset(
    params: &WorldParams,
    tasks: &TaskSet,
    cfg: &GenerateConfig,
) -> Result<AnnotatedDataset, EcgenError> {
    if tasks.is_empty() {
        return Err(EcgenError::InvalidArgument("no tasks defined".into()));
    }
    if cfg.n_episodes == 0 {
        return Err(EcgenError::InvalidArgument(
            "n_episodes must be positive".into(),
        ));
    }
    cfg.mix.validate()?;
    let mut episodes = Vec::with_capacity(cfg.n_episodes);
    for i in 0..cfg.n_episodes {
        episodes.push(synthesize_episode(params, tasks, &cfg.mix, cfg.seed, i as u64)?.episode);
    }
    Ok(AnnotatedDataset {
        header: DatasetHeader {
            format_version: DATASET_FORMAT_VERSION,
            seed: cfg.seed,
            task_defs_hash: tasks.hash().to_string(),
            template_version: TEMPLATE_VERSION.to_string(),
            config_hash: cfg.config_hash.clone(),
        },
        episodes,
    })
}

// --- serialization ---------------------------------------------------------

impl DatasetHeader {
    pub fn to_json_line(&self) -> String {
        format!(
            "{{\"format_version\":{},\"seed\":{},\"task_defs_hash\":\"{}\",\"template_version\":\"{}\",\"config_hash\":{}}}",
            self.format_version,
            self.seed,
            json_escape(&self.task_defs_hash),
            json_escape(&self.template_version),
            match &self.config_hash {
                Some(h) => format!("\"{}\"", json_escape(h)),
                None => "null".to_string(),
            }
        )
    }
}

fn error_to_json(spec: &ErrorSpec) -> String {
    match spec {
        ErrorSpec::Gripper { j } => format!("{{\"modality\":\"gripper\",\"j\":{}}}", j),
        ErrorSpec::Pose { j, delta } => format!(
            "{{\"modality\":\"pose\",\"j\":{},\"delta\":{}}}",
            j,
            json_f64_array(delta)
        ),
        ErrorSpec::Semantic {
            j,
            target,
            distractor,
        } => format!(
            "{{\"modality\":\"semantic\",\"j\":{},\"target\":{},\"distractor\":{}}}",
            j,
            json_f64_array(target),
            json_f64_array(distractor)
        ),
    }
}

fn reflection_to_json(r: &ReflectionRecord) -> String {
    format!(
        "{{\"template_id\":\"{}\",\"text\":\"{}\",\"modality\":\"{}\",\"subtask\":\"{}\",\"object\":\"{}\"}}",
        json_escape(&r.template_id),
        json_escape(&r.text),
        r.error_modality.as_str(),
        json_escape(&r.subtask_name),
        json_escape(&r.object_name)
    )
}

impl AnnotatedEpisode {
    pub fn to_json_line(&self) -> String {
        let plan: Vec<String> = self
            .plan
            .iter()
            .map(|p| format!("\"{}\"", json_escape(p)))
            .collect();
        let mut transitions = String::new();
        for (i, tr) in self.transitions.iter().enumerate() {
            if i > 0 {
                transitions.push(',');
            }
            transitions.push_str(&format!(
                "{{\"obs\":{},\"action\":{},\"status\":\"{}\",\"subtask_token\":\"{}\",\"mask\":{}}}",
                json_f64_array(&tr.obs),
                json_f64_array(&tr.action),
                tr.status.as_str(),
                json_escape(&tr.subtask_token),
                tr.mask
            ));
        }
        format!(
            "{{\"task_id\":\"{}\",\"plan\":[{}],\"error\":{},\"reflection\":{},\"transitions\":[{}]}}",
            json_escape(&self.task_id),
            plan.join(","),
            self.error
                .as_ref()
                .map(error_to_json)
                .unwrap_or_else(|| "null".to_string()),
            self.reflection
                .as_ref()
                .map(reflection_to_json)
                .unwrap_or_else(|| "null".to_string()),
            transitions
        )
    }
}

impl AnnotatedDataset {
    pub fn to_jsonl(&self) -> String {
        let mut out = self.header.to_json_line();
        out.push('\n');
        for ep in &self.episodes {
            out.push_str(&ep.to_json_line());
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, EcgenError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header_line = lines
            .next()
            .ok_or_else(|| EcgenError::Parse("empty dataset file".into()))?;
        let header = parse_header(header_line)?;
        let mut episodes = Vec::new();
        for line in lines {
            episodes.push(parse_episode(line)?);
        }
        Ok(Self { header, episodes })
    }
}

#[derive(Deserialize)]
struct RawHeader {
    format_version: u32,
    seed: u64,
    task_defs_hash: String,
    template_version: String,
    config_hash: Option<String>,
}

#[derive(Deserialize)]
struct RawError {
    modality: String,
    j: usize,
    delta: Option<[f64; 3]>,
    target: Option<[f64; 3]>,
    distractor: Option<[f64; 3]>,
}

#[derive(Deserialize)]
struct RawReflection {
    template_id: String,
    text: String,
    modality: String,
    subtask: String,
    object: String,
}

#[derive(Deserialize)]
struct RawTransition {
    obs: Vec<f64>,
    action: [f64; 4],
    status: String,
    subtask_token: String,
    mask: bool,
}

#[derive(Deserialize)]
struct RawEpisode {
    task_id: String,
    plan: Vec<String>,
    error: Option<RawError>,
    reflection: Option<RawReflection>,
    transitions: Vec<RawTransition>,
}

fn parse_header(line: &str) -> Result<DatasetHeader, EcgenError> {
    let raw: RawHeader =
        serde_json::from_str(line).map_err(|e| EcgenError::Parse(e.to_string()))?;
    Ok(DatasetHeader {
        format_version: raw.format_version,
        seed: raw.seed,
        task_defs_hash: raw.task_defs_hash,
        template_version: raw.template_version,
        config_hash: raw.config_hash,
    })
}

fn parse_error(raw: RawError) -> Result<ErrorSpec, EcgenError> {
    let modality = ErrorModality::parse(&raw.modality)
        .ok_or_else(|| EcgenError::Parse(format!("unknown modality `{}`", raw.modality)))?;
    Ok(match modality {
        ErrorModality::Gripper => ErrorSpec::Gripper { j: raw.j },
        ErrorModality::Pose => ErrorSpec::Pose {
            j: raw.j,
            delta: raw
                .delta
                .ok_or_else(|| EcgenError::Parse("pose error missing delta".into()))?,
        },
        ErrorModality::Semantic => ErrorSpec::Semantic {
            j: raw.j,
            target: raw
                .target
                .ok_or_else(|| EcgenError::Parse("semantic error missing target".into()))?,
            distractor: raw
                .distractor
                .ok_or_else(|| EcgenError::Parse("semantic error missing distractor".into()))?,
        },
    })
}

fn parse_episode(line: &str) -> Result<AnnotatedEpisode, EcgenError> {
    let raw: RawEpisode =
        serde_json::from_str(line).map_err(|e| EcgenError::Parse(e.to_string()))?;
    let error = raw.error.map(parse_error).transpose()?;
    let reflection = raw
        .reflection
        .map(|r| -> Result<ReflectionRecord, EcgenError> {
            Ok(ReflectionRecord {
                template_id: r.template_id,
                text: r.text,
                error_modality: ErrorModality::parse(&r.modality).ok_or_else(|| {
                    EcgenError::Parse(format!("unknown modality `{}`", r.modality))
                })?,
                subtask_name: r.subtask,
                object_name: r.object,
            })
        })
        .transpose()?;
    let mut transitions = Vec::with_capacity(raw.transitions.len());
    for tr in raw.transitions {
        transitions.push(DenseTransition {
            obs: tr.obs,
            action: tr.action,
            status: TriggerStatus::parse(&tr.status)
                .ok_or_else(|| EcgenError::Parse(format!("unknown status `{}`", tr.status)))?,
            subtask_token: tr.subtask_token,
            mask: tr.mask,
        });
    }
    Ok(AnnotatedEpisode {
        task_id: raw.task_id,
        plan: raw.plan,
        error,
        reflection,
        transitions,
    })
}
