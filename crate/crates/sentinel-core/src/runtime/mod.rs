//! The sentinel dispatch loop: status classification, on-demand thought-memory
//! updates, and action generation over pluggable expert interfaces.
//!
//! The loop runs `classify -> dispatch -> act` once per world step. Reasoning
//! happens only on the first step of a maximal run of identical non-Normal
//! statuses; every Normal step leaves the memory bitwise untouched.

pub mod oracle;

use crate::util::{fmt_f64, json_f64_array, stream};
use crate::world::{
    self, DisturbanceConfig, RolloutRecord, TaskSet, WorldParams, WorldSetting,
};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("feature vector has dimension {got}, monitor expects {expected}")]
    InvalidFeatures { expected: usize, got: usize },
    #[error("monitor probabilities sum to {0}, expected 1 within 1e-9")]
    InvalidProbabilities(f64),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error(transparent)]
    World(#[from] world::WorldError),
}

/// The sentinel's four-way execution status.
///
/// The declaration order is the tie-break order for `classify`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TriggerStatus {
    Initial,
    Normal,
    NewSubtask,
    Error,
}

impl TriggerStatus {
    pub const ALL: [TriggerStatus; 4] = [
        TriggerStatus::Initial,
        TriggerStatus::Normal,
        TriggerStatus::NewSubtask,
        TriggerStatus::Error,
    ];

    pub fn index(self) -> usize {
        match self {
            TriggerStatus::Initial => 0,
            TriggerStatus::Normal => 1,
            TriggerStatus::NewSubtask => 2,
            TriggerStatus::Error => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TriggerStatus::Initial => "initial",
            TriggerStatus::Normal => "normal",
            TriggerStatus::NewSubtask => "new_subtask",
            TriggerStatus::Error => "error",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|v| v.as_str() == s)
    }

    pub fn one_hot(self) -> [f64; 4] {
        let mut v = [0.0; 4];
        v[self.index()] = 1.0;
        v
    }
}

/// Id of a subtask token in the model vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TokenId(pub u16);

/// Id of a reflection template (index into the fixed template table).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TemplateId(pub u8);

/// Recovery context set by an Error dispatch and cleared when the redone
/// subtask completes.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryState {
    pub plan: Vec<TokenId>,
    pub index: usize,
    pub template: TemplateId,
}

/// The persistent thought memory `M_t`: the task plan, the current subtask,
/// an optional recovery plan with its reflection template, and a revision
/// counter that increments exactly when contents change.
#[derive(Debug, Clone, PartialEq)]
pub struct ThoughtMemory {
    pub plan: Vec<TokenId>,
    pub current_index: usize,
    pub recovery: Option<RecoveryState>,
    pub revision: u64,
}

impl ThoughtMemory {
    pub fn empty() -> Self {
        Self {
            plan: Vec::new(),
            current_index: 0,
            recovery: None,
            revision: 0,
        }
    }

    /// The subtask currently being executed: the recovery plan's entry while
    /// recovering, the main plan's entry otherwise.
    pub fn current_token(&self) -> Option<TokenId> {
        match &self.recovery {
            Some(rec) => rec.plan.get(rec.index).copied(),
            None => self.plan.get(self.current_index).copied(),
        }
    }
}

/// Fixed layout of the memory encoding fed to the actor: current-subtask
/// one-hot over the token vocabulary, a recovery flag, and a reflection
/// template one-hot (zero vector when absent).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemoryEncoder {
    pub vocab_size: usize,
    pub template_count: usize,
}

impl MemoryEncoder {
    pub fn dim(&self) -> usize {
        self.vocab_size + 1 + self.template_count
    }

    pub fn encode(&self, memory: &ThoughtMemory) -> Vec<f64> {
        self.encode_parts(
            memory.current_token(),
            memory.recovery.is_some(),
            memory.recovery.as_ref().map(|r| r.template),
        )
    }

    pub fn encode_parts(
        &self,
        current: Option<TokenId>,
        recovering: bool,
        template: Option<TemplateId>,
    ) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        if let Some(TokenId(t)) = current {
            if (t as usize) < self.vocab_size {
                out[t as usize] = 1.0;
            }
        }
        out[self.vocab_size] = if recovering { 1.0 } else { 0.0 };
        if let Some(TemplateId(id)) = template {
            if (id as usize) < self.template_count {
                out[self.vocab_size + 1 + id as usize] = 1.0;
            }
        }
        out
    }
}

/// Produces a 4-way trigger probability distribution from features.
pub trait StatusMonitor: Send + Sync {
    /// Probabilities must sum to 1 within 1e-9. `t` is the episode step,
    /// available so scripted monitors can replay recorded labels.
    fn probabilities(&self, t: usize, features: &[f64]) -> Result<[f64; 4], RuntimeError>;
}

/// Plan produced by an Initial dispatch.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanThought {
    pub plan: Vec<TokenId>,
}

/// The cognitive policy invoked on non-Normal statuses.
pub trait Reasoner: Send + Sync {
    /// Produce the initial task plan.
    fn plan(&self, features: &[f64]) -> PlanThought;
    /// Formulate a recovery plan plus reflection for the current error.
    fn recover(&self, memory: &ThoughtMemory, features: &[f64]) -> RecoveryState;
}

/// Generates the action from features, status, and the encoded memory.
pub trait Actor: Send + Sync {
    fn act(
        &self,
        t: usize,
        features: &[f64],
        status: TriggerStatus,
        memory_encoding: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> [f64; 4];
}

/// Expert bundle consumed by the episode loop.
pub struct Experts<'a> {
    pub monitor: &'a dyn StatusMonitor,
    pub reasoner: &'a dyn Reasoner,
    pub actor: &'a dyn Actor,
    pub encoder: MemoryEncoder,
}

/// Argmax of the monitor output with ties broken by enum declaration order.
/// At episode step 0 the status is forced to Initial regardless of output.
pub fn classify(
    monitor: &dyn StatusMonitor,
    t: usize,
    features: &[f64],
) -> Result<TriggerStatus, RuntimeError> {
    let probs = monitor.probabilities(t, features)?;
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(RuntimeError::InvalidProbabilities(sum));
    }
    if t == 0 {
        return Ok(TriggerStatus::Initial);
    }
    let mut best = 0;
    for i in 1..4 {
        if probs[i] > probs[best] {
            best = i;
        }
    }
    Ok(TriggerStatus::from_index(best).unwrap())
}

/// Effect of a dispatch, alongside the updated memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DispatchInfo {
    /// Whether the reasoner was invoked (any non-Normal status).
    pub reasoned: bool,
    /// Set when a NewSubtask arrived at the last subtask of the plan.
    pub episode_complete: bool,
}

/// Pure memory-update logic for one trigger status.
///
/// Normal returns the memory bitwise unchanged. Initial installs a fresh plan.
/// NewSubtask advances the current subtask (leaving recovery mode if active).
/// Error installs a recovery plan plus reflection.
pub fn dispatch(
    status: TriggerStatus,
    memory: &ThoughtMemory,
    reasoner: &dyn Reasoner,
    features: &[f64],
) -> (ThoughtMemory, DispatchInfo) {
    match status {
        TriggerStatus::Normal => (
            memory.clone(),
            DispatchInfo {
                reasoned: false,
                episode_complete: false,
            },
        ),
        TriggerStatus::Initial => {
            let thought = reasoner.plan(features);
            (
                ThoughtMemory {
                    plan: thought.plan,
                    current_index: 0,
                    recovery: None,
                    revision: memory.revision + 1,
                },
                DispatchInfo {
                    reasoned: true,
                    episode_complete: false,
                },
            )
        }
        TriggerStatus::NewSubtask => {
            let mut next = memory.clone();
            let mut complete = false;
            if next.recovery.is_some() {
                // The redone subtask finished; resume the main plan.
                next.recovery = None;
                if next.current_index + 1 < next.plan.len() {
                    next.current_index += 1;
                }
                next.revision += 1;
            } else if next.current_index + 1 < next.plan.len() {
                next.current_index += 1;
                next.revision += 1;
            } else {
                // Subtask update at the last subtask: the plan is exhausted.
                complete = true;
            }
            (
                next,
                DispatchInfo {
                    reasoned: true,
                    episode_complete: complete,
                },
            )
        }
        TriggerStatus::Error => {
            let mut next = memory.clone();
            next.recovery = Some(reasoner.recover(memory, features));
            next.revision += 1;
            (
                next,
                DispatchInfo {
                    reasoned: true,
                    episode_complete: false,
                },
            )
        }
    }
}

/// One line of the episode trace file.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub t: usize,
    /// Raw classified status, before trigger suppression.
    pub status: TriggerStatus,
    pub revision: u64,
    /// Whether this step invoked the reasoner.
    pub reasoned: bool,
    pub action: [f64; 4],
    pub disturbed: bool,
}

impl TraceStep {
    pub fn to_json(&self) -> String {
        format!(
            "{{\"t\":{},\"status\":\"{}\",\"revision\":{},\"reasoned\":{},\"action\":{},\"disturbed\":{}}}",
            self.t,
            self.status.as_str(),
            self.revision,
            self.reasoned,
            json_f64_array(&self.action),
            self.disturbed
        )
    }
}

/// Result of running the sentinel loop through one episode.
#[derive(Debug, Clone)]
pub struct EpisodeRun {
    pub record: RolloutRecord,
    pub trace: Vec<TraceStep>,
    pub final_memory: ThoughtMemory,
}

/// Suppression gate: a non-Normal status triggers only on the first step of a
/// maximal run of identical raw statuses.
#[derive(Debug, Default)]
pub struct TriggerGate {
    prev: Option<TriggerStatus>,
}

impl TriggerGate {
    pub fn new() -> Self {
        Self { prev: None }
    }

    /// Map a raw status to the effective status for dispatch.
    pub fn effective(&mut self, raw: TriggerStatus) -> TriggerStatus {
        let suppressed = self.prev == Some(raw) && raw != TriggerStatus::Normal;
        self.prev = Some(raw);
        if suppressed {
            TriggerStatus::Normal
        } else {
            raw
        }
    }
}

/// Run the sentinel loop against the world until success or the step budget.
///
/// Deterministic given (expert weights, setting, trial_seed): the spawn,
/// disturbance, and action-sampling streams all derive from those two seeds.
pub fn run_episode(
    experts: &Experts<'_>,
    params: &WorldParams,
    tasks: &TaskSet,
    setting: &WorldSetting,
    trial_seed: u64,
) -> Result<EpisodeRun, RuntimeError> {
    let (task_index, task) = tasks
        .lookup(&setting.task_id)
        .ok_or_else(|| RuntimeError::UnknownTask(setting.task_id.clone()))?;
    let base = crate::util::derive(setting.seed, trial_seed);
    let mut spawn_rng = crate::util::rng(crate::util::derive(base, stream::SPAWN));
    let mut disturb_rng = crate::util::rng(crate::util::derive(base, stream::DISTURB));
    let mut act_rng = crate::util::rng(crate::util::derive(base, stream::FLOW_SAMPLE));

    let scene = world::spawn_scene(task, setting.spawn_noise_radius, &mut spawn_rng)?;
    let mut state = world::initial_state(task, &scene);
    let disturb = DisturbanceConfig {
        probability: setting.disturbance_probability,
        magnitude: setting.disturbance_magnitude,
    };

    let mut memory = ThoughtMemory::empty();
    let mut gate = TriggerGate::new();
    let mut transitions = Vec::new();
    let mut trace = Vec::new();
    let mut reasoning_count: u32 = 0;

    let mut t = 0usize;
    while !world::success(params, &state) && (t as u32) < params.t_max {
        let features = world::encode_observation(tasks, task_index, &state);
        let raw = classify(experts.monitor, t, &features)?;
        let effective = gate.effective(raw);
        let info;
        (memory, info) = dispatch(effective, &memory, experts.reasoner, &features);
        if info.reasoned {
            reasoning_count += 1;
        }
        let encoding = experts.encoder.encode(&memory);
        let action = experts
            .actor
            .act(t, &features, effective, &encoding, &mut act_rng);
        let step = world::step(params, &state, action, &disturb, &mut disturb_rng);

        transitions.push(crate::geometry::DenseTransition {
            obs: features,
            action,
            status: raw,
            subtask_token: memory
                .current_token()
                .map(|id| id.0.to_string())
                .unwrap_or_default(),
            mask: false,
        });
        trace.push(TraceStep {
            t,
            status: raw,
            revision: memory.revision,
            reasoned: info.reasoned,
            action,
            disturbed: step.disturbed,
        });

        state = step.state;
        t += 1;
    }

    let success = world::success(params, &state);
    Ok(EpisodeRun {
        record: RolloutRecord {
            setting: setting.clone(),
            transitions,
            success,
            reasoning_invocation_count: reasoning_count,
        },
        trace,
        final_memory: memory,
    })
}

/// Drive the trigger gate and dispatcher over a recorded status-label
/// sequence without a world: the oracle-status simulation used to verify the
/// reasoning-count identity. Returns the final memory, the revision sequence,
/// and the reasoner-invocation count.
pub fn replay_statuses(
    statuses: &[TriggerStatus],
    reasoner: &dyn Reasoner,
) -> (ThoughtMemory, Vec<u64>, u32) {
    let mut memory = ThoughtMemory::empty();
    let mut gate = TriggerGate::new();
    let mut revisions = Vec::with_capacity(statuses.len());
    let mut count = 0;
    for &raw in statuses {
        let effective = gate.effective(raw);
        let info;
        (memory, info) = dispatch(effective, &memory, reasoner, &[]);
        if info.reasoned {
            count += 1;
        }
        revisions.push(memory.revision);
    }
    (memory, revisions, count)
}

/// Expected reasoning count for a status-label sequence under the trigger
/// gate: one per maximal run of identical non-Normal statuses.
pub fn expected_reasoning_count(statuses: &[TriggerStatus]) -> u32 {
    let mut count = 0;
    let mut prev: Option<TriggerStatus> = None;
    for &s in statuses {
        if s != TriggerStatus::Normal && prev != Some(s) {
            count += 1;
        }
        prev = Some(s);
    }
    count
}

pub fn format_trace_line(step: &TraceStep) -> String {
    step.to_json()
}

/// Helper shared by trace writers: formats an action for logs.
pub fn format_action(action: &[f64; 4]) -> String {
    format!(
        "[{}, {}, {}, {}]",
        fmt_f64(action[0]),
        fmt_f64(action[1]),
        fmt_f64(action[2]),
        fmt_f64(action[3])
    )
}
