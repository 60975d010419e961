//! Scripted experts used by tests and ablations: monitors that replay recorded
//! status labels, actors that replay recorded action sequences, and a reasoner
//! that knows the task plan.

use super::{
    Actor, PlanThought, Reasoner, RecoveryState, RuntimeError, StatusMonitor, TemplateId,
    ThoughtMemory, TokenId, TriggerStatus,
};
use rand_chacha::ChaCha8Rng;

/// Monitor that emits a scripted status per step (one-hot probabilities).
/// Steps past the script repeat the last entry.
pub struct ScriptedMonitor {
    statuses: Vec<TriggerStatus>,
    constant: Option<[f64; 4]>,
}

impl ScriptedMonitor {
    pub fn from_labels(statuses: Vec<TriggerStatus>) -> Self {
        Self {
            statuses,
            constant: None,
        }
    }

    /// Monitor that always outputs the same distribution.
    pub fn constant(probs: [f64; 4]) -> Self {
        Self {
            statuses: Vec::new(),
            constant: Some(probs),
        }
    }
}

impl StatusMonitor for ScriptedMonitor {
    fn probabilities(&self, t: usize, _features: &[f64]) -> Result<[f64; 4], RuntimeError> {
        if let Some(probs) = self.constant {
            return Ok(probs);
        }
        let status = self
            .statuses
            .get(t)
            .or_else(|| self.statuses.last())
            .copied()
            .unwrap_or(TriggerStatus::Normal);
        Ok(status.one_hot())
    }
}

/// Ablation monitor that never reports Normal. It alternates NewSubtask and
/// Error so that consecutive-trigger suppression never collapses its runs,
/// forcing a reasoner invocation on every step.
pub struct NeverNormalMonitor;

impl StatusMonitor for NeverNormalMonitor {
    fn probabilities(&self, t: usize, _features: &[f64]) -> Result<[f64; 4], RuntimeError> {
        if t % 2 == 0 {
            Ok(TriggerStatus::NewSubtask.one_hot())
        } else {
            Ok(TriggerStatus::Error.one_hot())
        }
    }
}

/// Ablation monitor that always reports Normal; with step 0 forced to
/// Initial, the policy plans once and never reasons again.
pub struct AlwaysNormalMonitor;

impl StatusMonitor for AlwaysNormalMonitor {
    fn probabilities(&self, _t: usize, _features: &[f64]) -> Result<[f64; 4], RuntimeError> {
        Ok(TriggerStatus::Normal.one_hot())
    }
}

/// Wraps a learned monitor and replaces its output with Normal: the
/// never-reason ablation used by the robustness comparison.
pub struct NeverReasonMonitor;

impl StatusMonitor for NeverReasonMonitor {
    fn probabilities(&self, _t: usize, _features: &[f64]) -> Result<[f64; 4], RuntimeError> {
        Ok(TriggerStatus::Normal.one_hot())
    }
}

/// Reasoner that knows the true task plan. Recovery redoes the current
/// subtask with a fixed reflection template.
pub struct OracleReasoner {
    plan: Vec<TokenId>,
    template: TemplateId,
}

impl OracleReasoner {
    pub fn new(plan: Vec<TokenId>, template: TemplateId) -> Self {
        Self { plan, template }
    }
}

impl Reasoner for OracleReasoner {
    fn plan(&self, _features: &[f64]) -> PlanThought {
        PlanThought {
            plan: self.plan.clone(),
        }
    }

    fn recover(&self, memory: &ThoughtMemory, _features: &[f64]) -> RecoveryState {
        let current = memory
            .current_token()
            .unwrap_or_else(|| self.plan.first().copied().unwrap_or(TokenId(0)));
        RecoveryState {
            plan: vec![current],
            index: 0,
            template: self.template,
        }
    }
}

/// Closed-loop scripted controller driven purely by the observation vector:
/// approach the first misplaced object, grasp it, carry it above its goal,
/// lower, and release. Ignores memory and status, so it pairs with any
/// monitor in tests.
pub struct GreedyActor {
    /// Number of per-object blocks in the observation layout.
    pub g_max: usize,
    /// Goal tolerance used to decide which object still needs moving.
    pub eps_goal: f64,
}

impl GreedyActor {
    pub fn new(g_max: usize, eps_goal: f64) -> Self {
        Self { g_max, eps_goal }
    }

    fn toward(from: &[f64], to: [f64; 3]) -> [f64; 3] {
        [to[0] - from[0], to[1] - from[1], to[2] - from[2]]
    }
}

impl Actor for GreedyActor {
    fn act(
        &self,
        _t: usize,
        obs: &[f64],
        _status: TriggerStatus,
        _memory_encoding: &[f64],
        _rng: &mut ChaCha8Rng,
    ) -> [f64; 4] {
        let g = self.g_max;
        let gripper = &obs[0..3];
        let objects: Vec<[f64; 3]> = (0..g)
            .map(|k| [obs[4 + 3 * k], obs[5 + 3 * k], obs[6 + 3 * k]])
            .collect();
        let held: Option<usize> = (0..g).find(|k| obs[4 + 3 * g + k] > 0.5);
        let goals: Vec<[f64; 3]> = (0..g)
            .map(|k| {
                let base = 4 + 4 * g + 3 * k;
                [obs[base], obs[base + 1], obs[base + 2]]
            })
            .collect();

        let dist = |a: &[f64], b: [f64; 3]| -> f64 {
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
        };
        let xy_dist = |a: &[f64], b: [f64; 3]| -> f64 {
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
        };

        if let Some(k) = held {
            // Carry above the goal, then lower and release.
            let goal = goals[k];
            if xy_dist(gripper, goal) > 0.02 {
                let target = [goal[0], goal[1], goal[2] + 0.15];
                let d = Self::toward(gripper, target);
                return [d[0], d[1], d[2], 1.0];
            }
            if dist(gripper, goal) > 0.01 {
                let d = Self::toward(gripper, goal);
                return [d[0], d[1], d[2], 1.0];
            }
            return [0.0, 0.0, 0.0, 0.0]; // release
        }

        // Find the first object still away from its goal.
        let pending = (0..g).find(|&k| dist(&objects[k][..], goals[k]) > self.eps_goal * 0.5);
        match pending {
            Some(k) => {
                let obj = objects[k];
                if xy_dist(gripper, obj) > 0.02 {
                    let target = [obj[0], obj[1], obj[2] + 0.15];
                    let d = Self::toward(gripper, target);
                    [d[0], d[1], d[2], 0.0]
                } else if dist(gripper, obj) > 0.02 {
                    let d = Self::toward(gripper, obj);
                    [d[0], d[1], d[2], 0.0]
                } else {
                    [0.0, 0.0, 0.0, 1.0] // grasp
                }
            }
            // Everything placed: hold position with the gripper open.
            None => [0.0, 0.0, 0.0, 0.0],
        }
    }
}

/// Actor that replays a recorded action sequence by step index; steps past
/// the script hold the last action.
pub struct ScriptedActor {
    actions: Vec<[f64; 4]>,
}

impl ScriptedActor {
    pub fn new(actions: Vec<[f64; 4]>) -> Self {
        Self { actions }
    }
}

impl Actor for ScriptedActor {
    fn act(
        &self,
        t: usize,
        _features: &[f64],
        _status: TriggerStatus,
        _memory_encoding: &[f64],
        _rng: &mut ChaCha8Rng,
    ) -> [f64; 4] {
        self.actions
            .get(t)
            .or_else(|| self.actions.last())
            .copied()
            .unwrap_or([0.0; 4])
    }
}
