//! The self-evolving continual-learning loop: identify the competence
//! boundary, harvest successful rollouts there, train the online adapter
//! under the orthogonality constraint, and consolidate via EMA fusion.

use crate::ecgen::{AnnotatedDataset, AnnotatedEpisode, DatasetHeader, TEMPLATE_VERSION};
use crate::learner::adapter::AdapterState;
use crate::learner::{
    build_training_set, train, AdapterLayerState, LearnError, LearnedPolicy, LossMode,
    ModelWeights, TokenVocab, TrainConfig, TrainScope,
};
use crate::runtime::{Experts, RuntimeError};
use crate::util::{derive, derive_n, fmt_f64, json_escape, rng, stream};
use crate::world::{RolloutRecord, TaskSet, WorldParams, WorldSetting};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SeclError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("boundary set is empty")]
    EmptyBoundary,
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Ecgen(#[from] crate::ecgen::EcgenError),
}

/// Continual-learning knobs. Defaults carry the reference values: EMA 0.9,
/// ortho weight 0.5, band [0.2, 0.8], 50 trials per setting.
#[derive(Debug, Clone)]
pub struct SeclConfig {
    pub alpha: f64,
    pub beta: f64,
    pub tau_low: f64,
    pub tau_high: f64,
    pub trials_per_setting: u32,
    pub harvest_target: usize,
    /// Attempt budget multiplier: harvesting stops after
    /// `harvest_target * harvest_retry_factor` rollouts.
    pub harvest_retry_factor: u32,
    pub online_steps: usize,
    pub online_lr: f64,
    pub online_batch: usize,
    pub lambda: f64,
    pub mask_aux: bool,
}

impl Default for SeclConfig {
    fn default() -> Self {
        Self {
            alpha: 0.9,
            beta: 0.5,
            tau_low: 0.2,
            tau_high: 0.8,
            trials_per_setting: 50,
            harvest_target: 64,
            harvest_retry_factor: 8,
            online_steps: 600,
            online_lr: 3e-4,
            online_batch: 64,
            lambda: 0.1,
            mask_aux: false,
        }
    }
}

/// Measured success rate of one setting.
#[derive(Debug, Clone, PartialEq)]
pub struct SettingReport {
    pub setting: WorldSetting,
    pub id: String,
    pub trials: u32,
    pub successes: u32,
    pub rate: f64,
    pub mean_reasoning_count: f64,
}

/// Success-rate table plus the selected boundary band.
#[derive(Debug, Clone)]
pub struct BoundaryReport {
    pub entries: Vec<SettingReport>,
    /// Indices into `entries` whose rate lies inside the inclusive band.
    pub boundary: Vec<usize>,
    pub tau_low: f64,
    pub tau_high: f64,
}

impl BoundaryReport {
    pub fn boundary_settings(&self) -> Vec<WorldSetting> {
        self.boundary
            .iter()
            .map(|&i| self.entries[i].setting.clone())
            .collect()
    }

    pub fn boundary_ids(&self) -> Vec<String> {
        self.boundary
            .iter()
            .map(|&i| self.entries[i].id.clone())
            .collect()
    }
}

/// The inclusive band filter on a success-rate table:
/// `{h : tau_low <= SR(h) <= tau_high}`.
pub fn select_boundary(rates: &[f64], tau_low: f64, tau_high: f64) -> Vec<usize> {
    rates
        .iter()
        .enumerate()
        .filter(|(_, &r)| tau_low <= r && r <= tau_high)
        .map(|(i, _)| i)
        .collect()
}

/// Run `trials` seeded rollouts of one setting in parallel. Each trial
/// depends only on its derived seed, so worker count never changes the
/// result.
pub fn rollout_records(
    experts: &Experts<'_>,
    params: &WorldParams,
    tasks: &TaskSet,
    setting: &WorldSetting,
    trials: u32,
    seed: u64,
) -> Result<Vec<RolloutRecord>, SeclError> {
    if trials == 0 {
        return Err(SeclError::InvalidArgument("trials must be positive".into()));
    }
    let records: Result<Vec<RolloutRecord>, RuntimeError> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            crate::world::rollout(experts, params, tasks, setting, derive(seed, trial as u64))
        })
        .collect();
    Ok(records?)
}

/// Success rate of one setting over `trials` seeded rollouts.
pub fn evaluate_setting(
    experts: &Experts<'_>,
    params: &WorldParams,
    tasks: &TaskSet,
    setting: &WorldSetting,
    trials: u32,
    seed: u64,
) -> Result<SettingReport, SeclError> {
    let records = rollout_records(experts, params, tasks, setting, trials, seed)?;
    let successes = records.iter().filter(|r| r.success).count() as u32;
    let mean_reasoning = records
        .iter()
        .map(|r| r.reasoning_invocation_count as f64)
        .sum::<f64>()
        / trials as f64;
    Ok(SettingReport {
        setting: setting.clone(),
        id: setting.id(),
        trials,
        successes,
        rate: successes as f64 / trials as f64,
        mean_reasoning_count: mean_reasoning,
    })
}

/// Evaluate every setting and select the inclusive boundary band.
#[allow(clippy::too_many_arguments)]
pub fn identify_boundary(
    experts: &Experts<'_>,
    params: &WorldParams,
    tasks: &TaskSet,
    settings: &[WorldSetting],
    trials: u32,
    tau_low: f64,
    tau_high: f64,
    seed: u64,
) -> Result<BoundaryReport, SeclError> {
    if settings.is_empty() {
        return Err(SeclError::InvalidArgument("no settings provided".into()));
    }
    let mut entries = Vec::with_capacity(settings.len());
    for (i, setting) in settings.iter().enumerate() {
        entries.push(evaluate_setting(
            experts,
            params,
            tasks,
            setting,
            trials,
            derive_n(seed, &[stream::EVAL, i as u64]),
        )?);
    }
    let rates: Vec<f64> = entries.iter().map(|e| e.rate).collect();
    let boundary = select_boundary(&rates, tau_low, tau_high);
    Ok(BoundaryReport {
        entries,
        boundary,
        tau_low,
        tau_high,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HarvestStats {
    pub attempts: u32,
    pub kept: usize,
    /// True when the retry budget ran out before reaching the target.
    pub starved: bool,
}

/// Roll out within the boundary settings and keep only successful episodes,
/// re-annotated with the runtime's recorded triggers, the task's true plan,
/// and all-false masks (no injected errors).
#[allow(clippy::too_many_arguments)]
pub fn harvest(
    experts: &Experts<'_>,
    params: &WorldParams,
    tasks: &TaskSet,
    vocab: &TokenVocab,
    boundary_settings: &[WorldSetting],
    target_n: usize,
    retry_budget: u32,
    seed: u64,
) -> Result<(Vec<AnnotatedEpisode>, HarvestStats), SeclError> {
    if boundary_settings.is_empty() {
        return Err(SeclError::EmptyBoundary);
    }
    let mut kept = Vec::with_capacity(target_n);
    let mut attempts = 0u32;
    while kept.len() < target_n && attempts < retry_budget {
        let setting = &boundary_settings[(attempts as usize) % boundary_settings.len()];
        let record = crate::world::rollout(
            experts,
            params,
            tasks,
            setting,
            derive_n(seed, &[stream::HARVEST, attempts as u64]),
        )?;
        attempts += 1;
        if !record.success {
            continue;
        }
        let (_, task) = tasks
            .lookup(&setting.task_id)
            .ok_or_else(|| SeclError::InvalidArgument(format!("unknown task {}", setting.task_id)))?;
        let mut transitions = record.transitions;
        for tr in transitions.iter_mut() {
            // Rollouts carry numeric token ids; datasets use token text.
            let token = tr
                .subtask_token
                .parse::<u16>()
                .ok()
                .and_then(|id| vocab.token(id))
                .unwrap_or("<none>")
                .to_string();
            tr.subtask_token = token;
            tr.mask = false;
        }
        kept.push(AnnotatedEpisode {
            task_id: task.task_id.clone(),
            plan: task.plan_tokens(),
            error: None,
            reflection: None,
            transitions,
        });
    }
    let stats = HarvestStats {
        attempts,
        kept: kept.len(),
        starved: kept.len() < target_n,
    };
    Ok((kept, stats))
}

/// EMA fusion: `delta_offline <- alpha * delta_offline + (1 - alpha) * B*A`,
/// elementwise in a fixed order, then reinitialize the online factors and
/// recompute the offline basis.
pub fn ema_fuse(adapters: &mut AdapterState, alpha: f64, seed: u64) {
    for layer in adapters.layers.iter_mut() {
        let product = layer.online_product();
        for (d, p) in layer.delta_offline.iter_mut().zip(product.iter()) {
            *d = alpha * *d + (1.0 - alpha) * p;
        }
    }
    let mut reinit_rng = rng(derive(seed, stream::ADAPTER));
    adapters.reinit_online(&mut reinit_rng);
    adapters.recompute_bases();
}

/// The fused value `ema_fuse` must reproduce, for exactness oracles.
pub fn ema_reference(old: f64, online_product: f64, alpha: f64) -> f64 {
    alpha * old + (1.0 - alpha) * online_product
}

/// How the offline residual starts after pretraining.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OfflineInit {
    /// `delta_offline` carries the delta pretraining learned on the adapted
    /// layers (the base weight snapshot is rolled back accordingly), so the
    /// ortho penalty protects pretrained behavior from the first round.
    PretrainDelta,
    /// Start from a zero residual; the penalty only becomes active after the
    /// first fusion.
    Zero,
}

/// A deployable policy: base weights plus the evolving adapter state.
#[derive(Debug, Clone)]
pub struct PolicyState {
    pub weights: ModelWeights,
    pub adapters: AdapterState,
    pub vocab: TokenVocab,
}

impl PolicyState {
    /// Assemble the deployed state from a pretraining run.
    pub fn from_pretrain(
        init_weights: &ModelWeights,
        mut trained: ModelWeights,
        vocab: TokenVocab,
        offline_init: OfflineInit,
        seed: u64,
    ) -> Result<Self, LearnError> {
        let adapters = match offline_init {
            OfflineInit::PretrainDelta => {
                AdapterState::split_from_pretrain(init_weights, &mut trained, seed)?
            }
            OfflineInit::Zero => AdapterState::zeros(&trained.cfg, seed),
        };
        Ok(Self {
            weights: trained,
            adapters,
            vocab,
        })
    }

    pub fn policy(&self) -> LearnedPolicy {
        LearnedPolicy::new(
            self.weights.clone(),
            Some(self.adapters.clone()),
            self.vocab.clone(),
        )
    }
}

/// Everything one SECL round reports.
#[derive(Debug, Clone)]
pub struct RoundReport {
    pub round: usize,
    pub sr_table: Vec<SettingReport>,
    pub boundary_ids: Vec<String>,
    pub harvested: usize,
    pub harvest_attempts: u32,
    pub harvest_starved: bool,
    pub train_steps: usize,
    pub l_ortho_first: f64,
    pub l_ortho_last: f64,
    pub sr_table_post: Vec<SettingReport>,
    pub skipped: bool,
}

impl RoundReport {
    pub fn to_json(&self) -> String {
        let table = |entries: &[SettingReport]| -> String {
            let parts: Vec<String> = entries
                .iter()
                .map(|e| format!("\"{}\":{}", json_escape(&e.id), fmt_f64(e.rate)))
                .collect();
            format!("{{{}}}", parts.join(","))
        };
        let ids: Vec<String> = self
            .boundary_ids
            .iter()
            .map(|id| format!("\"{}\"", json_escape(id)))
            .collect();
        format!(
            "{{\"round\":{},\"sr_table\":{},\"boundary\":[{}],\"harvested\":{},\"harvest_attempts\":{},\"harvest_starved\":{},\"train_steps\":{},\"l_ortho_first\":{},\"l_ortho_last\":{},\"sr_table_post\":{},\"skipped\":{}}}",
            self.round,
            table(&self.sr_table),
            ids.join(","),
            self.harvested,
            self.harvest_attempts,
            self.harvest_starved,
            self.train_steps,
            fmt_f64(self.l_ortho_first),
            fmt_f64(self.l_ortho_last),
            table(&self.sr_table_post),
            self.skipped
        )
    }

    pub fn mean_boundary_rate_pre(&self) -> f64 {
        mean_rate(&self.sr_table, &self.boundary_ids)
    }

    pub fn mean_boundary_rate_post(&self) -> f64 {
        mean_rate(&self.sr_table_post, &self.boundary_ids)
    }
}

fn mean_rate(entries: &[SettingReport], ids: &[String]) -> f64 {
    if ids.is_empty() {
        return 0.0;
    }
    let sum: f64 = entries
        .iter()
        .filter(|e| ids.contains(&e.id))
        .map(|e| e.rate)
        .sum();
    sum / ids.len() as f64
}

/// One full SECL round: identify the boundary, harvest successes there, train
/// the online adapter with the orthogonality-constrained objective, fuse, and
/// re-evaluate the same settings with the same evaluation seeds.
pub fn run_secl_round(
    state: &mut PolicyState,
    params: &WorldParams,
    tasks: &TaskSet,
    settings: &[WorldSetting],
    cfg: &SeclConfig,
    round: usize,
    seed: u64,
) -> Result<RoundReport, SeclError> {
    let eval_seed = derive_n(seed, &[stream::EVAL, round as u64]);
    let report = {
        let policy = state.policy();
        let experts = Experts {
            monitor: &policy,
            reasoner: &policy,
            actor: &policy,
            encoder: policy.encoder(),
        };
        identify_boundary(
            &experts,
            params,
            tasks,
            settings,
            cfg.trials_per_setting,
            cfg.tau_low,
            cfg.tau_high,
            eval_seed,
        )?
    };

    if report.boundary.is_empty() {
        let sr_table = report.entries.clone();
        return Ok(RoundReport {
            round,
            sr_table: sr_table.clone(),
            boundary_ids: Vec::new(),
            harvested: 0,
            harvest_attempts: 0,
            harvest_starved: false,
            train_steps: 0,
            l_ortho_first: 0.0,
            l_ortho_last: 0.0,
            sr_table_post: sr_table,
            skipped: true,
        });
    }

    let boundary_settings = report.boundary_settings();
    let retry_budget = (cfg.harvest_target as u32).saturating_mul(cfg.harvest_retry_factor);
    let (episodes, stats) = {
        let policy = state.policy();
        let experts = Experts {
            monitor: &policy,
            reasoner: &policy,
            actor: &policy,
            encoder: policy.encoder(),
        };
        harvest(
            &experts,
            params,
            tasks,
            &state.vocab,
            &boundary_settings,
            cfg.harvest_target,
            retry_budget,
            derive_n(seed, &[stream::HARVEST, round as u64]),
        )?
    };

    if episodes.is_empty() {
        let sr_table = report.entries.clone();
        return Ok(RoundReport {
            round,
            sr_table: sr_table.clone(),
            boundary_ids: report.boundary_ids(),
            harvested: 0,
            harvest_attempts: stats.attempts,
            harvest_starved: stats.starved,
            train_steps: 0,
            l_ortho_first: 0.0,
            l_ortho_last: 0.0,
            sr_table_post: sr_table,
            skipped: true,
        });
    }

    let dataset = AnnotatedDataset {
        header: DatasetHeader {
            format_version: 1,
            seed,
            task_defs_hash: tasks.hash().to_string(),
            template_version: TEMPLATE_VERSION.to_string(),
            config_hash: None,
        },
        episodes,
    };
    let training = build_training_set(&dataset, &state.vocab, &state.weights.cfg)?;

    let mut train_cfg = TrainConfig {
        steps: cfg.online_steps,
        batch_size: cfg.online_batch,
        lr: cfg.online_lr,
        momentum: 0.9,
        grad_clip: 10.0,
        seed: derive_n(seed, &[stream::TRAIN_NOISE, round as u64]),
        lambda: cfg.lambda,
        beta: cfg.beta,
        mode: LossMode::Secl,
        scope: TrainScope::AdaptersOnly,
        mask_aux: cfg.mask_aux,
    };
    train_cfg.batch_size = train_cfg.batch_size.min(training.len().max(1));
    let curve = train(
        &mut state.weights,
        Some(&mut state.adapters),
        &training,
        &train_cfg,
    )?;
    let (l_ortho_first, l_ortho_last) = match (curve.first(), curve.last()) {
        (Some(f), Some(l)) => (f.breakdown.l_ortho, l.breakdown.l_ortho),
        _ => (0.0, 0.0),
    };

    ema_fuse(
        &mut state.adapters,
        cfg.alpha,
        derive_n(seed, &[stream::ADAPTER, round as u64]),
    );

    let policy_post = state.policy();
    let experts_post = Experts {
        monitor: &policy_post,
        reasoner: &policy_post,
        actor: &policy_post,
        encoder: policy_post.encoder(),
    };
    let mut sr_table_post = Vec::with_capacity(settings.len());
    for (i, setting) in settings.iter().enumerate() {
        sr_table_post.push(evaluate_setting(
            &experts_post,
            params,
            tasks,
            setting,
            cfg.trials_per_setting,
            derive_n(eval_seed, &[stream::EVAL, i as u64]),
        )?);
    }

    let boundary_ids = report.boundary_ids();
    Ok(RoundReport {
        round,
        sr_table: report.entries,
        boundary_ids,
        harvested: stats.kept,
        harvest_attempts: stats.attempts,
        harvest_starved: stats.starved,
        train_steps: cfg.online_steps,
        l_ortho_first,
        l_ortho_last,
        sr_table_post,
        skipped: false,
    })
}

/// Helper exposing one adapter layer for exactness tests.
pub fn layer_for_tests(adapters: &AdapterState, slot: usize) -> &AdapterLayerState {
    &adapters.layers[slot]
}
