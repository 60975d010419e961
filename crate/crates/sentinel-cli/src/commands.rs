//! Subcommand implementations. Every command writes its artifacts atomically
//! and returns a one-line summary.

use crate::config::{ConfigError, RunConfig};
use crate::plot;
use sentinel_core::ecgen::{generate_dataset, AnnotatedDataset, ErrorMix, GenerateConfig};
use sentinel_core::learner::{
    build_training_set, read_weights, train, write_weights, LearnedPolicy, LossMode, LossRow,
    ModelConfig, ModelWeights, TokenVocab, TrainConfig, TrainScope, WeightsFile,
};
use sentinel_core::runtime::Experts;
use sentinel_core::secl::{
    rollout_records, run_secl_round, PolicyState, SeclConfig,
};
use sentinel_core::util::atomic_write;
use sentinel_core::world::{MetricsRow, TaskSet, WorldSetting};
use std::path::{Path, PathBuf};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Domain(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Domain(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "usage error: {}", msg),
            CliError::Domain(msg) => write!(f, "error: {}", msg),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

macro_rules! domain_from {
    ($($ty:ty),*) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Domain(e.to_string())
            }
        })*
    };
}

domain_from!(
    sentinel_core::world::WorldError,
    sentinel_core::ecgen::EcgenError,
    sentinel_core::learner::LearnError,
    sentinel_core::runtime::RuntimeError,
    sentinel_core::secl::SeclError,
    std::io::Error
);

/// Load a task set from a path, or the built-in pair for the literal
/// `builtin`.
pub fn load_tasks(spec: &str) -> Result<TaskSet, CliError> {
    if spec == "builtin" {
        return Ok(TaskSet::builtin());
    }
    let text = std::fs::read_to_string(spec)
        .map_err(|e| CliError::Domain(format!("cannot read tasks file {}: {}", spec, e)))?;
    Ok(TaskSet::from_json(&text)?)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    atomic_write(path, bytes)?;
    Ok(())
}

fn expected_model_hash(tasks: &TaskSet) -> String {
    let vocab = TokenVocab::from_tasks(tasks);
    ModelConfig::for_tasks(tasks, &vocab).model_hash(tasks.hash())
}

fn load_weights_checked(path: &Path, tasks: &TaskSet) -> Result<WeightsFile, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Domain(format!("cannot read weights {}: {}", path.display(), e)))?;
    let file = read_weights(&text)?;
    let expected = expected_model_hash(tasks);
    if file.model_hash != expected {
        return Err(CliError::Domain(format!(
            "weights model hash {} does not match the run configuration's model section {}",
            file.model_hash, expected
        )));
    }
    Ok(file)
}

fn grid_settings(
    cfg: &RunConfig,
    tasks: &TaskSet,
    task_filter: Option<&str>,
    disturbed: bool,
) -> Result<Vec<WorldSetting>, CliError> {
    let (p, m) = if disturbed {
        (0.05, 0.1)
    } else {
        (
            cfg.eval_disturbance_probability,
            cfg.eval_disturbance_magnitude,
        )
    };
    let mut settings = Vec::new();
    for task in tasks.tasks() {
        if let Some(filter) = task_filter {
            if task.task_id != filter {
                continue;
            }
        }
        for &rho in &cfg.rho_grid {
            settings.push(WorldSetting {
                task_id: task.task_id.clone(),
                spawn_noise_radius: rho,
                disturbance_probability: p,
                disturbance_magnitude: m,
                seed: cfg.seed,
            });
        }
    }
    if settings.is_empty() {
        return Err(CliError::Usage(
            "task filter matched no task in the task file".into(),
        ));
    }
    Ok(settings)
}

fn with_pool<T: Send>(
    jobs: Option<usize>,
    f: impl FnOnce() -> Result<T, CliError> + Send,
) -> Result<T, CliError> {
    match jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| CliError::Domain(e.to_string()))?
            .install(f),
        None => f(),
    }
}

fn loss_csv(curve: &[LossRow]) -> String {
    let mut out = String::with_capacity(64 * curve.len() + 64);
    out.push_str(LossRow::CSV_HEADER);
    out.push('\n');
    for row in curve {
        out.push_str(&row.to_csv());
        out.push('\n');
    }
    out
}

pub struct GenerateArgs {
    pub tasks: String,
    pub n: usize,
    pub out: PathBuf,
}

pub fn cmd_generate(cfg: &RunConfig, args: &GenerateArgs) -> Result<String, CliError> {
    let tasks = load_tasks(&args.tasks)?;
    let dataset = generate_dataset(
        &cfg.world_params(),
        &tasks,
        &GenerateConfig {
            n_episodes: args.n,
            mix: ErrorMix {
                gripper: cfg.mix_gripper,
                pose: cfg.mix_pose,
                semantic: cfg.mix_semantic,
            },
            seed: cfg.seed,
            config_hash: Some(cfg.hash()),
        },
    )?;
    let transitions: usize = dataset.episodes.iter().map(|e| e.transitions.len()).sum();
    let erroneous = dataset
        .episodes
        .iter()
        .filter(|e| e.error.is_some())
        .count();
    write_atomic(&args.out, dataset.to_jsonl().as_bytes())?;
    Ok(format!(
        "generate: {} episodes ({} erroneous, {} transitions) -> {}",
        dataset.episodes.len(),
        erroneous,
        transitions,
        args.out.display()
    ))
}

pub struct PretrainArgs {
    pub tasks: String,
    pub data: PathBuf,
    pub out: PathBuf,
    pub steps: Option<usize>,
    pub loss_out: Option<PathBuf>,
}

pub fn cmd_pretrain(cfg: &RunConfig, args: &PretrainArgs) -> Result<String, CliError> {
    let tasks = load_tasks(&args.tasks)?;
    let text = std::fs::read_to_string(&args.data)?;
    let dataset = AnnotatedDataset::from_jsonl(&text)?;
    if dataset.header.task_defs_hash != tasks.hash() {
        return Err(CliError::Domain(format!(
            "dataset was generated for task hash {}, run uses {}",
            dataset.header.task_defs_hash,
            tasks.hash()
        )));
    }
    let vocab = TokenVocab::from_tasks(&tasks);
    let model_cfg = ModelConfig::for_tasks(&tasks, &vocab);
    let mut weights = ModelWeights::init(model_cfg, cfg.seed);
    let training = build_training_set(&dataset, &vocab, &model_cfg)?;
    let train_cfg = TrainConfig {
        steps: args.steps.unwrap_or(cfg.pretrain_steps),
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        momentum: cfg.momentum,
        grad_clip: cfg.grad_clip,
        seed: cfg.seed,
        lambda: cfg.lambda,
        beta: cfg.beta,
        mode: LossMode::Pretrain,
        scope: TrainScope::Full,
        mask_aux: cfg.mask_aux_losses,
    };
    let curve = train(&mut weights, None, &training, &train_cfg)?;

    let loss_path = args
        .loss_out
        .clone()
        .unwrap_or_else(|| args.out.with_extension("loss.csv"));
    write_atomic(&loss_path, loss_csv(&curve).as_bytes())?;

    let file = WeightsFile {
        model_hash: model_cfg.model_hash(tasks.hash()),
        config_hash: Some(cfg.hash()),
        seed: cfg.seed,
        weights,
        adapters: None,
        vocab,
    };
    write_atomic(&args.out, write_weights(&file).as_bytes())?;
    let final_loss = curve.last().map(|r| r.breakdown.total).unwrap_or(f64::NAN);
    Ok(format!(
        "pretrain: {} steps on {} episodes ({} samples), final total loss {:.4} -> {}",
        train_cfg.steps,
        dataset.episodes.len(),
        training.len(),
        final_loss,
        args.out.display()
    ))
}

pub struct SeclArgs {
    pub tasks: String,
    pub weights: PathBuf,
    pub rounds: Option<usize>,
    pub out_dir: PathBuf,
    pub jobs: Option<usize>,
}

pub fn cmd_secl(cfg: &RunConfig, args: &SeclArgs) -> Result<String, CliError> {
    let tasks = load_tasks(&args.tasks)?;
    let file = load_weights_checked(&args.weights, &tasks)?;
    let model_cfg = file.weights.cfg;
    let mut state = match file.adapters {
        Some(adapters) => PolicyState {
            weights: file.weights,
            adapters,
            vocab: file.vocab,
        },
        None => {
            let init = ModelWeights::init(model_cfg, file.seed);
            PolicyState::from_pretrain(&init, file.weights, file.vocab, cfg.offline_init, cfg.seed)?
        }
    };

    let params = cfg.world_params();
    let settings = grid_settings(cfg, &tasks, None, false)?;
    let secl_cfg = SeclConfig {
        alpha: cfg.alpha,
        beta: cfg.beta,
        tau_low: cfg.tau_low,
        tau_high: cfg.tau_high,
        trials_per_setting: cfg.trials,
        harvest_target: cfg.harvest_target,
        harvest_retry_factor: cfg.harvest_retry_factor,
        online_steps: cfg.online_steps,
        online_lr: cfg.online_lr,
        online_batch: cfg.online_batch,
        lambda: cfg.lambda,
        mask_aux: cfg.mask_aux_losses,
    };

    let rounds = args.rounds.unwrap_or(cfg.rounds);
    let mut lines = Vec::new();
    std::fs::create_dir_all(&args.out_dir)?;
    with_pool(args.jobs, || {
        for round in 0..rounds {
            let report =
                run_secl_round(&mut state, &params, &tasks, &settings, &secl_cfg, round, cfg.seed)?;
            let path = args.out_dir.join(format!("round_{:02}.json", round));
            write_atomic(&path, report.to_json().as_bytes())?;
            lines.push(format!(
                "round {}: boundary {} settings, harvested {}, mean boundary SR {:.3} -> {:.3}{}",
                round,
                report.boundary_ids.len(),
                report.harvested,
                report.mean_boundary_rate_pre(),
                report.mean_boundary_rate_post(),
                if report.skipped { " (skipped)" } else { "" }
            ));
        }
        Ok(())
    })?;

    let out_weights = args.out_dir.join("weights.json");
    let file = WeightsFile {
        model_hash: model_cfg.model_hash(tasks.hash()),
        config_hash: Some(cfg.hash()),
        seed: cfg.seed,
        weights: state.weights,
        adapters: Some(state.adapters),
        vocab: state.vocab,
    };
    write_atomic(&out_weights, write_weights(&file).as_bytes())?;
    Ok(format!(
        "secl: {} rounds [{}] -> {}",
        rounds,
        lines.join("; "),
        out_weights.display()
    ))
}

pub struct EvalArgs {
    pub tasks: String,
    pub weights: PathBuf,
    pub out: PathBuf,
    pub task: Option<String>,
    pub episodes: Option<u32>,
    pub plot_dir: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub disturbed: bool,
}

pub fn cmd_eval(cfg: &RunConfig, args: &EvalArgs) -> Result<String, CliError> {
    let tasks = load_tasks(&args.tasks)?;
    let file = load_weights_checked(&args.weights, &tasks)?;
    let policy = LearnedPolicy::new(file.weights, file.adapters, file.vocab);
    let experts = Experts {
        monitor: &policy,
        reasoner: &policy,
        actor: &policy,
        encoder: policy.encoder(),
    };
    let params = cfg.world_params();
    let settings = grid_settings(cfg, &tasks, args.task.as_deref(), args.disturbed)?;
    let episodes = args.episodes.unwrap_or(cfg.trials);

    let (rows, all_counts) = with_pool(args.jobs, || {
        let mut rows: Vec<MetricsRow> = Vec::with_capacity(settings.len());
        let mut all_counts: Vec<u32> = Vec::new();
        for (i, setting) in settings.iter().enumerate() {
            let records = rollout_records(
                &experts,
                &params,
                &tasks,
                setting,
                episodes,
                sentinel_core::util::derive_n(
                    cfg.seed,
                    &[sentinel_core::util::stream::EVAL, i as u64],
                ),
            )?;
            let successes = records.iter().filter(|r| r.success).count() as u32;
            let mean_reasoning = records
                .iter()
                .map(|r| r.reasoning_invocation_count as f64)
                .sum::<f64>()
                / episodes as f64;
            all_counts.extend(records.iter().map(|r| r.reasoning_invocation_count));
            rows.push(MetricsRow {
                setting_id: setting.id(),
                rho: setting.spawn_noise_radius,
                episodes,
                successes,
                success_rate: successes as f64 / episodes as f64,
                mean_reasoning_count: mean_reasoning,
            });
        }
        Ok((rows, all_counts))
    })?;

    let mut csv = format!(
        "# format_version=1 config_hash={} seed={}\n{}\n",
        cfg.hash(),
        cfg.seed,
        MetricsRow::CSV_HEADER
    );
    for row in &rows {
        csv.push_str(&row.to_csv());
        csv.push('\n');
    }
    write_atomic(&args.out, csv.as_bytes())?;

    if let Some(plot_dir) = &args.plot_dir {
        std::fs::create_dir_all(plot_dir)?;
        let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
        for row in &rows {
            let task_id = row
                .setting_id
                .split(":rho=")
                .next()
                .unwrap_or("task")
                .to_string();
            match series.iter_mut().find(|(name, _)| *name == task_id) {
                Some((_, pts)) => pts.push((row.rho, row.success_rate)),
                None => series.push((task_id, vec![(row.rho, row.success_rate)])),
            }
        }
        write_atomic(
            &plot_dir.join("success_rate.svg"),
            plot::success_vs_rho(&series, &cfg.hash()).as_bytes(),
        )?;
        write_atomic(
            &plot_dir.join("reasoning_counts.svg"),
            plot::reasoning_histogram(&all_counts, &cfg.hash()).as_bytes(),
        )?;
    }

    let mean_sr = rows.iter().map(|r| r.success_rate).sum::<f64>() / rows.len() as f64;
    Ok(format!(
        "eval: {} settings x {} episodes, mean success rate {:.3} -> {}",
        rows.len(),
        episodes,
        mean_sr,
        args.out.display()
    ))
}

pub struct RolloutArgs {
    pub tasks: String,
    pub policy: PathBuf,
    pub setting: PathBuf,
    pub episodes: u32,
    pub out: PathBuf,
    pub trace: Option<PathBuf>,
    pub jobs: Option<usize>,
}

pub fn cmd_rollout(cfg: &RunConfig, args: &RolloutArgs) -> Result<String, CliError> {
    let tasks = load_tasks(&args.tasks)?;
    let file = load_weights_checked(&args.policy, &tasks)?;
    let policy = LearnedPolicy::new(file.weights, file.adapters, file.vocab);
    let experts = Experts {
        monitor: &policy,
        reasoner: &policy,
        actor: &policy,
        encoder: policy.encoder(),
    };
    let params = cfg.world_params();
    let setting_text = std::fs::read_to_string(&args.setting)?;
    let setting = sentinel_core::world::parse_setting_json(&setting_text)?;

    let records = with_pool(args.jobs, || {
        Ok(rollout_records(
            &experts, &params, &tasks, &setting, args.episodes, cfg.seed,
        )?)
    })?;
    let successes = records.iter().filter(|r| r.success).count() as u32;
    let row = MetricsRow {
        setting_id: setting.id(),
        rho: setting.spawn_noise_radius,
        episodes: args.episodes,
        successes,
        success_rate: successes as f64 / args.episodes as f64,
        mean_reasoning_count: records
            .iter()
            .map(|r| r.reasoning_invocation_count as f64)
            .sum::<f64>()
            / args.episodes as f64,
    };
    let csv = format!(
        "# format_version=1 config_hash={} seed={}\n{}\n{}\n",
        cfg.hash(),
        cfg.seed,
        MetricsRow::CSV_HEADER,
        row.to_csv()
    );
    write_atomic(&args.out, csv.as_bytes())?;

    if let Some(trace_path) = &args.trace {
        // Trace of the first episode, one JSON object per step.
        let run = sentinel_core::runtime::run_episode(
            &experts,
            &params,
            &tasks,
            &setting,
            sentinel_core::util::derive(cfg.seed, 0),
        )?;
        let mut text = String::new();
        for step in &run.trace {
            text.push_str(&step.to_json());
            text.push('\n');
        }
        write_atomic(trace_path, text.as_bytes())?;
    }

    Ok(format!(
        "rollout: {} episodes of {}, success rate {:.3} -> {}",
        args.episodes,
        setting.id(),
        row.success_rate,
        args.out.display()
    ))
}
