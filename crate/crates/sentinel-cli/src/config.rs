//! Flat `key = value` run configuration. Unknown keys are rejected with the
//! offending key named; defaults carry the reference hyperparameters
//! (lambda 0.1, alpha 0.9, beta 0.5, band [0.2, 0.8], 50 trials).

use sentinel_core::secl::OfflineInit;
use sentinel_core::util::sha256_hex;
use sentinel_core::world::WorldParams;
use std::fmt::Write as _;

#[derive(Debug)]
pub enum ConfigError {
    UnknownKey(String),
    BadValue { key: String, value: String },
    Io(String),
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConfigError::UnknownKey(key) => write!(f, "unknown config key `{}`", key),
            ConfigError::BadValue { key, value } => {
                write!(f, "bad value `{}` for config key `{}`", value, key)
            }
            ConfigError::Io(msg) => write!(f, "cannot read config: {}", msg),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub tau_low: f64,
    pub tau_high: f64,
    pub trials: u32,
    pub rounds: usize,
    pub mix_gripper: f64,
    pub mix_pose: f64,
    pub mix_semantic: f64,
    pub pretrain_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub online_steps: usize,
    pub online_lr: f64,
    pub online_batch: usize,
    pub momentum: f64,
    pub grad_clip: f64,
    pub harvest_target: usize,
    pub harvest_retry_factor: u32,
    pub offline_init: OfflineInit,
    pub mask_aux_losses: bool,
    pub t_max: u32,
    pub steps_per_segment: usize,
    pub eps_grasp: f64,
    pub eps_goal: f64,
    pub max_step: f64,
    pub max_segment_span: f64,
    pub rho_grid: Vec<f64>,
    pub eval_disturbance_probability: f64,
    pub eval_disturbance_magnitude: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            lambda: 0.1,
            alpha: 0.9,
            beta: 0.5,
            tau_low: 0.2,
            tau_high: 0.8,
            trials: 50,
            rounds: 2,
            mix_gripper: 0.2,
            mix_pose: 0.2,
            mix_semantic: 0.2,
            pretrain_steps: 3000,
            batch_size: 64,
            lr: 1e-3,
            online_steps: 600,
            online_lr: 3e-4,
            online_batch: 64,
            momentum: 0.9,
            grad_clip: 10.0,
            harvest_target: 64,
            harvest_retry_factor: 8,
            offline_init: OfflineInit::PretrainDelta,
            mask_aux_losses: false,
            t_max: 400,
            steps_per_segment: 10,
            eps_grasp: 0.03,
            eps_goal: 0.05,
            max_step: 0.05,
            max_segment_span: 0.35,
            rho_grid: (0..=10).map(|i| i as f64 * 0.05).collect(),
            eval_disturbance_probability: 0.0,
            eval_disturbance_magnitude: 0.0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.trim().parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
    })
}

impl RunConfig {
    /// Parse a `key = value` document over the defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for raw_line in text.lines() {
            let line = raw_line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::BadValue {
                key: line.to_string(),
                value: String::new(),
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| ConfigError::Io(e.to_string()))?;
        Self::parse(&text)
    }

    /// Apply the `SENTINEL_SEED` environment override when present.
    pub fn apply_env(&mut self) -> Result<(), ConfigError> {
        if let Ok(value) = std::env::var("SENTINEL_SEED") {
            self.seed = parse("SENTINEL_SEED", &value)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "tau_low" => self.tau_low = parse(key, value)?,
            "tau_high" => self.tau_high = parse(key, value)?,
            "trials" => self.trials = parse(key, value)?,
            "rounds" => self.rounds = parse(key, value)?,
            "mix_gripper" => self.mix_gripper = parse(key, value)?,
            "mix_pose" => self.mix_pose = parse(key, value)?,
            "mix_semantic" => self.mix_semantic = parse(key, value)?,
            "pretrain_steps" => self.pretrain_steps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "online_steps" => self.online_steps = parse(key, value)?,
            "online_lr" => self.online_lr = parse(key, value)?,
            "online_batch" => self.online_batch = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "grad_clip" => self.grad_clip = parse(key, value)?,
            "harvest_target" => self.harvest_target = parse(key, value)?,
            "harvest_retry_factor" => self.harvest_retry_factor = parse(key, value)?,
            "offline_init" => {
                self.offline_init = match value {
                    "pretrain_delta" => OfflineInit::PretrainDelta,
                    "zero" => OfflineInit::Zero,
                    other => {
                        return Err(ConfigError::BadValue {
                            key: key.to_string(),
                            value: other.to_string(),
                        })
                    }
                }
            }
            "mask_aux_losses" => self.mask_aux_losses = parse(key, value)?,
            "t_max" => self.t_max = parse(key, value)?,
            "steps_per_segment" => self.steps_per_segment = parse(key, value)?,
            "eps_grasp" => self.eps_grasp = parse(key, value)?,
            "eps_goal" => self.eps_goal = parse(key, value)?,
            "max_step" => self.max_step = parse(key, value)?,
            "max_segment_span" => self.max_segment_span = parse(key, value)?,
            "rho_grid" => {
                let mut grid = Vec::new();
                for part in value.split(',') {
                    grid.push(parse::<f64>(key, part)?);
                }
                if grid.is_empty() {
                    return Err(ConfigError::BadValue {
                        key: key.to_string(),
                        value: value.to_string(),
                    });
                }
                self.rho_grid = grid;
            }
            "eval_disturbance_probability" => {
                self.eval_disturbance_probability = parse(key, value)?
            }
            "eval_disturbance_magnitude" => self.eval_disturbance_magnitude = parse(key, value)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    pub fn world_params(&self) -> WorldParams {
        WorldParams {
            t_max: self.t_max,
            steps_per_segment: self.steps_per_segment,
            eps_grasp: self.eps_grasp,
            eps_goal: self.eps_goal,
            max_step: self.max_step,
            max_segment_span: self.max_segment_span,
        }
    }

    /// Canonical serialization of every field; the basis of the config hash
    /// embedded in artifacts.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let grid: Vec<String> = self.rho_grid.iter().map(|v| format!("{}", v)).collect();
        let _ = write!(
            s,
            "alpha={}\nbatch_size={}\nbeta={}\neps_goal={}\neps_grasp={}\n\
             eval_disturbance_magnitude={}\neval_disturbance_probability={}\ngrad_clip={}\n\
             harvest_retry_factor={}\nharvest_target={}\nlambda={}\nlr={}\n\
             mask_aux_losses={}\nmax_segment_span={}\nmax_step={}\nmix_gripper={}\n\
             mix_pose={}\nmix_semantic={}\nmomentum={}\noffline_init={}\nonline_batch={}\n\
             online_lr={}\nonline_steps={}\npretrain_steps={}\nrho_grid={}\nrounds={}\n\
             seed={}\nsteps_per_segment={}\nt_max={}\ntau_high={}\ntau_low={}\ntrials={}\n",
            self.alpha,
            self.batch_size,
            self.beta,
            self.eps_goal,
            self.eps_grasp,
            self.eval_disturbance_magnitude,
            self.eval_disturbance_probability,
            self.grad_clip,
            self.harvest_retry_factor,
            self.harvest_target,
            self.lambda,
            self.lr,
            self.mask_aux_losses,
            self.max_segment_span,
            self.max_step,
            self.mix_gripper,
            self.mix_pose,
            self.mix_semantic,
            self.momentum,
            match self.offline_init {
                OfflineInit::PretrainDelta => "pretrain_delta",
                OfflineInit::Zero => "zero",
            },
            self.online_batch,
            self.online_lr,
            self.online_steps,
            self.pretrain_steps,
            grid.join(","),
            self.rounds,
            self.seed,
            self.steps_per_segment,
            self.t_max,
            self.tau_high,
            self.tau_low,
            self.trials,
        );
        s
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.canonical().as_bytes())
    }
}
