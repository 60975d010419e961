//! Command layer for the sentinel toolkit: dataset generation, pretraining,
//! continual learning, evaluation, and single-setting rollouts.

pub mod commands;
pub mod config;
pub mod plot;

pub use commands::{
    cmd_eval, cmd_generate, cmd_pretrain, cmd_rollout, cmd_secl, CliError, EvalArgs, GenerateArgs,
    PretrainArgs, RolloutArgs, SeclArgs,
};
pub use config::{ConfigError, RunConfig};
