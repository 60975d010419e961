use clap::{Parser, Subcommand};
use sentinel_cli::{
    cmd_eval, cmd_generate, cmd_pretrain, cmd_rollout, cmd_secl, CliError, EvalArgs, GenerateArgs,
    PretrainArgs, RolloutArgs, RunConfig, SeclArgs,
};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "sentinel",
    version,
    about = "Status-monitored manipulation policies: data synthesis, training, continual learning, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize an error-recovery dataset from scripted experts.
    Generate {
        /// Task file path, or `builtin` for the built-in pair.
        #[arg(long)]
        tasks: String,
        /// Number of episodes.
        #[arg(long)]
        n: usize,
        /// Per-modality injection probabilities `gripper,pose,semantic`.
        #[arg(long)]
        mix: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a policy on a generated dataset.
    Pretrain {
        #[arg(long)]
        tasks: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Loss-curve CSV destination (default: `<out>.loss.csv`).
        #[arg(long)]
        loss_out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run self-evolving continual-learning rounds.
    Secl {
        #[arg(long)]
        tasks: String,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for round reports and fused weights.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Evaluate a weights file across the difficulty grid.
    Eval {
        #[arg(long)]
        tasks: String,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Restrict to one task id.
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        episodes: Option<u32>,
        #[arg(long)]
        seed: Option<u64>,
        /// Emit SVG plots into this directory.
        #[arg(long)]
        plot: Option<PathBuf>,
        #[arg(long)]
        jobs: Option<usize>,
        /// Evaluate under the disturbance protocol (5% per step, +/-0.1 m).
        #[arg(long)]
        disturbed: bool,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Roll out a policy in one setting.
    Rollout {
        #[arg(long)]
        tasks: String,
        #[arg(long)]
        policy: PathBuf,
        /// WorldSetting JSON file.
        #[arg(long)]
        setting: PathBuf,
        #[arg(long, default_value_t = 50)]
        episodes: u32,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Write the first episode's step trace (JSON lines) here.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Precedence: defaults < config file < SENTINEL_SEED < explicit flags.
fn build_config(
    config_path: &Option<PathBuf>,
    seed_flag: Option<u64>,
) -> Result<RunConfig, CliError> {
    let mut cfg = match config_path {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_env()?;
    if let Some(seed) = seed_flag {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn parse_mix(cfg: &mut RunConfig, mix: &str) -> Result<(), CliError> {
    let parts: Vec<&str> = mix.split(',').collect();
    if parts.len() != 3 {
        return Err(CliError::Usage(format!(
            "--mix expects `gripper,pose,semantic`, got `{}`",
            mix
        )));
    }
    let parse = |s: &str| -> Result<f64, CliError> {
        s.trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("bad mix component `{}`", s)))
    };
    cfg.mix_gripper = parse(parts[0])?;
    cfg.mix_pose = parse(parts[1])?;
    cfg.mix_semantic = parse(parts[2])?;
    Ok(())
}

fn run() -> Result<String, CliError> {
    let cli = Cli::parse();
    match cli.command {
        Command::Generate {
            tasks,
            n,
            mix,
            seed,
            out,
            config,
        } => {
            let mut cfg = build_config(&config, seed)?;
            if let Some(mix) = mix {
                parse_mix(&mut cfg, &mix)?;
            }
            cmd_generate(&cfg, &GenerateArgs { tasks, n, out })
        }
        Command::Pretrain {
            tasks,
            data,
            out,
            steps,
            seed,
            loss_out,
            config,
        } => {
            let cfg = build_config(&config, seed)?;
            cmd_pretrain(
                &cfg,
                &PretrainArgs {
                    tasks,
                    data,
                    out,
                    steps,
                    loss_out,
                },
            )
        }
        Command::Secl {
            tasks,
            weights,
            rounds,
            seed,
            out,
            jobs,
            config,
        } => {
            let cfg = build_config(&config, seed)?;
            cmd_secl(
                &cfg,
                &SeclArgs {
                    tasks,
                    weights,
                    rounds,
                    out_dir: out,
                    jobs,
                },
            )
        }
        Command::Eval {
            tasks,
            weights,
            out,
            task,
            episodes,
            seed,
            plot,
            jobs,
            disturbed,
            config,
        } => {
            let cfg = build_config(&config, seed)?;
            cmd_eval(
                &cfg,
                &EvalArgs {
                    tasks,
                    weights,
                    out,
                    task,
                    episodes,
                    plot_dir: plot,
                    jobs,
                    disturbed,
                },
            )
        }
        Command::Rollout {
            tasks,
            policy,
            setting,
            episodes,
            seed,
            out,
            trace,
            jobs,
            config,
        } => {
            let cfg = build_config(&config, seed)?;
            cmd_rollout(
                &cfg,
                &RolloutArgs {
                    tasks,
                    policy,
                    setting,
                    episodes,
                    out,
                    trace,
                    jobs,
                },
            )
        }
    }
}

fn main() {
    match run() {
        Ok(summary) => println!("{}", summary),
        Err(err) => {
            eprintln!("{}", err);
            std::process::exit(err.exit_code());
        }
    }
}
