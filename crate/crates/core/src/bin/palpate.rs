//! Command-line front end: training runs, checkpoint evaluation, belief
//! replay over stored datasets, and artifact export.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use palpate::envs::TaskKind;
use palpate::experiment::{
    checkpoint_load, evaluate, export_trajectories, read_metrics_csv, resume_training,
    run_training, ExperimentConfig, PolicyKind,
};
use palpate::training::{load_dataset, replay_beliefs, save_episode};
use palpate::Error;

#[derive(Parser)]
#[command(
    name = "palpate",
    about = "Active tactile property estimation: filter training, entropy-minimizing control, artifact export"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Overrides {
    /// JSON experiment config (seed, task and output_dir are mandatory).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    episodes_per_epoch: Option<usize>,
    #[arg(long)]
    eval_episodes: Option<usize>,
    /// Run strictly sequentially. Runs are sequential (and bit-deterministic
    /// for a fixed seed) regardless; the flag is accepted for stability.
    #[arg(long)]
    single_thread: bool,
}

impl Overrides {
    fn resolve(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(task) = &self.task {
            cfg.task = TaskKind::parse(task)
                .ok_or_else(|| Error::Config(format!("unknown task {task:?}")))?;
        }
        if let Some(out) = &self.output {
            cfg.output_dir = out.clone();
        }
        if let Some(epochs) = self.epochs {
            cfg.epochs = epochs;
        }
        if let Some(eps) = self.episodes_per_epoch {
            cfg.episodes_per_epoch = eps;
        }
        if let Some(n) = self.eval_episodes {
            cfg.eval_episodes = n;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the collect / train / replay loop, optionally from a checkpoint.
    Train {
        #[command(flatten)]
        overrides: Overrides,
        /// Resume from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpointed model: MAE of the final property estimate.
    Eval {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Which policy collects the evaluation episodes.
        #[arg(long, default_value = "mpc")]
        policy: String,
    },
    /// Refresh stored beliefs of a saved dataset under a checkpointed model
    /// and rewrite the episode files with them.
    Replay {
        /// Directory holding ep_*.bin files.
        #[arg(long)]
        episodes: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Dump per-episode trajectory JSON (and echo metrics) from a run.
    Export {
        /// A run's output directory.
        #[arg(long)]
        run: PathBuf,
        /// Destination for trajectory JSON; default `<run>/trajectories`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replay beliefs under this checkpoint before dumping.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn run(cmd: Cmd) -> Result<(), Error> {
    match cmd {
        Cmd::Train { overrides, resume } => {
            let cfg = overrides.resolve()?;
            let summary = match resume {
                Some(ck) => resume_training(&cfg, &ck)?,
                None => run_training(&cfg)?,
            };
            println!(
                "done: {} episodes, {} env steps, {} rollbacks, metrics at {}",
                summary.episodes,
                summary.env_steps,
                summary.rollbacks,
                summary.metrics_path.display()
            );
            if let Some(mae) = summary.final_eval_mae {
                println!("final eval MAE {mae:.5}");
            }
        }
        Cmd::Eval {
            overrides,
            checkpoint,
            policy,
        } => {
            let cfg = overrides.resolve()?;
            let kind = PolicyKind::parse(&policy)?;
            let ck = checkpoint_load(&checkpoint)?;
            let spec = cfg.task_spec();
            let mpc = cfg.mpc_config(&spec);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let report = evaluate(&ck.model, kind, &spec, &mpc, cfg.eval_episodes, &mut rng);
            println!(
                "MAE {:.5} over {} episodes (mean sigma_m {:.5}, contact rate {:.2}, {} divergent)",
                report.mae(),
                report.episodes.len(),
                report.mean_final_sigma(),
                report.mean_contact_rate(),
                report.divergences()
            );
        }
        Cmd::Replay {
            episodes,
            checkpoint,
        } => {
            let ck = checkpoint_load(&checkpoint)?;
            let mut dataset = load_dataset(&episodes)?;
            let diverged = replay_beliefs(&mut dataset, &ck.model);
            for (i, ep) in dataset.iter().enumerate() {
                save_episode(
                    &episodes.join(palpate::training::episode_file_name(i)),
                    ep,
                )?;
            }
            println!(
                "replayed {} episodes ({} diverged)",
                dataset.len(),
                diverged
            );
        }
        Cmd::Export {
            run,
            out,
            checkpoint,
        } => {
            let model = match checkpoint {
                Some(ck) => Some(checkpoint_load(&ck)?.model),
                None => None,
            };
            let out = out.unwrap_or_else(|| run.join("trajectories"));
            let count = export_trajectories(&run, &out, model.as_ref())?;
            let metrics = run.join("metrics.csv");
            if metrics.exists() {
                let rows = read_metrics_csv(&metrics)?;
                println!("{count} trajectories to {}, {} metric rows", out.display(), rows.len());
            } else {
                println!("{count} trajectories to {}", out.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("palpate: {e}");
            match e {
                Error::Config(_) | Error::Format(_) | Error::Version { .. } | Error::Io(_) => {
                    ExitCode::from(1)
                }
                _ => ExitCode::from(2),
            }
        }
    }
}
