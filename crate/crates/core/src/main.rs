use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use deskdrive::cli::{
    cmd_collect, cmd_eval_open, cmd_gen_vocab, cmd_report, cmd_run_closed, cmd_train,
    render::cmd_render, RunConfig,
};
use deskdrive::simloop::scenario_by_id;

#[derive(Parser)]
#[command(
    name = "deskdrive",
    about = "Multi-branch driving planner with kinematic refinement in a 2D closed-loop micro-simulator"
)]
struct Cli {
    /// Run configuration file (TOML); see `default-config`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the configured planner mode: traj | traj+ctrl | full | expert.
    #[arg(long, global = true)]
    mode: Option<String>,
    /// Override the configured sampler: ddpm | ddim.
    #[arg(long, global = true)]
    sampler: Option<String>,
    /// Worker threads for closed-loop episodes.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the default configuration as TOML.
    DefaultConfig {
        /// Write to a file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Collect expert demonstrations into the configured demo paths.
    Collect,
    /// Build the trajectory vocabulary from collected demonstrations.
    GenVocab,
    /// Train all three heads jointly on the collected demonstrations.
    Train,
    /// Open-loop evaluation on held-out frames.
    EvalOpen {
        /// Checkpoint to evaluate; defaults to the configured path.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Closed-loop evaluation over the bundled suite.
    RunClosed {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Render an episode log to SVG.
    Render {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Planning step to draw trajectories and proposals for.
        #[arg(long)]
        step: Option<usize>,
    },
    /// Rebuild the aggregate report from saved episode logs.
    Report {
        /// Directory containing episode_*.jsonl files.
        #[arg(long)]
        logs: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => RunConfig::default_config(),
    };
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    if let Some(mode) = &cli.mode {
        cfg.planner.mode = mode.clone();
    }
    if let Some(sampler) = &cli.sampler {
        cfg.diffusion.sampler = sampler.clone();
    }
    cfg.validate().context("validating effective config")?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::DefaultConfig { out } => {
            let text = RunConfig::default_config().to_toml();
            match out {
                Some(path) => std::fs::write(path, text)?,
                None => print!("{text}"),
            }
        }
        Command::Collect => {
            let cfg = load_config(&cli)?;
            let summary = cmd_collect(&cfg)?;
            println!(
                "collected {} training frames, {} held-out frames",
                summary.train_frames, summary.val_frames
            );
        }
        Command::GenVocab => {
            let cfg = load_config(&cli)?;
            let vocab = cmd_gen_vocab(&cfg)?;
            println!(
                "built vocabulary: K={} anchors → {}",
                vocab.k, cfg.paths.vocab
            );
        }
        Command::Train => {
            let cfg = load_config(&cli)?;
            let summary = cmd_train(&cfg)?;
            if let (Some(first), Some(last)) = (summary.curve.first(), summary.curve.last()) {
                println!(
                    "trained {} epochs: loss {:.3} → {:.3}; checkpoint {}",
                    summary.curve.len(),
                    first.total,
                    last.total,
                    summary.checkpoint.display()
                );
            } else {
                println!(
                    "trained 0 epochs: checkpoint equals initialization at {}",
                    summary.checkpoint.display()
                );
            }
        }
        Command::EvalOpen { checkpoint } => {
            let cfg = load_config(&cli)?;
            let ck = checkpoint
                .clone()
                .unwrap_or_else(|| PathBuf::from(&cfg.paths.checkpoint));
            let report = cmd_eval_open(&cfg, &ck)?;
            println!(
                "open-loop over {} frames: mean L2 {:.3} m, brake accuracy {:.1}%",
                report.overall.frames,
                report.overall.mean_l2,
                report.overall.brake_accuracy * 100.0
            );
        }
        Command::RunClosed { checkpoint } => {
            let cfg = load_config(&cli)?;
            let ck = checkpoint
                .clone()
                .unwrap_or_else(|| PathBuf::from(&cfg.paths.checkpoint));
            let summary = cmd_run_closed(&cfg, &ck, cli.workers)?;
            println!(
                "closed-loop [{}]: SR {:.1}%, collisions {:.1}%, mean RC {:.2}",
                summary.report.mode,
                summary.report.overall.success_rate,
                summary.report.overall.collision_rate,
                summary.report.overall.mean_route_completion
            );
            for row in &summary.report.rows {
                println!(
                    "  {:<16} SR {:>5.1}%  collisions {:>5.1}%  RC {:.2}",
                    row.family, row.success_rate, row.collision_rate, row.mean_route_completion
                );
            }
        }
        Command::Render { log, out, step } => {
            let parsed = deskdrive::simloop::load_episode_log(log)?;
            let scenario = scenario_by_id(&parsed.scenario_id)
                .with_context(|| format!("unknown bundled scenario {}", parsed.scenario_id))?;
            cmd_render(log, &scenario, out, *step)?;
            println!("rendered {} → {}", log.display(), out.display());
        }
        Command::Report { logs } => {
            let cfg = load_config(&cli)?;
            let report = cmd_report(&cfg, logs)?;
            println!(
                "aggregated {} episodes: SR {:.1}%",
                report.overall.episodes, report.overall.success_rate
            );
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_parses() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn overrides_apply() {
        let cli = Cli::parse_from(["deskdrive", "--mode", "traj", "--seed", "9", "collect"]);
        let cfg = load_config(&cli).unwrap();
        assert_eq!(cfg.planner.mode, "traj");
        assert_eq!(cfg.run.seed, 9);
        let bad = Cli::parse_from(["deskdrive", "--mode", "bogus", "collect"]);
        assert!(load_config(&bad).is_err());
    }
}
