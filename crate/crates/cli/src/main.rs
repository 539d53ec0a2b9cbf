use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use crir::harness::{
    golden_reward_rows, loss_gradient_checks, run_ablation, run_arms, save_checkpoint,
    write_outputs, ExperimentConfig, RunOptions, Suite,
};

#[derive(Parser)]
#[command(
    name = "crir",
    version,
    about = "Contrastive state representation for RL recommenders"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train with a config file, one seed or all configured seeds.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Parallel runs when training several seeds.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Run one ablation suite.
    Ablate {
        #[arg(long)]
        suite: String,
        #[arg(long)]
        out: PathBuf,
        /// Base config; full-size defaults on the bundled fixture otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Compare analytic and finite-difference gradients of every loss.
    CheckGrads {
        #[arg(long, default_value_t = 100)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the hand-traced reward table next to the implementation.
    OracleRewards,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train {
            config,
            seed,
            out,
            jobs,
        } => {
            let mut cfg = ExperimentConfig::load(&config)
                .with_context(|| format!("loading {}", config.display()))?;
            if let Some(s) = seed {
                cfg.seed_base = s;
                cfg.seeds = 1;
            }
            let arms = vec![(cfg.run_name.clone(), cfg)];
            let results = run_arms(&arms, RunOptions::default(), jobs)?;
            write_outputs("train", &results, true, &out)?;
            let ckpt = out.join("checkpoints");
            std::fs::create_dir_all(&ckpt)?;
            for arm in &results {
                for run in &arm.runs {
                    save_checkpoint(
                        &run.agent.store,
                        ckpt.join(format!("{}.bin", arm.run_id(run.seed))),
                    )?;
                    let last = run.episodes.last();
                    log::info!(
                        "{}: {} episodes, final reward {:.4}, ctr {:.3}",
                        arm.run_id(run.seed),
                        run.episodes.len(),
                        last.map_or(0.0, |m| m.cumulative_reward),
                        last.map_or(0.0, |m| m.ctr),
                    );
                }
            }
        }
        Command::Ablate {
            suite,
            out,
            config,
            jobs,
        } => {
            let suite: Suite = suite.parse()?;
            let base = match config {
                Some(p) => ExperimentConfig::load(&p)
                    .with_context(|| format!("loading {}", p.display()))?,
                None => ExperimentConfig::default(),
            };
            for arm in run_ablation(suite, &base, &out, jobs)? {
                if let Some((m, h)) = arm.final_reward(0.1) {
                    println!("{:<24} final-10% reward {m:.4} ± {h:.4}", arm.label);
                }
            }
        }
        Command::CheckGrads { points, seed } => {
            let mut failed = false;
            for r in loss_gradient_checks(points, seed)? {
                let ok = r.max_rel_error < 1e-4;
                failed |= !ok;
                println!(
                    "{:<14} points {:>4}  max rel error {:.3e}  {}",
                    r.loss,
                    r.points,
                    r.max_rel_error,
                    if ok { "ok" } else { "FAIL" }
                );
            }
            if failed {
                bail!("gradient check failed");
            }
        }
        Command::OracleRewards => {
            println!(
                "{:>6} {:>7} {:>10} {:>10}  match",
                "rating", "repeats", "expected", "computed"
            );
            for (rate, repeats, expected, got) in golden_reward_rows() {
                let rate = rate.map_or("absent".to_string(), |r| r.to_string());
                let ok = expected.to_bits() == got.to_bits();
                println!(
                    "{rate:>6} {repeats:>7} {expected:>10} {got:>10}  {}",
                    if ok { "yes" } else { "NO" }
                );
            }
        }
    }
    Ok(())
}
