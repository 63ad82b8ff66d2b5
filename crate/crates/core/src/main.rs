use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use splitshield::harness::{
    build_report, run_attack_verb, run_defense_bench, run_latency_bench, run_split_sweep, run_train, ExperimentConfig, Scale,
};
use splitshield::Result;

#[derive(Parser, Debug)]
#[command(name = "splitshield", version, about = "Split-inference defense and model-inversion testbed")]
struct Cli {
    /// TOML experiment config; the --scale preset is used when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value = "toy")]
    scale: Scale,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the configured defense and save checkpoints.
    Train,
    /// Train the configured defense and attack it.
    Attack,
    /// Every defense against every attack strategy.
    BenchDefense,
    /// Attack quality over a grid of split points.
    SweepSplits {
        #[arg(long, value_delimiter = ',')]
        h: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        t: Option<Vec<usize>>,
    },
    /// Loopback latency: one body against the configured ensemble.
    BenchLatency {
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Collect the result tables under --out into report.md.
    Report,
    /// Print the effective config.
    ShowConfig,
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::preset(cli.scale),
    };
    if let Some(s) = cli.seed {
        cfg.master_seed = s;
    }
    if let Some(o) = cli.out {
        cfg.output.dir = o;
    }
    let out = cfg.output.dir.clone();
    match cli.command {
        Command::Train => {
            let s = run_train(&cfg, &out.join("train"))?;
            println!("{} trained: accuracy {:.4}, {} bodies, activated {:?}", s.kind, s.accuracy, s.bodies, s.activated);
        }
        Command::Attack => {
            for r in run_attack_verb(&cfg, &out.join("attack"))? {
                println!("{:<10} ssim {:.4}  psnr {:.2}", r.strategy, r.ssim, r.psnr);
            }
        }
        Command::BenchDefense => {
            let rep = run_defense_bench(&cfg, &out.join("bench"))?;
            println!("{:<14} {:>8} {:>8} {:>8}", "name", "dAcc", "SSIM", "PSNR");
            for r in &rep.rows {
                println!("{:<14} {:>8.4} {:>8.4} {:>8.2}", r.name, r.delta_acc, r.ssim, r.psnr);
            }
        }
        Command::SweepSplits { h, t } => {
            let h = h.unwrap_or_else(|| cfg.sweep.h_values.clone());
            let t = t.unwrap_or_else(|| cfg.sweep.t_values.clone());
            let rep = run_split_sweep(&cfg, &out.join("sweep"), &h, &t)?;
            for c in &rep.grid {
                println!("h={} t={}  ssim {:.4}  psnr {:.2}  ({} seeds)", c.h, c.t, c.ssim, c.psnr, c.seeds);
            }
        }
        Command::BenchLatency { batch, repeats } => {
            let batch = batch.unwrap_or(cfg.latency.batch);
            let repeats = repeats.unwrap_or(cfg.latency.repeats);
            let rep = run_latency_bench(&cfg, &out.join("latency"), batch, repeats)?;
            for r in [&rep.standard, &rep.ensemble] {
                println!(
                    "{:<9} N={:<3} total {:.4}s  client {:.4}s  server {:.4}s  comm {:.4}s",
                    r.name, r.n, r.total_s, r.client_s, r.server_s, r.comm_s
                );
            }
            println!("overhead {:.2}%", rep.overhead * 100.0);
        }
        Command::Report => print!("{}", build_report(&out)?),
        Command::ShowConfig => print!("{}", cfg.to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
