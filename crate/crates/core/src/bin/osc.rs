//! `osc`: experiment driver.
//!
//! Exit codes: 0 on success, 2 on configuration or usage errors, 1 on
//! runtime failures (including a replay mismatch).

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use osc_core::config::RunConfig;
use osc_core::engine::{Ablations, BackendKind};
use osc_core::experiments::{self as exp, Overrides};
use osc_core::{OscError, Result};

#[derive(Parser)]
#[command(
    name = "osc",
    version,
    about = "Train and evaluate collaborating agent teams"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint directory to start from.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Number of evaluation episodes.
    #[arg(long)]
    episodes: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    agents: Option<usize>,
    /// Realization backend: stub or http.
    #[arg(long)]
    backend: Option<String>,
    /// Comma-separated ablation flags.
    #[arg(long)]
    ablation: Option<String>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pretrain the collaborator model on the synthetic dialogue corpus.
    PretrainCkm(Common),
    /// Train with PPO.
    Train(Common),
    /// Evaluate a checkpoint on held-out episodes.
    Eval(Common),
    /// Train and evaluate the full model and each ablation.
    Ablate(Common),
    /// Evaluate a checkpoint across team sizes.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated agent counts.
        #[arg(long, default_value = "2,4,6,8,10")]
        counts: String,
    },
    /// Recompute rewards from a trace file and compare bit-for-bit.
    Replay {
        #[arg(long)]
        trace: PathBuf,
    },
    /// Train and compare the three reward variants.
    RewardStudy(Common),
    /// Write CSVs for the tuning curves and the pretraining comparison.
    DumpPlotData(Common),
}

fn load(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let ov = Overrides {
        seed: c.seed,
        agents: c.agents,
        backend: c
            .backend
            .as_deref()
            .map(str::parse::<BackendKind>)
            .transpose()?,
        ablations: c
            .ablation
            .as_deref()
            .map(Ablations::parse_list)
            .transpose()?,
        episodes: c.episodes,
    };
    ov.apply(&mut cfg)?;
    Ok(cfg)
}

fn out_dir(c: &Common, sub: &str) -> PathBuf {
    c.out.clone().unwrap_or_else(|| exp::default_out(sub))
}

fn parse_counts(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|e| OscError::Config(format!("agent count {t:?}: {e}")))
        })
        .collect()
}

fn print_row(label: &str, r: &exp::EvalRow) {
    println!(
        "{label:<20} success {:.3}  return {:.4}  rounds {:.2}  tokens {:.3}k  redundancy {:.1}%  conflict-res {:.1}%{}  density {:.1}%",
        r.success_rate,
        r.mean_return,
        r.avg_rounds,
        r.avg_tokens_k,
        r.redundancy_pct,
        r.conflict_resolution_pct,
        if r.no_conflicts { " (no conflicts detected)" } else { "" },
        r.info_density_pct
    );
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::PretrainCkm(c) => {
            let cfg = load(&c)?;
            let out = out_dir(&c, "pretrain-ckm");
            let r = exp::run_pretrain(&cfg, &out)?;
            for (i, l) in r.epochs.iter().enumerate() {
                println!("epoch {i}: loss {:.5}", l.total);
            }
            println!(
                "next-act accuracy {:.3} (majority baseline {:.3})",
                r.act_accuracy, r.majority_baseline
            );
            println!("checkpoint: {}", out.join("checkpoint").display());
        }
        Cmd::Train(c) => {
            let mut cfg = load(&c)?;
            let out = out_dir(&c, "train");
            let (_, logs) = exp::run_train(&mut cfg, c.checkpoint.as_deref(), &out)?;
            if let Some(l) = logs.last() {
                println!(
                    "{} updates, {} steps, last mean return {:.4}",
                    logs.len(),
                    l.steps,
                    l.mean_return
                );
            }
            println!("checkpoint: {}", out.join("checkpoint").display());
        }
        Cmd::Eval(c) => {
            let mut cfg = load(&c)?;
            let row = exp::run_eval(&mut cfg, c.checkpoint.as_deref(), &out_dir(&c, "eval"))?;
            print_row("eval", &row);
        }
        Cmd::Ablate(c) => {
            let cfg = load(&c)?;
            let rows = exp::run_ablate(
                &cfg,
                c.checkpoint.as_deref(),
                &Ablations::NAMES,
                &out_dir(&c, "ablate"),
            )?;
            for r in &rows {
                print_row(&r.variant, &r.eval);
            }
        }
        Cmd::Sweep { common, counts } => {
            let counts = parse_counts(&counts)?;
            let cfg = load(&common)?;
            let rows = exp::run_sweep(
                &cfg,
                common.checkpoint.as_deref(),
                &counts,
                &out_dir(&common, "sweep"),
            )?;
            for r in &rows {
                print_row(&format!("k={} pairs={}", r.agents, r.ckm_pairs), &r.eval);
            }
        }
        Cmd::Replay { trace } => {
            let rep = exp::run_replay(&trace)?;
            for m in &rep.mismatches {
                eprintln!("{m}");
            }
            if !rep.mismatches.is_empty() {
                return Err(OscError::Contract(format!(
                    "{} reward mismatch(es) in {}",
                    rep.mismatches.len(),
                    trace.display()
                )));
            }
            println!(
                "{} episodes, {} steps: rewards match",
                rep.episodes, rep.steps
            );
        }
        Cmd::RewardStudy(c) => {
            let cfg = load(&c)?;
            for r in
                exp::run_reward_study(&cfg, c.checkpoint.as_deref(), &out_dir(&c, "reward-study"))?
            {
                print_row(&r.variant, &r.eval);
            }
        }
        Cmd::DumpPlotData(c) => {
            let cfg = load(&c)?;
            let out = out_dir(&c, "plot-data");
            exp::run_plot_data(&cfg, c.checkpoint.as_deref(), &out)?;
            println!("plot data: {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
