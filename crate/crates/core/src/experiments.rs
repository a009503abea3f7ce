//! Experiment drivers behind the `osc` subcommands.
//!
//! Every driver takes a resolved [`RunConfig`] and an output directory.
//! The directory receives `config.toml` with all defaults expanded, so a
//! run can be repeated bit-exactly from it.
//!
//! CSV schemas (column order is fixed):
//! - `metrics.csv` (eval): [`EVAL_COLUMNS`]
//! - `sweep.csv`: `agents, ckm_pairs, messages` then the eval columns
//! - `ablation.csv`, `reward_study.csv`: `variant` then the eval columns
//! - `pretrain.csv`: `epoch, total, masked, act, contrastive`
//! - `tuning.csv`: `n_round, lambda_cost` then the eval columns
//! - `pretrain_vs_finetune.csv`: `variant` then the eval columns

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::ckm::pretrain::{pretrain_ckm, PretrainReport};
use crate::config::RunConfig;
use crate::engine::config::{MAX_AGENTS, MIN_AGENTS};
use crate::engine::{
    read_traces, replay_rewards, write_traces, Ablations, Backend, BackendKind, EpisodeTrace,
    HttpBackend, Models,
};
use crate::error::{OscError, Result};
use crate::metrics::{summarize, EvalSummary};
use crate::rl::{calibrate_tau_conflict, evaluate, train, UpdateLog};
use crate::text::corpus::{generate_corpus, write_jsonl};

pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const SWEEP_COUNTS: [usize; 5] = [2, 4, 6, 8, 10];
pub const REWARD_VARIANTS: [&str; 3] = ["task_only", "task_cost", "full"];
pub const TUNING_ROUNDS: [usize; 4] = [2, 3, 4, 5];
pub const TUNING_LAMBDAS: [f64; 3] = [0.0005, 0.001, 0.002];

pub const EVAL_COLUMNS: [&str; 10] = [
    "episodes",
    "success_rate",
    "mean_return",
    "avg_rounds",
    "avg_tokens_k",
    "redundancy_pct",
    "conflict_resolution_pct",
    "info_density_pct",
    "no_conflicts",
    "tau_conflict",
];

/// One flattened evaluation result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_return: f64,
    pub avg_rounds: f64,
    pub avg_tokens_k: f64,
    pub redundancy_pct: f64,
    pub conflict_resolution_pct: f64,
    pub info_density_pct: f64,
    pub no_conflicts: bool,
    pub tau_conflict: f64,
}

impl EvalRow {
    pub fn from_summary(s: &EvalSummary, tau: f64) -> Self {
        EvalRow {
            episodes: s.episodes,
            success_rate: s.success_rate,
            mean_return: s.mean_return,
            avg_rounds: s.metrics.avg_rounds,
            avg_tokens_k: s.metrics.avg_tokens_k,
            redundancy_pct: s.metrics.redundancy_pct,
            conflict_resolution_pct: s.metrics.conflict_resolution_pct,
            info_density_pct: s.metrics.info_density_pct,
            no_conflicts: s.metrics.no_conflicts,
            tau_conflict: tau,
        }
    }

    fn fields(&self) -> Vec<String> {
        vec![
            self.episodes.to_string(),
            self.success_rate.to_string(),
            self.mean_return.to_string(),
            self.avg_rounds.to_string(),
            self.avg_tokens_k.to_string(),
            self.redundancy_pct.to_string(),
            self.conflict_resolution_pct.to_string(),
            self.info_density_pct.to_string(),
            self.no_conflicts.to_string(),
            self.tau_conflict.to_string(),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub agents: usize,
    pub ckm_pairs: usize,
    /// Messages per episode, averaged over the evaluation batch.
    pub messages: f64,
    pub eval: EvalRow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub variant: String,
    pub eval: EvalRow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuningRow {
    pub n_round: usize,
    pub lambda_cost: f64,
    pub eval: EvalRow,
}

/// Result of `replay`: steps whose stored reward differs from the
/// recomputed one.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayReport {
    pub episodes: usize,
    pub steps: usize,
    pub mismatches: Vec<String>,
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| OscError::io(dir, e))
}

fn csv_err(p: &Path, e: csv::Error) -> OscError {
    OscError::Format(format!("{}: {e}", p.display()))
}

/// Writes a CSV with `prefix` columns followed by the eval columns.
fn write_rows(path: &Path, prefix: &[&str], rows: &[(Vec<String>, &EvalRow)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let header: Vec<&str> = prefix.iter().copied().chain(EVAL_COLUMNS).collect();
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (pre, row) in rows {
        let rec: Vec<String> = pre.iter().cloned().chain(row.fields()).collect();
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| OscError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| OscError::Format(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| OscError::io(path, e))
}

/// Applies the common command-line overrides and re-validates.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub agents: Option<usize>,
    pub backend: Option<BackendKind>,
    pub ablations: Option<Ablations>,
    pub episodes: Option<u64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(s) = self.seed {
            cfg.episode.seed = s;
        }
        if let Some(k) = self.agents {
            cfg.episode.agents = k;
        }
        if let Some(b) = self.backend {
            cfg.episode.backend = b;
        }
        if let Some(a) = self.ablations {
            cfg.episode.ablations = a;
        }
        if let Some(n) = self.episodes {
            cfg.eval.episodes = n;
        }
        cfg.resolve();
        cfg.validate()
    }
}

pub fn make_backend(cfg: &RunConfig) -> Result<Backend> {
    match cfg.episode.backend {
        BackendKind::Stub => Ok(Backend::Stub),
        BackendKind::Http => Ok(Backend::Http(HttpBackend::from_env(
            cfg.backend.http.clone(),
        )?)),
    }
}

/// Loads a checkpoint or initializes from the config, then matches the
/// gap network to the active ablations.
pub fn load_models(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Models> {
    let mut m = match checkpoint {
        Some(dir) => Models::load(dir)?,
        None => Models::new(&cfg.model, cfg.episode.seed)?,
    };
    m.set_gap_variant(cfg.episode.ablations.gap_variant(), cfg.episode.seed)?;
    Ok(m)
}

/// Fills in the conflict threshold from random-policy episodes if unset.
pub fn ensure_tau(cfg: &mut RunConfig, models: &Models, backend: &Backend) -> Result<f64> {
    if let Some(t) = cfg.reward.shaping.tau_conflict {
        return Ok(t);
    }
    let t = calibrate_tau_conflict(
        models,
        backend,
        &cfg.episode,
        &cfg.reward,
        cfg.eval.calibration_episodes,
    )?;
    cfg.reward.shaping.tau_conflict = Some(t);
    Ok(t)
}

/// Generates the synthetic corpus, pretrains the collaborator model and
/// saves a full checkpoint under `out/checkpoint`.
pub fn run_pretrain(cfg: &RunConfig, out: &Path) -> Result<PretrainReport> {
    create_dir(out)?;
    cfg.save(&out.join(CONFIG_SNAPSHOT))?;
    let corpus = generate_corpus(cfg.corpus.dialogues, cfg.corpus.seed);
    write_jsonl(&out.join("corpus.jsonl"), &corpus)?;
    let mut models = Models::new(&cfg.model, cfg.episode.seed)?;
    let report = pretrain_ckm(&models.ckm, &mut models.ckm_ps, &corpus, &cfg.pretrain)?;
    let p = out.join("pretrain.csv");
    let mut w = csv::Writer::from_path(&p).map_err(|e| csv_err(&p, e))?;
    w.write_record(["epoch", "total", "masked", "act", "contrastive"])
        .map_err(|e| csv_err(&p, e))?;
    for (i, l) in report.epochs.iter().enumerate() {
        w.write_record([
            i.to_string(),
            l.total.to_string(),
            l.masked.to_string(),
            l.act.to_string(),
            l.contrastive.to_string(),
        ])
        .map_err(|e| csv_err(&p, e))?;
    }
    w.flush().map_err(|e| OscError::io(&p, e))?;
    write_json(&out.join("pretrain.json"), &report)?;
    models.save(&out.join("checkpoint"))?;
    Ok(report)
}

/// Trains from `checkpoint` (or a fresh model). Writes `metrics.csv`,
/// periodic checkpoints and the final `checkpoint/`.
pub fn run_train(
    cfg: &mut RunConfig,
    checkpoint: Option<&Path>,
    out: &Path,
) -> Result<(Models, Vec<UpdateLog>)> {
    let backend = make_backend(cfg)?;
    let mut models = load_models(cfg, checkpoint)?;
    ensure_tau(cfg, &models, &backend)?;
    create_dir(out)?;
    cfg.save(&out.join(CONFIG_SNAPSHOT))?;
    let logs = train(
        &mut models,
        &backend,
        &cfg.episode,
        &cfg.reward,
        &cfg.ppo,
        &cfg.train,
        Some(out),
    )?;
    Ok((models, logs))
}

/// Held-out evaluation with greedy actions.
pub fn eval_models(
    cfg: &mut RunConfig,
    models: &Models,
    backend: &Backend,
) -> Result<(Vec<EpisodeTrace>, EvalRow)> {
    let tau = ensure_tau(cfg, models, backend)?;
    let traces = evaluate(
        models,
        backend,
        &cfg.episode,
        &cfg.reward,
        cfg.eval.episodes,
    )?;
    let row = EvalRow::from_summary(&summarize(&traces, Some(tau)), tau);
    Ok((traces, row))
}

/// Writes `traces.jsonl`, `metrics.csv` and `summary.json` under `out`.
pub fn run_eval(cfg: &mut RunConfig, checkpoint: Option<&Path>, out: &Path) -> Result<EvalRow> {
    let backend = make_backend(cfg)?;
    let models = load_models(cfg, checkpoint)?;
    let (traces, row) = eval_models(cfg, &models, &backend)?;
    create_dir(out)?;
    cfg.save(&out.join(CONFIG_SNAPSHOT))?;
    write_traces(&out.join("traces.jsonl"), &traces)?;
    write_rows(&out.join("metrics.csv"), &[], &[(vec![], &row)])?;
    let tau = row.tau_conflict;
    write_json(&out.join("summary.json"), &summarize(&traces, Some(tau)))?;
    Ok(row)
}

pub fn check_sweep_counts(counts: &[usize]) -> Result<()> {
    if counts.is_empty() {
        return Err(OscError::Config(
            "sweep needs at least one agent count".into(),
        ));
    }
    for &k in counts {
        if !(MIN_AGENTS..=MAX_AGENTS).contains(&k) {
            return Err(OscError::Config(format!(
                "sweep agent count {k} outside {MIN_AGENTS}..={MAX_AGENTS}"
            )));
        }
    }
    Ok(())
}

/// Evaluates one checkpoint at every team size in `counts`. Each size is
/// an independent eval run with the base seed.
pub fn run_sweep(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    counts: &[usize],
    out: &Path,
) -> Result<Vec<SweepRow>> {
    check_sweep_counts(counts)?;
    create_dir(out)?;
    cfg.save(&out.join(CONFIG_SNAPSHOT))?;
    let mut rows = Vec::new();
    for &k in counts {
        let mut c = cfg.clone();
        c.episode.agents = k;
        c.validate()?;
        let backend = make_backend(&c)?;
        let models = load_models(&c, checkpoint)?;
        let (traces, eval) = eval_models(&mut c, &models, &backend)?;
        let messages =
            traces.iter().map(|t| t.steps.len() as f64).sum::<f64>() / traces.len().max(1) as f64;
        rows.push(SweepRow {
            agents: k,
            ckm_pairs: k * (k - 1),
            messages,
            eval,
        });
    }
    let table: Vec<(Vec<String>, &EvalRow)> = rows
        .iter()
        .map(|r| {
            (
                vec![
                    r.agents.to_string(),
                    r.ckm_pairs.to_string(),
                    r.messages.to_string(),
                ],
                &r.eval,
            )
        })
        .collect();
    write_rows(
        &out.join("sweep.csv"),
        &["agents", "ckm_pairs", "messages"],
        &table,
    )?;
    Ok(rows)
}

/// Trains one configuration under `out` and evaluates it. Evaluation uses
/// `eval_reward` when given, so variants are scored on one scale.
fn train_and_eval(
    cfg: &mut RunConfig,
    checkpoint: Option<&Path>,
    out: &Path,
    eval_reward: Option<&crate::rl::RewardConfig>,
) -> Result<EvalRow> {
    let (models, _) = run_train(cfg, checkpoint, out)?;
    let mut ecfg = cfg.clone();
    if let Some(r) = eval_reward {
        ecfg.reward = r.clone();
        ecfg.reward.shaping.tau_conflict = cfg.reward.shaping.tau_conflict;
    }
    let backend = make_backend(&ecfg)?;
    let (traces, row) = eval_models(&mut ecfg, &models, &backend)?;
    write_traces(&out.join("traces.jsonl"), &traces)?;
    write_rows(&out.join("eval.csv"), &[], &[(vec![], &row)])?;
    Ok(row)
}

/// The full model and every single-flag ablation, each trained and
/// evaluated in its own subdirectory.
pub fn run_ablate(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    flags: &[&str],
    out: &Path,
) -> Result<Vec<VariantRow>> {
    create_dir(out)?;
    cfg.save(&out.join(CONFIG_SNAPSHOT))?;
    let mut rows = Vec::new();
    for name in std::iter::once("full").chain(flags.iter().copied()) {
        let mut c = cfg.clone();
        c.episode.ablations = if name == "full" {
            Ablations::default()
        } else {
            Ablations::single(name)?
        };
        c.resolve();
        c.validate()?;
        let row = train_and_eval(&mut c, checkpoint, &out.join(name), None)?;
        rows.push(VariantRow {
            variant: name.to_string(),
            eval: row,
        });
    }
    let table: Vec<(Vec<String>, &EvalRow)> = rows
        .iter()
        .map(|r| (vec![r.variant.clone()], &r.eval))
        .collect();
    write_rows(&out.join("ablation.csv"), &["variant"], &table)?;
    Ok(rows)
}

/// Reward settings for one reward-study variant.
pub fn reward_variant(base: &RunConfig, name: &str) -> Result<RunConfig> {
    let mut c = base.clone();
    match name {
        "task_only" => {
            c.reward.use_cost = false;
            c.reward.shaping.enabled = false;
        }
        "task_cost" => c.reward.shaping.enabled = false,
        "full" => {}
        other => {
            return Err(OscError::Config(format!(
                "unknown reward variant {other:?}"
            )))
        }
    }
    Ok(c)
}

/// Trains the three reward variants; all are evaluated under the full reward.
pub fn run_reward_study(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    out: &Path,
) -> Result<Vec<VariantRow>> {
    create_dir(out)?;
    cfg.save(&out.join(CONFIG_SNAPSHOT))?;
    let mut rows = Vec::new();
    for name in REWARD_VARIANTS {
        let mut c = reward_variant(cfg, name)?;
        let row = train_and_eval(&mut c, checkpoint, &out.join(name), Some(&cfg.reward))?;
        rows.push(VariantRow {
            variant: name.to_string(),
            eval: row,
        });
    }
    let table: Vec<(Vec<String>, &EvalRow)> = rows
        .iter()
        .map(|r| (vec![r.variant.clone()], &r.eval))
        .collect();
    write_rows(&out.join("reward_study.csv"), &["variant"], &table)?;
    Ok(rows)
}

/// Recomputes every step reward from the stored probes and compares bits.
pub fn replay_traces(traces: &[EpisodeTrace]) -> ReplayReport {
    let mut mismatches = Vec::new();
    let mut steps = 0;
    for t in traces {
        let replayed = replay_rewards(t);
        steps += t.steps.len();
        let mut total = 0.0;
        for (s, (_, r)) in t.steps.iter().zip(&replayed) {
            total += r.total;
            if s.reward.total.to_bits() != r.total.to_bits() {
                mismatches.push(format!(
                    "episode {} step {}: stored {} replayed {}",
                    t.begin.episode, s.step, s.reward.total, r.total
                ));
            }
        }
        if replayed.len() != t.steps.len() {
            mismatches.push(format!(
                "episode {}: step count changed on replay",
                t.begin.episode
            ));
        }
        if total.to_bits() != t.end.total_return.to_bits() {
            mismatches.push(format!(
                "episode {}: stored return {} replayed {}",
                t.begin.episode, t.end.total_return, total
            ));
        }
    }
    ReplayReport {
        episodes: traces.len(),
        steps,
        mismatches,
    }
}

pub fn run_replay(trace: &Path) -> Result<ReplayReport> {
    let traces = read_traces(trace)?;
    Ok(replay_traces(&traces))
}

/// Emits the tuning grid over rounds and cost weight, its two slices and
/// the frozen-versus-finetuned comparison.
pub fn run_plot_data(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    out: &Path,
) -> Result<Vec<TuningRow>> {
    create_dir(out)?;
    cfg.save(&out.join(CONFIG_SNAPSHOT))?;
    let mut grid = Vec::new();
    for &n in &TUNING_ROUNDS {
        for &l in &TUNING_LAMBDAS {
            let mut c = cfg.clone();
            c.episode.n_round = n;
            c.reward.lambda_cost = l;
            let dir = out.join("runs").join(format!("n{n}_lambda{l}"));
            let eval = train_and_eval(&mut c, checkpoint, &dir, None)?;
            grid.push(TuningRow {
                n_round: n,
                lambda_cost: l,
                eval,
            });
        }
    }
    let rows = |f: &dyn Fn(&TuningRow) -> bool| -> Vec<(Vec<String>, &EvalRow)> {
        grid.iter()
            .filter(|r| f(r))
            .map(|r| {
                (
                    vec![r.n_round.to_string(), r.lambda_cost.to_string()],
                    &r.eval,
                )
            })
            .collect()
    };
    let cols = ["n_round", "lambda_cost"];
    write_rows(&out.join("tuning.csv"), &cols, &rows(&|_| true))?;
    write_rows(
        &out.join("n_round_curve.csv"),
        &cols,
        &rows(&|r| r.lambda_cost == 0.001),
    )?;
    write_rows(
        &out.join("lambda_curve.csv"),
        &cols,
        &rows(&|r| r.n_round == 4),
    )?;

    let mut cmp = Vec::new();
    for (name, frozen) in [("pretrain_only", true), ("pretrain_finetune", false)] {
        let mut c = cfg.clone();
        c.train.freeze_ckm = frozen;
        c.train.freeze_gap = frozen;
        let row = train_and_eval(&mut c, checkpoint, &out.join("runs").join(name), None)?;
        cmp.push(VariantRow {
            variant: name.into(),
            eval: row,
        });
    }
    let table: Vec<(Vec<String>, &EvalRow)> = cmp
        .iter()
        .map(|r| (vec![r.variant.clone()], &r.eval))
        .collect();
    write_rows(&out.join("pretrain_vs_finetune.csv"), &["variant"], &table)?;
    Ok(grid)
}

/// Default output directory for a subcommand.
pub fn default_out(sub: &str) -> PathBuf {
    PathBuf::from("runs").join(sub)
}
