//! Rollout collection and the training loop.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

use super::gae::compute_gae;
use super::ppo::{ppo_update, PpoConfig, Sample, Trainable};
use super::reward::RewardConfig;
use crate::engine::{run_episode, Backend, EpisodeConfig, EpisodeOutput, EpisodeTrace, Models};
use crate::error::{OscError, Result};
use crate::policy::SampleMode;

/// Held-out evaluation episodes start at this index.
pub const EVAL_INDEX_OFFSET: u64 = 1 << 32;
/// Episodes used to calibrate the conflict threshold start here.
pub const CALIBRATION_INDEX_OFFSET: u64 = 1 << 33;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_steps: u64,
    /// Write a checkpoint every this many updates; 0 disables them.
    pub checkpoint_every: usize,
    /// Keep collaborator-model parameters at their pretrained values.
    pub freeze_ckm: bool,
    pub freeze_gap: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 5_000_000,
            checkpoint_every: 10,
            freeze_ckm: false,
            freeze_gap: false,
        }
    }
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateLog {
    pub update_idx: usize,
    pub steps: u64,
    pub mean_return: f64,
    pub mean_r_task: f64,
    pub mean_c_comm: f64,
    pub mean_r_shape: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub mean_gap_magnitude: f64,
}

/// Runs episodes `indices` in parallel; results keep index order.
pub fn rollout(
    models: &Models,
    backend: &Backend,
    cfg: &EpisodeConfig,
    reward: &RewardConfig,
    indices: std::ops::Range<u64>,
    mode: SampleMode,
) -> Result<Vec<EpisodeOutput>> {
    indices
        .into_par_iter()
        .map(|i| run_episode(models, backend, cfg, reward, i, mode))
        .collect()
}

pub fn evaluate(
    models: &Models,
    backend: &Backend,
    cfg: &EpisodeConfig,
    reward: &RewardConfig,
    episodes: u64,
) -> Result<Vec<EpisodeTrace>> {
    let outs = rollout(
        models,
        backend,
        cfg,
        reward,
        EVAL_INDEX_OFFSET..EVAL_INDEX_OFFSET + episodes,
        SampleMode::Greedy,
    )?;
    Ok(outs.into_iter().map(|o| o.trace).collect())
}

/// The same episode settings with uniform random actions.
pub fn random_policy(cfg: &EpisodeConfig) -> EpisodeConfig {
    let mut c = cfg.clone();
    c.ablations.no_policy = true;
    c.ablations.fixed_objective = false;
    c.ablations.no_style = false;
    c
}

/// 75th percentile (nearest rank) of every gap magnitude seen in
/// `episodes` random-policy episodes.
pub fn calibrate_tau_conflict(
    models: &Models,
    backend: &Backend,
    cfg: &EpisodeConfig,
    reward: &RewardConfig,
    episodes: u64,
) -> Result<f64> {
    let start = CALIBRATION_INDEX_OFFSET;
    let outs = rollout(
        models,
        backend,
        &random_policy(cfg),
        reward,
        start..start + episodes,
        SampleMode::Stochastic,
    )?;
    let mut mags: Vec<f64> = outs
        .iter()
        .flat_map(|o| {
            o.trace
                .steps
                .iter()
                .flat_map(|s| s.gaps.iter().map(|g| g.magnitude))
        })
        .collect();
    if mags.is_empty() {
        return Err(OscError::Precondition(
            "no gap magnitudes to calibrate from".into(),
        ));
    }
    mags.sort_by(f64::total_cmp);
    let rank = ((0.75 * mags.len() as f64).ceil() as usize).clamp(1, mags.len());
    Ok(mags[rank - 1])
}

/// Components that receive updates under the given settings.
pub fn trainable(cfg: &EpisodeConfig, t: &TrainConfig) -> Trainable {
    let a = cfg.ablations;
    if a.no_policy {
        return Trainable {
            policy: false,
            critic: true,
            ckm: false,
            gap: false,
        };
    }
    Trainable {
        policy: true,
        critic: true,
        ckm: a.ckm_trainable() && !t.freeze_ckm,
        gap: !t.freeze_gap,
    }
}

fn samples_of(outs: &[EpisodeOutput], ppo: &PpoConfig) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    for o in outs.iter().filter(|o| o.trace.end.valid) {
        let rewards: Vec<f64> = o.transitions.iter().map(|t| t.reward).collect();
        let values: Vec<f64> = o.transitions.iter().map(|t| t.value).collect();
        let g = compute_gae(&rewards, &values, 0.0, ppo.gamma, ppo.gae_lambda)?;
        for ((t, a), r) in o.transitions.iter().zip(g.advantages).zip(g.returns) {
            samples.push(Sample {
                inputs: t.inputs.clone(),
                action: t.action.clone(),
                old_log_prob: t.action.log_prob,
                advantage: a,
                ret: r,
            });
        }
    }
    Ok(samples)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Alternates parallel rollouts with PPO updates until `total_steps`
/// policy steps have been collected. With `out`, writes `metrics.csv`,
/// periodic checkpoints under `checkpoints/` and the final model under
/// `checkpoint/`.
pub fn train(
    models: &mut Models,
    backend: &Backend,
    cfg: &EpisodeConfig,
    reward: &RewardConfig,
    ppo: &PpoConfig,
    tcfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<Vec<UpdateLog>> {
    cfg.validate()?;
    reward.validate()?;
    ppo.validate()?;
    let per_episode = (cfg.agents * cfg.n_round) as u64;
    let train = trainable(cfg, tcfg);
    let mask = cfg.ablations.action_mask();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX);
    let mut writer = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| OscError::io(dir, e))?;
            let p = dir.join("metrics.csv");
            Some(
                csv::Writer::from_path(&p)
                    .map_err(|e| OscError::Format(format!("{}: {e}", p.display())))?,
            )
        }
        None => None,
    };
    let mut logs = Vec::new();
    let mut steps = 0u64;
    let mut next_episode = 0u64;
    while steps < tcfg.total_steps {
        let want = (ppo.batch_steps as u64).min(tcfg.total_steps - steps);
        let n = want.div_ceil(per_episode);
        let outs = rollout(
            models,
            backend,
            cfg,
            reward,
            next_episode..next_episode + n,
            SampleMode::Stochastic,
        )?;
        next_episode += n;
        let invalid = outs.iter().filter(|o| !o.trace.end.valid).count();
        if invalid > 0 {
            eprintln!(
                "warning: {invalid} episode(s) aborted by the backend were left out of the update"
            );
        }
        let mut samples = samples_of(&outs, ppo)?;
        steps += outs.iter().map(|o| o.transitions.len() as u64).sum::<u64>();
        if samples.is_empty() {
            return Err(OscError::Backend(
                "every episode in the batch was aborted".into(),
            ));
        }
        let mut pcfg = ppo.clone();
        pcfg.minibatch = pcfg.minibatch.min(samples.len());
        let stats = ppo_update(models, &mut samples, &pcfg, mask, train, &mut rng)?;
        let valid: Vec<&EpisodeTrace> = outs
            .iter()
            .map(|o| &o.trace)
            .filter(|t| t.end.valid)
            .collect();
        let row = UpdateLog {
            update_idx: logs.len(),
            steps,
            mean_return: mean(valid.iter().map(|t| t.end.total_return)),
            mean_r_task: mean(
                valid
                    .iter()
                    .map(|t| t.steps.iter().map(|s| s.reward.r_task).sum::<f64>()),
            ),
            mean_c_comm: mean(valid.iter().map(|t| t.total_tokens() as f64)),
            mean_r_shape: mean(
                valid
                    .iter()
                    .map(|t| t.steps.iter().map(|s| s.reward.r_shape).sum::<f64>()),
            ),
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
            mean_gap_magnitude: mean(valid.iter().flat_map(|t| {
                t.steps
                    .iter()
                    .flat_map(|s| s.gaps.iter().map(|g| g.magnitude))
            })),
        };
        if let Some(w) = writer.as_mut() {
            w.serialize(&row)
                .map_err(|e| OscError::Format(e.to_string()))?;
            w.flush().map_err(|e| OscError::io("metrics.csv", e))?;
        }
        logs.push(row);
        if let Some(dir) = out {
            if tcfg.checkpoint_every > 0 && logs.len() % tcfg.checkpoint_every == 0 {
                models.save(
                    &dir.join("checkpoints")
                        .join(format!("update_{:05}", logs.len())),
                )?;
            }
        }
    }
    if let Some(dir) = out {
        if writer.is_some() && logs.is_empty() {
            // Header only, so the file is never empty.
            let p = dir.join("metrics.csv");
            let mut w = csv::Writer::from_path(&p).map_err(|e| OscError::Format(e.to_string()))?;
            w.write_record(UPDATE_LOG_COLUMNS)
                .map_err(|e| OscError::Format(e.to_string()))?;
            w.flush().map_err(|e| OscError::io(&p, e))?;
        }
        models.save(&dir.join("checkpoint"))?;
    }
    Ok(logs)
}

pub const UPDATE_LOG_COLUMNS: [&str; 10] = [
    "update_idx",
    "steps",
    "mean_return",
    "mean_r_task",
    "mean_c_comm",
    "mean_r_shape",
    "policy_loss",
    "value_loss",
    "entropy",
    "mean_gap_magnitude",
];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::ModelConfig;
    use crate::policy::{CriticMode, PolicyNetConfig};

    fn tiny() -> Models {
        Models::new(
            &ModelConfig {
                policy: PolicyNetConfig {
                    layers: 1,
                    heads: 2,
                    model_dim: 8,
                    ff_dim: 16,
                    critic: CriticMode::Shared,
                    detach_critic: false,
                },
                ..ModelConfig::default()
            },
            2,
        )
        .unwrap()
    }

    fn quick() -> (EpisodeConfig, PpoConfig) {
        (
            EpisodeConfig {
                agents: 2,
                n_round: 2,
                ..EpisodeConfig::default()
            },
            PpoConfig {
                batch_steps: 16,
                minibatch: 8,
                epochs_per_update: 1,
                ..PpoConfig::default()
            },
        )
    }

    #[test]
    fn zero_steps_leaves_the_model_unchanged() {
        let mut m = tiny();
        let before = m.policy_ps.flatten();
        let (e, p) = quick();
        let t = TrainConfig {
            total_steps: 0,
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let logs = train(
            &mut m,
            &Backend::Stub,
            &e,
            &RewardConfig::default(),
            &p,
            &t,
            Some(dir.path()),
        )
        .unwrap();
        assert!(logs.is_empty());
        assert_eq!(m.policy_ps.flatten(), before);
        let header = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(header.trim(), UPDATE_LOG_COLUMNS.join(","));
    }

    #[test]
    fn metrics_log_is_reproducible() {
        let (e, p) = quick();
        let t = TrainConfig {
            total_steps: 32,
            checkpoint_every: 1,
            ..TrainConfig::default()
        };
        let run = || {
            let dir = tempfile::tempdir().unwrap();
            let mut m = tiny();
            train(
                &mut m,
                &Backend::Stub,
                &e,
                &RewardConfig::default(),
                &p,
                &t,
                Some(dir.path()),
            )
            .unwrap();
            assert!(dir
                .path()
                .join("checkpoints/update_00002/policy.osck")
                .exists());
            std::fs::read(dir.path().join("metrics.csv")).unwrap()
        };
        let a = run();
        assert_eq!(a, run());
        let text = String::from_utf8(a).unwrap();
        assert_eq!(text.lines().next().unwrap(), UPDATE_LOG_COLUMNS.join(","));
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn calibration_is_a_quantile_of_observed_gaps() {
        let m = tiny();
        let (e, _) = quick();
        let tau =
            calibrate_tau_conflict(&m, &Backend::Stub, &e, &RewardConfig::default(), 5).unwrap();
        assert!(tau > 0.0 && tau.is_finite());
    }
}
