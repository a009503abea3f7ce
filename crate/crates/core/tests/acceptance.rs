//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Pass criterion numbers to run a subset:
//! `cargo test --test acceptance -- 2 4 9`.

#[path = "support/grad_ops.rs"]
mod grad_ops;

use std::collections::BTreeMap;
use std::fmt::Display;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::gamma::{digamma, ln_gamma};

use osc_core::ckm::pretrain::pretrain_ckm;
use osc_core::ckm::{CkmSource, CKM_DIM};
use osc_core::config::RunConfig;
use osc_core::engine::trace::PairGap;
use osc_core::engine::{
    episode_rngs, Ablations, Backend, EpisodeConfig, EpisodeOutput, EpisodeTrace, Models,
};
use osc_core::experiments as exp;
use osc_core::metrics;
use osc_core::nn::ParamStore;
use osc_core::policy::{uniform_action, Objective, PolicyState, SampleMode, Style};
use osc_core::rl::ppo::batch_loss;
use osc_core::rl::train::random_policy;
use osc_core::rl::{
    calibrate_tau_conflict, compute_gae, evaluate, rollout, train, PpoConfig, RewardConfig, Sample,
    Trainable,
};
use osc_core::text::corpus::generate_corpus;
use osc_core::text::{AgentId, Utterance, EMBED_DIM};

type Outcome = Result<String, String>;

fn ok<T, E: Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn mean_return(ts: &[EpisodeTrace]) -> f64 {
    ts.iter().map(|t| t.end.total_return).sum::<f64>() / ts.len() as f64
}

/// Desk models plus a reward with the conflict threshold calibrated on them.
fn desk_setup(cfg: &RunConfig, seed: u64) -> Result<(Models, RewardConfig), String> {
    let m = ok(Models::new(&cfg.model, seed))?;
    let mut reward = cfg.reward.clone();
    let tau = ok(calibrate_tau_conflict(
        &m,
        &Backend::Stub,
        &cfg.episode,
        &reward,
        cfg.eval.calibration_episodes,
    ))?;
    reward.shaping.tau_conflict = Some(tau);
    Ok((m, reward))
}

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                );
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn same_files(a: &Path, b: &Path) -> Result<usize, String> {
    let (fa, fb) = (files_under(a), files_under(b));
    ensure(
        fa.keys().eq(fb.keys()),
        format!("{} and {} hold different files", a.display(), b.display()),
    )?;
    for (k, v) in &fa {
        ensure(fb[k] == *v, format!("{} differs between runs", k.display()))?;
    }
    Ok(fa.len())
}

// 1 --------------------------------------------------------------------

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let mut rows = grad_ops::Rows::new();
    for op in grad_ops::ALL {
        op(&mut rows);
    }
    let secs = t.elapsed().as_secs_f64();
    let (name, worst) = rows
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .cloned()
        .unwrap();
    for (n, w) in &rows {
        ensure(*w < grad_ops::TOL, format!("{n}: rel err {w:.2e}"))?;
    }
    ensure(secs < 120.0, format!("took {secs:.1}s"))?;
    Ok(format!(
        "{} checks, {} seeds each, worst rel err {worst:.2e} ({name}), {secs:.1}s",
        rows.len(),
        grad_ops::SEEDS
    ))
}

// 2 --------------------------------------------------------------------

/// λ-weighted average of n-step advantage estimates, summed directly.
fn lambda_return_advantage(
    r: &[f64],
    v: &[f64],
    boot: f64,
    gamma: f64,
    lambda: f64,
    t: usize,
) -> f64 {
    let n = r.len();
    let value = |j: usize| if j < n { v[j] } else { boot };
    let horizon = n - t;
    let mut total = 0.0;
    for k in 1..=horizon {
        let mut a_k = -v[t];
        for l in 0..k {
            a_k += gamma.powi(l as i32) * r[t + l];
        }
        a_k += gamma.powi(k as i32) * value(t + k);
        let w = if k < horizon {
            (1.0 - lambda) * lambda.powi(k as i32 - 1)
        } else {
            lambda.powi(k as i32 - 1)
        };
        total += w * a_k;
    }
    total
}

fn gae_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..=10);
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let boot = if rng.random_bool(0.5) {
            0.0
        } else {
            rng.random_range(-1.0..1.0)
        };
        let gamma = rng.random_range(0.8..1.0);
        let lambda = rng.random_range(0.5..1.0);
        let g = ok(compute_gae(&r, &v, boot, gamma, lambda))?;
        for t in 0..n {
            let a = lambda_return_advantage(&r, &v, boot, gamma, lambda, t);
            worst = worst
                .max((a - g.advantages[t]).abs())
                .max((a + v[t] - g.returns[t]).abs());
        }
    }
    ensure(worst <= 1e-10, format!("max deviation {worst:.2e}"))?;
    Ok(format!("100 sequences, max deviation {worst:.2e}"))
}

// 3 --------------------------------------------------------------------

fn reward_identity() -> Outcome {
    let cfg = RunConfig::desk();
    let (m, reward) = desk_setup(&cfg, 0)?;
    ensure(reward.lambda_cost == 0.001, "lambda_cost is not 0.001")?;
    let ep = random_policy(&cfg.episode);
    let outs = ok(rollout(
        &m,
        &Backend::Stub,
        &ep,
        &reward,
        0..1000,
        SampleMode::Stochastic,
    ))?;
    let (mut steps, mut shaped, mut wins) = (0usize, 0usize, 0usize);
    for o in &outs {
        let t = &o.trace;
        let last = t.steps.len() - 1;
        let mut ret = 0.0;
        for (i, s) in t.steps.iter().enumerate() {
            let b = s.reward;
            let expected = b.r_task - 0.001 * s.tokens as f64 + b.r_shape;
            ensure(
                b.total.to_bits() == expected.to_bits() && b.c_comm_tokens == s.tokens,
                format!(
                    "episode {} step {i}: total {} vs {expected}",
                    t.begin.episode, b.total
                ),
            )?;
            ensure(
                b.r_shape == 0.0 || b.r_shape == 0.05,
                format!("r_shape {}", b.r_shape),
            )?;
            if i == last {
                ensure(
                    b.r_task == 1.0 || b.r_task == -0.1,
                    format!("terminal r_task {}", b.r_task),
                )?;
                wins += (b.r_task == 1.0) as usize;
            } else {
                ensure(b.r_task == 0.0, format!("non-terminal r_task {}", b.r_task))?;
            }
            shaped += (b.r_shape > 0.0) as usize;
            ret += b.total;
            steps += 1;
        }
        ensure(
            ret.to_bits() == t.end.total_return.to_bits(),
            "return is not the sum of step totals",
        )?;
    }
    Ok(format!(
        "1000 episodes, {steps} steps, {shaped} shaped, {wins} successes"
    ))
}

// 4 --------------------------------------------------------------------

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn log_softmax_at(logits: &[f64], i: usize) -> f64 {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
    logits[i] - lse
}

fn categorical_entropy(logits: &[f64]) -> f64 {
    (0..logits.len())
        .map(|i| {
            let lp = log_softmax_at(logits, i);
            -lp.exp() * lp
        })
        .sum()
}

fn beta_ln_b(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

fn beta_log_density(a: f64, b: f64, x: f64) -> f64 {
    let x = x.clamp(1e-6, 1.0 - 1e-6);
    (a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln() - beta_ln_b(a, b)
}

fn beta_entropy(a: f64, b: f64) -> f64 {
    beta_ln_b(a, b) - (a - 1.0) * digamma(a) - (b - 1.0) * digamma(b)
        + (a + b - 2.0) * digamma(a + b)
}

/// Scalar loss for one sample, built from the network forwards only.
fn reference_loss(m: &Models, s: &Sample, cfg: &PpoConfig) -> Result<f64, String> {
    let inp = &s.inputs;
    let mut zs = Vec::new();
    let mut gs = Vec::new();
    for src in &inp.sources {
        let (z, _) = ok(m.ckm.replay(&m.ckm_ps, src))?;
        let (g, _) = ok(m.gap.forward(&m.gap_ps, &inp.phi, &z))?;
        zs.push(z);
        gs.push(g);
    }
    let state = PolicyState {
        phi: inp.phi.clone(),
        query: inp.query.clone(),
        history: inp.history.clone(),
        collaborators: inp.collaborators.clone(),
        ckm_block: zs.clone(),
        gap_block: gs,
    };
    let (out, cache) = ok(m.policy.forward(&m.policy_ps, &state))?;
    let (v, _) = ok(m.critic.forward(&m.critic_ps, &state, cache.pooled()))?;
    let raw = out.style_raw;
    let (ad, bd, aa, ba) = (
        softplus(raw[0]) + 1.0,
        softplus(raw[1]) + 1.0,
        softplus(raw[2]) + 1.0,
        softplus(raw[3]) + 1.0,
    );
    let a = &s.action;
    let logp = log_softmax_at(&out.objective.logits, a.objective.index())
        + log_softmax_at(&out.target.logits, a.target_index)
        + beta_log_density(ad, bd, a.style.detail)
        + beta_log_density(aa, ba, a.style.assertiveness);
    let entropy = categorical_entropy(&out.objective.logits)
        + categorical_entropy(&out.target.logits)
        + beta_entropy(ad, bd)
        + beta_entropy(aa, ba);
    let ratio = (logp - s.old_log_prob).exp();
    let clipped = ratio.max(1.0 - cfg.clip_eps).min(1.0 + cfg.clip_eps);
    let surrogate = -(ratio * s.advantage).min(clipped * s.advantage);
    let mut aux = 0.0;
    for (l, next) in inp.next_acts.iter().enumerate() {
        if let Some(act) = next {
            aux -= log_softmax_at(&m.ckm.act_logits(&m.ckm_ps, &zs[l]), act.index());
        }
    }
    Ok(
        surrogate + cfg.value_coef * (v - s.ret).powi(2) - cfg.entropy_coef * entropy
            + cfg.aux_weight * aux,
    )
}

fn ppo_buffer(m: &Models, cfg: &RunConfig) -> Result<Vec<Sample>, String> {
    let out = ok(rollout(
        m,
        &Backend::Stub,
        &cfg.episode,
        &cfg.reward,
        0..1,
        SampleMode::Stochastic,
    ))?
    .remove(0);
    let tr = &out.transitions;
    let rewards: Vec<f64> = tr.iter().map(|t| t.reward).collect();
    let values: Vec<f64> = tr.iter().map(|t| t.value).collect();
    let gae = ok(compute_gae(
        &rewards,
        &values,
        0.0,
        cfg.ppo.gamma,
        cfg.ppo.gae_lambda,
    ))?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut samples = Vec::new();
    for (i, t) in tr.iter().enumerate() {
        let mut inputs = t.inputs.clone();
        for (l, c) in inputs.collaborators.iter().enumerate() {
            inputs.next_acts[l] = out.trace.steps[i + 1..]
                .iter()
                .find(|s| s.speaker == *c)
                .map(|s| s.act);
        }
        samples.push(Sample {
            inputs,
            action: t.action.clone(),
            old_log_prob: t.action.log_prob + rng.random_range(-0.2..0.2),
            advantage: gae.advantages[i] + rng.random_range(-0.5..0.5),
            ret: gae.returns[i],
        });
    }
    Ok(samples)
}

fn flat(g: &osc_core::rl::ppo::ModelGrads) -> Vec<f64> {
    [&g.ckm, &g.gap, &g.policy, &g.critic]
        .iter()
        .flat_map(|x| x.flatten())
        .collect()
}

fn ppo_reference() -> Outcome {
    let mut cfg = RunConfig::desk();
    cfg.episode.agents = 2;
    let (m, reward) = desk_setup(&cfg, 4)?;
    cfg.reward = reward;
    let samples = ppo_buffer(&m, &cfg)?;
    ensure(
        samples.len() == 8,
        format!("buffer has {} steps", samples.len()),
    )?;
    let batch: Vec<&Sample> = samples.iter().collect();
    let mask = cfg.episode.ablations.action_mask();
    let ppo = cfg.ppo.clone();

    let stats = ok(batch_loss(&m, &batch, &ppo, mask, Trainable::ALL, None))?;
    let mut reference = 0.0;
    for s in &samples {
        reference += reference_loss(&m, s, &ppo)? / samples.len() as f64;
    }
    let diff = (stats.total - reference).abs();
    ensure(
        diff <= 1e-8,
        format!(
            "loss {} vs reference {reference} (diff {diff:.2e})",
            stats.total
        ),
    )?;

    // Every ratio inside [0.8, 1.2]: the clip never binds.
    let mut max_dev = 0.0f64;
    for s in &samples {
        let one = vec![s];
        let mut p = ppo.clone();
        p.value_coef = 0.0;
        p.entropy_coef = 0.0;
        p.aux_weight = 0.0;
        let st = ok(batch_loss(&m, &one, &p, mask, Trainable::ALL, None))?;
        let ratio = -st.policy_loss / s.advantage;
        max_dev = max_dev.max((ratio - 1.0).abs());
    }
    ensure(
        max_dev <= 0.2,
        format!("a ratio strays {max_dev:.3} from 1"),
    )?;
    let mut g_on = osc_core::rl::ppo::ModelGrads::new(&m);
    let mut g_off = osc_core::rl::ppo::ModelGrads::new(&m);
    let on = ok(batch_loss(
        &m,
        &batch,
        &ppo,
        mask,
        Trainable::ALL,
        Some(&mut g_on),
    ))?;
    let off_cfg = PpoConfig {
        clip_eps: 1e9,
        ..ppo.clone()
    };
    let off = ok(batch_loss(
        &m,
        &batch,
        &off_cfg,
        mask,
        Trainable::ALL,
        Some(&mut g_off),
    ))?;
    ensure(
        on.total.to_bits() == off.total.to_bits(),
        "loss changes when clipping is disabled",
    )?;
    ensure(
        flat(&g_on) == flat(&g_off),
        "gradients change when clipping is disabled",
    )?;
    let tight = PpoConfig {
        clip_eps: 0.01,
        ..ppo.clone()
    };
    let t = ok(batch_loss(&m, &batch, &tight, mask, Trainable::ALL, None))?;
    ensure(
        t.total != on.total,
        "a tight clip should bind on this buffer",
    )?;
    Ok(format!(
        "loss {:.10} vs reference {reference:.10} (diff {diff:.1e}); max |ratio-1| {max_dev:.3}, clip-off identical",
        stats.total
    ))
}

// 5 --------------------------------------------------------------------

fn small_run_config() -> RunConfig {
    let mut c = RunConfig::desk();
    c.train.total_steps = 384;
    c.train.checkpoint_every = 1;
    c.ppo.batch_steps = 128;
    c.ppo.minibatch = 64;
    c.ppo.epochs_per_update = 2;
    c.eval.episodes = 40;
    c.eval.calibration_episodes = 20;
    c
}

fn determinism() -> Outcome {
    let dir = ok(tempfile::tempdir())?;
    let d = dir.path();
    for run in ["a", "b"] {
        let mut c = small_run_config();
        ok(exp::run_train(
            &mut c,
            None,
            &d.join(format!("train_{run}")),
        ))?;
    }
    let train_files = same_files(&d.join("train_a"), &d.join("train_b"))?;
    let ckpt = d.join("train_a").join("checkpoint");
    for run in ["a", "b"] {
        let mut c = small_run_config();
        ok(exp::run_eval(
            &mut c,
            Some(&ckpt),
            &d.join(format!("eval_{run}")),
        ))?;
    }
    let eval_files = same_files(&d.join("eval_a"), &d.join("eval_b"))?;
    let traces = ok(osc_core::engine::read_traces(
        &d.join("eval_a").join("traces.jsonl"),
    ))?;
    let rep = exp::replay_traces(&traces);
    ensure(
        rep.mismatches.is_empty(),
        format!("replay: {}", rep.mismatches.join("; ")),
    )?;
    let mut tampered = traces.clone();
    tampered[0].steps[0].reward.total += 1e-12;
    ensure(
        !exp::replay_traces(&tampered).mismatches.is_empty(),
        "replay misses a tampered total",
    )?;
    Ok(format!(
        "{train_files} training files and {eval_files} evaluation files identical; replay of {} steps exact",
        rep.steps
    ))
}

// 6 --------------------------------------------------------------------

fn desk_learning() -> Outcome {
    let cfg = RunConfig::desk();
    let (init, reward) = desk_setup(&cfg, cfg.episode.seed)?;
    let episodes = cfg.eval.episodes;
    let base = mean_return(&ok(evaluate(
        &init,
        &Backend::Stub,
        &random_policy(&cfg.episode),
        &reward,
        episodes,
    ))?);
    let mut full_cfg = cfg.clone();
    full_cfg.reward = reward.clone();
    let task_cfg = ok(exp::reward_variant(&full_cfg, "task_only"))?;
    let mut results = Vec::new();
    for c in [&full_cfg, &task_cfg] {
        let mut m = init.clone();
        let t = Instant::now();
        ok(train(
            &mut m,
            &Backend::Stub,
            &c.episode,
            &c.reward,
            &c.ppo,
            &c.train,
            None,
        ))?;
        let secs = t.elapsed().as_secs_f64();
        let r = mean_return(&ok(evaluate(
            &m,
            &Backend::Stub,
            &cfg.episode,
            &reward,
            episodes,
        ))?);
        results.push((r, secs));
    }
    let (full, full_secs) = results[0];
    let (task_only, task_secs) = results[1];
    let gain = (full - base) / base.abs();
    let detail = format!(
        "random {base:.4}, full {full:.4} ({:+.1}%, {full_secs:.0}s), task-only {task_only:.4} ({task_secs:.0}s)",
        100.0 * gain
    );
    ensure(gain >= 0.30, format!("improvement below 30%: {detail}"))?;
    ensure(
        full_secs < 900.0 && task_secs < 900.0,
        format!("too slow: {detail}"),
    )?;
    ensure(
        full >= task_only,
        format!("task-only beats full reward: {detail}"),
    )?;
    Ok(detail)
}

// 7 --------------------------------------------------------------------

struct AuditEnv {
    cfg: RunConfig,
    reward: RewardConfig,
}

impl AuditEnv {
    fn episode(&self, abl: Ablations) -> EpisodeConfig {
        let mut e = self.cfg.episode.clone();
        e.ablations = abl;
        e.log_states = true;
        e
    }

    fn models(&self, abl: Ablations) -> Result<Models, String> {
        let mut m = ok(Models::new(&self.cfg.model, 7))?;
        ok(m.set_gap_variant(abl.gap_variant(), 8))?;
        Ok(m)
    }

    fn run(&self, m: &Models, abl: Ablations) -> Result<Vec<EpisodeOutput>, String> {
        ok(rollout(
            m,
            &Backend::Stub,
            &self.episode(abl),
            &self.reward,
            0..6,
            SampleMode::Stochastic,
        ))
    }

    fn traces(&self, m: &Models, abl: Ablations) -> Result<Vec<EpisodeTrace>, String> {
        Ok(self.run(m, abl)?.into_iter().map(|o| o.trace).collect())
    }
}

fn perturb(ps: &mut ParamStore, prefixes: &[&str]) -> usize {
    let ids: Vec<_> = ps
        .ids()
        .filter(|id| prefixes.iter().any(|p| ps.name(*id).starts_with(p)))
        .collect();
    for id in &ids {
        for x in ps.value_mut(*id).data_mut() {
            *x += 0.5;
        }
    }
    ids.len()
}

fn all_steps(ts: &[EpisodeTrace]) -> impl Iterator<Item = &osc_core::engine::trace::StepRecord> {
    ts.iter().flat_map(|t| t.steps.iter())
}

/// Trace unchanged when the named gap parameters move.
fn gap_invariant(env: &AuditEnv, abl: Ablations, prefixes: &[&str]) -> Result<bool, String> {
    let m = env.models(abl)?;
    let mut p = m.clone();
    ensure(
        perturb(&mut p.gap_ps, prefixes) > 0,
        format!("no parameters named {prefixes:?}"),
    )?;
    Ok(env.traces(&m, abl)? == env.traces(&p, abl)?)
}

fn update_features(outs: &[EpisodeOutput]) -> Vec<Vec<f64>> {
    outs.iter()
        .flat_map(|o| o.transitions.iter().flat_map(|t| t.inputs.sources.iter()))
        .filter_map(|s| match s {
            CkmSource::Update(u) => Some(u.features.clone()),
            _ => None,
        })
        .collect()
}

fn profile_slots_nonzero(feats: &[Vec<f64>], slots: std::ops::Range<usize>) -> bool {
    feats
        .iter()
        .any(|f| slots.clone().any(|i| f[EMBED_DIM + i] != 0.0))
}

fn audit(env: &AuditEnv, flag: &str, full: &[EpisodeOutput]) -> Result<String, String> {
    let abl = ok(Ablations::single(flag))?;
    let full_traces: Vec<EpisodeTrace> = full.iter().map(|o| o.trace.clone()).collect();
    let m = env.models(abl)?;
    let outs = env.run(&m, abl)?;
    let traces: Vec<EpisodeTrace> = outs.iter().map(|o| o.trace.clone()).collect();
    let steps = || all_steps(&traces);
    match flag {
        "no_ckm" => {
            for s in steps() {
                ensure(
                    s.states
                        .as_ref()
                        .unwrap()
                        .iter()
                        .all(|p| p.z.iter().all(|x| *x == 0.0)),
                    "nonzero z",
                )?;
            }
            let mut p = m.clone();
            perturb(&mut p.ckm_ps, &["ckm"]);
            ensure(
                env.traces(&p, abl)? == traces,
                "trace depends on collaborator-model parameters",
            )?;
            Ok("z all zero; trace independent of the collaborator model".into())
        }
        "no_gap" | "gap_l2" => {
            ensure(
                gap_invariant(env, abl, &["gap.attn", "gap.mlp", "gap.out"])?,
                "trace depends on gap attention or MLP",
            )?;
            ensure(
                !gap_invariant(env, abl, &["gap.proj"])?,
                "trace ignores the gap projections",
            )?;
            if flag == "gap_l2" {
                for o in &outs {
                    for t in &o.transitions {
                        for src in &t.inputs.sources {
                            let (z, _) = ok(m.ckm.replay(&m.ckm_ps, src))?;
                            let (g, _) = ok(m.gap.forward(&m.gap_ps, &t.inputs.phi, &z))?;
                            ensure(
                                g.iter().all(|x| *x == g[0]),
                                "l2 gap is not a broadcast scalar",
                            )?;
                        }
                    }
                }
            }
            Ok("only the projections reach the trace".into())
        }
        "gap_mlp" => {
            ensure(
                gap_invariant(env, abl, &["gap.attn"])?,
                "trace depends on facet attention",
            )?;
            ensure(
                !gap_invariant(env, abl, &["gap.mlp"])?,
                "trace ignores the gap MLP",
            )?;
            ensure(
                !gap_invariant(env, Ablations::default(), &["gap.attn"])?,
                "the full gap network ignores its attention",
            )?;
            Ok("attention bypassed, MLP live (full model uses attention)".into())
        }
        "no_policy" => {
            for t in &traces {
                let (_, mut rng) = episode_rngs(t.begin.config.seed, t.begin.episode);
                for s in &t.steps {
                    let collab: Vec<AgentId> = (0..t.agents())
                        .map(AgentId)
                        .filter(|a| *a != s.speaker)
                        .collect();
                    let want = uniform_action(&collab, &mut rng);
                    ensure(
                        (want.objective, want.target, want.style)
                            == (s.action.objective, s.action.target, s.action.style),
                        format!(
                            "episode {} step {}: action off the reference stream",
                            t.begin.episode, s.step
                        ),
                    )?;
                }
            }
            let mut p = m.clone();
            perturb(&mut p.policy_ps, &[""]);
            let moved = env.traces(&p, abl)?;
            let acts =
                |ts: &[EpisodeTrace]| all_steps(ts).map(|s| s.action.clone()).collect::<Vec<_>>();
            ensure(
                acts(&moved) == acts(&traces),
                "actions depend on policy parameters",
            )?;
            Ok("actions equal the uniform reference stream".into())
        }
        "no_shaping" => {
            ensure(
                steps().all(|s| s.reward.r_shape == 0.0),
                "shaping bonus paid",
            )?;
            let paid = all_steps(&full_traces)
                .filter(|s| s.reward.r_shape > 0.0)
                .count();
            ensure(
                paid > 0,
                "the full run never shapes, so the audit is vacuous",
            )?;
            Ok(format!(
                "r_shape zero everywhere ({paid} shaped steps in the full run)"
            ))
        }
        "fixed_objective" => {
            ensure(
                steps().all(|s| s.action.objective == Objective::ProposeStep),
                "objective varies",
            )?;
            ensure(
                all_steps(&full_traces).any(|s| s.action.objective != Objective::ProposeStep),
                "full run is constant",
            )?;
            Ok("every objective is propose_step".into())
        }
        "no_style" => {
            ensure(
                steps().all(|s| s.action.style == Style::NEUTRAL),
                "style varies",
            )?;
            ensure(
                all_steps(&full_traces).any(|s| s.action.style != Style::NEUTRAL),
                "full run is neutral",
            )?;
            Ok("every style is neutral".into())
        }
        "simplified_prompt" => {
            for s in steps() {
                let d = &s.directive;
                ensure(
                    d.role_context.is_none()
                        && d.history.is_empty()
                        && d.collaborator_assessment.is_none()
                        && d.own_state.is_none()
                        && d.gap_focus.is_none(),
                    "directive carries context",
                )?;
            }
            ensure(
                all_steps(&full_traces)
                    .all(|s| s.directive.role_context.is_some() && s.directive.gap_focus.is_some()),
                "full directives lack context",
            )?;
            Ok("directives carry only the action block".into())
        }
        "update_static" => {
            for t in &traces {
                let k = t.agents();
                let frozen = t.steps[k - 1].states.clone();
                ensure(t.steps[0].states != frozen, "no update during round 1")?;
                for s in t.steps.iter().filter(|s| s.round > 1) {
                    ensure(s.states == frozen, format!("z moved at step {}", s.step))?;
                }
            }
            Ok("z frozen after round 1".into())
        }
        "update_avg" => {
            let mut worst = 0.0f64;
            for t in &traces {
                for (j, s) in t.steps.iter().enumerate() {
                    for p in s.states.as_ref().unwrap() {
                        let said: Vec<Vec<f64>> = t.steps[..=j]
                            .iter()
                            .filter(|x| x.speaker == p.target)
                            .map(|x| {
                                Utterance::new(x.speaker, x.round, x.message.clone(), None)
                                    .embedding
                            })
                            .collect();
                        let mut want = vec![0.0; CKM_DIM];
                        for e in &said {
                            for (w, v) in want.iter_mut().zip(e) {
                                *w += v;
                            }
                        }
                        if !said.is_empty() {
                            want.iter_mut().for_each(|w| *w /= said.len() as f64);
                        }
                        for (a, b) in want.iter().zip(&p.z) {
                            worst = worst.max((a - b).abs());
                        }
                    }
                }
            }
            ensure(
                worst <= 1e-12,
                format!("z deviates from the message mean by {worst:.2e}"),
            )?;
            Ok(format!(
                "z equals the target's mean message embedding (max dev {worst:.1e})"
            ))
        }
        "ckm_ling_only" | "ckm_reas_only" => {
            let (masked, kept) = if flag == "ckm_ling_only" {
                (9..11, 0..9)
            } else {
                (0..9, 9..11)
            };
            let feats = update_features(&outs);
            ensure(!feats.is_empty(), "no update inputs recorded")?;
            ensure(
                !profile_slots_nonzero(&feats, masked.clone()),
                format!("profile slots {masked:?} not zeroed"),
            )?;
            ensure(
                profile_slots_nonzero(&feats, kept.clone()),
                format!("profile slots {kept:?} all zero"),
            )?;
            ensure(
                profile_slots_nonzero(&update_features(full), masked.clone()),
                format!("full run never fills slots {masked:?}"),
            )?;
            Ok(format!(
                "profile slots {masked:?} zero in {} update inputs",
                feats.len()
            ))
        }
        other => Err(format!("no audit for {other}")),
    }
}

fn ablation_wiring() -> Outcome {
    let mut cfg = RunConfig::desk();
    cfg.eval.calibration_episodes = 30;
    let (_, reward) = desk_setup(&cfg, 7)?;
    let env = AuditEnv { cfg, reward };
    let full_models = env.models(Ablations::default())?;
    let full = env.run(&full_models, Ablations::default())?;
    let mut failed = Vec::new();
    for flag in Ablations::NAMES {
        match audit(&env, flag, &full) {
            Ok(msg) => println!("    {flag:<18} ok: {msg}"),
            Err(e) => {
                println!("    {flag:<18} FAILED: {e}");
                failed.push(flag);
            }
        }
    }
    ensure(
        failed.is_empty(),
        format!("failed audits: {}", failed.join(", ")),
    )?;
    Ok(format!("{} flags audited", Ablations::NAMES.len()))
}

// 8 --------------------------------------------------------------------

fn protocol_counts() -> Outcome {
    let mut cfg = RunConfig::desk();
    cfg.eval.episodes = 8;
    cfg.eval.calibration_episodes = 8;
    let m = ok(Models::new(&cfg.model, 0))?;
    let n_round = cfg.episode.n_round;
    for k in exp::SWEEP_COUNTS {
        let mut e = cfg.episode.clone();
        e.agents = k;
        e.log_states = true;
        let reward = RewardConfig {
            shaping: osc_core::rl::ShapingConfig {
                tau_conflict: Some(1.0),
                ..Default::default()
            },
            ..Default::default()
        };
        for o in ok(rollout(
            &m,
            &Backend::Stub,
            &e,
            &reward,
            0..2,
            SampleMode::Stochastic,
        ))? {
            let t = &o.trace;
            ensure(
                t.steps.len() == k * n_round,
                format!("k={k}: {} messages", t.steps.len()),
            )?;
            ensure(
                t.end.final_gaps.len() == k * (k - 1),
                format!("k={k}: {} final gaps", t.end.final_gaps.len()),
            )?;
            for s in &t.steps {
                let st = s.states.as_ref().unwrap();
                let pairs: std::collections::BTreeSet<_> =
                    st.iter().map(|p| (p.observer, p.target)).collect();
                ensure(
                    st.len() == k * (k - 1)
                        && pairs.len() == st.len()
                        && st.iter().all(|p| p.observer != p.target),
                    format!("k={k}: {} logged pairs", st.len()),
                )?;
            }
        }
    }
    let dir = ok(tempfile::tempdir())?;
    let rows = ok(exp::run_sweep(
        &cfg,
        None,
        &exp::SWEEP_COUNTS,
        &dir.path().join("sweep"),
    ))?;
    for r in &rows {
        let k = r.agents;
        ensure(
            r.messages == (k * n_round) as f64 && r.ckm_pairs == k * (k - 1),
            format!(
                "sweep row k={k}: {} messages, {} pairs",
                r.messages, r.ckm_pairs
            ),
        )?;
    }
    let mut single = cfg.clone();
    single.episode.agents = 4;
    let row = ok(exp::run_eval(&mut single, None, &dir.path().join("eval4")))?;
    ensure(
        rows[1].eval == row,
        "sweep row for k=4 differs from a single evaluation",
    )?;
    Ok(format!(
        "k in {:?}: messages = 4k, pairs = k(k-1)",
        exp::SWEEP_COUNTS
    ))
}

// 9 --------------------------------------------------------------------

fn scripted_trace() -> Result<EpisodeTrace, String> {
    let mut cfg = RunConfig::desk();
    cfg.episode.agents = 3;
    cfg.reward.shaping.tau_conflict = Some(1.0);
    let m = ok(Models::new(&cfg.model, 0))?;
    Ok(ok(rollout(
        &m,
        &Backend::Stub,
        &cfg.episode,
        &cfg.reward,
        0..1,
        SampleMode::Stochastic,
    ))?
    .remove(0)
    .trace)
}

fn metric_fixed_points() -> Outcome {
    let base = scripted_trace()?;

    let mut repeat = base.clone();
    repeat
        .steps
        .iter_mut()
        .for_each(|s| s.message = "we should add all the hidden values now".into());
    let r = metrics::redundancy(&repeat);
    ensure(r == 100.0, format!("repeat redundancy {r}"))?;

    let mut novel = base.clone();
    for (i, s) in novel.steps.iter_mut().enumerate() {
        s.message = format!("a{i} b{i} c{i} d{i} e{i}");
    }
    let r = metrics::redundancy(&novel);
    ensure(r == 0.0, format!("novel redundancy {r}"))?;

    let gap = |o: usize, t: usize, magnitude: f64| PairGap {
        observer: AgentId(o),
        target: AgentId(t),
        magnitude,
    };
    let mut scripted = base.clone();
    for s in scripted.steps.iter_mut() {
        s.gaps.iter_mut().for_each(|g| g.magnitude = 0.1);
    }
    scripted.steps[0].gaps.push(gap(0, 1, 5.0));
    scripted.steps[1].gaps.push(gap(1, 2, 6.0));
    scripted.end.final_gaps = scripted
        .end
        .final_gaps
        .iter()
        .map(|g| {
            gap(
                g.observer.0,
                g.target.0,
                if (g.observer.0, g.target.0) == (1, 2) {
                    0.9
                } else {
                    0.2
                },
            )
        })
        .collect();
    let counts = metrics::conflict_counts(&scripted, 1.0, 0.5);
    ensure(counts == (2, 1), format!("conflict counts {counts:?}"))?;
    let cm = metrics::comm_metrics(&[scripted], Some(1.0));
    ensure(
        cm.conflict_resolution_pct == 50.0 && !cm.no_conflicts,
        format!("resolution {}", cm.conflict_resolution_pct),
    )?;

    let mut echo = base.clone();
    let q = echo.begin.query.clone();
    echo.steps.iter_mut().for_each(|s| s.message = q.clone());
    let d = metrics::info_density(&echo);
    ensure((d - 100.0).abs() < 1e-9, format!("density {d}"))?;
    Ok("redundancy 100/0, conflict resolution 50, density 100".into())
}

// 10 -------------------------------------------------------------------

fn ckm_pretraining() -> Outcome {
    let cfg = RunConfig::desk();
    ensure(
        cfg.pretrain.epochs == 5 && cfg.pretrain.learning_rate == 1e-4,
        "pretraining defaults changed",
    )?;
    let corpus = generate_corpus(200, 0);
    let mut m = ok(Models::new(&cfg.model, 0))?;
    let rep = ok(pretrain_ckm(&m.ckm, &mut m.ckm_ps, &corpus, &cfg.pretrain))?;
    let losses: Vec<f64> = rep.epochs.iter().map(|e| e.total).collect();
    ensure(losses.len() == 5, format!("{} epochs", losses.len()))?;
    for w in losses.windows(2) {
        ensure(w[1] <= 1.05 * w[0], format!("loss rose: {losses:?}"))?;
    }
    ensure(
        rep.act_accuracy > rep.majority_baseline,
        format!(
            "accuracy {:.3} vs majority {:.3}",
            rep.act_accuracy, rep.majority_baseline
        ),
    )?;
    let shown: Vec<String> = losses.iter().map(|l| format!("{l:.4}")).collect();
    Ok(format!(
        "loss [{}]; next-act accuracy {:.3} > majority {:.3}",
        shown.join(", "),
        rep.act_accuracy,
        rep.majority_baseline
    ))
}

// 11 -------------------------------------------------------------------

fn checkpoints() -> Outcome {
    let dir = ok(tempfile::tempdir())?;
    let d = dir.path();
    let mut cfg = small_run_config();
    cfg.train.freeze_ckm = true;
    cfg.train.freeze_gap = true;
    let (mut m, reward) = desk_setup(&cfg, 11)?;
    ok(m.save(&d.join("init")))?;
    ok(Models::load(&d.join("init")).and_then(|l| l.save(&d.join("init_again"))))?;
    same_files(&d.join("init"), &d.join("init_again"))?;

    let run = d.join("run");
    let logs = ok(train(
        &mut m,
        &Backend::Stub,
        &cfg.episode,
        &reward,
        &cfg.ppo,
        &cfg.train,
        Some(&run),
    ))?;
    let mut snapshots: Vec<PathBuf> = (1..=logs.len())
        .map(|i| run.join("checkpoints").join(format!("update_{i:05}")))
        .collect();
    snapshots.push(run.join("checkpoint"));
    let read = |p: &Path, c: &str| std::fs::read(p.join(format!("{c}.osck"))).unwrap();
    for s in &snapshots {
        for c in ["ckm", "gap"] {
            ensure(
                read(s, c) == read(&d.join("init"), c),
                format!("{c} changed in {}", s.display()),
            )?;
        }
    }
    ensure(
        read(&run.join("checkpoint"), "policy") != read(&d.join("init"), "policy"),
        "policy never trained",
    )?;
    ok(Models::load(&run.join("checkpoint")).and_then(|l| l.save(&d.join("trained_again"))))?;
    same_files(&run.join("checkpoint"), &d.join("trained_again"))?;
    Ok(format!(
        "save/load/save identical (fresh and trained); ckm and gap unchanged across {} snapshots",
        snapshots.len()
    ))
}

// ----------------------------------------------------------------------

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 11] = [
        (1, "gradient suite", gradient_suite),
        (2, "GAE oracle", gae_oracle),
        (3, "reward identity", reward_identity),
        (4, "PPO reference", ppo_reference),
        (5, "determinism", determinism),
        (6, "desk-scale learning", desk_learning),
        (7, "ablation wiring", ablation_wiring),
        (8, "protocol counts", protocol_counts),
        (9, "metric fixed points", metric_fixed_points),
        (10, "collaborator-model pretraining", ckm_pretraining),
        (11, "checkpoint round-trip", checkpoints),
    ];
    let wanted: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failures = 0;
    for (n, name, f) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let result = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(r) => r,
            Err(p) => Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(msg) => println!("criterion {n:>2} PASS  {name}: {msg} [{secs:.1}s]"),
            Err(msg) => {
                failures += 1;
                println!("criterion {n:>2} FAIL  {name}: {msg} [{secs:.1}s]");
            }
        }
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
