//! Self-supervised pre-training of the collaborator encoder.
//!
//! A window is the dialogue prefix before turn `t`, encoded from the point of
//! view of turn `t`'s speaker. The model regresses the embedding of the
//! withheld turn, classifies its dialogue act, and pulls together states from
//! dialogues that share an outcome tag.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CkmNet, EncodeInput};
use crate::error::{OscError, Result};
use crate::nn::dist::Categorical;
use crate::nn::tensor::{dot, l2_norm};
use crate::nn::{AdamConfig, Grads, ParamStore};
use crate::text::corpus::{CorpusDialogue, Outcome};
use crate::text::{
    embed_text, AgentId, DialogueAct, DialogueHistory, ProfileMask, Query, TaskKind, Utterance,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub margin: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 5,
            learning_rate: 1e-4,
            batch_size: 16,
            margin: 1.0,
            seed: 0,
        }
    }
}

/// One training window.
#[derive(Clone, Debug)]
pub struct PretrainExample {
    pub input: EncodeInput,
    /// Index of the withheld utterance within its dialogue.
    pub masked_index: usize,
    pub masked_embedding: Vec<f64>,
    pub act: DialogueAct,
    pub outcome: Option<Outcome>,
}

/// Shuffled examples with contrastive pairs `(2i, 2i + 1)`.
#[derive(Clone, Debug)]
pub struct PretrainBatch {
    pub examples: Vec<PretrainExample>,
}

impl PretrainBatch {
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.examples.len() / 2).map(|i| (2 * i, 2 * i + 1))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub total: f64,
    pub masked: f64,
    pub act: f64,
    pub contrastive: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epochs: Vec<EpochLoss>,
    pub act_accuracy: f64,
    pub majority_baseline: f64,
}

pub fn build_examples(corpus: &[CorpusDialogue], window: usize) -> Result<Vec<PretrainExample>> {
    let mut out = Vec::new();
    for d in corpus {
        let q = Query::new(d.topic.clone(), TaskKind::Dialogue);
        let mut h = DialogueHistory::new();
        for (t, turn) in d.turns.iter().enumerate() {
            if t > 0 {
                out.push(PretrainExample {
                    input: EncodeInput::build(
                        AgentId(turn.speaker),
                        &q,
                        &h,
                        window,
                        ProfileMask::Full,
                    ),
                    masked_index: t,
                    masked_embedding: embed_text(&turn.text),
                    act: turn.act,
                    outcome: d.outcome,
                });
            }
            h.push(Utterance::new(
                AgentId(turn.speaker),
                t + 1,
                turn.text.clone(),
                Some(turn.act),
            ))?;
        }
    }
    Ok(out)
}

/// Fraction of windows whose act equals the most common act.
pub fn majority_baseline(examples: &[PretrainExample]) -> f64 {
    let mut counts = [0usize; 6];
    for e in examples {
        counts[e.act.index()] += 1;
    }
    let best = counts.iter().copied().max().unwrap_or(0);
    best as f64 / examples.len().max(1) as f64
}

pub fn act_accuracy(net: &CkmNet, ps: &ParamStore, examples: &[PretrainExample]) -> Result<f64> {
    let mut hits = 0usize;
    for e in examples {
        let (z, _) = net.encode(ps, &e.input)?;
        if Categorical::new(net.act_logits(ps, &z)).argmax() == e.act.index() {
            hits += 1;
        }
    }
    Ok(hits as f64 / examples.len().max(1) as f64)
}

/// `1 − cos(p, t)` and its gradient with respect to `p`.
pub fn cosine_loss(p: &[f64], t: &[f64]) -> (f64, Vec<f64>) {
    let np = l2_norm(p);
    let nt = l2_norm(t);
    if np < 1e-12 || nt < 1e-12 {
        return (1.0, vec![0.0; p.len()]);
    }
    let c = dot(p, t) / (np * nt);
    let grad = p
        .iter()
        .zip(t)
        .map(|(pi, ti)| -(ti / nt - c * pi / np) / np)
        .collect();
    (1.0 - c, grad)
}

/// Margin loss on unit-normalized states: `d²` for matching outcomes,
/// `max(0, margin − d)²` otherwise. Returns the loss and both gradients.
pub fn contrastive_loss(
    za: &[f64],
    zb: &[f64],
    same: bool,
    margin: f64,
) -> (f64, Vec<f64>, Vec<f64>) {
    let na = l2_norm(za).max(1e-12);
    let nb = l2_norm(zb).max(1e-12);
    let ua: Vec<f64> = za.iter().map(|v| v / na).collect();
    let ub: Vec<f64> = zb.iter().map(|v| v / nb).collect();
    let diff: Vec<f64> = ua.iter().zip(&ub).map(|(a, b)| a - b).collect();
    let d = l2_norm(&diff);
    let (loss, dd_scale) = if same {
        (d * d, 2.0)
    } else if d < margin && d > 1e-12 {
        let gap = margin - d;
        (gap * gap, -2.0 * gap / d)
    } else {
        (0.0, 0.0)
    };
    // dL/du_a = dd_scale · diff, dL/du_b = −dd_scale · diff.
    let du: Vec<f64> = diff.iter().map(|v| dd_scale * v).collect();
    let back = |u: &[f64], n: f64, g: &[f64], sign: f64| -> Vec<f64> {
        let proj = dot(u, g);
        g.iter()
            .zip(u)
            .map(|(gi, ui)| sign * (gi - proj * ui) / n)
            .collect()
    };
    let ga = back(&ua, na, &du, 1.0);
    let gb = back(&ub, nb, &du, -1.0);
    (loss, ga, gb)
}

/// Loss of one minibatch, accumulating gradients into `g`.
pub fn batch_loss(
    net: &CkmNet,
    ps: &ParamStore,
    batch: &PretrainBatch,
    margin: f64,
    g: &mut Grads,
) -> Result<EpochLoss> {
    let n = batch.examples.len();
    let mut encoded = Vec::with_capacity(n);
    for e in &batch.examples {
        encoded.push(net.encode(ps, &e.input)?);
    }
    let mut dz: Vec<Vec<f64>> = vec![vec![0.0; net.cfg.model_dim]; n];
    let mut loss = EpochLoss::default();
    let inv = 1.0 / n as f64;
    for (i, e) in batch.examples.iter().enumerate() {
        let z = &encoded[i].0;
        let pred = net.mask_head.forward_vec(ps, z);
        let (lm, dpred) = cosine_loss(&pred, &e.masked_embedding);
        let dpred: Vec<f64> = dpred.iter().map(|v| v * inv).collect();
        let dz_m = net.mask_head.backward_vec(ps, z, &dpred, g);

        let cat = Categorical::new(net.act_logits(ps, z));
        let la = -cat.log_prob(e.act.index());
        let dlogits: Vec<f64> = cat
            .log_prob_grad(e.act.index())
            .iter()
            .map(|v| -v * inv)
            .collect();
        let dz_a = net.act_head.backward_vec(ps, z, &dlogits, g);

        for k in 0..dz[i].len() {
            dz[i][k] += dz_m[k] + dz_a[k];
        }
        loss.masked += lm * inv;
        loss.act += la * inv;
    }
    let n_pairs = n / 2;
    for (a, b) in batch.pairs() {
        let same = batch.examples[a].outcome == batch.examples[b].outcome;
        let (l, ga, gb) = contrastive_loss(&encoded[a].0, &encoded[b].0, same, margin);
        let s = 1.0 / n_pairs as f64;
        loss.contrastive += l * s;
        for k in 0..ga.len() {
            dz[a][k] += ga[k] * s;
            dz[b][k] += gb[k] * s;
        }
    }
    for (i, (_, cache)) in encoded.iter().enumerate() {
        net.encode_backward(ps, cache, &dz[i], g);
    }
    loss.total = loss.masked + loss.act + loss.contrastive;
    Ok(loss)
}

pub fn pretrain_ckm(
    net: &CkmNet,
    ps: &mut ParamStore,
    corpus: &[CorpusDialogue],
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    if corpus.is_empty() {
        return Err(OscError::Config("pre-training corpus is empty".into()));
    }
    if cfg.batch_size < 2 {
        return Err(OscError::Config(
            "pre-training batch_size must be at least 2".into(),
        ));
    }
    let adam = AdamConfig::with_lr(cfg.learning_rate);
    adam.validate()?;
    let examples = build_examples(corpus, net.cfg.history_window)?;
    if examples.is_empty() {
        return Err(OscError::Config(
            "corpus has no multi-turn dialogues".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = EpochLoss::default();
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = PretrainBatch {
                examples: chunk.iter().map(|&i| examples[i].clone()).collect(),
            };
            let mut g = ps.zero_grads();
            let l = batch_loss(net, ps, &batch, cfg.margin, &mut g)?;
            ps.accumulate(&g);
            ps.adam_step(&adam)?;
            sum.total += l.total;
            sum.masked += l.masked;
            sum.act += l.act;
            sum.contrastive += l.contrastive;
            batches += 1;
        }
        let b = batches as f64;
        epochs.push(EpochLoss {
            total: sum.total / b,
            masked: sum.masked / b,
            act: sum.act / b,
            contrastive: sum.contrastive / b,
        });
    }
    Ok(PretrainReport {
        epochs,
        act_accuracy: act_accuracy(net, ps, &examples)?,
        majority_baseline: majority_baseline(&examples),
    })
}
