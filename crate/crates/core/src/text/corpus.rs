//! Synthetic multi-party dialogue corpora in JSON Lines form.
//!
//! Each line is one dialogue: `{"id", "topic", "outcome", "turns": [{"speaker", "act", "text"}]}`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

use super::history::DialogueAct;
use crate::error::{OscError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusTurn {
    pub speaker: usize,
    pub act: DialogueAct,
    pub text: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Success,
    Failure,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusDialogue {
    pub id: String,
    #[serde(default)]
    pub topic: String,
    #[serde(default)]
    pub outcome: Option<Outcome>,
    pub turns: Vec<CorpusTurn>,
}

const TOPICS: [&str; 8] = [
    "quadratic equation",
    "project schedule",
    "budget estimate",
    "sorting algorithm",
    "energy policy",
    "test coverage",
    "database schema",
    "travel plan",
];

fn act_text<R: Rng>(act: DialogueAct, topic: &str, rng: &mut R) -> String {
    let n = rng.random_range(1..=9);
    let pick = |opts: &[&str], rng: &mut R| opts[rng.random_range(0..opts.len())].to_string();
    match act {
        DialogueAct::Question => pick(
            &[
                "what is your estimate for the {t}?",
                "how would you approach the {t}?",
                "can you explain step {n} of the {t}?",
            ],
            rng,
        ),
        DialogueAct::Answer => pick(
            &[
                "the {t} needs {n} steps because of the constraints.",
                "my estimate for the {t} is {n}.",
                "according to the data the {t} holds at {n}.",
            ],
            rng,
        ),
        DialogueAct::Propose => pick(
            &[
                "i propose we split the {t} into {n} parts.",
                "let us try a new plan for the {t}.",
                "we should start the {t} with step {n}.",
            ],
            rng,
        ),
        DialogueAct::Critique => pick(
            &[
                "that is wrong, the {t} fails at step {n}.",
                "i disagree, the {t} has a conflict.",
                "this plan for the {t} is missing a check.",
            ],
            rng,
        ),
        DialogueAct::Agree => pick(
            &[
                "yes, i agree with the {t} plan.",
                "good, that works for the {t}.",
                "agreed, the {t} is resolved.",
            ],
            rng,
        ),
        DialogueAct::Clarify => pick(
            &[
                "to clarify, i meant step {n} of the {t}.",
                "perhaps i was unclear about the {t}.",
                "i mean the {t} might need {n} more days.",
            ],
            rng,
        ),
    }
    .replace("{t}", topic)
    .replace("{n}", &n.to_string())
}

/// Scripted dialogues: each speaker has a preferred act, otherwise responds
/// to the previous act. Outcome is success when agreements outnumber critiques.
pub fn generate_corpus(dialogues: usize, seed: u64) -> Vec<CorpusDialogue> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dialogues)
        .map(|d| {
            let speakers = rng.random_range(2..=4);
            let persona: Vec<DialogueAct> = (0..speakers)
                .map(|_| DialogueAct::ALL[rng.random_range(0..6)])
                .collect();
            let topic = TOPICS[rng.random_range(0..TOPICS.len())];
            let len = rng.random_range(6..=12);
            let mut turns: Vec<CorpusTurn> = Vec::with_capacity(len);
            for t in 0..len {
                let speaker = t % speakers;
                let act = if rng.random_bool(0.75) {
                    persona[speaker]
                } else {
                    match turns.last().map(|x| x.act) {
                        Some(DialogueAct::Question) => DialogueAct::Answer,
                        Some(DialogueAct::Propose) => {
                            if rng.random_bool(0.5) {
                                DialogueAct::Agree
                            } else {
                                DialogueAct::Critique
                            }
                        }
                        Some(DialogueAct::Critique) => DialogueAct::Clarify,
                        Some(DialogueAct::Clarify) => DialogueAct::Agree,
                        _ => DialogueAct::ALL[rng.random_range(0..6)],
                    }
                };
                let text = act_text(act, topic, &mut rng);
                turns.push(CorpusTurn { speaker, act, text });
            }
            let agrees = turns.iter().filter(|t| t.act == DialogueAct::Agree).count();
            let critiques = turns
                .iter()
                .filter(|t| t.act == DialogueAct::Critique)
                .count();
            CorpusDialogue {
                id: format!("dlg-{d:05}"),
                topic: topic.to_string(),
                outcome: Some(if agrees > critiques {
                    Outcome::Success
                } else {
                    Outcome::Failure
                }),
                turns,
            }
        })
        .collect()
}

pub fn write_jsonl(path: &Path, corpus: &[CorpusDialogue]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| OscError::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    for d in corpus {
        let line = serde_json::to_string(d).map_err(|e| OscError::Format(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| OscError::io(path, e))?;
    }
    w.flush().map_err(|e| OscError::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<CorpusDialogue>> {
    let f = std::fs::File::open(path).map_err(|e| OscError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| OscError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| OscError::Format(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}
