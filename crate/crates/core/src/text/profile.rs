//! Rule-based candidate cognitive-dimension channels.

use std::collections::HashSet;
use std::path::Path;

use super::history::Utterance;
use super::tokenize::is_word;
use crate::error::{OscError, Result};

/// Number of channels in [`CandidateDimensionProfile::to_vec`].
pub const PROFILE_DIM: usize = 11;

/// One term per line; blank lines and surrounding whitespace ignored.
#[derive(Clone, Debug, Default)]
pub struct Lexicon {
    terms: HashSet<String>,
}

impl Lexicon {
    pub fn parse(text: &str) -> Self {
        Lexicon {
            terms: text
                .lines()
                .map(|l| l.trim().to_lowercase())
                .filter(|l| !l.is_empty())
                .collect(),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| OscError::io(path, e))?;
        Ok(Self::parse(&text))
    }

    pub fn contains(&self, term: &str) -> bool {
        self.terms.contains(term)
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Lexicons {
    pub hedges: Lexicon,
    pub positive: Lexicon,
    pub negative: Lexicon,
    pub claim: Lexicon,
    pub evidence: Lexicon,
}

impl Lexicons {
    /// The word lists shipped in `data/`.
    pub fn builtin() -> &'static Lexicons {
        static LEX: std::sync::OnceLock<Lexicons> = std::sync::OnceLock::new();
        LEX.get_or_init(|| Lexicons {
            hedges: Lexicon::parse(include_str!("../../data/hedges.txt")),
            positive: Lexicon::parse(include_str!("../../data/positive.txt")),
            negative: Lexicon::parse(include_str!("../../data/negative.txt")),
            claim: Lexicon::parse(include_str!("../../data/claim.txt")),
            evidence: Lexicon::parse(include_str!("../../data/evidence.txt")),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateDimensionProfile {
    pub sentiment: f64,
    pub certainty: f64,
    pub interrogative: f64,
    pub acts: [f64; 6],
    pub claim: f64,
    pub evidence: f64,
}

/// Which channel groups survive masking.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ProfileMask {
    #[default]
    Full,
    /// Sentiment, certainty, interrogative force and dialogue acts.
    LinguisticOnly,
    /// Claim and evidence markers.
    ReasoningOnly,
}

impl CandidateDimensionProfile {
    /// Channels in fixed order: sentiment, certainty, interrogative, six
    /// act slots, claim, evidence.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![self.sentiment, self.certainty, self.interrogative];
        v.extend_from_slice(&self.acts);
        v.push(self.claim);
        v.push(self.evidence);
        v
    }

    pub fn masked(&self, mask: ProfileMask) -> Vec<f64> {
        let mut v = self.to_vec();
        match mask {
            ProfileMask::Full => {}
            ProfileMask::LinguisticOnly => {
                v[9] = 0.0;
                v[10] = 0.0;
            }
            ProfileMask::ReasoningOnly => v[..9].iter_mut().for_each(|x| *x = 0.0),
        }
        v
    }
}

pub fn profile_dimensions(u: &Utterance) -> CandidateDimensionProfile {
    profile_with(u, Lexicons::builtin())
}

pub fn profile_with(u: &Utterance, lex: &Lexicons) -> CandidateDimensionProfile {
    let words: Vec<&str> = u
        .tokens
        .iter()
        .map(String::as_str)
        .filter(|t| is_word(t))
        .collect();
    let count = |l: &Lexicon| words.iter().filter(|w| l.contains(w)).count();
    let n = words.len();
    let hedges = count(&lex.hedges);
    let pos = count(&lex.positive);
    let neg = count(&lex.negative);
    let certainty = if n == 0 {
        1.0
    } else {
        1.0 - hedges as f64 / n as f64
    };
    let sentiment = if pos + neg == 0 {
        0.5
    } else {
        0.5 + 0.5 * (pos as f64 - neg as f64) / (pos + neg) as f64
    };
    let mut acts = [0.0; 6];
    if let Some(a) = u.act {
        acts[a.index()] = 1.0;
    }
    let has_digit = u
        .tokens
        .iter()
        .any(|t| t.chars().all(|c| c.is_ascii_digit()));
    CandidateDimensionProfile {
        sentiment,
        certainty,
        interrogative: if u.text.trim_end().ends_with('?') {
            1.0
        } else {
            0.0
        },
        acts,
        claim: if count(&lex.claim) > 0 { 1.0 } else { 0.0 },
        evidence: if count(&lex.evidence) > 0 || has_digit {
            1.0
        } else {
            0.0
        },
    }
}
