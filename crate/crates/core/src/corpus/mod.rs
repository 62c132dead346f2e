//! Synthetic multilingual bitext: languages are word-level substitution
//! ciphers of a shared pivot vocabulary, so every pair's translation task is
//! a deterministic, learnable mapping and the output language of a
//! hypothesis can be read off its tokens.

mod batch;
mod detect;
mod generate;
mod io;
mod sampling;
mod vocab;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use batch::{Batch, BatchStream};
pub use detect::detect_language;
pub use generate::{generate_corpus, GenerationSpec, RelatednessMatrix};
pub(crate) use generate::derive_seed;
pub use io::{load_bitext, write_bitext};
pub use sampling::{temperature_probs, PairSampler};
pub use vocab::{LanguageRegistry, LanguageSpec, EOS, NUM_SPECIALS, PAD, SPECIALS, UNK};

use crate::error::{Error, Result};

/// Ordered translation direction.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LangPair {
    pub src: String,
    pub tgt: String,
}

impl LangPair {
    pub fn new(src: &str, tgt: &str) -> Self {
        Self {
            src: src.to_string(),
            tgt: tgt.to_string(),
        }
    }

    pub fn reversed(&self) -> Self {
        Self::new(&self.tgt, &self.src)
    }

    pub fn involves(&self, lang: &str) -> bool {
        self.src == lang || self.tgt == lang
    }
}

impl fmt::Display for LangPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.src, self.tgt)
    }
}

impl FromStr for LangPair {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once('-') {
            Some((a, b)) if !a.is_empty() && !b.is_empty() && !b.contains('-') => {
                Ok(Self::new(a, b))
            }
            _ => Err(Error::Usage(format!("`{s}` is not a language pair like `en-de`"))),
        }
    }
}

/// One sentence pair as word-token ids, without language tokens or EOS.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Example {
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How a pair takes part in the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairRole {
    /// Pivot-centric, used for joint training and mask finding.
    Trained,
    /// Non-centric direction with a test split only.
    ZeroShot,
    /// Pivot-centric but withheld until the extension experiment.
    Extension,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Low,
    Medium,
    Rich,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Low, Tier::Medium, Tier::Rich];

    pub fn as_str(self) -> &'static str {
        match self {
            Tier::Low => "low",
            Tier::Medium => "medium",
            Tier::Rich => "rich",
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Size thresholds separating resource tiers: `size <= low_max` is low,
/// `size >= rich_min` is rich, anything between is medium.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierThresholds {
    pub low_max: usize,
    pub rich_min: usize,
}

impl Default for TierThresholds {
    fn default() -> Self {
        Self {
            low_max: 1000,
            rich_min: 10000,
        }
    }
}

impl TierThresholds {
    pub fn tier(&self, size: usize) -> Tier {
        if size <= self.low_max {
            Tier::Low
        } else if size >= self.rich_min {
            Tier::Rich
        } else {
            Tier::Medium
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairData {
    pub role: PairRole,
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

impl PairData {
    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

/// All generated (or loaded) bitext together with its language registry.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSet {
    pub registry: LanguageRegistry,
    pub pairs: BTreeMap<LangPair, PairData>,
    pub tiers: TierThresholds,
    pub relatedness: RelatednessMatrix,
}

impl CorpusSet {
    pub fn pair(&self, pair: &LangPair) -> Result<&PairData> {
        self.pairs.get(pair).ok_or_else(|| Error::Lookup {
            kind: "language pair",
            name: pair.to_string(),
        })
    }

    pub fn pairs_with_role(&self, role: PairRole) -> Vec<LangPair> {
        self.pairs
            .iter()
            .filter(|(_, d)| d.role == role)
            .map(|(p, _)| p.clone())
            .collect()
    }

    pub fn trained_pairs(&self) -> Vec<LangPair> {
        self.pairs_with_role(PairRole::Trained)
    }

    /// Train-split example count per pair.
    pub fn sizes(&self) -> BTreeMap<LangPair, usize> {
        self.pairs
            .iter()
            .map(|(p, d)| (p.clone(), d.train.len()))
            .collect()
    }

    pub fn tier_of(&self, pair: &LangPair) -> Result<Tier> {
        Ok(self.tiers.tier(self.pair(pair)?.train.len()))
    }

    /// Encoder input `[src-lang, tgt-lang, words...]` for a pair.
    pub fn source_ids(&self, pair: &LangPair, words: &[u32]) -> Result<Vec<u32>> {
        let mut out = Vec::with_capacity(words.len() + 2);
        out.push(self.registry.language(&pair.src)?.token);
        out.push(self.registry.language(&pair.tgt)?.token);
        out.extend_from_slice(words);
        Ok(out)
    }
}
