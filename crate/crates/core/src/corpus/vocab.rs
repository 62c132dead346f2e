use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const EOS: u32 = 1;
pub const UNK: u32 = 2;
pub const SPECIALS: [&str; 3] = ["<pad>", "<eos>", "<unk>"];
pub const NUM_SPECIALS: usize = SPECIALS.len();

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub lang_id: String,
    /// Id of the `<2xx>` language token.
    pub token: u32,
    pub family: Option<String>,
    /// Token ids this language can emit, ascending.
    pub alphabet: Vec<u32>,
    /// `cipher[w]` is this language's token for pivot word `w`.
    pub cipher: Vec<u32>,
    pub relatedness_seed: u64,
}

impl LanguageSpec {
    pub fn encode(&self, pivot_words: &[usize]) -> Vec<u32> {
        pivot_words.iter().map(|&w| self.cipher[w]).collect()
    }
}

/// Shared vocabulary plus every language's alphabet and cipher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageRegistry {
    pub pivot: String,
    pub tokens: Vec<String>,
    pub languages: Vec<LanguageSpec>,
    #[serde(skip)]
    lookup: HashMap<String, u32>,
    #[serde(skip)]
    owners: Vec<Vec<u16>>,
    #[serde(skip)]
    inverse: Vec<HashMap<u32, usize>>,
}

impl LanguageRegistry {
    pub fn new(pivot: String, tokens: Vec<String>, languages: Vec<LanguageSpec>) -> Result<Self> {
        let mut reg = Self {
            pivot,
            tokens,
            languages,
            lookup: HashMap::new(),
            owners: Vec::new(),
            inverse: Vec::new(),
        };
        reg.rebuild()?;
        Ok(reg)
    }

    fn rebuild(&mut self) -> Result<()> {
        if self.tokens.len() < NUM_SPECIALS || self.tokens[..NUM_SPECIALS] != SPECIALS {
            return Err(Error::Data("vocabulary must start with the special tokens".into()));
        }
        self.lookup.clear();
        for (i, t) in self.tokens.iter().enumerate() {
            if self.lookup.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("token `{t}` appears twice in the vocabulary")));
            }
        }
        self.owners = vec![Vec::new(); self.tokens.len()];
        self.inverse.clear();
        for (li, lang) in self.languages.iter().enumerate() {
            for &t in lang.alphabet.iter().chain(std::iter::once(&lang.token)) {
                if t as usize >= self.tokens.len() {
                    return Err(Error::Data(format!(
                        "language `{}` refers to token id {t} outside the vocabulary",
                        lang.lang_id
                    )));
                }
            }
            for &t in &lang.alphabet {
                self.owners[t as usize].push(li as u16);
            }
            let inv: HashMap<u32, usize> =
                lang.cipher.iter().enumerate().map(|(w, &t)| (t, w)).collect();
            if inv.len() != lang.cipher.len() {
                return Err(Error::Data(format!("cipher of `{}` is not injective", lang.lang_id)));
            }
            self.inverse.push(inv);
        }
        if !self.languages.iter().any(|l| l.lang_id == self.pivot) {
            return Err(Error::Data(format!("pivot language `{}` is not registered", self.pivot)));
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn pivot_words(&self) -> usize {
        self.languages.first().map_or(0, |l| l.cipher.len())
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.lookup.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map_or("<unk>", String::as_str)
    }

    pub fn language(&self, lang_id: &str) -> Result<&LanguageSpec> {
        self.languages
            .iter()
            .find(|l| l.lang_id == lang_id)
            .ok_or_else(|| Error::Lookup {
                kind: "language",
                name: lang_id.to_string(),
            })
    }

    pub fn language_index(&self, lang_id: &str) -> Option<usize> {
        self.languages.iter().position(|l| l.lang_id == lang_id)
    }

    /// Indices of the languages whose alphabet contains `id`.
    pub fn owners(&self, id: u32) -> &[u16] {
        self.owners.get(id as usize).map_or(&[], Vec::as_slice)
    }

    pub fn is_special_or_language_token(&self, id: u32) -> bool {
        (id as usize) < NUM_SPECIALS || self.languages.iter().any(|l| l.token == id)
    }

    /// Pivot-word indices of a sentence in `lang_id`; `None` if some token is
    /// not in that language's cipher image.
    pub fn decipher(&self, lang_id: &str, ids: &[u32]) -> Option<Vec<usize>> {
        let li = self.language_index(lang_id)?;
        ids.iter().map(|t| self.inverse[li].get(t).copied()).collect()
    }

    pub fn to_words(&self, ids: &[u32]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }

    /// Whitespace-separated tokens to ids; unknown words map to `<unk>`.
    pub fn to_ids(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect()
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("cannot serialize registry: {e}")))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut reg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        reg.rebuild()?;
        Ok(reg)
    }
}
