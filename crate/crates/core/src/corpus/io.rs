use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::generate::RelatednessMatrix;
use super::vocab::LanguageRegistry;
use super::{CorpusSet, Example, LangPair, PairData, PairRole, Split, TierThresholds};
use crate::error::{Error, Result};

/// Reads `source<TAB>target` lines; words missing from the vocabulary map
/// to `<unk>`.
pub fn load_bitext(path: impl AsRef<Path>, registry: &LanguageRegistry) -> Result<Vec<Example>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_bitext(&text, registry)
}

pub(crate) fn parse_bitext(text: &str, registry: &LanguageRegistry) -> Result<Vec<Example>> {
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let (src, tgt) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: i + 1,
                reason: "expected `source<TAB>target`".into(),
            })?;
            if tgt.contains('\t') {
                return Err(Error::Parse {
                    line: i + 1,
                    reason: "more than one tab".into(),
                });
            }
            Ok(Example {
                src: registry.to_ids(src),
                tgt: registry.to_ids(tgt),
            })
        })
        .collect()
}

pub fn write_bitext(
    path: impl AsRef<Path>,
    examples: &[Example],
    registry: &LanguageRegistry,
) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for e in examples {
        let _ = writeln!(out, "{}\t{}", registry.to_words(&e.src), registry.to_words(&e.tgt));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    tiers: TierThresholds,
    relatedness: RelatednessMatrix,
    pairs: Vec<(String, PairRole)>,
}

const REGISTRY_FILE: &str = "registry.json";
const MANIFEST_FILE: &str = "corpus.json";

impl CorpusSet {
    /// Writes the registry, a manifest and one TSV per pair and split.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.registry.save_json(dir.join(REGISTRY_FILE))?;
        for (pair, data) in &self.pairs {
            for split in Split::ALL {
                let ex = data.split(split);
                if !ex.is_empty() {
                    write_bitext(dir.join(format!("{pair}.{split}.tsv")), ex, &self.registry)?;
                }
            }
        }
        let manifest = Manifest {
            tiers: self.tiers,
            relatedness: self.relatedness.clone(),
            pairs: self.pairs.iter().map(|(p, d)| (p.to_string(), d.role)).collect(),
        };
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Data(format!("cannot serialize manifest: {e}")))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest_path = dir.join(MANIFEST_FILE);
        if !manifest_path.exists() {
            return Err(Error::Prerequisite {
                what: format!("corpus in {}", dir.display()),
                command: "gen-data",
            });
        }
        let registry = LanguageRegistry::load_json(dir.join(REGISTRY_FILE))?;
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", manifest_path.display())))?;
        let mut pairs = BTreeMap::new();
        for (name, role) in manifest.pairs {
            let pair: LangPair = name.parse()?;
            let load = |split: Split| -> Result<Vec<Example>> {
                let p = dir.join(format!("{pair}.{split}.tsv"));
                if p.exists() {
                    load_bitext(p, &registry)
                } else {
                    Ok(Vec::new())
                }
            };
            let data = PairData {
                role,
                train: load(Split::Train)?,
                valid: load(Split::Valid)?,
                test: load(Split::Test)?,
            };
            pairs.insert(pair, data);
        }
        Ok(Self {
            registry,
            pairs,
            tiers: manifest.tiers,
            relatedness: manifest.relatedness,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, GenerationSpec, UNK};

    fn corpus() -> CorpusSet {
        let spec = GenerationSpec {
            families: vec![vec!["a".into(), "b".into()]],
            sizes: [("a", 40), ("b", 10)].iter().map(|(l, n)| (l.to_string(), *n)).collect(),
            extension: vec!["b".into()],
            valid_size: 5,
            test_size: 5,
            zero_shot_test_size: 3,
            pivot_words: 30,
            ..GenerationSpec::default()
        };
        generate_corpus(&spec).unwrap()
    }

    #[test]
    fn three_lines_three_pairs() {
        let c = corpus();
        let ex = parse_bitext("en_1\taa_1\nen_2 en_3\tx\n\t\n", &c.registry).unwrap();
        assert_eq!(ex.len(), 3);
        assert_eq!(ex[1].tgt, vec![UNK]);
        assert!(ex[2].src.is_empty());
    }

    #[test]
    fn missing_tab_reports_line() {
        let c = corpus();
        match parse_bitext("abc", &c.registry) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
        match parse_bitext("a\tb\nab", &c.registry) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn directory_round_trip() {
        let c = corpus();
        let dir = tempfile::tempdir().unwrap();
        c.save_dir(dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("en-a.train.tsv")).unwrap();
        assert_eq!(text.lines().count(), 40);
        let back = CorpusSet::load_dir(dir.path()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn missing_corpus_is_a_prerequisite_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = CorpusSet::load_dir(dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }
}
