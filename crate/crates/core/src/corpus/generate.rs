use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::vocab::{LanguageRegistry, LanguageSpec, SPECIALS};
use super::{CorpusSet, Example, LangPair, PairData, PairRole, TierThresholds};
use crate::error::{Error, Result};

/// Everything needed to generate a corpus. Languages are grouped into
/// families; two languages of the same family share `within_family` of their
/// cipher mappings, languages of different families share `across_family`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSpec {
    pub pivot: String,
    pub families: Vec<Vec<String>>,
    pub within_family: f64,
    pub across_family: f64,
    /// Train examples per language, used for both pivot directions.
    pub sizes: BTreeMap<String, usize>,
    pub valid_size: usize,
    pub test_size: usize,
    pub zero_shot_test_size: usize,
    /// Languages whose pivot pairs are withheld for the extension experiment.
    pub extension: Vec<String>,
    pub pivot_words: usize,
    pub zipf_exponent: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub tiers: TierThresholds,
    pub seed: u64,
}

impl Default for GenerationSpec {
    fn default() -> Self {
        let fam = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let sizes = [
            ("aa", 20000),
            ("ab", 5000),
            ("ac", 1000),
            ("ad", 1000),
            ("ba", 20000),
            ("bb", 5000),
            ("bc", 1000),
        ];
        Self {
            pivot: "en".into(),
            families: vec![fam(&["aa", "ab", "ac", "ad"]), fam(&["ba", "bb", "bc"])],
            within_family: 0.6,
            across_family: 0.0,
            sizes: sizes.iter().map(|(l, n)| (l.to_string(), *n)).collect(),
            valid_size: 200,
            test_size: 200,
            zero_shot_test_size: 100,
            extension: vec!["ad".into()],
            pivot_words: 200,
            zipf_exponent: 1.0,
            min_len: 4,
            max_len: 10,
            tiers: TierThresholds::default(),
            seed: 1,
        }
    }
}

impl GenerationSpec {
    pub fn languages(&self) -> Vec<String> {
        self.families.iter().flatten().cloned().collect()
    }

    pub fn validate(&self) -> Result<()> {
        let gen = |msg: String| Err(Error::Generation(msg));
        let langs = self.languages();
        if langs.is_empty() {
            return gen("at least one non-pivot language is required".into());
        }
        let mut seen = HashSet::new();
        for l in langs.iter().chain(std::iter::once(&self.pivot)) {
            if l.is_empty() || l.contains(['-', '<', '>', '_']) || l.contains(char::is_whitespace) {
                return Err(Error::config("data.languages", format!("`{l}` is not a valid language id")));
            }
            if !seen.insert(l.clone()) {
                return Err(Error::config("data.languages", format!("language `{l}` is listed twice")));
            }
        }
        for l in &langs {
            match self.sizes.get(l) {
                Some(0) | None => {
                    return Err(Error::config("data.sizes", format!("no positive size for `{l}`")))
                }
                _ => {}
            }
        }
        for l in &self.extension {
            if !langs.contains(l) {
                return Err(Error::config("data.extension", format!("`{l}` is not a listed language")));
            }
        }
        for (name, r) in [("within", self.within_family), ("across", self.across_family)] {
            if !(0.0..=1.0).contains(&r) {
                return gen(format!("{name}-family relatedness {r} is outside [0, 1]"));
            }
        }
        if self.across_family > self.within_family {
            return gen(format!(
                "across-family relatedness {} cannot exceed within-family relatedness {}: \
                 mappings shared by all languages are shared inside each family too",
                self.across_family, self.within_family
            ));
        }
        if self.pivot_words < 2 {
            return Err(Error::config("data.pivot_words", "must be at least 2"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config("data.min_len", "need 1 <= min_len <= max_len"));
        }
        if self.test_size == 0 {
            return Err(Error::config("data.test_size", "must be positive"));
        }
        if !(self.zipf_exponent >= 0.0) {
            return Err(Error::config("data.zipf_exponent", "must be non-negative"));
        }
        if self.tiers.low_max >= self.tiers.rich_min {
            return Err(Error::config("data.low_max", "must be below data.rich_min"));
        }
        Ok(())
    }

    /// Distinct sentences available; generation fails if a pair needs more.
    fn sentence_space(&self) -> f64 {
        (self.min_len..=self.max_len)
            .map(|l| (self.pivot_words as f64).powi(l as i32))
            .sum()
    }
}

/// Fraction of pivot words that two languages map to the same token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelatednessMatrix {
    pub languages: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl RelatednessMatrix {
    pub fn measure(registry: &LanguageRegistry, languages: &[String]) -> Result<Self> {
        let specs: Vec<&LanguageSpec> =
            languages.iter().map(|l| registry.language(l)).collect::<Result<_>>()?;
        let values = specs
            .iter()
            .map(|a| {
                specs
                    .iter()
                    .map(|b| {
                        let shared = a.cipher.iter().zip(&b.cipher).filter(|(x, y)| x == y).count();
                        shared as f64 / a.cipher.len() as f64
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            languages: languages.to_vec(),
            values,
        })
    }

    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.languages.iter().position(|l| l == a)?;
        let j = self.languages.iter().position(|l| l == b)?;
        Some(self.values[i][j])
    }
}

pub(crate) fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

fn build_registry(spec: &GenerationSpec) -> Result<LanguageRegistry> {
    let w = spec.pivot_words;
    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    let push = |tokens: &mut Vec<String>, t: String| {
        tokens.push(t);
        (tokens.len() - 1) as u32
    };

    let pivot_tok = push(&mut tokens, format!("<2{}>", spec.pivot));
    let langs = spec.languages();
    let lang_toks: Vec<u32> = langs.iter().map(|l| push(&mut tokens, format!("<2{l}>"))).collect();

    let pivot_cipher: Vec<u32> =
        (0..w).map(|i| push(&mut tokens, format!("{}_{i}", spec.pivot))).collect();

    // Mappings shared by every language, then per-family shared mappings
    // that contain the global ones.
    let n_across = (spec.across_family * w as f64).round() as usize;
    let n_within = (spec.within_family * w as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "cores"));
    let mut words: Vec<usize> = (0..w).collect();
    words.shuffle(&mut rng);
    let global: Vec<usize> = words[..n_across].to_vec();
    let mut shared_tok: BTreeMap<usize, u32> = BTreeMap::new();
    for &i in &global {
        shared_tok.insert(i, push(&mut tokens, format!("g_{i}")));
    }

    let mut languages = vec![LanguageSpec {
        lang_id: spec.pivot.clone(),
        token: pivot_tok,
        family: None,
        alphabet: pivot_cipher.clone(),
        cipher: pivot_cipher,
        relatedness_seed: derive_seed(spec.seed, &spec.pivot),
    }];

    let mut li = 0;
    for (fi, family) in spec.families.iter().enumerate() {
        let fam_name = format!("f{fi}");
        let rest: Vec<usize> = words[n_across..].to_vec();
        let mut frng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &fam_name));
        let extra: Vec<usize> = if family.len() > 1 {
            rest.choose_multiple(&mut frng, n_within - n_across).copied().collect()
        } else {
            Vec::new()
        };
        let mut core = shared_tok.clone();
        for &i in &extra {
            core.insert(i, push(&mut tokens, format!("{fam_name}_{i}")));
        }
        for lang in family {
            let cipher: Vec<u32> = (0..w)
                .map(|i| match core.get(&i) {
                    Some(&t) => t,
                    None => push(&mut tokens, format!("{lang}_{i}")),
                })
                .collect();
            let mut alphabet = cipher.clone();
            alphabet.sort_unstable();
            languages.push(LanguageSpec {
                lang_id: lang.clone(),
                token: lang_toks[li],
                family: Some(fam_name.clone()),
                alphabet,
                cipher,
                relatedness_seed: derive_seed(spec.seed, lang),
            });
            li += 1;
        }
    }
    LanguageRegistry::new(spec.pivot.clone(), tokens, languages)
}

/// Zipf sampler over pivot word ranks.
struct Zipf {
    cdf: Vec<f64>,
}

impl Zipf {
    fn new(n: usize, s: f64) -> Self {
        let mut acc = 0.0;
        let mut cdf: Vec<f64> = (0..n)
            .map(|k| {
                acc += 1.0 / ((k + 1) as f64).powf(s);
                acc
            })
            .collect();
        for c in &mut cdf {
            *c /= acc;
        }
        Self { cdf }
    }

    fn sample(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.gen();
        self.cdf.partition_point(|&c| c < u).min(self.cdf.len() - 1)
    }
}

fn sample_sentences(
    spec: &GenerationSpec,
    zipf: &Zipf,
    count: usize,
    rng: &mut ChaCha8Rng,
    pair: &LangPair,
) -> Result<Vec<Vec<usize>>> {
    if count as f64 > spec.sentence_space() * 0.5 {
        return Err(Error::Generation(format!(
            "{pair} needs {count} distinct sentences, too many for {} pivot words of length {}..={}",
            spec.pivot_words, spec.min_len, spec.max_len
        )));
    }
    let mut seen = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while out.len() < count {
        attempts += 1;
        if attempts > 100 * count + 1000 {
            return Err(Error::Generation(format!(
                "could not draw {count} distinct sentences for {pair}; \
                 lower zipf_exponent or raise pivot_words"
            )));
        }
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let s: Vec<usize> = (0..len).map(|_| zipf.sample(rng)).collect();
        if seen.insert(s.clone()) {
            out.push(s);
        }
    }
    Ok(out)
}

/// Builds the registry and every pair's splits. Pivot-centric pairs get
/// train/valid/test; every ordered pair of non-pivot, non-extension
/// languages gets a zero-shot test split.
pub fn generate_corpus(spec: &GenerationSpec) -> Result<CorpusSet> {
    spec.validate()?;
    let registry = build_registry(spec)?;
    let zipf = Zipf::new(spec.pivot_words, spec.zipf_exponent);

    let mut jobs: Vec<(LangPair, PairRole, usize, usize, usize)> = Vec::new();
    let langs = spec.languages();
    for l in &langs {
        let role = if spec.extension.contains(l) {
            PairRole::Extension
        } else {
            PairRole::Trained
        };
        let n = spec.sizes[l];
        for pair in [LangPair::new(&spec.pivot, l), LangPair::new(l, &spec.pivot)] {
            jobs.push((pair, role, n, spec.valid_size, spec.test_size));
        }
    }
    if spec.zero_shot_test_size > 0 {
        let base: Vec<&String> = langs.iter().filter(|l| !spec.extension.contains(l)).collect();
        for a in &base {
            for b in &base {
                if a != b {
                    jobs.push((LangPair::new(a, b), PairRole::ZeroShot, 0, 0, spec.zero_shot_test_size));
                }
            }
        }
    }

    let build = |(pair, role, n_train, n_valid, n_test): &(LangPair, PairRole, usize, usize, usize)|
     -> Result<(LangPair, PairData)> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &pair.to_string()));
        let sents = sample_sentences(spec, &zipf, n_train + n_valid + n_test, &mut rng, pair)?;
        let src = registry.language(&pair.src)?;
        let tgt = registry.language(&pair.tgt)?;
        let mut ex = sents.iter().map(|s| Example {
            src: src.encode(s),
            tgt: tgt.encode(s),
        });
        let train = ex.by_ref().take(*n_train).collect();
        let valid = ex.by_ref().take(*n_valid).collect();
        let test = ex.collect();
        Ok((pair.clone(), PairData { role: *role, train, valid, test }))
    };

    // Per-pair seeds are independent, so pairs are generated concurrently.
    let results: Vec<Result<(LangPair, PairData)>> = std::thread::scope(|scope| {
        let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len());
        if workers <= 1 {
            return jobs.iter().map(build).collect();
        }
        let chunk = jobs.len().div_ceil(workers);
        let handles: Vec<_> = jobs
            .chunks(chunk)
            .map(|c| scope.spawn(move || c.iter().map(build).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("generation worker panicked")).collect()
    });
    let pairs = results.into_iter().collect::<Result<BTreeMap<_, _>>>()?;

    let mut all = vec![spec.pivot.clone()];
    all.extend(langs);
    let relatedness = RelatednessMatrix::measure(&registry, &all)?;
    Ok(CorpusSet {
        registry,
        pairs,
        tiers: spec.tiers,
        relatedness,
    })
}
