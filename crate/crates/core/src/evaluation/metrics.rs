use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;

use crate::corpus::{detect_language, LangPair, LanguageRegistry};
use crate::error::{Error, Result};

/// Substituted for a zero n-gram match count.
pub const BLEU_EPSILON: f64 = 1e-9;

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-4 with brevity penalty, on a 0-100 scale.
///
/// Clipped n-gram matches and hypothesis n-gram totals are summed over the
/// corpus; a zero match count is replaced by [`BLEU_EPSILON`]. Orders for
/// which the hypotheses hold no n-grams are skipped.
pub fn corpus_bleu<T: Eq + Hash>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::Structure(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(Error::Metric("BLEU of an empty corpus is undefined".into()));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    // Orders longer than every hypothesis have no n-grams at all and are
    // left out of the geometric mean.
    let orders: Vec<usize> = (0..4).filter(|&i| totals[i] > 0).collect();
    let log_p: f64 = orders
        .iter()
        .map(|&i| {
            let m = if matches[i] == 0 { BLEU_EPSILON } else { matches[i] as f64 };
            (m / totals[i] as f64).ln()
        })
        .sum::<f64>()
        / orders.len() as f64;
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok((100.0 * bp * log_p.exp()).clamp(0.0, 100.0))
}

/// Percentage of pairs where `system` strictly beats `baseline`.
pub fn win_ratio(
    system: &BTreeMap<LangPair, f64>,
    baseline: &BTreeMap<LangPair, f64>,
) -> Result<f64> {
    if system.len() != baseline.len() || system.keys().any(|p| !baseline.contains_key(p)) {
        return Err(Error::Structure(
            "win ratio needs scores for the same language pairs".into(),
        ));
    }
    if system.is_empty() {
        return Err(Error::Metric("win ratio over zero pairs is undefined".into()));
    }
    let wins = system.iter().filter(|(p, s)| **s > baseline[*p]).count();
    Ok(100.0 * wins as f64 / system.len() as f64)
}

/// Percentage of hypotheses detected as `target`.
pub fn translation_accuracy(
    hypotheses: &[Vec<u32>],
    target: &str,
    registry: &LanguageRegistry,
) -> Result<f64> {
    registry.language(target)?;
    if hypotheses.is_empty() {
        return Err(Error::Metric("accuracy over zero hypotheses is undefined".into()));
    }
    let hits = hypotheses
        .iter()
        .filter(|h| detect_language(h, registry) == Some(target))
        .count();
    Ok(100.0 * hits as f64 / hypotheses.len() as f64)
}
