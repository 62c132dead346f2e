use super::vocab::LanguageRegistry;

/// Language owning a strict majority of the non-special tokens, or `None`
/// ("unknown").
///
/// Each token votes for every language whose alphabet contains it, so
/// tokens shared inside a family count for all members. The leader must
/// hold more than half of the tokens and strictly beat the runner-up; a tie
/// at the top is broken by the number of tokens only that language owns
/// among the tied ones.
pub fn detect_language<'r>(ids: &[u32], registry: &'r LanguageRegistry) -> Option<&'r str> {
    let tokens: Vec<u32> = ids
        .iter()
        .copied()
        .filter(|&t| !registry.is_special_or_language_token(t))
        .collect();
    if tokens.is_empty() {
        return None;
    }
    let mut votes = vec![0usize; registry.languages.len()];
    for &t in &tokens {
        for &l in registry.owners(t) {
            votes[l as usize] += 1;
        }
    }
    let best = *votes.iter().max()?;
    if 2 * best <= tokens.len() {
        return None;
    }
    let tied: Vec<usize> = (0..votes.len()).filter(|&l| votes[l] == best).collect();
    if tied.len() == 1 {
        return Some(&registry.languages[tied[0]].lang_id);
    }
    let mut exclusive = vec![0usize; tied.len()];
    for &t in &tokens {
        let owners: Vec<usize> = registry
            .owners(t)
            .iter()
            .filter_map(|&o| tied.iter().position(|&l| l == o as usize))
            .collect();
        if let [only] = owners[..] {
            exclusive[only] += 1;
        }
    }
    let top = *exclusive.iter().max()?;
    let winners: Vec<usize> = (0..tied.len()).filter(|&i| exclusive[i] == top).collect();
    match winners[..] {
        [w] if top > 0 => Some(&registry.languages[tied[w]].lang_id),
        _ => None,
    }
}
