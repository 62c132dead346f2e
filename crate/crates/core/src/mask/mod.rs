//! Binary sub-network masks over the maskable parameters of a model.
//!
//! A mask covers every attention-projection and feed-forward weight matrix
//! (`*.{attn,self,cross}_{q,k,v,o}.weight`, `*.ffn_{1,2}.weight`).
//! Embeddings, biases and layer norms are shared by every pair and never
//! masked.

mod bitset;
mod format;

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub use bitset::Bitset;
pub use format::{MASK_MAGIC, MASK_VERSION};

use crate::corpus::LangPair;
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Scalar};

/// Whether a canonical parameter name belongs to the maskable set.
pub fn is_maskable(name: &str) -> bool {
    let Some(stem) = name.strip_suffix(".weight") else {
        return false;
    };
    let component = stem.rsplit('.').next().unwrap_or("");
    ["attn_", "self_", "cross_", "ffn_"]
        .iter()
        .any(|p| component.starts_with(p))
}

/// Hash of the sorted `(name, shape)` list of the maskable tensors; two
/// stores with equal fingerprints accept the same masks.
pub fn layout_fingerprint<T: Scalar>(store: &ParamStore<T>) -> u64 {
    let mut h = Sha256::new();
    for e in store.entries().iter().filter(|e| is_maskable(&e.name)) {
        h.update(e.name.as_bytes());
        h.update(b":");
        let dims: Vec<String> = e.shape.iter().map(|d| d.to_string()).collect();
        h.update(dims.join("x").as_bytes());
        h.update(b"\n");
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Pruned = 0,
    Random = 1,
    Merged = 2,
}

impl Provenance {
    fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Self::Pruned),
            1 => Some(Self::Random),
            2 => Some(Self::Merged),
            _ => None,
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Pruned => "pruned",
            Self::Random => "random",
            Self::Merged => "merged",
        })
    }
}

/// Ranking unit for magnitude pruning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PruneScope {
    #[default]
    PerTensor,
    Global,
}

impl std::str::FromStr for PruneScope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_tensor" => Ok(Self::PerTensor),
            "global" => Ok(Self::Global),
            other => Err(Error::config(
                "mask.scope",
                format!("expected per_tensor or global, got `{other}`"),
            )),
        }
    }
}

impl fmt::Display for PruneScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PerTensor => "per_tensor",
            Self::Global => "global",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterMask {
    tensors: BTreeMap<String, Bitset>,
    pub alpha: f32,
    pub provenance: Provenance,
    pub pair: LangPair,
    pub fingerprint: u64,
}

impl ParameterMask {
    /// Builds a mask from explicit bitsets. The caller vouches that
    /// `fingerprint` describes the layout the bitsets were made for.
    pub fn from_parts(
        tensors: BTreeMap<String, Bitset>,
        alpha: f32,
        provenance: Provenance,
        pair: LangPair,
        fingerprint: u64,
    ) -> Self {
        Self {
            tensors,
            alpha,
            provenance,
            pair,
            fingerprint,
        }
    }

    /// A mask with every bit set, i.e. the full network.
    pub fn all_ones<T: Scalar>(store: &ParamStore<T>, pair: LangPair) -> Self {
        let tensors = store
            .entries()
            .iter()
            .filter(|e| is_maskable(&e.name))
            .map(|e| (e.name.clone(), Bitset::ones(e.len())))
            .collect();
        Self::from_parts(tensors, 0.0, Provenance::Pruned, pair, layout_fingerprint(store))
    }

    pub fn tensors(&self) -> &BTreeMap<String, Bitset> {
        &self.tensors
    }

    pub fn bits(&self, name: &str) -> Result<&Bitset> {
        self.tensors.get(name).ok_or_else(|| {
            Error::Structure(format!("mask for {} has no tensor `{name}`", self.pair))
        })
    }

    pub fn count_ones(&self) -> usize {
        self.tensors.values().map(Bitset::count_ones).sum()
    }

    pub fn num_bits(&self) -> usize {
        self.tensors.values().map(Bitset::len).sum()
    }

    pub fn density(&self) -> f64 {
        self.count_ones() as f64 / self.num_bits().max(1) as f64
    }

    /// Checks that this mask covers exactly the maskable tensors of `store`.
    pub fn check_congruent<T: Scalar>(&self, store: &ParamStore<T>) -> Result<()> {
        let mut expected = store.entries().iter().filter(|e| is_maskable(&e.name));
        let mut actual = self.tensors.iter();
        loop {
            match (expected.next(), actual.next()) {
                (None, None) => break,
                (Some(e), Some((name, bits))) => {
                    if &e.name != name {
                        let offending = if e.name < *name { &e.name } else { name };
                        return Err(Error::Structure(format!(
                            "mask for {} and parameter store disagree on tensor `{offending}`",
                            self.pair
                        )));
                    }
                    if e.len() != bits.len() {
                        return Err(Error::Structure(format!(
                            "mask for {} has {} bits for `{name}`, tensor has {} values",
                            self.pair,
                            bits.len(),
                            e.len()
                        )));
                    }
                }
                (Some(e), None) => {
                    return Err(Error::Structure(format!(
                        "mask for {} lacks tensor `{}`",
                        self.pair, e.name
                    )))
                }
                (None, Some((name, _))) => {
                    return Err(Error::Structure(format!(
                        "mask for {} has tensor `{name}` unknown to the store",
                        self.pair
                    )))
                }
            }
        }
        if self.fingerprint != layout_fingerprint(store) {
            return Err(Error::Structure(format!(
                "mask for {} was made for a different model layout",
                self.pair
            )));
        }
        Ok(())
    }

    /// `θ ⊙ M`: a copy of `store` with masked-out maskable weights set to 0.
    pub fn apply<T: Scalar>(&self, store: &ParamStore<T>) -> Result<ParamStore<T>> {
        self.check_congruent(store)?;
        let mut out = store.clone();
        for e in out.entries_mut() {
            if let Some(bits) = self.tensors.get(&e.name) {
                for (j, v) in e.values.iter_mut().enumerate() {
                    if !bits.get(j) {
                        *v = T::zero();
                    }
                }
            }
        }
        Ok(out)
    }

    fn check_comparable(&self, other: &ParameterMask) -> Result<()> {
        if self.fingerprint != other.fingerprint {
            return Err(Error::Structure(format!(
                "masks {} and {} have different layout fingerprints",
                self.pair, other.pair
            )));
        }
        if self.tensors.len() != other.tensors.len()
            || self
                .tensors
                .iter()
                .zip(&other.tensors)
                .any(|((a, x), (b, y))| a != b || x.len() != y.len())
        {
            return Err(Error::Structure(format!(
                "masks {} and {} cover different tensors",
                self.pair, other.pair
            )));
        }
        Ok(())
    }
}

fn keep_count(alpha: f64, n: usize) -> usize {
    (((1.0 - alpha) * n as f64).round() as usize).min(n)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::config("mask.alpha", format!("pruning rate {alpha} outside [0, 1)")))
    }
}

/// Keeps the `round((1-α)·n)` largest-magnitude weights of each scope unit.
/// Ties are broken by flat index: the lower index is pruned first.
pub fn magnitude_prune<T: Scalar>(
    store: &ParamStore<T>,
    alpha: f64,
    scope: PruneScope,
    pair: LangPair,
) -> Result<ParameterMask> {
    check_alpha(alpha)?;
    let maskable: Vec<_> = store
        .entries()
        .iter()
        .filter(|e| is_maskable(&e.name))
        .collect();
    let mut tensors = BTreeMap::new();
    match scope {
        PruneScope::PerTensor => {
            for e in &maskable {
                let keep = keep_count(alpha, e.len());
                let mut order: Vec<usize> = (0..e.len()).collect();
                order.sort_by(|&a, &b| {
                    let (x, y) = (e.values[a].as_f64().abs(), e.values[b].as_f64().abs());
                    x.total_cmp(&y).then(a.cmp(&b))
                });
                let mut bits = Bitset::zeros(e.len());
                for &i in &order[e.len() - keep..] {
                    bits.set(i, true);
                }
                tensors.insert(e.name.clone(), bits);
            }
        }
        PruneScope::Global => {
            // (tensor, index) in flat order, which is also store order
            let mut all: Vec<(f64, usize, usize)> = Vec::new();
            for (t, e) in maskable.iter().enumerate() {
                all.extend(e.values.iter().enumerate().map(|(j, v)| (v.as_f64().abs(), t, j)));
            }
            let keep = keep_count(alpha, all.len());
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
            let mut bits: Vec<Bitset> = maskable.iter().map(|e| Bitset::zeros(e.len())).collect();
            for &(_, t, j) in &all[all.len() - keep..] {
                bits[t].set(j, true);
            }
            for (e, b) in maskable.iter().zip(bits) {
                tensors.insert(e.name.clone(), b);
            }
        }
    }
    Ok(ParameterMask::from_parts(
        tensors,
        alpha as f32,
        Provenance::Pruned,
        pair,
        layout_fingerprint(store),
    ))
}

/// Random control: per tensor, exactly `round((1-α)·n)` ones placed by a
/// seeded draw without replacement.
pub fn random_mask<T: Scalar>(
    store: &ParamStore<T>,
    alpha: f64,
    seed: u64,
    pair: LangPair,
) -> Result<ParameterMask> {
    check_alpha(alpha)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = BTreeMap::new();
    for e in store.entries().iter().filter(|e| is_maskable(&e.name)) {
        let keep = keep_count(alpha, e.len());
        let mut bits = Bitset::zeros(e.len());
        for i in sample(&mut rng, e.len(), keep) {
            bits.set(i, true);
        }
        tensors.insert(e.name.clone(), bits);
    }
    Ok(ParameterMask::from_parts(
        tensors,
        alpha as f32,
        Provenance::Random,
        pair,
        layout_fingerprint(store),
    ))
}

/// Shared-ones count and `m1`'s ones count over the tensors accepted by
/// `filter`.
fn overlap(m1: &ParameterMask, m2: &ParameterMask, filter: impl Fn(&str) -> bool) -> Result<(usize, usize)> {
    m1.check_comparable(m2)?;
    let mut shared = 0;
    let mut ones = 0;
    for (name, a) in &m1.tensors {
        if filter(name) {
            shared += a.and_count(&m2.tensors[name]);
            ones += a.count_ones();
        }
    }
    Ok((shared, ones))
}

/// `‖M1 ∩ M2‖₀ / ‖M1‖₀` — asymmetric; normalized by the first mask.
pub fn similarity(m1: &ParameterMask, m2: &ParameterMask) -> Result<f64> {
    similarity_on(m1, m2, |_| true)
}

/// [`similarity`] restricted to the tensors accepted by `filter`.
pub fn similarity_on(
    m1: &ParameterMask,
    m2: &ParameterMask,
    filter: impl Fn(&str) -> bool,
) -> Result<f64> {
    let (shared, ones) = overlap(m1, m2, filter)?;
    if ones == 0 {
        return Err(Error::Metric(format!(
            "similarity undefined: mask {} has no ones in the compared tensors",
            m1.pair
        )));
    }
    Ok(shared as f64 / ones as f64)
}

/// Intersection size `‖M1 ∩ M2‖₀`.
pub fn intersection_count(m1: &ParameterMask, m2: &ParameterMask) -> Result<usize> {
    Ok(overlap(m1, m2, |_| true)?.0)
}

/// Encoder bits from `enc_donor`, decoder bits from `dec_donor`.
pub fn compose(
    enc_donor: &ParameterMask,
    dec_donor: &ParameterMask,
    pair: LangPair,
) -> Result<ParameterMask> {
    enc_donor.check_comparable(dec_donor)?;
    let tensors = enc_donor
        .tensors
        .iter()
        .map(|(name, bits)| {
            let src = if name.starts_with("dec.") {
                &dec_donor.tensors[name]
            } else {
                bits
            };
            (name.clone(), src.clone())
        })
        .collect();
    Ok(ParameterMask::from_parts(
        tensors,
        enc_donor.alpha,
        Provenance::Merged,
        pair,
        enc_donor.fingerprint,
    ))
}

/// Zero-shot mask for X→Y from the encoder of X→pivot and the decoder of
/// pivot→Y.
pub fn merge_zero_shot(
    x_to_pivot: &ParameterMask,
    pivot_to_y: &ParameterMask,
) -> Result<ParameterMask> {
    if x_to_pivot.pair.tgt != pivot_to_y.pair.src {
        return Err(Error::Usage(format!(
            "cannot merge {} with {}: pivot languages differ",
            x_to_pivot.pair, pivot_to_y.pair
        )));
    }
    compose(
        x_to_pivot,
        pivot_to_y,
        LangPair::new(&x_to_pivot.pair.src, &pivot_to_y.pair.tgt),
    )
}

/// Masks keyed by pair, all for one model layout.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MaskSet {
    masks: BTreeMap<LangPair, ParameterMask>,
    fingerprint: Option<u64>,
}

impl MaskSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_masks(masks: impl IntoIterator<Item = ParameterMask>) -> Result<Self> {
        let mut set = Self::new();
        for m in masks {
            set.insert(m)?;
        }
        Ok(set)
    }

    pub fn insert(&mut self, mask: ParameterMask) -> Result<()> {
        if let Some(fp) = self.fingerprint {
            if fp != mask.fingerprint {
                return Err(Error::Structure(format!(
                    "mask for {} has a different layout fingerprint than the set",
                    mask.pair
                )));
            }
        }
        if self.masks.contains_key(&mask.pair) {
            return Err(Error::Structure(format!("duplicate mask for {}", mask.pair)));
        }
        self.fingerprint = Some(mask.fingerprint);
        self.masks.insert(mask.pair.clone(), mask);
        Ok(())
    }

    pub fn get(&self, pair: &LangPair) -> Result<&ParameterMask> {
        self.masks.get(pair).ok_or_else(|| Error::Lookup {
            kind: "mask for pair",
            name: pair.to_string(),
        })
    }

    pub fn contains(&self, pair: &LangPair) -> bool {
        self.masks.contains_key(pair)
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn fingerprint(&self) -> Option<u64> {
        self.fingerprint
    }

    pub fn iter(&self) -> impl Iterator<Item = (&LangPair, &ParameterMask)> {
        self.masks.iter()
    }

    pub fn pairs(&self) -> impl Iterator<Item = &LangPair> {
        self.masks.keys()
    }

    /// Per-tensor union of all masks.
    pub fn union(&self) -> Option<BTreeMap<String, Bitset>> {
        let mut it = self.masks.values();
        let mut acc = it.next()?.tensors.clone();
        for m in it {
            for (name, bits) in acc.iter_mut() {
                *bits = bits.or(&m.tensors[name]);
            }
        }
        Some(acc)
    }
}

#[cfg(test)]
mod tests;
