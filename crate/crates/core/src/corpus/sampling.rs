use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::LangPair;
use crate::error::{Error, Result};

/// `p_i ∝ (D_i / ΣD)^(1/T)`. `T = f64::INFINITY` gives the uniform limit.
pub fn temperature_probs(sizes: &[usize], temperature: f64) -> Result<Vec<f64>> {
    if sizes.is_empty() {
        return Err(Error::Data("no corpus sizes to sample from".into()));
    }
    if let Some(i) = sizes.iter().position(|&n| n == 0) {
        return Err(Error::Data(format!("corpus {i} has no training examples")));
    }
    if !(temperature >= 1.0) {
        return Err(Error::config("train.temperature", "must be at least 1"));
    }
    let total: f64 = sizes.iter().map(|&n| n as f64).sum();
    let weights: Vec<f64> = sizes
        .iter()
        .map(|&n| (n as f64 / total).powf(1.0 / temperature))
        .collect();
    let z: f64 = weights.iter().sum();
    Ok(weights.iter().map(|w| w / z).collect())
}

/// Seeded per-batch language-pair selection.
#[derive(Debug, Clone)]
pub struct PairSampler {
    pairs: Vec<LangPair>,
    probs: Vec<f64>,
    dist: WeightedIndex<f64>,
    rng: ChaCha8Rng,
}

impl PairSampler {
    pub fn new(pairs: Vec<(LangPair, usize)>, temperature: f64, seed: u64) -> Result<Self> {
        let sizes: Vec<usize> = pairs.iter().map(|(_, n)| *n).collect();
        let probs = temperature_probs(&sizes, temperature)?;
        let dist = WeightedIndex::new(&probs)
            .map_err(|e| Error::Data(format!("invalid sampling weights: {e}")))?;
        Ok(Self {
            pairs: pairs.into_iter().map(|(p, _)| p).collect(),
            probs,
            dist,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn probs(&self) -> impl Iterator<Item = (&LangPair, f64)> {
        self.pairs.iter().zip(self.probs.iter().copied())
    }

    pub fn next_index(&mut self) -> usize {
        self.dist.sample(&mut self.rng)
    }

    pub fn pair(&self, index: usize) -> &LangPair {
        &self.pairs[index]
    }
}
