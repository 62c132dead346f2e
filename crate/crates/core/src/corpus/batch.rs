use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::vocab::{EOS, PAD};
use super::{CorpusSet, Example, LangPair};
use crate::error::{Error, Result};

/// Padded single-pair batch in row-major `[size, len]` layout.
///
/// Encoder input is `[src-lang, tgt-lang, words...]`; the decoder reads
/// `[tgt-lang, words...]` and predicts `[words..., EOS]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub pair: LangPair,
    pub size: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub src: Vec<u32>,
    pub src_lens: Vec<usize>,
    pub dec_in: Vec<u32>,
    pub dec_out: Vec<u32>,
    pub tgt_lens: Vec<usize>,
}

impl Batch {
    pub fn new(pair: &LangPair, examples: &[&Example], src_tok: u32, tgt_tok: u32) -> Self {
        let size = examples.len();
        let src_lens: Vec<usize> = examples.iter().map(|e| e.src.len() + 2).collect();
        let tgt_lens: Vec<usize> = examples.iter().map(|e| e.tgt.len() + 1).collect();
        let src_len = src_lens.iter().copied().max().unwrap_or(0);
        let tgt_len = tgt_lens.iter().copied().max().unwrap_or(0);
        let mut src = vec![PAD; size * src_len];
        let mut dec_in = vec![PAD; size * tgt_len];
        let mut dec_out = vec![PAD; size * tgt_len];
        for (b, e) in examples.iter().enumerate() {
            let s = &mut src[b * src_len..];
            s[0] = src_tok;
            s[1] = tgt_tok;
            s[2..2 + e.src.len()].copy_from_slice(&e.src);
            let di = &mut dec_in[b * tgt_len..];
            di[0] = tgt_tok;
            di[1..1 + e.tgt.len()].copy_from_slice(&e.tgt);
            let d = &mut dec_out[b * tgt_len..];
            d[..e.tgt.len()].copy_from_slice(&e.tgt);
            d[e.tgt.len()] = EOS;
        }
        Self {
            pair: pair.clone(),
            size,
            src_len,
            tgt_len,
            src,
            src_lens,
            dec_in,
            dec_out,
            tgt_lens,
        }
    }

    pub fn target_tokens(&self) -> usize {
        self.tgt_lens.iter().sum()
    }
}

/// Epoch-wise seeded shuffle over one pair's train split.
#[derive(Debug, Clone)]
pub struct BatchStream<'c> {
    pair: LangPair,
    examples: &'c [Example],
    src_tok: u32,
    tgt_tok: u32,
    batch_size: usize,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    rng: ChaCha8Rng,
}

impl<'c> BatchStream<'c> {
    pub fn new(corpus: &'c CorpusSet, pair: &LangPair, batch_size: usize, seed: u64) -> Result<Self> {
        let data = corpus.pair(pair)?;
        Self::over(corpus, pair, &data.train, batch_size, seed)
    }

    /// Stream over an arbitrary example slice of `pair`.
    pub fn over(
        corpus: &CorpusSet,
        pair: &LangPair,
        examples: &'c [Example],
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if examples.is_empty() {
            return Err(Error::Data(format!("{pair} has no examples to batch")));
        }
        let src_tok = corpus.registry.language(&pair.src)?.token;
        let tgt_tok = corpus.registry.language(&pair.tgt)?.token;
        let mut s = Self {
            pair: pair.clone(),
            examples,
            src_tok,
            tgt_tok,
            batch_size,
            order: (0..examples.len()).collect(),
            cursor: 0,
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.order.shuffle(&mut s.rng);
        Ok(s)
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Next batch; the last batch of an epoch may be short.
    pub fn next_batch(&mut self) -> Batch {
        if self.cursor >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
            self.epoch += 1;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let picked: Vec<&Example> =
            self.order[self.cursor..end].iter().map(|&i| &self.examples[i]).collect();
        self.cursor = end;
        Batch::new(&self.pair, &picked, self.src_tok, self.tgt_tok)
    }

    /// Batches of one pass in fixed order without shuffling.
    pub fn sequential(
        corpus: &CorpusSet,
        pair: &LangPair,
        examples: &[Example],
        batch_size: usize,
    ) -> Result<Vec<Batch>> {
        let src_tok = corpus.registry.language(&pair.src)?.token;
        let tgt_tok = corpus.registry.language(&pair.tgt)?.token;
        Ok(examples
            .chunks(batch_size.max(1))
            .map(|c| Batch::new(pair, &c.iter().collect::<Vec<_>>(), src_tok, tgt_tok))
            .collect())
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Batch;
    fn next(&mut self) -> Option<Batch> {
        Some(self.next_batch())
    }
}
