use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, TransformerModel};
use crate::corpus::{Batch, PAD};
use crate::error::{Error, Result};
use crate::tensor::{gemm, AttnSpec, MatRef, ParamStore, Scalar, Tape, Var};

/// Encoder output for a batch of source sequences, `[batch * src_len, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Memory<T> {
    pub values: Vec<T>,
    pub batch: usize,
    pub src_len: usize,
    pub src_lens: Vec<usize>,
}

impl<T: Scalar> Memory<T> {
    /// Memory whose row `i` is row `rows[i]` of `self` (beam expansion).
    pub fn select(&self, rows: &[usize]) -> Memory<T> {
        let width = self.values.len() / self.batch.max(1);
        let mut values = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            values.extend_from_slice(&self.values[r * width..(r + 1) * width]);
        }
        Memory {
            values,
            batch: rows.len(),
            src_len: self.src_len,
            src_lens: rows.iter().map(|&r| self.src_lens[r]).collect(),
        }
    }

    /// Encoder output vectors of sequence `b`, non-padding positions only.
    pub fn sequence(&self, b: usize) -> &[T] {
        let d = self.values.len() / (self.batch * self.src_len).max(1);
        let start = b * self.src_len * d;
        &self.values[start..start + self.src_lens[b] * d]
    }
}

/// Loss value with the number of target tokens it averages over.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutput {
    pub loss: f64,
    pub tokens: usize,
}

struct Forward<'a, 's, T: Scalar> {
    cfg: &'a ModelConfig,
    tape: Tape<'s, T>,
    rng: Option<ChaCha8Rng>,
}

impl<'s, T: Scalar> Forward<'_, 's, T> {
    fn p(&mut self, name: &str) -> Result<Var> {
        self.tape.param_by_name(name)
    }

    fn proj(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        Ok(self.tape.linear(x, w, Some(b)))
    }

    fn drop(&mut self, x: Var) -> Var {
        match self.rng.as_mut() {
            Some(rng) => self.tape.dropout(x, self.cfg.dropout, rng),
            None => x,
        }
    }

    fn norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.p(&format!("{prefix}.gain"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        Ok(self.tape.layer_norm(x, g, b))
    }

    fn embed(&mut self, ids: &[u32], len: usize) -> Result<Var> {
        let tok = self.p("embed.tok")?;
        let pos = self.p("embed.pos")?;
        let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..ids.len()).map(|i| i % len).collect();
        let x = self.tape.gather(tok, &ids, (self.cfg.d_model as f64).sqrt())?;
        let p = self.tape.gather(pos, &positions, 1.0)?;
        let x = self.tape.add(x, p);
        Ok(self.drop(x))
    }

    #[allow(clippy::too_many_arguments)]
    fn attend(
        &mut self,
        prefix: &str,
        x: Var,
        kv: Var,
        batch: usize,
        q_len: usize,
        k_len: usize,
        key_lens: &[usize],
        causal: bool,
    ) -> Result<Var> {
        let q = self.proj(x, &format!("{prefix}_q"))?;
        let k = self.proj(kv, &format!("{prefix}_k"))?;
        let v = self.proj(kv, &format!("{prefix}_v"))?;
        let spec = AttnSpec {
            batch,
            q_len,
            k_len,
            heads: self.cfg.num_heads,
            key_lens: key_lens.to_vec(),
            causal,
        };
        let a = self.tape.attention(q, k, v, spec);
        self.proj(a, &format!("{prefix}_o"))
    }

    fn residual(&mut self, x: Var, y: Var, norm: &str) -> Result<Var> {
        let y = self.drop(y);
        let s = self.tape.add(x, y);
        self.norm(s, norm)
    }

    fn ffn(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let h = self.proj(x, &format!("{prefix}.ffn_1"))?;
        let h = self.tape.gelu(h);
        self.proj(h, &format!("{prefix}.ffn_2"))
    }

    fn encode(&mut self, src: &[u32], batch: usize, len: usize, lens: &[usize]) -> Result<Var> {
        let mut x = self.embed(src, len)?;
        for l in 0..self.cfg.num_layers {
            let a = self.attend(&format!("enc.{l}.attn"), x, x, batch, len, len, lens, false)?;
            x = self.residual(x, a, &format!("enc.{l}.ln_1"))?;
            let f = self.ffn(x, &format!("enc.{l}"))?;
            x = self.residual(x, f, &format!("enc.{l}.ln_2"))?;
        }
        Ok(x)
    }

    #[allow(clippy::too_many_arguments)]
    fn decode(
        &mut self,
        memory: Var,
        src_len: usize,
        src_lens: &[usize],
        tgt: &[u32],
        batch: usize,
        len: usize,
        tgt_lens: &[usize],
    ) -> Result<Var> {
        let h = self.decode_hidden(memory, src_len, src_lens, tgt, batch, len, tgt_lens)?;
        let tok = self.p("embed.tok")?;
        Ok(self.tape.linear(h, tok, None))
    }

    /// Final decoder states before the output projection.
    #[allow(clippy::too_many_arguments)]
    fn decode_hidden(
        &mut self,
        memory: Var,
        src_len: usize,
        src_lens: &[usize],
        tgt: &[u32],
        batch: usize,
        len: usize,
        tgt_lens: &[usize],
    ) -> Result<Var> {
        let mut x = self.embed(tgt, len)?;
        for l in 0..self.cfg.num_layers {
            let a = self.attend(&format!("dec.{l}.self"), x, x, batch, len, len, tgt_lens, true)?;
            x = self.residual(x, a, &format!("dec.{l}.ln_1"))?;
            let c = self.attend(&format!("dec.{l}.cross"), x, memory, batch, len, src_len, src_lens, false)?;
            x = self.residual(x, c, &format!("dec.{l}.ln_2"))?;
            let f = self.ffn(x, &format!("dec.{l}"))?;
            x = self.residual(x, f, &format!("dec.{l}.ln_3"))?;
        }
        Ok(x)
    }
}

fn check_ids(cfg: &ModelConfig, ids: &[u32], len: usize, what: &str) -> Result<()> {
    if len > cfg.max_seq_len {
        return Err(Error::Capacity(format!(
            "{what} length {len} exceeds max_seq_len {}",
            cfg.max_seq_len
        )));
    }
    if let Some(i) = ids.iter().position(|&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Data(format!(
            "{what} sequence {} holds token id {} outside vocabulary of {}",
            i / len.max(1),
            ids[i],
            cfg.vocab_size
        )));
    }
    Ok(())
}

fn check_batch(cfg: &ModelConfig, batch: &Batch) -> Result<()> {
    check_ids(cfg, &batch.src, batch.src_len, "source")?;
    check_ids(cfg, &batch.dec_in, batch.tgt_len, "target")?;
    check_ids(cfg, &batch.dec_out, batch.tgt_len, "target")
}

fn targets(batch: &Batch) -> Vec<Option<usize>> {
    let mut out = Vec::with_capacity(batch.dec_out.len());
    for b in 0..batch.size {
        for t in 0..batch.tgt_len {
            out.push((t < batch.tgt_lens[b]).then(|| batch.dec_out[b * batch.tgt_len + t] as usize));
        }
    }
    out
}

/// Teacher-forced logits `[size * tgt_len, vocab]` and the loss node.
fn run<'a, T: Scalar>(
    cfg: &'a ModelConfig,
    params: &'a ParamStore<T>,
    batch: &Batch,
    dropout_seed: Option<u64>,
) -> Result<(Forward<'a, 'a, T>, Var, Var)> {
    check_batch(cfg, batch)?;
    let rng = dropout_seed
        .filter(|_| cfg.dropout > 0.0)
        .map(ChaCha8Rng::seed_from_u64);
    let mut f = Forward {
        cfg,
        tape: Tape::new(params),
        rng,
    };
    let mem = f.encode(&batch.src, batch.size, batch.src_len, &batch.src_lens)?;
    let logits = f.decode(
        mem,
        batch.src_len,
        &batch.src_lens,
        &batch.dec_in,
        batch.size,
        batch.tgt_len,
        &batch.tgt_lens,
    )?;
    let loss = f.tape.cross_entropy(logits, &targets(batch), cfg.label_smoothing)?;
    Ok((f, logits, loss))
}

impl<T: Scalar> TransformerModel<T> {
    fn finite(&self, loss: T, batch: &Batch) -> Result<f64> {
        let l = loss.as_f64();
        if l.is_finite() {
            Ok(l)
        } else {
            Err(Error::Numerical(format!("non-finite loss {l} on a {} batch", batch.pair)))
        }
    }

    /// Evaluation-mode loss (no dropout).
    pub fn loss(&self, batch: &Batch) -> Result<StepOutput> {
        let (f, _, loss) = run(&self.config, &self.params, batch, None)?;
        Ok(StepOutput {
            loss: self.finite(f.tape.scalar(loss), batch)?,
            tokens: batch.target_tokens(),
        })
    }

    /// Loss and per-entry gradients; dropout is active iff a seed is given.
    pub fn loss_and_grads(
        &self,
        batch: &Batch,
        dropout_seed: Option<u64>,
    ) -> Result<(StepOutput, Vec<Vec<T>>)> {
        let (f, _, loss) = run(&self.config, &self.params, batch, dropout_seed)?;
        let out = StepOutput {
            loss: self.finite(f.tape.scalar(loss), batch)?,
            tokens: batch.target_tokens(),
        };
        Ok((out, f.tape.backward(loss)))
    }

    /// Teacher-forced logits, row-major `[size * tgt_len, vocab]`.
    pub fn logits(&self, batch: &Batch) -> Result<Vec<T>> {
        let (f, logits, _) = run(&self.config, &self.params, batch, None)?;
        Ok(f.tape.value(logits).to_vec())
    }

    /// Runs the encoder over unpadded source sequences.
    pub fn encode(&self, sources: &[Vec<u32>]) -> Result<Memory<T>> {
        if sources.is_empty() {
            return Err(Error::Precondition("nothing to encode".into()));
        }
        let len = sources.iter().map(Vec::len).max().unwrap_or(0).max(1);
        let mut ids = vec![PAD; sources.len() * len];
        for (b, s) in sources.iter().enumerate() {
            ids[b * len..b * len + s.len()].copy_from_slice(s);
        }
        check_ids(&self.config, &ids, len, "source")?;
        let lens: Vec<usize> = sources.iter().map(Vec::len).collect();
        let mut f = Forward {
            cfg: &self.config,
            tape: Tape::new(&self.params),
            rng: None,
        };
        let mem = f.encode(&ids, sources.len(), len, &lens)?;
        Ok(Memory {
            values: f.tape.value(mem).to_vec(),
            batch: sources.len(),
            src_len: len,
            src_lens: lens,
        })
    }

    /// Next-token distributions for equal-length target prefixes, one per
    /// memory row. Each prefix starts with the target-language token.
    pub fn decode_step(&self, memory: &Memory<T>, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        if prefixes.len() != memory.batch {
            return Err(Error::Precondition(format!(
                "{} prefixes for a memory of {} sequences",
                prefixes.len(),
                memory.batch
            )));
        }
        let len = prefixes.first().map_or(0, Vec::len);
        if len == 0 || prefixes.iter().any(|p| p.len() != len) {
            return Err(Error::Precondition(
                "prefixes must be non-empty and of equal length".into(),
            ));
        }
        let ids: Vec<u32> = prefixes.concat();
        check_ids(&self.config, &ids, len, "target prefix")?;
        let d = self.config.d_model;
        let mut f = Forward {
            cfg: &self.config,
            tape: Tape::new(&self.params),
            rng: None,
        };
        let mem = f
            .tape
            .constant(memory.values.clone(), memory.batch * memory.src_len, d);
        let hidden = f.decode_hidden(
            mem,
            memory.src_len,
            &memory.src_lens,
            &ids,
            prefixes.len(),
            len,
            &vec![len; prefixes.len()],
        )?;
        // Only the last position is needed, so project just those rows.
        let h = f.tape.value(hidden);
        let mut last = Vec::with_capacity(prefixes.len() * d);
        for b in 0..prefixes.len() {
            last.extend_from_slice(&h[((b + 1) * len - 1) * d..(b + 1) * len * d]);
        }
        let v = self.config.vocab_size;
        let table = &self.params.get("embed.tok")?.values;
        let mut z = vec![T::zero(); prefixes.len() * v];
        gemm(
            MatRef::new(&last, prefixes.len(), d),
            MatRef::new(table, v, d).t(),
            T::zero(),
            &mut z,
        );
        Ok(z.chunks(v).map(softmax).collect())
    }
}

fn softmax<T: Scalar>(z: &[T]) -> Vec<f64> {
    let max = z.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = z.iter().map(|v| (v.as_f64() - max).exp()).collect();
    let s: f64 = p.iter().sum();
    for x in &mut p {
        *x /= s;
    }
    p
}
