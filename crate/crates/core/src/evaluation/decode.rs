use std::borrow::Cow;

use crate::corpus::EOS;
use crate::error::{Error, Result};
use crate::mask::ParameterMask;
use crate::transformer::TransformerModel;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeOptions {
    /// 1 is greedy decoding.
    pub beam_size: usize,
    /// Finished hypotheses are ranked by `logp / len^length_penalty`.
    pub length_penalty: f64,
    /// Sentences decoded together.
    pub batch_size: usize,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            beam_size: 4,
            length_penalty: 0.6,
            batch_size: 64,
        }
    }
}

impl DecodeOptions {
    pub fn greedy() -> Self {
        Self {
            beam_size: 1,
            ..Self::default()
        }
    }
}

/// `θ ⊙ M` when a mask is given, the model itself otherwise.
pub fn masked_view<'m>(
    model: &'m TransformerModel<f32>,
    mask: Option<&ParameterMask>,
) -> Result<Cow<'m, TransformerModel<f32>>> {
    match mask {
        None => Ok(Cow::Borrowed(model)),
        Some(m) => Ok(Cow::Owned(model.with_params(m.apply(&model.params)?)?)),
    }
}

/// Decodes every source (already carrying its language-token prefix) into
/// target word ids, without the end token.
pub fn translate(
    model: &TransformerModel<f32>,
    mask: Option<&ParameterMask>,
    sources: &[Vec<u32>],
    target_token: u32,
    opts: &DecodeOptions,
) -> Result<Vec<Vec<u32>>> {
    if opts.beam_size == 0 || opts.batch_size == 0 {
        return Err(Error::config("eval.beam_size", "beam and batch sizes must be positive"));
    }
    let view = masked_view(model, mask)?;
    let mut out = Vec::with_capacity(sources.len());
    for chunk in sources.chunks(opts.batch_size) {
        let decoded = if opts.beam_size == 1 {
            greedy(&view, chunk, target_token)?
        } else {
            beam(&view, chunk, target_token, opts)?
        };
        out.extend(decoded);
    }
    Ok(out)
}

fn argmax(p: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &x) in p.iter().enumerate() {
        if x > p[best] {
            best = i;
        }
    }
    best as u32
}

pub(crate) fn greedy(
    model: &TransformerModel<f32>,
    sources: &[Vec<u32>],
    target_token: u32,
) -> Result<Vec<Vec<u32>>> {
    let memory = model.encode(sources)?;
    let max_out = model.config.max_seq_len - 1;
    let mut outputs: Vec<Vec<u32>> = vec![Vec::new(); sources.len()];
    let mut alive: Vec<usize> = (0..sources.len()).collect();
    let mut step = 0;
    while !alive.is_empty() && step < max_out {
        let mem = memory.select(&alive);
        let prefixes: Vec<Vec<u32>> = alive
            .iter()
            .map(|&i| {
                let mut p = vec![target_token];
                p.extend_from_slice(&outputs[i]);
                p
            })
            .collect();
        let probs = model.decode_step(&mem, &prefixes)?;
        let mut next_alive = Vec::with_capacity(alive.len());
        for (&i, p) in alive.iter().zip(&probs) {
            let t = argmax(p);
            if t != EOS {
                outputs[i].push(t);
                next_alive.push(i);
            }
        }
        alive = next_alive;
        step += 1;
    }
    Ok(outputs)
}

#[derive(Clone)]
struct Hyp {
    tokens: Vec<u32>,
    logp: f64,
}

fn normalized(logp: f64, len: usize, penalty: f64) -> f64 {
    logp / (len.max(1) as f64).powf(penalty)
}

fn beam(
    model: &TransformerModel<f32>,
    sources: &[Vec<u32>],
    target_token: u32,
    opts: &DecodeOptions,
) -> Result<Vec<Vec<u32>>> {
    let k = opts.beam_size;
    let memory = model.encode(sources)?;
    let max_out = model.config.max_seq_len - 1;
    let mut alive: Vec<Vec<Hyp>> = vec![vec![Hyp { tokens: Vec::new(), logp: 0.0 }]; sources.len()];
    let mut finished: Vec<Vec<(f64, Vec<u32>)>> = vec![Vec::new(); sources.len()];
    let mut step = 0;
    loop {
        let active: Vec<usize> = (0..sources.len())
            .filter(|&s| !alive[s].is_empty() && finished[s].len() < k)
            .collect();
        if active.is_empty() || step >= max_out {
            break;
        }
        let mut rows = Vec::new();
        let mut prefixes = Vec::new();
        for &s in &active {
            for h in &alive[s] {
                rows.push(s);
                let mut p = vec![target_token];
                p.extend_from_slice(&h.tokens);
                prefixes.push(p);
            }
        }
        let probs = model.decode_step(&memory.select(&rows), &prefixes)?;
        let mut offset = 0;
        for &s in &active {
            let hyps = std::mem::take(&mut alive[s]);
            let mut cands: Vec<(f64, usize, u32)> = Vec::new();
            for (hi, h) in hyps.iter().enumerate() {
                let p = &probs[offset + hi];
                let mut idx: Vec<u32> = (0..p.len() as u32).collect();
                idx.sort_by(|&a, &b| p[b as usize].total_cmp(&p[a as usize]).then(a.cmp(&b)));
                for &t in idx.iter().take(k) {
                    cands.push((h.logp + p[t as usize].ln(), hi, t));
                }
            }
            offset += hyps.len();
            cands.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
            for &(logp, hi, t) in cands.iter().take(k) {
                if t == EOS {
                    let toks = hyps[hi].tokens.clone();
                    finished[s].push((normalized(logp, toks.len() + 1, opts.length_penalty), toks));
                } else {
                    let mut tokens = hyps[hi].tokens.clone();
                    tokens.push(t);
                    alive[s].push(Hyp { tokens, logp });
                }
            }
        }
        step += 1;
    }
    Ok((0..sources.len())
        .map(|s| {
            let mut pool = finished[s].clone();
            if pool.is_empty() {
                pool.extend(alive[s].iter().map(|h| {
                    (normalized(h.logp, h.tokens.len(), opts.length_penalty), h.tokens.clone())
                }));
            }
            let mut best = 0;
            for (i, c) in pool.iter().enumerate() {
                if c.0 > pool[best].0 {
                    best = i;
                }
            }
            pool.swap_remove(best).1
        })
        .collect())
}
