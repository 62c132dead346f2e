//! Reverse-mode differentiation over row-major matrices.
//!
//! Every value on the tape is a `rows x cols` matrix. Parameters are read in
//! place from the borrowed [`ParamStore`]; everything else is owned by the
//! tape. `backward` returns one gradient array per store entry.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::scalar::{gemm, MatRef};
use crate::tensor::{ParamId, ParamStore, Scalar};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Shape and masking of one multi-head attention call.
///
/// Queries are `batch * q_len` rows, keys/values `batch * k_len` rows. Key
/// `j` of batch item `b` is visible iff `j < key_lens[b]` and, when causal,
/// `j <= i` for query `i`.
#[derive(Debug, Clone)]
pub struct AttnSpec {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    pub key_lens: Vec<usize>,
    pub causal: bool,
}

enum Op<T> {
    Constant,
    Param(ParamId),
    Gather {
        table: Var,
        ids: Vec<usize>,
        scale: T,
    },
    Add(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Dropout {
        x: Var,
        keep: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttnSpec,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        smoothing: T,
        probs: Vec<T>,
        count: usize,
    },
}

struct Node<T> {
    value: Vec<T>,
    rows: usize,
    cols: usize,
    op: Op<T>,
}

pub struct Tape<'s, T: Scalar> {
    store: &'s ParamStore<T>,
    nodes: Vec<Node<T>>,
}

impl<'s, T: Scalar> Tape<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    fn push(&mut self, value: Vec<T>, rows: usize, cols: usize, op: Op<T>) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[T] {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => &self.store.entry(id).values,
            _ => &node.value,
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        (self.nodes[v.0].rows, self.nodes[v.0].cols)
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[0]
    }

    pub fn constant(&mut self, value: Vec<T>, rows: usize, cols: usize) -> Var {
        self.push(value, rows, cols, Op::Constant)
    }

    /// Parameter leaf. Vectors are viewed as a single row; higher-rank
    /// tensors as `shape[0] x rest`.
    pub fn param(&mut self, id: ParamId) -> Var {
        let shape = &self.store.entry(id).shape;
        let (rows, cols) = match shape.len() {
            0 => (1, 1),
            1 => (1, shape[0]),
            _ => (shape[0], shape[1..].iter().product()),
        };
        self.nodes.push(Node {
            value: Vec::new(),
            rows,
            cols,
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param_by_name(&mut self, name: &str) -> Result<Var> {
        let id = self.store.id(name)?;
        Ok(self.param(id))
    }

    /// Rows `ids` of `table`, each multiplied by `scale`.
    pub fn gather(&mut self, table: Var, ids: &[usize], scale: f64) -> Result<Var> {
        let (rows, cols) = self.shape(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Data(format!(
                "row index {bad} out of range for table with {rows} rows"
            )));
        }
        let scale = T::lit(scale);
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend(src[i * cols..(i + 1) * cols].iter().map(|&x| x * scale));
        }
        Ok(self.push(
            out,
            ids.len(),
            cols,
            Op::Gather {
                table,
                ids: ids.to_vec(),
                scale,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let (rows, cols) = self.shape(a);
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        self.push(out, rows, cols, Op::Add(a, b))
    }

    /// `x · wᵀ + b` with `x: n x in`, `w: out x in`, `b: 1 x out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, fan_in) = self.shape(x);
        let (fan_out, w_in) = self.shape(w);
        assert_eq!(fan_in, w_in, "linear input width mismatch");
        let mut out = vec![T::zero(); n * fan_out];
        if let Some(b) = b {
            assert_eq!(self.shape(b), (1, fan_out), "linear bias shape");
            let bias = self.value(b);
            for row in out.chunks_mut(fan_out) {
                row.copy_from_slice(bias);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm(
            MatRef::new(self.value(x), n, fan_in),
            MatRef::new(self.value(w), fan_out, fan_in).t(),
            beta,
            &mut out,
        );
        self.push(out, n, fan_out, Op::Linear { x, w, b })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let (rows, cols) = self.shape(x);
        let out = self.value(x).iter().map(|&v| gelu(v)).collect();
        self.push(out, rows, cols, Op::Gelu(x))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (rows, cols) = self.shape(x);
        assert_eq!(self.shape(gain), (1, cols), "layer norm gain shape");
        assert_eq!(self.shape(bias), (1, cols), "layer norm bias shape");
        let n = T::lit(cols as f64);
        let eps = T::lit(LN_EPS);
        let xs = self.value(x);
        let g = self.value(gain);
        let bvals = self.value(bias);
        let mut xhat = Vec::with_capacity(rows * cols);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * cols);
        for row in xs.chunks(cols) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.push(h);
                out.push(h * g[j] + bvals[j]);
            }
        }
        self.push(
            out,
            rows,
            cols,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let (rows, cols) = self.shape(x);
        let scale = T::lit(1.0 / (1.0 - p));
        let keep: Vec<T> = (0..rows * cols)
            .map(|_| {
                if rng.gen::<f64>() < p {
                    T::zero()
                } else {
                    scale
                }
            })
            .collect();
        let out = self
            .value(x)
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| v * k)
            .collect();
        self.push(out, rows, cols, Op::Dropout { x, keep })
    }

    /// Scaled dot-product multi-head attention over already-projected
    /// queries, keys and values. Returns the concatenated head outputs.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttnSpec) -> Var {
        let (q_rows, d) = self.shape(q);
        assert_eq!(q_rows, spec.batch * spec.q_len, "attention query rows");
        assert_eq!(self.shape(k), (spec.batch * spec.k_len, d), "attention key shape");
        assert_eq!(self.shape(v), (spec.batch * spec.k_len, d), "attention value shape");
        assert_eq!(d % spec.heads, 0, "attention width not divisible by heads");
        assert_eq!(spec.key_lens.len(), spec.batch);
        let dh = d / spec.heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
        let (ql, kl) = (spec.q_len, spec.k_len);
        let mut probs = vec![T::zero(); spec.batch * spec.heads * ql * kl];
        let mut out = vec![T::zero(); q_rows * d];
        let mut scores = vec![T::zero(); kl];
        for b in 0..spec.batch {
            let valid = spec.key_lens[b].min(kl);
            for h in 0..spec.heads {
                let col = h * dh;
                for i in 0..ql {
                    let visible = if spec.causal { valid.min(i + 1) } else { valid };
                    let qrow = &qs[(b * ql + i) * d + col..(b * ql + i) * d + col + dh];
                    let mut max = T::neg_infinity();
                    for (j, s) in scores.iter_mut().enumerate().take(visible) {
                        let krow = &ks[(b * kl + j) * d + col..(b * kl + j) * d + col + dh];
                        let dot = qrow.iter().zip(krow).map(|(&a, &c)| a * c).sum::<T>() * scale;
                        *s = dot;
                        if dot > max {
                            max = dot;
                        }
                    }
                    if visible == 0 {
                        continue;
                    }
                    let mut denom = T::zero();
                    for s in scores.iter_mut().take(visible) {
                        *s = (*s - max).exp();
                        denom += *s;
                    }
                    let pbase = ((b * spec.heads + h) * ql + i) * kl;
                    let orow = (b * ql + i) * d + col;
                    for j in 0..visible {
                        let p = scores[j] / denom;
                        probs[pbase + j] = p;
                        let vrow = (b * kl + j) * d + col;
                        for c in 0..dh {
                            out[orow + c] += p * vs[vrow + c];
                        }
                    }
                }
            }
        }
        self.push(
            out,
            q_rows,
            d,
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            },
        )
    }

    /// Attention probabilities saved by an [`Tape::attention`] node, laid out
    /// `[batch][head][query][key]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Label-smoothed cross-entropy averaged over rows whose target is
    /// `Some`. Rows with `None` (padding) contribute nothing; if every row is
    /// padding the loss is exactly zero.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        smoothing: f64,
    ) -> Result<Var> {
        let (rows, vocab) = self.shape(logits);
        if targets.len() != rows {
            return Err(Error::Structure(format!(
                "{} targets for {rows} logit rows",
                targets.len()
            )));
        }
        if let Some((i, t)) = targets
            .iter()
            .enumerate()
            .find_map(|(i, t)| t.filter(|&t| t >= vocab).map(|t| (i, t)))
        {
            return Err(Error::Data(format!(
                "target id {t} at position {i} exceeds vocabulary size {vocab}"
            )));
        }
        let eps = T::lit(smoothing);
        let uniform = eps / T::lit(vocab as f64);
        let zs = self.value(logits);
        let mut probs = vec![T::zero(); rows * vocab];
        let mut total = T::zero();
        let mut count = 0usize;
        for (r, target) in targets.iter().enumerate() {
            let Some(t) = *target else { continue };
            count += 1;
            let z = &zs[r * vocab..(r + 1) * vocab];
            let max = z.iter().copied().fold(T::neg_infinity(), T::max);
            let sum_exp = z.iter().map(|&v| (v - max).exp()).sum::<T>();
            let lse = max + sum_exp.ln();
            let p = &mut probs[r * vocab..(r + 1) * vocab];
            let mut sum_logp = T::zero();
            for (pk, &zk) in p.iter_mut().zip(z) {
                let logp = zk - lse;
                *pk = logp.exp();
                sum_logp += logp;
            }
            let nll = lse - z[t];
            total += (T::one() - eps) * nll - uniform * sum_logp;
        }
        let loss = if count == 0 {
            T::zero()
        } else {
            total / T::lit(count as f64)
        };
        Ok(self.push(
            vec![loss],
            1,
            1,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                smoothing: eps,
                probs,
                count,
            },
        ))
    }

    /// Back-propagates from the scalar `loss` and returns per-entry
    /// parameter gradients aligned with `store.entries()`.
    pub fn backward(self, loss: Var) -> Vec<Vec<T>> {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let store = self.store;
        let mut param_grads: Vec<Vec<T>> = store
            .entries()
            .iter()
            .map(|e| vec![T::zero(); e.len()])
            .collect();
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    for (acc, &x) in param_grads[id.0].iter_mut().zip(&g) {
                        *acc += x;
                    }
                }
                Op::Gather { table, ids, scale } => {
                    let (trows, cols) = self.shape(*table);
                    let acc = slot(&mut grads, *table, trows * cols);
                    for (r, &i) in ids.iter().enumerate() {
                        for c in 0..cols {
                            acc[i * cols + c] += g[r * cols + c] * *scale;
                        }
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::Linear { x, w, b } => {
                    let (n, fan_in) = self.shape(*x);
                    let fan_out = node.cols;
                    if let Some(b) = b {
                        let acc = slot(&mut grads, *b, fan_out);
                        for row in g.chunks(fan_out) {
                            for (a, &v) in acc.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                    }
                    {
                        let acc = slot(&mut grads, *w, fan_out * fan_in);
                        gemm(
                            MatRef::new(&g, n, fan_out).t(),
                            MatRef::new(self.value(*x), n, fan_in),
                            T::one(),
                            acc,
                        );
                    }
                    let acc = slot(&mut grads, *x, n * fan_in);
                    gemm(
                        MatRef::new(&g, n, fan_out),
                        MatRef::new(self.value(*w), fan_out, fan_in),
                        T::one(),
                        acc,
                    );
                }
                Op::Gelu(x) => {
                    let xs = self.value(*x);
                    let acc = slot(&mut grads, *x, xs.len());
                    for ((a, &gv), &xv) in acc.iter_mut().zip(&g).zip(xs) {
                        *a += gv * gelu_grad(xv);
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let cols = node.cols;
                    let n = T::lit(cols as f64);
                    let gvals = self.value(*gain);
                    {
                        let acc = slot(&mut grads, *bias, cols);
                        for row in g.chunks(cols) {
                            for (a, &v) in acc.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                    }
                    {
                        let acc = slot(&mut grads, *gain, cols);
                        for (row, hrow) in g.chunks(cols).zip(xhat.chunks(cols)) {
                            for ((a, &v), &h) in acc.iter_mut().zip(row).zip(hrow) {
                                *a += v * h;
                            }
                        }
                    }
                    let acc = slot(&mut grads, *x, node.rows * cols);
                    let mut dxhat = vec![T::zero(); cols];
                    for (r, (row, hrow)) in g.chunks(cols).zip(xhat.chunks(cols)).enumerate() {
                        let mut sum = T::zero();
                        let mut sum_h = T::zero();
                        for j in 0..cols {
                            dxhat[j] = row[j] * gvals[j];
                            sum += dxhat[j];
                            sum_h += dxhat[j] * hrow[j];
                        }
                        let k = inv_std[r] / n;
                        for j in 0..cols {
                            acc[r * cols + j] += k * (n * dxhat[j] - sum - hrow[j] * sum_h);
                        }
                    }
                }
                Op::Dropout { x, keep } => {
                    let acc = slot(&mut grads, *x, keep.len());
                    for ((a, &gv), &k) in acc.iter_mut().zip(&g).zip(keep) {
                        *a += gv * k;
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    spec,
                    probs,
                } => {
                    self.attention_backward(&mut grads, &g, *q, *k, *v, spec, probs);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    smoothing,
                    probs,
                    count,
                } => {
                    if *count == 0 {
                        continue;
                    }
                    let vocab = self.shape(*logits).1;
                    let scale = g[0] / T::lit(*count as f64);
                    let uniform = *smoothing / T::lit(vocab as f64);
                    let on = T::one() - *smoothing;
                    let acc = slot(&mut grads, *logits, targets.len() * vocab);
                    for (r, target) in targets.iter().enumerate() {
                        let Some(t) = *target else { continue };
                        let base = r * vocab;
                        for c in 0..vocab {
                            let mut q = uniform;
                            if c == t {
                                q += on;
                            }
                            acc[base + c] += (probs[base + c] - q) * scale;
                        }
                    }
                }
            }
        }
        param_grads
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        grads: &mut [Option<Vec<T>>],
        g: &[T],
        q: Var,
        k: Var,
        v: Var,
        spec: &AttnSpec,
        probs: &[T],
    ) {
        let d = self.shape(q).1;
        let dh = d / spec.heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let (ql, kl) = (spec.q_len, spec.k_len);
        let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
        let mut dq = vec![T::zero(); qs.len()];
        let mut dk = vec![T::zero(); ks.len()];
        let mut dv = vec![T::zero(); vs.len()];
        let mut dp = vec![T::zero(); kl];
        for b in 0..spec.batch {
            let valid = spec.key_lens[b].min(kl);
            for h in 0..spec.heads {
                let col = h * dh;
                for i in 0..ql {
                    let visible = if spec.causal { valid.min(i + 1) } else { valid };
                    if visible == 0 {
                        continue;
                    }
                    let pbase = ((b * spec.heads + h) * ql + i) * kl;
                    let grow = (b * ql + i) * d + col;
                    let mut dot = T::zero();
                    for j in 0..visible {
                        let vrow = (b * kl + j) * d + col;
                        let p = probs[pbase + j];
                        let mut s = T::zero();
                        for c in 0..dh {
                            dv[vrow + c] += p * g[grow + c];
                            s += g[grow + c] * vs[vrow + c];
                        }
                        dp[j] = s;
                        dot += p * s;
                    }
                    for j in 0..visible {
                        let ds = probs[pbase + j] * (dp[j] - dot) * scale;
                        let krow = (b * kl + j) * d + col;
                        for c in 0..dh {
                            dq[grow + c] += ds * ks[krow + c];
                            dk[krow + c] += ds * qs[grow + c];
                        }
                    }
                }
            }
        }
        accumulate(grads, q, &dq);
        accumulate(grads, k, &dk);
        accumulate(grads, v, &dv);
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, g: &[T]) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, &x) in acc.iter_mut().zip(g) {
                *a += x;
            }
        }
        empty => *empty = Some(g.to_vec()),
    }
}

// tanh approximation of GeLU
fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}
