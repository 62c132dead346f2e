//! Post-layer-norm encoder-decoder transformer with GeLU feed-forward
//! blocks, learnable positions and a token embedding tied to the output
//! projection.

mod forward;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Checkpoint, ParamStore, Scalar};

pub use forward::{Memory, StepOutput};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            d_model: 64,
            num_heads: 4,
            d_ff: 128,
            vocab_size: 0,
            max_seq_len: 32,
            dropout: 0.1,
            label_smoothing: 0.1,
            seed: 1,
        }
    }
}

const META_KEYS: [&str; 9] = [
    "model.num_layers",
    "model.d_model",
    "model.num_heads",
    "model.d_ff",
    "model.vocab_size",
    "model.max_seq_len",
    "model.dropout",
    "model.label_smoothing",
    "model.seed",
];

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| Err(Error::config(format!("model.{field}"), reason));
        if self.num_layers == 0 {
            return bad("num_layers", "must be at least 1");
        }
        if self.d_model == 0 || self.num_heads == 0 || self.d_ff == 0 {
            return bad("d_model", "d_model, num_heads and d_ff must be positive");
        }
        if self.d_model % self.num_heads != 0 {
            return Err(Error::config(
                "model.d_model",
                format!("{} is not divisible by num_heads = {}", self.d_model, self.num_heads),
            ));
        }
        if self.vocab_size <= crate::corpus::NUM_SPECIALS {
            return bad("vocab_size", "must exceed the number of special tokens");
        }
        if self.max_seq_len < 2 {
            return bad("max_seq_len", "must be at least 2");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing", "must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn to_meta(&self) -> BTreeMap<String, String> {
        let vals = [
            self.num_layers.to_string(),
            self.d_model.to_string(),
            self.num_heads.to_string(),
            self.d_ff.to_string(),
            self.vocab_size.to_string(),
            self.max_seq_len.to_string(),
            self.dropout.to_string(),
            self.label_smoothing.to_string(),
            self.seed.to_string(),
        ];
        META_KEYS.iter().map(|k| k.to_string()).zip(vals).collect()
    }

    pub fn from_meta(meta: &BTreeMap<String, String>) -> Result<Self> {
        fn get<V: std::str::FromStr>(meta: &BTreeMap<String, String>, key: &str) -> Result<V> {
            let raw = meta
                .get(key)
                .ok_or_else(|| Error::Structure(format!("checkpoint metadata lacks `{key}`")))?;
            raw.parse()
                .map_err(|_| Error::Structure(format!("checkpoint metadata `{key}={raw}` is invalid")))
        }
        let cfg = Self {
            num_layers: get(meta, META_KEYS[0])?,
            d_model: get(meta, META_KEYS[1])?,
            num_heads: get(meta, META_KEYS[2])?,
            d_ff: get(meta, META_KEYS[3])?,
            vocab_size: get(meta, META_KEYS[4])?,
            max_seq_len: get(meta, META_KEYS[5])?,
            dropout: get(meta, META_KEYS[6])?,
            label_smoothing: get(meta, META_KEYS[7])?,
            seed: get(meta, META_KEYS[8])?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every tensor name with its shape, in no particular order.
    pub fn tensor_layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.d_model, self.d_ff);
        let mut out = vec![
            ("embed.tok".to_string(), vec![self.vocab_size, d]),
            ("embed.pos".to_string(), vec![self.max_seq_len, d]),
        ];
        let mut linear = |name: String, rows: usize, cols: usize| {
            out.push((format!("{name}.weight"), vec![rows, cols]));
            out.push((format!("{name}.bias"), vec![rows]));
        };
        for l in 0..self.num_layers {
            for c in ["q", "k", "v", "o"] {
                linear(format!("enc.{l}.attn_{c}"), d, d);
            }
            linear(format!("enc.{l}.ffn_1"), f, d);
            linear(format!("enc.{l}.ffn_2"), d, f);
            for c in ["q", "k", "v", "o"] {
                linear(format!("dec.{l}.self_{c}"), d, d);
                linear(format!("dec.{l}.cross_{c}"), d, d);
            }
            linear(format!("dec.{l}.ffn_1"), f, d);
            linear(format!("dec.{l}.ffn_2"), d, f);
        }
        for l in 0..self.num_layers {
            for (stack, norms) in [("enc", 2), ("dec", 3)] {
                for n in 1..=norms {
                    out.push((format!("{stack}.{l}.ln_{n}.gain"), vec![d]));
                    out.push((format!("{stack}.{l}.ln_{n}.bias"), vec![d]));
                }
            }
        }
        out
    }
}

/// A configuration together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> TransformerModel<T> {
    /// Deterministic initialization from `cfg.seed`: Glorot-uniform weight
    /// matrices, embeddings uniform with variance `1/d_model`, zero biases,
    /// unit layer-norm gains.
    pub fn build(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut layout = cfg.tensor_layout();
        layout.sort_by(|a, b| a.0.cmp(&b.0));
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let tensors = layout.into_iter().map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let values: Vec<T> = if name.starts_with("embed.") {
                let a = (3.0 / cfg.d_model as f64).sqrt();
                (0..n).map(|_| T::lit(rng.gen_range(-a..a))).collect()
            } else if name.ends_with(".weight") {
                let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                (0..n).map(|_| T::lit(rng.gen_range(-a..a))).collect()
            } else if name.ends_with(".gain") {
                vec![T::one(); n]
            } else {
                vec![T::zero(); n]
            };
            (name, shape, values)
        });
        Ok(Self {
            config: cfg.clone(),
            params: ParamStore::from_tensors(tensors)?,
        })
    }

    /// Pairs a configuration with existing parameters after checking that
    /// names and shapes match the configuration exactly.
    pub fn from_parts(cfg: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let layout = cfg.tensor_layout();
        if layout.len() != params.len() {
            return Err(Error::Structure(format!(
                "configuration expects {} tensors, parameters have {}",
                layout.len(),
                params.len()
            )));
        }
        for (name, shape) in &layout {
            let e = params.get(name).map_err(|_| {
                Error::Structure(format!("parameter tensor `{name}` is missing"))
            })?;
            if &e.shape != shape {
                return Err(Error::Structure(format!(
                    "tensor `{name}` has shape {:?}, configuration expects {shape:?}",
                    e.shape
                )));
            }
        }
        Ok(Self { config: cfg, params })
    }

    pub fn to_checkpoint(&self, extra: &BTreeMap<String, String>) -> Checkpoint {
        let mut meta = self.config.to_meta();
        meta.extend(extra.iter().map(|(k, v)| (k.clone(), v.clone())));
        Checkpoint::new(&self.params, meta)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg = ModelConfig::from_meta(&ckpt.meta)?;
        Self::from_parts(cfg, ckpt.store.cast())
    }

    /// Same configuration, different parameter values (e.g. a masked view).
    pub fn with_params(&self, params: ParamStore<T>) -> Result<Self> {
        if !params.same_layout(&self.params) {
            return Err(Error::Structure("parameter layout differs from the model".into()));
        }
        Ok(Self {
            config: self.config.clone(),
            params,
        })
    }
}
