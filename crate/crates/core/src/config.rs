//! Experiment configuration: an INI file with sections `data`, `model`,
//! `train`, `mask`, `eval` and `sweep`, environment overrides of the form
//! `LASS_<SECTION>_<KEY>`, and a stable hash of the resolved values.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::corpus::{GenerationSpec, LangPair, TierThresholds};
use crate::error::{Error, Result};
use crate::evaluation::DecodeOptions;
use crate::training::{ExtendMode, FinetuneLadder, TrainConfig};
use crate::transformer::ModelConfig;

pub const SECTIONS: [&str; 6] = ["data", "model", "train", "mask", "eval", "sweep"];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: GenerationSpec,
    /// `vocab_size` is filled in from the generated corpus.
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Steps spent on each new pair when extending.
    pub extend_steps: u64,
    pub extend_mode: ExtendMode,
    /// Also train the unmasked and random-mask arms in `lass-train`.
    pub control_arms: bool,
    pub random_seed: u64,
    pub decode: DecodeOptions,
    /// Arm that `evaluate` compares against; empty for none.
    pub baseline: String,
    pub alphas: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: GenerationSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            extend_steps: 1000,
            extend_mode: ExtendMode::Masked,
            control_arms: true,
            random_seed: 7,
            decode: DecodeOptions::default(),
            baseline: "baseline".into(),
            alphas: vec![0.1, 0.3, 0.5, 0.7, 0.9],
        }
    }
}

fn parse<V: FromStr>(section: &str, key: &str, raw: &str, expected: &str) -> Result<V> {
    raw.trim()
        .parse()
        .map_err(|_| Error::config(format!("{section}.{key}"), format!("expected {expected}, got `{raw}`")))
}

fn list(raw: &str) -> Vec<String> {
    raw.split([',', ' ']).map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}

fn join<T: Display>(items: impl IntoIterator<Item = T>, sep: &str) -> String {
    items.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(sep)
}

impl ExperimentConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, section: &str, key: &str, raw: &str) -> Result<()> {
        let int = "a non-negative integer";
        let real = "a number";
        match (section, key) {
            ("data", "pivot") => self.data.pivot = raw.trim().to_string(),
            ("data", "families") => {
                self.data.families = raw.split('|').map(list).filter(|f| !f.is_empty()).collect()
            }
            ("data", "within_family") => self.data.within_family = parse(section, key, raw, real)?,
            ("data", "across_family") => self.data.across_family = parse(section, key, raw, real)?,
            ("data", "sizes") => {
                let mut sizes = BTreeMap::new();
                for item in list(raw) {
                    let (l, n) = item.split_once(':').ok_or_else(|| {
                        Error::config("data.sizes", format!("expected `lang:count`, got `{item}`"))
                    })?;
                    sizes.insert(l.to_string(), parse(section, key, n, int)?);
                }
                self.data.sizes = sizes;
            }
            ("data", "valid_size") => self.data.valid_size = parse(section, key, raw, int)?,
            ("data", "test_size") => self.data.test_size = parse(section, key, raw, int)?,
            ("data", "zero_shot_test_size") => self.data.zero_shot_test_size = parse(section, key, raw, int)?,
            ("data", "extension") => self.data.extension = list(raw),
            ("data", "pivot_words") => self.data.pivot_words = parse(section, key, raw, int)?,
            ("data", "zipf_exponent") => self.data.zipf_exponent = parse(section, key, raw, real)?,
            ("data", "min_len") => self.data.min_len = parse(section, key, raw, int)?,
            ("data", "max_len") => self.data.max_len = parse(section, key, raw, int)?,
            ("data", "tier_low_max") => self.data.tiers.low_max = parse(section, key, raw, int)?,
            ("data", "tier_rich_min") => self.data.tiers.rich_min = parse(section, key, raw, int)?,
            ("data", "seed") => self.data.seed = parse(section, key, raw, int)?,
            ("model", "num_layers") => self.model.num_layers = parse(section, key, raw, int)?,
            ("model", "d_model") => self.model.d_model = parse(section, key, raw, int)?,
            ("model", "num_heads") => self.model.num_heads = parse(section, key, raw, int)?,
            ("model", "d_ff") => self.model.d_ff = parse(section, key, raw, int)?,
            ("model", "max_seq_len") => self.model.max_seq_len = parse(section, key, raw, int)?,
            ("model", "dropout") => self.model.dropout = parse(section, key, raw, real)?,
            ("model", "label_smoothing") => self.model.label_smoothing = parse(section, key, raw, real)?,
            ("model", "seed") => self.model.seed = parse(section, key, raw, int)?,
            ("train", "base_lr") => self.train.sched.base_lr = parse(section, key, raw, real)?,
            ("train", "warmup_steps") => self.train.sched.warmup_steps = parse(section, key, raw, int)?,
            ("train", "max_steps") => self.train.max_steps = parse(section, key, raw, int)?,
            ("train", "batch_size") => self.train.batch_size = parse(section, key, raw, int)?,
            ("train", "temperature") => self.train.temperature = parse(section, key, raw, real)?,
            ("train", "finetune_steps") => self.train.finetune = FinetuneLadder::parse(raw)?,
            ("train", "eval_every") => self.train.eval_every = parse(section, key, raw, int)?,
            ("train", "patience") => self.train.patience = parse(section, key, raw, int)?,
            ("train", "seed") => self.train.seed = parse(section, key, raw, int)?,
            ("train", "extend_steps") => self.extend_steps = parse(section, key, raw, int)?,
            ("train", "control_arms") => self.control_arms = parse(section, key, raw, "true or false")?,
            ("mask", "alpha") => self.train.alpha = parse(section, key, raw, real)?,
            ("mask", "scope") => self.train.scope = raw.trim().parse()?,
            ("mask", "random_seed") => self.random_seed = parse(section, key, raw, int)?,
            ("mask", "extend_mode") => {
                self.extend_mode = match raw.trim() {
                    "masked" => ExtendMode::Masked,
                    "unmasked" => ExtendMode::Unmasked,
                    other => match other.strip_prefix("donor:") {
                        Some(p) => ExtendMode::Donor(p.parse::<LangPair>()?),
                        None => {
                            return Err(Error::config(
                                "mask.extend_mode",
                                format!("expected masked, unmasked or donor:<pair>, got `{other}`"),
                            ))
                        }
                    },
                }
            }
            ("eval", "beam_size") => self.decode.beam_size = parse(section, key, raw, int)?,
            ("eval", "length_penalty") => self.decode.length_penalty = parse(section, key, raw, real)?,
            ("eval", "batch_size") => self.decode.batch_size = parse(section, key, raw, int)?,
            ("eval", "baseline") => self.baseline = raw.trim().to_string(),
            ("sweep", "alphas") => {
                self.alphas =
                    list(raw).iter().map(|a| parse(section, key, a, "a list of numbers")).collect::<Result<_>>()?
            }
            _ if !SECTIONS.contains(&section) => {
                return Err(Error::config(format!("{section}.{key}"), format!("unknown section `{section}`")))
            }
            _ => {
                return Err(Error::config(
                    format!("{section}.{key}"),
                    format!("unknown key `{key}` in section `{section}`"),
                ))
            }
        }
        Ok(())
    }

    /// Every key with its current value, grouped by section in file order.
    pub fn entries(&self) -> Vec<(&'static str, &'static str, String)> {
        let d = &self.data;
        let m = &self.model;
        let t = &self.train;
        vec![
            ("data", "pivot", d.pivot.clone()),
            ("data", "families", join(d.families.iter().map(|f| f.join(" ")), " | ")),
            ("data", "within_family", d.within_family.to_string()),
            ("data", "across_family", d.across_family.to_string()),
            ("data", "sizes", join(d.sizes.iter().map(|(l, n)| format!("{l}:{n}")), ", ")),
            ("data", "valid_size", d.valid_size.to_string()),
            ("data", "test_size", d.test_size.to_string()),
            ("data", "zero_shot_test_size", d.zero_shot_test_size.to_string()),
            ("data", "extension", d.extension.join(" ")),
            ("data", "pivot_words", d.pivot_words.to_string()),
            ("data", "zipf_exponent", d.zipf_exponent.to_string()),
            ("data", "min_len", d.min_len.to_string()),
            ("data", "max_len", d.max_len.to_string()),
            ("data", "tier_low_max", d.tiers.low_max.to_string()),
            ("data", "tier_rich_min", d.tiers.rich_min.to_string()),
            ("data", "seed", d.seed.to_string()),
            ("model", "num_layers", m.num_layers.to_string()),
            ("model", "d_model", m.d_model.to_string()),
            ("model", "num_heads", m.num_heads.to_string()),
            ("model", "d_ff", m.d_ff.to_string()),
            ("model", "max_seq_len", m.max_seq_len.to_string()),
            ("model", "dropout", m.dropout.to_string()),
            ("model", "label_smoothing", m.label_smoothing.to_string()),
            ("model", "seed", m.seed.to_string()),
            ("train", "base_lr", t.sched.base_lr.to_string()),
            ("train", "warmup_steps", t.sched.warmup_steps.to_string()),
            ("train", "max_steps", t.max_steps.to_string()),
            ("train", "batch_size", t.batch_size.to_string()),
            ("train", "temperature", t.temperature.to_string()),
            ("train", "finetune_steps", t.finetune.render()),
            ("train", "eval_every", t.eval_every.to_string()),
            ("train", "patience", t.patience.to_string()),
            ("train", "seed", t.seed.to_string()),
            ("train", "extend_steps", self.extend_steps.to_string()),
            ("train", "control_arms", self.control_arms.to_string()),
            ("mask", "alpha", t.alpha.to_string()),
            ("mask", "scope", t.scope.to_string()),
            ("mask", "random_seed", self.random_seed.to_string()),
            (
                "mask",
                "extend_mode",
                match &self.extend_mode {
                    ExtendMode::Masked => "masked".to_string(),
                    ExtendMode::Unmasked => "unmasked".to_string(),
                    ExtendMode::Donor(p) => format!("donor:{p}"),
                },
            ),
            ("eval", "beam_size", self.decode.beam_size.to_string()),
            ("eval", "length_penalty", self.decode.length_penalty.to_string()),
            ("eval", "batch_size", self.decode.batch_size.to_string()),
            ("eval", "baseline", self.baseline.clone()),
            ("sweep", "alphas", join(&self.alphas, ", ")),
        ]
    }

    /// The resolved configuration as INI text; parsing it back yields the
    /// same configuration.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (section, key, value) in self.entries() {
            if section != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{section}]\n"));
                current = section;
            }
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }

    /// Hex SHA-256 of [`render`](Self::render), shortened to 16 digits.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.render().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Sets every seed at once.
    pub fn set_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self.random_seed = seed;
    }

    /// Checks ranges and the relations between sections.
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        let mut probe = self.model.clone();
        probe.vocab_size = crate::corpus::NUM_SPECIALS + 1;
        probe.validate()?;
        if self.model.max_seq_len < self.data.max_len + 2 {
            return Err(Error::config(
                "model.max_seq_len",
                format!("must be at least data.max_len + 2 = {}", self.data.max_len + 2),
            ));
        }
        self.train.validate()?;
        if self.decode.beam_size == 0 || self.decode.batch_size == 0 {
            return Err(Error::config("eval.beam_size", "beam and batch sizes must be positive"));
        }
        if self.alphas.is_empty() || self.alphas.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("sweep.alphas", "must be a non-empty increasing list"));
        }
        if let Some(a) = self.alphas.iter().find(|a| !(0.0..1.0).contains(*a)) {
            return Err(Error::config("sweep.alphas", format!("{a} is outside [0, 1)")));
        }
        if let ExtendMode::Donor(p) = &self.extend_mode {
            if !p.involves(&self.data.pivot) {
                return Err(Error::config("mask.extend_mode", "the donor must be a pivot pair"));
            }
        }
        Ok(())
    }

    /// Applies INI text on top of the current values.
    pub fn apply_ini(&mut self, text: &str) -> Result<()> {
        let ini = ini::Ini::load_from_str(text)
            .map_err(|e| Error::Parse { line: e.line, reason: e.msg.to_string() })?;
        for (section, props) in ini.iter() {
            let Some(section) = section else {
                if let Some((k, _)) = props.iter().next() {
                    return Err(Error::config(k, "key outside of any section"));
                }
                continue;
            };
            for (key, value) in props.iter() {
                self.set(section, key, value)?;
            }
        }
        Ok(())
    }

    /// Applies `LASS_<SECTION>_<KEY>` variables.
    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<()> {
        for (name, value) in vars {
            let Some(rest) = name.strip_prefix("LASS_") else { continue };
            let lower = rest.to_ascii_lowercase();
            let (section, key) = lower
                .split_once('_')
                .ok_or_else(|| Error::config(name.clone(), "expected LASS_<SECTION>_<KEY>"))?;
            self.set(section, key, &value)?;
        }
        Ok(())
    }

    /// Defaults, then the file (if any), then environment overrides, then
    /// validation.
    pub fn load(path: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            cfg.apply_ini(&text)?;
        }
        cfg.apply_env(env)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn tiers(&self) -> TierThresholds {
        self.data.tiers
    }
}
