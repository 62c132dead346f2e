//! Joint training, per-pair fine-tune-and-prune mask finding, masked joint
//! training, and adding a new pair to a trained model.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::corpus::{derive_seed, BatchStream, CorpusSet, LangPair, PairSampler, Split};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_pair, DecodeOptions};
use crate::mask::{magnitude_prune, random_mask, MaskSet, ParameterMask, PruneScope};
use crate::tensor::{optimizer_step, LrSchedule, OptimizerState};
use crate::transformer::TransformerModel;

/// Fine-tune step counts keyed by the smallest train size they apply to.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneLadder(pub BTreeMap<usize, u64>);

impl Default for FinetuneLadder {
    fn default() -> Self {
        Self([(1, 100), (101, 200), (1001, 400), (10001, 800)].into_iter().collect())
    }
}

impl FinetuneLadder {
    pub fn steps_for(&self, size: usize) -> Result<u64> {
        self.0
            .range(..=size)
            .next_back()
            .map(|(_, &s)| s)
            .ok_or_else(|| Error::config("train.finetune_steps", format!("no bucket covers size {size}")))
    }

    /// `1:100,101:200,...`
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::config("train.finetune_steps", format!("expected `size:steps,...`, got `{s}`"));
        let mut map = BTreeMap::new();
        for item in s.split(',').map(str::trim).filter(|i| !i.is_empty()) {
            let (k, v) = item.split_once(':').ok_or_else(bad)?;
            map.insert(k.trim().parse().map_err(|_| bad())?, v.trim().parse().map_err(|_| bad())?);
        }
        if map.is_empty() {
            return Err(bad());
        }
        Ok(Self(map))
    }

    pub fn render(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k}:{v}")).collect::<Vec<_>>().join(",")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub sched: LrSchedule,
    /// Step budget of each joint phase (base training, continued training).
    pub max_steps: u64,
    pub batch_size: usize,
    pub temperature: f64,
    pub alpha: f64,
    pub scope: PruneScope,
    pub finetune: FinetuneLadder,
    /// Steps between validation passes; 0 disables them.
    pub eval_every: u64,
    /// Validation passes without improvement before stopping; 0 never stops.
    pub patience: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sched: LrSchedule {
                base_lr: 1e-3,
                warmup_steps: 300,
            },
            max_steps: 3000,
            batch_size: 32,
            temperature: 5.0,
            alpha: 0.3,
            scope: PruneScope::PerTensor,
            finetune: FinetuneLadder::default(),
            eval_every: 500,
            patience: 5,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        LrSchedule::new(self.sched.base_lr, self.sched.warmup_steps)
            .map_err(|_| Error::config("train.lr", "needs base_lr > 0 and warmup_steps >= 1"))?;
        if self.max_steps == 0 {
            return Err(Error::config("train.max_steps", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if !(self.temperature >= 1.0) {
            return Err(Error::config("train.temperature", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::config("mask.alpha", format!("{} is outside [0, 1)", self.alpha)));
        }
        if self.finetune.0.keys().next() != Some(&1) && self.finetune.0.keys().next() != Some(&0) {
            return Err(Error::config("train.finetune_steps", "the smallest bucket must start at 0 or 1"));
        }
        Ok(())
    }
}

/// One line of a metric history.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub pair: LangPair,
    pub split: Split,
    pub metric: &'static str,
    pub value: f64,
}

pub fn history_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("step,pair,split,metric,value\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.step, r.pair, r.split, r.metric, r.value);
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub steps: u64,
    pub stopped_early: bool,
    pub history: Vec<MetricRow>,
}

/// Stepwise joint trainer: temperature-sampled pair per step, one
/// single-pair batch, optional per-pair masks on both the forward pass and
/// the update.
pub struct Trainer<'c> {
    cfg: TrainConfig,
    masks: Option<&'c MaskSet>,
    sampler: PairSampler,
    streams: Vec<BatchStream<'c>>,
    state: Option<OptimizerState<f32>>,
    label: String,
    start_step: u64,
    done: u64,
}

impl<'c> Trainer<'c> {
    /// `label` seeds sampling, shuffling and dropout; `start_step` offsets the
    /// learning-rate schedule.
    pub fn new(
        corpus: &'c CorpusSet,
        pairs: &[LangPair],
        cfg: &TrainConfig,
        masks: Option<&'c MaskSet>,
        label: &str,
        start_step: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if pairs.is_empty() {
            return Err(Error::Usage("no language pairs to train on".into()));
        }
        if let Some(set) = masks {
            for p in pairs {
                if !set.contains(p) {
                    return Err(Error::config("mask", format!("no mask for trained pair {p}")));
                }
            }
        }
        let mut sized = Vec::with_capacity(pairs.len());
        let mut streams = Vec::with_capacity(pairs.len());
        for p in pairs {
            let data = corpus.pair(p)?;
            sized.push((p.clone(), data.train.len()));
            streams.push(BatchStream::new(
                corpus,
                p,
                cfg.batch_size,
                derive_seed(cfg.seed, &format!("{label}/stream/{p}")),
            )?);
        }
        let sampler = PairSampler::new(sized, cfg.temperature, derive_seed(cfg.seed, &format!("{label}/sampler")))?;
        Ok(Self {
            cfg: cfg.clone(),
            masks,
            sampler,
            streams,
            state: None,
            label: label.to_string(),
            start_step,
            done: 0,
        })
    }

    pub fn steps_done(&self) -> u64 {
        self.done
    }

    /// One update. On a non-finite loss or gradient the model is left as it
    /// was and a numerical error is returned.
    pub fn step(&mut self, model: &mut TransformerModel<f32>) -> Result<(LangPair, f64)> {
        let idx = self.sampler.next_index();
        let pair = self.sampler.pair(idx).clone();
        let batch = self.streams[idx].next_batch();
        let mask = match self.masks {
            Some(set) => Some(set.get(&pair)?),
            None => None,
        };
        let global = self.start_step + self.done + 1;
        let dropout_seed = derive_seed(self.cfg.seed, &format!("{}/dropout/{global}", self.label));
        let (out, grads) = match mask {
            Some(m) => model.with_params(m.apply(&model.params)?)?.loss_and_grads(&batch, Some(dropout_seed))?,
            None => model.loss_and_grads(&batch, Some(dropout_seed))?,
        };
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!("non-finite gradient at step {global} on {pair}")));
        }
        let lr = self.cfg.sched.lr_at(global)?;
        model.params.set_grads(grads)?;
        let state = self.state.get_or_insert_with(|| OptimizerState::new(&model.params));
        optimizer_step(&mut model.params, state, lr, mask)?;
        self.done += 1;
        Ok((pair, out.loss))
    }
}

/// Token-weighted mean validation loss per pair, each pair under its own
/// mask when masks are given.
pub fn validation_loss(
    model: &TransformerModel<f32>,
    corpus: &CorpusSet,
    pairs: &[LangPair],
    masks: Option<&MaskSet>,
    batch_size: usize,
) -> Result<BTreeMap<LangPair, f64>> {
    let mut out = BTreeMap::new();
    for p in pairs {
        let view;
        let m = match masks {
            Some(set) => {
                view = model.with_params(set.get(p)?.apply(&model.params)?)?;
                &view
            }
            None => model,
        };
        let (mut sum, mut tokens) = (0.0, 0usize);
        for b in BatchStream::sequential(corpus, p, &corpus.pair(p)?.valid, batch_size)? {
            let n = b.target_tokens();
            sum += m.loss(&b)?.loss * n as f64;
            tokens += n;
        }
        out.insert(p.clone(), if tokens == 0 { 0.0 } else { sum / tokens as f64 });
    }
    Ok(out)
}

/// Runs a trainer for `cfg.max_steps` with validation every `eval_every`
/// steps and early stopping on the uniform mean of per-pair validation loss.
pub fn train_loop(
    model: &mut TransformerModel<f32>,
    corpus: &CorpusSet,
    pairs: &[LangPair],
    cfg: &TrainConfig,
    masks: Option<&MaskSet>,
    label: &str,
    start_step: u64,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(corpus, pairs, cfg, masks, label, start_step)?;
    let mut history = Vec::new();
    let mut since: BTreeMap<LangPair, (f64, u64)> = BTreeMap::new();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let mut stopped_early = false;
    while trainer.steps_done() < cfg.max_steps {
        let (pair, loss) = trainer.step(model)?;
        let e = since.entry(pair).or_insert((0.0, 0));
        e.0 += loss;
        e.1 += 1;
        let step = trainer.steps_done();
        if cfg.eval_every > 0 && (step % cfg.eval_every == 0 || step == cfg.max_steps) {
            let global = start_step + step;
            for (p, (s, n)) in std::mem::take(&mut since) {
                history.push(MetricRow { step: global, pair: p, split: Split::Train, metric: "loss", value: s / n as f64 });
            }
            let valid = validation_loss(model, corpus, pairs, masks, cfg.batch_size.max(64))?;
            let mean = valid.values().sum::<f64>() / valid.len() as f64;
            for (p, v) in valid {
                history.push(MetricRow { step: global, pair: p, split: Split::Valid, metric: "loss", value: v });
            }
            if mean < best {
                best = mean;
                stale = 0;
            } else {
                stale += 1;
                if cfg.patience > 0 && stale >= cfg.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    Ok(TrainOutcome {
        steps: trainer.steps_done(),
        stopped_early,
        history,
    })
}

/// Base joint training from a fresh model.
pub fn train_joint(
    model: &mut TransformerModel<f32>,
    corpus: &CorpusSet,
    pairs: &[LangPair],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_loop(model, corpus, pairs, cfg, None, "base", 0)
}

/// Continued unmasked joint training: the equal-compute baseline.
pub fn continue_joint(
    model: &mut TransformerModel<f32>,
    corpus: &CorpusSet,
    pairs: &[LangPair],
    cfg: &TrainConfig,
    start_step: u64,
) -> Result<TrainOutcome> {
    train_loop(model, corpus, pairs, cfg, None, "continue", start_step)
}

/// Masked joint training from θ_0. Shares its seeds with [`continue_joint`],
/// so all-ones masks reproduce the baseline exactly.
pub fn lass_train(
    model: &mut TransformerModel<f32>,
    masks: &MaskSet,
    corpus: &CorpusSet,
    pairs: &[LangPair],
    cfg: &TrainConfig,
    start_step: u64,
) -> Result<TrainOutcome> {
    for (_, m) in masks.iter() {
        m.check_congruent(&model.params)?;
    }
    train_loop(model, corpus, pairs, cfg, Some(masks), "continue", start_step)
}

/// Unmasked training of a copy of `base` on one pair for `steps` steps.
pub fn finetune_pair(
    base: &TransformerModel<f32>,
    pair: &LangPair,
    corpus: &CorpusSet,
    cfg: &TrainConfig,
    steps: u64,
    start_step: u64,
) -> Result<TransformerModel<f32>> {
    corpus.pair(pair)?;
    let mut model = base.clone();
    if steps == 0 {
        return Ok(model);
    }
    let mut trainer = Trainer::new(corpus, std::slice::from_ref(pair), cfg, None, &format!("finetune/{pair}"), start_step)?;
    for _ in 0..steps {
        trainer.step(&mut model)?;
    }
    Ok(model)
}

/// Fine-tuned copies of `base`, one per pair, each trained for its bucketed
/// step count. Pruning these at any rate gives that rate's masks.
pub fn finetune_all(
    base: &TransformerModel<f32>,
    pairs: &[LangPair],
    corpus: &CorpusSet,
    cfg: &TrainConfig,
    start_step: u64,
) -> Result<Vec<(LangPair, TransformerModel<f32>)>> {
    pairs
        .iter()
        .map(|p| {
            let steps = cfg.finetune.steps_for(corpus.pair(p)?.train.len())?;
            Ok((p.clone(), finetune_pair(base, p, corpus, cfg, steps, start_step)?))
        })
        .collect()
}

/// Prunes every fine-tuned copy at `alpha`.
pub fn prune_all(tuned: &[(LangPair, TransformerModel<f32>)], alpha: f64, scope: PruneScope) -> Result<MaskSet> {
    MaskSet::from_masks(
        tuned
            .iter()
            .map(|(p, m)| magnitude_prune(&m.params, alpha, scope, p.clone()))
            .collect::<Result<Vec<_>>>()?,
    )
}

/// Fine-tunes a copy per pair and prunes it at `cfg.alpha`. With `alpha = 0`
/// pruning keeps everything, so the fine-tune is skipped.
pub fn find_masks(
    base: &TransformerModel<f32>,
    pairs: &[LangPair],
    corpus: &CorpusSet,
    cfg: &TrainConfig,
    start_step: u64,
) -> Result<MaskSet> {
    cfg.validate()?;
    if cfg.alpha == 0.0 {
        return MaskSet::from_masks(pairs.iter().map(|p| ParameterMask::all_ones(&base.params, p.clone())));
    }
    prune_all(&finetune_all(base, pairs, corpus, cfg, start_step)?, cfg.alpha, cfg.scope)
}

/// Random masks at the same density, the control arm.
pub fn random_masks(base: &TransformerModel<f32>, pairs: &[LangPair], alpha: f64, seed: u64) -> Result<MaskSet> {
    let mut set = MaskSet::new();
    for p in pairs {
        set.insert(random_mask(&base.params, alpha, derive_seed(seed, &format!("random/{p}")), p.clone())?)?;
    }
    Ok(set)
}

/// How the new pair's sub-network is chosen when extending.
#[derive(Debug, Clone, PartialEq)]
pub enum ExtendMode {
    /// Fine-tune on the new pair, prune, train under that mask.
    Masked,
    /// Train every parameter on the new pair.
    Unmasked,
    /// Reuse an existing pair's mask.
    Donor(LangPair),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtendPoint {
    pub step: u64,
    pub new_bleu: f64,
    pub existing_bleu: f64,
}

#[derive(Debug, Clone)]
pub struct ExtendOutcome {
    pub model: TransformerModel<f32>,
    pub mask: Option<ParameterMask>,
    pub trajectory: Vec<ExtendPoint>,
}

/// Trains `model` on `new_pair` alone for `steps` steps, recording the new
/// pair's validation BLEU and the mean validation BLEU of `existing` pairs
/// (each under its own mask) every `eval_every` steps and at both ends.
#[allow(clippy::too_many_arguments)]
pub fn extend_new_pair(
    model: &TransformerModel<f32>,
    masks: &MaskSet,
    corpus: &CorpusSet,
    new_pair: &LangPair,
    existing: &[LangPair],
    mode: &ExtendMode,
    cfg: &TrainConfig,
    steps: u64,
    start_step: u64,
) -> Result<ExtendOutcome> {
    if masks.contains(new_pair) {
        return Err(Error::Usage(format!("{new_pair} already has a sub-network")));
    }
    for lang in [&new_pair.src, &new_pair.tgt] {
        if corpus.registry.language(lang).is_err() {
            return Err(Error::Data(format!(
                "language `{lang}` is not in the vocabulary; regenerate the corpus with it included"
            )));
        }
    }
    corpus.pair(new_pair)?;
    let mask = match mode {
        ExtendMode::Unmasked => None,
        ExtendMode::Donor(d) => {
            let mut m = masks.get(d)?.clone();
            m.pair = new_pair.clone();
            Some(m)
        }
        ExtendMode::Masked => {
            let ft_steps = cfg.finetune.steps_for(corpus.pair(new_pair)?.train.len())?;
            let tuned = finetune_pair(model, new_pair, corpus, cfg, ft_steps, start_step)?;
            Some(magnitude_prune(&tuned.params, cfg.alpha, cfg.scope, new_pair.clone())?)
        }
    };
    let single = match &mask {
        Some(m) => Some(MaskSet::from_masks([m.clone()])?),
        None => None,
    };
    let opts = DecodeOptions::greedy();
    let probe = |m: &TransformerModel<f32>, step: u64| -> Result<ExtendPoint> {
        let (new_row, _) = evaluate_pair(m, mask.as_ref(), corpus, new_pair, Split::Valid, &opts)?;
        let mut total = 0.0;
        for p in existing {
            total += evaluate_pair(m, Some(masks.get(p)?), corpus, p, Split::Valid, &opts)?.0.bleu;
        }
        Ok(ExtendPoint {
            step,
            new_bleu: new_row.bleu,
            existing_bleu: if existing.is_empty() { 0.0 } else { total / existing.len() as f64 },
        })
    };
    let mut out = model.clone();
    let mut trajectory = vec![probe(&out, 0)?];
    if steps > 0 {
        let mut trainer = Trainer::new(
            corpus,
            std::slice::from_ref(new_pair),
            cfg,
            single.as_ref(),
            &format!("extend/{new_pair}"),
            start_step,
        )?;
        while trainer.steps_done() < steps {
            trainer.step(&mut out)?;
            let s = trainer.steps_done();
            if (cfg.eval_every > 0 && s % cfg.eval_every == 0) || s == steps {
                trajectory.push(probe(&out, s)?);
            }
        }
    }
    Ok(ExtendOutcome {
        model: out,
        mask,
        trajectory,
    })
}

#[cfg(test)]
mod tests;
