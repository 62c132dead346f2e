//! Masked decoding and the reported metrics: BLEU, win ratio, translation
//! accuracy, and the encoder/decoder mask-swap probe.

mod decode;
mod metrics;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

pub use decode::{masked_view, translate, DecodeOptions};
pub use metrics::{corpus_bleu, translation_accuracy, win_ratio, BLEU_EPSILON};

use crate::corpus::{CorpusSet, LangPair, PairRole, Split, Tier};
use crate::error::{Error, Result};
use crate::mask::{compose, MaskSet, ParameterMask};
use crate::transformer::TransformerModel;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub pair: LangPair,
    pub split: String,
    pub bleu: f64,
    pub accuracy: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TierSummary {
    pub pairs: usize,
    pub bleu: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WinRatioBlock {
    pub baseline: String,
    pub overall: f64,
    pub tiers: BTreeMap<Tier, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub tiers: BTreeMap<Tier, TierSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub win_ratio: Option<WinRatioBlock>,
    #[serde(skip)]
    pair_tiers: BTreeMap<LangPair, Tier>,
}

impl EvalReport {
    /// Builds per-tier means over rows whose pair has training data.
    pub fn new(rows: Vec<EvalRow>, corpus: &CorpusSet) -> Self {
        let pair_tiers: BTreeMap<LangPair, Tier> = rows
            .iter()
            .filter_map(|r| {
                let data = corpus.pairs.get(&r.pair)?;
                (data.role != PairRole::ZeroShot)
                    .then(|| (r.pair.clone(), corpus.tiers.tier(data.train.len())))
            })
            .collect();
        let mut tiers = BTreeMap::new();
        for tier in Tier::ALL {
            let members: Vec<&EvalRow> =
                rows.iter().filter(|r| pair_tiers.get(&r.pair) == Some(&tier)).collect();
            if !members.is_empty() {
                let n = members.len() as f64;
                tiers.insert(
                    tier,
                    TierSummary {
                        pairs: members.len(),
                        bleu: members.iter().map(|r| r.bleu).sum::<f64>() / n,
                        accuracy: members.iter().map(|r| r.accuracy).sum::<f64>() / n,
                    },
                );
            }
        }
        Self {
            rows,
            tiers,
            win_ratio: None,
            pair_tiers,
        }
    }

    pub fn bleu_by_pair(&self) -> BTreeMap<LangPair, f64> {
        self.rows.iter().map(|r| (r.pair.clone(), r.bleu)).collect()
    }

    pub fn mean_bleu(&self) -> f64 {
        self.rows.iter().map(|r| r.bleu).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn mean_accuracy(&self) -> f64 {
        self.rows.iter().map(|r| r.accuracy).sum::<f64>() / self.rows.len().max(1) as f64
    }

    /// Mean BLEU over the pairs of one tier, if any.
    pub fn tier_bleu(&self, tier: Tier) -> Option<f64> {
        self.tiers.get(&tier).map(|t| t.bleu)
    }

    /// Attaches win ratios against `baseline`, overall and per tier.
    pub fn compare_with(&mut self, baseline: &EvalReport, baseline_name: &str) -> Result<()> {
        let ours = self.bleu_by_pair();
        let theirs = baseline.bleu_by_pair();
        let overall = win_ratio(&ours, &theirs)?;
        let mut tiers = BTreeMap::new();
        for tier in Tier::ALL {
            let pick = |m: &BTreeMap<LangPair, f64>| -> BTreeMap<LangPair, f64> {
                m.iter()
                    .filter(|(p, _)| self.pair_tiers.get(*p) == Some(&tier))
                    .map(|(p, v)| (p.clone(), *v))
                    .collect()
            };
            let (a, b) = (pick(&ours), pick(&theirs));
            if !a.is_empty() {
                tiers.insert(tier, win_ratio(&a, &b)?);
            }
        }
        self.win_ratio = Some(WinRatioBlock {
            baseline: baseline_name.to_string(),
            overall,
            tiers,
        });
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("pair,split,bleu,accuracy,n\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{:.4},{:.4},{}", r.pair, r.split, r.bleu, r.accuracy, r.n);
        }
        s
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Summary<'a> {
            tiers: &'a BTreeMap<Tier, TierSummary>,
            mean_bleu: f64,
            mean_accuracy: f64,
            #[serde(skip_serializing_if = "Option::is_none")]
            win_ratio: &'a Option<WinRatioBlock>,
        }
        serde_json::to_string_pretty(&Summary {
            tiers: &self.tiers,
            mean_bleu: self.mean_bleu(),
            mean_accuracy: self.mean_accuracy(),
            win_ratio: &self.win_ratio,
        })
        .expect("report serializes")
    }
}

/// Decodes one split of one pair under an optional mask and scores it.
pub fn evaluate_pair(
    model: &TransformerModel<f32>,
    mask: Option<&ParameterMask>,
    corpus: &CorpusSet,
    pair: &LangPair,
    split: Split,
    opts: &DecodeOptions,
) -> Result<(EvalRow, Vec<Vec<u32>>)> {
    let examples = corpus.pair(pair)?.split(split);
    if examples.is_empty() {
        return Err(Error::Data(format!("{pair} has no {split} examples")));
    }
    let sources: Vec<Vec<u32>> = examples
        .iter()
        .map(|e| corpus.source_ids(pair, &e.src))
        .collect::<Result<_>>()?;
    let target_token = corpus.registry.language(&pair.tgt)?.token;
    let hyps = translate(model, mask, &sources, target_token, opts)?;
    let refs: Vec<Vec<u32>> = examples.iter().map(|e| e.tgt.clone()).collect();
    let row = EvalRow {
        pair: pair.clone(),
        split: split.to_string(),
        bleu: corpus_bleu(&hyps, &refs)?,
        accuracy: translation_accuracy(&hyps, &pair.tgt, &corpus.registry)?,
        n: examples.len(),
    };
    Ok((row, hyps))
}

/// Which mask each pair is decoded with.
#[derive(Debug, Clone, Copy)]
pub enum MaskChoice<'a> {
    /// Full model for every pair.
    None,
    /// The pair's own mask from the set.
    Own(&'a MaskSet),
    /// Encoder from `X→pivot`, decoder from `pivot→Y` (zero-shot merge).
    Merged(&'a MaskSet),
}

pub fn mask_for(choice: MaskChoice<'_>, pair: &LangPair, pivot: &str) -> Result<Option<ParameterMask>> {
    match choice {
        MaskChoice::None => Ok(None),
        MaskChoice::Own(set) => Ok(Some(set.get(pair)?.clone())),
        MaskChoice::Merged(set) => {
            let enc = set.get(&LangPair::new(&pair.src, pivot))?;
            let dec = set.get(&LangPair::new(pivot, &pair.tgt))?;
            Ok(Some(crate::mask::merge_zero_shot(enc, dec)?))
        }
    }
}

pub fn evaluate(
    model: &TransformerModel<f32>,
    masks: MaskChoice<'_>,
    corpus: &CorpusSet,
    pairs: &[LangPair],
    split: Split,
    opts: &DecodeOptions,
) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let mask = mask_for(masks, pair, &corpus.registry.pivot)?;
        rows.push(evaluate_pair(model, mask.as_ref(), corpus, pair, split, opts)?.0);
    }
    Ok(EvalReport::new(rows, corpus))
}

/// One cell of the swap grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SwapRow {
    pub pair: LangPair,
    pub encoder_donor: LangPair,
    pub decoder_donor: LangPair,
    pub bleu: f64,
    pub accuracy: f64,
}

/// Evaluates `pair` with encoder bits from one donor mask and decoder bits
/// from another.
pub fn mask_swap_eval(
    model: &TransformerModel<f32>,
    masks: &MaskSet,
    corpus: &CorpusSet,
    pair: &LangPair,
    encoder_donor: &LangPair,
    decoder_donor: &LangPair,
    opts: &DecodeOptions,
) -> Result<SwapRow> {
    let mask = compose(masks.get(encoder_donor)?, masks.get(decoder_donor)?, pair.clone())?;
    let (row, _) = evaluate_pair(model, Some(&mask), corpus, pair, Split::Test, opts)?;
    Ok(SwapRow {
        pair: pair.clone(),
        encoder_donor: encoder_donor.clone(),
        decoder_donor: decoder_donor.clone(),
        bleu: row.bleu,
        accuracy: row.accuracy,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SwapGrid {
    pub own: SwapRow,
    pub encoder_swaps: Vec<SwapRow>,
    pub decoder_swaps: Vec<SwapRow>,
}

impl SwapGrid {
    pub fn worst_encoder_bleu(&self) -> Option<f64> {
        self.encoder_swaps.iter().map(|r| r.bleu).reduce(f64::min)
    }

    pub fn worst_decoder_bleu(&self) -> Option<f64> {
        self.decoder_swaps.iter().map(|r| r.bleu).reduce(f64::min)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("pair,swapped,encoder_donor,decoder_donor,bleu,accuracy\n");
        let rows = std::iter::once(("none", &self.own))
            .chain(self.encoder_swaps.iter().map(|r| ("encoder", r)))
            .chain(self.decoder_swaps.iter().map(|r| ("decoder", r)));
        for (kind, r) in rows {
            let _ = writeln!(
                s,
                "{},{kind},{},{},{:.4},{:.4}",
                r.pair, r.encoder_donor, r.decoder_donor, r.bleu, r.accuracy
            );
        }
        s
    }
}

/// For `X→Y` decoded through the pivot masks: replaces the encoder mask by
/// each `X'→pivot` and, separately, the decoder mask by each `pivot→Y'`,
/// for languages `X', Y'` outside `{X, Y}` that have masks.
pub fn swap_grid(
    model: &TransformerModel<f32>,
    masks: &MaskSet,
    corpus: &CorpusSet,
    pair: &LangPair,
    opts: &DecodeOptions,
) -> Result<SwapGrid> {
    let pivot = corpus.registry.pivot.as_str();
    let own_enc = if pair.src == pivot {
        pair.clone()
    } else {
        LangPair::new(&pair.src, pivot)
    };
    let own_dec = if pair.tgt == pivot {
        pair.clone()
    } else {
        LangPair::new(pivot, &pair.tgt)
    };
    let own = mask_swap_eval(model, masks, corpus, pair, &own_enc, &own_dec, opts)?;
    let others: Vec<String> = masks
        .pairs()
        .flat_map(|p| [p.src.clone(), p.tgt.clone()])
        .filter(|l| l != pivot && *l != pair.src && *l != pair.tgt)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut encoder_swaps = Vec::new();
    let mut decoder_swaps = Vec::new();
    for l in &others {
        let enc = LangPair::new(l, pivot);
        if masks.contains(&enc) {
            encoder_swaps.push(mask_swap_eval(model, masks, corpus, pair, &enc, &own_dec, opts)?);
        }
        let dec = LangPair::new(pivot, l);
        if masks.contains(&dec) {
            decoder_swaps.push(mask_swap_eval(model, masks, corpus, pair, &own_enc, &dec, opts)?);
        }
    }
    Ok(SwapGrid {
        own,
        encoder_swaps,
        decoder_swaps,
    })
}
