//! What the masks look like: pairwise similarity, where the language-specific
//! capacity sits by layer and component, how similarity tracks language
//! relatedness, and how the pruning rate trades off against quality.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use serde::Serialize;

use crate::corpus::{CorpusSet, LangPair, RelatednessMatrix, Split, Tier};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, DecodeOptions, EvalReport, MaskChoice};
use crate::mask::{similarity, similarity_on, MaskSet};
use crate::training::{finetune_all, find_masks, lass_train, prune_all, TrainConfig};
use crate::transformer::TransformerModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// pivot→x against pivot→x.
    FromPivot,
    /// x→pivot against x→pivot.
    ToPivot,
    /// pivot→x rows against x→pivot columns.
    Cross,
}

impl Grouping {
    pub const ALL: [Grouping; 3] = [Grouping::FromPivot, Grouping::ToPivot, Grouping::Cross];

    pub fn tag(self) -> &'static str {
        match self {
            Grouping::FromPivot => "from_pivot",
            Grouping::ToPivot => "to_pivot",
            Grouping::Cross => "cross",
        }
    }
}

impl fmt::Display for Grouping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityMatrix {
    pub grouping: Grouping,
    pub rows: Vec<LangPair>,
    pub cols: Vec<LangPair>,
    /// `values[i][j] = Sim(rows[i], cols[j])`.
    pub values: Vec<Vec<f64>>,
}

impl SimilarityMatrix {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("pair");
        for c in &self.cols {
            let _ = write!(s, ",{c}");
        }
        s.push('\n');
        for (r, row) in self.rows.iter().zip(&self.values) {
            let _ = write!(s, "{r}");
            for v in row {
                let _ = write!(s, ",{v:.6}");
            }
            s.push('\n');
        }
        s
    }
}

/// Similarities between the masks of one grouping, rows as first argument.
pub fn similarity_matrix(masks: &MaskSet, grouping: Grouping, pivot: &str) -> Result<SimilarityMatrix> {
    let from: Vec<LangPair> = masks.pairs().filter(|p| p.src == pivot).cloned().collect();
    let to: Vec<LangPair> = masks.pairs().filter(|p| p.tgt == pivot).cloned().collect();
    let (rows, cols) = match grouping {
        Grouping::FromPivot => (from.clone(), from),
        Grouping::ToPivot => (to.clone(), to),
        Grouping::Cross => {
            // align columns with rows by language
            let cols: Vec<LangPair> = from.iter().map(|p| p.reversed()).filter(|p| to.contains(p)).collect();
            let rows = cols.iter().map(|p| p.reversed()).collect();
            (rows, cols)
        }
    };
    let enough = match grouping {
        Grouping::Cross => !rows.is_empty(),
        _ => rows.len() >= 2,
    };
    if !enough {
        return Err(Error::Usage(format!("too few masks in the {grouping} grouping")));
    }
    let mut values = Vec::with_capacity(rows.len());
    for r in &rows {
        let mr = masks.get(r)?;
        values.push(cols.iter().map(|c| similarity(mr, masks.get(c)?)).collect::<Result<Vec<_>>>()?);
    }
    Ok(SimilarityMatrix {
        grouping,
        rows,
        cols,
        values,
    })
}

/// Average ranks, ties sharing the mean of their positions (1-based).
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Structure("rank correlation needs equal-length samples".into()));
    }
    if x.len() < 2 {
        return Err(Error::Metric("rank correlation needs at least two points".into()));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Metric("rank correlation of a constant sample is undefined".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// The non-pivot language of a pivot-centric pair.
fn other_language<'a>(p: &'a LangPair, pivot: &str) -> &'a str {
    if p.src == pivot {
        &p.tgt
    } else {
        &p.src
    }
}

/// Spearman correlation between off-diagonal mask similarities of
/// pivot-centric matrices and the relatedness of the languages involved,
/// pooled over all given matrices.
pub fn relatedness_correlation(
    matrices: &[&SimilarityMatrix],
    relatedness: &RelatednessMatrix,
    pivot: &str,
) -> Result<f64> {
    let (mut sims, mut rel) = (Vec::new(), Vec::new());
    for matrix in matrices {
        for (i, r) in matrix.rows.iter().enumerate() {
            for (j, c) in matrix.cols.iter().enumerate() {
                let (a, b) = (other_language(r, pivot), other_language(c, pivot));
                if a == b {
                    continue;
                }
                let v = relatedness
                    .get(a, b)
                    .ok_or_else(|| Error::Lookup { kind: "language", name: format!("{a}/{b}") })?;
                sims.push(matrix.values[i][j]);
                rel.push(v);
            }
        }
    }
    spearman(&sims, &rel)
}

/// Component classes; the decoder's self- and cross-attention share one
/// class per projection.
pub const COMPONENTS: [&str; 6] = ["q", "k", "v", "o", "ffn_1", "ffn_2"];

fn component_of(name: &str) -> Option<(&str, usize, &'static str)> {
    let mut parts = name.split('.');
    let stack = parts.next()?;
    let layer = parts.next()?.parse().ok()?;
    let comp = parts.next()?;
    if parts.next()? != "weight" {
        return None;
    }
    let class = match comp {
        "ffn_1" => "ffn_1",
        "ffn_2" => "ffn_2",
        other => {
            let proj = other.strip_prefix("attn_").or_else(|| other.strip_prefix("self_")).or_else(|| other.strip_prefix("cross_"))?;
            COMPONENTS[..4].iter().find(|c| **c == proj)?
        }
    };
    Some((stack, layer, class))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProfileRow {
    pub stack: String,
    pub layer: usize,
    pub component: &'static str,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CapacityProfile {
    pub rows: Vec<ProfileRow>,
}

impl CapacityProfile {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("stack,layer,component,similarity\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{:.6}", r.stack, r.layer, r.component, r.similarity);
        }
        s
    }

    pub fn get(&self, stack: &str, layer: usize, component: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.stack == stack && r.layer == layer && r.component == component)
            .map(|r| r.similarity)
    }
}

/// Mean similarity over all ordered pairs of distinct masks, restricted to
/// one (stack, layer, component class) at a time.
pub fn layer_component_profile(masks: &MaskSet) -> Result<CapacityProfile> {
    let all: Vec<_> = masks.iter().map(|(_, m)| m).collect();
    if all.len() < 2 {
        return Err(Error::Usage("a capacity profile needs at least two masks".into()));
    }
    let mut groups: BTreeMap<(String, usize, usize), Vec<String>> = BTreeMap::new();
    for name in all[0].tensors().keys() {
        if let Some((stack, layer, class)) = component_of(name) {
            let ci = COMPONENTS.iter().position(|c| *c == class).unwrap_or(0);
            groups.entry((stack.to_string(), layer, ci)).or_default().push(name.clone());
        }
    }
    let mut rows = Vec::with_capacity(groups.len());
    for ((stack, layer, ci), names) in groups {
        let (mut total, mut count) = (0.0, 0usize);
        for (i, a) in all.iter().enumerate() {
            for (j, b) in all.iter().enumerate() {
                if i != j {
                    total += similarity_on(a, b, |n| names.iter().any(|x| x == n))?;
                    count += 1;
                }
            }
        }
        rows.push(ProfileRow {
            stack,
            layer,
            component: COMPONENTS[ci],
            similarity: total / count as f64,
        });
    }
    Ok(CapacityProfile { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub tier: Tier,
    pub bleu: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Mean test BLEU over every evaluated pair, per α.
    pub overall: Vec<(f64, f64)>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("alpha,tier,bleu,accuracy\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{:.4},{:.4}", r.alpha, r.tier, r.bleu, r.accuracy);
        }
        s
    }

    /// α with the highest overall mean BLEU; the smallest on ties.
    pub fn best_alpha(&self) -> Option<f64> {
        let mut best: Option<(f64, f64)> = None;
        for &(a, b) in &self.overall {
            if best.map_or(true, |(_, bb)| b > bb) {
                best = Some((a, b));
            }
        }
        best.map(|(a, _)| a)
    }

    fn push_arm(&mut self, alpha: f64, report: &EvalReport) {
        for (tier, t) in &report.tiers {
            self.rows.push(SweepRow {
                alpha,
                tier: *tier,
                bleu: t.bleu,
                accuracy: t.accuracy,
            });
        }
        self.overall.push((alpha, report.mean_bleu()));
    }
}

/// For each α: masks from θ_0, masked training from θ_0, test evaluation
/// under the pairs' own masks. `on_arm` sees every finished arm, so callers
/// can flush partial results.
#[allow(clippy::too_many_arguments)]
pub fn sparsity_sweep(
    theta0: &TransformerModel<f32>,
    corpus: &CorpusSet,
    pairs: &[LangPair],
    cfg: &TrainConfig,
    alphas: &[f64],
    start_step: u64,
    opts: &DecodeOptions,
    mut on_arm: impl FnMut(f64, &EvalReport, &SweepReport) -> Result<()>,
) -> Result<SweepReport> {
    if alphas.is_empty() {
        return Err(Error::Usage("the sweep needs at least one pruning rate".into()));
    }
    if alphas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("sweep.alphas", "must be strictly increasing"));
    }
    for &a in alphas {
        if !(0.0..1.0).contains(&a) {
            return Err(Error::config("sweep.alphas", format!("{a} is outside [0, 1)")));
        }
    }
    cfg.validate()?;
    let tuned = if alphas.iter().any(|&a| a > 0.0) {
        finetune_all(theta0, pairs, corpus, cfg, start_step)?
    } else {
        Vec::new()
    };
    let mut report = SweepReport::default();
    for &alpha in alphas {
        let arm = TrainConfig { alpha, ..cfg.clone() };
        let masks = if alpha == 0.0 {
            find_masks(theta0, pairs, corpus, &arm, start_step)?
        } else {
            prune_all(&tuned, alpha, cfg.scope)?
        };
        let mut model = theta0.clone();
        lass_train(&mut model, &masks, corpus, pairs, &arm, start_step)?;
        let eval = evaluate(&model, MaskChoice::Own(&masks), corpus, pairs, Split::Test, opts)?;
        report.push_arm(alpha, &eval);
        on_arm(alpha, &eval, &report)?;
    }
    Ok(report)
}
